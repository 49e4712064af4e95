fn main() {
    eprintln!("rig: command-line interface not wired up yet");
    std::process::exit(1);
}
