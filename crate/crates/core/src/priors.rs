//! Scene prior: an affine latent-to-grid decoder trained jointly with
//! per-scene latent codes and a density model over the latent space.
//!
//! Every training scene keeps a free latent vector. A shared affine decoder
//! maps a latent to the raw parameters of a radiance grid, and a prior over
//! latents is fit at the same time — either an affine-coupling normalizing
//! flow (exact log density, exact inverse) or a small latent diffusion
//! denoiser (sampling plus a weighted denoising bound). The per-step
//! objective is
//!
//!   λ_rec · (− image log likelihood) + prior term + latent_l2 · ‖x‖²,
//!
//! optimized in the generative-latent-optimization style: a few latent-only
//! substeps follow the gradient through the frozen model, then one joint
//! step moves the latent, the decoder, and the prior together. Training is
//! single-threaded and fully determined by the seed.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ancestral_sample, mlp_forward, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::{read_f64_blob, read_json, write_f64_blob, write_json};
use crate::opt::{smoothed_tail, Adam};
use crate::render::{
    log_likelihood_graph, render_image, Camera, GridVar, Image, LikelihoodCfg, RadianceGrid,
    RenderCfg,
};
use crate::rngs::{standard_normal_vec, stream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, DenseArray, LN_TAU};

/// Per-scene latent code.
pub type SceneLatent = DenseArray;

/// Upper bound on |log scale| inside a coupling layer; keeps exp(s) and its
/// inverse well conditioned no matter how far the conditioner drifts.
const LOG_SCALE_CAP: f64 = 2.0;

fn tanh_stable(x: f64) -> f64 {
    2.0 * sigmoid(2.0 * x) - 1.0
}

/// Same composition as [`tanh_stable`] so host and tape values agree bitwise.
fn tanh_graph(tape: &mut Tape, v: Var) -> Var {
    let d = tape.mul_scalar(v, 2.0);
    let s = tape.sigmoid(d);
    let s2 = tape.mul_scalar(s, 2.0);
    tape.add_scalar(s2, -1.0)
}

/// Broadcast a bias row `[h]` to `[n, h]` with a constant-index gather.
fn tile_bias(tape: &mut Tape, row: Var, n: usize) -> Var {
    let h = tape.value(row).len();
    let idx: Vec<u32> = (0..n).flat_map(|_| 0..h as u32).collect();
    let g = tape.gather(row, Arc::new(idx));
    tape.reshape(g, vec![n, h])
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Affine map from a latent to the raw parameters of a radiance grid:
/// raw = Wᵀx + b with W stored latent-major, biases last.
#[derive(Debug, Clone)]
pub struct LatentDecoder {
    pub latent_dim: usize,
    pub resolution: usize,
    /// Flat `[latent_dim · out + out]` with out = 4·resolution³.
    pub params: DenseArray,
}

impl LatentDecoder {
    pub fn param_len(latent_dim: usize, resolution: usize) -> usize {
        let out = 4 * resolution * resolution * resolution;
        latent_dim * out + out
    }

    /// Small random weights, zero biases: the zero latent decodes to the
    /// all-zero raw grid.
    pub fn init(latent_dim: usize, resolution: usize, rng: &mut Stream) -> Self {
        assert!(latent_dim >= 1, "empty latent");
        assert!(resolution >= 2, "grid resolution must be at least 2");
        let out = 4 * resolution * resolution * resolution;
        let mut p = vec![0.0; latent_dim * out + out];
        for v in &mut p[..latent_dim * out] {
            *v = 0.01 * rng.sample::<f64, _>(StandardNormal);
        }
        LatentDecoder {
            latent_dim,
            resolution,
            params: DenseArray::vector(p),
        }
    }

    pub fn out_len(&self) -> usize {
        4 * self.resolution * self.resolution * self.resolution
    }

    pub fn decode(&self, x: &SceneLatent) -> Result<RadianceGrid> {
        if x.len() != self.latent_dim {
            return Err(Error::InvalidArg(format!(
                "latent length {} does not match decoder input {}",
                x.len(),
                self.latent_dim
            )));
        }
        let out = self.out_len();
        let (w, b) = self.params.data().split_at(self.latent_dim * out);
        // Accumulate latent-major, add biases last: the same association the
        // tape matmul + add uses, so both paths agree to the last bit.
        let mut raw = vec![0.0; out];
        for (d, &xv) in x.data().iter().enumerate() {
            let row = &w[d * out..(d + 1) * out];
            for (r, &wv) in raw.iter_mut().zip(row) {
                *r += xv * wv;
            }
        }
        for (r, &bv) in raw.iter_mut().zip(b) {
            *r += bv;
        }
        RadianceGrid::from_raw(self.resolution, DenseArray::vector(raw))
    }

    /// Tape twin of [`decode`]; `params` carries this decoder's layout.
    pub fn decode_graph(&self, tape: &mut Tape, params: Var, x: Var) -> Var {
        let d = self.latent_dim;
        let out = self.out_len();
        let x2 = tape.reshape(x, vec![1, d]);
        let w = tape.slice_shaped(params, 0..d * out, vec![d, out]);
        let h = tape.matmul(x2, w);
        let hv = tape.reshape(h, vec![out]);
        let b = tape.slice(params, d * out..d * out + out);
        tape.add(hv, b)
    }
}

// ---------------------------------------------------------------------------
// Affine-coupling flow
// ---------------------------------------------------------------------------

/// Normalizing flow over latents built from affine coupling layers with
/// alternating passive masks. The passive half of each layer feeds a one
/// hidden layer conditioner producing a capped log scale and a shift for the
/// active half, so both the forward (normalizing) map and its inverse are
/// exact coordinate-wise expressions.
#[derive(Debug, Clone)]
pub struct FlowPrior {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Per layer: [w1 dim·hidden][b1 hidden][w_s hidden·dim][b_s dim]
    /// [w_t hidden·dim][b_t dim], layers concatenated.
    pub params: DenseArray,
}

struct LayerRanges {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2s: std::ops::Range<usize>,
    b2s: std::ops::Range<usize>,
    w2t: std::ops::Range<usize>,
    b2t: std::ops::Range<usize>,
}

impl FlowPrior {
    fn layer_stride(dim: usize, hidden: usize) -> usize {
        dim * hidden + hidden + 2 * (hidden * dim + dim)
    }

    pub fn param_len(dim: usize, hidden: usize, layers: usize) -> usize {
        layers * Self::layer_stride(dim, hidden)
    }

    /// Random conditioner input weights, zero scale/shift heads: the flow
    /// starts as the exact identity map with zero log-determinant.
    pub fn init(dim: usize, hidden: usize, layers: usize, rng: &mut Stream) -> Self {
        assert!(dim >= 1 && hidden >= 1 && layers >= 1, "degenerate flow");
        let mut p = vec![0.0; Self::param_len(dim, hidden, layers)];
        let in_std = 1.0 / (dim as f64).sqrt();
        for l in 0..layers {
            let r = Self::ranges(dim, hidden, l);
            for v in &mut p[r.w1] {
                *v = in_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        FlowPrior {
            dim,
            hidden,
            layers,
            params: DenseArray::vector(p),
        }
    }

    fn ranges(dim: usize, hidden: usize, layer: usize) -> LayerRanges {
        let s = layer * Self::layer_stride(dim, hidden);
        let w1 = s..s + dim * hidden;
        let b1 = w1.end..w1.end + hidden;
        let w2s = b1.end..b1.end + hidden * dim;
        let b2s = w2s.end..w2s.end + dim;
        let w2t = b2s.end..b2s.end + hidden * dim;
        let b2t = w2t.end..w2t.end + dim;
        LayerRanges { w1, b1, w2s, b2s, w2t, b2t }
    }

    /// Coordinates left unchanged by `layer` (they feed the conditioner).
    fn passive(layer: usize, i: usize) -> bool {
        (i + layer) % 2 == 0
    }

    /// Log scale (already capped) and shift for the active coordinates, from
    /// the masked input `u` (active entries zeroed).
    fn conditioner(&self, layer: usize, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, hd) = (self.dim, self.hidden);
        let r = Self::ranges(d, hd, layer);
        let p = self.params.data();
        let (w1, b1) = (&p[r.w1], &p[r.b1]);
        let mut h = vec![0.0; hd];
        for (i, &ui) in u.iter().enumerate() {
            let row = &w1[i * hd..(i + 1) * hd];
            for (hj, &wv) in h.iter_mut().zip(row) {
                *hj += ui * wv;
            }
        }
        for (hj, &bv) in h.iter_mut().zip(b1) {
            *hj = tanh_stable(*hj + bv);
        }
        let head = |w: &[f64], b: &[f64]| -> Vec<f64> {
            let mut o = vec![0.0; d];
            for (j, &hj) in h.iter().enumerate() {
                let row = &w[j * d..(j + 1) * d];
                for (oi, &wv) in o.iter_mut().zip(row) {
                    *oi += hj * wv;
                }
            }
            for (oi, &bv) in o.iter_mut().zip(b) {
                *oi += bv;
            }
            o
        };
        let mut s = head(&p[r.w2s], &p[r.b2s]);
        for v in &mut s {
            *v = LOG_SCALE_CAP * tanh_stable(*v);
        }
        let t = head(&p[r.w2t], &p[r.b2t]);
        (s, t)
    }

    /// Normalizing direction x → z; returns (z, log|det ∂z/∂x|).
    pub fn forward(&self, x: &DenseArray) -> Result<(DenseArray, f64)> {
        if x.len() != self.dim {
            return Err(Error::InvalidArg(format!(
                "flow input length {} does not match dim {}",
                x.len(),
                self.dim
            )));
        }
        let mut cur = x.data().to_vec();
        let mut logdet = 0.0;
        for l in 0..self.layers {
            let u: Vec<f64> = cur
                .iter()
                .enumerate()
                .map(|(i, &v)| if Self::passive(l, i) { v } else { 0.0 })
                .collect();
            let (s, t) = self.conditioner(l, &u);
            let mut layer_ld = 0.0;
            for i in 0..self.dim {
                if !Self::passive(l, i) {
                    cur[i] = cur[i] * s[i].exp() + t[i];
                    layer_ld += s[i];
                }
            }
            logdet += layer_ld;
        }
        Ok((DenseArray::vector(cur), logdet))
    }

    /// Generative direction z → x; exact inverse of [`forward`].
    pub fn inverse(&self, z: &DenseArray) -> Result<DenseArray> {
        if z.len() != self.dim {
            return Err(Error::InvalidArg(format!(
                "flow input length {} does not match dim {}",
                z.len(),
                self.dim
            )));
        }
        let mut cur = z.data().to_vec();
        for l in (0..self.layers).rev() {
            let u: Vec<f64> = cur
                .iter()
                .enumerate()
                .map(|(i, &v)| if Self::passive(l, i) { v } else { 0.0 })
                .collect();
            let (s, t) = self.conditioner(l, &u);
            for i in 0..self.dim {
                if !Self::passive(l, i) {
                    cur[i] = (cur[i] - t[i]) * (-s[i]).exp();
                }
            }
        }
        Ok(DenseArray::vector(cur))
    }

    /// Exact log density under the flow with a standard normal base.
    pub fn log_prob(&self, x: &DenseArray) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        let ss: f64 = z.data().iter().map(|v| v * v).sum();
        let base = ss * -0.5 + -0.5 * self.dim as f64 * LN_TAU;
        Ok(base + logdet)
    }

    pub fn sample(&self, rng: &mut Stream) -> Result<DenseArray> {
        let z = standard_normal_vec(rng, self.dim);
        self.inverse(&z)
    }

    /// Tape twin of [`log_prob`] for a batch `xs` of shape `[n, dim]`;
    /// returns the per-row log densities `[n]`. `params` carries this flow's
    /// layout so training can make it a leaf.
    pub fn log_prob_graph(&self, tape: &mut Tape, params: Var, xs: Var) -> Var {
        let shape = tape.value(xs).shape().to_vec();
        assert_eq!(shape.len(), 2, "flow batch must be [n, dim], got {shape:?}");
        assert_eq!(shape[1], self.dim, "flow batch width");
        let n = shape[0];
        let (d, hd) = (self.dim, self.hidden);

        // Masks only depend on layer parity; build both [n, d] constants once.
        let mut mask_pair = |parity: usize| -> (Var, Var) {
            let pm: Vec<f64> = (0..n * d)
                .map(|k| if Self::passive(parity, k % d) { 1.0 } else { 0.0 })
                .collect();
            let am: Vec<f64> = pm.iter().map(|&v| 1.0 - v).collect();
            (
                tape.constant(DenseArray::from_vec(vec![n, d], pm)),
                tape.constant(DenseArray::from_vec(vec![n, d], am)),
            )
        };
        let masks = [mask_pair(0), mask_pair(1)];

        let mut cur = xs;
        let mut logdet: Option<Var> = None;
        for l in 0..self.layers {
            let (pm, am) = masks[l % 2];
            let r = Self::ranges(d, hd, l);
            let u = tape.mul(cur, pm);
            let w1 = tape.slice_shaped(params, r.w1, vec![d, hd]);
            let h0 = tape.matmul(u, w1);
            let b1 = tape.slice(params, r.b1);
            let b1t = tile_bias(tape, b1, n);
            let h1 = tape.add(h0, b1t);
            let h = tanh_graph(tape, h1);

            let w2s = tape.slice_shaped(params, r.w2s, vec![hd, d]);
            let s0 = tape.matmul(h, w2s);
            let b2s = tape.slice(params, r.b2s);
            let b2st = tile_bias(tape, b2s, n);
            let sraw = tape.add(s0, b2st);
            let sth = tanh_graph(tape, sraw);
            let s = tape.mul_scalar(sth, LOG_SCALE_CAP);

            let w2t = tape.slice_shaped(params, r.w2t, vec![hd, d]);
            let t0 = tape.matmul(h, w2t);
            let b2t = tape.slice(params, r.b2t);
            let b2tt = tile_bias(tape, b2t, n);
            let t = tape.add(t0, b2tt);

            let es = tape.exp(s);
            let scaled0 = tape.mul(cur, es);
            let scaled = tape.add(scaled0, t);
            let keep = tape.mul(cur, pm);
            let swap = tape.mul(scaled, am);
            cur = tape.add(keep, swap);

            let ms = tape.mul(s, am);
            let ld = tape.segment_sum(ms, d);
            logdet = Some(match logdet {
                None => ld,
                Some(prev) => tape.add(prev, ld),
            });
        }
        let sq = tape.square(cur);
        let ss = tape.segment_sum(sq, d);
        let half = tape.mul_scalar(ss, -0.5);
        let base = tape.add_scalar(half, -0.5 * d as f64 * LN_TAU);
        match logdet {
            Some(ld) => tape.add(base, ld),
            None => base,
        }
    }
}

// ---------------------------------------------------------------------------
// Training configuration and data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Flow,
    Diffusion,
}

/// Joint decoder/latent/prior training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GLOTrainCfg {
    pub latent_dim: usize,
    pub grid_resolution: usize,
    /// Weight on the image reconstruction term.
    pub lambda_rec: f64,
    /// Weight on the latent prior term (flow negative log density or the
    /// weighted denoising loss).
    pub lambda_diff: f64,
    /// Weight on ‖x‖² per latent.
    pub latent_l2: f64,
    /// Stdev of the Gaussian latent initialization; 0 starts all latents at
    /// the origin.
    pub latent_init_scale: f64,
    pub steps: usize,
    /// Latent-only substeps before each joint step.
    pub substeps: usize,
    /// Rays drawn per objective evaluation; 0 uses every ray of the view.
    pub rays_per_step: usize,
    pub sigma_y: f64,
    pub lr_latent: f64,
    pub lr_model: f64,
    pub flow_hidden: usize,
    pub flow_layers: usize,
    pub denoiser_hidden: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl GLOTrainCfg {
    pub fn defaults(kind: PriorKind) -> Self {
        GLOTrainCfg {
            latent_dim: 64,
            grid_resolution: 16,
            lambda_rec: 1.0,
            lambda_diff: 1.0,
            latent_l2: 10.0,
            latent_init_scale: match kind {
                PriorKind::Flow => 0.0,
                PriorKind::Diffusion => 0.1,
            },
            steps: 2000,
            substeps: 4,
            rays_per_step: 64,
            sigma_y: 0.05,
            lr_latent: 1e-2,
            lr_model: 3e-3,
            flow_hidden: 64,
            flow_layers: 6,
            denoiser_hidden: 128,
            checkpoint_every: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_diff", self.lambda_diff),
            ("sigma_y", self.sigma_y),
            ("lr_latent", self.lr_latent),
            ("lr_model", self.lr_model),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArg(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("latent_l2", self.latent_l2),
            ("latent_init_scale", self.latent_init_scale),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArg(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidArg("latent_dim must be at least 1".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::InvalidArg("grid_resolution must be at least 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArg("steps must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArg("checkpoint_every must be at least 1".into()));
        }
        if self.flow_hidden == 0 || self.flow_layers == 0 || self.denoiser_hidden == 0 {
            return Err(Error::InvalidArg("prior architecture sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One observation of a scene.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub image: Image,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct TrainScene {
    pub views: Vec<TrainView>,
}

// ---------------------------------------------------------------------------
// Trained prior and bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum TrainedPrior {
    Flow(FlowPrior),
    Diffusion(MlpDenoiser),
}

impl TrainedPrior {
    pub fn kind(&self) -> PriorKind {
        match self {
            TrainedPrior::Flow(_) => PriorKind::Flow,
            TrainedPrior::Diffusion(_) => PriorKind::Diffusion,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TrainedPrior::Flow(f) => f.dim,
            TrainedPrior::Diffusion(d) => d.dim,
        }
    }

    /// Draw one latent from the prior.
    pub fn sample(&self, rng: &mut Stream) -> Result<SceneLatent> {
        match self {
            TrainedPrior::Flow(f) => f.sample(rng),
            TrainedPrior::Diffusion(d) => ancestral_sample(d, vec![d.dim], rng),
        }
    }
}

/// Everything needed to decode and score latents after training.
#[derive(Debug, Clone)]
pub struct PriorBundle {
    pub decoder: LatentDecoder,
    pub prior: TrainedPrior,
    pub latents: Vec<SceneLatent>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CheckpointStat {
    pub step: usize,
    /// Joint loss averaged over the trailing 100 steps.
    pub smoothed_loss: f64,
    pub mean_latent_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub bundle: PriorBundle,
    /// Joint-step loss per step.
    pub trace: Vec<f64>,
    pub checkpoints: Vec<CheckpointStat>,
    pub psnr_init: f64,
    pub psnr_final: f64,
}

// ---------------------------------------------------------------------------
// Joint training
// ---------------------------------------------------------------------------

struct StepDraws {
    subsample_seed: u64,
    /// Denoising time and standard-normal noise; present for the diffusion
    /// prior only.
    diff: Option<(f64, DenseArray)>,
}

fn step_draws(rng: &mut Stream, kind: PriorKind, dim: usize) -> StepDraws {
    let subsample_seed = rng.gen();
    let diff = match kind {
        PriorKind::Flow => None,
        PriorKind::Diffusion => {
            let t: f64 = rng.gen();
            Some((t, standard_normal_vec(rng, dim)))
        }
    };
    StepDraws { subsample_seed, diff }
}

fn glo_loss(
    tape: &mut Tape,
    view: &TrainView,
    decoder: &LatentDecoder,
    dec_params: Var,
    x: Var,
    prior: &TrainedPrior,
    prior_params: Var,
    cfg: &GLOTrainCfg,
    draws: &StepDraws,
) -> Result<Var> {
    let raw = decoder.decode_graph(tape, dec_params, x);
    let gv = GridVar { resolution: decoder.resolution, raw };
    let rays = view.camera.rays();
    let subsample = if cfg.rays_per_step == 0 || cfg.rays_per_step >= rays {
        0
    } else {
        cfg.rays_per_step
    };
    let lik = LikelihoodCfg { sigma_y: cfg.sigma_y, subsample };
    let ll = log_likelihood_graph(
        tape,
        &view.image,
        gv,
        None,
        &view.camera,
        None,
        &RenderCfg::default(),
        &lik,
        draws.subsample_seed,
    )?;
    let rec = tape.mul_scalar(ll, -cfg.lambda_rec);

    let prior_term = match prior {
        TrainedPrior::Flow(flow) => {
            let xs = tape.reshape(x, vec![1, flow.dim]);
            let lp = flow.log_prob_graph(tape, prior_params, xs);
            tape.mul_scalar(lp, -cfg.lambda_diff)
        }
        TrainedPrior::Diffusion(den) => {
            let (t, eps) = draws.diff.as_ref().expect("diffusion draws");
            let ns = &den.schedule;
            let (a, sg) = (ns.alpha(*t), ns.sigma(*t));
            let ax = tape.mul_scalar(x, a);
            let se = tape.constant(eps.map(|v| sg * v));
            let z = tape.add(ax, se);
            let z2 = tape.reshape(z, vec![1, den.dim]);
            let eps_hat = mlp_forward(tape, den.layout(), prior_params, z2, &[*t]);
            let eps_c = tape.constant(DenseArray::from_vec(vec![1, den.dim], eps.data().to_vec()));
            let r = tape.sub(eps_hat, eps_c);
            let sq = tape.sum_sq(r);
            tape.mul_scalar(sq, cfg.lambda_diff * ns.elbo_weight(*t))
        }
    };

    let xsq = tape.sum_sq(x);
    let reg = tape.mul_scalar(xsq, cfg.latent_l2);
    let partial = tape.add(rec, prior_term);
    Ok(tape.add(partial, reg))
}

struct Phase {
    tape: Tape,
    loss: Var,
    x: Var,
    /// (decoder params, prior params) when they are leaves.
    model: Option<(Var, Var)>,
}

fn build_phase(
    view: &TrainView,
    decoder: &LatentDecoder,
    prior: &TrainedPrior,
    latent: &SceneLatent,
    cfg: &GLOTrainCfg,
    draws: &StepDraws,
    joint: bool,
) -> Result<Phase> {
    let mut tape = Tape::new();
    let x = tape.leaf(latent.clone());
    let prior_host = match prior {
        TrainedPrior::Flow(f) => &f.params,
        TrainedPrior::Diffusion(d) => &d.params,
    };
    let (dv, pv) = if joint {
        (tape.leaf(decoder.params.clone()), tape.leaf(prior_host.clone()))
    } else {
        (tape.constant(decoder.params.clone()), tape.constant(prior_host.clone()))
    };
    let loss = glo_loss(&mut tape, view, decoder, dv, x, prior, pv, cfg, draws)?;
    if let Some(fault) = tape.take_fault() {
        return Err(fault);
    }
    Ok(Phase { tape, loss, x, model: joint.then_some((dv, pv)) })
}

fn grad_or_zero(grads: &[Option<DenseArray>], v: Var, len: usize) -> DenseArray {
    match &grads[v.id()] {
        Some(g) => g.clone(),
        None => DenseArray::zeros(vec![len]),
    }
}

/// Global PSNR (peak 1.0) of the decoded latents' renders against every
/// training view, pooling squared error over all pixels.
pub fn reconstruction_psnr(
    dataset: &[TrainScene],
    decoder: &LatentDecoder,
    latents: &[SceneLatent],
) -> Result<f64> {
    if dataset.len() != latents.len() {
        return Err(Error::InvalidArg(format!(
            "{} scenes but {} latents",
            dataset.len(),
            latents.len()
        )));
    }
    let rcfg = RenderCfg::default();
    let mut se = 0.0;
    let mut n = 0usize;
    for (scene, x) in dataset.iter().zip(latents) {
        let grid = decoder.decode(x)?;
        for view in &scene.views {
            let img = render_image(&grid, None, &view.camera, &rcfg)?;
            for (a, b) in img.data.data().iter().zip(view.image.data.data()) {
                se += (a - b) * (a - b);
            }
            n += img.data.len();
        }
    }
    if n == 0 {
        return Err(Error::InvalidArg("no pixels to compare".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Fit per-scene latents, the shared decoder, and the latent prior jointly.
///
/// Round-robins over scenes; each step picks a random view, runs
/// `cfg.substeps` latent-only updates against the frozen model, then one
/// joint update of latent + decoder + prior. Any non-finite objective or
/// gradient aborts with a divergence error. The whole run is a pure function
/// of the dataset and `cfg` (including its seed).
pub fn train_joint(
    dataset: &[TrainScene],
    kind: PriorKind,
    cfg: &GLOTrainCfg,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg("training set is empty".into()));
    }
    for (i, scene) in dataset.iter().enumerate() {
        if scene.views.is_empty() {
            return Err(Error::InvalidArg(format!("scene {i} has no views")));
        }
        for view in &scene.views {
            view.camera.validate()?;
            if view.image.height != view.camera.height || view.image.width != view.camera.width {
                return Err(Error::InvalidArg(format!(
                    "scene {i}: image {}x{} does not match camera {}x{}",
                    view.image.height, view.image.width, view.camera.height, view.camera.width
                )));
            }
        }
    }

    let d = cfg.latent_dim;
    let mut rng = stream(cfg.seed, "glo-train", 0);
    let mut decoder = LatentDecoder::init(d, cfg.grid_resolution, &mut rng);
    let mut prior = match kind {
        PriorKind::Flow => {
            TrainedPrior::Flow(FlowPrior::init(d, cfg.flow_hidden, cfg.flow_layers, &mut rng))
        }
        PriorKind::Diffusion => TrainedPrior::Diffusion(MlpDenoiser::init(
            d,
            cfg.denoiser_hidden,
            NoiseSchedule::default(),
            &mut rng,
        )),
    };
    let mut latents: Vec<SceneLatent> = (0..dataset.len())
        .map(|_| {
            if cfg.latent_init_scale == 0.0 {
                DenseArray::zeros(vec![d])
            } else {
                standard_normal_vec(&mut rng, d).map(|v| cfg.latent_init_scale * v)
            }
        })
        .collect();

    let psnr_init = reconstruction_psnr(dataset, &decoder, &latents)?;

    let mut adam_x: Vec<Adam> = (0..dataset.len()).map(|_| Adam::new(d)).collect();
    let mut adam_dec = Adam::new(decoder.params.len());
    let prior_len = match &prior {
        TrainedPrior::Flow(f) => f.params.len(),
        TrainedPrior::Diffusion(den) => den.params.len(),
    };
    let mut adam_prior = Adam::new(prior_len);

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();

    for step in 0..cfg.steps {
        let sc = step % dataset.len();
        let scene = &dataset[sc];
        let view = &scene.views[rng.gen_range(0..scene.views.len())];

        for _ in 0..cfg.substeps {
            let draws = step_draws(&mut rng, kind, d);
            let phase = build_phase(view, &decoder, &prior, &latents[sc], cfg, &draws, false)
                .map_err(|e| Error::Diverged { step, what: e.to_string() })?;
            let grads = phase
                .tape
                .backward(phase.loss)
                .map_err(|e| Error::Diverged { step, what: e.to_string() })?;
            let gx = grad_or_zero(&grads, phase.x, d);
            adam_x[sc].step(&mut latents[sc], &gx, cfg.lr_latent);
        }

        let draws = step_draws(&mut rng, kind, d);
        let phase = build_phase(view, &decoder, &prior, &latents[sc], cfg, &draws, true)
            .map_err(|e| Error::Diverged { step, what: e.to_string() })?;
        let loss_val = phase.tape.value(phase.loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step, what: format!("joint loss {loss_val}") });
        }
        let grads = phase
            .tape
            .backward(phase.loss)
            .map_err(|e| Error::Diverged { step, what: e.to_string() })?;
        let gx = grad_or_zero(&grads, phase.x, d);
        adam_x[sc].step(&mut latents[sc], &gx, cfg.lr_latent);
        let (dv, pv) = phase.model.expect("joint phase has model leaves");
        let gd = grad_or_zero(&grads, dv, decoder.params.len());
        adam_dec.step(&mut decoder.params, &gd, cfg.lr_model);
        let gp = grad_or_zero(&grads, pv, prior_len);
        match &mut prior {
            TrainedPrior::Flow(f) => adam_prior.step(&mut f.params, &gp, cfg.lr_model),
            TrainedPrior::Diffusion(den) => adam_prior.step(&mut den.params, &gp, cfg.lr_model),
        }
        trace.push(loss_val);

        if (step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps {
            let mean_norm = latents
                .iter()
                .map(|x| x.data().iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / latents.len() as f64;
            checkpoints.push(CheckpointStat {
                step: step + 1,
                smoothed_loss: smoothed_tail(&trace, 100),
                mean_latent_norm: mean_norm,
            });
        }
    }

    let psnr_final = reconstruction_psnr(dataset, &decoder, &latents)?;
    Ok(TrainOutput {
        bundle: PriorBundle { decoder, prior, latents },
        trace,
        checkpoints,
        psnr_init,
        psnr_final,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FlowHeader {
    hidden: usize,
    layers: usize,
    params: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    kind: PriorKind,
    latent_dim: usize,
    grid_resolution: usize,
    scenes: usize,
    decoder_params: usize,
    flow: Option<FlowHeader>,
}

/// Write a bundle as `manifest.json` plus flat little-endian f64 blobs
/// (`decoder.bin`, `latents.bin`, and the prior's own files).
pub fn save_bundle(bundle: &PriorBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dec = &bundle.decoder;
    for (i, x) in bundle.latents.iter().enumerate() {
        if x.len() != dec.latent_dim {
            return Err(Error::InvalidArg(format!(
                "latent {i} has length {} but the decoder expects {}",
                x.len(),
                dec.latent_dim
            )));
        }
    }
    let manifest = BundleManifest {
        kind: bundle.prior.kind(),
        latent_dim: dec.latent_dim,
        grid_resolution: dec.resolution,
        scenes: bundle.latents.len(),
        decoder_params: dec.params.len(),
        flow: match &bundle.prior {
            TrainedPrior::Flow(f) => Some(FlowHeader {
                hidden: f.hidden,
                layers: f.layers,
                params: f.params.len(),
            }),
            TrainedPrior::Diffusion(_) => None,
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_f64_blob(&dir.join("decoder.bin"), &dec.params)?;
    let flat: Vec<f64> = bundle
        .latents
        .iter()
        .flat_map(|x| x.data().iter().copied())
        .collect();
    write_f64_blob(
        &dir.join("latents.bin"),
        &DenseArray::from_vec(vec![bundle.latents.len(), dec.latent_dim], flat),
    )?;
    match &bundle.prior {
        TrainedPrior::Flow(f) => write_f64_blob(&dir.join("flow.bin"), &f.params),
        TrainedPrior::Diffusion(den) => den.save(dir, "denoiser"),
    }
}

pub fn load_bundle(dir: &Path) -> Result<PriorBundle> {
    let manifest_path = dir.join("manifest.json");
    let man: BundleManifest = read_json(&manifest_path)?;
    let want_dec = LatentDecoder::param_len(man.latent_dim, man.grid_resolution);
    if man.decoder_params != want_dec {
        return Err(Error::format(
            manifest_path,
            format!(
                "decoder has {} parameters but {}·4·{}³ layout needs {}",
                man.decoder_params, man.latent_dim, man.grid_resolution, want_dec
            ),
        ));
    }
    let dec_params = read_f64_blob(&dir.join("decoder.bin"), vec![want_dec])?;
    let decoder = LatentDecoder {
        latent_dim: man.latent_dim,
        resolution: man.grid_resolution,
        params: dec_params,
    };
    let flat = read_f64_blob(&dir.join("latents.bin"), vec![man.scenes, man.latent_dim])?;
    let latents: Vec<SceneLatent> = flat
        .data()
        .chunks_exact(man.latent_dim)
        .map(|c| DenseArray::vector(c.to_vec()))
        .collect();
    let prior = match man.kind {
        PriorKind::Flow => {
            let fh = man.flow.ok_or_else(|| {
                Error::format(manifest_path.clone(), "flow prior header missing")
            })?;
            let want = FlowPrior::param_len(man.latent_dim, fh.hidden, fh.layers);
            if fh.params != want {
                return Err(Error::format(
                    manifest_path,
                    format!("flow has {} parameters but layout needs {want}", fh.params),
                ));
            }
            let params = read_f64_blob(&dir.join("flow.bin"), vec![want])?;
            TrainedPrior::Flow(FlowPrior {
                dim: man.latent_dim,
                hidden: fh.hidden,
                layers: fh.layers,
                params,
            })
        }
        PriorKind::Diffusion => {
            let den = MlpDenoiser::load(dir, "denoiser")?;
            if den.dim != man.latent_dim {
                return Err(Error::format(
                    manifest_path,
                    format!("denoiser dim {} does not match latent dim {}", den.dim, man.latent_dim),
                ));
            }
            TrainedPrior::Diffusion(den)
        }
    };
    Ok(PriorBundle { decoder, prior, latents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{fd_check, FnObjective};

    fn box_scene(seed: u64, resolution: usize, views: usize, px: usize) -> TrainScene {
        let mut rng = stream(seed, "box-scene", 0);
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.35..0.35)).collect();
        let half: f64 = rng.gen_range(0.15..0.45);
        let color = [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ];
        let mut g = RadianceGrid::transparent(resolution);
        g.fill_box(
            [c[0] - half, c[1] - half, c[2] - half],
            [c[0] + half, c[1] + half, c[2] + half],
            color,
            12.0,
        );
        let theta0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut out = Vec::with_capacity(views);
        for k in 0..views {
            let th = theta0 + std::f64::consts::TAU * k as f64 / views as f64;
            let mut cam = Camera::looking_at([2.5 * th.cos(), 0.7, 2.5 * th.sin()], [0.0, 0.0, 0.0]);
            cam.width = px;
            cam.height = px;
            cam.near = 0.6;
            cam.far = 4.4;
            let image = render_image(&g, None, &cam, &RenderCfg::default()).unwrap();
            out.push(TrainView { image, camera: cam });
        }
        TrainScene { views: out }
    }

    /// Mean over probe rays of the scattered (non-background) weight mass.
    fn mean_opacity(grid: &RadianceGrid) -> f64 {
        let mut cam = Camera::looking_at([0.0, 0.0, 2.5], [0.0, 0.0, 0.0]);
        cam.width = 16;
        cam.height = 16;
        cam.near = 0.6;
        cam.far = 4.4;
        let cfg = RenderCfg::default();
        let mut total = 0.0;
        for row in 0..cam.height {
            for col in 0..cam.width {
                let ray = cam.ray(row, col);
                let id = (row * cam.width + col) as u64;
                let (_, weights, _) = crate::render::render_ray(grid, None, &ray, cam.near, cam.far, &cfg, id);
                total += weights.iter().sum::<f64>();
            }
        }
        total / cam.rays() as f64
    }

    #[test]
    fn decoder_is_affine_and_matches_graph() {
        let mut rng = stream(11, "test-dec", 0);
        let mut dec = LatentDecoder::init(5, 3, &mut rng);
        dec.params = standard_normal_vec(&mut rng, dec.params.len()).map(|v| 0.3 * v);
        let out = dec.out_len();

        // zero latent decodes to the bias block exactly
        let g0 = dec.decode(&DenseArray::zeros(vec![5])).unwrap();
        let b = &dec.params.data()[5 * out..];
        for (a, bb) in g0.raw.data().iter().zip(b) {
            assert_eq!(a.to_bits(), bb.to_bits());
        }

        // affine: raw(x1 + x2) = raw(x1) + raw(x2) - raw(0)
        let x1 = standard_normal_vec(&mut rng, 5);
        let x2 = standard_normal_vec(&mut rng, 5);
        let mut sum = x1.clone();
        sum.axpy(1.0, &x2);
        let r12 = dec.decode(&sum).unwrap();
        let r1 = dec.decode(&x1).unwrap();
        let r2 = dec.decode(&x2).unwrap();
        for i in 0..out {
            let lhs = r12.raw.data()[i];
            let rhs = r1.raw.data()[i] + r2.raw.data()[i] - b[i];
            assert!((lhs - rhs).abs() < 1e-9, "affine identity at {i}: {lhs} vs {rhs}");
        }

        // tape twin agrees with the host decode
        let mut tape = Tape::new();
        let pv = tape.constant(dec.params.clone());
        let xv = tape.leaf(x1.clone());
        let raw_g = dec.decode_graph(&mut tape, pv, xv);
        assert!(tape.take_fault().is_none());
        for (a, h) in tape.value(raw_g).data().iter().zip(r1.raw.data()) {
            assert!((a - h).abs() <= 1e-12, "graph {a} vs host {h}");
        }

        assert!(dec.decode(&DenseArray::zeros(vec![4])).is_err());
    }

    #[test]
    fn decoder_render_loss_gradient_passes_fd() {
        let mut rng = stream(23, "test-decfd", 0);
        let mut dec = LatentDecoder::init(12, 4, &mut rng);
        dec.params = standard_normal_vec(&mut rng, dec.params.len()).map(|v| 0.5 * v);
        let mut cam = Camera::looking_at([0.1, 0.3, 2.3], [0.0, 0.0, 0.0]);
        cam.width = 4;
        cam.height = 4;
        cam.near = 0.6;
        cam.far = 4.0;
        let rcfg = RenderCfg { n_samples: 8, ..RenderCfg::default() };

        let x_target = standard_normal_vec(&mut rng, 12);
        let target = render_image(&dec.decode(&x_target).unwrap(), None, &cam, &rcfg).unwrap();

        let dp = dec.params.clone();
        let dec_c = dec.clone();
        let lik = LikelihoodCfg { sigma_y: 0.1, subsample: 0 };
        let obj = FnObjective::new(vec![12], move |tape: &mut Tape, x| {
            let pv = tape.constant(dp.clone());
            let raw = dec_c.decode_graph(tape, pv, x);
            let gv = GridVar { resolution: 4, raw };
            log_likelihood_graph(tape, &target, gv, None, &cam, None, &rcfg, &lik, 0).unwrap()
        });
        let x0 = standard_normal_vec(&mut rng, 12);
        let worst = fd_check(&obj, &x0, 1e-5).unwrap();
        assert!(worst < 1e-4, "fd mismatch {worst}");
    }

    #[test]
    fn identity_init_flow_is_standard_normal() {
        let mut rng = stream(3, "test-flow-id", 0);
        let flow = FlowPrior::init(6, 8, 4, &mut rng);
        for _ in 0..10 {
            let x = standard_normal_vec(&mut rng, 6).map(|v| 1.3 * v);
            let (z, logdet) = flow.forward(&x).unwrap();
            for (a, b) in z.data().iter().zip(x.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "identity flow moved a point");
            }
            assert_eq!(logdet, 0.0);
            let lp = flow.log_prob(&x).unwrap();
            let ss: f64 = x.data().iter().map(|v| v * v).sum();
            let want = ss * -0.5 + -0.5 * 6.0 * LN_TAU;
            assert!((lp - want).abs() < 1e-12, "{lp} vs {want}");
        }
    }

    #[test]
    fn flow_roundtrips_within_1e9() {
        let mut rng = stream(4, "test-flow-rt", 0);
        let mut flow = FlowPrior::init(8, 12, 4, &mut rng);
        flow.params = standard_normal_vec(&mut rng, flow.params.len()).map(|v| 0.3 * v);
        for _ in 0..20 {
            let x = standard_normal_vec(&mut rng, 8).map(|v| 1.5 * v);
            let (z, _) = flow.forward(&x).unwrap();
            let back = flow.inverse(&z).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-9, "x roundtrip {a} vs {b}");
            }
            let zr = standard_normal_vec(&mut rng, 8);
            let xr = flow.inverse(&zr).unwrap();
            let (zz, _) = flow.forward(&xr).unwrap();
            for (a, b) in zz.data().iter().zip(zr.data()) {
                assert!((a - b).abs() < 1e-9, "z roundtrip {a} vs {b}");
            }
        }
        let s = flow.sample(&mut rng).unwrap();
        assert!(s.all_finite());
    }

    #[test]
    fn flow_density_integrates_to_one_in_2d() {
        let mut rng = stream(5, "test-flow-norm", 0);
        let mut flow = FlowPrior::init(2, 16, 4, &mut rng);
        flow.params = standard_normal_vec(&mut rng, flow.params.len()).map(|v| 0.05 * v);

        // make sure the perturbed flow is not still the identity
        let mut max_ld = 0.0f64;
        for _ in 0..5 {
            let x = standard_normal_vec(&mut rng, 2);
            max_ld = max_ld.max(flow.forward(&x).unwrap().1.abs());
        }
        assert!(max_ld > 1e-4, "flow stayed at identity; nothing to test");

        // Riemann sum on a grid wide enough that the pushed-forward tails
        // are negligible; the rule itself is spectrally accurate here.
        let h = 0.06f64;
        let lim = 12.0f64;
        let n = (2.0 * lim / h).round() as usize;
        let mut total = 0.0;
        for i in 0..=n {
            let x0 = -lim + i as f64 * h;
            for j in 0..=n {
                let x1 = -lim + j as f64 * h;
                let lp = flow.log_prob(&DenseArray::vector(vec![x0, x1])).unwrap();
                total += lp.exp();
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-3, "mass {total}");
    }

    #[test]
    fn flow_graph_matches_host_and_passes_fd() {
        let mut rng = stream(6, "test-flow-graph", 0);
        let mut flow = FlowPrior::init(4, 6, 3, &mut rng);
        flow.params = standard_normal_vec(&mut rng, flow.params.len()).map(|v| 0.15 * v);
        let plen = flow.params.len();

        let rows = 3;
        let xs = standard_normal_vec(&mut rng, rows * 4);
        let xs_b = DenseArray::from_vec(vec![rows, 4], xs.data().to_vec());

        let mut tape = Tape::new();
        let pv = tape.constant(flow.params.clone());
        let xv = tape.constant(xs_b.clone());
        let lp = flow.log_prob_graph(&mut tape, pv, xv);
        assert!(tape.take_fault().is_none());
        let got = tape.value(lp).data().to_vec();
        for (r, g) in got.iter().enumerate() {
            let row = DenseArray::vector(xs.data()[r * 4..(r + 1) * 4].to_vec());
            let want = flow.log_prob(&row).unwrap();
            assert!((g - want).abs() < 1e-12, "row {r}: graph {g} vs host {want}");
        }

        let f1 = flow.clone();
        let obj_x = FnObjective::new(vec![rows, 4], move |tape: &mut Tape, xs| {
            let pv = tape.constant(f1.params.clone());
            let lp = f1.log_prob_graph(tape, pv, xs);
            tape.sum(lp)
        });
        let worst = fd_check(&obj_x, &xs_b, 1e-5).unwrap();
        assert!(worst < 1e-4, "fd over inputs {worst}");

        let f2 = flow.clone();
        let xs_c = xs_b.clone();
        let obj_p = FnObjective::new(vec![plen], move |tape: &mut Tape, p| {
            let xv = tape.constant(xs_c.clone());
            let lp = f2.log_prob_graph(tape, p, xv);
            tape.sum(lp)
        });
        let worst_p = fd_check(&obj_p, &flow.params, 1e-5).unwrap();
        assert!(worst_p < 1e-4, "fd over params {worst_p}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = GLOTrainCfg::defaults(PriorKind::Flow);
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.lambda_rec = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.sigma_y = -1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.latent_l2 = f64::NAN;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.grid_resolution = 1;
        assert!(c.validate().is_err());
        let mut c = base;
        c.steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn glo_overfits_a_single_scene() {
        let scene = box_scene(5, 16, 3, 16);
        let mut cfg = GLOTrainCfg::defaults(PriorKind::Flow);
        cfg.latent_dim = 32;
        cfg.grid_resolution = 16;
        cfg.lambda_diff = 1e-8; // prior effectively off: pure reconstruction
        cfg.steps = 1500;
        cfg.substeps = 2;
        cfg.rays_per_step = 64;
        cfg.lr_model = 3e-2;
        cfg.lr_latent = 1e-2;
        cfg.flow_hidden = 16;
        cfg.flow_layers = 2;
        cfg.checkpoint_every = 500;
        cfg.seed = 1;
        let out = train_joint(&[scene], PriorKind::Flow, &cfg).unwrap();
        assert!(
            out.psnr_final > 30.0,
            "overfit PSNR {} (init {})",
            out.psnr_final,
            out.psnr_init
        );
        assert!(out.psnr_final > out.psnr_init);
    }

    #[test]
    fn huge_latent_l2_shrinks_latents_monotonically() {
        let scenes: Vec<TrainScene> = (0..2).map(|i| box_scene(40 + i, 8, 1, 8)).collect();
        let mut cfg = GLOTrainCfg::defaults(PriorKind::Diffusion);
        cfg.latent_dim = 8;
        cfg.grid_resolution = 8;
        cfg.latent_l2 = 1e6;
        cfg.lr_latent = 3e-4;
        cfg.lr_model = 1e-3;
        cfg.steps = 100;
        cfg.substeps = 4;
        cfg.rays_per_step = 32;
        cfg.denoiser_hidden = 16;
        cfg.checkpoint_every = 25;
        cfg.seed = 2;
        let out = train_joint(&scenes, PriorKind::Diffusion, &cfg).unwrap();
        let norms: Vec<f64> = out.checkpoints.iter().map(|c| c.mean_latent_norm).collect();
        assert_eq!(norms.len(), 4);
        assert!(norms[0] > 0.0, "diffusion latents start away from the origin");
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "latent norms rose: {norms:?}");
        }
        assert!(
            *norms.last().unwrap() < 0.8 * norms[0],
            "weak shrinkage: {norms:?}"
        );
    }

    #[test]
    fn joint_training_improves_reconstruction_and_loss() {
        let scenes: Vec<TrainScene> = (0..4).map(|i| box_scene(10 + i, 8, 2, 12)).collect();
        let mut cfg = GLOTrainCfg::defaults(PriorKind::Diffusion);
        cfg.latent_dim = 16;
        cfg.grid_resolution = 8;
        cfg.steps = 600;
        cfg.substeps = 2;
        cfg.rays_per_step = 48;
        cfg.denoiser_hidden = 32;
        cfg.lr_model = 5e-3;
        cfg.lr_latent = 1e-2;
        cfg.checkpoint_every = 150;
        cfg.seed = 3;
        let out = train_joint(&scenes, PriorKind::Diffusion, &cfg).unwrap();
        assert!(
            out.psnr_final > out.psnr_init + 3.0,
            "psnr {} -> {}",
            out.psnr_init,
            out.psnr_final
        );

        let w: Vec<f64> = out.checkpoints.iter().map(|c| c.smoothed_loss).collect();
        let drop = w[0] - *w.last().unwrap();
        assert!(drop > 0.0, "smoothed loss did not fall: {w:?}");
        for pair in w.windows(2) {
            assert!(pair[1] <= pair[0] + 0.05 * drop.abs(), "loss wobble: {w:?}");
        }

        let mut rng = stream(77, "test-sample", 0);
        let s = out.bundle.prior.sample(&mut rng).unwrap();
        assert!(s.all_finite());
        let grid = out.bundle.decoder.decode(&s).unwrap();
        assert!(grid.raw.all_finite());
        let view = &scenes[0].views[0];
        assert!(render_image(&grid, None, &view.camera, &RenderCfg::default()).is_ok());
    }

    #[test]
    fn flow_prior_samples_match_training_population() {
        let scenes: Vec<TrainScene> = (0..64).map(|i| box_scene(100 + i, 12, 1, 16)).collect();
        let mut cfg = GLOTrainCfg::defaults(PriorKind::Flow);
        cfg.latent_dim = 32;
        cfg.grid_resolution = 12;
        cfg.steps = 2560;
        cfg.substeps = 2;
        cfg.rays_per_step = 48;
        cfg.flow_hidden = 32;
        cfg.flow_layers = 4;
        cfg.lr_model = 3e-3;
        cfg.lr_latent = 1e-2;
        cfg.checkpoint_every = 640;
        cfg.seed = 4;
        let out = train_joint(&scenes, PriorKind::Flow, &cfg).unwrap();
        assert!(out.psnr_final > out.psnr_init);
        let w: Vec<f64> = out.checkpoints.iter().map(|c| c.smoothed_loss).collect();
        assert!(*w.last().unwrap() < w[0], "loss did not fall: {w:?}");

        let pop: Vec<f64> = out
            .bundle
            .latents
            .iter()
            .map(|x| mean_opacity(&out.bundle.decoder.decode(x).unwrap()))
            .collect();
        let mu = pop.iter().sum::<f64>() / pop.len() as f64;
        let var = pop.iter().map(|o| (o - mu) * (o - mu)).sum::<f64>() / pop.len() as f64;
        // floor the band so a freakishly tight population cannot zero it
        let sd = var.sqrt().max(0.03);

        let flow = match &out.bundle.prior {
            TrainedPrior::Flow(f) => f,
            _ => unreachable!(),
        };
        let mut rng = stream(99, "test-pop-samples", 0);
        for k in 0..12 {
            let x = out.bundle.prior.sample(&mut rng).unwrap();
            // trained flow still inverts exactly
            let (z, _) = flow.forward(&x).unwrap();
            let back = flow.inverse(&z).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            let o = mean_opacity(&out.bundle.decoder.decode(&x).unwrap());
            assert!(
                (o - mu).abs() <= 3.0 * sd,
                "sample {k} opacity {o} outside {mu} ± 3·{sd} (population {pop:?})"
            );
        }
    }

    #[test]
    fn bundle_save_load_roundtrips_exactly() {
        let mut rng = stream(8, "test-bundle", 0);
        let dir = tempfile::tempdir().unwrap();

        let mut dec = LatentDecoder::init(4, 2, &mut rng);
        dec.params = standard_normal_vec(&mut rng, dec.params.len());
        let mut flow = FlowPrior::init(4, 6, 2, &mut rng);
        flow.params = standard_normal_vec(&mut rng, flow.params.len()).map(|v| 0.2 * v);
        let latents: Vec<SceneLatent> = (0..3).map(|_| standard_normal_vec(&mut rng, 4)).collect();
        let bundle = PriorBundle {
            decoder: dec.clone(),
            prior: TrainedPrior::Flow(flow.clone()),
            latents: latents.clone(),
        };
        let fdir = dir.path().join("flow-bundle");
        save_bundle(&bundle, &fdir).unwrap();
        let back = load_bundle(&fdir).unwrap();
        assert_eq!(back.decoder.latent_dim, 4);
        assert_eq!(back.decoder.resolution, 2);
        for (a, b) in back.decoder.params.data().iter().zip(dec.params.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        match &back.prior {
            TrainedPrior::Flow(f) => {
                assert_eq!((f.hidden, f.layers), (6, 2));
                for (a, b) in f.params.data().iter().zip(flow.params.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("kind changed"),
        }
        assert_eq!(back.latents.len(), 3);
        for (la, lb) in back.latents.iter().zip(&latents) {
            for (a, b) in la.data().iter().zip(lb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        let den = MlpDenoiser::init(4, 8, NoiseSchedule::default(), &mut rng);
        let bundle2 = PriorBundle {
            decoder: dec,
            prior: TrainedPrior::Diffusion(den.clone()),
            latents,
        };
        let ddir = dir.path().join("diff-bundle");
        save_bundle(&bundle2, &ddir).unwrap();
        let back2 = load_bundle(&ddir).unwrap();
        match &back2.prior {
            TrainedPrior::Diffusion(d) => {
                for (a, b) in d.params.data().iter().zip(den.params.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("kind changed"),
        }

        assert!(load_bundle(&dir.path().join("nope")).is_err());
    }
}
