//! Variance-preserving Gaussian diffusion.
//!
//! A [`NoiseSchedule`] fixes the forward marginals q(z_t|x) = N(α_t x, σ_t² I)
//! with α_t² + σ_t² = 1; the noise variance follows a sigmoid in t, so the
//! signal-to-noise ratio decays exponentially between its endpoints. A
//! [`Denoiser`] predicts the noise content ε̂(z_t; t); everything else —
//! data estimates, scores, reverse steps, the weighted training loss — is
//! derived from that prediction. Two denoisers are provided: a small trainable
//! network ([`MlpDenoiser`]) and a closed-form one for exactly Gaussian data
//! ([`AnalyticGaussianDenoiser`]) that serves as a test oracle, since for
//! Gaussian data the optimal ε̂ is available in closed form.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f64_blob, read_json, write_f64_blob, write_json};
use crate::opt::{Adam, LrSchedule};
use crate::rngs::Stream;
use crate::tape::{gradient, FnObjective, Tape, Var};
use crate::tensor::{sigmoid, DenseArray};

/// Dimension of the sinusoidal time embedding fed to [`MlpDenoiser`]:
/// sin/cos pairs at 8 dyadic frequencies.
pub const TIME_EMB: usize = 16;

/// Variance-preserving noise schedule with σ_t² = sigmoid(ℓ(t)) for the
/// linear log-odds ramp ℓ(t) = log_odds_min + t·(log_odds_max − log_odds_min).
///
/// With the default ramp −10 → 10 the endpoints are within 5e-5 of the ideal
/// α_0 = 1, σ_1 = 1, and the signal-to-noise ratio α²/σ² = exp(−ℓ(t)) is
/// strictly decreasing. `steps` is the bin count T of the discretization
/// t_lo(i) = (i−1)/T, t_hi(i) = i/T used by samplers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub log_odds_min: f64,
    pub log_odds_max: f64,
    /// Lower clamp on α_t; with the default ramp it never binds on [0,1].
    pub alpha_floor: f64,
    /// Discretization bin count T.
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            log_odds_min: -10.0,
            log_odds_max: 10.0,
            alpha_floor: 1e-4,
            steps: 256,
        }
    }
}

impl NoiseSchedule {
    fn log_odds(&self, t: f64) -> f64 {
        self.log_odds_min + t * (self.log_odds_max - self.log_odds_min)
    }

    /// Noise variance σ_t².
    pub fn sigma2(&self, t: f64) -> f64 {
        sigmoid(self.log_odds(t))
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma2(t).sqrt()
    }

    /// Signal scale α_t before the floor clamp.
    pub fn alpha_unclamped(&self, t: f64) -> f64 {
        // 1 − sigmoid(x) computed as sigmoid(−x) to keep α² + σ² = 1 at
        // floating-point precision
        sigmoid(-self.log_odds(t)).sqrt()
    }

    /// Signal scale α_t, clamped below by `alpha_floor`.
    pub fn alpha(&self, t: f64) -> f64 {
        self.alpha_unclamped(t).max(self.alpha_floor)
    }

    /// Signal-to-noise ratio α_t²/σ_t².
    pub fn snr(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        a * a / self.sigma2(t)
    }

    /// d SNR / dt, analytically: with σ² = sigmoid(ℓ(t)) and α² = 1 − σ²,
    /// the chain rule gives dσ²/dt = σ²(1−σ²)·ℓ′ and d(α²/σ²)/dσ² = −1/σ⁴.
    pub fn snr_slope(&self, t: f64) -> f64 {
        let ramp = self.log_odds_max - self.log_odds_min;
        let s2 = self.sigma2(t);
        let ds2 = s2 * (1.0 - s2) * ramp;
        -ds2 / (s2 * s2)
    }

    /// Weight w(t) that makes the negative time-integrated ε-loss the
    /// continuous-time evidence lower bound: w(t) = −½ · SNR′(t) · σ_t²/α_t².
    /// For the sigmoid schedule this is the constant ½·(log-odds ramp).
    pub fn elbo_weight(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        -0.5 * self.snr_slope(t) * self.sigma2(t) / (a * a)
    }

    /// Lower edge (i−1)/T of discretization bin i ∈ [1, T].
    pub fn t_lo(&self, i: usize) -> f64 {
        assert!(i >= 1 && i <= self.steps, "bin index {i} out of 1..={}", self.steps);
        (i - 1) as f64 / self.steps as f64
    }

    /// Upper edge i/T of discretization bin i ∈ [1, T].
    pub fn t_hi(&self, i: usize) -> f64 {
        assert!(i >= 1 && i <= self.steps, "bin index {i} out of 1..={}", self.steps);
        i as f64 / self.steps as f64
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArg(format!("time {t} outside [0,1]")));
    }
    Ok(())
}

/// A parameterized prediction ε̂(z_t; t) of the noise component of z_t.
///
/// Inputs are single points (shape `[d]`) or row batches (shape `[n, d]`);
/// the output shape always equals the input shape. Predictions are
/// deterministic given (z_t, t) and recorded on the caller's tape, so
/// gradients can flow through z_t (reconstruction guidance differentiates
/// through the denoiser).
pub trait Denoiser: Send + Sync {
    /// Data dimension d.
    fn dim(&self) -> usize;

    /// The schedule this denoiser was built against.
    fn schedule(&self) -> &NoiseSchedule;

    /// Record ε̂(z; t) on `tape`; `z` has shape `[d]` or `[n, d]`.
    fn predict_noise(&self, tape: &mut Tape, z: Var, t: f64) -> Var;

    /// Plain-value prediction for sampling loops that need no gradient.
    fn predict_noise_value(&self, z: &DenseArray, t: f64) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let zc = tape.constant(z.clone());
        let out = self.predict_noise(&mut tape, zc, t);
        if let Some(fault) = tape.take_fault() {
            return Err(fault);
        }
        Ok(tape.value(out).clone())
    }
}

/// Parameter layout of the 2-hidden-layer denoiser network over a flat
/// parameter vector: `[W1z | W1t | b1 | W2 | b2 | W3 | b3]`, where W1z/W1t
/// are the input-weight rows for the data and time-embedding columns.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpLayout {
    pub dim: usize,
    pub hidden: usize,
}

impl MlpLayout {
    fn w1z(&self) -> std::ops::Range<usize> {
        0..self.dim * self.hidden
    }
    fn w1t(&self) -> std::ops::Range<usize> {
        let s = self.dim * self.hidden;
        s..s + TIME_EMB * self.hidden
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1t().end;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.hidden * self.hidden
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.hidden
    }
    fn w3(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.hidden * self.dim
    }
    fn b3(&self) -> std::ops::Range<usize> {
        let s = self.w3().end;
        s..s + self.dim
    }
    pub fn total(&self) -> usize {
        self.b3().end
    }
}

fn time_embedding_rows(ts: &[f64]) -> DenseArray {
    let mut data = Vec::with_capacity(ts.len() * TIME_EMB);
    for &t in ts {
        for k in 0..TIME_EMB / 2 {
            let phase = std::f64::consts::PI * (1u64 << k) as f64 * t;
            data.push(phase.sin());
            data.push(phase.cos());
        }
    }
    DenseArray::from_vec(vec![ts.len(), TIME_EMB], data)
}

/// Broadcast a row vector `[h]` to `[n, h]` by a constant-index gather.
fn tile_rows(tape: &mut Tape, row: Var, n: usize) -> Var {
    let h = tape.value(row).len();
    let idx: Vec<u32> = (0..n).flat_map(|_| 0..h as u32).collect();
    let g = tape.gather(row, Arc::new(idx));
    tape.reshape(g, vec![n, h])
}

fn silu(tape: &mut Tape, v: Var) -> Var {
    let s = tape.sigmoid(v);
    tape.mul(v, s)
}

/// Forward pass of the denoiser network with per-row times; `z` is `[n, d]`
/// and `params` follows [`MlpLayout`]. Split out of the struct so training
/// can run it with `params` as the differentiable leaf.
pub(crate) fn mlp_forward(
    tape: &mut Tape,
    lay: MlpLayout,
    params: Var,
    z: Var,
    ts: &[f64],
) -> Var {
    let shape = tape.value(z).shape().to_vec();
    assert_eq!(shape.len(), 2, "mlp input must be [n, d], got {shape:?}");
    let n = shape[0];
    assert_eq!(shape[1], lay.dim, "mlp input width");
    assert_eq!(n, ts.len(), "one time per row");

    let emb = tape.constant(time_embedding_rows(ts));
    let w1z = tape.slice_shaped(params, lay.w1z(), vec![lay.dim, lay.hidden]);
    let w1t = tape.slice_shaped(params, lay.w1t(), vec![TIME_EMB, lay.hidden]);
    let b1 = tape.slice(params, lay.b1());
    let hz = tape.matmul(z, w1z);
    let ht = tape.matmul(emb, w1t);
    let hzt = tape.add(hz, ht);
    let b1t = tile_rows(tape, b1, n);
    let pre1 = tape.add(hzt, b1t);
    let h1 = silu(tape, pre1);

    let w2 = tape.slice_shaped(params, lay.w2(), vec![lay.hidden, lay.hidden]);
    let b2 = tape.slice(params, lay.b2());
    let h2m = tape.matmul(h1, w2);
    let b2t = tile_rows(tape, b2, n);
    let pre2 = tape.add(h2m, b2t);
    let h2 = silu(tape, pre2);

    let w3 = tape.slice_shaped(params, lay.w3(), vec![lay.hidden, lay.dim]);
    let b3 = tape.slice(params, lay.b3());
    let om = tape.matmul(h2, w3);
    let b3t = tile_rows(tape, b3, n);
    tape.add(om, b3t)
}

/// Small fully connected ε-predictor: two hidden layers with smooth
/// (sigmoid-gated) activations and a sinusoidal time embedding concatenated
/// to the input. The output layer starts at zero, so an untrained denoiser
/// predicts ε̂ ≡ 0.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    pub dim: usize,
    pub hidden: usize,
    pub schedule: NoiseSchedule,
    /// Flat parameters in [`MlpLayout`] order.
    pub params: DenseArray,
}

impl MlpDenoiser {
    pub(crate) fn layout(&self) -> MlpLayout {
        MlpLayout {
            dim: self.dim,
            hidden: self.hidden,
        }
    }

    pub fn init(dim: usize, hidden: usize, schedule: NoiseSchedule, rng: &mut Stream) -> Self {
        assert!(dim > 0 && hidden > 0, "empty denoiser");
        let lay = MlpLayout { dim, hidden };
        let mut p = vec![0.0; lay.total()];
        let in_std = 1.0 / ((dim + TIME_EMB) as f64).sqrt();
        for i in lay.w1z().chain(lay.w1t()) {
            p[i] = in_std * rng.sample::<f64, _>(StandardNormal);
        }
        let h_std = 1.0 / (hidden as f64).sqrt();
        for i in lay.w2() {
            p[i] = h_std * rng.sample::<f64, _>(StandardNormal);
        }
        // w3, b1..b3 stay zero
        MlpDenoiser {
            dim,
            hidden,
            schedule,
            params: DenseArray::vector(p),
        }
    }

    /// Write `<name>.json` (architecture + schedule) and `<name>.bin`
    /// (little-endian 64-bit parameters) into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let header = DenoiserHeader {
            dim: self.dim,
            hidden: self.hidden,
            schedule: self.schedule.clone(),
            params: self.params.len(),
        };
        write_json(&dir.join(format!("{name}.json")), &header)?;
        write_f64_blob(&dir.join(format!("{name}.bin")), &self.params)
    }

    pub fn load(dir: &Path, name: &str) -> Result<MlpDenoiser> {
        let json_path = dir.join(format!("{name}.json"));
        let header: DenoiserHeader = read_json(&json_path)?;
        let lay = MlpLayout {
            dim: header.dim,
            hidden: header.hidden,
        };
        if header.params != lay.total() {
            return Err(Error::format(
                json_path,
                format!(
                    "parameter count {} does not match architecture ({} expected)",
                    header.params,
                    lay.total()
                ),
            ));
        }
        let params = read_f64_blob(&dir.join(format!("{name}.bin")), vec![header.params])?;
        Ok(MlpDenoiser {
            dim: header.dim,
            hidden: header.hidden,
            schedule: header.schedule,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserHeader {
    dim: usize,
    hidden: usize,
    schedule: NoiseSchedule,
    params: usize,
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, tape: &mut Tape, z: Var, t: f64) -> Var {
        let shape = tape.value(z).shape().to_vec();
        let single = shape.len() == 1;
        let z2 = if single {
            assert_eq!(shape[0], self.dim, "denoiser input length");
            tape.reshape(z, vec![1, self.dim])
        } else {
            assert_eq!(shape[1], self.dim, "denoiser input width");
            z
        };
        let n = tape.value(z2).shape()[0];
        let params = tape.constant(self.params.clone());
        let out = mlp_forward(tape, self.layout(), params, z2, &vec![t; n]);
        if single {
            tape.reshape(out, vec![self.dim])
        } else {
            out
        }
    }
}

/// Known data distribution for the closed-form denoiser.
#[derive(Debug, Clone)]
pub enum GaussianData {
    /// Independent per-dimension variances.
    Diag { mean: DenseArray, var: DenseArray },
    /// Dense symmetric positive-definite covariance `[d, d]`.
    Full { mean: DenseArray, cov: DenseArray },
}

/// Exact ε̂ for Gaussian data: when x ~ N(m, Σ), the posterior mean of the
/// injected noise given z_t = α x + σ ε is linear in z_t, namely
/// ε̂ = σ (α²Σ + σ²I)⁻¹ (z − α m); the diagonal case reduces to elementwise
/// weights σ/(α² s_j² + σ²).
pub struct AnalyticGaussianDenoiser {
    pub data: GaussianData,
    pub schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    /// Standard-normal data; ε̂(z; t) = σ_t z.
    pub fn standard(dim: usize, schedule: NoiseSchedule) -> Self {
        AnalyticGaussianDenoiser {
            data: GaussianData::Diag {
                mean: DenseArray::zeros(vec![dim]),
                var: DenseArray::full(vec![dim], 1.0),
            },
            schedule,
        }
    }

    pub fn diag(mean: DenseArray, var: DenseArray, schedule: NoiseSchedule) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::InvalidArg("mean/var length mismatch".into()));
        }
        if var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArg("variances must be positive".into()));
        }
        Ok(AnalyticGaussianDenoiser {
            data: GaussianData::Diag { mean, var },
            schedule,
        })
    }

    pub fn full(mean: DenseArray, cov: DenseArray, schedule: NoiseSchedule) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != [d, d] {
            return Err(Error::InvalidArg(format!(
                "covariance shape {:?} does not match dimension {d}",
                cov.shape()
            )));
        }
        cholesky(cov.data(), d)?; // validate positive-definiteness up front
        Ok(AnalyticGaussianDenoiser {
            data: GaussianData::Full { mean, cov },
            schedule,
        })
    }

    fn dim_inner(&self) -> usize {
        match &self.data {
            GaussianData::Diag { mean, .. } | GaussianData::Full { mean, .. } => mean.len(),
        }
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn dim(&self) -> usize {
        self.dim_inner()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, tape: &mut Tape, z: Var, t: f64) -> Var {
        let d = self.dim_inner();
        let shape = tape.value(z).shape().to_vec();
        let single = shape.len() == 1;
        let n = if single { 1 } else { shape[0] };
        assert_eq!(*shape.last().unwrap(), d, "denoiser input width");

        let a = self.schedule.alpha(t);
        let s2 = self.schedule.sigma2(t);
        let s = s2.sqrt();

        match &self.data {
            GaussianData::Diag { mean, var } => {
                let mut am = Vec::with_capacity(n * d);
                let mut w = Vec::with_capacity(n * d);
                for _ in 0..n {
                    for j in 0..d {
                        am.push(a * mean.data()[j]);
                        w.push(s / (a * a * var.data()[j] + s2));
                    }
                }
                let amc = tape.constant(DenseArray::from_vec(shape.clone(), am));
                let wc = tape.constant(DenseArray::from_vec(shape, w));
                let zc = tape.sub(z, amc);
                tape.mul(zc, wc)
            }
            GaussianData::Full { mean, cov } => {
                // M = σ (α²Σ + σ²I)⁻¹, symmetric; ε̂ rows = (z − αm) M
                let mut shifted = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        shifted[i * d + j] = a * a * cov.data()[i * d + j];
                    }
                    shifted[i * d + i] += s2;
                }
                let mut m_mat = spd_inverse(&shifted, d).expect("α²Σ + σ²I is positive definite");
                for v in m_mat.iter_mut() {
                    *v *= s;
                }
                let mut am = Vec::with_capacity(n * d);
                for _ in 0..n {
                    for j in 0..d {
                        am.push(a * mean.data()[j]);
                    }
                }
                let z2 = if single {
                    tape.reshape(z, vec![1, d])
                } else {
                    z
                };
                let amc = tape.constant(DenseArray::from_vec(vec![n, d], am));
                let mc = tape.constant(DenseArray::from_vec(vec![d, d], m_mat));
                let zc = tape.sub(z2, amc);
                let out = tape.matmul(zc, mc);
                if single {
                    tape.reshape(out, vec![d])
                } else {
                    out
                }
            }
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// in row-major order.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::InvalidArg(
                        "matrix is not positive definite".into(),
                    ));
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b in place given the Cholesky factor L of A.
fn chol_solve(l: &[f64], d: usize, b: &mut [f64]) {
    // forward: L y = b
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * d + k] * b[k];
        }
        b[i] = v / l[i * d + i];
    }
    // backward: Lᵀ x = y
    for i in (0..d).rev() {
        let mut v = b[i];
        for k in i + 1..d {
            v -= l[k * d + i] * b[k];
        }
        b[i] = v / l[i * d + i];
    }
}

/// Dense inverse of a symmetric positive-definite matrix.
fn spd_inverse(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, d)?;
    let mut inv = vec![0.0; d * d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        chol_solve(&l, d, &mut col);
        for i in 0..d {
            inv[i * d + j] = col[i];
        }
    }
    Ok(inv)
}

/// z_t = α_t x + σ_t · noise.
pub fn forward_marginal_sample(
    ns: &NoiseSchedule,
    x: &DenseArray,
    t: f64,
    noise: &DenseArray,
) -> Result<DenseArray> {
    check_time(t)?;
    if x.shape() != noise.shape() {
        return Err(Error::InvalidArg(format!(
            "noise shape {:?} does not match data shape {:?}",
            noise.shape(),
            x.shape()
        )));
    }
    let (a, s) = (ns.alpha(t), ns.sigma(t));
    let mut z = x.map(|v| a * v);
    z.axpy(s, noise);
    Ok(z)
}

/// Data estimate x̂ = (z_t − σ_t ε̂(z_t; t)) / α_t.
pub fn predict_x(d: &dyn Denoiser, z: &DenseArray, t: f64) -> Result<DenseArray> {
    let ns = d.schedule();
    check_time(t)?;
    let a_raw = ns.alpha_unclamped(t);
    if a_raw < ns.alpha_floor {
        return Err(Error::InvalidArg(format!(
            "alpha({t}) = {a_raw:.3e} is below the clamp floor {:.3e}; no usable data estimate",
            ns.alpha_floor
        )));
    }
    let eps = d.predict_noise_value(z, t)?;
    let (a, s) = (ns.alpha(t), ns.sigma(t));
    let mut x = z.clone();
    x.axpy(-s, &eps);
    x.scale(1.0 / a);
    Ok(x)
}

/// Score of the noised marginal: −ε̂(z_t; t)/σ_t.
pub fn score(d: &dyn Denoiser, z: &DenseArray, t: f64) -> Result<DenseArray> {
    check_time(t)?;
    let s = d.schedule().sigma(t);
    if s <= 0.0 {
        return Err(Error::InvalidArg(format!("sigma({t}) = 0; score undefined")));
    }
    let eps = d.predict_noise_value(z, t)?;
    Ok(eps.map(|v| -v / s))
}

/// Mean and (isotropic) variance of the reverse transition from time t down
/// to time s, given the score at (z_t, t):
/// mean = z_t/α_{t|s} + (σ_{t|s}²/α_{t|s})·score, var = σ_{t|s}² σ_s²/σ_t²,
/// where α_{t|s} = α_t/α_s and σ_{t|s}² = σ_t² − α_{t|s}² σ_s².
pub fn reverse_step_moments(
    ns: &NoiseSchedule,
    z_t: &DenseArray,
    score: &DenseArray,
    s: f64,
    t: f64,
) -> Result<(DenseArray, f64)> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s >= t {
        return Err(Error::InvalidArg(format!(
            "reverse step needs 0 <= s < t <= 1, got s={s}, t={t}"
        )));
    }
    let a_ts = ns.alpha(t) / ns.alpha(s);
    let (s2_s, s2_t) = (ns.sigma2(s), ns.sigma2(t));
    let s2_ts = s2_t - a_ts * a_ts * s2_s;
    let mut mean = z_t.map(|v| v / a_ts);
    mean.axpy(s2_ts / a_ts, score);
    let var = s2_ts * s2_s / s2_t;
    Ok((mean, var))
}

/// One ancestral reverse step z_t → z_s with the given standard-normal noise.
pub fn reverse_step(
    d: &dyn Denoiser,
    z_t: &DenseArray,
    s: f64,
    t: f64,
    noise: &DenseArray,
) -> Result<DenseArray> {
    if z_t.shape() != noise.shape() {
        return Err(Error::InvalidArg(format!(
            "noise shape {:?} does not match state shape {:?}",
            noise.shape(),
            z_t.shape()
        )));
    }
    let sc = score(d, z_t, t)?;
    let (mut mean, var) = reverse_step_moments(d.schedule(), z_t, &sc, s, t)?;
    mean.axpy(var.sqrt(), noise);
    Ok(mean)
}

/// Unguided ancestral sampling: draw z at t=1 from N(0, I) and walk all T
/// bins down to t=0. `shape` is `[d]` for one chain or `[n, d]` for a batch
/// of independent chains.
pub fn ancestral_sample(
    d: &dyn Denoiser,
    shape: Vec<usize>,
    rng: &mut Stream,
) -> Result<DenseArray> {
    if shape.last() != Some(&d.dim()) {
        return Err(Error::InvalidArg(format!(
            "chain shape {shape:?} does not end in the data dimension {}",
            d.dim()
        )));
    }
    let ns = d.schedule().clone();
    let len: usize = shape.iter().product();
    let draw = |rng: &mut Stream| -> Vec<f64> {
        (0..len).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mut z = DenseArray::from_vec(shape.clone(), draw(rng));
    for i in (1..=ns.steps).rev() {
        let noise = DenseArray::from_vec(shape.clone(), draw(rng));
        z = reverse_step(d, &z, ns.t_lo(i), ns.t_hi(i), &noise)?;
    }
    Ok(z)
}

/// Time weighting of the ε-loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// w(t) = 1.
    Simple,
    /// w(t) per [`NoiseSchedule::elbo_weight`]; the negative time-integrated
    /// loss is then the evidence lower bound.
    Elbo,
}

/// Single-example weighted denoising loss w(t)·‖ε̂(α_t x + σ_t ε; t) − ε‖².
pub fn diffusion_loss(
    d: &dyn Denoiser,
    x: &DenseArray,
    t: f64,
    eps: &DenseArray,
    weighting: LossWeighting,
) -> Result<f64> {
    let ns = d.schedule();
    let z = forward_marginal_sample(ns, x, t, eps)?;
    let pred = d.predict_noise_value(&z, t)?;
    let mut resid = pred;
    resid.axpy(-1.0, eps);
    let sq: f64 = resid.data().iter().map(|v| v * v).sum();
    let w = match weighting {
        LossWeighting::Simple => 1.0,
        LossWeighting::Elbo => ns.elbo_weight(t),
    };
    Ok(w * sq)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainCfg {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: LrSchedule,
    pub weighting: LossWeighting,
    pub seed: u64,
}

impl Default for DiffusionTrainCfg {
    fn default() -> Self {
        DiffusionTrainCfg {
            steps: 2000,
            batch: 32,
            hidden: 128,
            lr: LrSchedule {
                base: 3e-3,
                warmup: 100,
                halve_every: 800,
            },
            weighting: LossWeighting::Elbo,
            seed: 0,
        }
    }
}

/// Fit an [`MlpDenoiser`] to a set of latent vectors by stochastic descent on
/// the weighted ε-loss, with fresh (t, ε) draws per example per step.
/// Returns the denoiser and the per-step batch-loss trace.
pub fn train_denoiser(
    latents: &[DenseArray],
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainCfg,
) -> Result<(MlpDenoiser, Vec<f64>)> {
    if latents.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 latents to fit a denoiser, got {}",
            latents.len()
        )));
    }
    let dim = latents[0].len();
    if latents.iter().any(|l| l.len() != dim) {
        return Err(Error::InvalidArg("latents have inconsistent lengths".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArg("steps and batch must be positive".into()));
    }

    let mut rng = crate::rngs::stream(cfg.seed, "denoiser-train", 0);
    let mut den = MlpDenoiser::init(dim, cfg.hidden, schedule.clone(), &mut rng);
    let lay = den.layout();
    let mut adam = Adam::new(den.params.len());
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let b = cfg.batch;
        let mut zb = vec![0.0; b * dim];
        let mut eb = vec![0.0; b * dim];
        let mut ts = vec![0.0; b];
        let mut wb = vec![0.0; b * dim];
        for r in 0..b {
            let x = &latents[rng.gen_range(0..latents.len())];
            // Stratified time draw: row r samples uniformly within [r/b, (r+1)/b),
            // so each batch covers the whole time range (uniform marginally, much
            // lower gradient variance than independent draws).
            let t = (r as f64 + rng.gen::<f64>()) / b as f64;
            let (a, s) = (schedule.alpha(t), schedule.sigma(t));
            ts[r] = t;
            let w = match cfg.weighting {
                LossWeighting::Simple => 1.0,
                LossWeighting::Elbo => schedule.elbo_weight(t),
            } / b as f64;
            for j in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                eb[r * dim + j] = e;
                zb[r * dim + j] = a * x.data()[j] + s * e;
                wb[r * dim + j] = w;
            }
        }
        let z = DenseArray::from_vec(vec![b, dim], zb);
        let e = DenseArray::from_vec(vec![b, dim], eb);
        let w = DenseArray::from_vec(vec![b, dim], wb);
        let ts_step = ts;
        let obj = FnObjective::new(vec![lay.total()], move |tape: &mut Tape, p: Var| {
            let zc = tape.constant(z.clone());
            let ec = tape.constant(e.clone());
            let wc = tape.constant(w.clone());
            let out = mlp_forward(tape, lay, p, zc, &ts_step);
            let resid = tape.sub(out, ec);
            let sq = tape.square(resid);
            let wsq = tape.mul(sq, wc);
            tape.sum(wsq)
        });
        let (loss, grad) = gradient(&obj, &den.params).map_err(|e| Error::Diverged {
            step,
            what: e.to_string(),
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("batch loss {loss}"),
            });
        }
        trace.push(loss);
        adam.step(&mut den.params, &grad, cfg.lr.at(step));
    }
    Ok((den, trace))
}
