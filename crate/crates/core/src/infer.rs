//! Posterior inference over scene latents and corruption parameters.
//!
//! Everything here works against an observation model `p(y | x, c)` tying a
//! scene vector `x` and auxiliary corruption parameters `c` to an observed
//! image, abstracted behind [`ObsModel`] and [`AuxPrior`]. The estimator
//! ladder, from cheapest to most faithful:
//!
//! - [`map_estimate`]: joint gradient ascent on the log joint;
//! - [`fit_vi`] / [`elbo_and_grad`]: mean-field Gaussian variational
//!   inference with reparameterized, path-derivative gradients;
//! - [`toy_quadrature`]: dense grid posterior for [`ToyModel`], used as an
//!   exact oracle;
//! - [`regal`]: reverse diffusion over the scene with reconstruction
//!   guidance, interleaved with unadjusted Langevin updates on `c`;
//! - [`regal_is`] / [`regal_smc`]: the same trajectories weighted as an
//!   importance sampler / sequential Monte Carlo sampler, plus
//!   [`resample`] and [`posterior_expectation`].

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::diffusion::{predict_x, reverse_step_moments, score, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::opt::{smoothed_tail, Adam};
use crate::rngs::{standard_normal_vec, stream, Stream};
use crate::tape::{DifferentiableFn, FnObjective, Tape, Var};
use crate::tensor::{logit, normal_logpdf, sigmoid, DenseArray, LN_TAU};

/// Lower end of the decodable field-of-view range (radians).
pub const FOV_LO: f64 = PI / 4.0;
/// Upper end of the decodable field-of-view range (radians).
pub const FOV_HI: f64 = 3.0 * PI / 4.0;

/// Additive floor on decoded guide standard deviations: σ = exp(u) + e⁻⁷.
/// Keeps entropy terms finite no matter how far a raw log-stdev drifts.
pub fn guide_std_floor() -> f64 {
    (-7.0f64).exp()
}

/// Standard normal CDF (Abramowitz–Stegun polynomial, |err| < 7.5e-8).
pub(crate) fn normal_cdf(x: f64) -> f64 {
    let xa = x.abs();
    let t = 1.0 / (1.0 + 0.2316419 * xa);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let tail = (-0.5 * xa * xa).exp() / (2.0 * PI).sqrt() * poly;
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Σ_j log N(x_j; mean_j, var) for a shared isotropic variance.
fn gauss_diag(x: &DenseArray, mean: &DenseArray, var: f64) -> f64 {
    debug_assert_eq!(x.len(), mean.len());
    x.data()
        .iter()
        .zip(mean.data())
        .map(|(&a, &b)| normal_logpdf(a, b, var))
        .sum()
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

/// Corruption parameters in their raw (unconstrained) encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionParams {
    /// Raw parameters of a corruption radiance grid, same encoding and
    /// layout as a scene grid of the given resolution.
    Grid { resolution: usize, raw: Vec<f64> },
    /// Unconstrained camera field-of-view parameter; decode with [`fov`].
    ///
    /// [`fov`]: CorruptionParams::fov
    Fov { raw: f64 },
}

impl CorruptionParams {
    /// Number of raw degrees of freedom.
    pub fn dim(&self) -> usize {
        match self {
            CorruptionParams::Grid { raw, .. } => raw.len(),
            CorruptionParams::Fov { .. } => 1,
        }
    }

    /// Map a raw value to a field of view in (π/4, 3π/4).
    pub fn fov_of_raw(raw: f64) -> f64 {
        FOV_LO + (FOV_HI - FOV_LO) * sigmoid(raw)
    }

    /// Tape twin of [`fov_of_raw`]; same composition, so the decoded angle
    /// matches the host value bitwise.
    pub fn fov_graph(tape: &mut Tape, raw: Var) -> Var {
        let s = tape.sigmoid(raw);
        let scaled = tape.mul_scalar(s, FOV_HI - FOV_LO);
        tape.add_scalar(scaled, FOV_LO)
    }

    /// Decoded field of view, `None` for grid corruption.
    pub fn fov(&self) -> Option<f64> {
        match self {
            CorruptionParams::Fov { raw } => Some(Self::fov_of_raw(*raw)),
            CorruptionParams::Grid { .. } => None,
        }
    }

    /// Raw parameters as a flat vector.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            CorruptionParams::Grid { raw, .. } => raw.clone(),
            CorruptionParams::Fov { raw } => vec![*raw],
        }
    }

    /// Rebuild parameters of the same shape as `self` from a flat vector.
    pub fn with_flat(&self, values: &[f64]) -> Result<CorruptionParams> {
        if values.len() != self.dim() {
            return Err(Error::InvalidArg(format!(
                "corruption parameter vector has length {}, expected {}",
                values.len(),
                self.dim()
            )));
        }
        Ok(match self {
            CorruptionParams::Grid { resolution, .. } => CorruptionParams::Grid {
                resolution: *resolution,
                raw: values.to_vec(),
            },
            CorruptionParams::Fov { .. } => CorruptionParams::Fov { raw: values[0] },
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CorruptionParams::Grid { resolution, raw } => {
                let want = 4 * resolution * resolution * resolution;
                if *resolution == 0 || raw.len() != want {
                    return Err(Error::InvalidArg(format!(
                        "corruption grid raw length {} does not match 4·{resolution}³",
                        raw.len()
                    )));
                }
                if !raw.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArg("corruption grid has non-finite entries".into()));
                }
            }
            CorruptionParams::Fov { raw } => {
                if !raw.is_finite() {
                    return Err(Error::InvalidArg("fov parameter is non-finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Mean-field Gaussian guide over the joint raw vector (x, c).
///
/// Standard deviations are stored as raw log values and decoded with an
/// additive floor, see [`guide_std_floor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideParams {
    pub x_mean: Vec<f64>,
    pub x_log_std: Vec<f64>,
    pub c_mean: Vec<f64>,
    pub c_log_std: Vec<f64>,
}

impl GuideParams {
    /// Zero means, unit raw stdevs (log_std = 0).
    pub fn new(x_dim: usize, c_dim: usize) -> Self {
        GuideParams {
            x_mean: vec![0.0; x_dim],
            x_log_std: vec![0.0; x_dim],
            c_mean: vec![0.0; c_dim],
            c_log_std: vec![0.0; c_dim],
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn c_dim(&self) -> usize {
        self.c_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_mean.len() != self.x_log_std.len() || self.c_mean.len() != self.c_log_std.len() {
            return Err(Error::InvalidArg(
                "guide mean/log-std lengths disagree".into(),
            ));
        }
        let all = self
            .x_mean
            .iter()
            .chain(&self.x_log_std)
            .chain(&self.c_mean)
            .chain(&self.c_log_std);
        for v in all {
            if !v.is_finite() {
                return Err(Error::InvalidArg("guide parameter is non-finite".into()));
            }
        }
        Ok(())
    }

    /// Flat layout `[x_mean, x_log_std, c_mean, c_log_std]`.
    pub fn flat(&self) -> DenseArray {
        let mut data = Vec::with_capacity(2 * self.x_dim() + 2 * self.c_dim());
        data.extend_from_slice(&self.x_mean);
        data.extend_from_slice(&self.x_log_std);
        data.extend_from_slice(&self.c_mean);
        data.extend_from_slice(&self.c_log_std);
        DenseArray::vector(data)
    }

    pub fn from_flat(x_dim: usize, c_dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * x_dim + 2 * c_dim {
            return Err(Error::InvalidArg(format!(
                "flat guide vector has length {}, expected {}",
                flat.len(),
                2 * x_dim + 2 * c_dim
            )));
        }
        Ok(GuideParams {
            x_mean: flat[..x_dim].to_vec(),
            x_log_std: flat[x_dim..2 * x_dim].to_vec(),
            c_mean: flat[2 * x_dim..2 * x_dim + c_dim].to_vec(),
            c_log_std: flat[2 * x_dim + c_dim..].to_vec(),
        })
    }

    /// Decoded scene stdevs (always ≥ the floor, hence positive and finite).
    pub fn x_std(&self) -> Vec<f64> {
        self.x_log_std.iter().map(|u| u.exp() + guide_std_floor()).collect()
    }

    pub fn c_std(&self) -> Vec<f64> {
        self.c_log_std.iter().map(|u| u.exp() + guide_std_floor()).collect()
    }

    /// Draw one (x, c) sample.
    pub fn sample(&self, rng: &mut Stream) -> (Vec<f64>, Vec<f64>) {
        let eps = standard_normal_vec(rng, self.x_dim() + self.c_dim());
        let e = eps.data();
        let x = self
            .x_mean
            .iter()
            .zip(self.x_std())
            .zip(&e[..self.x_dim()])
            .map(|((m, s), n)| m + s * n)
            .collect();
        let c = self
            .c_mean
            .iter()
            .zip(self.c_std())
            .zip(&e[self.x_dim()..])
            .map(|((m, s), n)| m + s * n)
            .collect();
        (x, c)
    }

    /// log q(x, c) under the guide.
    pub fn log_density(&self, x: &[f64], c: &[f64]) -> f64 {
        assert_eq!(x.len(), self.x_dim());
        assert_eq!(c.len(), self.c_dim());
        let part = |v: &[f64], mean: &[f64], std: Vec<f64>| -> f64 {
            v.iter()
                .zip(mean)
                .zip(std)
                .map(|((a, m), s)| normal_logpdf(*a, *m, s * s))
                .sum()
        };
        part(x, &self.x_mean, self.x_std()) + part(c, &self.c_mean, self.c_std())
    }
}

/// One unweighted posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

/// Provenance and diagnostics attached to a particle set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMeta {
    pub method: String,
    /// Base seed from which per-particle streams were derived.
    pub seed: u64,
    /// Reverse-time discretization bins T.
    pub bins: usize,
    /// Langevin step size δ.
    pub delta: f64,
    /// Effective sample size after each weighting step (one entry for a
    /// plain importance sampler: the final set).
    pub ess_trace: Vec<f64>,
    /// Coefficient of variation of each step's incremental weights
    /// (sequential sampler only).
    pub cv_trace: Vec<f64>,
    /// Weighting steps (1-based) after which ancestors were resampled.
    pub resamples: Vec<usize>,
}

/// Particles with self-normalizable log weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedParticleSet {
    pub particles: Vec<Particle>,
    /// One log weight per particle; each is finite or −∞, never NaN.
    pub log_weights: Vec<f64>,
    pub meta: ParticleMeta,
}

/// Normalized weights from raw log weights. Errors when the set is empty,
/// any entry is NaN or +∞, or every entry is −∞.
fn norm_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::InvalidArg("empty particle set".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &lw in log_weights {
        if lw.is_nan() || lw == f64::INFINITY {
            return Err(Error::InvalidArg(format!("log weight {lw} is not finite-or-neg-inf")));
        }
        if lw > max {
            max = lw;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let mut w: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    Ok(w)
}

fn ess_of(log_weights: &[f64]) -> Result<f64> {
    let w = norm_weights(log_weights)?;
    Ok(1.0 / w.iter().map(|v| v * v).sum::<f64>())
}

impl WeightedParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Weights normalized to sum to one.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        if self.log_weights.len() != self.particles.len() {
            return Err(Error::InvalidArg(format!(
                "{} particles but {} log weights",
                self.particles.len(),
                self.log_weights.len()
            )));
        }
        norm_weights(&self.log_weights)
    }

    /// Effective sample size (Σw)²/Σw² of the normalized weights, in [1, K].
    pub fn ess(&self) -> Result<f64> {
        self.normalized_weights()
            .map(|w| 1.0 / w.iter().map(|v| v * v).sum::<f64>())
    }
}

// ---------------------------------------------------------------------------
// Sampler configuration
// ---------------------------------------------------------------------------

/// Likelihood-guidance anneal factor f(t) applied inside the proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anneal {
    /// f(t) = 0.01 + 0.99·(1−t)^1.5: nearly off at full noise, full
    /// strength at the data end.
    Ramp,
    /// Constant factor; 0 disables guidance entirely.
    Constant(f64),
}

impl Anneal {
    pub fn factor(&self, t: f64) -> f64 {
        match self {
            Anneal::Ramp => 0.01 + 0.99 * (1.0 - t).powf(1.5),
            Anneal::Constant(v) => *v,
        }
    }
}

/// Settings for guided reverse diffusion with interleaved corruption updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReGALCfg {
    /// Langevin step size δ for the corruption chain.
    pub delta: f64,
    /// Reverse-time discretization bins T.
    pub bins: usize,
    /// Guidance anneal f(t).
    pub anneal: Anneal,
    /// Extra multiplier on the observation term inside guidance and Langevin
    /// drift. Shapes the proposal only: importance weights are always taken
    /// against the unscaled likelihood.
    #[serde(default = "one")]
    pub likelihood_scale: f64,
    /// Langevin updates per outer step.
    #[serde(default = "one_usize")]
    pub inner_steps: usize,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl Default for ReGALCfg {
    fn default() -> Self {
        ReGALCfg {
            delta: 1e-3,
            bins: 256,
            anneal: Anneal::Ramp,
            likelihood_scale: 1.0,
            inner_steps: 1,
        }
    }
}

impl ReGALCfg {
    pub fn new(delta: f64, bins: usize) -> Self {
        ReGALCfg {
            delta,
            bins,
            ..ReGALCfg::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArg(format!("delta {} must be positive", self.delta)));
        }
        if self.bins == 0 {
            return Err(Error::InvalidArg("need at least one reverse bin".into()));
        }
        if !(self.likelihood_scale >= 0.0 && self.likelihood_scale.is_finite()) {
            return Err(Error::InvalidArg(format!(
                "likelihood_scale {} must be finite and non-negative",
                self.likelihood_scale
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidArg("need at least one Langevin step".into()));
        }
        Ok(())
    }
}

/// Ancestor-resampling policy for [`regal_smc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    /// Resample after every weighting step.
    EveryStep,
    /// Resample only when ESS drops below K/2.
    EssThreshold,
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

/// Single-pixel scene/corruption blend.
///
/// The scene value x has a normal prior truncated to [0,1]; the corruption
/// is a semi-transparent flat layer with reflectance c_r and opacity c_α,
/// each uniform on [0,1]. The pixel blends front-to-back,
/// μ = c_α·c_r + (1−c_α)·x, and is observed with Gaussian noise. All three
/// densities are normalized over their stated supports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub prior_mean: f64,
    /// Variance of the (untruncated) scene prior.
    pub prior_var: f64,
    pub obs_std: f64,
}

impl Default for ToyModel {
    fn default() -> Self {
        ToyModel {
            prior_mean: 0.2,
            prior_var: 0.25,
            obs_std: 0.1,
        }
    }
}

impl ToyModel {
    /// Pixel value produced by compositing the layer over the scene.
    pub fn blend(&self, x: f64, c_r: f64, c_a: f64) -> f64 {
        c_a * c_r + (1.0 - c_a) * x
    }

    /// log of the truncation constant Φ((1−m)/s) − Φ((0−m)/s).
    fn trunc_log_z(&self) -> f64 {
        let s = self.prior_var.sqrt();
        (normal_cdf((1.0 - self.prior_mean) / s) - normal_cdf(-self.prior_mean / s)).ln()
    }

    /// Normalized truncated-normal log prior of the scene value.
    pub fn log_prior_x(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return f64::NEG_INFINITY;
        }
        normal_logpdf(x, self.prior_mean, self.prior_var) - self.trunc_log_z()
    }

    /// Mean of the truncated scene prior (closed form).
    pub fn prior_mean_truncated(&self) -> f64 {
        let s = self.prior_var.sqrt();
        let (a, b) = (-self.prior_mean / s, (1.0 - self.prior_mean) / s);
        let phi = |v: f64| (-0.5 * v * v).exp() / (2.0 * PI).sqrt();
        let z = normal_cdf(b) - normal_cdf(a);
        self.prior_mean + s * (phi(a) - phi(b)) / z
    }

    pub fn log_lik(&self, x: f64, c_r: f64, c_a: f64, y: f64) -> f64 {
        normal_logpdf(y, self.blend(x, c_r, c_a), self.obs_std * self.obs_std)
    }

    /// log p(x, c_r, c_α, y); −∞ outside the unit-cube support.
    pub fn log_joint(&self, x: f64, c_r: f64, c_a: f64, y: f64) -> f64 {
        if !(0.0..=1.0).contains(&c_r) || !(0.0..=1.0).contains(&c_a) {
            return f64::NEG_INFINITY;
        }
        self.log_prior_x(x) + self.log_lik(x, c_r, c_a, y)
    }

    /// Shared tape graph over u = (u_x, u_r, u_α) with (x, c_r, c_α) =
    /// sigmoid(u). With `jacobian`, adds the log volume change of the
    /// squash, making the value a normalized density over u.
    fn squashed_graph(&self, t: &mut Tape, u: Var, y: f64, jacobian: bool) -> Var {
        let m = *self;
        let sv = t.sigmoid(u);
        let x = t.slice(sv, 0..1);
        let cr = t.slice(sv, 1..2);
        let ca = t.slice(sv, 2..3);
        let front = t.mul(ca, cr);
        let nca = t.neg(ca);
        let omca = t.add_scalar(nca, 1.0);
        let back = t.mul(omca, x);
        let mu = t.add(front, back);
        let nmu = t.neg(mu);
        let resid = t.add_scalar(nmu, y);
        let r2 = t.square(resid);
        let ov = m.obs_std * m.obs_std;
        let llq = t.mul_scalar(r2, -0.5 / ov);
        let ll = t.add_scalar(llq, -0.5 * (LN_TAU + ov.ln()));
        let dx = t.add_scalar(x, -m.prior_mean);
        let d2 = t.square(dx);
        let lpq = t.mul_scalar(d2, -0.5 / m.prior_var);
        let lp = t.add_scalar(lpq, -0.5 * (LN_TAU + m.prior_var.ln()) - m.trunc_log_z());
        let mut total = t.add(ll, lp);
        if jacobian {
            let sp_pos = t.softplus(u);
            let nu = t.neg(u);
            let sp_neg = t.softplus(nu);
            let both = t.add(sp_pos, sp_neg);
            let jac = t.sum(both);
            let njac = t.neg(jac);
            total = t.add(total, njac);
        }
        total
    }

    /// Log-joint objective over unconstrained u for point estimation.
    ///
    /// No squash Jacobian: the maximizer matches the constrained-space mode,
    /// and the value is the true log joint at the decoded point.
    pub fn map_objective(&self, y: f64) -> FnObjective<impl Fn(&mut Tape, Var) -> Var + Send + Sync> {
        let m = *self;
        FnObjective::new(vec![3], move |t: &mut Tape, u: Var| {
            m.squashed_graph(t, u, y, false)
        })
    }

    /// Log-joint density over unconstrained u for variational inference.
    ///
    /// Includes the squash Jacobian, so its evidence equals the constrained
    /// model's evidence.
    pub fn vi_objective(&self, y: f64) -> FnObjective<impl Fn(&mut Tape, Var) -> Var + Send + Sync> {
        let m = *self;
        FnObjective::new(vec![3], move |t: &mut Tape, u: Var| {
            m.squashed_graph(t, u, y, true)
        })
    }
}

// ---------------------------------------------------------------------------
// Observation models and auxiliary priors
// ---------------------------------------------------------------------------

/// Differentiable observation model p(y | x, c) with the observation bound
/// into the implementation.
pub trait ObsModel: Send + Sync {
    fn x_dim(&self) -> usize;
    fn c_dim(&self) -> usize;

    /// Record log p(y | x, c) on the tape. Implementations with
    /// `c_dim() == 0` ignore `c` (callers pass an empty constant).
    fn log_lik_graph(&self, tape: &mut Tape, x: Var, c: Var) -> Var;

    /// Likelihood stand-in used while the scene is still noisy:
    /// log p̃(y | x̂, c) at the data estimate x̂ for time t. Defaults to the
    /// plain likelihood evaluated at x̂.
    fn lookahead_graph(&self, tape: &mut Tape, x_hat: Var, c: Var, _t: f64) -> Var {
        self.log_lik_graph(tape, x_hat, c)
    }

    /// Plain value of log p(y | x, c).
    fn log_lik(&self, x: &[f64], c: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(DenseArray::vector(x.to_vec()));
        let cv = tape.constant(DenseArray::vector(c.to_vec()));
        let r = self.log_lik_graph(&mut tape, xv, cv);
        if let Some(f) = tape.take_fault() {
            return Err(f);
        }
        Ok(tape.value(r).item())
    }

    /// Plain value of the lookahead likelihood.
    fn lookahead(&self, x_hat: &[f64], c: &[f64], t: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(DenseArray::vector(x_hat.to_vec()));
        let cv = tape.constant(DenseArray::vector(c.to_vec()));
        let r = self.lookahead_graph(&mut tape, xv, cv, t);
        if let Some(f) = tape.take_fault() {
            return Err(f);
        }
        Ok(tape.value(r).item())
    }
}

/// Prior over auxiliary corruption parameters, conditioned on the current
/// scene estimate. Implementations provide closed-form scores, so no tape
/// is involved.
pub trait AuxPrior: Send + Sync {
    fn dim(&self) -> usize;

    /// log p(c | x̂). Improper (unnormalized-constant) priors return 0.
    fn log_prior(&self, c: &[f64], x_hat: &[f64]) -> f64;

    /// ∇_c log p(c | x̂).
    fn prior_score(&self, c: &[f64], x_hat: &[f64]) -> Vec<f64>;

    /// Draw the chain's initial corruption state given the initial scene
    /// noise vector.
    fn sample_init(&self, z: &[f64], rng: &mut Stream) -> Vec<f64>;

    /// Log density of `sample_init` at `c`. Enters importance weights as the
    /// chain-initialization proposal factor; improper priors return 0,
    /// treating their init draw as the reference measure on the extended
    /// space.
    fn init_log_density(&self, c: &[f64], z: &[f64]) -> f64;
}

/// Improper uniform prior p(c) ∝ 1 over all of ℝ^dim.
///
/// The initial state is drawn from N(0, init_std² I) purely to start the
/// chain somewhere; matching `init_log_density` = `log_prior` = 0 keeps that
/// draw out of the weights.
#[derive(Debug, Clone)]
pub struct ImproperUniformAux {
    pub dim: usize,
    pub init_std: f64,
}

impl ImproperUniformAux {
    pub fn new(dim: usize) -> Self {
        ImproperUniformAux { dim, init_std: 1.0 }
    }
}

impl AuxPrior for ImproperUniformAux {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prior(&self, _c: &[f64], _x_hat: &[f64]) -> f64 {
        0.0
    }

    fn prior_score(&self, c: &[f64], _x_hat: &[f64]) -> Vec<f64> {
        vec![0.0; c.len()]
    }

    fn sample_init(&self, _z: &[f64], rng: &mut Stream) -> Vec<f64> {
        standard_normal_vec(rng, self.dim)
            .into_data()
            .into_iter()
            .map(|v| self.init_std * v)
            .collect()
    }

    fn init_log_density(&self, _c: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
}

/// Each sigmoid(c_j) uniform on (0,1): the raw-space density is the logistic
/// distribution, log p(c) = Σ −softplus(c_j) − softplus(−c_j).
#[derive(Debug, Clone)]
pub struct LogitUniformAux {
    pub dim: usize,
}

impl AuxPrior for LogitUniformAux {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prior(&self, c: &[f64], _x_hat: &[f64]) -> f64 {
        c.iter()
            .map(|&u| -crate::tensor::softplus(u) - crate::tensor::softplus(-u))
            .sum()
    }

    fn prior_score(&self, c: &[f64], _x_hat: &[f64]) -> Vec<f64> {
        c.iter().map(|&u| 1.0 - 2.0 * sigmoid(u)).collect()
    }

    fn sample_init(&self, _z: &[f64], rng: &mut Stream) -> Vec<f64> {
        (0..self.dim)
            .map(|_| {
                let mut v: f64 = rng.gen();
                while v <= 0.0 {
                    v = rng.gen();
                }
                logit(v)
            })
            .collect()
    }

    fn init_log_density(&self, c: &[f64], _z: &[f64]) -> f64 {
        self.log_prior(c, &[])
    }
}

/// Independent Gaussian prior on each corruption coordinate.
#[derive(Debug, Clone)]
pub struct GaussianAux {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AuxPrior for GaussianAux {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_prior(&self, c: &[f64], _x_hat: &[f64]) -> f64 {
        c.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| normal_logpdf(*v, *m, s * s))
            .sum()
    }

    fn prior_score(&self, c: &[f64], _x_hat: &[f64]) -> Vec<f64> {
        c.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (m - v) / (s * s))
            .collect()
    }

    fn sample_init(&self, _z: &[f64], rng: &mut Stream) -> Vec<f64> {
        let eps = standard_normal_vec(rng, self.dim());
        eps.data()
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((e, m), s)| m + s * e)
            .collect()
    }

    fn init_log_density(&self, c: &[f64], _z: &[f64]) -> f64 {
        self.log_prior(c, &[])
    }
}

/// Constant log likelihood: carries no information about (x, c).
#[derive(Debug, Clone)]
pub struct FlatObs {
    pub x_dim: usize,
    pub c_dim: usize,
    pub level: f64,
}

impl ObsModel for FlatObs {
    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn c_dim(&self) -> usize {
        self.c_dim
    }

    fn log_lik_graph(&self, tape: &mut Tape, _x: Var, _c: Var) -> Var {
        tape.constant(DenseArray::vector(vec![self.level]))
    }
}

/// Direct Gaussian observation of the scene vector: y = x + ε,
/// ε ~ N(0, noise_var·I). Ignores c.
#[derive(Debug, Clone)]
pub struct GaussianMeanObs {
    pub y: Vec<f64>,
    pub noise_var: f64,
}

fn iso_gauss_graph(tape: &mut Tape, y: &[f64], x: Var, var: f64) -> Var {
    let yv = tape.constant(DenseArray::vector(y.to_vec()));
    let d = tape.sub(yv, x);
    let q = tape.square(d);
    let sq = tape.sum(q);
    let quad = tape.mul_scalar(sq, -0.5 / var);
    tape.add_scalar(quad, -0.5 * y.len() as f64 * (LN_TAU + var.ln()))
}

impl ObsModel for GaussianMeanObs {
    fn x_dim(&self) -> usize {
        self.y.len()
    }

    fn c_dim(&self) -> usize {
        0
    }

    fn log_lik_graph(&self, tape: &mut Tape, x: Var, _c: Var) -> Var {
        iso_gauss_graph(tape, &self.y, x, self.noise_var)
    }
}

/// The same direct observation, with the lookahead replaced by the exact
/// marginal likelihood under a N(prior_mean, prior_var·I) scene prior:
/// log p(y | z_t) = Σ_j log N(y_j; x̂_j, noise_var + Var[x_j | z_t]).
///
/// With an exact posterior-mean denoiser this makes every intermediate
/// target of the sequential sampler exact.
#[derive(Debug, Clone)]
pub struct ConjugateGaussianObs {
    pub y: Vec<f64>,
    pub noise_var: f64,
    pub prior_var: f64,
    pub schedule: NoiseSchedule,
}

impl ConjugateGaussianObs {
    /// Var[x_j | z_t] for the conjugate chain: prior_var·σ_t²/(σ_t² + α_t²·prior_var).
    pub fn posterior_var(&self, t: f64) -> f64 {
        let a = self.schedule.alpha(t);
        let s2 = self.schedule.sigma2(t);
        self.prior_var * s2 / (s2 + a * a * self.prior_var)
    }
}

impl ObsModel for ConjugateGaussianObs {
    fn x_dim(&self) -> usize {
        self.y.len()
    }

    fn c_dim(&self) -> usize {
        0
    }

    fn log_lik_graph(&self, tape: &mut Tape, x: Var, _c: Var) -> Var {
        iso_gauss_graph(tape, &self.y, x, self.noise_var)
    }

    fn lookahead_graph(&self, tape: &mut Tape, x_hat: Var, _c: Var, t: f64) -> Var {
        iso_gauss_graph(tape, &self.y, x_hat, self.noise_var + self.posterior_var(t))
    }
}

/// Toy blend observation for the latent-diffusion path. The scene is the
/// 1-D value x (diffusion runs on it directly, so it may leave [0,1] at
/// intermediate times); c = (u_r, u_α) are raw corruption parameters
/// squashed through sigmoid.
#[derive(Debug, Clone)]
pub struct ToyObs {
    pub model: ToyModel,
    pub y: f64,
}

impl ObsModel for ToyObs {
    fn x_dim(&self) -> usize {
        1
    }

    fn c_dim(&self) -> usize {
        2
    }

    fn log_lik_graph(&self, tape: &mut Tape, x: Var, c: Var) -> Var {
        let sc = tape.sigmoid(c);
        let cr = tape.slice(sc, 0..1);
        let ca = tape.slice(sc, 1..2);
        let front = tape.mul(ca, cr);
        let nca = tape.neg(ca);
        let omca = tape.add_scalar(nca, 1.0);
        let back = tape.mul(omca, x);
        let mu = tape.add(front, back);
        let nmu = tape.neg(mu);
        let resid = tape.add_scalar(nmu, self.y);
        let r2 = tape.square(resid);
        let ov = self.model.obs_std * self.model.obs_std;
        let q = tape.mul_scalar(r2, -0.5 / ov);
        tape.add_scalar(q, -0.5 * (LN_TAU + ov.ln()))
    }
}

// ---------------------------------------------------------------------------
// Point estimation
// ---------------------------------------------------------------------------

/// Result of a gradient-ascent point estimate.
#[derive(Debug, Clone)]
pub struct MapFit {
    /// Highest-objective point seen, not necessarily the last iterate.
    pub point: DenseArray,
    pub value: f64,
    /// Objective value at the initial point and after every step.
    pub trace: Vec<f64>,
}

/// Adam ascent on a log joint. Errors if the objective is non-finite at the
/// initial point; a non-finite value or gradient later simply ends the
/// ascent, returning the best point seen until then.
pub fn map_estimate(
    log_joint: &dyn DifferentiableFn,
    init: &DenseArray,
    steps: usize,
    lr: f64,
) -> Result<MapFit> {
    if steps == 0 {
        return Err(Error::InvalidArg("map_estimate needs steps >= 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArg(format!("learning rate {lr} must be positive")));
    }
    let (v0, g0) = crate::tape::gradient(log_joint, init)?;
    if !v0.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            what: format!("objective is {v0} at the initial point"),
        });
    }
    let mut p = init.clone();
    let mut best_p = p.clone();
    let mut best_v = v0;
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(v0);
    let mut adam = Adam::new(p.len());
    let mut g = g0;
    for _ in 0..steps {
        g.scale(-1.0);
        adam.step(&mut p, &g, lr);
        match crate::tape::gradient(log_joint, &p) {
            Ok((v, ng)) if v.is_finite() => {
                trace.push(v);
                if v > best_v {
                    best_v = v;
                    best_p = p.clone();
                }
                g = ng;
            }
            _ => break,
        }
    }
    Ok(MapFit {
        point: best_p,
        value: best_v,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Variational inference
// ---------------------------------------------------------------------------

/// One reparameterized Monte Carlo estimate of the (KL-weighted) ELBO and
/// its gradient with respect to the flat guide parameters.
///
/// The estimator is E_ε[log p(s) − κ·log q_θ̄(s)] with s = μ + σ⊙ε; the
/// density parameters θ̄ inside log q are held as constants (path-derivative
/// form), so at an exact posterior the per-sample gradient vanishes rather
/// than just averaging out. Each replicate consumes one standard-normal
/// vector covering the x dims then the c dims. At `kl_weight` = 1 the value
/// is an unbiased ELBO estimate.
pub fn elbo_and_grad(
    guide: &GuideParams,
    log_joint: &dyn DifferentiableFn,
    n_mc: usize,
    kl_weight: f64,
    rng: &mut Stream,
) -> Result<(f64, DenseArray)> {
    guide.validate()?;
    if n_mc == 0 {
        return Err(Error::InvalidArg("need at least one Monte Carlo sample".into()));
    }
    let (dx, dc) = (guide.x_dim(), guide.c_dim());
    let d = dx + dc;
    let want = log_joint.param_shape();
    if want != vec![d] {
        return Err(Error::InvalidArg(format!(
            "log joint expects shape {want:?} but the guide covers {d} dims"
        )));
    }
    let theta0 = guide.flat();
    let mut tape = Tape::new();
    let th = tape.leaf(theta0);
    let mx = tape.slice(th, 0..dx);
    let lx = tape.slice(th, dx..2 * dx);
    let (mean_v, log_std_v) = if dc > 0 {
        let mc = tape.slice(th, 2 * dx..2 * dx + dc);
        let lc = tape.slice(th, 2 * dx + dc..2 * dx + 2 * dc);
        (tape.concat(&[mx, mc]), tape.concat(&[lx, lc]))
    } else {
        (mx, lx)
    };
    let ex = tape.exp(log_std_v);
    let sig = tape.add_scalar(ex, guide_std_floor());

    // Frozen copies of the current density parameters (stop-gradient).
    let mut mean0 = guide.x_mean.clone();
    mean0.extend_from_slice(&guide.c_mean);
    let mut std0 = guide.x_std();
    std0.extend(guide.c_std());
    let inv2v: Vec<f64> = std0.iter().map(|s| -0.5 / (s * s)).collect();
    let log_norm: f64 = std0.iter().map(|s| -0.5 * LN_TAU - s.ln()).sum();
    let mean_c = tape.constant(DenseArray::vector(mean0));
    let inv_c = tape.constant(DenseArray::vector(inv2v));

    let mut acc: Option<Var> = None;
    for _ in 0..n_mc {
        let eps = tape.constant(standard_normal_vec(rng, d));
        let se = tape.mul(sig, eps);
        let s = tape.add(mean_v, se);
        let lp = log_joint.build(&mut tape, s);
        let diff = tape.sub(s, mean_c);
        let q2 = tape.square(diff);
        let wq = tape.mul(q2, inv_c);
        let sq = tape.sum(wq);
        let lq = tape.add_scalar(sq, log_norm);
        let nk = tape.mul_scalar(lq, -kl_weight);
        let term = tape.add(lp, nk);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    let total = tape.mul_scalar(acc.expect("n_mc >= 1"), 1.0 / n_mc as f64);
    if let Some(f) = tape.take_fault() {
        return Err(f);
    }
    let value = tape.value(total).item();
    let grads = tape.backward(total)?;
    let g = grads[th.id()]
        .clone()
        .unwrap_or_else(|| DenseArray::zeros(vec![2 * d]));
    if !g.all_finite() {
        return Err(Error::NonFinite {
            op: "elbo gradient",
            node: th.id(),
        });
    }
    Ok((value, g))
}

/// Settings for [`fit_vi`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViCfg {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    /// Steps over which the KL weight ramps linearly from ~0 to 1.
    pub anneal_span: usize,
    pub n_mc: usize,
    pub seed: u64,
    /// Stdev of the random mean initialization.
    pub init_mean_std: f64,
    pub init_log_std: f64,
}

impl Default for ViCfg {
    fn default() -> Self {
        ViCfg {
            steps: 10_000,
            lr: 1e-4,
            restarts: 8,
            anneal_span: 5_000,
            n_mc: 8,
            seed: 0,
            init_mean_std: 0.5,
            init_log_std: -1.0,
        }
    }
}

impl ViCfg {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 || self.n_mc == 0 {
            return Err(Error::InvalidArg(
                "steps, restarts and n_mc must all be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArg(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Fitted guide plus per-restart diagnostics.
#[derive(Debug, Clone)]
pub struct ViFit {
    pub best: GuideParams,
    pub best_restart: usize,
    /// Per-restart ELBO traces (diverged restarts keep their partial trace).
    pub traces: Vec<Vec<f64>>,
    /// Smoothed tail ELBO per restart; −∞ marks a diverged restart.
    pub final_scores: Vec<f64>,
}

/// Fit a mean-field Gaussian guide by stochastic gradient ascent on the
/// ELBO, from several random restarts; the guide with the largest smoothed
/// final ELBO wins. Errors only if every restart diverges.
pub fn fit_vi(log_joint: &dyn DifferentiableFn, x_dim: usize, c_dim: usize, cfg: &ViCfg) -> Result<ViFit> {
    cfg.validate()?;
    let want = log_joint.param_shape();
    if want != vec![x_dim + c_dim] {
        return Err(Error::InvalidArg(format!(
            "log joint expects shape {want:?} but the guide covers {} dims",
            x_dim + c_dim
        )));
    }
    let mut traces = Vec::with_capacity(cfg.restarts);
    let mut final_scores = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, GuideParams, usize)> = None;
    for r in 0..cfg.restarts {
        let mut rng = stream(cfg.seed, "vi-restart", r as u64);
        let d = x_dim + c_dim;
        let init_means = standard_normal_vec(&mut rng, d);
        let im = init_means.data();
        let guide0 = GuideParams {
            x_mean: im[..x_dim].iter().map(|v| cfg.init_mean_std * v).collect(),
            x_log_std: vec![cfg.init_log_std; x_dim],
            c_mean: im[x_dim..].iter().map(|v| cfg.init_mean_std * v).collect(),
            c_log_std: vec![cfg.init_log_std; c_dim],
        };
        let mut theta = guide0.flat();
        let mut adam = Adam::new(theta.len());
        let mut trace = Vec::with_capacity(cfg.steps);
        let mut ok = true;
        for step in 0..cfg.steps {
            let kl_weight = if cfg.anneal_span == 0 {
                1.0
            } else {
                ((step + 1) as f64 / cfg.anneal_span as f64).min(1.0)
            };
            let guide = GuideParams::from_flat(x_dim, c_dim, theta.data())?;
            match elbo_and_grad(&guide, log_joint, cfg.n_mc, kl_weight, &mut rng) {
                Ok((v, mut grad)) if v.is_finite() => {
                    trace.push(v);
                    grad.scale(-1.0);
                    adam.step(&mut theta, &grad, cfg.lr);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let score = smoothed_tail(&trace, (cfg.steps / 10).max(1));
            final_scores.push(score);
            let better = best.as_ref().map_or(true, |(b, _, _)| score > *b);
            if score.is_finite() && better {
                best = Some((score, GuideParams::from_flat(x_dim, c_dim, theta.data())?, r));
            }
        } else {
            final_scores.push(f64::NEG_INFINITY);
        }
        traces.push(trace);
    }
    match best {
        Some((_, guide, r)) => Ok(ViFit {
            best: guide,
            best_restart: r,
            traces,
            final_scores,
        }),
        None => Err(Error::Diverged {
            step: 0,
            what: format!("all {} restarts diverged", cfg.restarts),
        }),
    }
}

// ---------------------------------------------------------------------------
// Toy-model quadrature
// ---------------------------------------------------------------------------

/// Dense-grid posterior for [`ToyModel`].
#[derive(Debug, Clone)]
pub struct ToyQuadrature {
    /// Normalized posterior mass per cell over (x, c_r, c_α), shape
    /// [res, res, res] with x varying slowest.
    pub table: DenseArray,
    /// Mass marginal over x (sums to 1).
    pub x_marginal: Vec<f64>,
    /// Posterior mean of x.
    pub mean_x: f64,
    /// Midpoint-rule log evidence log ∫ p(x, c, y) dx dc.
    pub log_evidence: f64,
}

/// Midpoint-rule posterior over the unit cube at `res` cells per axis.
pub fn toy_quadrature(model: &ToyModel, y: f64, res: usize) -> Result<ToyQuadrature> {
    if res < 32 {
        return Err(Error::InvalidArg(format!("resolution {res} below the minimum of 32")));
    }
    if !y.is_finite() {
        return Err(Error::InvalidArg("observation must be finite".into()));
    }
    let n = res * res * res;
    let grid: Vec<f64> = (0..res).map(|i| (i as f64 + 0.5) / res as f64).collect();
    let ov = model.obs_std * model.obs_std;
    let ll_const = -0.5 * (LN_TAU + ov.ln());
    let inv2 = 0.5 / ov;
    let mut vals = vec![0.0f64; n];
    let mut vmax = f64::NEG_INFINITY;
    let mut idx = 0;
    for &x in &grid {
        let lp = model.log_prior_x(x);
        for &cr in &grid {
            for &ca in &grid {
                let mu = ca * cr + (1.0 - ca) * x;
                let d = y - mu;
                let v = lp + ll_const - d * d * inv2;
                vals[idx] = v;
                if v > vmax {
                    vmax = v;
                }
                idx += 1;
            }
        }
    }
    let mut sum = 0.0;
    for v in &mut vals {
        *v = (*v - vmax).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in &mut vals {
        *v *= inv;
    }
    let log_evidence = vmax + sum.ln() - 3.0 * (res as f64).ln();
    let r2 = res * res;
    let x_marginal: Vec<f64> = (0..res)
        .map(|i| vals[i * r2..(i + 1) * r2].iter().sum())
        .collect();
    let mean_x = grid.iter().zip(&x_marginal).map(|(x, m)| x * m).sum();
    Ok(ToyQuadrature {
        table: DenseArray::from_vec(vec![res, res, res], vals),
        x_marginal,
        mean_x,
        log_evidence,
    })
}

// ---------------------------------------------------------------------------
// Guided reverse diffusion
// ---------------------------------------------------------------------------

struct GuidedMoments {
    base_mean: DenseArray,
    /// None when the guidance factor is exactly 0; then the step is the
    /// plain reverse step, bit for bit.
    guided_mean: Option<DenseArray>,
    var: f64,
}

/// Reverse-transition moments with the score shifted by
/// factor·∇_z log p̃(y | x̂(z; t), c).
fn guided_moments(
    d: &dyn Denoiser,
    obs: &dyn ObsModel,
    c: &DenseArray,
    z_t: &DenseArray,
    s: f64,
    t: f64,
    factor: f64,
) -> Result<GuidedMoments> {
    let ns = d.schedule();
    if factor == 0.0 {
        let sc = score(d, z_t, t)?;
        let (mean, var) = reverse_step_moments(ns, z_t, &sc, s, t)?;
        return Ok(GuidedMoments {
            base_mean: mean,
            guided_mean: None,
            var,
        });
    }
    let a_raw = ns.alpha_unclamped(t);
    if a_raw < ns.alpha_floor {
        return Err(Error::InvalidArg(format!(
            "alpha({t}) = {a_raw:.3e} is below the clamp floor; guidance has no data estimate"
        )));
    }
    let (alpha, sigma) = (ns.alpha(t), ns.sigma(t));
    let mut tape = Tape::new();
    let zv = tape.leaf(z_t.clone());
    let ev = d.predict_noise(&mut tape, zv, t);
    let scaled = tape.mul_scalar(ev, -sigma);
    let num = tape.add(zv, scaled);
    let x_hat = tape.mul_scalar(num, 1.0 / alpha);
    let cv = tape.constant(c.clone());
    let ll = obs.lookahead_graph(&mut tape, x_hat, cv, t);
    if let Some(f) = tape.take_fault() {
        return Err(f);
    }
    let eps = tape.value(ev).clone();
    let grads = tape.backward(ll)?;
    let g = match &grads[zv.id()] {
        Some(g) => g.clone(),
        None => DenseArray::zeros(z_t.shape().to_vec()),
    };
    if !g.all_finite() {
        return Err(Error::NonFinite {
            op: "guidance gradient",
            node: zv.id(),
        });
    }
    let mut s_tilde = eps.map(|v| -v / sigma);
    let (base_mean, var) = reverse_step_moments(ns, z_t, &s_tilde, s, t)?;
    s_tilde.axpy(factor, &g);
    let (guided_mean, _) = reverse_step_moments(ns, z_t, &s_tilde, s, t)?;
    Ok(GuidedMoments {
        base_mean,
        guided_mean: Some(guided_mean),
        var,
    })
}

/// One reverse step z_t → z_s whose score is shifted by the scaled gradient
/// of the lookahead likelihood: s̃ = s_φ + f(t)·∇_z log p̃(y | x̂(z_t; t), c).
/// With a factor of exactly 0 this reproduces the unguided reverse step bit
/// for bit. Errors if the guidance gradient is non-finite.
pub fn guided_reverse_step(
    d: &dyn Denoiser,
    obs: &dyn ObsModel,
    c_t: &DenseArray,
    z_t: &DenseArray,
    s: f64,
    t: f64,
    cfg: &ReGALCfg,
    noise: &DenseArray,
) -> Result<DenseArray> {
    cfg.validate()?;
    if z_t.shape() != noise.shape() {
        return Err(Error::InvalidArg(format!(
            "noise shape {:?} does not match state shape {:?}",
            noise.shape(),
            z_t.shape()
        )));
    }
    let factor = cfg.anneal.factor(t) * cfg.likelihood_scale;
    let m = guided_moments(d, obs, c_t, z_t, s, t, factor)?;
    let mut out = match m.guided_mean {
        Some(mean) => mean,
        None => m.base_mean,
    };
    out.axpy(m.var.sqrt(), noise);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Langevin corruption updates
// ---------------------------------------------------------------------------

/// Drift ∇_c [log p(c | x̂) + scale·log p̃(y | x̂, c)] and the unscaled
/// observation term's value at c.
fn langevin_drift(
    obs: &dyn ObsModel,
    aux: &dyn AuxPrior,
    x_hat: &DenseArray,
    c: &DenseArray,
    t: f64,
    final_level: bool,
    scale: f64,
) -> Result<(DenseArray, f64)> {
    let ps = aux.prior_score(c.data(), x_hat.data());
    if !ps.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            op: "corruption prior score",
            node: 0,
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x_hat.clone());
    let cv = tape.leaf(c.clone());
    let ll = if final_level {
        obs.log_lik_graph(&mut tape, xv, cv)
    } else {
        obs.lookahead_graph(&mut tape, xv, cv, t)
    };
    if let Some(f) = tape.take_fault() {
        return Err(f);
    }
    let value = tape.value(ll).item();
    let grads = tape.backward(ll)?;
    let g = match &grads[cv.id()] {
        Some(g) => g.clone(),
        None => DenseArray::zeros(vec![c.len()]),
    };
    if !g.all_finite() {
        return Err(Error::NonFinite {
            op: "langevin drift",
            node: cv.id(),
        });
    }
    let mut drift = DenseArray::vector(ps);
    drift.axpy(scale, &g);
    Ok((drift, value))
}

struct LangevinOut {
    c: DenseArray,
    /// log p(c | x̂) at the final point.
    aux_copy: f64,
    /// Σ over inner steps of log L(c_old | c_new) − log K(c_new | c_old),
    /// where K is the forward Langevin kernel and L the drift-reversed
    /// backward kernel of the same form.
    reversal: f64,
    /// Unscaled observation term at (x̂, final c); NaN when not tracked.
    obs_term: f64,
}

/// Run `inner` unadjusted Langevin steps on c around the current scene
/// estimate. With `track`, also accumulate the weight bookkeeping terms.
fn langevin_level(
    obs: &dyn ObsModel,
    aux: &dyn AuxPrior,
    x_hat: &DenseArray,
    c0: &DenseArray,
    t: f64,
    final_level: bool,
    delta: f64,
    scale: f64,
    inner: usize,
    track: bool,
    rng: &mut Stream,
) -> Result<LangevinOut> {
    let dim = aux.dim();
    let half = 0.5 * delta;
    let root = delta.sqrt();
    let mut c = c0.clone();
    let mut reversal = 0.0;
    let mut obs_term = f64::NAN;
    for _ in 0..inner {
        let (drift, _) = langevin_drift(obs, aux, x_hat, &c, t, final_level, scale)?;
        let noise = standard_normal_vec(rng, dim);
        let mut c_new = c.clone();
        c_new.axpy(half, &drift);
        c_new.axpy(root, &noise);
        if track {
            let mut fwd_mean = c.clone();
            fwd_mean.axpy(half, &drift);
            let log_k = gauss_diag(&c_new, &fwd_mean, delta);
            let (drift_new, value_new) =
                langevin_drift(obs, aux, x_hat, &c_new, t, final_level, scale)?;
            let mut bwd_mean = c_new.clone();
            bwd_mean.axpy(half, &drift_new);
            let log_l = gauss_diag(&c, &bwd_mean, delta);
            reversal += log_l - log_k;
            obs_term = value_new;
        }
        c = c_new;
    }
    let aux_copy = aux.log_prior(c.data(), x_hat.data());
    Ok(LangevinOut {
        c,
        aux_copy,
        reversal,
        obs_term,
    })
}

/// One unadjusted Langevin step on the corruption parameters around the
/// current scene estimate x̂ = x̂(z_t; t):
/// c_s = c_t + (δ/2)·[∇ log p(c_t | x̂) + ∇ log p̃(y | x̂, c_t)] + √δ·noise.
/// Errors if either score is non-finite.
pub fn langevin_c_step(
    c_t: &DenseArray,
    z_t: &DenseArray,
    d: &dyn Denoiser,
    aux: &dyn AuxPrior,
    obs: &dyn ObsModel,
    delta: f64,
    t: f64,
    noise: &DenseArray,
) -> Result<DenseArray> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArg(format!("delta {delta} must be positive")));
    }
    if c_t.len() != aux.dim() || noise.len() != aux.dim() {
        return Err(Error::InvalidArg(format!(
            "corruption state len {} / noise len {} do not match prior dim {}",
            c_t.len(),
            noise.len(),
            aux.dim()
        )));
    }
    if aux.dim() == 0 {
        return Ok(c_t.clone());
    }
    let x_hat = predict_x(d, z_t, t)?;
    let (drift, _) = langevin_drift(obs, aux, &x_hat, c_t, t, false, 1.0)?;
    let mut out = c_t.clone();
    out.axpy(0.5 * delta, &drift);
    out.axpy(delta.sqrt(), noise);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Guided samplers
// ---------------------------------------------------------------------------

/// Per-factor log-weight breakdown of one guided trajectory. `total()` is
/// the trajectory's importance log weight against the unannealed target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightLedger {
    /// Initial scene noise draw: identical in target and proposal, kept
    /// explicitly as a zero.
    pub init_z: f64,
    /// Corruption chain start: log p(c_1 | x̂_1) − log q_init(c_1 | z_1).
    pub init_c: f64,
    /// Σ log [unguided reverse transition / guided reverse transition].
    pub reverse: f64,
    /// Σ log p(c | x̂) target copies along the chain.
    pub aux_copies: f64,
    /// Σ log [backward Langevin kernel / forward Langevin kernel].
    pub langevin: f64,
    /// Decode of the final scene: deterministic, identical on both sides.
    pub decoder: f64,
    /// log p(y | x, c) at the final state (unscaled, unannealed).
    pub likelihood: f64,
}

impl WeightLedger {
    pub fn total(&self) -> f64 {
        self.init_z
            + self.init_c
            + self.reverse
            + self.aux_copies
            + self.langevin
            + self.decoder
            + self.likelihood
    }
}

fn compat_check(d: &dyn Denoiser, aux: &dyn AuxPrior, obs: &dyn ObsModel) -> Result<()> {
    if obs.x_dim() != d.dim() {
        return Err(Error::InvalidArg(format!(
            "observation expects a {}-dim scene but the denoiser produces {} dims",
            obs.x_dim(),
            d.dim()
        )));
    }
    if obs.c_dim() != aux.dim() {
        return Err(Error::InvalidArg(format!(
            "observation expects {} corruption dims but the prior has {}",
            obs.c_dim(),
            aux.dim()
        )));
    }
    Ok(())
}

/// One full guided trajectory; with `track`, every factor of the importance
/// weight is accumulated in log space as it is produced.
fn run_trajectory(
    d: &dyn Denoiser,
    aux: &dyn AuxPrior,
    obs: &dyn ObsModel,
    cfg: &ReGALCfg,
    track: bool,
    rng: &mut Stream,
) -> Result<(Particle, WeightLedger)> {
    let dim = d.dim();
    let dc = aux.dim();
    let bins = cfg.bins as f64;
    let mut ledger = WeightLedger::default();

    let z1 = standard_normal_vec(rng, dim);
    if track {
        let lp = gauss_diag(&z1, &DenseArray::zeros(vec![dim]), 1.0);
        ledger.init_z = lp - lp;
    }
    let mut c = DenseArray::vector(aux.sample_init(z1.data(), rng));
    if track && dc > 0 {
        let x_hat1 = predict_x(d, &z1, 1.0)?;
        ledger.init_c = aux.log_prior(c.data(), x_hat1.data())
            - aux.init_log_density(c.data(), z1.data());
    }
    let mut z = z1;
    for i in (1..=cfg.bins).rev() {
        let (t, s) = (i as f64 / bins, (i - 1) as f64 / bins);
        let factor = cfg.anneal.factor(t) * cfg.likelihood_scale;
        let m = guided_moments(d, obs, &c, &z, s, t, factor)?;
        let noise = standard_normal_vec(rng, dim);
        let mean = m.guided_mean.as_ref().unwrap_or(&m.base_mean);
        let mut z_new = mean.clone();
        z_new.axpy(m.var.sqrt(), &noise);
        if track {
            let log_q = gauss_diag(&z_new, mean, m.var);
            let log_p = gauss_diag(&z_new, &m.base_mean, m.var);
            ledger.reverse += log_p - log_q;
        }
        z = z_new;
        if dc > 0 {
            let x_hat = predict_x(d, &z, s)?;
            let out = langevin_level(
                obs,
                aux,
                &x_hat,
                &c,
                s,
                false,
                cfg.delta,
                cfg.likelihood_scale,
                cfg.inner_steps,
                track,
                rng,
            )?;
            if track {
                ledger.aux_copies += out.aux_copy;
                ledger.langevin += out.reversal;
            }
            c = out.c;
        }
    }
    let x = predict_x(d, &z, 0.0)?;
    if dc > 0 {
        let out = langevin_level(
            obs,
            aux,
            &x,
            &c,
            0.0,
            true,
            cfg.delta,
            cfg.likelihood_scale,
            cfg.inner_steps,
            track,
            rng,
        )?;
        if track {
            ledger.aux_copies += out.aux_copy;
            ledger.langevin += out.reversal;
            ledger.likelihood = out.obs_term;
        }
        c = out.c;
    } else if track {
        ledger.likelihood = obs.log_lik(x.data(), &[])?;
    }
    Ok((
        Particle {
            x: x.into_data(),
            c: c.into_data(),
        },
        ledger,
    ))
}

/// Sample one (x, c) pair by reconstruction-guided reverse diffusion with
/// interleaved Langevin updates on c: start at z ~ N(0, I) and
/// c ~ q_init(· | z), walk the T reverse bins — each bin first takes the
/// guided z step, then refreshes c around the new scene estimate — decode
/// x from z at time 0, and give c one final update against the full
/// likelihood at x.
pub fn regal(
    d: &dyn Denoiser,
    aux: &dyn AuxPrior,
    obs: &dyn ObsModel,
    cfg: &ReGALCfg,
    rng: &mut Stream,
) -> Result<Particle> {
    cfg.validate()?;
    compat_check(d, aux, obs)?;
    run_trajectory(d, aux, obs, cfg, false, rng).map(|(p, _)| p)
}

/// [`regal`] plus the per-factor importance-weight breakdown of the
/// trajectory.
pub fn regal_weighted(
    d: &dyn Denoiser,
    aux: &dyn AuxPrior,
    obs: &dyn ObsModel,
    cfg: &ReGALCfg,
    rng: &mut Stream,
) -> Result<(Particle, WeightLedger)> {
    cfg.validate()?;
    compat_check(d, aux, obs)?;
    run_trajectory(d, aux, obs, cfg, true, rng)
}

/// K independent guided trajectories, each weighted by the running product
/// (in log space) of target-over-proposal factors: the chain start, every
/// reverse step, every corruption-prior copy, every Langevin kernel, the
/// decode, and the final likelihood. Errors if every weight is −∞.
pub fn regal_is(
    d: &dyn Denoiser,
    aux: &dyn AuxPrior,
    obs: &dyn ObsModel,
    cfg: &ReGALCfg,
    k: usize,
    rng: &mut Stream,
) -> Result<WeightedParticleSet> {
    cfg.validate()?;
    compat_check(d, aux, obs)?;
    if k == 0 {
        return Err(Error::InvalidArg("need at least one particle".into()));
    }
    let base = rng.next_u64();
    let mut particles = Vec::with_capacity(k);
    let mut log_weights = Vec::with_capacity(k);
    for j in 0..k {
        let mut rj = stream(base, "regal-is", j as u64);
        let (p, ledger) = run_trajectory(d, aux, obs, cfg, true, &mut rj)?;
        let lw = ledger.total();
        if lw.is_nan() {
            return Err(Error::NonFinite {
                op: "importance weight",
                node: j,
            });
        }
        particles.push(p);
        log_weights.push(lw);
    }
    let ess = ess_of(&log_weights)?;
    Ok(WeightedParticleSet {
        particles,
        log_weights,
        meta: ParticleMeta {
            method: "regal-is".into(),
            seed: base,
            bins: cfg.bins,
            delta: cfg.delta,
            ess_trace: vec![ess],
            cv_trace: Vec::new(),
            resamples: Vec::new(),
        },
    })
}

/// Coefficient of variation of exp(increments), computed under a common
/// shift for stability. Returns +∞ if any increment is −∞.
fn increment_cv(increments: &[f64]) -> f64 {
    let max = increments.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let vals: Vec<f64> = increments.iter().map(|&d| (d - max).exp()).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    if mean == 0.0 {
        return f64::INFINITY;
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    var.sqrt() / mean
}

/// Systematic resampling indices for normalized weights.
fn systematic_indices(weights: &[f64], n: usize, rng: &mut Stream) -> Vec<usize> {
    let u: f64 = rng.gen::<f64>() / n as f64;
    let mut idx = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut j = 0usize;
    for m in 0..n {
        let target = u + m as f64 / n as f64;
        while cum + weights[j] < target && j + 1 < weights.len() {
            cum += weights[j];
            j += 1;
        }
        idx.push(j);
    }
    idx
}

/// Draw n unweighted particles by systematic resampling: copy counts match
/// n·w̄_k in expectation and differ from it by less than one deterministically.
pub fn resample(set: &WeightedParticleSet, n: usize, rng: &mut Stream) -> Result<Vec<Particle>> {
    if n == 0 {
        return Err(Error::InvalidArg("need at least one draw".into()));
    }
    let w = set.normalized_weights()?;
    let idx = systematic_indices(&w, n, rng);
    Ok(idx.into_iter().map(|j| set.particles[j].clone()).collect())
}

/// Self-normalized posterior expectation of `f` over the particle set,
/// together with the effective sample size (Σw)²/Σw².
pub fn posterior_expectation<F>(set: &WeightedParticleSet, f: F) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&Particle) -> Vec<f64>,
{
    let w = set.normalized_weights()?;
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let mut num: Option<Vec<f64>> = None;
    let mut den = 0.0;
    for (p, &wk) in set.particles.iter().zip(&w) {
        let v = f(p);
        den += wk;
        match &mut num {
            None => num = Some(v.into_iter().map(|x| wk * x).collect()),
            Some(acc) => {
                if acc.len() != v.len() {
                    return Err(Error::InvalidArg(
                        "expectation function returned inconsistent lengths".into(),
                    ));
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += wk * x;
                }
            }
        }
    }
    let mut est = num.expect("non-empty set");
    for v in &mut est {
        *v /= den;
    }
    Ok((est, ess))
}

/// Sequential version of [`regal_is`]: the K trajectories advance level by
/// level (chain start, the T guided bins, the final decode-and-update),
/// weights are updated with each level's incremental target-over-proposal
/// ratio, and ancestors are resampled per `policy` between levels.
///
/// The level-n weight uses the lookahead likelihood p̃(y | x̂_n, c_n) as its
/// running evidence estimate; the first-level weight is exactly that
/// lookahead, and the final level swaps it for the true likelihood.
/// Errors with diagnostics if the system collapses (ESS below 1.5 for three
/// consecutive levels).
pub fn regal_smc(
    d: &dyn Denoiser,
    aux: &dyn AuxPrior,
    obs: &dyn ObsModel,
    cfg: &ReGALCfg,
    k: usize,
    policy: ResamplePolicy,
    rng: &mut Stream,
) -> Result<WeightedParticleSet> {
    cfg.validate()?;
    compat_check(d, aux, obs)?;
    if k < 2 {
        return Err(Error::InvalidArg("sequential sampling needs at least two particles".into()));
    }
    let dim = d.dim();
    let dc = aux.dim();
    let bins = cfg.bins as f64;
    let base = rng.next_u64();
    let mut streams: Vec<Stream> = (0..k).map(|j| stream(base, "regal-smc", j as u64)).collect();
    let mut resample_rng = stream(base, "smc-resample", 0);

    struct Slot {
        z: DenseArray,
        c: DenseArray,
        /// Lookahead likelihood value carried from this slot's last level.
        lookahead: f64,
    }

    let mut slots: Vec<Slot> = Vec::with_capacity(k);
    let mut log_weights = vec![0.0f64; k];
    let mut increments = vec![0.0f64; k];
    for (j, sj) in streams.iter_mut().enumerate() {
        let z = standard_normal_vec(sj, dim);
        let c = DenseArray::vector(aux.sample_init(z.data(), sj));
        let x_hat = predict_x(d, &z, 1.0)?;
        let look = obs.lookahead(x_hat.data(), c.data(), 1.0)?;
        let mut lw = look;
        if dc > 0 {
            lw += aux.log_prior(c.data(), x_hat.data()) - aux.init_log_density(c.data(), z.data());
        }
        increments[j] = lw;
        log_weights[j] = lw;
        slots.push(Slot { z, c, lookahead: look });
    }

    let mut ess_trace: Vec<f64> = Vec::with_capacity(cfg.bins + 2);
    let mut cv_trace: Vec<f64> = Vec::with_capacity(cfg.bins + 2);
    let mut resamples: Vec<usize> = Vec::new();
    let mut low_streak = 0usize;

    let record = |log_weights: &[f64],
                      increments: &[f64],
                      ess_trace: &mut Vec<f64>,
                      cv_trace: &mut Vec<f64>,
                      low_streak: &mut usize|
     -> Result<f64> {
        for &lw in log_weights {
            if lw.is_nan() {
                return Err(Error::NonFinite {
                    op: "sequential weight",
                    node: ess_trace.len(),
                });
            }
        }
        let ess = ess_of(log_weights)?;
        ess_trace.push(ess);
        cv_trace.push(increment_cv(increments));
        if ess < 1.5 {
            *low_streak += 1;
        } else {
            *low_streak = 0;
        }
        if *low_streak >= 3 {
            let tail_from = ess_trace.len().saturating_sub(8);
            return Err(Error::ParticleCollapse {
                ess,
                steps: *low_streak,
                trace_tail: ess_trace[tail_from..].to_vec(),
            });
        }
        Ok(ess)
    };

    let ess = record(&log_weights, &increments, &mut ess_trace, &mut cv_trace, &mut low_streak)?;
    let mut pending_resample = match policy {
        ResamplePolicy::EveryStep => true,
        ResamplePolicy::EssThreshold => ess < k as f64 / 2.0,
    };

    for i in (1..=cfg.bins).rev() {
        if pending_resample {
            let w = norm_weights(&log_weights)?;
            let idx = systematic_indices(&w, k, &mut resample_rng);
            let mut new_slots = Vec::with_capacity(k);
            for &a in &idx {
                new_slots.push(Slot {
                    z: slots[a].z.clone(),
                    c: slots[a].c.clone(),
                    lookahead: slots[a].lookahead,
                });
            }
            slots = new_slots;
            log_weights = vec![0.0; k];
            resamples.push(ess_trace.len());
        }
        let (t, s) = (i as f64 / bins, (i - 1) as f64 / bins);
        let factor = cfg.anneal.factor(t) * cfg.likelihood_scale;
        for (j, slot) in slots.iter_mut().enumerate() {
            let m = guided_moments(d, obs, &slot.c, &slot.z, s, t, factor)?;
            let noise = standard_normal_vec(&mut streams[j], dim);
            let mean = m.guided_mean.as_ref().unwrap_or(&m.base_mean);
            let mut z_new = mean.clone();
            z_new.axpy(m.var.sqrt(), &noise);
            let z_ratio = gauss_diag(&z_new, &m.base_mean, m.var) - gauss_diag(&z_new, mean, m.var);
            let x_hat = predict_x(d, &z_new, s)?;
            let (c_new, copy, reversal, look_new) = if dc > 0 {
                let out = langevin_level(
                    obs,
                    aux,
                    &x_hat,
                    &slot.c,
                    s,
                    false,
                    cfg.delta,
                    cfg.likelihood_scale,
                    cfg.inner_steps,
                    true,
                    &mut streams[j],
                )?;
                (out.c, out.aux_copy, out.reversal, out.obs_term)
            } else {
                let look = obs.lookahead(x_hat.data(), &[], s)?;
                (slot.c.clone(), 0.0, 0.0, look)
            };
            increments[j] = (look_new - slot.lookahead) + z_ratio + copy + reversal;
            log_weights[j] += increments[j];
            slot.z = z_new;
            slot.c = c_new;
            slot.lookahead = look_new;
        }
        let ess = record(&log_weights, &increments, &mut ess_trace, &mut cv_trace, &mut low_streak)?;
        pending_resample = match policy {
            ResamplePolicy::EveryStep => true,
            ResamplePolicy::EssThreshold => ess < k as f64 / 2.0,
        };
    }

    if pending_resample {
        let w = norm_weights(&log_weights)?;
        let idx = systematic_indices(&w, k, &mut resample_rng);
        let mut new_slots = Vec::with_capacity(k);
        for &a in &idx {
            new_slots.push(Slot {
                z: slots[a].z.clone(),
                c: slots[a].c.clone(),
                lookahead: slots[a].lookahead,
            });
        }
        slots = new_slots;
        log_weights = vec![0.0; k];
        resamples.push(ess_trace.len());
    }

    let mut particles = Vec::with_capacity(k);
    for (j, slot) in slots.iter_mut().enumerate() {
        let x = predict_x(d, &slot.z, 0.0)?;
        let (c_final, incr) = if dc > 0 {
            let out = langevin_level(
                obs,
                aux,
                &x,
                &slot.c,
                0.0,
                true,
                cfg.delta,
                cfg.likelihood_scale,
                cfg.inner_steps,
                true,
                &mut streams[j],
            )?;
            (
                out.c,
                (out.obs_term - slot.lookahead) + out.aux_copy + out.reversal,
            )
        } else {
            let lik = obs.log_lik(x.data(), &[])?;
            (slot.c.clone(), lik - slot.lookahead)
        };
        increments[j] = incr;
        log_weights[j] += incr;
        particles.push(Particle {
            x: x.data().to_vec(),
            c: c_final.into_data(),
        });
    }
    record(&log_weights, &increments, &mut ess_trace, &mut cv_trace, &mut low_streak)?;

    Ok(WeightedParticleSet {
        particles,
        log_weights,
        meta: ParticleMeta {
            method: "regal-smc".into(),
            seed: base,
            bins: cfg.bins,
            delta: cfg.delta,
            ess_trace,
            cv_trace,
            resamples,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        ancestral_sample, reverse_step, train_denoiser, AnalyticGaussianDenoiser,
        DiffusionTrainCfg,
    };
    use crate::tape::{fd_check, gradient};

    fn schedule(steps: usize) -> NoiseSchedule {
        NoiseSchedule {
            steps,
            ..NoiseSchedule::default()
        }
    }

    #[test]
    fn normal_cdf_matches_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(-1.959964) - 0.025).abs() < 1e-6);
        for &x in &[-2.3, -0.7, 0.4, 1.9] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 2e-7);
        }
    }

    #[test]
    fn corruption_params_decode() {
        let fov = CorruptionParams::Fov { raw: 0.0 };
        let angle = fov.fov().unwrap();
        assert!((angle - PI / 2.0).abs() < 1e-12);
        let mut prev = 0.0;
        for raw in [-30.0, -3.0, 0.7, 30.0] {
            let a = CorruptionParams::fov_of_raw(raw);
            assert!(a > FOV_LO && a < FOV_HI, "fov {a} escaped its range");
            let mut t = Tape::new();
            let rv = t.leaf(DenseArray::vector(vec![raw]));
            let g = CorruptionParams::fov_graph(&mut t, rv);
            assert_eq!(t.value(g).item(), a, "graph decode drifted from host");
            assert!(a > prev);
            prev = a;
        }
        // far outside the useful range the decode saturates to the bounds
        assert!(CorruptionParams::fov_of_raw(-500.0) >= FOV_LO);
        assert!(CorruptionParams::fov_of_raw(500.0) <= FOV_HI);
        assert_eq!(fov.dim(), 1);
        let grid = CorruptionParams::Grid {
            resolution: 2,
            raw: vec![0.0; 32],
        };
        assert_eq!(grid.dim(), 32);
        assert!(grid.validate().is_ok());
        assert!(grid.fov().is_none());
        let bad = CorruptionParams::Grid {
            resolution: 2,
            raw: vec![0.0; 31],
        };
        assert!(bad.validate().is_err());
        let rebuilt = grid.with_flat(&vec![1.5; 32]).unwrap();
        assert_eq!(rebuilt.flat(), vec![1.5; 32]);
        assert!(grid.with_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn guide_params_roundtrip_and_floor() {
        let g = GuideParams {
            x_mean: vec![0.3, -0.7],
            x_log_std: vec![-1.0, 0.5],
            c_mean: vec![4.0],
            c_log_std: vec![-100.0],
        };
        g.validate().unwrap();
        let flat = g.flat();
        assert_eq!(flat.len(), 6);
        let back = GuideParams::from_flat(2, 1, flat.data()).unwrap();
        assert_eq!(back, g);
        // the decoded stdev never collapses below the floor
        let floored = g.c_std()[0];
        assert!(floored >= guide_std_floor());
        assert!((floored - guide_std_floor()).abs() < 1e-20);
        let bad = GuideParams {
            x_mean: vec![f64::NAN],
            x_log_std: vec![0.0],
            c_mean: vec![],
            c_log_std: vec![],
        };
        assert!(bad.validate().is_err());
    }

    fn meta_for(n: usize) -> ParticleMeta {
        ParticleMeta {
            method: "test".into(),
            seed: 0,
            bins: n,
            delta: 0.1,
            ess_trace: Vec::new(),
            cv_trace: Vec::new(),
            resamples: Vec::new(),
        }
    }

    fn set_from(log_weights: Vec<f64>) -> WeightedParticleSet {
        let particles = (0..log_weights.len())
            .map(|i| Particle {
                x: vec![i as f64],
                c: vec![],
            })
            .collect();
        WeightedParticleSet {
            particles,
            log_weights: log_weights.clone(),
            meta: meta_for(log_weights.len()),
        }
    }

    #[test]
    fn weights_normalize_and_ess_stays_in_range() {
        let mut rng = stream(11, "weights", 0);
        for trial in 0..50 {
            let k = 1 + (trial % 7);
            let lw: Vec<f64> = (0..k).map(|_| 10.0 * (rng.gen::<f64>() - 0.5)).collect();
            let set = set_from(lw);
            let w = set.normalized_weights().unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "weights sum to {sum}");
            let ess = set.ess().unwrap();
            assert!(
                ess >= 1.0 - 1e-9 && ess <= k as f64 + 1e-9,
                "ess {ess} outside [1, {k}]"
            );
        }
    }

    #[test]
    fn degenerate_and_invalid_weights_are_rejected() {
        let set = set_from(vec![f64::NEG_INFINITY; 4]);
        assert!(matches!(
            set.normalized_weights(),
            Err(Error::DegenerateWeights)
        ));
        let set = set_from(vec![0.0, f64::NAN]);
        assert!(matches!(set.normalized_weights(), Err(Error::InvalidArg(_))));
        let set = set_from(vec![0.0, f64::INFINITY]);
        assert!(matches!(set.normalized_weights(), Err(Error::InvalidArg(_))));
        // one finite weight among -inf is fine
        let set = set_from(vec![f64::NEG_INFINITY, -3.0]);
        let w = set.normalized_weights().unwrap();
        assert_eq!(w, vec![0.0, 1.0]);
    }

    #[test]
    fn anneal_factor_endpoints() {
        let a = Anneal::Ramp;
        assert!((a.factor(1.0) - 0.01).abs() < 1e-12);
        assert!((a.factor(0.0) - 1.0).abs() < 1e-12);
        // strictly decreasing in t
        let mut prev = a.factor(0.0);
        for i in 1..=100 {
            let f = a.factor(i as f64 / 100.0);
            assert!(f < prev);
            prev = f;
        }
        assert_eq!(Anneal::Constant(0.25).factor(0.9), 0.25);
    }

    #[test]
    fn toy_model_blend_and_support() {
        let m = ToyModel::default();
        assert_eq!(m.blend(0.3, 1.0, 1.0), 1.0);
        assert_eq!(m.blend(0.3, 0.9, 0.0), 0.3);
        // opaque layer hides the scene entirely
        let full = m.blend(0.1, 0.6, 1.0);
        let half = m.blend(0.1, 0.6, 0.5);
        assert_eq!(full, 0.6);
        assert!((half - 0.35).abs() < 1e-15);
        assert_eq!(m.log_joint(1.2, 0.5, 0.5, 0.5), f64::NEG_INFINITY);
        assert_eq!(m.log_joint(0.5, -0.1, 0.5, 0.5), f64::NEG_INFINITY);
        assert!(m.log_joint(0.5, 0.5, 0.5, 0.5).is_finite());
        // truncated prior integrates to one over [0,1] (midpoint check)
        let n = 20_000;
        let mut mass = 0.0;
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            mass += m.log_prior_x(x).exp() / n as f64;
        }
        assert!((mass - 1.0).abs() < 1e-6, "prior mass {mass}");
    }

    #[test]
    fn map_quadratic_reaches_closed_form_max() {
        // f(p) = -0.5 * sum((p - c)^2), maximized exactly at c
        let target = [0.7, -1.3, 2.4];
        let obj = FnObjective::new(vec![3], move |t: &mut Tape, p: Var| {
            let c = t.constant(DenseArray::vector(target.to_vec()));
            let d = t.sub(p, c);
            let q = t.square(d);
            let s = t.sum(q);
            t.mul_scalar(s, -0.5)
        });
        let fit = map_estimate(&obj, &DenseArray::zeros(vec![3]), 4000, 0.05).unwrap();
        for (a, b) in fit.point.data().iter().zip(target) {
            assert!((a - b).abs() < 1e-6, "map point {a} vs {b}");
        }
        assert!(fit.value > -1e-10);
        assert_eq!(fit.trace.len(), 4001);
        // the trace should (weakly) improve overall
        assert!(fit.value >= fit.trace[0]);
    }

    #[test]
    fn map_rejects_bad_arguments() {
        let obj = FnObjective::new(vec![1], |t: &mut Tape, p: Var| t.sum(p));
        assert!(map_estimate(&obj, &DenseArray::zeros(vec![1]), 0, 0.1).is_err());
        assert!(map_estimate(&obj, &DenseArray::zeros(vec![1]), 10, 0.0).is_err());
        // non-finite objective at the initial point is an error
        let log_obj = FnObjective::new(vec![1], |t: &mut Tape, p: Var| {
            let l = t.ln(p);
            t.sum(l)
        });
        let err = map_estimate(&log_obj, &DenseArray::vector(vec![-1.0]), 10, 0.1);
        assert!(err.is_err());
    }

    #[test]
    fn map_point_invariant_to_constant_rescaling() {
        // adding a constant (an improper-prior normalization change) moves the
        // value but not the argmax or the optimizer path
        let m = ToyModel::default();
        let base = m.map_objective(0.5);
        let shift = 17.25;
        let shifted = FnObjective::new(vec![3], move |t: &mut Tape, u: Var| {
            let m2 = ToyModel::default();
            let v = m2.squashed_graph(t, u, 0.5, false);
            t.add_scalar(v, shift)
        });
        let init = DenseArray::vector(vec![-1.0, 0.2, 0.4]);
        let a = map_estimate(&base, &init, 400, 0.05).unwrap();
        let b = map_estimate(&shifted, &init, 400, 0.05).unwrap();
        assert_eq!(a.point.data(), b.point.data());
        assert!((b.value - a.value - shift).abs() < 1e-9);
    }

    #[test]
    fn toy_map_settles_on_opaque_layer() {
        // The joint density is maximal on a whole curve: x at the prior mode
        // and any (c_r, c_α) whose blend reproduces y exactly. The closed-form
        // maximum certifies that every endpoint below is a true global MAP.
        let m = ToyModel::default();
        let y = 0.5;
        let v_star = m.log_prior_x(m.prior_mean) + normal_logpdf(y, y, m.obs_std * m.obs_std);
        let obj = m.map_objective(y);

        // An opaque layer start stays opaque: the layer alone reproduces the
        // observation and the scene reverts to its prior mode, far from y.
        let opaque = DenseArray::vector(vec![logit(0.2), 0.0, 5.0]);
        let fit = map_estimate(&obj, &opaque, 3000, 0.1).unwrap();
        let p = fit.point.data();
        let (x, ca) = (sigmoid(p[0]), sigmoid(p[2]));
        assert!(
            (fit.value - v_star).abs() < 1e-6,
            "converged value {} vs closed-form max {v_star}",
            fit.value
        );
        assert!(ca >= 0.99, "opacity {ca} should stay at the cover-all end");
        assert!((x - 0.2).abs() <= 0.02, "scene {x} should sit at the prior mode");

        // Neutral starts land elsewhere on the same ridge: identical joint
        // value, and the scene still ignores the observation.
        for u0 in [vec![logit(0.2), 0.0, 0.0], vec![0.0, 0.0, 0.0]] {
            let f = map_estimate(&obj, &DenseArray::vector(u0), 3000, 0.1).unwrap();
            assert!((f.value - v_star).abs() < 1e-6);
            assert!((sigmoid(f.point.data()[0]) - 0.2).abs() <= 0.02);
        }
    }

    #[test]
    fn toy_vi_mean_tracks_quadrature() {
        let m = ToyModel::default();
        let quad = toy_quadrature(&m, 0.5, 256).unwrap();
        // Full inference pulls the scene toward the observed value, well away
        // from the prior mode the MAP collapses to.
        assert!((quad.mean_x - 0.5).abs() < 0.25, "quadrature mean {}", quad.mean_x);

        let obj = m.vi_objective(0.5);
        let cfg = ViCfg {
            steps: 12_000,
            lr: 3e-3,
            restarts: 4,
            anneal_span: 3_000,
            n_mc: 16,
            seed: 11,
            ..ViCfg::default()
        };
        let fit = fit_vi(&obj, 1, 2, &cfg).unwrap();
        let mut rng = stream(11, "toy-vi-pushforward", 0);
        let n = 40_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let (xs, _) = fit.best.sample(&mut rng);
            acc += sigmoid(xs[0]);
        }
        let vi_mean = acc / n as f64;
        assert!(
            (vi_mean - quad.mean_x).abs() <= 0.05,
            "guide mean {vi_mean} vs quadrature {}",
            quad.mean_x
        );
    }

    #[test]
    fn elbo_exact_conjugate_guide_sticks_the_landing() {
        // prior N(0,1), y = x + noise with var 0.25
        // posterior N(0.56, 0.2) at y = 0.7; evidence N(y; 0, 1.25)
        let y = 0.7;
        let obj = FnObjective::new(vec![1], move |t: &mut Tape, x: Var| {
            let x2 = t.square(x);
            let lp = t.mul_scalar(x2, -0.5);
            let lpn = t.add_scalar(lp, -0.5 * LN_TAU);
            let nx = t.neg(x);
            let r = t.add_scalar(nx, y);
            let r2 = t.square(r);
            let llq = t.mul_scalar(r2, -0.5 / 0.25);
            let ll = t.add_scalar(llq, -0.5 * (LN_TAU + 0.25f64.ln()));
            t.add(lpn, ll)
        });
        let sigma_star = 0.2f64.sqrt();
        let guide = GuideParams {
            x_mean: vec![0.56],
            x_log_std: vec![(sigma_star - guide_std_floor()).ln()],
            c_mean: vec![],
            c_log_std: vec![],
        };
        let log_evidence = normal_logpdf(y, 0.0, 1.25);
        let mut rng = stream(3, "elbo-exact", 0);
        let (elbo, grad) = elbo_and_grad(&guide, &obj, 8, 1.0, &mut rng).unwrap();
        assert!(
            (elbo - log_evidence).abs() < 1e-10,
            "elbo {elbo} vs evidence {log_evidence}"
        );
        assert!(grad.max_abs() < 1e-9, "landing not stuck: {:?}", grad.data());

        // a deliberately wrong guide stays below the evidence
        let rough = GuideParams {
            x_mean: vec![0.1],
            x_log_std: vec![-1.0],
            c_mean: vec![],
            c_log_std: vec![],
        };
        let (lower, _) = elbo_and_grad(&rough, &obj, 4096, 1.0, &mut rng).unwrap();
        assert!(lower < log_evidence + 0.05);
        assert!(lower > log_evidence - 5.0);
    }

    #[test]
    fn elbo_gradient_matches_fixed_noise_objective() {
        // same estimator, frozen noise, rebuilt as a flat objective over the
        // guide parameters; the analytic gradient must agree with both the
        // rebuilt graph and finite differences
        let guide = GuideParams {
            x_mean: vec![0.25],
            x_log_std: vec![-0.4],
            c_mean: vec![-0.6],
            c_log_std: vec![0.1],
        };
        let n_mc = 3;
        let kl_weight = 0.7;
        let log_joint = FnObjective::new(vec![2], |t: &mut Tape, s: Var| {
            let s0 = t.slice(s, 0..1);
            let s1 = t.slice(s, 1..2);
            let a = t.add_scalar(s0, -0.3);
            let a2 = t.square(a);
            let qa = t.mul_scalar(a2, -0.5 / 0.25);
            let b = t.add_scalar(s1, 0.4);
            let b2 = t.square(b);
            let qb = t.mul_scalar(b2, -0.5);
            let cross = t.mul(s0, s1);
            let qc = t.mul_scalar(cross, 0.3);
            let ab = t.add(qa, qb);
            t.add(ab, qc)
        });
        let seed_stream = || stream(42, "elbo-fd", 0);
        let mut draws_rng = seed_stream();
        let draws: Vec<DenseArray> = (0..n_mc)
            .map(|_| standard_normal_vec(&mut draws_rng, 2))
            .collect();
        // frozen density parameters at the evaluation point
        let mean0 = vec![guide.x_mean[0], guide.c_mean[0]];
        let std0 = vec![guide.x_std()[0], guide.c_std()[0]];
        let inv2: Vec<f64> = std0.iter().map(|s| -0.5 / (s * s)).collect();
        let log_norm: f64 = std0.iter().map(|s| -0.5 * LN_TAU - s.ln()).sum();
        let draws2 = draws.clone();
        let frozen = FnObjective::new(vec![4], move |t: &mut Tape, th: Var| {
            let mx = t.slice(th, 0..1);
            let lx = t.slice(th, 1..2);
            let mc = t.slice(th, 2..3);
            let lc = t.slice(th, 3..4);
            let mean = t.concat(&[mx, mc]);
            let ls = t.concat(&[lx, lc]);
            let ex = t.exp(ls);
            let sig = t.add_scalar(ex, guide_std_floor());
            let mean_c = t.constant(DenseArray::vector(mean0.clone()));
            let inv_c = t.constant(DenseArray::vector(inv2.clone()));
            let mut acc: Option<Var> = None;
            for eps in &draws2 {
                let e = t.constant(eps.clone());
                let se = t.mul(sig, e);
                let s = t.add(mean, se);
                let s0 = t.slice(s, 0..1);
                let s1 = t.slice(s, 1..2);
                let a = t.add_scalar(s0, -0.3);
                let a2 = t.square(a);
                let qa = t.mul_scalar(a2, -0.5 / 0.25);
                let b = t.add_scalar(s1, 0.4);
                let b2 = t.square(b);
                let qb = t.mul_scalar(b2, -0.5);
                let cross = t.mul(s0, s1);
                let qc = t.mul_scalar(cross, 0.3);
                let ab = t.add(qa, qb);
                let lp = t.add(ab, qc);
                let diff = t.sub(s, mean_c);
                let q2 = t.square(diff);
                let wq = t.mul(q2, inv_c);
                let sq = t.sum(wq);
                let lq = t.add_scalar(sq, log_norm);
                let nk = t.mul_scalar(lq, -0.7);
                let term = t.add(lp, nk);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => t.add(prev, term),
                });
            }
            t.mul_scalar(acc.unwrap(), 1.0 / 3.0)
        });
        // layout note: GuideParams::flat is [x_mean, x_log_std, c_mean, c_log_std],
        // matching the slices above for one x dim and one c dim
        let theta0 = guide.flat();
        let mut rng = seed_stream();
        let (elbo, grad) = elbo_and_grad(&guide, &log_joint, n_mc, kl_weight, &mut rng).unwrap();
        let (v2, g2) = gradient(&frozen, &theta0).unwrap();
        assert!((elbo - v2).abs() < 1e-12, "values differ: {elbo} vs {v2}");
        for (a, b) in grad.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-10, "grad entries differ: {a} vs {b}");
        }
        let err = fd_check(&frozen, &theta0, 1e-5).unwrap();
        assert!(err < 1e-6, "fd err {err}");
    }

    #[test]
    fn elbo_point_mass_limit() {
        // with raw log-stdev pushed far down, the floor keeps the entropy
        // finite: elbo -> log p(mean) + d*(0.5 + 0.5*ln(2pi) + ln(floor))
        let guide = GuideParams {
            x_mean: vec![0.3],
            x_log_std: vec![-30.0],
            c_mean: vec![],
            c_log_std: vec![],
        };
        let obj = FnObjective::new(vec![1], |t: &mut Tape, x: Var| {
            let d = t.add_scalar(x, -0.1);
            let q = t.square(d);
            t.mul_scalar(q, -0.5 / 0.09)
        });
        let log_p_at_mean = -0.5 * (0.3f64 - 0.1).powi(2) / 0.09;
        let expected = log_p_at_mean + 0.5 + 0.5 * LN_TAU + guide_std_floor().ln();
        let mut rng = stream(9, "elbo-floor", 0);
        // per-sample variance is ~0.5 (from the -eps^2/2 entropy term), so
        // 8192 draws put the Monte Carlo SE near 0.008
        let (elbo, _) = elbo_and_grad(&guide, &obj, 8192, 1.0, &mut rng).unwrap();
        assert!(
            (elbo - expected).abs() < 0.025,
            "elbo {elbo} vs expected {expected}"
        );
    }

    #[test]
    fn vi_recovers_diagonal_gaussian() {
        // target: independent N(0.3, 0.5^2) x N(-0.8, 1.2^2)
        let obj = FnObjective::new(vec![2], |t: &mut Tape, s: Var| {
            let s0 = t.slice(s, 0..1);
            let s1 = t.slice(s, 1..2);
            let a = t.add_scalar(s0, -0.3);
            let a2 = t.square(a);
            let qa = t.mul_scalar(a2, -0.5 / 0.25);
            let b = t.add_scalar(s1, 0.8);
            let b2 = t.square(b);
            let qb = t.mul_scalar(b2, -0.5 / 1.44);
            t.add(qa, qb)
        });
        let cfg = ViCfg {
            steps: 6000,
            lr: 3e-3,
            restarts: 2,
            anneal_span: 1000,
            n_mc: 16,
            seed: 7,
            ..ViCfg::default()
        };
        let fit = fit_vi(&obj, 2, 0, &cfg).unwrap();
        let g = fit.best;
        assert!((g.x_mean[0] - 0.3).abs() < 0.02, "mean0 {}", g.x_mean[0]);
        assert!((g.x_mean[1] + 0.8).abs() < 0.02, "mean1 {}", g.x_mean[1]);
        let s = g.x_std();
        assert!((s[0] - 0.5).abs() < 0.025, "std0 {}", s[0]);
        assert!((s[1] - 1.2).abs() < 0.06, "std1 {}", s[1]);
        assert_eq!(fit.traces.len(), 2);
        assert!(fit.final_scores[fit.best_restart].is_finite());
    }

    #[test]
    fn vi_more_restarts_never_hurt() {
        // bimodal target: restarts land in different basins; the best of
        // eight is at least as good as the single run with the same seed
        let obj_builder = || {
            FnObjective::new(vec![1], |t: &mut Tape, x: Var| {
                let a = t.add_scalar(x, 2.0);
                let a2 = t.square(a);
                let qa = t.mul_scalar(a2, -0.5 / 0.09);
                let ea = t.exp(qa);
                let sa = t.mul_scalar(ea, 0.65);
                let b = t.add_scalar(x, -2.0);
                let b2 = t.square(b);
                let qb = t.mul_scalar(b2, -0.5 / 0.09);
                let eb = t.exp(qb);
                let sb = t.mul_scalar(eb, 0.35);
                let mix = t.add(sa, sb);
                let safe = t.add_scalar(mix, 1e-300);
                let l = t.ln(safe);
                t.sum(l)
            })
        };
        let mk_cfg = |restarts: usize| ViCfg {
            steps: 800,
            lr: 1e-2,
            restarts,
            anneal_span: 100,
            n_mc: 8,
            seed: 21,
            init_mean_std: 2.5,
            ..ViCfg::default()
        };
        let single = fit_vi(&obj_builder(), 1, 0, &mk_cfg(1)).unwrap();
        let eight = fit_vi(&obj_builder(), 1, 0, &mk_cfg(8)).unwrap();
        let best_single = single.final_scores[single.best_restart];
        let best_eight = eight.final_scores[eight.best_restart];
        assert!(
            best_eight >= best_single - 1e-12,
            "eight restarts scored {best_eight}, single {best_single}"
        );
        assert_eq!(eight.final_scores.len(), 8);
        // restart 0 is reproducible across the two fits
        assert!((eight.final_scores[0] - best_single).abs() < 1e-12);
    }

    #[test]
    fn vi_reports_divergence() {
        // ln(x) + ln(-x) is NaN everywhere useful: every restart fails
        let obj = FnObjective::new(vec![1], |t: &mut Tape, x: Var| {
            let lp = t.ln(x);
            let nx = t.neg(x);
            let ln = t.ln(nx);
            let both = t.add(lp, ln);
            t.sum(both)
        });
        let cfg = ViCfg {
            steps: 50,
            restarts: 3,
            lr: 1e-2,
            ..ViCfg::default()
        };
        match fit_vi(&obj, 1, 0, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn toy_quadrature_wide_noise_recovers_prior() {
        let m = ToyModel {
            obs_std: 1e6,
            ..ToyModel::default()
        };
        let q = toy_quadrature(&m, 0.5, 64).unwrap();
        let want = m.prior_mean_truncated();
        assert!(
            (q.mean_x - want).abs() < 2e-3,
            "mean {} vs truncated prior mean {want}",
            q.mean_x
        );
        let mass: f64 = q.table.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-9);
        let marg: f64 = q.x_marginal.iter().sum();
        assert!((marg - 1.0).abs() < 1e-9);
    }

    #[test]
    fn toy_quadrature_posterior_spreads_opacity() {
        let m = ToyModel::default();
        let q = toy_quadrature(&m, 0.5, 128).unwrap();
        // the posterior mean of the scene sits strictly closer to the pixel
        // value than the prior-favored point estimate x = 0.2
        assert!((q.mean_x - 0.5).abs() < (0.2f64 - 0.5).abs());
        // and most mass lives away from the fully-opaque corner
        let res = 128;
        let mut below = 0.0;
        let data = q.table.data();
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    let ca = (k as f64 + 0.5) / res as f64;
                    if ca < 0.9 {
                        below += data[(i * res + j) * res + k];
                    }
                }
            }
        }
        assert!(below > 0.5, "mass below opacity 0.9 is only {below}");
    }

    #[test]
    fn toy_quadrature_resolution_agreement() {
        let m = ToyModel::default();
        let a = toy_quadrature(&m, 0.5, 128).unwrap();
        let b = toy_quadrature(&m, 0.5, 512).unwrap();
        assert!(
            (a.mean_x - b.mean_x).abs() < 1e-3,
            "means {} vs {}",
            a.mean_x,
            b.mean_x
        );
        assert!((a.log_evidence - b.log_evidence).abs() < 1e-2);
        assert!(toy_quadrature(&m, 0.5, 16).is_err());
    }

    #[test]
    fn guided_step_with_zero_factor_is_plain_reverse_step() {
        let d = AnalyticGaussianDenoiser::standard(3, schedule(8));
        let mut rng = stream(5, "guided-bit", 0);
        let obs = GaussianMeanObs {
            y: vec![0.4, -0.2, 0.9],
            noise_var: 0.04,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-3, 8)
        };
        for _ in 0..10 {
            let z = standard_normal_vec(&mut rng, 3);
            let noise = standard_normal_vec(&mut rng, 3);
            let (s, t) = (0.25, 0.5);
            let guided =
                guided_reverse_step(&d, &obs, &DenseArray::vector(vec![]), &z, s, t, &cfg, &noise)
                    .unwrap();
            let plain = reverse_step(&d, &z, s, t, &noise).unwrap();
            assert_eq!(guided.data(), plain.data(), "zero-factor step changed bits");
        }
        // a flat likelihood with nonzero factor also reduces to the plain step
        let flat = FlatObs {
            x_dim: 3,
            c_dim: 0,
            level: -0.3,
        };
        let cfg_on = ReGALCfg {
            anneal: Anneal::Constant(1.0),
            ..ReGALCfg::new(1e-3, 8)
        };
        let z = standard_normal_vec(&mut rng, 3);
        let noise = standard_normal_vec(&mut rng, 3);
        let guided =
            guided_reverse_step(&d, &flat, &DenseArray::vector(vec![]), &z, 0.25, 0.5, &cfg_on, &noise)
                .unwrap();
        let plain = reverse_step(&d, &z, 0.25, 0.5, &noise).unwrap();
        for (a, b) in guided.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-13, "flat-likelihood guidance shifted the step");
        }
    }

    struct LogSceneObs;

    impl ObsModel for LogSceneObs {
        fn x_dim(&self) -> usize {
            1
        }
        fn c_dim(&self) -> usize {
            0
        }
        fn log_lik_graph(&self, tape: &mut Tape, x: Var, _c: Var) -> Var {
            let l = tape.ln(x);
            tape.sum(l)
        }
    }

    #[test]
    fn guided_step_reports_nonfinite_guidance() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(8));
        // x_hat is alpha*z for the standard analytic denoiser, so a negative
        // state pushes the log observation out of its domain
        let z = DenseArray::vector(vec![-1.0]);
        let noise = DenseArray::vector(vec![0.3]);
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(1.0),
            ..ReGALCfg::new(1e-3, 8)
        };
        let out = guided_reverse_step(
            &d,
            &LogSceneObs,
            &DenseArray::vector(vec![]),
            &z,
            0.25,
            0.5,
            &cfg,
            &noise,
        );
        assert!(out.is_err());
    }

    #[test]
    fn guided_gaussian_posterior_matches_closed_form() {
        // 2-d linear-Gaussian chain: prior N(0, I), observation y = x + eps
        // with var 0.25; guided sampling at full strength should land the
        // population mean near the conjugate posterior mean y/(1+0.25)
        let d = AnalyticGaussianDenoiser::standard(2, schedule(1024));
        let y = vec![0.9, -0.6];
        let obs = ConjugateGaussianObs {
            y: y.clone(),
            noise_var: 0.25,
            prior_var: 1.0,
            schedule: schedule(1024),
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(1.0),
            ..ReGALCfg::new(1e-3, 1024)
        };
        let aux = ImproperUniformAux::new(0);
        let mut rng = stream(17, "guided-post", 0);
        let n = 256;
        let mut mean = [0.0f64; 2];
        for _ in 0..n {
            let p = regal(&d, &aux, &obs, &cfg, &mut rng).unwrap();
            mean[0] += p.x[0] / n as f64;
            mean[1] += p.x[1] / n as f64;
        }
        let post = |yj: f64| yj / 1.25;
        // posterior std 0.447, population SE ~ 0.028 per dim
        assert!(
            (mean[0] - post(y[0])).abs() < 0.05,
            "dim 0 mean {} vs {}",
            mean[0],
            post(y[0])
        );
        assert!(
            (mean[1] - post(y[1])).abs() < 0.05,
            "dim 1 mean {} vs {}",
            mean[1],
            post(y[1])
        );
    }

    #[test]
    fn langevin_with_flat_scores_is_pure_noise() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(8));
        let aux = ImproperUniformAux::new(2);
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 2,
            level: 0.0,
        };
        let c = DenseArray::vector(vec![0.4, -1.1]);
        let z = DenseArray::vector(vec![0.2]);
        let noise = DenseArray::vector(vec![1.3, -0.5]);
        let delta = 0.25;
        let out = langevin_c_step(&c, &z, &d, &aux, &obs, delta, 0.5, &noise).unwrap();
        let mut want = c.clone();
        want.axpy(delta.sqrt(), &noise);
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn langevin_drift_and_noise_scale_with_delta() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(8));
        let aux = GaussianAux {
            mean: vec![1.0],
            std: vec![0.5],
        };
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 1,
            level: 0.0,
        };
        let c = DenseArray::vector(vec![0.25]);
        let z = DenseArray::vector(vec![0.0]);
        let zero = DenseArray::vector(vec![0.0]);
        // drift displacement is (delta/2) * score exactly; halving delta
        // halves it (dyadic deltas keep this exact in floating point)
        let d2 = langevin_c_step(&c, &z, &d, &aux, &obs, 2.0, 0.5, &zero).unwrap();
        let d1 = langevin_c_step(&c, &z, &d, &aux, &obs, 1.0, 0.5, &zero).unwrap();
        let move2 = d2.data()[0] - c.data()[0];
        let move1 = d1.data()[0] - c.data()[0];
        assert_eq!(move2, 2.0 * move1);
        // the noise term scales by sqrt(delta)
        let ones = DenseArray::vector(vec![1.0]);
        let n2 = langevin_c_step(&c, &z, &d, &aux, &obs, 2.0, 0.5, &ones).unwrap();
        let n1 = langevin_c_step(&c, &z, &d, &aux, &obs, 1.0, 0.5, &ones).unwrap();
        let noise2 = n2.data()[0] - d2.data()[0];
        let noise1 = n1.data()[0] - d1.data()[0];
        assert!((noise2 / noise1 - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn langevin_drift_matches_graph_gradient() {
        // drift = grad of [log p(c) + log p~(y | x_hat, c)]; rebuild that
        // objective on a tape and compare, plus finite differences
        let d = AnalyticGaussianDenoiser::standard(1, schedule(8));
        let aux = LogitUniformAux { dim: 2 };
        let model = ToyModel::default();
        let obs = ToyObs { model, y: 0.5 };
        let z = DenseArray::vector(vec![0.7]);
        let t_time = 0.5;
        let x_hat = predict_x(&d, &z, t_time).unwrap();
        let xh = x_hat.data().to_vec();
        let y = 0.5;
        let objective = FnObjective::new(vec![2], move |t: &mut Tape, c: Var| {
            // logistic prior on each raw coordinate
            let sp = t.softplus(c);
            let nc = t.neg(c);
            let sn = t.softplus(nc);
            let both = t.add(sp, sn);
            let tot = t.sum(both);
            let prior = t.neg(tot);
            // blend likelihood at the frozen scene estimate
            let sc = t.sigmoid(c);
            let cr = t.slice(sc, 0..1);
            let ca = t.slice(sc, 1..2);
            let front = t.mul(ca, cr);
            let nca = t.neg(ca);
            let omca = t.add_scalar(nca, 1.0);
            let xc = t.constant(DenseArray::vector(xh.clone()));
            let back = t.mul(omca, xc);
            let mu = t.add(front, back);
            let nmu = t.neg(mu);
            let r = t.add_scalar(nmu, y);
            let r2 = t.square(r);
            let ov = 0.01;
            let q = t.mul_scalar(r2, -0.5 / ov);
            let ll = t.add_scalar(q, -0.5 * (LN_TAU + ov.ln()));
            t.add(prior, ll)
        });
        let c0 = DenseArray::vector(vec![0.3, -0.8]);
        let err = fd_check(&objective, &c0, 1e-5).unwrap();
        assert!(err < 1e-4, "fd err {err}");
        let (_, grad) = gradient(&objective, &c0).unwrap();
        // delta = 2 makes the drift displacement equal the raw drift
        let zero = DenseArray::vector(vec![0.0, 0.0]);
        let stepped = langevin_c_step(&c0, &z, &d, &aux, &obs, 2.0, t_time, &zero).unwrap();
        for i in 0..2 {
            let drift = stepped.data()[i] - c0.data()[i];
            assert!(
                (drift - grad.data()[i]).abs() < 1e-12,
                "drift {} vs gradient {}",
                drift,
                grad.data()[i]
            );
        }
    }

    #[test]
    fn langevin_chain_reaches_gaussian_stationarity() {
        // target: N(0.7, 0.3^2) via the corruption prior, flat likelihood.
        // an unadjusted chain with step delta has stationary variance
        // s^2 / (1 - delta/(4 s^2)); check both moments within 3 sigma of
        // their autocorrelation-adjusted standard errors
        let aux = GaussianAux {
            mean: vec![0.7],
            std: vec![0.3],
        };
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 1,
            level: 0.0,
        };
        let x_hat = DenseArray::vector(vec![0.0]);
        let delta = 1e-3;
        let mut rng = stream(23, "langevin-stationary", 0);
        let mut c = DenseArray::vector(vec![0.7]);
        let total = 100_000;
        let burn = 2_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for step in 0..total {
            let out = langevin_level(&obs, &aux, &x_hat, &c, 0.5, false, delta, 1.0, 1, false, &mut rng)
                .unwrap();
            c = out.c;
            if step >= burn {
                let v = c.data()[0];
                sum += v;
                sum2 += v * v;
            }
        }
        let n = (total - burn) as f64;
        let mean = sum / n;
        let var = sum2 / n - mean * mean;
        let s2 = 0.09;
        let var_target = s2 / (1.0 - delta / (4.0 * s2));
        // lag-1 autocorrelation a = 1 - delta/(2 s^2) -> n_eff ~ n (1-a)/(1+a)
        let a = 1.0 - delta / (2.0 * s2);
        let n_eff = n * (1.0 - a) / (1.0 + a);
        let se_mean = (var_target / n_eff).sqrt();
        let se_var = var_target * (2.0 / n_eff).sqrt();
        assert!(
            (mean - 0.7).abs() < 3.0 * se_mean,
            "mean {mean} vs 0.7 (se {se_mean})"
        );
        assert!(
            (var - var_target).abs() < 3.0 * se_var,
            "var {var} vs {var_target} (se {se_var})"
        );
    }

    #[test]
    fn langevin_level_bookkeeping_cancels_at_zero_drift() {
        let aux = ImproperUniformAux::new(2);
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 2,
            level: -0.45,
        };
        let x_hat = DenseArray::vector(vec![0.2]);
        let c0 = DenseArray::vector(vec![0.4, -1.0]);
        let mut rng = stream(31, "langevin-cancel", 0);
        let out = langevin_level(&obs, &aux, &x_hat, &c0, 0.5, false, 0.37, 1.0, 5, true, &mut rng)
            .unwrap();
        assert_eq!(out.reversal, 0.0, "kernel ratio should cancel exactly");
        assert_eq!(out.aux_copy, 0.0);
        assert_eq!(out.obs_term, -0.45);
        assert_ne!(out.c.data(), c0.data());
    }

    #[test]
    fn regal_without_observation_matches_unconditional_sampling() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(64));
        let aux = ImproperUniformAux::new(0);
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 0,
            level: 0.0,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-3, 64)
        };
        let n = 512;
        let mut rng = stream(41, "regal-flat", 0);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let p = regal(&d, &aux, &obs, &cfg, &mut rng).unwrap();
            assert!(p.c.is_empty());
            xs.push(p.x[0]);
        }
        let mut rng2 = stream(43, "regal-flat-ref", 0);
        let reference = ancestral_sample(&d, vec![n, 1], &mut rng2).unwrap();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (m, var)
        };
        let (m1, v1) = stats(&xs);
        let (m2, v2) = stats(reference.data());
        let se = ((v1 + v2) / n as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se, "means {m1} vs {m2} (se {se})");
        let se_sd = (v1 / (2.0 * n as f64)).sqrt() * 2.0f64.sqrt();
        assert!(
            (v1.sqrt() - v2.sqrt()).abs() < 3.0 * se_sd,
            "stdevs {} vs {}",
            v1.sqrt(),
            v2.sqrt()
        );
    }

    #[test]
    fn trajectory_weight_terms_vanish_without_information() {
        // with a flat likelihood, an improper corruption prior and guidance
        // switched off, the proposal equals the target term by term: every
        // ledger entry collapses to zero except the constant likelihood
        let d = AnalyticGaussianDenoiser::standard(1, schedule(16));
        let aux = ImproperUniformAux::new(1);
        let level = -1.234;
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 1,
            level,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-2, 16)
        };
        let mut rng = stream(47, "ledger", 0);
        let (_, ledger) = regal_weighted(&d, &aux, &obs, &cfg, &mut rng).unwrap();
        assert_eq!(ledger.init_z, 0.0);
        assert_eq!(ledger.init_c, 0.0);
        assert_eq!(ledger.reverse, 0.0);
        assert_eq!(ledger.aux_copies, 0.0);
        assert_eq!(ledger.langevin, 0.0);
        assert_eq!(ledger.decoder, 0.0);
        assert_eq!(ledger.likelihood, level);
        assert_eq!(ledger.total(), level);
    }

    #[test]
    fn importance_weights_equal_when_proposal_is_target() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(16));
        let aux = ImproperUniformAux::new(1);
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 1,
            level: -2.5,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-2, 16)
        };
        let mut rng = stream(53, "is-equal", 0);
        let set = regal_is(&d, &aux, &obs, &cfg, 8, &mut rng).unwrap();
        assert_eq!(set.len(), 8);
        for &lw in &set.log_weights {
            assert_eq!(lw, -2.5);
        }
        let w = set.normalized_weights().unwrap();
        for &wk in &w {
            assert_eq!(wk, 0.125);
        }
        assert_eq!(set.ess().unwrap(), 8.0);
        assert_eq!(set.meta.method, "regal-is");
        assert_eq!(set.meta.ess_trace, vec![8.0]);
    }

    #[test]
    fn single_particle_expectation_ignores_weight() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(16));
        let aux = ImproperUniformAux::new(1);
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 1,
            level: -77.0,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-2, 16)
        };
        let mut rng = stream(59, "is-single", 0);
        let set = regal_is(&d, &aux, &obs, &cfg, 1, &mut rng).unwrap();
        let (est, ess) = posterior_expectation(&set, |p| p.x.clone()).unwrap();
        assert_eq!(est, set.particles[0].x);
        assert_eq!(ess, 1.0);
    }

    struct HopelessObs;

    impl ObsModel for HopelessObs {
        fn x_dim(&self) -> usize {
            1
        }
        fn c_dim(&self) -> usize {
            0
        }
        fn log_lik_graph(&self, tape: &mut Tape, _x: Var, _c: Var) -> Var {
            tape.constant(DenseArray::vector(vec![0.0]))
        }
        fn log_lik(&self, _x: &[f64], _c: &[f64]) -> Result<f64> {
            Ok(f64::NEG_INFINITY)
        }
    }

    #[test]
    fn all_impossible_weights_error_out() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(8));
        let aux = ImproperUniformAux::new(0);
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-2, 8)
        };
        let mut rng = stream(61, "is-hopeless", 0);
        match regal_is(&d, &aux, &HopelessObs, &cfg, 4, &mut rng) {
            Err(Error::DegenerateWeights) => {}
            other => panic!("expected degenerate weights, got {other:?}"),
        }
    }

    #[test]
    fn systematic_resampling_copy_counts() {
        let mut rng = stream(67, "resample", 0);
        // uniform weights: exactly one copy each
        let set = set_from(vec![0.0; 16]);
        let out = resample(&set, 16, &mut rng).unwrap();
        let mut counts = vec![0usize; 16];
        for p in &out {
            counts[p.x[0] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1), "counts {counts:?}");
        // a single dominant weight gets every copy
        let set = set_from(vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]);
        let out = resample(&set, 5, &mut rng).unwrap();
        assert!(out.iter().all(|p| p.x[0] == 1.0));
        // 3:1 split at n = 10^4: systematic counts are off by less than one
        let set = set_from(vec![0.75f64.ln(), 0.25f64.ln()]);
        let out = resample(&set, 10_000, &mut rng).unwrap();
        let zeros = out.iter().filter(|p| p.x[0] == 0.0).count();
        assert!(
            (zeros as f64 - 7500.0).abs() <= 1.0,
            "expected ~7500 copies, got {zeros}"
        );
        assert!(resample(&set, 0, &mut rng).is_err());
    }

    #[test]
    fn posterior_expectation_identities() {
        let set = set_from(vec![-0.3, 1.7, 0.2, -2.0]);
        let (ones, _) = posterior_expectation(&set, |_| vec![1.0]).unwrap();
        assert_eq!(ones, vec![1.0]);
        let uniform = set_from(vec![0.5; 4]);
        let (mean, ess) = posterior_expectation(&uniform, |p| p.x.clone()).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-15);
        assert!((ess - 4.0).abs() < 1e-12);
    }

    #[test]
    fn smc_flat_likelihood_never_resamples() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(12));
        let aux = ImproperUniformAux::new(1);
        let level = -0.7;
        let obs = FlatObs {
            x_dim: 1,
            c_dim: 1,
            level,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-2, 12)
        };
        let mut rng = stream(71, "smc-flat", 0);
        // eight particles keep 1/k and the resulting ESS dyadic-exact
        let k = 8;
        let set = regal_smc(&d, &aux, &obs, &cfg, k, ResamplePolicy::EssThreshold, &mut rng).unwrap();
        assert!(set.meta.resamples.is_empty(), "resampled at {:?}", set.meta.resamples);
        assert_eq!(set.meta.ess_trace.len(), cfg.bins + 2);
        for &e in &set.meta.ess_trace {
            assert_eq!(e, k as f64);
        }
        for &cv in &set.meta.cv_trace {
            assert_eq!(cv, 0.0);
        }
        for &lw in &set.log_weights {
            assert_eq!(lw, level);
        }
    }

    #[test]
    fn smc_peaked_likelihood_collapses_with_diagnostics() {
        let d = AnalyticGaussianDenoiser::standard(1, schedule(16));
        let aux = ImproperUniformAux::new(0);
        let obs = GaussianMeanObs {
            y: vec![50.0],
            noise_var: 1e-9,
        };
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(0.0),
            ..ReGALCfg::new(1e-2, 16)
        };
        let mut rng = stream(73, "smc-collapse", 0);
        match regal_smc(&d, &aux, &obs, &cfg, 2, ResamplePolicy::EssThreshold, &mut rng) {
            Err(Error::ParticleCollapse { ess, steps, trace_tail }) => {
                assert!(ess < 1.5);
                assert_eq!(steps, 3);
                assert!(!trace_tail.is_empty());
            }
            other => panic!("expected collapse, got {other:?}"),
        }
    }

    #[test]
    fn smc_conjugate_chain_keeps_weights_flat() {
        // Gaussian prior, exact posterior-mean denoiser, and the exact
        // marginal lookahead: every intermediate target is exact, so the
        // incremental weights should be nearly the same across particles at
        // every level — ESS stays ≈ K and resampling never triggers.
        let ns = NoiseSchedule::default();
        let d = AnalyticGaussianDenoiser::standard(1, ns.clone());
        let obs = ConjugateGaussianObs {
            y: vec![0.7],
            noise_var: 0.25,
            prior_var: 1.0,
            schedule: ns,
        };
        let aux = ImproperUniformAux::new(0);
        let cfg = ReGALCfg {
            anneal: Anneal::Constant(1.0),
            ..ReGALCfg::new(1e-3, 256)
        };
        let k = 64;
        let mut rng = stream(41, "smc-conjugate", 0);
        let set = regal_smc(&d, &aux, &obs, &cfg, k, ResamplePolicy::EssThreshold, &mut rng).unwrap();

        let (mean, ess) = posterior_expectation(&set, |p| p.x.clone()).unwrap();
        // posterior N(y/(1+noise_var), ...) = N(0.56, 0.2)
        assert!((mean[0] - 0.56).abs() < 0.05, "posterior mean {}", mean[0]);
        assert!(ess > 0.9 * k as f64, "ESS {ess} should stay near K");
        assert!(set.meta.resamples.is_empty(), "resampled at {:?}", set.meta.resamples);
        let max_cv = set.meta.cv_trace.iter().cloned().fold(0.0, f64::max);
        assert!(max_cv < 0.1, "max per-level weight CV {max_cv}");

        // With flat weights the averaged total weight is a sharp evidence
        // estimate: log p(y) = log N(0.7; 0, 1 + 0.25).
        let wmax = set.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_ev = wmax
            + (set.log_weights.iter().map(|w| (w - wmax).exp()).sum::<f64>() / k as f64).ln();
        let truth = normal_logpdf(0.7, 0.0, 1.25);
        assert!((log_ev - truth).abs() < 0.05, "evidence {log_ev} vs {truth}");
    }

    #[test]
    fn regal_population_tracks_toy_posterior() {
        // Fit the scene prior from truncated-normal draws, then run the full
        // guided sampler on the blend observation and compare the population
        // mean against quadrature on the analytic model.
        let m = ToyModel::default();
        let mut rng = stream(21, "toy-prior-draws", 0);
        let mut xs = Vec::with_capacity(4096);
        while xs.len() < 4096 {
            let v = 0.2 + 0.5 * standard_normal_vec(&mut rng, 1).data()[0];
            if (0.0..=1.0).contains(&v) {
                xs.push(DenseArray::vector(vec![v]));
            }
        }
        let ns = NoiseSchedule::default();
        let tcfg = DiffusionTrainCfg {
            steps: 1500,
            batch: 32,
            hidden: 32,
            seed: 3,
            ..DiffusionTrainCfg::default()
        };
        let (den, trace) = train_denoiser(&xs, &ns, &tcfg).unwrap();
        let tail = smoothed_tail(&trace, 100);
        assert!(tail.is_finite() && tail < trace[0], "training went nowhere: {tail}");

        let quad = toy_quadrature(&m, 0.5, 128).unwrap();
        let obs = ToyObs { model: m, y: 0.5 };
        let aux = LogitUniformAux { dim: 2 };
        let cfg = ReGALCfg {
            inner_steps: 2,
            ..ReGALCfg::new(5e-3, 128)
        };
        let runs = 128;
        let mut rg = stream(22, "regal-population", 0);
        let mut acc = 0.0;
        for _ in 0..runs {
            let p = regal(&den, &aux, &obs, &cfg, &mut rg).unwrap();
            acc += p.x[0];
        }
        let mean = acc / runs as f64;
        assert!(
            (mean - quad.mean_x).abs() < 0.1,
            "population mean {mean} vs quadrature {}",
            quad.mean_x
        );
    }

    #[test]
    fn particle_set_serializes_round_trip() {
        let set = WeightedParticleSet {
            particles: vec![
                Particle {
                    x: vec![0.1, 0.2],
                    c: vec![-0.3],
                },
                Particle {
                    x: vec![1.0, -1.0],
                    c: vec![0.0],
                },
            ],
            log_weights: vec![-0.5, -1.5],
            meta: ParticleMeta {
                method: "regal-smc".into(),
                seed: 99,
                bins: 4,
                delta: 0.01,
                ess_trace: vec![2.0, 1.8],
                cv_trace: vec![0.0, 0.1],
                resamples: vec![2],
            },
        };
        let text = serde_json::to_string(&set).unwrap();
        let back: WeightedParticleSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, set);
        let cfg = ReGALCfg::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ReGALCfg = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
