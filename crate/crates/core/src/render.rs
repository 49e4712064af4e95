//! Differentiable volumetric rendering over voxel radiance grids.
//!
//! A scene is a raw-parameter voxel grid over the cube [-1,1]^3; colors
//! decode through a sigmoid and densities through a shifted softplus, so
//! every raw setting is a valid scene. Rays from a pinhole camera are
//! integrated with fixed stratified quadrature (one jittered point per
//! regular bin, jitter fixed by a seed), which keeps renders deterministic
//! and cheap enough to differentiate through.
//!
//! Two evaluation paths share the same geometry and the same decoded
//! values: a plain-value path (`render_ray`, `render_image`, `depth_mask`,
//! `log_likelihood`) and a tape path (`render_pixels_graph`,
//! `log_likelihood_graph`) for gradient-based inference. The tape path can
//! optionally treat the camera field of view as a differentiable input.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngs::hash_unit;
use crate::tape::{InterpTable, Tape, Var};
use crate::tensor::{normal_logpdf, sigmoid, softplus, DenseArray, LN_TAU};

/// Raw density is decoded as softplus(raw - DENSITY_BIAS), so a zero raw
/// parameter means a nearly empty cell rather than a half-opaque one.
pub const DENSITY_BIAS: f64 = 3.0;

/// Raw density value whose decoded density underflows to exactly zero.
pub const TRANSPARENT_RAW: f64 = -1e10;

/// Additive guard in the color blend denominator: turns the empty-sample 0/0
/// into an exact 0 (whose quadrature weight is zero anyway) while staying far
/// below any decoded density. Its square must remain a normal f64 because the
/// reverse-mode division rule divides by the denominator squared.
const BLEND_EPS: f64 = 1e-30;

/// Voxel radiance field on [-1,1]^3: `resolution`^3 cells, each holding
/// three raw color parameters and one raw density parameter. Storage is
/// planar: three color planes (R, G, B) then the density plane, each of
/// `resolution`^3 cells with the last spatial axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceGrid {
    pub resolution: usize,
    pub raw: DenseArray,
}

impl RadianceGrid {
    /// All-zero raw parameters: mid-gray color, density softplus(-3) ≈ 0.049.
    pub fn new(resolution: usize) -> Self {
        assert!(resolution >= 2, "grid resolution must be at least 2");
        let cells = resolution * resolution * resolution;
        RadianceGrid {
            resolution,
            raw: DenseArray::zeros(vec![4 * cells]),
        }
    }

    /// Grid whose decoded density is exactly zero everywhere, so composing
    /// with it is a bit-exact no-op.
    pub fn transparent(resolution: usize) -> Self {
        let mut g = RadianceGrid::new(resolution);
        let cells = g.cells();
        for v in &mut g.raw.data_mut()[3 * cells..] {
            *v = TRANSPARENT_RAW;
        }
        g
    }

    pub fn from_raw(resolution: usize, raw: DenseArray) -> Result<Self> {
        let cells = resolution * resolution * resolution;
        if resolution < 2 || raw.len() != 4 * cells {
            return Err(Error::InvalidArg(format!(
                "radiance grid raw length {} does not match 4·{resolution}^3",
                raw.len()
            )));
        }
        if !raw.all_finite() {
            return Err(Error::InvalidArg("non-finite grid parameter".into()));
        }
        Ok(RadianceGrid { resolution, raw })
    }

    pub fn cells(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }

    /// Flat cell index with the last spatial axis fastest.
    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.resolution && iy < self.resolution && iz < self.resolution);
        (ix * self.resolution + iy) * self.resolution + iz
    }

    /// World coordinate of a cell center along one axis.
    pub fn cell_center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * 2.0 / self.resolution as f64
    }

    pub fn set_cell(&mut self, ix: usize, iy: usize, iz: usize, color_raw: [f64; 3], density_raw: f64) {
        let cells = self.cells();
        let q = self.cell_index(ix, iy, iz);
        let data = self.raw.data_mut();
        for c in 0..3 {
            data[c * cells + q] = color_raw[c];
        }
        data[3 * cells + q] = density_raw;
    }

    /// Set every cell whose center lies in the axis-aligned box [lo, hi].
    pub fn fill_box(&mut self, lo: [f64; 3], hi: [f64; 3], color_raw: [f64; 3], density_raw: f64) {
        let r = self.resolution;
        for ix in 0..r {
            for iy in 0..r {
                for iz in 0..r {
                    let p = [self.cell_center(ix), self.cell_center(iy), self.cell_center(iz)];
                    if (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) {
                        self.set_cell(ix, iy, iz, color_raw, density_raw);
                    }
                }
            }
        }
    }

    fn decode(&self) -> DecodedGrid {
        let cells = self.cells();
        let raw = self.raw.data();
        DecodedGrid {
            resolution: self.resolution,
            colors: raw[..3 * cells].iter().map(|&x| sigmoid(x)).collect(),
            density: raw[3 * cells..].iter().map(|&x| softplus(x - DENSITY_BIAS)).collect(),
        }
    }
}

/// Decoded planes: colors [3·R^3] (planar by channel) and densities [R^3].
struct DecodedGrid {
    resolution: usize,
    colors: Vec<f64>,
    density: Vec<f64>,
}

/// One field sample: color in [0,1]^3 and nonnegative density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub color: [f64; 3],
    pub density: f64,
}

/// Point query of the decoded field: trilinear interpolation of decoded cell
/// values with cell centers as nodes (edge-clamped). Points outside the cube
/// return zero density (and zero color, which never matters downstream).
/// The direction argument is accepted for interface stability but unused:
/// grids are direction-independent.
pub fn query_field(g: &RadianceGrid, pos: [f64; 3], _dir: [f64; 3]) -> FieldSample {
    let d = g.decode();
    match trilinear_corners(g.resolution, pos) {
        None => FieldSample { color: [0.0; 3], density: 0.0 },
        Some((i0, f)) => {
            let cells = g.cells();
            let mut color = [0.0; 3];
            let mut density = 0.0;
            for k in 0..8 {
                let (cell, w) = corner(g.resolution, i0, f, k);
                for c in 0..3 {
                    color[c] += w * d.colors[c * cells + cell];
                }
                density += w * d.density[cell];
            }
            FieldSample { color, density }
        }
    }
}

/// Density-weighted composition of two field samples. At zero total density
/// the blend is 0/0; by convention the scene color is returned (its
/// downstream quadrature weight is zero, so the value never shows).
pub fn compose(scene: FieldSample, corruption: FieldSample) -> FieldSample {
    if corruption.density == 0.0 {
        return FieldSample { color: scene.color, density: scene.density };
    }
    if scene.density == 0.0 {
        return corruption;
    }
    let density = scene.density + corruption.density;
    let mut color = [0.0; 3];
    for c in 0..3 {
        color[c] =
            (scene.color[c] * scene.density + corruption.color[c] * corruption.density) / density;
    }
    FieldSample { color, density }
}

/// Pinhole camera. `fov` is the vertical field of view in radians; the
/// horizontal extent scales with the aspect ratio. Rays carry unit
/// directions, and near/far are Euclidean distances along them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub origin: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `origin` looking at `target` with desk-scale defaults.
    pub fn looking_at(origin: [f64; 3], target: [f64; 3]) -> Self {
        Camera {
            origin,
            target,
            up: [0.0, 1.0, 0.0],
            fov: std::f64::consts::FRAC_PI_3,
            width: 32,
            height: 32,
            near: 0.5,
            far: 3.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::InvalidArg(format!("fov {} outside (0, pi)", self.fov)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArg(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArg("empty image".into()));
        }
        let fwd = sub3(self.target, self.origin);
        if norm3(fwd) == 0.0 {
            return Err(Error::InvalidArg("camera target equals origin".into()));
        }
        if norm3(cross3(fwd, self.up)) < 1e-9 * norm3(fwd) * norm3(self.up) {
            return Err(Error::InvalidArg("up vector parallel to view direction".into()));
        }
        Ok(())
    }

    /// Orthonormal (right, up, forward) basis.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let fwd = normalize3(sub3(self.target, self.origin));
        let right = normalize3(cross3(fwd, self.up));
        let up = cross3(right, fwd);
        (right, up, fwd)
    }

    pub fn rays(&self) -> usize {
        self.width * self.height
    }

    /// In-plane pixel offset (a, b) for every ray in row-major order: the
    /// ray direction before normalization is fwd + tan(fov/2)·(a·right + b·up).
    fn pixel_offsets(&self) -> Vec<(f64, f64)> {
        let aspect = self.width as f64 / self.height as f64;
        let mut out = Vec::with_capacity(self.rays());
        for row in 0..self.height {
            let v = 1.0 - 2.0 * (row as f64 + 0.5) / self.height as f64;
            for col in 0..self.width {
                let u = 2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0;
                out.push((u * aspect, v));
            }
        }
        out
    }

    /// Unit-direction ray through the center of pixel (row, col).
    pub fn ray(&self, row: usize, col: usize) -> Ray {
        let (right, up, fwd) = self.basis();
        let (a, b) = self.pixel_offsets()[row * self.width + col];
        let th = (self.fov / 2.0).tan();
        let dir = [
            fwd[0] + th * (a * right[0] + b * up[0]),
            fwd[1] + th * (a * right[1] + b * up[1]),
            fwd[2] + th * (a * right[2] + b * up[2]),
        ];
        Ray { origin: self.origin, dir: normalize3(dir) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

/// Quadrature and compositing settings shared by all render entry points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderCfg {
    /// Stratified sample count per ray.
    pub n_samples: usize,
    /// Color composited behind the final transmittance.
    pub background: [f64; 3],
    /// Seed for the per-ray, per-bin jitter (fixed during optimization).
    pub jitter_seed: u64,
}

impl Default for RenderCfg {
    fn default() -> Self {
        RenderCfg { n_samples: 48, background: [1.0, 1.0, 1.0], jitter_seed: 0 }
    }
}

/// Per-pixel Gaussian likelihood settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodCfg {
    /// Observation noise standard deviation.
    pub sigma_y: f64,
    /// Rays to subsample per evaluation; 0 renders every ray.
    pub subsample: usize,
}

impl Default for LikelihoodCfg {
    fn default() -> Self {
        LikelihoodCfg { sigma_y: 0.05, subsample: 0 }
    }
}

/// H×W×3 image with entries in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: DenseArray,
}

impl Image {
    pub fn from_data(data: DenseArray) -> Result<Self> {
        let shape = data.shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::InvalidArg(format!("image shape {shape:?} is not [H, W, 3]")));
        }
        if data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArg("image entries must lie in [0,1]".into()));
        }
        Ok(Image { height: shape[0], width: shape[1], data })
    }

    pub fn constant(height: usize, width: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Image { height, width, data: DenseArray::from_vec(vec![height, width, 3], data) }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let base = (row * self.width + col) * 3;
        let d = self.data.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.width + col) * 3;
        &mut self.data.data_mut()[base..base + 3]
    }

    /// Persist as a flat little-endian 32-bit blob plus a JSON sidecar with
    /// the shape and camera. Values round to f32 precision on the way out.
    pub fn save(&self, dir: &Path, name: &str, camera: &Camera) -> Result<()> {
        let header = ImageHeader {
            height: self.height,
            width: self.width,
            camera: camera.clone(),
        };
        crate::io::write_json(&dir.join(format!("{name}.json")), &header)?;
        crate::io::write_f32_blob(
            &dir.join(format!("{name}.bin")),
            &self.data,
        )
    }

    pub fn load(dir: &Path, name: &str) -> Result<(Image, Camera)> {
        let header: ImageHeader = crate::io::read_json(&dir.join(format!("{name}.json")))?;
        let data = crate::io::read_f32_blob(
            &dir.join(format!("{name}.bin")),
            vec![header.height, header.width, 3],
        )?;
        Ok((Image::from_data(data)?, header.camera))
    }
}

#[derive(Serialize, Deserialize)]
struct ImageHeader {
    height: usize,
    width: usize,
    camera: Camera,
}

/// Per-ray depth and object mask. Depth holds the far distance for unmasked
/// rays so the array stays finite everywhere.
#[derive(Debug, Clone)]
pub struct DepthMask {
    pub height: usize,
    pub width: usize,
    pub depth: DenseArray,
    pub mask: Vec<bool>,
}

// ---------------------------------------------------------------------------
// geometry helpers

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Interpolation setup for one point: lower corner cell indices and
/// fractional offsets per axis, or None when strictly outside the cube.
/// Nodes sit at cell centers; the half-cell skin at each face clamps to the
/// boundary cells (interpolation weights degenerate there).
fn trilinear_corners(resolution: usize, p: [f64; 3]) -> Option<([usize; 3], [f64; 3])> {
    let r = resolution;
    let mut i0 = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        if !(-1.0..=1.0).contains(&p[a]) {
            return None;
        }
        let xi = (p[a] + 1.0) * r as f64 / 2.0 - 0.5;
        let xi = xi.clamp(0.0, (r - 1) as f64);
        let lo = (xi.floor() as usize).min(r - 2);
        i0[a] = lo;
        f[a] = xi - lo as f64;
    }
    Some((i0, f))
}

/// Flat cell index and trilinear weight of corner `k` (bit 2 = x, 1 = y, 0 = z).
fn corner(resolution: usize, i0: [usize; 3], f: [f64; 3], k: usize) -> (usize, f64) {
    let dx = (k >> 2) & 1;
    let dy = (k >> 1) & 1;
    let dz = k & 1;
    let cell = ((i0[0] + dx) * resolution + (i0[1] + dy)) * resolution + (i0[2] + dz);
    let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
    let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
    let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
    (cell, wx * wy * wz)
}

/// Jittered stratified sample distances for one ray.
fn sample_ts(near: f64, far: f64, n_samples: usize, jitter_seed: u64, ray_id: u64) -> Vec<f64> {
    let delta = (far - near) / n_samples as f64;
    (0..n_samples)
        .map(|i| near + (i as f64 + hash_unit(jitter_seed, ray_id, i as u64)) * delta)
        .collect()
}

/// Interpolate one grid at one point, with zero weights outside the cube.
/// Accumulation order matches the tape's fused interpolation op bit for bit.
fn sample_decoded(d: &DecodedGrid, p: [f64; 3]) -> FieldSample {
    match trilinear_corners(d.resolution, p) {
        None => FieldSample { color: [0.0; 3], density: 0.0 },
        Some((i0, f)) => {
            let cells = d.resolution * d.resolution * d.resolution;
            let mut color = [0.0; 3];
            let mut density = 0.0;
            for k in 0..8 {
                let (cell, w) = corner(d.resolution, i0, f, k);
                for c in 0..3 {
                    color[c] += w * d.colors[c * cells + cell];
                }
                density += w * d.density[cell];
            }
            FieldSample { color, density }
        }
    }
}

// ---------------------------------------------------------------------------
// value path

struct RayTrace {
    color: [f64; 3],
    weights: Vec<f64>,
    distances: Vec<f64>,
    /// Final transmittance; only the conservation tests read it.
    #[cfg_attr(not(test), allow(dead_code))]
    transmittance: f64,
}

/// Shared quadrature core: per-sample total density and per-grid blend
/// numerators are combined exactly as in the tape path.
fn trace_ray(
    scene: &DecodedGrid,
    corruption: Option<&DecodedGrid>,
    ray: &Ray,
    near: f64,
    far: f64,
    cfg: &RenderCfg,
    ray_id: u64,
) -> RayTrace {
    let ts = sample_ts(near, far, cfg.n_samples, cfg.jitter_seed, ray_id);
    let delta = (far - near) / cfg.n_samples as f64;
    let mut weights = Vec::with_capacity(cfg.n_samples);
    let mut color = [0.0f64; 3];
    let mut cum = 0.0f64;
    let mut acc = [0.0f64; 3];
    for &t in &ts {
        let p = [
            ray.origin[0] + t * ray.dir[0],
            ray.origin[1] + t * ray.dir[1],
            ray.origin[2] + t * ray.dir[2],
        ];
        let sz = sample_decoded(scene, p);
        let mut sigma = sz.density;
        let mut num = [
            sz.color[0] * sz.density,
            sz.color[1] * sz.density,
            sz.color[2] * sz.density,
        ];
        if let Some(cg) = corruption {
            let sc = sample_decoded(cg, p);
            sigma += sc.density;
            for c in 0..3 {
                num[c] += sc.color[c] * sc.density;
            }
        }
        let a = sigma * delta;
        let trans = (-cum).exp();
        cum += a;
        let w = trans * (1.0 - (-a).exp());
        let den = sigma + BLEND_EPS;
        for c in 0..3 {
            acc[c] += w * (num[c] / den);
        }
        weights.push(w);
    }
    let t_final = (-weights_total_exponent(&ts, scene, corruption, ray, delta)).exp();
    for c in 0..3 {
        color[c] = acc[c] + t_final * cfg.background[c];
    }
    RayTrace { color, weights, distances: ts, transmittance: t_final }
}

/// Fresh left-fold of the per-sample optical depths, mirroring the tape's
/// segment-sum so both paths compute the final transmittance identically.
fn weights_total_exponent(
    ts: &[f64],
    scene: &DecodedGrid,
    corruption: Option<&DecodedGrid>,
    ray: &Ray,
    delta: f64,
) -> f64 {
    let mut total = 0.0;
    for &t in ts {
        let p = [
            ray.origin[0] + t * ray.dir[0],
            ray.origin[1] + t * ray.dir[1],
            ray.origin[2] + t * ray.dir[2],
        ];
        let mut sigma = sample_decoded(scene, p).density;
        if let Some(cg) = corruption {
            sigma += sample_decoded(cg, p).density;
        }
        total += sigma * delta;
    }
    total
}

/// Integrate one ray. Returns the composited color (before any clamping),
/// the per-sample quadrature weights, and the sample distances. The weights
/// and the final transmittance sum to 1 up to rounding.
pub fn render_ray(
    scene: &RadianceGrid,
    corruption: Option<&RadianceGrid>,
    ray: &Ray,
    near: f64,
    far: f64,
    cfg: &RenderCfg,
    ray_id: u64,
) -> ([f64; 3], Vec<f64>, Vec<f64>) {
    let sd = scene.decode();
    let cd = corruption.map(|g| g.decode());
    let tr = trace_ray(&sd, cd.as_ref(), ray, near, far, cfg, ray_id);
    (tr.color, tr.weights, tr.distances)
}

/// Render every pixel through its center ray. Pixel values are clamped to
/// [0,1] (quadrature can overshoot by rounding only).
pub fn render_image(
    scene: &RadianceGrid,
    corruption: Option<&RadianceGrid>,
    camera: &Camera,
    cfg: &RenderCfg,
) -> Result<Image> {
    camera.validate()?;
    let sd = scene.decode();
    let cd = corruption.map(|g| g.decode());
    let mut data = Vec::with_capacity(camera.rays() * 3);
    for row in 0..camera.height {
        for col in 0..camera.width {
            let id = (row * camera.width + col) as u64;
            let ray = camera.ray(row, col);
            let tr = trace_ray(&sd, cd.as_ref(), &ray, camera.near, camera.far, cfg, id);
            for c in 0..3 {
                data.push(tr.color[c].clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        height: camera.height,
        width: camera.width,
        data: DenseArray::from_vec(vec![camera.height, camera.width, 3], data),
    })
}

/// Per-ray opacity mask and percentile depth of the scattered mass.
pub fn depth_mask(
    scene: &RadianceGrid,
    camera: &Camera,
    cfg: &RenderCfg,
    percentile: f64,
    opacity_threshold: f64,
) -> Result<DepthMask> {
    camera.validate()?;
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::InvalidArg(format!("percentile {percentile} outside (0,1)")));
    }
    let sd = scene.decode();
    let mut depth = Vec::with_capacity(camera.rays());
    let mut mask = Vec::with_capacity(camera.rays());
    for row in 0..camera.height {
        for col in 0..camera.width {
            let id = (row * camera.width + col) as u64;
            let ray = camera.ray(row, col);
            let tr = trace_ray(&sd, None, &ray, camera.near, camera.far, cfg, id);
            let opacity: f64 = tr.weights.iter().sum();
            mask.push(opacity > opacity_threshold);
            if opacity == 0.0 {
                depth.push(camera.far);
                continue;
            }
            let target = percentile * opacity;
            let mut cum = 0.0;
            let mut d = *tr.distances.last().unwrap();
            for (w, t) in tr.weights.iter().zip(&tr.distances) {
                cum += w;
                if cum >= target {
                    d = *t;
                    break;
                }
            }
            depth.push(d);
        }
    }
    Ok(DepthMask {
        height: camera.height,
        width: camera.width,
        depth: DenseArray::from_vec(vec![camera.height, camera.width], depth),
        mask,
    })
}

/// Deterministic distinct-ray subset (ascending) for likelihood subsampling.
pub fn choose_rays(total: usize, k: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    assert!(k > 0 && k <= total);
    let mut ids: Vec<u32> = (0..total as u32).collect();
    let mut rng = crate::rngs::stream(seed, "ray-subsample", 0);
    for i in 0..k {
        let j = rng.gen_range(i..total);
        ids.swap(i, j);
    }
    let mut picked = ids[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Sum of per-pixel-and-channel Gaussian log densities of `y` under the
/// rendered mean. With `cfg.subsample > 0`, a seeded subset of rays is
/// scored and the sum rescaled by total/sampled, which keeps the estimator
/// unbiased for the full-ray value.
pub fn log_likelihood(
    y: &Image,
    scene: &RadianceGrid,
    corruption: Option<&RadianceGrid>,
    camera: &Camera,
    cfg: &RenderCfg,
    lik: &LikelihoodCfg,
    subsample_seed: u64,
) -> Result<f64> {
    camera.validate()?;
    if y.height != camera.height || y.width != camera.width {
        return Err(Error::InvalidArg(format!(
            "observation is {}x{} but camera renders {}x{}",
            y.height, y.width, camera.height, camera.width
        )));
    }
    if !(lik.sigma_y > 0.0) {
        return Err(Error::InvalidArg("sigma_y must be positive".into()));
    }
    let rendered = render_image(scene, corruption, camera, cfg)?;
    let total = camera.rays();
    let (ids, scale) = if lik.subsample == 0 || lik.subsample >= total {
        ((0..total as u32).collect::<Vec<u32>>(), 1.0)
    } else {
        (
            choose_rays(total, lik.subsample, subsample_seed),
            total as f64 / lik.subsample as f64,
        )
    };
    let var = lik.sigma_y * lik.sigma_y;
    let mut ll = 0.0;
    for &id in &ids {
        let base = id as usize * 3;
        for c in 0..3 {
            ll += normal_logpdf(y.data.data()[base + c], rendered.data.data()[base + c], var);
        }
    }
    Ok(scale * ll)
}

// ---------------------------------------------------------------------------
// tape path

/// A radiance grid whose raw parameters live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GridVar {
    pub resolution: usize,
    pub raw: Var,
}

/// Decoded tape planes for one grid.
struct DecodedVars {
    colors: Var,
    density: Var,
}

fn decode_graph(tape: &mut Tape, g: GridVar) -> Result<DecodedVars> {
    let cells = g.resolution * g.resolution * g.resolution;
    if tape.value(g.raw).len() != 4 * cells {
        return Err(Error::InvalidArg(format!(
            "grid raw var length {} does not match 4·{}^3",
            tape.value(g.raw).len(),
            g.resolution
        )));
    }
    let c = tape.slice(g.raw, 0..3 * cells);
    let colors = tape.sigmoid(c);
    let d = tape.slice(g.raw, 3 * cells..4 * cells);
    let d = tape.add_scalar(d, -DENSITY_BIAS);
    let density = tape.softplus(d);
    Ok(DecodedVars { colors, density })
}

/// Per-sample interpolated color channels and density for one grid.
struct SampledVars {
    color: [Var; 3],
    density: Var,
}

/// Build fused interpolation tables from host-side sample positions.
fn build_tables(resolution: usize, positions: &[[f64; 3]]) -> (Vec<Arc<InterpTable>>, Arc<InterpTable>) {
    let cells = resolution * resolution * resolution;
    let m = positions.len();
    let mut color_tables = Vec::with_capacity(3);
    let mut d_idx = Vec::with_capacity(m);
    let mut d_w = Vec::with_capacity(m);
    let mut c_idx: [Vec<[u32; 8]>; 3] = [Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m)];
    for &p in positions {
        let mut idx = [0u32; 8];
        let mut w = [0.0f64; 8];
        if let Some((i0, f)) = trilinear_corners(resolution, p) {
            for k in 0..8 {
                let (cell, wk) = corner(resolution, i0, f, k);
                idx[k] = cell as u32;
                w[k] = wk;
            }
        }
        d_idx.push(idx);
        d_w.push(w);
        for (c, ci) in c_idx.iter_mut().enumerate() {
            let mut off = [0u32; 8];
            for k in 0..8 {
                off[k] = idx[k] + (c * cells) as u32;
            }
            ci.push(off);
        }
    }
    for ci in c_idx {
        color_tables.push(Arc::new(InterpTable { idx: ci, w: d_w.clone() }));
    }
    (color_tables, Arc::new(InterpTable { idx: d_idx, w: d_w }))
}

fn sample_grid_fast(
    tape: &mut Tape,
    decoded: &DecodedVars,
    tables: &(Vec<Arc<InterpTable>>, Arc<InterpTable>),
) -> SampledVars {
    let color = [
        tape.interp(decoded.colors, tables.0[0].clone()),
        tape.interp(decoded.colors, tables.0[1].clone()),
        tape.interp(decoded.colors, tables.0[2].clone()),
    ];
    let density = tape.interp(decoded.density, tables.1.clone());
    SampledVars { color, density }
}

/// Differentiable trilinear sampling for the fov-variable path: fractional
/// coordinates are recomputed on the tape from the per-sample positions,
/// while the corner cell choice (and the inside-the-cube mask) is fixed from
/// the current fov value. Samples in the boundary half-cell skin, where the
/// fractional coordinate is clamped, use the clamped constant instead (their
/// coordinate derivative is zero, matching the clamped interpolant). The
/// gradient is exact within each interpolation cell; crossing a cell boundary
/// under a finite-difference probe would need a step many orders larger than
/// the 1e-5 used by the checks.
struct GenericSampler {
    corner_idx: Vec<Arc<Vec<u32>>>, // 8 entries of length m (cell indices)
    weight_vars: Vec<Var>,          // 8 masked trilinear weights
}

impl GenericSampler {
    fn new(tape: &mut Tape, resolution: usize, positions: &[[f64; 3]], pos_vars: [Var; 3]) -> Self {
        let r = resolution;
        let m = positions.len();
        let mut corner_idx: Vec<Vec<u32>> = vec![Vec::with_capacity(m); 8];
        let mut mask = Vec::with_capacity(m);
        // per axis: lower cell index, interior indicator, clamped-f constant
        let mut lo = [const { Vec::new() }; 3];
        let mut interior = [const { Vec::new() }; 3];
        let mut clamped_f = [const { Vec::new() }; 3];
        for &p in positions {
            match trilinear_corners(r, p) {
                Some((i0, f)) => {
                    mask.push(1.0);
                    for a in 0..3 {
                        lo[a].push(i0[a] as f64);
                        let xi_raw = (p[a] + 1.0) * r as f64 / 2.0 - 0.5;
                        let inside = (0.0..=(r - 1) as f64).contains(&xi_raw);
                        interior[a].push(if inside { 1.0 } else { 0.0 });
                        clamped_f[a].push(if inside { 0.0 } else { f[a] });
                    }
                    for (k, ci) in corner_idx.iter_mut().enumerate() {
                        let (cell, _) = corner(r, i0, [0.0; 3], k);
                        ci.push(cell as u32);
                    }
                }
                None => {
                    mask.push(0.0);
                    for a in 0..3 {
                        lo[a].push(0.0);
                        interior[a].push(0.0);
                        clamped_f[a].push(0.0);
                    }
                    for ci in corner_idx.iter_mut() {
                        ci.push(0);
                    }
                }
            }
        }
        // fractional coordinates per axis: f = ((p+1)·R/2 − 1/2 − i0) when
        // interior, else the fixed clamped value
        let mut fpos = Vec::with_capacity(3);
        let mut fneg = Vec::with_capacity(3);
        for a in 0..3 {
            let xi = tape.mul_scalar(pos_vars[a], r as f64 / 2.0);
            let xi = tape.add_scalar(xi, r as f64 / 2.0 - 0.5);
            let loc = tape.constant(DenseArray::vector(std::mem::take(&mut lo[a])));
            let raw_f = tape.sub(xi, loc);
            let ind = tape.constant(DenseArray::vector(std::mem::take(&mut interior[a])));
            let live = tape.mul(raw_f, ind);
            let base = tape.constant(DenseArray::vector(std::mem::take(&mut clamped_f[a])));
            let f = tape.add(live, base);
            let nf = tape.neg(f);
            let omf = tape.add_scalar(nf, 1.0);
            fpos.push(f);
            fneg.push(omf);
        }
        let mask_var = tape.constant(DenseArray::vector(mask));
        let mut weight_vars = Vec::with_capacity(8);
        for k in 0..8 {
            let wx = if (k >> 2) & 1 == 1 { fpos[0] } else { fneg[0] };
            let wy = if (k >> 1) & 1 == 1 { fpos[1] } else { fneg[1] };
            let wz = if k & 1 == 1 { fpos[2] } else { fneg[2] };
            let w = tape.mul(wx, wy);
            let w = tape.mul(w, wz);
            let w = tape.mul(w, mask_var);
            weight_vars.push(w);
        }
        GenericSampler {
            corner_idx: corner_idx.into_iter().map(Arc::new).collect(),
            weight_vars,
        }
    }

    fn sample(&self, tape: &mut Tape, decoded: &DecodedVars, cells: usize) -> SampledVars {
        let mut color: Vec<Var> = Vec::with_capacity(3);
        for c in 0..3 {
            let mut acc: Option<Var> = None;
            for k in 0..8 {
                let idx: Vec<u32> = self.corner_idx[k]
                    .iter()
                    .map(|&q| q + (c * cells) as u32)
                    .collect();
                let g = tape.gather(decoded.colors, Arc::new(idx));
                let term = tape.mul(self.weight_vars[k], g);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term),
                });
            }
            color.push(acc.unwrap());
        }
        let mut acc: Option<Var> = None;
        for k in 0..8 {
            let g = tape.gather(decoded.density, self.corner_idx[k].clone());
            let term = tape.mul(self.weight_vars[k], g);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term),
            });
        }
        SampledVars {
            color: [color[0], color[1], color[2]],
            density: acc.unwrap(),
        }
    }
}

/// Build the differentiable per-pixel render for the given rays (original
/// row-major ray ids). Returns one Var of length `ray_ids.len()` per color
/// channel. With `fov = Some(v)` (a length-1 leaf holding the field of view
/// in radians), ray directions are rebuilt on the tape so the output is
/// differentiable in the fov; the camera's own fov field is ignored then.
pub fn render_pixels_graph(
    tape: &mut Tape,
    scene: GridVar,
    corruption: Option<GridVar>,
    camera: &Camera,
    fov: Option<Var>,
    cfg: &RenderCfg,
    ray_ids: &[u32],
) -> Result<[Var; 3]> {
    camera.validate()?;
    assert!(!ray_ids.is_empty(), "need at least one ray");
    let n = ray_ids.len();
    let s = cfg.n_samples;
    let m = n * s;
    let delta = (camera.far - camera.near) / s as f64;
    let (right, up, fwd) = camera.basis();
    let offsets = camera.pixel_offsets();
    let q: Vec<[f64; 3]> = ray_ids
        .iter()
        .map(|&id| {
            let (a, b) = offsets[id as usize];
            [
                a * right[0] + b * up[0],
                a * right[1] + b * up[1],
                a * right[2] + b * up[2],
            ]
        })
        .collect();
    let ts: Vec<f64> = ray_ids
        .iter()
        .flat_map(|&id| sample_ts(camera.near, camera.far, s, cfg.jitter_seed, id as u64))
        .collect();

    let fov_value = match fov {
        Some(v) => {
            let fv = tape.value(v);
            if fv.len() != 1 {
                return Err(Error::InvalidArg("fov var must be a single scalar".into()));
            }
            fv.data()[0]
        }
        None => camera.fov,
    };
    if !(fov_value > 0.0 && fov_value < std::f64::consts::PI) {
        return Err(Error::InvalidArg(format!("fov {fov_value} outside (0, pi)")));
    }
    let th = (fov_value / 2.0).tan();
    // host-side unit directions and sample positions (also used to fix the
    // interpolation cells in the fov-variable path)
    let dirs: Vec<[f64; 3]> = q
        .iter()
        .map(|qr| {
            normalize3([fwd[0] + th * qr[0], fwd[1] + th * qr[1], fwd[2] + th * qr[2]])
        })
        .collect();
    let positions: Vec<[f64; 3]> = (0..m)
        .map(|i| {
            let d = dirs[i / s];
            let t = ts[i];
            [
                camera.origin[0] + t * d[0],
                camera.origin[1] + t * d[1],
                camera.origin[2] + t * d[2],
            ]
        })
        .collect();

    let scene_dec = decode_graph(tape, scene)?;
    let corr_dec = match corruption {
        Some(g) => Some(decode_graph(tape, g)?),
        None => None,
    };

    let (scene_s, corr_s) = match fov {
        None => {
            let st = build_tables(scene.resolution, &positions);
            let ss = sample_grid_fast(tape, &scene_dec, &st);
            let cs = match (&corruption, &corr_dec) {
                (Some(g), Some(dec)) => {
                    let ct = if g.resolution == scene.resolution {
                        st
                    } else {
                        build_tables(g.resolution, &positions)
                    };
                    Some(sample_grid_fast(tape, dec, &ct))
                }
                _ => None,
            };
            (ss, cs)
        }
        Some(fv) => {
            // rebuild directions on the tape so d(pixel)/d(fov) flows
            let half = tape.mul_scalar(fv, 0.5);
            let sn = tape.sin(half);
            let cs = tape.cos(half);
            let tn = tape.div(sn, cs);
            let mut dir_vars = Vec::with_capacity(3);
            for a in 0..3 {
                let qa = tape.constant(DenseArray::vector(q.iter().map(|v| v[a]).collect()));
                let scaled = tape.mul(qa, tn);
                dir_vars.push(tape.add_scalar(scaled, fwd[a]));
            }
            let xx = tape.square(dir_vars[0]);
            let yy = tape.square(dir_vars[1]);
            let zz = tape.square(dir_vars[2]);
            let nn = tape.add(xx, yy);
            let nn = tape.add(nn, zz);
            let norm = tape.sqrt(nn);
            let ray_of_sample: Arc<Vec<u32>> =
                Arc::new((0..m as u32).map(|i| i / s as u32).collect());
            let t_const = tape.constant(DenseArray::vector(ts.clone()));
            let mut pos_vars = Vec::with_capacity(3);
            for a in 0..3 {
                let unit = tape.div(dir_vars[a], norm);
                let per_sample = tape.gather(unit, ray_of_sample.clone());
                let scaled = tape.mul(per_sample, t_const);
                pos_vars.push(tape.add_scalar(scaled, camera.origin[a]));
            }
            let pos_vars = [pos_vars[0], pos_vars[1], pos_vars[2]];
            let sampler = GenericSampler::new(tape, scene.resolution, &positions, pos_vars);
            let scells = scene.resolution.pow(3);
            let ss = sampler.sample(tape, &scene_dec, scells);
            let cs = match (&corruption, &corr_dec) {
                (Some(g), Some(dec)) => {
                    let own;
                    let csampler = if g.resolution == scene.resolution {
                        &sampler
                    } else {
                        own = GenericSampler::new(tape, g.resolution, &positions, pos_vars);
                        &own
                    };
                    Some(csampler.sample(tape, dec, g.resolution.pow(3)))
                }
                _ => None,
            };
            (ss, cs)
        }
    };

    // density-weighted blend numerators and total density, then quadrature
    let mut sigma = scene_s.density;
    let mut num = [
        tape.mul(scene_s.color[0], scene_s.density),
        tape.mul(scene_s.color[1], scene_s.density),
        tape.mul(scene_s.color[2], scene_s.density),
    ];
    if let Some(cs) = &corr_s {
        sigma = tape.add(sigma, cs.density);
        for c in 0..3 {
            let t = tape.mul(cs.color[c], cs.density);
            num[c] = tape.add(num[c], t);
        }
    }
    let a_sigma = tape.mul_scalar(sigma, delta);
    let cum = tape.segment_cumsum_excl(a_sigma, s);
    let ncum = tape.neg(cum);
    let trans = tape.exp(ncum);
    let na = tape.neg(a_sigma);
    let em = tape.exp(na);
    let nem = tape.neg(em);
    let om = tape.add_scalar(nem, 1.0);
    let w = tape.mul(trans, om);
    let den = tape.add_scalar(sigma, BLEND_EPS);
    let total = tape.segment_sum(a_sigma, s);
    let ntotal = tape.neg(total);
    let t_final = tape.exp(ntotal);
    let mut pixels = Vec::with_capacity(3);
    for c in 0..3 {
        let blend = tape.div(num[c], den);
        let contrib = tape.mul(w, blend);
        let sum = tape.segment_sum(contrib, s);
        let bgc = tape.mul_scalar(t_final, cfg.background[c]);
        pixels.push(tape.add(sum, bgc));
    }
    Ok([pixels[0], pixels[1], pixels[2]])
}

/// Differentiable Gaussian log likelihood of `y` under the rendered mean,
/// with the same subsampling/rescaling contract as [`log_likelihood`].
#[allow(clippy::too_many_arguments)]
pub fn log_likelihood_graph(
    tape: &mut Tape,
    y: &Image,
    scene: GridVar,
    corruption: Option<GridVar>,
    camera: &Camera,
    fov: Option<Var>,
    cfg: &RenderCfg,
    lik: &LikelihoodCfg,
    subsample_seed: u64,
) -> Result<Var> {
    if y.height != camera.height || y.width != camera.width {
        return Err(Error::InvalidArg(format!(
            "observation is {}x{} but camera renders {}x{}",
            y.height, y.width, camera.height, camera.width
        )));
    }
    if !(lik.sigma_y > 0.0) {
        return Err(Error::InvalidArg("sigma_y must be positive".into()));
    }
    let total = camera.rays();
    let (ids, scale) = if lik.subsample == 0 || lik.subsample >= total {
        ((0..total as u32).collect::<Vec<u32>>(), 1.0)
    } else {
        (
            choose_rays(total, lik.subsample, subsample_seed),
            total as f64 / lik.subsample as f64,
        )
    };
    let pixels = render_pixels_graph(tape, scene, corruption, camera, fov, cfg, &ids)?;
    let var = lik.sigma_y * lik.sigma_y;
    let mut ssq: Option<Var> = None;
    for (c, &pix) in pixels.iter().enumerate() {
        let yc: Vec<f64> = ids.iter().map(|&id| y.data.data()[id as usize * 3 + c]).collect();
        let ycv = tape.constant(DenseArray::vector(yc));
        let r = tape.sub(pix, ycv);
        let sq = tape.sum_sq(r);
        ssq = Some(match ssq {
            None => sq,
            Some(acc) => tape.add(acc, sq),
        });
    }
    let quad = tape.mul_scalar(ssq.unwrap(), -scale * 0.5 / var);
    let n_terms = (ids.len() * 3) as f64;
    Ok(tape.add_scalar(quad, -scale * n_terms * 0.5 * (LN_TAU + var.ln())))
}
