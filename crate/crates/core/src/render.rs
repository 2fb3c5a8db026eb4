//! Differentiable volumetric rendering of a dense voxel field.
//!
//! Rays are clipped to the field's bounding cube and sampled at a fixed
//! stride with an optional per-ray jitter. Density and color are trilinearly
//! interpolated from cell centers. Compositing follows the usual
//! emission-absorption quadrature:
//!
//! ```text
//! w_i = T_i (1 - exp(-sigma_i delta)),   T_i = prod_{j<i} exp(-sigma_j delta)
//! ```
//!
//! The backward pass is exact reverse mode through the recurrence. It
//! replays the samples recorded by the forward render.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::image::{GrayImage, RgbImage};

/// Guard on the depth normalization of near-empty rays.
pub const DEPTH_EPS: f64 = 1e-8;
/// Samples whose eight corners all fall below this density are skipped.
pub const SKIP_SIGMA: f64 = 1e-10;
/// Marching stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-12;

/// Pinhole camera looking at a target point.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    position: Point3<f64>,
    look_at: Point3<f64>,
    up: Vector3<f64>,
    fov_deg: f64,
    image_size: usize,
    forward: Vector3<f64>,
    right: Vector3<f64>,
    true_up: Vector3<f64>,
    tan_half: f64,
}

impl Camera {
    pub fn new(
        position: Point3<f64>,
        look_at: Point3<f64>,
        up: Vector3<f64>,
        fov_deg: f64,
        image_size: usize,
    ) -> Result<Self> {
        let view = look_at - position;
        if view.norm() < 1e-12 {
            return Err(LabError::Domain("camera position equals look_at".into()));
        }
        let forward = view.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(LabError::Domain(
                "camera up vector is parallel to the view direction".into(),
            ));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(LabError::Domain(format!("field of view {fov_deg} not in (0, 180)")));
        }
        if image_size == 0 {
            return Err(LabError::Domain("image size must be positive".into()));
        }
        let right = right.normalize();
        let true_up = right.cross(&forward);
        Ok(Self {
            position,
            look_at,
            up,
            fov_deg,
            image_size,
            forward,
            right,
            true_up,
            tan_half: (fov_deg.to_radians() * 0.5).tan(),
        })
    }

    pub fn position(&self) -> Point3<f64> {
        self.position
    }

    pub fn look_at(&self) -> Point3<f64> {
        self.look_at
    }

    pub fn up(&self) -> Vector3<f64> {
        self.up
    }

    pub fn fov_deg(&self) -> f64 {
        self.fov_deg
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.forward
    }

    /// Unit ray direction through continuous image coordinates, where pixel
    /// (row, col) spans [col, col+1) x [row, row+1).
    pub fn ray_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        let n = self.image_size as f64;
        let sx = (2.0 * x / n - 1.0) * self.tan_half;
        let sy = (1.0 - 2.0 * y / n) * self.tan_half;
        (self.forward + self.right * sx + self.true_up * sy).normalize()
    }

    pub fn pixel_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        self.ray_direction(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Perspective projection to continuous (x, y) image coordinates plus
    /// depth along the optical axis. Points behind the camera still project
    /// (mirrored); callers check the sign of the depth.
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64, f64) {
        let rel = p - self.position;
        let depth = rel.dot(&self.forward);
        let n = self.image_size as f64;
        let sx = rel.dot(&self.right) / (depth * self.tan_half);
        let sy = rel.dot(&self.true_up) / (depth * self.tan_half);
        ((sx + 1.0) * 0.5 * n, (1.0 - sy) * 0.5 * n, depth)
    }
}

/// Cameras on rings around `target`: `count` azimuths per elevation, azimuth
/// zero on the +z axis.
pub fn camera_ring(
    count: usize,
    radius: f64,
    elevations_deg: &[f64],
    fov_deg: f64,
    image_size: usize,
    target: Point3<f64>,
) -> Result<Vec<Camera>> {
    let mut cams = Vec::with_capacity(count * elevations_deg.len());
    for &elev in elevations_deg {
        let el = elev.to_radians();
        for k in 0..count {
            let az = std::f64::consts::TAU * k as f64 / count as f64;
            let offset = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
            cams.push(Camera::new(
                target + offset,
                target,
                Vector3::y(),
                fov_deg,
                image_size,
            )?);
        }
    }
    Ok(cams)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of softplus, floored so that zero density maps to a finite raw value.
pub fn inverse_softplus(y: f64) -> f64 {
    const FLOOR: f64 = -30.0;
    if y <= 0.0 {
        FLOOR
    } else if y > 30.0 {
        y
    } else {
        y.exp_m1().ln().max(FLOOR)
    }
}

pub fn logit(c: f64) -> f64 {
    let c = c.clamp(1e-6, 1.0 - 1e-6);
    (c / (1.0 - c)).ln()
}

/// Activated density and color per cell: `[sigma, r, g, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub resolution: usize,
    pub extent: f64,
    pub cells: Vec<[f64; 4]>,
}

impl DenseGrid {
    pub fn empty(resolution: usize, extent: f64) -> Self {
        Self {
            resolution,
            extent,
            cells: vec![[0.0, 0.5, 0.5, 0.5]; resolution.pow(3)],
        }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent / self.resolution as f64
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.resolution + iy) * self.resolution + ix
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Point3<f64> {
        let h = self.cell_size();
        let c = |i: usize| -self.extent + (i as f64 + 0.5) * h;
        Point3::new(c(ix), c(iy), c(iz))
    }

    /// Lower corner index and fractional offsets of `p` among cell centers.
    /// Coordinates outside the outermost centers clamp.
    #[inline]
    fn base(&self, p: &Point3<f64>) -> (usize, [f64; 3]) {
        let n = self.resolution;
        let inv_h = 1.0 / self.cell_size();
        let top = (n - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let g = ((p[a] + self.extent) * inv_h - 0.5).clamp(0.0, top);
            let i0 = (g.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        (self.index(base[0], base[1], base[2]), frac)
    }

    /// Corner indices and trilinear weights of `p` among cell centers.
    #[inline]
    fn locate(&self, p: &Point3<f64>) -> ([usize; 8], [f64; 8]) {
        let (i000, frac) = self.base(p);
        self.corners(i000, frac)
    }

    #[inline]
    fn corners(&self, i000: usize, frac: [f64; 3]) -> ([usize; 8], [f64; 8]) {
        let n = self.resolution;
        let (sx, sy, sz) = (1, n, n * n);
        let idx = [
            i000,
            i000 + sx,
            i000 + sy,
            i000 + sx + sy,
            i000 + sz,
            i000 + sx + sz,
            i000 + sy + sz,
            i000 + sx + sy + sz,
        ];
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let wts = [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ];
        (idx, wts)
    }

    /// Per lower-corner cell: whether any of the eight corners reaches
    /// `SKIP_SIGMA`, plus the world box holding every flagged cell.
    fn occupancy(&self) -> Occupancy {
        let n = self.resolution;
        let mut flags: Vec<bool> = self.cells.iter().map(|c| c[0] >= SKIP_SIGMA).collect();
        for stride in [1, n, n * n] {
            for k in 0..flags.len() - stride {
                flags[k] = flags[k] || flags[k + stride];
            }
        }
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for (k, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
            let ijk = [k % n, (k / n) % n, k / (n * n)];
            for a in 0..3 {
                lo[a] = lo[a].min(ijk[a]);
                hi[a] = hi[a].max(ijk[a]);
            }
        }
        let bounds = (lo[0] != usize::MAX).then(|| {
            // Clamped lookups map everything beyond the outer centers onto
            // the edge cells, so an edge cell opens the box to infinity.
            let h = self.cell_size();
            let mut lower = [0.0; 3];
            let mut upper = [0.0; 3];
            for a in 0..3 {
                lower[a] = if lo[a] == 0 { f64::NEG_INFINITY } else { (lo[a] as f64 + 0.5) * h - self.extent };
                upper[a] = if hi[a] >= n - 2 { f64::INFINITY } else { (hi[a] as f64 + 1.5) * h - self.extent };
            }
            (lower, upper)
        });
        Occupancy { flags, bounds }
    }

    /// Trilinear `[sigma, r, g, b]` at a world point.
    pub fn sample(&self, p: &Point3<f64>) -> [f64; 4] {
        let (idx, wts) = self.locate(p);
        let mut out = [0.0; 4];
        for (&i, &w) in idx.iter().zip(&wts) {
            let c = &self.cells[i];
            for k in 0..4 {
                out[k] += w * c[k];
            }
        }
        out
    }

    /// Ray parameter interval inside the bounding cube, if any.
    pub fn clip_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a].abs() > self.extent {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((-self.extent - origin[a]) * inv, (self.extent - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Learnable field: raw parameters behind softplus density and sigmoid color.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    pub resolution: usize,
    pub extent: f64,
    /// sigma = density_scale * softplus(raw).
    pub density_scale: f64,
    pub raw_density: Vec<f64>,
    pub raw_color: Vec<f64>,
}

impl VoxelField {
    pub fn new(resolution: usize, extent: f64, density_scale: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(LabError::Domain(format!("field resolution {resolution} < 2")));
        }
        if !(extent > 0.0 && density_scale > 0.0) {
            return Err(LabError::Domain("field extent and density scale must be positive".into()));
        }
        let n = resolution.pow(3);
        Ok(Self {
            resolution,
            extent,
            density_scale,
            raw_density: vec![inverse_softplus(0.0); n],
            raw_color: vec![0.0; 3 * n],
        })
    }

    /// Matches a target grid up to the parameterization floor.
    pub fn from_grid(grid: &DenseGrid, density_scale: f64) -> Result<Self> {
        let mut field = Self::new(grid.resolution, grid.extent, density_scale)?;
        for (k, cell) in grid.cells.iter().enumerate() {
            field.raw_density[k] = inverse_softplus(cell[0] / density_scale);
            for ch in 0..3 {
                field.raw_color[3 * k + ch] = logit(cell[1 + ch]);
            }
        }
        Ok(field)
    }

    pub fn num_cells(&self) -> usize {
        self.raw_density.len()
    }

    pub fn num_params(&self) -> usize {
        4 * self.num_cells()
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.density_scale * softplus(self.raw_density[k])
    }

    pub fn activate(&self) -> DenseGrid {
        let cells = (0..self.num_cells())
            .map(|k| {
                let c = &self.raw_color[3 * k..3 * k + 3];
                [self.sigma(k), sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])]
            })
            .collect();
        DenseGrid {
            resolution: self.resolution,
            extent: self.extent,
            cells,
        }
    }

    /// Re-activates the grid entries behind the given flat parameter
    /// indices, leaving `grid` equal to `self.activate()` when every changed
    /// parameter is listed.
    pub fn refresh(&self, grid: &mut DenseGrid, params: &[usize]) {
        let n = self.num_cells();
        for &k in params {
            if k < n {
                grid.cells[k][0] = self.sigma(k);
            } else {
                let j = k - n;
                grid.cells[j / 3][1 + j % 3] = sigmoid(self.raw_color[j]);
            }
        }
    }

    /// Flat parameter view: densities first, then interleaved colors.
    pub fn param(&self, k: usize) -> f64 {
        let n = self.num_cells();
        if k < n {
            self.raw_density[k]
        } else {
            self.raw_color[k - n]
        }
    }

    pub fn param_mut(&mut self, k: usize) -> &mut f64 {
        let n = self.num_cells();
        if k < n {
            &mut self.raw_density[k]
        } else {
            &mut self.raw_color[k - n]
        }
    }

    /// Little-endian float32 snapshot: "SDSLAB-FIELD", resolution (u32),
    /// extent (f32), density scale (f32), raw densities, raw colors.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.num_params());
        out.extend_from_slice(FIELD_MAGIC);
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.extent as f32).to_le_bytes());
        out.extend_from_slice(&(self.density_scale as f32).to_le_bytes());
        for v in self.raw_density.iter().chain(&self.raw_color) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |reason: &str| LabError::Format {
            path: path.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 24 || &bytes[..12] != FIELD_MAGIC {
            return Err(bad("missing SDSLAB-FIELD header"));
        }
        let word = |o: usize| -> [u8; 4] { bytes[o..o + 4].try_into().unwrap() };
        let resolution = u32::from_le_bytes(word(12)) as usize;
        let extent = f32::from_le_bytes(word(16)) as f64;
        let scale = f32::from_le_bytes(word(20)) as f64;
        let n = resolution.pow(3);
        if bytes.len() != 24 + 16 * n {
            return Err(bad("payload length does not match resolution"));
        }
        let mut values = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let raw_density = values.by_ref().take(n).collect();
        let raw_color = values.collect();
        let mut field = Self::new(resolution, extent, scale)?;
        field.raw_density = raw_density;
        field.raw_color = raw_color;
        Ok(field)
    }
}

pub const FIELD_MAGIC: &[u8; 12] = b"SDSLAB-FIELD";

/// Gradient in raw parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradient {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGradient {
    pub fn zeros(num_cells: usize) -> Self {
        Self {
            density: vec![0.0; num_cells],
            color: vec![0.0; 3 * num_cells],
        }
    }

    pub fn get(&self, k: usize) -> f64 {
        let n = self.density.len();
        if k < n {
            self.density[k]
        } else {
            self.color[k - n]
        }
    }

    pub fn add_scaled(&mut self, other: &FieldGradient, scale: f64) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += scale * b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += scale * b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.density.iter().chain(&self.color)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }
}

/// Gradient with respect to activated `[sigma, r, g, b]` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub cells: Vec<[f64; 4]>,
}

impl GridGradient {
    /// As [`Self::to_field_gradient`], reading the activation derivatives
    /// off `grid = field.activate()` instead of re-evaluating them.
    pub fn to_field_gradient_with(&self, field: &VoxelField, grid: &DenseGrid) -> FieldGradient {
        let n = field.num_cells();
        let mut out = FieldGradient::zeros(n);
        let inv_scale = 1.0 / field.density_scale;
        for k in 0..n {
            let g = &self.cells[k];
            let a = &grid.cells[k];
            if g[0] != 0.0 {
                // sigmoid(raw) = 1 - exp(-softplus(raw)).
                out.density[k] = g[0] * field.density_scale * -(-a[0] * inv_scale).exp_m1();
            }
            for ch in 0..3 {
                let c = a[1 + ch];
                out.color[3 * k + ch] = g[1 + ch] * c * (1.0 - c);
            }
        }
        out
    }

    /// Chains through softplus / sigmoid into raw parameter space.
    pub fn to_field_gradient(&self, field: &VoxelField) -> FieldGradient {
        let n = field.num_cells();
        let mut out = FieldGradient::zeros(n);
        for k in 0..n {
            let g = &self.cells[k];
            out.density[k] = g[0] * field.density_scale * sigmoid(field.raw_density[k]);
            for ch in 0..3 {
                let s = sigmoid(field.raw_color[3 * k + ch]);
                out.color[3 * k + ch] = g[1 + ch] * s * (1.0 - s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub n_samples: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { n_samples: 64 }
    }
}

/// Per-ray stratification offsets in [0, 1); `None` samples stratum midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Jitter(pub Vec<f64>);

impl Jitter {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n_rays: usize) -> Self {
        Self((0..n_rays).map(|_| rng.random::<f64>()).collect())
    }

    fn offset(jitter: Option<&Jitter>, ray: usize) -> f64 {
        jitter.map_or(0.5, |j| j.0[ray])
    }
}

/// Outputs of a single ray, before background compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct RayOutput {
    pub weights: Vec<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth_mean: f64,
    pub depth_var: f64,
    /// Transmittance past the last sample.
    pub transmittance: f64,
}

struct Occupancy {
    flags: Vec<bool>,
    bounds: Option<([f64; 3], [f64; 3])>,
}

impl Occupancy {
    /// Ray parameter interval inside the occupied box.
    fn span(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let (lower, upper) = self.bounds?;
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < lower[a] || origin[a] > upper[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((lower[a] - origin[a]) * inv, (upper[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 >= t0).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    /// Position along the ray, 0..n_samples.
    i: usize,
    t: f64,
    value: [f64; 4],
    alpha: f64,
    /// Lower interpolation corner and fractional offsets.
    base: usize,
    frac: [f64; 3],
}

/// Fills `samples` along the clipped ray and returns the stride. Empty
/// samples are skipped and marching stops at negligible transmittance.
fn trace(
    grid: &DenseGrid,
    occupancy: &Occupancy,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    n_samples: usize,
    offset: f64,
    samples: &mut Vec<Sample>,
) -> Option<f64> {
    samples.clear();
    let (t0, t1) = grid.clip_ray(origin, dir)?;
    let delta = (t1 - t0) / n_samples as f64;
    let Some((ta, tb)) = occupancy.span(origin, dir) else {
        return Some(delta);
    };
    // One spare sample on each side absorbs rounding at the box faces.
    let first = ((ta - t0) / delta - offset).floor() - 1.0;
    let last = ((tb - t0) / delta - offset).ceil() + 2.0;
    let first = first.clamp(0.0, n_samples as f64) as usize;
    let last = last.clamp(0.0, n_samples as f64) as usize;
    let mut trans = 1.0;
    for i in first..last {
        let t = t0 + (i as f64 + offset) * delta;
        let p = origin + dir * t;
        let (base, frac) = grid.base(&p);
        if !occupancy.flags[base] {
            continue;
        }
        let (idx, wts) = grid.corners(base, frac);
        let mut value = [0.0; 4];
        for (&c, &w) in idx.iter().zip(&wts) {
            let cell = &grid.cells[c];
            value[0] += w * cell[0];
            value[1] += w * cell[1];
            value[2] += w * cell[2];
            value[3] += w * cell[3];
        }
        let alpha = -(-value[0] * delta).exp_m1();
        samples.push(Sample {
            i,
            t,
            value,
            alpha,
            base,
            frac,
        });
        trans *= 1.0 - alpha;
        if trans < MIN_TRANSMITTANCE {
            break;
        }
    }
    Some(delta)
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    opacity: f64,
    color: [f64; 3],
    first: f64,
    second: f64,
    transmittance: f64,
}

impl Moments {
    fn depth_stats(&self) -> (f64, f64) {
        let o = self.opacity.max(DEPTH_EPS);
        let mean = self.first / o;
        (mean, self.second / o - mean * mean)
    }
}

fn composite(samples: &[Sample], mut weights: Option<&mut [f64]>) -> Moments {
    let mut m = Moments {
        transmittance: 1.0,
        ..Default::default()
    };
    for s in samples {
        let alpha = s.alpha;
        let w = m.transmittance * alpha;
        m.opacity += w;
        m.color[0] += w * s.value[1];
        m.color[1] += w * s.value[2];
        m.color[2] += w * s.value[3];
        m.first += w * s.t;
        m.second += w * s.t * s.t;
        m.transmittance *= 1.0 - alpha;
        if let Some(ws) = weights.as_deref_mut() {
            ws[s.i] = w;
        }
    }
    m
}

/// Marches one ray through an activated grid.
pub fn march_ray(
    grid: &DenseGrid,
    origin: &Point3<f64>,
    direction: &Vector3<f64>,
    n_samples: usize,
    offset: f64,
) -> Result<RayOutput> {
    if (direction.norm() - 1.0).abs() > 1e-9 {
        return Err(LabError::Domain(format!(
            "ray direction has norm {}, expected 1",
            direction.norm()
        )));
    }
    if n_samples < 2 {
        return Err(LabError::Domain(format!("n_samples = {n_samples} < 2")));
    }
    let mut samples = Vec::with_capacity(n_samples);
    let occupancy = grid.occupancy();
    if trace(grid, &occupancy, origin, direction, n_samples, offset, &mut samples).is_none() {
        return Ok(RayOutput {
            weights: vec![0.0; n_samples],
            opacity: 0.0,
            color: [0.0; 3],
            depth_mean: 0.0,
            depth_var: 0.0,
            transmittance: 1.0,
        });
    }
    let mut weights = vec![0.0; n_samples];
    let m = composite(&samples, Some(&mut weights));
    let (depth_mean, depth_var) = m.depth_stats();
    Ok(RayOutput {
        weights,
        opacity: m.opacity,
        color: m.color,
        depth_mean,
        depth_var,
        transmittance: m.transmittance,
    })
}

/// Per-pixel render products of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Composited over a white background.
    pub color_image: RgbImage,
    pub opacity_map: GrayImage,
    pub normalized_opacity: GrayImage,
    pub depth_map: GrayImage,
    pub depth_variance: GrayImage,
}

/// Adjoint (upstream gradient) with the shape of a [`RenderOutput`]. The
/// opacity adjoint is taken on the raw, pre-normalization map; use
/// [`normalized_opacity_backward`] to pull back through min-max scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderAdjoint {
    pub color: RgbImage,
    pub opacity: GrayImage,
    pub depth: GrayImage,
    pub depth_var: GrayImage,
}

impl RenderAdjoint {
    pub fn zeros(size: usize) -> Self {
        Self {
            color: RgbImage::new(size),
            opacity: GrayImage::new(size),
            depth: GrayImage::new(size),
            depth_var: GrayImage::new(size),
        }
    }

    pub fn size(&self) -> usize {
        self.opacity.size
    }

    pub fn add_scaled(&mut self, other: &RenderAdjoint, scale: f64) {
        let pairs = [
            (&mut self.color.data, &other.color.data),
            (&mut self.opacity.data, &other.opacity.data),
            (&mut self.depth.data, &other.depth.data),
            (&mut self.depth_var.data, &other.depth_var.data),
        ];
        for (dst, src) in pairs {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    fn check(&self, size: usize) -> Result<()> {
        let ok = |len: usize, want: usize, what: &'static str| {
            if len == want {
                Ok(())
            } else {
                Err(LabError::shape(what, want, len))
            }
        };
        let px = size * size;
        ok(self.color.data.len(), 3 * px, "color adjoint")?;
        ok(self.opacity.data.len(), px, "opacity adjoint")?;
        ok(self.depth.data.len(), px, "depth adjoint")?;
        ok(self.depth_var.data.len(), px, "depth variance adjoint")
    }
}

/// (O - min O) / (max O - min O); a constant map maps to zeros.
pub fn min_max_normalize(map: &GrayImage) -> GrayImage {
    let (lo, hi) = min_max(&map.data);
    let range = hi - lo;
    let data = if range > 0.0 {
        map.data.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; map.data.len()]
    };
    GrayImage { size: map.size, data }
}

fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Pulls an adjoint on the normalized map back onto the raw opacity map.
/// The extremes receive the gradient of the normalization constants.
pub fn normalized_opacity_backward(raw: &GrayImage, adjoint: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(&raw.data);
    let range = hi - lo;
    let mut out = vec![0.0; raw.data.len()];
    if range <= 0.0 {
        return out;
    }
    let argmin = raw.data.iter().position(|&v| v == lo).unwrap();
    let argmax = raw.data.iter().position(|&v| v == hi).unwrap();
    let (mut to_min, mut to_max) = (0.0, 0.0);
    for (k, (&a, &o)) in adjoint.iter().zip(&raw.data).enumerate() {
        let normalized = (o - lo) / range;
        out[k] += a / range;
        to_min -= a * (1.0 - normalized) / range;
        to_max -= a * normalized / range;
    }
    out[argmin] += to_min;
    out[argmax] += to_max;
    out
}

pub fn render_view(
    field: &VoxelField,
    camera: &Camera,
    settings: &RenderSettings,
    jitter: Option<&Jitter>,
) -> Result<RenderOutput> {
    render_grid(&field.activate(), camera, settings, jitter)
}

/// Renders an already-activated grid (reference fields carry exact zeros).
pub fn render_grid(
    grid: &DenseGrid,
    camera: &Camera,
    settings: &RenderSettings,
    jitter: Option<&Jitter>,
) -> Result<RenderOutput> {
    let size = camera.image_size();
    check_settings(settings, jitter, size)?;
    let origin = camera.position();
    let occupancy = grid.occupancy();
    let moments: Vec<Moments> = (0..size)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(settings.n_samples),
            |samples, row| {
                (0..size)
                    .map(|col| {
                        let dir = camera.pixel_ray(row, col);
                        let offset = Jitter::offset(jitter, row * size + col);
                        march(grid, &occupancy, &origin, &dir, settings.n_samples, offset, samples).0
                    })
                    .collect::<Vec<_>>()
            },
        )
        .flatten()
        .collect();
    Ok(assemble(size, &moments))
}

fn march(
    grid: &DenseGrid,
    occupancy: &Occupancy,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    n_samples: usize,
    offset: f64,
    samples: &mut Vec<Sample>,
) -> (Moments, Option<f64>) {
    match trace(grid, occupancy, origin, dir, n_samples, offset, samples) {
        Some(delta) => (composite(samples, None), Some(delta)),
        None => (
            Moments {
                transmittance: 1.0,
                ..Default::default()
            },
            None,
        ),
    }
}

/// Samples kept by a forward render so the backward pass need not re-march.
/// Buffers are reused across renders.
#[derive(Debug, Clone, Default)]
pub struct RenderTape {
    size: usize,
    /// Per ray: sample range and stride, `None` when the ray misses.
    rays: Vec<(usize, usize, Option<f64>)>,
    samples: Vec<Sample>,
    moments: Vec<Moments>,
    scratch: Vec<Sample>,
}

/// As [`render_grid`], also recording into `tape` for [`tape_gradients`].
pub fn render_grid_taped(
    grid: &DenseGrid,
    camera: &Camera,
    settings: &RenderSettings,
    jitter: Option<&Jitter>,
    tape: &mut RenderTape,
) -> Result<RenderOutput> {
    let size = camera.image_size();
    check_settings(settings, jitter, size)?;
    let origin = camera.position();
    let occupancy = grid.occupancy();
    tape.size = size;
    tape.rays.clear();
    tape.samples.clear();
    tape.moments.clear();
    for row in 0..size {
        for col in 0..size {
            let dir = camera.pixel_ray(row, col);
            let offset = Jitter::offset(jitter, row * size + col);
            let (m, delta) = march(grid, &occupancy, &origin, &dir, settings.n_samples, offset, &mut tape.scratch);
            let start = tape.samples.len();
            tape.samples.extend_from_slice(&tape.scratch);
            tape.rays.push((start, tape.samples.len(), delta));
            tape.moments.push(m);
        }
    }
    Ok(assemble(size, &tape.moments))
}

fn assemble(size: usize, moments: &[Moments]) -> RenderOutput {
    let mut color = RgbImage::new(size);
    let mut opacity = GrayImage::new(size);
    let mut depth = GrayImage::new(size);
    let mut depth_var = GrayImage::new(size);
    for (k, m) in moments.iter().enumerate() {
        for ch in 0..3 {
            color.data[3 * k + ch] = m.color[ch] + m.transmittance;
        }
        opacity.data[k] = m.opacity;
        let (d, v) = m.depth_stats();
        depth.data[k] = d;
        depth_var.data[k] = v;
    }
    let normalized_opacity = min_max_normalize(&opacity);
    RenderOutput {
        color_image: color,
        opacity_map: opacity,
        normalized_opacity,
        depth_map: depth,
        depth_variance: depth_var,
    }
}

fn check_settings(settings: &RenderSettings, jitter: Option<&Jitter>, size: usize) -> Result<()> {
    if settings.n_samples < 2 {
        return Err(LabError::Domain(format!("n_samples = {} < 2", settings.n_samples)));
    }
    if let Some(j) = jitter {
        if j.0.len() != size * size {
            return Err(LabError::shape("jitter", size * size, j.0.len()));
        }
    }
    Ok(())
}

/// Reverse-mode gradient of `<adjoint, render outputs>` with respect to the
/// activated grid values.
pub fn render_grid_gradients(
    grid: &DenseGrid,
    camera: &Camera,
    settings: &RenderSettings,
    jitter: Option<&Jitter>,
    adjoint: &RenderAdjoint,
) -> Result<GridGradient> {
    let mut tape = RenderTape::default();
    render_grid_taped(grid, camera, settings, jitter, &mut tape)?;
    tape_gradients(grid, &tape, adjoint)
}

/// Backward pass over a forward render of `grid` recorded in `tape`.
pub fn tape_gradients(grid: &DenseGrid, tape: &RenderTape, adjoint: &RenderAdjoint) -> Result<GridGradient> {
    let size = tape.size;
    if adjoint.size() != size {
        return Err(LabError::shape("render adjoint size", size, adjoint.size()));
    }
    adjoint.check(size)?;
    let mut grad = vec![[0.0f64; 4]; grid.cells.len()];
    let mut buf = Vec::new();

    for k in 0..size * size {
        let a_opacity = adjoint.opacity.data[k];
        let a_color = [
            adjoint.color.data[3 * k],
            adjoint.color.data[3 * k + 1],
            adjoint.color.data[3 * k + 2],
        ];
        let a_depth = adjoint.depth.data[k];
        let a_var = adjoint.depth_var.data[k];
        if a_opacity == 0.0 && a_depth == 0.0 && a_var == 0.0 && a_color == [0.0; 3] {
            continue;
        }
        let (start, end, delta) = tape.rays[k];
        let Some(delta) = delta else {
            continue;
        };
        let samples = &tape.samples[start..end];
        let m = &tape.moments[k];

        // Depth statistics: D = A / O', V = B / O' - D^2 with O' = max(O, eps).
        let o_bar = m.opacity.max(DEPTH_EPS);
        let (d, _) = m.depth_stats();
        let adj_first = a_depth / o_bar - 2.0 * a_var * d / o_bar;
        let adj_second = a_var / o_bar;
        let mut adj_opacity = a_opacity;
        if m.opacity > DEPTH_EPS {
            adj_opacity += -a_depth * m.first / (o_bar * o_bar)
                + a_var * (2.0 * d * m.first - m.second) / (o_bar * o_bar);
        }
        // Background term: color += T_final * (1, 1, 1).
        let adj_background = a_color[0] + a_color[1] + a_color[2];

        // Weights w_i, transmittance after each sample T_{i+1}, and the
        // adjoint q_i of each weight; then suffix sums of w_i q_i.
        let n = samples.len();
        if buf.len() < 4 * n {
            buf.resize(4 * n, 0.0);
        }
        let (w, rest) = buf.split_at_mut(n);
        let (t_after, rest) = rest.split_at_mut(n);
        let (q, rest) = rest.split_at_mut(n);
        let sigma_grads = &mut rest[..n];
        let mut trans = 1.0;
        for (i, s) in samples.iter().enumerate() {
            let alpha = s.alpha;
            w[i] = trans * alpha;
            trans *= 1.0 - alpha;
            t_after[i] = trans;
            q[i] = adj_opacity
                + adj_first * s.t
                + adj_second * s.t * s.t
                + a_color[0] * s.value[1]
                + a_color[1] * s.value[2]
                + a_color[2] * s.value[3];
        }
        let t_final = trans;
        let mut suffix = 0.0;
        for i in (0..n).rev() {
            sigma_grads[i] = delta * (t_after[i] * q[i] - suffix - t_final * adj_background);
            suffix += w[i] * q[i];
        }
        for (i, s) in samples.iter().enumerate() {
            let gs = sigma_grads[i];
            let gc = [w[i] * a_color[0], w[i] * a_color[1], w[i] * a_color[2]];
            let (idx, wts) = grid.corners(s.base, s.frac);
            for (&c, &wt) in idx.iter().zip(&wts) {
                let g = &mut grad[c];
                g[0] += wt * gs;
                g[1] += wt * gc[0];
                g[2] += wt * gc[1];
                g[3] += wt * gc[2];
            }
        }
    }
    Ok(GridGradient { cells: grad })
}

/// Reverse-mode gradient of `<adjoint, render outputs>` in raw parameter space.
pub fn render_gradients(
    field: &VoxelField,
    camera: &Camera,
    settings: &RenderSettings,
    jitter: Option<&Jitter>,
    adjoint: &RenderAdjoint,
) -> Result<FieldGradient> {
    let grid = field.activate();
    Ok(render_grid_gradients(&grid, camera, settings, jitter, adjoint)?.to_field_gradient(field))
}

/// Lambert shading of the density-gradient normal at the expected
/// termination point, for pixels with opacity above one half.
pub fn normal_snapshot(grid: &DenseGrid, camera: &Camera, render: &RenderOutput) -> RgbImage {
    let size = camera.image_size();
    let mut img = RgbImage::filled(size, [1.0; 3]);
    let h = grid.cell_size();
    let light = Vector3::new(0.3, 0.6, 1.0).normalize();
    for row in 0..size {
        for col in 0..size {
            let k = row * size + col;
            if render.opacity_map.data[k] <= 0.5 {
                continue;
            }
            let dir = camera.pixel_ray(row, col);
            let p = camera.position() + dir * render.depth_map.data[k];
            let mut grad = Vector3::zeros();
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                grad[a] = grid.sample(&(p + e))[0] - grid.sample(&(p - e))[0];
            }
            let normal = if grad.norm() > 0.0 { -grad.normalize() } else { -dir };
            let normal = if normal.dot(&dir) > 0.0 { -normal } else { normal };
            let shade = 0.15 + 0.85 * normal.dot(&light).max(0.0);
            let rgb = [
                0.5 + 0.5 * normal.x,
                0.5 + 0.5 * normal.y,
                0.5 + 0.5 * normal.z,
            ];
            for ch in 0..3 {
                img.data[3 * k + ch] = shade * rgb[ch];
            }
        }
    }
    img
}
