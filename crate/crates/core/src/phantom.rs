//! Synthetic diffusion-weighted phantoms with known tract labels.
//!
//! Each voxel carries one diffusion tensor and produces the monoexponential
//! signal `S0 exp(-b gᵀ D g)` per gradient entry, plus optional Gaussian
//! noise. Voxels covered by several tracts average the tensors, so the
//! signal stays monoexponential everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qspace::GradientTable;
use crate::volume::{BinaryMask, Grid3, Volume};

/// Tract tensor eigenvalues in mm²/s.
pub const TRACT_EIGENVALUES: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];
pub const BACKGROUND_DIFFUSIVITY: f64 = 0.8e-3;
pub const CSF_DIFFUSIVITY: f64 = 3.0e-3;

const BLOCK: usize = 2048;

/// Symmetric positive semi-definite 3x3 tensor, mm²/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct DiffusionTensor([[f64; 3]; 3]);

impl TryFrom<[[f64; 3]; 3]> for DiffusionTensor {
    type Error = Error;

    fn try_from(m: [[f64; 3]; 3]) -> Result<Self> {
        DiffusionTensor::new(m)
    }
}

impl From<DiffusionTensor> for [[f64; 3]; 3] {
    fn from(d: DiffusionTensor) -> Self {
        d.0
    }
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 0.0).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl DiffusionTensor {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let scale = m.iter().flatten().fold(0.0f64, |a, &x| a.max(x.abs()));
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite tensor entry".into()));
        }
        for r in 0..3 {
            for c in r + 1..3 {
                if (m[r][c] - m[c][r]).abs() > 1e-12 * scale.max(1e-30) {
                    return Err(Error::Domain(format!("tensor not symmetric at ({r},{c})")));
                }
            }
        }
        let eig = nalgebra::Matrix3::from_fn(|r, c| m[r][c]).symmetric_eigenvalues();
        if eig.min() < -1e-12 * scale.max(1e-30) {
            return Err(Error::Domain(format!(
                "tensor not positive semi-definite (eigenvalue {})",
                eig.min()
            )));
        }
        Ok(DiffusionTensor(m))
    }

    pub fn isotropic(d: f64) -> Self {
        DiffusionTensor([[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]])
    }

    /// Tensor with eigenvalues `lambda` whose first eigenvector is `principal`.
    /// The second and third eigenvectors complete a right-handed frame.
    pub fn from_eigen(lambda: [f64; 3], principal: [f64; 3]) -> Result<Self> {
        let e1 = normalize(principal)
            .ok_or_else(|| Error::InvalidDirection("zero principal axis".into()))?;
        let helper = if e1[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let e2 = normalize(cross(e1, helper)).expect("helper not parallel");
        let e3 = cross(e1, e2);
        let frame = [e1, e2, e3];
        let mut m = [[0.0; 3]; 3];
        for (l, e) in lambda.iter().zip(frame) {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += l * e[r] * e[c];
                }
            }
        }
        DiffusionTensor::new(m)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.0
    }

    /// `gᵀ D g`.
    pub fn quadratic(&self, g: [f64; 3]) -> f64 {
        let m = &self.0;
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += g[r] * m[r][c] * g[c];
            }
        }
        s
    }

    /// `R D Rᵀ` for a rotation whose columns are `cols`.
    fn rotated(&self, cols: [[f64; 3]; 3]) -> Self {
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        s += cols[a][r] * self.0[a][b] * cols[b][c];
                    }
                }
                out[r][c] = s;
            }
        }
        DiffusionTensor(out)
    }

    fn mean(list: &[DiffusionTensor]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for d in list {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += d.0[r][c];
                }
            }
        }
        let k = list.len() as f64;
        DiffusionTensor(m.map(|row| row.map(|x| x / k)))
    }
}

/// Stejskal-Tanner monoexponential signal `S0 exp(-b gᵀ D g)`.
pub fn tensor_signal(d: &DiffusionTensor, b: f64, g: [f64; 3], s0: f64) -> f64 {
    s0 * (-b * d.quadratic(g)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }

    fn unit(self) -> [f64; 3] {
        let mut u = [0.0; 3];
        u[self.index()] = 1.0;
        u
    }
}

/// Tract geometry in voxel coordinates (voxel centers at integer positions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Straight cylinder parallel to `axis` through `center`; the tensor is
    /// used as given.
    Tube {
        axis: Axis,
        center: [f64; 3],
        radius: f64,
        /// Range along `axis`; the whole grid when absent.
        #[serde(default)]
        extent: Option<[f64; 2]>,
    },
    /// Section of a torus lying in the plane normal to `normal`. The tensor
    /// is given in the local (tangent, radial, normal) frame and rotated per
    /// voxel.
    Arc {
        center: [f64; 3],
        normal: Axis,
        major_radius: f64,
        minor_radius: f64,
        /// Angular range in degrees, measured in the plane.
        #[serde(default = "full_turn")]
        degrees: [f64; 2],
    },
}

fn full_turn() -> [f64; 2] {
    [0.0, 360.0]
}

fn plane_axes(normal: Axis) -> (usize, usize) {
    match normal {
        Axis::X => (1, 2),
        Axis::Y => (2, 0),
        Axis::Z => (0, 1),
    }
}

impl Shape {
    /// Local frame (columns) at `p` when `p` is inside, else `None`.
    fn frame_at(&self, p: [f64; 3]) -> Option<Option<[[f64; 3]; 3]>> {
        match *self {
            Shape::Tube {
                axis,
                center,
                radius,
                extent,
            } => {
                let a = axis.index();
                let mut d2 = 0.0;
                for c in (0..3).filter(|&c| c != a) {
                    d2 += (p[c] - center[c]).powi(2);
                }
                let along = extent.is_none_or(|[lo, hi]| p[a] >= lo && p[a] <= hi);
                (d2 <= radius * radius && along).then_some(None)
            }
            Shape::Arc {
                center,
                normal,
                major_radius,
                minor_radius,
                degrees,
            } => {
                let (u, v) = plane_axes(normal);
                let n = normal.index();
                let wu = p[u] - center[u];
                let wv = p[v] - center[v];
                let h = p[n] - center[n];
                let rho = (wu * wu + wv * wv).sqrt();
                if (rho - major_radius).powi(2) + h * h > minor_radius * minor_radius || rho == 0.0
                {
                    return None;
                }
                let angle = wv.atan2(wu).to_degrees().rem_euclid(360.0);
                let [lo, hi] = degrees;
                let inside = if hi - lo >= 360.0 {
                    true
                } else {
                    let rel = (angle - lo).rem_euclid(360.0);
                    rel <= (hi - lo).rem_euclid(360.0)
                };
                if !inside {
                    return None;
                }
                let mut radial = [0.0; 3];
                radial[u] = wu / rho;
                radial[v] = wv / rho;
                let nrm = normal.unit();
                let tangent = cross(nrm, radial);
                Some(Some([tangent, radial, nrm]))
            }
        }
    }

    fn check_bounds(&self, dims: [usize; 3]) -> Result<()> {
        let lo = -0.5;
        let hi = |a: usize| dims[a] as f64 - 0.5;
        let within = |a: usize, x0: f64, x1: f64| x0 >= lo && x1 <= hi(a);
        let ok = match *self {
            Shape::Tube {
                axis,
                center,
                radius,
                extent,
            } => {
                let a = axis.index();
                radius > 0.0
                    && (0..3)
                        .filter(|&c| c != a)
                        .all(|c| within(c, center[c] - radius, center[c] + radius))
                    && extent.is_none_or(|[s, e]| s <= e && within(a, s, e))
            }
            Shape::Arc {
                center,
                normal,
                major_radius,
                minor_radius,
                ..
            } => {
                let (u, v) = plane_axes(normal);
                let n = normal.index();
                let reach = major_radius + minor_radius;
                minor_radius > 0.0
                    && major_radius > minor_radius
                    && within(u, center[u] - reach, center[u] + reach)
                    && within(v, center[v] - reach, center[v] + reach)
                    && within(n, center[n] - minor_radius, center[n] + minor_radius)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "shape {self:?} outside grid {dims:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractComponent {
    pub label: String,
    pub shape: Shape,
    pub tensor: DiffusionTensor,
}

/// Voxels within `width` of the grid faces that no tract covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderSpec {
    pub width: usize,
    pub tensor: DiffusionTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid3,
    pub tracts: Vec<TractComponent>,
    pub background: DiffusionTensor,
    #[serde(default)]
    pub border: Option<BorderSpec>,
    pub s0: f64,
    /// Noise standard deviation as a fraction of `s0`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Two tubes crossing at the grid center: one along x, one along y.
    pub fn crossing_tubes(size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        let radius = size as f64 / 8.0;
        let tract = |axis: Axis, label: &str| TractComponent {
            label: label.into(),
            shape: Shape::Tube {
                axis,
                center: [c, c, c],
                radius,
                extent: None,
            },
            tensor: DiffusionTensor::from_eigen(TRACT_EIGENVALUES, axis.unit())
                .expect("valid default tensor"),
        };
        PhantomSpec {
            grid: Grid3::cube(size),
            tracts: vec![tract(Axis::X, "tract_x"), tract(Axis::Y, "tract_y")],
            background: DiffusionTensor::isotropic(BACKGROUND_DIFFUSIVITY),
            border: Some(BorderSpec {
                width: 2,
                tensor: DiffusionTensor::isotropic(CSF_DIFFUSIVITY),
            }),
            s0: 1000.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// [`crossing_tubes`](Self::crossing_tubes) with tube positions and radii
    /// jittered deterministically by `variant`, for building populations of
    /// distinct subjects.
    pub fn crossing_tubes_variant(size: usize, variant: u64) -> Self {
        use rand::Rng;
        let mut spec = Self::crossing_tubes(size);
        let mut rng = ChaCha8Rng::seed_from_u64(variant ^ 0x5eed_0f_7ac7);
        let s = size as f64;
        for t in &mut spec.tracts {
            if let Shape::Tube { center, radius, .. } = &mut t.shape {
                *radius = s / 8.0 * rng.random_range(0.8..1.15);
                for c in center.iter_mut() {
                    *c += s * rng.random_range(-0.06..0.06);
                }
            }
        }
        spec.seed = variant;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.s0 > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "s0 must be positive, noise_sigma >= 0".into(),
            ));
        }
        for (i, t) in self.tracts.iter().enumerate() {
            if self.tracts[..i].iter().any(|o| o.label == t.label) {
                return Err(Error::Config(format!("duplicate tract label {}", t.label)));
            }
            t.shape.check_bounds(self.grid.dims)?;
        }
        Ok(())
    }

    /// Tensor and tract membership of voxel `(i, j, k)`.
    pub fn voxel_tensor(&self, i: usize, j: usize, k: usize) -> (DiffusionTensor, Vec<bool>) {
        let p = [i as f64, j as f64, k as f64];
        let mut covering = Vec::new();
        let member: Vec<bool> = self
            .tracts
            .iter()
            .map(|t| match t.shape.frame_at(p) {
                Some(None) => {
                    covering.push(t.tensor);
                    true
                }
                Some(Some(frame)) => {
                    covering.push(t.tensor.rotated(frame));
                    true
                }
                None => false,
            })
            .collect();
        if !covering.is_empty() {
            return (DiffusionTensor::mean(&covering), member);
        }
        if let Some(b) = &self.border {
            let [nx, ny, nz] = self.grid.dims;
            let edge = i
                .min(nx - 1 - i)
                .min(j.min(ny - 1 - j))
                .min(k.min(nz - 1 - k));
            if edge < b.width {
                return (b.tensor, member);
            }
        }
        (self.background, member)
    }
}

#[derive(Clone, Debug)]
pub struct PhantomOutput {
    /// One channel per gradient table entry, in table order.
    pub dwi: Volume,
    /// Mean of the b0 channels.
    pub b0: Volume,
    pub labels: Vec<BinaryMask>,
    pub label_names: Vec<String>,
}

/// Renders the phantom for every entry of `table`. Noise for voxel `v` comes
/// from its own ChaCha stream, so the output does not depend on how voxels
/// are scheduled across threads.
pub fn simulate(spec: &PhantomSpec, table: &GradientTable) -> Result<PhantomOutput> {
    spec.validate()?;
    if table.is_empty() {
        return Err(Error::GradientFormat("empty gradient table".into()));
    }
    let b0s = table.b0_indices();
    if b0s.is_empty() {
        return Err(Error::GradientFormat("table has no b0 entry".into()));
    }
    let grid = spec.grid;
    let n = grid.num_voxels();
    let m = table.len();
    let sigma = spec.noise_sigma * spec.s0;
    let base_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entries = table.entries();
    let ntracts = spec.tracts.len();

    let blocks: Vec<(Vec<f32>, Vec<bool>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let len = BLOCK.min(n - start);
            let mut signal = vec![0.0f32; len * m];
            let mut member = vec![false; len * ntracts];
            for o in 0..len {
                let v = start + o;
                let [i, j, k] = grid.voxel_coords(v).expect("in range");
                let (d, mem) = spec.voxel_tensor(i, j, k);
                member[o * ntracts..(o + 1) * ntracts].copy_from_slice(&mem);
                let mut rng = base_rng.clone();
                rng.set_stream(v as u64);
                for (c, e) in entries.iter().enumerate() {
                    let clean = tensor_signal(&d, e.bval, e.direction, spec.s0);
                    let noise = if sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sigma * z
                    } else {
                        0.0
                    };
                    signal[o * m + c] = (clean + noise) as f32;
                }
            }
            (signal, member)
        })
        .collect();

    let mut dwi = vec![0.0f32; n * m];
    let mut labels = vec![vec![false; n]; ntracts];
    for (b, (signal, member)) in blocks.iter().enumerate() {
        let start = b * BLOCK;
        let len = signal.len() / m;
        for o in 0..len {
            for c in 0..m {
                dwi[c * n + start + o] = signal[o * m + c];
            }
            for t in 0..ntracts {
                labels[t][start + o] = member[o * ntracts + t];
            }
        }
    }
    let dwi = Volume::new(grid, m, dwi)?;
    let b0 = crate::shfit::extract_b0(&dwi, table)?;
    Ok(PhantomOutput {
        dwi,
        b0,
        labels: labels
            .into_iter()
            .map(|l| BinaryMask::new(grid, l))
            .collect::<Result<_>>()?,
        label_names: spec.tracts.iter().map(|t| t.label.clone()).collect(),
    })
}

/// Uncorrected subject motion: each listed channel is translated by its own
/// uniform random offset in `[-max_shift, max_shift)` voxels per axis, with
/// trilinear resampling and clamped edges.
pub fn simulate_motion(
    dwi: &mut Volume,
    channels: &[usize],
    max_shift: f64,
    seed: u64,
) -> Result<()> {
    use rand::Rng;
    if !(max_shift >= 0.0) || !max_shift.is_finite() {
        return Err(Error::Domain(format!("max_shift = {max_shift}")));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= dwi.channels()) {
        return Err(Error::Shape(format!("channel {c} of {}", dwi.channels())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = *dwi.grid();
    let d = g.dims;
    for &c in channels {
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * max_shift);
        let src = dwi.channel(c).to_vec();
        let out = dwi.channel_mut(c);
        out.par_iter_mut().enumerate().for_each(|(v, x)| {
            let [i, j, k] = g.voxel_coords(v).expect("in range");
            let p = [
                i as f64 - shift[0],
                j as f64 - shift[1],
                k as f64 - shift[2],
            ];
            let base: [f64; 3] = std::array::from_fn(|a| p[a].floor());
            let mut acc = 0.0f64;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    let hi = (corner >> a) & 1 == 1;
                    let t = p[a] - base[a];
                    w *= if hi { t } else { 1.0 - t };
                    idx[a] = (base[a] as isize + hi as isize).clamp(0, d[a] as isize - 1) as usize;
                }
                acc += w * src[g.idx(idx[0], idx[1], idx[2])] as f64;
            }
            *x = acc as f32;
        });
    }
    Ok(())
}
