//! Real, symmetric, even-order spherical harmonics and the per-voxel least
//! squares projection of b0-normalized signals onto them.
//!
//! Basis functions are ordered `(l, m)` with `l = 0, 2, ...` and
//! `m = -l..=l`:
//!
//! * `m = 0`: `K_l^0 P_l^0(cos θ)`
//! * `m < 0`: `√2 K_l^|m| P_l^|m|(cos θ) sin(|m| φ)`
//! * `m > 0`: `√2 K_l^m P_l^m(cos θ) cos(m φ)`
//!
//! with `K_l^m = sqrt((2l+1)/(4π) (l-m)!/(l+m)!)` and no Condon-Shortley
//! phase. The basis is orthonormal over the sphere.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::qspace::GradientTable;
use crate::volume::{BinaryMask, Volume};

const UNIT_TOL: f64 = 1e-4;
const TRUNCATION: f64 = 1e-8;
const BLOCK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShBasisSpec {
    l_max: usize,
}

impl Default for ShBasisSpec {
    fn default() -> Self {
        ShBasisSpec { l_max: 2 }
    }
}

impl ShBasisSpec {
    pub fn new(l_max: usize) -> Result<Self> {
        if l_max % 2 != 0 {
            return Err(Error::Config(format!("SH order {l_max} must be even")));
        }
        Ok(ShBasisSpec { l_max })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn num_coeffs(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 2) / 2
    }

    /// `(l, m)` for every coefficient, in channel order.
    pub fn indices(&self) -> Vec<(usize, i32)> {
        (0..=self.l_max)
            .step_by(2)
            .flat_map(|l| (-(l as i32)..=l as i32).map(move |m| (l, m)))
            .collect()
    }
}

/// Associated Legendre `P_l^m(x)` for `m >= 0`, without the `(-1)^m` phase.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= fact * s;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pm2 = pmm;
    for ll in m + 2..=l {
        let p = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pm2) / (ll - m) as f64;
        pm2 = pm1;
        pm1 = p;
    }
    pm1
}

fn norm_const(l: usize, m: usize) -> f64 {
    // (l-m)!/(l+m)! as a running product
    let mut ratio = 1.0;
    for t in (l - m + 1)..=(l + m) {
        ratio /= t as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

pub fn sh_basis_row(dir: [f64; 3], spec: &ShBasisSpec) -> Result<Vec<f64>> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidDirection(format!("|g| = {n}")));
    }
    let cos_t = (dir[2] / n).clamp(-1.0, 1.0);
    let phi = dir[1].atan2(dir[0]);
    Ok(spec
        .indices()
        .into_iter()
        .map(|(l, m)| {
            let am = m.unsigned_abs() as usize;
            let base = norm_const(l, am) * legendre(l, am, cos_t);
            match m.cmp(&0) {
                std::cmp::Ordering::Equal => base,
                std::cmp::Ordering::Less => {
                    std::f64::consts::SQRT_2 * base * (am as f64 * phi).sin()
                }
                std::cmp::Ordering::Greater => {
                    std::f64::consts::SQRT_2 * base * (am as f64 * phi).cos()
                }
            }
        })
        .collect())
}

/// `|dirs| x num_coeffs` design matrix.
pub fn design_matrix(dirs: &[[f64; 3]], spec: &ShBasisSpec) -> Result<DMatrix<f64>> {
    let n = spec.num_coeffs();
    let mut b = DMatrix::zeros(dirs.len(), n);
    for (r, &d) in dirs.iter().enumerate() {
        for (c, v) in sh_basis_row(d, spec)?.into_iter().enumerate() {
            b[(r, c)] = v;
        }
    }
    Ok(b)
}

/// A coefficient volume whose channels follow [`ShBasisSpec::indices`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoeffMap {
    spec: ShBasisSpec,
    volume: Volume,
}

impl ShCoeffMap {
    pub fn new(volume: Volume, spec: ShBasisSpec) -> Result<Self> {
        if volume.channels() != spec.num_coeffs() {
            return Err(Error::Shape(format!(
                "{} channels for {} SH coefficients",
                volume.channels(),
                spec.num_coeffs()
            )));
        }
        Ok(ShCoeffMap { spec, volume })
    }

    pub fn spec(&self) -> &ShBasisSpec {
        &self.spec
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn into_volume(self) -> Volume {
        self.volume
    }
}

/// Pseudo-inverse of the design matrix for one direction set, factorized
/// once and applied to every voxel.
///
/// Rows are put into a canonical (sorted) order before factorizing, so the
/// result does not depend on the order measurements are supplied in.
#[derive(Clone, Debug)]
pub struct ShFitter {
    spec: ShBasisSpec,
    /// `order[j]` = input channel used as the j-th canonical row.
    order: Vec<usize>,
    /// `num_coeffs x m`, row major, columns in canonical order.
    pinv: Vec<f64>,
    rank: usize,
}

impl ShFitter {
    pub fn new(dirs: &[[f64; 3]], spec: ShBasisSpec) -> Result<Self> {
        let nc = spec.num_coeffs();
        if dirs.len() < nc {
            return Err(Error::TooFewDirections {
                needed: nc,
                available: dirs.len(),
            });
        }
        let mut order: Vec<usize> = (0..dirs.len()).collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (dirs[a], dirs[b]);
            da[0]
                .total_cmp(&db[0])
                .then(da[1].total_cmp(&db[1]))
                .then(da[2].total_cmp(&db[2]))
                .then(a.cmp(&b))
        });
        let sorted: Vec<[f64; 3]> = order.iter().map(|&i| dirs[i]).collect();
        let b = design_matrix(&sorted, &spec)?;
        let svd = b.svd(true, true);
        let u = svd.u.as_ref().expect("U requested");
        let v_t = svd.v_t.as_ref().expect("V^T requested");
        let sigma = &svd.singular_values;
        let cutoff = TRUNCATION * sigma.max();
        let m = dirs.len();
        let mut pinv = vec![0.0; nc * m];
        let mut rank = 0;
        for (s, &sv) in sigma.iter().enumerate() {
            if !(sv > cutoff) {
                continue;
            }
            rank += 1;
            let inv = 1.0 / sv;
            for c in 0..nc {
                let vc = v_t[(s, c)] * inv;
                for j in 0..m {
                    pinv[c * m + j] += vc * u[(j, s)];
                }
            }
        }
        Ok(ShFitter {
            spec,
            order,
            pinv,
            rank,
        })
    }

    pub fn spec(&self) -> &ShBasisSpec {
        &self.spec
    }

    pub fn num_measurements(&self) -> usize {
        self.order.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Least-squares coefficients for one voxel's signal (input order).
    pub fn fit_voxel(&self, signal: &[f64]) -> Vec<f64> {
        let m = self.order.len();
        let nc = self.spec.num_coeffs();
        let mut out = vec![0.0; nc];
        for (j, &src) in self.order.iter().enumerate() {
            let s = signal[src];
            for c in 0..nc {
                out[c] += self.pinv[c * m + j] * s;
            }
        }
        out
    }

    pub fn fit(&self, normalized: &Volume) -> Result<ShCoeffMap> {
        let m = self.order.len();
        if normalized.channels() != m {
            return Err(Error::Shape(format!(
                "{} signal channels for {m} directions",
                normalized.channels()
            )));
        }
        let nc = self.spec.num_coeffs();
        let n = normalized.grid().num_voxels();
        let blocks: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let start = b * BLOCK;
                let len = BLOCK.min(n - start);
                let mut acc = vec![0.0f64; nc * len];
                for (j, &src) in self.order.iter().enumerate() {
                    let s = &normalized.channel(src)[start..start + len];
                    for c in 0..nc {
                        let w = self.pinv[c * m + j];
                        let row = &mut acc[c * len..(c + 1) * len];
                        for (a, &x) in row.iter_mut().zip(s) {
                            *a += w * x as f64;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut data = vec![0.0f32; nc * n];
        for (b, acc) in blocks.iter().enumerate() {
            let start = b * BLOCK;
            let len = BLOCK.min(n - start);
            for c in 0..nc {
                for v in 0..len {
                    data[c * n + start + v] = acc[c * len + v] as f32;
                }
            }
        }
        ShCoeffMap::new(Volume::new(*normalized.grid(), nc, data)?, self.spec)
    }
}

/// Per-voxel least-squares SH fit; one SVD shared by every voxel.
pub fn fit_sh(normalized: &Volume, dirs: &[[f64; 3]], spec: ShBasisSpec) -> Result<ShCoeffMap> {
    ShFitter::new(dirs, spec)?.fit(normalized)
}

/// Evaluates `B c` for every voxel.
pub fn sh_reconstruct(coeffs: &ShCoeffMap, dirs: &[[f64; 3]]) -> Result<Volume> {
    let b = design_matrix(dirs, coeffs.spec())?;
    let vol = coeffs.volume();
    let n = vol.grid().num_voxels();
    let nc = coeffs.spec().num_coeffs();
    let mut data = vec![0.0f32; dirs.len() * n];
    data.par_chunks_mut(n).enumerate().for_each(|(r, out)| {
        for (v, o) in out.iter_mut().enumerate() {
            let mut s = 0.0f64;
            for c in 0..nc {
                s += b[(r, c)] * vol.channel(c)[v] as f64;
            }
            *o = s as f32;
        }
    });
    Volume::new(*vol.grid(), dirs.len(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeOptions {
    /// Floor for the b0 denominator; `None` means 1e-3 of the b0 99th percentile.
    pub eps: Option<f32>,
    pub clamp_max: f32,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions {
            eps: None,
            clamp_max: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormalizedDwi {
    pub signal: Volume,
    /// Voxels whose b0 fell below `eps`; their signal is zero.
    pub background: BinaryMask,
}

pub(crate) fn percentile(values: &mut [f32], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    values[lo] as f64 * (1.0 - t) + values[hi] as f64 * t
}

/// `dwi / max(b0, eps)` clamped to `[0, clamp_max]`.
pub fn b0_normalize(dwi: &Volume, b0: &Volume, opts: NormalizeOptions) -> Result<NormalizedDwi> {
    if !dwi.grid().same_shape(b0.grid()) || b0.channels() != 1 {
        return Err(Error::GridMismatch(format!(
            "dwi {:?} vs b0 {:?} x {}",
            dwi.grid().dims,
            b0.grid().dims,
            b0.channels()
        )));
    }
    let eps = match opts.eps {
        Some(e) => e,
        None => {
            let p99 = percentile(&mut b0.data().to_vec(), 0.99) as f32;
            (1e-3 * p99).max(f32::MIN_POSITIVE)
        }
    };
    let b0d = b0.data();
    let background: Vec<bool> = b0d.iter().map(|&b| b < eps).collect();
    let n = dwi.grid().num_voxels();
    let mut data = dwi.data().to_vec();
    data.par_chunks_mut(n).for_each(|ch| {
        for (v, x) in ch.iter_mut().enumerate() {
            *x = if background[v] {
                0.0
            } else {
                (*x / b0d[v].max(eps)).clamp(0.0, opts.clamp_max)
            };
        }
    });
    Ok(NormalizedDwi {
        signal: Volume::new(*dwi.grid(), dwi.channels(), data)?,
        background: BinaryMask::new(*dwi.grid(), background)?,
    })
}

/// Mean of the table's b0 channels.
pub fn extract_b0(dwi: &Volume, table: &GradientTable) -> Result<Volume> {
    if dwi.channels() != table.len() {
        return Err(Error::Shape(format!(
            "{} dwi channels for a {}-entry gradient table",
            dwi.channels(),
            table.len()
        )));
    }
    let b0s = table.b0_indices();
    if b0s.is_empty() {
        return Err(Error::GradientFormat("table has no b0 entry".into()));
    }
    let n = dwi.grid().num_voxels();
    let mut acc = vec![0.0f64; n];
    for &c in &b0s {
        for (a, &x) in acc.iter_mut().zip(dwi.channel(c)) {
            *a += x as f64;
        }
    }
    let k = b0s.len() as f64;
    Volume::new(
        *dwi.grid(),
        1,
        acc.into_iter().map(|a| (a / k) as f32).collect(),
    )
}

/// Fits the SH coefficients of the selected table entries of a normalized
/// full-table signal volume.
pub fn fit_subset(
    normalized: &Volume,
    table: &GradientTable,
    indices: &[usize],
    spec: ShBasisSpec,
) -> Result<ShCoeffMap> {
    let signal = normalized.select_channels(indices)?;
    fit_sh(&signal, &table.directions(indices), spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qspace::hemisphere_directions;
    use crate::volume::Grid3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Y00: f64 = 0.28209479177387814;

    #[test]
    fn constant_term_everywhere() {
        let spec = ShBasisSpec::default();
        for d in hemisphere_directions(20) {
            let row = sh_basis_row(d, &spec).unwrap();
            assert_eq!(row.len(), 6);
            assert!((row[0] - Y00).abs() < 1e-15);
        }
    }

    #[test]
    fn z_axis_row() {
        let row = sh_basis_row([0.0, 0.0, 1.0], &ShBasisSpec::default()).unwrap();
        let y20 = (5.0 / (4.0 * std::f64::consts::PI)).sqrt();
        assert!((row[3] - y20).abs() < 1e-15);
        for c in [1, 2, 4, 5] {
            assert!(row[c].abs() < 1e-15);
        }
    }

    #[test]
    fn antipodal_rows_match() {
        let spec = ShBasisSpec::new(4).unwrap();
        for d in hemisphere_directions(15) {
            let a = sh_basis_row(d, &spec).unwrap();
            let b = sh_basis_row([-d[0], -d[1], -d[2]], &spec).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(sh_basis_row([1.1, 0.0, 0.0], &ShBasisSpec::default()).is_err());
        assert!(ShBasisSpec::new(3).is_err());
        assert_eq!(ShBasisSpec::new(4).unwrap().num_coeffs(), 15);
    }

    #[test]
    fn normalize_examples() {
        let g = Grid3::new([3, 1, 1], [1.0; 3]).unwrap();
        let dwi = Volume::new(g, 1, vec![500.0, 700.0, 10.0]).unwrap();
        let b0 = Volume::new(g, 1, vec![1000.0, 700.0, 0.0]).unwrap();
        let out = b0_normalize(&dwi, &b0, NormalizeOptions::default()).unwrap();
        assert_eq!(out.signal.data(), &[0.5, 1.0, 0.0]);
        assert_eq!(out.background.data(), &[false, false, true]);

        let other = Volume::zeros(Grid3::cube(2), 1);
        assert!(matches!(
            b0_normalize(&dwi, &other, NormalizeOptions::default()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn fit_recovers_in_model_coefficients() {
        let spec = ShBasisSpec::default();
        let dirs = hemisphere_directions(90);
        let b = design_matrix(&dirs, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid3::new([5, 1, 1], [1.0; 3]).unwrap();
        let truth: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut data = vec![0.0f32; 5 * 90];
        for (v, c) in truth.iter().enumerate() {
            for r in 0..90 {
                let s: f64 = (0..6).map(|k| b[(r, k)] * c[k]).sum();
                data[r * 5 + v] = s as f32;
            }
        }
        let fit = fit_sh(&Volume::new(g, 90, data).unwrap(), &dirs, spec).unwrap();
        for (v, c) in truth.iter().enumerate() {
            for k in 0..6 {
                assert!((fit.volume().channel(k)[v] as f64 - c[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_signal_projects_to_c00() {
        let dirs = hemisphere_directions(90);
        let f = ShFitter::new(&dirs, ShBasisSpec::default()).unwrap();
        let c = f.fit_voxel(&vec![0.7; 90]);
        assert!((c[0] - 0.7 * (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-9);
        for &x in &c[1..] {
            assert!(x.abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_direction_gives_min_norm_fit() {
        let d = [0.6, 0.0, 0.8];
        let dirs = vec![d; 6];
        let spec = ShBasisSpec::default();
        let f = ShFitter::new(&dirs, spec).unwrap();
        assert_eq!(f.rank(), 1);
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.9];
        let got = f.fit_voxel(&s);
        // closed-form minimum-norm solution for a rank-one design r 1^T
        let r = sh_basis_row(d, &spec).unwrap();
        let rr: f64 = r.iter().map(|x| x * x).sum();
        let mean = s.iter().sum::<f64>() / 6.0;
        for k in 0..6 {
            assert!((got[k] - r[k] * mean / rr).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let spec = ShBasisSpec::default();
        let g = Grid3::cube(2);
        let dirs = hemisphere_directions(10);
        let zero = ShCoeffMap::new(Volume::zeros(g, 6), spec).unwrap();
        assert!(sh_reconstruct(&zero, &dirs)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        let mut v = Volume::zeros(g, 6);
        v.channel_mut(0).fill(1.0);
        let c00 = ShCoeffMap::new(v, spec).unwrap();
        for &x in sh_reconstruct(&c00, &dirs).unwrap().data() {
            assert!((x as f64 - Y00).abs() < 1e-7);
        }
    }

    #[test]
    fn extract_b0_averages_b0_channels() {
        let t = GradientTable::single_shell(2, 1000.0, 2);
        let g = Grid3::new([2, 1, 1], [1.0; 3]).unwrap();
        let dwi = Volume::new(g, 4, vec![10.0, 20.0, 30.0, 40.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(extract_b0(&dwi, &t).unwrap().data(), &[20.0, 30.0]);
    }
}
