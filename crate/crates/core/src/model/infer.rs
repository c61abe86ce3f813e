use std::borrow::Cow;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PredictorInterface, ReferenceModel};
use crate::error::{Error, Result};
use crate::qspace::{select_subset, GradientTable, SubsetSelection, DEFAULT_SHELL_TOL};
use crate::shfit::{b0_normalize, fit_subset, NormalizeOptions, ShBasisSpec, ShCoeffMap};
use crate::volume::{Grid3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    Uniform,
    /// Separable Hann window, `sin²(π (i + ½) / p)` per axis.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch: usize,
    pub stride: usize,
    pub blend: Blend,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec::with_patch(96)
    }
}

impl PatchSpec {
    pub fn new(patch: usize, stride: usize, blend: Blend) -> Result<Self> {
        let s = PatchSpec {
            patch,
            stride,
            blend,
        };
        s.validate()?;
        Ok(s)
    }

    /// Cosine blending with half-patch stride.
    pub fn with_patch(patch: usize) -> Self {
        PatchSpec {
            patch,
            stride: (patch / 2).max(1),
            blend: Blend::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.stride > self.patch {
            return Err(Error::Config(format!(
                "need 0 < stride <= patch, got stride {} patch {}",
                self.stride, self.patch
            )));
        }
        Ok(())
    }

    fn window(&self) -> Vec<f64> {
        let p = self.patch;
        (0..p)
            .map(|i| match self.blend {
                Blend::Uniform => 1.0,
                Blend::Cosine => (PI * (i as f64 + 0.5) / p as f64).sin().powi(2),
            })
            .collect()
    }
}

/// Patch start positions along one axis of length `n >= p`; the last patch
/// ends flush with the axis.
fn positions(n: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=n - p).step_by(stride).collect();
    if *out.last().unwrap() != n - p {
        out.push(n - p);
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends each axis to at least `min_dims` by mirroring about the last
/// voxel (edge not repeated). The origin is kept.
pub fn reflect_pad(v: &Volume, min_dims: [usize; 3]) -> Result<Volume> {
    let g = v.grid();
    let src = g.dims;
    let dims = [0, 1, 2].map(|a| src[a].max(min_dims[a]));
    let grid = Grid3::with_origin(dims, g.spacing, g.origin)?;
    let n = grid.num_voxels();
    let mut data = Vec::with_capacity(n * v.channels());
    for c in 0..v.channels() {
        let ch = v.channel(c);
        for k in 0..dims[2] {
            let sk = reflect(k, src[2]);
            for j in 0..dims[1] {
                let sj = reflect(j, src[1]);
                for i in 0..dims[0] {
                    data.push(ch[g.idx(reflect(i, src[0]), sj, sk)]);
                }
            }
        }
    }
    Volume::new(grid, v.channels(), data)
}

/// Blends overlapping patch predictions into a full-volume probability map.
///
/// Patches are evaluated concurrently; their contributions are accumulated
/// in patch-index order, so the result does not depend on scheduling.
pub fn sliding_window_predict<M: PredictorInterface + ?Sized>(
    model: &M,
    coeffs: &ShCoeffMap,
    spec: &PatchSpec,
) -> Result<Volume> {
    spec.validate()?;
    let p = spec.patch;
    let orig = *coeffs.volume().grid();
    let vol: Cow<Volume> = if orig.dims.iter().any(|&d| d < p) {
        Cow::Owned(reflect_pad(coeffs.volume(), [p; 3])?)
    } else {
        Cow::Borrowed(coeffs.volume())
    };
    let grid = *vol.grid();
    let [px, py, pz] = [0, 1, 2].map(|a| positions(grid.dims[a], p, spec.stride));
    let mut starts = Vec::with_capacity(px.len() * py.len() * pz.len());
    for &z in &pz {
        for &y in &py {
            for &x in &px {
                starts.push([x, y, z]);
            }
        }
    }
    let w1 = spec.window();
    let classes = model.num_classes();
    let n = grid.num_voxels();
    let mut acc = vec![0.0f64; classes * n];
    let mut wsum = vec![0.0f64; n];
    let chunk = (2 * rayon::current_num_threads()).max(1);
    let all: Vec<usize> = (0..vol.channels()).collect();
    for batch in starts.chunks(chunk) {
        let preds: Vec<Volume> = batch
            .par_iter()
            .map(|&s| {
                let out = model.predict_patch(&vol.crop_channels(&all, s, [p; 3])?)?;
                if out.channels() != classes || out.grid().dims != [p; 3] {
                    return Err(Error::Shape(format!(
                        "predictor returned {:?} x {}",
                        out.grid().dims,
                        out.channels()
                    )));
                }
                if out.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(Error::Domain("predictor output outside [0, 1]".into()));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for (s, pred) in batch.iter().zip(&preds) {
            let np = p * p * p;
            for k in 0..p {
                for j in 0..p {
                    let wjk = w1[j] * w1[k];
                    for i in 0..p {
                        let w = w1[i] * wjk;
                        let l = i + p * (j + p * k);
                        let gidx = grid.idx(s[0] + i, s[1] + j, s[2] + k);
                        wsum[gidx] += w;
                        for c in 0..classes {
                            acc[c * n + gidx] += w * pred.data()[c * np + l] as f64;
                        }
                    }
                }
            }
        }
    }
    let no = orig.num_voxels();
    let mut data = vec![0.0f32; classes * no];
    for k in 0..orig.dims[2] {
        for j in 0..orig.dims[1] {
            for i in 0..orig.dims[0] {
                let gidx = grid.idx(i, j, k);
                let oidx = orig.idx(i, j, k);
                for c in 0..classes {
                    data[c * no + oidx] = ((acc[c * n + gidx] / wsum[gidx]) as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    Volume::new(orig, classes, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    /// Number of subsets, one prediction each.
    pub n: usize,
    /// Measurements per subset.
    pub k: usize,
    pub seed: u64,
    pub b_target: f64,
    pub b_tol: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            n: 5,
            k: 6,
            seed: 0,
            b_target: 1000.0,
            b_tol: DEFAULT_SHELL_TOL,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TtaResult {
    pub predictions: Vec<Volume>,
    /// Voxel-wise mean of `predictions`.
    pub mean: Volume,
    pub subsets: Vec<SubsetSelection>,
}

impl TtaResult {
    /// Builds the result from member predictions, computing the mean.
    pub fn from_predictions(
        predictions: Vec<Volume>,
        subsets: Vec<SubsetSelection>,
    ) -> Result<Self> {
        let first = predictions
            .first()
            .ok_or_else(|| Error::Config("no predictions".into()))?;
        if predictions
            .iter()
            .any(|p| !p.grid().same_shape(first.grid()) || p.channels() != first.channels())
        {
            return Err(Error::GridMismatch("TTA members differ in shape".into()));
        }
        let mut acc = vec![0.0f64; first.data().len()];
        for p in &predictions {
            for (a, &x) in acc.iter_mut().zip(p.data()) {
                *a += x as f64;
            }
        }
        let k = predictions.len() as f64;
        let mean = Volume::new(
            *first.grid(),
            first.channels(),
            acc.into_iter().map(|a| (a / k) as f32).collect(),
        )?;
        Ok(TtaResult {
            predictions,
            mean,
            subsets,
        })
    }
}

fn member_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Test-time augmentation over `cfg.n` measurement subsets.
pub fn tta_predict<M: PredictorInterface + ?Sized>(
    model: &M,
    dwi: &Volume,
    b0: &Volume,
    table: &GradientTable,
    cfg: &TtaConfig,
    spec: &PatchSpec,
) -> Result<TtaResult> {
    let normalized = b0_normalize(dwi, b0, NormalizeOptions::default())?.signal;
    tta_predict_normalized(model, &normalized, table, cfg, spec)
}

/// [`tta_predict`] on an already b0-normalized signal volume.
pub fn tta_predict_normalized<M: PredictorInterface + ?Sized>(
    model: &M,
    normalized: &Volume,
    table: &GradientTable,
    cfg: &TtaConfig,
    spec: &PatchSpec,
) -> Result<TtaResult> {
    if cfg.n == 0 {
        return Err(Error::Config("TTA needs n >= 1".into()));
    }
    let mut predictions = Vec::with_capacity(cfg.n);
    let mut subsets = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let sel = select_subset(
            table,
            cfg.k,
            cfg.b_target,
            cfg.b_tol,
            member_seed(cfg.seed, i),
        )?;
        let coeffs = fit_subset(normalized, table, &sel.indices, ShBasisSpec::default())?;
        predictions.push(sliding_window_predict(model, &coeffs, spec)?);
        subsets.push(sel);
    }
    TtaResult::from_predictions(predictions, subsets)
}

/// Monte Carlo weight dropout: `samples` passes, each with an independent
/// weight mask.
pub fn mc_dropout_predict(
    model: &ReferenceModel,
    coeffs: &ShCoeffMap,
    spec: &PatchSpec,
    samples: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<Volume>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let m = model.drop_weights(rate, &mut rng)?;
            sliding_window_predict(&m, coeffs, spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Constant(f32);

    impl PredictorInterface for Constant {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_patch(&self, patch: &Volume) -> Result<Volume> {
            Ok(Volume::filled(*patch.grid(), 2, self.0))
        }
    }

    fn random_coeffs(dims: [usize; 3], seed: u64) -> ShCoeffMap {
        let g = Grid3::new(dims, [1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g.num_voxels() * 6)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ShCoeffMap::new(Volume::new(g, 6, data).unwrap(), ShBasisSpec::default()).unwrap()
    }

    fn random_model(seed: u64) -> ReferenceModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        ReferenceModel::from_parts(2, 6, w, vec![0.1, -0.2]).unwrap()
    }

    /// Position-dependent predictor so blending errors show up.
    struct Positional;

    impl PredictorInterface for Positional {
        fn num_classes(&self) -> usize {
            1
        }
        fn predict_patch(&self, patch: &Volume) -> Result<Volume> {
            let g = *patch.grid();
            let d = g.dims;
            let mut data = Vec::with_capacity(g.num_voxels());
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        let x = patch.get(i, j, k, 0).abs().min(1.0);
                        data.push(x * (1 + i + 2 * j + 3 * k) as f32 / (6 * d[0]) as f32);
                    }
                }
            }
            Volume::new(g, 1, data)
        }
    }

    #[test]
    fn positions_cover_axis() {
        assert_eq!(positions(8, 8, 4), vec![0]);
        assert_eq!(positions(20, 8, 4), vec![0, 4, 8, 12]);
        assert_eq!(positions(21, 8, 4), vec![0, 4, 8, 12, 13]);
        assert_eq!(positions(10, 4, 4), vec![0, 4, 6]);
    }

    #[test]
    fn reflect_pads_without_repeating_edge() {
        let g = Grid3::new([3, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::new(g, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = reflect_pad(&v, [7, 2, 1]).unwrap();
        assert_eq!(p.grid().dims, [7, 2, 1]);
        assert_eq!(&p.data()[..7], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p.data()[..7], &p.data()[7..]);
    }

    #[test]
    fn constant_model_gives_constant_output() {
        let coeffs = random_coeffs([12, 10, 9], 1);
        for stride in [1, 3, 4, 8] {
            for blend in [Blend::Uniform, Blend::Cosine] {
                let spec = PatchSpec::new(8, stride, blend).unwrap();
                let out = sliding_window_predict(&Constant(0.3), &coeffs, &spec).unwrap();
                assert!(out.data().iter().all(|&x| (x - 0.3).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn single_patch_equals_predict_patch() {
        let coeffs = random_coeffs([8, 8, 8], 2);
        let m = random_model(3);
        let spec = PatchSpec::new(8, 8, Blend::Cosine).unwrap();
        let out = sliding_window_predict(&m, &coeffs, &spec).unwrap();
        assert_eq!(out, m.predict_patch(coeffs.volume()).unwrap());
    }

    #[test]
    fn small_volume_is_reflect_padded() {
        let coeffs = random_coeffs([5, 8, 3], 4);
        let m = random_model(5);
        let spec = PatchSpec::new(8, 4, Blend::Uniform).unwrap();
        let out = sliding_window_predict(&m, &coeffs, &spec).unwrap();
        assert_eq!(out.grid().dims, [5, 8, 3]);
        // voxel-wise model: padding must not change any voxel
        let direct = m.predict_patch(coeffs.volume()).unwrap();
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_naive_assembly() {
        let dims = [13, 11, 10];
        let coeffs = random_coeffs(dims, 6);
        for blend in [Blend::Uniform, Blend::Cosine] {
            let spec = PatchSpec::new(6, 3, blend).unwrap();
            let out = sliding_window_predict(&Positional, &coeffs, &spec).unwrap();
            let win = |i: usize| match blend {
                Blend::Uniform => 1.0,
                Blend::Cosine => (PI * (i as f64 + 0.5) / 6.0).sin().powi(2),
            };
            let starts = |n: usize| -> Vec<usize> {
                let mut s: Vec<usize> = (0..n).filter(|x| x % 3 == 0 && x + 6 <= n).collect();
                if !s.contains(&(n - 6)) {
                    s.push(n - 6);
                }
                s
            };
            let (sx, sy, sz) = (starts(dims[0]), starts(dims[1]), starts(dims[2]));
            let g = *coeffs.volume().grid();
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let (mut num, mut den) = (0.0f64, 0.0f64);
                        for &x in &sx {
                            for &y in &sy {
                                for &z in &sz {
                                    if i < x
                                        || i >= x + 6
                                        || j < y
                                        || j >= y + 6
                                        || k < z
                                        || k >= z + 6
                                    {
                                        continue;
                                    }
                                    let (li, lj, lk) = (i - x, j - y, k - z);
                                    let w = win(li) * win(lj) * win(lk);
                                    let v = coeffs.volume().get(i, j, k, 0).abs().min(1.0) as f64;
                                    let pred = (v as f32 * (1 + li + 2 * lj + 3 * lk) as f32 / 36.0)
                                        as f64;
                                    num += w * pred;
                                    den += w;
                                }
                            }
                        }
                        let got = out.data()[g.idx(i, j, k)] as f64;
                        assert!((got - num / den).abs() < 1e-6, "{i} {j} {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn tta_single_member_is_the_prediction() {
        let table = GradientTable::single_shell(30, 1000.0, 1);
        let g = Grid3::cube(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..g.num_voxels() * table.len())
            .map(|_| rng.random_range(0.1..1.0))
            .collect();
        let sig = Volume::new(g, table.len(), data).unwrap();
        let spec = PatchSpec::with_patch(4);
        let cfg = TtaConfig {
            n: 1,
            seed: 3,
            ..TtaConfig::default()
        };
        let m = random_model(1);
        let t = tta_predict_normalized(&m, &sig, &table, &cfg, &spec).unwrap();
        assert_eq!(t.mean, t.predictions[0]);
        let cfg = TtaConfig { n: 4, ..cfg };
        let t = tta_predict_normalized(&Constant(0.8), &sig, &table, &cfg, &spec).unwrap();
        assert!(t.predictions.iter().all(|p| *p == t.mean));
        assert_eq!(t.subsets.len(), 4);
    }
}
