//! Disagreement between test-time predictions, measured with an unfolded
//! earth mover's distance.
//!
//! Each probability map is downsampled by 4 with cubic interpolation,
//! normalized to unit mass and linearized along a serpentine path that keeps
//! consecutive entries spatially adjacent. The 1D EMD between two such chains
//! is the distance between their cumulative sums. A tract's uncertainty `u`
//! is the mean EMD between each member and the member average.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TtaResult;
use crate::volume::{resample_cubic, Grid3, Volume};

pub const DEFAULT_TAU: f64 = 0.30;
pub const DOWNSAMPLE: usize = 4;

/// Unit-mass (or raw) nonnegative mass on a grid, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct MassVolume {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

impl MassVolume {
    /// Takes a single-channel volume as is.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        single_channel(v)?;
        Ok(MassVolume {
            grid: *v.grid(),
            values: v.data().iter().map(|&x| x as f64).collect(),
        })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn single_channel(v: &Volume) -> Result<()> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!(
            "expected one channel, got {}",
            v.channels()
        )));
    }
    Ok(())
}

/// Downsample by 4, clamp negatives, normalize to unit sum.
pub fn prepare_mass(prob: &Volume) -> Result<MassVolume> {
    single_channel(prob)?;
    if prob.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Domain("probabilities outside [0, 1]".into()));
    }
    let small = resample_cubic(prob, DOWNSAMPLE)?;
    let mut values: Vec<f64> = small.data().iter().map(|&x| (x as f64).max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    values.iter_mut().for_each(|x| *x /= total);
    Ok(MassVolume {
        grid: *small.grid(),
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Traversal {
    Serpentine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedMass {
    pub values: Vec<f64>,
    pub total: f64,
    pub dims: [usize; 3],
    pub traversal: Traversal,
}

/// Linear voxel indices in serpentine order: x reverses on every row, y
/// reverses on every slab, so consecutive entries are 6-neighbours.
pub fn serpentine_order(dims: [usize; 3]) -> Vec<usize> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(nx * ny * nz);
    let mut row = 0usize;
    for k in 0..nz {
        for jj in 0..ny {
            let j = if k % 2 == 0 { jj } else { ny - 1 - jj };
            for ii in 0..nx {
                let i = if row % 2 == 0 { ii } else { nx - 1 - ii };
                out.push(i + nx * (j + ny * k));
            }
            row += 1;
        }
    }
    out
}

pub fn unfold_mass(m: &MassVolume) -> UnfoldedMass {
    let values: Vec<f64> = serpentine_order(m.grid.dims)
        .into_iter()
        .map(|i| m.values[i])
        .collect();
    UnfoldedMass {
        total: values.iter().sum(),
        values,
        dims: m.grid.dims,
        traversal: Traversal::Serpentine,
    }
}

pub fn unfold(v: &Volume) -> Result<UnfoldedMass> {
    Ok(unfold_mass(&MassVolume::from_volume(v)?))
}

/// How cumulative-sum differences are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// `Σ |P_t − Q_t|`, the exact 1D Wasserstein-1 distance.
    #[default]
    L1,
    /// `sqrt(Σ (P_t − Q_t)²)`.
    L2,
}

/// L1 EMD between two unfolded chains.
pub fn emd_unfolded(p: &UnfoldedMass, q: &UnfoldedMass) -> Result<f64> {
    emd_unfolded_with(p, q, Scorer::L1)
}

pub fn emd_unfolded_with(p: &UnfoldedMass, q: &UnfoldedMass, scorer: Scorer) -> Result<f64> {
    if p.values.len() != q.values.len() {
        return Err(Error::Shape(format!(
            "unfolded lengths {} and {}",
            p.values.len(),
            q.values.len()
        )));
    }
    if (p.total - q.total).abs() > 1e-6 {
        return Err(Error::MassMismatch(p.total, q.total));
    }
    let (mut cp, mut cq, mut acc) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.values.iter().zip(&q.values) {
        cp += a;
        cq += b;
        let d = cp - cq;
        acc += match scorer {
            Scorer::L1 => d.abs(),
            Scorer::L2 => d * d,
        };
    }
    Ok(match scorer {
        Scorer::L1 => acc,
        Scorer::L2 => acc.sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdOptions {
    /// Run [`prepare_mass`] on both inputs first.
    pub prepare: bool,
    pub scorer: Scorer,
}

impl Default for EmdOptions {
    fn default() -> Self {
        EmdOptions {
            prepare: true,
            scorer: Scorer::L1,
        }
    }
}

fn as_mass(v: &Volume, prepare: bool) -> Result<MassVolume> {
    if prepare {
        prepare_mass(v)
    } else {
        let m = MassVolume::from_volume(v)?;
        if !(m.total() > 0.0) {
            return Err(Error::ZeroMass);
        }
        Ok(m)
    }
}

/// EMD between two probability maps on the same grid.
pub fn emd3(p: &Volume, q: &Volume, opts: EmdOptions) -> Result<f64> {
    if p.grid().dims != q.grid().dims {
        return Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            p.grid().dims,
            q.grid().dims
        )));
    }
    let a = unfold_mass(&as_mass(p, opts.prepare)?);
    let b = unfold_mass(&as_mass(q, opts.prepare)?);
    emd_unfolded_with(&a, &b, opts.scorer)
}

/// Per-tract uncertainty of a TTA family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractUncertainty {
    /// Mean of `emds`; `+inf` when any map has zero mass.
    #[serde(with = "crate::serde_inf")]
    pub u: f64,
    #[serde(with = "crate::serde_inf::vec")]
    pub emds: Vec<f64>,
    pub n: usize,
}

/// `u = (1/n) Σ_k EMD(y_k, ȳ)` for one channel.
pub fn uncertainty_u(t: &TtaResult, channel: usize, scorer: Scorer) -> Result<TractUncertainty> {
    if channel >= t.mean.channels() {
        return Err(Error::Shape(format!(
            "channel {channel} of {}",
            t.mean.channels()
        )));
    }
    let n = t.predictions.len();
    let unfolded = |v: &Volume| -> Result<Option<UnfoldedMass>> {
        match prepare_mass(&v.extract_channel(channel)) {
            Ok(m) => Ok(Some(unfold_mass(&m))),
            Err(Error::ZeroMass) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mean = unfolded(&t.mean)?;
    let mut emds = Vec::with_capacity(n);
    for y in &t.predictions {
        emds.push(match (unfolded(y)?, &mean) {
            (Some(a), Some(b)) => emd_unfolded_with(&a, b, scorer)?,
            _ => f64::INFINITY,
        });
    }
    let u = if emds.iter().any(|e| e.is_infinite()) || mean.is_none() {
        f64::INFINITY
    } else {
        emds.iter().sum::<f64>() / n as f64
    };
    Ok(TractUncertainty { u, emds, n })
}

/// [`uncertainty_u`] for every channel, computed concurrently.
pub fn uncertainty_all(t: &TtaResult, scorer: Scorer) -> Result<Vec<TractUncertainty>> {
    (0..t.mean.channels())
        .into_par_iter()
        .map(|c| uncertainty_u(t, c, scorer))
        .collect()
}

/// Failure flag: `u > tau`. The zero-mass sentinel always flags.
pub fn detect(u: f64, tau: f64) -> bool {
    u > tau
}

/// Mean voxel-wise standard deviation across `family` inside the union of
/// the members' `p >= 0.5` supports; 0 when the union is empty.
pub fn voxel_std_score(family: &[Volume], channel: usize) -> Result<f64> {
    if family.len() < 2 {
        return Err(Error::Config(
            "baseline needs at least two predictions".into(),
        ));
    }
    let first = &family[0];
    if family
        .iter()
        .any(|v| v.grid().dims != first.grid().dims || channel >= v.channels())
    {
        return Err(Error::GridMismatch(
            "baseline family differs in shape".into(),
        ));
    }
    let chans: Vec<&[f32]> = family.iter().map(|v| v.channel(channel)).collect();
    let k = family.len() as f64;
    let (mut total, mut count) = (0.0f64, 0usize);
    for v in 0..chans[0].len() {
        if !chans.iter().any(|c| c[v] >= 0.5) {
            continue;
        }
        let mean = chans.iter().map(|c| c[v] as f64).sum::<f64>() / k;
        let var = chans
            .iter()
            .map(|c| (c[v] as f64 - mean).powi(2))
            .sum::<f64>()
            / k;
        total += var.sqrt();
        count += 1;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    /// Voxel-std score of the TTA members themselves.
    pub tta_std: f64,
    pub ensemble: Option<f64>,
    pub dropout: Option<f64>,
}

pub fn baseline_scores(
    t: &TtaResult,
    channel: usize,
    dropout: Option<&[Volume]>,
    ensemble: Option<&[Volume]>,
) -> Result<BaselineScores> {
    let tta_std = if t.predictions.len() >= 2 {
        voxel_std_score(&t.predictions, channel)?
    } else {
        0.0
    };
    Ok(BaselineScores {
        tta_std,
        ensemble: ensemble.map(|f| voxel_std_score(f, channel)).transpose()?,
        dropout: dropout.map(|f| voxel_std_score(f, channel)).transpose()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractReport {
    pub scan_id: String,
    pub tract: String,
    #[serde(flatten)]
    pub uncertainty: TractUncertainty,
    pub flagged: bool,
    pub baselines: Option<BaselineScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub scorer: Scorer,
    pub tau: f64,
    pub tracts: Vec<TractReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub scan_id: String,
    pub tract: String,
    pub u: f64,
    pub tau: f64,
    pub flagged: bool,
    pub ens_score: Option<f64>,
    pub drp_score: Option<f64>,
}

impl UncertaintyReport {
    pub fn build(
        scan_id: &str,
        tract_names: &[String],
        t: &TtaResult,
        tau: f64,
        scorer: Scorer,
        dropout: Option<&[Volume]>,
        ensemble: Option<&[Volume]>,
    ) -> Result<Self> {
        if tract_names.len() != t.mean.channels() {
            return Err(Error::Shape(format!(
                "{} tract names for {} channels",
                tract_names.len(),
                t.mean.channels()
            )));
        }
        let us = uncertainty_all(t, scorer)?;
        let tracts = us
            .into_iter()
            .enumerate()
            .map(|(c, u)| {
                Ok(TractReport {
                    scan_id: scan_id.to_string(),
                    tract: tract_names[c].clone(),
                    flagged: detect(u.u, tau),
                    uncertainty: u,
                    baselines: Some(baseline_scores(t, c, dropout, ensemble)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(UncertaintyReport {
            scorer,
            tau,
            tracts,
        })
    }

    pub fn rows(&self) -> Vec<UncertaintyRow> {
        self.tracts
            .iter()
            .map(|t| UncertaintyRow {
                scan_id: t.scan_id.clone(),
                tract: t.tract.clone(),
                u: t.uncertainty.u,
                tau: self.tau,
                flagged: t.flagged,
                ens_score: t.baselines.and_then(|b| b.ensemble),
                drp_score: t.baselines.and_then(|b| b.dropout),
            })
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_uncertainty_rows(path: impl AsRef<Path>) -> Result<Vec<UncertaintyRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f32]) -> Volume {
        let g = Grid3::new([values.len(), 1, 1], [1.0; 3]).unwrap();
        Volume::new(g, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn serpentine_2x2() {
        let g = Grid3::new([2, 2, 1], [1.0; 3]).unwrap();
        // rows along y: [[a, b], [c, d]]
        let v = Volume::new(g, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(unfold(&v).unwrap().values, vec![1.0, 2.0, 4.0, 3.0]);
        assert_eq!(
            unfold(&line(&[5.0, 6.0, 7.0])).unwrap().values,
            vec![5.0, 6.0, 7.0]
        );
    }

    #[test]
    fn serpentine_is_adjacent_and_bijective() {
        let dims = [5, 4, 3];
        let g = Grid3::new(dims, [1.0; 3]).unwrap();
        let order = serpentine_order(dims);
        let mut seen = vec![false; g.num_voxels()];
        for &o in &order {
            assert!(!seen[o]);
            seen[o] = true;
        }
        for w in order.windows(2) {
            let a = g.voxel_coords(w[0]).unwrap();
            let b = g.voxel_coords(w[1]).unwrap();
            let d: usize = (0..3).map(|i| a[i].abs_diff(b[i])).sum();
            assert_eq!(d, 1);
        }
    }

    #[test]
    fn point_masses_three_apart() {
        let opts = EmdOptions {
            prepare: false,
            scorer: Scorer::L1,
        };
        let e = emd3(
            &line(&[1.0, 0.0, 0.0, 0.0]),
            &line(&[0.0, 0.0, 0.0, 1.0]),
            opts,
        )
        .unwrap();
        assert_eq!(e, 3.0);
    }

    #[test]
    fn mass_mismatch_and_zero_mass() {
        let opts = EmdOptions {
            prepare: false,
            scorer: Scorer::L1,
        };
        assert!(matches!(
            emd3(&line(&[1.0, 0.0]), &line(&[0.5, 0.0]), opts),
            Err(Error::MassMismatch(..))
        ));
        assert!(matches!(
            prepare_mass(&line(&[0.0; 8])),
            Err(Error::ZeroMass)
        ));
    }

    #[test]
    fn prepare_uniform() {
        let g = Grid3::cube(8);
        let m = prepare_mass(&Volume::filled(g, 1, 0.4)).unwrap();
        assert_eq!(m.grid.dims, [2, 2, 2]);
        assert!(m.values.iter().all(|&x| (x - 0.125).abs() < 1e-12));
        assert!((m.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detect_boundary() {
        assert!(!detect(0.0, DEFAULT_TAU));
        assert!(!detect(0.30, 0.30));
        assert!(detect(0.31, 0.30));
        assert!(detect(f64::INFINITY, 0.30));
    }

    #[test]
    fn baseline_constant_maps() {
        let g = Grid3::cube(4);
        let fam = [Volume::filled(g, 1, 0.4), Volume::filled(g, 1, 0.6)];
        assert!((voxel_std_score(&fam, 0).unwrap() - 0.1).abs() < 1e-7);
        let same = [Volume::filled(g, 1, 0.7), Volume::filled(g, 1, 0.7)];
        assert_eq!(voxel_std_score(&same, 0).unwrap(), 0.0);
        assert!(voxel_std_score(&fam[..1], 0).is_err());
    }

    #[test]
    fn u_is_mean_of_member_emds() {
        let g = Grid3::cube(8);
        let mut a = Volume::zeros(g, 1);
        let mut b = Volume::zeros(g, 1);
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    a.channel_mut(0)[g.idx(i, j, k)] = 1.0;
                    b.channel_mut(0)[g.idx(i + 4, j + 2, k)] = 0.8;
                }
            }
        }
        let t = TtaResult::from_predictions(vec![a.clone(), b.clone()], vec![]).unwrap();
        let u = uncertainty_u(&t, 0, Scorer::L1).unwrap();
        let e1 = emd3(&a, &t.mean, EmdOptions::default()).unwrap();
        let e2 = emd3(&b, &t.mean, EmdOptions::default()).unwrap();
        assert_eq!(u.emds, vec![e1, e2]);
        assert_eq!(u.u, (e1 + e2) / 2.0);

        let t = TtaResult::from_predictions(vec![a.clone(), Volume::zeros(g, 1)], vec![]).unwrap();
        assert_eq!(uncertainty_u(&t, 0, Scorer::L1).unwrap().u, f64::INFINITY);
        let json = serde_json::to_string(&uncertainty_u(&t, 0, Scorer::L1).unwrap()).unwrap();
        assert!(json.contains("\"u\":null"));
    }
}
