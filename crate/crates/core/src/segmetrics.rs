//! Overlap and surface-distance metrics, plus failure-detection statistics.
//!
//! Surface distances are measured between surface voxel centers in mm,
//! using an exact Euclidean distance transform. HD95 and ASSD are the 95th
//! percentile and mean of the distances pooled from both directions.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::BinaryMask;

fn check_grids(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.grid().dims != b.grid().dims {
        return Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            a.grid().dims,
            b.grid().dims
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, or 1 when both masks are empty.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_grids(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one background 6-neighbour; voxels on the
/// grid boundary count as surface.
pub fn surface_voxels(m: &BinaryMask) -> Result<BinaryMask> {
    if m.is_empty() {
        return Err(Error::UndefinedMetric("surface of an empty mask".into()));
    }
    let g = *m.grid();
    let [nx, ny, nz] = g.dims;
    let d = m.data();
    Ok(BinaryMask::from_fn(g, |i, j, k| {
        if !d[g.idx(i, j, k)] {
            return false;
        }
        i == 0
            || j == 0
            || k == 0
            || i + 1 == nx
            || j + 1 == ny
            || k + 1 == nz
            || !d[g.idx(i - 1, j, k)]
            || !d[g.idx(i + 1, j, k)]
            || !d[g.idx(i, j - 1, k)]
            || !d[g.idx(i, j + 1, k)]
            || !d[g.idx(i, j, k - 1)]
            || !d[g.idx(i, j, k + 1)]
    }))
}

/// Squared distance transform along one line, lower envelope of parabolas.
/// `f` holds squared distances (`inf` for no site); positions are `i * h`.
fn edt_line(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let xq = q as f64 * h;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let xp = p as f64 * h;
            let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * h;
        while (j as isize) < k && z[j + 1] < x {
            j += 1;
        }
        let p = v[j];
        let d = x - p as f64 * h;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// voxel of `sites`; `inf` everywhere when `sites` is empty.
pub fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    let g = *sites.grid();
    let dims = g.dims;
    let mut d: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let h = g.spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let lines: Vec<usize> = (0..dims[o2])
            .flat_map(|b| (0..dims[o1]).map(move |a| (a, b)))
            .map(|(a, b)| {
                let mut c = [0; 3];
                c[o1] = a;
                c[o2] = b;
                g.idx(c[0], c[1], c[2])
            })
            .collect();
        let results: Vec<Vec<f64>> = lines
            .par_iter()
            .map_init(
                || (vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]),
                |(f, v, z), &base| {
                    for q in 0..n {
                        f[q] = d[base + q * stride];
                    }
                    let mut out = vec![0.0; n];
                    edt_line(f, h, &mut out, v, z);
                    out
                },
            )
            .collect();
        for (&base, line) in lines.iter().zip(&results) {
            for (q, &x) in line.iter().enumerate() {
                d[base + q * stride] = x;
            }
        }
    }
    d
}

/// Distances from each surface voxel of `a` to the surface of `b`, followed
/// by those from `b` to `a`.
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>> {
    check_grids(a, b)?;
    let sa = surface_voxels(a)?;
    let sb = surface_voxels(b)?;
    let da = squared_distance_transform(&sa);
    let db = squared_distance_transform(&sb);
    let mut out: Vec<f64> = Vec::with_capacity(sa.count() + sb.count());
    out.extend(
        sa.data()
            .iter()
            .zip(&db)
            .filter(|(s, _)| **s)
            .map(|(_, d)| d.sqrt()),
    );
    out.extend(
        sb.data()
            .iter()
            .zip(&da)
            .filter(|(s, _)| **s)
            .map(|(_, d)| d.sqrt()),
    );
    Ok(out)
}

/// Percentile `q ∈ [0, 1]` with linear interpolation between order statistics.
pub fn percentile_linear(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled symmetric surface distances, mm.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(percentile_linear(&surface_distances(a, b)?, 0.95))
}

/// Mean of the pooled symmetric surface distances, mm.
pub fn assd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let d = surface_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

pub fn seg_scores(pred: &BinaryMask, truth: &BinaryMask) -> Result<SegScores> {
    let dsc = dsc(pred, truth)?;
    if pred.is_empty() || truth.is_empty() {
        return Ok(SegScores {
            dsc,
            hd95: None,
            assd: None,
        });
    }
    let d = surface_distances(pred, truth)?;
    Ok(SegScores {
        dsc,
        hd95: Some(percentile_linear(&d, 0.95)),
        assd: Some(d.iter().sum::<f64>() / d.len() as f64),
    })
}

/// Scores each tract pair concurrently.
pub fn score_tracts(pred: &[BinaryMask], truth: &[BinaryMask]) -> Result<Vec<SegScores>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted tracts vs {} reference tracts",
            pred.len(),
            truth.len()
        )));
    }
    pred.par_iter()
        .zip(truth)
        .map(|(p, t)| seg_scores(p, t))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegRow {
    pub scan_id: String,
    pub tract: String,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
}

pub fn write_seg_rows(rows: &[SegRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_seg_rows(path: impl AsRef<Path>) -> Result<Vec<SegRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Confusion counts and rates. A rate whose denominator is zero is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl DetectionStats {
    pub fn balanced_accuracy(&self) -> f64 {
        0.5 * (self.sensitivity + self.specificity)
    }
}

pub const DEFAULT_DSC_CUT: f64 = 0.70;

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Positives are segmentations with `dsc <= dsc_cut`; a segmentation is
/// flagged when `u > tau`.
pub fn detection_stats(u: &[f64], dsc: &[f64], tau: f64, dsc_cut: f64) -> Result<DetectionStats> {
    if u.len() != dsc.len() {
        return Err(Error::Shape(format!(
            "{} u values vs {} DSC values",
            u.len(),
            dsc.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&uv, &d) in u.iter().zip(dsc) {
        match (d <= dsc_cut, uv > tau) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok(DetectionStats {
        accuracy: ratio(tp + tn, u.len()),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Smallest threshold among `{0} ∪ {finite u}` that maximizes balanced
/// accuracy.
pub fn calibrate_threshold(u: &[f64], dsc: &[f64], dsc_cut: f64) -> Result<(f64, DetectionStats)> {
    let mut cands: Vec<f64> = std::iter::once(0.0)
        .chain(u.iter().copied().filter(|x| x.is_finite() && *x >= 0.0))
        .collect();
    cands.sort_by(|a, b| a.total_cmp(b));
    cands.dedup();
    let mut best: Option<(f64, DetectionStats)> = None;
    for t in cands {
        let s = detection_stats(u, dsc, t, dsc_cut)?;
        if best.is_none_or(|(_, b)| s.balanced_accuracy() > b.balanced_accuracy()) {
            best = Some((t, s));
        }
    }
    Ok(best.expect("candidate set contains 0"))
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedMetric(
            "spearman needs at least 3 samples".into(),
        ));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric(
            "spearman of a constant sequence".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Area under the ROC curve of `scores` for the binary `labels` (ties count
/// one half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}
