//! Gradient tables and well-spread measurement subset selection.
//!
//! Subsets are scored with the antipodally symmetrized electrostatic energy
//! `E = sum_{i<j} 1/|g_i - g_j|^2 + 1/|g_i + g_j|^2` and optimized by greedy
//! pairwise exchange from a seeded random draw. The condition number of the
//! order-2 SH design matrix is reported alongside but not optimized.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shfit::{design_matrix, ShBasisSpec};

pub const DEFAULT_B0_TOL: f64 = 50.0;
pub const DEFAULT_SHELL_TOL: f64 = 100.0;
pub const MIN_SUBSET: usize = 6;
pub const MAX_SUBSET: usize = 12;

const UNIT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientEntry {
    pub direction: [f64; 3],
    /// s/mm².
    pub bval: f64,
    pub is_b0: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradientTable {
    entries: Vec<GradientEntry>,
}

impl GradientTable {
    pub fn new(entries: Vec<GradientEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.bval >= 0.0) || !e.bval.is_finite() {
                return Err(Error::GradientFormat(format!(
                    "entry {i}: negative or non-finite b-value {}",
                    e.bval
                )));
            }
            if !e.is_b0 && (norm(e.direction) - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidDirection(format!(
                    "entry {i}: |g| = {}",
                    norm(e.direction)
                )));
            }
        }
        Ok(GradientTable { entries })
    }

    /// Builds a table from raw b-values and direction columns, renormalizing
    /// every direction with `b > b0_tol` to unit length.
    pub fn from_raw(bvals: &[f64], dirs: &[[f64; 3]], b0_tol: f64) -> Result<Self> {
        if bvals.len() != dirs.len() {
            return Err(Error::GradientFormat(format!(
                "{} b-values but {} directions",
                bvals.len(),
                dirs.len()
            )));
        }
        let mut entries = Vec::with_capacity(bvals.len());
        for (i, (&b, &d)) in bvals.iter().zip(dirs).enumerate() {
            let is_b0 = b.abs() <= b0_tol;
            let direction = if is_b0 {
                d
            } else {
                let n = norm(d);
                if !(n > 0.0) {
                    return Err(Error::InvalidDirection(format!(
                        "entry {i}: zero direction with b = {b}"
                    )));
                }
                if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
                    d
                } else {
                    [d[0] / n, d[1] / n, d[2] / n]
                }
            };
            entries.push(GradientEntry {
                direction,
                bval: b,
                is_b0,
            });
        }
        GradientTable::new(entries)
    }

    /// `n_b0` unweighted entries followed by `n_dirs` hemisphere directions
    /// on a Fibonacci lattice at `bval`.
    pub fn single_shell(n_dirs: usize, bval: f64, n_b0: usize) -> Self {
        let mut entries: Vec<GradientEntry> = (0..n_b0)
            .map(|_| GradientEntry {
                direction: [0.0; 3],
                bval: 0.0,
                is_b0: true,
            })
            .collect();
        entries.extend(
            hemisphere_directions(n_dirs)
                .into_iter()
                .map(|d| GradientEntry {
                    direction: d,
                    bval,
                    is_b0: false,
                }),
        );
        GradientTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GradientEntry] {
        &self.entries
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].is_b0).collect()
    }

    /// Indices of diffusion-weighted entries with `|b - b_target| <= b_tol`.
    pub fn shell_indices(&self, b_target: f64, b_tol: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let e = &self.entries[i];
                !e.is_b0 && (e.bval - b_target).abs() <= b_tol
            })
            .collect()
    }

    pub fn directions(&self, indices: &[usize]) -> Vec<[f64; 3]> {
        indices.iter().map(|&i| self.entries[i].direction).collect()
    }
}

/// Near-uniform directions on the upper hemisphere (Fibonacci lattice).
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Pair term `1/|a-b|^2 + 1/|a+b|^2`, or `None` for a coincident or
/// antipodal pair.
fn pair_energy(a: [f64; 3], b: [f64; 3]) -> Option<f64> {
    let mut minus = 0.0;
    let mut plus = 0.0;
    for c in 0..3 {
        minus += (a[c] - b[c]).powi(2);
        plus += (a[c] + b[c]).powi(2);
    }
    if minus < 1e-12 || plus < 1e-12 {
        None
    } else {
        Some(1.0 / minus + 1.0 / plus)
    }
}

pub fn electrostatic_energy(dirs: &[[f64; 3]]) -> Result<f64> {
    if dirs.len() < 2 {
        return Err(Error::TooFewDirections {
            needed: 2,
            available: dirs.len(),
        });
    }
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            e += pair_energy(dirs[i], dirs[j]).ok_or(Error::DegeneratePair(i, j))?;
        }
    }
    Ok(e)
}

/// Ratio of extreme singular values of the SH design matrix; `+inf` when
/// the matrix is numerically rank deficient.
pub fn sh_design_condition(dirs: &[[f64; 3]], l_max: usize) -> Result<f64> {
    let spec = ShBasisSpec::new(l_max)?;
    if dirs.len() < spec.num_coeffs() {
        return Err(Error::TooFewDirections {
            needed: spec.num_coeffs(),
            available: dirs.len(),
        });
    }
    let b = design_matrix(dirs, &spec)?;
    Ok(condition_number(&b))
}

pub(crate) fn condition_number(b: &DMatrix<f64>) -> f64 {
    let sv = b.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    /// Zero-based table indices, ascending.
    pub indices: Vec<usize>,
    pub energy: f64,
    #[serde(with = "crate::serde_inf")]
    pub cond: f64,
}

/// Pairwise energies over a candidate pool; degenerate pairs are `+inf`.
struct PairTable {
    n: usize,
    e: Vec<f64>,
}

impl PairTable {
    fn new(dirs: &[[f64; 3]]) -> Self {
        let n = dirs.len();
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = pair_energy(dirs[i], dirs[j]).unwrap_or(f64::INFINITY);
                e[i * n + j] = v;
                e[j * n + i] = v;
            }
        }
        PairTable { n, e }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.e[i * self.n + j]
    }

    fn total(&self, set: &[usize]) -> f64 {
        let mut s = 0.0;
        for a in 0..set.len() {
            for b in a + 1..set.len() {
                s += self.get(set[a], set[b]);
            }
        }
        s
    }

    /// Energy contribution of `cand` against every member except slot `skip`.
    fn contribution(&self, set: &[usize], skip: usize, cand: usize) -> f64 {
        set.iter()
            .enumerate()
            .filter(|&(p, _)| p != skip)
            .map(|(_, &m)| self.get(cand, m))
            .sum()
    }

    /// Best single swap of slot `p` with an outside candidate, if it lowers energy.
    fn best_swap_for(&self, set: &[usize], inside: &[bool], p: usize) -> Option<(usize, f64)> {
        let current = self.contribution(set, p, set[p]);
        let mut best: Option<(usize, f64)> = None;
        for q in 0..self.n {
            if inside[q] {
                continue;
            }
            let delta = self.contribution(set, p, q) - current;
            if improves(delta, current) && best.is_none_or(|(_, d)| delta < d) {
                best = Some((q, delta));
            }
        }
        best
    }
}

fn improves(delta: f64, scale: f64) -> bool {
    if scale.is_finite() {
        delta < -1e-12 * scale.abs().max(1.0)
    } else {
        delta < 0.0
    }
}

/// Exchange until no single swap lowers the energy. `full` scans every
/// (slot, candidate) pair per round; otherwise one sweep over slots.
fn exchange(pairs: &PairTable, set: &mut [usize], full: bool) {
    let mut inside = vec![false; pairs.n];
    for &s in set.iter() {
        inside[s] = true;
    }
    loop {
        let mut changed = false;
        if full {
            let mut best: Option<(usize, usize, f64)> = None;
            for p in 0..set.len() {
                if let Some((q, d)) = pairs.best_swap_for(set, &inside, p) {
                    if best.is_none_or(|(_, _, bd)| d < bd) {
                        best = Some((p, q, d));
                    }
                }
            }
            if let Some((p, q, _)) = best {
                inside[set[p]] = false;
                inside[q] = true;
                set[p] = q;
                changed = true;
            }
        } else {
            for p in 0..set.len() {
                if let Some((q, _)) = pairs.best_swap_for(set, &inside, p) {
                    inside[set[p]] = false;
                    inside[q] = true;
                    set[p] = q;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if !(MIN_SUBSET..=MAX_SUBSET).contains(&k) {
        return Err(Error::Config(format!(
            "subset size {k} outside [{MIN_SUBSET}, {MAX_SUBSET}]"
        )));
    }
    Ok(())
}

fn finish(table: &GradientTable, mut indices: Vec<usize>) -> Result<SubsetSelection> {
    indices.sort_unstable();
    let dirs = table.directions(&indices);
    let energy = electrostatic_energy(&dirs)?;
    let cond = sh_design_condition(&dirs, 2)?;
    Ok(SubsetSelection {
        indices,
        energy,
        cond,
    })
}

/// Draws `k` pool members uniformly without replacement and runs exchange.
fn optimize_in_pool(
    table: &GradientTable,
    pool: &[usize],
    k: usize,
    rng: &mut impl Rng,
    full: bool,
) -> Result<SubsetSelection> {
    if pool.len() < k {
        return Err(Error::TooFewDirections {
            needed: k,
            available: pool.len(),
        });
    }
    let pairs = PairTable::new(&table.directions(pool));
    let mut local: Vec<usize> = index::sample(rng, pool.len(), k).into_vec();
    let initial = pairs.total(&local);
    exchange(&pairs, &mut local, full);
    debug_assert!(pairs.total(&local) <= initial || initial.is_nan());
    finish(table, local.into_iter().map(|l| pool[l]).collect())
}

/// Energy of the seeded random draw that [`select_subset`] starts from.
pub fn initial_draw_energy(
    table: &GradientTable,
    k: usize,
    b_target: f64,
    b_tol: f64,
    seed: u64,
) -> Result<f64> {
    let pool = table.shell_indices(b_target, b_tol);
    if pool.len() < k {
        return Err(Error::TooFewDirections {
            needed: k,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local = index::sample(&mut rng, pool.len(), k).into_vec();
    let idx: Vec<usize> = local.into_iter().map(|l| pool[l]).collect();
    electrostatic_energy(&table.directions(&idx))
}

/// Seeded random `k`-subset of the shell refined to a local energy optimum.
pub fn select_subset(
    table: &GradientTable,
    k: usize,
    b_target: f64,
    b_tol: f64,
    seed: u64,
) -> Result<SubsetSelection> {
    let mut sets = disjoint_subsets(table, k, 1, b_target, b_tol, seed)?;
    Ok(sets.remove(0))
}

/// `count` pairwise-disjoint subsets, each optimized over the directions not
/// already taken by earlier subsets.
pub fn disjoint_subsets(
    table: &GradientTable,
    k: usize,
    count: usize,
    b_target: f64,
    b_tol: f64,
    seed: u64,
) -> Result<Vec<SubsetSelection>> {
    check_k(k)?;
    if count == 0 {
        return Err(Error::Config("subset count must be positive".into()));
    }
    let shell = table.shell_indices(b_target, b_tol);
    if shell.len() < k * count {
        return Err(Error::TooFewDirections {
            needed: k * count,
            available: shell.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; table.len()];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pool: Vec<usize> = shell.iter().copied().filter(|&i| !taken[i]).collect();
        let sel = optimize_in_pool(table, &pool, k, &mut rng, true)?;
        for &i in &sel.indices {
            taken[i] = true;
        }
        out.push(sel);
    }
    Ok(out)
}

/// Training-time draw: size uniform in `k_range`, one cheap exchange sweep.
/// Advances `rng`.
pub fn random_subset(
    table: &GradientTable,
    k_range: (usize, usize),
    b_target: f64,
    b_tol: f64,
    rng: &mut impl Rng,
) -> Result<SubsetSelection> {
    let (lo, hi) = k_range;
    check_k(lo)?;
    check_k(hi)?;
    if lo > hi {
        return Err(Error::Config(format!("empty subset range [{lo}, {hi}]")));
    }
    let k = rng.random_range(lo..=hi);
    let shell = table.shell_indices(b_target, b_tol);
    optimize_in_pool(table, &shell, k, rng, false)
}
