use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::qspace::{GradientTable, DEFAULT_B0_TOL};

/// Raw FSL gradient files: one row of b-values, three rows of direction
/// components.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientFilePair {
    pub bvals: Vec<f64>,
    pub bvecs: [Vec<f64>; 3],
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::GradientFormat(format!("{what} row {r}: non-numeric token {tok:?}"))
                    })
                })
                .collect()
        })
        .collect()
}

impl GradientFilePair {
    pub fn parse(bvals_text: &str, bvecs_text: &str) -> Result<Self> {
        let bval_rows = parse_rows(bvals_text, "bvals")?;
        // a single column file is accepted as well as a single row
        let bvals: Vec<f64> = if bval_rows.len() == 1 {
            bval_rows.into_iter().next().unwrap()
        } else if bval_rows.iter().all(|r| r.len() == 1) {
            bval_rows.into_iter().flatten().collect()
        } else {
            return Err(Error::GradientFormat(format!(
                "bvals must be one row, found {} rows",
                bval_rows.len()
            )));
        };
        let rows = parse_rows(bvecs_text, "bvecs")?;
        let bvecs = if rows.len() == 3 {
            [rows[0].clone(), rows[1].clone(), rows[2].clone()]
        } else if rows.len() == bvals.len() && rows.iter().all(|r| r.len() == 3) {
            std::array::from_fn(|c| rows.iter().map(|r| r[c]).collect())
        } else {
            return Err(Error::GradientFormat(format!(
                "bvecs must have three rows, found {}",
                rows.len()
            )));
        };
        let pair = GradientFilePair { bvals, bvecs };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        let m = self.bvals.len();
        if m == 0 {
            return Err(Error::GradientFormat("empty gradient table".into()));
        }
        for (r, row) in self.bvecs.iter().enumerate() {
            if row.len() != m {
                return Err(Error::GradientFormat(format!(
                    "bvecs row {r} has {} columns, bvals has {m}",
                    row.len()
                )));
            }
        }
        Ok(())
    }

    pub fn directions(&self) -> Vec<[f64; 3]> {
        (0..self.bvals.len())
            .map(|i| [self.bvecs[0][i], self.bvecs[1][i], self.bvecs[2][i]])
            .collect()
    }

    pub fn into_table(self, b0_tol: f64) -> Result<GradientTable> {
        GradientTable::from_raw(&self.bvals, &self.directions(), b0_tol)
    }

    pub fn from_table(table: &GradientTable) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::GradientFormat("empty gradient table".into()));
        }
        let e = table.entries();
        Ok(GradientFilePair {
            bvals: e.iter().map(|g| g.bval).collect(),
            bvecs: std::array::from_fn(|c| e.iter().map(|g| g.direction[c]).collect()),
        })
    }

    /// Text of the two files. Numbers use the shortest representation that
    /// parses back to the same `f64`.
    pub fn format(&self) -> (String, String) {
        let row = |v: &[f64]| {
            let mut s = v
                .iter()
                .map(|x| format!("{}", x + 0.0))
                .collect::<Vec<_>>()
                .join(" ");
            s.push('\n');
            s
        };
        let bvecs = self.bvecs.iter().map(|r| row(r)).collect::<String>();
        (row(&self.bvals), bvecs)
    }
}

pub fn read_gradients_with_tol(
    bval_path: impl AsRef<Path>,
    bvec_path: impl AsRef<Path>,
    b0_tol: f64,
) -> Result<GradientTable> {
    let (bp, vp) = (bval_path.as_ref(), bvec_path.as_ref());
    let bvals = fs::read_to_string(bp).map_err(|e| Error::io(bp, e))?;
    let bvecs = fs::read_to_string(vp).map_err(|e| Error::io(vp, e))?;
    GradientFilePair::parse(&bvals, &bvecs)?.into_table(b0_tol)
}

/// Reads an FSL pair with the default b0 tolerance of 50 s/mm².
pub fn read_gradients(
    bval_path: impl AsRef<Path>,
    bvec_path: impl AsRef<Path>,
) -> Result<GradientTable> {
    read_gradients_with_tol(bval_path, bvec_path, DEFAULT_B0_TOL)
}

pub fn write_gradients(
    table: &GradientTable,
    bval_path: impl AsRef<Path>,
    bvec_path: impl AsRef<Path>,
) -> Result<()> {
    let (bvals, bvecs) = GradientFilePair::from_table(table)?.format();
    let (bp, vp) = (bval_path.as_ref(), bvec_path.as_ref());
    fs::write(bp, bvals).map_err(|e| Error::io(bp, e))?;
    fs::write(vp, bvecs).map_err(|e| Error::io(vp, e))
}
