//! Log-linear tensor fits of a noiseless crossing-tube phantom recover the
//! tensors the geometry implies.

use nalgebra::{DMatrix, DVector};
use wmtract::phantom::{simulate, PhantomSpec};
use wmtract::qspace::GradientTable;

const SIZE: usize = 64;

/// Expected tensor from first principles: average of the covering tubes'
/// `diag(1.7, 0.3, 0.3)e-3` tensors (rotated to their axis), CSF in the
/// two-voxel border, background elsewhere.
fn expected(i: usize, j: usize, k: usize) -> [[f64; 3]; 3] {
    let c = (SIZE as f64 - 1.0) / 2.0;
    let r2 = (SIZE as f64 / 8.0).powi(2);
    let (x, y, z) = (i as f64 - c, j as f64 - c, k as f64 - c);
    let mut covering = Vec::new();
    if y * y + z * z <= r2 {
        covering.push([1.7e-3, 0.3e-3, 0.3e-3]);
    }
    if x * x + z * z <= r2 {
        covering.push([0.3e-3, 1.7e-3, 0.3e-3]);
    }
    let diag = if !covering.is_empty() {
        let n = covering.len() as f64;
        std::array::from_fn(|a| covering.iter().map(|d| d[a]).sum::<f64>() / n)
    } else {
        let edge = [i, j, k]
            .iter()
            .map(|&v| v.min(SIZE - 1 - v))
            .min()
            .unwrap();
        if edge < 2 {
            [3.0e-3; 3]
        } else {
            [0.8e-3; 3]
        }
    };
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        m[a][a] = diag[a];
    }
    m
}

#[test]
fn noiseless_phantom_tensor_fit_matches_geometry() {
    let table = GradientTable::single_shell(90, 1000.0, 1);
    let spec = PhantomSpec::crossing_tubes(SIZE);
    let out = simulate(&spec, &table).unwrap();
    let shell = table.shell_indices(1000.0, 100.0);
    let dirs = table.directions(&shell);

    let design = DMatrix::from_fn(dirs.len(), 6, |r, c| {
        let g = dirs[r];
        let b = 1000.0;
        -b * match c {
            0 => g[0] * g[0],
            1 => g[1] * g[1],
            2 => g[2] * g[2],
            3 => 2.0 * g[0] * g[1],
            4 => 2.0 * g[0] * g[2],
            _ => 2.0 * g[1] * g[2],
        }
    });
    let pinv = design.clone().pseudo_inverse(1e-12).unwrap();
    let grid = *out.dwi.grid();

    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in (0..SIZE).step_by(3) {
        for j in 0..SIZE {
            for i in (0..SIZE).step_by(2) {
                let v = grid.idx(i, j, k);
                let s0 = out.b0.channel(0)[v] as f64;
                let y = DVector::from_iterator(
                    shell.len(),
                    shell
                        .iter()
                        .map(|&c| (out.dwi.channel(c)[v] as f64 / s0).ln()),
                );
                let d = &pinv * y;
                let fit = [[d[0], d[3], d[4]], [d[3], d[1], d[5]], [d[4], d[5], d[2]]];
                let want = expected(i, j, k);
                let (mut num, mut den) = (0.0, 0.0);
                for a in 0..3 {
                    for b in 0..3 {
                        num += (fit[a][b] - want[a][b]).powi(2);
                        den += want[a][b].powi(2);
                    }
                }
                worst = worst.max((num / den).sqrt());
                checked += 1;
            }
        }
    }
    assert!(checked > 40_000);
    assert!(worst < 1e-6, "worst relative tensor error {worst:e}");
}

#[test]
fn labels_follow_tube_geometry() {
    let table = GradientTable::single_shell(12, 1000.0, 1);
    let out = simulate(&PhantomSpec::crossing_tubes(32), &table).unwrap();
    let c = 15.5f64;
    let r2 = 16.0;
    let g = *out.dwi.grid();
    for k in 0..32 {
        for j in 0..32 {
            for i in 0..32 {
                let (x, y, z) = (i as f64 - c, j as f64 - c, k as f64 - c);
                assert_eq!(out.labels[0].data()[g.idx(i, j, k)], y * y + z * z <= r2);
                assert_eq!(out.labels[1].data()[g.idx(i, j, k)], x * x + z * z <= r2);
            }
        }
    }
}
