//! Overlap and surface-distance metrics, and threshold calibration for
//! failure detection.
//!
//! ```text
//! cargo run --release --example segmentation_metrics
//! ```

use wmtract::segmetrics::{calibrate_threshold, detection_stats, roc_auc, seg_scores, spearman};
use wmtract::{BinaryMask, Grid3};

fn ball(g: Grid3, c: [f64; 3], r: f64) -> BinaryMask {
    BinaryMask::from_fn(g, |i, j, k| {
        (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2) <= r * r
    })
}

fn main() -> wmtract::Result<()> {
    let g = Grid3::new([40, 40, 40], [1.25, 1.25, 2.0])?;
    let truth = ball(g, [20.0, 20.0, 20.0], 9.0);
    for (name, pred) in [
        ("same", truth.clone()),
        ("shifted 2 voxels", ball(g, [22.0, 20.0, 20.0], 9.0)),
        ("shrunk", ball(g, [20.0, 20.0, 20.0], 6.0)),
        ("elsewhere", ball(g, [8.0, 8.0, 30.0], 5.0)),
    ] {
        let s = seg_scores(&pred, &truth)?;
        let mm = |d: Option<f64>| d.map_or("n/a".to_string(), |d| format!("{d:.2} mm"));
        println!(
            "{name:>16}: dsc {:.3} hd95 {} assd {}",
            s.dsc,
            mm(s.hd95),
            mm(s.assd)
        );
    }

    let u = [0.05, 0.12, 0.08, 0.4, 0.22, 0.5, 0.1, 0.35];
    let dsc = [0.92, 0.85, 0.9, 0.5, 0.74, 0.3, 0.88, 0.66];
    let failed: Vec<bool> = dsc.iter().map(|&d| d <= 0.7).collect();
    println!(
        "spearman {:.3}, roc-auc {:.3}",
        spearman(&u, &dsc)?,
        roc_auc(&u, &failed)?
    );
    println!("at tau 0.30: {:?}", detection_stats(&u, &dsc, 0.30, 0.7)?);
    let (tau, stats) = calibrate_threshold(&u, &dsc, 0.7)?;
    println!(
        "calibrated tau {tau}: balanced accuracy {:.3}",
        stats.balanced_accuracy()
    );
    Ok(())
}
