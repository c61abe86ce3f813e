//! Flag unreliable segmentations from TTA disagreement.
//!
//! Trains the reference model on a few phantoms, then segments a sweep of
//! held-out phantoms corrupted by increasing subject motion. For every tract
//! it prints the uncertainty `u`, the MC-dropout voxel-std baseline and the
//! true DSC, then calibrates the detection threshold and compares ROC-AUCs.
//!
//! ```text
//! cargo run --release --example failure_detection
//! ```

use wmtract::model::{
    mc_dropout_predict, train_reference, tta_predict_normalized, PatchSpec, TrainConfig,
    TrainingScan, TtaConfig,
};
use wmtract::phantom::{simulate, simulate_motion, PhantomSpec};
use wmtract::qspace::GradientTable;
use wmtract::segmetrics::{calibrate_threshold, dsc, roc_auc, spearman, DEFAULT_DSC_CUT};
use wmtract::shfit::{b0_normalize, fit_subset, NormalizeOptions, ShBasisSpec};
use wmtract::uncertainty::{uncertainty_all, voxel_std_score, Scorer};
use wmtract::volume::argmax_threshold_binarize;

const SIZE: usize = 48;
const STEPS: u64 = 16;
const MAX_SHIFT: f64 = 3.0;

fn main() -> wmtract::Result<()> {
    let table = GradientTable::single_shell(90, 1000.0, 1);
    let shell = table.shell_indices(1000.0, 100.0);
    let phantom = |variant: u64| {
        let mut spec = PhantomSpec::crossing_tubes_variant(SIZE, variant);
        spec.noise_sigma = 0.05;
        simulate(&spec, &table)
    };

    let scans = (0..4)
        .map(|v| {
            let out = phantom(v)?;
            TrainingScan::new(&out.dwi, &out.b0, table.clone(), &out.labels)
        })
        .collect::<wmtract::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        lr: 0.05,
        max_epochs: 30,
        iters_per_epoch: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, _) = train_reference(&scans, &cfg)?;
    drop(scans);

    let spec = PatchSpec::with_patch(32);
    let (mut us, mut stds, mut dscs) = (Vec::new(), Vec::new(), Vec::new());
    println!(
        "{:>6} {:>8} {:>9} {:>8} {:>6}",
        "shift", "tract", "u", "dropout", "dsc"
    );
    for step in 0..STEPS {
        let shift = MAX_SHIFT * step as f64 / (STEPS - 1) as f64;
        let mut out = phantom(500 + step)?;
        simulate_motion(&mut out.dwi, &shell, shift, 900 + step)?;
        let norm = b0_normalize(&out.dwi, &out.b0, NormalizeOptions::default())?.signal;
        let tta = tta_predict_normalized(
            &model,
            &norm,
            &table,
            &TtaConfig {
                seed: step,
                ..TtaConfig::default()
            },
            &spec,
        )?;
        let coeffs = fit_subset(
            &norm,
            &table,
            &tta.subsets[0].indices,
            ShBasisSpec::default(),
        )?;
        let dropout = mc_dropout_predict(&model, &coeffs, &spec, 5, 0.2, step)?;
        let masks = argmax_threshold_binarize(&tta.mean, 0.5)?;
        let unc = uncertainty_all(&tta, Scorer::L1)?;
        for c in 0..masks.len() {
            let d = dsc(&masks[c], &out.labels[c])?;
            let s = voxel_std_score(&dropout, c)?;
            println!(
                "{shift:6.2} {:>8} {:9.2} {s:8.4} {d:6.3}",
                out.label_names[c], unc[c].u
            );
            us.push(unc[c].u);
            stds.push(s);
            dscs.push(d);
        }
    }

    let failed: Vec<bool> = dscs.iter().map(|&d| d <= DEFAULT_DSC_CUT).collect();
    let (tau, stats) = calibrate_threshold(&us, &dscs, DEFAULT_DSC_CUT)?;
    println!("spearman(u, dsc) = {:.3}", spearman(&us, &dscs)?);
    println!("calibrated tau = {tau:.2}: {stats:?}");
    println!("balanced accuracy = {:.3}", stats.balanced_accuracy());
    if failed.iter().any(|&f| f) && failed.iter().any(|&f| !f) {
        println!(
            "ROC-AUC u = {:.3}, dropout std = {:.3}",
            roc_auc(&us, &failed)?,
            roc_auc(&stds, &failed)?
        );
    }
    Ok(())
}
