//! Train the reference model on simulated crossing-tube phantoms and segment
//! held-out phantoms with test-time augmentation.
//!
//! ```text
//! cargo run --release --example train_segment -- [size] [n_train] [n_test]
//! ```

use std::time::Instant;

use wmtract::model::{
    train_reference, tta_predict_normalized, PatchSpec, TrainConfig, TrainingScan, TtaConfig,
};
use wmtract::phantom::{simulate, PhantomSpec};
use wmtract::qspace::GradientTable;
use wmtract::segmetrics::seg_scores;
use wmtract::shfit::{b0_normalize, NormalizeOptions};
use wmtract::volume::argmax_threshold_binarize;

fn main() -> wmtract::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let size = args.first().copied().unwrap_or(48);
    let n_train = args.get(1).copied().unwrap_or(4);
    let n_test = args.get(2).copied().unwrap_or(2);
    let table = GradientTable::single_shell(90, 1000.0, 1);

    let phantom = |variant: u64| {
        let mut spec = PhantomSpec::crossing_tubes_variant(size, variant);
        spec.noise_sigma = 0.05;
        simulate(&spec, &table)
    };

    let t0 = Instant::now();
    let mut scans = Vec::with_capacity(n_train);
    for v in 0..n_train as u64 {
        let out = phantom(v)?;
        scans.push(TrainingScan::new(
            &out.dwi,
            &out.b0,
            table.clone(),
            &out.labels,
        )?);
    }
    println!(
        "simulated {n_train} training phantoms ({size}^3) in {:.1?}",
        t0.elapsed()
    );

    // The logistic reference model needs a far larger step than a deep
    // network; 1e-4 barely moves it in this budget.
    let cfg = TrainConfig {
        lr: 0.05,
        max_epochs: 40,
        iters_per_epoch: 200,
        patch: 32,
        seed: 7,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (model, log) = train_reference(&scans, &cfg)?;
    drop(scans);
    println!("trained in {:.1?}", t0.elapsed());
    for row in log.iter().step_by(10).chain(log.last()) {
        println!(
            "  epoch {:3}  train {:.4}  val {:.4}  lr {:.2e}",
            row.epoch, row.train_loss, row.val_loss, row.lr
        );
    }

    let spec = PatchSpec::with_patch(32);
    for v in 0..n_test as u64 {
        let out = phantom(1000 + v)?;
        let norm = b0_normalize(&out.dwi, &out.b0, NormalizeOptions::default())?.signal;
        let t0 = Instant::now();
        let tta = tta_predict_normalized(
            &model,
            &norm,
            &table,
            &TtaConfig {
                seed: v,
                ..TtaConfig::default()
            },
            &spec,
        )?;
        let elapsed = t0.elapsed();
        let masks = argmax_threshold_binarize(&tta.mean, 0.5)?;
        for (name, (pred, truth)) in out.label_names.iter().zip(masks.iter().zip(&out.labels)) {
            let s = seg_scores(pred, truth)?;
            println!(
                "phantom {v} {name}: dsc {:.4} hd95 {} assd {} (tta {elapsed:.1?})",
                s.dsc,
                mm(s.hd95),
                mm(s.assd)
            );
        }
    }
    Ok(())
}

fn mm(d: Option<f64>) -> String {
    d.map_or("n/a".to_string(), |d| format!("{d:.2} mm"))
}
