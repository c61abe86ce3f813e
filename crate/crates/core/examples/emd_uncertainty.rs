//! Unfolded EMD between probability maps, and the TTA uncertainty score of a
//! family of predictions that drift apart.
//!
//! ```text
//! cargo run --release --example emd_uncertainty
//! ```

use wmtract::model::TtaResult;
use wmtract::uncertainty::{detect, emd3, serpentine_order, uncertainty_u, EmdOptions, Scorer};
use wmtract::{BinaryMask, Grid3, Volume};

fn blob(g: Grid3, center: [f64; 3], radius: f64) -> Volume {
    BinaryMask::from_fn(g, |i, j, k| {
        let d2 = (i as f64 - center[0]).powi(2)
            + (j as f64 - center[1]).powi(2)
            + (k as f64 - center[2]).powi(2);
        d2 <= radius * radius
    })
    .to_volume()
}

fn main() -> wmtract::Result<()> {
    println!(
        "serpentine order of a 3x2x2 grid: {:?}",
        serpentine_order([3, 2, 2])
    );

    let g = Grid3::cube(32);
    let base = blob(g, [12.0, 16.0, 16.0], 5.0);
    // Default options pool 4x4x4 blocks first, so shifts are whole blocks here.
    for shift in [0.0, 4.0, 8.0, 12.0] {
        let moved = blob(g, [12.0 + shift, 16.0, 16.0], 5.0);
        let l1 = emd3(&base, &moved, EmdOptions::default())?;
        let l2 = emd3(
            &base,
            &moved,
            EmdOptions {
                scorer: Scorer::L2,
                ..EmdOptions::default()
            },
        )?;
        println!("shift {shift:>3}: emd l1 {l1:8.3}  l2 {l2:.4}");
    }

    for spread in [0.0, 1.0, 3.0] {
        let members: Vec<Volume> = (0..5)
            .map(|m| blob(g, [16.0 + spread * (m as f64 - 2.0), 16.0, 16.0], 6.0))
            .collect();
        let t = TtaResult::from_predictions(members, Vec::new())?;
        let u = uncertainty_u(&t, 0, Scorer::L1)?;
        println!(
            "member spread {spread}: u = {:.3}, per-member {:.3?}, flagged at tau 10: {}",
            u.u,
            u.emds,
            detect(u.u, 10.0)
        );
    }
    Ok(())
}
