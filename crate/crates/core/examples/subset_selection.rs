//! Electrostatic subset selection on a 90-direction shell.
//!
//! ```text
//! cargo run --release --example subset_selection -- [k]
//! ```

use wmtract::qspace::{disjoint_subsets, initial_draw_energy, sh_design_condition, GradientTable};

fn main() -> wmtract::Result<()> {
    let k = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(6);
    let table = GradientTable::single_shell(90, 1000.0, 1);

    let start = initial_draw_energy(&table, k, 1000.0, 100.0, 0)?;
    let sets = disjoint_subsets(&table, k, 3, 1000.0, 100.0, 0)?;
    println!("random start energy {start:.3}");
    for (n, s) in sets.iter().enumerate() {
        println!(
            "subset {n}: {:?} energy {:.3} condition {:.3}",
            s.indices, s.energy, s.cond
        );
        for d in table.directions(&s.indices) {
            println!("    [{:+.3} {:+.3} {:+.3}]", d[0], d[1], d[2]);
        }
    }

    let clustered: Vec<usize> = (1..=k).collect();
    println!(
        "first {k} table directions: condition {:.3}",
        sh_design_condition(&table.directions(&clustered), 2)?
    );
    Ok(())
}
