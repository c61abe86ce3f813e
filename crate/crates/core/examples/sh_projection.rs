//! Project a noiseless phantom onto the order-2 SH basis from six well-spread
//! measurements and check how well the coefficients reproduce the full
//! 90-direction signal.
//!
//! ```text
//! cargo run --release --example sh_projection
//! ```

use wmtract::phantom::{simulate, PhantomSpec};
use wmtract::qspace::{select_subset, GradientTable};
use wmtract::shfit::{b0_normalize, fit_subset, sh_reconstruct, NormalizeOptions, ShBasisSpec};

fn main() -> wmtract::Result<()> {
    let table = GradientTable::single_shell(90, 1000.0, 1);
    let out = simulate(&PhantomSpec::crossing_tubes(32), &table)?;
    let norm = b0_normalize(&out.dwi, &out.b0, NormalizeOptions::default())?.signal;

    let shell = table.shell_indices(1000.0, 100.0);
    let all = fit_subset(&norm, &table, &shell, ShBasisSpec::default())?;
    let six = select_subset(&table, 6, 1000.0, 100.0, 0)?;
    let few = fit_subset(&norm, &table, &six.indices, ShBasisSpec::default())?;
    println!("subset {:?}, condition number {:.3}", six.indices, six.cond);

    let dirs = table.directions(&shell);
    let truth = norm.select_channels(&shell)?;
    for (name, coeffs) in [("90 directions", &all), ("6 directions", &few)] {
        let rec = sh_reconstruct(coeffs, &dirs)?;
        let rms = (rec
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / rec.data().len() as f64)
            .sqrt();
        println!("{name}: rms reconstruction error {rms:.4}");
    }

    let c = 16;
    let g = *norm.grid();
    let v = g.idx(c, c, c);
    let coeffs: Vec<f32> = (0..6).map(|k| few.volume().channel(k)[v]).collect();
    println!("coefficients at the crossing: {coeffs:.4?}");
    Ok(())
}
