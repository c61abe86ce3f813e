//! Build a phantom from a JSON spec with an arc-shaped tract, write it as
//! NIfTI and FSL files, and read it back.
//!
//! ```text
//! cargo run --release --example phantom_roundtrip -- [out_dir]
//! ```

use wmtract::dwi_io::{read_gradients, read_nifti, write_gradients, write_nifti, NiftiDatatype};
use wmtract::phantom::{simulate, PhantomSpec};
use wmtract::qspace::GradientTable;

const SPEC: &str = r#"{
  "grid": { "dims": [40, 40, 24], "spacing": [1.5, 1.5, 2.0], "origin": [0.0, 0.0, 0.0] },
  "tracts": [
    { "label": "straight",
      "shape": { "type": "tube", "axis": "x", "center": [19.5, 12.0, 11.5], "radius": 4.0 },
      "tensor": [[1.7e-3, 0.0, 0.0], [0.0, 0.3e-3, 0.0], [0.0, 0.0, 0.3e-3]] },
    { "label": "bent",
      "shape": { "type": "arc", "center": [19.5, 19.5, 11.5], "normal": "z",
                 "major_radius": 12.0, "minor_radius": 3.5, "degrees": [20.0, 160.0] },
      "tensor": [[1.7e-3, 0.0, 0.0], [0.0, 0.3e-3, 0.0], [0.0, 0.0, 0.3e-3]] }
  ],
  "background": [[0.8e-3, 0.0, 0.0], [0.0, 0.8e-3, 0.0], [0.0, 0.0, 0.8e-3]],
  "border": null,
  "s0": 1000.0,
  "noise_sigma": 0.02,
  "seed": 11
}"#;

fn main() -> wmtract::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("wmtract_phantom"));
    std::fs::create_dir_all(&dir).map_err(|e| wmtract::Error::Config(e.to_string()))?;

    let spec: PhantomSpec = serde_json::from_str(SPEC)?;
    let table = GradientTable::single_shell(30, 1000.0, 2);
    let out = simulate(&spec, &table)?;

    write_nifti(&out.dwi, dir.join("dwi.nii.gz"), NiftiDatatype::Float32)?;
    write_gradients(&table, dir.join("dwi.bval"), dir.join("dwi.bvec"))?;
    for (name, m) in out.label_names.iter().zip(&out.labels) {
        write_nifti(
            &m.to_volume(),
            dir.join(format!("label_{name}.nii.gz")),
            NiftiDatatype::Uint8,
        )?;
        println!("{name}: {} voxels", m.count());
    }

    let dwi = read_nifti(dir.join("dwi.nii.gz"))?;
    let back = read_gradients(dir.join("dwi.bval"), dir.join("dwi.bvec"))?;
    println!(
        "read back {:?} x {} channels, spacing {:?}; data identical: {}; table identical: {}",
        dwi.grid().dims,
        dwi.channels(),
        dwi.grid().spacing,
        dwi == out.dwi,
        back == table
    );
    println!("files in {}", dir.display());
    Ok(())
}
