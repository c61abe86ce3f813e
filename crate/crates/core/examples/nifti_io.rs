//! Read a NIfTI-1 file and print its header summary and value range, or
//! write a small demo volume when no path is given.
//!
//! ```text
//! cargo run --release --example nifti_io -- [file.nii[.gz]]
//! ```

use wmtract::dwi_io::{read_nifti_with_header, write_nifti, NiftiDatatype};
use wmtract::{Grid3, Volume};

fn main() -> wmtract::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            let p = std::env::temp_dir().join("wmtract_demo.nii.gz");
            let g = Grid3::with_origin([16, 12, 8], [2.0, 2.0, 2.5], [-16.0, -12.0, -10.0])?;
            let data = (0..g.num_voxels() * 3)
                .map(|i| (i % 97) as f32 / 96.0)
                .collect();
            write_nifti(&Volume::new(g, 3, data)?, &p, NiftiDatatype::Float32)?;
            p
        }
    };
    let (h, v) = read_nifti_with_header(&path)?;
    println!("{}", path.display());
    println!("  dims {:?}, datatype {:?}", h.dims, h.datatype);
    println!(
        "  spacing {:?}, origin {:?}",
        v.grid().spacing,
        v.grid().origin
    );
    println!("  scl_slope {} scl_inter {}", h.scl_slope, h.scl_inter);
    for c in 0..v.channels().min(8) {
        let ch = v.channel(c);
        let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        println!("  channel {c}: min {lo} max {hi}");
    }
    Ok(())
}
