//! File formats: NIfTI-1 volumes and FSL `bvals`/`bvecs` gradient tables.

mod gradients;
mod nifti;

pub use gradients::{read_gradients, read_gradients_with_tol, write_gradients, GradientFilePair};
pub use nifti::{
    read_nifti, read_nifti_with_header, write_nifti, write_nifti_with_header, NiftiDatatype,
    NiftiHeaderLite, HEADER_SIZE, VOX_OFFSET,
};
