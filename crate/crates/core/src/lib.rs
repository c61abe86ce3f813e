//! Direct white-matter tract segmentation from diffusion MRI.
//!
//! The pipeline projects b0-normalized single-shell measurements onto an
//! order-2 spherical-harmonics basis, predicts per-tract probabilities from
//! the six coefficient maps, averages predictions over several well-spread
//! measurement subsets at test time, and scores their disagreement with an
//! unfolded earth mover's distance to flag unreliable segmentations.
//!
//! | module | role |
//! |---|---|
//! | [`volume`] | grids, volumes, masks, cubic downsampling |
//! | [`dwi_io`] | NIfTI-1 and FSL gradient files |
//! | [`qspace`] | gradient tables, electrostatic subset selection |
//! | [`shfit`] | SH basis, b0 normalization, per-voxel fitting |
//! | [`phantom`] | tensor-model phantoms with known tract labels |
//! | [`model`] | predictor trait, reference model, training, sliding-window TTA |
//! | [`uncertainty`] | unfolded EMD, uncertainty score, failure flag, baselines |
//! | [`segmetrics`] | DSC, HD95, ASSD, detection statistics |
//! | [`cli`] | the `wmtract` command implementations |
//!
//! Runnable walkthroughs live in `examples/`.

pub mod cli;
pub mod dwi_io;
pub mod error;
pub mod model;
pub mod phantom;
pub mod qspace;
pub mod segmetrics;
pub mod shfit;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, Grid3, Volume};

/// Serializes non-finite floats as JSON `null` and reads `null` back as `+inf`.
pub(crate) mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v = Vec::<Option<f64>>::deserialize(d)?;
            Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
        }
    }
}
