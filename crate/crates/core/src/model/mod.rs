//! Patch predictors, training and sliding-window inference.
//!
//! [`PredictorInterface`] is the seam between the pipeline and a concrete
//! network. [`ReferenceModel`] is a voxel-wise logistic classifier on the SH
//! coefficients; it trains in seconds and is enough to segment phantoms.

mod infer;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub use infer::{
    mc_dropout_predict, reflect_pad, sliding_window_predict, tta_predict, tta_predict_normalized,
    Blend, PatchSpec, TtaConfig, TtaResult,
};
pub use train::{
    adam_step, soft_dice_grad, soft_dice_loss, train_ensemble, train_reference, write_train_log,
    AdamParams, AdamState, EpochLog, TrainConfig, TrainingScan,
};

/// Maps a `p³ x F` feature patch to a `p³ x C` patch of independent
/// per-channel probabilities in `[0, 1]`.
pub trait PredictorInterface: Sync {
    fn num_classes(&self) -> usize;
    fn predict_patch(&self, patch: &Volume) -> Result<Volume>;
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"WMRM";

/// Per-class logistic regression `σ(W x + b)` on the SH coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    classes: usize,
    features: usize,
    /// `classes x features`, row major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ReferenceModel {
    pub fn zeros(classes: usize, features: usize) -> Self {
        ReferenceModel {
            classes,
            features,
            weights: vec![0.0; classes * features],
            bias: vec![0.0; classes],
        }
    }

    pub fn from_parts(
        classes: usize,
        features: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if classes == 0 || features == 0 {
            return Err(Error::Shape(
                "model needs at least one class and feature".into(),
            ));
        }
        if weights.len() != classes * features || bias.len() != classes {
            return Err(Error::Shape(format!(
                "{} weights and {} biases for {classes} x {features}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite model parameter".into()));
        }
        Ok(ReferenceModel {
            classes,
            features,
            weights,
            bias,
        })
    }

    pub fn num_features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// All parameters, weights first.
    pub(crate) fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub(crate) fn set_params(&mut self, p: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&p[..nw]);
        self.bias.copy_from_slice(&p[nw..]);
    }

    /// Copy with each weight independently zeroed with probability `rate`
    /// and the survivors scaled by `1 / (1 - rate)`.
    pub fn drop_weights(&self, rate: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mut out = self.clone();
        for w in &mut out.weights {
            *w = if rng.random::<f64>() < rate {
                0.0
            } else {
                *w * keep
            };
        }
        Ok(out)
    }

    fn check_patch(&self, patch: &Volume) -> Result<()> {
        if patch.channels() != self.features {
            return Err(Error::Shape(format!(
                "patch has {} channels, model expects {}",
                patch.channels(),
                self.features
            )));
        }
        Ok(())
    }

    /// Probabilities in f64, channel-major.
    pub(crate) fn forward(&self, patch: &Volume) -> Result<Vec<f64>> {
        self.check_patch(patch)?;
        let n = patch.grid().num_voxels();
        let mut out = vec![0.0f64; self.classes * n];
        for c in 0..self.classes {
            let z = &mut out[c * n..(c + 1) * n];
            z.fill(self.bias[c]);
            for f in 0..self.features {
                let w = self.weights[c * self.features + f];
                for (zv, &x) in z.iter_mut().zip(patch.channel(f)) {
                    *zv += w * x as f64;
                }
            }
            for zv in z.iter_mut() {
                *zv = sigmoid(*zv);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + 8 * (self.weights.len() + self.bias.len()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.features as u32).to_le_bytes());
        for x in self.weights.iter().chain(&self.bias) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 12 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let classes = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let features = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let count = classes * features + classes;
        if buf.len() != 12 + 8 * count {
            return Err(Error::Checkpoint(format!(
                "{}: {} payload bytes for {count} parameters",
                path.display(),
                buf.len() - 12
            )));
        }
        let vals: Vec<f64> = buf[12..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (w, b) = vals.split_at(classes * features);
        ReferenceModel::from_parts(classes, features, w.to_vec(), b.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl PredictorInterface for ReferenceModel {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn predict_patch(&self, patch: &Volume) -> Result<Volume> {
        let probs = self.forward(patch)?;
        Volume::new(
            *patch.grid(),
            self.classes,
            probs.into_iter().map(|p| p as f32).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;

    #[test]
    fn zero_model_predicts_half() {
        let m = ReferenceModel::zeros(3, 6);
        let patch = Volume::filled(Grid3::cube(4), 6, 0.7);
        let p = m.predict_patch(&patch).unwrap();
        assert_eq!(p.channels(), 3);
        assert!(p.data().iter().all(|&x| x == 0.5));
        assert!(m.predict_patch(&Volume::zeros(Grid3::cube(4), 5)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = ReferenceModel::from_parts(
            2,
            3,
            vec![0.1, -2.5, 3.0, 1e-9, 7.0, -0.0],
            vec![0.25, -1.0],
        )
        .unwrap();
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"WMRM");
        assert_eq!(bytes.len(), 12 + 8 * 8);
        assert_eq!(ReferenceModel::load(&path).unwrap(), m);
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(
            ReferenceModel::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
