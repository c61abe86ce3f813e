use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ReferenceModel;
use crate::error::{Error, Result};
use crate::qspace::{random_subset, select_subset, GradientTable, DEFAULT_SHELL_TOL};
use crate::shfit::{b0_normalize, NormalizeOptions, ShBasisSpec, ShFitter};
use crate::volume::{BinaryMask, Volume};

const VALIDATION_SALT: u64 = 0x7661_6c69_6461_7465;

/// Soft Dice loss `1 - mean_c (2 Σ p t + s) / (Σ p + Σ t + s)`.
pub fn soft_dice_loss(pred: &Volume, target: &Volume, smooth: f64) -> Result<f64> {
    soft_dice_grad(pred, target, smooth).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every entry of `pred`.
pub fn soft_dice_grad(pred: &Volume, target: &Volume, smooth: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, target)?;
    let p: Vec<f64> = pred.data().iter().map(|&x| x as f64).collect();
    Ok(dice_f64(&p, target.data(), pred.channels(), smooth))
}

fn check_pair(pred: &Volume, target: &Volume) -> Result<()> {
    if !pred.grid().same_shape(target.grid()) || pred.channels() != target.channels() {
        return Err(Error::Shape(format!(
            "prediction {:?} x {} vs target {:?} x {}",
            pred.grid().dims,
            pred.channels(),
            target.grid().dims,
            target.channels()
        )));
    }
    if pred.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Domain("prediction outside [0, 1]".into()));
    }
    if target.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Domain("target is not binary".into()));
    }
    Ok(())
}

pub(crate) fn dice_f64(
    pred: &[f64],
    target: &[f32],
    channels: usize,
    smooth: f64,
) -> (f64, Vec<f64>) {
    let n = pred.len() / channels;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let cf = channels as f64;
    for c in 0..channels {
        let p = &pred[c * n..(c + 1) * n];
        let t = &target[c * n..(c + 1) * n];
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for (&pv, &tv) in p.iter().zip(t) {
            inter += pv * tv as f64;
            sp += pv;
            st += tv as f64;
        }
        let num = 2.0 * inter + smooth;
        let den = sp + st + smooth;
        loss += num / den;
        let g = &mut grad[c * n..(c + 1) * n];
        for (gv, &tv) in g.iter_mut().zip(t) {
            *gv = -(2.0 * tv as f64 * den - num) / (den * den) / cf;
        }
    }
    (1.0 - loss / cf, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient at parameter {i}"
        )));
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + hp.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Patches per Adam step.
    pub batch_size: usize,
    /// Multiplier applied to the learning rate on a validation plateau.
    pub plateau_factor: f64,
    /// Validation loss must drop by more than this to count as a decrease.
    pub plateau_tol: f64,
    pub max_epochs: usize,
    pub iters_per_epoch: usize,
    pub subset_range: (usize, usize),
    pub validation_fraction: f64,
    /// Training patch edge length in voxels.
    pub patch: usize,
    pub b_target: f64,
    pub b_tol: f64,
    pub smooth: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 1,
            plateau_factor: 0.5,
            plateau_tol: 1e-6,
            max_epochs: 50,
            iters_per_epoch: 100,
            subset_range: (6, 12),
            validation_fraction: 0.2,
            patch: 32,
            b_target: 1000.0,
            b_tol: DEFAULT_SHELL_TOL,
            smooth: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.batch_size > 0
            && self.plateau_factor > 0.0
            && self.plateau_factor <= 1.0
            && self.max_epochs > 0
            && self.iters_per_epoch > 0
            && self.patch > 0
            && self.validation_fraction > 0.0
            && self.validation_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }
}

/// A scan prepared for training: b0-normalized full-table signal plus one
/// binary channel per tract.
#[derive(Clone, Debug)]
pub struct TrainingScan {
    pub normalized: Volume,
    pub table: GradientTable,
    pub labels: Volume,
}

impl TrainingScan {
    pub fn new(
        dwi: &Volume,
        b0: &Volume,
        table: GradientTable,
        labels: &[BinaryMask],
    ) -> Result<Self> {
        let normalized = b0_normalize(dwi, b0, NormalizeOptions::default())?.signal;
        let labels = Volume::stack(&labels.iter().map(BinaryMask::to_volume).collect::<Vec<_>>())?;
        Self::from_normalized(normalized, table, labels)
    }

    pub fn from_normalized(
        normalized: Volume,
        table: GradientTable,
        labels: Volume,
    ) -> Result<Self> {
        if normalized.channels() != table.len() {
            return Err(Error::Shape(format!(
                "{} channels for a {}-entry table",
                normalized.channels(),
                table.len()
            )));
        }
        if !normalized.grid().same_shape(labels.grid()) {
            return Err(Error::GridMismatch(format!(
                "signal {:?} vs labels {:?}",
                normalized.grid().dims,
                labels.grid().dims
            )));
        }
        if labels.channels() == 0 {
            return Err(Error::Config("no label channels".into()));
        }
        Ok(TrainingScan {
            normalized,
            table,
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub fn write_train_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn param_grads(
    model: &ReferenceModel,
    feats: &Volume,
    probs: &[f64],
    dprob: &[f64],
    out: &mut [f64],
) {
    let n = feats.grid().num_voxels();
    let nf = model.num_features();
    let nw = model.weights().len();
    for c in 0..dprob.len() / n {
        for v in 0..n {
            let p = probs[c * n + v];
            let dz = dprob[c * n + v] * p * (1.0 - p);
            if dz == 0.0 {
                continue;
            }
            for f in 0..nf {
                out[c * nf + f] += dz * feats.channel(f)[v] as f64;
            }
            out[nw + c] += dz;
        }
    }
}

/// Trains a [`ReferenceModel`] with subset-resampling augmentation.
///
/// The last `validation_fraction` of `data` (at least one scan) is held out.
/// Each iteration draws a fresh random subset, fits SH on one random patch
/// and takes an Adam step on the soft Dice loss. After every epoch the
/// learning rate is multiplied by `plateau_factor` if validation loss did not
/// decrease.
pub fn train_reference(
    data: &[TrainingScan],
    cfg: &TrainConfig,
) -> Result<(ReferenceModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let n_val = ((data.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
    if data.len() < n_val + 1 {
        return Err(Error::Config(format!(
            "need at least one training and one validation scan, got {}",
            data.len()
        )));
    }
    let (train, val) = data.split_at(data.len() - n_val);
    let classes = data[0].labels.channels();
    if data.iter().any(|s| s.labels.channels() != classes) {
        return Err(Error::Shape(
            "scans disagree on the number of tracts".into(),
        ));
    }
    let spec = ShBasisSpec::default();

    let val_feats: Vec<Volume> = val
        .iter()
        .map(|s| {
            let sel = select_subset(
                &s.table,
                6,
                cfg.b_target,
                cfg.b_tol,
                cfg.seed ^ VALIDATION_SALT,
            )?;
            let sig = s.normalized.select_channels(&sel.indices)?;
            Ok(ShFitter::new(&s.table.directions(&sel.indices), spec)?
                .fit(&sig)?
                .into_volume())
        })
        .collect::<Result<_>>()?;
    let val_loss = |m: &ReferenceModel| -> Result<f64> {
        let mut total = 0.0;
        for (f, s) in val_feats.iter().zip(val) {
            let probs = m.forward(f)?;
            total += dice_f64(&probs, s.labels.data(), classes, cfg.smooth).0;
        }
        Ok(total / val.len() as f64)
    };

    let mut model = ReferenceModel::zeros(classes, spec.num_coeffs());
    let mut params = model.params();
    let mut state = AdamState::new(params.len());
    let hp = AdamParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = cfg.lr;
    let mut log: Vec<EpochLog> = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.iters_per_epoch {
            let mut grads = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let scan = &train[rng.random_range(0..train.len())];
                let sel = random_subset(
                    &scan.table,
                    cfg.subset_range,
                    cfg.b_target,
                    cfg.b_tol,
                    &mut rng,
                )?;
                let dims = scan.normalized.grid().dims;
                let mut start = [0; 3];
                let mut size = dims;
                for a in 0..3 {
                    if dims[a] > cfg.patch {
                        start[a] = rng.random_range(0..=dims[a] - cfg.patch);
                        size[a] = cfg.patch;
                    }
                }
                let sig = scan.normalized.crop_channels(&sel.indices, start, size)?;
                let feats = ShFitter::new(&scan.table.directions(&sel.indices), spec)?
                    .fit(&sig)?
                    .into_volume();
                let target = scan.labels.crop(start, size)?;
                let probs = model.forward(&feats)?;
                let (loss, dprob) = dice_f64(&probs, target.data(), classes, cfg.smooth);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                batch_loss += loss;
                param_grads(&model, &feats, &probs, &dprob, &mut grads);
            }
            let scale = 1.0 / cfg.batch_size as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params, &grads, &mut state, lr, &hp)?;
            model.set_params(&params);
            epoch_loss += batch_loss * scale;
        }
        let v = val_loss(&model)?;
        if !v.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / cfg.iters_per_epoch as f64,
            val_loss: v,
            lr,
        });
        if let [.., prev, cur] = log.as_slice() {
            if cur.val_loss >= prev.val_loss - cfg.plateau_tol {
                lr *= cfg.plateau_factor;
            }
        }
    }
    Ok((model, log))
}

/// `members` models trained with seeds derived from `cfg.seed`.
pub fn train_ensemble(
    data: &[TrainingScan],
    cfg: &TrainConfig,
    members: usize,
) -> Result<Vec<ReferenceModel>> {
    (0..members as u64)
        .map(|i| {
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                ..cfg.clone()
            };
            train_reference(data, &cfg).map(|(m, _)| m)
        })
        .collect()
}
