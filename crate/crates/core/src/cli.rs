//! Command implementations behind the `wmtract` binary.
//!
//! Every command reads NIfTI-1, FSL gradient, CSV and JSON files and writes
//! the same formats. Outputs depend only on inputs and `--seed`. Failures
//! print one line, `error: <kind>: <message>`, and exit with status 1.
//!
//! A scan directory (written by `simulate`, read by `train` and `evaluate`)
//! holds `dwi.nii.gz`, `b0.nii.gz`, `dwi.bval`, `dwi.bvec`, `tracts.json`
//! and one `label_<tract>.nii.gz` per tract.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dwi_io::{read_gradients, read_nifti, write_gradients, write_nifti, NiftiDatatype};
use crate::error::{Error, Result};
use crate::model::{
    mc_dropout_predict, sliding_window_predict, train_reference, tta_predict_normalized,
    write_train_log, Blend, PatchSpec, PredictorInterface, ReferenceModel, TrainConfig,
    TrainingScan, TtaConfig, TtaResult,
};
use crate::phantom::{simulate, PhantomSpec};
use crate::qspace::{disjoint_subsets, GradientTable, SubsetSelection, DEFAULT_SHELL_TOL};
use crate::segmetrics::{
    calibrate_threshold, detection_stats, read_seg_rows, score_tracts, write_seg_rows,
    DetectionStats, SegRow, DEFAULT_DSC_CUT,
};
use crate::shfit::{b0_normalize, extract_b0, fit_subset, NormalizeOptions, ShBasisSpec};
use crate::uncertainty::{read_uncertainty_rows, Scorer, UncertaintyReport, DEFAULT_TAU};
use crate::volume::{argmax_threshold_binarize, BinaryMask, Volume};

pub const DWI_FILE: &str = "dwi.nii.gz";
pub const B0_FILE: &str = "b0.nii.gz";
pub const BVAL_FILE: &str = "dwi.bval";
pub const BVEC_FILE: &str = "dwi.bvec";
pub const TRACTS_FILE: &str = "tracts.json";
pub const PROB_FILE: &str = "prob.nii.gz";
pub const MODEL_FILE: &str = "model.bin";
pub const TTA_DIR: &str = "tta";

pub fn label_file(tract: &str) -> String {
    format!("label_{tract}.nii.gz")
}

pub fn mask_file(tract: &str) -> String {
    format!("mask_{tract}.nii.gz")
}

#[derive(Parser, Debug)]
#[command(
    name = "wmtract",
    version,
    about = "White-matter tract segmentation from diffusion MRI"
)]
pub struct Cli {
    /// JSON pipeline configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a tensor phantom into a scan directory.
    Simulate(SimulateArgs),
    /// Choose well-spread measurement subsets from a shell.
    SelectDirs(SelectDirsArgs),
    /// Train the reference model on scan directories.
    Train(TrainArgs),
    /// Segment a scan with test-time augmentation.
    Segment(SegmentArgs),
    /// Score the disagreement of a segmentation's TTA members.
    Uncertainty(UncertaintyArgs),
    /// Compare predicted masks with reference labels.
    Evaluate(EvaluateArgs),
    /// Detection statistics of `u > tau` against `dsc <= cut`.
    Detect(DetectArgs),
    /// Pick the threshold maximizing balanced accuracy.
    Calibrate(CalibrateArgs),
    /// Join uncertainty and DSC rows for plotting.
    Plotdata(PlotdataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    L1,
    L2,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::L1 => Scorer::L1,
            ScorerArg::L2 => Scorer::L2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BlendArg {
    Uniform,
    Cosine,
}

impl From<BlendArg> for Blend {
    fn from(b: BlendArg) -> Self {
        match b {
            BlendArg::Uniform => Blend::Uniform,
            BlendArg::Cosine => Blend::Cosine,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Phantom specification (JSON); two crossing tubes when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Grid edge length of the default phantom.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Noise level override, as a fraction of S0.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub bvals: Option<PathBuf>,
    #[arg(long)]
    pub bvecs: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectDirsArgs {
    #[arg(long)]
    pub bvals: Option<PathBuf>,
    #[arg(long)]
    pub bvecs: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of pairwise-disjoint subsets.
    #[arg(long, default_value_t = 1)]
    pub disjoint: usize,
    /// Shell b-value, s/mm².
    #[arg(long)]
    pub shell: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training scan directory; repeat for more scans.
    #[arg(long = "scan")]
    pub scans: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training patch edge length.
    #[arg(long)]
    pub patch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub dwi: Option<PathBuf>,
    /// Mean b0 volume; taken from the DWI's b0 channels when absent.
    #[arg(long)]
    pub b0: Option<PathBuf>,
    #[arg(long)]
    pub bvals: Option<PathBuf>,
    #[arg(long)]
    pub bvecs: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum)]
    pub blend: Option<BlendArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo weight-dropout passes for the baseline score.
    #[arg(long, default_value_t = 0)]
    pub dropout_samples: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout_rate: f64,
    /// Additional ensemble member checkpoint; repeatable.
    #[arg(long)]
    pub ensemble: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UncertaintyArgs {
    /// Output directory of `segment`.
    #[arg(long)]
    pub tta: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerArg>,
    /// Scan identifier for the report; the directory name when absent.
    #[arg(long)]
    pub scan_id: Option<String>,
    /// Report directory; the TTA directory when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory with `mask_<tract>` (or `label_<tract>`) files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference scan directory holding `label_<tract>` files.
    #[arg(long, alias = "labels")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub scan_id: Option<String>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Uncertainty CSV; repeatable.
    #[arg(long = "u", required = true)]
    pub u: Vec<PathBuf>,
    /// Metrics CSV; repeatable.
    #[arg(long = "dsc", required = true)]
    pub dsc: Vec<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dsc_cut: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long = "u", required = true)]
    pub u: Vec<PathBuf>,
    #[arg(long = "dsc", required = true)]
    pub dsc: Vec<PathBuf>,
    #[arg(long)]
    pub dsc_cut: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotdataArgs {
    #[arg(long = "u", required = true)]
    pub u: Vec<PathBuf>,
    #[arg(long = "dsc", required = true)]
    pub dsc: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Defaults shared by all commands, read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dwi: Option<PathBuf>,
    pub b0: Option<PathBuf>,
    pub bvals: Option<PathBuf>,
    pub bvecs: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub scans: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub tau: Option<f64>,
    pub patch: Option<usize>,
    pub stride: Option<usize>,
    pub blend: Option<Blend>,
    pub seed: Option<u64>,
    pub scorer: Option<Scorer>,
    pub shell: Option<f64>,
    pub dsc_cut: Option<f64>,
    pub train: Option<TrainConfig>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn required<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> Result<T> {
    flag.or(cfg)
        .ok_or_else(|| Error::Config(format!("missing --{name}")))
}

fn check_k(k: usize) -> Result<usize> {
    if !(6..=12).contains(&k) {
        return Err(Error::Config(format!("k = {k} outside [6, 12]")));
    }
    Ok(k)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn read_tracts(dir: &Path) -> Result<Vec<String>> {
    let p = dir.join(TRACTS_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_tracts(dir: &Path, names: &[String]) -> Result<()> {
    write_text(&dir.join(TRACTS_FILE), &to_json(&names)?)
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    BinaryMask::from_volume(&read_nifti(path)?)
}

/// A scan directory loaded into memory.
pub struct Scan {
    pub dwi: Volume,
    pub b0: Volume,
    pub table: GradientTable,
    pub tracts: Vec<String>,
    pub labels: Vec<BinaryMask>,
}

impl Scan {
    pub fn load(dir: &Path) -> Result<Self> {
        let dwi = read_nifti(dir.join(DWI_FILE))?;
        let table = read_gradients(dir.join(BVAL_FILE), dir.join(BVEC_FILE))?;
        let b0_path = dir.join(B0_FILE);
        let b0 = if b0_path.exists() {
            read_nifti(&b0_path)?
        } else {
            extract_b0(&dwi, &table)?
        };
        let tracts = read_tracts(dir)?;
        let labels = tracts
            .iter()
            .map(|t| read_mask(&dir.join(label_file(t))))
            .collect::<Result<_>>()?;
        Ok(Scan {
            dwi,
            b0,
            table,
            tracts,
            labels,
        })
    }
}

fn load_table(
    bvals: Option<PathBuf>,
    bvecs: Option<PathBuf>,
    cfg: &PipelineConfig,
) -> Result<Option<GradientTable>> {
    match (bvals.or(cfg.bvals.clone()), bvecs.or(cfg.bvecs.clone())) {
        (Some(a), Some(b)) => Ok(Some(read_gradients(a, b)?)),
        (None, None) => Ok(None),
        _ => Err(Error::Config("--bvals and --bvecs go together".into())),
    }
}

pub fn default_table() -> GradientTable {
    GradientTable::single_shell(90, 1000.0, 1)
}

fn cmd_simulate(a: SimulateArgs, cfg: &PipelineConfig) -> Result<()> {
    let out = required(a.out, cfg.out.clone(), "out")?;
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::crossing_tubes(a.size),
    };
    if let Some(s) = a.seed.or(cfg.seed) {
        spec.seed = s;
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    let table = load_table(a.bvals, a.bvecs, cfg)?.unwrap_or_else(default_table);
    let ph = simulate(&spec, &table)?;
    create_dir(&out)?;
    write_nifti(&ph.dwi, out.join(DWI_FILE), NiftiDatatype::Float32)?;
    write_nifti(&ph.b0, out.join(B0_FILE), NiftiDatatype::Float32)?;
    write_gradients(&table, out.join(BVAL_FILE), out.join(BVEC_FILE))?;
    for (name, m) in ph.label_names.iter().zip(&ph.labels) {
        write_nifti(
            &m.to_volume(),
            out.join(label_file(name)),
            NiftiDatatype::Uint8,
        )?;
    }
    write_tracts(&out, &ph.label_names)?;
    write_text(&out.join("phantom.json"), &to_json(&spec)?)
}

#[derive(Serialize)]
struct SubsetsReport<'a> {
    k: usize,
    shell: f64,
    seed: u64,
    subsets: &'a [SubsetSelection],
}

fn cmd_select_dirs(a: SelectDirsArgs, cfg: &PipelineConfig) -> Result<()> {
    let table = load_table(a.bvals, a.bvecs, cfg)?
        .ok_or_else(|| Error::Config("missing --bvals/--bvecs".into()))?;
    let k = check_k(a.k.or(cfg.k).unwrap_or(6))?;
    let shell = a.shell.or(cfg.shell).unwrap_or(1000.0);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let subsets = disjoint_subsets(&table, k, a.disjoint, shell, DEFAULT_SHELL_TOL, seed)?;
    let report = SubsetsReport {
        k,
        shell,
        seed,
        subsets: &subsets,
    };
    emit(a.out.as_deref(), &to_json(&report)?)
}

fn cmd_train(a: TrainArgs, cfg: &PipelineConfig) -> Result<()> {
    let out = required(a.out, cfg.out.clone(), "out")?;
    let dirs = if a.scans.is_empty() {
        cfg.scans.clone()
    } else {
        a.scans
    };
    if dirs.len() < 2 {
        return Err(Error::Config(
            "training needs at least two --scan directories".into(),
        ));
    }
    let mut tc = cfg.train.clone().unwrap_or_default();
    if let Some(s) = a.seed.or(cfg.seed) {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    if let Some(i) = a.iters {
        tc.iters_per_epoch = i;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(p) = a.patch {
        tc.patch = p;
    }
    let mut tracts: Option<Vec<String>> = None;
    let mut data = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let s = Scan::load(d)?;
        if tracts.as_ref().is_some_and(|t| *t != s.tracts) {
            return Err(Error::Config(format!(
                "{}: tract list differs",
                d.display()
            )));
        }
        data.push(TrainingScan::new(&s.dwi, &s.b0, s.table, &s.labels)?);
        tracts = Some(s.tracts);
    }
    let (model, log) = train_reference(&data, &tc)?;
    create_dir(&out)?;
    model.save(out.join(MODEL_FILE))?;
    write_train_log(&log, out.join("train_log.csv"))?;
    write_tracts(&out, &tracts.unwrap_or_default())?;
    write_text(&out.join("train_config.json"), &to_json(&tc)?)
}

fn model_tracts(model_path: &Path, classes: usize) -> Vec<String> {
    model_path
        .parent()
        .and_then(|d| read_tracts(d).ok())
        .filter(|t| t.len() == classes)
        .unwrap_or_else(|| (0..classes).map(|c| format!("tract{c}")).collect())
}

fn cmd_segment(a: SegmentArgs, cfg: &PipelineConfig) -> Result<()> {
    let out = required(a.out, cfg.out.clone(), "out")?;
    let dwi_path = required(a.dwi, cfg.dwi.clone(), "dwi")?;
    let model_path = required(a.model, cfg.model.clone(), "model")?;
    let table = load_table(a.bvals, a.bvecs, cfg)?
        .ok_or_else(|| Error::Config("missing --bvals/--bvecs".into()))?;
    let dwi = read_nifti(&dwi_path)?;
    let b0 = match a.b0.or(cfg.b0.clone()) {
        Some(p) => read_nifti(p)?,
        None => extract_b0(&dwi, &table)?,
    };
    let model = ReferenceModel::load(&model_path)?;
    let n = a.n.or(cfg.n).unwrap_or(5);
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let tta = TtaConfig {
        n,
        k: check_k(a.k.or(cfg.k).unwrap_or(6))?,
        seed: a.seed.or(cfg.seed).unwrap_or(0),
        b_target: cfg.shell.unwrap_or(1000.0),
        ..TtaConfig::default()
    };
    let patch = a.patch.or(cfg.patch).unwrap_or(96);
    let spec = PatchSpec::new(
        patch,
        a.stride.or(cfg.stride).unwrap_or((patch / 2).max(1)),
        a.blend
            .map(Blend::from)
            .or(cfg.blend)
            .unwrap_or(Blend::Cosine),
    )?;
    let normalized = b0_normalize(&dwi, &b0, NormalizeOptions::default())?.signal;
    let result = tta_predict_normalized(&model, &normalized, &table, &tta, &spec)?;
    let tracts = model_tracts(&model_path, model.num_classes());

    let tta_dir = out.join(TTA_DIR);
    create_dir(&tta_dir)?;
    write_nifti(&result.mean, out.join(PROB_FILE), NiftiDatatype::Float32)?;
    for (name, m) in tracts
        .iter()
        .zip(argmax_threshold_binarize(&result.mean, 0.5)?)
    {
        write_nifti(
            &m.to_volume(),
            out.join(mask_file(name)),
            NiftiDatatype::Uint8,
        )?;
    }
    write_tracts(&out, &tracts)?;
    for (i, y) in result.predictions.iter().enumerate() {
        write_nifti(
            y,
            tta_dir.join(format!("member_{i}.nii.gz")),
            NiftiDatatype::Float32,
        )?;
    }
    write_text(&tta_dir.join("subsets.json"), &to_json(&result.subsets)?)?;

    if a.dropout_samples > 0 || !a.ensemble.is_empty() {
        let first = &result.subsets[0];
        let coeffs = fit_subset(&normalized, &table, &first.indices, ShBasisSpec::default())?;
        if a.dropout_samples > 0 {
            let preds = mc_dropout_predict(
                &model,
                &coeffs,
                &spec,
                a.dropout_samples,
                a.dropout_rate,
                tta.seed,
            )?;
            for (i, y) in preds.iter().enumerate() {
                write_nifti(
                    y,
                    tta_dir.join(format!("dropout_{i}.nii.gz")),
                    NiftiDatatype::Float32,
                )?;
            }
        }
        let mut members = vec![sliding_window_predict(&model, &coeffs, &spec)?];
        for p in &a.ensemble {
            members.push(sliding_window_predict(
                &ReferenceModel::load(p)?,
                &coeffs,
                &spec,
            )?);
        }
        if members.len() > 1 {
            for (i, y) in members.iter().enumerate() {
                write_nifti(
                    y,
                    tta_dir.join(format!("ensemble_{i}.nii.gz")),
                    NiftiDatatype::Float32,
                )?;
            }
        }
    }
    Ok(())
}

fn read_family(dir: &Path, prefix: &str) -> Result<Vec<Volume>> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("{prefix}_{}.nii.gz", out.len()));
        if !p.exists() {
            return Ok(out);
        }
        out.push(read_nifti(&p)?);
    }
}

fn family(f: &[Volume]) -> Option<&[Volume]> {
    (f.len() >= 2).then_some(f)
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scan".into())
}

fn cmd_uncertainty(a: UncertaintyArgs, cfg: &PipelineConfig) -> Result<()> {
    let tta_dir = a.tta.join(TTA_DIR);
    let members = read_family(&tta_dir, "member")?;
    if members.is_empty() {
        return Err(Error::Config(format!(
            "no TTA members in {}",
            tta_dir.display()
        )));
    }
    let subsets: Vec<SubsetSelection> = {
        let p = tta_dir.join("subsets.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)?
    };
    let t = TtaResult::from_predictions(members, subsets)?;
    let tracts = read_tracts(&a.tta)?;
    let dropout = read_family(&tta_dir, "dropout")?;
    let ensemble = read_family(&tta_dir, "ensemble")?;
    let report = UncertaintyReport::build(
        &a.scan_id.unwrap_or_else(|| dir_name(&a.tta)),
        &tracts,
        &t,
        a.tau.or(cfg.tau).unwrap_or(DEFAULT_TAU),
        a.scorer
            .map(Scorer::from)
            .or(cfg.scorer)
            .unwrap_or_default(),
        family(&dropout),
        family(&ensemble),
    )?;
    let out = a.out.unwrap_or(a.tta);
    create_dir(&out)?;
    report.write_json(out.join("uncertainty.json"))?;
    report.write_csv(out.join("uncertainty.csv"))
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &PipelineConfig) -> Result<()> {
    let truth_dir = required(a.truth, cfg.labels.clone(), "truth")?;
    let tracts = read_tracts(&truth_dir)?;
    let truth = tracts
        .iter()
        .map(|t| read_mask(&truth_dir.join(label_file(t))))
        .collect::<Result<Vec<_>>>()?;
    let pred = tracts
        .iter()
        .map(|t| {
            let m = a.pred.join(mask_file(t));
            read_mask(&if m.exists() {
                m
            } else {
                a.pred.join(label_file(t))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = score_tracts(&pred, &truth)?;
    let scan_id = a.scan_id.unwrap_or_else(|| dir_name(&truth_dir));
    let rows: Vec<SegRow> = tracts
        .iter()
        .zip(scores)
        .map(|(t, s)| SegRow {
            scan_id: scan_id.clone(),
            tract: t.clone(),
            dsc: s.dsc,
            hd95_mm: s.hd95,
            assd_mm: s.assd,
        })
        .collect();
    match &a.out {
        Some(p) => write_seg_rows(&rows, p),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// `(scan_id, tract, u, dsc)` joined on scan and tract, in uncertainty-file order.
fn joined(u_files: &[PathBuf], dsc_files: &[PathBuf]) -> Result<Vec<(String, String, f64, f64)>> {
    let mut seg = Vec::new();
    for f in dsc_files {
        seg.extend(read_seg_rows(f)?);
    }
    let mut out = Vec::new();
    for f in u_files {
        for r in read_uncertainty_rows(f)? {
            let d = seg
                .iter()
                .find(|s| s.scan_id == r.scan_id && s.tract == r.tract)
                .ok_or_else(|| {
                    Error::Config(format!("no DSC row for {}/{}", r.scan_id, r.tract))
                })?;
            out.push((r.scan_id, r.tract, r.u, d.dsc));
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no uncertainty rows".into()));
    }
    Ok(out)
}

fn split(rows: &[(String, String, f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    rows.iter().map(|r| (r.2, r.3)).unzip()
}

fn cmd_detect(a: DetectArgs, cfg: &PipelineConfig) -> Result<()> {
    let (u, d) = split(&joined(&a.u, &a.dsc)?);
    let tau = a.tau.or(cfg.tau).unwrap_or(DEFAULT_TAU);
    let cut = a.dsc_cut.or(cfg.dsc_cut).unwrap_or(DEFAULT_DSC_CUT);
    let stats = detection_stats(&u, &d, tau, cut)?;
    emit(a.out.as_deref(), &to_json(&stats)?)
}

#[derive(Serialize)]
struct Calibration {
    tau: f64,
    dsc_cut: f64,
    balanced_accuracy: f64,
    stats: DetectionStats,
}

fn cmd_calibrate(a: CalibrateArgs, cfg: &PipelineConfig) -> Result<()> {
    let (u, d) = split(&joined(&a.u, &a.dsc)?);
    let cut = a.dsc_cut.or(cfg.dsc_cut).unwrap_or(DEFAULT_DSC_CUT);
    let (tau, stats) = calibrate_threshold(&u, &d, cut)?;
    let c = Calibration {
        tau,
        dsc_cut: cut,
        balanced_accuracy: stats.balanced_accuracy(),
        stats,
    };
    emit(a.out.as_deref(), &to_json(&c)?)
}

fn cmd_plotdata(a: PlotdataArgs) -> Result<()> {
    let rows = joined(&a.u, &a.dsc)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scan_id", "tract", "u", "dsc"])?;
    for (s, t, u, d) in &rows {
        w.write_record([s.clone(), t.clone(), u.to_string(), d.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&bytes))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let go = move || match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::SelectDirs(a) => cmd_select_dirs(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Segment(a) => cmd_segment(a, &cfg),
        Command::Uncertainty(a) => cmd_uncertainty(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Detect(a) => cmd_detect(a, &cfg),
        Command::Calibrate(a) => cmd_calibrate(a, &cfg),
        Command::Plotdata(a) => cmd_plotdata(a),
    };
    match cli.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(go),
        None => go(),
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            1
        }
    }
}
