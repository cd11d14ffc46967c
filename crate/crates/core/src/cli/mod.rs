//! Command-line driver: run directories, dataset generation, training,
//! evaluation, sweeps and multi-run reports.
//!
//! Every command is a library function taking a resolved [`RunConfig`] and
//! a run directory, so tests and the Python bindings drive the same code
//! paths as the binary.

pub mod config;
pub mod embfile;
pub mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    absorption_score, effective_rank, evaluate_reconstruction, modality_score, pareto_sweep, support_recovery,
    sweep_inference_k, AbsorptionReport, CodeMatrix, Modality, RecoveryReport, SweepResult,
};
use crate::dictionary::{
    abs_cosine_matrix, babel_coactivated, babel_curve, flat_mse, hierarchical_mse, match_to_ground_truth, Dictionary,
};
use crate::encoders::{encode_rows, EncoderModel};
use crate::error::{Error, Result};
use crate::generator::{build_gt_dictionary, sample_batch, GroundTruth, SampleBatch, SiblingGroup, TreeSpec};
use crate::numerics::{DenseMatrix, RngStream};
use crate::training::{
    load_checkpoint, save_checkpoint, BatchSource, RowSource, StepRecord, SyntheticSource, TrainConfig, Trainer,
};

pub use config::{DataConfig, EvalConfig, GenConfig, GenKind, GridEntry, RunConfig, SweepConfig, SweepMode, TreeConfig};
pub use embfile::{read_embeddings, write_embeddings, EmbeddingFile, ScalarWidth};
pub use output::{RunLock, Table};

/// Stream ids derived from the run seed; training uses its own ids.
pub const STREAM_GT: u64 = 10;
pub const STREAM_GEN: u64 = 11;
pub const STREAM_HELD_OUT: u64 = 12;
pub const STREAM_ABSORPTION: u64 = 13;

pub const DATA_FILE: &str = "data.saeemb";
pub const CODES_FILE: &str = "codes.saeemb";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EVAL_FILE: &str = "eval.json";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Format(_)
        | Error::Checksum { .. }
        | Error::Version { .. }
        | Error::Io(_)
        | Error::Shape(_)
        | Error::Dimension(_)
        | Error::EmptyInput(_) => EXIT_DATA,
        Error::NonFinite { .. }
        | Error::Singular(_)
        | Error::RejectionBudget(_)
        | Error::Domain(_)
        | Error::Contract(_) => EXIT_NUMERIC,
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Relative data paths are taken relative to the run directory.
pub fn resolve_path(dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

fn data_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    match &cfg.data {
        DataConfig::Synthetic => dir.join(DATA_FILE),
        DataConfig::Embedding { path, .. } => resolve_path(dir, path),
    }
}

/// The tree and its ground-truth dictionary, fixed by the run seed.
pub fn ground_truth(cfg: &RunConfig) -> Result<(TreeSpec, GroundTruth)> {
    let spec = cfg.tree.spec()?;
    let gt = build_gt_dictionary(&spec, &mut RngStream::new(cfg.seed, STREAM_GT))?;
    Ok((spec, gt))
}

/// Training rows and held-out rows of an embedding run.
struct EmbeddingSplit {
    train: DenseMatrix,
    eval: DenseMatrix,
    eval_labels: Option<Vec<Modality>>,
}

fn load_embedding_split(cfg: &RunConfig, dir: &Path) -> Result<EmbeddingSplit> {
    let DataConfig::Embedding { held_out, .. } = &cfg.data else {
        return Err(Error::Config("run is not configured with embedding data".into()));
    };
    let file = read_embeddings(&data_path(cfg, dir))?;
    let n = file.data.rows();
    if *held_out == 0 || *held_out >= n {
        return Err(Error::EmptyInput(format!("held_out = {held_out} leaves no train or eval rows out of {n}")));
    }
    let cut = n - held_out;
    let train = file.data.select_rows(&(0..cut).collect::<Vec<_>>());
    let eval = file.data.select_rows(&(cut..n).collect::<Vec<_>>());
    let eval_labels = file.labels.map(|l| l[cut..].to_vec());
    Ok(EmbeddingSplit { train, eval, eval_labels })
}

/// What the evaluation rows are and where they came from.
enum EvalData {
    Synthetic { spec: TreeSpec, gt: GroundTruth, held: SampleBatch },
    Embedding { xs: DenseMatrix, labels: Option<Vec<Modality>> },
}

impl EvalData {
    fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        match cfg.data {
            DataConfig::Synthetic => {
                let (spec, gt) = ground_truth(cfg)?;
                let held = sample_batch(
                    &spec,
                    &gt.dictionary,
                    cfg.eval.held_out,
                    &mut RngStream::new(cfg.seed, STREAM_HELD_OUT),
                )?;
                Ok(EvalData::Synthetic { spec, gt, held })
            }
            DataConfig::Embedding { .. } => {
                let split = load_embedding_split(cfg, dir)?;
                Ok(EvalData::Embedding { xs: split.eval, labels: split.eval_labels })
            }
        }
    }

    fn inputs(&self) -> &DenseMatrix {
        match self {
            EvalData::Synthetic { held, .. } => &held.inputs,
            EvalData::Embedding { xs, .. } => xs,
        }
    }
}

fn data_dim(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    match cfg.data {
        DataConfig::Synthetic => Ok(cfg.tree.spec()?.dim),
        DataConfig::Embedding { .. } => Ok(read_embeddings(&data_path(cfg, dir))?.data.cols()),
    }
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub seed: u64,
    pub kind: GenKind,
    pub rows: usize,
    pub dim: usize,
    pub scalar_width: u8,
    pub data_file: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realized_sibling_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sibling_groups: Option<Vec<SiblingGroup>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_rows: Option<usize>,
    pub created_unix: u64,
}

/// Writes the dataset for `cfg` into `dir`: the embedding file and, for
/// synthetic data, the ground-truth codes, dictionary and level map.
pub fn cmd_gen(cfg: &RunConfig, dir: &Path) -> Result<GenManifest> {
    std::fs::create_dir_all(dir)?;
    let width = ScalarWidth::from_byte(cfg.gen.scalar_width).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.gen.rows == 0 {
        return Err(Error::Config("gen.rows must be positive".into()));
    }
    let path = data_path(cfg, dir);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut manifest = GenManifest {
        seed: cfg.seed,
        kind: cfg.gen.kind,
        rows: cfg.gen.rows,
        dim: 0,
        scalar_width: cfg.gen.scalar_width,
        data_file: path.clone(),
        mean_l0: None,
        realized_sibling_cosine: None,
        sibling_groups: None,
        image_rows: None,
        created_unix: unix_now(),
    };
    let stale = embfile::labels_path(&path);
    if stale.exists() {
        std::fs::remove_file(stale)?;
    }
    match cfg.gen.kind {
        GenKind::Synthetic => {
            let (spec, gt) = ground_truth(cfg)?;
            let batch = sample_batch(&spec, &gt.dictionary, cfg.gen.rows, &mut RngStream::new(cfg.seed, STREAM_GEN))?;
            write_embeddings(&path, &EmbeddingFile { data: batch.inputs.clone(), width, labels: None })?;
            write_embeddings(
                &dir.join(CODES_FILE),
                &EmbeddingFile { data: batch.codes.clone(), width: ScalarWidth::F64, labels: None },
            )?;
            output::matrix_table(gt.dictionary.atoms()).write(&dir.join("gt_dictionary.csv"))?;
            let mut levels = Table::new(&["atom", "level", "parent"]);
            for a in 0..gt.levels.len() {
                levels.push(vec![
                    a.to_string(),
                    gt.levels.level(a).to_string(),
                    gt.levels.parent(a).map_or(String::new(), |p| p.to_string()),
                ]);
            }
            levels.write(&dir.join("levels.csv"))?;
            manifest.dim = spec.dim;
            manifest.mean_l0 = Some(batch.mean_l0());
            manifest.realized_sibling_cosine = Some(gt.mean_sibling_cosine());
            manifest.sibling_groups = Some(gt.groups.clone());
        }
        GenKind::RandomEmbedding => {
            let (n, m) = (cfg.gen.rows, cfg.gen.dim);
            if m == 0 {
                return Err(Error::Config("gen.dim must be positive".into()));
            }
            let mut rng = RngStream::new(cfg.seed, STREAM_GEN);
            let values: Vec<f64> = (0..n * m).map(|_| rng.standard_normal()).collect();
            let data = DenseMatrix::from_vec(n, m, values)?;
            let labels = (cfg.gen.image_every > 0).then(|| {
                (0..n)
                    .map(|i| if i % cfg.gen.image_every == 0 { Modality::Image } else { Modality::Text })
                    .collect::<Vec<_>>()
            });
            manifest.image_rows = labels.as_ref().map(|l| l.iter().filter(|&&x| x == Modality::Image).count());
            write_embeddings(&path, &EmbeddingFile { data, width, labels })?;
            manifest.dim = m;
        }
    }
    output::write_json(&dir.join("gen_manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub seed: u64,
    pub variant: String,
    pub dim: usize,
    pub latents: usize,
    pub steps: usize,
    /// Step the run resumed from, when it did.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<usize>,
    pub final_loss: f64,
    pub final_mse: f64,
    pub final_mean_l0: f64,
    pub final_l1_weight: f64,
    pub created_unix: u64,
}

fn make_source(cfg: &RunConfig, dir: &Path) -> Result<(Box<dyn BatchSource + Send>, usize)> {
    match cfg.data {
        DataConfig::Synthetic => {
            let (spec, gt) = ground_truth(cfg)?;
            Ok((Box::new(SyntheticSource::new(&spec, gt.dictionary)?), spec.dim))
        }
        DataConfig::Embedding { .. } => {
            let split = load_embedding_split(cfg, dir)?;
            let dim = split.train.cols();
            Ok((Box::new(RowSource::new(split.train)?), dim))
        }
    }
}

fn history_table(history: &[StepRecord]) -> Table {
    let mut t = Table::new(&["step", "loss", "mse", "mean_l0", "l1_weight", "grad_norm"]);
    for r in history {
        t.push(vec![
            r.step.to_string(),
            output::fmt_f64(r.loss),
            output::fmt_f64(r.mse),
            output::fmt_f64(r.mean_l0),
            output::fmt_f64(r.l1_weight),
            output::fmt_f64(r.grad_norm),
        ]);
    }
    t
}

/// Trains the configured model, checkpointing every
/// `cfg.checkpoint_every` steps. With `resume`, training continues from
/// `model.ckpt` and produces exactly the files an uninterrupted run would.
/// On a non-finite loss the last good checkpoint is left in place and the
/// history up to the failure is written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<TrainManifest> {
    std::fs::create_dir_all(dir)?;
    let (mut source, dim) = make_source(cfg, dir)?;
    let tcfg = cfg.train_for_dim(dim)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let (mut trainer, resumed_from) = if resume {
        if !ckpt_path.exists() {
            return Err(Error::Config(format!("--resume given but {} does not exist", ckpt_path.display())));
        }
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.config != tcfg {
            return Err(Error::Config("checkpoint was written with a different training configuration".into()));
        }
        let step = ckpt.step;
        (Trainer::from_checkpoint(ckpt), Some(step))
    } else {
        (Trainer::new(tcfg, dim)?, None)
    };
    while !trainer.is_done() {
        if let Err(e) = trainer.step(source.as_mut()) {
            history_table(&trainer.history).write(&dir.join("history.csv"))?;
            return Err(e);
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && !trainer.is_done() {
            save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    history_table(&trainer.history).write(&dir.join("history.csv"))?;
    if cfg.eval.svg {
        let loss = output::Series {
            name: "loss".into(),
            points: trainer.history.iter().map(|r| (r.step as f64, r.loss)).collect(),
        };
        let l0 = output::Series {
            name: "mean l0".into(),
            points: trainer.history.iter().map(|r| (r.step as f64, r.mean_l0)).collect(),
        };
        std::fs::write(dir.join("loss.svg"), output::line_plot_svg("Training loss", "step", "loss", &[loss]))?;
        std::fs::write(dir.join("l0.svg"), output::line_plot_svg("Mean l0", "step", "l0", &[l0]))?;
    }
    let last = trainer.history.last().copied();
    let manifest = TrainManifest {
        seed: trainer.config.seed,
        variant: trainer.config.variant.name().to_string(),
        dim,
        latents: trainer.config.latents,
        steps: trainer.step,
        resumed_from,
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_mse: last.map_or(f64::NAN, |r| r.mse),
        final_mean_l0: last.map_or(f64::NAN, |r| r.mean_l0),
        final_l1_weight: trainer.l1_weight,
        created_unix: unix_now(),
    };
    output::write_json(&dir.join("train_manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub text_energy_scale: f64,
    pub active_latents: usize,
    pub inactive_latents: usize,
    /// Latents with score above 0.9.
    pub image_specific: usize,
    /// Latents with score below 0.1.
    pub text_specific: usize,
    pub multimodal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub step: usize,
    pub rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_rank: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flat_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hierarchical_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absorption: Option<AbsorptionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery: Option<RecoveryReport>,
    /// `mu1_full[r - 1]` is the Babel function of the unit-normalized atoms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub babel_full: Option<Vec<f64>>,
    /// Mean Babel over co-activated supports, by order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub babel_coactivated: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality: Option<ModalitySummary>,
    /// Metric name to the reason it could not be computed.
    pub omitted: BTreeMap<String, String>,
}

impl EvalReport {
    fn record<T>(&mut self, name: &str, value: Result<T>) -> Option<T> {
        match value {
            Ok(v) => Some(v),
            Err(e) => {
                self.omitted.insert(name.to_string(), e.to_string());
                None
            }
        }
    }
}

/// Loads the checkpoint at `path`, or `dir/model.ckpt` by default.
pub fn load_model(dir: &Path, path: Option<&Path>) -> Result<(EncoderModel, usize)> {
    let path = path.map_or_else(|| dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let ckpt = load_checkpoint(&path)?;
    Ok((ckpt.model, ckpt.step))
}

fn unit_dictionary(model: &EncoderModel) -> Result<Dictionary> {
    Dictionary::normalized(model.atoms().clone())
}

fn sweep_table(result: &SweepResult) -> Table {
    let mut t = Table::new(&["k", "r2", "normalized_mse", "effective_rank", "babel_coactivated"]);
    for p in &result.points {
        t.push(vec![
            p.k.to_string(),
            output::fmt_f64(p.r2),
            output::fmt_f64(p.normalized_mse),
            output::fmt_f64(p.effective_rank),
            output::fmt_f64(p.babel_coactivated),
        ]);
    }
    t
}

fn sweep_svg(result: &SweepResult, title: &str) -> String {
    let series = [
        output::Series {
            name: "normalized MSE".into(),
            points: result.points.iter().map(|p| (p.k as f64, p.normalized_mse)).collect(),
        },
        output::Series { name: "R2".into(), points: result.points.iter().map(|p| (p.k as f64, p.r2)).collect() },
    ];
    output::line_plot_svg(title, "inference k", "value", &series)
}

/// Evaluates a checkpoint on the run's evaluation rows. Metrics whose
/// preconditions fail are listed in `omitted` and the rest are still
/// written.
pub fn cmd_eval(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    std::fs::create_dir_all(dir)?;
    let (model, step) = load_model(dir, checkpoint)?;
    let data = EvalData::load(cfg, dir)?;
    let xs = data.inputs();
    if xs.cols() != model.dim() {
        return Err(Error::shape(format!("evaluation rows have {} columns, model expects {}", xs.cols(), model.dim())));
    }
    let mut report = EvalReport {
        variant: model.variant.name().to_string(),
        step,
        rows: xs.rows(),
        mean_l0: None,
        r2: None,
        normalized_mse: None,
        effective_rank: None,
        flat_mse: None,
        hierarchical_mse: None,
        absorption: None,
        recovery: None,
        babel_full: None,
        babel_coactivated: None,
        modality: None,
        omitted: BTreeMap::new(),
    };

    if let Some((l0, r2, nmse)) = report.record("reconstruction", evaluate_reconstruction(&model, xs)) {
        report.mean_l0 = Some(l0);
        report.r2 = Some(r2);
        report.normalized_mse = Some(nmse);
    }
    let codes = encode_rows(&model, xs)?;
    let zm = CodeMatrix::from_codes(&codes, model.latents())?;
    report.effective_rank = report.record("effective_rank", effective_rank(&zm.z));

    let unit = report.record("babel", unit_dictionary(&model));
    if let Some(d) = &unit {
        let max_r = cfg.eval.babel_max_r.min(d.len().saturating_sub(1));
        if max_r == 0 {
            report.omitted.insert("babel".into(), "dictionary has fewer than two atoms".into());
        } else {
            report.babel_full = report.record("babel_full", babel_curve(d, max_r));
            let supports: Vec<Vec<usize>> = codes.iter().map(|z| z.support().to_vec()).collect();
            let co = (1..=max_r)
                .map(|r| babel_coactivated(d, &supports, r).map(|b| if b.used == 0 { f64::NAN } else { b.mean }))
                .collect::<Result<Vec<_>>>();
            report.babel_coactivated = report.record("babel_coactivated", co);
            let mut t = Table::new(&["r", "mu1_full", "mu1_coactivated_mean"]);
            for r in 1..=max_r {
                let full = report.babel_full.as_ref().map_or(f64::NAN, |v| v[r - 1]);
                let co = report.babel_coactivated.as_ref().map_or(f64::NAN, |v| v[r - 1]);
                t.push(vec![r.to_string(), output::fmt_f64(full), output::fmt_f64(co)]);
            }
            t.write(&dir.join("babel.csv"))?;
        }
        output::matrix_table(&d.cosine_gram()).write(&dir.join("gram_learned.csv"))?;
    }

    match &data {
        EvalData::Synthetic { spec, gt, held } => {
            output::matrix_table(&gt.dictionary.cosine_gram()).write(&dir.join("gram_gt.csv"))?;
            output::matrix_table(&abs_cosine_matrix(&gt.dictionary, &model.dictionary))
                .write(&dir.join("gram_gt_alignment.csv"))?;
            if let Some(a) = report.record("assignment", match_to_ground_truth(&model.dictionary, &gt.dictionary)) {
                report.flat_mse = report.record("flat_mse", flat_mse(&model.dictionary, &gt.dictionary, &gt.levels, &a));
                report.hierarchical_mse =
                    report.record("hierarchical_mse", hierarchical_mse(&model.dictionary, &gt.dictionary, &gt.levels, &a));
            }
            report.absorption = report.record(
                "absorption",
                absorption_score(
                    &model,
                    spec,
                    &gt.dictionary,
                    &mut RngStream::new(cfg.seed, STREAM_ABSORPTION),
                    cfg.eval.absorption_samples,
                ),
            );
            report.recovery = report.record("recovery", support_recovery(&model, &gt.dictionary, held));
            report.omitted.insert("modality".into(), "synthetic data carries no modality labels".into());
        }
        EvalData::Embedding { labels, .. } => {
            for name in ["flat_mse", "hierarchical_mse", "absorption", "recovery"] {
                report.omitted.insert(name.into(), "needs a ground-truth dictionary (synthetic data only)".into());
            }
            match labels {
                None => {
                    report.omitted.insert("modality".into(), "no label sidecar next to the embedding file".into());
                }
                Some(labels) => {
                    let scored = CodeMatrix::new(zm.z.clone(), Some(labels.clone()))
                        .and_then(|c| modality_score(&c, cfg.eval.text_energy_scale));
                    if let Some(s) = report.record("modality", scored) {
                        let mut t = Table::new(&["latent", "score"]);
                        for (j, v) in s.scores.iter().enumerate() {
                            t.push(vec![j.to_string(), output::fmt_f64(*v)]);
                        }
                        t.write(&dir.join("modality.csv"))?;
                        let active: Vec<f64> = s.scores.iter().copied().filter(|v| !v.is_nan()).collect();
                        report.modality = Some(ModalitySummary {
                            text_energy_scale: s.text_energy_scale,
                            active_latents: active.len(),
                            inactive_latents: s.inactive.len(),
                            image_specific: active.iter().filter(|&&v| v > 0.9).count(),
                            text_specific: active.iter().filter(|&&v| v < 0.1).count(),
                            multimodal: active.iter().filter(|&&v| (0.1..=0.9).contains(&v)).count(),
                        });
                    }
                }
            }
        }
    }

    if !cfg.eval.k_values.is_empty() {
        if let Some(sweep) = report.record("k_curve", sweep_inference_k(&model, xs, &cfg.eval.k_values)) {
            sweep_table(&sweep).write(&dir.join("eval_k.csv"))?;
            if cfg.eval.svg {
                std::fs::write(dir.join("eval_k.svg"), sweep_svg(&sweep, "Reconstruction versus inference k"))?;
            }
        }
    }
    output::write_json(&dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- sweep

/// Runs the configured sweep and returns the CSV it wrote.
pub fn cmd_sweep(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>, mode: Option<SweepMode>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    match mode.unwrap_or(cfg.sweep.mode) {
        SweepMode::InferenceK => {
            let (model, _) = load_model(dir, checkpoint)?;
            let data = EvalData::load(cfg, dir)?;
            let result = sweep_inference_k(&model, data.inputs(), &cfg.sweep.k_values)?;
            let path = dir.join("sweep_inference_k.csv");
            sweep_table(&result).write(&path)?;
            if cfg.eval.svg {
                std::fs::write(dir.join("sweep_inference_k.svg"), sweep_svg(&result, "Inference-time k sweep"))?;
            }
            Ok(path)
        }
        SweepMode::Pareto => {
            let dim = data_dim(cfg, dir)?;
            let base = cfg.train_for_dim(dim)?;
            let configs: Vec<TrainConfig> = if cfg.sweep.grid.is_empty() {
                vec![base]
            } else {
                cfg.sweep.grid.iter().map(|e| RunConfig::grid_config(&base, e)).collect()
            };
            let eval = EvalData::load(cfg, dir)?;
            let rows = match cfg.data {
                DataConfig::Synthetic => {
                    let (spec, gt) = ground_truth(cfg)?;
                    pareto_sweep(
                        &configs,
                        |_| Ok(Box::new(SyntheticSource::new(&spec, gt.dictionary.clone())?) as Box<dyn BatchSource + Send>),
                        eval.inputs(),
                    )?
                }
                DataConfig::Embedding { .. } => {
                    let train = load_embedding_split(cfg, dir)?.train;
                    pareto_sweep(
                        &configs,
                        |_| Ok(Box::new(RowSource::new(train.clone())?) as Box<dyn BatchSource + Send>),
                        eval.inputs(),
                    )?
                }
            };
            let mut t = Table::new(&["index", "variant", "seed", "mean_l0", "r2", "normalized_mse", "status"]);
            for r in &rows {
                t.push(vec![
                    r.index.to_string(),
                    r.variant.clone(),
                    r.seed.to_string(),
                    output::fmt_f64(r.mean_l0),
                    output::fmt_f64(r.r2),
                    output::fmt_f64(r.normalized_mse),
                    r.failure.clone().map_or_else(|| "ok".to_string(), |f| format!("failed: {f}")),
                ]);
            }
            let path = dir.join("sweep_pareto.csv");
            t.write(&path)?;
            Ok(path)
        }
    }
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Median over the runs where the metric is finite.
    pub median: f64,
    pub runs: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// How runs are combined.
    pub aggregation: String,
    pub runs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// Collects every numeric scalar of a JSON document under dotted names.
/// Arrays are skipped.
fn numeric_leaves(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, Option<f64>>) {
    match v {
        serde_json::Value::Number(n) => {
            out.insert(prefix.to_string(), n.as_f64());
        }
        serde_json::Value::Null => {
            out.insert(prefix.to_string(), None);
        }
        serde_json::Value::Object(map) => {
            for (k, x) in map {
                if k == "omitted" {
                    continue;
                }
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                numeric_leaves(&name, x, out);
            }
        }
        _ => {}
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-metric medians of `eval.json` across run directories. Each metric
/// is aggregated independently, so the medians of two metrics may come
/// from different runs.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut per_run = Vec::with_capacity(runs.len());
    for r in runs {
        let doc: serde_json::Value = output::read_json(&r.join(EVAL_FILE))?;
        let mut leaves = BTreeMap::new();
        numeric_leaves("", &doc, &mut leaves);
        per_run.push(leaves);
    }
    let names: std::collections::BTreeSet<&String> = per_run.iter().flat_map(|m| m.keys()).collect();
    let mut metrics = BTreeMap::new();
    for name in names {
        let mut vals: Vec<f64> =
            per_run.iter().filter_map(|m| m.get(name).copied().flatten()).filter(|v| v.is_finite()).collect();
        let present = vals.len();
        metrics.insert(
            name.clone(),
            MetricSummary { median: median(&mut vals), runs: present, missing: runs.len() - present },
        );
    }
    let report = Report {
        aggregation: "per-metric median over runs; metrics are aggregated independently".into(),
        runs: runs.to_vec(),
        metrics,
    };
    output::write_json(&out.join("report.json"), &report)?;
    let mut t = Table::new(&["metric", "median", "runs", "missing"]);
    for (k, m) in &report.metrics {
        t.push(vec![k.clone(), output::fmt_f64(m.median), m.runs.to_string(), m.missing.to_string()]);
    }
    t.write(&out.join("report.csv"))?;
    Ok(report)
}

// ---------------------------------------------------------------- argv

#[derive(Debug, Parser)]
#[command(name = "mpsae", version, about = "Matching-pursuit sparse autoencoders: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration by name.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, value_name = "DIR", env = "MPSAE_OUT_DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N", env = "MPSAE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepModeArg {
    InferenceK,
    Pareto,
}

impl From<SweepModeArg> for SweepMode {
    fn from(m: SweepModeArg) -> Self {
        match m {
            SweepModeArg::InferenceK => SweepMode::InferenceK,
            SweepModeArg::Pareto => SweepMode::Pareto,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset into the run directory.
    Gen(RunArgs),
    /// Train a model and write its checkpoint and history.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Compute the metric suite for a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate (default: the run directory's).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Inference-k or pareto sweep.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<SweepModeArg>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Per-metric medians of eval.json across run directories.
    Report {
        /// Where report.json and report.csv go.
        #[arg(long, value_name = "DIR", env = "MPSAE_OUT_DIR")]
        out: PathBuf,
        #[arg(long, value_name = "N", env = "MPSAE_THREADS")]
        threads: Option<usize>,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Loads the configuration named by the flags and applies the seed and
/// output-directory overrides (flag, then environment, then config file).
pub fn resolve_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let (mut cfg, label) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let stem = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            (RunConfig::from_file(path)?, stem)
        }
        (None, Some(name)) => (RunConfig::preset(name)?, name.clone()),
        (None, None) => {
            return Err(Error::Config(format!(
                "one of --config or --preset is required (presets: {})",
                config::preset_names().join(", ")
            )))
        }
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{label}-seed{}", cfg.seed)));
    Ok((cfg, dir))
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

/// Executes one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Report { out, threads, runs } => {
            init_threads(threads)?;
            let _lock = RunLock::acquire(&out)?;
            let r = cmd_report(&runs, &out)?;
            println!("report over {} runs: {} metrics -> {}", r.runs.len(), r.metrics.len(), out.display());
        }
        Command::Gen(args) => {
            init_threads(args.threads)?;
            let (cfg, dir) = resolve_run(&args)?;
            let _lock = RunLock::acquire(&dir)?;
            let m = cmd_gen(&cfg, &dir)?;
            println!("wrote {} rows of dimension {} to {}", m.rows, m.dim, m.data_file.display());
        }
        Command::Train { run: args, resume } => {
            init_threads(args.threads)?;
            let (cfg, dir) = resolve_run(&args)?;
            let _lock = RunLock::acquire(&dir)?;
            let m = cmd_train(&cfg, &dir, resume)?;
            println!(
                "trained {} for {} steps: loss {:.6e}, mean l0 {:.3} -> {}",
                m.variant,
                m.steps,
                m.final_loss,
                m.final_mean_l0,
                dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { run: args, checkpoint } => {
            init_threads(args.threads)?;
            let (cfg, dir) = resolve_run(&args)?;
            let _lock = RunLock::acquire(&dir)?;
            let r = cmd_eval(&cfg, &dir, checkpoint.as_deref())?;
            println!(
                "evaluated {} on {} rows ({} metrics omitted) -> {}",
                r.variant,
                r.rows,
                r.omitted.len(),
                dir.join(EVAL_FILE).display()
            );
        }
        Command::Sweep { run: args, mode, checkpoint } => {
            init_threads(args.threads)?;
            let (cfg, dir) = resolve_run(&args)?;
            let _lock = RunLock::acquire(&dir)?;
            let path = cmd_sweep(&cfg, &dir, checkpoint.as_deref(), mode.map(Into::into))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
