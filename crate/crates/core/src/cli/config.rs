//! Strict TOML run configuration and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::Variant;
use crate::error::{Error, Result};
use crate::generator::{default_tree, perfectly_correlated_mode, TreeSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Save a checkpoint every this many steps (0 = only at the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// When set, `train.latents` becomes this multiple of the data dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_factor: Option<usize>,
    pub data: DataConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_checkpoint_every() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Fresh draws from the hierarchical generator every step.
    Synthetic,
    /// Rows of an embedding file; the last `held_out` rows are kept for
    /// evaluation.
    Embedding {
        path: PathBuf,
        #[serde(default = "default_held_out")]
        held_out: usize,
    },
}

fn default_held_out() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Target mean cosine between sibling atoms (`None` = orthonormal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    /// `(mean, sd)` of parent magnitudes.
    pub parent_magnitude: (f64, f64),
    /// `(mean, sd)` of child magnitudes.
    pub child_magnitude: (f64, f64),
    /// Fixed magnitudes: every node fires at its mean.
    #[serde(default)]
    pub perfectly_correlated: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { correlation: None, parent_magnitude: (1.5, 0.25), child_magnitude: (1.5, 0.25), perfectly_correlated: false }
    }
}

impl TreeConfig {
    pub fn spec(&self) -> Result<TreeSpec> {
        let (pm, ps) = self.parent_magnitude;
        let (cm, cs) = self.child_magnitude;
        let mut spec = default_tree().with_magnitudes(pm, ps, cm, cs).with_correlation_target(self.correlation);
        if self.perfectly_correlated {
            spec = perfectly_correlated_mode(&spec);
        }
        spec.validate().map_err(|e| Error::Config(format!("tree: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    /// Samples from the hierarchical generator.
    Synthetic,
    /// Isotropic Gaussian rows with alternating modality labels.
    RandomEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub kind: GenKind,
    pub rows: usize,
    /// Row dimension for random embeddings (the tree fixes it otherwise).
    pub dim: usize,
    /// Scalar width in bytes: 4 or 8.
    pub scalar_width: u8,
    /// One image row per this many rows in random embeddings (0 = no labels).
    pub image_every: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { kind: GenKind::Synthetic, rows: 100_000, dim: 32, scalar_width: 8, image_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out synthetic samples for support recovery and reconstruction.
    pub held_out: usize,
    pub absorption_samples: usize,
    pub k_values: Vec<usize>,
    pub babel_max_r: usize,
    /// Text rescaling for modality scores (`None` = image rows / text rows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_energy_scale: Option<f64>,
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out: 1000,
            absorption_samples: 20_000,
            k_values: (1..=50).collect(),
            babel_max_r: 10,
            text_energy_scale: None,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    InferenceK,
    Pareto,
}

/// One pareto-grid cell: overrides applied to the run's `train` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub grid: Vec<GridEntry>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { mode: SweepMode::InferenceK, k_values: (1..=50).collect(), grid: Vec::new() }
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("synthetic-mp", include_str!("../../../../presets/synthetic-mp.toml")),
    ("synthetic-relu", include_str!("../../../../presets/synthetic-relu.toml")),
    ("synthetic-topk", include_str!("../../../../presets/synthetic-topk.toml")),
    ("synthetic-batch-topk", include_str!("../../../../presets/synthetic-batch-topk.toml")),
    ("synthetic-matryoshka", include_str!("../../../../presets/synthetic-matryoshka.toml")),
    ("embedding-mp", include_str!("../../../../presets/embedding-mp.toml")),
    ("embedding-topk", include_str!("../../../../presets/embedding-topk.toml")),
];

/// First key path present in `input` but absent from `parsed`.
fn stray_key(prefix: &str, input: &toml::Table, parsed: &toml::Table) -> Option<String> {
    for (k, v) in input {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, parsed.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(a), Some(toml::Value::Table(b))) => {
                if let Some(found) = stray_key(&path, a, b) {
                    return Some(found);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

impl RunConfig {
    /// Parses TOML, rejecting unknown keys, and validates the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // Unit enum variants accept stray keys during deserialization, so
        // also compare the input against what the parsed value serializes to.
        let input: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(key) = stray_key("", &input, &parsed) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .map(|p| p.1)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}; available: {}", preset_names().join(", "))))?;
        Self::from_toml(text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion_factor == Some(0) {
            return Err(Error::Config("expansion_factor must be positive".into()));
        }
        self.train.validate()?;
        self.tree.spec()?;
        if !matches!(self.gen.scalar_width, 4 | 8) {
            return Err(Error::Config(format!("gen.scalar_width must be 4 or 8, got {}", self.gen.scalar_width)));
        }
        if self.eval.held_out < 2 {
            return Err(Error::Config("eval.held_out must be at least 2".into()));
        }
        if let Some(s) = self.eval.text_energy_scale {
            if !(s > 0.0) {
                return Err(Error::Config(format!("eval.text_energy_scale must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Training configuration for data of dimension `dim`.
    pub fn train_for_dim(&self, dim: usize) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        if let Some(f) = self.expansion_factor {
            t.latents = f * dim;
            if let Variant::Matryoshka { prefixes } = &mut t.variant {
                if let Some(last) = prefixes.last_mut() {
                    *last = t.latents;
                }
            }
        }
        t.validate()?;
        Ok(t)
    }

    /// `base` with one pareto-grid cell's overrides applied.
    pub fn grid_config(base: &TrainConfig, entry: &GridEntry) -> TrainConfig {
        let mut t = base.clone();
        if let Some(v) = &entry.variant {
            t.variant = v.clone();
        }
        if let Some(s) = entry.sparsity_target {
            t.sparsity_target = s;
        }
        if let Some(s) = entry.seed {
            t.seed = s;
        }
        t
    }
}
