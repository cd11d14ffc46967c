//! Binary checkpoint container.
//!
//! Layout: 9-byte magic, `u32` version, `u64` manifest length, the JSON
//! manifest, every array listed in the manifest as little-endian `f64`, and a
//! CRC-32 of everything before it. Reals live only in the binary section so
//! they round-trip bit for bit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, StepRecord, TrainConfig};
use crate::dictionary::{Dictionary, NormMode};
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngState};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MPSAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub step: usize,
    pub l1_weight: f64,
    pub rng: RngState,
    pub history: Vec<StepRecord>,
    pub usage: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TrainConfig,
    dim: usize,
    latents: usize,
    tied: bool,
    norm_mode: NormMode,
    step: usize,
    adam_step: u64,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    len: usize,
}

const HISTORY_FIELDS: usize = 6;

fn history_flat(history: &[StepRecord]) -> Vec<f64> {
    history
        .iter()
        .flat_map(|r| [r.step as f64, r.loss, r.mse, r.mean_l0, r.l1_weight, r.grad_norm])
        .collect()
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(&'static str, Vec<f64>)> {
        let mut out = vec![
            ("atoms", self.model.atoms().as_slice().to_vec()),
            ("pre_bias", self.model.pre_bias().to_vec()),
        ];
        if let Some(w) = &self.model.encoder_weights {
            out.push(("encoder_weights", w.as_slice().to_vec()));
        }
        out.push(("encoder_bias", self.model.encoder_bias.clone()));
        out.push(("adam_first", self.optimizer.first.clone()));
        out.push(("adam_second", self.optimizer.second.clone()));
        out.push(("history", history_flat(&self.history)));
        out.push(("usage", self.usage.clone()));
        out.push(("l1_weight", vec![self.l1_weight]));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let manifest = Manifest {
            config: self.config.clone(),
            dim: self.model.dim(),
            latents: self.model.latents(),
            tied: self.model.encoder_weights.is_none(),
            norm_mode: self.model.dictionary.norm_mode(),
            step: self.step,
            adam_step: self.optimizer.step,
            rng: self.rng,
            arrays: arrays.iter().map(|(n, v)| ArrayEntry { name: n.to_string(), len: v.len() }).collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 32 + arrays.iter().map(|(_, v)| 8 * v.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CHECKPOINT_MAGIC.len() + 4 + 8;
        if bytes.len() < header + 4 {
            return Err(Error::Format(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut at = CHECKPOINT_MAGIC.len();
        let version = u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        at += 4;
        let json_len = u64::from_le_bytes(body[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        if json_len > body.len() - at {
            return Err(Error::Format("manifest length exceeds file size".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[at..at + json_len]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        at += json_len;
        let payload = &body[at..];
        let total: usize = manifest.arrays.iter().map(|a| a.len).sum();
        if payload.len() != 8 * total {
            return Err(Error::Format(format!("payload holds {} bytes, manifest declares {}", payload.len(), 8 * total)));
        }
        let mut cursor = 0;
        let mut arrays = std::collections::HashMap::new();
        for a in &manifest.arrays {
            let v: Vec<f64> = payload[cursor..cursor + 8 * a.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor += 8 * a.len;
            arrays.insert(a.name.as_str(), v);
        }
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Format(format!("missing array {name}")));
        let (m, p) = (manifest.dim, manifest.latents);
        let atoms = DenseMatrix::from_vec(m, p, take("atoms")?)?;
        let pre_bias = take("pre_bias")?;
        let weights = if manifest.tied { None } else { Some(DenseMatrix::from_vec(m, p, take("encoder_weights")?)?) };
        let encoder_bias = take("encoder_bias")?;
        let first = take("adam_first")?;
        let second = take("adam_second")?;
        let history_raw = take("history")?;
        let usage = take("usage")?;
        let l1 = take("l1_weight")?;
        if pre_bias.len() != m || encoder_bias.len() != p || l1.len() != 1 || first.len() != second.len() {
            return Err(Error::Format("array lengths inconsistent with the declared shape".into()));
        }
        if history_raw.len() % HISTORY_FIELDS != 0 {
            return Err(Error::Format("history array is not a whole number of records".into()));
        }
        let history = history_raw
            .chunks_exact(HISTORY_FIELDS)
            .map(|c| StepRecord {
                step: c[0] as usize,
                loss: c[1],
                mse: c[2],
                mean_l0: c[3],
                l1_weight: c[4],
                grad_norm: c[5],
            })
            .collect();
        let model = EncoderModel {
            dictionary: Dictionary::from_parts_unchecked(atoms, pre_bias, manifest.norm_mode),
            encoder_weights: weights,
            encoder_bias,
            variant: manifest.config.variant.clone(),
        };
        model.validate()?;
        Ok(Checkpoint {
            model,
            optimizer: AdamState { first, second, step: manifest.adam_step },
            config: manifest.config,
            step: manifest.step,
            l1_weight: l1[0],
            rng: manifest.rng,
            history,
            usage,
        })
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
}
