//! Evaluation metrics and sparsity sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{abs_cosine_matrix, babel_coactivated, match_to_ground_truth, Dictionary};
use crate::encoders::{code_at_k, decode, encode_rows, EncoderModel, SparseCode};
use crate::error::{Error, Result};
use crate::generator::{Sampler, SampleBatch, TreeSpec};
use crate::numerics::{norm_sq, psd_eigvals, sub, DenseMatrix, RngStream};
use crate::training::{BatchSource, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Sparse codes of `n` inputs as an `n × p` matrix, optionally labelled by
/// modality.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub z: DenseMatrix,
    pub modality: Option<Vec<Modality>>,
}

impl CodeMatrix {
    pub fn new(z: DenseMatrix, modality: Option<Vec<Modality>>) -> Result<Self> {
        if !z.is_finite() {
            return Err(Error::domain("code matrix has non-finite entries"));
        }
        if let Some(m) = &modality {
            if m.len() != z.rows() {
                return Err(Error::shape(format!("{} modality labels for {} rows", m.len(), z.rows())));
            }
        }
        Ok(Self { z, modality })
    }

    pub fn from_codes(codes: &[SparseCode], p: usize) -> Result<Self> {
        let mut z = DenseMatrix::zeros(codes.len(), p);
        for (i, c) in codes.iter().enumerate() {
            if c.len() != p {
                return Err(Error::shape(format!("code {i} has {} latents, expected {p}", c.len())));
            }
            z.row_mut(i).copy_from_slice(c.values());
        }
        Self::new(z, None)
    }
}

/// `exp(H(λ̃))` for the normalized spectrum `λ̃` of `ZᵀZ`. The smaller of
/// `ZᵀZ` and `ZZᵀ` is diagonalized; both share their nonzero spectrum.
pub fn effective_rank(z: &DenseMatrix) -> Result<f64> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(Error::EmptyInput("empty code matrix".into()));
    }
    // latents that never fire contribute only zero eigenvalues
    let live: Vec<usize> = (0..z.cols()).filter(|&j| (0..z.rows()).any(|i| z[(i, j)] != 0.0)).collect();
    let z = z.select_cols(&live);
    if z.cols() == 0 {
        return Err(Error::domain("all-zero code matrix has no spectrum"));
    }
    let small = if z.rows() < z.cols() { z.transpose().gram() } else { z.gram() };
    let eig = psd_eigvals(&small)?;
    let total: f64 = eig.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("all-zero code matrix has no spectrum"));
    }
    let h: f64 = eig
        .iter()
        .map(|&l| l / total)
        .filter(|&l| l > 0.0)
        .map(|l| -l * l.ln())
        .sum();
    Ok(h.exp())
}

fn check_pair(xs: &DenseMatrix, xhs: &DenseMatrix) -> Result<()> {
    if xs.shape() != xhs.shape() {
        return Err(Error::shape(format!("inputs {:?} vs reconstructions {:?}", xs.shape(), xhs.shape())));
    }
    Ok(())
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the per-coordinate mean.
pub fn r_squared(xs: &DenseMatrix, xhs: &DenseMatrix) -> Result<f64> {
    check_pair(xs, xhs)?;
    let (n, m) = xs.shape();
    if n < 2 {
        return Err(Error::domain("R² needs at least two rows"));
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (a, v) in mean.iter_mut().zip(xs.row(i)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let (mut err, mut var) = (0.0, 0.0);
    for i in 0..n {
        err += norm_sq(&sub(xs.row(i), xhs.row(i)));
        var += norm_sq(&sub(xs.row(i), &mean));
    }
    if var == 0.0 {
        return Err(Error::domain("inputs have zero total variance"));
    }
    Ok(1.0 - err / var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMse {
    pub value: f64,
    /// Zero-norm rows left out of the mean.
    pub skipped: usize,
}

/// Mean over rows of `‖x̂ − x‖² / ‖x‖²`.
pub fn normalized_mse(xs: &DenseMatrix, xhs: &DenseMatrix) -> Result<NormalizedMse> {
    check_pair(xs, xhs)?;
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for i in 0..xs.rows() {
        let den = norm_sq(xs.row(i));
        if den == 0.0 {
            skipped += 1;
            continue;
        }
        sum += norm_sq(&sub(xs.row(i), xhs.row(i))) / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::domain(format!("all {skipped} rows have zero norm")));
    }
    Ok(NormalizedMse { value: sum / used as f64, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityScores {
    /// Per latent; NaN where the latent never fires.
    pub scores: Vec<f64>,
    pub inactive: Vec<usize>,
    pub text_energy_scale: f64,
}

/// Default text rescaling: image rows over text rows (1/5 for five captions
/// per image).
pub fn default_text_energy_scale(labels: &[Modality]) -> Result<f64> {
    let img = labels.iter().filter(|&&m| m == Modality::Image).count();
    let txt = labels.len() - img;
    if img == 0 || txt == 0 {
        return Err(Error::domain("both modalities must be present"));
    }
    Ok(img as f64 / txt as f64)
}

/// `E_img[z_i] / (E_img[z_i] + s · E_txt[z_i])` per latent.
pub fn modality_score(codes: &CodeMatrix, text_energy_scale: Option<f64>) -> Result<ModalityScores> {
    let labels = codes.modality.as_ref().ok_or_else(|| Error::domain("codes carry no modality labels"))?;
    let scale = match text_energy_scale {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::domain(format!("text energy scale must be positive, got {s}"))),
        None => default_text_energy_scale(labels)?,
    };
    let p = codes.z.cols();
    let (mut img, mut txt) = (vec![0.0; p], vec![0.0; p]);
    let (mut n_img, mut n_txt) = (0usize, 0usize);
    for (i, &m) in labels.iter().enumerate() {
        let (acc, n) = match m {
            Modality::Image => (&mut img, &mut n_img),
            Modality::Text => (&mut txt, &mut n_txt),
        };
        *n += 1;
        for (a, v) in acc.iter_mut().zip(codes.z.row(i)) {
            *a += v;
        }
    }
    if n_img == 0 || n_txt == 0 {
        return Err(Error::domain("both modalities must be present"));
    }
    let mut scores = Vec::with_capacity(p);
    let mut inactive = Vec::new();
    for j in 0..p {
        let a = img[j] / n_img as f64;
        let b = scale * txt[j] / n_txt as f64;
        if a + b == 0.0 {
            scores.push(f64::NAN);
            inactive.push(j);
        } else {
            scores.push(a / (a + b));
        }
    }
    Ok(ModalityScores { scores, inactive, text_energy_scale: scale })
}

/// Child atoms count as recovered when they fire at least this many times
/// more strongly on child-active samples than on parent-only samples.
pub const ABSORPTION_RECOVERY_RATIO: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    /// Ground-truth child atom indices, in order.
    pub children: Vec<usize>,
    /// `|cos(learned child atom, gt parent)|`, NaN when the child was not recovered.
    pub per_child: Vec<f64>,
    /// Mean over recovered children; NaN if none was recovered.
    pub mean: f64,
}

/// Absorption of each ground-truth child into its parent, measured on
/// `samples` fresh draws from `spec`.
pub fn absorption_score(
    model: &EncoderModel,
    spec: &TreeSpec,
    gt: &Dictionary,
    rng: &mut RngStream,
    samples: usize,
) -> Result<AbsorptionReport> {
    if (0..model.latents()).all(|j| model.atoms().col_norm(j) == 0.0) {
        return Err(Error::domain("every learned atom is zero"));
    }
    let children = spec.child_nodes();
    if children.is_empty() {
        return Err(Error::domain("tree has no child nodes"));
    }
    let batch = Sampler::new(spec)?.sample(gt, samples, rng)?;
    let codes = encode_rows(model, &batch.inputs)?;
    let p = model.latents();
    let mean_activation = |rows: &[usize]| -> Vec<f64> {
        let mut acc = vec![0.0; p];
        for &i in rows {
            for &j in codes[i].support() {
                acc[j] += codes[i].values()[j];
            }
        }
        acc.iter_mut().for_each(|v| *v /= rows.len().max(1) as f64);
        acc
    };
    let cos = abs_cosine_matrix(&Dictionary::from_parts_unchecked(model.atoms().clone(), vec![0.0; model.dim()], model.dictionary.norm_mode()), gt);
    let mut per_child = Vec::with_capacity(children.len());
    for &c in &children {
        let parent = spec.nodes[c].parent.expect("child nodes have parents");
        let (pa, ca) = (parent - 1, c - 1);
        let siblings: Vec<usize> = spec.children_of(parent).into_iter().map(|s| s - 1).collect();
        let parent_only: Vec<usize> = (0..samples)
            .filter(|&i| batch.codes[(i, pa)] != 0.0 && siblings.iter().all(|&s| batch.codes[(i, s)] == 0.0))
            .collect();
        let child_rows: Vec<usize> = (0..samples).filter(|&i| batch.codes[(i, ca)] != 0.0).collect();
        if parent_only.is_empty() || child_rows.is_empty() {
            per_child.push(f64::NAN);
            continue;
        }
        let on_parent = mean_activation(&parent_only);
        let on_child = mean_activation(&child_rows);
        let parent_atom = argmax(&on_parent, None);
        let child_atom = argmax(&on_child, Some(parent_atom));
        let recovered = on_child[child_atom] > 0.0
            && on_child[child_atom] >= ABSORPTION_RECOVERY_RATIO * on_parent[child_atom].max(0.0);
        per_child.push(if recovered { cos[(child_atom, pa)] } else { f64::NAN });
    }
    let ok: Vec<f64> = per_child.iter().copied().filter(|v| !v.is_nan()).collect();
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    Ok(AbsorptionReport { children: children.iter().map(|c| c - 1).collect(), per_child, mean })
}

fn argmax(v: &[f64], exclude: Option<usize>) -> usize {
    let mut best = usize::MAX;
    for (j, &x) in v.iter().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        if best == usize::MAX || x > v[best] {
            best = j;
        }
    }
    best
}

/// How well a model's codes reproduce the generator's codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `|cos|` of each ground-truth atom with its assigned learned atom.
    pub atom_cosines: Vec<f64>,
    /// Fraction of samples whose learned support maps exactly onto the true one.
    pub exact_support: f64,
    /// Largest coefficient error over all samples and atoms.
    pub max_coefficient_error: f64,
    pub mean_coefficient_error: f64,
    pub mean_l0: f64,
}

impl RecoveryReport {
    pub fn min_cosine(&self) -> f64 {
        self.atom_cosines.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Assigns learned atoms to ground truth, then compares supports and
/// sign-aligned coefficients sample by sample.
pub fn support_recovery(model: &EncoderModel, gt: &Dictionary, held_out: &SampleBatch) -> Result<RecoveryReport> {
    let learned = Dictionary::from_parts_unchecked(model.atoms().clone(), model.pre_bias().to_vec(), model.dictionary.norm_mode());
    let a = match_to_ground_truth(&learned, gt)?;
    let cos = abs_cosine_matrix(gt, &learned);
    let signs: Vec<f64> = (0..gt.len())
        .map(|g| a.get(g).map_or(1.0, |j| gt.atoms().col_dot(g, &learned.atom(j)).signum()))
        .collect();
    let atom_cosines = (0..gt.len()).map(|g| a.get(g).map_or(0.0, |j| cos[(g, j)])).collect();
    let inv = a.inverse(model.latents());
    let codes = encode_rows(model, &held_out.inputs)?;
    let n = held_out.inputs.rows();
    let q = gt.len();
    let (mut exact, mut max_err, mut sum_err, mut nnz) = (0usize, 0.0f64, 0.0, 0usize);
    for (i, z) in codes.iter().enumerate() {
        nnz += z.l0();
        let mut mapped = vec![0.0; q];
        let mut unmapped = false;
        for &j in z.support() {
            match inv[j] {
                Some(g) => mapped[g] += signs[g] * z.values()[j],
                None => unmapped = true,
            }
        }
        let truth = held_out.codes.row(i);
        if !unmapped && (0..q).all(|g| (mapped[g] != 0.0) == (truth[g] != 0.0)) {
            exact += 1;
        }
        for g in 0..q {
            let e = (mapped[g] - truth[g]).abs();
            max_err = max_err.max(e);
            sum_err += e;
        }
    }
    Ok(RecoveryReport {
        atom_cosines,
        exact_support: exact as f64 / n as f64,
        max_coefficient_error: max_err,
        mean_coefficient_error: sum_err / (n * q) as f64,
        mean_l0: nnz as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub r2: f64,
    pub normalized_mse: f64,
    /// NaN when every code is zero.
    pub effective_rank: f64,
    /// Mean pairwise-coherence Babel μ₁(1) over supports with two or more
    /// atoms; NaN when there are none.
    pub babel_coactivated: f64,
    /// `‖x̂ − x‖² / ‖x‖²` per evaluation row (NaN for zero rows).
    pub row_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// True when every row's error is non-increasing along the k grid.
    pub fn rowwise_non_increasing(&self, tol: f64) -> bool {
        self.points.windows(2).all(|w| {
            w[0].row_errors.iter().zip(&w[1].row_errors).all(|(a, b)| a.is_nan() || *b <= *a + tol)
        })
    }
}

/// Evaluates [`code_at_k`] reconstructions over `xs` for each `k`.
pub fn sweep_inference_k(model: &EncoderModel, xs: &DenseMatrix, k_values: &[usize]) -> Result<SweepResult> {
    if xs.cols() != model.dim() {
        return Err(Error::shape(format!("inputs have {} columns, model expects {}", xs.cols(), model.dim())));
    }
    let unit = unit_atoms(model);
    let points = k_values
        .par_iter()
        .map(|&k| -> Result<SweepPoint> {
            let codes: Vec<SparseCode> = (0..xs.rows()).map(|i| code_at_k(model, xs.row(i), k)).collect::<Result<_>>()?;
            let mut xh = DenseMatrix::zeros(xs.rows(), xs.cols());
            let mut row_errors = Vec::with_capacity(xs.rows());
            for (i, z) in codes.iter().enumerate() {
                let r = decode(model, z);
                let den = norm_sq(xs.row(i));
                row_errors.push(if den == 0.0 { f64::NAN } else { norm_sq(&sub(xs.row(i), &r)) / den });
                xh.row_mut(i).copy_from_slice(&r);
            }
            let zm = CodeMatrix::from_codes(&codes, model.latents())?;
            let supports: Vec<Vec<usize>> = codes.iter().map(|z| z.support().to_vec()).collect();
            let babel = unit
                .as_ref()
                .and_then(|d| babel_coactivated(d, &supports, 1).ok())
                .map_or(f64::NAN, |b| b.mean);
            Ok(SweepPoint {
                k,
                r2: r_squared(xs, &xh).unwrap_or(f64::NAN),
                normalized_mse: normalized_mse(xs, &xh)?.value,
                effective_rank: effective_rank(&zm.z).unwrap_or(f64::NAN),
                babel_coactivated: babel,
                row_errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { points })
}

/// Unit-normalized copy of the atoms for coherence measures; `None` if an
/// atom is zero.
fn unit_atoms(model: &EncoderModel) -> Option<Dictionary> {
    Dictionary::normalized(model.atoms().clone()).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    /// Position of the configuration in the input list.
    pub index: usize,
    pub variant: String,
    pub seed: u64,
    pub mean_l0: f64,
    pub r2: f64,
    pub normalized_mse: f64,
    /// `None` on success, otherwise the error that aborted the run.
    pub failure: Option<String>,
}

/// Trains every configuration, evaluates it on `eval`, and returns the rows
/// sorted by mean ℓ0 (failed runs last, in config order).
pub fn pareto_sweep<F>(configs: &[TrainConfig], make_source: F, eval: &DenseMatrix) -> Result<Vec<ParetoRow>>
where
    F: Fn(&TrainConfig) -> Result<Box<dyn BatchSource + Send>> + Sync,
{
    if configs.is_empty() {
        return Err(Error::EmptyInput("no configurations to sweep".into()));
    }
    let mut rows: Vec<ParetoRow> = configs
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let outcome = (|| -> Result<(f64, f64, f64)> {
                let mut source = make_source(cfg)?;
                let mut trainer = Trainer::new(cfg.clone(), eval.cols())?;
                trainer.run(source.as_mut(), None)?;
                evaluate_reconstruction(&trainer.model, eval)
            })();
            let base = ParetoRow {
                index,
                variant: cfg.variant.name().to_string(),
                seed: cfg.seed,
                mean_l0: f64::NAN,
                r2: f64::NAN,
                normalized_mse: f64::NAN,
                failure: None,
            };
            match outcome {
                Ok((mean_l0, r2, normalized_mse)) => ParetoRow { mean_l0, r2, normalized_mse, ..base },
                Err(e) => ParetoRow { failure: Some(e.to_string()), ..base },
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.failure
            .is_some()
            .cmp(&b.failure.is_some())
            .then(a.mean_l0.total_cmp(&b.mean_l0))
            .then(a.index.cmp(&b.index))
    });
    Ok(rows)
}

/// `(mean ℓ0, R², normalized MSE)` of the model's own encoder on `xs`.
pub fn evaluate_reconstruction(model: &EncoderModel, xs: &DenseMatrix) -> Result<(f64, f64, f64)> {
    let codes = encode_rows(model, xs)?;
    let mut xh = DenseMatrix::zeros(xs.rows(), xs.cols());
    for (i, z) in codes.iter().enumerate() {
        xh.row_mut(i).copy_from_slice(&decode(model, z));
    }
    let l0 = crate::encoders::mean_l0(&codes);
    Ok((l0, r_squared(xs, &xh)?, normalized_mse(xs, &xh)?.value))
}
