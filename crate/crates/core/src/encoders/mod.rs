//! Inference procedures: ReLU, TopK, BatchTopK, Matryoshka prefix decoding
//! and unrolled matching pursuit, plus an OMP reference.

use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, NormMode};
use crate::error::{Error, Result};
use crate::numerics::{norm, norm_sq, solve_spd, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum StopRule {
    /// Exactly `steps` pursuit steps.
    FixedSteps { steps: usize },
    /// Stop once the residual norm drops below `threshold`, after
    /// `max_steps`, or after a step that re-selects an atom already in the
    /// support (the support has stabilized).
    Residual { threshold: f64, max_steps: usize },
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StopRule::FixedSteps { .. } => Ok(()),
            StopRule::Residual { threshold, .. } if threshold >= 0.0 && threshold.is_finite() => Ok(()),
            StopRule::Residual { threshold, .. } => Err(Error::domain(format!("bad residual threshold {threshold}"))),
        }
    }

    pub fn max_steps(&self) -> usize {
        match *self {
            StopRule::FixedSteps { steps } => steps,
            StopRule::Residual { max_steps, .. } => max_steps,
        }
    }
}

/// How the pursuit picks the next atom.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// `argmax_j ⟨D_j, r⟩`.
    #[default]
    Signed,
    /// `argmax_j |⟨D_j, r⟩|`, classical matching pursuit.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Variant {
    Relu,
    #[serde(rename = "topk")]
    TopK { k: usize },
    /// `k` is the mean number of active latents per row; may be fractional.
    #[serde(rename = "batch-topk")]
    BatchTopK { k: f64 },
    Matryoshka { prefixes: Vec<usize> },
    Mp {
        stop: StopRule,
        #[serde(default)]
        selection: Selection,
    },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Relu => "relu",
            Variant::TopK { .. } => "topk",
            Variant::BatchTopK { .. } => "batch-topk",
            Variant::Matryoshka { .. } => "matryoshka",
            Variant::Mp { .. } => "mp",
        }
    }

    pub fn is_mp(&self) -> bool {
        matches!(self, Variant::Mp { .. })
    }
}

/// Encoder/decoder parameters. `encoder_weights == None` means the encoder is
/// tied to the dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub dictionary: Dictionary,
    pub encoder_weights: Option<DenseMatrix>,
    pub encoder_bias: Vec<f64>,
    pub variant: Variant,
}

impl EncoderModel {
    pub fn new(
        dictionary: Dictionary,
        encoder_weights: Option<DenseMatrix>,
        encoder_bias: Vec<f64>,
        variant: Variant,
    ) -> Result<Self> {
        let model = Self { dictionary, encoder_weights, encoder_bias, variant };
        model.validate()?;
        Ok(model)
    }

    /// Matching-pursuit model with tied weights.
    pub fn mp(dictionary: Dictionary, stop: StopRule) -> Result<Self> {
        let p = dictionary.len();
        Self::new(dictionary, None, vec![0.0; p], Variant::Mp { stop, selection: Selection::Signed })
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.dictionary.dim(), self.dictionary.len());
        if let Some(w) = &self.encoder_weights {
            if w.shape() != (m, p) {
                return Err(Error::shape(format!("encoder weights {:?}, expected ({m}, {p})", w.shape())));
            }
        }
        if self.encoder_bias.len() != p {
            return Err(Error::shape("encoder bias length differs from dictionary size"));
        }
        match &self.variant {
            Variant::Mp { stop, .. } => {
                stop.validate()?;
                if self.dictionary.norm_mode() != NormMode::ExactUnit {
                    return Err(Error::Contract("matching pursuit needs an exact-unit dictionary".into()));
                }
                if self.encoder_weights.is_some() {
                    return Err(Error::Contract("matching pursuit selects against the decoder atoms; weights must be tied".into()));
                }
            }
            Variant::TopK { k } if *k == 0 || *k > p => {
                return Err(Error::domain(format!("top-k {k} outside 1..={p}")));
            }
            Variant::BatchTopK { k } if !(*k > 0.0 && *k <= p as f64) => {
                return Err(Error::domain(format!("batch top-k {k} outside (0, {p}]")));
            }
            Variant::Matryoshka { prefixes } => check_prefixes(prefixes, p)?,
            _ => {}
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dictionary.dim()
    }

    pub fn latents(&self) -> usize {
        self.dictionary.len()
    }

    pub fn atoms(&self) -> &DenseMatrix {
        self.dictionary.atoms()
    }

    pub fn pre_bias(&self) -> &[f64] {
        self.dictionary.pre_bias()
    }

    /// Encoder weight matrix (`m × p`), the dictionary itself when tied.
    pub fn weights(&self) -> &DenseMatrix {
        self.encoder_weights.as_ref().unwrap_or(self.dictionary.atoms())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("input has length {}, model expects {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// `Wᵀ(x − b_pre) + b`.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let centered: Vec<f64> = x.iter().zip(self.pre_bias()).map(|(a, b)| a - b).collect();
        let mut pre = self.weights().tr_mul_vec(&centered);
        pre.iter_mut().zip(&self.encoder_bias).for_each(|(a, b)| *a += b);
        Ok(pre)
    }
}

pub(crate) fn check_prefixes(prefixes: &[usize], p: usize) -> Result<()> {
    if prefixes.is_empty() {
        return Err(Error::domain("matryoshka needs at least one prefix"));
    }
    if prefixes.windows(2).any(|w| w[0] >= w[1]) || prefixes[0] == 0 {
        return Err(Error::domain(format!("prefixes {prefixes:?} must be positive and strictly increasing")));
    }
    if *prefixes.last().unwrap() != p {
        return Err(Error::domain(format!("last prefix must equal the latent count {p}")));
    }
    Ok(())
}

/// Coefficient vector with its explicit support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    values: Vec<f64>,
    support: Vec<usize>,
}

impl SparseCode {
    pub fn from_dense(values: Vec<f64>) -> Self {
        let support = values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        Self { values, support }
    }

    pub fn zeros(p: usize) -> Self {
        Self { values: vec![0.0; p], support: Vec::new() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn l0(&self) -> usize {
        self.support.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Keeps the `k` largest-magnitude coordinates, ties to the lowest index.
    pub fn truncate_top_k(&self, k: usize) -> Self {
        let keep = top_k_indices(&self.values, k, |v| v.abs());
        let mut values = vec![0.0; self.values.len()];
        for i in keep {
            values[i] = self.values[i];
        }
        Self::from_dense(values)
    }
}

/// Indices of the `k` largest `key(v)` among nonzero entries, ties broken by
/// lowest index; returned in increasing index order.
fn top_k_indices(values: &[f64], k: usize, key: impl Fn(f64) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    idx.sort_by(|&a, &b| key(values[b]).total_cmp(&key(values[a])).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// One step of a matching-pursuit trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpStep {
    pub index: usize,
    /// `⟨D_j, r⟩` before the update.
    pub coefficient: f64,
    /// `‖r‖` after the update.
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpTrace {
    pub initial_residual_norm: f64,
    pub steps: Vec<MpStep>,
}

impl MpTrace {
    pub fn final_residual_norm(&self) -> f64 {
        self.steps.last().map_or(self.initial_residual_norm, |s| s.residual_norm)
    }
}

fn select(scores: &[f64], selection: Selection) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        let v = match selection {
            Selection::Signed => s,
            Selection::Absolute => s.abs(),
        };
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Runs the pursuit on `residual` in place, returning the steps taken.
pub(crate) fn pursue(atoms: &DenseMatrix, residual: &mut [f64], stop: &StopRule, selection: Selection) -> Vec<MpStep> {
    pursue_with(atoms, residual, stop, selection, |_| {})
}

/// [`pursue`] that hands `before_step` the residual ahead of every update.
pub(crate) fn pursue_with(
    atoms: &DenseMatrix,
    residual: &mut [f64],
    stop: &StopRule,
    selection: Selection,
    mut before_step: impl FnMut(&[f64]),
) -> Vec<MpStep> {
    let p = atoms.cols();
    let mut steps: Vec<MpStep> = Vec::new();
    if p == 0 {
        return steps;
    }
    let mut rnorm = norm(residual);
    let mut selected = vec![false; p];
    while steps.len() < stop.max_steps() {
        if let StopRule::Residual { threshold, .. } = stop {
            if rnorm < *threshold {
                break;
            }
        }
        let scores = atoms.tr_mul_vec(residual);
        let j = select(&scores, selection);
        let c = scores[j];
        before_step(residual);
        atoms.axpy_col(j, -c, residual);
        rnorm = norm(residual);
        let repeated = std::mem::replace(&mut selected[j], true);
        steps.push(MpStep { index: j, coefficient: c, residual_norm: rnorm });
        if repeated && matches!(stop, StopRule::Residual { .. }) {
            break;
        }
    }
    steps
}

/// `max(0, Wᵀ(x − b_pre) + b)`.
pub fn encode_relu(model: &EncoderModel, x: &[f64]) -> Result<SparseCode> {
    let mut pre = model.pre_activations(x)?;
    pre.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(SparseCode::from_dense(pre))
}

/// ReLU code restricted to its `k` largest entries.
pub fn encode_topk(model: &EncoderModel, x: &[f64]) -> Result<SparseCode> {
    let Variant::TopK { k } = model.variant else {
        return Err(Error::Contract(format!("encode_topk called on a {} model", model.variant.name())));
    };
    topk_code(model, x, k)
}

pub(crate) fn topk_code(model: &EncoderModel, x: &[f64], k: usize) -> Result<SparseCode> {
    if k > model.latents() {
        return Err(Error::domain(format!("k = {k} exceeds {} latents", model.latents())));
    }
    let relu = encode_relu(model, x)?;
    let keep = top_k_indices(relu.values(), k, |v| v);
    let mut values = vec![0.0; model.latents()];
    for i in keep {
        values[i] = relu.values()[i];
    }
    Ok(SparseCode::from_dense(values))
}

/// Number of activations a batch of `rows` keeps under batch top-k.
pub fn batch_topk_budget(k: f64, rows: usize) -> usize {
    (k * rows as f64).round() as usize
}

/// ReLU codes of the whole batch, keeping the `round(k·n)` largest
/// activations globally (ties: lowest row, then lowest latent).
pub fn encode_batch_topk(model: &EncoderModel, xs: &DenseMatrix) -> Result<Vec<SparseCode>> {
    let Variant::BatchTopK { k } = model.variant else {
        return Err(Error::Contract(format!("encode_batch_topk called on a {} model", model.variant.name())));
    };
    batch_topk_codes(model, xs, k)
}

pub(crate) fn batch_topk_codes(model: &EncoderModel, xs: &DenseMatrix, k: f64) -> Result<Vec<SparseCode>> {
    let (n, p) = (xs.rows(), model.latents());
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    if k * n as f64 > (n * p) as f64 || k < 0.0 {
        return Err(Error::domain(format!("batch top-k {k} exceeds {p} latents")));
    }
    let relu: Vec<Vec<f64>> = (0..n)
        .map(|i| encode_relu(model, xs.row(i)).map(SparseCode::into_values))
        .collect::<Result<_>>()?;
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (i, row) in relu.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if *v > 0.0 {
                entries.push((i, j));
            }
        }
    }
    entries.sort_by(|a, b| relu[b.0][b.1].total_cmp(&relu[a.0][a.1]).then(a.cmp(b)));
    entries.truncate(batch_topk_budget(k, n));
    let mut out = vec![vec![0.0; p]; n];
    for (i, j) in entries {
        out[i][j] = relu[i][j];
    }
    Ok(out.into_iter().map(SparseCode::from_dense).collect())
}

/// Matching pursuit with the model's stop rule.
pub fn encode_mp(model: &EncoderModel, x: &[f64]) -> Result<(SparseCode, MpTrace)> {
    let Variant::Mp { stop, selection } = &model.variant else {
        return Err(Error::Contract(format!("encode_mp called on a {} model", model.variant.name())));
    };
    mp_with(model, x, stop, *selection)
}

pub(crate) fn mp_with(model: &EncoderModel, x: &[f64], stop: &StopRule, selection: Selection) -> Result<(SparseCode, MpTrace)> {
    if model.dictionary.norm_mode() != NormMode::ExactUnit {
        return Err(Error::Contract("matching pursuit needs an exact-unit dictionary".into()));
    }
    model.check_input(x)?;
    let mut r: Vec<f64> = x.iter().zip(model.pre_bias()).map(|(a, b)| a - b).collect();
    let initial_residual_norm = norm(&r);
    let steps = pursue(model.atoms(), &mut r, stop, selection);
    let mut z = vec![0.0; model.latents()];
    for s in &steps {
        z[s.index] += s.coefficient;
    }
    Ok((SparseCode::from_dense(z), MpTrace { initial_residual_norm, steps }))
}

/// Orthogonal matching pursuit with `k` selections (reference only).
pub fn encode_omp(model: &EncoderModel, x: &[f64], k: usize) -> Result<SparseCode> {
    let d = &model.dictionary;
    if d.norm_mode() != NormMode::ExactUnit {
        return Err(Error::Contract("OMP needs an exact-unit dictionary".into()));
    }
    model.check_input(x)?;
    if k > d.dim().min(d.len()) {
        return Err(Error::domain(format!("k = {k} exceeds min(m, p)")));
    }
    let selection = match &model.variant {
        Variant::Mp { selection, .. } => *selection,
        _ => Selection::Signed,
    };
    let target: Vec<f64> = x.iter().zip(model.pre_bias()).map(|(a, b)| a - b).collect();
    let mut r = target.clone();
    let mut support: Vec<usize> = Vec::new();
    let mut coef: Vec<f64> = Vec::new();
    for _ in 0..k {
        let mut scores = model.atoms().tr_mul_vec(&r);
        for &s in &support {
            scores[s] = f64::NEG_INFINITY;
        }
        if selection == Selection::Absolute {
            scores.iter_mut().for_each(|v| *v = if v.is_finite() { v.abs() } else { *v });
        }
        let j = select(&scores, Selection::Signed);
        support.push(j);
        let sub = d.atoms().select_cols(&support);
        let g = sub.gram();
        let rhs = sub.tr_mul_vec(&target);
        coef = solve_spd(&g, &rhs)?;
        r = target.clone();
        for (c, &s) in coef.iter().zip(&support) {
            d.atoms().axpy_col(s, -c, &mut r);
        }
    }
    let mut z = vec![0.0; d.len()];
    for (c, &s) in coef.iter().zip(&support) {
        z[s] = *c;
    }
    Ok(SparseCode::from_dense(z))
}

/// `D z + b_pre` using the support only.
pub fn decode(model: &EncoderModel, z: &SparseCode) -> Vec<f64> {
    let mut out = model.pre_bias().to_vec();
    for &j in z.support() {
        model.atoms().axpy_col(j, z.values()[j], &mut out);
    }
    out
}

/// Decode from latents with index `< prefix_len` only.
pub fn decode_prefix(model: &EncoderModel, z: &SparseCode, prefix_len: usize) -> Result<Vec<f64>> {
    let Variant::Matryoshka { prefixes } = &model.variant else {
        return Err(Error::Contract(format!("decode_prefix called on a {} model", model.variant.name())));
    };
    if !prefixes.contains(&prefix_len) {
        return Err(Error::domain(format!("prefix {prefix_len} not among {prefixes:?}")));
    }
    Ok(decode_prefix_unchecked(model, z, prefix_len))
}

pub(crate) fn decode_prefix_unchecked(model: &EncoderModel, z: &SparseCode, prefix_len: usize) -> Vec<f64> {
    let mut out = model.pre_bias().to_vec();
    for &j in z.support().iter().take_while(|&&j| j < prefix_len) {
        model.atoms().axpy_col(j, z.values()[j], &mut out);
    }
    out
}

/// Encodes with the model's own variant. Batch top-k needs the batch, so a
/// single row is treated as a batch of one.
pub fn encode(model: &EncoderModel, x: &[f64]) -> Result<SparseCode> {
    match &model.variant {
        Variant::Relu | Variant::Matryoshka { .. } => encode_relu(model, x),
        Variant::TopK { .. } => encode_topk(model, x),
        Variant::BatchTopK { k } => {
            let xs = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
            Ok(batch_topk_codes(model, &xs, *k)?.remove(0))
        }
        Variant::Mp { .. } => encode_mp(model, x).map(|(z, _)| z),
    }
}

/// Encodes every row; batch top-k selects across the whole matrix.
pub fn encode_rows(model: &EncoderModel, xs: &DenseMatrix) -> Result<Vec<SparseCode>> {
    match &model.variant {
        Variant::BatchTopK { k } => batch_topk_codes(model, xs, *k),
        _ => (0..xs.rows()).map(|i| encode(model, xs.row(i))).collect(),
    }
}

/// Reconstruction at inference-time sparsity `k`: `k` pursuit steps for MP,
/// otherwise the `k` largest coordinates of the untruncated ReLU code.
/// Returns `(x̂, ‖x − x̂‖²)`.
pub fn reconstruct_at_k(model: &EncoderModel, x: &[f64], k: usize) -> Result<(Vec<f64>, f64)> {
    let z = code_at_k(model, x, k)?;
    let xh = decode(model, &z);
    let err = norm_sq(&crate::numerics::sub(x, &xh));
    Ok((xh, err))
}

/// Sparse code used by [`reconstruct_at_k`].
pub fn code_at_k(model: &EncoderModel, x: &[f64], k: usize) -> Result<SparseCode> {
    match &model.variant {
        Variant::Mp { selection, .. } => {
            mp_with(model, x, &StopRule::FixedSteps { steps: k }, *selection).map(|(z, _)| z)
        }
        _ => Ok(encode_relu(model, x)?.truncate_top_k(k)),
    }
}

/// `x − b_pre = Σ_t c_t D_{j_t} + r_T` split into the first-step
/// (linearly accessible) term, the later-step terms, and the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PursuitDecomposition {
    pub first_step: Vec<f64>,
    pub later_steps: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn decompose_pursuit(model: &EncoderModel, x: &[f64], trace: &MpTrace) -> PursuitDecomposition {
    let m = model.dim();
    let mut first_step = vec![0.0; m];
    let mut later_steps = vec![0.0; m];
    for (t, s) in trace.steps.iter().enumerate() {
        let target = if t == 0 { &mut first_step } else { &mut later_steps };
        model.atoms().axpy_col(s.index, s.coefficient, target);
    }
    let mut residual: Vec<f64> = x.iter().zip(model.pre_bias()).map(|(a, b)| a - b).collect();
    for s in &trace.steps {
        model.atoms().axpy_col(s.index, -s.coefficient, &mut residual);
    }
    PursuitDecomposition { first_step, later_steps, residual }
}

/// `⟨D_j, r⟩` for a selected atom, used by orthogonality checks.
pub fn atom_residual_inner(model: &EncoderModel, j: usize, r: &[f64]) -> f64 {
    model.atoms().col_dot(j, r)
}

/// Mean ℓ0 over a set of codes.
pub fn mean_l0(codes: &[SparseCode]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes.iter().map(|c| c.l0() as f64).sum::<f64>() / codes.len() as f64
}
