//! Batch losses and their exact gradients.
//!
//! Discrete choices made in the forward pass (ReLU gates, top-k supports,
//! pursuit selections and stopping) are held fixed; every continuous path,
//! including the dependence of each pursuit residual on all earlier atoms,
//! is differentiated exactly.

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::encoders::{
    batch_topk_codes, decode, topk_code, decode_prefix_unchecked, encode_relu, mp_with, pursue_with, EncoderModel, SparseCode,
    Variant,
};
use crate::error::{Error, Result};
use crate::numerics::{norm_sq, DenseMatrix};

/// Loss settings that change during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Weight of the ℓ1 penalty on codes (ReLU and Matryoshka only).
    pub l1_weight: f64,
    /// Overrides the batch top-k budget (warm-up phase).
    pub batch_topk_k: Option<f64>,
    /// Adds every intermediate pursuit reconstruction error to the loss.
    pub mp_intermediate: bool,
}

impl Objective {
    pub fn reconstruction_only() -> Self {
        Self { l1_weight: 0.0, batch_topk_k: None, mp_intermediate: false }
    }

    pub fn with_l1(l1_weight: f64) -> Self {
        Self { l1_weight, ..Self::reconstruction_only() }
    }
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub atoms: DenseMatrix,
    pub pre_bias: Vec<f64>,
    pub weights: Option<DenseMatrix>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        let (m, p) = (model.dim(), model.latents());
        Self {
            atoms: DenseMatrix::zeros(m, p),
            pre_bias: vec![0.0; m],
            weights: model.encoder_weights.as_ref().map(|_| DenseMatrix::zeros(m, p)),
            bias: vec![0.0; p],
        }
    }

    /// Flat view in [`flatten_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.atoms.as_slice());
        out.extend_from_slice(&self.pre_bias);
        if let Some(w) = &self.weights {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.atoms.scale(s);
        self.pre_bias.iter_mut().for_each(|v| *v *= s);
        if let Some(w) = &mut self.weights {
            w.scale(s);
        }
        self.bias.iter_mut().for_each(|v| *v *= s);
    }

    /// Scales the gradient down to `max_norm` when its norm exceeds it.
    /// Returns the norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Model parameters as one flat vector: atoms, pre-bias, encoder weights
/// (untied models only), encoder bias.
pub fn flatten_params(model: &EncoderModel) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(model.atoms().as_slice());
    out.extend_from_slice(model.pre_bias());
    if let Some(w) = &model.encoder_weights {
        out.extend_from_slice(w.as_slice());
    }
    out.extend_from_slice(&model.encoder_bias);
    out
}

/// Inverse of [`flatten_params`]. Norm constraints are not checked.
pub fn unflatten_params(template: &EncoderModel, flat: &[f64]) -> Result<EncoderModel> {
    let (m, p) = (template.dim(), template.latents());
    let want = m * p + m + template.encoder_weights.as_ref().map_or(0, |_| m * p) + p;
    if flat.len() != want {
        return Err(Error::shape(format!("{} parameters supplied, model has {want}", flat.len())));
    }
    let mut at = 0;
    let mut take = |n: usize| {
        let s = flat[at..at + n].to_vec();
        at += n;
        s
    };
    let atoms = DenseMatrix::from_vec(m, p, take(m * p))?;
    let pre_bias = take(m);
    let weights = match &template.encoder_weights {
        Some(_) => Some(DenseMatrix::from_vec(m, p, take(m * p))?),
        None => None,
    };
    let bias = take(p);
    Ok(EncoderModel {
        dictionary: Dictionary::from_parts_unchecked(atoms, pre_bias, template.dictionary.norm_mode()),
        encoder_weights: weights,
        encoder_bias: bias,
        variant: template.variant.clone(),
    })
}

/// Per-batch forward statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Full objective (reconstruction plus penalty), mean over rows.
    pub loss: f64,
    /// Mean squared reconstruction error `‖x − x̂‖²` of the full decode.
    pub mse: f64,
    pub mean_l0: f64,
    /// Rows in which each latent was active.
    pub usage: Vec<usize>,
    /// Row with the largest final reconstruction error and that residual.
    pub worst_residual: Option<(usize, Vec<f64>)>,
}

fn codes_for(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) -> Result<Vec<SparseCode>> {
    match &model.variant {
        Variant::Relu | Variant::Matryoshka { .. } => {
            (0..batch.rows()).map(|i| encode_relu(model, batch.row(i))).collect()
        }
        Variant::TopK { k } => {
            (0..batch.rows()).map(|i| topk_code(model, batch.row(i), *k)).collect()
        }
        Variant::BatchTopK { k } => batch_topk_codes(model, batch, objective.batch_topk_k.unwrap_or(*k)),
        Variant::Mp { .. } => unreachable!("pursuit codes are produced by the pursuit itself"),
    }
}

fn penalized(variant: &Variant) -> bool {
    matches!(variant, Variant::Relu | Variant::Matryoshka { .. })
}

/// Batch objective by plain forward evaluation (no gradient bookkeeping).
pub fn batch_loss(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) -> Result<f64> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    let mut total = 0.0;
    match &model.variant {
        Variant::Mp { stop, selection } => {
            for i in 0..n {
                let x = batch.row(i);
                let (z, trace) = mp_with(model, x, stop, *selection)?;
                total += norm_sq(&crate::numerics::sub(x, &decode(model, &z)));
                if objective.mp_intermediate {
                    let steps = trace.steps.len();
                    total += trace.steps.iter().take(steps.saturating_sub(1)).map(|s| s.residual_norm.powi(2)).sum::<f64>();
                }
            }
        }
        variant => {
            let codes = codes_for(model, batch, objective)?;
            for (i, z) in codes.iter().enumerate() {
                let x = batch.row(i);
                total += match variant {
                    Variant::Matryoshka { prefixes } => prefixes
                        .iter()
                        .map(|&pl| norm_sq(&crate::numerics::sub(x, &decode_prefix_unchecked(model, z, pl))))
                        .sum(),
                    _ => norm_sq(&crate::numerics::sub(x, &decode(model, z))),
                };
                if penalized(variant) {
                    total += objective.l1_weight * z.values().iter().map(|v| v.abs()).sum::<f64>();
                }
            }
        }
    }
    Ok(total / n as f64)
}

/// Objective value, statistics and exact gradients for one batch.
pub fn backward(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) -> Result<(BatchStats, Gradients)> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    if batch.cols() != model.dim() {
        return Err(Error::shape(format!("batch rows have length {}, model expects {}", batch.cols(), model.dim())));
    }
    match &model.variant {
        Variant::Mp { .. } => backward_mp(model, batch, objective),
        _ => backward_linear(model, batch, objective),
    }
}

fn backward_linear(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) -> Result<(BatchStats, Gradients)> {
    let (n, m, p) = (batch.rows(), model.dim(), model.latents());
    let inv_n = 1.0 / n as f64;
    let codes = codes_for(model, batch, objective)?;
    let mut grads = Gradients::zeros_like(model);
    let d = model.atoms();
    let w = model.weights();
    let b_pre = model.pre_bias();
    let l1 = if penalized(&model.variant) { objective.l1_weight } else { 0.0 };
    let prefixes: Vec<usize> = match &model.variant {
        Variant::Matryoshka { prefixes } => prefixes.clone(),
        _ => vec![p],
    };

    let mut loss = 0.0;
    let mut mse = 0.0;
    let mut usage = vec![0usize; p];
    let mut worst: Option<(usize, f64, Vec<f64>)> = None;
    let mut g_z = vec![0.0; p];
    let mut g_x = vec![0.0; m];
    for (row, z) in codes.iter().enumerate() {
        let x = batch.row(row);
        g_z.iter_mut().for_each(|v| *v = 0.0);
        for &j in z.support() {
            usage[j] += 1;
        }
        for (pi, &pl) in prefixes.iter().enumerate() {
            let xh = decode_prefix_unchecked(model, z, pl);
            for i in 0..m {
                g_x[i] = xh[i] - x[i];
            }
            let err = norm_sq(&g_x);
            loss += err;
            if pi + 1 == prefixes.len() {
                mse += err;
                if worst.as_ref().is_none_or(|w| err > w.1) {
                    worst = Some((row, err, g_x.iter().map(|v| -v).collect()));
                }
            }
            g_x.iter_mut().for_each(|v| *v *= 2.0 * inv_n);
            for i in 0..m {
                grads.pre_bias[i] += g_x[i];
            }
            for &j in z.support().iter().take_while(|&&j| j < pl) {
                let zj = z.values()[j];
                let mut s = 0.0;
                for i in 0..m {
                    grads.atoms[(i, j)] += g_x[i] * zj;
                    s += d[(i, j)] * g_x[i];
                }
                g_z[j] += s;
            }
        }
        if l1 > 0.0 {
            loss += l1 * z.values().iter().map(|v| v.abs()).sum::<f64>();
        }
        // gates: only latents in the support pass gradient to the encoder
        for &j in z.support() {
            let g_pre = g_z[j] + l1 * inv_n * z.values()[j].signum();
            grads.bias[j] += g_pre;
            let gw = grads.weights.as_mut().expect("linear encoders are untied");
            for i in 0..m {
                gw[(i, j)] += (x[i] - b_pre[i]) * g_pre;
                grads.pre_bias[i] -= w[(i, j)] * g_pre;
            }
        }
    }
    let nnz: usize = codes.iter().map(SparseCode::l0).sum();
    let stats = BatchStats {
        loss: loss * inv_n,
        mse: mse * inv_n,
        mean_l0: nnz as f64 * inv_n,
        usage,
        worst_residual: worst.map(|(r, _, v)| (r, v)),
    };
    Ok((stats, grads))
}

fn backward_mp(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) -> Result<(BatchStats, Gradients)> {
    let Variant::Mp { stop, selection } = &model.variant else { unreachable!() };
    let (n, m, p) = (batch.rows(), model.dim(), model.latents());
    let inv_n = 1.0 / n as f64;
    let d = model.atoms();
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut mse = 0.0;
    let mut nnz = 0usize;
    let mut usage = vec![0usize; p];
    let mut worst: Option<(usize, f64, Vec<f64>)> = None;
    let mut history: Vec<f64> = Vec::new();
    let mut g = vec![0.0; m];
    for row in 0..n {
        let x = batch.row(row);
        let mut r: Vec<f64> = x.iter().zip(model.pre_bias()).map(|(a, b)| a - b).collect();
        history.clear();
        let steps = pursue_with(d, &mut r, stop, *selection, |rt| history.extend_from_slice(rt));
        let t_max = steps.len();

        let err = norm_sq(&r);
        mse += err;
        loss += err;
        if worst.as_ref().is_none_or(|w| err > w.1) {
            worst = Some((row, err, r.clone()));
        }
        let mut support = vec![false; p];
        for s in &steps {
            if !std::mem::replace(&mut support[s.index], true) {
                usage[s.index] += 1;
                nnz += 1;
            }
        }

        // g = ∂L/∂r_T, then walk the unrolled steps backwards
        for i in 0..m {
            g[i] = 2.0 * inv_n * r[i];
        }
        for t in (0..t_max).rev() {
            let step = &steps[t];
            let j = step.index;
            let r_t = &history[t * m..(t + 1) * m];
            if objective.mp_intermediate && t + 1 < t_max {
                // r_{t+1} contributes ‖r_{t+1}‖² directly
                let r_next = &history[(t + 1) * m..(t + 2) * m];
                loss += norm_sq(r_next);
                for i in 0..m {
                    g[i] += 2.0 * inv_n * r_next[i];
                }
            }
            let dg = d.col_dot(j, &g);
            let c = step.coefficient;
            for i in 0..m {
                grads.atoms[(i, j)] -= c * g[i] + dg * r_t[i];
            }
            for i in 0..m {
                g[i] -= dg * d[(i, j)];
            }
        }
        for i in 0..m {
            grads.pre_bias[i] -= g[i];
        }
    }
    let stats = BatchStats {
        loss: loss * inv_n,
        mse: mse * inv_n,
        mean_l0: nnz as f64 * inv_n,
        usage,
        worst_residual: worst.map(|(r, _, v)| (r, v)),
    };
    Ok((stats, grads))
}

/// Gradient of `‖x − x̂‖²` with respect to the atoms for a ReLU model,
/// `2·(x̂ − x)·z_j` per column; used as a closed-form check.
pub fn relu_atom_gradient_closed_form(model: &EncoderModel, x: &[f64]) -> Result<DenseMatrix> {
    let z = encode_relu(model, x)?;
    let xh = decode(model, &z);
    let mut out = DenseMatrix::zeros(model.dim(), model.latents());
    for j in 0..model.latents() {
        for i in 0..model.dim() {
            out[(i, j)] = 2.0 * (xh[i] - x[i]) * z.values()[j];
        }
    }
    Ok(out)
}
