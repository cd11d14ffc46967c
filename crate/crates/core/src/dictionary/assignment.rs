use serde::{Deserialize, Serialize};

use super::{abs_cosine_matrix, Dictionary};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Injective map from ground-truth atoms to learned atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    mapping: Vec<Option<usize>>,
    score: f64,
}

impl Assignment {
    pub(crate) fn new(mapping: Vec<usize>, gt: &Dictionary, learned: &Dictionary) -> Result<Self> {
        Self::from_partial(mapping.into_iter().map(Some).collect(), gt, learned)
    }

    /// Validates injectivity and recomputes the score from the dictionaries.
    pub fn from_partial(mapping: Vec<Option<usize>>, gt: &Dictionary, learned: &Dictionary) -> Result<Self> {
        if mapping.len() != gt.len() {
            return Err(Error::shape("assignment length differs from ground-truth size"));
        }
        let mut seen = vec![false; learned.len()];
        for j in mapping.iter().flatten() {
            if *j >= learned.len() || std::mem::replace(&mut seen[*j], true) {
                return Err(Error::Contract(format!("learned atom {j} assigned twice or out of range")));
            }
        }
        let cos = abs_cosine_matrix(gt, learned);
        let score = mapping
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cos[(i, j)]))
            .sum();
        Ok(Self { mapping, score })
    }

    pub fn get(&self, gt_index: usize) -> Option<usize> {
        self.mapping.get(gt_index).copied().flatten()
    }

    pub fn mapping(&self) -> &[Option<usize>] {
        &self.mapping
    }

    /// Sum of `|cos|` over matched pairs.
    pub fn score(&self) -> f64 {
        self.score
    }

    /// Inverse map: learned atom to ground-truth atom.
    pub fn inverse(&self, learned_len: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; learned_len];
        for (i, j) in self.mapping.iter().enumerate() {
            if let Some(j) = j {
                inv[*j] = Some(i);
            }
        }
        inv
    }
}

/// Maximum-weight assignment of every row of `weights` to a distinct column
/// (rows ≤ columns). Returns the column chosen for each row.
///
/// Shortest augmenting path Hungarian method with row/column potentials,
/// O(rows² · cols). Columns are scanned in increasing order with strict
/// comparisons, so equal-weight alternatives resolve to the lowest index.
pub fn hungarian_max(weights: &DenseMatrix) -> Result<Vec<usize>> {
    let (n, m) = weights.shape();
    if n > m {
        return Err(Error::shape(format!("cannot assign {n} rows to {m} columns")));
    }
    if !weights.is_finite() {
        return Err(Error::domain("assignment weights must be finite"));
    }
    // 1-based indexing, column 0 is the virtual start.
    let cost = |i: usize, j: usize| -weights[(i - 1, j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    Ok(result)
}
