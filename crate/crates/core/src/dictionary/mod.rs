//! Dictionaries of concept directions, coherence statistics and alignment
//! against a ground-truth dictionary.

mod assignment;

use serde::{Deserialize, Serialize};

pub use assignment::{hungarian_max, Assignment};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Every atom has unit norm.
    ExactUnit,
    /// Every atom lies inside the unit ball.
    UnitBall,
}

/// `m × p` atoms (one per column) plus the pre-decoding bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    atoms: DenseMatrix,
    pre_bias: Vec<f64>,
    norm_mode: NormMode,
}

impl Dictionary {
    pub fn new(atoms: DenseMatrix, pre_bias: Vec<f64>, norm_mode: NormMode) -> Result<Self> {
        if pre_bias.len() != atoms.rows() {
            return Err(Error::shape(format!(
                "pre-bias has length {} but atoms live in dimension {}",
                pre_bias.len(),
                atoms.rows()
            )));
        }
        let d = Self { atoms, pre_bias, norm_mode };
        d.check_norms()?;
        Ok(d)
    }

    /// Dictionary with zero pre-bias.
    pub fn from_atoms(atoms: DenseMatrix, norm_mode: NormMode) -> Result<Self> {
        let m = atoms.rows();
        Self::new(atoms, vec![0.0; m], norm_mode)
    }

    /// Normalizes every column to unit length; zero columns are rejected.
    pub fn normalized(mut atoms: DenseMatrix) -> Result<Self> {
        for j in 0..atoms.cols() {
            let n = atoms.col_norm(j);
            if n == 0.0 {
                return Err(Error::domain(format!("atom {j} is zero")));
            }
            for i in 0..atoms.rows() {
                atoms[(i, j)] /= n;
            }
        }
        Self::from_atoms(atoms, NormMode::ExactUnit)
    }

    /// Assembles a dictionary without checking column norms. Used when
    /// parameters are perturbed off the constraint set (finite differences,
    /// optimizer steps before projection).
    pub fn from_parts_unchecked(atoms: DenseMatrix, pre_bias: Vec<f64>, norm_mode: NormMode) -> Self {
        Self { atoms, pre_bias, norm_mode }
    }

    pub fn check_norms(&self) -> Result<()> {
        for j in 0..self.atoms.cols() {
            let n = self.atoms.col_norm(j);
            let ok = match self.norm_mode {
                NormMode::ExactUnit => (n - 1.0).abs() <= NORM_TOL,
                NormMode::UnitBall => n <= 1.0 + NORM_TOL,
            };
            if !ok || !n.is_finite() {
                return Err(Error::Contract(format!(
                    "atom {j} has norm {n}, violating {:?}",
                    self.norm_mode
                )));
            }
        }
        Ok(())
    }

    pub fn atoms(&self) -> &DenseMatrix {
        &self.atoms
    }

    pub(crate) fn atoms_mut(&mut self) -> &mut DenseMatrix {
        &mut self.atoms
    }

    pub fn pre_bias(&self) -> &[f64] {
        &self.pre_bias
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn dim(&self) -> usize {
        self.atoms.rows()
    }

    pub fn len(&self) -> usize {
        self.atoms.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.cols() == 0
    }

    pub fn atom(&self, j: usize) -> Vec<f64> {
        self.atoms.col(j)
    }

    /// Sub-dictionary restricted to the given columns.
    pub fn restrict(&self, cols: &[usize]) -> Self {
        Self {
            atoms: self.atoms.select_cols(cols),
            pre_bias: self.pre_bias.clone(),
            norm_mode: self.norm_mode,
        }
    }

    /// Projects columns back onto the constraint set of the current norm mode.
    /// Zero columns are left untouched.
    pub fn project(&mut self) {
        let (m, p) = self.atoms.shape();
        for j in 0..p {
            let n = self.atoms.col_norm(j);
            let scale = match self.norm_mode {
                NormMode::ExactUnit if n > 0.0 => 1.0 / n,
                NormMode::UnitBall if n > 1.0 => 1.0 / n,
                _ => continue,
            };
            for i in 0..m {
                self.atoms[(i, j)] *= scale;
            }
        }
    }

    /// Cosine between every pair of atoms (columns normalized first).
    pub fn cosine_gram(&self) -> DenseMatrix {
        let mut a = self.atoms.clone();
        for j in 0..a.cols() {
            let n = a.col_norm(j);
            if n > 0.0 {
                for i in 0..a.rows() {
                    a[(i, j)] /= n;
                }
            }
        }
        a.gram()
    }
}

/// Per-atom hierarchy level with optional parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMap {
    level: Vec<usize>,
    parent: Vec<Option<usize>>,
}

impl LevelMap {
    pub fn new(level: Vec<usize>, parent: Vec<Option<usize>>) -> Result<Self> {
        if level.len() != parent.len() {
            return Err(Error::shape("level and parent vectors differ in length"));
        }
        let min_level = level.iter().copied().min().unwrap_or(0);
        for (i, p) in parent.iter().enumerate() {
            match p {
                Some(p) => {
                    if *p >= level.len() || level[*p] + 1 != level[i] {
                        return Err(Error::Contract(format!(
                            "atom {i} at level {} has parent {p} at the wrong level",
                            level[i]
                        )));
                    }
                }
                None if level[i] != min_level => {
                    return Err(Error::Contract(format!("atom {i} above the root level has no parent")));
                }
                None => {}
            }
        }
        Ok(Self { level, parent })
    }

    /// All atoms on one level, no parents.
    pub fn flat(p: usize) -> Self {
        Self { level: vec![1; p], parent: vec![None; p] }
    }

    pub fn len(&self) -> usize {
        self.level.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level.is_empty()
    }

    pub fn level(&self, i: usize) -> usize {
        self.level[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn levels(&self) -> &[usize] {
        &self.level
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children_of(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.parent[c] == Some(i)).collect()
    }
}

/// `Dᵀ D`.
pub fn gram(d: &Dictionary) -> DenseMatrix {
    d.atoms.gram()
}

fn check_exact_unit(d: &Dictionary, op: &str) -> Result<()> {
    if d.norm_mode != NormMode::ExactUnit {
        return Err(Error::Contract(format!("{op} needs an exact-unit dictionary")));
    }
    Ok(())
}

/// Babel function μ₁(r): the largest total absolute coherence between any
/// atom and a set of `r` other atoms.
///
/// For each atom the `r` largest off-diagonal absolute inner products are
/// summed; the maximum of those sums is μ₁(r).
pub fn babel(d: &Dictionary, r: usize) -> Result<f64> {
    check_exact_unit(d, "babel")?;
    let p = d.len();
    if r < 1 || r + 1 > p {
        return Err(Error::domain(format!("babel order {r} outside 1..={}", p.saturating_sub(1))));
    }
    Ok(babel_curve_unchecked(&gram(d), r)[r - 1])
}

/// μ₁(1..=max_r) from a Gram matrix in one pass.
pub(crate) fn babel_curve_unchecked(g: &DenseMatrix, max_r: usize) -> Vec<f64> {
    let p = g.rows();
    let mut best = vec![0.0f64; max_r];
    let mut col = Vec::with_capacity(p);
    for j in 0..p {
        col.clear();
        col.extend((0..p).filter(|&i| i != j).map(|i| g[(i, j)].abs()));
        col.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (k, v) in col.iter().take(max_r).enumerate() {
            acc += v;
            best[k] = best[k].max(acc);
        }
    }
    best
}

/// μ₁(r) for `r = 1..=max_r`.
pub fn babel_curve(d: &Dictionary, max_r: usize) -> Result<Vec<f64>> {
    check_exact_unit(d, "babel")?;
    if max_r < 1 || max_r + 1 > d.len() {
        return Err(Error::domain(format!("babel order {max_r} outside 1..={}", d.len().saturating_sub(1))));
    }
    Ok(babel_curve_unchecked(&gram(d), max_r))
}

/// Mean μ₁(r) over sub-dictionaries restricted to each co-activated support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoactivatedBabel {
    pub mean: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn babel_coactivated(d: &Dictionary, supports: &[Vec<usize>], r: usize) -> Result<CoactivatedBabel> {
    check_exact_unit(d, "babel")?;
    if r < 1 {
        return Err(Error::domain("babel order must be at least 1"));
    }
    let g = gram(d);
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for s in supports {
        if s.len() < r + 1 {
            skipped += 1;
            continue;
        }
        let sub = g.select_cols(s).transpose().select_cols(s);
        sum += babel_curve_unchecked(&sub, r)[r - 1];
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptyInput(format!(
            "no support has at least {} atoms ({skipped} skipped)",
            r + 1
        )));
    }
    Ok(CoactivatedBabel { mean: sum / used as f64, used, skipped })
}

/// Largest absolute inner product between atoms on different levels.
/// Zero when every atom shares one level.
pub fn conditional_orthogonality_violation(d: &Dictionary, levels: &LevelMap) -> Result<f64> {
    if levels.len() != d.len() {
        return Err(Error::shape(format!(
            "level map covers {} atoms, dictionary has {}",
            levels.len(),
            d.len()
        )));
    }
    let g = gram(d);
    let mut worst = 0.0f64;
    for i in 0..d.len() {
        for j in 0..i {
            if levels.level(i) != levels.level(j) {
                worst = worst.max(g[(i, j)].abs());
            }
        }
    }
    Ok(worst)
}

/// Optimal injective pairing of ground-truth atoms to learned atoms by
/// absolute cosine.
pub fn match_to_ground_truth(learned: &Dictionary, gt: &Dictionary) -> Result<Assignment> {
    if learned.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "learned atoms live in dimension {}, ground truth in {}",
            learned.dim(),
            gt.dim()
        )));
    }
    if learned.len() < gt.len() {
        return Err(Error::shape(format!(
            "{} learned atoms cannot cover {} ground-truth atoms",
            learned.len(),
            gt.len()
        )));
    }
    let cos = abs_cosine_matrix(gt, learned);
    let mapping = hungarian_max(&cos)?;
    Assignment::new(mapping, gt, learned)
}

/// `|cos(a_i, b_j)|` as an `|a| × |b|` matrix.
pub fn abs_cosine_matrix(a: &Dictionary, b: &Dictionary) -> DenseMatrix {
    let mut out = a.atoms.transpose().matmul(&b.atoms).expect("dimensions checked");
    let na: Vec<f64> = (0..a.len()).map(|i| a.atoms.col_norm(i)).collect();
    let nb: Vec<f64> = (0..b.len()).map(|j| b.atoms.col_norm(j)).collect();
    for i in 0..a.len() {
        for j in 0..b.len() {
            let den = na[i] * nb[j];
            out[(i, j)] = if den > 0.0 { (out[(i, j)] / den).abs() } else { 0.0 };
        }
    }
    out
}

/// Cosine Gram of the learned atoms, reindexed by the assignment and
/// sign-aligned to their ground-truth partners.
fn aligned_gram(learned: &Dictionary, gt: &Dictionary, a: &Assignment) -> Result<DenseMatrix> {
    let p = gt.len();
    let mut cols = Vec::with_capacity(p);
    for i in 0..p {
        let j = a.get(i).ok_or_else(|| {
            Error::Contract(format!("assignment leaves ground-truth atom {i} unmatched"))
        })?;
        let mut c = learned.atom(j);
        let n = crate::numerics::norm(&c);
        if n > 0.0 {
            c.iter_mut().for_each(|v| *v /= n);
        }
        if crate::numerics::dot(&c, &gt.atom(i)) < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        cols.push(c);
    }
    Ok(DenseMatrix::from_cols(&cols)?.gram())
}

fn check_levels(gt: &Dictionary, levels: &LevelMap) -> Result<()> {
    if levels.len() != gt.len() {
        return Err(Error::shape(format!(
            "level map covers {} atoms, ground truth has {}",
            levels.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean squared deviation of the aligned learned Gram from the ground-truth
/// Gram over ordered same-level pairs.
pub fn flat_mse(learned: &Dictionary, gt: &Dictionary, levels: &LevelMap, a: &Assignment) -> Result<f64> {
    check_levels(gt, levels)?;
    let gh = aligned_gram(learned, gt, a)?;
    let gs = gt.cosine_gram();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..gt.len() {
        for j in 0..gt.len() {
            if i != j && levels.level(i) == levels.level(j) {
                sum += (gh[(i, j)] - gs[(i, j)]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no same-level atom pairs".into()));
    }
    Ok(sum / count as f64)
}

/// Mean squared aligned learned Gram entry over ordered cross-level pairs.
pub fn hierarchical_mse(learned: &Dictionary, gt: &Dictionary, levels: &LevelMap, a: &Assignment) -> Result<f64> {
    check_levels(gt, levels)?;
    let gh = aligned_gram(learned, gt, a)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..gt.len() {
        for j in 0..gt.len() {
            if levels.level(i) != levels.level(j) {
                sum += gh[(i, j)].powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no cross-level atom pairs".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests;
