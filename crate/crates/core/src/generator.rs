//! Hierarchical generative process: a tree of concept directions where a
//! child can only fire together with its parent, children of one parent are
//! mutually exclusive, and exactly one top-level parent fires per sample.
//!
//! Node 0 is the root and has no direction. Ground-truth atom `j` is the
//! direction of node `j + 1`.

use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, LevelMap, NormMode};
use crate::error::{Error, Result};
use crate::numerics::{dot, orthonormal_basis, DenseMatrix, RngStream};

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Root,
    /// Top-level node with children.
    InternalParent,
    /// Top-level node without children.
    LeafParent,
    Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    pub kind: NodeKind,
    /// Marginal probability for parents, conditional-on-parent for children.
    pub activation_prob: f64,
    #[serde(default)]
    pub magnitude_mean: f64,
    /// Zero means the magnitude is fixed at the mean.
    #[serde(default)]
    pub magnitude_sd: f64,
    /// Whether this node takes part in sibling correlation injection.
    #[serde(default = "default_true")]
    pub correlate: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    /// Ambient dimension.
    pub dim: usize,
    /// Perturbation weight applied within every sibling group.
    #[serde(default)]
    pub correlation_eps: f64,
    /// When set, each sibling group gets its own ε chosen so the realized
    /// sibling cosine equals this value; `correlation_eps` is then ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_target: Option<f64>,
    pub nodes: Vec<NodeSpec>,
}

impl TreeSpec {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of ground-truth atoms (every node except the root).
    pub fn atom_count(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn parents(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::InternalParent | NodeKind::LeafParent))
            .map(|(i, _)| i)
    }

    pub fn children_of(&self, node: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Child && n.parent == Some(node))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn child_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == NodeKind::Child).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nodes.is_empty() || self.nodes[0].kind != NodeKind::Root {
            return bad("node 0 must be the root".into());
        }
        if self.nodes[0].activation_prob != 0.0 {
            return bad("root activation probability must be 0".into());
        }
        if !(0.0..1.0).contains(&self.correlation_eps) {
            return bad(format!("correlation_eps {} outside [0, 1)", self.correlation_eps));
        }
        if let Some(t) = self.correlation_target {
            if !(0.0..1.0).contains(&t) {
                return bad(format!("correlation_target {t} outside [0, 1)"));
            }
        }
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            if !(0.0..=1.0).contains(&n.activation_prob) {
                return bad(format!("node {i}: probability {} outside [0, 1]", n.activation_prob));
            }
            if n.magnitude_sd < 0.0 || !n.magnitude_sd.is_finite() {
                return bad(format!("node {i}: magnitude sd must be nonnegative"));
            }
            if n.magnitude_sd == 0.0 && n.magnitude_mean <= 0.0 {
                return bad(format!("node {i}: fixed magnitude must be positive"));
            }
            match n.kind {
                NodeKind::Root => return bad(format!("node {i}: only node 0 may be the root")),
                NodeKind::InternalParent | NodeKind::LeafParent => {
                    if n.parent.is_some_and(|p| p != 0) {
                        return bad(format!("node {i}: parents hang off the root"));
                    }
                    let has_children = !self.children_of(i).is_empty();
                    if has_children != (n.kind == NodeKind::InternalParent) {
                        return bad(format!("node {i}: kind {:?} disagrees with its children", n.kind));
                    }
                }
                NodeKind::Child => match n.parent {
                    Some(p) if p < self.nodes.len() && self.nodes[p].kind == NodeKind::InternalParent => {}
                    _ => return bad(format!("node {i}: child must have an internal parent")),
                },
            }
        }
        let total: f64 = self.parents().map(|i| self.nodes[i].activation_prob).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return bad(format!("parent probabilities sum to {total}, expected 1"));
        }
        for p in self.parents() {
            let s: f64 = self.children_of(p).iter().map(|&c| self.nodes[c].activation_prob).sum();
            if s > 1.0 + PROB_TOL {
                return bad(format!("children of node {p} have total probability {s} > 1"));
            }
        }
        Ok(())
    }

    /// Expected number of active atoms per sample.
    pub fn expected_l0(&self) -> f64 {
        self.parents()
            .map(|p| {
                let child: f64 = self.children_of(p).iter().map(|&c| self.nodes[c].activation_prob).sum();
                self.nodes[p].activation_prob * (1.0 + child)
            })
            .sum()
    }

    /// Hierarchy depth of every atom (parents 1, children 2) and the atom
    /// index of each atom's parent.
    pub fn level_map(&self) -> Result<LevelMap> {
        let n = self.atom_count();
        let mut level = vec![0; n];
        let mut parent = vec![None; n];
        for node in 1..self.nodes.len() {
            let mut depth = 0;
            let mut cur = node;
            while cur != 0 {
                depth += 1;
                cur = self.nodes[cur].parent.unwrap_or(0);
                if depth > self.nodes.len() {
                    return Err(Error::Config("cycle in tree parents".into()));
                }
            }
            level[node - 1] = depth;
            parent[node - 1] = self.nodes[node].parent.filter(|&p| p != 0).map(|p| p - 1);
        }
        LevelMap::new(level, parent)
    }

    /// Sibling groups used for correlation injection: children of each
    /// internal parent, and the childless top-level parents as one group.
    pub fn sibling_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![self
            .parents()
            .filter(|&i| self.nodes[i].correlate && self.nodes[i].kind == NodeKind::LeafParent)
            .collect::<Vec<_>>()];
        for p in self.parents() {
            groups.push(self.children_of(p).into_iter().filter(|&c| self.nodes[c].correlate).collect());
        }
        groups.retain(|g| g.len() >= 2);
        groups
    }

    /// Parent magnitudes `N(parent_mean, parent_sd²)` and child magnitudes
    /// `N(child_mean, child_sd²)`.
    pub fn with_magnitudes(mut self, parent_mean: f64, parent_sd: f64, child_mean: f64, child_sd: f64) -> Self {
        for n in self.nodes.iter_mut().skip(1) {
            if n.kind == NodeKind::Child {
                n.magnitude_mean = child_mean;
                n.magnitude_sd = child_sd;
            } else {
                n.magnitude_mean = parent_mean;
                n.magnitude_sd = parent_sd;
            }
        }
        self
    }

    pub fn with_correlation_target(mut self, target: Option<f64>) -> Self {
        self.correlation_target = target;
        self
    }
}

/// The 21-node benchmark tree in dimension 20: internal parents 1, 5, 9
/// (probability 0.2, three children each at conditional probability 0.2)
/// and leaf parents 13–20 (probability 0.05). All magnitudes `N(1.5, 0.25²)`.
pub fn default_tree() -> TreeSpec {
    let mut nodes = vec![NodeSpec {
        parent: None,
        kind: NodeKind::Root,
        activation_prob: 0.0,
        magnitude_mean: 0.0,
        magnitude_sd: 0.0,
        correlate: false,
    }];
    let node = |parent, kind, activation_prob| NodeSpec {
        parent: Some(parent),
        kind,
        activation_prob,
        magnitude_mean: 1.5,
        magnitude_sd: 0.25,
        correlate: true,
    };
    for _ in 0..3 {
        let p = nodes.len();
        nodes.push(node(0, NodeKind::InternalParent, 0.2));
        for _ in 0..3 {
            nodes.push(node(p, NodeKind::Child, 0.2));
        }
    }
    for _ in 0..8 {
        nodes.push(node(0, NodeKind::LeafParent, 0.05));
    }
    TreeSpec { dim: 20, correlation_eps: 0.0, correlation_target: None, nodes }
}

/// Fixed magnitudes at each node's mean, so parent and child firings are
/// perfectly correlated.
pub fn perfectly_correlated_mode(spec: &TreeSpec) -> TreeSpec {
    let mut out = spec.clone();
    for n in out.nodes.iter_mut().skip(1) {
        n.magnitude_sd = 0.0;
    }
    out
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub dictionary: Dictionary,
    pub levels: LevelMap,
    /// Per sibling group: node indices, the ε used and the realized cosine.
    pub groups: Vec<SiblingGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiblingGroup {
    pub nodes: Vec<usize>,
    pub eps: f64,
    pub realized_cosine: f64,
}

impl GroundTruth {
    pub fn mean_sibling_cosine(&self) -> f64 {
        if self.groups.is_empty() {
            return 0.0;
        }
        self.groups.iter().map(|g| g.realized_cosine).sum::<f64>() / self.groups.len() as f64
    }
}

/// `(1 − ε)·v_i + ε·Σ_{j≠i} v_j` for every member, then unit-normalized.
fn perturb_group(basis: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let m = basis.first().map_or(0, Vec::len);
    let mut total = vec![0.0; m];
    for v in basis {
        total.iter_mut().zip(v).for_each(|(t, x)| *t += x);
    }
    basis
        .iter()
        .map(|v| {
            let mut w: Vec<f64> = v.iter().zip(&total).map(|(x, t)| (1.0 - eps) * x + eps * (t - x)).collect();
            let n = dot(&w, &w).sqrt();
            w.iter_mut().for_each(|x| *x /= n);
            w
        })
        .collect()
}

fn mean_pair_cosine(vs: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..vs.len() {
        for j in 0..i {
            sum += dot(&vs[i], &vs[j]);
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { sum / count as f64 }
}

/// Smallest ε in `[0, 1/2]` whose perturbation of `basis` has mean sibling
/// cosine `target`, found by bisection on the directly constructed vectors.
pub fn calibrate_eps(basis: &[Vec<f64>], target: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::domain(format!("target correlation {target} outside [0, 1)")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_pair_cosine(&perturb_group(basis, mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Orthonormal directions for every non-root node, perturbed within sibling
/// groups. Cross-level inner products stay exactly zero because each group's
/// perturbation stays inside the span of that group.
pub fn build_gt_dictionary(spec: &TreeSpec, rng: &mut RngStream) -> Result<GroundTruth> {
    spec.validate()?;
    let p = spec.atom_count();
    if spec.dim < p {
        return Err(Error::Dimension(format!(
            "{p} orthogonal atoms do not fit in dimension {}",
            spec.dim
        )));
    }
    let q = orthonormal_basis(rng, spec.dim, p)?;
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| q.col(j)).collect();
    let mut groups = Vec::new();
    for nodes in spec.sibling_groups() {
        let basis: Vec<Vec<f64>> = nodes.iter().map(|&n| cols[n - 1].clone()).collect();
        let eps = match spec.correlation_target {
            Some(t) => calibrate_eps(&basis, t)?,
            None => spec.correlation_eps,
        };
        let perturbed = perturb_group(&basis, eps);
        let realized_cosine = mean_pair_cosine(&perturbed);
        for (&n, v) in nodes.iter().zip(perturbed) {
            cols[n - 1] = v;
        }
        groups.push(SiblingGroup { nodes, eps, realized_cosine });
    }
    let dictionary = Dictionary::from_atoms(DenseMatrix::from_cols(&cols)?, NormMode::ExactUnit)?;
    Ok(GroundTruth { dictionary, levels: spec.level_map()?, groups })
}

/// Samples with their ground-truth codes (`codes` columns are atoms).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub inputs: DenseMatrix,
    pub codes: DenseMatrix,
}

impl SampleBatch {
    /// Active atom indices of row `i`.
    pub fn support(&self, i: usize) -> Vec<usize> {
        self.codes.row(i).iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect()
    }

    pub fn mean_l0(&self) -> f64 {
        let nnz = self.codes.as_slice().iter().filter(|v| **v != 0.0).count();
        nnz as f64 / self.codes.rows().max(1) as f64
    }
}

/// Precomputed categorical tables for repeated sampling.
#[derive(Debug, Clone)]
pub struct Sampler {
    parents: Vec<(usize, f64)>,
    children: Vec<Vec<(usize, f64)>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Sampler {
    pub fn new(spec: &TreeSpec) -> Result<Self> {
        spec.validate()?;
        let parents: Vec<(usize, f64)> = spec.parents().map(|p| (p, spec.nodes[p].activation_prob)).collect();
        let children = (0..spec.nodes.len())
            .map(|p| spec.children_of(p).into_iter().map(|c| (c, spec.nodes[c].activation_prob)).collect())
            .collect();
        Ok(Self {
            parents,
            children,
            mean: spec.nodes.iter().map(|n| n.magnitude_mean).collect(),
            sd: spec.nodes.iter().map(|n| n.magnitude_sd).collect(),
        })
    }

    fn magnitude(&self, node: usize, rng: &mut RngStream) -> Result<f64> {
        if self.sd[node] == 0.0 {
            Ok(self.mean[node])
        } else {
            rng.truncated_normal(self.mean[node], self.sd[node])
        }
    }

    /// Active `(node, magnitude)` pairs for one sample, parent first.
    pub fn draw(&self, rng: &mut RngStream) -> Result<Vec<(usize, f64)>> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut parent = self.parents.last().map(|p| p.0).unwrap_or(0);
        for &(p, prob) in &self.parents {
            acc += prob;
            if u < acc {
                parent = p;
                break;
            }
        }
        let mut active = vec![(parent, self.magnitude(parent, rng)?)];
        let kids = &self.children[parent];
        if !kids.is_empty() {
            // one categorical draw over {child_1, .., child_k, none}
            let u = rng.uniform();
            let mut acc = 0.0;
            for &(c, prob) in kids {
                acc += prob;
                if u < acc {
                    active.push((c, self.magnitude(c, rng)?));
                    break;
                }
            }
        }
        Ok(active)
    }

    pub fn sample(&self, d: &Dictionary, n: usize, rng: &mut RngStream) -> Result<SampleBatch> {
        let p = d.len();
        let m = d.dim();
        let mut codes = DenseMatrix::zeros(n, p);
        let mut inputs = DenseMatrix::zeros(n, m);
        for i in 0..n {
            for (node, z) in self.draw(rng)? {
                codes[(i, node - 1)] = z;
                d.atoms().axpy_col(node - 1, z, inputs.row_mut(i));
            }
        }
        Ok(SampleBatch { inputs, codes })
    }
}

/// Draws `n` samples `x = Σ z_a · D_a` from the tree.
pub fn sample_batch(spec: &TreeSpec, d: &Dictionary, n: usize, rng: &mut RngStream) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    if d.len() != spec.atom_count() {
        return Err(Error::shape(format!(
            "dictionary has {} atoms, tree has {}",
            d.len(),
            spec.atom_count()
        )));
    }
    Sampler::new(spec)?.sample(d, n, rng)
}
