//! Hierarchical fusion of per-frame scores.
//!
//! Nodes are organised in levels, leaves first. Level `l` holds `c_l`
//! nodes, each owning the gate on the edge to its parent; consecutive groups
//! of `c_l / c_{l+1}` nodes share a parent, and the top level hangs off a
//! single root. Level 0 are the leaves themselves, one per frame. A node's
//! gate input is the mean fc1 activation over the leaves below it, plus a
//! constant bias slot; gates are a softmax over siblings, and a node's
//! likelihood is the gate-weighted sum of its children's.

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place, Rng, Vector};
use crate::ssn::{SsnOutput, PROB_EPS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeConfig {
    pub leaf_count: usize,
    /// Nodes (equivalently gate units) per level, leaves first.
    pub level_gate_counts: Vec<usize>,
    /// When false the bias slot of every gate input is 0 instead of 1.
    pub gate_bias: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig::binary(crate::features::DEFAULT_TRAJECTORY_LEN)
    }
}

impl TreeConfig {
    /// Halves the node count level by level while it stays even and above
    /// two: 32 leaves give `[32, 16, 8, 4, 2]`.
    pub fn binary(leaf_count: usize) -> Self {
        let mut counts = vec![leaf_count];
        let mut c = leaf_count;
        while c > 2 && c.is_multiple_of(2) {
            c /= 2;
            counts.push(c);
        }
        TreeConfig {
            leaf_count,
            level_gate_counts: counts,
            gate_bias: true,
        }
    }

    /// Every leaf directly under the root: a single averaged mixture.
    pub fn flat(leaf_count: usize) -> Self {
        TreeConfig {
            leaf_count,
            level_gate_counts: vec![leaf_count],
            gate_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = &self.level_gate_counts;
        if self.leaf_count == 0 {
            return Err(Error::arg("tree needs at least one leaf"));
        }
        if counts.first() != Some(&self.leaf_count) {
            return Err(Error::arg(format!(
                "first level must have one gate per leaf ({}), got {:?}",
                self.leaf_count, counts
            )));
        }
        for w in counts.windows(2) {
            if w[1] == 0 || w[0] % w[1] != 0 {
                return Err(Error::arg(format!(
                    "level gate counts {counts:?}: {} nodes cannot be grouped under {} parents",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.level_gate_counts.len()
    }

    pub fn gate_count(&self) -> usize {
        self.level_gate_counts.iter().sum()
    }

    /// Number of parents of level `level` (1 for the top level).
    fn parents(&self, level: usize) -> usize {
        self.level_gate_counts.get(level + 1).copied().unwrap_or(1)
    }

    /// Children per parent at level `level`.
    pub fn branching(&self, level: usize) -> usize {
        self.level_gate_counts[level] / self.parents(level)
    }

    /// Leaves below each node of level `level`.
    pub fn span(&self, level: usize) -> usize {
        self.leaf_count / self.level_gate_counts[level]
    }
}

/// Gate weights of every edge. The gate of node `k` at level `l` is a
/// vector over the fc1 features plus one bias slot.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTree {
    config: TreeConfig,
    fc1_dim: usize,
    gates: Vec<Vec<Vector>>,
}

impl FusionTree {
    /// All gates zero, i.e. uniform mixing.
    pub fn new(config: TreeConfig, fc1_dim: usize) -> Result<Self> {
        config.validate()?;
        let gates = config
            .level_gate_counts
            .iter()
            .map(|&c| vec![Vector::zeros(fc1_dim + 1); c])
            .collect();
        Ok(FusionTree { config, fc1_dim, gates })
    }

    pub fn init(config: TreeConfig, fc1_dim: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut tree = FusionTree::new(config, fc1_dim)?;
        for v in tree.gates.iter_mut().flatten() {
            v.iter_mut().for_each(|w| *w = rng.uniform_in(-scale, scale));
        }
        Ok(tree)
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn fc1_dim(&self) -> usize {
        self.fc1_dim
    }

    pub fn gate_dim(&self) -> usize {
        self.fc1_dim + 1
    }

    pub fn gate(&self, level: usize, node: usize) -> &Vector {
        &self.gates[level][node]
    }

    pub fn gate_mut(&mut self, level: usize, node: usize) -> &mut Vector {
        &mut self.gates[level][node]
    }

    pub fn gates(&self) -> &[Vec<Vector>] {
        &self.gates
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.gates.iter().flatten().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let d = self.gate_dim();
        for (v, chunk) in self.gates.iter_mut().flatten().zip(flat.chunks(d)) {
            v.copy_from_slice(chunk);
        }
    }

    fn bias_slot(&self) -> f64 {
        if self.config.gate_bias {
            1.0
        } else {
            0.0
        }
    }

    /// Gate input of node `node` at level `level`: the mean of `leaf_fc1`
    /// over the node's leaves, followed by the bias slot.
    pub fn gate_input(&self, level: usize, node: usize, leaf_fc1: &[&[f64]]) -> Result<Vector> {
        if leaf_fc1.len() != self.config.leaf_count {
            return Err(Error::State(format!(
                "{} leaf outputs for a tree with {} leaves",
                leaf_fc1.len(),
                self.config.leaf_count
            )));
        }
        let span = self.config.span(level);
        let mut x = Vector::zeros(self.gate_dim());
        for leaf in &leaf_fc1[node * span..(node + 1) * span] {
            if leaf.len() != self.fc1_dim {
                return Err(Error::shape(format!("leaf fc1 of {} values, gates expect {}", leaf.len(), self.fc1_dim)));
            }
            for (a, v) in x.iter_mut().zip(leaf.iter()) {
                *a += v;
            }
        }
        x[..self.fc1_dim].iter_mut().for_each(|a| *a /= span as f64);
        x[self.fc1_dim] = self.bias_slot();
        Ok(x)
    }
}

/// Softmax over sibling gates of `vᵀx`.
pub fn gate_forward(gates: &[Vector], inputs: &[Vector]) -> Result<Vec<f64>> {
    if gates.len() != inputs.len() {
        return Err(Error::shape(format!("{} gates but {} gate inputs", gates.len(), inputs.len())));
    }
    let mut logits = Vec::with_capacity(gates.len());
    for (v, x) in gates.iter().zip(inputs) {
        if v.dim() != x.dim() {
            return Err(Error::shape(format!("gate of {} values, input of {}", v.dim(), x.dim())));
        }
        logits.push(v.dot(x));
    }
    softmax_in_place(&mut logits)?;
    Ok(logits)
}

/// Everything one forward pass through the tree produces, indexed
/// `[level][node]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeForwardRecord {
    pub inputs: Vec<Vec<Vector>>,
    /// Prior gate of each node's edge to its parent.
    pub gates: Vec<Vec<f64>>,
    /// Subtree value with leaves scoring ŷ; the extra last level is the
    /// root.
    pub likelihood: Vec<Vec<f64>>,
    /// Global score, the root's value.
    pub y: f64,
}

impl TreeForwardRecord {
    pub fn leaf_y_hat(&self) -> &[f64] {
        &self.likelihood[0]
    }
}

pub fn tree_forward(tree: &FusionTree, outputs: &[SsnOutput]) -> Result<TreeForwardRecord> {
    let fc1: Vec<&[f64]> = outputs.iter().map(|o| o.x_fc1.as_slice()).collect();
    let y_hat: Vec<f64> = outputs.iter().map(|o| o.y_hat).collect();
    tree_forward_parts(tree, &fc1, &y_hat)
}

/// [`tree_forward`] over borrowed leaf activations and scores.
pub fn tree_forward_parts(tree: &FusionTree, leaf_fc1: &[&[f64]], y_hat: &[f64]) -> Result<TreeForwardRecord> {
    let cfg = &tree.config;
    if leaf_fc1.len() != cfg.leaf_count || y_hat.len() != cfg.leaf_count {
        return Err(Error::shape(format!(
            "tree has {} leaves, got {} activations and {} scores",
            cfg.leaf_count,
            leaf_fc1.len(),
            y_hat.len()
        )));
    }
    let depth = cfg.depth();
    let d = tree.fc1_dim;
    let bias = tree.bias_slot();

    // Leaf inputs, then each level's inputs as the mean of its children's
    // (children span equally many leaves).
    let mut inputs: Vec<Vec<Vector>> = Vec::with_capacity(depth);
    let mut level0 = Vec::with_capacity(cfg.leaf_count);
    for leaf in leaf_fc1 {
        if leaf.len() != d {
            return Err(Error::shape(format!("leaf fc1 of {} values, gates expect {d}", leaf.len())));
        }
        let mut x = Vector::zeros(d + 1);
        x[..d].copy_from_slice(leaf);
        x[d] = bias;
        level0.push(x);
    }
    inputs.push(level0);
    for l in 1..depth {
        let b = cfg.branching(l - 1);
        let level: Vec<Vector> = inputs[l - 1]
            .chunks(b)
            .map(|children| {
                let mut x = Vector::zeros(d + 1);
                for c in children {
                    x.add_scaled(1.0 / b as f64, c);
                }
                x[d] = bias;
                x
            })
            .collect();
        inputs.push(level);
    }

    let mut gates = Vec::with_capacity(depth);
    let mut likelihood = Vec::with_capacity(depth + 1);
    likelihood.push(y_hat.to_vec());
    for l in 0..depth {
        let b = cfg.branching(l);
        let mut g = Vec::with_capacity(inputs[l].len());
        let mut up = Vec::with_capacity(cfg.parents(l));
        for (p, (vs, xs)) in tree.gates[l].chunks(b).zip(inputs[l].chunks(b)).enumerate() {
            let probs = gate_forward(vs, xs)?;
            up.push(dot(&probs, &likelihood[l][p * b..(p + 1) * b]));
            g.extend(probs);
        }
        gates.push(g);
        likelihood.push(up);
    }
    let y = likelihood[depth][0];
    Ok(TreeForwardRecord {
        inputs,
        gates,
        likelihood,
        y,
    })
}

/// Bernoulli likelihood of `label` under probability `y_hat`, clamped away
/// from zero.
pub fn leaf_likelihood(y_hat: f64, label: bool) -> f64 {
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        p
    } else {
        1.0 - p
    }
}

/// Label-conditional quantities, indexed like [`TreeForwardRecord`].
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorRecord {
    pub label: bool,
    /// Subtree likelihood of the label; last level is the root.
    pub likelihood: Vec<Vec<f64>>,
    /// Posterior of each node's edge given the label.
    pub posteriors: Vec<Vec<f64>>,
    /// Product of the posteriors of a node's strict ancestors.
    pub path: Vec<Vec<f64>>,
}

impl PosteriorRecord {
    pub fn log_likelihood(&self) -> f64 {
        self.likelihood.last().map_or(f64::NAN, |r| r[0].ln())
    }
}

fn check_record(tree: &FusionTree, record: &TreeForwardRecord) -> Result<()> {
    let counts = &tree.config.level_gate_counts;
    let ok = record.gates.len() == counts.len()
        && record.inputs.len() == counts.len()
        && record.likelihood.len() == counts.len() + 1
        && record.gates.iter().zip(counts).all(|(g, &c)| g.len() == c)
        && record.inputs.iter().flatten().all(|x| x.dim() == tree.gate_dim());
    if ok {
        Ok(())
    } else {
        Err(Error::State("forward record does not match the tree layout".into()))
    }
}

pub fn posteriors(tree: &FusionTree, record: &TreeForwardRecord, label: bool) -> Result<PosteriorRecord> {
    check_record(tree, record)?;
    let cfg = &tree.config;
    let depth = cfg.depth();
    let mut likelihood = Vec::with_capacity(depth + 1);
    likelihood.push(record.likelihood[0].iter().map(|&p| leaf_likelihood(p, label)).collect::<Vec<_>>());
    for l in 0..depth {
        let b = cfg.branching(l);
        let up: Vec<f64> = record.gates[l]
            .chunks(b)
            .zip(likelihood[l].chunks(b))
            .map(|(g, p)| dot(g, p))
            .collect();
        likelihood.push(up);
    }

    let mut posteriors: Vec<Vec<f64>> = Vec::with_capacity(depth);
    for l in 0..depth {
        let b = cfg.branching(l);
        let mut h = Vec::with_capacity(cfg.level_gate_counts[l]);
        for (k, (&g, &p)) in record.gates[l].iter().zip(&likelihood[l]).enumerate() {
            let parent = likelihood[l + 1][k / b];
            if !(parent > 0.0 && parent.is_finite()) {
                return Err(Error::Numeric(format!("subtree likelihood {parent} at level {}", l + 1)));
            }
            h.push(g * p / parent);
        }
        posteriors.push(h);
    }

    // Top-down: the root has no ancestors.
    let mut path: Vec<Vec<f64>> = vec![Vec::new(); depth];
    path[depth - 1] = vec![1.0; cfg.level_gate_counts[depth - 1]];
    for l in (0..depth - 1).rev() {
        let b = cfg.branching(l);
        path[l] = (0..cfg.level_gate_counts[l])
            .map(|k| path[l + 1][k / b] * posteriors[l + 1][k / b])
            .collect();
    }
    Ok(PosteriorRecord {
        label,
        likelihood,
        posteriors,
        path,
    })
}

/// Gradient of `ln P(label)` with respect to every gate vector:
/// `path · (h − g) · x`.
pub fn gate_gradient(tree: &FusionTree, record: &TreeForwardRecord, post: &PosteriorRecord) -> Result<Vec<Vec<Vector>>> {
    let mut grad: Vec<Vec<Vector>> = tree.gates.iter().map(|l| vec![Vector::zeros(tree.gate_dim()); l.len()]).collect();
    accumulate_gate_gradient(tree, record, post, &mut grad)?;
    Ok(grad)
}

fn accumulate_gate_gradient(
    tree: &FusionTree,
    record: &TreeForwardRecord,
    post: &PosteriorRecord,
    grad: &mut [Vec<Vector>],
) -> Result<()> {
    check_record(tree, record)?;
    if post.posteriors.len() != record.gates.len() {
        return Err(Error::State("posterior record does not match the forward record".into()));
    }
    for (l, level) in grad.iter_mut().enumerate() {
        for (k, g) in level.iter_mut().enumerate() {
            let coef = post.path[l][k] * (post.posteriors[l][k] - record.gates[l][k]);
            g.add_scaled(coef, &record.inputs[l][k]);
        }
    }
    Ok(())
}

/// One ascent step on the label log-likelihood: `v += α · path · (h − g) · x`.
pub fn gate_update(tree: &mut FusionTree, record: &TreeForwardRecord, post: &PosteriorRecord, alpha: f64) -> Result<()> {
    gate_update_batch(tree, &[(record, post)], alpha)
}

/// Sums the per-sample updates before applying them.
pub fn gate_update_batch(tree: &mut FusionTree, samples: &[(&TreeForwardRecord, &PosteriorRecord)], alpha: f64) -> Result<()> {
    let mut grad: Vec<Vec<Vector>> = tree.gates.iter().map(|l| vec![Vector::zeros(tree.gate_dim()); l.len()]).collect();
    for (record, post) in samples {
        accumulate_gate_gradient(tree, record, post, &mut grad)?;
    }
    if alpha == 0.0 {
        return Ok(());
    }
    for (vs, gs) in tree.gates.iter_mut().zip(&grad) {
        for (v, g) in vs.iter_mut().zip(gs) {
            v.add_scaled(alpha, g);
        }
    }
    Ok(())
}

/// `ln P(label)` of the tree over the given leaf outputs.
pub fn tree_log_likelihood(tree: &FusionTree, outputs: &[SsnOutput], label: bool) -> Result<f64> {
    let record = tree_forward(tree, outputs)?;
    Ok(posteriors(tree, &record, label)?.log_likelihood())
}
