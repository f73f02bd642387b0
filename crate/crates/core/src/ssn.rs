//! Single similarity network: a two-layer expert scoring one encoder hidden
//! state against one gallery feature, trained with an L2-regularised log
//! loss.

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, Matrix, Rng, Vector};

/// Width of the first fully connected layer.
pub const DEFAULT_FC1_DIM: usize = 256;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// `x_fc1 = relu(w1·(h, m) + b1)`, `z = w2·x_fc1 + b2`, `ŷ = σ(z)`.
#[derive(Clone, Debug)]
pub struct SsnParams {
    hidden_dim: usize,
    item_dim: usize,
    /// `fc1 × (hidden + item)`
    pub w1: Matrix,
    pub b1: Vector,
    /// `1 × fc1`
    pub w2: Matrix,
    pub b2: f64,
    generation: u64,
}

impl PartialEq for SsnParams {
    fn eq(&self, other: &Self) -> bool {
        self.hidden_dim == other.hidden_dim
            && self.item_dim == other.item_dim
            && self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
    }
}

impl SsnParams {
    pub fn zeros(hidden_dim: usize, item_dim: usize, fc1_dim: usize) -> Self {
        SsnParams {
            hidden_dim,
            item_dim,
            w1: Matrix::zeros(fc1_dim, hidden_dim + item_dim),
            b1: Vector::zeros(fc1_dim),
            w2: Matrix::zeros(1, fc1_dim),
            b2: 0.0,
            generation: 0,
        }
    }

    /// Everything uniform in `[-scale, scale]`.
    pub fn init(hidden_dim: usize, item_dim: usize, fc1_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut p = SsnParams::zeros(hidden_dim, item_dim, fc1_dim);
        let mut draw = |v: &mut f64| *v = rng.uniform_in(-scale, scale);
        p.w1.as_mut_slice().iter_mut().for_each(&mut draw);
        p.b1.iter_mut().for_each(&mut draw);
        p.w2.as_mut_slice().iter_mut().for_each(&mut draw);
        draw(&mut p.b2);
        p
    }

    pub fn from_parts(hidden_dim: usize, item_dim: usize, w1: Matrix, b1: Vector, w2: Matrix, b2: f64) -> Result<Self> {
        let fc1 = w1.rows();
        if w1.cols() != hidden_dim + item_dim || b1.dim() != fc1 || w2.rows() != 1 || w2.cols() != fc1 {
            return Err(Error::shape(format!(
                "SSN hidden {hidden_dim} item {item_dim}: inconsistent w1 {}x{}, b1 {}, w2 {}x{}",
                w1.rows(),
                w1.cols(),
                b1.dim(),
                w2.rows(),
                w2.cols()
            )));
        }
        Ok(SsnParams {
            hidden_dim,
            item_dim,
            w1,
            b1,
            w2,
            b2,
            generation: 0,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    pub fn fc1_dim(&self) -> usize {
        self.w1.rows()
    }

    /// Bumped on every in-place update; caches remember the value they
    /// were produced under.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn zero_grads(&self) -> SsnGrads {
        SsnGrads {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Vector::zeros(self.b1.dim()),
            w2: Matrix::zeros(1, self.w2.cols()),
            b2: 0.0,
        }
    }

    /// `θ += scale · grads`
    pub fn apply(&mut self, scale: f64, grads: &SsnGrads) {
        self.w1.add_scaled(scale, &grads.w1);
        self.b1.add_scaled(scale, &grads.b1);
        self.w2.add_scaled(scale, &grads.w2);
        self.b2 += scale * grads.b2;
        self.generation += 1;
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.w1.frobenius_sq() + self.w2.frobenius_sq()
    }

    /// w1, b1, w2, b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w1.as_slice().len() + 2 * self.b1.dim() + 1);
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.push(self.b2);
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let (w1, rest) = flat.split_at(self.w1.as_slice().len());
        let (b1, rest) = rest.split_at(self.b1.dim());
        let (w2, rest) = rest.split_at(self.w2.cols());
        self.w1.as_mut_slice().copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.as_mut_slice().copy_from_slice(w2);
        self.b2 = rest[0];
        self.generation += 1;
    }

    fn check_inputs(&self, h: &[f64], m: &[f64]) -> Result<()> {
        if h.len() != self.hidden_dim || m.len() != self.item_dim {
            return Err(Error::shape(format!(
                "SSN expects hidden {} and item {}, got {} and {}",
                self.hidden_dim,
                self.item_dim,
                h.len(),
                m.len()
            )));
        }
        Ok(())
    }

    /// Hidden-state half of the first layer: `w1[:, ..hidden] · h`.
    pub fn project_hidden(&self, h: &[f64], out: &mut [f64]) {
        self.w1.matvec_block(0, h, out);
    }

    /// Item half of the first layer plus bias: `w1[:, hidden..] · m + b1`.
    pub fn project_item(&self, m: &[f64], out: &mut [f64]) {
        self.w1.matvec_block(self.hidden_dim, m, out);
        for (o, b) in out.iter_mut().zip(self.b1.iter()) {
            *o += b;
        }
    }

    /// Finishes a forward pass from the two first-layer halves, writing the
    /// rectified fc1 activations into `x_fc1`. Returns `(z, ŷ)`.
    pub fn finish(&self, hidden_part: &[f64], item_part: &[f64], x_fc1: &mut [f64]) -> (f64, f64) {
        for ((x, a), b) in x_fc1.iter_mut().zip(hidden_part).zip(item_part) {
            *x = (a + b).max(0.0);
        }
        let z = dot(self.w2.row(0), x_fc1) + self.b2;
        (z, sigmoid(z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsnOutput {
    /// Rectified fc1 activations; the gating features of the fusion tree.
    pub x_fc1: Vector,
    pub z: f64,
    pub y_hat: f64,
}

/// Forward record with the inputs needed by [`ssn_backward`].
#[derive(Clone, Debug)]
pub struct SsnCache {
    /// `(h, m)`
    pub input: Vec<f64>,
    pub output: SsnOutput,
    generation: u64,
}

pub fn ssn_forward(p: &SsnParams, h: &[f64], m: &[f64]) -> Result<SsnOutput> {
    Ok(ssn_forward_cached(p, h, m)?.output)
}

pub fn ssn_forward_cached(p: &SsnParams, h: &[f64], m: &[f64]) -> Result<SsnCache> {
    p.check_inputs(h, m)?;
    let mut input = Vec::with_capacity(h.len() + m.len());
    input.extend_from_slice(h);
    input.extend_from_slice(m);
    let pre = crate::numerics::affine(&p.w1, &input, &p.b1)?;
    let x_fc1: Vector = pre.iter().map(|v| v.max(0.0)).collect();
    let z = dot(p.w2.row(0), &x_fc1) + p.b2;
    Ok(SsnCache {
        input,
        output: SsnOutput {
            x_fc1,
            z,
            y_hat: sigmoid(z),
        },
        generation: p.generation,
    })
}

fn label_value(y: bool) -> f64 {
    if y {
        1.0
    } else {
        0.0
    }
}

/// Binary cross-entropy of one prediction, with the probability clamped.
pub fn log_loss(y_hat: f64, label: bool) -> f64 {
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean negative log-likelihood of the labels plus `λ‖W‖²` over the weight
/// matrices (biases excluded).
pub fn ssn_loss(outputs: &[SsnOutput], labels: &[bool], p: &SsnParams, lambda: f64) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::arg("loss of an empty batch"));
    }
    if outputs.len() != labels.len() {
        return Err(Error::shape(format!("{} outputs but {} labels", outputs.len(), labels.len())));
    }
    let data: f64 = outputs.iter().zip(labels).map(|(o, &y)| log_loss(o.y_hat, y)).sum();
    Ok(data / outputs.len() as f64 + lambda * p.weight_norm_sq())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsnGrads {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: f64,
}

impl SsnGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.push(self.b2);
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.w1.frobenius_sq() + self.b1.norm_sq() + self.w2.frobenius_sq() + self.b2 * self.b2
    }

    pub fn scale(&mut self, factor: f64) {
        self.w1.scale(factor);
        self.b1.scale(factor);
        self.w2.scale(factor);
        self.b2 *= factor;
    }

    /// Adds the derivative of `λ‖W‖²`.
    pub fn add_weight_decay(&mut self, p: &SsnParams, lambda: f64) {
        if lambda != 0.0 {
            self.w1.add_scaled(2.0 * lambda, &p.w1);
            self.w2.add_scaled(2.0 * lambda, &p.w2);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsnBackward {
    pub grads: SsnGrads,
    /// `∂loss/∂h` per sample.
    pub grad_h: Vec<Vector>,
    /// `∂loss/∂x_fc1` per sample.
    pub grad_fc1: Vec<Vector>,
}

/// Exact gradients of [`ssn_loss`]. The data term uses `∂/∂z = (ŷ − y)/N`,
/// the derivative of the unclamped log loss.
pub fn ssn_backward(caches: &[SsnCache], labels: &[bool], p: &SsnParams, lambda: f64) -> Result<SsnBackward> {
    if caches.is_empty() {
        return Err(Error::arg("backward pass over an empty batch"));
    }
    if caches.len() != labels.len() {
        return Err(Error::shape(format!("{} caches but {} labels", caches.len(), labels.len())));
    }
    if let Some(c) = caches.iter().find(|c| c.generation != p.generation || c.input.len() != p.w1.cols()) {
        return Err(Error::State(format!(
            "cache from parameter generation {} used with generation {}",
            c.generation, p.generation
        )));
    }
    let n = caches.len() as f64;
    let fc1 = p.fc1_dim();
    let mut grads = p.zero_grads();
    let mut grad_h = Vec::with_capacity(caches.len());
    let mut grad_fc1 = Vec::with_capacity(caches.len());
    let mut dpre = vec![0.0; fc1];
    let mut dinput = vec![0.0; p.w1.cols()];
    for (cache, &y) in caches.iter().zip(labels) {
        let out = &cache.output;
        let dz = (out.y_hat - label_value(y)) / n;
        let dx: Vector = p.w2.row(0).iter().map(|w| w * dz).collect();
        for k in 0..fc1 {
            dpre[k] = if out.x_fc1[k] > 0.0 { dx[k] } else { 0.0 };
        }
        grads.w2.row_mut(0).iter_mut().zip(out.x_fc1.iter()).for_each(|(g, x)| *g += dz * x);
        grads.b2 += dz;
        grads.b1.add_scaled(1.0, &dpre);
        grads.w1.rank1_block_acc(0, 1.0, &dpre, &cache.input);
        dinput.fill(0.0);
        p.w1.matvec_t_block_acc(0, &dpre, &mut dinput);
        grad_h.push(Vector::from(dinput[..p.hidden_dim].to_vec()));
        grad_fc1.push(dx);
    }
    grads.add_weight_decay(p, lambda);
    Ok(SsnBackward {
        grads,
        grad_h,
        grad_fc1,
    })
}

/// Every (frame, item) pairing of one hidden-state sequence with a set of
/// gallery items, sharing the first-layer projections: each hidden state
/// and each item is projected once. Outputs are item-major,
/// `outputs[item * frames + frame]`.
#[derive(Clone, Debug)]
pub struct GridForward {
    pub outputs: Vec<SsnOutput>,
    frames: usize,
    items: usize,
    generation: u64,
}

impl GridForward {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn output(&self, item: usize, frame: usize) -> &SsnOutput {
        &self.outputs[item * self.frames + frame]
    }

    /// The outputs of one item across all frames.
    pub fn item_outputs(&self, item: usize) -> &[SsnOutput] {
        &self.outputs[item * self.frames..(item + 1) * self.frames]
    }
}

pub fn ssn_forward_grid(p: &SsnParams, hs: &[Vector], items: &[&[f64]]) -> Result<GridForward> {
    let fc1 = p.fc1_dim();
    let mut hidden_proj = Vec::with_capacity(hs.len());
    for h in hs {
        p.check_inputs(h, &vec![0.0; p.item_dim])?;
        let mut a = vec![0.0; fc1];
        p.project_hidden(h, &mut a);
        hidden_proj.push(a);
    }
    let mut outputs = Vec::with_capacity(hs.len() * items.len());
    let mut b = vec![0.0; fc1];
    for m in items {
        if m.len() != p.item_dim {
            return Err(Error::shape(format!("SSN expects item {}, got {}", p.item_dim, m.len())));
        }
        p.project_item(m, &mut b);
        for a in &hidden_proj {
            let mut x = Vector::zeros(fc1);
            let (z, y_hat) = p.finish(a, &b, &mut x);
            outputs.push(SsnOutput { x_fc1: x, z, y_hat });
        }
    }
    Ok(GridForward {
        outputs,
        frames: hs.len(),
        items: items.len(),
        generation: p.generation,
    })
}

/// One trajectory's share of a replicated batch.
pub struct GridBatch<'a> {
    pub forward: &'a GridForward,
    pub hs: &'a [Vector],
    pub items: &'a [&'a [f64]],
    /// One label per item, shared by all frames.
    pub labels: &'a [bool],
}

/// Mean log loss over every sample of every grid, plus the weight penalty.
pub fn grid_loss(batch: &[GridBatch], p: &SsnParams, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for g in batch {
        for (i, &y) in g.labels.iter().enumerate() {
            for o in g.forward.item_outputs(i) {
                total += log_loss(o.y_hat, y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::arg("loss of an empty batch"));
    }
    Ok(total / n as f64 + lambda * p.weight_norm_sq())
}

/// Gradients of [`grid_loss`], identical to [`ssn_backward`] over the
/// flattened samples. First-layer deltas are summed over items (for the
/// hidden half) and over frames (for the item half) before the outer
/// products. Also returns `∂loss/∂h` per grid and frame.
pub fn ssn_backward_grid(batch: &[GridBatch], p: &SsnParams, lambda: f64) -> Result<(SsnGrads, Vec<Vec<Vector>>)> {
    let n: usize = batch.iter().map(|g| g.forward.outputs.len()).sum();
    if n == 0 {
        return Err(Error::arg("backward pass over an empty batch"));
    }
    for g in batch {
        let f = g.forward;
        if f.generation != p.generation {
            return Err(Error::State(format!(
                "grid from parameter generation {} used with generation {}",
                f.generation, p.generation
            )));
        }
        if g.hs.len() != f.frames || g.items.len() != f.items || g.labels.len() != f.items {
            return Err(Error::shape("grid inputs do not match its forward pass"));
        }
    }
    let fc1 = p.fc1_dim();
    let h_dim = p.hidden_dim;
    let w2 = p.w2.row(0);
    let mut grads = p.zero_grads();
    let mut grad_h = Vec::with_capacity(batch.len());
    let mut dpre = vec![0.0; fc1];
    for g in batch {
        let f = g.forward;
        let mut d_hidden = vec![vec![0.0; fc1]; f.frames];
        let mut d_item = vec![0.0; fc1];
        for (i, &y) in g.labels.iter().enumerate() {
            d_item.fill(0.0);
            for (t, o) in f.item_outputs(i).iter().enumerate() {
                let dz = (o.y_hat - label_value(y)) / n as f64;
                grads.b2 += dz;
                for k in 0..fc1 {
                    grads.w2.as_mut_slice()[k] += dz * o.x_fc1[k];
                    dpre[k] = if o.x_fc1[k] > 0.0 { w2[k] * dz } else { 0.0 };
                    d_hidden[t][k] += dpre[k];
                    d_item[k] += dpre[k];
                }
            }
            grads.b1.add_scaled(1.0, &d_item);
            grads.w1.rank1_block_acc(h_dim, 1.0, &d_item, g.items[i]);
        }
        let mut per_frame = Vec::with_capacity(f.frames);
        for (t, d) in d_hidden.iter().enumerate() {
            grads.w1.rank1_block_acc(0, 1.0, d, &g.hs[t]);
            let mut gh = Vector::zeros(h_dim);
            p.w1.matvec_t_block_acc(0, d, &mut gh);
            per_frame.push(gh);
        }
        grad_h.push(per_frame);
    }
    grads.add_weight_decay(p, lambda);
    Ok((grads, grad_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn zero_params_give_half() {
        let p = SsnParams::zeros(3, 2, 4);
        let out = ssn_forward(&p, &[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap();
        assert_eq!(out.z, 0.0);
        assert_eq!(out.y_hat, 0.5);
    }

    #[test]
    fn bias_only_output() {
        let mut rng = Rng::seed_from_u64(3);
        let mut p = SsnParams::init(3, 2, 4, 0.5, &mut rng);
        p.w2 = Matrix::zeros(1, 4);
        p.b2 = 3f64.ln();
        let out = ssn_forward(&p, &random_vec(&mut rng, 3), &random_vec(&mut rng, 2)).unwrap();
        assert!((out.y_hat - 0.75).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = Rng::seed_from_u64(10);
        let p = SsnParams::init(4, 3, 6, 0.7, &mut rng);
        let h = random_vec(&mut rng, 4);
        let m = random_vec(&mut rng, 3);
        let out = ssn_forward(&p, &h, &m).unwrap();
        let mut z = p.b2;
        for r in 0..6 {
            let mut a = p.b1[r];
            for (c, v) in h.iter().chain(&m).enumerate() {
                a += p.w1.get(r, c) * v;
            }
            z += p.w2.get(0, r) * a.max(0.0);
        }
        assert!((out.z - z).abs() < 1e-12);
        assert!(out.x_fc1.iter().all(|&v| v >= 0.0));
        assert_eq!(out.y_hat, sigmoid(out.z));
    }

    #[test]
    fn projected_path_matches_forward() {
        let mut rng = Rng::seed_from_u64(12);
        let p = SsnParams::init(5, 4, 7, 0.4, &mut rng);
        let h = random_vec(&mut rng, 5);
        let m = random_vec(&mut rng, 4);
        let mut a = vec![0.0; 7];
        let mut b = vec![0.0; 7];
        let mut x = vec![0.0; 7];
        p.project_hidden(&h, &mut a);
        p.project_item(&m, &mut b);
        let (z, y) = p.finish(&a, &b, &mut x);
        let out = ssn_forward(&p, &h, &m).unwrap();
        assert!((z - out.z).abs() < 1e-12);
        assert!((y - out.y_hat).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let p = SsnParams::zeros(3, 2, 4);
        assert!(matches!(ssn_forward(&p, &[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    fn output(y_hat: f64) -> SsnOutput {
        SsnOutput {
            x_fc1: Vector::zeros(1),
            z: 0.0,
            y_hat,
        }
    }

    #[test]
    fn loss_at_half_is_ln2() {
        let p = SsnParams::zeros(1, 1, 1);
        let l = ssn_loss(&[output(0.5), output(0.5)], &[true, false], &p, 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_predictions_have_tiny_loss() {
        let p = SsnParams::zeros(1, 1, 1);
        let l = ssn_loss(&[output(1.0), output(0.0)], &[true, false], &p, 0.0).unwrap();
        assert!(l <= 1e-11);
        assert!(ssn_loss(&[], &[], &p, 0.0).is_err());
    }

    #[test]
    fn two_sample_loss_term_by_term() {
        let mut rng = Rng::seed_from_u64(30);
        let p = SsnParams::init(2, 2, 3, 0.5, &mut rng);
        let outs = [output(0.8), output(0.3)];
        let l = ssn_loss(&outs, &[true, false], &p, 0.01).unwrap();
        let mut w_sq = 0.0;
        for v in p.w1.as_slice().iter().chain(p.w2.as_slice()) {
            w_sq += v * v;
        }
        let expected = -(0.8f64.ln() + 0.7f64.ln()) / 2.0 + 0.01 * w_sq;
        assert!((l - expected).abs() < 1e-14);
    }

    fn batch(seed: u64, n: usize) -> (SsnParams, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = Rng::seed_from_u64(seed);
        let p = SsnParams::init(4, 3, 5, 0.6, &mut rng);
        let hs = (0..n).map(|_| random_vec(&mut rng, 4)).collect();
        let ms = (0..n).map(|_| random_vec(&mut rng, 3)).collect();
        let labels = (0..n).map(|i| i % 2 == 0).collect();
        (p, hs, ms, labels)
    }

    fn total_loss(p: &SsnParams, hs: &[Vec<f64>], ms: &[Vec<f64>], labels: &[bool], lambda: f64) -> f64 {
        let outs: Vec<SsnOutput> = hs.iter().zip(ms).map(|(h, m)| ssn_forward(p, h, m).unwrap()).collect();
        ssn_loss(&outs, labels, p, lambda).unwrap()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (p, hs, ms, labels) = batch(seed, 2 + seed as usize);
            let caches: Vec<SsnCache> = hs.iter().zip(&ms).map(|(h, m)| ssn_forward_cached(&p, h, m).unwrap()).collect();
            let back = ssn_backward(&caches, &labels, &p, 0.01).unwrap();
            let mut probe = p.clone();
            let numeric = finite_diff_grad(
                |flat| {
                    probe.assign(flat);
                    total_loss(&probe, &hs, &ms, &labels, 0.01)
                },
                &p.flatten(),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&back.grads.flatten(), &numeric) < 1e-4);
        }
    }

    #[test]
    fn hidden_gradients_match_finite_differences() {
        let (p, hs, ms, labels) = batch(7, 3);
        let caches: Vec<SsnCache> = hs.iter().zip(&ms).map(|(h, m)| ssn_forward_cached(&p, h, m).unwrap()).collect();
        let back = ssn_backward(&caches, &labels, &p, 0.0).unwrap();
        for i in 0..3 {
            let numeric = finite_diff_grad(
                |h| {
                    let mut hs2 = hs.clone();
                    hs2[i] = h.to_vec();
                    total_loss(&p, &hs2, &ms, &labels, 0.0)
                },
                &hs[i],
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&back.grad_h[i], &numeric) < 1e-4);
        }
    }

    #[test]
    fn gradient_on_logit_is_prediction_error() {
        let (p, hs, ms, _) = batch(4, 1);
        for label in [true, false] {
            let cache = ssn_forward_cached(&p, &hs[0], &ms[0]).unwrap();
            let back = ssn_backward(&[cache.clone()], &[label], &p, 0.0).unwrap();
            let expected = cache.output.y_hat - label_value(label);
            assert!((back.grads.b2 - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn optimum_has_vanishing_gradient() {
        // A large positive bias saturates ŷ at one for positives.
        let mut rng = Rng::seed_from_u64(1);
        let mut p = SsnParams::init(2, 2, 3, 0.1, &mut rng);
        p.b2 = 40.0;
        let caches = vec![ssn_forward_cached(&p, &[0.1, 0.2], &[0.3, 0.4]).unwrap()];
        let back = ssn_backward(&caches, &[true], &p, 0.0).unwrap();
        assert!(back.grads.flatten().iter().all(|g| g.abs() <= 1e-9));
    }

    #[test]
    fn regulariser_gradient_is_two_lambda_w() {
        let mut rng = Rng::seed_from_u64(2);
        let mut p = SsnParams::init(2, 2, 3, 0.5, &mut rng);
        p.b2 = 40.0;
        let caches = vec![ssn_forward_cached(&p, &[0.1, 0.2], &[0.3, 0.4]).unwrap()];
        let back = ssn_backward(&caches, &[true], &p, 0.05).unwrap();
        for (g, w) in back.grads.w1.as_slice().iter().zip(p.w1.as_slice()) {
            assert!((g - 0.1 * w).abs() < 1e-12);
        }
        assert!(back.grads.b1.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut p, hs, ms, labels) = batch(5, 1);
        let cache = ssn_forward_cached(&p, &hs[0], &ms[0]).unwrap();
        let g = p.zero_grads();
        p.apply(-0.1, &g);
        assert!(matches!(ssn_backward(&[cache], &labels, &p, 0.0), Err(Error::State(_))));
    }

    #[test]
    fn loss_is_non_negative() {
        let mut rng = Rng::seed_from_u64(6);
        for _ in 0..100 {
            let outs: Vec<SsnOutput> = (0..4).map(|_| output(rng.uniform())).collect();
            let labels: Vec<bool> = (0..4).map(|_| rng.below(2) == 1).collect();
            let p = SsnParams::init(1, 1, 2, 1.0, &mut rng);
            assert!(ssn_loss(&outs, &labels, &p, 0.1).unwrap() >= 0.0);
        }
    }

    #[test]
    fn grid_matches_per_sample_path() {
        let mut rng = Rng::seed_from_u64(40);
        let p = SsnParams::init(4, 3, 6, 0.6, &mut rng);
        let trajs: Vec<Vec<Vector>> = (0..2).map(|_| (0..5).map(|_| Vector::from(random_vec(&mut rng, 4))).collect()).collect();
        let items: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 3)).collect();
        let item_refs: Vec<&[f64]> = items.iter().map(|m| m.as_slice()).collect();
        let labels = [true, false, true];
        let grids: Vec<GridForward> = trajs.iter().map(|hs| ssn_forward_grid(&p, hs, &item_refs).unwrap()).collect();
        let batch: Vec<GridBatch> = grids
            .iter()
            .zip(&trajs)
            .map(|(f, hs)| GridBatch {
                forward: f,
                hs,
                items: &item_refs,
                labels: &labels,
            })
            .collect();
        let (grads, grad_h) = ssn_backward_grid(&batch, &p, 0.02).unwrap();

        let mut caches = Vec::new();
        let mut flat_labels = Vec::new();
        for hs in &trajs {
            for (m, &y) in items.iter().zip(&labels) {
                for h in hs {
                    caches.push(ssn_forward_cached(&p, h, m).unwrap());
                    flat_labels.push(y);
                }
            }
        }
        let outs: Vec<SsnOutput> = caches.iter().map(|c| c.output.clone()).collect();
        let loss = ssn_loss(&outs, &flat_labels, &p, 0.02).unwrap();
        assert!((grid_loss(&batch, &p, 0.02).unwrap() - loss).abs() < 1e-14);
        for (g, o) in grids.iter().flat_map(|g| g.outputs.iter()).zip(&outs) {
            assert!((g.z - o.z).abs() < 1e-12);
        }
        let back = ssn_backward(&caches, &flat_labels, &p, 0.02).unwrap();
        assert!(max_relative_error(&grads.flatten(), &back.grads.flatten()) < 1e-10);
        for (u, per_frame) in grad_h.iter().enumerate() {
            for t in 0..5 {
                let mut expected = Vector::zeros(4);
                for i in 0..3 {
                    expected.add_scaled(1.0, &back.grad_h[u * 15 + i * 5 + t]);
                }
                assert!(max_relative_error(&per_frame[t], &expected) < 1e-10);
            }
        }
    }
}
