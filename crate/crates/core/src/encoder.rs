//! Stacked LSTM trajectory encoder with hand-derived backpropagation
//! through time.
//!
//! Gate rows of the weight matrix are ordered (input, forget, output,
//! candidate); columns are ordered (previous hidden state, frame input).

use crate::error::{Error, Result};
use crate::numerics::{bounded_tanh, sigmoid, Matrix, Rng, Vector};

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    input_dim: usize,
    hidden_dim: usize,
    /// `(4·hidden) × (hidden + input)`
    pub weights: Matrix,
    /// `4·hidden`
    pub bias: Vector,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            weights: Matrix::zeros(4 * hidden_dim, hidden_dim + input_dim),
            bias: Vector::zeros(4 * hidden_dim),
        }
    }

    /// Weights and biases uniform in `[-scale, scale]`, forget bias set to
    /// [`FORGET_BIAS`].
    pub fn init(input_dim: usize, hidden_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut p = LstmParams::zeros(input_dim, hidden_dim);
        p.weights
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = rng.uniform_in(-scale, scale));
        p.bias.iter_mut().for_each(|b| *b = rng.uniform_in(-scale, scale));
        p.bias[hidden_dim..2 * hidden_dim].fill(FORGET_BIAS);
        p
    }

    pub fn from_parts(input_dim: usize, hidden_dim: usize, weights: Matrix, bias: Vector) -> Result<Self> {
        if weights.rows() != 4 * hidden_dim || weights.cols() != hidden_dim + input_dim || bias.dim() != 4 * hidden_dim {
            return Err(Error::shape(format!(
                "LSTM input {input_dim} hidden {hidden_dim} needs {}x{} weights and {} biases, got {}x{} and {}",
                4 * hidden_dim,
                hidden_dim + input_dim,
                4 * hidden_dim,
                weights.rows(),
                weights.cols(),
                bias.dim()
            )));
        }
        Ok(LstmParams {
            input_dim,
            hidden_dim,
            weights,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: Vector::zeros(hidden_dim),
            c: Vector::zeros(hidden_dim),
        }
    }
}

/// Intermediates of one step, kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    /// `(h_{t-1}, m_t)`
    pub input: Vec<f64>,
    /// Activated gates `(i, f, o, g)`, each `hidden` long.
    pub gates: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

pub fn lstm_step(p: &LstmParams, prev: &LstmState, x: &[f64]) -> Result<(LstmState, StepCache)> {
    let hd = p.hidden_dim;
    if x.len() != p.input_dim {
        return Err(Error::shape(format!("LSTM expects input dim {}, got {}", p.input_dim, x.len())));
    }
    if prev.h.dim() != hd || prev.c.dim() != hd {
        return Err(Error::shape(format!("LSTM state must have dim {hd}")));
    }
    let mut input = Vec::with_capacity(hd + p.input_dim);
    input.extend_from_slice(&prev.h);
    input.extend_from_slice(x);

    let mut gates = vec![0.0; 4 * hd];
    p.weights.matvec_block(0, &input, &mut gates);
    for (g, b) in gates.iter_mut().zip(p.bias.iter()) {
        *g += b;
    }
    let (sig, cand) = gates.split_at_mut(3 * hd);
    sig.iter_mut().for_each(|v| *v = sigmoid(*v));
    cand.iter_mut().for_each(|v| *v = bounded_tanh(*v));

    let mut c = Vector::zeros(hd);
    let mut h = Vector::zeros(hd);
    let mut tanh_c = vec![0.0; hd];
    for k in 0..hd {
        let (i, f, o, g) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
        c[k] = f * prev.c[k] + i * g;
        tanh_c[k] = c[k].tanh();
        h[k] = o * tanh_c[k];
    }
    let cache = StepCache {
        input,
        gates,
        c_prev: prev.c.to_vec(),
        tanh_c,
    };
    Ok((LstmState { h, c }, cache))
}

/// Layers applied bottom to top; layer `k` reads layer `k-1`'s hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedLstm {
    pub layers: Vec<LstmParams>,
}

impl StackedLstm {
    pub fn new(layers: Vec<LstmParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("a stacked LSTM needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(Error::shape(format!(
                    "layer {} has input dim {} but layer {k} emits {}",
                    k + 1,
                    pair[1].input_dim,
                    pair[0].hidden_dim
                )));
            }
        }
        Ok(StackedLstm { layers })
    }

    pub fn init(input_dim: usize, hidden_dim: usize, depth: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| LstmParams::init(if k == 0 { input_dim } else { hidden_dim }, hidden_dim, scale, rng))
            .collect();
        StackedLstm::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_dim)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LstmGrads {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: Vector::zeros(l.bias.dim()),
                })
                .collect(),
        }
    }

    /// All weights then biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.as_slice().len());
            l.weights.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.dim());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        debug_assert!(rest.is_empty());
    }

    /// `θ += scale · grads`
    pub fn apply(&mut self, scale: f64, grads: &StackGrads) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.add_scaled(scale, &g.weights);
            l.bias.add_scaled(scale, &g.bias);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub weights: Matrix,
    pub bias: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<LstmGrads>,
}

impl StackGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.frobenius_sq() + l.bias.norm_sq()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.scale(factor);
            l.bias.scale(factor);
        }
    }

    pub fn add_scaled(&mut self, factor: f64, other: &StackGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(factor, &b.weights);
            a.bias.add_scaled(factor, &b.bias);
        }
    }
}

/// Per-layer, per-step caches of one [`encode`] call.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    layers: Vec<Vec<StepCache>>,
}

impl EncoderTape {
    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total number of cached steps (`steps × depth`).
    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn run_layer(p: &LstmParams, inputs: &[Vector], tape: Option<&mut Vec<StepCache>>) -> Result<Vec<Vector>> {
    let mut state = LstmState::zeros(p.hidden_dim);
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut tape = tape;
    for x in inputs {
        let (next, cache) = lstm_step(p, &state, x)?;
        if let Some(t) = tape.as_deref_mut() {
            t.push(cache);
        }
        outputs.push(next.h.clone());
        state = next;
    }
    Ok(outputs)
}

/// Runs the stack over `frames` from zero initial states and returns the top
/// layer's hidden states together with the tape for [`backprop`].
pub fn encode(stack: &StackedLstm, frames: &[Vector]) -> Result<(Vec<Vector>, EncoderTape)> {
    if frames.is_empty() {
        return Err(Error::arg("cannot encode an empty trajectory"));
    }
    let mut layers = Vec::with_capacity(stack.depth());
    let mut seq = frames.to_vec();
    for p in &stack.layers {
        let mut caches = Vec::with_capacity(frames.len());
        seq = run_layer(p, &seq, Some(&mut caches))?;
        layers.push(caches);
    }
    Ok((seq, EncoderTape { layers }))
}

/// Forward pass without recording a tape.
pub fn encode_hidden(stack: &StackedLstm, frames: &[Vector]) -> Result<Vec<Vector>> {
    if frames.is_empty() {
        return Err(Error::arg("cannot encode an empty trajectory"));
    }
    let mut seq = frames.to_vec();
    for p in &stack.layers {
        seq = run_layer(p, &seq, None)?;
    }
    Ok(seq)
}

/// Reverse-mode gradients of `Σ_t ⟨grad_h[t], h_t⟩` (top-layer hidden
/// states) with respect to every weight and bias of the stack.
pub fn backprop(stack: &StackedLstm, tape: &EncoderTape, grad_h: &[Vector]) -> Result<StackGrads> {
    let mut grads = stack.zero_grads();
    backprop_into(stack, tape, grad_h, &mut grads)?;
    Ok(grads)
}

/// As [`backprop`], accumulating into `grads`.
pub fn backprop_into(stack: &StackedLstm, tape: &EncoderTape, grad_h: &[Vector], grads: &mut StackGrads) -> Result<()> {
    if tape.depth() != stack.depth() {
        return Err(Error::State(format!(
            "tape has {} layers, stack has {}",
            tape.depth(),
            stack.depth()
        )));
    }
    let steps = tape.steps();
    if grad_h.len() != steps {
        return Err(Error::shape(format!("{} hidden gradients for {steps} steps", grad_h.len())));
    }
    for (p, caches) in stack.layers.iter().zip(&tape.layers) {
        if caches.len() != steps
            || caches.iter().any(|c| c.input.len() != p.hidden_dim + p.input_dim || c.gates.len() != 4 * p.hidden_dim)
        {
            return Err(Error::State("tape does not match stack dimensions".into()));
        }
    }
    if grad_h.iter().any(|g| g.dim() != stack.hidden_dim()) {
        return Err(Error::shape(format!("hidden gradients must have dim {}", stack.hidden_dim())));
    }

    let mut upstream: Vec<Vector> = grad_h.to_vec();
    for (k, (p, caches)) in stack.layers.iter().zip(&tape.layers).enumerate().rev() {
        let hd = p.hidden_dim;
        let g = &mut grads.layers[k];
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut below: Vec<Vector> = vec![Vector::zeros(p.input_dim); steps];
        let mut dpre = vec![0.0; 4 * hd];
        let mut dinput = vec![0.0; hd + p.input_dim];
        for t in (0..steps).rev() {
            let cache = &caches[t];
            for j in 0..hd {
                let (i, f, o, gc) = (cache.gates[j], cache.gates[hd + j], cache.gates[2 * hd + j], cache.gates[3 * hd + j]);
                let th = cache.tanh_c[j];
                let dh = upstream[t][j] + dh_next[j];
                let dc = dh * o * (1.0 - th * th) + dc_next[j];
                dpre[j] = dc * gc * i * (1.0 - i);
                dpre[hd + j] = dc * cache.c_prev[j] * f * (1.0 - f);
                dpre[2 * hd + j] = dh * th * o * (1.0 - o);
                dpre[3 * hd + j] = dc * i * (1.0 - gc * gc);
                dc_next[j] = dc * f;
            }
            g.weights.rank1_block_acc(0, 1.0, &dpre, &cache.input);
            g.bias.add_scaled(1.0, &dpre);
            dinput.fill(0.0);
            p.weights.matvec_t_block_acc(0, &dpre, &mut dinput);
            dh_next.copy_from_slice(&dinput[..hd]);
            below[t].copy_from_slice(&dinput[hd..]);
        }
        upstream = below;
    }
    Ok(())
}
