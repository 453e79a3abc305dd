//! Single-layer LSTM sequence labeller trained with Adam.
//!
//! Every timestep of a sensor sequence is classified into one of the five
//! position classes. The cell is the usual forget-gate LSTM without peepholes:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)      f = σ(W_f x + U_f h + b_f)
//! o = σ(W_o x + U_o h + b_o)      g = tanh(W_g x + U_g h + b_g)
//! c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')
//! ```
//!
//! followed by a softmax output layer `V h' + c`. The training loss is the
//! cross-entropy averaged over the timesteps of a sequence, then averaged over
//! sequences, and gradients come from backpropagation through time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Cycle, PositionLabel, SensorVector, SENSOR_COUNT};

pub const CLASS_COUNT: usize = 5;

/// Probability floor inside the logarithm of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// `out += self · x`
    fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `out += selfᵀ · y`
    fn mul_t_vec_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &yr) in self.data.chunks_exact(self.cols).zip(y) {
            if yr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
    }

    /// `self += a · bᵀ`
    fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ar) in self.data.chunks_exact_mut(self.cols).zip(a) {
            for (x, bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }

    fn check(&self, rows: usize, cols: usize, name: &str) -> Result<()> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{} with {} entries, expected {rows}x{cols}",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// hidden × inputs
    pub w: Matrix,
    /// hidden × hidden
    pub u: Matrix,
    pub b: Vec<f64>,
}

impl GateParams {
    fn zeros(hidden: usize) -> Self {
        GateParams {
            w: Matrix::zeros(hidden, SENSOR_COUNT),
            u: Matrix::zeros(hidden, hidden),
            b: vec![0.0; hidden],
        }
    }

    /// `W x + U h + b`
    fn preactivation(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let mut a = self.b.clone();
        self.w.mul_vec_add(x, &mut a);
        self.u.mul_vec_add(h_prev, &mut a);
        a
    }
}

/// Weights of the LSTM layer and its softmax output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub candidate: GateParams,
    /// classes × hidden
    pub output_weights: Matrix,
    pub output_bias: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(hidden: usize) -> Self {
        LstmParams {
            hidden,
            input_gate: GateParams::zeros(hidden),
            forget_gate: GateParams::zeros(hidden),
            output_gate: GateParams::zeros(hidden),
            candidate: GateParams::zeros(hidden),
            output_weights: Matrix::zeros(CLASS_COUNT, hidden),
            output_bias: vec![0.0; CLASS_COUNT],
        }
    }

    /// Uniform entries in `[-scale, scale]`, then `forget_bias` added to the
    /// forget-gate bias.
    pub fn random(hidden: usize, scale: f64, forget_bias: f64, seed: u64) -> Self {
        let mut p = LstmParams::zeros(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if scale > 0.0 {
            for t in p.tensors_mut() {
                for x in t.iter_mut() {
                    *x = rng.random_range(-scale..=scale);
                }
            }
        }
        for b in &mut p.forget_gate.b {
            *b += forget_bias;
        }
        p
    }

    pub fn gate(&self, gate: Gate) -> &GateParams {
        match gate {
            Gate::Input => &self.input_gate,
            Gate::Forget => &self.forget_gate,
            Gate::Output => &self.output_gate,
            Gate::Candidate => &self.candidate,
        }
    }

    fn gate_mut(&mut self, gate: Gate) -> &mut GateParams {
        match gate {
            Gate::Input => &mut self.input_gate,
            Gate::Forget => &mut self.forget_gate,
            Gate::Output => &mut self.output_gate,
            Gate::Candidate => &mut self.candidate,
        }
    }

    /// All parameter arrays in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(14);
        for gate in [
            &self.input_gate,
            &self.forget_gate,
            &self.output_gate,
            &self.candidate,
        ] {
            out.push(&gate.w.data);
            out.push(&gate.u.data);
            out.push(&gate.b);
        }
        out.push(&self.output_weights.data);
        out.push(&self.output_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let LstmParams {
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            output_weights,
            output_bias,
            ..
        } = self;
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(14);
        for gate in [input_gate, forget_gate, output_gate, candidate] {
            let GateParams { w, u, b } = gate;
            out.push(&mut w.data);
            out.push(&mut u.data);
            out.push(b);
        }
        out.push(&mut output_weights.data);
        out.push(output_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden;
        if h == 0 {
            return Err(Error::DimensionMismatch("hidden size is zero".into()));
        }
        for (gate, name) in Gate::ALL
            .iter()
            .zip(["input", "forget", "output", "candidate"])
        {
            let g = self.gate(*gate);
            g.w.check(h, SENSOR_COUNT, &format!("{name} gate W"))?;
            g.u.check(h, h, &format!("{name} gate U"))?;
            if g.b.len() != h {
                return Err(Error::DimensionMismatch(format!(
                    "{name} gate bias has {} entries, expected {h}",
                    g.b.len()
                )));
            }
        }
        self.output_weights
            .check(CLASS_COUNT, h, "output weights")?;
        if self.output_bias.len() != CLASS_COUNT {
            return Err(Error::DimensionMismatch(format!(
                "output bias has {} entries, expected {CLASS_COUNT}",
                self.output_bias.len()
            )));
        }
        if self
            .tensors()
            .iter()
            .any(|t| t.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    fn add_scaled(&mut self, other: &LstmParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one cell step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn forward_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<CellCache> {
    let h = p.hidden;
    if x.len() != SENSOR_COUNT || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::DimensionMismatch(format!(
            "cell inputs x={}, h={}, c={} for hidden size {h}",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut i = p.input_gate.preactivation(x, h_prev);
    let mut f = p.forget_gate.preactivation(x, h_prev);
    let mut o = p.output_gate.preactivation(x, h_prev);
    let mut g = p.candidate.preactivation(x, h_prev);
    i.iter_mut().for_each(|v| *v = sigmoid(*v));
    f.iter_mut().for_each(|v| *v = sigmoid(*v));
    o.iter_mut().for_each(|v| *v = sigmoid(*v));
    g.iter_mut().for_each(|v| *v = v.tanh());

    let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let hn: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    Ok(CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        o,
        g,
        c,
        tanh_c,
        h: hn,
    })
}

fn output_logits(p: &LstmParams, h: &[f64]) -> [f64; CLASS_COUNT] {
    let mut z = [0.0; CLASS_COUNT];
    z.copy_from_slice(&p.output_bias);
    p.output_weights.mul_vec_add(h, &mut z);
    z
}

fn forward_cached(
    seq: &[SensorVector],
    p: &LstmParams,
) -> Result<(Vec<CellCache>, Vec<[f64; CLASS_COUNT]>)> {
    p.validate_shapes()?;
    let mut h = vec![0.0; p.hidden];
    let mut c = vec![0.0; p.hidden];
    let mut caches = Vec::with_capacity(seq.len());
    let mut logits = Vec::with_capacity(seq.len());
    for sv in seq {
        let cache = forward_cell(&sv.as_features(), &h, &c, p)?;
        logits.push(output_logits(p, &cache.h));
        h.clone_from(&cache.h);
        c.clone_from(&cache.c);
        caches.push(cache);
    }
    Ok((caches, logits))
}

impl LstmParams {
    fn validate_shapes(&self) -> Result<()> {
        // full validation minus the finiteness scan, which the NaN guard covers
        let h = self.hidden;
        for gate in Gate::ALL {
            let g = self.gate(gate);
            g.w.check(h, SENSOR_COUNT, "gate W")?;
            g.u.check(h, h, "gate U")?;
            if g.b.len() != h {
                return Err(Error::DimensionMismatch("gate bias".into()));
            }
        }
        self.output_weights
            .check(CLASS_COUNT, h, "output weights")?;
        if self.output_bias.len() != CLASS_COUNT {
            return Err(Error::DimensionMismatch("output bias".into()));
        }
        Ok(())
    }
}

/// Class logits for every timestep, starting from zero hidden and cell state.
pub fn forward_sequence(seq: &[SensorVector], p: &LstmParams) -> Result<Vec<[f64; CLASS_COUNT]>> {
    Ok(forward_cached(seq, p)?.1)
}

pub fn softmax(logits: &[f64; CLASS_COUNT]) -> [f64; CLASS_COUNT] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; CLASS_COUNT];
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Mean over timesteps of `-ln p[label]`, with `p` floored at [`PROB_FLOOR`].
pub fn sequence_loss(probs: &[[f64; CLASS_COUNT]], labels: &[PositionLabel]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Validation("loss of an empty sequence".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, l)| -p[l.index()].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / probs.len() as f64)
}

/// Loss, per-step correctness count and gradient of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub loss: f64,
    pub correct: usize,
    pub steps: usize,
    pub grads: LstmParams,
}

fn argmax(row: &[f64; CLASS_COUNT]) -> usize {
    let mut best = 0;
    for k in 1..CLASS_COUNT {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

pub fn evaluate_sequence(
    seq: &[SensorVector],
    labels: &[PositionLabel],
    p: &LstmParams,
) -> Result<SequenceEval> {
    if seq.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} timesteps but {} labels",
            seq.len(),
            labels.len()
        )));
    }
    if seq.is_empty() {
        return Err(Error::Validation("sequence has no timesteps".into()));
    }
    let (caches, logits) = forward_cached(seq, p)?;
    let n = seq.len();
    let hidden = p.hidden;
    let probs: Vec<_> = logits.iter().map(softmax).collect();
    let loss = sequence_loss(&probs, labels)?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(row, l)| argmax(row) == l.index())
        .count();

    let mut grads = LstmParams::zeros(hidden);
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let inv_n = 1.0 / n as f64;

    for t in (0..n).rev() {
        let cache = &caches[t];
        let mut dz = probs[t];
        dz[labels[t].index()] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= inv_n);

        grads.output_weights.add_outer(&dz, &cache.h);
        for (b, d) in grads.output_bias.iter_mut().zip(&dz) {
            *b += d;
        }
        let mut dh = dh_next.clone();
        p.output_weights.mul_t_vec_add(&dz, &mut dh);

        let mut da_i = vec![0.0; hidden];
        let mut da_f = vec![0.0; hidden];
        let mut da_o = vec![0.0; hidden];
        let mut da_g = vec![0.0; hidden];
        for j in 0..hidden {
            let dc = dh[j] * cache.o[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j]) + dc_next[j];
            da_o[j] = dh[j] * cache.tanh_c[j] * cache.o[j] * (1.0 - cache.o[j]);
            da_i[j] = dc * cache.g[j] * cache.i[j] * (1.0 - cache.i[j]);
            da_g[j] = dc * cache.i[j] * (1.0 - cache.g[j] * cache.g[j]);
            da_f[j] = dc * cache.c_prev[j] * cache.f[j] * (1.0 - cache.f[j]);
            dc_next[j] = dc * cache.f[j];
        }

        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (gate, da) in Gate::ALL.iter().zip([&da_i, &da_f, &da_o, &da_g]) {
            let g = grads.gate_mut(*gate);
            g.w.add_outer(da, &cache.x);
            g.u.add_outer(da, &cache.h_prev);
            for (b, d) in g.b.iter_mut().zip(da.iter()) {
                *b += d;
            }
            p.gate(*gate).u.mul_t_vec_add(da, &mut dh_next);
        }
    }

    Ok(SequenceEval {
        loss,
        correct,
        steps: n,
        grads,
    })
}

/// Gradient of the timestep-averaged cross-entropy of one sequence.
pub fn backward_sequence(
    seq: &[SensorVector],
    labels: &[PositionLabel],
    p: &LstmParams,
) -> Result<LstmParams> {
    Ok(evaluate_sequence(seq, labels, p)?.grads)
}

/// Largest relative error between the BPTT gradient and central finite
/// differences of [`sequence_loss`] with step `delta`, over every parameter.
/// Parameters whose two estimates are both exactly zero count as agreeing.
pub fn gradient_check(
    seq: &[SensorVector],
    labels: &[PositionLabel],
    p: &LstmParams,
    delta: f64,
) -> Result<f64> {
    let analytic = backward_sequence(seq, labels, p)?;
    let loss_at = |q: &LstmParams| -> Result<f64> {
        let probs: Vec<_> = forward_sequence(seq, q)?.iter().map(softmax).collect();
        sequence_loss(&probs, labels)
    };
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.tensors()[ti][k];
            probe.tensors_mut()[ti][k] = orig + delta;
            let up = loss_at(&probe)?;
            probe.tensors_mut()[ti][k] = orig - delta;
            let down = loss_at(&probe)?;
            probe.tensors_mut()[ti][k] = orig;
            let numeric = (up - down) / (2.0 * delta);
            let a = analytic.tensors()[ti][k];
            let denom = a.abs().max(numeric.abs());
            if denom > 0.0 {
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

/// A training sequence: sensor readings and their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub sensors: Vec<SensorVector>,
    pub labels: Vec<PositionLabel>,
}

impl From<&Cycle> for LabeledSequence {
    fn from(c: &Cycle) -> Self {
        LabeledSequence {
            sensors: c.sensors(),
            labels: c.labels(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Per-sequence work on the rayon pool; sequential without the `parallel` feature.
    #[default]
    Parallel,
}

#[derive(Clone, Debug)]
pub struct BatchEval {
    /// Mean of per-sequence losses.
    pub loss: f64,
    /// Pooled over all timesteps.
    pub accuracy: f64,
    /// Mean of per-sequence gradients.
    pub grads: LstmParams,
}

/// Full-batch loss and gradient. Per-sequence results are reduced in input
/// order, so both execution modes give bit-identical sums.
pub fn evaluate_batch(
    data: &[LabeledSequence],
    p: &LstmParams,
    execution: Execution,
) -> Result<BatchEval> {
    if data.is_empty() {
        return Err(Error::Validation("no training sequences".into()));
    }
    let eval = |s: &LabeledSequence| evaluate_sequence(&s.sensors, &s.labels, p);
    let per_seq: Vec<Result<SequenceEval>> = match execution {
        Execution::Parallel => crate::par::map(data, eval),
        Execution::Sequential => crate::par::map_sequential(data, eval),
    };
    let mut grads = LstmParams::zeros(p.hidden);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut steps = 0;
    for r in per_seq {
        let e = r?;
        loss += e.loss;
        correct += e.correct;
        steps += e.steps;
        grads.add_scaled(&e.grads, 1.0);
    }
    let inv = 1.0 / data.len() as f64;
    grads.scale(inv);
    Ok(BatchEval {
        loss: loss * inv,
        accuracy: correct as f64 / steps as f64,
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update over a flat parameter slice. `t` is the step number after
/// incrementing, so the first update uses `t = 1`.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..theta.len() {
        let g = grad[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        theta[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: LstmParams,
    pub v: LstmParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(hidden: usize) -> Self {
        AdamState {
            m: LstmParams::zeros(hidden),
            v: LstmParams::zeros(hidden),
            t: 0,
        }
    }
}

pub fn adam_step(p: &mut LstmParams, grads: &LstmParams, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t;
    let AdamState { m, v, .. } = state;
    for (((theta, g), m), v) in p
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        adam_update(theta, g, m, v, t, cfg);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Stacked LSTM layers; only 1 is supported.
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init_scale: f64,
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 50,
            layers: 1,
            epochs: 1000,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_scale: 0.08,
            forget_bias: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 {
            return fail("hidden size must be positive".into());
        }
        if self.layers != 1 {
            return fail(format!(
                "only a single LSTM layer is supported, got {}",
                self.layers
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.epsilon.is_nan()
            || self.epsilon <= 0.0
        {
            return fail("learning rate and epsilon must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 || !self.forget_bias.is_finite() {
            return fail("initialisation parameters must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training loss before each update.
    pub loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

impl TrainHistory {
    pub fn iterations(&self) -> usize {
        self.loss.len()
    }

    /// `iteration,loss,accuracy` rows, one per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,accuracy\n");
        for (i, (l, a)) in self.loss.iter().zip(&self.train_accuracy).enumerate() {
            out.push_str(&format!("{i},{l},{a}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "iteration,loss,accuracy")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header iteration,loss,accuracy".into(),
                })
            }
        }
        let mut history = TrainHistory::default();
        for (i, line) in lines {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 columns"));
            }
            let iter: usize = fields[0].parse().map_err(|_| bad("bad iteration"))?;
            if iter != history.loss.len() {
                return Err(bad("iterations out of order"));
            }
            history
                .loss
                .push(fields[1].parse().map_err(|_| bad("bad loss"))?);
            history
                .train_accuracy
                .push(fields[2].parse().map_err(|_| bad("bad accuracy"))?);
        }
        Ok(history)
    }
}

/// Trains on whole sequences with full-batch Adam, one update per epoch.
pub fn train(train_cycles: &[Cycle], cfg: &TrainConfig) -> Result<(LstmParams, TrainHistory)> {
    let data: Vec<LabeledSequence> = train_cycles.iter().map(LabeledSequence::from).collect();
    train_sequences(&data, cfg, Execution::default(), |_, _| {})
}

/// Training loop with a per-iteration callback `(iteration, eval)`.
pub fn train_sequences<F>(
    data: &[LabeledSequence],
    cfg: &TrainConfig,
    execution: Execution,
    mut on_iteration: F,
) -> Result<(LstmParams, TrainHistory)>
where
    F: FnMut(usize, &BatchEval),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("need at least one training cycle".into()));
    }
    for (k, s) in data.iter().enumerate() {
        if s.sensors.len() != s.labels.len() {
            return Err(Error::Validation(format!(
                "training cycle {k}: {} timesteps but {} labels",
                s.sensors.len(),
                s.labels.len()
            )));
        }
        if s.sensors.is_empty() {
            return Err(Error::Validation(format!("training cycle {k} is empty")));
        }
    }

    let mut params = LstmParams::random(cfg.hidden, cfg.init_scale, cfg.forget_bias, cfg.seed);
    let mut state = AdamState::new(cfg.hidden);
    let adam = cfg.adam();
    let mut history = TrainHistory::default();

    for iteration in 0..cfg.epochs {
        let eval = evaluate_batch(data, &params, execution)?;
        if !eval.loss.is_finite() || !eval.grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at iteration {iteration}"
            )));
        }
        history.loss.push(eval.loss);
        history.train_accuracy.push(eval.accuracy);
        on_iteration(iteration, &eval);
        adam_step(&mut params, &eval.grads, &mut state, &adam);
    }
    if !params.all_finite() {
        return Err(Error::Numeric(
            "training produced non-finite parameters".into(),
        ));
    }
    Ok((params, history))
}

/// Most probable class per timestep; ties go to the earliest class in
/// `A, B, C, D, Transition` order.
pub fn classify_sequence(seq: &[SensorVector], p: &LstmParams) -> Result<Vec<PositionLabel>> {
    Ok(forward_sequence(seq, p)?
        .iter()
        .map(|z| PositionLabel::ALL[argmax(&softmax(z))])
        .collect())
}

/// Classifies an unsegmented trace. The network is trained on cycles that
/// start from zero state, so the state is reset whenever a new run of `A` is
/// predicted and that sample is classified again from the reset state.
pub fn classify_stream(seq: &[SensorVector], p: &LstmParams) -> Result<Vec<PositionLabel>> {
    p.validate_shapes()?;
    let zero = vec![0.0; p.hidden];
    let mut h = zero.clone();
    let mut c = zero.clone();
    let mut out: Vec<PositionLabel> = Vec::with_capacity(seq.len());
    let predict =
        |cache: &CellCache| PositionLabel::ALL[argmax(&softmax(&output_logits(p, &cache.h)))];
    for sv in seq {
        let x = sv.as_features();
        let mut cache = forward_cell(&x, &h, &c, p)?;
        let mut label = predict(&cache);
        if label == PositionLabel::A && out.last().is_some_and(|&l| l != PositionLabel::A) {
            cache = forward_cell(&x, &zero, &zero, p)?;
            label = predict(&cache);
        }
        out.push(label);
        h = cache.h;
        c = cache.c;
    }
    Ok(out)
}

pub fn accuracy(pred: &[PositionLabel], truth: &[PositionLabel]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions but {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("accuracy of an empty sequence".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of correct timesteps pooled over several sequences.
pub fn pooled_accuracy<'a>(
    pairs: impl IntoIterator<Item = (&'a [PositionLabel], &'a [PositionLabel])>,
) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for (pred, truth) in pairs {
        if pred.len() != truth.len() {
            return Err(Error::DimensionMismatch(
                "prediction length differs from truth".into(),
            ));
        }
        hits += pred.iter().zip(truth).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    if total == 0 {
        return Err(Error::Validation("accuracy over zero timesteps".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Trained classifier with the configuration and history that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub params: LstmParams,
    pub history: TrainHistory,
}

impl Model {
    pub fn new(config: TrainConfig, params: LstmParams, history: TrainHistory) -> Self {
        Model {
            schema_version: MODEL_SCHEMA_VERSION,
            config,
            params,
            history,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text).map_err(|e| {
            Error::Document(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        if model.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "unsupported model schema_version {}",
                model.schema_version
            )));
        }
        model.params.validate()?;
        if model.params.hidden != model.config.hidden {
            return Err(Error::DimensionMismatch(format!(
                "parameters have {} hidden units but config says {}",
                model.params.hidden, model.config.hidden
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::trace::write_text(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}
