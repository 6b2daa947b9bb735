//! Deep LSTM language model with dropout on non-recurrent connections.
//!
//! Each layer owns a single fused affine map from `[h_below; h_prev]`
//! (width `2n`) to the four gate pre-activations (height `4n`). The rows of
//! that map are laid out as consecutive `n`-blocks in the order
//! input, forget, output, modulation (`"ifog"`), which is also the order used
//! in checkpoints.
//!
//! Dropout sites are numbered bottom to top: site `0` is the embedding output
//! feeding layer 1, site `l` is the output of layer `l` feeding layer `l + 1`,
//! and site `L` is the top layer feeding the softmax head. The carried
//! `h_{t-1}` and `c_{t-1}` of every layer are never masked.

use crate::dropout::Dropout;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GATE_ORDER: &str = "ifog";

/// Gate blocks of the fused pre-activation, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Modulation = 3,
}

impl Gate {
    /// Row range of this gate inside a `4n`-high weight or bias.
    pub fn rows(self, n: usize) -> std::ops::Range<usize> {
        let k = self as usize;
        k * n..(k + 1) * n
    }
}

/// Weights of one LSTM layer: `w: [4n, 2n]`, `b: [4n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerParams {
    pub fn zeros(n: usize) -> Self {
        LayerParams {
            w: Tensor::zeros(&[4 * n, 2 * n]).with_grad(),
            b: Tensor::zeros(&[4 * n]).with_grad(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b.numel() / 4
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> LayerVars {
        LayerVars {
            w: tape.leaf(&self.w),
            b: tape.leaf(&self.b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

/// All trainable tensors of the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `[V, n]`
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    /// `[V, n]`
    pub output_w: Tensor,
    /// `[V]`
    pub output_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub output_w: Var,
    pub output_b: Var,
}

impl ModelParams {
    pub fn zeros(vocab: usize, hidden: usize, layers: usize) -> Result<Self> {
        if vocab == 0 || hidden == 0 || layers == 0 {
            return Err(Error::Config(format!(
                "model needs V, n, L >= 1 (got V={vocab}, n={hidden}, L={layers})"
            )));
        }
        Ok(ModelParams {
            embedding: Tensor::zeros(&[vocab, hidden]).with_grad(),
            layers: (0..layers).map(|_| LayerParams::zeros(hidden)).collect(),
            output_w: Tensor::zeros(&[vocab, hidden]).with_grad(),
            output_b: Tensor::zeros(&[vocab]).with_grad(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tensors in checkpoint order: embedding, `(w, b)` per layer, output weight, output bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.output_w);
        out.push(&self.output_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.output_w);
        out.push(&mut self.output_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Checks the shape relations between all tensors.
    pub fn validate(&self) -> Result<()> {
        let (v, n) = (self.vocab_size(), self.hidden());
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for l in &self.layers {
            if l.w.shape() != [4 * n, 2 * n] || l.b.shape() != [4 * n] {
                return Err(Error::shape("layer params", l.w.shape(), &[4 * n, 2 * n]));
            }
        }
        if self.output_w.shape() != [v, n] || self.output_b.shape() != [v] {
            return Err(Error::shape("output head", self.output_w.shape(), &[v, n]));
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            embedding: tape.leaf(&self.embedding),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            output_w: tape.leaf(&self.output_w),
            output_b: tape.leaf(&self.output_b),
        }
    }

    /// Bound leaves in the same order as [`ModelParams::tensors`].
    pub fn bound_vars(bound: &BoundParams) -> Vec<Var> {
        let mut out = vec![bound.embedding];
        for l in &bound.layers {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(bound.output_w);
        out.push(bound.output_b);
        out
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Adds per-tensor gradients (in checkpoint order) into the gradient slots.
    pub fn accumulate_grads(&mut self, grads: Vec<Option<Vec<f64>>>) -> Result<()> {
        for (t, g) in self.tensors_mut().into_iter().zip(grads) {
            match g {
                Some(g) => t.accumulate_grad(&g)?,
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }
}

/// Pulls leaf gradients for every parameter out of the tape.
pub fn take_grads(tape: &mut Tape<'_>, bound: &BoundParams) -> Vec<Option<Vec<f64>>> {
    ModelParams::bound_vars(bound)
        .into_iter()
        .map(|v| tape.take_grad(v))
        .collect()
}

/// Per-layer `(h, c)` for `B` batch streams, each `[B, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: (0..layers).map(|_| Tensor::zeros(&[batch, hidden])).collect(),
            c: (0..layers).map(|_| Tensor::zeros(&[batch, hidden])).collect(),
        }
    }

    pub fn for_model(params: &ModelParams, batch: usize) -> Self {
        Self::zeros(params.num_layers(), batch, params.hidden())
    }

    pub fn num_layers(&self) -> usize {
        self.h.len()
    }

    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, |t| t.shape()[0])
    }

    /// Copies the values onto a tape as constants (gradient flow stops here).
    pub fn bind(&self, tape: &mut Tape<'_>) -> StateVars {
        StateVars {
            h: self.h.iter().map(|t| tape.input(detached(t))).collect(),
            c: self.c.iter().map(|t| tape.input(detached(t))).collect(),
        }
    }

    /// Like [`bind`](Self::bind) but the carried values are differentiable leaves.
    pub fn bind_with_grad(&self, tape: &mut Tape<'_>) -> StateVars {
        StateVars {
            h: self.h.iter().map(|t| tape.input(detached(t).with_grad())).collect(),
            c: self.c.iter().map(|t| tape.input(detached(t).with_grad())).collect(),
        }
    }

    pub fn from_vars(tape: &Tape<'_>, vars: &StateVars) -> Self {
        LstmState {
            h: vars.h.iter().map(|&v| tape.to_tensor(v)).collect(),
            c: vars.c.iter().map(|&v| tape.to_tensor(v)).collect(),
        }
    }

    /// Rows `rows` of every tensor, in the given order (used to reorder beams).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let n = t.shape()[1];
            let mut data = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(&[rows.len(), n], data).expect("row selection keeps width")
        };
        LstmState {
            h: self.h.iter().map(pick).collect(),
            c: self.c.iter().map(pick).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.h.iter().chain(&self.c).map(|t| t.shape().to_vec()).collect()
    }
}

fn detached(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

/// The non-recurrent connection masking used by the stack.
///
/// [`Dropout`] is the regularizer; [`NoDropout`] compiles the masking out
/// entirely and serves as the reference for the `p = 0` equivalence.
pub trait Regularizer {
    fn apply(&mut self, tape: &mut Tape<'_>, x: Var, site: usize) -> Result<Var>;
    fn advance(&mut self);
}

impl Regularizer for Dropout {
    fn apply(&mut self, tape: &mut Tape<'_>, x: Var, site: usize) -> Result<Var> {
        Dropout::apply(self, tape, x, site)
    }

    fn advance(&mut self) {
        Dropout::advance(self)
    }
}

pub struct NoDropout;

impl Regularizer for NoDropout {
    fn apply(&mut self, _: &mut Tape<'_>, x: Var, _: usize) -> Result<Var> {
        Ok(x)
    }

    fn advance(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// Parameters of a classical RNN layer: two affine maps, one per input.
#[derive(Clone, Debug)]
pub struct RnnParams {
    pub w_below: Tensor,
    pub b_below: Tensor,
    pub w_rec: Tensor,
    pub b_rec: Tensor,
}

impl RnnParams {
    pub fn zeros(n: usize) -> Self {
        RnnParams {
            w_below: Tensor::zeros(&[n, n]).with_grad(),
            b_below: Tensor::zeros(&[n]).with_grad(),
            w_rec: Tensor::zeros(&[n, n]).with_grad(),
            b_rec: Tensor::zeros(&[n]).with_grad(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> [Var; 4] {
        [
            tape.leaf(&self.w_below),
            tape.leaf(&self.b_below),
            tape.leaf(&self.w_rec),
            tape.leaf(&self.b_rec),
        ]
    }
}

/// `h = f(W1 h_below + b1 + W2 h_prev + b2)`.
pub fn rnn_cell(tape: &mut Tape<'_>, params: [Var; 4], h_below: Var, h_prev: Var, f: Activation) -> Result<Var> {
    let [w_below, b_below, w_rec, b_rec] = params;
    let a = tape.affine(w_below, b_below, h_below)?;
    let r = tape.affine(w_rec, b_rec, h_prev)?;
    let z = tape.add(a, r)?;
    match f {
        Activation::Sigmoid => tape.sigmoid(z),
        Activation::Tanh => tape.tanh(z),
    }
}

/// Gate activations and new state of one LSTM step.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub i: Var,
    pub f: Var,
    pub o: Var,
    pub g: Var,
    pub c: Var,
    pub h: Var,
}

/// One LSTM transition: `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_cell(tape: &mut Tape<'_>, layer: LayerVars, h_below: Var, h_prev: Var, c_prev: Var) -> Result<LstmStep> {
    let n = tape.shape(layer.b)[0] / 4;
    if tape.shape(h_below).last() != Some(&n) || tape.shape(h_prev) != tape.shape(h_below) {
        return Err(Error::shape("lstm_cell", tape.shape(h_below), tape.shape(h_prev)));
    }
    if tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(Error::shape("lstm_cell", tape.shape(c_prev), tape.shape(h_prev)));
    }
    let x = tape.concat(h_below, h_prev)?;
    let z = tape.affine(layer.w, layer.b, x)?;
    let zi = tape.slice(z, Gate::Input.rows(n).start, n)?;
    let zf = tape.slice(z, Gate::Forget.rows(n).start, n)?;
    let zo = tape.slice(z, Gate::Output.rows(n).start, n)?;
    let zg = tape.slice(z, Gate::Modulation.rows(n).start, n)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let g = tape.tanh(zg)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmStep { i, f, o, g, c, h })
}

fn check_state(params: &BoundParams, state: &StateVars) -> Result<()> {
    if state.h.len() != params.layers.len() || state.c.len() != params.layers.len() {
        return Err(Error::Config(format!(
            "state has {} layers but the model has {}",
            state.h.len(),
            params.layers.len()
        )));
    }
    Ok(())
}

/// Runs the stack for one timestep on already-embedded input, returning the
/// masked top-layer output (site `L` applied) and the new state.
fn stack_step(
    tape: &mut Tape<'_>,
    x_emb: Var,
    state: &StateVars,
    params: &BoundParams,
    drop: &mut impl Regularizer,
) -> Result<(Var, StateVars)> {
    check_state(params, state)?;
    let mut below = drop.apply(tape, x_emb, 0)?;
    let mut next = StateVars {
        h: Vec::with_capacity(params.layers.len()),
        c: Vec::with_capacity(params.layers.len()),
    };
    for (l, layer) in params.layers.iter().enumerate() {
        let step = lstm_cell(tape, *layer, below, state.h[l], state.c[l])?;
        next.h.push(step.h);
        next.c.push(step.c);
        below = drop.apply(tape, step.h, l + 1)?;
    }
    drop.advance();
    Ok((below, next))
}

/// One timestep of the regularized stack: dropout on the embedding output,
/// between layers, and before the softmax head (`L + 1` sites), never on the
/// recurrent state.
pub fn regularized_step(
    tape: &mut Tape<'_>,
    x_emb: Var,
    state: &StateVars,
    params: &BoundParams,
    drop: &mut impl Regularizer,
) -> Result<(Var, StateVars)> {
    let (top, next) = stack_step(tape, x_emb, state, params, drop)?;
    let logits = tape.affine(params.output_w, params.output_b, top)?;
    Ok((logits, next))
}

/// Embedding lookup for one timestep of `B` tokens.
pub fn embed(tape: &mut Tape<'_>, params: &BoundParams, tokens: &[usize]) -> Result<Var> {
    tape.gather(params.embedding, tokens)
}

pub struct LogitsOutput {
    /// `[T * B, V]`, row `t * B + b` is stream `b` at step `t`.
    pub logits: Var,
    pub final_state: StateVars,
}

/// Unrolls the model over `inputs` (`T x B`, time-major) and returns logits
/// for every position.
pub fn forward_logits(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    inputs: &[usize],
    batch: usize,
    init: StateVars,
    drop: &mut impl Regularizer,
) -> Result<LogitsOutput> {
    if batch == 0 || inputs.is_empty() || inputs.len() % batch != 0 {
        return Err(Error::Usage(format!(
            "{} input tokens do not form whole rows of batch {batch}",
            inputs.len()
        )));
    }
    let mut state = init;
    let mut tops = Vec::with_capacity(inputs.len() / batch);
    for row in inputs.chunks(batch) {
        let x = embed(tape, params, row)?;
        let (top, next) = stack_step(tape, x, &state, params, drop)?;
        tops.push(top);
        state = next;
    }
    let stacked = tape.stack_rows(&tops)?;
    let logits = tape.affine(params.output_w, params.output_b, stacked)?;
    Ok(LogitsOutput {
        logits,
        final_state: state,
    })
}

pub struct SequenceOutput {
    /// `[T * B]` per-position cross-entropy.
    pub losses: Var,
    pub final_state: StateVars,
}

/// Unrolled forward pass with next-token cross-entropy at every position.
pub fn forward_sequence(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    init: StateVars,
    drop: &mut impl Regularizer,
) -> Result<SequenceOutput> {
    if targets.len() != inputs.len() {
        return Err(Error::shape("forward_sequence", &[inputs.len()], &[targets.len()]));
    }
    let out = forward_logits(tape, params, inputs, batch, init, drop)?;
    let losses = tape.softmax_cross_entropy(out.logits, targets)?;
    Ok(SequenceOutput {
        losses,
        final_state: out.final_state,
    })
}
