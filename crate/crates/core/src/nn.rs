//! Layers built on the tape: linear maps, embeddings, GRUs, layer norm,
//! position-wise feed-forward blocks and dropout.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound)))
}

/// Dropout switch plus the random stream that draws masks.
pub struct Ctx {
    rate: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Self { rate, rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout<'g, S: Scalar>(&self, x: Var<'g, S>) -> Var<'g, S> {
        let Some(rng) = &self.rng else { return x };
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = x.value().len();
        let mut rng = rng.borrow_mut();
        let mask: Vec<S> =
            (0..n).map(|_| if rng.gen::<f64>() < keep { S::of(1.0 / keep) } else { S::zero() }).collect();
        x.mul_const(Rc::new(mask))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[input, output], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { w, b, input, output }
    }

    pub fn zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[input, output]));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { w, b, input, output }
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: Var<'g, S>) -> Var<'g, S> {
        let shape = x.shape();
        let rows = x.value().len() / self.input;
        let mut y = x.reshape(&[rows, self.input]).matmul(p.get(self.w));
        if let Some(b) = self.b {
            y = y.add_bias(p.get(b));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add(format!("{name}.table"), uniform(rng, &[count, dim], 1.0));
        Self { table, count, dim }
    }

    /// `[idx.len(), dim]`.
    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, idx: &[usize]) -> Var<'g, S> {
        p.get(self.table).gather_rows(Rc::new(idx.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: Var<'g, S>) -> Var<'g, S> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), 1e-5)
    }
}

/// Two-layer ReLU block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.0"), dim, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.1"), hidden, out, true, rng),
        }
    }

    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, x: Var<'g, S>) -> Var<'g, S> {
        let h = ctx.dropout(self.inner.forward(p, x).relu());
        self.outer.forward(p, h)
    }
}

#[derive(Clone, Debug)]
struct GruCell {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

/// Multi-layer GRU with PyTorch gate conventions.
#[derive(Clone, Debug)]
pub struct Gru {
    cells: Vec<Vec<GruCell>>,
    pub input: usize,
    pub hidden: usize,
    pub bidirectional: bool,
}

/// Output of [`Gru::forward`].
pub struct GruOutput<'g, S: Scalar> {
    /// `[T, B, dirs·hidden]` from the top layer.
    pub sequence: Var<'g, S>,
    /// Final state of each top-layer direction, `[B, hidden]`; the backward
    /// direction's final state is the one at time 0.
    pub last: Vec<Var<'g, S>>,
}

impl Gru {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dirs = if bidirectional { 2 } else { 1 };
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = if l == 0 { input } else { hidden * dirs };
            let mut row = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let tag = format!("{name}.l{l}.d{d}");
                row.push(GruCell {
                    w_ih: store.add(format!("{tag}.w_ih"), uniform(rng, &[in_dim, 3 * hidden], bound)),
                    w_hh: store.add(format!("{tag}.w_hh"), uniform(rng, &[hidden, 3 * hidden], bound)),
                    b_ih: store.add(format!("{tag}.b_ih"), uniform(rng, &[3 * hidden], bound)),
                    b_hh: store.add(format!("{tag}.b_hh"), uniform(rng, &[3 * hidden], bound)),
                });
            }
            cells.push(row);
        }
        Self { cells, input, hidden, bidirectional }
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Runs over `x: [T, B, input]`.
    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, ctx: &Ctx, x: Var<'g, S>) -> GruOutput<'g, S> {
        let shape = x.shape();
        let (steps, batch) = (shape[0], shape[1]);
        let graph = x.graph();
        let h = self.hidden;
        let mut input = x;
        let mut last = Vec::new();
        for (l, row) in self.cells.iter().enumerate() {
            if l > 0 {
                input = ctx.dropout(input);
            }
            let in_dim = input.shape()[2];
            let mut outs = Vec::with_capacity(row.len());
            last.clear();
            for (d, cell) in row.iter().enumerate() {
                let xw = input
                    .reshape(&[steps * batch, in_dim])
                    .matmul(p.get(cell.w_ih))
                    .add_bias(p.get(cell.b_ih))
                    .reshape(&[steps, batch, 3 * h]);
                let mut state = graph.constant(Tensor::zeros(&[batch, h]));
                let mut seq: Vec<Option<Var<'g, S>>> = vec![None; steps];
                let order: Vec<usize> = if d == 0 { (0..steps).collect() } else { (0..steps).rev().collect() };
                for t in order {
                    let xt = xw.narrow(0, t, 1).reshape(&[batch, 3 * h]);
                    let hw = state.matmul(p.get(cell.w_hh)).add_bias(p.get(cell.b_hh));
                    let r = xt.narrow(1, 0, h).add(hw.narrow(1, 0, h)).sigmoid();
                    let z = xt.narrow(1, h, h).add(hw.narrow(1, h, h)).sigmoid();
                    let n = xt.narrow(1, 2 * h, h).add(r.mul(hw.narrow(1, 2 * h, h))).tanh();
                    state = n.add(z.mul(state.sub(n)));
                    seq[t] = Some(state);
                }
                last.push(state);
                let parts: Vec<_> = seq.into_iter().map(|v| v.unwrap().reshape(&[1, batch, h])).collect();
                outs.push(graph.concat(&parts, 0));
            }
            input = if outs.len() == 1 { outs[0] } else { graph.concat(&outs, 2) };
        }
        GruOutput { sequence: input, last }
    }
}
