//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation on a [`Var`] appends a node holding
//! its forward value and the ids of its inputs. [`Graph::backward`] walks the
//! tape in reverse and accumulates adjoints. One graph is built per training
//! step and dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};

/// User-supplied adjoint rule for [`Graph::custom`].
pub trait Adjoint<S: Scalar> {
    /// Returns one adjoint per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>)
        -> Vec<Tensor<S>>;
}

#[derive(Clone, Copy, Debug)]
struct MatmulSpec {
    a: usize,
    b: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, S),
    Offset(usize),
    MulConst(usize, Rc<Vec<S>>),
    Matmul(MatmulSpec),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    SumAll(usize),
    SumLast(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { src: usize, axis: usize, start: usize },
    GatherRows(usize, Rc<Vec<usize>>),
    PickLast(usize, Rc<Vec<usize>>),
    StopGrad,
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<S>, rstd: Vec<S> },
    RelShift { src: usize, min_rel: isize },
    Custom(Vec<usize>, Rc<dyn Adjoint<S>>),
}

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Adjoint of `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var<'_, S>) -> Option<Tensor<S>> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<Tensor<S>> {
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::new(&self.shapes[id], g.clone()).ok()
    }

    /// Adjoint of `var`, zeros when no gradient reached it.
    pub fn get_or_zero(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

fn permute_data<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let in_st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    // Odometer over the output; innermost axis is a strided copy.
    let inner = out_shape[nd - 1];
    let inner_st = st[nd - 1];
    loop {
        for j in 0..inner {
            out.push(data[off + j * inner_st]);
        }
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn rel_index(q: usize, k: usize, min_rel: isize, r: usize) -> Option<usize> {
    let idx = k as isize - q as isize - min_rel;
    (idx >= 0 && (idx as usize) < r).then_some(idx as usize)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shapes of every recorded node, in tape order.
    pub fn node_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.borrow().iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn val(&self, id: usize) -> Rc<Tensor<S>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable input sharing storage with the caller.
    pub fn leaf_shared(&self, value: Rc<Tensor<S>>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn var(&self, id: usize) -> Var<'_, S> {
        assert!(id < self.len());
        Var { graph: self, id }
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, S>], axis: usize) -> Var<'g, S> {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<Rc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for (d, (&x, &y)) in s.iter().zip(&base).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {base:?}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(
            Tensor::new(&shape, out).expect("concat shape"),
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            needs,
        )
    }

    /// Records an operation whose adjoint is supplied by the caller.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, S>],
        value: Tensor<S>,
        adjoint: Rc<dyn Adjoint<S>>,
    ) -> Var<'g, S> {
        let needs = inputs.iter().any(|p| self.needs(p.id));
        self.push(value, Op::Custom(inputs.iter().map(|v| v.id).collect(), adjoint), needs)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    id: usize,
) -> Option<&'a mut Vec<S>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); n]))
}

fn acc<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], id: usize, f: impl Fn(usize) -> S) {
    if let Some(dst) = slot(nodes, grads, id) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::StopGrad => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |i| g[i]);
            acc(nodes, grads, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |i| g[i]);
            acc(nodes, grads, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            acc(nodes, grads, *a, |i| g[i] * vb.data()[i]);
            acc(nodes, grads, *b, |i| g[i] * va.data()[i]);
        }
        Op::AddBias(a, b) => {
            acc(nodes, grads, *a, |i| g[i]);
            if let Some(dst) = slot(nodes, grads, *b) {
                let n = dst.len();
                for (i, &gi) in g.iter().enumerate() {
                    dst[i % n] += gi;
                }
            }
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, |i| g[i] * *c),
        Op::Offset(a) => acc(nodes, grads, *a, |i| g[i]),
        Op::MulConst(a, c) => acc(nodes, grads, *a, |i| g[i] * c[i]),
        Op::Matmul(s) => matmul_backward(nodes, s, g, grads),
        Op::Tanh(a) => acc(nodes, grads, *a, |i| {
            let y = out.data()[i];
            g[i] * (S::one() - y * y)
        }),
        Op::Sigmoid(a) => acc(nodes, grads, *a, |i| {
            let y = out.data()[i];
            g[i] * y * (S::one() - y)
        }),
        Op::Relu(a) => acc(nodes, grads, *a, |i| {
            if out.data()[i] > S::zero() {
                g[i]
            } else {
                S::zero()
            }
        }),
        Op::Exp(a) => acc(nodes, grads, *a, |i| g[i] * out.data()[i]),
        Op::Ln(a) => {
            let va = nodes[*a].value.clone();
            acc(nodes, grads, *a, |i| g[i] / va.data()[i])
        }
        Op::Square(a) => {
            let va = nodes[*a].value.clone();
            acc(nodes, grads, *a, |i| g[i] * S::of(2.0) * va.data()[i])
        }
        Op::SumAll(a) => acc(nodes, grads, *a, |_| g[0]),
        Op::SumLast(a) => {
            let d = nodes[*a].value.last_dim();
            acc(nodes, grads, *a, |i| g[i / d])
        }
        Op::LogSoftmax(a) => {
            if let Some(dst) = slot(nodes, grads, *a) {
                let d = out.last_dim();
                for (r, (gr, yr)) in g.chunks(d).zip(out.data().chunks(d)).enumerate() {
                    let gs: S = gr.iter().copied().sum();
                    for j in 0..d {
                        dst[r * d + j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(dst) = slot(nodes, grads, *a) {
                let d = out.last_dim();
                for (r, (gr, yr)) in g.chunks(d).zip(out.data().chunks(d)).enumerate() {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for j in 0..d {
                        dst[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |i| g[i]),
        Op::Permute(a, axes) => {
            if let Some(dst) = slot(nodes, grads, *a) {
                let (back, _) = permute_data(g, out.shape(), &inverse_axes(axes));
                for (d, x) in dst.iter_mut().zip(back) {
                    *d += x;
                }
            }
        }
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = nodes[p].value.shape()[*axis] * inner;
                if let Some(dst) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, &x) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Narrow { src, axis, start } => {
            if let Some(dst) = slot(nodes, grads, *src) {
                let in_shape = nodes[*src].value.shape();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let full = in_shape[*axis] * inner;
                let chunk = out.shape()[*axis] * inner;
                for o in 0..outer {
                    let base = o * full + start * inner;
                    for (d, &x) in dst[base..base + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                        *d += x;
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            if let Some(dst) = slot(nodes, grads, *a) {
                let d = out.last_dim();
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dst[src * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::PickLast(a, idx) => {
            if let Some(dst) = slot(nodes, grads, *a) {
                let d = nodes[*a].value.last_dim();
                for (r, &c) in idx.iter().enumerate() {
                    dst[r * d + c] += g[r];
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = out.last_dim();
            let gam = nodes[*gamma].value.clone();
            if let Some(dst) = slot(nodes, grads, *gamma) {
                for (i, &gi) in g.iter().enumerate() {
                    dst[i % d] += gi * xhat[i];
                }
            }
            if let Some(dst) = slot(nodes, grads, *beta) {
                for (i, &gi) in g.iter().enumerate() {
                    dst[i % d] += gi;
                }
            }
            if let Some(dst) = slot(nodes, grads, *x) {
                let inv_d = S::one() / S::of(d as f64);
                #[allow(clippy::needless_range_loop)]
                for r in 0..g.len() / d {
                    let row = r * d..(r + 1) * d;
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for (j, i) in row.clone().enumerate() {
                        let dxh = g[i] * gam.data()[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (j, i) in row.enumerate() {
                        let dxh = g[i] * gam.data()[j];
                        dst[i] += rstd[r] * (dxh - m1 - xhat[i] * m2);
                    }
                }
            }
        }
        Op::RelShift { src, min_rel } => {
            if let Some(dst) = slot(nodes, grads, *src) {
                let s = out.shape();
                let (tq, tk) = (s[s.len() - 2], s[s.len() - 1]);
                let r = nodes[*src].value.last_dim();
                let batch = out.len() / (tq * tk);
                for b in 0..batch {
                    for q in 0..tq {
                        for k in 0..tk {
                            if let Some(c) = rel_index(q, k, *min_rel, r) {
                                dst[(b * tq + q) * r + c] += g[(b * tq + q) * tk + k];
                            }
                        }
                    }
                }
            }
        }
        Op::Custom(inputs, adj) => {
            let vals: Vec<Rc<Tensor<S>>> = inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let refs: Vec<&Tensor<S>> = vals.iter().map(|v| v.as_ref()).collect();
            let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
            let parts = adj.backward(&refs, out, &gt);
            for (&i, p) in inputs.iter().zip(parts) {
                assert_eq!(p.shape(), nodes[i].value.shape(), "custom adjoint shape");
                acc(nodes, grads, i, |j| p.data()[j]);
            }
        }
    }
}

fn matmul_backward<S: Scalar>(nodes: &[Node<S>], s: &MatmulSpec, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let MatmulSpec { a, b, batch, m, k, n, ta, tb } = *s;
    let va = nodes[a].value.clone();
    let vb = nodes[b].value.clone();
    // Logical strides of op(A) (m×k) and op(B) (k×n) inside their storage.
    let (ars, acs) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (brs, bcs) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if let Some(da) = slot(nodes, grads, a) {
        for bi in 0..batch {
            // dA = dC · op(B)^T
            S::gemm(
                m,
                n,
                k,
                S::one(),
                &g[bi * m * n..],
                n as isize,
                1,
                &vb.data()[bi * k * n..],
                bcs,
                brs,
                S::one(),
                &mut da[bi * m * k..],
                ars,
                acs,
            );
        }
    }
    if let Some(db) = slot(nodes, grads, b) {
        for bi in 0..batch {
            // dB = op(A)^T · dC
            S::gemm(
                k,
                m,
                n,
                S::one(),
                &va.data()[bi * m * k..],
                acs,
                ars,
                &g[bi * m * n..],
                n as isize,
                1,
                S::one(),
                &mut db[bi * k * n..],
                brs,
                bcs,
            );
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> S {
        self.graph.nodes.borrow()[self.id].value.data()[0]
    }

    fn unary(self, f: impl Fn(S) -> S, op: Op<S>) -> Self {
        let v = self.value();
        let out = v.map(f);
        let needs = self.graph.needs(self.id);
        self.graph.push(out, op, needs)
    }

    fn binary(self, other: Self, f: impl Fn(S, S) -> S, op: Op<S>) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(Tensor::new(a.shape(), data).expect("shape"), op, needs)
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// `self[..., j] + bias[j]`.
    pub fn add_bias(self, bias: Self) -> Self {
        let (a, b) = (self.value(), bias.value());
        let d = b.len();
        assert_eq!(a.last_dim(), d, "bias length mismatch");
        let data = a.data().iter().enumerate().map(|(i, &x)| x + b.data()[i % d]).collect();
        let needs = self.graph.needs(self.id) || self.graph.needs(bias.id);
        self.graph.push(Tensor::new(a.shape(), data).expect("shape"), Op::AddBias(self.id, bias.id), needs)
    }

    pub fn scale(self, c: S) -> Self {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: S) -> Self {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(self, c: Rc<Vec<S>>) -> Self {
        let v = self.value();
        assert_eq!(v.len(), c.len(), "constant length mismatch");
        let data = v.data().iter().zip(c.iter()).map(|(&x, &y)| x * y).collect();
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(v.shape(), data).expect("shape"), Op::MulConst(self.id, c), needs)
    }

    pub fn matmul(self, other: Self) -> Self {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes the last two axes when
    /// the matching flag is set. Operands are both 2-D or both 3-D with a
    /// shared leading batch axis.
    pub fn matmul_t(self, other: Self, ta: bool, tb: bool) -> Self {
        let (va, vb) = (self.value(), other.value());
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), sb.len(), "matmul rank mismatch {sa:?} {sb:?}");
        assert!(sa.len() == 2 || sa.len() == 3, "matmul needs 2-D or 3-D operands");
        let batch = if sa.len() == 3 {
            assert_eq!(sa[0], sb[0], "matmul batch mismatch");
            sa[0]
        } else {
            1
        };
        let r = sa.len();
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch {sa:?} {sb:?}");
        let (ars, acs) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (brs, bcs) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &va.data()[bi * m * k..],
                ars,
                acs,
                &vb.data()[bi * k * n..],
                brs,
                bcs,
                S::zero(),
                &mut out[bi * m * n..],
                n as isize,
                1,
            );
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        let spec = MatmulSpec { a: self.id, b: other.id, batch, m, k, n, ta, tb };
        self.graph.push(Tensor::new(&shape, out).expect("shape"), Op::Matmul(spec), needs)
    }

    pub fn tanh(self) -> Self {
        self.unary(|x| x.tanh(), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(|x| S::one() / (S::one() + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Self {
        self.unary(|x| x.max(S::zero()), Op::Relu(self.id))
    }

    pub fn exp(self) -> Self {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.unary(|x| x.ln(), Op::Ln(self.id))
    }

    pub fn square(self) -> Self {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), needs)
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(S::one() / S::of(n as f64))
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Self {
        let v = self.value();
        let d = v.last_dim();
        let data: Vec<S> = v.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let mut shape = v.shape()[..v.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(&shape, data).expect("shape"), Op::SumLast(self.id), needs)
    }

    pub fn log_softmax(self) -> Self {
        let v = self.value();
        let d = v.last_dim();
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(v.shape(), data).expect("shape"), Op::LogSoftmax(self.id), needs)
    }

    pub fn softmax(self) -> Self {
        self.masked_softmax(None)
    }

    /// Softmax over the last axis. `mask` covers the last two axes
    /// (`true` = allowed) and is broadcast over leading ones; masked entries
    /// get probability zero and a fully masked row is all zeros.
    pub fn masked_softmax(self, mask: Option<&[bool]>) -> Self {
        let v = self.value();
        let d = v.last_dim();
        let mut data = Vec::with_capacity(v.len());
        for (r, row) in v.data().chunks(d).enumerate() {
            let allowed = |j: usize| match mask {
                Some(m) => m[(r * d + j) % m.len()],
                None => true,
            };
            let mx = (0..d).filter(|&j| allowed(j)).map(|j| row[j]).fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                data.extend(std::iter::repeat_n(S::zero(), d));
                continue;
            }
            let start = data.len();
            let mut z = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = if allowed(j) { (x - mx).exp() } else { S::zero() };
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= z;
            }
        }
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(v.shape(), data).expect("shape"), Op::Softmax(self.id), needs)
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = self.value();
        let t = Tensor::new(shape, v.data().to_vec()).expect("reshape element count");
        let needs = self.graph.needs(self.id);
        self.graph.push(t, Op::Reshape(self.id), needs)
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        let v = self.value();
        assert_eq!(axes.len(), v.shape().len(), "permute rank mismatch");
        let (data, shape) = permute_data(v.data(), v.shape(), axes);
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(&shape, data).expect("shape"), Op::Permute(self.id, axes.to_vec()), needs)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let v = self.value();
        let shape = v.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let needs = self.graph.needs(self.id);
        self.graph.push(
            Tensor::new(&out_shape, data).expect("shape"),
            Op::Narrow { src: self.id, axis, start },
            needs,
        )
    }

    /// Rows of `self` viewed as `[rows, last_dim]`, selected by `idx`.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Self {
        let v = self.value();
        let d = v.last_dim();
        let rows = v.len() / d;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            assert!(i < rows, "gather index {i} out of {rows} rows");
            data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(&[idx.len(), d], data).expect("shape"), Op::GatherRows(self.id, idx), needs)
    }

    /// `out[r] = self[r, idx[r]]` for `self` viewed as `[rows, last_dim]`.
    pub fn pick_last(self, idx: Rc<Vec<usize>>) -> Self {
        let v = self.value();
        let d = v.last_dim();
        assert_eq!(v.len() / d, idx.len(), "pick index count mismatch");
        let data = idx.iter().enumerate().map(|(r, &c)| v.data()[r * d + c]).collect();
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(&[idx.len()], data).expect("shape"), Op::PickLast(self.id, idx), needs)
    }

    /// Identity forward; no adjoint flows back through this edge.
    pub fn stop_gradient(self) -> Self {
        let v = self.value();
        self.graph.push((*v).clone(), Op::StopGrad, false)
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Self {
        let v = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = v.last_dim();
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let rows = v.len() / d;
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        let inv_d = S::one() / S::of(d as f64);
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + S::of(eps)).sqrt();
            rstd.push(rs);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * rs;
                xhat.push(h);
                out.push(gv.data()[j] * h + bv.data()[j]);
            }
        }
        let needs = [self.id, gamma.id, beta.id].iter().any(|&i| self.graph.needs(i));
        self.graph.push(
            Tensor::new(v.shape(), out).expect("shape"),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            needs,
        )
    }

    /// Skew of relative-position logits.
    ///
    /// `self` is `[.., Tq, R]` where column `r` holds the logit for relative
    /// distance `key - query = min_rel + r`. The result is `[.., Tq, tk]` with
    /// `out[q][k] = self[q][k - q - min_rel]`, and zero where that distance
    /// falls outside the table. Only `Tq × max(R, tk)` elements per batch
    /// entry are ever touched.
    pub fn rel_shift(self, tk: usize, min_rel: isize) -> Self {
        let v = self.value();
        let s = v.shape();
        assert!(s.len() >= 2, "rel_shift needs at least 2 axes");
        let tq = s[s.len() - 2];
        let r = s[s.len() - 1];
        let batch = v.len() / (tq * r);
        let mut out = vec![S::zero(); batch * tq * tk];
        for b in 0..batch {
            for q in 0..tq {
                let src = &v.data()[(b * tq + q) * r..(b * tq + q + 1) * r];
                let dst = &mut out[(b * tq + q) * tk..(b * tq + q + 1) * tk];
                for (k, d) in dst.iter_mut().enumerate() {
                    if let Some(c) = rel_index(q, k, min_rel, r) {
                        *d = src[c];
                    }
                }
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = tk;
        let needs = self.graph.needs(self.id);
        self.graph.push(Tensor::new(&shape, out).expect("shape"), Op::RelShift { src: self.id, min_rel }, needs)
    }
}
