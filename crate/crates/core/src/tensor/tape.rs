use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvDims};
use super::{validate_shape, Tensor};
use crate::error::{Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;
const LN_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    AddTiled(usize, usize),
    AddChannelBias(usize, usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Clamp(usize, f32, f32),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Sum(usize),
    Mean(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    TileLength(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        n_seq: usize,
        heads: usize,
        probs: Vec<f32>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddTiled(a, b) | AddChannelBias(a, b)
            | Mse(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Scale(a, _) | AddScalar(a) | Relu(a) | Gelu(a) | Exp(a)
            | Clamp(a, _, _) | Sum(a) | Mean(a) | Reshape(a) | TileLength(a) => vec![*a],
            Softmax { x, .. } | Narrow { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat { parts, .. } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            GatherRows { table, .. } => vec![*table],
            Conv1d { x, w, .. } | ConvTranspose1d { x, w, .. } => vec![*x, *w],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in topological order for one backward pass.
///
/// Nodes are appended as operations execute, so every node's parents precede
/// it. A tape is meant for a single forward/backward round; build a fresh one
/// per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of the leaves reachable from the differentiated output.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f32]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f32>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline(always)]
fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + kernels::tanh_fast(u))
}

#[inline(always)]
fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = kernels::tanh_fast(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `(batch, channels, length)` of a `[C, L]` or `[N, C, L]` tensor.
fn ncl(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

fn with_len(shape: &[usize], c: usize, l: usize) -> Vec<usize> {
    if shape.len() == 2 {
        vec![c, l]
    } else {
        vec![shape[0], c, l]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `tensor` as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let needs_grad = tensor.requires_grad();
        let mut value = tensor.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records a constant leaf (never receives a gradient).
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let mut value = tensor;
        value.set_requires_grad(false);
        value.zero_grad();
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].needs_grad)
        };
        let value = Tensor::new(&shape, data).expect("op produced consistent shape");
        self.push(value, op, needs_grad)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let len = self.nodes.borrow()[output.id].value.len();
        if len != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: output.shape(),
                rhs: vec![1],
            });
        }
        Ok(self.backward_with(output, vec![1.0]))
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, output: Var<'_>, seed: Vec<f32>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        assert_eq!(seed.len(), nodes[output.id].value.len(), "seed length");
        if nodes[output.id].needs_grad {
            grads[output.id] = Some(seed);
        }
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        // Only leaves keep gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f32>>],
    id: usize,
) -> Option<&'a mut Vec<f32>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::AddTiled(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let m = gb.len();
                for chunk in g.chunks(m) {
                    gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::AddChannelBias(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let (_, c, l) = ncl(out.shape(), "add_channel_bias").unwrap();
                for (row, gv) in g.chunks(l).enumerate() {
                    gb[row % c] += gv.iter().sum::<f32>();
                }
            }
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((a, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    *a += gv * gelu_grad(xv);
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    if xv >= *lo && xv <= *hi {
                        *d += gv;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = outer_inner(out.shape(), *axis);
            let y = out.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: f32 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let d = *val(*x).shape().last().unwrap();
            let rows = val(*x).len() / d;
            let xv = val(*x).data();
            let gv = val(*gain).data();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * (xv[r * d + j] - mean[r]) * rstd[r];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                        let dxhat = g[r * d + j] * gv[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                    let inv_d = 1.0 / d as f32;
                    for j in 0..d {
                        let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                        let dxhat = g[r * d + j] * gv[j];
                        gx[r * d + j] += rstd[r] * (dxhat - inv_d * s1 - xhat * inv_d * s2);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = g[0] / ga.len() as f32;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = outer_inner(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let np = val(p).shape()[*axis];
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + np) * inner];
                        let dst = &mut gp[o * np * inner..(o + 1) * np * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                offset += np;
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let s = 2.0 * g[0] / av.len() as f32;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                    *d += s * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                    *d -= s * (x - y);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = val(*logits).shape()[1];
            let n = labels.len();
            if let Some(gl) = slot(nodes, grads, *logits) {
                let s = g[0] / n as f32;
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, n_in, inner) = outer_inner(xs, *axis);
            let n_out = out.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * n_in + start) * inner..(o * n_in + start + n_out) * inner];
                    let src = &g[o * n_out * inner..(o + 1) * n_out * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::GatherRows { table, indices } => {
            let c = val(*table).shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt[idx * c..(idx + 1) * c];
                    dst.iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Conv1d { x, w, stride, pad } => {
            let (n, cin, l) = ncl(val(*x).shape(), "conv1d").unwrap();
            let ws = val(*w).shape();
            let (cout, k) = (ws[0], ws[2]);
            let lout = *out.shape().last().unwrap();
            let dims = ConvDims {
                batch: n,
                stride: *stride,
                pad: *pad,
                kernel: k,
            };
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::conv_scatter(g, cout, lout, val(*w).data(), gx, cin, l, dims);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                kernels::conv_correlate(g, cout, lout, val(*x).data(), cin, l, gw, dims);
            }
        }
        Op::ConvTranspose1d { x, w, stride, pad } => {
            let (n, cin, l) = ncl(val(*x).shape(), "conv_transpose1d").unwrap();
            let ws = val(*w).shape();
            let (cout, k) = (ws[1], ws[2]);
            let lout = *out.shape().last().unwrap();
            let dims = ConvDims {
                batch: n,
                stride: *stride,
                pad: *pad,
                kernel: k,
            };
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::conv_gather(g, cout, lout, val(*w).data(), gx, cin, l, dims);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                kernels::conv_correlate(val(*x).data(), cin, l, g, cout, lout, gw, dims);
            }
        }
        Op::TileLength(x) => {
            let len = *out.shape().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, gv) in gx.iter_mut().enumerate() {
                    *gv += g[i * len..(i + 1) * len].iter().sum::<f32>();
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            n_seq,
            heads,
            probs,
        } => {
            let d = val(*q).shape()[1];
            let t = val(*q).shape()[0] / n_seq;
            let len = val(*q).len();
            let mut dq = vec![0.0; len];
            let mut dk = vec![0.0; len];
            let mut dv = vec![0.0; len];
            kernels::causal_attention_bwd(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                g,
                (*n_seq, t, d, *heads),
                &mut dq,
                &mut dk,
                &mut dv,
            );
            for (p, gp_src) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(&gp_src).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn data(&self) -> Vec<f32> {
        self.value().data().to_vec()
    }

    /// First element; intended for scalar outputs.
    pub fn item(&self) -> f32 {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn check_same_shape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        self.same_tape(other);
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Dimension { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f32) -> f32, op: Op) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        drop(v);
        self.tape.record(shape, data, op)
    }

    fn zip(&self, other: &Var<'_>, f: impl Fn(f32, f32) -> f32, op: Op) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape().to_vec();
        drop((a, b));
        self.tape.record(shape, data, op)
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::matmul_acc(a.data(), b.data(), &mut c, m, k, n);
        drop((a, b));
        Ok(self.tape.record(vec![m, n], c, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(v);
        Ok(self.tape.record(vec![c, r], out, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip(other, |x, y| x + y, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip(other, |x, y| x - y, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.check_same_shape(other, "mul")?;
        Ok(self.zip(other, |x, y| x * y, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        self.map(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f32) -> Var<'t> {
        self.map(|x| x + s, Op::AddScalar(self.id))
    }

    /// Adds `other` repeated cyclically over the flat data (bias rows,
    /// positional tables). `other.len()` must divide `self.len()`.
    pub fn add_tiled(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.len() % b.len() != 0 {
            return Err(Error::Dimension {
                op: "add_tiled",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let m = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % m])
            .collect();
        let shape = a.shape().to_vec();
        drop((a, b));
        Ok(self.tape.record(shape, data, Op::AddTiled(self.id, other.id)))
    }

    /// `[N, C, L] + b[C]`, broadcasting the bias over batch and length.
    pub fn add_channel_bias(&self, bias: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let (x, b) = (self.value(), bias.value());
        let (_, c, l) = ncl(x.shape(), "add_channel_bias")?;
        if b.shape() != [c] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for (row, chunk) in data.chunks_mut(l).enumerate() {
            let bv = b.data()[row % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let shape = x.shape().to_vec();
        drop((x, b));
        Ok(self.tape.record(shape, data, Op::AddChannelBias(self.id, bias.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.map(gelu, Op::Gelu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f32::exp, Op::Exp(self.id))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'t> {
        self.map(|x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let x = v.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    y[idx(j)] /= sum;
                }
            }
        }
        drop(v);
        Ok(self.tape.record(shape, y, Op::Softmax { x: self.id, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'_>, bias: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = *x.shape().last().unwrap();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.len() / d;
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            // statistics in f64 keep the output smooth under tiny perturbations
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS as f64).sqrt();
            mean[r] = m as f32;
            rstd[r] = rs as f32;
            for j in 0..d {
                let xhat = (row[j] as f64 - m) * rs;
                y[r * d + j] = (xhat * gv.data()[j] as f64 + bv.data()[j] as f64) as f32;
            }
        }
        let shape = x.shape().to_vec();
        drop((x, gv, bv));
        Ok(self.tape.record(
            shape,
            y,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().map(|&x| x as f64).sum::<f64>() as f32;
        self.tape.record(vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = (v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32;
        drop(v);
        self.tape.record(vec![1], vec![s], Op::Mean(self.id))
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&self, target: &Var<'_>) -> Result<Var<'t>> {
        self.check_same_shape(target, "mse")?;
        let (a, b) = (self.value(), target.value());
        let s = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64;
        drop((a, b));
        Ok(self
            .tape
            .record(vec![1], vec![s as f32], Op::Mse(self.id, target.id)))
    }

    /// Mean softmax cross-entropy of `[N×C]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; v.len()];
        let mut loss = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += (lse - row[label]) as f64;
        }
        drop(v);
        let loss = (loss / labels.len() as f64) as f32;
        Ok(self.tape.record(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        validate_shape(shape)?;
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = v.data().to_vec();
        drop(v);
        Ok(self.tape.record(shape.to_vec(), data, Op::Reshape(self.id)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Input(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        drop(v);
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.record(
            out_shape,
            data,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: s.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, c) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row index {bad} out of range {rows}")));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        drop(v);
        Ok(self.tape.record(
            vec![indices.len(), c],
            data,
            Op::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Cross-correlation of `[C_in, L]` / `[N, C_in, L]` input with
    /// `[C_out, C_in, K]` kernels and zero padding.
    pub fn conv1d(&self, kernels: &Var<'_>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(kernels);
        let (x, w) = (self.value(), kernels.value());
        let (n, cin, l) = ncl(x.shape(), "conv1d")?;
        let ws = w.shape();
        if ws.len() != 3 || ws[1] != cin || stride == 0 {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        if l + 2 * padding < k {
            return Err(Error::Length {
                op: "conv1d",
                detail: format!("input length {l} + 2*{padding} shorter than kernel {k}"),
            });
        }
        let lout = (l + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; n * cout * lout];
        let dims = ConvDims {
            batch: n,
            stride,
            pad: padding,
            kernel: k,
        };
        kernels::conv_gather(x.data(), cin, l, w.data(), &mut out, cout, lout, dims);
        let shape = with_len(x.shape(), cout, lout);
        drop((x, w));
        Ok(self.tape.record(
            shape,
            out,
            Op::Conv1d {
                x: self.id,
                w: kernels.id,
                stride,
                pad: padding,
            },
        ))
    }

    /// Adjoint of [`Var::conv1d`]; kernels are `[C_in, C_out, K]`.
    pub fn conv_transpose1d(
        &self,
        kernels: &Var<'_>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.conv_transpose1d_padded(kernels, stride, padding, 0)
    }

    /// [`Var::conv_transpose1d`] with `output_padding` extra trailing positions,
    /// so stride-2 layers can exactly double a length.
    pub fn conv_transpose1d_padded(
        &self,
        kernels: &Var<'_>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(kernels);
        let (x, w) = (self.value(), kernels.value());
        let (n, cin, l) = ncl(x.shape(), "conv_transpose1d")?;
        let ws = w.shape();
        if ws.len() != 3 || ws[0] != cin || stride == 0 || output_padding >= stride {
            return Err(Error::Dimension {
                op: "conv_transpose1d",
                lhs: x.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (cout, k) = (ws[1], ws[2]);
        let full = (l - 1) * stride + k + output_padding;
        if full <= 2 * padding {
            return Err(Error::Length {
                op: "conv_transpose1d",
                detail: format!(
                    "output length ({l}-1)*{stride} - 2*{padding} + {k} + {output_padding} < 1"
                ),
            });
        }
        let lout = full - 2 * padding;
        let mut out = vec![0.0; n * cout * lout];
        let dims = ConvDims {
            batch: n,
            stride,
            pad: padding,
            kernel: k,
        };
        kernels::conv_scatter(x.data(), cin, l, w.data(), &mut out, cout, lout, dims);
        let shape = with_len(x.shape(), cout, lout);
        drop((x, w));
        Ok(self.tape.record(
            shape,
            out,
            Op::ConvTranspose1d {
                x: self.id,
                w: kernels.id,
                stride,
                pad: padding,
            },
        ))
    }

    /// Broadcasts `[N, C]` along a new trailing length axis: `[N, C, len]`.
    pub fn tile_length(&self, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() != 2 || len == 0 {
            return Err(Error::Dimension {
                op: "tile_length",
                lhs: s,
                rhs: vec![len],
            });
        }
        let mut data = Vec::with_capacity(v.len() * len);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, len));
        }
        drop(v);
        Ok(self
            .tape
            .record(vec![s[0], s[1], len], data, Op::TileLength(self.id)))
    }

    /// Causal multi-head self-attention; `self` is the query, all `[n_seq·T, D]`.
    pub fn causal_attention(
        &self,
        k: &Var<'_>,
        v: &Var<'_>,
        n_seq: usize,
        heads: usize,
    ) -> Result<Var<'t>> {
        self.check_same_shape(k, "causal_attention")?;
        self.check_same_shape(v, "causal_attention")?;
        let shape = self.shape();
        if shape.len() != 2 || n_seq == 0 || !shape[0].is_multiple_of(n_seq) || heads == 0 || !shape[1].is_multiple_of(heads) {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: shape,
                rhs: vec![n_seq, heads],
            });
        }
        let t = shape[0] / n_seq;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (out, probs) = kernels::causal_attention_fwd(
            qv.data(),
            kv.data(),
            vv.data(),
            n_seq,
            t,
            shape[1],
            heads,
        );
        drop((qv, kv, vv));
        Ok(self.tape.record(
            shape,
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                n_seq,
                heads,
                probs,
            },
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
    let tape = first.tape;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::Input(format!(
            "concat axis {axis} out of range for {base:?}"
        )));
    }
    let mut total = 0;
    for p in parts {
        first.same_tape(p);
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: s,
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = outer_inner(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    for o in 0..outer {
        for v in &values {
            let np = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * np * inner..(o + 1) * np * inner]);
        }
    }
    drop(values);
    let mut shape = base;
    shape[axis] = total;
    Ok(tape.record(
        shape,
        data,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    ))
}
