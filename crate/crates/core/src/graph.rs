//! Reverse-mode autodiff over a flat tape. The op set is closed: exactly the
//! eight kinds a small dual-head CNN classifier needs. Node ids are
//! creation-ordered, so every node's inputs have smaller ids and one reverse
//! sweep from a root visits the graph in reverse topological order.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Op tag plus whatever the backward rule needs beyond input/output values.
#[derive(Debug)]
enum Op<T: Scalar> {
    /// Leaf holding a constant (non-differentiated) tensor.
    Input,
    /// Leaf mirroring the current value of a stored parameter.
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    MaxPool2d {
        x: NodeId,
        /// Flat index into the input for each output element's max.
        argmax: Vec<usize>,
    },
    Flatten {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        /// Row-major softmax probabilities, batch x classes.
        probs: Vec<T>,
    },
    ScalarScale {
        x: NodeId,
        factor: T,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
pub struct ComputationNode<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Dispatch form of a forward op; the typed methods below are the usual API.
pub enum OpCall<'a, T: Scalar> {
    Conv2d,
    Dense,
    Relu,
    MaxPool2d,
    Flatten,
    SoftmaxCrossEntropy { targets: &'a [usize] },
    ScalarScale { factor: T },
    Add,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p mut ParamStore<T>,
    nodes: Vec<ComputationNode<T>>,
    consumed: Vec<bool>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p mut ParamStore<T>) -> Graph<'p, T> {
        Graph {
            params,
            nodes: Vec::new(),
            consumed: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(ComputationNode { op, value });
        self.consumed.push(false);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        let value = self.params.get(id)?.clone();
        Ok(self.push(Op::Param(id), value))
    }

    /// Uniform dispatch over the op kinds; `inputs` arity is checked per kind.
    pub fn forward_op(&mut self, call: OpCall<'_, T>, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |n: usize, op: &str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::ShapeMismatch {
                    op: op.into(),
                    detail: format!("expected {} inputs, got {}", n, inputs.len()),
                });
            }
            Ok(())
        };
        match call {
            OpCall::Conv2d => {
                arity(3, "conv2d")?;
                self.conv2d(inputs[0], inputs[1], inputs[2])
            }
            OpCall::Dense => {
                arity(3, "dense")?;
                self.dense(inputs[0], inputs[1], inputs[2])
            }
            OpCall::Relu => {
                arity(1, "relu")?;
                self.relu(inputs[0])
            }
            OpCall::MaxPool2d => {
                arity(1, "maxpool2d")?;
                self.maxpool2d(inputs[0])
            }
            OpCall::Flatten => {
                arity(1, "flatten")?;
                self.flatten(inputs[0])
            }
            OpCall::SoftmaxCrossEntropy { targets } => {
                arity(1, "softmax_cross_entropy")?;
                self.softmax_cross_entropy(inputs[0], targets)
            }
            OpCall::ScalarScale { factor } => {
                arity(1, "scalar_scale")?;
                self.scalar_scale(inputs[0], factor)
            }
            OpCall::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
        }
    }

    /// Valid padding, stride 1. x: N x C x H x W, w: F x C x KH x KW, b: F.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!("input {:?} and kernel {:?} must both be rank 4", xs, ws),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!("input has {} channels, kernel expects {}", c, wc),
            });
        }
        if bs != [f] {
            return Err(Error::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!("bias {:?} must be [{}]", bs, f),
            });
        }
        if kh > h || kw > wd {
            return Err(Error::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!("kernel {}x{} exceeds input {}x{}", kh, kw, h, wd),
            });
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![T::zero(); n * f * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for ni in 0..n {
                for fi in 0..f {
                    for r in 0..oh {
                        for cl in 0..ow {
                            let mut acc = bv[fi];
                            for ci in 0..c {
                                for dr in 0..kh {
                                    let xrow = ((ni * c + ci) * h + r + dr) * wd + cl;
                                    let wrow = ((fi * c + ci) * kh + dr) * kw;
                                    for dc in 0..kw {
                                        acc += xv[xrow + dc] * wv[wrow + dc];
                                    }
                                }
                            }
                            out[((ni * f + fi) * oh + r) * ow + cl] = acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, f, oh, ow], out)?;
        Ok(self.push(Op::Conv2d { x, w, b }, value))
    }

    /// x: N x D, w: O x D, b: O.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dense".into(),
                detail: format!("input {:?} and weight {:?} must both be rank 2", xs, ws),
            });
        }
        let (n, d) = (xs[0], xs[1]);
        let (o, wd) = (ws[0], ws[1]);
        if wd != d {
            return Err(Error::ShapeMismatch {
                op: "dense".into(),
                detail: format!("input width {} vs weight width {}", d, wd),
            });
        }
        if bs != [o] {
            return Err(Error::ShapeMismatch {
                op: "dense".into(),
                detail: format!("bias {:?} must be [{}]", bs, o),
            });
        }
        let mut out = vec![T::zero(); n * o];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for ni in 0..n {
                for oi in 0..o {
                    let mut acc = bv[oi];
                    let xrow = ni * d;
                    let wrow = oi * d;
                    for di in 0..d {
                        acc += xv[xrow + di] * wv[wrow + di];
                    }
                    out[ni * o + oi] = acc;
                }
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(Op::Dense { x, w, b }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e.max_val(T::zero())).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        Ok(self.push(Op::Relu { x }, value))
    }

    /// 2x2 window, stride 2, trailing odd row/column dropped. Ties keep the
    /// first element in scan order so backward is deterministic.
    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d".into(),
                detail: format!("input {:?} must be rank 4", xs),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d".into(),
                detail: format!("spatial dims {}x{} too small for a 2x2 window", h, w),
            });
        }
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        {
            let xv = self.value(x).data();
            for ni in 0..n {
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for r in 0..oh {
                        for cl in 0..ow {
                            let mut best_idx = plane + (2 * r) * w + 2 * cl;
                            let mut best = xv[best_idx];
                            for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = plane + (2 * r + dr) * w + 2 * cl + dc;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                            let o = ((ni * c + ci) * oh + r) * ow + cl;
                            out[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { x, argmax }, value))
    }

    /// N x ... -> N x prod(...). Data order unchanged.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "flatten".into(),
                detail: format!("input {:?} must have a batch dimension", xs),
            });
        }
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let value = Tensor::from_vec(&[n, rest], self.value(x).data().to_vec())?;
        Ok(self.push(Op::Flatten { x }, value))
    }

    /// Fused softmax + cross-entropy, mean over the batch. logits: N x C,
    /// one integer target per row. Output is scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy".into(),
                detail: format!("logits {:?} must be rank 2", ls),
            });
        }
        let (n, c) = (ls[0], ls[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy".into(),
                detail: format!("{} logit rows but {} targets", n, targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy".into(),
                detail: format!("target class {} out of range for {} classes", bad, c),
            });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        {
            let lv = self.value(logits).data();
            for ni in 0..n {
                let row = &lv[ni * c..(ni + 1) * c];
                let m = row.iter().fold(row[0], |a, &b| a.max_val(b));
                let mut denom = T::zero();
                for ci in 0..c {
                    let e = (row[ci] - m).exp();
                    probs[ni * c + ci] = e;
                    denom += e;
                }
                for ci in 0..c {
                    let p = probs[ni * c + ci] / denom;
                    probs[ni * c + ci] = p;
                }
                loss -= probs[ni * c + targets[ni]].ln();
            }
        }
        loss = loss / T::from_f64(n as f64);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Multiply every element by a constant (not a parameter).
    pub fn scalar_scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        Ok(self.push(Op::ScalarScale { x, factor }, value))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add".into(),
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), out)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Accumulate `scale * d(root)/d(param)` into every reachable parameter's
    /// grad buffer. The adjoints are computed once at scale 1 and multiplied
    /// by `scale` exactly once per element, so the result is bitwise
    /// `scale x` the scale-1 gradients.
    pub fn backward(&mut self, root: NodeId, scale: T) -> Result<()> {
        let collected = self.run_backward(root)?;
        for (pid, g) in collected {
            let scaled: Vec<T> = g.iter().map(|&e| e * scale).collect();
            self.params.get_mut(pid)?.accumulate_grad(&scaled);
        }
        Ok(())
    }

    /// As `backward` at scale 1, but returns the per-parameter gradients
    /// instead of accumulating them, for callers that apply the same
    /// adjoints under several scales.
    pub fn backward_collect(&mut self, root: NodeId) -> Result<Vec<(ParamId, Vec<T>)>> {
        self.run_backward(root)
    }

    fn run_backward(&mut self, root: NodeId) -> Result<Vec<(ParamId, Vec<T>)>> {
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(root).shape().to_vec(),
            });
        }
        if self.consumed[root.0] {
            return Err(Error::GraphConsumed { node: root.0 });
        }
        self.consumed[root.0] = true;

        // Adjoint buffer per node, allocated on first contribution.
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![T::one()]);
        let mut collected: Vec<(ParamId, Vec<T>)> = Vec::new();

        for id in (0..=root.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Borrow-splitting helper: contributions target nodes with
            // smaller ids than `id`, so indexing never aliases.
            macro_rules! contribute {
                ($target:expr, $len:expr, $body:expr) => {{
                    let t: NodeId = $target;
                    debug_assert!(t.0 < id);
                    let buf = adj[t.0].get_or_insert_with(|| vec![T::zero(); $len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(buf);
                }};
            }
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(pid) => collected.push((*pid, g)),
                Op::Conv2d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (oh, ow) = (h - kh + 1, wd - kw + 1);
                    let mut gx = vec![T::zero(); n * c * h * wd];
                    let mut gw = vec![T::zero(); f * c * kh * kw];
                    let mut gb = vec![T::zero(); f];
                    {
                        let xv = self.nodes[x.0].value.data();
                        let wv = self.nodes[w.0].value.data();
                        for ni in 0..n {
                            for fi in 0..f {
                                for r in 0..oh {
                                    for cl in 0..ow {
                                        let go = g[((ni * f + fi) * oh + r) * ow + cl];
                                        gb[fi] += go;
                                        for ci in 0..c {
                                            for dr in 0..kh {
                                                let xrow =
                                                    ((ni * c + ci) * h + r + dr) * wd + cl;
                                                let wrow = ((fi * c + ci) * kh + dr) * kw;
                                                for dc in 0..kw {
                                                    gx[xrow + dc] += go * wv[wrow + dc];
                                                    gw[wrow + dc] += go * xv[xrow + dc];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    contribute!(x, gx.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gx) {
                            *bi += *gi;
                        }
                    });
                    contribute!(w, gw.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gw) {
                            *bi += *gi;
                        }
                    });
                    contribute!(b, gb.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gb) {
                            *bi += *gi;
                        }
                    });
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let (n, d) = (xs[0], xs[1]);
                    let o = ws[0];
                    let mut gx = vec![T::zero(); n * d];
                    let mut gw = vec![T::zero(); o * d];
                    let mut gb = vec![T::zero(); o];
                    {
                        let xv = self.nodes[x.0].value.data();
                        let wv = self.nodes[w.0].value.data();
                        for ni in 0..n {
                            for oi in 0..o {
                                let go = g[ni * o + oi];
                                gb[oi] += go;
                                for di in 0..d {
                                    gx[ni * d + di] += go * wv[oi * d + di];
                                    gw[oi * d + di] += go * xv[ni * d + di];
                                }
                            }
                        }
                    }
                    contribute!(x, gx.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gx) {
                            *bi += *gi;
                        }
                    });
                    contribute!(w, gw.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gw) {
                            *bi += *gi;
                        }
                    });
                    contribute!(b, gb.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gb) {
                            *bi += *gi;
                        }
                    });
                }
                Op::Relu { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len();
                    let mut gx = vec![T::zero(); n];
                    {
                        let xv = self.nodes[x.0].value.data();
                        for i in 0..n {
                            if xv[i] > T::zero() {
                                gx[i] = g[i];
                            }
                        }
                    }
                    contribute!(x, n, |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gx) {
                            *bi += *gi;
                        }
                    });
                }
                Op::MaxPool2d { x, argmax } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len();
                    let mut gx = vec![T::zero(); n];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    contribute!(x, n, |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gx) {
                            *bi += *gi;
                        }
                    });
                }
                Op::Flatten { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len();
                    contribute!(x, n, |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&g) {
                            *bi += *gi;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let logits = *logits;
                    let n = targets.len();
                    let c = probs.len() / n;
                    let go = g[0];
                    let inv_n = T::one() / T::from_f64(n as f64);
                    let mut gl = vec![T::zero(); n * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let ind = if ci == targets[ni] { T::one() } else { T::zero() };
                            gl[ni * c + ci] = go * (probs[ni * c + ci] - ind) * inv_n;
                        }
                    }
                    contribute!(logits, gl.len(), |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&gl) {
                            *bi += *gi;
                        }
                    });
                }
                Op::ScalarScale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let n = self.nodes[x.0].value.len();
                    contribute!(x, n, |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&g) {
                            *bi += *gi * factor;
                        }
                    });
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let n = self.nodes[a.0].value.len();
                    contribute!(a, n, |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&g) {
                            *bi += *gi;
                        }
                    });
                    contribute!(b, n, |buf: &mut Vec<T>| {
                        for (bi, gi) in buf.iter_mut().zip(&g) {
                            *bi += *gi;
                        }
                    });
                }
            }
        }
        Ok(collected)
    }
}
