//! Recorded forward computation with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, appends a node that
//! remembers its inputs (and whatever activations its backward rule
//! needs) and returns a [`Var`] handle. Nodes can only refer to earlier
//! nodes, so the tape is acyclic and already in topological order;
//! [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels::conv::{self, Dims1d, Dims2d};
use crate::kernels::{elementwise, matmul, norm, reduce};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of a recorded op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Pointwise,
    DwConv2d,
    DwConv1d,
    Gelu,
    Mean,
    LayerNorm,
    Add,
    Mul,
    Scale,
    Reshape,
    Permute,
    SliceLast,
    ConcatLast,
    BroadcastTo,
    GatedSum,
    SoftmaxCrossEntropy,
    Sum,
}

enum Op<F> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Pointwise {
        x: Var,
        w: Var,
    },
    DwConv2d {
        x: Var,
        k: Var,
    },
    DwConv1d {
        x: Var,
        k: Var,
    },
    Gelu {
        x: Var,
        cdf: Vec<F>,
    },
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(F, F)>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    BroadcastTo {
        x: Var,
    },
    GatedSum {
        levels: Vec<Var>,
        gates: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<F>,
        probs: Vec<F>,
    },
    Sum {
        x: Var,
    },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Pointwise { .. } => OpKind::Pointwise,
            Op::DwConv2d { .. } => OpKind::DwConv2d,
            Op::DwConv1d { .. } => OpKind::DwConv1d,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Mean { .. } => OpKind::Mean,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::ConcatLast { .. } => OpKind::ConcatLast,
            Op::BroadcastTo { .. } => OpKind::BroadcastTo,
            Op::GatedSum { .. } => OpKind::GatedSum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Pointwise { x, w } => vec![*x, *w],
            Op::DwConv2d { x, k } | Op::DwConv1d { x, k } => vec![*x, *k],
            Op::Gelu { x, .. }
            | Op::Mean { x, .. }
            | Op::Scale { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::SliceLast { x, .. }
            | Op::BroadcastTo { x }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatLast { a, b } => vec![*a, *b],
            Op::GatedSum { levels, gates } => {
                let mut v = levels.clone();
                v.push(*gates);
                v
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    scope: usize,
}

/// Floating point operation count attributed to one named scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeFlops {
    pub scope: String,
    pub flops: u64,
}

/// A tape of recorded operations.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
    scopes: Vec<String>,
    scope_ids: HashMap<String, usize>,
    current_scope: usize,
    fault: Option<(OpKind, F)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            scopes: vec![String::new()],
            scope_ids: HashMap::from([(String::new(), 0)]),
            current_scope: 0,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the scope label attached to subsequently recorded nodes and
    /// returns the previous label.
    pub fn set_scope(&mut self, scope: &str) -> String {
        let prev = self.scopes[self.current_scope].clone();
        let next = self.scopes.len();
        let id = *self.scope_ids.entry(scope.to_string()).or_insert(next);
        if id == next {
            self.scopes.push(scope.to_string());
        }
        self.current_scope = id;
        prev
    }

    pub fn scope(&self) -> &str {
        &self.scopes[self.current_scope]
    }

    /// Scales every gradient a backward rule of `kind` produces. Used only
    /// to demonstrate that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, scale: F) {
        self.fault = Some((kind, scale));
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if !value.all_finite() && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            return Err(Error::Numeric(format!(
                "{:?} in scope '{}' produced non-finite values from finite inputs",
                op.kind(),
                self.scope()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.current_scope,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            scope: self.current_scope,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a gradient-carrying leaf. Binding the
    /// same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound into this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    // ---------------------------------------------------------------- ops

    /// `y[..., j] = sum_i x[..., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let cin = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != cin {
            return Err(shape_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!(
                    "linear: bias {:?} does not match weight {ws:?}",
                    self.shape(b)
                ));
            }
        }
        let p = numel(&xs) / cin;
        let mut out = vec![F::zero(); p * cout];
        matmul::matmul(self.value(x).data(), p, cin, self.value(w).data(), cout, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    /// 1x1 convolution over the channel axis: a bias-free `linear` at every
    /// position.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let c = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != c {
            return Err(shape_err!(
                "pointwise_conv: input {xs:?} incompatible with weight {ws:?}"
            ));
        }
        let p = numel(&xs) / c;
        let mut out = vec![F::zero(); p * ws[1]];
        matmul::matmul(self.value(x).data(), p, c, self.value(w).data(), ws[1], &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[1];
        self.push(Tensor::new(shape, out)?, Op::Pointwise { x, w })
    }

    /// Depthwise 2-D correlation of `[N, H, W, C]` with a `[k, k, C]` kernel,
    /// zero "same" padding.
    pub fn dwconv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 {
            return Err(shape_err!("dwconv2d: expected [N,H,W,C] input, got {xs:?}"));
        }
        if ks.len() != 3 || ks[0] != ks[1] || ks[2] != xs[3] {
            return Err(shape_err!("dwconv2d: kernel {ks:?} incompatible with input {xs:?}"));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Config(format!("dwconv2d: kernel size {} must be odd", ks[0])));
        }
        let d = Dims2d {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            c: xs[3],
        };
        let mut out = vec![F::zero(); numel(&xs)];
        conv::dwconv2d(self.value(x).data(), d, self.value(k).data(), ks[0], &mut out);
        self.push(Tensor::new(xs, out)?, Op::DwConv2d { x, k })
    }

    /// Depthwise 1-D correlation of `[N, T, C]` with a `[k, C]` kernel, zero
    /// "same" padding.
    pub fn dwconv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 {
            return Err(shape_err!("dwconv1d: expected [N,T,C] input, got {xs:?}"));
        }
        if ks.len() != 2 || ks[1] != xs[2] {
            return Err(shape_err!("dwconv1d: kernel {ks:?} incompatible with input {xs:?}"));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Config(format!("dwconv1d: kernel size {} must be odd", ks[0])));
        }
        let d = Dims1d {
            n: xs[0],
            t: xs[1],
            c: xs[2],
        };
        let mut out = vec![F::zero(); numel(&xs)];
        conv::dwconv1d(self.value(x).data(), d, self.value(k).data(), ks[0], &mut out);
        self.push(Tensor::new(xs, out)?, Op::DwConv1d { x, k })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        let (mut out, mut cdf) = (vec![F::zero(); n], vec![F::zero(); n]);
        elementwise::gelu_with_cdf(xv.data(), &mut out, &mut cdf);
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu { x, cdf })
    }

    /// Global average pool over `axes`, keeping them as size-1 axes.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.iter().any(|&a| a >= xs.len()) {
            return Err(shape_err!("mean: axes {axes:?} invalid for shape {xs:?}"));
        }
        let (shape, data) = reduce::mean_axes(self.value(x).data(), &xs, &sorted);
        self.push(Tensor::new(shape, data)?, Op::Mean { x, axes: sorted })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "layer_norm: affine params {:?}/{:?} do not match input {xs:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let mut out = vec![F::zero(); numel(&xs)];
        let stats = norm::layer_norm(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut out,
        );
        self.push(Tensor::new(xs, out)?, Op::LayerNorm { x, gamma, beta, stats })
    }

    fn broadcast_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(shape_err!("{what}: rank mismatch {sa:?} vs {sb:?}"));
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, y) => Ok(y),
                (x, 1) => Ok(x),
                _ => Err(shape_err!("{what}: cannot broadcast {sa:?} with {sb:?}")),
            })
            .collect()
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let what = if mul { "elementwise_mul" } else { "add" };
        let shape = self.broadcast_shape(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: F, y: F| if mul { x * y } else { x + y };
        let out: Vec<F> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![F::zero(); numel(&shape)];
            let (sa, sb) = (
                reduce::broadcast_strides(av.shape()),
                reduce::broadcast_strides(bv.shape()),
            );
            let (ad, bd) = (av.data(), bv.data());
            reduce::for_each_broadcast(&shape, &sa, &sb, |i, oa, ob| out[i] = f(ad[oa], bd[ob]));
            out
        };
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        self.push(Tensor::new(shape, out)?, op)
    }

    /// Element-wise product with size-1 axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// Element-wise sum with size-1 axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale { x, factor })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..xs.len()).collect::<Vec<_>>() {
            return Err(shape_err!(
                "permute: {perm:?} is not a permutation of rank {}",
                xs.len()
            ));
        }
        let (shape, data) = reduce::permute(self.value(x).data(), &xs, perm);
        self.push(Tensor::new(shape, data)?, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if len == 0 || start + len > c {
            return Err(shape_err!(
                "slice_last: range {start}..{} out of bounds for {xs:?}",
                start + len
            ));
        }
        let data: Vec<F> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(shape, data)?, Op::SliceLast { x, start })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if sa.len() != sb.len() || sa[..r - 1] != sb[..r - 1] {
            return Err(shape_err!("concat_last: {sa:?} vs {sb:?}"));
        }
        let (ca, cb) = (sa[r - 1], sb[r - 1]);
        let mut data = Vec::with_capacity(numel(&sa) + numel(&sb));
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks_exact(ca)
            .zip(self.value(b).data().chunks_exact(cb))
        {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa;
        shape[r - 1] = ca + cb;
        self.push(Tensor::new(shape, data)?, Op::ConcatLast { a, b })
    }

    /// Expands size-1 axes of `x` to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != shape.len() || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(shape_err!("broadcast_to: cannot expand {xs:?} to {shape:?}"));
        }
        let src = reduce::broadcast_strides(&xs);
        let zero = vec![0; shape.len()];
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); numel(shape)];
        reduce::for_each_broadcast(shape, &src, &zero, |i, o, _| out[i] = xd[o]);
        self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo { x })
    }

    /// `out = sum_l gates[..., l] * levels[l]`, gates broadcast over channels.
    pub fn gated_sum(&mut self, levels: &[Var], gates: Var) -> Result<Var> {
        let Some(&first) = levels.first() else {
            return Err(shape_err!("gated_sum: no levels"));
        };
        let ls = self.shape(first).to_vec();
        if let Some(bad) = levels.iter().find(|&&l| self.shape(l) != ls.as_slice()) {
            return Err(shape_err!(
                "gated_sum: level shapes differ ({ls:?} vs {:?})",
                self.shape(*bad)
            ));
        }
        let gs = self.shape(gates).to_vec();
        let r = ls.len();
        if gs.len() != r || gs[..r - 1] != ls[..r - 1] || gs[r - 1] != levels.len() {
            return Err(shape_err!(
                "gated_sum: {} levels of {ls:?} need gates [..., {}], got {gs:?}",
                levels.len(),
                levels.len()
            ));
        }
        let c = ls[r - 1];
        let mut out = vec![F::zero(); numel(&ls)];
        {
            let slices: Vec<&[F]> = levels.iter().map(|&l| self.value(l).data()).collect();
            elementwise::gated_sum(&slices, self.value(gates).data(), c, &mut out);
        }
        self.push(
            Tensor::new(ls, out)?,
            Op::GatedSum {
                levels: levels.to_vec(),
                gates,
            },
        )
    }

    /// Mean cross-entropy between softmax(logits) and soft `targets`, both
    /// `[B, K]`. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<F>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || targets.shape() != ls.as_slice() {
            return Err(shape_err!(
                "softmax_cross_entropy: logits {ls:?} vs targets {:?}",
                targets.shape()
            ));
        }
        let (loss, probs) = elementwise::softmax_cross_entropy(self.value(logits).data(), targets.data(), ls[1]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
        )
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every gradient-carrying leaf gets an entry; leaves the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.backward_node(node, &g)?;
            if let Some((kind, scale)) = self.fault {
                if kind == node.op.kind() {
                    for (_, t) in &mut contributions {
                        *t = t.map(|v| v * scale);
                    }
                }
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients {
            leaves,
            bound: self.bound.clone(),
        })
    }

    fn backward_node(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let gd = g.data();
        let out_shape = node.value.shape();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, .. } | Op::Pointwise { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let p = xv.numel() / cin;
                if self.requires_grad(*x) {
                    let mut dx = vec![F::zero(); p * cin];
                    matmul::matmul_nt(gd, p, cout, wv.data(), cin, &mut dx);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![F::zero(); cin * cout];
                    matmul::matmul_tn(xv.data(), p, cin, gd, cout, &mut dw);
                    out.push((*w, Tensor::new(vec![cin, cout], dw)?));
                }
                if let Op::Linear { b: Some(b), .. } = &node.op {
                    if self.requires_grad(*b) {
                        let db = matmul::column_sums(gd, p, cout);
                        out.push((*b, Tensor::new(vec![cout], db)?));
                    }
                }
            }
            Op::DwConv2d { x, k } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let s = xv.shape();
                let d = Dims2d {
                    n: s[0],
                    h: s[1],
                    w: s[2],
                    c: s[3],
                };
                let ks = kv.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![F::zero(); xv.numel()];
                    conv::dwconv2d_grad_input(gd, d, kv.data(), ks, &mut dx);
                    out.push((*x, Tensor::new(s.to_vec(), dx)?));
                }
                if self.requires_grad(*k) {
                    let dk = conv::dwconv2d_grad_kernel(xv.data(), gd, d, ks);
                    out.push((*k, Tensor::new(kv.shape().to_vec(), dk)?));
                }
            }
            Op::DwConv1d { x, k } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let s = xv.shape();
                let d = Dims1d {
                    n: s[0],
                    t: s[1],
                    c: s[2],
                };
                let ks = kv.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![F::zero(); xv.numel()];
                    conv::dwconv1d_grad_input(gd, d, kv.data(), ks, &mut dx);
                    out.push((*x, Tensor::new(s.to_vec(), dx)?));
                }
                if self.requires_grad(*k) {
                    let dk = conv::dwconv1d_grad_kernel(xv.data(), gd, d, ks);
                    out.push((*k, Tensor::new(kv.shape().to_vec(), dk)?));
                }
            }
            Op::Gelu { x, cdf } => {
                let xv = self.value(*x);
                let mut dx = vec![F::zero(); xv.numel()];
                elementwise::gelu_backward_cdf(xv.data(), cdf, gd, &mut dx);
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Mean { x, axes } => {
                let xs = self.shape(*x).to_vec();
                let count: usize = axes.iter().map(|&a| xs[a]).product();
                let inv = F::one() / F::of(count as f64);
                let src = reduce::broadcast_strides(out_shape);
                let zero = vec![0; xs.len()];
                let mut dx = vec![F::zero(); numel(&xs)];
                reduce::for_each_broadcast(&xs, &src, &zero, |i, o, _| dx[i] = gd[o] * inv);
                out.push((*x, Tensor::new(xs, dx)?));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let c = *xv.shape().last().unwrap();
                let (dx, dg, db) = norm::layer_norm_backward(xv.data(), c, self.value(*gamma).data(), stats, gd);
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                out.push((*gamma, Tensor::new(vec![c], dg)?));
                out.push((*beta, Tensor::new(vec![c], db)?));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let s = self.shape(v);
                        out.push((v, Tensor::new(s.to_vec(), reduce::sum_to_shape(gd, out_shape, s))?));
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod: Vec<F> = if ov.shape() == out_shape {
                        gd.iter().zip(ov.data()).map(|(&g, &o)| g * o).collect()
                    } else {
                        let mut p = vec![F::zero(); gd.len()];
                        let src = reduce::broadcast_strides(ov.shape());
                        let zero = vec![0; out_shape.len()];
                        let od = ov.data();
                        reduce::for_each_broadcast(out_shape, &src, &zero, |i, o, _| p[i] = gd[i] * od[o]);
                        p
                    };
                    let s = self.shape(v);
                    out.push((v, Tensor::new(s.to_vec(), reduce::sum_to_shape(&prod, out_shape, s))?));
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.map(|v| v * *factor)));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::Permute { x, perm } => {
                let inv = reduce::inverse_permutation(perm);
                let (shape, data) = reduce::permute(gd, out_shape, &inv);
                out.push((*x, Tensor::new(shape, data)?));
            }
            Op::SliceLast { x, start } => {
                let xs = self.shape(*x).to_vec();
                let c = *xs.last().unwrap();
                let len = *out_shape.last().unwrap();
                let mut dx = vec![F::zero(); numel(&xs)];
                for (drow, grow) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                out.push((*x, Tensor::new(xs, dx)?));
            }
            Op::ConcatLast { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let mut da = Vec::with_capacity(numel(&sa));
                let mut db = Vec::with_capacity(numel(&sb));
                for row in gd.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                out.push((*a, Tensor::new(sa, da)?));
                out.push((*b, Tensor::new(sb, db)?));
            }
            Op::BroadcastTo { x } => {
                let s = self.shape(*x);
                out.push((*x, Tensor::new(s.to_vec(), reduce::sum_to_shape(gd, out_shape, s))?));
            }
            Op::GatedSum { levels, gates } => {
                let c = *out_shape.last().unwrap();
                let nl = levels.len();
                let gv = self.value(*gates);
                for (l, &lv) in levels.iter().enumerate() {
                    if self.requires_grad(lv) {
                        let dz = elementwise::gated_sum_grad_level(gv.data(), nl, l, gd, c);
                        out.push((lv, Tensor::new(out_shape.to_vec(), dz)?));
                    }
                }
                if self.requires_grad(*gates) {
                    let slices: Vec<&[F]> = levels.iter().map(|&l| self.value(l).data()).collect();
                    let dg = elementwise::gated_sum_grad_gates(&slices, gd, c);
                    out.push((*gates, Tensor::new(gv.shape().to_vec(), dg)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits).to_vec();
                let (b, k) = (s[0], s[1]);
                let scale = gd[0] / F::of(b as f64);
                let mut dz = vec![F::zero(); b * k];
                for r in 0..b {
                    let t = &targets[r * k..][..k];
                    let mass: F = t.iter().copied().sum();
                    for j in 0..k {
                        dz[r * k + j] = (probs[r * k + j] * mass - t[j]) * scale;
                    }
                }
                out.push((*logits, Tensor::new(s, dz)?));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
        }
        Ok(out)
    }

    // -------------------------------------------------------------- flops

    /// Operation count of node `v` under the cost-model convention:
    /// 2 per multiply-accumulate, 1 per element for bias adds, activations,
    /// element-wise ops and pooled inputs, 5 per element for layer norm,
    /// nothing for pure data movement or the loss.
    pub fn node_flops(&self, v: Var) -> u64 {
        let node = &self.nodes[v.0];
        let out = node.value.numel() as u64;
        match &node.op {
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let p = (self.value(*x).numel() / ws[0]) as u64;
                let macs = p * ws[0] as u64 * ws[1] as u64;
                2 * macs + if b.is_some() { out } else { 0 }
            }
            Op::Pointwise { x, w } => {
                let ws = self.shape(*w);
                let p = (self.value(*x).numel() / ws[0]) as u64;
                2 * p * ws[0] as u64 * ws[1] as u64
            }
            Op::DwConv2d { k, .. } => {
                let ks = self.shape(*k)[0] as u64;
                2 * out * ks * ks
            }
            Op::DwConv1d { k, .. } => 2 * out * self.shape(*k)[0] as u64,
            Op::Gelu { .. } | Op::Add { .. } | Op::Mul { .. } | Op::Scale { .. } => out,
            Op::Mean { x, .. } | Op::Sum { x } => self.value(*x).numel() as u64,
            Op::LayerNorm { .. } => 5 * out,
            Op::GatedSum { levels, .. } => 2 * levels.len() as u64 * out,
            Op::Leaf
            | Op::Reshape { .. }
            | Op::Permute { .. }
            | Op::SliceLast { .. }
            | Op::ConcatLast { .. }
            | Op::BroadcastTo { .. }
            | Op::SoftmaxCrossEntropy { .. } => 0,
        }
    }

    pub fn total_flops(&self) -> u64 {
        (0..self.nodes.len()).map(|i| self.node_flops(Var(i))).sum()
    }

    /// Operation counts summed per scope label, in order of first use.
    pub fn flops_by_scope(&self) -> Vec<ScopeFlops> {
        let mut order: Vec<usize> = Vec::new();
        let mut totals: HashMap<usize, u64> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let f = self.node_flops(Var(i));
            if f == 0 {
                continue;
            }
            let e = totals.entry(node.scope).or_insert_with(|| {
                order.push(node.scope);
                0
            });
            *e += f;
        }
        order
            .into_iter()
            .map(|s| ScopeFlops {
                scope: self.scopes[s].clone(),
                flops: totals[&s],
            })
            .collect()
    }

    /// Kinds and scopes of all recorded nodes, in tape order.
    pub fn ops(&self) -> impl Iterator<Item = (OpKind, &str)> + '_ {
        self.nodes.iter().map(|n| (n.op.kind(), self.scopes[n.scope].as_str()))
    }
}

/// Gradients of every gradient-carrying leaf from one backward sweep.
pub struct Gradients<F> {
    leaves: Vec<(Var, Tensor<F>)>,
    bound: HashMap<ParamId, Var>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` if `v` is not a gradient-carrying leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves
            .binary_search_by_key(&v.0, |(var, _)| var.0)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Gradients aligned with `store`: zeros for parameters the graph never
    /// bound.
    pub fn for_params(&self, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        store
            .iter()
            .map(|(id, _, value)| {
                self.bound
                    .get(&id)
                    .and_then(|&v| self.wrt(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }
}
