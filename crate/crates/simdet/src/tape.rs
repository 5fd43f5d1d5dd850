//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations executed through a [`Tape`] are recorded in topological order,
//! each node owning its forward value. [`Tape::backward`] replays the record
//! in reverse and accumulates adjoints into every node that requires
//! gradients. Parameters from a [`crate::optim::ParamStore`] enter a tape as
//! leaves via [`Tape::param`]; after a backward sweep their gradients are
//! folded back with [`crate::optim::ParamStore::absorb_grads`].
//!
//! A tape is single-threaded. Distinct tapes over immutable parameters may
//! run concurrently; mutation happens only between steps.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Guard against division by zero in L2 normalisation and cosine maps.
pub const NORM_EPSILON: f64 = 1e-12;
/// Variance stabiliser for batch normalisation.
pub const BATCHNORM_EPSILON: f64 = 1e-5;
/// Running-moment momentum for batch normalisation.
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// Forward phase: training updates batch statistics, inference consumes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-channel running mean and variance owned by one batch-norm layer.
#[derive(Clone, Debug)]
pub struct RunningMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningMoments {
    pub fn new(channels: usize) -> Self {
        RunningMoments { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

enum Op {
    Leaf,
    Conv { input: Var, kernel: Var, stride: Vec<usize> },
    MaxPool { input: Var, argmax: Vec<usize> },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { input: Var },
    L2Normalize { input: Var, raw_norm: f64 },
    SoftmaxTemp { input: Var, temperature: f64 },
    CosineSimMap { exemplar: Var, target: Var, ex_raw_norm: f64, patch_raw_norms: Vec<f64> },
    Dot { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { input: Var, scale: f64 },
    Square { input: Var },
    Sum { input: Var },
    Reshape { input: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations with their backward rules.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_links: Vec<(usize, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite values out of a forward op");
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// The accumulated gradient of a node, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub(crate) fn param_links(&self) -> &[(usize, ParamId)] {
        &self.param_links
    }

    pub(crate) fn node_grad(&self, index: usize) -> Option<&[f64]> {
        self.nodes[index].grad.as_deref()
    }

    /// Registers an input tensor as a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a constant (no gradient tracking).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Brings a stored parameter onto the tape as a differentiable leaf and
    /// remembers the link so `ParamStore::absorb_grads` can collect into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), true, Op::Leaf);
        self.param_links.push((v.0, id));
        v
    }

    /// Valid (unpadded) cross-correlation over 1 or 2 trailing spatial axes.
    ///
    /// `input` is `[n, c_in, spatial...]`, `kernel` `[c_out, c_in, spatial...]`,
    /// `stride` one entry per spatial axis. Output extents are
    /// `(in - k) / stride + 1`.
    pub fn conv(&mut self, input: Var, kernel: Var, stride: &[usize]) -> Result<Var> {
        let in_shape = self.value(input).shape().to_vec();
        let k_shape = self.value(kernel).shape().to_vec();
        let rank = in_shape.len();
        if rank != 3 && rank != 4 {
            return Err(Error::shape(format!(
                "conv input must be [n, c, spatial...] with 1 or 2 spatial axes, got {in_shape:?}"
            )));
        }
        if k_shape.len() != rank {
            return Err(Error::shape(format!(
                "conv kernel rank {} does not match input rank {}",
                k_shape.len(),
                rank
            )));
        }
        if in_shape[1] != k_shape[1] {
            return Err(Error::shape(format!(
                "conv channel mismatch: input has {}, kernel expects {}",
                in_shape[1], k_shape[1]
            )));
        }
        if stride.len() != rank - 2 || stride.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "conv stride needs {} positive entries, got {stride:?}",
                rank - 2
            )));
        }
        for (axis, (i, k)) in in_shape[2..].iter().zip(&k_shape[2..]).enumerate() {
            if i < k {
                return Err(Error::shape(format!(
                    "conv spatial axis {axis}: input extent {i} smaller than kernel extent {k}"
                )));
            }
        }

        let dims = ConvDims { n: in_shape[0], c_in: in_shape[1], c_out: k_shape[0] };
        let out_sp: Vec<usize> = in_shape[2..]
            .iter()
            .zip(&k_shape[2..])
            .zip(stride)
            .map(|((i, k), s)| (i - k) / s + 1)
            .collect();
        let mut out_shape = vec![dims.n, dims.c_out];
        out_shape.extend_from_slice(&out_sp);
        let mut out = vec![0.0; out_shape.iter().product()];

        {
            let inp = self.value(input).values();
            let ker = self.value(kernel).values();
            if rank == 3 {
                kernels::conv1d_forward(inp, ker, dims, in_shape[2], k_shape[2], stride[0], &mut out, out_sp[0]);
            } else {
                kernels::conv2d_forward(
                    inp,
                    ker,
                    dims,
                    (in_shape[2], in_shape[3]),
                    (k_shape[2], k_shape[3]),
                    (stride[0], stride[1]),
                    &mut out,
                    (out_sp[0], out_sp[1]),
                );
            }
        }

        let rg = self.needs_grad(input) || self.needs_grad(kernel);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Conv { input, kernel, stride: stride.to_vec() },
        ))
    }

    /// Max pooling with window 2 and stride 2 on every spatial axis. The
    /// backward pass routes the gradient to the argmax element, first
    /// occurrence on ties.
    pub fn maxpool(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 && shape.len() != 4 {
            return Err(Error::shape(format!(
                "maxpool input must be [n, c, spatial...], got {shape:?}"
            )));
        }
        if shape[2..].iter().any(|&e| e < 2) {
            return Err(Error::shape(format!(
                "maxpool needs spatial extents of at least 2, got {shape:?}"
            )));
        }
        let (out, argmax, out_shape) = kernels::maxpool_forward(self.value(input).values(), &shape);
        let rg = self.needs_grad(input);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::MaxPool { input, argmax }))
    }

    /// Per-channel batch normalisation of `[n, c, spatial...]`.
    ///
    /// Training mode normalises with statistics over the batch and spatial
    /// axes and updates `moments`; inference mode applies the stored moments.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        moments: &mut RunningMoments,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 && shape.len() != 4 {
            return Err(Error::shape(format!(
                "batchnorm input must be [n, c, spatial...], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let m = n * sp;
        if m == 0 {
            return Err(Error::invalid("batchnorm over an empty batch".to_string()));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm gamma/beta must have one value per channel ({c})"
            )));
        }
        if moments.mean.len() != c {
            return Err(Error::shape(format!(
                "running moments track {} channels, input has {c}",
                moments.mean.len()
            )));
        }

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let x = self.value(input).values();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let row = (b * c + ch) * sp;
                        for s in 0..sp {
                            acc += x[row + s];
                        }
                    }
                    mean[ch] = acc / m as f64;
                    let mut acc2 = 0.0;
                    for b in 0..n {
                        let row = (b * c + ch) * sp;
                        for s in 0..sp {
                            let d = x[row + s] - mean[ch];
                            acc2 += d * d;
                        }
                    }
                    var[ch] = acc2 / m as f64;
                }
                for ch in 0..c {
                    moments.mean[ch] =
                        BATCHNORM_MOMENTUM * moments.mean[ch] + (1.0 - BATCHNORM_MOMENTUM) * mean[ch];
                    moments.var[ch] =
                        BATCHNORM_MOMENTUM * moments.var[ch] + (1.0 - BATCHNORM_MOMENTUM) * var[ch];
                }
                (mean, var)
            }
            Mode::Infer => (moments.mean.clone(), moments.var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPSILON).sqrt()).collect();
        let mut out = vec![0.0; self.value(input).numel()];
        {
            let x = self.value(input).values();
            let g = self.value(gamma).values();
            let bta = self.value(beta).values();
            for b in 0..n {
                for ch in 0..c {
                    let row = (b * c + ch) * sp;
                    for s in 0..sp {
                        out[row + s] = g[ch] * (x[row + s] - mean[ch]) * inv_std[ch] + bta[ch];
                    }
                }
            }
        }

        let rg = self.needs_grad(input) || self.needs_grad(gamma) || self.needs_grad(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::BatchNorm { input, gamma, beta, mean, inv_std, train: mode == Mode::Train },
        ))
    }

    /// Elementwise `max(0, x)`, subgradient 0 at 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).values().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs_grad(input);
        self.push(Tensor::new(shape, out).expect("same shape"), rg, Op::Relu { input })
    }

    /// Divides the whole tensor, viewed as one flat vector, by
    /// `max(norm, NORM_EPSILON)`.
    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let raw_norm = self.value(input).flat_norm();
        let denom = raw_norm.max(NORM_EPSILON);
        let out: Vec<f64> = self.value(input).values().iter().map(|v| v / denom).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs_grad(input);
        self.push(Tensor::new(shape, out).expect("same shape"), rg, Op::L2Normalize { input, raw_norm })
    }

    /// Temperature softmax over all elements, computed with max subtraction.
    pub fn softmax_temp(&mut self, input: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(input).values();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
        let total: f64 = out.iter().sum();
        for v in &mut out {
            *v /= total;
        }
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs_grad(input);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SoftmaxTemp { input, temperature }))
    }

    /// Cosine similarity between a `[c, spatial...]` exemplar and every
    /// co-located patch of a `[c, spatial...]` target, over 1 or 2 spatial
    /// axes. Output shape is the per-axis position count
    /// `target - exemplar + 1`. Equivalent to convolving the L2-normalised
    /// exemplar with a per-location L2-normalised target.
    pub fn cosine_similarity_map(&mut self, exemplar: Var, target: Var) -> Result<Var> {
        let ex_shape = self.value(exemplar).shape().to_vec();
        let tg_shape = self.value(target).shape().to_vec();
        if ex_shape.len() != tg_shape.len() || (ex_shape.len() != 2 && ex_shape.len() != 3) {
            return Err(Error::shape(format!(
                "similarity map expects [c, spatial...] pairs of equal rank 2 or 3, got {ex_shape:?} vs {tg_shape:?}"
            )));
        }
        if ex_shape[0] != tg_shape[0] {
            return Err(Error::shape(format!(
                "similarity map channel mismatch: exemplar {} vs target {}",
                ex_shape[0], tg_shape[0]
            )));
        }
        for (axis, (e, t)) in ex_shape[1..].iter().zip(&tg_shape[1..]).enumerate() {
            if e > t {
                return Err(Error::shape(format!(
                    "similarity map axis {axis}: exemplar extent {e} exceeds target extent {t}"
                )));
            }
        }

        let c = ex_shape[0];
        let ex_sp = &ex_shape[1..];
        let tg_sp = &tg_shape[1..];
        let pos: Vec<usize> = tg_sp.iter().zip(ex_sp).map(|(t, e)| t - e + 1).collect();
        let n_pos: usize = pos.iter().product();

        let ex = self.value(exemplar).values();
        let tg = self.value(target).values();
        let ex_raw_norm = self.value(exemplar).flat_norm();
        let ex_den = ex_raw_norm.max(NORM_EPSILON);

        let mut scores = vec![0.0; n_pos];
        let mut patch_raw_norms = vec![0.0; n_pos];
        match pos.len() {
            1 => {
                let (ew, tw) = (ex_sp[0], tg_sp[0]);
                for p in 0..pos[0] {
                    let mut dotv = 0.0;
                    let mut nrm = 0.0;
                    for ch in 0..c {
                        let er = ch * ew;
                        let tr = ch * tw + p;
                        for k in 0..ew {
                            let t = tg[tr + k];
                            dotv += ex[er + k] * t;
                            nrm += t * t;
                        }
                    }
                    let raw = nrm.sqrt();
                    patch_raw_norms[p] = raw;
                    scores[p] = dotv / (ex_den * raw.max(NORM_EPSILON));
                }
            }
            2 => {
                let (eh, ew) = (ex_sp[0], ex_sp[1]);
                let (th, tw) = (tg_sp[0], tg_sp[1]);
                for py in 0..pos[0] {
                    for px in 0..pos[1] {
                        let mut dotv = 0.0;
                        let mut nrm = 0.0;
                        for ch in 0..c {
                            for dy in 0..eh {
                                let er = (ch * eh + dy) * ew;
                                let tr = (ch * th + py + dy) * tw + px;
                                for dx in 0..ew {
                                    let t = tg[tr + dx];
                                    dotv += ex[er + dx] * t;
                                    nrm += t * t;
                                }
                            }
                        }
                        let raw = nrm.sqrt();
                        let idx = py * pos[1] + px;
                        patch_raw_norms[idx] = raw;
                        scores[idx] = dotv / (ex_den * raw.max(NORM_EPSILON));
                    }
                }
            }
            _ => unreachable!(),
        }

        let rg = self.needs_grad(exemplar) || self.needs_grad(target);
        Ok(self.push(
            Tensor::new(pos, scores)?,
            rg,
            Op::CosineSimMap { exemplar, target, ex_raw_norm, patch_raw_norms },
        ))
    }

    /// Scalar product of two equally sized tensors viewed as flat vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::shape(format!(
                "dot operands differ in length: {} vs {}",
                self.value(a).numel(),
                self.value(b).numel()
            )));
        }
        let v = kernels::dot(self.value(a).values(), self.value(b).values());
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::scalar(v), rg, Op::Dot { a, b }))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add operands must share a shape".to_string()));
        }
        let out: Vec<f64> =
            self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b }))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul operands must share a shape".to_string()));
        }
        let out: Vec<f64> =
            self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b }))
    }

    /// Elementwise `x * scale + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(input).values().iter().map(|v| v * scale + shift).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs_grad(input);
        self.push(Tensor::new(shape, out).expect("same shape"), rg, Op::Affine { input, scale })
    }

    /// Elementwise square.
    pub fn square(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).values().iter().map(|v| v * v).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs_grad(input);
        self.push(Tensor::new(shape, out).expect("same shape"), rg, Op::Square { input })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let v: f64 = self.value(input).values().iter().sum();
        let rg = self.needs_grad(input);
        self.push(Tensor::scalar(v), rg, Op::Sum { input })
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(input).reshaped(shape)?;
        let rg = self.needs_grad(input);
        Ok(self.push(t, rg, Op::Reshape { input }))
    }

    /// Runs one reverse sweep from a scalar loss, visiting every recorded
    /// operation at most once and accumulating adjoints into each
    /// gradient-requiring node. Repeated sweeps without resetting keep
    /// accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss variable is not on this tape".to_string()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                adjoint[i] = None;
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            self.propagate(i, &g, &mut adjoint);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds a contribution into the adjoint buffer of `target`.
    fn bump(&self, adjoint: &mut [Option<Vec<f64>>], target: Var, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let buf = adjoint[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        update(buf.as_mut_slice());
    }

    fn propagate(&self, index: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        match &self.nodes[index].op {
            Op::Leaf => {}
            Op::Conv { input, kernel, stride } => {
                let in_shape = self.value(*input).shape();
                let k_shape = self.value(*kernel).shape();
                let out_shape = self.nodes[index].value.shape();
                let dims = ConvDims { n: in_shape[0], c_in: in_shape[1], c_out: k_shape[0] };
                if in_shape.len() == 3 {
                    let (iw, kw, ow) = (in_shape[2], k_shape[2], out_shape[2]);
                    self.bump(adjoint, *input, |buf| {
                        kernels::conv1d_grad_input(
                            g,
                            self.value(*kernel).values(),
                            dims,
                            iw,
                            kw,
                            stride[0],
                            buf,
                            ow,
                        );
                    });
                    self.bump(adjoint, *kernel, |buf| {
                        kernels::conv1d_grad_kernel(
                            g,
                            self.value(*input).values(),
                            dims,
                            iw,
                            kw,
                            stride[0],
                            buf,
                            ow,
                        );
                    });
                } else {
                    let isp = (in_shape[2], in_shape[3]);
                    let ksp = (k_shape[2], k_shape[3]);
                    let osp = (out_shape[2], out_shape[3]);
                    let st = (stride[0], stride[1]);
                    self.bump(adjoint, *input, |buf| {
                        kernels::conv2d_grad_input(
                            g,
                            self.value(*kernel).values(),
                            dims,
                            isp,
                            ksp,
                            st,
                            buf,
                            osp,
                        );
                    });
                    self.bump(adjoint, *kernel, |buf| {
                        kernels::conv2d_grad_kernel(
                            g,
                            self.value(*input).values(),
                            dims,
                            isp,
                            ksp,
                            st,
                            buf,
                            osp,
                        );
                    });
                }
            }
            Op::MaxPool { input, argmax } => {
                self.bump(adjoint, *input, |buf| {
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += g[o];
                    }
                });
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, train } => {
                let shape = self.value(*input).shape();
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let m = (n * sp) as f64;
                let x = self.value(*input).values();
                let gam = self.value(*gamma).values();

                // Per-channel sums of dy and dy * xhat.
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let row = (b * c + ch) * sp;
                        for s in 0..sp {
                            let xhat = (x[row + s] - mean[ch]) * inv_std[ch];
                            s1[ch] += g[row + s];
                            s2[ch] += g[row + s] * xhat;
                        }
                    }
                }
                self.bump(adjoint, *beta, |buf| {
                    for ch in 0..c {
                        buf[ch] += s1[ch];
                    }
                });
                self.bump(adjoint, *gamma, |buf| {
                    for ch in 0..c {
                        buf[ch] += s2[ch];
                    }
                });
                self.bump(adjoint, *input, |buf| {
                    if *train {
                        for b in 0..n {
                            for ch in 0..c {
                                let row = (b * c + ch) * sp;
                                for s in 0..sp {
                                    let xhat = (x[row + s] - mean[ch]) * inv_std[ch];
                                    buf[row + s] += gam[ch]
                                        * inv_std[ch]
                                        * (g[row + s] - s1[ch] / m - xhat * s2[ch] / m);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let row = (b * c + ch) * sp;
                                for s in 0..sp {
                                    buf[row + s] += gam[ch] * inv_std[ch] * g[row + s];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input).values();
                self.bump(adjoint, *input, |buf| {
                    for i in 0..x.len() {
                        if x[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::L2Normalize { input, raw_norm } => {
                let x = self.value(*input).values();
                let denom = raw_norm.max(NORM_EPSILON);
                self.bump(adjoint, *input, |buf| {
                    if *raw_norm > NORM_EPSILON {
                        let gy: f64 = g.iter().zip(x).map(|(gi, xi)| gi * xi).sum::<f64>()
                            / (denom * denom);
                        for i in 0..x.len() {
                            buf[i] += (g[i] - gy * x[i]) / denom;
                        }
                    } else {
                        for i in 0..x.len() {
                            buf[i] += g[i] / denom;
                        }
                    }
                });
            }
            Op::SoftmaxTemp { input, temperature } => {
                let w = self.nodes[index].value.values();
                let inner: f64 = g.iter().zip(w).map(|(gi, wi)| gi * wi).sum();
                self.bump(adjoint, *input, |buf| {
                    for i in 0..w.len() {
                        buf[i] += w[i] * (g[i] - inner) / temperature;
                    }
                });
            }
            Op::CosineSimMap { exemplar, target, ex_raw_norm, patch_raw_norms } => {
                self.backward_cosine_map(index, *exemplar, *target, *ex_raw_norm, patch_raw_norms, g, adjoint);
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                self.bump(adjoint, *a, |buf| {
                    for i in 0..bv.len() {
                        buf[i] += g0 * bv[i];
                    }
                });
                self.bump(adjoint, *b, |buf| {
                    for i in 0..av.len() {
                        buf[i] += g0 * av[i];
                    }
                });
            }
            Op::Add { a, b } => {
                self.bump(adjoint, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                });
                self.bump(adjoint, *b, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                self.bump(adjoint, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                self.bump(adjoint, *b, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Affine { input, scale } => {
                self.bump(adjoint, *input, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * scale;
                    }
                });
            }
            Op::Square { input } => {
                let x = self.value(*input).values();
                self.bump(adjoint, *input, |buf| {
                    for i in 0..g.len() {
                        buf[i] += 2.0 * x[i] * g[i];
                    }
                });
            }
            Op::Sum { input } => {
                let g0 = g[0];
                self.bump(adjoint, *input, |buf| {
                    for v in buf.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::Reshape { input } => {
                self.bump(adjoint, *input, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_cosine_map(
        &self,
        index: usize,
        exemplar: Var,
        target: Var,
        ex_raw_norm: f64,
        patch_raw_norms: &[f64],
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        let ex_shape = self.value(exemplar).shape();
        let tg_shape = self.value(target).shape();
        let scores = self.nodes[index].value.values();
        let ex = self.value(exemplar).values();
        let tg = self.value(target).values();
        let c = ex_shape[0];
        let ex_den = ex_raw_norm.max(NORM_EPSILON);

        // With s_p = dot_p / (|e| * |t_p|):
        //   ds/de  = t_p / (|e| |t_p|) - s_p * e / |e|^2
        //   ds/dt_p = e / (|e| |t_p|) - s_p * t_p / |t_p|^2
        // where the second terms vanish under the epsilon guard.
        let mut grad_ex = vec![0.0; ex.len()];
        let mut grad_tg = vec![0.0; tg.len()];
        let mut ex_self_coeff = 0.0;

        // 1-D maps onto the 2-D walk with a singleton leading spatial axis.
        let spatial = ex_shape.len() - 1;
        let (pos, eh, ew, th, tw) = match spatial {
            1 => (vec![1, tg_shape[1] - ex_shape[1] + 1], 1, ex_shape[1], 1, tg_shape[1]),
            2 => (
                vec![tg_shape[1] - ex_shape[1] + 1, tg_shape[2] - ex_shape[2] + 1],
                ex_shape[1],
                ex_shape[2],
                tg_shape[1],
                tg_shape[2],
            ),
            _ => unreachable!(),
        };
        let pxs = pos[1];
        let total: usize = pos.iter().product();

        for p in 0..total {
            let (py, px) = (p / pxs, p % pxs);
            let gp = g[p];
            if gp == 0.0 {
                continue;
            }
            let patch_den = patch_raw_norms[p].max(NORM_EPSILON);
            let inv = 1.0 / (ex_den * patch_den);
            let patch_self = if patch_raw_norms[p] > NORM_EPSILON {
                scores[p] / (patch_raw_norms[p] * patch_raw_norms[p])
            } else {
                0.0
            };
            if ex_raw_norm > NORM_EPSILON {
                ex_self_coeff += gp * scores[p] / (ex_raw_norm * ex_raw_norm);
            }
            for ch in 0..c {
                for dy in 0..eh {
                    let er = (ch * eh + dy) * ew;
                    let tr = (ch * th + py + dy) * tw + px;
                    for dx in 0..ew {
                        let t = tg[tr + dx];
                        let e = ex[er + dx];
                        grad_ex[er + dx] += gp * inv * t;
                        grad_tg[tr + dx] += gp * (inv * e - patch_self * t);
                    }
                }
            }
        }
        if ex_self_coeff != 0.0 {
            for (ge, e) in grad_ex.iter_mut().zip(ex) {
                *ge -= ex_self_coeff * e;
            }
        }

        self.bump(adjoint, exemplar, |buf| {
            for i in 0..buf.len() {
                buf[i] += grad_ex[i];
            }
        });
        self.bump(adjoint, target, |buf| {
            for i in 0..buf.len() {
                buf[i] += grad_tg[i];
            }
        });
    }
}
