//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every forward operation appends a node to the [`Tape`]; node creation
//! order is a topological order, so the backward pass is a single reverse
//! sweep that visits each node exactly once. Gradients accumulate into
//! per-node buffers and never alias tensor values.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: VarId,
        w: VarId,
        padding: usize,
    },
    MaxPool2d {
        x: VarId,
        window: usize,
        stride: usize,
    },
    AdaptiveAvgPool {
        x: VarId,
    },
    InstanceNorm {
        x: VarId,
        scale: VarId,
        shift: VarId,
        eps: f64,
    },
    /// Normalized by the batch statistics recorded here at forward time.
    BatchNormTrain {
        x: VarId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    /// Normalized by fixed running statistics (treated as constants).
    BatchNormInfer {
        x: VarId,
        var: Vec<f64>,
        eps: f64,
    },
    Relu {
        x: VarId,
    },
    Tanh {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        c: f64,
    },
    Sum {
        x: VarId,
    },
    Reshape {
        x: VarId,
    },
    Narrow {
        x: VarId,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: VarId,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of operations from leaves to a loss.
///
/// Replayable: the backward pass is a pure function of the recorded
/// nodes, so repeated calls produce bit-identical gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Whether batch normalization consumes batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel running mean/variance buffers for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Fresh buffers: mean 0, variance 1.
    pub fn init(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record a leaf value (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Leaf of the given shape with every slot equal to `v`.
    pub fn filled(&mut self, shape: &[usize], v: f64) -> VarId {
        self.leaf(Tensor::filled(shape, v))
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    // ---- forward operations -------------------------------------------------

    /// 2-D convolution with bias, `stride >= 1`, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d input channels {} do not match kernel channels {}",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(format!(
                "conv2d bias shape {bs:?} does not match {} output channels",
                ws[0]
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        let (k_h, k_w) = (ws[2], ws[3]);
        if k_h > xs[2] + 2 * padding || k_w > xs[3] + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {k_h}x{k_w} exceeds padded input {}x{}",
                xs[2] + 2 * padding,
                xs[3] + 2 * padding
            )));
        }
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            Some(self.value(b)),
            stride,
            padding,
            false,
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel (depthwise) 2-D convolution, stride 1, kernel shape (C,1,K,K).
    pub fn depthwise_conv2d(&mut self, x: VarId, w: VarId, padding: usize) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != 1 {
            return Err(Error::dim(format!(
                "depthwise_conv2d expects x rank 4 and kernel (C,1,K,K), got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "depthwise_conv2d channels {} do not match kernel channels {}",
                xs[1], ws[0]
            )));
        }
        if ws[2] > xs[2] + 2 * padding || ws[3] > xs[3] + 2 * padding {
            return Err(Error::dim("depthwise_conv2d kernel exceeds padded input"));
        }
        let out = conv2d_forward(self.value(x), self.value(w), None, 1, padding, true);
        Ok(self.push(out, Op::DepthwiseConv2d { x, w, padding }))
    }

    /// 2-D max pooling; gradient routes to the first maximal slot of each window.
    pub fn max_pool2d(&mut self, x: VarId, window: usize, stride: usize) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("max_pool2d expects rank-4 input"));
        }
        if window == 0 || stride == 0 {
            return Err(Error::contract("max_pool2d window and stride must be >= 1"));
        }
        if xs[2] < window || xs[3] < window {
            return Err(Error::dim(format!(
                "max_pool2d window {window} exceeds spatial dims {}x{}",
                xs[2], xs[3]
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nn in 0..n {
            for cc in 0..c {
                let plane = (nn * c + cc) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for u in 0..window {
                            let row = plane + (i * stride + u) * w + j * stride;
                            for v in 0..window {
                                let val = xv[row + v];
                                if val > best {
                                    best = val;
                                }
                            }
                        }
                        out[((nn * c + cc) * oh + i) * ow + j] = best;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, window, stride }))
    }

    /// Adaptive average pooling over all axes jointly.
    ///
    /// Output index i along an axis of n_out slots averages input slots
    /// [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)); the pooled region is
    /// the cartesian product of the per-axis ranges.
    pub fn adaptive_avg_pool(&mut self, x: VarId, out_shape: &[usize]) -> Result<VarId> {
        let in_shape = self.value(x).shape().to_vec();
        if out_shape.len() != in_shape.len() {
            return Err(Error::dim(format!(
                "adaptive_avg_pool rank mismatch: input {in_shape:?}, requested {out_shape:?}"
            )));
        }
        for (o, i) in out_shape.iter().zip(&in_shape) {
            if *o == 0 {
                return Err(Error::dim("adaptive_avg_pool output extent must be positive"));
            }
            if o > i {
                return Err(Error::dim(format!(
                    "adaptive_avg_pool output extent {o} exceeds input extent {i}"
                )));
            }
        }
        let data = adaptive_avg_pool_forward(self.value(x), out_shape);
        let t = Tensor::new(out_shape.to_vec(), data)?;
        Ok(self.push(t, Op::AdaptiveAvgPool { x }))
    }

    /// Per-channel normalization of a (C,H,W) tensor with learnable affine.
    pub fn instance_norm(
        &mut self,
        x: VarId,
        scale: VarId,
        shift: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::dim("instance_norm expects a (C,H,W) tensor"));
        }
        let c = xs[0];
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::dim("instance_norm scale/shift must have shape (C)"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("instance_norm eps must be positive"));
        }
        let m = xs[1] * xs[2];
        if m == 0 {
            return Err(Error::dim("instance_norm needs a non-empty spatial plane"));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let bv = self.value(shift).data();
        let mut out = vec![0.0; xv.len()];
        for cc in 0..c {
            let plane = &xv[cc * m..(cc + 1) * m];
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (slot, v) in plane.iter().enumerate() {
                out[cc * m + slot] = sv[cc] * (v - mean) * inv + bv[cc];
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            t,
            Op::InstanceNorm {
                x,
                scale,
                shift,
                eps,
            },
        ))
    }

    /// Batch normalization without learnable affine over a (N,C,H,W) tensor.
    ///
    /// Train mode normalizes by batch statistics and folds them into the
    /// running buffers via `running = (1-momentum)*running + momentum*batch`;
    /// infer mode normalizes by the running buffers as constants.
    pub fn batch_norm2d(
        &mut self,
        x: VarId,
        stats: &mut RunningStats,
        mode: NormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("batch_norm2d expects a (N,C,H,W) tensor"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("batch_norm2d eps must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm2d running stats have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let m = n * h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        match mode {
            NormMode::Train => {
                if m < 2 {
                    return Err(Error::contract(
                        "batch_norm2d train mode needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for cc in 0..c {
                    let mut sum = 0.0;
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        sum += xv[base..base + h * w].iter().sum::<f64>();
                    }
                    let mu = sum / m as f64;
                    let mut sq = 0.0;
                    for nn in 0..n {
                        for v in &xv[(nn * c + cc) * h * w..(nn * c + cc + 1) * h * w] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[cc] = mu;
                    var[cc] = sq / m as f64;
                }
                for cc in 0..c {
                    let inv = 1.0 / (var[cc] + eps).sqrt();
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        for slot in 0..h * w {
                            out[base + slot] = (xv[base + slot] - mean[cc]) * inv;
                        }
                    }
                }
                for cc in 0..c {
                    stats.mean[cc] = (1.0 - momentum) * stats.mean[cc] + momentum * mean[cc];
                    stats.var[cc] = (1.0 - momentum) * stats.var[cc] + momentum * var[cc];
                }
                let t = Tensor::new(xs, out)?;
                Ok(self.push(t, Op::BatchNormTrain { x, mean, var, eps }))
            }
            NormMode::Infer => {
                for cc in 0..c {
                    let inv = 1.0 / (stats.var[cc] + eps).sqrt();
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        for slot in 0..h * w {
                            out[base + slot] = (xv[base + slot] - stats.mean[cc]) * inv;
                        }
                    }
                }
                let t = Tensor::new(xs, out)?;
                Ok(self.push(
                    t,
                    Op::BatchNormInfer {
                        x,
                        var: stats.var.clone(),
                        eps,
                    },
                ))
            }
        }
    }

    /// Elementwise max(0, x); subgradient at 0 is 0.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let t = self.value(x).clone();
        let (shape, data) = t.into_parts();
        let out: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
        self.push(Tensor::new(shape, out).unwrap(), Op::Relu { x })
    }

    pub fn tanh_act(&mut self, x: VarId) -> VarId {
        let t = self.value(x).clone();
        let (shape, data) = t.into_parts();
        let out: Vec<f64> = data.iter().map(|v| v.tanh()).collect();
        self.push(Tensor::new(shape, out).unwrap(), Op::Tanh { x })
    }

    /// Elementwise sum of two same-shape tensors; no broadcasting.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product of two same-shape tensors; no broadcasting.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: VarId,
        b: VarId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(VarId, VarId) -> Op,
    ) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, op(a, b)))
    }

    /// Multiply every slot by the constant `c`.
    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale { x, c })
    }

    /// Sum of all slots, as a scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim(format!(
                "reshape from {:?} to {shape:?} changes element count",
                self.value(x).shape()
            )));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape { x }))
    }

    /// Slice `len` slots starting at `start` along `axis`.
    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let in_shape = self.value(x).shape().to_vec();
        if axis >= in_shape.len() {
            return Err(Error::dim(format!(
                "narrow axis {axis} out of range for shape {in_shape:?}"
            )));
        }
        if start + len > in_shape[axis] || len == 0 {
            return Err(Error::dim(format!(
                "narrow [{start}, {start}+{len}) out of range for extent {}",
                in_shape[axis]
            )));
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_shape[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, axis, start }))
    }

    /// Negative log softmax probability of `label`, computed with
    /// max-subtraction for stability.
    pub fn cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 1 {
            return Err(Error::dim("cross_entropy expects rank-1 logits"));
        }
        if label >= ls[0] {
            return Err(Error::contract(format!(
                "cross_entropy label {label} out of range for {} classes",
                ls[0]
            )));
        }
        let lv = self.value(logits).data();
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// reachable node. Unreached leaves read back as zero.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        id: VarId,
    ) -> &'g mut Vec<f64> {
        let numel = self.value(id).numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn accumulate_inputs(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    self.nodes[id].value.shape(),
                    *stride,
                    *padding,
                    false,
                );
                add_into(self.grad_buf(grads, *x), &dx);
                add_into(self.grad_buf(grads, *w), &dw);
                add_into(self.grad_buf(grads, *b), &db);
            }
            Op::DepthwiseConv2d { x, w, padding } => {
                let (dx, dw, _) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    self.nodes[id].value.shape(),
                    1,
                    *padding,
                    true,
                );
                add_into(self.grad_buf(grads, *x), &dx);
                add_into(self.grad_buf(grads, *w), &dw);
            }
            Op::MaxPool2d { x, window, stride } => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = self.nodes[id].value.shape();
                let (oh, ow) = (os[2], os[3]);
                let xv = self.value(*x).data();
                let dx = self.grad_buf(grads, *x);
                for nn in 0..n {
                    for cc in 0..c {
                        let plane = (nn * c + cc) * h * w;
                        for i in 0..oh {
                            for j in 0..ow {
                                // first occurrence wins on ties
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for u in 0..*window {
                                    let row = plane + (i * stride + u) * w + j * stride;
                                    for v in 0..*window {
                                        if xv[row + v] > best {
                                            best = xv[row + v];
                                            arg = row + v;
                                        }
                                    }
                                }
                                dx[arg] += dy[((nn * c + cc) * oh + i) * ow + j];
                            }
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool { x } => {
                let in_shape = self.value(*x).shape().to_vec();
                let out_shape = self.nodes[id].value.shape().to_vec();
                let dx = self.grad_buf(grads, *x);
                pool_regions(&in_shape, &out_shape, |out_idx, region, count| {
                    let share = dy[out_idx] / count as f64;
                    for slot in region {
                        dx[*slot] += share;
                    }
                });
            }
            Op::InstanceNorm {
                x,
                scale,
                shift,
                eps,
            } => {
                let xs = self.value(*x).shape();
                let (c, m) = (xs[0], xs[1] * xs[2]);
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for cc in 0..c {
                    let plane = &xv[cc * m..(cc + 1) * m];
                    let dyp = &dy[cc * m..(cc + 1) * m];
                    let mean = plane.iter().sum::<f64>() / m as f64;
                    let var =
                        plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for slot in 0..m {
                        let xhat = (plane[slot] - mean) * inv;
                        let dxhat = dyp[slot] * sv[cc];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dscale[cc] += dyp[slot] * xhat;
                        dshift[cc] += dyp[slot];
                    }
                    for slot in 0..m {
                        let xhat = (plane[slot] - mean) * inv;
                        let dxhat = dyp[slot] * sv[cc];
                        dx[cc * m + slot] = inv
                            * (dxhat - sum_dxhat / m as f64 - xhat * sum_dxhat_xhat / m as f64);
                    }
                }
                add_into(self.grad_buf(grads, *x), &dx);
                add_into(self.grad_buf(grads, *scale), &dscale);
                add_into(self.grad_buf(grads, *shift), &dshift);
            }
            Op::BatchNormTrain { x, mean, var, eps } => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let m = n * h * w;
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; xv.len()];
                for cc in 0..c {
                    let inv = 1.0 / (var[cc] + eps).sqrt();
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        for slot in 0..h * w {
                            let xhat = (xv[base + slot] - mean[cc]) * inv;
                            sum_dy += dy[base + slot];
                            sum_dy_xhat += dy[base + slot] * xhat;
                        }
                    }
                    for nn in 0..n {
                        let base = (nn * c + cc) * h * w;
                        for slot in 0..h * w {
                            let xhat = (xv[base + slot] - mean[cc]) * inv;
                            dx[base + slot] = inv
                                * (dy[base + slot]
                                    - sum_dy / m as f64
                                    - xhat * sum_dy_xhat / m as f64);
                        }
                    }
                }
                add_into(self.grad_buf(grads, *x), &dx);
            }
            Op::BatchNormInfer { x, var, eps } => {
                let xs = self.value(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let dx = self.grad_buf(grads, *x);
                for cc in 0..c {
                    let inv = 1.0 / (var[cc] + eps).sqrt();
                    for nn in 0..n {
                        let base = (nn * c + cc) * hw;
                        for slot in 0..hw {
                            dx[base + slot] += dy[base + slot] * inv;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = self.grad_buf(grads, *x);
                for (slot, v) in xv.iter().enumerate() {
                    if *v > 0.0 {
                        dx[slot] += dy[slot];
                    }
                }
            }
            Op::Tanh { x } => {
                let yv = self.nodes[id].value.data();
                let dx = self.grad_buf(grads, *x);
                for (slot, y) in yv.iter().enumerate() {
                    dx[slot] += dy[slot] * (1.0 - y * y);
                }
            }
            Op::Add { a, b } => {
                add_into(self.grad_buf(grads, *a), dy);
                add_into(self.grad_buf(grads, *b), dy);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let da = self.grad_buf(grads, *a);
                    for slot in 0..dy.len() {
                        da[slot] += dy[slot] * bv[slot];
                    }
                }
                let db = self.grad_buf(grads, *b);
                for slot in 0..dy.len() {
                    db[slot] += dy[slot] * av[slot];
                }
            }
            Op::Scale { x, c } => {
                let dx = self.grad_buf(grads, *x);
                for slot in 0..dy.len() {
                    dx[slot] += dy[slot] * c;
                }
            }
            Op::Sum { x } => {
                let dx = self.grad_buf(grads, *x);
                for slot in dx.iter_mut() {
                    *slot += dy[0];
                }
            }
            Op::Reshape { x } => {
                add_into(self.grad_buf(grads, *x), dy);
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.value(*x).shape().to_vec();
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = out_shape[*axis];
                let dx = self.grad_buf(grads, *x);
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * in_shape[*axis] + start) * inner;
                    for slot in 0..len * inner {
                        dx[dst + slot] += dy[src + slot];
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                let lv = self.value(*logits).data();
                let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = lv.iter().map(|v| (v - max).exp()).sum();
                let dl = self.grad_buf(grads, *logits);
                for (slot, v) in lv.iter().enumerate() {
                    let soft = (v - max).exp() / denom;
                    let onehot = if slot == *label { 1.0 } else { 0.0 };
                    dl[slot] += dy[0] * (soft - onehot);
                }
            }
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zero-filled when the
    /// node was not reached.
    pub fn get(&self, tape: &Tape, id: VarId) -> Tensor {
        let shape = tape.value(id).shape();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Shared convolution kernel loop. With `depthwise` the kernel has shape
/// (C,1,K,K) and channel c of the input convolves with kernel channel c.
fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let c_out = ws[0];
    let (k_h, k_w) = (ws[2], ws[3]);
    let oh = (h + 2 * padding - k_h) / stride + 1;
    let ow = (wd + 2 * padding - k_w) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * c_out * oh * ow];
    // 1x1 kernels with unit stride and no padding reduce to a channel-mixing
    // matrix applied independently at every spatial site; stream whole planes.
    if k_h == 1 && k_w == 1 && stride == 1 && padding == 0 && !depthwise {
        let hw = h * wd;
        for nn in 0..n {
            for o in 0..c_out {
                let bias = b.map_or(0.0, |t| t.data()[o]);
                let oplane = &mut out[(nn * c_out + o) * hw..(nn * c_out + o + 1) * hw];
                oplane.fill(bias);
                for cc in 0..c_in {
                    let woc = wv[o * c_in + cc];
                    let xplane = &xv[(nn * c_in + cc) * hw..(nn * c_in + cc + 1) * hw];
                    for (ov, xvp) in oplane.iter_mut().zip(xplane) {
                        *ov += woc * xvp;
                    }
                }
            }
        }
        return Tensor::new(vec![n, c_out, oh, ow], out).unwrap();
    }
    // 3x3 same-padding stride-1 kernels (every generated body kernel and the
    // derivative's depthwise pass) via three shifted contiguous row passes.
    if k_h == 3 && k_w == 3 && stride == 1 && padding == 1 {
        let mut rowbuf = vec![0.0; wd];
        for nn in 0..n {
            for o in 0..c_out {
                let bias = b.map_or(0.0, |t| t.data()[o]);
                let (c_lo, c_n) = if depthwise { (o, 1) } else { (0, c_in) };
                for i in 0..h {
                    rowbuf.fill(bias);
                    for wc in 0..c_n {
                        let cc = c_lo + wc;
                        let xbase = (nn * c_in + cc) * h * wd;
                        let wbase = (o * ws[1] + wc) * 9;
                        let u_lo = usize::from(i == 0);
                        let u_hi = if i + 1 == h { 2 } else { 3 };
                        for u in u_lo..u_hi {
                            let xrow = &xv[xbase + (i + u - 1) * wd..][..wd];
                            let w0 = wv[wbase + u * 3];
                            let w1 = wv[wbase + u * 3 + 1];
                            let w2 = wv[wbase + u * 3 + 2];
                            for (ov, xvp) in rowbuf[1..].iter_mut().zip(&xrow[..wd - 1]) {
                                *ov += w0 * xvp;
                            }
                            for (ov, xvp) in rowbuf.iter_mut().zip(xrow) {
                                *ov += w1 * xvp;
                            }
                            for (ov, xvp) in rowbuf[..wd - 1].iter_mut().zip(&xrow[1..]) {
                                *ov += w2 * xvp;
                            }
                        }
                    }
                    out[((nn * c_out + o) * h + i) * wd..][..wd].copy_from_slice(&rowbuf);
                }
            }
        }
        return Tensor::new(vec![n, c_out, oh, ow], out).unwrap();
    }
    for nn in 0..n {
        for o in 0..c_out {
            let bias = b.map_or(0.0, |t| t.data()[o]);
            let (c_lo, c_n) = if depthwise { (o, 1) } else { (0, c_in) };
            for i in 0..oh {
                let ix0 = (i * stride) as isize - padding as isize;
                let u_lo = (-ix0).max(0) as usize;
                let u_hi = ((h as isize - ix0).min(k_h as isize)).max(0) as usize;
                for j in 0..ow {
                    let jx0 = (j * stride) as isize - padding as isize;
                    let vlo = (-jx0).max(0) as usize;
                    let vhi = ((wd as isize - jx0).min(k_w as isize)).max(0) as usize;
                    let mut acc = bias;
                    if vlo < vhi {
                        for wc in 0..c_n {
                            let cc = c_lo + wc;
                            for u in u_lo..u_hi {
                                let ix = (ix0 + u as isize) as usize;
                                let xrow =
                                    ((nn * c_in + cc) * h + ix) * wd + (jx0 + vlo as isize) as usize;
                                let wrow = ((o * ws[1] + wc) * k_h + u) * k_w + vlo;
                                let mut dot = 0.0;
                                for v in 0..vhi - vlo {
                                    dot += xv[xrow + v] * wv[wrow + v];
                                }
                                acc += dot;
                            }
                        }
                    }
                    out[((nn * c_out + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &[f64],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let c_out = ws[0];
    let (k_h, k_w) = (ws[2], ws[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let xv = x.data();
    let wv = w.data();
    let mut dx = vec![0.0; xv.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; c_out];
    // mirror of the forward 1x1 fast path: per-plane streaming accumulation
    if k_h == 1 && k_w == 1 && stride == 1 && padding == 0 && !depthwise {
        let hw = h * wd;
        for nn in 0..n {
            for o in 0..c_out {
                let gplane = &dy[(nn * c_out + o) * hw..(nn * c_out + o + 1) * hw];
                db[o] += gplane.iter().sum::<f64>();
                for cc in 0..c_in {
                    let woc = wv[o * c_in + cc];
                    let xbase = (nn * c_in + cc) * hw;
                    let xplane = &xv[xbase..xbase + hw];
                    let dxplane = &mut dx[xbase..xbase + hw];
                    let mut wacc = 0.0;
                    for ((g, xvp), dxp) in gplane.iter().zip(xplane).zip(dxplane) {
                        wacc += g * xvp;
                        *dxp += g * woc;
                    }
                    dw[o * c_in + cc] += wacc;
                }
            }
        }
        return (dx, dw, db);
    }
    // mirror of the forward 3x3 same-padding path: shifted contiguous row passes
    if k_h == 3 && k_w == 3 && stride == 1 && padding == 1 {
        for nn in 0..n {
            for o in 0..c_out {
                let (c_lo, c_n) = if depthwise { (o, 1) } else { (0, c_in) };
                for i in 0..h {
                    let grow = &dy[((nn * c_out + o) * h + i) * wd..][..wd];
                    db[o] += grow.iter().sum::<f64>();
                    for wc in 0..c_n {
                        let cc = c_lo + wc;
                        let xbase = (nn * c_in + cc) * h * wd;
                        let wbase = (o * ws[1] + wc) * 9;
                        let u_lo = usize::from(i == 0);
                        let u_hi = if i + 1 == h { 2 } else { 3 };
                        for u in u_lo..u_hi {
                            let rbase = xbase + (i + u - 1) * wd;
                            let xrow = &xv[rbase..][..wd];
                            let w0 = wv[wbase + u * 3];
                            let w1 = wv[wbase + u * 3 + 1];
                            let w2 = wv[wbase + u * 3 + 2];
                            let mut a0 = 0.0;
                            let mut a1 = 0.0;
                            let mut a2 = 0.0;
                            let dxrow = &mut dx[rbase..][..wd];
                            for ((g, xvp), dxp) in
                                grow[1..].iter().zip(&xrow[..wd - 1]).zip(dxrow.iter_mut())
                            {
                                a0 += g * xvp;
                                *dxp += g * w0;
                            }
                            for ((g, xvp), dxp) in grow.iter().zip(xrow).zip(dxrow.iter_mut()) {
                                a1 += g * xvp;
                                *dxp += g * w1;
                            }
                            for ((g, xvp), dxp) in
                                grow[..wd - 1].iter().zip(&xrow[1..]).zip(dxrow[1..].iter_mut())
                            {
                                a2 += g * xvp;
                                *dxp += g * w2;
                            }
                            dw[wbase + u * 3] += a0;
                            dw[wbase + u * 3 + 1] += a1;
                            dw[wbase + u * 3 + 2] += a2;
                        }
                    }
                }
            }
        }
        return (dx, dw, db);
    }
    for nn in 0..n {
        for o in 0..c_out {
            let (c_lo, c_n) = if depthwise { (o, 1) } else { (0, c_in) };
            for i in 0..oh {
                let ix0 = (i * stride) as isize - padding as isize;
                let u_lo = (-ix0).max(0) as usize;
                let u_hi = ((h as isize - ix0).min(k_h as isize)).max(0) as usize;
                for j in 0..ow {
                    let g = dy[((nn * c_out + o) * oh + i) * ow + j];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let jx0 = (j * stride) as isize - padding as isize;
                    let vlo = (-jx0).max(0) as usize;
                    let vhi = ((wd as isize - jx0).min(k_w as isize)).max(0) as usize;
                    if vlo >= vhi {
                        continue;
                    }
                    for wc in 0..c_n {
                        let cc = c_lo + wc;
                        for u in u_lo..u_hi {
                            let ix = (ix0 + u as isize) as usize;
                            let xrow =
                                ((nn * c_in + cc) * h + ix) * wd + (jx0 + vlo as isize) as usize;
                            let wrow = ((o * ws[1] + wc) * k_h + u) * k_w + vlo;
                            for v in 0..vhi - vlo {
                                dw[wrow + v] += g * xv[xrow + v];
                                dx[xrow + v] += g * wv[wrow + v];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn adaptive_avg_pool_forward(x: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let xv = x.data();
    pool_regions(x.shape(), out_shape, |out_idx, region, count| {
        let mut sum = 0.0;
        for slot in region {
            sum += xv[*slot];
        }
        out[out_idx] = sum / count as f64;
    });
    out
}

/// Walk every output cell of an adaptive pool, handing the callback the
/// flat input indices of the pooled region.
fn pool_regions(
    in_shape: &[usize],
    out_shape: &[usize],
    mut visit: impl FnMut(usize, &[usize], usize),
) {
    let rank = in_shape.len();
    let in_strides = strides_of(in_shape);
    let out_numel: usize = out_shape.iter().product();
    let mut starts = vec![0usize; rank];
    let mut ends = vec![0usize; rank];
    let mut coord = vec![0usize; rank];
    let mut region = Vec::new();
    let mut out_coord = vec![0usize; rank];
    for out_idx in 0..out_numel {
        // decode the output coordinate
        let mut rem = out_idx;
        for d in (0..rank).rev() {
            out_coord[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut count = 1usize;
        for d in 0..rank {
            starts[d] = out_coord[d] * in_shape[d] / out_shape[d];
            ends[d] = ((out_coord[d] + 1) * in_shape[d]).div_ceil(out_shape[d]);
            count *= ends[d] - starts[d];
        }
        region.clear();
        coord.copy_from_slice(&starts);
        'odometer: loop {
            let mut flat = 0;
            for d in 0..rank {
                flat += coord[d] * in_strides[d];
            }
            region.push(flat);
            let mut d = rank;
            loop {
                if d == 0 {
                    break 'odometer;
                }
                d -= 1;
                coord[d] += 1;
                if coord[d] < ends[d] {
                    break;
                }
                coord[d] = starts[d];
            }
        }
        visit(out_idx, &region, count);
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Check analytic gradients of a scalar-valued tape program against
    /// central differences (h = 1e-6) at every coordinate of every leaf.
    pub(crate) fn gradcheck(leaves: &[Tensor], build: impl Fn(&mut Tape, &[VarId]) -> VarId) {
        gradcheck_tol(leaves, build, 1e-5);
    }

    pub(crate) fn gradcheck_tol(
        leaves: &[Tensor],
        build: impl Fn(&mut Tape, &[VarId]) -> VarId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|id| grads.get(&tape, *id)).collect();

        let eval = |ts: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss).scalar_value().unwrap()
        };

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for slot in 0..leaf.numel() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[slot] += h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[slot] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[li].data()[slot];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "gradient mismatch at leaf {li} slot {slot}: analytic {a}, numeric {numeric}"
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{gradcheck, gradcheck_tol};
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn at4(t: &Tensor, n: usize, c: usize, i: usize, j: usize) -> f64 {
        let s = t.shape();
        t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j]
    }

    /// Straight transcription of the convolution sum, one term at a time,
    /// with explicit bounds checks instead of slice arithmetic.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, padding: usize) -> Tensor {
        let (n, c_in, h, wd) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (c_out, k_h, k_w) = {
            let s = w.shape();
            (s[0], s[2], s[3])
        };
        let oh = (h + 2 * padding - k_h) / stride + 1;
        let ow = (wd + 2 * padding - k_w) / stride + 1;
        let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
        for nn in 0..n {
            for o in 0..c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for cc in 0..c_in {
                            for u in 0..k_h {
                                for v in 0..k_w {
                                    let ih = (i * stride + u) as isize - padding as isize;
                                    let iw = (j * stride + v) as isize - padding as isize;
                                    if ih >= 0 && ih < h as isize && iw >= 0 && iw < wd as isize {
                                        acc += at4(x, nn, cc, ih as usize, iw as usize)
                                            * at4(w, o, cc, u, v);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((nn * c_out + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv2d_matches_naive_oracle_on_random_cases() {
        for trial in 0..20u64 {
            let mut r = rng(trial);
            let n = r.gen_range(1..=2);
            let c_in = r.gen_range(1..=3);
            let c_out = r.gen_range(1..=3);
            let h = r.gen_range(3..=8);
            let wd = r.gen_range(3..=8);
            let k = *[1usize, 3].get(r.gen_range(0..2)).unwrap();
            let stride = r.gen_range(1..=2);
            let padding = r.gen_range(0..=2);
            let x = Tensor::randn(&[n, c_in, h, wd], 1.0, &mut r);
            let w = Tensor::randn(&[c_out, c_in, k, k], 1.0, &mut r);
            let b = Tensor::randn(&[c_out], 1.0, &mut r);
            let expected = conv_oracle(&x, &w, b.data(), stride, padding);
            let mut tape = Tape::new();
            let (xi, wi, bi) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
            let y = tape.conv2d(xi, wi, bi, stride, padding).unwrap();
            assert!(
                max_abs_diff(tape.value(y), &expected) <= 1e-12,
                "trial {trial} diverged from the naive oracle"
            );
        }
    }

    proptest! {
        #[test]
        fn conv2d_matches_oracle_prop(
            seed in any::<u64>(),
            n in 1usize..3,
            c_in in 1usize..3,
            c_out in 1usize..3,
            h in 2usize..7,
            wd in 2usize..7,
            k in 1usize..4,
            stride in 1usize..3,
            padding in 0usize..3,
        ) {
            prop_assume!(k <= h + 2 * padding && k <= wd + 2 * padding);
            let mut r = rng(seed);
            let x = Tensor::randn(&[n, c_in, h, wd], 1.0, &mut r);
            let w = Tensor::randn(&[c_out, c_in, k, k], 1.0, &mut r);
            let b = Tensor::randn(&[c_out], 1.0, &mut r);
            let expected = conv_oracle(&x, &w, b.data(), stride, padding);
            let mut tape = Tape::new();
            let (xi, wi, bi) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
            let y = tape.conv2d(xi, wi, bi, stride, padding).unwrap();
            prop_assert!(max_abs_diff(tape.value(y), &expected) <= 1e-12);
        }

        #[test]
        fn adaptive_pool_preserves_global_mean(
            seed in any::<u64>(),
            c in 1usize..4,
            h in 1usize..7,
            wd in 1usize..7,
        ) {
            let mut r = rng(seed);
            let x = Tensor::randn(&[c, h, wd], 1.0, &mut r);
            let mean = x.data().iter().sum::<f64>() / x.numel() as f64;
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let y = tape.adaptive_avg_pool(xi, &[1, 1, 1]).unwrap();
            prop_assert!((tape.value(y).data()[0] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv2d_delta_kernel_preserves_input() {
        let mut r = rng(7);
        let x = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut r);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(k);
        let bi = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
        assert!(max_abs_diff(tape.value(y), &x) <= 1e-15);
    }

    #[test]
    fn conv2d_ones_kernel_counts_window_overlap() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 1, 5, 5], 1.0);
        let wi = tape.filled(&[1, 1, 3, 3], 1.0);
        let bi = tape.filled(&[1], 0.0);
        let y = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
        // padded ones: corners see 4 taps, edges 6, interior 9
        assert_eq!(at4(tape.value(y), 0, 0, 0, 0), 4.0);
        assert_eq!(at4(tape.value(y), 0, 0, 0, 2), 6.0);
        assert_eq!(at4(tape.value(y), 0, 0, 2, 2), 9.0);
    }

    #[test]
    fn conv2d_output_shape_follows_stride_and_padding() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 1, 8, 8], 0.0);
        let wi = tape.filled(&[1, 1, 3, 3], 0.0);
        let bi = tape.filled(&[1], 0.0);
        let y = tape.conv2d(xi, wi, bi, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 1, 4, 4]);
        let xi = tape.filled(&[1, 1, 5, 5], 0.0);
        let y = tape.conv2d(xi, wi, bi, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 1, 2, 2]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 2, 4, 4], 0.0);
        let wi = tape.filled(&[1, 3, 3, 3], 0.0);
        let bi = tape.filled(&[1], 0.0);
        let err = tape.conv2d(xi, wi, bi, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "got {err:?}");
    }

    #[test]
    fn conv2d_zero_stride_is_contract_error() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 1, 4, 4], 0.0);
        let wi = tape.filled(&[1, 1, 3, 3], 0.0);
        let bi = tape.filled(&[1], 0.0);
        let err = tape.conv2d(xi, wi, bi, 0, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn depthwise_matches_per_channel_full_conv() {
        let mut r = rng(11);
        let x = Tensor::randn(&[1, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 1, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let y = tape.depthwise_conv2d(xi, wi, 1).unwrap();
        for cc in 0..3 {
            let xc = Tensor::new(
                vec![1, 1, 5, 5],
                (0..25).map(|s| at4(&x, 0, cc, s / 5, s % 5)).collect(),
            )
            .unwrap();
            let wc = Tensor::new(
                vec![1, 1, 3, 3],
                (0..9).map(|s| at4(&w, cc, 0, s / 3, s % 3)).collect(),
            )
            .unwrap();
            let expected = conv_oracle(&xc, &wc, &[0.0], 1, 1);
            for i in 0..5 {
                for j in 0..5 {
                    let got = at4(tape.value(y), 0, cc, i, j);
                    assert!((got - at4(&expected, 0, 0, i, j)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_matches_scan_oracle() {
        let mut r = rng(3);
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.max_pool2d(xi, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), [2, 2, 3, 3]);
        for nn in 0..2 {
            for cc in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        let m = at4(&x, nn, cc, 2 * i, 2 * j)
                            .max(at4(&x, nn, cc, 2 * i, 2 * j + 1))
                            .max(at4(&x, nn, cc, 2 * i + 1, 2 * j))
                            .max(at4(&x, nn, cc, 2 * i + 1, 2 * j + 1));
                        assert_eq!(at4(tape.value(y), nn, cc, i, j), m);
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_ties_route_gradient_to_first_slot() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 1, 2, 2], 5.0);
        let y = tape.max_pool2d(xi, 2, 2).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&tape, xi).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_window_larger_than_input_is_error() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 1, 1, 3], 0.0);
        assert!(matches!(
            tape.max_pool2d(xi, 2, 2),
            Err(Error::Dimension(_))
        ));
    }

    fn pool_bounds(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        (i * n_in / n_out, ((i + 1) * n_in + n_out - 1) / n_out)
    }

    #[test]
    fn adaptive_pool_matches_region_oracle_rank3() {
        let mut r = rng(5);
        let x = Tensor::randn(&[3, 7, 5], 1.0, &mut r);
        let out_shape = [2usize, 3, 2];
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.adaptive_avg_pool(xi, &out_shape).unwrap();
        let is = [3usize, 7, 5];
        for a in 0..out_shape[0] {
            let (a0, a1) = pool_bounds(a, is[0], out_shape[0]);
            for b in 0..out_shape[1] {
                let (b0, b1) = pool_bounds(b, is[1], out_shape[1]);
                for c in 0..out_shape[2] {
                    let (c0, c1) = pool_bounds(c, is[2], out_shape[2]);
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for ia in a0..a1 {
                        for ib in b0..b1 {
                            for ic in c0..c1 {
                                sum += x.data()[(ia * is[1] + ib) * is[2] + ic];
                                count += 1;
                            }
                        }
                    }
                    let got = tape.value(y).data()
                        [(a * out_shape[1] + b) * out_shape[2] + c];
                    assert!((got - sum / count as f64).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_overlapping_regions_one_dim() {
        // 5 slots into 3: regions {0,1}, {1,2,3}, {3,4}
        let x = Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.adaptive_avg_pool(xi, &[3]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 3.0, 4.5]);
    }

    #[test]
    fn adaptive_pool_same_shape_is_identity() {
        let mut r = rng(9);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.adaptive_avg_pool(xi, &[2, 3, 4]).unwrap();
        assert!(max_abs_diff(tape.value(y), &x) <= 1e-15);
    }

    #[test]
    fn adaptive_pool_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[2, 3, 4], 0.0);
        assert!(matches!(
            tape.adaptive_avg_pool(xi, &[2, 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            tape.adaptive_avg_pool(xi, &[2, 0, 4]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            tape.adaptive_avg_pool(xi, &[2, 5, 4]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn instance_norm_normalizes_each_channel() {
        let mut r = rng(13);
        let x = Tensor::randn(&[3, 4, 5], 2.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let si = tape.filled(&[3], 1.0);
        let bi = tape.filled(&[3], 0.0);
        let y = tape.instance_norm(xi, si, bi, 1e-12).unwrap();
        let yv = tape.value(y).data();
        for cc in 0..3 {
            let plane = &yv[cc * 20..(cc + 1) * 20];
            let mean = plane.iter().sum::<f64>() / 20.0;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
            assert!(mean.abs() <= 1e-12, "channel {cc} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-9, "channel {cc} var {var}");
        }
    }

    #[test]
    fn instance_norm_affine_is_scale_then_shift() {
        let mut r = rng(17);
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let s1 = tape.filled(&[2], 1.0);
        let b0 = tape.filled(&[2], 0.0);
        let plain = tape.instance_norm(xi, s1, b0, 1e-5).unwrap();
        let xi2 = tape.leaf(x);
        let s3 = tape.filled(&[2], 3.0);
        let bm1 = tape.filled(&[2], -1.0);
        let affine = tape.instance_norm(xi2, s3, bm1, 1e-5).unwrap();
        for (p, a) in tape
            .value(plain)
            .data()
            .to_vec()
            .iter()
            .zip(tape.value(affine).data())
        {
            assert!((3.0 * p - 1.0 - a).abs() <= 1e-12);
        }
    }

    #[test]
    fn instance_norm_empty_plane_is_error() {
        let mut tape = Tape::new();
        let xi = tape.leaf(Tensor::zeros(&[2, 0, 3]));
        let si = tape.filled(&[2], 1.0);
        let bi = tape.filled(&[2], 0.0);
        assert!(matches!(
            tape.instance_norm(xi, si, bi, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let mut stats = RunningStats::init(1);
        let y = tape
            .batch_norm2d(xi, &mut stats, NormMode::Train, 0.1, 1e-5)
            .unwrap();
        // batch mean 4, biased variance 5
        let inv = 1.0 / (5.0f64 + 1e-5).sqrt();
        let expected: Vec<f64> = [1.0, 3.0, 5.0, 7.0].iter().map(|v| (v - 4.0) * inv).collect();
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-12);
        }
        assert!((stats.mean[0] - 0.4).abs() <= 1e-12);
        assert!((stats.var[0] - 1.4).abs() <= 1e-12);
    }

    #[test]
    fn batch_norm_infer_uses_running_stats_unchanged() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let mut stats = RunningStats {
            mean: vec![2.0],
            var: vec![4.0],
        };
        let y = tape
            .batch_norm2d(xi, &mut stats, NormMode::Infer, 0.1, 1e-5)
            .unwrap();
        let inv = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] - 0.0).abs() <= 1e-12);
        assert!((tape.value(y).data()[1] - 4.0 * inv).abs() <= 1e-12);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![4.0]);
    }

    #[test]
    fn batch_norm_train_needs_at_least_two_values() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[1, 1, 1, 1], 0.5);
        let mut stats = RunningStats::init(1);
        assert!(matches!(
            tape.batch_norm2d(xi, &mut stats, NormMode::Train, 0.1, 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relu_values_and_zero_subgradient_at_zero() {
        let mut tape = Tape::new();
        let xi = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(xi);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&tape, xi).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tanh_gradient_matches_fd_tightly() {
        gradcheck_tol(
            &[Tensor::scalar(0.3)],
            |tape, ids| {
                let y = tape.tanh_act(ids[0]);
                tape.sum(y)
            },
            1e-7,
        );
    }

    #[test]
    fn mul_sum_gradient_is_other_factor() {
        let mut r = rng(23);
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let p = tape.mul(xi, wi).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&tape, wi).data(), x.data());
        assert_eq!(grads.get(&tape, xi).data(), w.data());
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[5], 0.7);
        let s1 = tape.sum(xi);
        let s2 = tape.sum(xi);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&tape, xi).data(), &[2.0; 5]);
    }

    #[test]
    fn diamond_graph_accumulates_through_both_paths() {
        // z = x + x, loss = sum(z * z) => d/dx = 8x
        let mut r = rng(29);
        let x = Tensor::randn(&[6], 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let z = tape.add(xi, xi).unwrap();
        let zz = tape.mul(z, z).unwrap();
        let loss = tape.sum(zz);
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads.get(&tape, xi).data().iter().zip(x.data()) {
            assert!((g - 8.0 * v).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_replayable_bitwise() {
        let mut r = rng(31);
        let mut tape = Tape::new();
        let xi = tape.leaf(Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r));
        let wi = tape.leaf(Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r));
        let bi = tape.leaf(Tensor::randn(&[3], 0.5, &mut r));
        let c = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
        let a = tape.relu(c);
        let p = tape.max_pool2d(a, 2, 2).unwrap();
        let loss = tape.sum(p);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for id in [xi, wi, bi] {
            assert_eq!(g1.raw(id).unwrap(), g2.raw(id).unwrap());
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let xi = tape.filled(&[3], 1.0);
        assert!(matches!(tape.backward(xi), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_reads_back_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.filled(&[2], 1.0);
        let unused = tape.filled(&[4], 1.0);
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.raw(unused).is_none());
        assert_eq!(grads.get(&tape, unused).data(), &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let li = tape.filled(&[7], 0.0);
        let loss = tape.cross_entropy(li, 3).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - (7.0f64).ln()).abs() <= 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(&tape, li);
        for (slot, v) in g.data().iter().enumerate() {
            let want = if slot == 3 { 1.0 / 7.0 - 1.0 } else { 1.0 / 7.0 };
            assert!((v - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let logits = vec![0.2, -1.3, 0.9, 2.4];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![4], logits).unwrap());
        let b = tape.leaf(Tensor::new(vec![4], shifted).unwrap());
        let la = tape.cross_entropy(a, 2).unwrap();
        let lb = tape.cross_entropy(b, 2).unwrap();
        let va = tape.value(la).scalar_value().unwrap();
        let vb = tape.value(lb).scalar_value().unwrap();
        assert!((va - vb).abs() <= 1e-12);
        assert!(va.is_finite());
    }

    #[test]
    fn cross_entropy_label_out_of_range_is_error() {
        let mut tape = Tape::new();
        let li = tape.filled(&[4], 0.0);
        assert!(matches!(
            tape.cross_entropy(li, 4),
            Err(Error::Contract(_))
        ));
    }

    // ---- finite-difference sweeps, 20 seeded trials per op ------------------

    /// Weight the output by a deterministic random tensor so the check
    /// exercises every output coordinate independently.
    fn weighted_sum(tape: &mut Tape, y: VarId, seed: u64) -> VarId {
        let shape = tape.value(y).shape().to_vec();
        let mut r = rng(seed ^ 0x5EED_CAFE);
        let w = tape.leaf(Tensor::randn(&shape, 1.0, &mut r));
        let m = tape.mul(y, w).unwrap();
        tape.sum(m)
    }

    #[test]
    fn gradcheck_conv2d() {
        for trial in 0..20u64 {
            let mut r = rng(trial);
            let stride = 1 + (trial % 2) as usize;
            let padding = (trial % 3) as usize;
            let leaves = [
                Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r),
                Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r),
                Tensor::randn(&[2], 1.0, &mut r),
            ];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], stride, padding).unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_depthwise_conv2d() {
        for trial in 0..20u64 {
            let mut r = rng(100 + trial);
            let leaves = [
                Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r),
                Tensor::randn(&[3, 1, 3, 3], 1.0, &mut r),
            ];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.depthwise_conv2d(ids[0], ids[1], 1).unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_max_pool2d() {
        for trial in 0..20u64 {
            let mut r = rng(200 + trial);
            // well-separated values keep the argmax stable under perturbation
            let vals: Vec<f64> = (0..72).map(|_| r.gen_range(0.0..100.0)).collect();
            let leaves = [Tensor::new(vec![1, 2, 6, 6], vals).unwrap()];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.max_pool2d(ids[0], 2, 2).unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_adaptive_avg_pool() {
        for trial in 0..20u64 {
            let mut r = rng(300 + trial);
            let leaves = [Tensor::randn(&[2, 3, 7, 5], 1.0, &mut r)];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.adaptive_avg_pool(ids[0], &[2, 3, 3, 2]).unwrap();
                weighted_sum(tape, y, trial)
            });
            let mut r = rng(1300 + trial);
            let leaves = [Tensor::randn(&[4, 6, 6], 1.0, &mut r)];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.adaptive_avg_pool(ids[0], &[4, 1, 1]).unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_instance_norm() {
        for trial in 0..20u64 {
            let mut r = rng(400 + trial);
            let leaves = [
                Tensor::randn(&[2, 3, 4], 1.0, &mut r),
                Tensor::randn(&[2], 0.5, &mut r),
                Tensor::randn(&[2], 0.5, &mut r),
            ];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.instance_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_batch_norm_train() {
        for trial in 0..20u64 {
            let mut r = rng(500 + trial);
            let leaves = [Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r)];
            gradcheck(&leaves, move |tape, ids| {
                let mut stats = RunningStats::init(2);
                let y = tape
                    .batch_norm2d(ids[0], &mut stats, NormMode::Train, 0.1, 1e-5)
                    .unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_batch_norm_infer() {
        for trial in 0..20u64 {
            let mut r = rng(600 + trial);
            let leaves = [Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r)];
            let mean = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let var = vec![r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)];
            gradcheck(&leaves, move |tape, ids| {
                let mut stats = RunningStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                let y = tape
                    .batch_norm2d(ids[0], &mut stats, NormMode::Infer, 0.1, 1e-5)
                    .unwrap();
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_relu_away_from_kink() {
        for trial in 0..20u64 {
            let mut r = rng(700 + trial);
            let vals: Vec<f64> = (0..24)
                .map(|_| {
                    let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * r.gen_range(0.1..2.0)
                })
                .collect();
            let leaves = [Tensor::new(vec![4, 6], vals).unwrap()];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.relu(ids[0]);
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_tanh() {
        for trial in 0..20u64 {
            let mut r = rng(800 + trial);
            let leaves = [Tensor::randn(&[3, 5], 1.0, &mut r)];
            gradcheck(&leaves, move |tape, ids| {
                let y = tape.tanh_act(ids[0]);
                weighted_sum(tape, y, trial)
            });
        }
    }

    #[test]
    fn gradcheck_elementwise_and_shape_ops() {
        for trial in 0..20u64 {
            let mut r = rng(900 + trial);
            let leaves = [
                Tensor::randn(&[2, 6], 1.0, &mut r),
                Tensor::randn(&[2, 6], 1.0, &mut r),
            ];
            gradcheck(&leaves, move |tape, ids| {
                let s = tape.add(ids[0], ids[1]).unwrap();
                let p = tape.mul(s, ids[1]).unwrap();
                let sc = tape.scale(p, -1.7);
                let rs = tape.reshape(sc, &[3, 4]).unwrap();
                let nr = tape.narrow(rs, 0, 1, 2).unwrap();
                weighted_sum(tape, nr, trial)
            });
        }
    }

    #[test]
    fn gradcheck_cross_entropy() {
        for trial in 0..20u64 {
            let mut r = rng(1000 + trial);
            let label = (trial % 5) as usize;
            let leaves = [Tensor::randn(&[5], 2.0, &mut r)];
            gradcheck(&leaves, move |tape, ids| {
                tape.cross_entropy(ids[0], label).unwrap()
            });
        }
    }

    #[test]
    fn narrow_extracts_expected_rows() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.narrow(xi, 0, 1, 2).unwrap();
        assert_eq!(tape.value(y).shape(), [2, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
        let z = tape.narrow(xi, 1, 1, 1).unwrap();
        assert_eq!(tape.value(z).data(), &[2.0, 4.0, 6.0]);
        assert!(matches!(tape.narrow(xi, 0, 2, 2), Err(Error::Dimension(_))));
    }
}
