use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{PanError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    SpatialSoftmax(Var),
    ChannelSoftmax(Var),
    Attend {
        feature: Var,
        alpha: Var,
    },
    SpatialSum(Var),
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<f32>,
    },
    NllOfProbability {
        prob: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Stabiliser inside `nll_of_probability`.
pub const NLL_EPSILON: f32 = 1e-12;

/// Linear record of a forward computation.
///
/// Every node is appended after its inputs, so reverse index order is a valid
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is tracked (parameters, inputs under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by [`Tape::backward`]; `None` for unreachable nodes.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zero-filled when the node was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (k, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c {
            return Err(PanError::config(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(PanError::config(format!(
                "conv2d: kernel {kh}×{kw} must have odd extents"
            )));
        }
        if stride == 0 {
            return Err(PanError::config("conv2d: stride must be at least 1"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(PanError::config(format!(
                    "conv2d: bias shape {:?} does not match {k} kernels",
                    self.value(b).shape()
                )));
            }
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(PanError::config(format!(
                "conv2d: {h}×{w} input with kernel {kh}×{kw}, pad {pad}, stride {stride} has no exact output extent"
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        };
        let mut out = vec![0.0; n * k * geom.out_len()];
        kernels::conv2d_forward(
            &geom,
            n,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            k,
            &mut out,
        );
        let value = Tensor::new(&[n, k, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if window == 0 || stride == 0 || h < window || w < window {
            return Err(PanError::config(format!(
                "maxpool2d: window {window}, stride {stride} invalid for {h}×{w}"
            )));
        }
        if (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(PanError::config(format!(
                "maxpool2d: {h}×{w} is not divisible into windows of {window} with stride {stride}"
            )));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = vec![0.0; n * c * oh * ow];
        let argmax =
            kernels::maxpool_forward(self.value(input).data(), n * c, h, w, window, stride, &mut out);
        let rg = self.needs(&[input]);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// `input (N×D) · weight (D×E) + bias (E)`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        let (wd, e) = self.value(weight).dims2()?;
        if wd != d {
            return Err(PanError::config(format!(
                "fully_connected: input width {d} does not match weight rows {wd}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [e] {
                return Err(PanError::config(format!(
                    "fully_connected: bias shape {:?} does not match width {e}",
                    self.value(b).shape()
                )));
            }
        }
        let mut out = vec![0.0; n * e];
        kernels::gemm(
            n,
            d,
            e,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(e) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        let value = Tensor::new(&[n, e], out)?;
        Ok(self.push(
            value,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| sigmoid(v)).collect())
            .expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// Softmax over the H×W grid of every (sample, channel) plane.
    pub fn spatial_softmax(&mut self, scores: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(scores).dims4()?;
        let plane = h * w;
        let mut out = self.value(scores).data().to_vec();
        for chunk in out.chunks_mut(plane) {
            softmax_in_place(chunk);
        }
        let rg = self.needs(&[scores]);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::SpatialSoftmax(scores), rg))
    }

    /// Softmax across channels at each location of an N×C×H×W tensor, or
    /// across columns of an N×C matrix.
    pub fn channel_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, plane) = channel_layout(x.shape())?;
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; c];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                for ch in 0..c {
                    buf[ch] = src[base + ch * plane + p];
                }
                softmax_in_place(&mut buf);
                for ch in 0..c {
                    out[base + ch * plane + p] = buf[ch];
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::ChannelSoftmax(input), rg))
    }

    /// Gates every channel of `feature` by the single-channel map `alpha`.
    pub fn attend(&mut self, feature: Var, alpha: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(feature).dims4()?;
        let (an, ac, ah, aw) = self.value(alpha).dims4()?;
        if (an, ac, ah, aw) != (n, 1, h, w) {
            return Err(PanError::config(format!(
                "attend: feature {:?} cannot be gated by map {:?}",
                self.value(feature).shape(),
                self.value(alpha).shape()
            )));
        }
        let plane = h * w;
        let f = self.value(feature).data();
        let a = self.value(alpha).data();
        let mut out = vec![0.0; f.len()];
        for s in 0..n {
            let gate = &a[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for ((o, &fv), &g) in out[base..base + plane]
                    .iter_mut()
                    .zip(&f[base..base + plane])
                    .zip(gate)
                {
                    *o = g * fv;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.needs(&[feature, alpha]);
        Ok(self.push(value, Op::Attend { feature, alpha }, rg))
    }

    /// Sums each channel over its spatial grid: N×C×H×W → N×C.
    pub fn spatial_sum(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let out = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum())
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::SpatialSum(input), rg))
    }

    /// Adds a per-sample channel vector (N×C) to every location of N×C×H×W.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [n, c] {
            return Err(PanError::config(format!(
                "add_channel_bias: bias {:?} does not match {n}×{c}",
                self.value(bias).shape()
            )));
        }
        let plane = h * w;
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[idx];
            for v in chunk {
                *v += bv;
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.needs(&[input, bias]);
        Ok(self.push(value, Op::AddChannelBias { input, bias }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(PanError::config(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum() as f32;
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        check_labels(labels, n, k)?;
        let mut softmax = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (row, &label) in softmax.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let log_norm = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += log_norm - (row[label] - max) as f64;
            softmax_in_place(row);
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            rg,
        ))
    }

    /// Mean over the batch of `-log(prob[label] + ε)` for rows that are
    /// already normalised distributions.
    pub fn nll_of_probability(&mut self, prob: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(prob).dims2()?;
        check_labels(labels, n, k)?;
        let p = self.value(prob).data();
        for (r, row) in p.chunks(k).enumerate() {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-4 {
                return Err(PanError::numeric(format!(
                    "nll_of_probability: row {r} is not a distribution (sum {total})"
                )));
            }
        }
        let loss: f64 = p
            .chunks(k)
            .zip(labels)
            .map(|(row, &l)| -((row[l] + NLL_EPSILON) as f64).ln())
            .sum();
        let value = Tensor::scalar((loss / n as f64) as f32);
        let rg = self.needs(&[prob]);
        Ok(self.push(
            value,
            Op::NllOfProbability {
                prob,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(PanError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    /// Gradient buffer for `v`, created zeroed on first use, or `None` when
    /// `v` does not track gradients.
    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f32>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&mut self, v: Var, contribution: impl FnOnce(&Tape) -> Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let delta = contribution(self);
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            None => node.grad = Some(delta),
            Some(slot) => slot.iter_mut().zip(delta).for_each(|(s, d)| *s += d),
        }
    }

    fn propagate(&mut self, idx: usize, dout: &[f32]) {
        // The op is temporarily moved out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let n = self.value(*input).shape()[0];
                let k = self.value(*weight).shape()[0];
                let want_dx = self.nodes[input.0].requires_grad;
                let want_dw = self.nodes[weight.0].requires_grad;
                let want_db = bias.is_some_and(|b| self.nodes[b.0].requires_grad);
                let mut dx = want_dx.then(|| vec![0.0; self.value(*input).numel()]);
                let mut dw = want_dw.then(|| vec![0.0; self.value(*weight).numel()]);
                let mut db = want_db.then(|| vec![0.0; k]);
                kernels::conv2d_backward(
                    geom,
                    n,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    k,
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(*input, |_| dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(*weight, |_| dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    self.accumulate(*b, |_| db);
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(slot) = self.grad_slot(*input) {
                    for (&src, &g) in argmax.iter().zip(dout) {
                        slot[src as usize] += g;
                    }
                }
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let (n, d) = self.value(*input).dims2().expect("2-D");
                let e = self.value(*weight).shape()[1];
                self.accumulate(*input, |t| {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, e, d, dout, false, t.value(*weight).data(), true, &mut dx, false);
                    dx
                });
                self.accumulate(*weight, |t| {
                    let mut dw = vec![0.0; d * e];
                    kernels::gemm(d, n, e, t.value(*input).data(), true, dout, false, &mut dw, false);
                    dw
                });
                if let Some(b) = bias {
                    self.accumulate(*b, |_| {
                        let mut db = vec![0.0; e];
                        for row in dout.chunks(e) {
                            for (acc, &g) in db.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        db
                    });
                }
            }
            Op::Relu(input) => {
                let mask: Vec<f32> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(*input, |_| mask);
            }
            Op::Sigmoid(input) => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<f32> = y.iter().zip(dout).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                self.accumulate(*input, |_| dx);
            }
            Op::SpatialSoftmax(input) => {
                let y = self.nodes[idx].value.data();
                let plane = {
                    let s = self.nodes[idx].value.shape();
                    s[2] * s[3]
                };
                let mut dx = vec![0.0; y.len()];
                for ((dxp, yp), gp) in dx.chunks_mut(plane).zip(y.chunks(plane)).zip(dout.chunks(plane)) {
                    let dot: f32 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &g) in dxp.iter_mut().zip(yp).zip(gp) {
                        *d = yv * (g - dot);
                    }
                }
                self.accumulate(*input, |_| dx);
            }
            Op::ChannelSoftmax(input) => {
                let value = &self.nodes[idx].value;
                let (n, c, plane) = channel_layout(value.shape()).expect("validated");
                let y = value.data();
                let mut dx = vec![0.0; y.len()];
                for s in 0..n {
                    let base = s * c * plane;
                    for p in 0..plane {
                        let dot: f32 = (0..c)
                            .map(|ch| y[base + ch * plane + p] * dout[base + ch * plane + p])
                            .sum();
                        for ch in 0..c {
                            let at = base + ch * plane + p;
                            dx[at] = y[at] * (dout[at] - dot);
                        }
                    }
                }
                self.accumulate(*input, |_| dx);
            }
            Op::Attend { feature, alpha } => {
                let (n, c, h, w) = self.value(*feature).dims4().expect("4-D");
                let plane = h * w;
                self.accumulate(*feature, |t| {
                    let a = t.value(*alpha).data();
                    let mut df = vec![0.0; n * c * plane];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for p in 0..plane {
                                df[base + p] = a[s * plane + p] * dout[base + p];
                            }
                        }
                    }
                    df
                });
                self.accumulate(*alpha, |t| {
                    let f = t.value(*feature).data();
                    let mut da = vec![0.0; n * plane];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for p in 0..plane {
                                da[s * plane + p] += f[base + p] * dout[base + p];
                            }
                        }
                    }
                    da
                });
            }
            Op::SpatialSum(input) => {
                let s = self.value(*input).shape();
                let plane = s[2] * s[3];
                let dx: Vec<f32> = dout
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, plane))
                    .collect();
                self.accumulate(*input, |_| dx);
            }
            Op::AddChannelBias { input, bias } => {
                let s = self.value(*input).shape();
                let plane = s[2] * s[3];
                self.accumulate(*input, |_| dout.to_vec());
                self.accumulate(*bias, |_| {
                    dout.chunks(plane).map(|p| p.iter().sum()).collect()
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |t| {
                    t.value(b).data().iter().zip(dout).map(|(x, g)| x * g).collect()
                });
                self.accumulate(b, |t| {
                    t.value(a).data().iter().zip(dout).map(|(x, g)| x * g).collect()
                });
            }
            Op::Sum(input) => {
                let g = dout[0];
                let len = self.value(*input).numel();
                self.accumulate(*input, |_| vec![g; len]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let n = labels.len();
                let k = softmax.len() / n;
                let scale = dout[0] / n as f32;
                let mut dx: Vec<f32> = softmax.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= scale;
                }
                self.accumulate(*logits, |_| dx);
            }
            Op::NllOfProbability { prob, labels } => {
                let n = labels.len();
                let k = self.value(*prob).numel() / n;
                let scale = dout[0] / n as f32;
                self.accumulate(*prob, |t| {
                    let p = t.value(*prob).data();
                    let mut dx = vec![0.0; n * k];
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * k + l] = -scale / (p[r * k + l] + NLL_EPSILON);
                    }
                    dx
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a contiguous slice.
pub(crate) fn softmax_in_place(values: &mut [f32]) {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(PanError::config(format!(
            "channel softmax needs a 2-D or 4-D tensor, got {shape:?}"
        ))),
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(PanError::config(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(PanError::data(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}
