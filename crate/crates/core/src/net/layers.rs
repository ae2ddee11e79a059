//! Layer kernels: im2col convolution, batch norm, pooling, fully-connected,
//! and their quantized variants with straight-through weight gradients.

use rayon::prelude::*;

use crate::activations::{
    activation_backward_input, grad_beta, grad_v, init_activation_state,
    init_activation_state_auto,
    quantize_activations_forward, ActivationQuantizerState,
};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Tensor};
use crate::weights::{
    quantize_weights_forward, weight_backward, WeightPiecewise, WeightQuantizerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight-quantization policy for a conv or FC layer. `Pa` carries both base
/// counts so a layer knows its paired activation width for export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantPolicy {
    Real,
    Pa { m: usize, n: usize },
    SignBinary,
}

/// Four-way accumulator dot product; fixed association order keeps results
/// reproducible while letting the compiler vectorize.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Patch rows for one sample: `buf[p * k ..]` holds the receptive field of
/// output position `p` in `(channel, ky, kx)` order, zeros where the window
/// hangs over the border.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xs: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    buf: &mut [f32],
) {
    let k = cin * kh * kw;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut buf[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for c in 0..cin {
                for i in 0..kh {
                    let y = (oy * stride + i) as isize - pad as isize;
                    let base = (c * kh + i) * kw;
                    if y < 0 || y >= h as isize {
                        row[base..base + kw].fill(0.0);
                        continue;
                    }
                    let src = (c * h + y as usize) * w;
                    for j in 0..kw {
                        let x = (ox * stride + j) as isize - pad as isize;
                        row[base + j] = if x >= 0 && x < w as isize {
                            xs[src + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of patch-row gradients back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    buf: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gx: &mut [f32],
) {
    let k = cin * kh * kw;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &buf[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for c in 0..cin {
                for i in 0..kh {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = (c * h + y as usize) * w;
                    let base = (c * kh + i) * kw;
                    for j in 0..kw {
                        let x = (ox * stride + j) as isize - pad as isize;
                        if x >= 0 && x < w as isize {
                            gx[dst + x as usize] += row[base + j];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let [n, cin, h, win] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if stride == 0 {
        return Err(Error::InvalidConfig("conv stride must be >= 1".into()));
    }
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "conv input has {cin} channels but weights expect {wcin}"
        )));
    }
    if kh > h + 2 * pad || kw > win + 2 * pad {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            win + 2 * pad
        )));
    }
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(win, kw, stride, pad);
    Ok((n, cin, h, win, cout, kh, kw, ho, wo))
}

/// Dense cross-correlation, parallel over samples.
pub fn conv_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, win, cout, kh, kw, ho, wo) = conv_geometry(x, w, stride, pad)?;
    let (k, p) = (cin * kh * kw, ho * wo);
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(cout * p)
        .zip(x.data().par_chunks(cin * h * win))
        .for_each(|(os, xs)| {
            let mut patches = vec![0.0f32; p * k];
            im2col(xs, cin, h, win, kh, kw, stride, pad, ho, wo, &mut patches);
            for co in 0..cout {
                let wrow = &wdata[co * k..(co + 1) * k];
                for (pi, o) in os[co * p..(co + 1) * p].iter_mut().enumerate() {
                    *o = dot(&patches[pi * k..(pi + 1) * k], wrow);
                }
            }
        });
    Ok(out)
}

/// Input and weight gradients. Patch matrices are rebuilt rather than cached;
/// per-sample weight gradients are reduced in sample order so results do not
/// depend on thread scheduling.
pub fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, cin, h, win, cout, kh, kw, ho, wo) = conv_geometry(x, w, stride, pad)?;
    if grad_out.shape() != [n, cout, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "conv grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            [n, cout, ho, wo]
        )));
    }
    let (k, p) = (cin * kh * kw, ho * wo);
    let mut grad_in = Tensor::zeros(x.shape());
    let wdata = w.data();
    let per_sample: Vec<Vec<f32>> = grad_in
        .data_mut()
        .par_chunks_mut(cin * h * win)
        .zip(x.data().par_chunks(cin * h * win))
        .zip(grad_out.data().par_chunks(cout * p))
        .map(|((gxs, xs), gos)| {
            let mut patches = vec![0.0f32; p * k];
            im2col(xs, cin, h, win, kh, kw, stride, pad, ho, wo, &mut patches);
            let mut gpatches = vec![0.0f32; p * k];
            let mut gw = vec![0.0f32; cout * k];
            for co in 0..cout {
                let wrow = &wdata[co * k..(co + 1) * k];
                let gwrow = &mut gw[co * k..(co + 1) * k];
                for (pi, &g) in gos[co * p..(co + 1) * p].iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let prow = &patches[pi * k..(pi + 1) * k];
                    let gprow = &mut gpatches[pi * k..(pi + 1) * k];
                    for ((gwv, gpv), (pv, wv)) in gwrow
                        .iter_mut()
                        .zip(gprow.iter_mut())
                        .zip(prow.iter().zip(wrow))
                    {
                        *gwv += g * pv;
                        *gpv += g * wv;
                    }
                }
            }
            col2im_add(&gpatches, cin, h, win, kh, kw, stride, pad, ho, wo, gxs);
            gw
        })
        .collect();
    let mut grad_w = Tensor::zeros(w.shape());
    for gw in &per_sample {
        for (a, b) in grad_w.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
    }
    Ok((grad_in, grad_w))
}

/// Quantizes master weights according to a policy, refreshing `wq` for the
/// piecewise case so the backward pass can reuse the identical fit.
fn forward_weights(
    weight: &Tensor,
    policy: QuantPolicy,
    lambda_w: f32,
    wq: &mut Option<WeightPiecewise>,
) -> Result<Tensor> {
    match policy {
        QuantPolicy::Real => Ok(weight.clone()),
        QuantPolicy::Pa { m, .. } => {
            let config = WeightQuantizerConfig::new(m, lambda_w)?;
            let (wp, _) = WeightPiecewise::fit(&config, weight)?;
            let wbar = quantize_weights_forward(weight, &wp);
            *wq = Some(wp);
            Ok(wbar)
        }
        QuantPolicy::SignBinary => Ok(weight.map(|x| if x >= 0.0 { 1.0 } else { -1.0 })),
    }
}

/// Maps a gradient w.r.t. quantized weights onto the master weights.
fn master_weight_grad(
    grad_wbar: Tensor,
    weight: &Tensor,
    policy: QuantPolicy,
    lambda_w: f32,
    wq: &Option<WeightPiecewise>,
) -> Result<Tensor> {
    match policy {
        // Sign binarization uses the identity straight-through estimate.
        QuantPolicy::Real | QuantPolicy::SignBinary => Ok(grad_wbar),
        QuantPolicy::Pa { .. } => {
            let wp = wq
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("backward before forward".into()))?;
            weight_backward(&grad_wbar, weight, wp, lambda_w)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvOp {
    pub weight: Tensor,
    pub grad_weight: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub policy: QuantPolicy,
    pub lambda_w: f32,
    pub wq: Option<WeightPiecewise>,
}

impl ConvOp {
    pub fn new(weight: Tensor, stride: usize, pad: usize, policy: QuantPolicy, lambda_w: f32) -> Self {
        let grad_weight = Tensor::zeros(weight.shape());
        Self {
            weight,
            grad_weight,
            stride,
            pad,
            policy,
            lambda_w,
            wq: None,
        }
    }

    pub fn quantized_weights(&mut self) -> Result<Tensor> {
        forward_weights(&self.weight, self.policy, self.lambda_w, &mut self.wq)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let wbar = self.quantized_weights()?;
        conv_forward(x, &wbar, self.stride, self.pad)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let wbar = self.quantized_weights()?;
        let (grad_in, grad_wbar) = conv_backward(x, &wbar, grad_out, self.stride, self.pad)?;
        let gw = master_weight_grad(grad_wbar, &self.weight, self.policy, self.lambda_w, &self.wq)?;
        for (a, b) in self.grad_weight.data_mut().iter_mut().zip(gw.data()) {
            *a += b;
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub struct FcOp {
    /// `[out, in, 1, 1]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub grad_weight: Tensor,
    pub grad_bias: Vec<f32>,
    pub policy: QuantPolicy,
    pub lambda_w: f32,
    pub wq: Option<WeightPiecewise>,
}

impl FcOp {
    pub fn new(weight: Tensor, bias: Vec<f32>, policy: QuantPolicy, lambda_w: f32) -> Self {
        let grad_weight = Tensor::zeros(weight.shape());
        let grad_bias = vec![0.0; bias.len()];
        Self {
            weight,
            bias,
            grad_weight,
            grad_bias,
            policy,
            lambda_w,
            wq: None,
        }
    }

    pub fn quantized_weights(&mut self) -> Result<Tensor> {
        forward_weights(&self.weight, self.policy, self.lambda_w, &mut self.wq)
    }

    fn features(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let [outs, ins, _, _] = self.weight.shape();
        let n = x.shape()[0];
        let feats = if n == 0 { ins } else { x.len() / n };
        if feats != ins {
            return Err(Error::ShapeMismatch(format!(
                "fc input has {feats} features but weights expect {ins}"
            )));
        }
        Ok((n, ins, outs))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, ins, outs) = self.features(x)?;
        let wbar = self.quantized_weights()?;
        let wdata = wbar.data();
        let mut out = Tensor::zeros([n, outs, 1, 1]);
        let od = out.data_mut();
        for s in 0..n {
            let xs = &x.data()[s * ins..(s + 1) * ins];
            for o in 0..outs {
                od[s * outs + o] = self.bias[o] + dot(xs, &wdata[o * ins..(o + 1) * ins]);
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (n, ins, outs) = self.features(x)?;
        if grad_out.shape() != [n, outs, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "fc grad shape {:?} does not match output [{n}, {outs}, 1, 1]",
                grad_out.shape()
            )));
        }
        let wbar = self.quantized_weights()?;
        let wdata = wbar.data();
        let mut grad_in = Tensor::zeros(x.shape());
        let mut grad_wbar = Tensor::zeros(self.weight.shape());
        let gwd = grad_wbar.data_mut();
        let gid = grad_in.data_mut();
        for s in 0..n {
            let xs = &x.data()[s * ins..(s + 1) * ins];
            let gxs = &mut gid[s * ins..(s + 1) * ins];
            for o in 0..outs {
                let g = grad_out.data()[s * outs + o];
                if g == 0.0 {
                    continue;
                }
                self.grad_bias[o] += g;
                let wrow = &wdata[o * ins..(o + 1) * ins];
                let gwrow = &mut gwd[o * ins..(o + 1) * ins];
                for ((gi, gw), (xv, wv)) in gxs
                    .iter_mut()
                    .zip(gwrow.iter_mut())
                    .zip(xs.iter().zip(wrow))
                {
                    *gi += g * wv;
                    *gw += g * xv;
                }
            }
        }
        let gw = master_weight_grad(grad_wbar, &self.weight, self.policy, self.lambda_w, &self.wq)?;
        for (a, b) in self.grad_weight.data_mut().iter_mut().zip(gw.data()) {
            *a += b;
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub struct BnOp {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub grad_gamma: Vec<f32>,
    pub grad_beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BnOp {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let [n, c, h, w] = x.shape();
        if c != self.gamma.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch norm over {} channels fed {c}",
                self.gamma.len()
            )));
        }
        if n * h * w == 0 {
            return Err(Error::EmptyTensor("batch norm needs at least one element".into()));
        }
        Ok((n, c, h * w))
    }

    /// Per-channel batch mean and (population) variance.
    fn batch_stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let xs = &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                mean[ch] += xs.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for s in 0..n {
            for ch in 0..c {
                let xs = &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                var[ch] += xs.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        (mean, var)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, hw) = self.check(x)?;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let (mean, var) = self.batch_stats(x);
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch] as f32;
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] as f32;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.iter().map(|&v| v as f64).collect(),
                self.running_var.iter().map(|&v| v as f64).collect(),
            ),
        };
        let mut out = Tensor::zeros(x.shape());
        let od = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let inv = (self.gamma[ch] as f64) / (var[ch] + self.eps as f64).sqrt();
                let shift = self.beta[ch] as f64 - mean[ch] * inv;
                let base = (s * c + ch) * hw;
                for (o, &v) in od[base..base + hw].iter_mut().zip(&x.data()[base..base + hw]) {
                    *o = (v as f64 * inv + shift) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Backward through batch statistics (training mode).
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (n, c, hw) = self.check(x)?;
        if grad_out.shape() != x.shape() {
            return Err(Error::ShapeMismatch("batch norm grad shape".into()));
        }
        let (mean, var) = self.batch_stats(x);
        let count = (n * hw) as f64;
        let mut sum_g = vec![0f64; c];
        let mut sum_gx = vec![0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let inv = 1.0 / (var[ch] + self.eps as f64).sqrt();
                for (g, &v) in grad_out.data()[base..base + hw].iter().zip(&x.data()[base..base + hw]) {
                    let xhat = (v as f64 - mean[ch]) * inv;
                    sum_g[ch] += *g as f64;
                    sum_gx[ch] += *g as f64 * xhat;
                }
            }
        }
        for ch in 0..c {
            self.grad_gamma[ch] += sum_gx[ch] as f32;
            self.grad_beta[ch] += sum_g[ch] as f32;
        }
        let mut grad_in = Tensor::zeros(x.shape());
        let gid = grad_in.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let inv = 1.0 / (var[ch] + self.eps as f64).sqrt();
                let scale = self.gamma[ch] as f64 * inv;
                for ((gi, g), &v) in gid[base..base + hw]
                    .iter_mut()
                    .zip(&grad_out.data()[base..base + hw])
                    .zip(&x.data()[base..base + hw])
                {
                    let xhat = (v as f64 - mean[ch]) * inv;
                    *gi = (scale * (*g as f64 - sum_g[ch] / count - xhat * sum_gx[ch] / count)) as f32;
                }
            }
        }
        Ok(grad_in)
    }
}

/// Learnable piecewise activation quantizer. `v`/`beta` are the master
/// parameters; the lookup state is rebuilt (with endpoint projection) after
/// every optimizer update.
#[derive(Debug, Clone)]
pub struct PaAct {
    pub n: usize,
    pub lambda_a: f32,
    /// Fixed half-width for the open top piece; `None` picks one from the
    /// calibration batch.
    pub lambda_delta: Option<f32>,
    pub v: Vec<f32>,
    pub beta: Vec<f32>,
    pub grad_v: Vec<f32>,
    pub grad_beta: Vec<f32>,
    pub state: Option<ActivationQuantizerState>,
}

impl PaAct {
    pub fn new(n: usize, lambda_a: f32) -> Self {
        Self {
            n,
            lambda_a,
            lambda_delta: None,
            v: Vec::new(),
            beta: Vec::new(),
            grad_v: Vec::new(),
            grad_beta: Vec::new(),
            state: None,
        }
    }

    pub fn with_lambda_delta(mut self, lambda_delta: Option<f32>) -> Self {
        self.lambda_delta = lambda_delta;
        self
    }

    pub fn state(&self) -> Result<&ActivationQuantizerState> {
        self.state.as_ref().ok_or_else(|| {
            Error::InvalidConfig("activation quantizer used before initialization".into())
        })
    }

    /// Calibrates endpoints and coefficients from the first training batch.
    pub fn ensure_initialized(&mut self, sample: &Tensor) -> Result<()> {
        if self.state.is_some() {
            return Ok(());
        }
        let state = match self.lambda_delta {
            Some(ld) => init_activation_state(sample, self.n, self.lambda_a, ld)?,
            None => init_activation_state_auto(sample, self.n, self.lambda_a)?,
        };
        self.install(state);
        Ok(())
    }

    pub fn install(&mut self, state: ActivationQuantizerState) {
        self.n = state.n();
        self.lambda_a = state.lambda_a();
        self.v = state.v().to_vec();
        self.beta = state.beta().to_vec();
        self.grad_v = vec![0.0; self.n];
        self.grad_beta = vec![0.0; self.n];
        self.state = Some(state);
    }

    /// Pushes (possibly optimizer-mutated) master parameters back into the
    /// lookup state, picking up the minimum-gap endpoint projection.
    pub fn refresh(&mut self) -> Result<()> {
        if let Some(state) = self.state.as_mut() {
            state.set_params(self.v.clone(), self.beta.clone())?;
            self.v.copy_from_slice(state.v());
            self.beta.copy_from_slice(state.beta());
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.ensure_initialized(x)?;
        }
        Ok(quantize_activations_forward(x, self.state()?))
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("backward before forward".into()))?;
        let grad_in = activation_backward_input(grad_out, x, state)?;
        let gb = grad_beta(grad_out, x, state)?;
        let gv = grad_v(grad_out, x, state)?;
        for (a, b) in self.grad_beta.iter_mut().zip(gb) {
            *a += b;
        }
        for (a, b) in self.grad_v.iter_mut().zip(gv) {
            *a += b;
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub enum ActOp {
    Relu,
    Sign,
    Pa(PaAct),
}

impl ActOp {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            ActOp::Relu => Ok(x.map(|v| v.max(0.0))),
            ActOp::Sign => Ok(x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })),
            ActOp::Pa(pa) => pa.forward(x, mode),
        }
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            ActOp::Relu => {
                let mut g = grad_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(g)
            }
            // Clipped straight-through window for the sign nonlinearity.
            ActOp::Sign => {
                let mut g = grad_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv.abs() > 1.0 {
                        *gv = 0.0;
                    }
                }
                Ok(g)
            }
            ActOp::Pa(pa) => pa.backward(x, grad_out),
        }
    }
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
pub fn maxpool2_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::ShapeMismatch(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x.at(s, ch, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    *out.at_mut(s, ch, oy, ox) = best;
                }
            }
        }
    }
    Ok(out)
}

/// Routes each output gradient to the first-scanned maximum of its window.
pub fn maxpool2_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::ShapeMismatch("max pool grad shape".into()));
    }
    let mut grad_in = Tensor::zeros(x.shape());
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut best, mut by, mut bx) = (f32::NEG_INFINITY, 0, 0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x.at(s, ch, 2 * oy + dy, 2 * ox + dx);
                            if v > best {
                                (best, by, bx) = (v, 2 * oy + dy, 2 * ox + dx);
                            }
                        }
                    }
                    *grad_in.at_mut(s, ch, by, bx) += grad_out.at(s, ch, oy, ox);
                }
            }
        }
    }
    Ok(grad_in)
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    if hw == 0 {
        return Err(Error::EmptyTensor("cannot average an empty map".into()));
    }
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let od = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let xs = &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            od[s * c + ch] = (xs.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    if grad_out.shape() != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch("global average pool grad shape".into()));
    }
    let mut grad_in = Tensor::zeros(x.shape());
    let gid = grad_in.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let g = grad_out.data()[s * c + ch] / hw as f32;
            gid[(s * c + ch) * hw..(s * c + ch + 1) * hw].fill(g);
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dot_matches_naive() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for len in [0, 1, 3, 4, 7, 64, 129] {
            let a: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_forward_matches_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let x = rand_tensor(&mut rng, [2, 3, 8, 7]);
            let w = rand_tensor(&mut rng, [4, 3, 3, 3]);
            let got = conv_forward(&x, &w, stride, pad).unwrap();
            let want = conv2d_reference(&x, &w, stride, pad).unwrap();
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_weight_grad_matches_finite_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, [2, 2, 5, 5]);
        let mut w = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let grad_out = rand_tensor(&mut rng, [2, 3, 5, 5]);
        let (_, gw) = conv_backward(&x, &w, &grad_out, 1, 1).unwrap();
        let h = 1e-2f32;
        for idx in [0usize, 7, 23, 53] {
            let orig = w.data()[idx];
            w.data_mut()[idx] = orig + h;
            let up: f64 = conv_forward(&x, &w, 1, 1)
                .unwrap()
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&y, &g)| y as f64 * g as f64)
                .sum();
            w.data_mut()[idx] = orig - h;
            let down: f64 = conv_forward(&x, &w, 1, 1)
                .unwrap()
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&y, &g)| y as f64 * g as f64)
                .sum();
            w.data_mut()[idx] = orig;
            let fd = ((up - down) / (2.0 * h as f64)) as f32;
            let got = gw.data()[idx];
            assert!(
                (fd - got).abs() <= 1e-3 * fd.abs().max(got.abs()).max(1.0),
                "idx {idx}: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn conv_backward_input_grad_matches_finite_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut x = rand_tensor(&mut rng, [1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, [2, 2, 3, 3]);
        let grad_out = rand_tensor(&mut rng, [1, 2, 3, 3]);
        let (gx, _) = conv_backward(&x, &w, &grad_out, 1, 0).unwrap();
        let h = 1e-2f32;
        for idx in [0usize, 12, 31, 49] {
            let orig = x.data()[idx];
            let probe = |v: f32, x: &mut Tensor| -> f64 {
                x.data_mut()[idx] = v;
                conv_forward(x, &w, 1, 0)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| y as f64 * g as f64)
                    .sum()
            };
            let up = probe(orig + h, &mut x);
            let down = probe(orig - h, &mut x);
            x.data_mut()[idx] = orig;
            let fd = ((up - down) / (2.0 * h as f64)) as f32;
            let got = gx.data()[idx];
            assert!(
                (fd - got).abs() <= 1e-3 * fd.abs().max(got.abs()).max(1.0),
                "idx {idx}: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn fc_forward_backward_round_trip() {
        let w = Tensor::new([2, 3, 1, 1], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let mut fc = FcOp::new(w, vec![0.1, -0.1], QuantPolicy::Real, 1.0);
        let x = Tensor::new([1, 3, 1, 1], vec![2.0, 3.0, 4.0]).unwrap();
        let y = fc.forward(&x).unwrap();
        assert_eq!(y.data(), &[2.0 - 4.0 + 0.1, 4.5 - 0.1]);

        let g = Tensor::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let gx = fc.backward(&x, &g).unwrap();
        // dx = W^T g
        assert_eq!(gx.data(), &[1.0 * 1.0 + 0.5 * 2.0, 0.0 + 1.0, -1.0 + 1.0]);
        assert_eq!(fc.grad_bias, vec![1.0, 2.0]);
        assert_eq!(
            fc.grad_weight.data(),
            &[2.0, 3.0, 4.0, 4.0, 6.0, 8.0] // outer products stacked per row
        );
    }

    #[test]
    fn fc_accepts_spatial_input() {
        let w = Tensor::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut fc = FcOp::new(w, vec![0.0], QuantPolicy::Real, 1.0);
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(fc.forward(&x).unwrap().data(), &[10.0]);
        assert!(fc
            .forward(&Tensor::zeros([1, 3, 1, 1]))
            .unwrap_err()
            .to_string()
            .contains("features"));
    }

    #[test]
    fn batch_norm_normalizes_and_restores_affine() {
        let mut bn = BnOp::new(2);
        bn.gamma = vec![2.0, 1.0];
        bn.beta = vec![1.0, 0.0];
        let x = Tensor::new([2, 2, 1, 2], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 10.0, 10.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        // channel 0: values {1,3,5,7} -> mean 4, sd sqrt(5)
        let sd = 5f32.sqrt();
        let want0 = [
            2.0 * (1.0 - 4.0) / sd + 1.0,
            2.0 * (3.0 - 4.0) / sd + 1.0,
            2.0 * (5.0 - 4.0) / sd + 1.0,
            2.0 * (7.0 - 4.0) / sd + 1.0,
        ];
        for (got, want) in [y.at(0, 0, 0, 0), y.at(0, 0, 0, 1), y.at(1, 0, 0, 0), y.at(1, 0, 0, 1)]
            .iter()
            .zip(want0)
        {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        // channel 1: values {0,0,10,10} -> mean 5, sd 5
        assert!((y.at(0, 1, 0, 0) + 1.0).abs() < 1e-3);
        assert!((y.at(1, 1, 0, 1) - 1.0).abs() < 1e-3);
        assert!(bn.running_mean[0] > 0.0 && bn.running_var[0] > 1.0);
    }

    #[test]
    fn batch_norm_backward_matches_finite_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let mut x = rand_tensor(&mut rng, [3, 2, 2, 2]);
        let grad_out = rand_tensor(&mut rng, [3, 2, 2, 2]);
        let mut bn = BnOp::new(2);
        bn.gamma = vec![1.5, 0.7];
        bn.beta = vec![0.2, -0.3];
        let gx = bn.backward(&x, &grad_out).unwrap();
        let h = 1e-3f32;
        for idx in [0usize, 5, 13, 21] {
            let orig = x.data()[idx];
            let probe = |v: f32, x: &mut Tensor, bn: &mut BnOp| -> f64 {
                x.data_mut()[idx] = v;
                bn.forward(x, Mode::Train)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| y as f64 * g as f64)
                    .sum()
            };
            let up = probe(orig + h, &mut x, &mut bn);
            let down = probe(orig - h, &mut x, &mut bn);
            x.data_mut()[idx] = orig;
            let fd = ((up - down) / (2.0 * h as f64)) as f32;
            let got = gx.data()[idx];
            assert!(
                (fd - got).abs() <= 2e-2 * fd.abs().max(got.abs()).max(1.0),
                "idx {idx}: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let x = Tensor::new(
            [1, 1, 4, 4],
            vec![
                1.0, 2.0, 0.0, 0.0, //
                3.0, 0.0, 0.0, 4.0, //
                9.0, 9.0, 1.0, 1.0, //
                9.0, 9.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let y = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 9.0, 1.0]);
        let g = Tensor::new([1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gx = maxpool2_backward(&x, &g).unwrap();
        assert_eq!(gx.at(0, 0, 1, 0), 1.0); // the 3.0
        assert_eq!(gx.at(0, 0, 1, 3), 1.0); // the 4.0
        assert_eq!(gx.at(0, 0, 2, 0), 1.0); // first-scanned 9.0
        assert_eq!(gx.at(0, 0, 2, 1), 0.0);
        assert_eq!(gx.data().iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn global_avg_pool_round_trip() {
        let x = Tensor::new([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]).unwrap();
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 2.0]);
        let g = Tensor::new([1, 2, 1, 1], vec![4.0, 8.0]).unwrap();
        let gx = global_avg_pool_backward(&x, &g).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn pa_conv_refreshes_quantizer_each_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let w = rand_tensor(&mut rng, [2, 2, 3, 3]);
        let mut conv = ConvOp::new(w, 1, 1, QuantPolicy::Pa { m: 4, n: 3 }, 1.0);
        let x = rand_tensor(&mut rng, [1, 2, 6, 6]);
        conv.forward(&x).unwrap();
        let alpha_before = conv.wq.as_ref().unwrap().alpha().to_vec();
        for v in conv.weight.data_mut() {
            *v *= 2.0;
        }
        conv.forward(&x).unwrap();
        let alpha_after = conv.wq.as_ref().unwrap().alpha().to_vec();
        assert_ne!(alpha_before, alpha_after);
    }

    #[test]
    fn sign_policy_forward_is_pm_one() {
        let w = Tensor::new([1, 1, 1, 2], vec![0.3, -0.7]).unwrap();
        let mut conv = ConvOp::new(w, 1, 0, QuantPolicy::SignBinary, 1.0);
        let wbar = conv.quantized_weights().unwrap();
        assert_eq!(wbar.data(), &[1.0, -1.0]);
    }

    #[test]
    fn pa_act_initializes_once_and_projects_after_update() {
        let x = Tensor::new([1, 1, 1, 8], vec![0.1, 0.2, 0.3, 0.5, 0.9, 1.4, -0.2, -0.9]).unwrap();
        let mut act = ActOp::Pa(PaAct::new(3, 1.0));
        let y = act.forward(&x, Mode::Train).unwrap();
        let ActOp::Pa(pa) = &mut act else { unreachable!() };
        assert_eq!(pa.v.len(), 3);
        assert!(y.data().iter().all(|v| v.is_finite()));
        let v_before = pa.v.clone();
        pa.forward(&x, Mode::Train).unwrap();
        assert_eq!(pa.v, v_before); // no re-calibration

        // Make the endpoints badly ordered and refresh: projection restores
        // a strictly ascending vector.
        pa.v = vec![0.9, 0.1, 0.5];
        pa.refresh().unwrap();
        assert!(pa.v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pa_act_eval_before_init_errors() {
        let x = Tensor::zeros([1, 1, 1, 4]);
        let mut act = ActOp::Pa(PaAct::new(2, 1.0));
        assert!(act.forward(&x, Mode::Eval).is_err());
    }
}
