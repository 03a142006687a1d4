//! Differentiable layers: convolution, batch normalization, max-pooling with
//! exported indices, max-unpooling, global average pooling, fully connected,
//! and the per-pixel channel softmax.
//!
//! Each op runs its forward kernel, then records a backward rule on the
//! tape. Parameters enter as tape variables so the caller decides whether
//! they are trainable leaves or frozen constants. Inner loops are written
//! over contiguous rows so the hot convolution paths vectorize.

use crate::rng::Rng;
use crate::tape::{BackwardArgs, BackwardRule, GradSink, Tape, VarId};
use crate::tensor::Tensor;

// ── Layer parameter holders ─────────────────────────────────────────────────

/// 2-D convolution parameters. Cross-correlation, no kernel flip.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// [C_out × C_in × K × K]
    pub weight: Tensor,
    /// [C_out]
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Zero-initialized layer; call [`Conv2d::init`] to randomize.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[c_out, c_in, k, k]).with_requires_grad(),
            bias: Tensor::zeros(&[c_out]).with_requires_grad(),
            stride,
            padding,
        }
    }

    /// He fan-in scaled uniform weights, zero bias.
    pub fn init(&mut self, rng: &mut Rng) {
        let shape = self.weight.shape().to_vec();
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = (6.0 / fan_in as f32).sqrt();
        self.weight = Tensor::uniform(&shape, -bound, bound, rng).with_requires_grad();
        self.bias = Tensor::zeros(&[shape[0]]).with_requires_grad();
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-channel batch normalization state.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0).with_requires_grad(),
            beta: Tensor::zeros(&[channels]).with_requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn init(&mut self, _rng: &mut Rng) {
        let c = self.gamma.numel();
        self.gamma = Tensor::full(&[c], 1.0).with_requires_grad();
        self.beta = Tensor::zeros(&[c]).with_requires_grad();
        self.running_mean = Tensor::zeros(&[c]);
        self.running_var = Tensor::full(&[c], 1.0);
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// How a batch-norm layer normalizes during one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats updated by exponential moving average.
    TrainUpdate,
    /// Batch statistics; running stats left untouched.
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// Argmax offsets exported by a max-pooling op, consumed by the paired
/// max-unpooling op. Offsets are flat indices into the pool's input tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub k: usize,
    pub idx: Vec<u32>,
}

impl PoolIndices {
    /// Shape of the pooled output this index tensor matches.
    pub fn pooled_shape(&self) -> [usize; 4] {
        let [n, c, h, w] = self.input_shape;
        [n, c, h / self.k, w / self.k]
    }
}

// ── Convolution ─────────────────────────────────────────────────────────────

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    assert!(
        input + 2 * padding >= k,
        "conv input extent {input} with padding {padding} smaller than kernel {k}"
    );
    (input + 2 * padding - k) / stride + 1
}

/// Valid output range [lo, hi] for one kernel column: indices ow such that
/// the tap ow*stride + kw - padding lands inside [0, extent).
#[inline]
fn tap_range(
    extent: usize,
    out_extent: usize,
    k_off: usize,
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    let lo = if padding > k_off { (padding - k_off).div_ceil(stride) } else { 0 };
    if extent + padding <= k_off {
        return None;
    }
    let hi = ((extent - 1 + padding - k_off) / stride).min(out_extent - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

struct Conv2dRule {
    stride: usize,
    padding: usize,
}

fn conv2d_kernel(
    x: &[f32],
    xs: &[usize],
    w: &[f32],
    ws: &[usize],
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> (Vec<f32>, Vec<usize>) {
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    let ho = conv_out_extent(h, k, stride, padding);
    let wo = conv_out_extent(wd, k, stride, padding);
    let mut out = vec![0.0f32; n * c_out * ho * wo];

    for ni in 0..n {
        for co in 0..c_out {
            let out_plane = &mut out[(ni * c_out + co) * ho * wo..][..ho * wo];
            let b = bias[co];
            for v in out_plane.iter_mut() {
                *v = b;
            }
            for ci in 0..c_in {
                let x_plane = &x[(ni * c_in + ci) * h * wd..][..h * wd];
                let w_tap = &w[(co * c_in + ci) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w_tap[kh * k + kw];
                        let Some((lo, hi)) = tap_range(wd, wo, kw, stride, padding) else {
                            continue;
                        };
                        for oh in 0..ho {
                            let ih = oh * stride + kh;
                            if ih < padding || ih - padding >= h {
                                continue;
                            }
                            let xrow = &x_plane[(ih - padding) * wd..][..wd];
                            let orow = &mut out_plane[oh * wo..][..wo];
                            if stride == 1 {
                                let x0 = lo + kw - padding;
                                let len = hi - lo + 1;
                                let xr = &xrow[x0..x0 + len];
                                let or = &mut orow[lo..lo + len];
                                for i in 0..len {
                                    or[i] += wv * xr[i];
                                }
                            } else {
                                for ow in lo..=hi {
                                    orow[ow] += wv * xrow[ow * stride + kw - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, vec![n, c_out, ho, wo])
}

impl BackwardRule for Conv2dRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let (x_id, w_id, b_id) = (args.inputs[0], args.inputs[1], args.inputs[2]);
        let xs = args.shape(x_id).to_vec();
        let ws = args.shape(w_id).to_vec();
        let os = args.shape(args.output).to_vec();
        let x = args.value(x_id).to_vec();
        let w = args.value(w_id).to_vec();
        let g = args.grad_out;
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let (ho, wo) = (os[2], os[3]);
        let (stride, padding) = (self.stride, self.padding);

        sink.with(b_id, |db| {
            for ni in 0..n {
                for co in 0..c_out {
                    let g_plane = &g[(ni * c_out + co) * ho * wo..][..ho * wo];
                    db[co] += g_plane.iter().sum::<f32>();
                }
            }
        });

        let want_x = sink.wants(x_id);
        let want_w = sink.wants(w_id);
        if !want_x && !want_w {
            return;
        }
        let mut dx = vec![0.0f32; if want_x { x.len() } else { 0 }];
        let mut dw = vec![0.0f32; if want_w { w.len() } else { 0 }];

        for ni in 0..n {
            for co in 0..c_out {
                let g_plane = &g[(ni * c_out + co) * ho * wo..][..ho * wo];
                for ci in 0..c_in {
                    let x_plane = &x[(ni * c_in + ci) * h * wd..][..h * wd];
                    for kh in 0..k {
                        for kw in 0..k {
                            let Some((lo, hi)) = tap_range(wd, wo, kw, stride, padding) else {
                                continue;
                            };
                            let wv = w[((co * c_in + ci) * k + kh) * k + kw];
                            let mut acc = 0.0f32;
                            for oh in 0..ho {
                                let ih = oh * stride + kh;
                                if ih < padding || ih - padding >= h {
                                    continue;
                                }
                                let grow = &g_plane[oh * wo + lo..oh * wo + hi + 1];
                                let xbase = (ih - padding) * wd;
                                if stride == 1 {
                                    let x0 = xbase + lo + kw - padding;
                                    let xr = &x_plane[x0..x0 + grow.len()];
                                    if want_w {
                                        let mut s = 0.0f32;
                                        for i in 0..grow.len() {
                                            s += grow[i] * xr[i];
                                        }
                                        acc += s;
                                    }
                                    if want_x {
                                        let dxr = &mut dx
                                            [(ni * c_in + ci) * h * wd + x0..][..grow.len()];
                                        for i in 0..grow.len() {
                                            dxr[i] += wv * grow[i];
                                        }
                                    }
                                } else {
                                    for (j, ow) in (lo..=hi).enumerate() {
                                        let xi = xbase + ow * stride + kw - padding;
                                        if want_w {
                                            acc += grow[j] * x_plane[xi];
                                        }
                                        if want_x {
                                            dx[(ni * c_in + ci) * h * wd + xi] += wv * grow[j];
                                        }
                                    }
                                }
                            }
                            if want_w {
                                dw[((co * c_in + ci) * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            sink.add(x_id, &dx);
        }
        if want_w {
            sink.add(w_id, &dw);
        }
    }
}

/// Cross-correlation plus bias. Input [N×C_in×H×W], weight [C_out×C_in×K×K].
pub fn conv2d_forward(
    tape: &mut Tape,
    x: VarId,
    weight: VarId,
    bias: VarId,
    stride: usize,
    padding: usize,
) -> VarId {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    assert_eq!(xs.len(), 4, "conv input must be N×C×H×W, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv weight must be C_out×C_in×K×K, got {ws:?}");
    assert_eq!(
        xs[1], ws[1],
        "conv channel mismatch: input has {}, weight expects {}",
        xs[1], ws[1]
    );
    assert_eq!(ws[2], ws[3], "conv kernel must be square, got {ws:?}");
    assert_eq!(tape.shape(bias), &[ws[0]], "conv bias shape");
    let (out, shape) = conv2d_kernel(
        tape.value(x),
        &xs,
        tape.value(weight),
        &ws,
        tape.value(bias),
        stride,
        padding,
    );
    tape.record(&[x, weight, bias], shape, out, Box::new(Conv2dRule { stride, padding }))
}

// ── Batch normalization ─────────────────────────────────────────────────────

struct BnTrainRule {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Per-channel mean and biased variance over N×H×W, accumulated in f64.
fn bn_batch_stats(x: &[f32], shape: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let p = &x[(ni * c + ci) * plane..][..plane];
            sum += p.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let p = &x[(ni * c + ci) * plane..][..plane];
            sq += p.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum::<f64>();
        }
        mean[ci] = mu as f32;
        var[ci] = (sq / m) as f32;
    }
    (mean, var)
}

impl BackwardRule for BnTrainRule {
    fn name(&self) -> &'static str {
        "batchnorm_train"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let (x_id, gamma_id, beta_id) = (args.inputs[0], args.inputs[1], args.inputs[2]);
        let shape = args.shape(x_id).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = (n * plane) as f32;
        let x = args.value(x_id).to_vec();
        let gamma = args.value(gamma_id).to_vec();
        let g = args.grad_out;

        // Per-channel sums: Σg and Σ g·x̂.
        let mut sg = vec![0.0f32; c];
        let mut sgx = vec![0.0f32; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, is) = (self.mean[ci], self.inv_std[ci]);
                let mut a = 0.0f32;
                let mut b = 0.0f32;
                for i in 0..plane {
                    let gi = g[base + i];
                    a += gi;
                    b += gi * (x[base + i] - mu) * is;
                }
                sg[ci] += a;
                sgx[ci] += b;
            }
        }
        sink.add(beta_id, &sg);
        sink.add(gamma_id, &sgx);
        sink.with(x_id, |dx| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (mu, is) = (self.mean[ci], self.inv_std[ci]);
                    let scale = gamma[ci] * is;
                    let mg = sg[ci] / m;
                    let mgx = sgx[ci] / m;
                    for i in 0..plane {
                        let xh = (x[base + i] - mu) * is;
                        dx[base + i] += scale * (g[base + i] - mg - xh * mgx);
                    }
                }
            }
        });
    }
}

struct BnEvalRule {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BackwardRule for BnEvalRule {
    fn name(&self) -> &'static str {
        "batchnorm_eval"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let (x_id, gamma_id, beta_id) = (args.inputs[0], args.inputs[1], args.inputs[2]);
        let shape = args.shape(x_id).to_vec();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = args.value(x_id).to_vec();
        let gamma = args.value(gamma_id).to_vec();
        let g = args.grad_out;

        let mut sg = vec![0.0f32; c];
        let mut sgx = vec![0.0f32; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    sg[ci] += g[base + i];
                    sgx[ci] += g[base + i] * (x[base + i] - self.mean[ci]) * self.inv_std[ci];
                }
            }
        }
        sink.add(beta_id, &sg);
        sink.add(gamma_id, &sgx);
        sink.with(x_id, |dx| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let scale = gamma[ci] * self.inv_std[ci];
                    for i in 0..plane {
                        dx[base + i] += scale * g[base + i];
                    }
                }
            }
        });
    }
}

/// Normalize per channel; affine transform by gamma/beta. In train modes the
/// batch itself supplies the statistics (biased variance); running stats are
/// updated only under [`BnMode::TrainUpdate`].
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    bn: &mut BatchNorm2d,
    mode: BnMode,
) -> VarId {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "batchnorm input must be N×C×H×W, got {shape:?}");
    let c = shape[1];
    assert_eq!(c, bn.channels(), "batchnorm channel mismatch");
    let (n, plane) = (shape[0], shape[2] * shape[3]);

    let (mean, var, update) = match mode {
        BnMode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec(), false),
        BnMode::TrainFrozen | BnMode::TrainUpdate => {
            assert!(
                n * plane >= 2,
                "batchnorm train mode needs at least 2 values per channel"
            );
            let (m, v) = bn_batch_stats(tape.value(x), &shape);
            (m, v, mode == BnMode::TrainUpdate)
        }
    };
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();

    if update {
        let mom = bn.momentum;
        for ci in 0..c {
            let rm = &mut bn.running_mean.data_mut()[ci];
            *rm = (1.0 - mom) * *rm + mom * mean[ci];
            let rv = &mut bn.running_var.data_mut()[ci];
            *rv = (1.0 - mom) * *rv + mom * var[ci];
        }
    }

    let xv = tape.value(x);
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let mut out = vec![0.0f32; xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
            for i in 0..plane {
                out[base + i] = ga * (xv[base + i] - mu) * is + be;
            }
        }
    }

    let rule: Box<dyn BackwardRule> = match mode {
        BnMode::Eval => Box::new(BnEvalRule { mean, inv_std }),
        _ => Box::new(BnTrainRule { mean, inv_std }),
    };
    tape.record(&[x, gamma, beta], shape, out, rule)
}

// ── Pooling ─────────────────────────────────────────────────────────────────

struct MaxPoolRule {
    idx: Vec<u32>,
}

impl BackwardRule for MaxPoolRule {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let g = args.grad_out;
        sink.with(args.inputs[0], |dx| {
            for (i, &src) in self.idx.iter().enumerate() {
                dx[src as usize] += g[i];
            }
        });
    }
}

/// Max over disjoint k×k windows with output stride k. Returns the pooled
/// values and, for each output cell, the flat input offset of its maximum
/// (smallest row-major offset wins ties).
pub fn maxpool2d(tape: &mut Tape, x: VarId, k: usize) -> (VarId, PoolIndices) {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "maxpool input must be N×C×H×W");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(
        h % k == 0 && w % k == 0,
        "maxpool extents {h}×{w} not divisible by window {k}"
    );
    let (ho, wo) = (h / k, w / k);
    let xv = tape.value(x);
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut idx = vec![0u32; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_off = in_base + (oy * k) * w + ox * k;
                    let mut best = xv[best_off];
                    for dy in 0..k {
                        let row = in_base + (oy * k + dy) * w + ox * k;
                        for dx in 0..k {
                            let v = xv[row + dx];
                            if v > best {
                                best = v;
                                best_off = row + dx;
                            }
                        }
                    }
                    out[out_base + oy * wo + ox] = best;
                    idx[out_base + oy * wo + ox] = best_off as u32;
                }
            }
        }
    }
    let indices = PoolIndices { input_shape: [n, c, h, w], k, idx: idx.clone() };
    let out_id = tape.record(&[x], vec![n, c, ho, wo], out, Box::new(MaxPoolRule { idx }));
    (out_id, indices)
}

struct MaxUnpoolRule {
    idx: Vec<u32>,
}

impl BackwardRule for MaxUnpoolRule {
    fn name(&self) -> &'static str {
        "maxunpool2d"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let g = args.grad_out;
        sink.with(args.inputs[0], |dy| {
            for (i, &dst) in self.idx.iter().enumerate() {
                dy[i] += g[dst as usize];
            }
        });
    }
}

/// Scatter each value of `y` to the position its paired max-pool recorded;
/// zeros elsewhere. Output takes the pool's input geometry.
pub fn maxunpool2d(tape: &mut Tape, y: VarId, indices: &PoolIndices) -> VarId {
    let ys = tape.shape(y).to_vec();
    let expect = indices.pooled_shape();
    assert_eq!(
        ys.as_slice(),
        expect.as_slice(),
        "maxunpool geometry mismatch: input {ys:?}, indices expect {expect:?}"
    );
    let out_shape = indices.input_shape.to_vec();
    let numel: usize = out_shape.iter().product();
    let yv = tape.value(y);
    let mut out = vec![0.0f32; numel];
    for (i, &dst) in indices.idx.iter().enumerate() {
        out[dst as usize] = yv[i];
    }
    tape.record(&[y], out_shape, out, Box::new(MaxUnpoolRule { idx: indices.idx.clone() }))
}

// ── Global average pooling ──────────────────────────────────────────────────

struct GlobalAvgPoolRule {
    plane: usize,
}

impl BackwardRule for GlobalAvgPoolRule {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let g = args.grad_out;
        let plane = self.plane;
        let scale = 1.0 / plane as f32;
        sink.with(args.inputs[0], |dx| {
            for (nc, &gv) in g.iter().enumerate() {
                let v = gv * scale;
                for d in &mut dx[nc * plane..(nc + 1) * plane] {
                    *d += v;
                }
            }
        });
    }
}

/// Spatial mean per channel: [N×C×H×W] → [N×C].
pub fn global_avg_pool(tape: &mut Tape, x: VarId) -> VarId {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "global_avg_pool input must be N×C×H×W");
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let xv = tape.value(x);
    let mut out = vec![0.0f32; n * c];
    for nc in 0..n * c {
        out[nc] = xv[nc * plane..(nc + 1) * plane].iter().sum::<f32>() / plane as f32;
    }
    tape.record(&[x], vec![n, c], out, Box::new(GlobalAvgPoolRule { plane }))
}

// ── Fully connected ─────────────────────────────────────────────────────────

/// Linear layer parameters: weight [O×F], bias [O].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_features, in_features]).with_requires_grad(),
            bias: Tensor::zeros(&[out_features]).with_requires_grad(),
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        let shape = self.weight.shape().to_vec();
        let bound = (6.0 / shape[1] as f32).sqrt();
        self.weight = Tensor::uniform(&shape, -bound, bound, rng).with_requires_grad();
        self.bias = Tensor::zeros(&[shape[0]]).with_requires_grad();
    }
}

struct LinearRule;

impl BackwardRule for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let (x_id, w_id, b_id) = (args.inputs[0], args.inputs[1], args.inputs[2]);
        let x = args.value(x_id).to_vec();
        let w = args.value(w_id).to_vec();
        let (n, f) = (args.shape(x_id)[0], args.shape(x_id)[1]);
        let o = args.shape(w_id)[0];
        let g = args.grad_out;

        sink.with(b_id, |db| {
            for ni in 0..n {
                for oi in 0..o {
                    db[oi] += g[ni * o + oi];
                }
            }
        });
        sink.with(w_id, |dw| {
            for ni in 0..n {
                let xrow = &x[ni * f..(ni + 1) * f];
                for oi in 0..o {
                    let gv = g[ni * o + oi];
                    let dwr = &mut dw[oi * f..(oi + 1) * f];
                    for i in 0..f {
                        dwr[i] += gv * xrow[i];
                    }
                }
            }
        });
        sink.with(x_id, |dx| {
            for ni in 0..n {
                let dxr = &mut dx[ni * f..(ni + 1) * f];
                for oi in 0..o {
                    let gv = g[ni * o + oi];
                    let wr = &w[oi * f..(oi + 1) * f];
                    for i in 0..f {
                        dxr[i] += gv * wr[i];
                    }
                }
            }
        });
    }
}

/// Affine map [N×F] → [N×O] with weight [O×F].
pub fn linear(tape: &mut Tape, x: VarId, weight: VarId, bias: VarId) -> VarId {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    assert_eq!(xs.len(), 2, "linear input must be N×F, got {xs:?}");
    assert_eq!(ws.len(), 2, "linear weight must be O×F, got {ws:?}");
    assert_eq!(xs[1], ws[1], "linear feature mismatch: {} vs {}", xs[1], ws[1]);
    assert_eq!(tape.shape(bias), &[ws[0]], "linear bias shape");
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let xv = tape.value(x);
    let wv = tape.value(weight);
    let bv = tape.value(bias);
    let mut out = vec![0.0f32; n * o];
    for ni in 0..n {
        let xrow = &xv[ni * f..(ni + 1) * f];
        for oi in 0..o {
            let wrow = &wv[oi * f..(oi + 1) * f];
            let mut acc = bv[oi];
            for i in 0..f {
                acc += xrow[i] * wrow[i];
            }
            out[ni * o + oi] = acc;
        }
    }
    tape.record(&[x, weight, bias], vec![n, o], out, Box::new(LinearRule))
}

// ── Channel softmax ─────────────────────────────────────────────────────────

struct SoftmaxChannelsRule;

impl BackwardRule for SoftmaxChannelsRule {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let shape = args.shape(args.output).to_vec();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let y = args.output_value().to_vec();
        let g = args.grad_out;
        sink.with(args.inputs[0], |dx| {
            for ni in 0..n {
                for p in 0..plane {
                    let mut dot = 0.0f32;
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane + p;
                        dot += g[off] * y[off];
                    }
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane + p;
                        dx[off] += y[off] * (g[off] - dot);
                    }
                }
            }
        });
    }
}

/// Per-pixel softmax over the channel axis of an N×C×H×W tensor.
pub fn softmax_channels(tape: &mut Tape, x: VarId) -> VarId {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "softmax_channels input must be N×C×H×W");
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let xv = tape.value(x);
    let mut out = vec![0.0f32; xv.len()];
    for ni in 0..n {
        for p in 0..plane {
            let mut m = f32::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(xv[(ni * c + ci) * plane + p]);
            }
            let mut z = 0.0f32;
            for ci in 0..c {
                let off = (ni * c + ci) * plane + p;
                let e = (xv[off] - m).exp();
                out[off] = e;
                z += e;
            }
            let inv = 1.0 / z;
            for ci in 0..c {
                out[(ni * c + ci) * plane + p] *= inv;
            }
        }
    }
    tape.record(&[x], shape, out, Box::new(SoftmaxChannelsRule))
}
