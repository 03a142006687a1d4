//! Independent 64-bit forward evaluations backing the finite-difference
//! oracle. Every function here is written directly from the operation's
//! definition and shares no code with the f32 tape kernels it is used to
//! check.

use crate::models::Layer;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn log_clamped(x: f64) -> f64 {
    x.max(1e-12).ln()
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Direct five-index definition of cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    let fetch = |ni: usize, ci: usize, iy: isize, ix: isize| -> f64 {
        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
            0.0
        } else {
            x[((ni * c_in + ci) * h + iy as usize) * wd + ix as usize]
        }
    };
    let mut out = vec![0.0f64; n * c_out * ho * wo];
    for ni in 0..n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                acc += w[((co * c_in + ci) * k + ky) * k + kx]
                                    * fetch(ni, ci, iy, ix);
                            }
                        }
                    }
                    out[((ni * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, vec![n, c_out, ho, wo])
}

/// Batch-statistics normalization (biased variance) with affine transform.
pub fn batchnorm_train(
    x: &[f64],
    shape: &[usize],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * plane) as f64;
    let mut out = vec![0.0f64; x.len()];
    for ci in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            for p in 0..plane {
                mean += x[(ni * c + ci) * plane + p];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for ni in 0..n {
            for p in 0..plane {
                let d = x[(ni * c + ci) * plane + p] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for ni in 0..n {
            for p in 0..plane {
                let off = (ni * c + ci) * plane + p;
                out[off] = gamma[ci] * (x[off] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

/// Running-statistics normalization.
pub fn batchnorm_eval(
    x: &[f64],
    shape: &[usize],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0f64; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (running_var[ci] + eps).sqrt();
            for p in 0..plane {
                let off = (ni * c + ci) * plane + p;
                out[off] = gamma[ci] * (x[off] - running_mean[ci]) * inv + beta[ci];
            }
        }
    }
    out
}

/// Window max with argmax offsets. Also reports the smallest gap between a
/// window's best and second-best value, so callers can reject instances
/// where a finite-difference step could flip the argmax.
pub fn maxpool(x: &[f64], shape: &[usize], k: usize) -> (Vec<f64>, Vec<usize>, f64) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0f64; n * c * ho * wo];
    let mut idx = vec![0usize; out.len()];
    let mut margin = f64::INFINITY;
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut best_off = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let off = base + (oy * k + dy) * w + ox * k + dx;
                        let v = x[off];
                        if v > best {
                            second = best;
                            best = v;
                            best_off = off;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if k > 1 {
                    margin = margin.min(best - second);
                }
                out[nc * ho * wo + oy * wo + ox] = best;
                idx[nc * ho * wo + oy * wo + ox] = best_off;
            }
        }
    }
    (out, idx, margin)
}

pub fn maxunpool(y: &[f64], idx: &[usize], out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; out_len];
    for (i, &dst) in idx.iter().enumerate() {
        out[dst] = y[i];
    }
    out
}

pub fn global_avg_pool(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0f64; n * c];
    for nc in 0..n * c {
        out[nc] = x[nc * plane..(nc + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    out
}

pub fn linear(x: &[f64], n: usize, f: usize, w: &[f64], o: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; n * o];
    for ni in 0..n {
        for oi in 0..o {
            let mut acc = b[oi];
            for i in 0..f {
                acc += x[ni * f + i] * w[oi * f + i];
            }
            out[ni * o + oi] = acc;
        }
    }
    out
}

pub fn softmax_channels(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0f64; x.len()];
    for ni in 0..n {
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[(ni * c + ci) * plane + p]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (x[(ni * c + ci) * plane + p] - m).exp();
                out[(ni * c + ci) * plane + p] = e;
                z += e;
            }
            for ci in 0..c {
                out[(ni * c + ci) * plane + p] /= z;
            }
        }
    }
    out
}

/// Mean over non-ignore pixels of −log softmax(z)[label].
pub fn cross_entropy_mean(z: &[f64], shape: &[usize], labels: &[u8], ignore: u8) -> f64 {
    let (n, k, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut total = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for p in 0..plane {
            let label = labels[ni * plane + p];
            if label == ignore {
                continue;
            }
            count += 1;
            let vals: Vec<f64> = (0..k).map(|c| z[(ni * k + c) * plane + p]).collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - vals[label as usize];
        }
    }
    total / count as f64
}

/// Sigmoid-space discriminator cross-entropy; 1−σ(z) evaluated as σ(−z).
pub fn discriminator_loss(zt: &[f64], zu: &[f64]) -> f64 {
    let a = zt.iter().map(|&z| -sigmoid(z).ln()).sum::<f64>() / zt.len() as f64;
    let b = zu.iter().map(|&z| -sigmoid(-z).ln()).sum::<f64>() / zu.len() as f64;
    a + b
}

pub fn adversarial_loss(zu: &[f64]) -> f64 {
    zu.iter().map(|&z| -sigmoid(z).ln()).sum::<f64>() / zu.len() as f64
}

/// Result of a reference network walk: final values plus the smallest
/// distance to a gradient kink seen anywhere along the way.
pub struct WalkOutput {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub kink_margin: f64,
}

/// Re-evaluate a network's layer sequence in f64. Parameters come from
/// `params` in binding order (conv weight, bias; bn gamma, beta; linear
/// weight, bias). Batch norm always normalizes by batch statistics, matching
/// a frozen training pass.
pub fn network_forward(layers: &[Layer], params: &[Vec<f64>], x: &[f64], xs: &[usize]) -> WalkOutput {
    let mut cur = x.to_vec();
    let mut shape = xs.to_vec();
    let mut cursor = 0usize;
    let next = |cursor: &mut usize| -> &[f64] {
        let p = &params[*cursor];
        *cursor += 1;
        p
    };
    let mut margin = f64::INFINITY;
    let mut pool_stack: Vec<(Vec<usize>, Vec<usize>)> = Vec::new(); // (idx, input shape)
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                let ws = c.weight.shape().to_vec();
                let w = next(&mut cursor).to_vec();
                let b = next(&mut cursor).to_vec();
                let (v, s) = conv2d(&cur, &shape, &w, &ws, &b, c.stride, c.padding);
                cur = v;
                shape = s;
            }
            Layer::Bn(bn) => {
                let g = next(&mut cursor).to_vec();
                let b = next(&mut cursor).to_vec();
                cur = batchnorm_train(&cur, &shape, &g, &b, bn.eps as f64);
            }
            Layer::Relu => {
                for v in &cur {
                    margin = margin.min(v.abs());
                }
                cur = cur.iter().map(|&v| relu(v)).collect();
            }
            Layer::LeakyRelu(slope) => {
                for v in &cur {
                    margin = margin.min(v.abs());
                }
                cur = cur.iter().map(|&v| leaky_relu(v, *slope as f64)).collect();
            }
            Layer::MaxPool(k) => {
                let (v, idx, m) = maxpool(&cur, &shape, *k);
                margin = margin.min(m);
                pool_stack.push((idx, shape.clone()));
                cur = v;
                shape = vec![shape[0], shape[1], shape[2] / k, shape[3] / k];
            }
            Layer::MaxUnpool(_) => {
                let (idx, in_shape) = pool_stack.pop().expect("unpool without pool");
                let out_len: usize = in_shape.iter().product();
                cur = maxunpool(&cur, &idx, out_len);
                shape = in_shape;
            }
            Layer::GlobalAvgPool => {
                cur = global_avg_pool(&cur, &shape);
                shape = vec![shape[0], shape[1]];
            }
            Layer::Linear(l) => {
                let ws = l.weight.shape().to_vec();
                let w = next(&mut cursor).to_vec();
                let b = next(&mut cursor).to_vec();
                cur = linear(&cur, shape[0], shape[1], &w, ws[0], &b);
                shape = vec![shape[0], ws[0]];
            }
        }
    }
    assert_eq!(cursor, params.len(), "reference walk consumed {cursor} of {} params", params.len());
    WalkOutput { values: cur, shape, kink_margin: margin }
}
