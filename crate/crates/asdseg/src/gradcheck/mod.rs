//! Finite-difference verification of every backward rule.
//!
//! Each check evaluates one computation twice: through the f32 tape (forward
//! plus reverse pass) and through the independent f64 implementations in
//! [`reference`], where central differences supply the numeric gradient.
//! Inputs are scaled to unit magnitude and, for kinked operations, nudged
//! away from the kink so a ±h step cannot cross it.

pub mod reference;

use crate::models::{
    build_discriminator, build_segnet, DiscConfig, ForwardOpts, Network, SegNetConfig,
};
use crate::objectives::{adversarial_loss, discriminator_loss, supervised_loss, LabelMap};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Central-difference step on unit-scaled inputs.
pub const FD_STEP: f64 = 1e-3;
/// Tolerance for primitives, layers and objective functions.
pub const TOL_PRIMITIVE: f64 = 1e-5;
/// Tolerance for the tiny full models.
pub const TOL_MODEL: f64 = 1e-4;
/// Inputs to kinked ops are kept at least this far from the kink.
const KINK_MARGIN: f64 = 2e-2;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed())
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed()).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{:<34} max rel err {:>10.3e}  tol {:>8.1e}  {}\n",
                r.name,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "pass" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.results.len(),
            self.failures()
        ));
        out
    }
}

/// Guarded relative error: |a−b| / max(|a|, |b|, 1).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare reverse-mode gradients against central differences of a 64-bit
/// re-evaluation. `build_f32` constructs the tape graph and returns the
/// scalar loss plus one leaf id per entry of `inputs`; `eval_f64` computes
/// the same loss from f64 copies of those inputs.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor],
    tolerance: f64,
    mut build_f32: impl FnMut(&mut Tape) -> (VarId, Vec<VarId>),
    eval_f64: impl Fn(&[Vec<f64>]) -> f64,
) -> CheckResult {
    let mut tape = Tape::new();
    let (loss, ids) = build_f32(&mut tape);
    assert_eq!(ids.len(), inputs.len(), "one leaf per input tensor");
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut xs: Vec<Vec<f64>> =
        inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k][i];
            xs[k][i] = orig + FD_STEP;
            let fp = eval_f64(&xs);
            xs[k][i] = orig - FD_STEP;
            let fm = eval_f64(&xs);
            xs[k][i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[k][i], numeric);
            if rel > max_rel {
                max_rel = rel;
            }
            coords += 1;
        }
    }
    CheckResult { name: name.to_string(), max_rel_err: max_rel, tolerance, coords }
}

// ── Input construction ──────────────────────────────────────────────────────

fn unit_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng).with_requires_grad()
}

/// Push values away from zero so a ±h step cannot change the active branch.
fn repair_kinks(t: &mut Tensor) {
    for v in t.data_mut() {
        if (*v as f64).abs() < KINK_MARGIN {
            *v = if *v >= 0.0 { KINK_MARGIN as f32 } else { -(KINK_MARGIN as f32) };
        }
    }
}

/// Widen the gap between a pool window's best and second-best value.
fn repair_pool_margins(t: &mut Tensor, k: usize) {
    let shape = t.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = t.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..h / k {
            for ox in 0..w / k {
                let mut best = f32::NEG_INFINITY;
                let mut second = f32::NEG_INFINITY;
                let mut best_off = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let off = base + (oy * k + dy) * w + ox * k + dx;
                        if data[off] > best {
                            second = best;
                            best = data[off];
                            best_off = off;
                        } else if data[off] > second {
                            second = data[off];
                        }
                    }
                }
                if (best - second) < 2.0 * KINK_MARGIN as f32 {
                    data[best_off] = second + 2.0 * KINK_MARGIN as f32;
                }
            }
        }
    }
}

fn weighted_sum_f64(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Loss head shared by non-scalar checks: sum of output ⊙ fixed weights.
fn weighted_loss(tape: &mut Tape, out: VarId, weights: &Tensor) -> VarId {
    let w = tape.constant_from(weights);
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

// ── Individual checks ───────────────────────────────────────────────────────

fn check_unary(name: &str, rng: &mut Rng, scale: usize) -> CheckResult {
    let shape = [2, 3, 2 * scale];
    let mut x = unit_tensor(&shape, rng);
    let needs_repair = matches!(name, "relu" | "leaky_relu");
    if needs_repair {
        repair_kinks(&mut x);
    }
    if name == "log" {
        for v in x.data_mut() {
            *v = 0.5 + (*v + 1.0) * 0.5; // [0.5, 1.5]
        }
    }
    let weights = unit_tensor(&shape, rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let op_name = name.to_string();
    check_gradients(
        &format!("primitive/{name}"),
        &[x.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let id = tape.leaf(&x);
            let y = match op_name.as_str() {
                "neg" => tape.neg(id),
                "exp" => tape.exp(id),
                "log" => tape.log(id),
                "softplus" => tape.softplus(id),
                "sigmoid" => tape.sigmoid(id),
                "relu" => tape.relu(id),
                "leaky_relu" => tape.leaky_relu(id, 0.2),
                "scalar_mul" => tape.scalar_mul(id, 1.7),
                other => panic!("unknown unary {other}"),
            };
            (weighted_loss(tape, y, &weights), vec![id])
        },
        |xs| {
            let y: Vec<f64> = xs[0]
                .iter()
                .map(|&v| match op_name.as_str() {
                    "neg" => -v,
                    "exp" => v.exp(),
                    "log" => reference::log_clamped(v),
                    "softplus" => reference::softplus(v),
                    "sigmoid" => reference::sigmoid(v),
                    "relu" => reference::relu(v),
                    "leaky_relu" => reference::leaky_relu(v, 0.2),
                    "scalar_mul" => 1.7 * v,
                    other => panic!("unknown unary {other}"),
                })
                .collect();
            weighted_sum_f64(&y, &wf)
        },
    )
}

/// f64 broadcast by explicit multi-index arithmetic.
fn broadcast_f64(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    op: impl Fn(f64, f64) -> f64,
) -> (Vec<f64>, Vec<usize>) {
    let rank = ash.len();
    let out_shape: Vec<usize> = (0..rank).map(|d| ash[d].max(bsh[d])).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0f64; numel];
    for flat in 0..numel {
        let mut rem = flat;
        let mut ai = 0;
        let mut bi = 0;
        for d in 0..rank {
            let tail: usize = out_shape[d + 1..].iter().product();
            let coord = rem / tail;
            rem %= tail;
            let atail: usize = ash[d + 1..].iter().product();
            let btail: usize = bsh[d + 1..].iter().product();
            if ash[d] > 1 {
                ai += coord * atail;
            }
            if bsh[d] > 1 {
                bi += coord * btail;
            }
        }
        out[flat] = op(a[ai], b[bi]);
    }
    (out, out_shape)
}

fn check_binary(name: &str, broadcast: bool, rng: &mut Rng, scale: usize) -> CheckResult {
    let (ash, bsh): (Vec<usize>, Vec<usize>) = if broadcast {
        (vec![2, 1, 4 * scale], vec![1, 3, 1])
    } else {
        (vec![2, 3, 2 * scale], vec![2, 3, 2 * scale])
    };
    let a = unit_tensor(&ash, rng);
    let b = unit_tensor(&bsh, rng);
    let out_shape: Vec<usize> = (0..3).map(|d| ash[d].max(bsh[d])).collect();
    let weights = unit_tensor(&out_shape, rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let op_name = name.to_string();
    let label = if broadcast { format!("primitive/{name}_broadcast") } else { format!("primitive/{name}") };
    check_gradients(
        &label,
        &[a.clone(), b.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let ai = tape.leaf(&a);
            let bi = tape.leaf(&b);
            let y = match op_name.as_str() {
                "add" => tape.add(ai, bi),
                "sub" => tape.sub(ai, bi),
                "mul" => tape.mul(ai, bi),
                other => panic!("unknown binary {other}"),
            };
            (weighted_loss(tape, y, &weights), vec![ai, bi])
        },
        |xs| {
            let f = |x: f64, y: f64| match op_name.as_str() {
                "add" => x + y,
                "sub" => x - y,
                "mul" => x * y,
                _ => unreachable!(),
            };
            let (y, _) = broadcast_f64(&xs[0], &ash, &xs[1], &bsh, f);
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_reduction(name: &str, rng: &mut Rng, scale: usize) -> CheckResult {
    let shape = [3, 2, 3 * scale];
    let mut x = unit_tensor(&shape, rng);
    if name == "max" {
        // unique global max with a wide margin
        let data = x.data_mut();
        let mut best = 0;
        for i in 1..data.len() {
            if data[i] > data[best] {
                best = i;
            }
        }
        data[best] += 3.0 * KINK_MARGIN as f32;
    }
    let op_name = name.to_string();
    check_gradients(
        &format!("primitive/{name}"),
        &[x.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let id = tape.leaf(&x);
            let y = match op_name.as_str() {
                "sum" => tape.sum(id),
                "mean" => tape.mean(id),
                "max" => tape.max(id),
                other => panic!("unknown reduction {other}"),
            };
            (y, vec![id])
        },
        |xs| match op_name.as_str() {
            "sum" => xs[0].iter().sum(),
            "mean" => xs[0].iter().sum::<f64>() / xs[0].len() as f64,
            "max" => xs[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            _ => unreachable!(),
        },
    )
}

fn check_conv(name: &str, xs: &[usize], c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> CheckResult {
    let x = unit_tensor(xs, rng);
    let w = unit_tensor(&[c_out, xs[1], k, k], rng);
    let b = unit_tensor(&[c_out], rng);
    let ho = (xs[2] + 2 * padding - k) / stride + 1;
    let wo = (xs[3] + 2 * padding - k) / stride + 1;
    let weights = unit_tensor(&[xs[0], c_out, ho, wo], rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let ws = w.shape().to_vec();
    let xs_owned = xs.to_vec();
    check_gradients(
        name,
        &[x.clone(), w.clone(), b.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let wi = tape.leaf(&w);
            let bi = tape.leaf(&b);
            let y = crate::layers::conv2d_forward(tape, xi, wi, bi, stride, padding);
            (weighted_loss(tape, y, &weights), vec![xi, wi, bi])
        },
        |vals| {
            let (y, _) = reference::conv2d(&vals[0], &xs_owned, &vals[1], &ws, &vals[2], stride, padding);
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_batchnorm(eval_mode: bool, rng: &mut Rng, scale: usize) -> CheckResult {
    use crate::layers::{batchnorm_forward, BatchNorm2d, BnMode};
    let shape = [3, 2, 2 * scale, 4];
    let x = unit_tensor(&shape, rng);
    let gamma = Tensor::uniform(&[2], 0.5, 1.5, rng).with_requires_grad();
    let beta = unit_tensor(&[2], rng);
    let weights = unit_tensor(&shape, rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let mut bn = BatchNorm2d::new(2);
    if eval_mode {
        bn.running_mean = Tensor::uniform(&[2], -0.5, 0.5, rng);
        bn.running_var = Tensor::uniform(&[2], 0.5, 1.5, rng);
    }
    let rm: Vec<f64> = bn.running_mean.data().iter().map(|&v| v as f64).collect();
    let rv: Vec<f64> = bn.running_var.data().iter().map(|&v| v as f64).collect();
    let eps = bn.eps as f64;
    let mode = if eval_mode { BnMode::Eval } else { BnMode::TrainFrozen };
    let name = if eval_mode { "layer/batchnorm_eval" } else { "layer/batchnorm_train" };
    check_gradients(
        name,
        &[x.clone(), gamma.clone(), beta.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let gi = tape.leaf(&gamma);
            let bi = tape.leaf(&beta);
            let y = batchnorm_forward(tape, xi, gi, bi, &mut bn, mode);
            (weighted_loss(tape, y, &weights), vec![xi, gi, bi])
        },
        |vals| {
            let y = if eval_mode {
                reference::batchnorm_eval(&vals[0], &shape, &vals[1], &vals[2], &rm, &rv, eps)
            } else {
                reference::batchnorm_train(&vals[0], &shape, &vals[1], &vals[2], eps)
            };
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_maxpool(rng: &mut Rng, scale: usize) -> CheckResult {
    let shape = [2, 2, 4 * scale, 4];
    let mut x = unit_tensor(&shape, rng);
    repair_pool_margins(&mut x, 2);
    let weights = unit_tensor(&[2, 2, 2 * scale, 2], rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    check_gradients(
        "layer/maxpool2d",
        &[x.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let (y, _) = crate::layers::maxpool2d(tape, xi, 2);
            (weighted_loss(tape, y, &weights), vec![xi])
        },
        |vals| {
            let (y, _, _) = reference::maxpool(&vals[0], &shape, 2);
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_maxunpool(rng: &mut Rng, scale: usize) -> CheckResult {
    use crate::layers::{maxpool2d, maxunpool2d};
    // Fixed indices from pooling a constant tensor; only y is differentiated.
    let seed_shape = [2, 2, 4 * scale, 4];
    let mut source = unit_tensor(&seed_shape, rng);
    repair_pool_margins(&mut source, 2);
    let indices = {
        let mut tape = Tape::new();
        let s = tape.constant_from(&source);
        let (_, idx) = maxpool2d(&mut tape, s, 2);
        idx
    };
    let y = unit_tensor(&[2, 2, 2 * scale, 2], rng);
    let weights = unit_tensor(&seed_shape, rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let idx_usize: Vec<usize> = indices.idx.iter().map(|&v| v as usize).collect();
    let out_len: usize = seed_shape.iter().product();
    check_gradients(
        "layer/maxunpool2d",
        &[y.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let yi = tape.leaf(&y);
            let up = maxunpool2d(tape, yi, &indices);
            (weighted_loss(tape, up, &weights), vec![yi])
        },
        |vals| {
            let up = reference::maxunpool(&vals[0], &idx_usize, out_len);
            weighted_sum_f64(&up, &wf)
        },
    )
}

fn check_gap(rng: &mut Rng, scale: usize) -> CheckResult {
    let shape = [2, 3, 4 * scale, 4];
    let x = unit_tensor(&shape, rng);
    let weights = unit_tensor(&[2, 3], rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    check_gradients(
        "layer/global_avg_pool",
        &[x.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let y = crate::layers::global_avg_pool(tape, xi);
            (weighted_loss(tape, y, &weights), vec![xi])
        },
        |vals| {
            let y = reference::global_avg_pool(&vals[0], &shape);
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_linear(rng: &mut Rng, scale: usize) -> CheckResult {
    let (n, f, o) = (3, 4 * scale, 2);
    let x = unit_tensor(&[n, f], rng);
    let w = unit_tensor(&[o, f], rng);
    let b = unit_tensor(&[o], rng);
    let weights = unit_tensor(&[n, o], rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    check_gradients(
        "layer/linear",
        &[x.clone(), w.clone(), b.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let wi = tape.leaf(&w);
            let bi = tape.leaf(&b);
            let y = crate::layers::linear(tape, xi, wi, bi);
            (weighted_loss(tape, y, &weights), vec![xi, wi, bi])
        },
        |vals| {
            let y = reference::linear(&vals[0], n, f, &vals[1], o, &vals[2]);
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_softmax_channels(rng: &mut Rng, scale: usize) -> CheckResult {
    let shape = [2, 3, 2 * scale, 2];
    let x = unit_tensor(&shape, rng);
    let weights = unit_tensor(&shape, rng);
    let wf: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    check_gradients(
        "layer/softmax_channels",
        &[x.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let y = crate::layers::softmax_channels(tape, xi);
            (weighted_loss(tape, y, &weights), vec![xi])
        },
        |vals| {
            let y = reference::softmax_channels(&vals[0], &shape);
            weighted_sum_f64(&y, &wf)
        },
    )
}

fn check_supervised_loss(rng: &mut Rng, scale: usize) -> CheckResult {
    let shape = [2, 3, 2 * scale, 2];
    let plane = shape[2] * shape[3];
    let x = unit_tensor(&shape, rng);
    let mut ids: Vec<u8> = (0..shape[0] * plane).map(|_| rng.below(3) as u8).collect();
    ids[0] = crate::objectives::IGNORE_LABEL;
    let labels = LabelMap::new(&[shape[0], shape[2], shape[3]], ids.clone());
    check_gradients(
        "objective/supervised_loss",
        &[x.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let xi = tape.leaf(&x);
            let loss = supervised_loss(tape, xi, &labels);
            (loss, vec![xi])
        },
        |vals| {
            reference::cross_entropy_mean(&vals[0], &shape, &ids, crate::objectives::IGNORE_LABEL)
        },
    )
}

fn check_discriminator_loss(rng: &mut Rng, scale: usize) -> CheckResult {
    let zt = unit_tensor(&[3 * scale, 1], rng);
    let zu = unit_tensor(&[2 * scale, 1], rng);
    check_gradients(
        "objective/discriminator_loss",
        &[zt.clone(), zu.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let t = tape.leaf(&zt);
            let u = tape.leaf(&zu);
            (discriminator_loss(tape, t, u), vec![t, u])
        },
        |vals| reference::discriminator_loss(&vals[0], &vals[1]),
    )
}

fn check_adversarial_loss(rng: &mut Rng, scale: usize) -> CheckResult {
    let zu = unit_tensor(&[4 * scale, 1], rng);
    check_gradients(
        "objective/adversarial_loss",
        &[zu.clone()],
        TOL_PRIMITIVE,
        |tape| {
            let u = tape.leaf(&zu);
            (adversarial_loss(tape, u), vec![u])
        },
        |vals| reference::adversarial_loss(&vals[0]),
    )
}

// ── Composite graphs ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
enum PlanOp {
    Unary(u8, usize),
    Binary(u8, usize, usize),
    Reduce(u8, usize),
}

struct Plan {
    leaf_shapes: Vec<Vec<usize>>,
    ops: Vec<PlanOp>,
}

const UNARY_NAMES: [&str; 6] = ["neg", "softplus", "sigmoid", "relu", "leaky_relu", "exp"];
const BINARY_NAMES: [&str; 3] = ["add", "sub", "mul"];
const REDUCE_NAMES: [&str; 3] = ["sum", "mean", "max"];

fn random_plan(rng: &mut Rng) -> Plan {
    let palette: [[usize; 3]; 4] = [[2, 3, 4], [2, 1, 4], [1, 3, 1], [2, 3, 1]];
    let n_leaves = rng.range_usize(2, 3);
    let leaf_shapes: Vec<Vec<usize>> =
        (0..n_leaves).map(|_| palette[rng.below(palette.len())].to_vec()).collect();
    let n_ops = rng.range_usize(5, 20);
    let mut ops = Vec::new();
    let mut exp_budget = 2usize;
    let mut n_values = n_leaves;
    for _ in 0..n_ops {
        let choice = rng.below(10);
        let op = if choice < 4 {
            let mut kind = rng.below(UNARY_NAMES.len()) as u8;
            if UNARY_NAMES[kind as usize] == "exp" {
                if exp_budget == 0 {
                    kind = 1; // softplus instead
                } else {
                    exp_budget -= 1;
                }
            }
            PlanOp::Unary(kind, rng.below(n_values))
        } else if choice < 9 {
            PlanOp::Binary(rng.below(BINARY_NAMES.len()) as u8, rng.below(n_values), rng.below(n_values))
        } else {
            PlanOp::Reduce(rng.below(REDUCE_NAMES.len()) as u8, rng.below(n_values))
        };
        ops.push(op);
        n_values += 1;
    }
    Plan { leaf_shapes, ops }
}

/// f64 walk of a plan; returns the loss and the smallest kink margin seen.
fn run_plan_f64(plan: &Plan, leaves: &[Vec<f64>]) -> (f64, f64) {
    let mut values: Vec<(Vec<f64>, Vec<usize>)> = leaves
        .iter()
        .zip(&plan.leaf_shapes)
        .map(|(v, s)| (v.clone(), s.clone()))
        .collect();
    let mut margin = f64::INFINITY;
    for op in &plan.ops {
        let next = match *op {
            PlanOp::Unary(kind, a) => {
                let (av, ash) = &values[a];
                let out: Vec<f64> = av
                    .iter()
                    .map(|&v| match UNARY_NAMES[kind as usize] {
                        "neg" => -v,
                        "softplus" => reference::softplus(v),
                        "sigmoid" => reference::sigmoid(v),
                        "relu" => {
                            margin = margin.min(v.abs());
                            reference::relu(v)
                        }
                        "leaky_relu" => {
                            margin = margin.min(v.abs());
                            reference::leaky_relu(v, 0.2)
                        }
                        "exp" => v.exp(),
                        _ => unreachable!(),
                    })
                    .collect();
                (out, ash.clone())
            }
            PlanOp::Binary(kind, a, b) => {
                let (av, ash) = values[a].clone();
                let (bv, bsh) = values[b].clone();
                let f = |x: f64, y: f64| match BINARY_NAMES[kind as usize] {
                    "add" => x + y,
                    "sub" => x - y,
                    "mul" => x * y,
                    _ => unreachable!(),
                };
                broadcast_f64(&av, &ash, &bv, &bsh, f)
            }
            PlanOp::Reduce(kind, a) => {
                let (av, _) = &values[a];
                let v = match REDUCE_NAMES[kind as usize] {
                    "sum" => av.iter().sum(),
                    "mean" => av.iter().sum::<f64>() / av.len() as f64,
                    "max" => {
                        let mut sorted: Vec<f64> = av.clone();
                        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
                        if sorted.len() > 1 {
                            margin = margin.min(sorted[0] - sorted[1]);
                        }
                        sorted[0]
                    }
                    _ => unreachable!(),
                };
                (vec![v], vec![1, 1, 1])
            }
        };
        values.push(next);
    }
    let (last, _) = values.last().unwrap();
    let loss = last.iter().sum::<f64>() / last.len() as f64;
    for (v, _) in &values {
        for &x in v {
            if !x.is_finite() || x.abs() > 1e4 {
                return (f64::NAN, 0.0);
            }
        }
    }
    (loss, margin)
}

fn run_plan_f32(plan: &Plan, tape: &mut Tape, leaves: &[Tensor]) -> (VarId, Vec<VarId>) {
    let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let mut values = ids.clone();
    for op in &plan.ops {
        let out = match *op {
            PlanOp::Unary(kind, a) => match UNARY_NAMES[kind as usize] {
                "neg" => tape.neg(values[a]),
                "softplus" => tape.softplus(values[a]),
                "sigmoid" => tape.sigmoid(values[a]),
                "relu" => tape.relu(values[a]),
                "leaky_relu" => tape.leaky_relu(values[a], 0.2),
                "exp" => tape.exp(values[a]),
                _ => unreachable!(),
            },
            PlanOp::Binary(kind, a, b) => match BINARY_NAMES[kind as usize] {
                "add" => tape.add(values[a], values[b]),
                "sub" => tape.sub(values[a], values[b]),
                "mul" => tape.mul(values[a], values[b]),
                _ => unreachable!(),
            },
            PlanOp::Reduce(kind, a) => {
                let r = match REDUCE_NAMES[kind as usize] {
                    "sum" => tape.sum(values[a]),
                    "mean" => tape.mean(values[a]),
                    "max" => tape.max(values[a]),
                    _ => unreachable!(),
                };
                tape.reshape(r, &[1, 1, 1])
            }
        };
        values.push(out);
    }
    let last = *values.last().unwrap();
    let loss = tape.mean(last);
    (loss, ids)
}

fn check_composite(index: usize, rng: &mut Rng) -> CheckResult {
    // Draw plans and inputs until every kink keeps a safe margin.
    for attempt in 0..200 {
        let mut sub = rng.fork(index as u64 * 1000 + attempt);
        let plan = random_plan(&mut sub);
        let leaves: Vec<Tensor> =
            plan.leaf_shapes.iter().map(|s| unit_tensor(s, &mut sub)).collect();
        let leaves_f64: Vec<Vec<f64>> =
            leaves.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
        let (loss, margin) = run_plan_f64(&plan, &leaves_f64);
        if !loss.is_finite() || margin < KINK_MARGIN {
            continue;
        }
        return check_gradients(
            &format!("composite/graph_{index:02}"),
            &leaves,
            TOL_PRIMITIVE,
            |tape| run_plan_f32(&plan, tape, &leaves),
            |xs| run_plan_f64(&plan, &xs.to_vec()).0,
        );
    }
    panic!("no well-conditioned composite instance found for index {index}");
}

// ── Tiny full models ────────────────────────────────────────────────────────

fn collect_params(net: &Network) -> Vec<Tensor> {
    let mut out = Vec::new();
    net.for_each_param(|_, t| out.push(t.clone()));
    out
}

fn check_segnet_tiny(rng: &mut Rng) -> CheckResult {
    let cfg = SegNetConfig {
        num_blocks: 1,
        channels: 2,
        kernel: 3,
        num_classes: 2,
        input_channels: 1,
        decoder_relu: false,
    };
    for attempt in 0..200 {
        let mut sub = rng.fork(7000 + attempt);
        let mut net = build_segnet(&cfg, &mut sub);
        let x = unit_tensor(&[1, 1, 8, 8], &mut sub);
        let labels = LabelMap::new(
            &[1, 8, 8],
            (0..64).map(|_| sub.below(2) as u8).collect(),
        );
        let params = collect_params(&net);
        let params_f64: Vec<Vec<f64>> = params
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let x_f64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let walk = reference::network_forward(net.layers(), &params_f64, &x_f64, &[1, 1, 8, 8]);
        if walk.kink_margin < 0.012 {
            continue;
        }
        let labels_ids = labels.ids().to_vec();
        let layers = net.layers().to_vec();
        let mut inputs = vec![x.clone()];
        inputs.extend(params.iter().cloned());
        return check_gradients(
            "model/segnet_tiny",
            &inputs,
            TOL_MODEL,
            |tape| {
                let xi = tape.leaf(&x);
                let (logits, binding) =
                    net.forward(tape, xi, ForwardOpts { bn: crate::layers::BnMode::TrainFrozen, trainable: true });
                let loss = supervised_loss(tape, logits, &labels);
                let mut ids = vec![xi];
                ids.extend_from_slice(binding.ids());
                (loss, ids)
            },
            |vals| {
                let walk =
                    reference::network_forward(&layers, &vals[1..], &vals[0], &[1, 1, 8, 8]);
                reference::cross_entropy_mean(
                    &walk.values,
                    &walk.shape,
                    &labels_ids,
                    crate::objectives::IGNORE_LABEL,
                )
            },
        );
    }
    panic!("no well-conditioned tiny segnet instance found");
}

fn check_discriminator_tiny(rng: &mut Rng) -> CheckResult {
    let cfg = DiscConfig {
        num_blocks: 2,
        channels: 2,
        kernel: 3,
        stride: 2,
        lrelu_slope: 0.2,
        input_channels: 2,
    };
    for attempt in 0..200 {
        let mut sub = rng.fork(8000 + attempt);
        let mut net = build_discriminator(&cfg, &mut sub);
        let x = unit_tensor(&[2, 2, 8, 8], &mut sub);
        let params = collect_params(&net);
        let params_f64: Vec<Vec<f64>> = params
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let x_f64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let walk = reference::network_forward(net.layers(), &params_f64, &x_f64, &[2, 2, 8, 8]);
        if walk.kink_margin < 0.012 {
            continue;
        }
        let layers = net.layers().to_vec();
        let mut inputs = vec![x.clone()];
        inputs.extend(params.iter().cloned());
        return check_gradients(
            "model/discriminator_tiny",
            &inputs,
            TOL_MODEL,
            |tape| {
                let xi = tape.leaf(&x);
                let (z, binding) =
                    net.forward(tape, xi, ForwardOpts { bn: crate::layers::BnMode::TrainFrozen, trainable: true });
                let loss = adversarial_loss(tape, z);
                let mut ids = vec![xi];
                ids.extend_from_slice(binding.ids());
                (loss, ids)
            },
            |vals| {
                let walk = reference::network_forward(&layers, &vals[1..], &vals[0], &[2, 2, 8, 8]);
                reference::adversarial_loss(&walk.values)
            },
        );
    }
    panic!("no well-conditioned tiny discriminator instance found");
}

/// The full check battery: every primitive, random composite graphs, every
/// layer, the objective functions, and the two tiny end-to-end models.
pub fn run_full_suite(seed: u64, scale: usize) -> GradCheckReport {
    assert!(scale >= 1, "scale must be at least 1");
    let mut rng = Rng::new(seed ^ 0x5eed_c0de);
    let mut results = Vec::new();

    for name in ["neg", "exp", "log", "softplus", "sigmoid", "relu", "leaky_relu", "scalar_mul"] {
        results.push(check_unary(name, &mut rng, scale));
    }
    for name in ["add", "sub", "mul"] {
        results.push(check_binary(name, false, &mut rng, scale));
        results.push(check_binary(name, true, &mut rng, scale));
    }
    for name in ["sum", "mean", "max"] {
        results.push(check_reduction(name, &mut rng, scale));
    }
    for i in 0..12 {
        results.push(check_composite(i, &mut rng));
    }

    results.push(check_conv(
        "layer/conv2d_k3_pad1",
        &[1, 2, 5 * scale, 5],
        3,
        3,
        1,
        1,
        &mut rng,
    ));
    results.push(check_conv(
        "layer/conv2d_stride2",
        &[2, 3, 6 * scale, 6],
        2,
        3,
        2,
        1,
        &mut rng,
    ));
    results.push(check_conv("layer/conv2d_1x1", &[2, 4, 3 * scale, 3], 3, 1, 1, 0, &mut rng));
    results.push(check_batchnorm(false, &mut rng, scale));
    results.push(check_batchnorm(true, &mut rng, scale));
    results.push(check_maxpool(&mut rng, scale));
    results.push(check_maxunpool(&mut rng, scale));
    results.push(check_gap(&mut rng, scale));
    results.push(check_linear(&mut rng, scale));
    results.push(check_softmax_channels(&mut rng, scale));

    results.push(check_supervised_loss(&mut rng, scale));
    results.push(check_discriminator_loss(&mut rng, scale));
    results.push(check_adversarial_loss(&mut rng, scale));

    results.push(check_segnet_tiny(&mut rng));
    results.push(check_discriminator_tiny(&mut rng));

    GradCheckReport { results }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{BackwardArgs, BackwardRule, GradSink};

    #[test]
    fn full_suite_passes_at_default_scale() {
        let report = run_full_suite(0, 1);
        assert!(report.all_passed(), "\n{}", report.render());
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_full_suite(3, 1);
        let b = run_full_suite(3, 1);
        let errs_a: Vec<f64> = a.results.iter().map(|r| r.max_rel_err).collect();
        let errs_b: Vec<f64> = b.results.iter().map(|r| r.max_rel_err).collect();
        assert_eq!(errs_a, errs_b);
    }

    /// Exp forward with a deliberately wrong derivative (scaled by 1.01).
    struct CorruptedExp;

    impl BackwardRule for CorruptedExp {
        fn name(&self) -> &'static str {
            "corrupted_exp"
        }

        fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
            let y = args.output_value().to_vec();
            let g = args.grad_out;
            sink.with(args.inputs[0], |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * y[i] * 1.01;
                }
            });
        }
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let mut rng = Rng::new(5);
        let x = unit_tensor(&[2, 3], &mut rng);
        let result = check_gradients(
            "fixture/corrupted_exp",
            &[x.clone()],
            TOL_PRIMITIVE,
            |tape| {
                let xi = tape.leaf(&x);
                let data: Vec<f32> = tape.value(xi).iter().map(|v| v.exp()).collect();
                let y = tape.record(&[xi], vec![2, 3], data, Box::new(CorruptedExp));
                (tape.sum(y), vec![xi])
            },
            |xs| xs[0].iter().map(|&v| v.exp()).sum(),
        );
        assert!(!result.passed(), "harness must flag a corrupted rule");
        assert!(result.max_rel_err > 1e-3);
    }

    #[test]
    fn report_lists_every_check_with_its_error() {
        let report = run_full_suite(1, 1);
        let rendered = report.render();
        assert!(rendered.contains("model/segnet_tiny"));
        assert!(rendered.contains("primitive/leaky_relu"));
        assert!(rendered.contains("max rel err"));
        assert!(report.results.iter().all(|r| r.coords > 0));
    }
}
