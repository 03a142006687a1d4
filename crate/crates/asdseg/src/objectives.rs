//! Cost functions and evaluation metrics: per-pixel supervised cross-entropy,
//! the discriminator cross-entropy, the adversarial cost on unlabelled
//! outputs, their weighted total, and the IoU / per-class recall / global
//! precision report.
//!
//! The discriminator-side losses are computed in logit space (softplus
//! forms), which is algebraically equal to the sigmoid cross-entropies but
//! immune to saturation.

use crate::tape::{BackwardArgs, BackwardRule, GradSink, Tape, VarId};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids, shape [N×H×W] (or [H×W] for a single sample).
/// Values are class ids or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: &[usize], ids: Vec<u8>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, ids.len(), "label shape {shape:?} vs {} ids", ids.len());
        LabelMap { shape: shape.to_vec(), ids }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn numel(&self) -> usize {
        self.ids.len()
    }

    /// Every non-ignore id is below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) {
        for &id in &self.ids {
            assert!(
                id == IGNORE_LABEL || (id as usize) < num_classes,
                "label id {id} out of range for {num_classes} classes"
            );
        }
    }

    /// Stack per-sample [H×W] maps into one [N×H×W] map.
    pub fn stack(maps: &[&LabelMap]) -> LabelMap {
        assert!(!maps.is_empty());
        let hw = maps[0].shape.clone();
        let mut ids = Vec::with_capacity(maps.len() * maps[0].numel());
        for m in maps {
            assert_eq!(m.shape, hw, "stacked label maps must share extents");
            ids.extend_from_slice(&m.ids);
        }
        let mut shape = vec![maps.len()];
        shape.extend_from_slice(&hw);
        LabelMap::new(&shape, ids)
    }
}

/// Weight of the adversarial term in the total cost. Zero reduces training
/// to the fully supervised baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaWeight(f32);

impl AlphaWeight {
    pub fn new(alpha: f32) -> Self {
        assert!(alpha >= 0.0 && alpha.is_finite(), "alpha must be non-negative, got {alpha}");
        AlphaWeight(alpha)
    }

    pub fn value(self) -> f32 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

// ── Supervised cross-entropy ────────────────────────────────────────────────

struct CrossEntropyMeanRule {
    labels: Vec<u8>,
    valid: usize,
}

impl BackwardRule for CrossEntropyMeanRule {
    fn name(&self) -> &'static str {
        "supervised_loss"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let shape = args.shape(args.inputs[0]).to_vec();
        let (n, k, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let z = args.value(args.inputs[0]).to_vec();
        let g = args.grad_out[0] / self.valid as f32;
        sink.with(args.inputs[0], |dz| {
            let mut probs = vec![0.0f32; k];
            for ni in 0..n {
                for p in 0..plane {
                    let label = self.labels[ni * plane + p];
                    if label == IGNORE_LABEL {
                        continue;
                    }
                    let mut m = f32::NEG_INFINITY;
                    for ci in 0..k {
                        m = m.max(z[(ni * k + ci) * plane + p]);
                    }
                    let mut sum = 0.0f32;
                    for ci in 0..k {
                        let e = (z[(ni * k + ci) * plane + p] - m).exp();
                        probs[ci] = e;
                        sum += e;
                    }
                    for ci in 0..k {
                        let soft = probs[ci] / sum;
                        let target = if ci as u8 == label { 1.0 } else { 0.0 };
                        dz[(ni * k + ci) * plane + p] += g * (soft - target);
                    }
                }
            }
        });
    }
}

/// Mean over non-ignore pixels of −log softmax(logits)[label].
/// Logits are [N×K×H×W]; labels [N×H×W].
pub fn supervised_loss(tape: &mut Tape, logits: VarId, labels: &LabelMap) -> VarId {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 4, "supervised_loss expects N×K×H×W logits");
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(
        labels.shape(),
        &[n, h, w],
        "labels {:?} do not match logits {shape:?}",
        labels.shape()
    );
    labels.validate_classes(k);

    let plane = h * w;
    let z = tape.value(logits);
    let mut total = 0.0f64;
    let mut valid = 0usize;
    for ni in 0..n {
        for p in 0..plane {
            let label = labels.ids()[ni * plane + p];
            if label == IGNORE_LABEL {
                continue;
            }
            valid += 1;
            let mut m = f32::NEG_INFINITY;
            for ci in 0..k {
                m = m.max(z[(ni * k + ci) * plane + p]);
            }
            let mut sum = 0.0f32;
            for ci in 0..k {
                sum += (z[(ni * k + ci) * plane + p] - m).exp();
            }
            let zl = z[(ni * k + label as usize) * plane + p];
            total += (m + sum.ln() - zl) as f64;
        }
    }
    assert!(valid > 0, "supervised_loss: every pixel is ignored");
    let loss = (total / valid as f64) as f32;
    tape.record(
        &[logits],
        vec![1],
        vec![loss],
        Box::new(CrossEntropyMeanRule { labels: labels.ids().to_vec(), valid }),
    )
}

// ── Discriminator-side losses ───────────────────────────────────────────────

/// Cross-entropy of the binary discriminator in logit space:
/// mean over t of softplus(−z_t) + mean over u of softplus(z_u).
/// Equal to −E[log D(y_t)] − E[log(1 − D(y_u))] with D = sigmoid(z).
pub fn discriminator_loss(tape: &mut Tape, logit_t: VarId, logit_u: VarId) -> VarId {
    assert!(tape.numel(logit_t) > 0 && tape.numel(logit_u) > 0);
    let neg_t = tape.neg(logit_t);
    let sp_t = tape.softplus(neg_t);
    let mean_t = tape.mean(sp_t);
    let sp_u = tape.softplus(logit_u);
    let mean_u = tape.mean(sp_u);
    tape.add(mean_t, mean_u)
}

/// Unsupervised cost on unlabelled outputs: mean of softplus(−z_u), i.e.
/// E[−log D(y_u)] in logit space.
pub fn adversarial_loss(tape: &mut Tape, logit_u: VarId) -> VarId {
    assert!(tape.numel(logit_u) > 0);
    let neg = tape.neg(logit_u);
    let sp = tape.softplus(neg);
    tape.mean(sp)
}

/// Total cost: sup + alpha · adv.
pub fn total_cost(tape: &mut Tape, sup: VarId, adv: VarId, alpha: AlphaWeight) -> VarId {
    let scaled = tape.scalar_mul(adv, alpha.value());
    tape.add(sup, scaled)
}

// ── Metrics ─────────────────────────────────────────────────────────────────

/// Raw per-class pixel counts, sufficient to recompute every aggregate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    /// pred == c and gt == c
    pub intersection: u64,
    /// pred == c or gt == c
    pub union: u64,
    /// Same as intersection; kept for the recall decomposition.
    pub tp: u64,
    /// gt == c and pred != c
    pub fn_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean over classes with nonempty union of intersection/union.
    pub iou: f64,
    /// Mean over classes present in ground truth of TP/(TP+FN).
    pub class_recall: f64,
    /// Correct pixels over all non-ignore pixels.
    pub global_precision: f64,
    pub per_class: Vec<ClassCounts>,
    pub correct: u64,
    pub valid: u64,
}

impl MetricsReport {
    /// Recompute the three aggregates from the raw counts.
    pub fn recompute(per_class: &[ClassCounts], correct: u64, valid: u64) -> (f64, f64, f64) {
        let mut iou_sum = 0.0;
        let mut iou_n = 0usize;
        let mut rec_sum = 0.0;
        let mut rec_n = 0usize;
        for c in per_class {
            if c.union > 0 {
                iou_sum += c.intersection as f64 / c.union as f64;
                iou_n += 1;
            }
            let gt_total = c.tp + c.fn_count;
            if gt_total > 0 {
                rec_sum += c.tp as f64 / gt_total as f64;
                rec_n += 1;
            }
        }
        let iou = if iou_n > 0 { iou_sum / iou_n as f64 } else { 0.0 };
        let recall = if rec_n > 0 { rec_sum / rec_n as f64 } else { 0.0 };
        let precision = correct as f64 / valid as f64;
        (iou, recall, precision)
    }
}

/// Count-based segmentation metrics over all non-ignore pixels. Classes
/// absent from both prediction and ground truth are excluded from the IoU
/// mean; classes absent from ground truth are excluded from recall.
pub fn evaluate_metrics(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> MetricsReport {
    assert_eq!(pred.shape(), gt.shape(), "prediction and ground truth shapes differ");
    pred.validate_classes(num_classes);
    gt.validate_classes(num_classes);

    let mut per_class = vec![ClassCounts::default(); num_classes];
    let mut correct = 0u64;
    let mut valid = 0u64;
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if g == IGNORE_LABEL {
            continue;
        }
        valid += 1;
        let (p, g) = (p as usize, g as usize);
        if p == g {
            correct += 1;
            per_class[p].intersection += 1;
            per_class[p].tp += 1;
            per_class[p].union += 1;
        } else {
            per_class[p].union += 1;
            per_class[g].union += 1;
            per_class[g].fn_count += 1;
        }
    }
    assert!(valid > 0, "evaluate_metrics: no valid pixels");
    let (iou, class_recall, global_precision) =
        MetricsReport::recompute(&per_class, correct, valid);
    MetricsReport { iou, class_recall, global_precision, per_class, correct, valid }
}

/// Per-pixel argmax over the channel axis; smallest class id wins ties.
pub fn argmax_labels(logits: &Tensor) -> LabelMap {
    let shape = logits.shape();
    assert_eq!(shape.len(), 4, "argmax_labels expects N×K×H×W");
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(k <= IGNORE_LABEL as usize, "too many classes for u8 labels");
    let plane = h * w;
    let data = logits.data();
    let mut ids = vec![0u8; n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[ni * k * plane + p];
            for ci in 1..k {
                let v = data[(ni * k + ci) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            ids[ni * plane + p] = best as u8;
        }
    }
    LabelMap::new(&[n, h, w], ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::stable_sigmoid;

    fn logits_leaf(tape: &mut Tape, shape: &[usize], data: Vec<f32>) -> VarId {
        let t = Tensor::new(shape, data).with_requires_grad();
        tape.leaf(&t)
    }

    // Independent 64-bit per-pixel softmax cross-entropy.
    fn ce_oracle(shape: &[usize], z: &[f32], labels: &[u8]) -> f64 {
        let (n, k, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for ni in 0..n {
            for p in 0..plane {
                let label = labels[ni * plane + p];
                if label == IGNORE_LABEL {
                    continue;
                }
                count += 1;
                let vals: Vec<f64> =
                    (0..k).map(|c| z[(ni * k + c) * plane + p] as f64).collect();
                let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - vals[label as usize];
            }
        }
        total / count as f64
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let mut tape = Tape::new();
        let z = logits_leaf(&mut tape, &[1, 4, 2, 2], vec![0.3; 16]);
        let labels = LabelMap::new(&[1, 2, 2], vec![0, 1, 2, 3]);
        let loss = supervised_loss(&mut tape, z, &labels);
        assert!((tape.item(loss) - (4.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logits_cost_nothing() {
        let mut tape = Tape::new();
        let mut data = vec![0.0f32; 2 * 2 * 1 * 1];
        // favor the true class by +1000
        data[0] = 1000.0; // sample 0, class 0
        data[3] = 1000.0; // sample 1, class 1
        let z = logits_leaf(&mut tape, &[2, 2, 1, 1], data);
        let labels = LabelMap::new(&[2, 1, 1], vec![0, 1]);
        let loss = supervised_loss(&mut tape, z, &labels);
        assert!(tape.item(loss).abs() < 1e-6);
    }

    #[test]
    fn random_case_matches_brute_force_oracle() {
        let mut rng = Rng::new(42);
        let shape = [2usize, 3, 2, 2];
        let data: Vec<f32> = (0..24).map(|_| rng.range_f32(-2.0, 2.0)).collect();
        let labels: Vec<u8> = (0..8).map(|_| rng.below(3) as u8).collect();
        let mut tape = Tape::new();
        let z = logits_leaf(&mut tape, &shape, data.clone());
        let lm = LabelMap::new(&[2, 2, 2], labels.clone());
        let loss = supervised_loss(&mut tape, z, &lm);
        let expect = ce_oracle(&shape, &data, &labels);
        assert!((tape.item(loss) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn ignored_pixels_are_excluded() {
        let mut tape = Tape::new();
        let mut data = vec![0.0f32; 8];
        data[0] = 5.0;
        let z = logits_leaf(&mut tape, &[1, 2, 2, 2], data);
        let labels = LabelMap::new(&[1, 2, 2], vec![0, IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL]);
        let loss = supervised_loss(&mut tape, z, &labels);
        // only the first pixel counts: softmax over (5, 0)
        let expect = ((5.0f64).exp() + 1.0).ln() - 5.0;
        assert!((tape.item(loss) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "every pixel is ignored")]
    fn all_ignored_is_a_contract_error() {
        let mut tape = Tape::new();
        let z = logits_leaf(&mut tape, &[1, 2, 1, 1], vec![0.0, 0.0]);
        let labels = LabelMap::new(&[1, 1, 1], vec![IGNORE_LABEL]);
        let _ = supervised_loss(&mut tape, z, &labels);
    }

    #[test]
    fn zero_logits_discriminator_loss_is_two_ln_two() {
        let mut tape = Tape::new();
        let zt = logits_leaf(&mut tape, &[3, 1], vec![0.0; 3]);
        let zu = logits_leaf(&mut tape, &[2, 1], vec![0.0; 2]);
        let loss = discriminator_loss(&mut tape, zt, zu);
        assert!((tape.item(loss) - 2.0 * std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn perfect_discrimination_limit_is_zero() {
        let mut tape = Tape::new();
        let zt = logits_leaf(&mut tape, &[2, 1], vec![40.0, 50.0]);
        let zu = logits_leaf(&mut tape, &[2, 1], vec![-40.0, -50.0]);
        let loss = discriminator_loss(&mut tape, zt, zu);
        assert!(tape.item(loss).abs() < 1e-6);
    }

    fn sigmoid64(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    fn sigmoid_space_disc_loss(zt: &[f32], zu: &[f32]) -> f64 {
        // 1 − σ(z) evaluated as σ(−z): same definition, no cancellation.
        let dt: f64 =
            zt.iter().map(|&z| -sigmoid64(z as f64).ln()).sum::<f64>() / zt.len() as f64;
        let du: f64 =
            zu.iter().map(|&z| -sigmoid64(-(z as f64)).ln()).sum::<f64>() / zu.len() as f64;
        dt + du
    }

    #[test]
    fn logit_space_formulation_equals_sigmoid_space() {
        // The softplus form is the same objective as the -log sigmoid form:
        // in 64-bit both routes agree to 1e-6 absolute over the whole
        // [-30, 30] range where the clamped-sigmoid route would saturate.
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let zt: Vec<f32> = (0..4).map(|_| rng.range_f32(-30.0, 30.0)).collect();
            let zu: Vec<f32> = (0..3).map(|_| rng.range_f32(-30.0, 30.0)).collect();
            let softplus64 = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
            let logit_form = zt.iter().map(|&z| softplus64(-(z as f64))).sum::<f64>()
                / zt.len() as f64
                + zu.iter().map(|&z| softplus64(z as f64)).sum::<f64>() / zu.len() as f64;
            let sigmoid_form = sigmoid_space_disc_loss(&zt, &zu);
            assert!(
                (logit_form - sigmoid_form).abs() < 1e-6,
                "{logit_form} vs {sigmoid_form}"
            );
        }
    }

    #[test]
    fn implementation_matches_sigmoid_space_oracle() {
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let zt: Vec<f32> = (0..4).map(|_| rng.range_f32(-30.0, 30.0)).collect();
            let zu: Vec<f32> = (0..3).map(|_| rng.range_f32(-30.0, 30.0)).collect();
            let mut tape = Tape::new();
            let t = logits_leaf(&mut tape, &[4, 1], zt.clone());
            let u = logits_leaf(&mut tape, &[3, 1], zu.clone());
            let loss = discriminator_loss(&mut tape, t, u);
            let expect = sigmoid_space_disc_loss(&zt, &zu);
            // 32-bit values: tolerance scales with the loss magnitude.
            let tol = 1e-6 * expect.abs().max(1.0);
            assert!(
                (tape.item(loss) as f64 - expect).abs() < tol,
                "logit-space {} vs sigmoid-space {expect}",
                tape.item(loss)
            );
        }
    }

    #[test]
    fn adversarial_loss_values() {
        // z = 0 → ln 2; z → +∞ → 0; z = −2 → softplus(2)
        let eval = |z: f32| -> f32 {
            let mut tape = Tape::new();
            let v = logits_leaf(&mut tape, &[1, 1], vec![z]);
            let loss = adversarial_loss(&mut tape, v);
            tape.item(loss)
        };
        assert!((eval(0.0) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(eval(60.0).abs() < 1e-6);
        // softplus(2) evaluated in 64-bit: ln(1 + e^2)
        assert!((eval(-2.0) as f64 - 2.1269280110429727).abs() < 1e-6);
    }

    #[test]
    fn total_cost_is_affine_in_adv() {
        let mut tape = Tape::new();
        let sup = logits_leaf(&mut tape, &[1], vec![1.0]);
        let adv = logits_leaf(&mut tape, &[1], vec![2.0]);
        let t = total_cost(&mut tape, sup, adv, AlphaWeight::new(0.5));
        assert_eq!(tape.item(t), 2.0);
        tape.backward(t);
        assert_eq!(tape.grad(sup).unwrap(), &[1.0]);
        assert_eq!(tape.grad(adv).unwrap(), &[0.5]);
    }

    #[test]
    fn alpha_zero_total_cost_is_supervised_only() {
        let mut tape = Tape::new();
        let sup = logits_leaf(&mut tape, &[1], vec![1.25]);
        let adv = logits_leaf(&mut tape, &[1], vec![7.0]);
        let t = total_cost(&mut tape, sup, adv, AlphaWeight::new(0.0));
        assert_eq!(tape.item(t), 1.25);
    }

    #[test]
    fn losses_are_nonnegative_at_random_points() {
        let mut rng = Rng::new(909);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let zt: Vec<f32> = (0..5).map(|_| rng.range_f32(-10.0, 10.0)).collect();
            let zu: Vec<f32> = (0..5).map(|_| rng.range_f32(-10.0, 10.0)).collect();
            let t = logits_leaf(&mut tape, &[5, 1], zt);
            let u = logits_leaf(&mut tape, &[5, 1], zu);
            let d = discriminator_loss(&mut tape, t, u);
            let a = adversarial_loss(&mut tape, u);
            assert!(tape.item(d) >= 0.0);
            assert!(tape.item(a) >= 0.0);
        }
        let _ = stable_sigmoid(0.0);
    }

    #[test]
    fn perfect_prediction_scores_ones() {
        let gt = LabelMap::new(&[1, 2, 2], vec![0, 1, 2, 1]);
        let r = evaluate_metrics(&gt, &gt, 3);
        assert_eq!(r.iou, 1.0);
        assert_eq!(r.class_recall, 1.0);
        assert_eq!(r.global_precision, 1.0);
    }

    #[test]
    fn binary_two_by_two_hand_counts() {
        // gt = [0,0;1,1], pred = [0,1;1,1]
        let gt = LabelMap::new(&[1, 2, 2], vec![0, 0, 1, 1]);
        let pred = LabelMap::new(&[1, 2, 2], vec![0, 1, 1, 1]);
        let r = evaluate_metrics(&pred, &gt, 2);
        // class 0: I=1, U=2; class 1: I=2, U=3
        assert!((r.iou - 0.5 * (1.0 / 2.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((r.global_precision - 0.75).abs() < 1e-12);
        assert!((r.class_recall - 0.5 * (0.5 + 1.0)).abs() < 1e-12);
        assert_eq!(r.per_class[0].intersection, 1);
        assert_eq!(r.per_class[0].union, 2);
        assert_eq!(r.per_class[1].fn_count, 0);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let gt = LabelMap::new(&[1, 2, 2], vec![0, 0, 0, 0]);
        let pred = LabelMap::new(&[1, 2, 2], vec![1, 1, 1, 1]);
        let r = evaluate_metrics(&pred, &gt, 2);
        assert_eq!(r.iou, 0.0);
        assert_eq!(r.global_precision, 0.0);
    }

    // O(N·H·W·K) counting oracle, separate route from evaluate_metrics.
    fn metrics_oracle(pred: &LabelMap, gt: &LabelMap, k: usize) -> (f64, f64, f64) {
        let mut iou_terms = Vec::new();
        let mut rec_terms = Vec::new();
        let mut correct = 0u64;
        let mut valid = 0u64;
        for c in 0..k as u8 {
            let mut inter = 0u64;
            let mut union = 0u64;
            let mut gt_count = 0u64;
            for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
                if g == IGNORE_LABEL {
                    continue;
                }
                if p == c && g == c {
                    inter += 1;
                }
                if p == c || g == c {
                    union += 1;
                }
                if g == c {
                    gt_count += 1;
                }
            }
            if union > 0 {
                iou_terms.push(inter as f64 / union as f64);
            }
            if gt_count > 0 {
                rec_terms.push(inter as f64 / gt_count as f64);
            }
        }
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if g == IGNORE_LABEL {
                continue;
            }
            valid += 1;
            if p == g {
                correct += 1;
            }
        }
        (
            iou_terms.iter().sum::<f64>() / iou_terms.len() as f64,
            rec_terms.iter().sum::<f64>() / rec_terms.len() as f64,
            correct as f64 / valid as f64,
        )
    }

    #[test]
    fn metrics_match_counting_oracle_exactly() {
        let mut rng = Rng::new(31);
        for case in 0..50 {
            let h = rng.range_usize(1, 16);
            let w = rng.range_usize(1, 16);
            let k = rng.range_usize(2, 8);
            let mk = |rng: &mut Rng, allow_ignore: bool| -> LabelMap {
                let ids: Vec<u8> = (0..h * w)
                    .map(|_| {
                        if allow_ignore && rng.below(10) == 0 {
                            IGNORE_LABEL
                        } else {
                            rng.below(k) as u8
                        }
                    })
                    .collect();
                LabelMap::new(&[1, h, w], ids)
            };
            let pred = mk(&mut rng, false);
            let mut gt = mk(&mut rng, true);
            if gt.ids().iter().all(|&v| v == IGNORE_LABEL) {
                gt.ids_mut()[0] = 0;
            }
            let r = evaluate_metrics(&pred, &gt, k);
            let (iou, rec, prec) = metrics_oracle(&pred, &gt, k);
            assert_eq!(r.iou, iou, "case {case}");
            assert_eq!(r.class_recall, rec, "case {case}");
            assert_eq!(r.global_precision, prec, "case {case}");
        }
    }

    #[test]
    fn aggregates_recompute_from_per_class_counts() {
        let gt = LabelMap::new(&[1, 2, 3], vec![0, 1, 2, 0, 1, 2]);
        let pred = LabelMap::new(&[1, 2, 3], vec![0, 1, 1, 2, 1, 2]);
        let r = evaluate_metrics(&pred, &gt, 3);
        let (iou, rec, prec) = MetricsReport::recompute(&r.per_class, r.correct, r.valid);
        assert_eq!(iou, r.iou);
        assert_eq!(rec, r.class_recall);
        assert_eq!(prec, r.global_precision);
    }

    #[test]
    fn argmax_breaks_ties_toward_smaller_class() {
        let logits = Tensor::new(&[1, 3, 1, 2], vec![1.0, 5.0, 1.0, 5.0, 1.0, 2.0]);
        // pixel 0: classes (1,1,1) → tie → class 0; pixel 1: (5,5,2) → class 0
        let lm = argmax_labels(&logits);
        assert_eq!(lm.ids(), &[0, 0]);
    }

    #[test]
    #[should_panic(expected = "no valid pixels")]
    fn metrics_with_everything_ignored_panic() {
        let gt = LabelMap::new(&[1, 1, 2], vec![IGNORE_LABEL, IGNORE_LABEL]);
        let pred = LabelMap::new(&[1, 1, 2], vec![0, 0]);
        let _ = evaluate_metrics(&pred, &gt, 2);
    }
}
