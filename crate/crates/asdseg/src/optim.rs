//! SGD with momentum and weight decay, plus the staged learning-rate
//! schedule. The momentum buffer stores the decayed gradient sum (no
//! Nesterov, no learning rate folded in); decay applies to conv and linear
//! weights only, never to biases or batch-norm parameters.

use crate::models::Network;

/// Whether weight decay applies to the named parameter.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Per-network optimizer state: one momentum buffer per registered
/// parameter, in registry order.
#[derive(Debug, Clone)]
pub struct SgdState {
    momentum_buffers: Vec<Vec<f32>>,
    pub mu: f32,
    pub beta_wd: f32,
    pub lr: f32,
}

impl SgdState {
    pub fn new(net: &Network, mu: f32, beta_wd: f32) -> Self {
        let mut buffers = Vec::new();
        net.for_each_param(|_, t| buffers.push(vec![0.0f32; t.numel()]));
        SgdState { momentum_buffers: buffers, mu, beta_wd, lr: 0.0 }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }
}

/// One SGD step over every parameter: g ← g + β·w (decayed weights only),
/// buf ← mu·buf + g, w ← w − lr·buf. Gradients must be present; they are
/// left in place for the caller to clear.
pub fn update(net: &mut Network, state: &mut SgdState) {
    let mut i = 0;
    let (mu, beta, lr) = (state.mu, state.beta_wd, state.lr);
    let buffers = &mut state.momentum_buffers;
    net.for_each_param_mut(|name, t| {
        let buf = &mut buffers[i];
        i += 1;
        let apply_decay = decays(name) && beta != 0.0;
        let n = t.numel();
        let grad = t
            .grad()
            .unwrap_or_else(|| panic!("missing gradient for parameter `{name}`"))
            .to_vec();
        let w = t.data_mut();
        debug_assert_eq!(buf.len(), n);
        for k in 0..n {
            let mut g = grad[k];
            if apply_decay {
                g += beta * w[k];
            }
            buf[k] = mu * buf[k] + g;
            w[k] -= lr * buf[k];
        }
    });
    assert_eq!(i, buffers.len(), "network parameters do not match optimizer state");
}

/// Ordered (iterations, learning-rate) stages, consumed in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    stages: Vec<(usize, f32)>,
}

impl LrSchedule {
    pub fn new(stages: Vec<(usize, f32)>) -> Self {
        assert!(!stages.is_empty(), "schedule needs at least one stage");
        for &(n, lr) in &stages {
            assert!(n > 0, "schedule stage with zero iterations");
            assert!(lr > 0.0 && lr.is_finite());
        }
        LrSchedule { stages }
    }

    /// The four-stage schedule: 10^4 iterations at 0.1, then 4·10^3 at 0.05,
    /// 4·10^3 at 0.025, and 2·10^3 at 0.0125.
    pub fn paper() -> Self {
        LrSchedule::new(vec![(10_000, 0.1), (4_000, 0.05), (4_000, 0.025), (2_000, 0.0125)])
    }

    /// Same stage structure with iteration counts divided by `divisor`
    /// (learning-rate values unchanged, every stage at least one iteration).
    pub fn scaled(&self, divisor: usize) -> Self {
        assert!(divisor >= 1);
        LrSchedule::new(
            self.stages.iter().map(|&(n, lr)| ((n / divisor).max(1), lr)).collect(),
        )
    }

    pub fn stages(&self) -> &[(usize, f32)] {
        &self.stages
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|&(n, _)| n).sum()
    }

    /// Learning rate of the stage containing `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f32 {
        let mut start = 0;
        for &(n, lr) in &self.stages {
            if iteration < start + n {
                return lr;
            }
            start += n;
        }
        panic!(
            "iteration {iteration} beyond schedule of {} iterations",
            self.total_iterations()
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_discriminator, DiscConfig, ForwardOpts};
    use crate::objectives::adversarial_loss;
    use crate::rng::Rng;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn tiny_disc(seed: u64) -> crate::models::Network {
        let cfg = DiscConfig {
            num_blocks: 1,
            channels: 2,
            kernel: 3,
            stride: 2,
            lrelu_slope: 0.2,
            input_channels: 2,
        };
        build_discriminator(&cfg, &mut Rng::new(seed))
    }

    #[test]
    fn vanilla_step() {
        // mu=0, beta=0, lr=1, w=2, g=3 → w = −1
        let mut net = tiny_disc(0);
        net.for_each_param_mut(|name, t| {
            if name == "head.linear.bias" {
                t.data_mut()[0] = 2.0;
            }
            let g = vec![if name == "head.linear.bias" { 3.0 } else { 0.0 }; t.numel()];
            t.accumulate_grad(&g);
        });
        let mut state = SgdState::new(&net, 0.0, 0.0);
        state.set_lr(1.0);
        update(&mut net, &mut state);
        net.for_each_param(|name, t| {
            if name == "head.linear.bias" {
                assert_eq!(t.data()[0], -1.0);
            }
        });
    }

    #[test]
    fn momentum_recursion_by_hand() {
        // mu=0.9, g=1 twice, lr=1, w0=0 → w1 = −1, w2 = −1 − 1.9 = −2.9
        let mut net = tiny_disc(1);
        net.for_each_param_mut(|name, t| {
            if name == "head.linear.bias" {
                t.data_mut()[0] = 0.0;
            }
        });
        let mut state = SgdState::new(&net, 0.9, 0.0);
        state.set_lr(1.0);
        for _ in 0..2 {
            net.zero_grads();
            net.for_each_param_mut(|name, t| {
                let g = vec![if name == "head.linear.bias" { 1.0 } else { 0.0 }; t.numel()];
                t.accumulate_grad(&g);
            });
            update(&mut net, &mut state);
        }
        net.for_each_param(|name, t| {
            if name == "head.linear.bias" {
                assert!((t.data()[0] + 2.9).abs() < 1e-6);
            }
        });
    }

    #[test]
    fn zero_gradient_zero_buffer_is_a_noop() {
        let mut net = tiny_disc(2);
        let before = net.state_snapshot();
        net.for_each_param_mut(|_, t| t.accumulate_grad(&vec![0.0; t.numel()]));
        let mut state = SgdState::new(&net, 0.9, 0.0);
        state.set_lr(0.1);
        update(&mut net, &mut state);
        assert_eq!(net.state_snapshot(), before);
    }

    #[test]
    #[should_panic(expected = "missing gradient")]
    fn missing_gradient_is_a_contract_error() {
        let mut net = tiny_disc(3);
        let mut state = SgdState::new(&net, 0.9, 0.0);
        state.set_lr(0.1);
        update(&mut net, &mut state);
    }

    #[test]
    fn weight_decay_equals_explicit_l2_augmentation() {
        // A step with beta_wd = β must equal a step with beta_wd = 0 on the
        // cost augmented by (β/2)·Σ w² over the decayed parameters.
        let beta = 0.05f32;
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(&[2, 2, 8, 8], -1.0, 1.0, &mut rng);

        let run = |decay_in_optimizer: bool| -> Vec<f32> {
            let mut net = tiny_disc(4);
            let mut tape = Tape::new();
            let xi = tape.constant_from(&x);
            let (z, binding) = net.forward(
                &mut tape,
                xi,
                ForwardOpts { bn: crate::layers::BnMode::TrainFrozen, trainable: true },
            );
            let mut loss = adversarial_loss(&mut tape, z);
            if !decay_in_optimizer {
                // explicit (β/2)|w|² over decayed params
                let mut names = Vec::new();
                net.for_each_param(|name, _| names.push(name.to_string()));
                for (id, name) in binding.ids().iter().zip(&names) {
                    if decays(name) {
                        let sq = tape.mul(*id, *id);
                        let s = tape.sum(sq);
                        let scaled = tape.scalar_mul(s, beta / 2.0);
                        loss = tape.add(loss, scaled);
                    }
                }
            }
            tape.backward(loss);
            net.zero_grads();
            net.write_grads(&tape, &binding);
            let mut state =
                SgdState::new(&net, 0.0, if decay_in_optimizer { beta } else { 0.0 });
            state.set_lr(0.1);
            update(&mut net, &mut state);
            let mut out = Vec::new();
            net.for_each_param(|_, t| out.extend_from_slice(t.data()));
            out
        };

        let with_decay = run(true);
        let with_explicit = run(false);
        for (a, b) in with_decay.iter().zip(&with_explicit) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn paper_schedule_boundaries() {
        let s = LrSchedule::paper();
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(9_999), 0.1);
        assert_eq!(s.lr_at(10_000), 0.05);
        assert_eq!(s.lr_at(13_999), 0.05);
        assert_eq!(s.lr_at(14_000), 0.025);
        assert_eq!(s.lr_at(18_000), 0.0125);
        assert_eq!(s.total_iterations(), 20_000);
    }

    #[test]
    fn desk_schedule_keeps_lr_values() {
        let s = LrSchedule::paper().scaled(50);
        assert_eq!(
            s.stages(),
            &[(200, 0.1), (80, 0.05), (80, 0.025), (40, 0.0125)]
        );
        assert_eq!(s.total_iterations(), 400);
    }

    #[test]
    fn lr_is_non_increasing_over_the_paper_schedule() {
        let s = LrSchedule::paper();
        let mut last = f32::INFINITY;
        for i in 0..s.total_iterations() {
            let lr = s.lr_at(i);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    #[should_panic(expected = "beyond schedule")]
    fn iteration_past_schedule_panics() {
        let s = LrSchedule::paper();
        let _ = s.lr_at(20_000);
    }

    #[test]
    fn decay_excludes_biases_and_bn() {
        assert!(decays("enc0.conv.weight"));
        assert!(decays("head.linear.weight"));
        assert!(!decays("enc0.conv.bias"));
        assert!(!decays("enc0.bn.gamma"));
        assert!(!decays("enc0.bn.beta"));
    }
}
