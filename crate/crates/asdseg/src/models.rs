//! Builders for the two networks: the encoder–decoder segmentation network
//! and the binary discriminator. Desk-scale defaults keep the paper's block
//! grammar (conv-BN-ReLU-pool encoder, unpool-conv-BN decoder, strided
//! conv-BN-LReLU discriminator with global average pooling) at CPU-friendly
//! sizes; paper-scale values stay expressible through the configs.

use crate::layers::{
    batchnorm_forward, conv2d_forward, global_avg_pool, linear, maxpool2d, maxunpool2d,
    softmax_channels, BatchNorm2d, BnMode, Conv2d, Linear, PoolIndices,
};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Segmentation network shape. Input extents must be divisible by
/// 2^num_blocks so every pooling stage halves cleanly.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNetConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    /// Follow each decoder conv-BN with a ReLU. The listed decoder block has
    /// none; off by default.
    pub decoder_relu: bool,
}

impl SegNetConfig {
    /// CPU-trainable default: 2 blocks of 16 channels, 3×3 kernels, 4 classes.
    pub fn desk() -> Self {
        SegNetConfig {
            num_blocks: 2,
            channels: 16,
            kernel: 3,
            num_classes: 4,
            input_channels: 3,
            decoder_relu: false,
        }
    }

    /// Full-scale segnet-basic: four blocks of 64 filters of size 7, 11 classes.
    pub fn paper() -> Self {
        SegNetConfig {
            num_blocks: 4,
            channels: 64,
            kernel: 7,
            num_classes: 11,
            input_channels: 3,
            decoder_relu: false,
        }
    }

    pub fn validate(&self) {
        assert!(self.num_blocks >= 1, "segnet needs at least one block");
        assert!(self.channels >= 1);
        assert!(self.kernel % 2 == 1, "segnet kernel must be odd, got {}", self.kernel);
        assert!(self.num_classes >= 2, "segmentation needs at least two classes");
        assert!(self.input_channels >= 1);
    }
}

/// Discriminator shape. Consumes the segmentation network's per-pixel output
/// map, so `input_channels` normally equals the class count.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub lrelu_slope: f32,
    pub input_channels: usize,
}

impl DiscConfig {
    pub fn desk(input_channels: usize) -> Self {
        DiscConfig {
            num_blocks: 2,
            channels: 16,
            kernel: 3,
            stride: 2,
            lrelu_slope: 0.2,
            input_channels,
        }
    }

    /// Full-scale: three blocks of 64 filters of size 3 with stride 2.
    pub fn paper(input_channels: usize) -> Self {
        DiscConfig {
            num_blocks: 3,
            channels: 64,
            kernel: 3,
            stride: 2,
            lrelu_slope: 0.2,
            input_channels,
        }
    }

    pub fn validate(&self) {
        assert!(self.num_blocks >= 1);
        assert!(self.channels >= 1);
        assert!(self.kernel % 2 == 1, "discriminator kernel must be odd");
        assert!(self.stride >= 2, "discriminator blocks must downsample");
        assert!(
            self.lrelu_slope > 0.0 && self.lrelu_slope < 1.0,
            "leaky slope must lie in (0, 1)"
        );
        assert!(self.input_channels >= 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One stage of a network's layer sequence.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Relu,
    LeakyRelu(f32),
    MaxPool(usize),
    /// Pops the indices exported by the matching encoder pool.
    MaxUnpool(usize),
    GlobalAvgPool,
    Linear(Linear),
}

/// A parameterized differentiable function: an ordered layer list plus the
/// registry of named parameters (deterministic enumeration order) and named
/// buffers (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    names: Vec<String>,
    mode: Mode,
}

/// How one forward pass treats parameters and batch-norm statistics.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub bn: BnMode,
    /// Bind parameters as gradient leaves (true) or frozen constants (false).
    pub trainable: bool,
}

impl ForwardOpts {
    /// Training pass: batch statistics, running stats updated, grads recorded.
    pub fn train() -> Self {
        ForwardOpts { bn: BnMode::TrainUpdate, trainable: true }
    }

    /// Value-only pass in train-style normalization; nothing mutated or recorded.
    pub fn frozen() -> Self {
        ForwardOpts { bn: BnMode::TrainFrozen, trainable: false }
    }

    /// Deterministic inference pass using running statistics.
    pub fn eval() -> Self {
        ForwardOpts { bn: BnMode::Eval, trainable: false }
    }
}

/// Tape variables bound to the network parameters during one forward call,
/// aligned with the parameter enumeration order.
pub struct ParamBinding(Vec<VarId>);

impl ParamBinding {
    pub fn ids(&self) -> &[VarId] {
        &self.0
    }
}

impl Network {
    fn new(layers: Vec<Layer>, names: Vec<String>) -> Self {
        debug_assert_eq!(layers.len(), names.len());
        Network { layers, names, mode: Mode::Train }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Visit trainable parameters as (name, tensor) in deterministic order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (layer, name) in self.layers.iter().zip(&self.names) {
            match layer {
                Layer::Conv(c) => {
                    f(&format!("{name}.weight"), &c.weight);
                    f(&format!("{name}.bias"), &c.bias);
                }
                Layer::Bn(bn) => {
                    f(&format!("{name}.gamma"), &bn.gamma);
                    f(&format!("{name}.beta"), &bn.beta);
                }
                Layer::Linear(l) => {
                    f(&format!("{name}.weight"), &l.weight);
                    f(&format!("{name}.bias"), &l.bias);
                }
                _ => {}
            }
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (layer, name) in self.layers.iter_mut().zip(&self.names) {
            match layer {
                Layer::Conv(c) => {
                    f(&format!("{name}.weight"), &mut c.weight);
                    f(&format!("{name}.bias"), &mut c.bias);
                }
                Layer::Bn(bn) => {
                    f(&format!("{name}.gamma"), &mut bn.gamma);
                    f(&format!("{name}.beta"), &mut bn.beta);
                }
                Layer::Linear(l) => {
                    f(&format!("{name}.weight"), &mut l.weight);
                    f(&format!("{name}.bias"), &mut l.bias);
                }
                _ => {}
            }
        }
    }

    /// Visit batch-norm running statistics as (name, tensor).
    pub fn for_each_buffer(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (layer, name) in self.layers.iter().zip(&self.names) {
            if let Layer::Bn(bn) = layer {
                f(&format!("{name}.running_mean"), &bn.running_mean);
                f(&format!("{name}.running_var"), &bn.running_var);
            }
        }
    }

    pub fn for_each_buffer_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (layer, name) in self.layers.iter_mut().zip(&self.names) {
            if let Layer::Bn(bn) = layer {
                f(&format!("{name}.running_mean"), &mut bn.running_mean);
                f(&format!("{name}.running_var"), &mut bn.running_var);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    /// Concatenated copy of every parameter and buffer, for bitwise
    /// before/after comparisons in tests.
    pub fn state_snapshot(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.for_each_param(|_, t| out.extend_from_slice(t.data()));
        self.for_each_buffer(|_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Run the layer sequence on `x`, binding each parameter onto the tape as
    /// it is reached. Returns the output variable and the binding needed to
    /// pull gradients back out after `backward`.
    pub fn forward(&mut self, tape: &mut Tape, x: VarId, opts: ForwardOpts) -> (VarId, ParamBinding) {
        let mut binding = Vec::new();
        let mut pool_stack: Vec<PoolIndices> = Vec::new();
        let mut cur = x;
        let bind = |tape: &mut Tape, t: &Tensor, binding: &mut Vec<VarId>| -> VarId {
            let id = if opts.trainable { tape.leaf(t) } else { tape.constant_from(t) };
            binding.push(id);
            id
        };
        for layer in self.layers.iter_mut() {
            cur = match layer {
                Layer::Conv(c) => {
                    let w = bind(tape, &c.weight, &mut binding);
                    let b = bind(tape, &c.bias, &mut binding);
                    conv2d_forward(tape, cur, w, b, c.stride, c.padding)
                }
                Layer::Bn(bn) => {
                    let g = bind(tape, &bn.gamma, &mut binding);
                    let b = bind(tape, &bn.beta, &mut binding);
                    batchnorm_forward(tape, cur, g, b, bn, opts.bn)
                }
                Layer::Relu => tape.relu(cur),
                Layer::LeakyRelu(slope) => tape.leaky_relu(cur, *slope),
                Layer::MaxPool(k) => {
                    let (y, idx) = maxpool2d(tape, cur, *k);
                    pool_stack.push(idx);
                    y
                }
                Layer::MaxUnpool(k) => {
                    let idx = pool_stack
                        .pop()
                        .expect("decoder unpool without a matching encoder pool");
                    assert_eq!(idx.k, *k, "pool/unpool window mismatch");
                    maxunpool2d(tape, cur, &idx)
                }
                Layer::GlobalAvgPool => global_avg_pool(tape, cur),
                Layer::Linear(l) => {
                    let w = bind(tape, &l.weight, &mut binding);
                    let b = bind(tape, &l.bias, &mut binding);
                    linear(tape, cur, w, b)
                }
            };
        }
        assert!(pool_stack.is_empty(), "unconsumed pool indices after forward");
        (cur, ParamBinding(binding))
    }

    /// Accumulate tape gradients back into the parameter tensors.
    pub fn write_grads(&mut self, tape: &Tape, binding: &ParamBinding) {
        let mut i = 0;
        self.for_each_param_mut(|_, t| {
            tape.write_grad(binding.0[i], t);
            i += 1;
        });
        assert_eq!(i, binding.0.len(), "binding does not match parameter registry");
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(|_, t| t.zero_grad());
    }

    /// Value-only forward in eval mode: a pure function of input, parameters
    /// and running statistics.
    pub fn infer(&mut self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xid = tape.constant_from(x);
        let (out, _) = self.forward(&mut tape, xid, ForwardOpts::eval());
        tape.to_tensor(out)
    }
}

/// Per-pixel class probabilities from logits; the discriminator's default
/// input representation.
pub fn probability_map(tape: &mut Tape, logits: VarId) -> VarId {
    softmax_channels(tape, logits)
}

/// Encoder of conv-BN-ReLU-pool blocks, mirrored decoder of
/// unpool-conv-BN blocks consuming the encoder's pool indices in reverse
/// order, and a 1×1 conv head emitting per-pixel class logits.
pub fn build_segnet(cfg: &SegNetConfig, rng: &mut Rng) -> Network {
    cfg.validate();
    let pad = cfg.kernel / 2;
    let mut layers = Vec::new();
    let mut names = Vec::new();
    let push = |l: Layer, n: String, layers: &mut Vec<Layer>, names: &mut Vec<String>| {
        layers.push(l);
        names.push(n);
    };
    for i in 0..cfg.num_blocks {
        let c_in = if i == 0 { cfg.input_channels } else { cfg.channels };
        push(
            Layer::Conv(Conv2d::new(c_in, cfg.channels, cfg.kernel, 1, pad)),
            format!("enc{i}.conv"),
            &mut layers,
            &mut names,
        );
        push(Layer::Bn(BatchNorm2d::new(cfg.channels)), format!("enc{i}.bn"), &mut layers, &mut names);
        push(Layer::Relu, format!("enc{i}.relu"), &mut layers, &mut names);
        push(Layer::MaxPool(2), format!("enc{i}.pool"), &mut layers, &mut names);
    }
    for j in 0..cfg.num_blocks {
        push(Layer::MaxUnpool(2), format!("dec{j}.unpool"), &mut layers, &mut names);
        push(
            Layer::Conv(Conv2d::new(cfg.channels, cfg.channels, cfg.kernel, 1, pad)),
            format!("dec{j}.conv"),
            &mut layers,
            &mut names,
        );
        push(Layer::Bn(BatchNorm2d::new(cfg.channels)), format!("dec{j}.bn"), &mut layers, &mut names);
        if cfg.decoder_relu {
            push(Layer::Relu, format!("dec{j}.relu"), &mut layers, &mut names);
        }
    }
    push(
        Layer::Conv(Conv2d::new(cfg.channels, cfg.num_classes, 1, 1, 0)),
        "head.conv".to_string(),
        &mut layers,
        &mut names,
    );
    let mut net = Network::new(layers, names);
    init_params(&mut net, rng);
    net
}

/// Strided conv-BN-LReLU blocks, global average pooling, and a linear head
/// with a single output logit z; D(y) = sigmoid(z).
pub fn build_discriminator(cfg: &DiscConfig, rng: &mut Rng) -> Network {
    cfg.validate();
    let pad = cfg.kernel / 2;
    let mut layers = Vec::new();
    let mut names = Vec::new();
    for i in 0..cfg.num_blocks {
        let c_in = if i == 0 { cfg.input_channels } else { cfg.channels };
        layers.push(Layer::Conv(Conv2d::new(c_in, cfg.channels, cfg.kernel, cfg.stride, pad)));
        names.push(format!("block{i}.conv"));
        layers.push(Layer::Bn(BatchNorm2d::new(cfg.channels)));
        names.push(format!("block{i}.bn"));
        layers.push(Layer::LeakyRelu(cfg.lrelu_slope));
        names.push(format!("block{i}.lrelu"));
    }
    layers.push(Layer::GlobalAvgPool);
    names.push("gap".to_string());
    layers.push(Layer::Linear(Linear::new(cfg.channels, 1)));
    names.push("head.linear".to_string());
    let mut net = Network::new(layers, names);
    init_params(&mut net, rng);
    net
}

/// He fan-in scaled uniform conv/linear weights, zero biases, BN gamma 1,
/// beta 0, running stats reset to mean 0 / var 1.
pub fn init_params(net: &mut Network, rng: &mut Rng) {
    for layer in net.layers.iter_mut() {
        match layer {
            Layer::Conv(c) => c.init(rng),
            Layer::Bn(bn) => bn.init(rng),
            Layer::Linear(l) => l.init(rng),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_segnet_parameter_count_matches_closed_form() {
        let cfg = SegNetConfig::paper();
        let mut rng = Rng::new(0);
        let net = build_segnet(&cfg, &mut rng);

        let (c, k, nb, cin, classes) = (64usize, 7usize, 4usize, 3usize, 11usize);
        let mut expect = 0usize;
        for i in 0..nb {
            let c_in = if i == 0 { cin } else { c };
            expect += c * c_in * k * k + c; // encoder conv
            expect += 2 * c; // encoder bn
        }
        for _ in 0..nb {
            expect += c * c * k * k + c; // decoder conv
            expect += 2 * c; // decoder bn
        }
        expect += classes * c + classes; // 1×1 head
        assert_eq!(net.param_count(), expect);
    }

    #[test]
    fn forward_shape_two_blocks() {
        let cfg = SegNetConfig {
            num_blocks: 2,
            channels: 16,
            kernel: 3,
            num_classes: 4,
            input_channels: 3,
            decoder_relu: false,
        };
        let mut rng = Rng::new(1);
        let mut net = build_segnet(&cfg, &mut rng);
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let (y, _) = net.forward(&mut tape, xid, ForwardOpts::frozen());
        assert_eq!(tape.shape(y), &[1, 4, 32, 32]);
    }

    #[test]
    fn zero_conv_weights_give_bias_logits() {
        let cfg = SegNetConfig {
            num_blocks: 1,
            channels: 4,
            kernel: 3,
            num_classes: 3,
            input_channels: 2,
            decoder_relu: false,
        };
        let mut rng = Rng::new(2);
        let mut net = build_segnet(&cfg, &mut rng);
        net.for_each_param_mut(|name, t| {
            if name.ends_with(".weight") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            if name == "head.conv.bias" {
                t.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
            }
        });
        let x = Tensor::uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let (y, _) = net.forward(&mut tape, xid, ForwardOpts::frozen());
        let yv = tape.value(y);
        for p in 0..64 {
            assert_eq!(yv[p], 0.5);
            assert_eq!(yv[64 + p], -1.0);
            assert_eq!(yv[128 + p], 2.0);
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = SegNetConfig::desk();
        let a = build_segnet(&cfg, &mut Rng::new(7));
        let b = build_segnet(&cfg, &mut Rng::new(7));
        assert_eq!(a.state_snapshot(), b.state_snapshot());
        let c = build_segnet(&cfg, &mut Rng::new(8));
        assert_ne!(a.state_snapshot(), c.state_snapshot());
    }

    #[test]
    fn init_weight_variance_tracks_he_fan_in() {
        let cfg = SegNetConfig::paper();
        let mut rng = Rng::new(9);
        let net = build_segnet(&cfg, &mut rng);
        let mut checked = 0;
        net.for_each_param(|name, t| {
            if name == "enc1.conv.weight" {
                // 64×64×7×7: 200k samples, fan_in 3136.
                let fan_in = 64 * 49;
                let data = t.data();
                let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
                let var: f64 = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                    / data.len() as f64;
                let target = 2.0 / fan_in as f64;
                assert!(
                    (var - target).abs() < 0.2 * target,
                    "sample variance {var} vs He target {target}"
                );
                checked += 1;
            }
        });
        assert_eq!(checked, 1);
    }

    #[test]
    fn bn_init_is_gamma_one_beta_zero() {
        let cfg = SegNetConfig::desk();
        let net = build_segnet(&cfg, &mut Rng::new(3));
        net.for_each_param(|name, t| {
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        });
    }

    #[test]
    fn discriminator_outputs_single_logit_per_sample() {
        let cfg = DiscConfig::desk(4);
        let mut rng = Rng::new(4);
        let mut d = build_discriminator(&cfg, &mut rng);
        let x = Tensor::uniform(&[5, 4, 32, 32], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let (z, _) = d.forward(&mut tape, xid, ForwardOpts::frozen());
        assert_eq!(tape.shape(z), &[5, 1]);
    }

    #[test]
    fn zero_head_makes_discriminator_uninformative() {
        let cfg = DiscConfig::desk(3);
        let mut rng = Rng::new(5);
        let mut d = build_discriminator(&cfg, &mut rng);
        d.for_each_param_mut(|name, t| {
            if name.starts_with("head.linear") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let x = Tensor::uniform(&[3, 3, 16, 16], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let (z, _) = d.forward(&mut tape, xid, ForwardOpts::frozen());
        for &v in tape.value(z) {
            assert_eq!(v, 0.0); // sigmoid(0) = 0.5 for every input
        }
    }

    #[test]
    fn gap_head_is_invariant_to_spatial_shuffle() {
        // Permuting the H×W positions of the feature map entering global
        // average pooling must not change the logit.
        let mut rng = Rng::new(6);
        let feats = Tensor::uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
        let mut lin = Linear::new(8, 1);
        lin.init(&mut rng);

        let logit = |t: &Tensor| -> Vec<f32> {
            let mut tape = Tape::new();
            let x = tape.constant_from(t);
            let g = global_avg_pool(&mut tape, x);
            let w = tape.constant_from(&lin.weight);
            let b = tape.constant_from(&lin.bias);
            let z = linear(&mut tape, g, w, b);
            tape.value(z).to_vec()
        };

        let base = logit(&feats);
        let mut perm: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut perm);
        let mut shuffled = feats.clone();
        for n in 0..2 {
            for c in 0..8 {
                let src: Vec<f32> =
                    (0..16).map(|p| feats.data()[(n * 8 + c) * 16 + p]).collect();
                for (p, &q) in perm.iter().enumerate() {
                    shuffled.data_mut()[(n * 8 + c) * 16 + p] = src[q];
                }
            }
        }
        let permuted = logit(&shuffled);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn asymmetric_extents_roundtrip_through_decoder() {
        // H ≠ W exercises the index geometry handoff encoder → decoder.
        let cfg = SegNetConfig {
            num_blocks: 3,
            channels: 4,
            kernel: 3,
            num_classes: 2,
            input_channels: 1,
            decoder_relu: false,
        };
        let mut rng = Rng::new(10);
        let mut net = build_segnet(&cfg, &mut rng);
        let x = Tensor::uniform(&[2, 1, 16, 32], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let (y, _) = net.forward(&mut tape, xid, ForwardOpts::frozen());
        assert_eq!(tape.shape(y), &[2, 2, 16, 32]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn indivisible_input_fails_at_forward_time() {
        let cfg = SegNetConfig {
            num_blocks: 3,
            channels: 4,
            kernel: 3,
            num_classes: 2,
            input_channels: 1,
            decoder_relu: false,
        };
        let mut rng = Rng::new(11);
        let mut net = build_segnet(&cfg, &mut rng);
        // 12 is divisible by 4 but not by 8: the third pool leaves 3×3,
        // which the next stage cannot halve.
        let x = Tensor::zeros(&[1, 1, 12, 12]);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let _ = net.forward(&mut tape, xid, ForwardOpts::frozen());
    }

    #[test]
    fn eval_forward_is_pure() {
        let cfg = SegNetConfig::desk();
        let mut rng = Rng::new(12);
        let mut net = build_segnet(&cfg, &mut rng);
        let x = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let before = net.state_snapshot();
        let a = net.infer(&x);
        let b = net.infer(&x);
        assert_eq!(a.data(), b.data());
        assert_eq!(net.state_snapshot(), before);
    }

    #[test]
    fn binding_covers_every_parameter() {
        let cfg = DiscConfig::desk(4);
        let mut rng = Rng::new(13);
        let mut d = build_discriminator(&cfg, &mut rng);
        let mut count = 0;
        d.for_each_param(|_, _| count += 1);
        let x = Tensor::zeros(&[1, 4, 16, 16]);
        let mut tape = Tape::new();
        let xid = tape.constant_from(&x);
        let (_, binding) = d.forward(&mut tape, xid, ForwardOpts::train());
        assert_eq!(binding.0.len(), count);
    }
}
