//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] owns every intermediate value of one computation as a flat
//! arena. Building a forward pass appends nodes; [`Tape::backward`] replays
//! them once in reverse, accumulating gradients by the chain rule. The tape
//! is rebuilt from scratch each training step, which is what lets the
//! trainer alternate between two different graphs (discriminator update vs.
//! network update) without bookkeeping.
//!
//! Values whose ancestors are all constants are not recorded at all, so a
//! forward pass over frozen parameters costs no graph memory.

use crate::tensor::Tensor;

/// Handle to a value in the tape arena.
pub type VarId = usize;

struct Value {
    data: Vec<f32>,
    shape: Vec<usize>,
    /// True if this value or any ancestor is a gradient leaf.
    needs_grad: bool,
}

struct Node {
    inputs: Vec<VarId>,
    output: VarId,
    rule: Box<dyn BackwardRule>,
}

/// Read-only view of the tape handed to backward rules.
pub struct BackwardArgs<'a> {
    values: &'a [Value],
    pub inputs: &'a [VarId],
    pub output: VarId,
    pub grad_out: &'a [f32],
}

impl BackwardArgs<'_> {
    pub fn value(&self, id: VarId) -> &[f32] {
        &self.values[id].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.values[id].shape
    }

    pub fn input_value(&self, i: usize) -> &[f32] {
        self.value(self.inputs[i])
    }

    pub fn output_value(&self) -> &[f32] {
        self.value(self.output)
    }
}

/// Gradient accumulator indexed by [`VarId`]. Rules add contributions for
/// their inputs; values that do not need a gradient are skipped for free.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f32>>],
    values: &'a [Value],
}

impl GradSink<'_> {
    /// Whether anything upstream wants a gradient for `id`.
    pub fn wants(&self, id: VarId) -> bool {
        self.values[id].needs_grad
    }

    /// Get-or-allocate the gradient buffer for `id` and mutate it in place.
    pub fn with(&mut self, id: VarId, f: impl FnOnce(&mut [f32])) {
        if !self.values[id].needs_grad {
            return;
        }
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; self.values[id].data.len()]);
        f(buf);
    }

    /// Accumulate an elementwise contribution.
    pub fn add(&mut self, id: VarId, contribution: &[f32]) {
        self.with(id, |buf| {
            debug_assert_eq!(buf.len(), contribution.len());
            for (a, b) in buf.iter_mut().zip(contribution) {
                *a += b;
            }
        });
    }
}

/// A recorded operation's reverse rule: given the gradient of the loss with
/// respect to the node output, push gradients onto the node inputs.
pub trait BackwardRule {
    fn name(&self) -> &'static str;
    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Recording,
    Done,
}

pub struct Tape {
    values: Vec<Value>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    phase: Phase,
    epoch: u64,
    visited_last_backward: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            phase: Phase::Recording,
            epoch: 0,
            visited_last_backward: 0,
        }
    }

    /// Tag the tape with the training iteration that owns it (diagnostic).
    pub fn for_epoch(epoch: u64) -> Self {
        let mut t = Tape::new();
        t.epoch = epoch;
        t
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn push_value(&mut self, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool) -> VarId {
        debug_assert!(
            data.iter().all(|v| !v.is_nan()),
            "NaN produced in tape value of shape {shape:?}"
        );
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.values.len();
        self.values.push(Value { data, shape, needs_grad });
        self.grads.push(None);
        id
    }

    /// Introduce a gradient leaf holding a copy of `t`'s data.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push_value(t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// Introduce a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> VarId {
        self.push_value(data, shape.to_vec(), false)
    }

    pub fn constant_from(&mut self, t: &Tensor) -> VarId {
        self.constant(t.shape(), t.data().to_vec())
    }

    /// Record an operation: its freshly computed output plus the rule that
    /// will differentiate it. Nodes over pure constants are elided.
    pub fn record(
        &mut self,
        inputs: &[VarId],
        out_shape: Vec<usize>,
        out_data: Vec<f32>,
        rule: Box<dyn BackwardRule>,
    ) -> VarId {
        assert_eq!(
            self.phase,
            Phase::Recording,
            "usage error: recording `{}` after backward on this tape",
            rule.name()
        );
        let needs = inputs.iter().any(|&i| self.values[i].needs_grad);
        let out = self.push_value(out_data, out_shape, needs);
        if needs {
            self.nodes.push(Node { inputs: inputs.to_vec(), output: out, rule });
        }
        out
    }

    pub fn value(&self, id: VarId) -> &[f32] {
        &self.values[id].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.values[id].shape
    }

    pub fn numel(&self, id: VarId) -> usize {
        self.values[id].data.len()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self, id: VarId) -> f32 {
        assert_eq!(self.numel(id), 1, "item() on shape {:?}", self.shape(id));
        self.values[id].data[0]
    }

    pub fn to_tensor(&self, id: VarId) -> Tensor {
        Tensor::new(&self.values[id].shape, self.values[id].data.clone())
    }

    /// Gradient of the last backward pass with respect to `id`, if any flowed.
    pub fn grad(&self, id: VarId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes actually visited by the last backward pass.
    pub fn visited_last_backward(&self) -> usize {
        self.visited_last_backward
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once, in
    /// reverse recording order; gradients for fan-out values accumulate.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.phase,
            Phase::Recording,
            "usage error: backward called twice on one tape"
        );
        assert_eq!(
            self.values[loss].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.values[loss].shape
        );
        self.phase = Phase::Done;
        self.grads[loss] = Some(vec![1.0]);
        self.visited_last_backward = 0;

        for idx in (0..self.nodes.len()).rev() {
            // All consumers of this output sit later on the tape, so its
            // gradient is final by the time we get here.
            let out = self.nodes[idx].output;
            let Some(grad_out) = self.grads[out].take() else {
                continue;
            };
            self.visited_last_backward += 1;
            let node = &self.nodes[idx];
            let args = BackwardArgs {
                values: &self.values,
                inputs: &node.inputs,
                output: out,
                grad_out: &grad_out,
            };
            let mut sink = GradSink { grads: &mut self.grads, values: &self.values };
            node.rule.backward(&args, &mut sink);
            self.grads[out] = Some(grad_out);
        }
    }

    /// Copy the gradient for a leaf back into its owning tensor, accumulating.
    pub fn write_grad(&self, id: VarId, target: &mut Tensor) {
        if let Some(g) = self.grad(id) {
            target.accumulate_grad(g);
        }
    }
}

// ── Elementwise and reduction primitives ────────────────────────────────────

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Relu,
    LeakyRelu(f32),
    ScalarMul(f32),
}

/// Floor for the clamped logarithm; keeps a saturated probability from
/// producing -inf.
pub const LOG_FLOOR: f32 = 1e-12;

#[inline]
pub fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryKind {
    #[inline]
    fn forward(self, x: f32) -> f32 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.max(LOG_FLOOR).ln(),
            UnaryKind::Softplus => stable_softplus(x),
            UnaryKind::Sigmoid => stable_sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryKind::ScalarMul(c) => c * x,
        }
    }

    /// Local derivative given input x and output y.
    #[inline]
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => {
                if x > LOG_FLOOR {
                    1.0 / x
                } else {
                    0.0
                }
            }
            UnaryKind::Softplus => stable_sigmoid(x),
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            UnaryKind::ScalarMul(c) => c,
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::ScalarMul(_) => "scalar_mul",
        }
    }
}

struct UnaryRule {
    kind: UnaryKind,
}

impl BackwardRule for UnaryRule {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let x = args.input_value(0);
        let y = args.output_value();
        let g = args.grad_out;
        sink.with(args.inputs[0], |buf| {
            for i in 0..buf.len() {
                buf[i] += g[i] * self.kind.derivative(x[i], y[i]);
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    #[inline]
    fn forward(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

/// Output shape of a broadcast binary op. Ranks must match; each axis must
/// agree or be 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "broadcast requires equal rank (reshape first): {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            );
            x.max(y)
        })
        .collect()
}

/// Odometer over an output shape yielding flat offsets into two broadcast
/// operands (stride 0 on their singleton axes).
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let mut a_strides = vec![0usize; rank];
    let mut b_strides = vec![0usize; rank];
    let mut acc_a = 1;
    let mut acc_b = 1;
    for d in (0..rank).rev() {
        a_strides[d] = if a_shape[d] == 1 { 0 } else { acc_a };
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc_b };
        acc_a *= a_shape[d];
        acc_b *= b_shape[d];
    }
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut ai = 0;
    let mut bi = 0;
    for o in 0..numel {
        f(o, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += a_strides[d];
            bi += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= a_strides[d] * out_shape[d];
            bi -= b_strides[d] * out_shape[d];
        }
    }
}

struct BinaryRule {
    kind: BinaryKind,
}

impl BackwardRule for BinaryRule {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let (a_id, b_id) = (args.inputs[0], args.inputs[1]);
        let a_shape = args.shape(a_id).to_vec();
        let b_shape = args.shape(b_id).to_vec();
        let out_shape = args.shape(args.output).to_vec();
        let g = args.grad_out;

        if a_shape == b_shape {
            match self.kind {
                BinaryKind::Add => {
                    sink.add(a_id, g);
                    sink.add(b_id, g);
                }
                BinaryKind::Sub => {
                    sink.add(a_id, g);
                    sink.with(b_id, |buf| {
                        for (v, gi) in buf.iter_mut().zip(g) {
                            *v -= gi;
                        }
                    });
                }
                BinaryKind::Mul => {
                    let a = args.value(a_id).to_vec();
                    let b = args.value(b_id).to_vec();
                    sink.with(a_id, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * b[i];
                        }
                    });
                    sink.with(b_id, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * a[i];
                        }
                    });
                }
            }
            return;
        }

        let a = args.value(a_id).to_vec();
        let b = args.value(b_id).to_vec();
        let mut ga = vec![0.0f32; a.len()];
        let mut gb = vec![0.0f32; b.len()];
        for_each_broadcast(&out_shape, &a_shape, &b_shape, |o, ai, bi| match self.kind {
            BinaryKind::Add => {
                ga[ai] += g[o];
                gb[bi] += g[o];
            }
            BinaryKind::Sub => {
                ga[ai] += g[o];
                gb[bi] -= g[o];
            }
            BinaryKind::Mul => {
                ga[ai] += g[o] * b[bi];
                gb[bi] += g[o] * a[ai];
            }
        });
        sink.add(a_id, &ga);
        sink.add(b_id, &gb);
    }
}

#[derive(Clone, Copy, Debug)]
enum ReduceKind {
    Sum,
    Mean,
    /// Carries the argmax found at record time (first maximum wins).
    Max(usize),
}

struct ReduceRule {
    kind: ReduceKind,
}

impl BackwardRule for ReduceRule {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max(_) => "max",
        }
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let g = args.grad_out[0];
        let n = args.input_value(0).len();
        match self.kind {
            ReduceKind::Sum => sink.with(args.inputs[0], |buf| {
                for v in buf.iter_mut() {
                    *v += g;
                }
            }),
            ReduceKind::Mean => {
                let scale = g / n as f32;
                sink.with(args.inputs[0], |buf| {
                    for v in buf.iter_mut() {
                        *v += scale;
                    }
                });
            }
            ReduceKind::Max(argmax) => sink.with(args.inputs[0], |buf| {
                buf[argmax] += g;
            }),
        }
    }
}

struct ReshapeRule;

impl BackwardRule for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        sink.add(args.inputs[0], args.grad_out);
    }
}

struct Concat0Rule {
    split: usize,
}

impl BackwardRule for Concat0Rule {
    fn name(&self) -> &'static str {
        "concat0"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let g = args.grad_out;
        sink.add(args.inputs[0], &g[..self.split]);
        sink.add(args.inputs[1], &g[self.split..]);
    }
}

struct Narrow0Rule {
    offset: usize,
}

impl BackwardRule for Narrow0Rule {
    fn name(&self) -> &'static str {
        "narrow0"
    }

    fn backward(&self, args: &BackwardArgs<'_>, sink: &mut GradSink<'_>) {
        let g = args.grad_out;
        let offset = self.offset;
        sink.with(args.inputs[0], |buf| {
            for (i, gi) in g.iter().enumerate() {
                buf[offset + i] += gi;
            }
        });
    }
}

impl Tape {
    fn unary(&mut self, kind: UnaryKind, a: VarId) -> VarId {
        let data: Vec<f32> = self.value(a).iter().map(|&x| kind.forward(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(&[a], shape, data, Box::new(UnaryRule { kind }))
    }

    fn binary(&mut self, kind: BinaryKind, a: VarId, b: VarId) -> VarId {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b));
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0f32; numel];
        if self.shape(a) == self.shape(b) {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..numel {
                data[i] = kind.forward(av[i], bv[i]);
            }
        } else {
            let (av, bv) = (self.value(a), self.value(b));
            let mut out = vec![0.0f32; numel];
            for_each_broadcast(&out_shape, self.shape(a), self.shape(b), |o, ai, bi| {
                out[o] = kind.forward(av[ai], bv[bi]);
            });
            data = out;
        }
        self.record(&[a, b], out_shape, data, Box::new(BinaryRule { kind }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f32) -> VarId {
        self.unary(UnaryKind::ScalarMul(c), a)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Log, a)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f32) -> VarId {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        // f64 accumulation: the rounding error is one final cast, not O(n).
        let total = self.value(a).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.record(&[a], vec![1], vec![total], Box::new(ReduceRule { kind: ReduceKind::Sum }))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let m = (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32;
        self.record(&[a], vec![1], vec![m], Box::new(ReduceRule { kind: ReduceKind::Mean }))
    }

    /// Max over all elements; first maximum wins on ties.
    pub fn max(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        let m = v[best];
        self.record(&[a], vec![1], vec![m], Box::new(ReduceRule { kind: ReduceKind::Max(best) }))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(a), "reshape {:?} -> {shape:?}", self.shape(a));
        let data = self.value(a).to_vec();
        self.record(&[a], shape.to_vec(), data, Box::new(ReshapeRule))
    }

    /// Concatenate along axis 0; all other extents must agree.
    pub fn concat0(&mut self, a: VarId, b: VarId) -> VarId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[1..], sb[1..], "concat0 of {sa:?} and {sb:?}");
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.numel(a) + self.numel(b));
        data.extend_from_slice(self.value(a));
        data.extend_from_slice(self.value(b));
        let split = self.numel(a);
        self.record(&[a, b], shape, data, Box::new(Concat0Rule { split }))
    }

    /// Slice `len` rows along axis 0 starting at `start`.
    pub fn narrow0(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[0], "narrow0 [{start}, {start}+{len}) of {s:?}");
        let row: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = len;
        let data = self.value(a)[start * row..(start + len) * row].to_vec();
        self.record(&[a], shape, data, Box::new(Narrow0Rule { offset: start * row }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: &[f32]) -> VarId {
        let t = Tensor::new(&[data.len()], data.to_vec()).with_requires_grad();
        tape.leaf(&t)
    }

    #[test]
    fn add_backward_gives_ones() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0]);
        let b = leaf(&mut tape, &[3.0, 4.0]);
        let c = tape.add(a, b);
        let s = tape.sum(c);
        tape.backward(s);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn three_chained_ops_visit_each_node_once() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2.0]);
        let a = tape.scalar_mul(x, 3.0);
        let b = tape.exp(a);
        let c = tape.sum(b);
        assert_eq!(tape.node_count(), 3);
        tape.backward(c);
        assert_eq!(tape.visited_last_backward(), 3);
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3.0]);
        let y = tape.mul(x, x);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn bilinear_form_gradient() {
        // loss = sum(w ⊙ x), w = [1,2], x = [3,4] → w.grad = [3,4]
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1.0, 2.0]);
        let x = leaf(&mut tape, &[3.0, 4.0]);
        let p = tape.mul(w, x);
        let loss = tape.sum(p);
        tape.backward(loss);
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x at x = 5 → x.grad = 2
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[5.0]);
        let y = tape.add(x, x);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn gradient_of_n_uses_is_sum_of_single_uses() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.5]);
        let a = tape.exp(x);
        let b = tape.exp(x);
        let c = tape.exp(x);
        let ab = tape.add(a, b);
        let abc = tape.add(ab, c);
        tape.backward(abc);
        let triple = tape.grad(x).unwrap()[0];

        let mut single = Tape::new();
        let x1 = leaf(&mut single, &[1.5]);
        let y1 = single.exp(x1);
        single.backward(y1);
        let once = single.grad(x1).unwrap()[0];
        assert!((triple - 3.0 * once).abs() < 1e-6);
    }

    #[test]
    fn leaky_relu_slope_point_two() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[-1.0, 0.0, 2.0]);
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[0.0]);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[0.0]);
        let y = tape.softplus(x);
        assert!((tape.value(y)[0] - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn log_clamps_non_positive_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[0.0, -3.0, 1.0]);
        let y = tape.log(x);
        let floor = LOG_FLOOR.ln();
        assert_eq!(tape.value(y)[0], floor);
        assert_eq!(tape.value(y)[1], floor);
        assert_eq!(tape.value(y)[2], 0.0);
        let s = tape.sum(y);
        tape.backward(s);
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 1.0);
    }

    #[test]
    fn broadcast_add_and_reduce_grads() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[2, 1], vec![1.0, 2.0]).with_requires_grad();
        let b = Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).with_requires_grad();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let c = tape.add(av, bv);
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(tape.value(c), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let s = tape.sum(c);
        tape.backward(s);
        assert_eq!(tape.grad(av).unwrap(), &[3.0, 3.0]);
        assert_eq!(tape.grad(bv).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_grads_use_other_operand() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[2, 1], vec![2.0, 3.0]).with_requires_grad();
        let b = Tensor::new(&[1, 2], vec![5.0, 7.0]).with_requires_grad();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let c = tape.mul(av, bv);
        let s = tape.sum(c);
        tape.backward(s);
        assert_eq!(tape.grad(av).unwrap(), &[12.0, 12.0]);
        assert_eq!(tape.grad(bv).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn incompatible_shapes_panic() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0]);
        let b = leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let _ = tape.add(a, b);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_backward_panics() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0]);
        let b = tape.exp(a);
        tape.backward(b);
    }

    #[test]
    #[should_panic(expected = "recording")]
    fn record_after_backward_panics() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0]);
        let b = tape.exp(a);
        tape.backward(b);
        let _ = tape.exp(a);
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.0, 5.0, 5.0, 2.0]);
        let m = tape.max(x);
        assert_eq!(tape.value(m), &[5.0]);
        tape.backward(m);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_spreads_gradient_uniformly() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0]);
        let m = tape.mean(x);
        assert_eq!(tape.value(m), &[2.5]);
        tape.backward(m);
        assert_eq!(tape.grad(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2], vec![1.0, 2.0]);
        let b = tape.exp(a);
        let _ = tape.sum(b);
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn narrow_and_concat_roundtrip_grads() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0]);
        let x2 = tape.reshape(x, &[4, 1]);
        let lo = tape.narrow0(x2, 0, 2);
        let hi = tape.narrow0(x2, 2, 2);
        let back = tape.concat0(lo, hi);
        let doubled = tape.scalar_mul(back, 2.0);
        let s = tape.sum(doubled);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }
}
