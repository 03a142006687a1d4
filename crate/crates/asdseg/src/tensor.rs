//! Dense tensor of 32-bit floats with an optional gradient accumulator.
//!
//! Data is a flat row-major array; image-like tensors use the N×C×H×W layout.
//! Tensors are plain values: cloning copies, no interior mutability, safe to
//! move between threads.

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, data has {}",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(&[1], vec![value])
    }

    /// Uniform samples in [lo, hi).
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.range_f32(lo, hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient accumulator, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {shape:?}", self.shape);
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major flat offset of `[n, c, y, x]` in an N×C×H×W tensor.
#[inline]
pub fn nchw_offset(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    debug_assert_eq!(shape.len(), 4);
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_is_enforced() {
        let t = Tensor::new(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn mismatched_data_length_panics() {
        let _ = Tensor::new(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::zeros(&[3]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn uniform_respects_bounds_and_seed() {
        let mut rng = Rng::new(5);
        let a = Tensor::uniform(&[100], -0.5, 0.5, &mut rng);
        assert!(a.data().iter().all(|v| (-0.5..0.5).contains(v)));
        let mut rng2 = Rng::new(5);
        let b = Tensor::uniform(&[100], -0.5, 0.5, &mut rng2);
        assert_eq!(a.data(), b.data());
    }
}
