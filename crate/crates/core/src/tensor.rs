//! Dense 5-D tensors laid out as `[batch, time, height, width, channel]`,
//! channel fastest.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Extents of a 5-D tensor: `[n, t, h, w, c]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1, 1]);

    pub fn new(n: usize, t: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, t, h, w, c])
    }

    /// A channel vector `(1, 1, 1, 1, len)`.
    pub fn vector(len: usize) -> Self {
        Shape([1, 1, 1, 1, len])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn t(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn c(&self) -> usize {
        self.0[4]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    /// Number of positions sharing a channel vector (everything but `c`).
    pub fn rows(&self) -> usize {
        self.0[..4].iter().product()
    }

    pub fn with_c(mut self, c: usize) -> Self {
        self.0[4] = c;
        self
    }

    pub fn with_hw(mut self, h: usize, w: usize) -> Self {
        self.0[2] = h;
        self.0[3] = w;
        self
    }

    pub fn offset(&self, n: usize, t: usize, h: usize, w: usize, c: usize) -> usize {
        let [_, tt, hh, ww, cc] = self.0;
        (((n * tt + t) * hh + h) * ww + w) * cc + c
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, t, h, w, c] = self.0;
        write!(f, "({n},{t},{h},{w},{c})")
    }
}

/// Owned tensor value. Gradient storage lives on the tape, keyed by node.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{} values for shape {:?}", data.len(), shape),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::SCALAR, data: vec![value] }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: Shape::vector(values.len()), data: values.to_vec() }
    }

    pub fn uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.shape.offset(n, t, h, w, c)]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    /// Copies sample `n` into a new single-sample tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape.numel() / self.shape.n();
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Tensor { shape: Shape([1, self.shape.t(), self.shape.h(), self.shape.w(), self.shape.c()]), data }
    }

    /// Stacks same-shape single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape.0[1..] != first.shape.0[1..] {
                return Err(Error::Shape {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", t.shape, first.shape),
                });
            }
            data.extend_from_slice(&t.data);
        }
        shape.0[0] = data.len() / (first.len() / first.shape.n());
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
