//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! Storage is row-major with an explicit shape. Every operation treats the
//! last dimension as the row width; there is no general broadcasting, only
//! bias-add over rows and row-wise reductions.

mod gemm;
mod graph;

pub use gemm::gemm;
pub use graph::{AttentionSpec, Gradients, Graph, Var};

use crate::error::{Error, Result};

/// Stable softmax of a single row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    graph::softmax_into(row, &mut out);
    out
}

/// `x - logsumexp(x)` for a single row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    graph::log_softmax_into(row, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Width of a row (the last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when all leading dimensions are flattened.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Central-difference estimate of the gradient of a scalar function.
///
/// Each coordinate is perturbed by `±h` independently; `f` must be
/// deterministic.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.data.clone();
    let mut grad = vec![0.0; probe.len()];
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&x.with_data(probe.clone()));
        probe[i] = orig - h;
        let down = f(&x.with_data(probe.clone()));
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    x.with_data(grad)
}

/// Max-normalized relative error between two gradient vectors.
///
/// Uses `|a - b| / max(|a|, |b|, floor)` per coordinate so that entries
/// that are numerically zero do not dominate.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn finite_difference_of_sum_is_ones() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_difference_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_of_sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_difference_gradient(|t| t.squared_norm(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }
}
