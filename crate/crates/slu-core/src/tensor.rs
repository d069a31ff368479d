//! Dense row-major tensors over a configurable float width.
//!
//! Training runs in `f32`; gradient-checking tests instantiate the same code
//! with `f64` so central finite differences stay meaningful.

use crate::error::{Result, SluError};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Float element for tensors and the autodiff tape. Implemented for f32 and f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform init in ±bound, e.g. bound = 1/sqrt(fan_in).
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Number of rows when viewed as 2D (leading dim), 1 for vectors/scalars.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension when viewed as 2D.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SluError::Numeric(format!(
                "non-finite value in {what} (shape {:?})",
                self.shape
            )))
        }
    }
}

/// Minimum work (m*k*n) before a matmul is split across threads. Small
/// recurrent-step products run serial; per-row dispatch costs more than it
/// saves below a few Mflop.
const PAR_FLOP_THRESHOLD: usize = 1 << 22;

fn matmul_row<F: Scalar>(arow: &[F], b: &[F], n: usize, orow: &mut [F]) {
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
            *o += av * bv;
        }
    }
}

/// C = A @ B with A: m×k, B: k×n. Rows are computed independently so the
/// parallel split is bitwise deterministic.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dim mismatch: {k} vs {k2}");
    let mut out = vec![F::zero(); m * n];
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.data.par_chunks(k))
            .for_each(|(orow, arow)| matmul_row(arow, &b.data, n, orow));
    } else {
        for i in 0..m {
            matmul_row(a.row(i), &b.data, n, &mut out[i * n..(i + 1) * n]);
        }
    }
    Tensor::new(vec![m, n], out)
}

fn matmul_nt_row<F: Scalar>(arow: &[F], b: &[F], k: usize, orow: &mut [F]) {
    for (j, o) in orow.iter_mut().enumerate() {
        let brow = &b[j * k..(j + 1) * k];
        let mut s = F::zero();
        for (&av, &bv) in arow.iter().zip(brow.iter()) {
            s += av * bv;
        }
        *o = s;
    }
}

/// C = A @ Bᵀ with A: m×k, B: n×k.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dim mismatch: {k} vs {k2}");
    let mut out = vec![F::zero(); m * n];
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.data.par_chunks(k))
            .for_each(|(orow, arow)| matmul_nt_row(arow, &b.data, k, orow));
    } else {
        for i in 0..m {
            matmul_nt_row(a.row(i), &b.data, k, &mut out[i * n..(i + 1) * n]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C = Aᵀ @ B with A: m×k, B: m×n → C: k×n.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let (m2, n) = (b.rows(), b.cols());
    assert_eq!(m, m2, "matmul_tn leading dim mismatch: {m} vs {m2}");
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_small_known() {
        let a = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        use rand::SeedableRng;
        let a = Tensor::<f64>::uniform(vec![4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b);

        // A @ Bᵀ via matmul_nt against explicit transpose
        let mut bt = Tensor::<f64>::zeros(vec![3, 5]);
        for i in 0..5 {
            for j in 0..3 {
                bt.data_mut()[j * 5 + i] = b.data()[i * 3 + j];
            }
        }
        let c2 = matmul_nt(&a, &bt);
        for (x, y) in c.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        // Aᵀ @ C via matmul_tn against naive
        let d = matmul_tn(&a, &c);
        for p in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for i in 0..4 {
                    s += a.data()[i * 5 + p] * c.data()[i * 3 + j];
                }
                assert!((d.data()[p * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut x = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(x.assert_finite("x").is_ok());
        x.data_mut()[3] = f32::NAN;
        assert!(x.assert_finite("x").is_err());
    }
}
