use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels;

/// Row-major dense array.
///
/// `shape.iter().product() == data.len()` always holds; public arithmetic
/// rejects non-finite results instead of propagating them.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        let a = Array {
            shape: shape.to_vec(),
            data,
        };
        a.check_finite()?;
        Ok(a)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("array"))
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Matrix product of two 2-D arrays.
    pub fn matmul(&self, rhs: &Array<T>) -> Result<Array<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = Array::zeros(&[m, n]);
        kernels::matmul(&self.data, &rhs.data, &mut out.data, m, k, n);
        out.check_finite()?;
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Array<T>> {
        let (r, c) = self.dims2()?;
        let mut out = Array::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Frobenius inner product of two arrays of the same shape.
    pub fn inner(&self, rhs: &Array<T>) -> Result<T> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "inner {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let v = kernels::dot(&self.data, &rhs.data);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("inner product"))
        }
    }

    pub fn trace(&self) -> Result<T> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::Shape(format!("trace of {r}x{c}")));
        }
        Ok((0..r).map(|i| self.data[i * c + i]).sum())
    }

    pub fn sum_sq(&self) -> T {
        kernels::dot(&self.data, &self.data)
    }

    pub fn mean_sq(&self) -> T {
        if self.data.is_empty() {
            T::zero()
        } else {
            self.sum_sq() / T::of(self.data.len() as f64)
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Array<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "axpy {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        kernels::axpy(s, &other.data, &mut self.data);
        Ok(())
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[T] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn max_abs_diff(&self, other: &Array<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Rng, Stream};
    use rand::Rng as _;

    fn random(shape: &[usize], rng: &mut Rng) -> Array<f64> {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn inner_equals_trace_of_transpose_product() {
        let mut rng = Rng::new(7, Stream::MonteCarlo);
        for _ in 0..20 {
            let a = random(&[5, 5], &mut rng);
            let b = random(&[5, 5], &mut rng);
            let lhs = a.inner(&b).unwrap();
            let rhs = a.transpose().unwrap().matmul(&b).unwrap().trace().unwrap();
            // loop oracle
            let mut naive = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    naive += a.data()[i * 5 + j] * b.data()[i * 5 + j];
                }
            }
            assert!((lhs - rhs).abs() < 1e-12);
            assert!((lhs - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3, Stream::MonteCarlo);
        let a = random(&[4, 6], &mut rng);
        let b = random(&[6, 3], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..6 {
                    s += a.data()[i * 6 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(Array::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Array::<f64>::from_vec(&[1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        let a = Array::<f64>::zeros(&[2, 3]);
        assert!(a.matmul(&a).is_err());
        let big = Array::<f64>::filled(&[1, 1], 1e200);
        assert!(big.matmul(&big).is_err());
    }
}
