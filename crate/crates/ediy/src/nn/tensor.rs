//! Dense row-major tensors over `f32` (training) or `f64` (verification).

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: 32-bit for training, 64-bit for the
/// finite-difference verification mode.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// c = alpha * op(a) * op(b) + beta * c, row-major with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Epsilon guarding norm denominators in every cosine term.
pub const COSINE_EPS: f64 = 1e-8;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expect, data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    /// Internal constructor for kernel outputs; skips the finiteness scan.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn scalar_value(&self) -> T {
        assert_eq!(self.data.len(), 1, "scalar_value on tensor of len {}", self.data.len());
        self.data[0]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(
                    context,
                    format!("non-finite value {} at flat index {}", v, i),
                ));
            }
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn l2_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Casts element type; used to move values between training and
    /// verification precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_lossy())).collect(),
        }
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// C = A(m,k) x B(k,n), with optional transposes interpreting A as (k,m)
/// and/or B as (n,k) stored row-major.
pub fn matmul<T: Scalar>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim("matmul", "operands must be rank-2"));
    }
    let (m, ka) = if trans_a {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (kb, n) = if trans_b {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    if ka != kb {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {} vs {}", ka, kb),
        ));
    }
    let (rsa, csa) = if trans_a {
        (1isize, a.shape[1] as isize)
    } else {
        (a.shape[1] as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b.shape[1] as isize)
    } else {
        (b.shape[1] as isize, 1isize)
    };
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        ka,
        n,
        T::one(),
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Cosine similarity of two equal-length vectors with epsilon-guarded norms:
/// `<a,b> / (max(|a|, eps) * max(|b|, eps))`.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("lengths differ: {} vs {}", a.len(), b.len()),
        ));
    }
    Ok(cosine_of_slices(a.data(), b.data()))
}

pub(crate) fn cosine_of_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    let eps = T::from_f64(COSINE_EPS);
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn new_rejects_bad_length_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f32; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0f32, f32::NAN]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul::<f64>(&a, false, &b, false).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_transposes_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        // a^T (2,3) x b (3,2)
        let c = matmul::<f64>(&a, true, &b, false).unwrap();
        assert_eq!(c.data(), &[89., 98., 116., 128.]);
        // a (3,2) x b^T would be (3,3); check one entry
        let d = matmul::<f64>(&a, false, &b, true).unwrap();
        assert_eq!(d.shape(), &[3, 3]);
        assert_relative_eq!(d.data()[0], 1. * 7. + 2. * 8.);
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let a = Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![-4.0f64, 3.0]).unwrap();
        let na = Tensor::new(vec![2], vec![-3.0f64, -4.0]).unwrap();
        assert_relative_eq!(cosine_similarity(&a, &a).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_relative_eq!(cosine_similarity(&a, &na).unwrap(), -1.0, max_relative = 1e-12);
    }

    #[test]
    fn cosine_length_mismatch_is_dimension_error() {
        let a = Tensor::new(vec![2], vec![1.0f32, 0.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0f32, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(crate::error::Error::Dimension { .. })
        ));
    }

    #[test]
    fn cosine_zero_vector_is_guarded() {
        let z = Tensor::new(vec![3], vec![0.0f32; 3]).unwrap();
        let a = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        assert_eq!(cosine_similarity(&z, &a).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&z, &z).unwrap(), 0.0);
    }
}
