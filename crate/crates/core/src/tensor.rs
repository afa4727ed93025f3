//! Dense row-major tensors and their binary blob encoding.
//!
//! Blob layout: magic `HRDT-T1\n`, little-endian `u32` rank, `u32` extents,
//! one `u8` dtype tag (0 = f32, 1 = f64), then the raw little-endian
//! scalars in row-major order.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: &[u8; 8] = b"HRDT-T1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    // shared so binding parameters onto a tape does not copy them
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Precondition(format!(
                "tensor extents must be non-empty and >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("valid shape")
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Precondition("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix over the trailing dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product of two rank-2 tensors (no gradient tracking).
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data, &rhs.data, &mut out, false);
        Self::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        Self::from_fn(&[n, m], |idx| self.data[(idx % m) * n + idx / m])
    }

    /// Converts element type (e.g. f32 checkpoint to f64 grad-check copy).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| U::lit(x.as_f64())).collect()),
        }
    }

    pub fn write_blob(&self, out: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.shape.len() + T::BYTES * self.data.len());
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        buf.push(T::DTYPE_TAG);
        for &x in self.data.iter() {
            x.write_le(&mut buf);
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_blob(&mut buf)
            .expect("writing to Vec cannot fail");
        buf
    }

    pub fn read_blob(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(input, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Blob("bad tensor magic".into()));
        }
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Blob(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(input)? as usize);
        }
        let mut tag = [0u8; 1];
        read_exact(input, &mut tag)?;
        if tag[0] != T::DTYPE_TAG {
            return Err(Error::Blob(format!(
                "dtype tag {} does not match expected {}",
                tag[0],
                T::DTYPE_TAG
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n < (1 << 34))
            .ok_or_else(|| Error::Blob(format!("implausible extents {shape:?}")))?;
        let mut raw = vec![0u8; numel * T::BYTES];
        read_exact(input, &mut raw)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Self::new(shape, data).map_err(|e| Error::Blob(e.to_string()))
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Blob("truncated blob".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// `out (+)= A[m,k] · B[k,n]`, both row-major contiguous.
pub(crate) fn gemm_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths checked above; strides describe row-major layouts.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (+)= A[m,k] · B[n,k]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: B is read with swapped strides, which stays in bounds.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (+)= A[k,m]ᵀ · B[k,n]`.
pub(crate) fn gemm_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: A is read with swapped strides, which stays in bounds.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
