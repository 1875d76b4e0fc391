//! Dense row-major tensors over f32/f64 plus the matmul kernels everything
//! else is built on. Training runs in f32; gradient checks instantiate the
//! same code in f64.

use std::fmt::Debug;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker threads for the matmul kernels. 1 = fully serial reference mode.
/// Row-partitioned parallelism is bit-identical to serial execution either
/// way, but deterministic mode pins this to 1.
static THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Element type for all numeric kernels.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

/// Dense row-major tensor with a dynamic shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_in_place(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_in_place");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: S) {
        for a in self.data.iter_mut() {
            *a = *a * c;
        }
    }

    pub fn sum(&self) -> S {
        let mut acc = S::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn sq_norm(&self) -> S {
        let mut acc = S::ZERO;
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Splits `rows` into `threads()` contiguous chunks and runs `work` on each,
/// writing into the matching disjoint chunk of `out`. Row ownership is fixed
/// by the partition, so results do not depend on the thread count.
fn par_row_chunks<S: Scalar>(
    out: &mut [S],
    rows: usize,
    row_width: usize,
    work: impl Fn(usize, &mut [S]) + Sync + Send,
) {
    let nthreads = threads().min(rows.max(1));
    if nthreads <= 1 || rows * row_width < 1 << 14 {
        for r in 0..rows {
            let chunk = &mut out[r * row_width..(r + 1) * row_width];
            work(r, chunk);
        }
        return;
    }
    let per = rows.div_ceil(nthreads);
    let work = &work;
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut start = 0usize;
        while start < rows {
            let take = per.min(rows - start);
            let (head, tail) = rest.split_at_mut(take * row_width);
            let base = start;
            scope.spawn(move || {
                for i in 0..take {
                    let chunk = &mut head[i * row_width..(i + 1) * row_width];
                    work(base + i, chunk);
                }
            });
            rest = tail;
            start += take;
        }
    });
}

/// C = A (m,k) @ B (k,n).
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    matmul_into(&mut c, a, b, m, k, n, false);
    c
}

/// C (+)= A (m,k) @ B (k,n). Every C element accumulates over k in
/// ascending order in all paths, so serial, blocked, and threaded runs are
/// bit-identical.
pub fn matmul_into<S: Scalar>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if threads() > 1 && m > 1 && m * n >= 1 << 14 {
        par_row_chunks(c, m, n, |i, c_row| {
            if !accumulate {
                for v in c_row.iter_mut() {
                    *v = S::ZERO;
                }
            }
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                    *cv += aik * bv;
                }
            }
        });
        return;
    }
    if !accumulate {
        for v in c.iter_mut() {
            *v = S::ZERO;
        }
    }
    // 4-row blocks reuse each B row four times while it is hot
    let mut i = 0;
    while i + 4 <= m {
        let (rows01, rows23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = rows01.split_at_mut(n);
        let (c2, c3) = rows23.split_at_mut(n);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let x0 = a[i * k + kk];
            let x1 = a[(i + 1) * k + kk];
            let x2 = a[(i + 2) * k + kk];
            let x3 = a[(i + 3) * k + kk];
            for j in 0..n {
                let bv = b_row[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += aik * bv;
            }
        }
        i += 1;
    }
}

/// C = A (m,k) @ B^T where B is (n,k).
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    par_row_chunks(&mut c, m, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *cv = acc;
        }
    });
    c
}

/// C (+)= A^T (k,m->m,k transposed) @ B (k,n), i.e. C is (m,n) with
/// C[i,j] = sum_k A[k,i] B[k,j]. Used for weight gradients.
pub fn matmul_at_into<S: Scalar>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    k: usize,
    m: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        for v in c.iter_mut() {
            *v = S::ZERO;
        }
    }
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}
