//! Dense tensors and the numeric kernels behind the autodiff engine.
//!
//! Training runs in f32; gradient-check tests instantiate the same code in
//! f64 shadow mode via the [`Scalar`] trait. Kernels parallelize over
//! disjoint output chunks with a fixed per-element accumulation order, so
//! results are bitwise identical regardless of thread count.

use std::sync::OnceLock;

pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
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
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_nan(self) -> bool;
    fn neg_infinity() -> Self;
}

/// Branch-light exp for f32, accurate to ~2 ulp over the training range and
/// monotone; inlines into hot loops so they vectorize. Saturates exactly to
/// 0 / +inf outside the representable range.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // Clamp keeps the code branch-free so softmax loops vectorize; the
    // clamped tails are already negligible in every use here.
    let x = x.clamp(-87.0, 88.0);
    // exp(x) = 2^n * exp(r), n = round(x*log2(e)), r in [-ln2/2, ln2/2]
    let n = (x * LOG2E).round();
    let r = x - n * std::f32::consts::LN_2;
    // 6th-order minimax-ish polynomial for exp(r) on the reduced range.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67
                    + r * (0.041_666_67 + r * (0.008_333_33 + r * 0.001_388_89)))));
    let bits = ((n as i32 + 127) << 23) as u32;
    p * f32::from_bits(bits)
}

macro_rules! impl_scalar {
    ($t:ty, $exp:expr, $tanh:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                $tanh(self)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                self.mul_add(a, b)
            }
            #[inline(always)]
            fn is_nan(self) -> bool {
                self.is_nan()
            }
            #[inline(always)]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}

/// tanh via the fast exp; accurate to ~1e-6 absolute.
#[inline(always)]
pub fn fast_tanh_f32(x: f32) -> f32 {
    if x > 9.0 {
        return 1.0;
    }
    if x < -9.0 {
        return -1.0;
    }
    let e = fast_exp_f32(2.0 * x);
    (e - 1.0) / (e + 1.0)
}

impl_scalar!(f32, fast_exp_f32, fast_tanh_f32);
impl_scalar!(f64, f64::exp, f64::tanh);

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Tensor<S> {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Tensor<S> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map_to<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

fn n_threads() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("FTLAB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}

/// Run `work(chunk_index, start_row, end_row)` over `rows` split across the
/// thread pool. Each chunk owns a disjoint output region.
fn parallel_rows<F: Fn(usize, usize) + Sync>(rows: usize, min_rows_per_thread: usize, work: F) {
    let threads = n_threads().min(rows / min_rows_per_thread.max(1)).max(1);
    if threads <= 1 {
        work(0, rows);
        return;
    }
    let chunk = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(rows);
            if lo >= hi {
                break;
            }
            let work = &work;
            scope.spawn(move || work(lo, hi));
        }
    });
}

/// Wrapper that lets disjoint row chunks of one buffer be written from
/// several threads. Callers must keep chunks disjoint.
struct SendPtr<S>(*mut S);
unsafe impl<S> Send for SendPtr<S> {}
unsafe impl<S> Sync for SendPtr<S> {}

/// C (m×n) = A (m×k) · B (k×n), overwriting C.
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let cp = SendPtr(c.as_mut_ptr());
    parallel_rows(m, 16, |lo, hi| {
        let cp = &cp;
        for i in lo..hi {
            let arow = &a[i * k..(i + 1) * k];
            // Safety: each i is owned by exactly one chunk.
            let crow =
                unsafe { std::slice::from_raw_parts_mut(cp.0.add(i * n), n) };
            crow.fill(S::ZERO);
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj = aik.mul_add(bj, *cj);
                }
            }
        }
    });
}

/// C (m×n) = A (m×k) · Bᵀ where B is (n×k). Four output columns are
/// accumulated per pass over a row of A for instruction-level parallelism.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    let cp = SendPtr(c.as_mut_ptr());
    parallel_rows(m, 16, |lo, hi| {
        let cp = &cp;
        for i in lo..hi {
            let arow = &a[i * k..(i + 1) * k];
            let crow =
                unsafe { std::slice::from_raw_parts_mut(cp.0.add(i * n), n) };
            let mut j = 0;
            while j + 4 <= n {
                let b0 = &b[j * k..(j + 1) * k];
                let b1 = &b[(j + 1) * k..(j + 2) * k];
                let b2 = &b[(j + 2) * k..(j + 3) * k];
                let b3 = &b[(j + 3) * k..(j + 4) * k];
                let (mut s0, mut s1, mut s2, mut s3) = (S::ZERO, S::ZERO, S::ZERO, S::ZERO);
                for kk in 0..k {
                    let av = arow[kk];
                    s0 = av.mul_add(b0[kk], s0);
                    s1 = av.mul_add(b1[kk], s1);
                    s2 = av.mul_add(b2[kk], s2);
                    s3 = av.mul_add(b3[kk], s3);
                }
                crow[j] = s0;
                crow[j + 1] = s1;
                crow[j + 2] = s2;
                crow[j + 3] = s3;
                j += 4;
            }
            while j < n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::ZERO;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc = av.mul_add(bv, acc);
                }
                crow[j] = acc;
                j += 1;
            }
        }
    });
}

/// C (m×n) = Aᵀ · B where A is (k×m) and B is (k×n). Four output rows
/// share each streamed row of B, which divides B traffic by four; row
/// blocks are split across threads.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let blocks = m.div_ceil(4);
    let cp = SendPtr(c.as_mut_ptr());
    parallel_rows(blocks, 2, |blo, bhi| {
        let cp = &cp;
        for blk in blo..bhi {
            let i0 = blk * 4;
            let rows = (m - i0).min(4);
            if rows == 4 {
                let (c0, c1, c2, c3) = unsafe {
                    (
                        std::slice::from_raw_parts_mut(cp.0.add(i0 * n), n),
                        std::slice::from_raw_parts_mut(cp.0.add((i0 + 1) * n), n),
                        std::slice::from_raw_parts_mut(cp.0.add((i0 + 2) * n), n),
                        std::slice::from_raw_parts_mut(cp.0.add((i0 + 3) * n), n),
                    )
                };
                c0.fill(S::ZERO);
                c1.fill(S::ZERO);
                c2.fill(S::ZERO);
                c3.fill(S::ZERO);
                for kk in 0..k {
                    let base = kk * m + i0;
                    let (a0, a1, a2, a3) = (a[base], a[base + 1], a[base + 2], a[base + 3]);
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        let bj = brow[j];
                        c0[j] = a0.mul_add(bj, c0[j]);
                        c1[j] = a1.mul_add(bj, c1[j]);
                        c2[j] = a2.mul_add(bj, c2[j]);
                        c3[j] = a3.mul_add(bj, c3[j]);
                    }
                }
            } else {
                for i in i0..i0 + rows {
                    let crow =
                        unsafe { std::slice::from_raw_parts_mut(cp.0.add(i * n), n) };
                    crow.fill(S::ZERO);
                    for kk in 0..k {
                        let aki = a[kk * m + i];
                        let brow = &b[kk * n..(kk + 1) * n];
                        for (cj, &bj) in crow.iter_mut().zip(brow) {
                            *cj = aki.mul_add(bj, *cj);
                        }
                    }
                }
            }
        }
    });
}

/// Batched C[b] = A[b] · B[b] (or · B[b]ᵀ). A is (batch, m, k); B is
/// (batch, k, n) or (batch, n, k) when `transpose_b`.
pub fn bmm<S: Scalar>(
    a: &[S],
    b: &[S],
    c: &mut [S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) {
    assert_eq!(a.len(), batch * m * k);
    assert_eq!(b.len(), batch * k * n);
    assert_eq!(c.len(), batch * m * n);
    let cp = SendPtr(c.as_mut_ptr());
    parallel_rows(batch * m, 32, |lo, hi| {
        let cp = &cp;
        for row in lo..hi {
            let bi = row / m;
            let i = row % m;
            let arow = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
            let bmat = &b[bi * k * n..(bi + 1) * k * n];
            let crow = unsafe { std::slice::from_raw_parts_mut(cp.0.add(row * n), n) };
            if transpose_b {
                let mut j = 0;
                while j + 4 <= n {
                    let b0 = &bmat[j * k..(j + 1) * k];
                    let b1 = &bmat[(j + 1) * k..(j + 2) * k];
                    let b2 = &bmat[(j + 2) * k..(j + 3) * k];
                    let b3 = &bmat[(j + 3) * k..(j + 4) * k];
                    let (mut s0, mut s1, mut s2, mut s3) =
                        (S::ZERO, S::ZERO, S::ZERO, S::ZERO);
                    for kk in 0..k {
                        let av = arow[kk];
                        s0 = av.mul_add(b0[kk], s0);
                        s1 = av.mul_add(b1[kk], s1);
                        s2 = av.mul_add(b2[kk], s2);
                        s3 = av.mul_add(b3[kk], s3);
                    }
                    crow[j] = s0;
                    crow[j + 1] = s1;
                    crow[j + 2] = s2;
                    crow[j + 3] = s3;
                    j += 4;
                }
                while j < n {
                    let brow = &bmat[j * k..(j + 1) * k];
                    let mut acc = S::ZERO;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc = av.mul_add(bv, acc);
                    }
                    crow[j] = acc;
                    j += 1;
                }
            } else {
                crow.fill(S::ZERO);
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &bmat[kk * n..(kk + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj = aik.mul_add(bj, *cj);
                    }
                }
            }
        }
    });
}

/// Batched C[b] = A[b]ᵀ · B[b] with A (batch, k, m), B (batch, k, n),
/// C (batch, m, n); used by batched-matmul gradients.
pub fn bmm_tn<S: Scalar>(
    a: &[S],
    b: &[S],
    c: &mut [S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), batch * k * m);
    assert_eq!(b.len(), batch * k * n);
    assert_eq!(c.len(), batch * m * n);
    let cp = SendPtr(c.as_mut_ptr());
    parallel_rows(batch, 1, |lo, hi| {
        let cp = &cp;
        for bi in lo..hi {
            let amat = &a[bi * k * m..(bi + 1) * k * m];
            let bmat = &b[bi * k * n..(bi + 1) * k * n];
            let cmat =
                unsafe { std::slice::from_raw_parts_mut(cp.0.add(bi * m * n), m * n) };
            cmat.fill(S::ZERO);
            for kk in 0..k {
                let arow = &amat[kk * m..(kk + 1) * m];
                let brow = &bmat[kk * n..(kk + 1) * n];
                for (i, &aki) in arow.iter().enumerate() {
                    let crow = &mut cmat[i * n..(i + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj = aki.mul_add(bj, *cj);
                    }
                }
            }
        }
    });
}

/// Row-wise softmax in place, with optional causal masking: when
/// `causal_t` is `Some(t)`, rows are interpreted as query positions within
/// blocks of `t` rows and keys after the query are masked out.
pub fn softmax_rows<S: Scalar>(x: &mut [S], rows: usize, cols: usize, causal_t: Option<usize>) {
    assert_eq!(x.len(), rows * cols);
    let xp = SendPtr(x.as_mut_ptr());
    parallel_rows(rows, 64, |lo, hi| {
        let xp = &xp;
        for r in lo..hi {
            let row = unsafe { std::slice::from_raw_parts_mut(xp.0.add(r * cols), cols) };
            let visible = match causal_t {
                Some(t) => (r % t) + 1,
                None => cols,
            };
            let mut mx = S::neg_infinity();
            for &v in row[..visible].iter() {
                mx = mx.maximum(v);
            }
            let mut sum = S::ZERO;
            for v in row[..visible].iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row[..visible].iter_mut() {
                *v = *v / sum;
            }
            for v in row[visible..].iter_mut() {
                *v = S::ZERO;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes_agree_with_reference() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_nn(&a, &b, &mut c, 2, 3, 4);
        // Reference: brute force.
        let mut expect = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    expect[i * 4 + j] += a[i * 3 + k] * b[k * 4 + j];
                }
            }
        }
        assert_eq!(c, expect);
    }

    #[test]
    fn transposed_variants_match_nn() {
        let m = 5;
        let k = 7;
        let n = 4;
        let mut rng = crate::rng::Rng::new(1);
        let a: Vec<f64> = (0..m * k).map(|_| rng.next_f64() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.next_f64() - 0.5).collect();
        let mut c_ref = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c_ref, m, k, n);

        // nt: B' = Bᵀ stored (n×k)
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: A' = Aᵀ stored (k×m)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic_and_causal() {
        let t = 4;
        let mut x: Vec<f32> = (0..t * t).map(|v| (v as f32) * 0.3 - 1.0).collect();
        softmax_rows(&mut x, t, t, Some(t));
        for r in 0..t {
            let row = &x[r * t..(r + 1) * t];
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for (j, &v) in row.iter().enumerate() {
                if j > r {
                    assert_eq!(v, 0.0, "causal leak at ({r},{j})");
                }
            }
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut x = vec![1000.0f32, 999.0, -1000.0];
        softmax_rows(&mut x, 1, 3, None);
        assert!(x.iter().all(|v| v.is_finite()));
        assert!((x.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
