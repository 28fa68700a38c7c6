//! Scalar abstraction and the handful of dense kernels the model needs.
//!
//! Everything is row-major `Vec<F>`. The engine runs in `f32`; the same code
//! instantiated at `f64` serves as the high-precision mode used by the
//! gradient and equivalence oracles.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: lengths checked above; strides describe dense m×k, k×n and m×n views.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

fn check_gemm(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k, "gemm: lhs holds {a} < {m}x{k}");
    assert!(b >= k * n, "gemm: rhs holds {b} < {k}x{n}");
    assert!(c >= m * n, "gemm: out holds {c} < {m}x{n}");
}

/// `out = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    F::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), F::zero(), &mut out);
    out
}

/// `out = a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_bt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    F::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), F::zero(), &mut out);
    out
}

/// `acc += aᵀ · b` for `a: m×k`, `b: m×n`; `acc` is `k×n`.
pub fn add_matmul_at<F: Real>(acc: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    F::gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), F::one(), acc);
}

/// Adds `bias` to every row of the `rows × bias.len()` matrix `x`.
pub fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Column sums of `x` accumulated into `acc`.
pub fn add_column_sums<F: Real>(acc: &mut [F], x: &[F]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Layer normalisation over rows of width `gain.len()`, returning the output
/// together with each row's mean and reciprocal standard deviation.
pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let width = gain.len();
    let rows = x.len() / width;
    let eps = F::from_f64_lossy(LAYER_NORM_EPS);
    let inv_width = F::one() / F::from_usize(width).unwrap();
    let mut out = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mean = src.iter().copied().sum::<F>() * inv_width;
        let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_width;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..width {
            dst[i] = (src[i] - mean) * rstd * gain[i] + bias[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(SQRT_2_OVER_PI);
    let a = F::from_f64_lossy(GELU_COEF);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(SQRT_2_OVER_PI);
    let a = F::from_f64_lossy(GELU_COEF);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Numerically stable `log_softmax` in f64 regardless of storage precision.
pub fn log_softmax<F: Real>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v.as_f64() - lse).collect()
}
