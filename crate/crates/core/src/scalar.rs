//! Scalar abstraction shared by the numeric modules.
//!
//! Densities, conjugate updates and the autodiff tape are written against
//! [`Scalar`] so they run in `f32` or `f64`. The samplers and experiments
//! instantiate everything at `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by the densities and the tape.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// `as f64`.
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Natural log of the gamma function.
    fn lgamma(self) -> Self {
        Self::c(statrs::function::gamma::ln_gamma(self.f64()))
    }

    /// Derivative of `lgamma`.
    fn digamma(self) -> Self {
        Self::c(statrs::function::gamma::digamma(self.f64()))
    }

    /// `ln(2π)`.
    fn ln_2pi() -> Self {
        (Self::PI() + Self::PI()).ln()
    }

    /// `C = A·B` for an `m×k` by `k×n` product given as strided slices;
    /// `C` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: [usize; 2], b: &[Self], b_strides: [usize; 2], c: &mut [Self], c_row: usize) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    acc += a[i * a_strides[0] + p * a_strides[1]] * b[p * b_strides[0] + j * b_strides[1]];
                }
                c[i * c_row + j] = acc;
            }
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: [usize; 2]) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * strides[0] + (cols - 1) * strides[1] < len, "strided operand out of bounds");
    }
}

macro_rules! blas_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], c: &mut [Self], c_row: usize) {
                check_extent(a.len(), m, k, sa);
                check_extent(b.len(), k, n, sb);
                check_extent(c.len(), m, n, [c_row, 1]);
                // SAFETY: the extents above bound every index the kernel reads or writes.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa[0] as isize,
                        sa[1] as isize,
                        b.as_ptr(),
                        sb[0] as isize,
                        sb[1] as isize,
                        0.0,
                        c.as_mut_ptr(),
                        c_row as isize,
                        1,
                    )
                }
            }
        }
    };
}

blas_scalar!(f32, matrixmultiply::sgemm);
blas_scalar!(f64, matrixmultiply::dgemm);

/// Numerically stable `log Σ exp(x_i)`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    if max == S::infinity() {
        return max;
    }
    let sum = xs.iter().fold(S::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

/// `log( (1/n) Σ exp(x_i) )`.
pub fn log_mean_exp<S: Scalar>(xs: &[S]) -> S {
    log_sum_exp(xs) - S::c(xs.len() as f64).ln()
}

/// Softmax of log-weights; entries at `-inf` map to zero.
pub fn softmax<S: Scalar>(xs: &[S]) -> Vec<S> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}
