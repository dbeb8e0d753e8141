use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar storage type of a [`super::Tensor`].
///
/// `f64` is the right choice for finite-difference gradient checking, `f32`
/// for training throughput. The gemm hook dispatches to the matching
/// `matrixmultiply` kernel so both types share one code path everywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;

    /// `c = alpha * a @ b + beta * c` over raw row/column strides.
    ///
    /// # Safety
    /// Pointers must cover `m*k`, `k*n`, and `m*n` elements under the given
    /// strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Range-reduced polynomial `exp` for f32: `x = n ln2 + r` with the residual
/// evaluated by a degree-6 Taylor series and the `2^n` scale applied through
/// the exponent bits. Branch-free so softmax loops auto-vectorize; rounding
/// goes through the 1.5*2^23 magic-number trick instead of libm. Worst-case
/// error is a few ulps, NaN propagates (clamp keeps NaN, the int cast then
/// yields scale 2^0), and `exp(0) == 1` exactly. The f64 path keeps libm
/// precision for gradient checking.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // split ln2 so r = x - n*ln2 stays accurate across the whole range
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    // max/min instead of clamp: branchless, so the surrounding loops
    // vectorize; NaN inputs squash to the lower bound here, and the trainer
    // checks parameter finiteness separately
    #[allow(clippy::manual_clamp)]
    let x = x.max(-87.0).min(88.0);
    let biased = x * LOG2E + MAGIC;
    let n = biased - MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // the low mantissa bits of `biased` hold n as an integer, so the 2^n
    // scale comes from pure integer ops with no float-to-int cast
    let n_bits = biased.to_bits().wrapping_sub(MAGIC.to_bits()) as i32;
    let scale = f32::from_bits(((n_bits + 127) << 23) as u32);
    scale * p
}

#[inline(always)]
fn tanh_f32(x: f32) -> f32 {
    // sign(x) * (1 - e^-2|x|) / (1 + e^-2|x|), branch-free; saturates on its
    // own once the exponential underflows
    let e2 = exp_f32(-2.0 * x.abs());
    ((1.0 - e2) / (1.0 + e2)).copysign(x)
}

macro_rules! element_common {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        const ZERO: Self = 0.0;
        const ONE: Self = 1.0;
        const DTYPE: Dtype = $dtype;

        #[inline(always)]
        fn from_f64(v: f64) -> Self {
            v as $ty
        }
        #[inline(always)]
        fn to_f64(self) -> f64 {
            self as f64
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
        fn abs(self) -> Self {
            self.abs()
        }
        #[inline(always)]
        fn is_finite(self) -> bool {
            <$ty>::is_finite(self)
        }
        #[inline(always)]
        fn maximum(self, other: Self) -> Self {
            // branchless maxss/maxsd; the generic comparison mispredicts
            // badly inside softmax max scans
            <$ty>::max(self, other)
        }
        #[inline(always)]
        fn minimum(self, other: Self) -> Self {
            <$ty>::min(self, other)
        }

        #[inline]
        unsafe fn gemm(
            m: usize,
            k: usize,
            n: usize,
            alpha: Self,
            a: *const Self,
            rsa: isize,
            csa: isize,
            b: *const Self,
            rsb: isize,
            csb: isize,
            beta: Self,
            c: *mut Self,
            rsc: isize,
            csc: isize,
        ) {
            $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    };
}

impl Element for f32 {
    element_common!(f32, Dtype::F32, matrixmultiply::sgemm);

    #[inline(always)]
    fn exp(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn tanh(self) -> Self {
        tanh_f32(self)
    }
}

impl Element for f64 {
    element_common!(f64, Dtype::F64, matrixmultiply::dgemm);

    #[inline(always)]
    fn exp(self) -> Self {
        self.exp()
    }

    #[inline(always)]
    fn tanh(self) -> Self {
        self.tanh()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_libm_within_ulps() {
        let mut x = -87.0f32;
        let mut worst = 0.0f64;
        while x < 88.0 {
            let fast = exp_f32(x) as f64;
            let exact = (x as f64).exp();
            let rel = ((fast - exact) / exact).abs();
            if rel > worst {
                worst = rel;
            }
            x += 0.0137;
        }
        assert!(worst < 5e-7, "worst relative error {worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert_eq!(exp_f32(f32::NEG_INFINITY), exp_f32(-87.0));
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let mut x = -12.0f32;
        while x < 12.0 {
            let fast = tanh_f32(x) as f64;
            let exact = (x as f64).tanh();
            assert!((fast - exact).abs() < 2e-6, "x={x}: {fast} vs {exact}");
            x += 0.0171;
        }
    }
}
