//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c += a·b` for strided `m×k` and `k×n` operands (strides in elements).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self], sc: (usize, usize));
}

fn check_extent(m: usize, k: usize, n: usize, la: usize, sa: (usize, usize), lb: usize, sb: (usize, usize), lc: usize, sc: (usize, usize)) -> bool {
    let last = |r: usize, c: usize, s: (usize, usize)| if r == 0 || c == 0 { 0 } else { (r - 1) * s.0 + (c - 1) * s.1 + 1 };
    last(m, k, sa) <= la && last(k, n, sb) <= lb && last(m, n, sc) <= lc
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], sa: (usize, usize), b: &[f32], sb: (usize, usize), c: &mut [f32], sc: (usize, usize)) {
        assert!(check_extent(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc), "gemm operand out of bounds");
        // SAFETY: every strided access stays within the slices checked above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa.0 as isize, sa.1 as isize,
                b.as_ptr(), sb.0 as isize, sb.1 as isize,
                1.0, c.as_mut_ptr(), sc.0 as isize, sc.1 as isize,
            )
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], sc: (usize, usize)) {
        assert!(check_extent(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc), "gemm operand out of bounds");
        // SAFETY: every strided access stays within the slices checked above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa.0 as isize, sa.1 as isize,
                b.as_ptr(), sb.0 as isize, sb.1 as isize,
                1.0, c.as_mut_ptr(), sc.0 as isize, sc.1 as isize,
            )
        }
    }
}
