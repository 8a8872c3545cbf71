//! Scalar abstraction shared by every numeric kernel in the crate.
//!
//! Models, losses and solvers are written once against [`Real`]. Training runs
//! in `f32`, gradient verification in `f64`, and the R1 penalty's parameter
//! gradient is obtained by running the reverse pass over [`Dual`] numbers
//! (forward-over-reverse), which yields exact Hessian-vector products.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by tensors, the autodiff tape and solvers.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` on strided
    /// row/column layouts. `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    /// Literal conversion; panics only for values the type cannot represent.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal out of range")
    }

    /// Primal value as `f64` (drops any tangent part).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (usize, usize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(last < len, "gemm operand too small: need index {last}, len {len}");
}

macro_rules! native_gemm {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: extents checked above; matrixmultiply reads/writes
                // exactly the strided windows described by the dimensions.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

native_gemm!(f32, matrixmultiply::sgemm);
native_gemm!(f64, matrixmultiply::dgemm);

mod dual;
pub use dual::Dual;
