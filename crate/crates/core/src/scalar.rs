use core::fmt::{Debug, Display};
use num_traits::Float;

/// Floating-point element type used by tensors. Training runs in `f32`,
/// gradient verification in `f64`.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `out[m×n] = a[m×k] · b[k×n]` with arbitrary strides, accumulating
    /// into `out` when `beta == 1`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        out: &mut [Self],
    );
}

fn strided_fits(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> bool {
    rs >= 0 && cs >= 0 && (rows - 1) * (rs as usize) + (cols - 1) * (cs as usize) < len
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:ident) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                out: &mut [Self],
            ) {
                assert!(out.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if beta == 0.0 {
                        out[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                assert!(strided_fits(a.len(), m, k, rsa, csa));
                assert!(strided_fits(b.len(), k, n, rsb, csb));
                // SAFETY: the asserts above check that every strided index
                // stays inside `a`, `b` and `out`.
                unsafe {
                    matrixmultiply::$gemm(
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
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);
