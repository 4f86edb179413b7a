//! Scalar trait and strided matrix products.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// # Safety
    /// Every index reached through the given dimensions and strides must be
    /// in bounds for `a`, `b` and `c`, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_kernel(
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Which matrix product implementation the model uses. `Reference` is a
/// plain triple loop; `Blocked` is the packed, vectorized kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Reference,
    #[default]
    Blocked,
}

/// A strided view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View { offset, rows, cols, rs, cs: 1 }
    }

    /// Transposed view of a row-major block.
    pub fn transposed(offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View { offset, rows: cols, cols: rows, rs: 1, cs: rs }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }

    fn at(&self, i: usize, j: usize) -> usize {
        self.offset + i * self.rs + j * self.cs
    }
}

/// `c = alpha * a b + beta * c`; when `beta` is zero `c` is not read.
pub fn gemm<T: Real>(
    backend: Backend,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output shape differs");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    match backend {
        Backend::Blocked => unsafe {
            T::gemm_kernel(
                av.rows,
                av.cols,
                bv.cols,
                alpha,
                a.as_ptr().add(av.offset),
                av.rs as isize,
                av.cs as isize,
                b.as_ptr().add(bv.offset),
                bv.rs as isize,
                bv.cs as isize,
                beta,
                c.as_mut_ptr().add(cv.offset),
                cv.rs as isize,
                cv.cs as isize,
            )
        },
        Backend::Reference => {
            for i in 0..cv.rows {
                for j in 0..cv.cols {
                    let mut acc = T::zero();
                    for k in 0..av.cols {
                        acc += a[av.at(i, k)] * b[bv.at(k, j)];
                    }
                    let out = &mut c[cv.at(i, j)];
                    *out = if beta == T::zero() {
                        alpha * acc
                    } else {
                        alpha * acc + beta * *out
                    };
                }
            }
        }
    }
}

/// `y[rows, out] = x[rows, inp] w[inp, out] + beta y`.
pub fn matmul<T: Real>(
    be: Backend,
    x: &[T],
    rows: usize,
    inp: usize,
    w: &[T],
    out: usize,
    beta: T,
    y: &mut [T],
) {
    gemm(
        be,
        T::one(),
        x,
        View::row_major(0, rows, inp, inp),
        w,
        View::row_major(0, inp, out, out),
        beta,
        y,
        View::row_major(0, rows, out, out),
    );
}

/// `dw[inp, out] += x[rows, inp]^T dy[rows, out]`.
pub fn matmul_tn_acc<T: Real>(
    be: Backend,
    x: &[T],
    rows: usize,
    inp: usize,
    dy: &[T],
    out: usize,
    dw: &mut [T],
) {
    gemm(
        be,
        T::one(),
        x,
        View::transposed(0, rows, inp, inp),
        dy,
        View::row_major(0, rows, out, out),
        T::one(),
        dw,
        View::row_major(0, inp, out, out),
    );
}

/// `dx[rows, inp] = dy[rows, out] w[inp, out]^T + beta dx`.
pub fn matmul_nt<T: Real>(
    be: Backend,
    dy: &[T],
    rows: usize,
    out: usize,
    w: &[T],
    inp: usize,
    beta: T,
    dx: &mut [T],
) {
    gemm(
        be,
        T::one(),
        dy,
        View::row_major(0, rows, out, out),
        w,
        View::transposed(0, inp, out, out),
        beta,
        dx,
        View::row_major(0, rows, inp, inp),
    );
}
