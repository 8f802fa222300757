//! Accumulating `f32` matrix products tuned for the shapes seen in training:
//! a handful of rows against weight matrices of a few hundred columns.
//! Both require contiguous rows where noted and fall back to
//! `general_mat_mul` otherwise.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, Axis};

#[inline(always)]
fn madd<const FMA: bool>(a: f32, b: f32, acc: f32) -> f32 {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[inline(always)]
fn axpy<const FMA: bool>(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = madd::<FMA>(alpha, x, *y);
    }
}

#[inline(always)]
fn nn_body<const FMA: bool>(a: &ArrayView2<'_, f32>, b: &ArrayView2<'_, f32>, c: &mut ArrayViewMut2<'_, f32>) {
    for (arow, mut crow) in a.outer_iter().zip(c.outer_iter_mut()) {
        let crow = crow.as_slice_mut().expect("contiguous");
        for (&s, brow) in arow.iter().zip(b.outer_iter()) {
            if s != 0.0 {
                axpy::<FMA>(s, brow.to_slice().expect("contiguous"), crow);
            }
        }
    }
}

#[inline(always)]
fn tn_body<const FMA: bool>(a: &ArrayView2<'_, f32>, b: &ArrayView2<'_, f32>, c: &mut ArrayViewMut2<'_, f32>) {
    let brows: Vec<&[f32]> = b.outer_iter().map(|r| r.to_slice().expect("contiguous")).collect();
    for (acol, mut crow) in a.axis_iter(Axis(1)).zip(c.outer_iter_mut()) {
        let crow = crow.as_slice_mut().expect("contiguous");
        for (&s, brow) in acol.iter().zip(&brows) {
            if s != 0.0 {
                axpy::<FMA>(s, brow, crow);
            }
        }
    }
}

macro_rules! dispatch {
    ($name:ident, $body:ident) => {
        fn $name(a: &ArrayView2<'_, f32>, b: &ArrayView2<'_, f32>, c: &mut ArrayViewMut2<'_, f32>) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn fast(a: &ArrayView2<'_, f32>, b: &ArrayView2<'_, f32>, c: &mut ArrayViewMut2<'_, f32>) {
                    $body::<true>(a, b, c)
                }
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { fast(a, b, c) };
                }
            }
            $body::<false>(a, b, c)
        }
    };
}

dispatch!(nn_dispatch, nn_body);
dispatch!(tn_dispatch, tn_body);

fn rows_contiguous(x: &ArrayView2<'_, f32>) -> bool {
    x.ncols() <= 1 || x.strides()[1] == 1
}

fn rows_contiguous_mut(x: &ArrayViewMut2<'_, f32>) -> bool {
    x.ncols() <= 1 || x.strides()[1] == 1
}

/// `c += a · b`
pub(crate) fn mm_nn(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, c: &mut ArrayViewMut2<'_, f32>) {
    assert_eq!((a.nrows(), b.ncols(), a.ncols()), (c.nrows(), c.ncols(), b.nrows()));
    if rows_contiguous(&b) && rows_contiguous_mut(c) {
        nn_dispatch(&a, &b, c)
    } else {
        general_mat_mul(1.0, &a, &b, 1.0, c)
    }
}

/// `c += aᵀ · b`
pub(crate) fn mm_tn(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, c: &mut ArrayViewMut2<'_, f32>) {
    assert_eq!((a.ncols(), b.ncols(), a.nrows()), (c.nrows(), c.ncols(), b.nrows()));
    if rows_contiguous(&b) && rows_contiguous_mut(c) {
        tn_dispatch(&a, &b, c)
    } else {
        general_mat_mul(1.0, &a.t(), &b, 1.0, c)
    }
}
