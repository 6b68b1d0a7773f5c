//! Stride-1 "same" convolution via im2col + GEMM.

use crate::error::{NdError, Result};
use crate::grid::{Grid4, Shape4};
use crate::real::Real;

pub(crate) fn check_conv_shapes(
    x: Shape4,
    weight: Shape4,
    bias: Option<Shape4>,
) -> Result<Shape4> {
    let [c_out, c_in, kh, kw] = weight.0;
    if kh != kw || kh % 2 == 0 {
        return Err(NdError::shape(
            "conv2d_same",
            format!("kernel must be square with odd size, got {weight}"),
        ));
    }
    if x.c() != c_in {
        return Err(NdError::shape(
            "conv2d_same",
            format!("input {x} has {} channels, weight {weight} expects {c_in}", x.c()),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(NdError::shape(
                "conv2d_same",
                format!("bias {b} does not match {c_out} output channels"),
            ));
        }
    }
    Ok(Shape4::new(x.n(), c_out, x.h(), x.w()))
}

/// Unfold one `c x h x w` sample into a `(c*k*k) x (h*w)` patch matrix with
/// zero padding of `k/2` on each side.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let zero = T::zero();
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * hw;
                let dst = &mut cols[row..row + hw];
                let dc = kj as isize - pad;
                let lo = ((-dc).max(0) as usize).min(w);
                let hi = (w as isize - dc).min(w as isize).max(lo as isize) as usize;
                for r in 0..h {
                    let drow = &mut dst[r * w..(r + 1) * w];
                    let sr = r as isize + ki as isize - pad;
                    if sr < 0 || sr >= h as isize {
                        drow.fill(zero);
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    drow[..lo].fill(zero);
                    drow[hi..].fill(zero);
                    if hi > lo {
                        let s0 = (lo as isize + dc) as usize;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch-matrix gradients into `dx`.
pub(crate) fn col2im_add<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [T],
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * hw;
                let src = &cols[row..row + hw];
                let dc = kj as isize - pad;
                let lo = ((-dc).max(0) as usize).min(w);
                let hi = (w as isize - dc).min(w as isize).max(lo as isize) as usize;
                for r in 0..h {
                    let sr = r as isize + ki as isize - pad;
                    if sr < 0 || sr >= h as isize || hi == lo {
                        continue;
                    }
                    let srow = &src[r * w + lo..r * w + hi];
                    let d0 = sr as usize * w + (lo as isize + dc) as usize;
                    for (d, &s) in plane[d0..d0 + (hi - lo)].iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    x: &Grid4<T>,
    weight: &Grid4<T>,
    bias: Option<&Grid4<T>>,
) -> Result<Grid4<T>> {
    let out_shape = check_conv_shapes(x.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let [n, c_in, h, w] = x.shape().0;
    let [c_out, _, k, _] = weight.shape().0;
    let hw = h * w;
    let kk = c_in * k * k;
    let mut out = Grid4::zeros(out_shape);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let patches: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c_in, h, w, k, &mut cols);
            &cols
        };
        let out_s = &mut out.data_mut()[s * c_out * hw..(s + 1) * c_out * hw];
        if let Some(b) = bias {
            for (co, chunk) in out_s.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            c_out,
            kk,
            hw,
            T::one(),
            weight.data(),
            (kk, 1),
            patches,
            (hw, 1),
            beta,
            out_s,
            (hw, 1),
        );
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Grid4<T>>,
    pub dweight: Option<Grid4<T>>,
    pub dbias: Option<Grid4<T>>,
}

pub(crate) fn backward<T: Real>(
    x: &Grid4<T>,
    weight: &Grid4<T>,
    bias_shape: Option<Shape4>,
    dout: &Grid4<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, c_in, h, w] = x.shape().0;
    let [c_out, _, k, _] = weight.shape().0;
    let hw = h * w;
    let kk = c_in * k * k;
    let mut dx = need[0].then(|| Grid4::zeros(x.shape()));
    let mut dweight = need[1].then(|| Grid4::zeros(weight.shape()));
    let mut dbias = match (need[2], bias_shape) {
        (true, Some(s)) => Some(Grid4::zeros(s)),
        _ => None,
    };
    let mut cols = if k == 1 || dweight.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    let mut dcols = if dx.is_some() && k != 1 {
        vec![T::zero(); kk * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let dout_s = &dout.data()[s * c_out * hw..(s + 1) * c_out * hw];
        if let Some(db) = dbias.as_mut() {
            for (co, chunk) in dout_s.chunks(hw).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            let xs = x.sample(s);
            let patches: &[T] = if k == 1 {
                xs
            } else {
                im2col(xs, c_in, h, w, k, &mut cols);
                &cols
            };
            // dW += dOut (c_out x hw) * patches^T (hw x kk)
            T::gemm(
                c_out,
                hw,
                kk,
                T::one(),
                dout_s,
                (hw, 1),
                patches,
                (1, hw),
                T::one(),
                dw.data_mut(),
                (kk, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dx_s = &mut dx.data_mut()[s * c_in * hw..(s + 1) * c_in * hw];
            if k == 1 {
                T::gemm(
                    c_in,
                    c_out,
                    hw,
                    T::one(),
                    weight.data(),
                    (1, kk),
                    dout_s,
                    (hw, 1),
                    T::zero(),
                    dx_s,
                    (hw, 1),
                );
            } else {
                // dcols = W^T (kk x c_out) * dOut (c_out x hw)
                T::gemm(
                    kk,
                    c_out,
                    hw,
                    T::one(),
                    weight.data(),
                    (1, kk),
                    dout_s,
                    (hw, 1),
                    T::zero(),
                    &mut dcols,
                    (hw, 1),
                );
                col2im_add(&dcols, c_in, h, w, k, dx_s);
            }
        }
    }
    ConvGrads {
        dx,
        dweight,
        dbias,
    }
}
