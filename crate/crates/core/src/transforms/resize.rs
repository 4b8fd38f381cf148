//! Bilinear resize with half-pixel centers and edge clamping, plus its exact
//! transpose.
//!
//! For output index `i` the source coordinate is `(i + 0.5)·in/out − 0.5`,
//! clamped to `[0, in − 1]`; the two neighbouring source samples are mixed
//! with linear weights. The adjoint scatters with the same weights.

use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = img.chw()?;
    ensure_arg!(out_h > 0 && out_w > 0, "resize target must be positive, got {out_h}×{out_w}");
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ty in &ys {
            let (wy1, wy0) = (T::lit(ty.frac), T::lit(1.0 - ty.frac));
            let r0 = &plane[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &plane[ty.hi * w..(ty.hi + 1) * w];
            for tx in &xs {
                let (wx1, wx0) = (T::lit(tx.frac), T::lit(1.0 - tx.frac));
                let top = r0[tx.lo] * wx0 + r0[tx.hi] * wx1;
                let bottom = r1[tx.lo] * wx0 + r1[tx.hi] * wx1;
                out.push(top * wy0 + bottom * wy1);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Transpose of [`bilinear_resize`] from `in_h × in_w` to the grad's spatial size.
pub fn bilinear_resize_adjoint<T: Real>(grad: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = grad.chw()?;
    ensure_arg!(in_h > 0 && in_w > 0, "resize source must be positive, got {in_h}×{in_w}");
    if (out_h, out_w) == (in_h, in_w) {
        return Ok(grad.clone());
    }
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let g = grad.data();
    let mut out = vec![T::zero(); c * in_h * in_w];
    for ci in 0..c {
        let plane = &mut out[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        let gplane = &g[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for (oy, ty) in ys.iter().enumerate() {
            let (wy1, wy0) = (T::lit(ty.frac), T::lit(1.0 - ty.frac));
            for (ox, tx) in xs.iter().enumerate() {
                let (wx1, wx0) = (T::lit(tx.frac), T::lit(1.0 - tx.frac));
                let v = gplane[oy * out_w + ox];
                let (top, bottom) = (v * wy0, v * wy1);
                plane[ty.lo * in_w + tx.lo] += top * wx0;
                plane[ty.lo * in_w + tx.hi] += top * wx1;
                plane[ty.hi * in_w + tx.lo] += bottom * wx0;
                plane[ty.hi * in_w + tx.hi] += bottom * wx1;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out)
}
