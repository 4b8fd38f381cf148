//! Diverse-input (random resize and pad) transform and its adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Tensor};
use crate::transforms::resize::{bilinear_resize, bilinear_resize_adjoint};
use crate::transforms::rng::RngStream;

/// Parameters of the DI draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiParams {
    /// Probability that the transform is applied at all.
    pub p: f64,
    /// Smallest resize target as a fraction of the image side.
    pub min_ratio: f64,
}

impl Default for DiParams {
    fn default() -> Self {
        Self { p: 0.7, min_ratio: 0.7 }
    }
}

impl DiParams {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!((0.0..=1.0).contains(&self.p), "DI probability {} outside [0,1]", self.p);
        ensure_arg!(
            self.min_ratio > 0.0 && self.min_ratio <= 1.0,
            "DI min_ratio {} outside (0,1]",
            self.min_ratio
        );
        Ok(())
    }
}

/// Every random choice made by one DI call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiTrace {
    pub applied: bool,
    /// Side of the square the image is resized to.
    pub resize: usize,
    pub top: usize,
    pub left: usize,
}

impl DiTrace {
    pub fn identity() -> Self {
        Self {
            applied: false,
            resize: 0,
            top: 0,
            left: 0,
        }
    }

    /// Draw a trace for an `h × w` image. One Bernoulli draw decides whether
    /// the transform applies; the resize side is uniform in
    /// `[⌈min_ratio·s⌉, s − 1]` with `s = min(h, w)`, offsets uniform.
    pub fn draw(h: usize, w: usize, params: &DiParams, rng: &mut RngStream) -> Result<Self> {
        params.validate()?;
        let applied = rng.bernoulli(params.p);
        let side = h.min(w);
        if !applied || side < 2 {
            return Ok(Self::identity());
        }
        let hi = side - 1;
        let lo = ((params.min_ratio * side as f64).ceil() as usize).clamp(1, hi);
        let resize = rng.int_inclusive(lo, hi);
        let top = rng.int_inclusive(0, h - resize);
        let left = rng.int_inclusive(0, w - resize);
        Ok(Self {
            applied: true,
            resize,
            top,
            left,
        })
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.applied {
            ensure_arg!(
                self.resize >= 1
                    && self.resize < h.max(w)
                    && self.top + self.resize <= h
                    && self.left + self.resize <= w,
                "DI trace {self:?} does not fit a {h}×{w} image"
            );
        }
        Ok(())
    }
}

/// Replay a recorded DI trace on `img`.
pub fn di_apply<T: Real>(img: &Tensor<T>, trace: &DiTrace) -> Result<Tensor<T>> {
    let (c, h, w) = img.chw()?;
    trace.check(h, w)?;
    if !trace.applied {
        return Ok(img.clone());
    }
    let r = trace.resize;
    let small = bilinear_resize(img, r, r)?;
    let mut canvas = Tensor::zeros(&[c, h, w]);
    let dst = canvas.data_mut();
    for ci in 0..c {
        for y in 0..r {
            let from = &small.data()[(ci * r + y) * r..(ci * r + y + 1) * r];
            let start = (ci * h + trace.top + y) * w + trace.left;
            dst[start..start + r].copy_from_slice(from);
        }
    }
    Ok(canvas)
}

pub fn di_transform<T: Real>(
    img: &Tensor<T>,
    params: &DiParams,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, DiTrace)> {
    let (_, h, w) = img.chw()?;
    let trace = DiTrace::draw(h, w, params, rng)?;
    Ok((di_apply(img, &trace)?, trace))
}

/// Exact adjoint of [`di_apply`] for a fixed trace: crop the pasted window
/// and pull it back through the resize transpose.
pub fn di_adjoint<T: Real>(grad_out: &Tensor<T>, trace: &DiTrace) -> Result<Tensor<T>> {
    let (c, h, w) = grad_out.chw()?;
    trace.check(h, w)?;
    if !trace.applied {
        return Ok(grad_out.clone());
    }
    let r = trace.resize;
    let g = grad_out.data();
    let mut window = Vec::with_capacity(c * r * r);
    for ci in 0..c {
        for y in 0..r {
            let start = (ci * h + trace.top + y) * w + trace.left;
            window.extend_from_slice(&g[start..start + r]);
        }
    }
    bilinear_resize_adjoint(&Tensor::new(vec![c, r, r], window)?, h, w)
}
