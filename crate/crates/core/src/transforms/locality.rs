//! Random square crop resized back to the full image: the local branch input.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Tensor};
use crate::transforms::resize::bilinear_resize;
use crate::transforms::rng::RngStream;

/// Crop area bounds as fractions of the image area: `[lower, lower + interval]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropScale {
    pub lower: f64,
    pub interval: f64,
}

impl Default for CropScale {
    fn default() -> Self {
        Self { lower: 0.1, interval: 0.0 }
    }
}

impl CropScale {
    pub fn new(lower: f64, interval: f64) -> Result<Self> {
        let s = Self { lower, interval };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.lower > 0.0 && self.lower <= 1.0,
            "crop lower bound {} outside (0,1]",
            self.lower
        );
        ensure_arg!(self.interval >= 0.0, "crop interval {} is negative", self.interval);
        ensure_arg!(
            self.lower + self.interval <= 1.0 + 1e-12,
            "crop upper bound {} exceeds 1",
            self.lower + self.interval
        );
        Ok(())
    }
}

/// The crop rectangle chosen by one [`loc_crop`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocTrace {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl LocTrace {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            side: h.min(w),
        }
    }

    /// Area fraction uniform in `[lower, lower+interval]` (no draw when the
    /// interval is zero), side `round(√(a·H·W))` clamped to `[1, min(H,W)]`,
    /// then a uniform top-left corner. Aspect ratio is fixed at one.
    pub fn draw(h: usize, w: usize, scale: &CropScale, rng: &mut RngStream) -> Result<Self> {
        scale.validate()?;
        let area = if scale.interval == 0.0 {
            scale.lower
        } else {
            rng.uniform_range(scale.lower, scale.lower + scale.interval)
        };
        let side = ((area * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
        let top = rng.int_inclusive(0, h - side);
        let left = rng.int_inclusive(0, w - side);
        Ok(Self { top, left, side })
    }
}

/// Replay a crop trace: cut the square and resize it to the image size.
pub fn loc_apply<T: Real>(img: &Tensor<T>, trace: &LocTrace) -> Result<Tensor<T>> {
    let (c, h, w) = img.chw()?;
    let s = trace.side;
    ensure_arg!(
        s >= 1 && trace.top + s <= h && trace.left + s <= w,
        "crop {trace:?} outside a {h}×{w} image"
    );
    let src = img.data();
    let mut patch = Vec::with_capacity(c * s * s);
    for ci in 0..c {
        for y in 0..s {
            let start = (ci * h + trace.top + y) * w + trace.left;
            patch.extend_from_slice(&src[start..start + s]);
        }
    }
    bilinear_resize(&Tensor::new(vec![c, s, s], patch)?, h, w)
}

pub fn loc_crop<T: Real>(
    img: &Tensor<T>,
    scale: &CropScale,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, LocTrace)> {
    let (_, h, w) = img.chw()?;
    let trace = LocTrace::draw(h, w, scale, rng)?;
    Ok((loc_apply(img, &trace)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::rng::{Branch, StreamKey};

    fn rng(i: u64) -> RngStream {
        RngStream::new(StreamKey::new(1, i, 0, Branch::Loc))
    }

    #[test]
    fn full_scale_is_identity() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 97) as f32 / 97.0);
        let (out, trace) = loc_crop(&img, &CropScale::new(1.0, 0.0).unwrap(), &mut rng(0)).unwrap();
        assert_eq!(trace, LocTrace::full(32, 32));
        assert_eq!(out, img);
    }

    #[test]
    fn tenth_area_on_32_gives_side_10() {
        let img = Tensor::<f32>::zeros(&[3, 32, 32]);
        for i in 0..50 {
            let (out, trace) = loc_crop(&img, &CropScale::default(), &mut rng(i)).unwrap();
            assert_eq!(trace.side, 10);
            assert!(trace.top <= 22 && trace.left <= 22);
            assert_eq!(out.shape(), img.shape());
        }
    }

    #[test]
    fn interval_draws_stay_in_bounds() {
        let scale = CropScale::new(0.1, 0.3).unwrap();
        let lo = (0.1f64 * 1024.0).sqrt().round() as usize;
        let hi = (0.4f64 * 1024.0).sqrt().round() as usize;
        for i in 0..100 {
            let t = LocTrace::draw(32, 32, &scale, &mut rng(i)).unwrap();
            assert!((lo..=hi).contains(&t.side));
        }
    }

    #[test]
    fn same_key_replays() {
        let img = Tensor::from_fn(&[1, 12, 12], |i| i as f64);
        let scale = CropScale::new(0.2, 0.2).unwrap();
        assert_eq!(
            loc_crop(&img, &scale, &mut rng(3)).unwrap().0,
            loc_crop(&img, &scale, &mut rng(3)).unwrap().0
        );
    }

    #[test]
    fn invalid_scales() {
        assert!(CropScale::new(0.0, 0.0).is_err());
        assert!(CropScale::new(0.8, 0.3).is_err());
        assert!(CropScale::new(0.5, -0.1).is_err());
    }
}
