use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Tensor};

/// Smoothing kernel for translation-invariant gradients: odd side
/// `2·radius + 1`, non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TiKernel {
    radius: usize,
    weights: Vec<f64>,
}

/// Parameters of a Gaussian [`TiKernel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiParams {
    pub radius: usize,
    pub sigma: f64,
}

impl TiKernel {
    pub fn identity() -> Self {
        Self {
            radius: 0,
            weights: vec![1.0],
        }
    }

    /// Discretized Gaussian `exp(-(i²+j²)/(2σ²))` on `[-r, r]²`, normalized.
    pub fn gaussian(radius: usize, sigma: f64) -> Result<Self> {
        ensure_arg!(sigma > 0.0 && sigma.is_finite(), "TI sigma must be positive, got {sigma}");
        let side = 2 * radius + 1;
        let r = radius as f64;
        let mut weights = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let (di, dj) = (i as f64 - r, j as f64 - r);
                weights.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { radius, weights })
    }

    pub fn from_params(params: Option<TiParams>) -> Result<Self> {
        match params {
            Some(p) => Self::gaussian(p.radius, p.sigma),
            None => Ok(Self::identity()),
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Row-major `side × side` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_identity(&self) -> bool {
        self.radius == 0
    }
}

/// Depthwise cross-correlation of every channel with `kernel`, zero padded
/// so the output keeps the input shape.
pub fn ti_smooth<T: Real>(grad: &Tensor<T>, kernel: &TiKernel) -> Result<Tensor<T>> {
    let (c, h, w) = grad.chw()?;
    ensure_arg!(
        kernel.side() <= h.min(w),
        "TI kernel side {} exceeds image {h}×{w}",
        kernel.side()
    );
    if kernel.is_identity() {
        return Ok(grad.clone());
    }
    let r = kernel.radius as isize;
    let side = kernel.side();
    let weights: Vec<T> = kernel.weights.iter().map(|&v| T::lit(v)).collect();
    let src = grad.data();
    let mut out = vec![T::zero(); src.len()];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for ki in 0..side {
                    let sy = y as isize + ki as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for kj in 0..side {
                        let sx = x as isize + kj as isize - r;
                        if sx >= 0 && sx < w as isize {
                            acc += weights[ki * side + kj] * row[sx as usize];
                        }
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Tensor::new(grad.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_radius_is_identity() {
        let k = TiKernel::gaussian(0, 1.5).unwrap();
        assert_eq!(k.weights(), &[1.0]);
        let g = Tensor::from_fn(&[2, 3, 3], |i| i as f64 - 4.0);
        assert_eq!(ti_smooth(&g, &k).unwrap(), g);
    }

    #[test]
    fn normalization_and_symmetry_grid() {
        for radius in 0..5 {
            for sigma in [0.3, 1.0, 3.0, 10.0] {
                let k = TiKernel::gaussian(radius, sigma).unwrap();
                let side = k.side();
                let total: f64 = k.weights().iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                for i in 0..side {
                    for j in 0..side {
                        let v = k.weights()[i * side + j];
                        assert!(v >= 0.0);
                        assert_eq!(v, k.weights()[(side - 1 - i) * side + j]);
                        assert_eq!(v, k.weights()[i * side + (side - 1 - j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn center_is_maximum() {
        let k = TiKernel::gaussian(2, 3.0).unwrap();
        let center = k.weights()[12];
        assert!(k.weights().iter().all(|&v| v <= center));
    }

    #[test]
    fn impulse_stamps_kernel() {
        let k = TiKernel::gaussian(1, 0.8).unwrap();
        let mut g = Tensor::<f64>::zeros(&[1, 5, 5]);
        g.data_mut()[12] = 1.0;
        let s = ti_smooth(&g, &k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let got = s.data()[(1 + i) * 5 + (1 + j)];
                assert!((got - k.weights()[i * 3 + j]).abs() < 1e-15);
            }
        }
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_interior_unchanged() {
        let k = TiKernel::gaussian(2, 3.0).unwrap();
        let g = Tensor::<f64>::filled(&[1, 9, 9], 0.7);
        let s = ti_smooth(&g, &k).unwrap();
        for y in 2..7 {
            for x in 2..7 {
                assert!((s.data()[y * 9 + x] - 0.7).abs() < 1e-12);
            }
        }
        assert!(s.data()[0] < 0.7);
    }

    #[test]
    fn kernel_larger_than_image_rejected() {
        let k = TiKernel::gaussian(3, 1.0).unwrap();
        assert!(ti_smooth(&Tensor::<f32>::zeros(&[1, 4, 4]), &k).is_err());
    }
}
