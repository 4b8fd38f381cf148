//! Stochastic input transforms and gradient smoothing used by the attacks.
//!
//! Every random choice comes from a [`RngStream`] keyed by
//! `(seed, image, iteration, branch)`, and every transform returns a trace
//! of its draws so it can be replayed exactly.

pub mod diverse;
pub mod kernel;
pub mod locality;
pub mod resize;
pub mod rng;

pub use diverse::{di_adjoint, di_apply, di_transform, DiParams, DiTrace};
pub use kernel::{ti_smooth, TiKernel, TiParams};
pub use locality::{loc_apply, loc_crop, CropScale, LocTrace};
pub use resize::{bilinear_resize, bilinear_resize_adjoint};
pub use rng::{Branch, RngStream, StreamKey};
