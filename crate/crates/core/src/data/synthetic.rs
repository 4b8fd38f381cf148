//! Procedural ten-class shape dataset written in the CIFAR-10 binary layout.
//!
//! Each image shows one foreground glyph whose *shape* is the class
//! (disk, square, triangle, ring, plus, horizontal stripes, vertical
//! stripes, cross, checkerboard, diamond) over a random two-colour gradient
//! background, with a random mid-contrast glyph colour, position, size, an
//! optional distractor blob and pixel noise. The glyph also carries a faint
//! sinusoidal texture whose orientation depends on the class, so, as on
//! natural images, there is a low-amplitude cue next to the shape itself.
//! Colour carries no class information.
//!
//! Everything is a function of `(seed, image index)`: the same call always
//! produces the same bytes.

use super::{parse_cifar10, Dataset, CIFAR_RECORD_LEN};
use crate::error::Result;
use crate::transforms::{Branch, RngStream, StreamKey};

pub const CLASS_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "plus", "h-stripes", "v-stripes", "cross", "checker", "diamond",
];

const SIDE: usize = 32;
const TEXTURE_PERIOD: f64 = 16.0;

fn inside(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    let in_box = ax < s * 0.85 && ay < s * 0.85;
    let cell = s * 0.42;
    match class {
        0 => d < s,
        1 => ax < s * 0.8 && ay < s * 0.8,
        2 => dy > -s && dy < s * 0.8 && ax < (dy + s) * 0.55,
        3 => d < s && d > s * 0.55,
        4 => (ax < s * 0.3 && ay < s) || (ay < s * 0.3 && ax < s),
        5 => in_box && ((dy + s) / cell).floor() as i64 % 2 == 0,
        6 => in_box && ((dx + s) / cell).floor() as i64 % 2 == 0,
        7 => (ax - ay).abs() < s * 0.28 && ax.max(ay) < s,
        8 => in_box && (((dx + s) / cell).floor() as i64 + ((dy + s) / cell).floor() as i64) % 2 == 0,
        _ => ax + ay < s * 1.1,
    }
}

fn color(rng: &mut RngStream) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

/// Gaussian draw via Box-Muller.
fn normal(rng: &mut RngStream) -> f64 {
    let u1 = rng.uniform().max(1e-12);
    let u2 = rng.uniform();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One CIFAR-10 record (label byte + planar RGB) for image `index`.
pub fn render_record(seed: u64, index: usize, label: usize) -> Vec<u8> {
    let mut rng = RngStream::new(StreamKey::new(seed, index as u64, 0, Branch::Synthetic));
    let bg0 = color(&mut rng);
    let bg1 = color(&mut rng);
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (gx, gy) = (angle.cos(), angle.sin());
    // Glyph colour is an offset from the background mean, large enough to
    // see but well below full contrast.
    let fg: [f64; 3] = std::array::from_fn(|c| {
        let m = 0.5 * (bg0[c] + bg1[c]);
        let step = rng.uniform_range(0.2, 0.4);
        if rng.bernoulli(0.5) == (m < 0.5) { m + step } else { m - step }
    });
    let cx = rng.uniform_range(11.0, 21.0);
    let cy = rng.uniform_range(11.0, 21.0);
    let size = rng.uniform_range(7.0, 11.0);
    let distractor = rng.bernoulli(0.5).then(|| {
        (
            rng.uniform_range(2.0, 30.0),
            rng.uniform_range(2.0, 30.0),
            rng.uniform_range(1.5, 3.5),
            color(&mut rng),
        )
    });
    let noise = rng.uniform_range(0.02, 0.08);
    let theta = label as f64 * std::f64::consts::PI / 10.0 + rng.uniform_range(-0.05, 0.05);
    let (tx, ty) = (theta.cos(), theta.sin());
    let phase = rng.uniform() * std::f64::consts::TAU;
    let texture = rng.uniform_range(0.05, 0.1);

    let mut record = vec![0u8; CIFAR_RECORD_LEN];
    record[0] = label as u8;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((fx - 16.0) * gx + (fy - 16.0) * gy) / 32.0 + 0.5;
            let mut px: [f64; 3] = std::array::from_fn(|c| bg0[c] * (1.0 - t) + bg1[c] * t);
            if inside(label, fx - cx, fy - cy, size) {
                let wave = texture * (std::f64::consts::TAU * (fx * tx + fy * ty) / TEXTURE_PERIOD + phase).sin();
                px = std::array::from_fn(|c| fg[c] + wave);
            }
            if let Some((dx, dy, r, col)) = distractor {
                if (fx - dx).powi(2) + (fy - dy).powi(2) < r * r {
                    px = col;
                }
            }
            for (c, v) in px.iter().enumerate() {
                let value = (v + noise * normal(&mut rng)).clamp(0.0, 1.0);
                record[1 + c * SIDE * SIDE + y * SIDE + x] = (value * 255.0).round() as u8;
            }
        }
    }
    record
}

/// `n` records with labels cycling through the ten classes.
pub fn cifar_like_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * CIFAR_RECORD_LEN);
    for i in 0..n {
        out.extend(render_record(seed, i, i % 10));
    }
    out
}

pub fn generate(n: usize, seed: u64) -> Result<Dataset> {
    let ds = parse_cifar10(&cifar_like_bytes(n, seed))?;
    let records = ds.records().to_vec();
    Dataset::new(records, 10, format!("synthetic-shapes(seed={seed})"))
}
