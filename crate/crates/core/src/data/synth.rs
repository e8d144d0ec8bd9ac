//! Procedural mouse-like figures with four keypoints.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heatmap::{Keypoint, KeypointSet};
use crate::tensor::{Shape, Tensor};

/// One image with its keypoints. `image` is `(1, c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub keypoints: KeypointSet,
    pub id: String,
}

/// Figure geometry in body units, snout pointing toward -y.
const BODY_CENTER: (f64, f64) = (0.0, 0.1);
const BODY_RADII: (f64, f64) = (0.12, 0.22);
const HEAD_CENTER: (f64, f64) = (0.0, -0.18);
const HEAD_RADIUS: f64 = 0.09;
const EAR_CENTERS: [(f64, f64); 2] = [(-0.08, -0.24), (0.08, -0.24)];
const EAR_RADIUS: f64 = 0.035;
const NOSE_RADIUS: f64 = 0.03;
const TAIL_LENGTH: f64 = 0.12;
const TAIL_HALF_WIDTH: f64 = 0.018;
const MARGIN: f64 = 4.0;
const HIDDEN_TAIL_RATE: f64 = 0.1;

/// Keypoints of the unrotated figure: snout, left ear, right ear, tail base.
pub fn canonical_keypoints() -> [(f64, f64); 4] {
    [
        (HEAD_CENTER.0, HEAD_CENTER.1 - HEAD_RADIUS),
        EAR_CENTERS[0],
        EAR_CENTERS[1],
        (BODY_CENTER.0, BODY_CENTER.1 + BODY_RADII.1),
    ]
}

/// Intensity contributed by the figure at canonical point `(u, v)`.
fn figure(u: f64, v: f64, body: f64, ear: f64) -> Option<f64> {
    let ellipse =
        ((u - BODY_CENTER.0) / BODY_RADII.0).powi(2) + ((v - BODY_CENTER.1) / BODY_RADII.1).powi(2);
    let in_disc = |(cx, cy): (f64, f64), r: f64| (u - cx).powi(2) + (v - cy).powi(2) <= r * r;
    let tail_top = BODY_CENTER.1 + BODY_RADII.1;
    if EAR_CENTERS.iter().any(|&c| in_disc(c, EAR_RADIUS)) {
        Some(ear)
    } else if ellipse <= 1.0
        || in_disc(HEAD_CENTER, HEAD_RADIUS)
        || in_disc(canonical_keypoints()[0], NOSE_RADIUS)
    {
        Some(body)
    } else if u.abs() <= TAIL_HALF_WIDTH && v >= tail_top - 0.02 && v <= tail_top + TAIL_LENGTH {
        Some(body * 0.8)
    } else {
        None
    }
}

/// A grayscale `w x h` sample drawn entirely from `seed`.
pub fn gen_synthetic_sample(seed: u64, w: usize, h: usize) -> Result<Sample> {
    if w < 32 || h < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need w, h >= 32, got {w}x{h}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.gen_range(0.0..2.0 * PI);
    let scale = rng.gen_range(0.55..0.85) * w.min(h) as f64;
    let (sin, cos) = theta.sin_cos();
    let place = |(u, v): (f64, f64)| (scale * (cos * u - sin * v), scale * (sin * u + cos * v));
    let offsets: Vec<(f64, f64)> = canonical_keypoints().iter().map(|&p| place(p)).collect();
    let lo_x = offsets.iter().map(|o| o.0).fold(f64::INFINITY, f64::min);
    let hi_x = offsets
        .iter()
        .map(|o| o.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let lo_y = offsets.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    let hi_y = offsets
        .iter()
        .map(|o| o.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let cx = rng.gen_range(MARGIN - lo_x..=(w as f64 - 1.0 - MARGIN) - hi_x);
    let cy = rng.gen_range(MARGIN - lo_y..=(h as f64 - 1.0 - MARGIN) - hi_y);

    let background = rng.gen_range(0.1..0.3);
    let body: f64 = rng.gen_range(0.65..0.85);
    let ear = (body + rng.gen_range(0.1..0.15)).min(1.0);
    let noise = 0.06;
    let mut image = Tensor::zeros(Shape::new(1, 1, h, w));
    let plane = image.plane_mut(0, 0);
    for row in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - cx, row as f64 - cy);
            let u = (cos * dx + sin * dy) / scale;
            let v = (-sin * dx + cos * dy) / scale;
            let base = figure(u, v, body, ear).unwrap_or(background);
            plane[row * w + col] = (base + rng.gen_range(-noise..noise)).clamp(0.0, 1.0);
        }
    }
    let tail_visible = !rng.gen_bool(HIDDEN_TAIL_RATE);
    let parts = offsets
        .iter()
        .enumerate()
        .map(|(i, &(ox, oy))| Keypoint::new(cx + ox, cy + oy, i != 3 || tail_visible))
        .collect();
    Ok(Sample {
        image,
        keypoints: KeypointSet::new(parts, w, h),
        id: format!("synth_{seed}"),
    })
}

/// `n` samples whose seeds are drawn from a generator seeded with `seed`.
pub fn synthetic_samples(n: usize, w: usize, h: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| gen_synthetic_sample(rng.gen(), w, h))
        .collect()
}
