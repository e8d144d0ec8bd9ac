//! Gaussian target rendering, the masked heatmap MSE, and argmax decoding.
//!
//! Coordinates are `(x, y)` in image pixels externally and `(row, col)` inside
//! heatmaps. A heatmap cell `idx` at output stride `s` covers image
//! coordinate `(idx + 0.5) * s - 0.5` (pixel-center convention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const PART_NAMES: [&str; 4] = ["snout", "left_ear", "right_ear", "tail_base"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Keypoint { x, y, visible }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub parts: Vec<Keypoint>,
    pub image_w: usize,
    pub image_h: usize,
}

impl KeypointSet {
    pub fn new(parts: Vec<Keypoint>, image_w: usize, image_h: usize) -> Self {
        KeypointSet {
            parts,
            image_w,
            image_h,
        }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Index of the first visible keypoint lying outside the image.
    pub fn first_out_of_bounds(&self) -> Option<usize> {
        self.parts.iter().position(|p| {
            p.visible
                && !(p.x >= 0.0
                    && p.x < self.image_w as f64
                    && p.y >= 0.0
                    && p.y < self.image_h as f64)
        })
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.parts.iter().map(|p| p.visible).collect()
    }
}

/// `maps` has one channel per keypoint; `mask` holds one flag per
/// (sample, channel) marking supervised channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub maps: Tensor,
    pub stride: usize,
    pub sigma: f64,
    pub mask: Vec<bool>,
}

impl Heatmap {
    /// Prediction wrapper: every channel counts.
    pub fn prediction(maps: Tensor, stride: usize) -> Self {
        let s = maps.shape();
        Heatmap {
            maps,
            stride,
            sigma: 0.0,
            mask: vec![true; s.n * s.c],
        }
    }

    pub fn keypoints(&self) -> usize {
        self.maps.shape().c
    }

    pub fn stack(parts: &[Heatmap]) -> Result<Heatmap> {
        let first = parts.first().ok_or(Error::EmptyInput {
            op: "Heatmap::stack",
        })?;
        let maps: Vec<Tensor> = parts.iter().map(|h| h.maps.clone()).collect();
        Ok(Heatmap {
            maps: Tensor::stack(&maps)?,
            stride: first.stride,
            sigma: first.sigma,
            mask: parts.iter().flat_map(|h| h.mask.iter().copied()).collect(),
        })
    }

    /// Channel `k` as a one-channel heatmap (with its mask column).
    pub fn channel(&self, k: usize) -> Result<Heatmap> {
        let s = self.maps.shape();
        Ok(Heatmap {
            maps: self.maps.slice_channels(k, 1)?,
            stride: self.stride,
            sigma: self.sigma,
            mask: (0..s.n).map(|n| self.mask[n * s.c + k]).collect(),
        })
    }
}

/// A visible keypoint outside the image, clamped onto the heatmap border.
/// In-bounds keypoints that round one cell past the border are clamped
/// silently.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderWarning {
    pub part: usize,
    pub x: f64,
    pub y: f64,
}

pub fn to_heatmap_coord(image_coord: f64, stride: usize) -> f64 {
    (image_coord + 0.5) / stride as f64 - 0.5
}

pub fn to_image_coord(heatmap_idx: f64, stride: usize) -> f64 {
    (heatmap_idx + 0.5) * stride as f64 - 0.5
}

/// Renders one unnormalized Gaussian per keypoint (peak 1 at the rounded,
/// stride-mapped keypoint). Invisible keypoints give zero, masked channels.
pub fn render_gaussian(
    kps: &KeypointSet,
    out_w: usize,
    out_h: usize,
    sigma: f64,
) -> Result<(Heatmap, Vec<RenderWarning>)> {
    if !(sigma > 0.0) || out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "render_gaussian needs sigma > 0 and nonzero size, got sigma={sigma}, {out_w}x{out_h}"
        )));
    }
    let stride = (kps.image_w / out_w).max(1);
    let k = kps.len();
    let mut maps = Tensor::zeros(Shape::new(1, k, out_h, out_w));
    let mut warnings = Vec::new();
    let denom = 2.0 * sigma * sigma;
    for (c, p) in kps.parts.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let u = to_heatmap_coord(p.x, stride).round();
        let v = to_heatmap_coord(p.y, stride).round();
        let cu = u.clamp(0.0, (out_w - 1) as f64);
        let cv = v.clamp(0.0, (out_h - 1) as f64);
        let inside =
            p.x >= 0.0 && p.x < kps.image_w as f64 && p.y >= 0.0 && p.y < kps.image_h as f64;
        if (cu != u || cv != v) && !inside {
            warnings.push(RenderWarning {
                part: c,
                x: p.x,
                y: p.y,
            });
        }
        let plane = maps.plane_mut(0, c);
        for row in 0..out_h {
            let dy = row as f64 - cv;
            for col in 0..out_w {
                let dx = col as f64 - cu;
                plane[row * out_w + col] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Ok((
        Heatmap {
            maps,
            stride,
            sigma,
            mask: kps.visibility(),
        },
        warnings,
    ))
}

/// Masked sum of squared differences, averaged over the batch, and its
/// gradient with respect to `pred`.
pub fn mse_loss(pred: &Heatmap, target: &Heatmap, mask: &[bool]) -> Result<(f64, Tensor)> {
    let s = pred.maps.shape();
    if s != target.maps.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: s,
            rhs: target.maps.shape(),
        });
    }
    if mask.len() != s.n * s.c {
        return Err(Error::InvalidArgument(format!(
            "mask has {} flags, expected {}",
            mask.len(),
            s.n * s.c
        )));
    }
    let p = s.plane();
    let inv_n = 1.0 / s.n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(s);
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let range = i * p..(i + 1) * p;
        for j in range {
            let d = pred.maps.data()[j] - target.maps.data()[j];
            loss += d * d;
            grad.data_mut()[j] = 2.0 * d * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Row-major argmax of one plane.
pub fn argmax_plane(plane: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    best
}

/// Per sample and channel, the first maximal cell mapped back to image
/// coordinates. All decoded keypoints are marked visible.
pub fn decode_argmax(pred: &Heatmap) -> Vec<KeypointSet> {
    let s = pred.maps.shape();
    (0..s.n)
        .map(|n| {
            let parts = (0..s.c)
                .map(|c| {
                    let idx = argmax_plane(pred.maps.plane(n, c));
                    let (row, col) = (idx / s.w, idx % s.w);
                    Keypoint::new(
                        to_image_coord(col as f64, pred.stride),
                        to_image_coord(row as f64, pred.stride),
                        true,
                    )
                })
                .collect();
            KeypointSet::new(parts, s.w * pred.stride, s.h * pred.stride)
        })
        .collect()
}
