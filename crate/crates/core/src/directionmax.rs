//! Directional cumulative max pooling.
//!
//! Each direction is a running max along one axis. `Top` and `Left` scan
//! against the axis (bottom to top, right to left), so every output cell holds
//! the max of itself and everything below / to the right of it. `Bottom` and
//! `Right` scan with the axis and hold the max of everything above / to the
//! left. The cost is one pass per row or column.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Top,
    Left,
    Bottom,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Top,
        Direction::Left,
        Direction::Bottom,
        Direction::Right,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Top => "top",
            Direction::Left => "left",
            Direction::Bottom => "bottom",
            Direction::Right => "right",
        }
    }

    fn vertical(self) -> bool {
        matches!(self, Direction::Top | Direction::Bottom)
    }

    fn reversed(self) -> bool {
        matches!(self, Direction::Top | Direction::Left)
    }
}

/// Forward pass plus, for every output cell, the in-plane index of the input
/// cell that supplied its maximum.
pub(crate) fn forward_with_sources(x: &Tensor, dir: Direction) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let mut out = x.clone();
    out.zero_grad();
    let mut src = vec![0u32; x.numel()];
    let (lines, len) = if dir.vertical() { (w, h) } else { (h, w) };
    let offset = |line: usize, pos: usize| {
        if dir.vertical() {
            pos * w + line
        } else {
            line * w + pos
        }
    };
    for plane in 0..s.n * s.c {
        let base = plane * h * w;
        let input = &x.data()[base..base + h * w];
        let output = &mut out.data_mut()[base..base + h * w];
        let sources = &mut src[base..base + h * w];
        for line in 0..lines {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0usize;
            for step in 0..len {
                let pos = if dir.reversed() { len - 1 - step } else { step };
                let i = offset(line, pos);
                // `>=` moves the source to the newest cell on ties, i.e. the one
                // nearest the output cell along the scan.
                if input[i] >= best {
                    best = input[i];
                    best_at = i;
                }
                output[i] = best;
                sources[i] = best_at as u32;
            }
        }
    }
    (out, src)
}

pub fn directionmax(x: &Tensor, dir: Direction) -> Tensor {
    forward_with_sources(x, dir).0
}

/// Routes every upstream entry to the input cell that supplied the
/// corresponding output's maximum, accumulating when sources are shared.
pub fn directionmax_backward(x: &Tensor, dir: Direction, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "directionmax_backward",
            lhs: x.shape(),
            rhs: upstream.shape(),
        });
    }
    let (_, src) = forward_with_sources(x, dir);
    let mut grad = Tensor::zeros(x.shape());
    route(&src, x.shape().plane(), upstream.data(), grad.data_mut());
    Ok(grad)
}

pub(crate) fn route(src: &[u32], plane: usize, upstream: &[f64], grad: &mut [f64]) {
    for (p, (g_plane, s_plane)) in upstream
        .chunks_exact(plane)
        .zip(src.chunks_exact(plane))
        .enumerate()
    {
        let base = p * plane;
        for (g, &s) in g_plane.iter().zip(s_plane) {
            grad[base + s as usize] += g;
        }
    }
}
