use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    NearestUp2,
    MaxPoolDown2,
}

pub fn nearest_up2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s.with_hw(s.h * 2, s.w * 2));
    let ow = s.w * 2;
    for p in 0..s.n * s.c {
        let src = &x.data()[p * s.plane()..(p + 1) * s.plane()];
        let dst = &mut out.data_mut()[p * s.plane() * 4..(p + 1) * s.plane() * 4];
        for i in 0..s.h {
            for j in 0..s.w {
                let v = src[i * s.w + j];
                let o = 2 * i * ow + 2 * j;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn nearest_up2_backward(x_shape: crate::tensor::Shape, gout: &[f64]) -> Vec<f64> {
    let s = x_shape;
    let ow = s.w * 2;
    let mut g = vec![0.0; s.numel()];
    for p in 0..s.n * s.c {
        let go = &gout[p * s.plane() * 4..(p + 1) * s.plane() * 4];
        for i in 0..s.h {
            for j in 0..s.w {
                let o = 2 * i * ow + 2 * j;
                g[p * s.plane() + i * s.w + j] = go[o] + go[o + 1] + go[o + ow] + go[o + ow + 1];
            }
        }
    }
    g
}

/// 2x2 stride-2 max pool; also returns the flat input index of each window's
/// first maximum in row-major order.
pub(crate) fn maxpool_down2_with_sources(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::InvalidShape {
            op: "maxpool_down2",
            detail: format!("spatial dims of {s} must be even"),
        });
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(s.with_hw(oh, ow));
    let mut src = vec![0u32; out.numel()];
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * s.w + 2 * j + dj;
                    if x.data()[idx] > best {
                        best = x.data()[idx];
                        at = idx;
                    }
                }
                let o = p * oh * ow + i * ow + j;
                out.data_mut()[o] = best;
                src[o] = at as u32;
            }
        }
    }
    Ok((out, src))
}

pub fn maxpool_down2(x: &Tensor) -> Result<Tensor> {
    maxpool_down2_with_sources(x).map(|(t, _)| t)
}

pub fn resize(x: &Tensor, mode: Resize) -> Result<Tensor> {
    match mode {
        Resize::NearestUp2 => Ok(nearest_up2(x)),
        Resize::MaxPoolDown2 => maxpool_down2(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn up_and_down_examples() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let up = nearest_up2(&x);
        assert_eq!(
            up.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(maxpool_down2(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool_down2(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn ties_route_to_first_in_row_major() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let (_, src) = maxpool_down2_with_sources(&x).unwrap();
        assert_eq!(src, vec![0]);
    }

    proptest! {
        #[test]
        fn down_inverts_up(seed in any::<u64>(), n in 1usize..3, c in 1usize..3, h in 1usize..6, w in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(Shape::new(n, c, h, w), -5.0, 5.0, &mut rng);
            prop_assert_eq!(maxpool_down2(&nearest_up2(&x)).unwrap(), x);
        }
    }
}
