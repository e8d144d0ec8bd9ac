//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decodes P5/P6 bytes into a `(1, c, h, w)` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => {
            return Err(Error::BadMagic {
                expected: "P5 or P6".into(),
                found: String::from_utf8_lossy(other.unwrap_or(bytes)).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        skip_space_and_comments(bytes, &mut pos, i)?;
        *field = read_number(bytes, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => {
            return Err(Error::MalformedHeader(
                "expected whitespace after maxval".into(),
            ))
        }
        None => return Err(Error::Truncated("header ends before pixel data".into())),
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::MalformedHeader(format!("empty image {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = w * h * channels;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(Error::Truncated(format!(
            "{} of {need} pixel bytes",
            data.len()
        )));
    }
    let mut t = Tensor::zeros(Shape::new(1, channels, h, w));
    for (i, &b) in data[..need].iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        t.plane_mut(0, c)[pixel] = f64::from(b) / 255.0;
    }
    Ok(t)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize, field: usize) -> Result<()> {
    let start = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) if *pos > start => return Ok(()),
            Some(_) => {
                return Err(Error::MalformedHeader(format!(
                    "missing separator before header field {}",
                    field + 1
                )))
            }
            None => return Err(Error::Truncated("header ends early".into())),
        }
    }
}

fn read_number(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::MalformedHeader(format!(
            "expected a number at byte {start}"
        )));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("number out of range at byte {start}")))
}

/// Encodes sample 0 of a 1- or 3-channel tensor, clamping to `[0, 1]`.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match s.c {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode {c} channels as PNM"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.c * s.h * s.w);
    for pixel in 0..s.h * s.w {
        for c in 0..s.c {
            let v = t.plane(0, c)[pixel];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_gray_bytes() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 128, 64]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(expect) {
            assert_eq!(*a, b);
        }
        assert!((t.data()[2] - 0.50196).abs() < 1e-5 && (t.data()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn color_has_three_channels() {
        let mut bytes = b"P6 1 2 255 ".to_vec();
        bytes.extend([10, 20, 30, 40, 50, 60]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 1));
        assert_eq!(t.at(0, 1, 1, 0), 50.0 / 255.0);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            decode(b"P3\n1 1\n255\n0"),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            decode(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode(b"P5\n2 2\n255\n\0\0"),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(decode(b"P5\n2 2"), Err(Error::Truncated(_))));
        assert!(matches!(
            decode(b"P5\nx 2\n255\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(decode(b""), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn encode_rejects_two_channels() {
        assert!(encode(&Tensor::zeros(Shape::new(1, 2, 1, 1))).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(vals in prop::collection::vec(0.0f64..=1.0, 12), color in any::<bool>()) {
            let shape = if color { Shape::new(1, 3, 2, 2) } else { Shape::new(1, 1, 3, 4) };
            let t = Tensor::from_vec(shape, vals).unwrap();
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), shape);
            prop_assert!(t.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
