//! Dense rank-4 `f64` tensors in NCHW layout.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SCNT";
pub const TENSOR_VERSION: u32 = 1;

/// (batch, channels, rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Value buffer plus a lazily allocated gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Single-sample, single-channel tensor from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::InvalidShape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Tensor::from_vec(Shape::new(1, 1, h, w), rows.concat())
    }

    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Like [`Tensor::accumulate_grad`] but adopts the buffer when empty.
    pub(crate) fn accumulate_grad_owned(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// One `h*w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                detail: format!("{} -> {shape}", self.shape),
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.c || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                detail: format!("[{start}, {}) of {s}", start + len),
            });
        }
        let p = s.plane();
        let mut out = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            out.extend_from_slice(&self.data[base..base + len * p]);
        }
        Tensor::from_vec(s.with_c(len), out)
    }

    /// Sample `n` as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Stacks batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "stack" })?;
        let s0 = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (s0.c, s0.h, s0.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: s0,
                    rhs: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(Shape { n, ..s0 }, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian record: magic, version, four u64 dims, raw f64 payload.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        let s = self.shape;
        for d in [s.n, s.c, s.h, s.w] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.data.len() * 8);
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "tensor magic")?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(TENSOR_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut word = [0u8; 4];
        read_exact(r, &mut word, "tensor version")?;
        let version = u32::from_le_bytes(word);
        if version != TENSOR_VERSION {
            return Err(Error::VersionMismatch {
                expected: TENSOR_VERSION,
                found: version,
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 8];
            read_exact(r, &mut b, "tensor shape")?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Truncated("tensor dimension overflows usize".into()))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Truncated("tensor element count overflows".into()))?;
        let mut payload = vec![0u8; numel * 8];
        read_exact(r, &mut payload, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::io(what, e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"SCNT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &2u64.to_le_bytes());
        assert_eq!(&bytes[40..48], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 4 + 32 + 16);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::full(Shape::new(1, 2, 3, 3), 0.5);
        let bytes = t.to_bytes();
        let err = Tensor::read_from(&mut &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = Tensor::scalar(1.0).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::read_from(&mut bytes.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn slice_channels_checks_range() {
        let t = Tensor::zeros(Shape::new(2, 3, 2, 2));
        assert!(t.slice_channels(2, 2).is_err());
        assert_eq!(
            t.slice_channels(1, 2).unwrap().shape(),
            Shape::new(2, 2, 2, 2)
        );
    }

    proptest! {
        #[test]
        fn serialization_round_trips_bit_exact(
            n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(Shape::new(n, c, h, w), -1e6, 1e6, &mut rng);
            let back = Tensor::read_from(&mut t.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
