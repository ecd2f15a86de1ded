//! Dense rank-1..4 float tensor, the universal value type for images,
//! feature maps, parameters and gradients, plus the `TNSR` interchange
//! encoding used by the weights and cache file formats.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor rank {0} unsupported (must be 1..=4)")]
    BadRank(usize),
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    ShapeDataMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    DimMismatch { op: &'static str, axis: &'static str, expected: usize, actual: usize },
    #[error("{op}: non-integral output size: input {input}x{input2}, kernel {k}, stride {stride}, pad {pad}")]
    NonIntegralOutput { op: &'static str, input: usize, input2: usize, k: usize, stride: usize, pad: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("tensor decode: {0}")]
    Decode(String),
    #[error("tensor io: {0}")]
    Io(#[from] io::Error),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense row-major float tensor of rank 1 to 4.
///
/// Images and feature maps are `C x H x W`, batches `N x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(TensorError::BadRank(shape.len()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, expected, actual: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("valid zero tensor shape")
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("valid filled tensor shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the same flat data under a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Interpret as NCHW, promoting CHW to batch size 1.
    pub fn as_nchw(&self) -> TensorResult<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            [c, h, w] => Ok((1, *c, *h, *w)),
            other => Err(TensorError::InvalidArg {
                op: "as_nchw",
                msg: format!("expected rank 3 or 4, got shape {other:?}"),
            }),
        }
    }

    /// Stack CHW images into one NCHW batch. All images must share a shape.
    pub fn stack(images: &[&Tensor]) -> TensorResult<Tensor> {
        let first = images.first().ok_or_else(|| TensorError::InvalidArg {
            op: "stack",
            msg: "empty image list".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * images.len());
        for img in images {
            if img.shape() != first.shape() {
                return Err(TensorError::InvalidArg {
                    op: "stack",
                    msg: format!("mixed shapes {:?} vs {:?}", first.shape(), img.shape()),
                });
            }
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both shape and every float bit pattern match.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Maximum relative difference, with denominator `max(|a|, |b|, 1e-8)`.
    pub fn max_rel_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
            .fold(0.0, f32::max)
    }

    // -- TNSR interchange encoding ------------------------------------------

    /// Append the `TNSR` encoding of this tensor: magic, version, rank,
    /// u32 LE dims, f32 LE payload.
    pub fn encode_tnsr(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"TNSR");
        out.push(1u8);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn tnsr_byte_len(&self) -> usize {
        4 + 1 + 1 + 4 * self.rank() + 4 * self.numel()
    }

    /// Decode a `TNSR` blob from a reader positioned at its magic bytes.
    pub fn decode_tnsr(r: &mut impl Read) -> TensorResult<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TNSR" {
            return Err(TensorError::Decode(format!("bad magic {magic:?}")));
        }
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        if b[0] != 1 {
            return Err(TensorError::Decode(format!("unsupported version {}", b[0])));
        }
        r.read_exact(&mut b)?;
        let rank = b[0] as usize;
        if rank == 0 || rank > 4 {
            return Err(TensorError::Decode(format!("bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut d4 = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut d4)?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Decode(format!("zero dim in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut d4)?;
            data.push(f32::from_le_bytes(d4));
        }
        Tensor::new(shape, data)
    }

    pub fn write_tnsr(&self, w: &mut impl Write) -> TensorResult<()> {
        let mut buf = Vec::with_capacity(self.tnsr_byte_len());
        self.encode_tnsr(&mut buf);
        w.write_all(&buf)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeDataMismatch { .. })
        ));
        assert!(matches!(Tensor::new(vec![], vec![]), Err(TensorError::BadRank(0))));
        assert!(matches!(
            Tensor::new(vec![1, 2, 3, 4, 5], vec![0.0; 120]),
            Err(TensorError::BadRank(5))
        ));
        assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(TensorError::ZeroDim(_))));
    }

    #[test]
    fn tnsr_round_trip_bitwise() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f32).sqrt() - 1.5).collect())
            .unwrap();
        let mut buf = Vec::new();
        t.encode_tnsr(&mut buf);
        assert_eq!(buf.len(), t.tnsr_byte_len());
        let back = Tensor::decode_tnsr(&mut buf.as_slice()).unwrap();
        assert!(t.bitwise_eq(&back));
    }

    #[test]
    fn tnsr_rejects_corruption() {
        let t = Tensor::filled(&[3, 3], 1.25);
        let mut buf = Vec::new();
        t.encode_tnsr(&mut buf);

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Tensor::decode_tnsr(&mut bad_magic.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 1];
        assert!(Tensor::decode_tnsr(&mut &truncated[..]).is_err());
    }

    #[test]
    fn stack_batches_images() {
        let a = Tensor::filled(&[2, 2, 2], 1.0);
        let b = Tensor::filled(&[2, 2, 2], 2.0);
        let batch = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 2, 2, 2]);
        assert_eq!(batch.data()[0], 1.0);
        assert_eq!(batch.data()[8], 2.0);
        let c = Tensor::filled(&[3, 2, 2], 0.0);
        assert!(Tensor::stack(&[&a, &c]).is_err());
    }
}
