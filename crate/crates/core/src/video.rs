//! Video tensors, binary masks and the `.vid` container.
//!
//! Elements are stored row-major in `(t, h, w, c)` order, so one frame is a
//! contiguous `h * w * c` slice.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const VID_MAGIC: &[u8; 4] = b"VIDT";

/// Extent of a video: frames, width, height, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(t: usize, w: usize, h: usize, c: usize) -> Result<Self> {
        if t == 0 || w == 0 || h == 0 || c == 0 {
            return Err(invalid(format!("dims must be positive, got {t}x{w}x{h}x{c}")));
        }
        Ok(Self { t, w, h, c })
    }

    pub fn len(&self) -> usize {
        self.t * self.w * self.h * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.w * self.h * self.c
    }

    /// Pixels per frame (`W * H`).
    pub fn frame_pixels(&self) -> usize {
        self.w * self.h
    }

    /// Pixels in the whole video (`T * W * H`).
    pub fn pixels(&self) -> usize {
        self.t * self.w * self.h
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.h + h) * self.w + w) * self.c + c
    }

    pub(crate) fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch {
                expected: self.to_string(),
                actual: other.to_string(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.t, self.w, self.h, self.c)
    }
}

/// Class index returned by a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label(pub usize);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A `T x W x H x C` array of reals. Clean videos live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    dims: Dims,
    data: Vec<f64>,
}

impl VideoTensor {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self { dims, data: vec![value; dims.len()] }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(invalid(format!(
                "tensor of dims {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tensor contains non-finite values"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.dims.index(t, h, w, c)]
    }

    pub fn set(&mut self, t: usize, h: usize, w: usize, c: usize, value: f64) {
        let i = self.dims.index(t, h, w, c);
        self.data[i] = value;
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.dims.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Elementwise product with a mask.
    pub fn hadamard(&self, mask: &Mask) -> Result<VideoTensor> {
        self.dims.ensure_same(&mask.dims)?;
        let data = self
            .data
            .iter()
            .zip(&mask.bits)
            .map(|(&v, &m)| v * f64::from(m))
            .collect();
        Ok(Self { dims: self.dims, data })
    }

    /// Euclidean norm over every element.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn clamp01(&self) -> VideoTensor {
        Self { dims: self.dims, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// `self - other`.
    pub fn sub(&self, other: &VideoTensor) -> Result<VideoTensor> {
        self.dims.ensure_same(&other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { dims: self.dims, data })
    }

    /// `self + other`.
    pub fn add(&self, other: &VideoTensor) -> Result<VideoTensor> {
        self.add_scaled(other, 1.0)
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &VideoTensor, scale: f64) -> Result<VideoTensor> {
        self.dims.ensure_same(&other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        Ok(Self { dims: self.dims, data })
    }

    pub fn scaled(&self, scale: f64) -> VideoTensor {
        Self { dims: self.dims, data: self.data.iter().map(|v| v * scale).collect() }
    }

    pub fn dot(&self, other: &VideoTensor) -> Result<f64> {
        self.dims.ensure_same(&other.dims)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Rounds every element to single precision, the resolution of `.vid` files.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_vid_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut out = Vec::with_capacity(16 + 4 * d.len());
        out.extend_from_slice(VID_MAGIC);
        for v in [d.t, d.w, d.h, d.c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_vid_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != VID_MAGIC {
            return Err(Error::Format("missing VIDT header".into()));
        }
        let field = |i: usize| {
            let b = &bytes[4 + 4 * i..8 + 4 * i];
            u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
        };
        let dims = Dims::new(field(0), field(1), field(2), field(3))?;
        let body = &bytes[20..];
        if body.len() != 4 * dims.len() {
            return Err(Error::Format(format!(
                "expected {} payload bytes for {dims}, found {}",
                4 * dims.len(),
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_vec(dims, data)
    }

    pub fn write_vid(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_vid_bytes())?;
        Ok(())
    }

    pub fn read_vid(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_vid_bytes(&fs::read(path)?)
    }
}

/// Binary mask with the same layout as a [`VideoTensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<u8>,
}

impl Mask {
    pub fn ones(dims: Dims) -> Self {
        Self { dims, bits: vec![1; dims.len()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, bits: vec![0; dims.len()] }
    }

    pub fn from_bits(dims: Dims, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(invalid(format!("mask of dims {dims} needs {} bits", dims.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(invalid("mask elements must be 0 or 1"));
        }
        Ok(Self { dims, bits })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> bool {
        self.bits[self.dims.index(t, h, w, c)] == 1
    }

    pub fn set(&mut self, t: usize, h: usize, w: usize, c: usize, on: bool) {
        let i = self.dims.index(t, h, w, c);
        self.bits[i] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn frame_bits(&self, t: usize) -> &[u8] {
        let n = self.dims.frame_len();
        &self.bits[t * n..(t + 1) * n]
    }

    pub fn frame_ones(&self, t: usize) -> usize {
        self.frame_bits(t).iter().map(|&b| b as usize).sum()
    }

    pub fn is_frame_zero(&self, t: usize) -> bool {
        self.frame_bits(t).iter().all(|&b| b == 0)
    }

    /// Copy of this mask with frame `f` cleared.
    pub fn frame_zero(&self, f: usize) -> Result<Mask> {
        if f >= self.dims.t {
            return Err(invalid(format!("frame {f} out of range for {} frames", self.dims.t)));
        }
        let mut out = self.clone();
        let n = self.dims.frame_len();
        out.bits[f * n..(f + 1) * n].fill(0);
        Ok(out)
    }

    /// Elementwise OR.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.dims.ensure_same(&other.dims)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect();
        Ok(Self { dims: self.dims, bits })
    }

    /// Elementwise AND.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.dims.ensure_same(&other.dims)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        Ok(Self { dims: self.dims, bits })
    }

    /// `true` when every one-bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// 0/1 tensor, used to dump masks as `.vid` files.
    pub fn to_tensor(&self) -> VideoTensor {
        VideoTensor {
            dims: self.dims,
            data: self.bits.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}
