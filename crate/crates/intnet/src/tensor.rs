//! Dense n-dimensional tensors and their binary interchange format.
//!
//! Tensors are stored row-major (last dimension fastest). Activations and
//! images use `[N, C, H, W]` layout; convolution kernels use
//! `[O, I, KH, KW]`. The blob format is shared by standalone data files and
//! the tensor sections of model files: a one-byte kind tag, a one-byte rank,
//! little-endian `u32` dimensions, then the elements in little-endian order.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Highest rank the blob format accepts.
pub const MAX_BLOB_RANK: usize = 8;

/// Scalar kinds a tensor can hold, with their blob format tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    F32,
    I8,
    I32,
    U8,
}

impl TensorKind {
    pub fn tag(self) -> u8 {
        match self {
            TensorKind::F32 => 0,
            TensorKind::I8 => 1,
            TensorKind::I32 => 2,
            TensorKind::U8 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TensorKind::F32),
            1 => Some(TensorKind::I8),
            2 => Some(TensorKind::I32),
            3 => Some(TensorKind::U8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::F32 => "f32",
            TensorKind::I8 => "i8",
            TensorKind::I32 => "i32",
            TensorKind::U8 => "u8",
        }
    }
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar types that can live in a [`Tensor`] and the blob format.
pub trait Element: Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    const KIND: TensorKind;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const KIND: TensorKind = TensorKind::F32;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for i8 {
    const KIND: TensorKind = TensorKind::I8;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

impl Element for i32 {
    const KIND: TensorKind = TensorKind::I32;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for u8 {
    const KIND: TensorKind = TensorKind::U8;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Wraps `data` with the given shape; the element count must match.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let count = element_count(&shape)?;
        if count != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("{count} elements for shape {shape:?}"),
                data.len().to_string(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor of the given shape with every element set to `value`.
    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let count = element_count(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; count],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn kind(&self) -> TensorKind {
        T::KIND
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of `[n, c, h, w]` in a rank-4 tensor.
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        debug_assert!(n < self.shape[0] && c < self.shape[1]);
        debug_assert!(h < self.shape[2] && w < self.shape[3]);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let off = self.offset4(n, c, h, w);
        self.data[off] = value;
    }

    /// Applies `f` elementwise into a new tensor of a possibly different kind.
    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    let mut count: usize = 1;
    for &d in shape {
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::shape("tensor shape", "element count within usize", format!("{shape:?}")))?;
    }
    Ok(count)
}

/// Clamps `x` into `[lo, hi]`.
pub fn saturate(x: i64, lo: i64, hi: i64) -> i64 {
    debug_assert!(lo <= hi);
    x.clamp(lo, hi)
}

/// Concatenation of `[N, C, H, W]` tensors along the channel dimension.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() < 2 {
        return Err(Error::invalid("concat needs at least two inputs"));
    }
    for t in inputs {
        if t.rank() != 4 {
            return Err(Error::shape("concat input", "rank 4", format!("rank {}", t.rank())));
        }
    }
    let (n, h, w) = (inputs[0].shape()[0], inputs[0].shape()[2], inputs[0].shape()[3]);
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "concat",
                format!("[{n}, _, {h}, {w}]"),
                format!("{s:?}"),
            ));
        }
        channels += s[1];
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * channels * plane);
    for bi in 0..n {
        for t in inputs {
            let tc = t.shape()[1];
            let start = bi * tc * plane;
            out.extend_from_slice(&t.data()[start..start + tc * plane]);
        }
    }
    Tensor::new(vec![n, channels, h, w], out)
}

/// Appends the blob encoding of `t` to `out`.
pub fn write_blob<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(T::KIND.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Reads one blob of the expected kind starting at `*cursor`, advancing it.
pub fn read_blob<T: Element>(bytes: &[u8], cursor: &mut usize) -> Result<Tensor<T>> {
    match read_blob_any(bytes, cursor)? {
        any if any.kind() == T::KIND => Ok(any.downcast::<T>().expect("kind checked")),
        any => Err(Error::blob(format!(
            "expected a {} tensor, found {}",
            T::KIND,
            any.kind()
        ))),
    }
}

/// Tensor of any supported scalar kind, for format-level code.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn kind(&self) -> TensorKind {
        match self {
            AnyTensor::F32(_) => TensorKind::F32,
            AnyTensor::I8(_) => TensorKind::I8,
            AnyTensor::I32(_) => TensorKind::I32,
            AnyTensor::U8(_) => TensorKind::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::I8(t) => t.shape(),
            AnyTensor::I32(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape().len()
    }

    pub fn len(&self) -> usize {
        match self {
            AnyTensor::F32(t) => t.len(),
            AnyTensor::I8(t) => t.len(),
            AnyTensor::I32(t) => t.len(),
            AnyTensor::U8(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_blob(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => write_blob(t, out),
            AnyTensor::I8(t) => write_blob(t, out),
            AnyTensor::I32(t) => write_blob(t, out),
            AnyTensor::U8(t) => write_blob(t, out),
        }
    }

    fn downcast<T: Element>(self) -> Option<Tensor<T>> {
        fn cast<A: Element, B: Element>(t: Tensor<A>) -> Option<Tensor<B>> {
            if A::KIND == B::KIND {
                // Same kind implies the same concrete type for the four
                // implementations in this crate.
                let any: Box<dyn std::any::Any> = Box::new(t);
                any.downcast::<Tensor<B>>().ok().map(|b| *b)
            } else {
                None
            }
        }
        match self {
            AnyTensor::F32(t) => cast(t),
            AnyTensor::I8(t) => cast(t),
            AnyTensor::I32(t) => cast(t),
            AnyTensor::U8(t) => cast(t),
        }
    }
}

/// Reads one blob of any kind starting at `*cursor`, advancing it.
pub fn read_blob_any(bytes: &[u8], cursor: &mut usize) -> Result<AnyTensor> {
    let mut pos = *cursor;
    let header = bytes
        .get(pos..pos + 2)
        .ok_or_else(|| Error::blob(format!("truncated header at byte {pos}")))?;
    let kind = TensorKind::from_tag(header[0])
        .ok_or_else(|| Error::blob(format!("unknown kind tag {} at byte {pos}", header[0])))?;
    let rank = header[1] as usize;
    if rank > MAX_BLOB_RANK {
        return Err(Error::blob(format!("rank {rank} exceeds maximum {MAX_BLOB_RANK}")));
    }
    pos += 2;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::blob(format!("truncated dimension at byte {pos}")))?;
        shape.push(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize);
        pos += 4;
    }
    let count = element_count(&shape).map_err(|_| Error::blob("dimension product overflows"))?;

    fn payload<T: Element>(bytes: &[u8], pos: &mut usize, shape: Vec<usize>, count: usize) -> Result<Tensor<T>> {
        let total = count
            .checked_mul(T::SIZE)
            .ok_or_else(|| Error::blob("payload size overflows"))?;
        let raw = bytes
            .get(*pos..*pos + total)
            .ok_or_else(|| Error::blob(format!("truncated payload at byte {}", *pos)))?;
        let data = raw.chunks_exact(T::SIZE).map(T::read_le).collect();
        *pos += total;
        Tensor::new(shape, data)
    }

    let out = match kind {
        TensorKind::F32 => AnyTensor::F32(payload(bytes, &mut pos, shape, count)?),
        TensorKind::I8 => AnyTensor::I8(payload(bytes, &mut pos, shape, count)?),
        TensorKind::I32 => AnyTensor::I32(payload(bytes, &mut pos, shape, count)?),
        TensorKind::U8 => AnyTensor::U8(payload(bytes, &mut pos, shape, count)?),
    };
    *cursor = pos;
    Ok(out)
}

/// Writes a single tensor to `path` as one blob.
pub fn write_blob_file(path: &Path, t: &AnyTensor) -> Result<()> {
    let mut bytes = Vec::new();
    t.write_blob(&mut bytes);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a file containing exactly one blob.
pub fn read_blob_file(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path)?;
    let mut cursor = 0;
    let t = read_blob_any(&bytes, &mut cursor)?;
    if cursor != bytes.len() {
        return Err(Error::blob(format!(
            "{} trailing bytes after tensor in {}",
            bytes.len() - cursor,
            path.display()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0i8; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0i8; 5]).is_err());
        let t = Tensor::filled(vec![1, 2, 2, 2], 1.5f32).unwrap();
        assert_eq!(t.len(), 8);
    }

    #[test]
    fn offset4_is_row_major() {
        let mut t = Tensor::filled(vec![2, 3, 4, 5], 0i32).unwrap();
        t.set4(1, 2, 3, 4, 7);
        assert_eq!(t.offset4(0, 0, 0, 1), 1);
        assert_eq!(t.offset4(0, 0, 1, 0), 5);
        assert_eq!(t.offset4(0, 1, 0, 0), 20);
        assert_eq!(t.offset4(1, 0, 0, 0), 60);
        assert_eq!(t.at4(1, 2, 3, 4), 7);
        assert_eq!(t.data()[119], 7);
    }

    #[test]
    fn saturate_clamps_inclusive() {
        assert_eq!(saturate(200, -128, 127), 127);
        assert_eq!(saturate(-200, -128, 127), -128);
        assert_eq!(saturate(5, -128, 127), 5);
        assert_eq!(saturate(127, -128, 127), 127);
    }

    #[test]
    fn blobs_round_trip_every_kind() {
        let mut bytes = Vec::new();
        write_blob(&Tensor::new(vec![2, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap(), &mut bytes);
        write_blob(&Tensor::new(vec![3], vec![-128i8, 0, 127]).unwrap(), &mut bytes);
        write_blob(&Tensor::new(vec![2], vec![i32::MIN, i32::MAX]).unwrap(), &mut bytes);
        write_blob(&Tensor::new(vec![1, 1, 2, 2], vec![0u8, 128, 255, 7]).unwrap(), &mut bytes);

        let mut cursor = 0;
        let a: Tensor<f32> = read_blob(&bytes, &mut cursor).unwrap();
        assert_eq!(a.data(), &[1.0, -2.5, 3.25, 0.0]);
        let b: Tensor<i8> = read_blob(&bytes, &mut cursor).unwrap();
        assert_eq!(b.data(), &[-128, 0, 127]);
        let c: Tensor<i32> = read_blob(&bytes, &mut cursor).unwrap();
        assert_eq!(c.data(), &[i32::MIN, i32::MAX]);
        let d: Tensor<u8> = read_blob(&bytes, &mut cursor).unwrap();
        assert_eq!(d.shape(), &[1, 1, 2, 2]);
        assert_eq!(cursor, bytes.len());
    }

    #[test]
    fn blob_header_layout_is_fixed() {
        let mut bytes = Vec::new();
        write_blob(&Tensor::new(vec![1, 2], vec![5i8, -1]).unwrap(), &mut bytes);
        assert_eq!(
            bytes,
            vec![1, 2, 1, 0, 0, 0, 2, 0, 0, 0, 5u8, 0xff]
        );
    }

    #[test]
    fn malformed_blobs_are_rejected() {
        let mut good = Vec::new();
        write_blob(&Tensor::new(vec![4], vec![1.0f32; 4]).unwrap(), &mut good);

        let mut cursor = 0;
        assert!(read_blob_any(&good[..good.len() - 1], &mut cursor).is_err());
        cursor = 0;
        assert!(read_blob_any(&good[..3], &mut cursor).is_err());
        cursor = 0;
        let mut bad_tag = good.clone();
        bad_tag[0] = 9;
        assert!(read_blob_any(&bad_tag, &mut cursor).is_err());
        cursor = 0;
        let mut bad_rank = good.clone();
        bad_rank[1] = 200;
        assert!(read_blob_any(&bad_rank, &mut cursor).is_err());
        cursor = 0;
        assert!(read_blob::<i8>(&good, &mut cursor).is_err());
    }

    #[test]
    fn kind_mismatch_reports_both_kinds() {
        let mut bytes = Vec::new();
        write_blob(&Tensor::new(vec![1], vec![1.0f32]).unwrap(), &mut bytes);
        let mut cursor = 0;
        let err = read_blob::<i32>(&bytes, &mut cursor).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("i32") && text.contains("f32"), "{text}");
    }
}
