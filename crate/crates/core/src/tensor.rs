//! Dense channel-major tensors, per-tensor dynamic fixed-point quantization,
//! and the `HCT1` binary record format.
//!
//! A record is laid out as
//!
//! ```text
//! "HCT1" | dtype u8 | frac_bits u8 | ndims u8 | dims (u32 LE) * ndims | payload (LE)
//! ```
//!
//! with dtype codes 0 = float64, 1 = fix16, 2 = fix8. Feature maps use three
//! dims (C, H, W); weights use four (K, L, Q, Q).

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Fixed;

pub const MAGIC: [u8; 4] = *b"HCT1";

/// Upper bound on the fractional bits chosen for tiny-valued tensors.
pub const MAX_FRAC_BITS: u8 = 62;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float64,
    Fix16,
    Fix8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Float64 => 0,
            DType::Fix16 => 1,
            DType::Fix8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Float64),
            1 => Ok(DType::Fix16),
            2 => Ok(DType::Fix8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Float64 => "float64",
            DType::Fix16 => "fix16",
            DType::Fix8 => "fix8",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" | "float64" => Ok(DType::Float64),
            "fix16" => Ok(DType::Fix16),
            "fix8" => Ok(DType::Fix8),
            other => Err(Error::invalid(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Element types that have an on-disk encoding.
pub trait Element: Copy + Send + Sync + fmt::Debug + Default + PartialEq + 'static {
    const DTYPE: DType;
    const SIZE: usize;

    fn put_le(self, out: &mut Vec<u8>);

    fn get_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: DType = DType::Float64;
    const SIZE: usize = 8;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

impl Element for i16 {
    const DTYPE: DType = DType::Fix16;
    const SIZE: usize = 2;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        i16::from_le_bytes(bytes.try_into().expect("2-byte chunk"))
    }
}

impl Element for i8 {
    const DTYPE: DType = DType::Fix8;
    const SIZE: usize = 1;

    fn put_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }

    fn get_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

/// A C×H×W feature map. `frac_bits` is meaningful only for fixed-point payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    frac_bits: u8,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = checked_volume(&[channels, height, width])?;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { channels, height, width, frac_bits: 0, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Tensor { channels, height, width, frac_bits: 0, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { channels, height, width, frac_bits: 0, data }
    }

    pub fn with_frac_bits(mut self, frac_bits: u8) -> Self {
        self.frac_bits = frac_bits;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            frac_bits: self.frac_bits,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// K output kernels of size L×Q×Q, stored (K, L, Q, Q) row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor<T> {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    frac_bits: u8,
    data: Vec<T>,
}

impl<T: Copy> WeightTensor<T> {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, data: Vec<T>) -> Result<Self> {
        let expected = checked_volume(&[out_channels, in_channels, kernel, kernel])?;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{out_channels}x{in_channels}x{kernel}x{kernel} weights need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(WeightTensor { out_channels, in_channels, kernel, frac_bits: 0, data })
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(out_channels * in_channels * kernel * kernel);
        for k in 0..out_channels {
            for l in 0..in_channels {
                for i in 0..kernel {
                    for j in 0..kernel {
                        data.push(f(k, l, i, j));
                    }
                }
            }
        }
        WeightTensor { out_channels, in_channels, kernel, frac_bits: 0, data }
    }

    pub fn with_frac_bits(mut self, frac_bits: u8) -> Self {
        self.frac_bits = frac_bits;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The Q×Q kernel connecting input channel `l` to output channel `k`.
    pub fn kernel_slice(&self, k: usize, l: usize) -> &[T] {
        let q2 = self.kernel * self.kernel;
        let start = (k * self.in_channels + l) * q2;
        &self.data[start..start + q2]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> WeightTensor<U> {
        WeightTensor {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel: self.kernel,
            frac_bits: self.frac_bits,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn checked_volume(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionOverflow(dims.iter().map(|&d| d as u32).collect()))
}

// ---------------------------------------------------------------------------
// Quantization

/// Largest `f` with `max_abs * 2^f <= 2^(bits-1) - 1`; `bits - 1` for an all-zero tensor.
pub fn frac_bits_for(max_abs: f64, bits: u32) -> u8 {
    if max_abs == 0.0 {
        return (bits - 1) as u8;
    }
    let limit = ((1i64 << (bits - 1)) - 1) as f64;
    let mut f = 0u8;
    // scaling by powers of two is exact, so the comparison is exact too
    while f < MAX_FRAC_BITS && max_abs * 2f64.powi(f as i32 + 1) <= limit {
        f += 1;
    }
    f
}

pub(crate) fn quantize_values<Q: Fixed>(values: &[f64]) -> Result<(Vec<Q>, u8)> {
    let mut max_abs = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
        max_abs = max_abs.max(v.abs());
    }
    let f = frac_bits_for(max_abs, Q::BITS);
    let scale = 2f64.powi(f as i32);
    // f64::round is round-half-away-from-zero
    let raw = values.iter().map(|&v| Q::saturate((v * scale).round() as i128)).collect();
    Ok((raw, f))
}

fn dequantize_values<Q: Fixed>(raw: &[Q], frac_bits: u8) -> Vec<f64> {
    let scale = 2f64.powi(-(frac_bits as i32));
    raw.iter().map(|&r| r.to_i64().unwrap_or(0) as f64 * scale).collect()
}

/// Requantize integer accumulators holding values scaled by `2^acc_frac` to
/// `Q` with a freshly chosen dynamic fraction, rounding half away from zero
/// and saturating.
pub fn requantize_acc<Q: Fixed>(acc: &[i64], acc_frac: u32) -> (Vec<Q>, u8) {
    let max_abs = acc.iter().map(|a| a.unsigned_abs()).max().unwrap_or(0) as i128;
    let limit = Q::max_raw() as i128;
    let fits = |f: u32| -> bool {
        let shift = f as i64 - acc_frac as i64;
        if shift >= 0 {
            shift < 64 && (max_abs << shift) <= limit
        } else {
            let k = (-shift) as u32;
            k >= 64 || max_abs <= limit << k
        }
    };
    let f = if max_abs == 0 {
        Q::BITS - 1
    } else {
        let mut f = 0u32;
        while f < MAX_FRAC_BITS as u32 && fits(f + 1) {
            f += 1;
        }
        f
    };
    let shift = f as i64 - acc_frac as i64;
    let raw = acc
        .iter()
        .map(|&a| {
            let a = a as i128;
            let v = if shift >= 0 {
                a << shift
            } else {
                let k = (-shift) as u32;
                if k >= 100 {
                    0
                } else {
                    let half = 1i128 << (k - 1);
                    a.signum() * ((a.abs() + half) >> k)
                }
            };
            Q::saturate(v)
        })
        .collect();
    (raw, f as u8)
}

pub fn quantize<Q: Fixed>(t: &Tensor<f64>) -> Result<Tensor<Q>> {
    let (raw, f) = quantize_values::<Q>(t.data())?;
    Ok(Tensor { channels: t.channels, height: t.height, width: t.width, frac_bits: f, data: raw })
}

pub fn dequantize<Q: Fixed>(t: &Tensor<Q>) -> Tensor<f64> {
    Tensor {
        channels: t.channels,
        height: t.height,
        width: t.width,
        frac_bits: 0,
        data: dequantize_values(&t.data, t.frac_bits),
    }
}

pub fn quantize_weights<Q: Fixed>(w: &WeightTensor<f64>) -> Result<WeightTensor<Q>> {
    let (raw, f) = quantize_values::<Q>(w.data())?;
    Ok(WeightTensor {
        out_channels: w.out_channels,
        in_channels: w.in_channels,
        kernel: w.kernel,
        frac_bits: f,
        data: raw,
    })
}

pub fn dequantize_weights<Q: Fixed>(w: &WeightTensor<Q>) -> WeightTensor<f64> {
    WeightTensor {
        out_channels: w.out_channels,
        in_channels: w.in_channels,
        kernel: w.kernel,
        frac_bits: 0,
        data: dequantize_values(&w.data, w.frac_bits),
    }
}

/// A feature map of any supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    Float64(Tensor<f64>),
    Fix16(Tensor<i16>),
    Fix8(Tensor<i8>),
}

impl AnyTensor {
    /// Quantize (or copy) a float tensor into `dtype`.
    pub fn from_float(t: &Tensor<f64>, dtype: DType) -> Result<Self> {
        Ok(match dtype {
            DType::Float64 => AnyTensor::Float64(t.clone()),
            DType::Fix16 => AnyTensor::Fix16(quantize(t)?),
            DType::Fix8 => AnyTensor::Fix8(quantize(t)?),
        })
    }

    pub fn to_float(&self) -> Tensor<f64> {
        match self {
            AnyTensor::Float64(t) => t.clone(),
            AnyTensor::Fix16(t) => dequantize(t),
            AnyTensor::Fix8(t) => dequantize(t),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::Float64(_) => DType::Float64,
            AnyTensor::Fix16(_) => DType::Fix16,
            AnyTensor::Fix8(_) => DType::Fix8,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            AnyTensor::Float64(t) => t.dims(),
            AnyTensor::Fix16(t) => t.dims(),
            AnyTensor::Fix8(t) => t.dims(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyTensor::Float64(t) => t.to_bytes(),
            AnyTensor::Fix16(t) => t.to_bytes(),
            AnyTensor::Fix8(t) => t.to_bytes(),
        }
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        if header.dims.len() != 3 {
            return Err(Error::BadRank(header.dims.len() as u8));
        }
        let (c, h, w) = (header.dims[0], header.dims[1], header.dims[2]);
        let f = header.frac_bits;
        Ok(match header.dtype {
            DType::Float64 => AnyTensor::Float64(Tensor::new(c, h, w, read_payload(r, &header)?)?.with_frac_bits(f)),
            DType::Fix16 => AnyTensor::Fix16(Tensor::new(c, h, w, read_payload(r, &header)?)?.with_frac_bits(f)),
            DType::Fix8 => AnyTensor::Fix8(Tensor::new(c, h, w, read_payload(r, &header)?)?.with_frac_bits(f)),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        ensure_consumed(cursor)?;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Binary I/O

pub(crate) struct Header {
    pub dtype: DType,
    pub frac_bits: u8,
    pub dims: Vec<usize>,
}

impl Header {
    fn payload_bytes(&self) -> Result<usize> {
        let elem = match self.dtype {
            DType::Float64 => 8,
            DType::Fix16 => 2,
            DType::Fix8 => 1,
        };
        self.dims
            .iter()
            .try_fold(elem, |acc: usize, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::DimensionOverflow(self.dims.iter().map(|&d| d as u32).collect()))
    }
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(Error::Truncated { expected: buf.len(), found: filled }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub(crate) fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let mut fixed = [0u8; 3];
    read_exact_or_truncated(r, &mut fixed)?;
    let dtype = DType::from_code(fixed[0])?;
    let ndims = fixed[2];
    if ndims != 3 && ndims != 4 {
        return Err(Error::BadRank(ndims));
    }
    let mut raw_dims = vec![0u8; 4 * ndims as usize];
    read_exact_or_truncated(r, &mut raw_dims)?;
    let dims: Vec<usize> = raw_dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    Ok(Header { dtype, frac_bits: fixed[1], dims })
}

pub(crate) fn read_payload<T: Element>(r: &mut impl Read, header: &Header) -> Result<Vec<T>> {
    if header.dtype != T::DTYPE {
        return Err(Error::DtypeMismatch { expected: T::DTYPE.name(), found: header.dtype.name() });
    }
    let expected = header.payload_bytes()?;
    // never trust the header for the allocation size
    let mut bytes = Vec::new();
    r.take(expected as u64).read_to_end(&mut bytes)?;
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    Ok(bytes.chunks_exact(T::SIZE).map(T::get_le).collect())
}

fn write_record<T: Element>(out: &mut Vec<u8>, frac_bits: u8, dims: &[usize], data: &[T]) {
    out.extend_from_slice(&MAGIC);
    out.push(T::DTYPE.code());
    out.push(if T::DTYPE == DType::Float64 { 0 } else { frac_bits });
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.put_le(out);
    }
}

fn ensure_consumed(rest: &[u8]) -> Result<()> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::TrailingData(rest.len()))
    }
}

fn check_u32_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::DimensionOverflow(dims.iter().map(|&d| d.min(u32::MAX as usize) as u32).collect()));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.data.len() * T::SIZE);
        write_record(&mut out, self.frac_bits, &[self.channels, self.height, self.width], &self.data);
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        if header.dims.len() != 3 {
            return Err(Error::BadRank(header.dims.len() as u8));
        }
        let data = read_payload(r, &header)?;
        Ok(Tensor::new(header.dims[0], header.dims[1], header.dims[2], data)?.with_frac_bits(header.frac_bits))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        ensure_consumed(cursor)?;
        Ok(t)
    }
}

impl<T: Element> WeightTensor<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(23 + self.data.len() * T::SIZE);
        let dims = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        write_record(&mut out, self.frac_bits, &dims, &self.data);
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        if header.dims.len() != 4 {
            return Err(Error::BadRank(header.dims.len() as u8));
        }
        if header.dims[2] != header.dims[3] {
            return Err(Error::shape(format!("non-square kernel {}x{}", header.dims[2], header.dims[3])));
        }
        let data = read_payload(r, &header)?;
        Ok(WeightTensor::new(header.dims[0], header.dims[1], header.dims[2], data)?.with_frac_bits(header.frac_bits))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let w = Self::read_from(&mut cursor)?;
        ensure_consumed(cursor)?;
        Ok(w)
    }
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    check_u32_dims(&[t.channels, t.height, t.width])?;
    fs::File::create(path)?.write_all(&t.to_bytes())?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_weights<T: Element>(path: impl AsRef<Path>, w: &WeightTensor<T>) -> Result<()> {
    check_u32_dims(&[w.out_channels, w.in_channels, w.kernel])?;
    fs::File::create(path)?.write_all(&w.to_bytes())?;
    Ok(())
}

pub fn read_weights<T: Element>(path: impl AsRef<Path>) -> Result<WeightTensor<T>> {
    WeightTensor::from_bytes(&fs::read(path)?)
}
