//! Direct, obviously-correct implementations of every network operation.
//!
//! These are the ground truth the fast engines are checked against, and the
//! path taken by layers the fast engines cannot handle (stride > 1, 1×1).

use num_traits::Saturating;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::{Fixed, Scalar};
use crate::tensor::{requantize_acc, Tensor, WeightTensor};

/// Geometry of a square convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn new(in_channels: usize, out_channels: usize, input_size: usize, kernel: usize) -> Self {
        ConvShape { in_channels, out_channels, input_size, kernel, stride: 1, pad: 0 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    /// "Same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, input_size: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, input_size, kernel).with_pad((kernel - 1) / 2)
    }

    pub fn padded_size(&self) -> usize {
        self.input_size + 2 * self.pad
    }

    pub fn output_size(&self) -> usize {
        (self.padded_size() - self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.input_size == 0 {
            return Err(Error::shape(format!("empty convolution {self:?}")));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::shape(format!("kernel and stride must be positive in {self:?}")));
        }
        if self.kernel > self.padded_size() {
            return Err(Error::shape(format!(
                "kernel {} larger than padded input {}",
                self.kernel,
                self.padded_size()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_operands<A: Copy, B: Copy>(&self, x: &Tensor<A>, w: &WeightTensor<B>) -> Result<()> {
        self.validate()?;
        let (c, h, wd) = x.dims();
        if c != self.in_channels || h != self.input_size || wd != self.input_size {
            return Err(Error::shape(format!(
                "input {c}x{h}x{wd} does not match {}x{}x{}",
                self.in_channels, self.input_size, self.input_size
            )));
        }
        if w.out_channels() != self.out_channels || w.in_channels() != self.in_channels || w.kernel() != self.kernel {
            return Err(Error::shape(format!(
                "weights {}x{}x{k}x{k} do not match K={} L={} Q={}",
                w.out_channels(),
                w.in_channels(),
                self.out_channels,
                self.in_channels,
                self.kernel,
                k = w.kernel()
            )));
        }
        Ok(())
    }
}

fn check_bias<T>(bias: Option<&[T]>, k: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != k => Err(Error::shape(format!("bias has {} entries, expected {k}", b.len()))),
        _ => Ok(()),
    }
}

/// Zero-padded cross-correlation, one output channel per worker.
pub fn conv_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &WeightTensor<T>,
    shape: &ConvShape,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    shape.check_operands(x, w)?;
    check_bias(bias, shape.out_channels)?;
    let o = shape.output_size();
    let (m, q, s, p) = (shape.input_size, shape.kernel, shape.stride, shape.pad as isize);
    let planes: Vec<Vec<T>> = (0..shape.out_channels)
        .into_par_iter()
        .map(|k| {
            let b = bias.map_or(T::zero(), |b| b[k]);
            let mut out = vec![b; o * o];
            for l in 0..shape.in_channels {
                let src = x.channel(l);
                let ker = w.kernel_slice(k, l);
                for oy in 0..o {
                    for ox in 0..o {
                        let mut acc = T::zero();
                        for i in 0..q {
                            let y = (oy * s + i) as isize - p;
                            if y < 0 || y >= m as isize {
                                continue;
                            }
                            let row = &src[y as usize * m..(y as usize + 1) * m];
                            for j in 0..q {
                                let xx = (ox * s + j) as isize - p;
                                if xx >= 0 && xx < m as isize {
                                    acc += row[xx as usize] * ker[i * q + j];
                                }
                            }
                        }
                        out[oy * o + ox] += acc;
                    }
                }
            }
            out
        })
        .collect();
    Tensor::new(shape.out_channels, o, o, planes.concat())
}

/// Fixed-point direct convolution: integer products accumulated in `Q::Acc`,
/// bias added at the accumulator scale, then one requantization of the output.
pub fn conv_direct_fixed<Q: Fixed>(
    x: &Tensor<Q>,
    w: &WeightTensor<Q>,
    shape: &ConvShape,
    bias: Option<&[f64]>,
) -> Result<Tensor<Q>> {
    shape.check_operands(x, w)?;
    check_bias(bias, shape.out_channels)?;
    let acc_frac = x.frac_bits() as u32 + w.frac_bits() as u32;
    let o = shape.output_size();
    let (m, q, s, p) = (shape.input_size, shape.kernel, shape.stride, shape.pad as isize);
    let planes: Vec<Vec<i64>> = (0..shape.out_channels)
        .into_par_iter()
        .map(|k| {
            let b = bias.map_or(0i64, |b| {
                let scaled = (b[k] * 2f64.powi(acc_frac as i32)).round();
                scaled.clamp(i64::MIN as f64, i64::MAX as f64) as i64
            });
            let mut out = vec![Q::acc_from_i64(b); o * o];
            for l in 0..shape.in_channels {
                let src = x.channel(l);
                let ker = w.kernel_slice(k, l);
                for oy in 0..o {
                    for ox in 0..o {
                        let mut acc = Q::acc_from_i64(0);
                        for i in 0..q {
                            let y = (oy * s + i) as isize - p;
                            if y < 0 || y >= m as isize {
                                continue;
                            }
                            for j in 0..q {
                                let xx = (ox * s + j) as isize - p;
                                if xx >= 0 && xx < m as isize {
                                    acc += src[y as usize * m + xx as usize].widen() * ker[i * q + j].widen();
                                }
                            }
                        }
                        let cell = &mut out[oy * o + ox];
                        *cell = Saturating::saturating_add(*cell, acc);
                    }
                }
            }
            out.into_iter().map(Q::acc_to_i64).collect()
        })
        .collect();
    let (raw, f) = requantize_acc::<Q>(&planes.concat(), acc_frac);
    Ok(Tensor::new(shape.out_channels, o, o, raw)?.with_frac_bits(f))
}

/// Square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize, pad: usize) -> Self {
        PoolSpec { window, stride, pad }
    }

    pub fn output_size(&self, input: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::shape("pool window and stride must be positive"));
        }
        if self.pad >= self.window {
            return Err(Error::shape(format!("pool pad {} must be smaller than window {}", self.pad, self.window)));
        }
        let padded = input + 2 * self.pad;
        if self.window > padded {
            return Err(Error::shape(format!("pool window {} larger than padded input {padded}", self.window)));
        }
        Ok((padded - self.window) / self.stride + 1)
    }
}

fn pool_generic<T: Copy, R: Copy>(
    x: &Tensor<T>,
    spec: PoolSpec,
    reduce: impl Fn(&mut dyn Iterator<Item = T>) -> R + Sync,
) -> Result<Tensor<R>>
where
    T: Sync,
    R: Send,
{
    let (c, h, w) = x.dims();
    let oh = spec.output_size(h)?;
    let ow = spec.output_size(w)?;
    let p = spec.pad as isize;
    let planes: Vec<Vec<R>> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let src = x.channel(ch);
            let mut out = Vec::with_capacity(oh * ow);
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * spec.stride) as isize - p;
                    let x0 = (ox * spec.stride) as isize - p;
                    let mut it = (0..spec.window as isize)
                        .flat_map(|i| (0..spec.window as isize).map(move |j| (y0 + i, x0 + j)))
                        .filter(|&(y, xx)| y >= 0 && y < h as isize && xx >= 0 && xx < w as isize)
                        .map(|(y, xx)| src[y as usize * w + xx as usize]);
                    out.push(reduce(&mut it));
                }
            }
            out
        })
        .collect();
    Tensor::new(c, oh, ow, planes.concat())
}

/// Windowed maximum; padded positions never win.
pub fn pool_max<T: Copy + PartialOrd + Send + Sync>(x: &Tensor<T>, spec: PoolSpec) -> Result<Tensor<T>> {
    let out = pool_generic(x, spec, |it| {
        let first = it.next().expect("window overlaps the input");
        it.fold(first, |m, v| if v > m { v } else { m })
    })?;
    Ok(out.with_frac_bits(x.frac_bits()))
}

/// Windowed mean over the full window area, zero padding included.
pub fn pool_avg<T: Scalar>(x: &Tensor<T>, spec: PoolSpec) -> Result<Tensor<T>> {
    let area = T::from_f64((spec.window * spec.window) as f64);
    pool_generic(x, spec, |it| it.fold(T::zero(), |a, v| a + v) / area)
}

/// Folded batch normalization: `y[c] = scale[c] * x[c] + shift[c]`.
pub fn affine_bn<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let c = x.channels();
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "affine parameters have {}/{} entries for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    let plane = x.height() * x.width();
    let data = x.data().iter().enumerate().map(|(i, &v)| scale[i / plane] * v + shift[i / plane]).collect();
    Tensor::new(c, x.height(), x.width(), data)
}

pub fn relu<T: Copy + PartialOrd + Default>(x: &Tensor<T>) -> Tensor<T> {
    let zero = T::default();
    x.map(|v| if v < zero { zero } else { v })
}

/// Fully connected layer over the flattened input; `weights` is out×in row-major.
pub fn fc<T: Scalar>(x: &[T], weights: &[T], bias: &[T]) -> Result<Vec<T>> {
    let out = bias.len();
    if weights.len() != out * x.len() {
        return Err(Error::shape(format!(
            "fc weights hold {} values, expected {}x{}",
            weights.len(),
            out,
            x.len()
        )));
    }
    Ok(weights
        .chunks_exact(x.len().max(1))
        .zip(bias)
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&wv, &xv)| acc + wv * xv))
        .collect())
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm == T::zero() || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// Channel concatenation in argument order.
pub fn concat<T: Copy>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let (h, w, f) = (first.height(), first.width(), first.frac_bits());
    let mut channels = 0;
    let mut data = Vec::new();
    for t in parts {
        if t.height() != h || t.width() != w {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {}x{} vs {h}x{w}",
                t.height(),
                t.width()
            )));
        }
        if t.frac_bits() != f {
            return Err(Error::shape("concat of fixed-point tensors with different scales"));
        }
        channels += t.channels();
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(channels, h, w, data)?.with_frac_bits(f))
}

/// Rescale fixed-point parts to their common (smallest) fraction, then concatenate.
pub fn concat_fixed<Q: Fixed>(parts: &[&Tensor<Q>]) -> Result<Tensor<Q>> {
    let f = parts.iter().map(|t| t.frac_bits()).min().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let aligned: Vec<Tensor<Q>> = parts
        .iter()
        .map(|t| {
            let k = (t.frac_bits() - f) as u32;
            if k == 0 {
                return (*t).clone();
            }
            let half = 1i128 << (k - 1);
            t.map(|r| {
                let v = r.to_i64().unwrap_or(0) as i128;
                Q::saturate(v.signum() * ((v.abs() + half) >> k))
            })
            .with_frac_bits(f)
        })
        .collect();
    concat(&aligned.iter().collect::<Vec<_>>())
}
