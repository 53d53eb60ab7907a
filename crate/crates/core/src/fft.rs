//! Radix-2 FFTs and frequency-domain convolution.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::reference::ConvShape;
use crate::stats::ConvStats;
use crate::tensor::{Tensor, WeightTensor};

/// Smallest power of two holding the full linear convolution of an
/// `input`-wide signal with a `kernel`-wide filter (no circular aliasing).
pub fn pad_size(input: usize, kernel: usize) -> usize {
    (input.max(1) + kernel.max(1) - 1).next_power_of_two()
}

/// In-place iterative radix-2 FFT of one fixed length.
#[derive(Clone, Debug)]
pub struct Fft<T> {
    n: usize,
    twiddles: Vec<Complex<T>>,
    bitrev: Vec<usize>,
}

impl<T: Scalar> Fft<T> {
    pub fn new(n: usize) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::invalid(format!("FFT length {n} is not a power of two")));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|j| {
                let angle = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
                Complex::new(T::from_f64(angle.cos()), T::from_f64(angle.sin()))
            })
            .collect();
        Ok(Fft { n, twiddles, bitrev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        assert_eq!(buf.len(), self.n);
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let stride = self.n / len;
            for start in (0..self.n).step_by(len) {
                for j in 0..half {
                    let mut w = self.twiddles[j * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + j];
                    let b = buf[start + j + half] * w;
                    buf[start + j] = a + b;
                    buf[start + j + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, false);
    }

    /// Unnormalized inverse.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, true);
    }
}

/// Row-column 2D FFT over an N×N row-major grid.
#[derive(Clone, Debug)]
pub struct Fft2d<T> {
    fft: Fft<T>,
}

impl<T: Scalar> Fft2d<T> {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Fft2d { fft: Fft::new(n)? })
    }

    pub fn size(&self) -> usize {
        self.fft.len()
    }

    fn run(&self, grid: &mut [Complex<T>], inverse: bool) {
        let n = self.fft.len();
        assert_eq!(grid.len(), n * n);
        for row in grid.chunks_exact_mut(n) {
            self.fft.run(row, inverse);
        }
        let mut col = vec![Complex::new(T::zero(), T::zero()); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = grid[i * n + j];
            }
            self.fft.run(&mut col, inverse);
            for i in 0..n {
                grid[i * n + j] = col[i];
            }
        }
    }

    pub fn forward(&self, grid: &mut [Complex<T>]) {
        self.run(grid, false);
    }

    /// Inverse including the 1/N² normalization.
    pub fn inverse(&self, grid: &mut [Complex<T>]) {
        self.run(grid, true);
        let scale = T::one() / T::from_f64((grid.len()) as f64);
        for v in grid.iter_mut() {
            *v = *v * scale;
        }
    }
}

fn grid_side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len {
        return Err(Error::shape(format!("{len} values do not form a square grid")));
    }
    Ok(n)
}

pub fn fft2d<T: Scalar>(grid: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    let engine = Fft2d::new(grid_side(grid.len())?)?;
    let mut out = grid.to_vec();
    engine.forward(&mut out);
    Ok(out)
}

pub fn ifft2d<T: Scalar>(grid: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    let engine = Fft2d::new(grid_side(grid.len())?)?;
    let mut out = grid.to_vec();
    engine.inverse(&mut out);
    Ok(out)
}

/// Transform geometry for one stride-1 layer.
///
/// The convolution's own zero padding is implicit in the transform grid as
/// long as `pad <= Q - 1`; any excess is materialized as `lead` extra zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FftPlan {
    /// Transform size N.
    pub n: usize,
    /// Spatial extent placed in the grid (input plus any explicit padding).
    pub m_in: usize,
    pub q: usize,
    lead: usize,
    implicit_pad: usize,
}

impl FftPlan {
    pub fn for_shape(shape: &ConvShape) -> Result<Self> {
        if shape.stride != 1 {
            return Err(Error::Unsupported(format!("FFT convolution requires stride 1, got {}", shape.stride)));
        }
        shape.validate()?;
        let q = shape.kernel;
        let lead = shape.pad.saturating_sub(q - 1);
        let m_in = shape.input_size + 2 * lead;
        Ok(FftPlan { n: pad_size(m_in, q), m_in, q, lead, implicit_pad: shape.pad - lead })
    }
}

/// Kernel spectra for one layer, computed once and reused across inputs.
#[derive(Clone, Debug)]
pub struct FftKernels<T> {
    plan: FftPlan,
    shape: ConvShape,
    engine: Fft2d<T>,
    spectra: Vec<Complex<T>>,
}

impl<T: Scalar> FftKernels<T> {
    pub fn prepare(w: &WeightTensor<T>, shape: &ConvShape) -> Result<Self> {
        let plan = FftPlan::for_shape(shape)?;
        if w.out_channels() != shape.out_channels || w.in_channels() != shape.in_channels || w.kernel() != shape.kernel {
            return Err(Error::shape("weights do not match the layer shape"));
        }
        let (n, q) = (plan.n, plan.q);
        let engine = Fft2d::new(n)?;
        let zero = Complex::new(T::zero(), T::zero());
        let mut spectra = vec![zero; shape.out_channels * shape.in_channels * n * n];
        spectra.par_chunks_mut(n * n).enumerate().for_each(|(idx, grid)| {
            let ker = w.kernel_slice(idx / shape.in_channels, idx % shape.in_channels);
            // index reversal turns the spectral product into a correlation
            for i in 0..q {
                for j in 0..q {
                    grid[i * n + j] = Complex::new(ker[(q - 1 - i) * q + (q - 1 - j)], T::zero());
                }
            }
            engine.forward(grid);
        });
        Ok(FftKernels { plan, shape: *shape, engine, spectra })
    }

    pub fn plan(&self) -> &FftPlan {
        &self.plan
    }

    pub fn run(&self, x: &Tensor<T>, bias: Option<&[T]>) -> Result<(Tensor<T>, ConvStats)> {
        let shape = &self.shape;
        let (c, h, w) = x.dims();
        if c != shape.in_channels || h != shape.input_size || w != shape.input_size {
            return Err(Error::shape(format!("input {c}x{h}x{w} does not match layer shape {shape:?}")));
        }
        if let Some(b) = bias {
            if b.len() != shape.out_channels {
                return Err(Error::shape("bias length does not match output channels"));
            }
        }
        let FftPlan { n, q, lead, implicit_pad, .. } = self.plan;
        let n2 = n * n;
        let m = shape.input_size;
        let zero = Complex::new(T::zero(), T::zero());

        let mut inputs = vec![zero; c * n2];
        inputs.par_chunks_mut(n2).enumerate().for_each(|(ch, grid)| {
            let src = x.channel(ch);
            for y in 0..m {
                for xx in 0..m {
                    grid[(y + lead) * n + xx + lead] = Complex::new(src[y * m + xx], T::zero());
                }
            }
            self.engine.forward(grid);
        });

        let o = shape.output_size();
        let offset = q - 1 - implicit_pad;
        let planes: Vec<Vec<T>> = (0..shape.out_channels)
            .into_par_iter()
            .map(|k| {
                let mut acc = vec![zero; n2];
                for l in 0..c {
                    let wk = &self.spectra[(k * c + l) * n2..(k * c + l + 1) * n2];
                    let xl = &inputs[l * n2..(l + 1) * n2];
                    for ((a, &wv), &xv) in acc.iter_mut().zip(wk).zip(xl) {
                        *a = *a + wv * xv;
                    }
                }
                // one inverse transform per output channel
                self.engine.inverse(&mut acc);
                let b = bias.map_or(T::zero(), |b| b[k]);
                let mut out = Vec::with_capacity(o * o);
                for oy in 0..o {
                    for ox in 0..o {
                        out.push(acc[(oy + offset) * n + ox + offset].re + b);
                    }
                }
                out
            })
            .collect();

        let stats = ConvStats {
            multiplications: 4 * (n2 * c * shape.out_channels) as u64,
            tiles: 0,
            forward_ffts: c as u64,
            inverse_ffts: shape.out_channels as u64,
        };
        Ok((Tensor::new(shape.out_channels, o, o, planes.concat())?, stats))
    }
}

/// One-shot FFT convolution (kernel spectra computed on the fly).
pub fn fft_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &WeightTensor<T>,
    shape: &ConvShape,
    bias: Option<&[T]>,
) -> Result<(Tensor<T>, ConvStats)> {
    if shape.stride != 1 {
        return Err(Error::Unsupported(format!("FFT convolution requires stride 1, got {}", shape.stride)));
    }
    shape.check_operands(x, w)?;
    FftKernels::prepare(w, shape)?.run(x, bias)
}
