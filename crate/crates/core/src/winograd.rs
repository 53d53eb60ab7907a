//! Minimal-filtering convolution F(m×m, r×r).
//!
//! Transform matrices come from Toom-Cook interpolation over the nodes
//! `0, 1, -1, 2, -2, 1/2, -1/2, 4, -4, 1/4, -1/4, ...` plus the point at
//! infinity, built in exact arithmetic and converted to floating point once.
//!
//! For a length-`r` filter `g` and length-`t = m + r - 1` input `d`, the 1D
//! identity is `Aᵀ((G g) ⊙ (Bᵀ d)) = y` with `y[i] = Σ_k d[i + k] g[k]`; 2D
//! nests it: `Y = Aᵀ((G g Gᵀ) ⊙ (Bᵀ d B)) A`.

use std::fmt;
use std::sync::Arc;

use num_rational::BigRational;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::{Field, Scalar};
use crate::reference::ConvShape;
use crate::stats::ConvStats;
use crate::tensor::{Tensor, WeightTensor};

/// The (m, r) variants the engine and planner are allowed to use.
pub const SUPPORTED: [(usize, usize); 4] = [(2, 3), (4, 3), (2, 5), (2, 7)];

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Clone> Matrix<F> {
    pub fn from_rows(rows: Vec<Vec<F>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged matrix");
        Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &F {
        &self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j).clone());
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    pub fn map<U>(&self, f: impl Fn(&F) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

impl<F: Field> Matrix<F> {
    pub fn mul_vec(&self, v: &[F]) -> Vec<F> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).fold(F::zero(), |acc, (a, b)| acc + a.clone() * b.clone()))
            .collect()
    }
}

impl<F: fmt::Display> fmt::Display for Matrix<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<String> = self.data.iter().map(|v| v.to_string()).collect();
        let width = cells.iter().map(String::len).max().unwrap_or(0);
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| format!("{:>width$}", cells[i * self.cols + j])).collect();
            writeln!(f, "[ {} ]", row.join("  "))?;
        }
        Ok(())
    }
}

/// The first `count` interpolation nodes, smallest magnitude first.
pub fn interpolation_nodes<F: Field>(count: usize) -> Vec<F> {
    let mut nodes = Vec::with_capacity(count);
    if count > 0 {
        nodes.push(F::zero());
    }
    let mut pow = F::one();
    let mut step = 0;
    while nodes.len() < count {
        // 1, -1, 2, -2, 1/2, -1/2, 4, -4, 1/4, -1/4, ...
        let candidates: Vec<F> = if step == 0 {
            vec![F::one(), -F::one()]
        } else {
            let inv = F::one() / pow.clone();
            vec![pow.clone(), -pow.clone(), inv.clone(), -inv]
        };
        for c in candidates {
            if nodes.len() < count {
                nodes.push(c);
            }
        }
        step += 1;
        pow = F::from_i64(1 << step);
    }
    nodes
}

/// Coefficients (ascending powers) of `Π (x - root)`.
fn poly_from_roots<F: Field>(roots: impl Iterator<Item = F>) -> Vec<F> {
    let mut coeffs = vec![F::one()];
    for root in roots {
        let mut next = vec![F::zero(); coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i + 1] = next[i + 1].clone() + c.clone();
            next[i] = next[i].clone() - c.clone() * root.clone();
        }
        coeffs = next;
    }
    coeffs
}

fn powers<F: Field>(x: &F, count: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(count);
    let mut p = F::one();
    for _ in 0..count {
        out.push(p.clone());
        p = p * x.clone();
    }
    out
}

/// The A (t×m), G (t×r) and B (t×t) matrices of F(m, r).
#[derive(Clone, Debug, PartialEq)]
pub struct Transforms<F> {
    pub m: usize,
    pub r: usize,
    pub a: Matrix<F>,
    pub g: Matrix<F>,
    pub b: Matrix<F>,
}

/// Toom-Cook construction of F(m, r).
///
/// `G` evaluates the filter at each node, `A` evaluates the output
/// polynomial, and `Bᵀ` is the transposed interpolation matrix. The
/// Lagrange denominators are folded into `G` (magnitude) and `Bᵀ` (sign) so
/// that `Bᵀ` stays integral for the usual node sets.
pub fn cook_toom<F: Field>(m: usize, r: usize) -> Result<Transforms<F>> {
    if m < 2 || r < 2 {
        return Err(Error::invalid(format!("F({m},{r}) needs m >= 2 and r >= 2")));
    }
    let t = m + r - 1;
    let nodes: Vec<F> = interpolation_nodes(t - 1);

    let mut a_rows = Vec::with_capacity(t);
    let mut g_rows = Vec::with_capacity(t);
    let mut bt_rows = Vec::with_capacity(t);
    for (i, node) in nodes.iter().enumerate() {
        let others = || nodes.iter().enumerate().filter(move |&(j, _)| j != i).map(|(_, v)| v.clone());
        let denom = others().fold(F::one(), |acc, other| acc * (node.clone() - other));
        let (sign, magnitude) = if denom < F::zero() { (-F::one(), -denom) } else { (F::one(), denom) };

        a_rows.push(powers(node, m));
        g_rows.push(powers(node, r).into_iter().map(|p| p / magnitude.clone()).collect::<Vec<_>>());
        let mut row: Vec<F> = poly_from_roots(others()).into_iter().map(|c| c * sign.clone()).collect();
        row.resize(t, F::zero());
        bt_rows.push(row);
    }
    // point at infinity: leading coefficients
    let unit = |len: usize| {
        let mut v = vec![F::zero(); len];
        v[len - 1] = F::one();
        v
    };
    a_rows.push(unit(m));
    g_rows.push(unit(r));
    bt_rows.push(poly_from_roots(nodes.iter().cloned()));

    Ok(Transforms {
        m,
        r,
        a: Matrix::from_rows(a_rows),
        g: Matrix::from_rows(g_rows),
        b: Matrix::from_rows(bt_rows).transpose(),
    })
}

impl<F: Field> Transforms<F> {
    pub fn tile(&self) -> usize {
        self.m + self.r - 1
    }

    /// `Aᵀ((G g) ⊙ (Bᵀ d))` in the transforms' own arithmetic.
    pub fn correlate_1d(&self, g: &[F], d: &[F]) -> Vec<F> {
        assert_eq!(g.len(), self.r);
        assert_eq!(d.len(), self.tile());
        let u = self.g.mul_vec(g);
        let v = self.b.transpose().mul_vec(d);
        let prod: Vec<F> = u.into_iter().zip(v).map(|(a, b)| a * b).collect();
        self.a.transpose().mul_vec(&prod)
    }
}

/// Additions plus constant (non-±1) multiplications needed to apply each
/// transform to one tile; zero entries are free and a row with `n`
/// nonzeros costs `n - 1` additions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct TransformCounts {
    /// `Bᵀ d B`, per input tile and input channel.
    pub input: u64,
    /// `Aᵀ M A`, per output tile and output channel.
    pub output: u64,
    /// `G g Gᵀ`, per kernel; done offline at inference.
    pub weight: u64,
}

fn apply_cost<F: Field>(mat: &Matrix<F>) -> u64 {
    let one = F::one();
    let neg = -F::one();
    (0..mat.rows())
        .map(|i| {
            let row = mat.row(i);
            let nnz = row.iter().filter(|v| !v.is_zero()).count() as u64;
            let scaled = row.iter().filter(|v| !v.is_zero() && **v != one && **v != neg).count() as u64;
            nnz.saturating_sub(1) + scaled
        })
        .sum()
}

impl<F: Field> Transforms<F> {
    pub fn transform_counts(&self) -> TransformCounts {
        let (t, m, r) = (self.tile() as u64, self.m as u64, self.r as u64);
        let bt = apply_cost(&self.b.transpose());
        let at = apply_cost(&self.a.transpose());
        let g = apply_cost(&self.g);
        TransformCounts { input: 2 * t * bt, output: (t + m) * at, weight: (r + t) * g }
    }
}

/// An F(m×m, r×r) plan: exact transforms plus their floating-point images.
#[derive(Clone, Debug)]
pub struct WinogradPlan<T> {
    exact: Transforms<BigRational>,
    counts: TransformCounts,
    at: Matrix<T>,
    g: Matrix<T>,
    bt: Matrix<T>,
}

impl<T: Scalar> WinogradPlan<T> {
    pub fn new(m: usize, r: usize) -> Result<Self> {
        let exact = cook_toom::<BigRational>(m, r)?;
        let to_t = |v: &BigRational| T::from_f64(v.to_f64());
        Ok(WinogradPlan {
            counts: exact.transform_counts(),
            at: exact.a.transpose().map(to_t),
            g: exact.g.map(to_t),
            bt: exact.b.transpose().map(to_t),
            exact,
        })
    }

    pub fn m(&self) -> usize {
        self.exact.m
    }

    pub fn r(&self) -> usize {
        self.exact.r
    }

    pub fn tile(&self) -> usize {
        self.exact.tile()
    }

    pub fn exact(&self) -> &Transforms<BigRational> {
        &self.exact
    }

    pub fn transform_counts(&self) -> TransformCounts {
        self.counts
    }

    pub fn mults_per_tile_1d(&self) -> u64 {
        self.tile() as u64
    }

    pub fn mults_per_tile_2d(&self) -> u64 {
        (self.tile() * self.tile()) as u64
    }

    pub fn direct_mults_per_tile_1d(&self) -> u64 {
        (self.m() * self.r()) as u64
    }

    pub fn direct_mults_per_tile_2d(&self) -> u64 {
        (self.m() * self.m() * self.r() * self.r()) as u64
    }

    /// Output tiles per channel for an `output` × `output` result.
    pub fn tiles_for(&self, output: usize) -> u64 {
        let per_side = output.div_ceil(self.m()) as u64;
        per_side * per_side
    }

    /// One 1D tile, counting the general multiplications actually performed.
    pub fn correlate_1d(&self, g: &[T], d: &[T]) -> (Vec<T>, u64) {
        assert_eq!(g.len(), self.r());
        assert_eq!(d.len(), self.tile());
        let t = self.tile();
        let u: Vec<T> = (0..t).map(|i| dot(self.g.row(i), g)).collect();
        let v: Vec<T> = (0..t).map(|i| dot(self.bt.row(i), d)).collect();
        let mut mults = 0;
        let prod: Vec<T> = u
            .iter()
            .zip(&v)
            .map(|(&a, &b)| {
                mults += 1;
                a * b
            })
            .collect();
        ((0..self.m()).map(|i| dot(self.at.row(i), &prod)).collect(), mults)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `lhs · X · lhsᵀ` for square `X` of side `lhs.cols()`.
fn sandwich<T: Scalar>(lhs: &Matrix<T>, x: &[T], out: &mut [T], scratch: &mut [T]) {
    let (p, n) = (lhs.rows(), lhs.cols());
    // scratch = lhs · X  (p×n)
    for i in 0..p {
        let row = lhs.row(i);
        for j in 0..n {
            let mut acc = T::zero();
            for (k, &c) in row.iter().enumerate() {
                if c != T::zero() {
                    acc += c * x[k * n + j];
                }
            }
            scratch[i * n + j] = acc;
        }
    }
    // out = scratch · lhsᵀ  (p×p)
    for i in 0..p {
        for j in 0..p {
            let mut acc = T::zero();
            for (k, &c) in lhs.row(j).iter().enumerate() {
                if c != T::zero() {
                    acc += scratch[i * n + k] * c;
                }
            }
            out[i * p + j] = acc;
        }
    }
}

/// Kernels transformed into the Winograd domain, `U = G g Gᵀ` per (k, l).
#[derive(Clone, Debug)]
pub struct WinogradKernels<T> {
    plan: Arc<WinogradPlan<T>>,
    out_channels: usize,
    in_channels: usize,
    u: Vec<T>,
}

impl<T: Scalar> WinogradKernels<T> {
    pub fn prepare(w: &WeightTensor<T>, plan: Arc<WinogradPlan<T>>) -> Result<Self> {
        if w.kernel() != plan.r() {
            return Err(Error::shape(format!(
                "kernel size {} does not match F({}x{}, {}x{})",
                w.kernel(),
                plan.m(),
                plan.m(),
                plan.r(),
                plan.r()
            )));
        }
        let (t, r) = (plan.tile(), plan.r());
        let (k, l) = (w.out_channels(), w.in_channels());
        let mut u = vec![T::zero(); k * l * t * t];
        u.par_chunks_mut(t * t).enumerate().for_each(|(idx, dst)| {
            let mut scratch = vec![T::zero(); t * r];
            sandwich(&plan.g, w.kernel_slice(idx / l, idx % l), dst, &mut scratch);
        });
        Ok(WinogradKernels { plan, out_channels: k, in_channels: l, u })
    }

    pub fn plan(&self) -> &WinogradPlan<T> {
        &self.plan
    }

    fn block(&self, k: usize, l: usize) -> &[T] {
        let t2 = self.plan.tile() * self.plan.tile();
        let start = (k * self.in_channels + l) * t2;
        &self.u[start..start + t2]
    }

    /// Tiled convolution with transform-domain accumulation over input channels.
    pub fn run(&self, x: &Tensor<T>, shape: &ConvShape, bias: Option<&[T]>) -> Result<(Tensor<T>, ConvStats)> {
        if shape.stride != 1 {
            return Err(Error::Unsupported(format!("Winograd convolution requires stride 1, got {}", shape.stride)));
        }
        if shape.kernel != self.plan.r()
            || shape.out_channels != self.out_channels
            || shape.in_channels != self.in_channels
        {
            return Err(Error::shape("prepared Winograd kernels do not match the layer shape"));
        }
        shape.validate()?;
        let (c, h, w) = x.dims();
        if c != shape.in_channels || h != shape.input_size || w != shape.input_size {
            return Err(Error::shape(format!("input {c}x{h}x{w} does not match layer shape {shape:?}")));
        }
        if let Some(b) = bias {
            if b.len() != shape.out_channels {
                return Err(Error::shape("bias length does not match output channels"));
            }
        }

        let plan = &*self.plan;
        let (m, t) = (plan.m(), plan.tile());
        let t2 = t * t;
        let o = shape.output_size();
        let per_side = o.div_ceil(m);
        let tiles = per_side * per_side;
        // zero extension so every tile is complete
        let ext = per_side * m + plan.r() - 1;
        let src_m = shape.input_size;
        let mut padded = vec![T::zero(); c * ext * ext];
        for ch in 0..c {
            let src = x.channel(ch);
            for y in 0..src_m {
                let dst = (ch * ext + y + shape.pad) * ext + shape.pad;
                padded[dst..dst + src_m].copy_from_slice(&src[y * src_m..(y + 1) * src_m]);
            }
        }

        // V = Bᵀ d B for every (tile, input channel)
        let mut v = vec![T::zero(); tiles * c * t2];
        v.par_chunks_mut(c * t2).enumerate().for_each(|(tile, dst)| {
            let (ty, tx) = (tile / per_side, tile % per_side);
            let mut d = vec![T::zero(); t2];
            let mut scratch = vec![T::zero(); t2];
            for ch in 0..c {
                for i in 0..t {
                    let row = (ch * ext + ty * m + i) * ext + tx * m;
                    d[i * t..(i + 1) * t].copy_from_slice(&padded[row..row + t]);
                }
                sandwich(&plan.bt, &d, &mut dst[ch * t2..(ch + 1) * t2], &mut scratch);
            }
        });

        let results: Vec<(Vec<T>, u64)> = (0..shape.out_channels)
            .into_par_iter()
            .map(|k| {
                let b = bias.map_or(T::zero(), |b| b[k]);
                let mut out = vec![b; o * o];
                let mut acc = vec![T::zero(); t2];
                let mut y = vec![T::zero(); m * m];
                let mut scratch = vec![T::zero(); m * t];
                let mut mults = 0u64;
                for tile in 0..tiles {
                    acc.iter_mut().for_each(|a| *a = T::zero());
                    let vt = &v[tile * c * t2..(tile + 1) * c * t2];
                    for l in 0..c {
                        let u = self.block(k, l);
                        let vl = &vt[l * t2..(l + 1) * t2];
                        for ((a, &uu), &vv) in acc.iter_mut().zip(u).zip(vl) {
                            *a += uu * vv;
                        }
                        mults += t2 as u64;
                    }
                    sandwich(&plan.at, &acc, &mut y, &mut scratch);
                    let (ty, tx) = (tile / per_side, tile % per_side);
                    for i in 0..m {
                        let oy = ty * m + i;
                        if oy >= o {
                            break;
                        }
                        for j in 0..m {
                            let ox = tx * m + j;
                            if ox >= o {
                                break;
                            }
                            out[oy * o + ox] += y[i * m + j];
                        }
                    }
                }
                (out, mults)
            })
            .collect();

        let mut stats = ConvStats { tiles: tiles as u64, ..ConvStats::default() };
        let mut data = Vec::with_capacity(shape.out_channels * o * o);
        for (plane, mults) in results {
            stats.multiplications += mults;
            data.extend(plane);
        }
        Ok((Tensor::new(shape.out_channels, o, o, data)?, stats))
    }
}

/// One-shot Winograd convolution (weights transformed on the fly).
pub fn winograd_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &WeightTensor<T>,
    shape: &ConvShape,
    plan: Arc<WinogradPlan<T>>,
    bias: Option<&[T]>,
) -> Result<(Tensor<T>, ConvStats)> {
    if shape.stride != 1 {
        return Err(Error::Unsupported(format!("Winograd convolution requires stride 1, got {}", shape.stride)));
    }
    shape.check_operands(x, w)?;
    WinogradKernels::prepare(w, plan)?.run(x, shape, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn node_sequence_prefix() {
        let nodes: Vec<BigRational> = interpolation_nodes(11);
        let expect = [q(0, 1), q(1, 1), q(-1, 1), q(2, 1), q(-2, 1), q(1, 2), q(-1, 2), q(4, 1), q(-4, 1), q(1, 4), q(-1, 4)];
        assert_eq!(nodes, expect);
    }

    #[test]
    fn f23_matrices() {
        let tr = cook_toom::<BigRational>(2, 3).unwrap();
        let i = |v: i64| q(v, 1);
        assert_eq!(
            tr.b.transpose(),
            Matrix::from_rows(vec![
                vec![i(1), i(0), i(-1), i(0)],
                vec![i(0), i(1), i(1), i(0)],
                vec![i(0), i(-1), i(1), i(0)],
                vec![i(0), i(-1), i(0), i(1)],
            ])
        );
        assert_eq!(
            tr.g,
            Matrix::from_rows(vec![
                vec![i(1), i(0), i(0)],
                vec![q(1, 2), q(1, 2), q(1, 2)],
                vec![q(1, 2), q(-1, 2), q(1, 2)],
                vec![i(0), i(0), i(1)],
            ])
        );
        assert_eq!(
            tr.a.transpose(),
            Matrix::from_rows(vec![vec![i(1), i(1), i(1), i(0)], vec![i(0), i(1), i(-1), i(1)]])
        );
    }

    #[test]
    fn f43_has_expected_dims_and_integral_bt() {
        let tr = cook_toom::<BigRational>(4, 3).unwrap();
        assert_eq!((tr.a.rows(), tr.a.cols()), (6, 4));
        assert_eq!((tr.g.rows(), tr.g.cols()), (6, 3));
        assert_eq!((tr.b.rows(), tr.b.cols()), (6, 6));
        assert_eq!(tr.b.transpose().row(0), &[q(4, 1), q(0, 1), q(-5, 1), q(0, 1), q(1, 1), q(0, 1)]);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(cook_toom::<BigRational>(1, 3).is_err());
        assert!(cook_toom::<BigRational>(2, 1).is_err());
    }

    #[test]
    fn f23_counts() {
        let plan = WinogradPlan::<f64>::new(2, 3).unwrap();
        assert_eq!(plan.mults_per_tile_1d(), 4);
        assert_eq!(plan.direct_mults_per_tile_1d(), 6);
        assert_eq!(plan.mults_per_tile_2d(), 16);
        assert_eq!(plan.direct_mults_per_tile_2d(), 36);
        let c = plan.transform_counts();
        assert_eq!((c.input, c.output, c.weight), (32, 24, 70));
    }

    #[test]
    fn float_1d_tile() {
        let plan = WinogradPlan::<f64>::new(2, 3).unwrap();
        let (y, mults) = plan.correlate_1d(&[1.0, 2.0, 3.0], &[1.0, 0.5, -1.0, 2.0]);
        assert_eq!(mults, 4);
        assert!((y[0] - (1.0 + 1.0 - 3.0)).abs() < 1e-15);
        assert!((y[1] - (0.5 - 2.0 + 6.0)).abs() < 1e-15);
    }

    #[test]
    fn tile_count() {
        let plan = WinogradPlan::<f64>::new(4, 3).unwrap();
        assert_eq!(plan.tiles_for(12), 9);
        assert_eq!(plan.tiles_for(13), 16);
    }

    #[test]
    fn stride_two_is_unsupported() {
        let plan = Arc::new(WinogradPlan::<f64>::new(2, 3).unwrap());
        let x = Tensor::filled(1, 6, 6, 1.0);
        let w = WeightTensor::from_fn(1, 1, 3, |_, _, _, _| 1.0);
        let shape = ConvShape::same(1, 1, 6, 3).with_stride(2);
        assert!(matches!(winograd_conv(&x, &w, &shape, plan.clone(), None), Err(Error::Unsupported(_))));
        let w5 = WeightTensor::from_fn(1, 1, 5, |_, _, _, _| 1.0);
        assert!(winograd_conv(&x, &w5, &ConvShape::same(1, 1, 6, 5), plan, None).is_err());
    }
}
