//! Operation-count models for the three engines and per-layer algorithm
//! selection.
//!
//! Counting conventions:
//! - direct: one multiplication and one addition per MAC, `K·L·Q²·O²`;
//! - FFT: `4·K·L·N²` real multiplications for the complex pairwise products
//!   and `(L + K)·N²·log2(N²)` transform operations, with `N` the padded
//!   transform size; no separate additions;
//! - Winograd: `tiles·t²·L·K` elementwise multiplications, as many
//!   accumulation additions, and transform operations (additions plus
//!   non-unit constant multiplications) read off the exact `A`, `B`
//!   matrices. Weight transforms are done offline and cost nothing.
//!
//! Weighted cost is `w_mult·mults + w_add·(adds + transform_ops)`, with the
//! FFT figure additionally scaled by the penalty `λ`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::{fft_conv, FftPlan};
use crate::reference::{conv_direct, ConvShape};
use crate::tensor::{Tensor, WeightTensor};
use crate::winograd::{cook_toom, winograd_conv, WinogradPlan, SUPPORTED};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostWeights {
    pub mult: f64,
    pub add: f64,
    /// Multiplier applied to the FFT cost (LUT overhead of the transforms).
    pub fft_penalty: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { mult: 1.0, add: 0.15, fft_penalty: 1.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Direct,
    Winograd { m: usize },
    Fft,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Direct => f.write_str("direct"),
            Algorithm::Winograd { m } => write!(f, "winograd{m}"),
            Algorithm::Fft => f.write_str("fft"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Algorithm::Direct),
            "winograd2" => Ok(Algorithm::Winograd { m: 2 }),
            "winograd4" => Ok(Algorithm::Winograd { m: 4 }),
            "fft" => Ok(Algorithm::Fft),
            other => Err(Error::invalid(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl serde::Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Algorithm {
    /// Whether this algorithm can execute `shape`.
    pub fn check(&self, shape: &ConvShape) -> Result<()> {
        shape.validate()?;
        match *self {
            Algorithm::Direct => Ok(()),
            Algorithm::Winograd { m } => {
                if shape.stride != 1 {
                    return Err(Error::Unsupported(format!(
                        "winograd{m} on a stride-{} convolution: the fast methods only support stride 1",
                        shape.stride
                    )));
                }
                if !SUPPORTED.contains(&(m, shape.kernel)) {
                    return Err(Error::Unsupported(format!(
                        "F({m}x{m}, {q}x{q}) is not a supported Winograd variant",
                        q = shape.kernel
                    )));
                }
                Ok(())
            }
            Algorithm::Fft => {
                if shape.stride != 1 {
                    return Err(Error::Unsupported(format!(
                        "fft on a stride-{} convolution: the fast methods only support stride 1",
                        shape.stride
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CostReport {
    pub algorithm: Algorithm,
    pub multiplications: u64,
    pub additions: u64,
    pub transform_ops: u64,
    pub weighted_cost: f64,
    pub speedup_vs_direct: f64,
}

impl CostReport {
    pub fn total_ops(&self) -> u64 {
        self.multiplications + self.additions + self.transform_ops
    }
}

fn direct_weighted(shape: &ConvShape, w: &CostWeights) -> f64 {
    let mults = direct_mults(shape) as f64;
    w.mult * mults + w.add * mults
}

fn direct_mults(shape: &ConvShape) -> u64 {
    let o = shape.output_size() as u64;
    (shape.out_channels * shape.in_channels * shape.kernel * shape.kernel) as u64 * o * o
}

/// `C_spatial = K·L·Q²·O²`.
pub fn cost_direct(shape: &ConvShape, weights: &CostWeights) -> CostReport {
    let mults = direct_mults(shape);
    CostReport {
        algorithm: Algorithm::Direct,
        multiplications: mults,
        additions: mults,
        transform_ops: 0,
        weighted_cost: direct_weighted(shape, weights),
        speedup_vs_direct: 1.0,
    }
}

/// `L·N²·log2(N²) + 4·K·L·N² + K·N²·log2(N²)`.
pub fn fft_complexity(in_channels: u64, out_channels: u64, n: u64) -> u64 {
    let n2 = n * n;
    let log = (n2 as f64).log2().round() as u64;
    in_channels * n2 * log + 4 * out_channels * in_channels * n2 + out_channels * n2 * log
}

/// Theoretical FFT-over-direct speedup `K·L·Q² / ((K + L)·log2(M²) + 4·K·L)`.
pub fn fft_theoretical_speedup(in_channels: f64, out_channels: f64, kernel: f64, size: f64) -> f64 {
    let (l, k) = (in_channels, out_channels);
    k * l * kernel * kernel / ((k + l) * (size * size).log2() + 4.0 * k * l)
}

pub fn cost_fft(shape: &ConvShape, weights: &CostWeights) -> Result<CostReport> {
    let plan = FftPlan::for_shape(shape)?;
    let (l, k, n) = (shape.in_channels as u64, shape.out_channels as u64, plan.n as u64);
    let mults = 4 * k * l * n * n;
    let transform = fft_complexity(l, k, n) - mults;
    let weighted = weights.fft_penalty * (weights.mult * mults as f64 + weights.add * transform as f64);
    Ok(CostReport {
        algorithm: Algorithm::Fft,
        multiplications: mults,
        additions: 0,
        transform_ops: transform,
        weighted_cost: weighted,
        speedup_vs_direct: direct_weighted(shape, weights) / weighted,
    })
}

pub fn cost_winograd(shape: &ConvShape, m: usize, weights: &CostWeights) -> Result<CostReport> {
    Algorithm::Winograd { m }.check(shape)?;
    let tr = cook_toom::<BigRational>(m, shape.kernel)?;
    let counts = tr.transform_counts();
    let t = tr.tile() as u64;
    let o = shape.output_size();
    let per_side = o.div_ceil(m) as u64;
    let tiles = per_side * per_side;
    let (l, k) = (shape.in_channels as u64, shape.out_channels as u64);
    let mults = tiles * t * t * l * k;
    let transform = tiles * (l * counts.input + k * counts.output);
    let weighted = weights.mult * mults as f64 + weights.add * (mults + transform) as f64;
    Ok(CostReport {
        algorithm: Algorithm::Winograd { m },
        multiplications: mults,
        additions: mults,
        transform_ops: transform,
        weighted_cost: weighted,
        speedup_vs_direct: direct_weighted(shape, weights) / weighted,
    })
}

pub fn cost(shape: &ConvShape, algorithm: Algorithm, weights: &CostWeights) -> Result<CostReport> {
    match algorithm {
        Algorithm::Direct => Ok(cost_direct(shape, weights)),
        Algorithm::Winograd { m } => cost_winograd(shape, m, weights),
        Algorithm::Fft => cost_fft(shape, weights),
    }
}

/// Winograd output tile for a stride-1 layer: F(4×4, 3×3) once the output
/// reaches 16, F(2×2, r×r) otherwise.
pub fn winograd_tile(kernel: usize, output: usize) -> Option<usize> {
    let m = if kernel == 3 && output >= 16 { 4 } else { 2 };
    SUPPORTED.contains(&(m, kernel)).then_some(m)
}

pub const DECISION_KERNELS: [usize; 3] = [3, 5, 7];
pub const DECISION_MAPS: [usize; 3] = [6, 12, 24];

/// Empirical kernel × feature-map decision table; `true` selects FFT.
pub fn decision_table(kernel: usize, feature_map: usize) -> Option<bool> {
    let row = DECISION_KERNELS.iter().position(|&k| k == kernel)?;
    let col = DECISION_MAPS.iter().position(|&m| m == feature_map)?;
    const TABLE: [[bool; 3]; 3] = [[false, false, false], [false, false, true], [false, true, true]];
    Some(TABLE[row][col])
}

/// Pick the algorithm for one layer.
///
/// Stride > 1 and kernels outside {3, 5, 7} go direct. Points on the
/// decision grid are looked up; anything else compares the Winograd and
/// penalized FFT cost models.
pub fn choose_algorithm(shape: &ConvShape, weights: &CostWeights) -> Algorithm {
    if shape.validate().is_err() || shape.stride > 1 || !DECISION_KERNELS.contains(&shape.kernel) {
        return Algorithm::Direct;
    }
    let Some(m) = winograd_tile(shape.kernel, shape.output_size()) else {
        return Algorithm::Direct;
    };
    let winograd = Algorithm::Winograd { m };
    if let Some(use_fft) = decision_table(shape.kernel, shape.input_size) {
        return if use_fft { Algorithm::Fft } else { winograd };
    }
    match (cost_winograd(shape, m, weights), cost_fft(shape, weights)) {
        (Ok(w), Ok(f)) if f.weighted_cost < w.weighted_cost => Algorithm::Fft,
        (Ok(_), _) => winograd,
        (Err(_), Ok(_)) => Algorithm::Fft,
        (Err(_), Err(_)) => Algorithm::Direct,
    }
}

// ---------------------------------------------------------------------------
// Characterization

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GridPoint {
    pub kernel: usize,
    pub feature_map: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GridPoint {
    /// Stride 1 with "same" padding.
    pub fn shape(&self) -> ConvShape {
        ConvShape::same(self.in_channels, self.out_channels, self.feature_map, self.kernel)
    }
}

pub const CHANNEL_DIMS: [usize; 4] = [16, 32, 64, 128];

/// Kernels {3,5,7} × feature maps {6,12,24} × all (L, K) pairs from {16,32,64,128}.
pub fn default_grid() -> Vec<GridPoint> {
    let mut grid = Vec::new();
    for kernel in DECISION_KERNELS {
        for feature_map in DECISION_MAPS {
            for in_channels in CHANNEL_DIMS {
                for out_channels in CHANNEL_DIMS {
                    grid.push(GridPoint { kernel, feature_map, in_channels, out_channels });
                }
            }
        }
    }
    grid
}

/// Grid file: one `Q,fm,L,K` line per point; blank lines, `#` comments and
/// a header line starting with `Q` are ignored.
pub fn parse_grid(text: &str) -> Result<Vec<GridPoint>> {
    let mut grid = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('Q') || line.starts_with('q') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: std::result::Result<Vec<usize>, _> = fields.iter().map(|f| f.parse::<usize>()).collect();
        match nums {
            Ok(v) if v.len() == 4 && v.iter().all(|&x| x > 0) => {
                let point = GridPoint { kernel: v[0], feature_map: v[1], in_channels: v[2], out_channels: v[3] };
                point.shape().validate().map_err(|e| Error::Syntax { line: i + 1, msg: e.to_string() })?;
                grid.push(point);
            }
            _ => {
                return Err(Error::Syntax { line: i + 1, msg: format!("expected four positive integers Q,fm,L,K: {line:?}") })
            }
        }
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharacterizeRow {
    pub point: GridPoint,
    pub report: CostReport,
    pub selected: bool,
    pub bench_micros: Option<f64>,
}

/// Cost every applicable algorithm at every grid point and mark the selection.
pub fn characterize(grid: &[GridPoint], weights: &CostWeights, bench: bool) -> Result<Vec<CharacterizeRow>> {
    let mut rows = Vec::new();
    for point in grid {
        let shape = point.shape();
        let selected = choose_algorithm(&shape, weights);
        let mut candidates = vec![Algorithm::Direct];
        if let Some(m) = winograd_tile(shape.kernel, shape.output_size()) {
            candidates.push(Algorithm::Winograd { m });
        }
        candidates.push(Algorithm::Fft);
        for algorithm in candidates {
            let Ok(report) = cost(&shape, algorithm, weights) else { continue };
            let bench_micros = if bench { Some(time_engine(&shape, algorithm)?) } else { None };
            rows.push(CharacterizeRow { point: *point, report, selected: algorithm == selected, bench_micros });
        }
    }
    Ok(rows)
}

fn time_engine(shape: &ConvShape, algorithm: Algorithm) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let m = shape.input_size;
    let x = Tensor::from_fn(shape.in_channels, m, m, |_, _, _| rng.gen_range(-1.0..1.0));
    let w = WeightTensor::from_fn(shape.out_channels, shape.in_channels, shape.kernel, |_, _, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let start = Instant::now();
    match algorithm {
        Algorithm::Direct => {
            conv_direct(&x, &w, shape, None)?;
        }
        Algorithm::Winograd { m } => {
            winograd_conv(&x, &w, shape, Arc::new(WinogradPlan::<f64>::new(m, shape.kernel)?), None)?;
        }
        Algorithm::Fft => {
            fft_conv(&x, &w, shape, None)?;
        }
    }
    Ok(start.elapsed().as_secs_f64() * 1e6)
}

/// The selected algorithm per (kernel, feature map), when it is uniform over channels.
pub fn selection_matrix(rows: &[CharacterizeRow]) -> BTreeMap<(usize, usize), Algorithm> {
    let mut out: BTreeMap<(usize, usize), Option<Algorithm>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.selected) {
        let key = (row.point.kernel, row.point.feature_map);
        let entry = out.entry(key).or_insert(Some(row.report.algorithm));
        if *entry != Some(row.report.algorithm) {
            *entry = None;
        }
    }
    out.into_iter().filter_map(|(k, v)| v.map(|a| (k, a))).collect()
}

pub fn write_csv(rows: &[CharacterizeRow], out: &mut impl Write) -> std::io::Result<()> {
    let bench = rows.iter().any(|r| r.bench_micros.is_some());
    write!(out, "Q,fm,L,K,algo,mults,transform_ops,weighted_cost,selected")?;
    if bench {
        write!(out, ",bench_us")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.point.kernel,
            r.point.feature_map,
            r.point.in_channels,
            r.point.out_channels,
            r.report.algorithm,
            r.report.multiplications,
            r.report.transform_ops,
            r.report.weighted_cost,
            u8::from(r.selected)
        )?;
        if bench {
            write!(out, ",{:.1}", r.bench_micros.unwrap_or(0.0))?;
        }
        writeln!(out)?;
    }
    let matrix = selection_matrix(rows);
    let kernels: Vec<usize> = matrix.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let maps: Vec<usize> = matrix.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if !matrix.is_empty() {
        writeln!(out, "# selection matrix, rows Q, columns fm")?;
        write!(out, "# Q\\fm")?;
        for fm in &maps {
            write!(out, ",{fm}")?;
        }
        writeln!(out)?;
        for q in &kernels {
            write!(out, "# {q}")?;
            for fm in &maps {
                match matrix.get(&(*q, *fm)) {
                    Some(a) => write!(out, ",{a}")?,
                    None => write!(out, ",mixed")?,
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
