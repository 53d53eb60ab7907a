//! Network execution in float64, fix16 or fix8.
//!
//! Fixed-point convolutions run direct in integer arithmetic. When the plan
//! picks Winograd or FFT for a fixed-point layer, its operands are
//! dequantized, convolved in float and the output requantized, so the
//! quantization points match the direct path.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use num_traits::Saturating;
use rayon::prelude::*;

use super::descriptor::{Layer, LayerKind, ModuleSpec, NetworkSpec, Node, PoolKind};
use super::weights::WeightStore;
use crate::costmodel::{choose_algorithm, cost_direct, Algorithm, CostWeights};
use crate::error::{Error, Result};
use crate::fft::FftKernels;
use crate::num::Fixed;
use crate::reference::{
    affine_bn, concat, concat_fixed, conv_direct, conv_direct_fixed, fc, l2_normalize, pool_avg, pool_max, relu,
    ConvShape,
};
use crate::stats::ConvStats;
use crate::tensor::{dequantize_weights, quantize, quantize_weights, AnyTensor, DType, Tensor, WeightTensor};
use crate::winograd::{WinogradKernels, WinogradPlan};

#[derive(Clone, Debug, Default)]
pub struct ExecOptions {
    pub cost: CostWeights,
    /// Run every convolution direct, ignoring plans and descriptor choices.
    pub force_direct: bool,
    /// Per-layer algorithm choices, usually from a saved plan.
    pub overrides: BTreeMap<String, Algorithm>,
}

/// What one convolution layer did during a run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerStats {
    pub id: String,
    pub algorithm: Algorithm,
    pub shape: ConvShape,
    pub stats: ConvStats,
    /// Multiplications a direct evaluation of the same layer performs.
    pub direct_multiplications: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub layers: Vec<LayerStats>,
}

enum Engine {
    Direct,
    Winograd(WinogradKernels<f64>),
    Fft(FftKernels<f64>),
}

struct PreparedConv {
    shape: ConvShape,
    algorithm: Algorithm,
    /// Float kernels; in fixed modes these are the dequantized fixed kernels.
    weights: WeightTensor<f64>,
    bias: Vec<f64>,
    w16: Option<WeightTensor<i16>>,
    w8: Option<WeightTensor<i8>>,
    engine: Engine,
}

enum Prepared {
    Conv(Box<PreparedConv>),
    Pool { kind: PoolKind, spec: crate::reference::PoolSpec },
    Bn { scale: Vec<f64>, shift: Vec<f64> },
    Relu,
}

/// A network bound to its weights, with transformed kernels cached per layer.
pub struct Executor {
    net: NetworkSpec,
    mode: DType,
    layers: HashMap<String, Prepared>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

impl Executor {
    pub fn new(net: &NetworkSpec, weights: &WeightStore, mode: DType, options: &ExecOptions) -> Result<Self> {
        let conv_ids: HashMap<&str, &ConvShape> = net
            .layers()
            .into_iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv { shape, .. } => Some((l.id.as_str(), shape)),
                _ => None,
            })
            .collect();
        for (id, alg) in &options.overrides {
            let shape = conv_ids
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("plan names layer {id:?}, which is not a convolution of {}", net.name)))?;
            alg.check(shape).map_err(|e| Error::invalid(format!("layer {id}: {e}")))?;
        }

        let resolve = |l: &Layer| -> Option<Algorithm> {
            let LayerKind::Conv { shape, algorithm } = &l.kind else { return None };
            Some(if options.force_direct {
                Algorithm::Direct
            } else if let Some(a) = options.overrides.get(&l.id) {
                *a
            } else if let Some(a) = algorithm {
                *a
            } else {
                choose_algorithm(shape, &options.cost)
            })
        };

        let mut plans: HashMap<(usize, usize), Arc<WinogradPlan<f64>>> = HashMap::new();
        for l in net.layers() {
            if let (Some(Algorithm::Winograd { m }), LayerKind::Conv { shape, .. }) = (resolve(l), &l.kind) {
                if let std::collections::hash_map::Entry::Vacant(e) = plans.entry((m, shape.kernel)) {
                    e.insert(Arc::new(WinogradPlan::new(m, shape.kernel)?));
                }
            }
        }

        let prepared: Vec<(String, Prepared)> = net
            .layers()
            .into_par_iter()
            .map(|l| -> Result<(String, Prepared)> {
                let p = match &l.kind {
                    LayerKind::Conv { shape, .. } => {
                        let algorithm = resolve(l).expect("conv layer");
                        algorithm.check(shape).map_err(|e| Error::invalid(format!("layer {}: {e}", l.id)))?;
                        let raw = weights.kernels(&format!("{}.w", l.id), (shape.out_channels, shape.in_channels, shape.kernel))?;
                        let bias = weights.tensor(&format!("{}.b", l.id), (shape.out_channels, 1, 1))?.to_vec();
                        let (w16, w8, weights) = match mode {
                            DType::Float64 => (None, None, raw.clone()),
                            DType::Fix16 => {
                                let q = quantize_weights::<i16>(raw)?;
                                let f = dequantize_weights(&q);
                                (Some(q), None, f)
                            }
                            DType::Fix8 => {
                                let q = quantize_weights::<i8>(raw)?;
                                let f = dequantize_weights(&q);
                                (None, Some(q), f)
                            }
                        };
                        let engine = match algorithm {
                            Algorithm::Direct => Engine::Direct,
                            Algorithm::Winograd { m } => {
                                Engine::Winograd(WinogradKernels::prepare(&weights, plans[&(m, shape.kernel)].clone())?)
                            }
                            Algorithm::Fft => Engine::Fft(FftKernels::prepare(&weights, shape)?),
                        };
                        Prepared::Conv(Box::new(PreparedConv { shape: *shape, algorithm, weights, bias, w16, w8, engine }))
                    }
                    LayerKind::Pool { kind, spec } => Prepared::Pool { kind: *kind, spec: *spec },
                    LayerKind::BatchNorm => {
                        let c = l.input.0;
                        Prepared::Bn {
                            scale: weights.tensor(&format!("{}.scale", l.id), (c, 1, 1))?.to_vec(),
                            shift: weights.tensor(&format!("{}.shift", l.id), (c, 1, 1))?.to_vec(),
                        }
                    }
                    LayerKind::Relu => Prepared::Relu,
                };
                Ok((l.id.clone(), p))
            })
            .collect::<Result<_>>()?;

        let fc_w = weights.tensor("fc.w", (net.embedding, net.fc_inputs, 1))?.to_vec();
        let fc_b = weights.tensor("fc.b", (net.embedding, 1, 1))?.to_vec();
        Ok(Executor { net: net.clone(), mode, layers: prepared.into_iter().collect(), fc_w, fc_b })
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn mode(&self) -> DType {
        self.mode
    }

    /// The algorithm each convolution runs with.
    pub fn algorithms(&self) -> BTreeMap<String, Algorithm> {
        self.layers
            .iter()
            .filter_map(|(id, p)| match p {
                Prepared::Conv(c) => Some((id.clone(), c.algorithm)),
                _ => None,
            })
            .collect()
    }

    /// Convert a float input into this executor's number format.
    pub fn prepare_input(&self, input: &Tensor<f64>) -> Result<AnyTensor> {
        let want = (self.net.input_channels, self.net.input_size, self.net.input_size);
        if input.dims() != want {
            return Err(Error::shape(format!("network {} expects a {want:?} input, got {:?}", self.net.name, input.dims())));
        }
        AnyTensor::from_float(input, self.mode)
    }

    fn layer(&self, layer: &Layer, x: &AnyTensor, stats: &mut Vec<LayerStats>) -> Result<AnyTensor> {
        let prepared = self.layers.get(&layer.id).expect("every layer is prepared");
        match prepared {
            Prepared::Conv(p) => {
                let (y, s) = run_conv(p, x)?;
                stats.push(LayerStats {
                    id: layer.id.clone(),
                    algorithm: p.algorithm,
                    shape: p.shape,
                    stats: s,
                    direct_multiplications: cost_direct(&p.shape, &CostWeights::default()).multiplications,
                });
                Ok(y)
            }
            Prepared::Pool { kind: PoolKind::Max, spec } => Ok(match x {
                AnyTensor::Float64(t) => AnyTensor::Float64(pool_max(t, *spec)?),
                AnyTensor::Fix16(t) => AnyTensor::Fix16(pool_max(t, *spec)?),
                AnyTensor::Fix8(t) => AnyTensor::Fix8(pool_max(t, *spec)?),
            }),
            Prepared::Pool { kind: PoolKind::Avg, spec } => through_float(x, |t| pool_avg(t, *spec)),
            Prepared::Bn { scale, shift } => through_float(x, |t| affine_bn(t, scale, shift)),
            Prepared::Relu => Ok(match x {
                AnyTensor::Float64(t) => AnyTensor::Float64(relu(t)),
                AnyTensor::Fix16(t) => AnyTensor::Fix16(relu(t)),
                AnyTensor::Fix8(t) => AnyTensor::Fix8(relu(t)),
            }),
        }
    }

    fn branch(&self, layers: &[Layer], x: &AnyTensor) -> Result<(AnyTensor, Vec<LayerStats>)> {
        let mut stats = Vec::new();
        let mut cur = x.clone();
        for l in layers {
            cur = self.layer(l, &cur, &mut stats)?;
        }
        Ok((cur, stats))
    }

    fn module(&self, m: &ModuleSpec, x: &AnyTensor, order: &[usize]) -> Result<(AnyTensor, Vec<LayerStats>)> {
        let mut seen = vec![false; m.branches.len()];
        if order.len() != seen.len() || !order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid(format!("{order:?} is not a permutation of the {} branches of {}", m.branches.len(), m.name)));
        }
        let mut outs: Vec<(usize, AnyTensor, Vec<LayerStats>)> = order
            .par_iter()
            .map(|&i| self.branch(&m.branches[i].layers, x).map(|(y, s)| (i, y, s)))
            .collect::<Result<_>>()?;
        // the merge always follows declaration order
        outs.sort_by_key(|o| o.0);
        let stats = outs.iter().flat_map(|o| o.2.iter().cloned()).collect();
        let merged = match x {
            AnyTensor::Float64(_) => AnyTensor::Float64(concat(&parts(&outs, |t| match t {
                AnyTensor::Float64(t) => t,
                _ => unreachable!("branches keep the number format"),
            }))?),
            AnyTensor::Fix16(_) => AnyTensor::Fix16(concat_fixed(&parts(&outs, |t| match t {
                AnyTensor::Fix16(t) => t,
                _ => unreachable!("branches keep the number format"),
            }))?),
            AnyTensor::Fix8(_) => AnyTensor::Fix8(concat_fixed(&parts(&outs, |t| match t {
                AnyTensor::Fix8(t) => t,
                _ => unreachable!("branches keep the number format"),
            }))?),
        };
        Ok((merged, stats))
    }

    /// Run one module on `x`, evaluating its branches in `order`.
    ///
    /// The output does not depend on `order`.
    pub fn run_module_ordered(&self, name: &str, x: &AnyTensor, order: &[usize]) -> Result<AnyTensor> {
        let m = self.net.module(name).ok_or_else(|| Error::invalid(format!("no module named {name:?}")))?;
        if (x.dims().0, x.dims().1) != m.input || x.dims().1 != x.dims().2 {
            return Err(Error::shape(format!("module {name} expects {:?} input, got {:?}", m.input, x.dims())));
        }
        if x.dtype() != self.mode {
            return Err(Error::DtypeMismatch { expected: self.mode.name(), found: x.dtype().name() });
        }
        Ok(self.module(m, x, order)?.0)
    }

    pub fn run_module(&self, name: &str, x: &AnyTensor) -> Result<AnyTensor> {
        let n = self.net.module(name).map_or(0, |m| m.branches.len());
        self.run_module_ordered(name, x, &(0..n).collect::<Vec<_>>())
    }

    /// Everything before the embedding layer.
    pub fn run_features(&self, input: &Tensor<f64>) -> Result<(AnyTensor, Vec<LayerStats>)> {
        let mut x = self.prepare_input(input)?;
        let mut stats = Vec::new();
        for node in &self.net.body {
            x = match node {
                Node::Layer(l) => self.layer(l, &x, &mut stats)?,
                Node::Module(m) => {
                    let (y, s) = self.module(m, &x, &(0..m.branches.len()).collect::<Vec<_>>())?;
                    stats.extend(s);
                    y
                }
            };
        }
        Ok((x, stats))
    }

    /// The L2-normalized embedding of `input`.
    pub fn run(&self, input: &Tensor<f64>) -> Result<Embedding> {
        let (x, layers) = self.run_features(input)?;
        let raw = match &x {
            AnyTensor::Float64(t) => fc(t.data(), &self.fc_w, &self.fc_b)?,
            AnyTensor::Fix16(t) => fc_fixed(t, &self.fc_w, &self.fc_b)?,
            AnyTensor::Fix8(t) => fc_fixed(t, &self.fc_w, &self.fc_b)?,
        };
        Ok(Embedding { values: l2_normalize(&raw)?, layers })
    }
}

fn parts<'a, T>(outs: &'a [(usize, AnyTensor, Vec<LayerStats>)], pick: impl Fn(&'a AnyTensor) -> &'a Tensor<T>) -> Vec<&'a Tensor<T>> {
    outs.iter().map(|o| pick(&o.1)).collect()
}

fn through_float(x: &AnyTensor, f: impl FnOnce(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<AnyTensor> {
    match x {
        AnyTensor::Float64(t) => Ok(AnyTensor::Float64(f(t)?)),
        other => AnyTensor::from_float(&f(&other.to_float())?, other.dtype()),
    }
}

fn run_conv(p: &PreparedConv, x: &AnyTensor) -> Result<(AnyTensor, ConvStats)> {
    let direct_stats = || ConvStats {
        multiplications: cost_direct(&p.shape, &CostWeights::default()).multiplications,
        ..ConvStats::default()
    };
    match (&p.engine, x) {
        (Engine::Direct, AnyTensor::Float64(t)) => {
            Ok((AnyTensor::Float64(conv_direct(t, &p.weights, &p.shape, Some(&p.bias))?), direct_stats()))
        }
        (Engine::Direct, AnyTensor::Fix16(t)) => {
            let w = p.w16.as_ref().ok_or_else(|| Error::invalid("fix16 input to a layer prepared for another mode"))?;
            Ok((AnyTensor::Fix16(conv_direct_fixed(t, w, &p.shape, Some(&p.bias))?), direct_stats()))
        }
        (Engine::Direct, AnyTensor::Fix8(t)) => {
            let w = p.w8.as_ref().ok_or_else(|| Error::invalid("fix8 input to a layer prepared for another mode"))?;
            Ok((AnyTensor::Fix8(conv_direct_fixed(t, w, &p.shape, Some(&p.bias))?), direct_stats()))
        }
        (engine, x) => {
            let xf;
            let t = match x {
                AnyTensor::Float64(t) => t,
                other => {
                    xf = other.to_float();
                    &xf
                }
            };
            let (y, s) = match engine {
                Engine::Winograd(k) => k.run(t, &p.shape, Some(&p.bias))?,
                Engine::Fft(k) => k.run(t, Some(&p.bias))?,
                Engine::Direct => unreachable!("handled above"),
            };
            let y = match x.dtype() {
                DType::Float64 => AnyTensor::Float64(y),
                d => AnyTensor::from_float(&y, d)?,
            };
            Ok((y, s))
        }
    }
}

/// Embedding layer over fixed-point features: integer products accumulated
/// in the format's accumulator, then scaled to float for normalization.
fn fc_fixed<Q: Fixed>(x: &Tensor<Q>, w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if w.len() != b.len() * d {
        return Err(Error::shape(format!("fc weights hold {} values, expected {}x{d}", w.len(), b.len())));
    }
    let wq = quantize::<Q>(&Tensor::new(b.len(), d, 1, w.to_vec())?)?;
    let scale = 2f64.powi(-(x.frac_bits() as i32 + wq.frac_bits() as i32));
    Ok(b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &wq.data()[o * d..(o + 1) * d];
            let mut acc = Q::acc_from_i64(0);
            for (xi, wi) in x.data().iter().zip(row) {
                acc = acc.saturating_add(xi.widen() * wi.widen());
            }
            Q::acc_to_i64(acc) as f64 * scale + bias
        })
        .collect())
}

/// Run `net` on `input` with every convolution's algorithm chosen by the cost model.
pub fn run_network(net: &NetworkSpec, weights: &WeightStore, input: &Tensor<f64>, mode: DType) -> Result<Vec<f64>> {
    Ok(Executor::new(net, weights, mode, &ExecOptions::default())?.run(input)?.values)
}

/// Squared Euclidean distance between two embeddings and the same-identity decision.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Verification {
    pub distance: f64,
    pub threshold: f64,
    pub same: bool,
}

pub const DEFAULT_THRESHOLD: f64 = 1.0;

pub fn verify_pair(a: &[f64], b: &[f64], threshold: f64) -> Result<Verification> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("embeddings have {} and {} entries", a.len(), b.len())));
    }
    let distance = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Ok(Verification { distance, threshold, same: distance < threshold })
}
