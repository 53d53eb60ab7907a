//! Whole-network plans: per-layer algorithms plus resource shares.
//!
//! Top-level stages (single layers, modules and the embedding layer) split
//! the budget by `√C`; each module then splits its stage share across its
//! branches in powers of two.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::descriptor::{Layer, LayerKind, NetworkSpec, Node, PoolKind};
use crate::allocator::{branch_allocate, interlayer_partition, AllocationPlan};
use crate::costmodel::{choose_algorithm, cost, Algorithm, CostWeights};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub id: String,
    pub op: String,
    /// Set for convolutions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    pub complexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchPlan {
    pub complexity: f64,
    pub r_ideal: f64,
    pub r: u64,
    pub layers: Vec<LayerChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub complexity: f64,
    /// This stage's share of the total budget.
    pub resources: f64,
    /// Empty for single-layer stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchPlan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerChoice>,
    /// The share was below one unit per branch and was raised to that.
    #[serde(default)]
    pub budget_raised: bool,
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub network: String,
    pub resources: f64,
    pub cost_weights: CostWeights,
    pub stages: Vec<StagePlan>,
    /// Sum of stage latencies, `Σ C / R` with realized shares.
    pub estimated_latency: f64,
    /// The slowest stage's latency.
    pub bottleneck_latency: f64,
}

impl NetworkPlan {
    /// Convolution id to algorithm.
    pub fn algorithms(&self) -> BTreeMap<String, Algorithm> {
        self.stages
            .iter()
            .flat_map(|s| s.layers.iter().chain(s.branches.iter().flat_map(|b| b.layers.iter())))
            .filter_map(|l| l.algorithm.map(|a| (l.id.clone(), a)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Algorithm and weighted cost for one layer.
pub fn layer_choice(layer: &Layer, weights: &CostWeights) -> Result<LayerChoice> {
    let (c, s) = layer.input;
    let (oc, os) = layer.output;
    let (op, algorithm, complexity) = match &layer.kind {
        LayerKind::Conv { shape, algorithm } => {
            let alg = algorithm.unwrap_or_else(|| choose_algorithm(shape, weights));
            ("conv", Some(alg), cost(shape, alg, weights)?.weighted_cost)
        }
        LayerKind::Pool { kind, spec } => {
            let window = (spec.window * spec.window) as f64;
            let per = match kind {
                PoolKind::Max => window * weights.add,
                PoolKind::Avg => window * weights.add + weights.mult,
            };
            (if *kind == PoolKind::Max { "maxpool" } else { "avgpool" }, None, (oc * os * os) as f64 * per)
        }
        LayerKind::BatchNorm => ("bn", None, (c * s * s) as f64 * (weights.mult + weights.add)),
        LayerKind::Relu => ("relu", None, (c * s * s) as f64 * weights.add),
    };
    Ok(LayerChoice { id: layer.id.clone(), op: op.into(), algorithm, complexity })
}

pub fn plan_network(net: &NetworkSpec, resources: f64, weights: &CostWeights) -> Result<NetworkPlan> {
    if !(resources >= 1.0) || !resources.is_finite() {
        return Err(Error::invalid(format!("resources must be at least 1, got {resources}")));
    }

    enum Draft {
        Layer(LayerChoice),
        Module(String, Vec<Vec<LayerChoice>>),
    }
    let mut drafts = Vec::new();
    for node in &net.body {
        drafts.push(match node {
            Node::Layer(l) => Draft::Layer(layer_choice(l, weights)?),
            Node::Module(m) => Draft::Module(
                m.name.clone(),
                m.branches
                    .iter()
                    .map(|b| b.layers.iter().map(|l| layer_choice(l, weights)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?,
            ),
        });
    }
    let fc_cost = (net.fc_inputs * net.embedding) as f64 * (weights.mult + weights.add);
    drafts.push(Draft::Layer(LayerChoice { id: "fc".into(), op: "fc".into(), algorithm: None, complexity: fc_cost }));

    let complexity = |d: &Draft| match d {
        Draft::Layer(l) => l.complexity,
        Draft::Module(_, bs) => bs.iter().flatten().map(|l| l.complexity).sum(),
    };
    let complexities: Vec<f64> = drafts.iter().map(complexity).collect();
    let shares = interlayer_partition(&complexities, resources)?;

    let mut stages = Vec::with_capacity(drafts.len());
    for ((draft, c), share) in drafts.into_iter().zip(complexities).zip(shares) {
        stages.push(match draft {
            Draft::Layer(l) => StagePlan {
                name: l.id.clone(),
                complexity: c,
                resources: share,
                branches: Vec::new(),
                layers: vec![l],
                budget_raised: false,
                latency: c / share,
            },
            Draft::Module(name, branches) => {
                let bc: Vec<f64> = branches.iter().map(|b| b.iter().map(|l| l.complexity).sum()).collect();
                let n = bc.len() as f64;
                let budget_raised = share < n;
                let alloc: AllocationPlan = branch_allocate(&bc, share.max(n))?;
                let latency = alloc.estimated_latency();
                StagePlan {
                    name,
                    complexity: c,
                    resources: share,
                    branches: branches
                        .into_iter()
                        .zip(&alloc.branches)
                        .map(|(layers, a)| BranchPlan { complexity: a.complexity, r_ideal: a.ideal, r: a.units, layers })
                        .collect(),
                    layers: Vec::new(),
                    budget_raised,
                    latency,
                }
            }
        });
    }
    let estimated_latency = stages.iter().map(|s| s.latency).sum();
    let bottleneck_latency = stages.iter().map(|s| s.latency).fold(0.0, f64::max);
    Ok(NetworkPlan { network: net.name.clone(), resources, cost_weights: *weights, stages, estimated_latency, bottleneck_latency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::parse_network;

    const NET: &str = "net t { input c=8 s=24 ;
        module m {
          branch { conv k=1 out=8 }
          branch { conv k=3 out=8 pad=1 }
          branch { conv k=5 out=8 pad=2 }
        }
        fc out=128 ; l2norm }";

    #[test]
    fn plan_shares_and_choices() {
        let net = parse_network(NET).unwrap();
        let plan = plan_network(&net, 256.0, &CostWeights::default()).unwrap();
        assert_eq!(plan.stages.len(), 2);
        let m = &plan.stages[0];
        assert_eq!(m.branches.len(), 3);
        assert!((m.resources + plan.stages[1].resources - 256.0).abs() < 1e-9);
        let units: u64 = m.branches.iter().map(|b| b.r).sum();
        assert!(units as f64 <= m.resources + 1e-9);
        assert!(m.branches.iter().all(|b| b.r.is_power_of_two()));
        let algs = plan.algorithms();
        assert_eq!(algs["m.b0.0"], Algorithm::Direct);
        assert_eq!(algs["m.b1.0"], Algorithm::Winograd { m: 4 });
        assert_eq!(algs["m.b2.0"], Algorithm::Fft);
    }

    #[test]
    fn plan_json_round_trip() {
        let net = parse_network(NET).unwrap();
        let plan = plan_network(&net, 64.0, &CostWeights::default()).unwrap();
        let back = NetworkPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back.algorithms(), plan.algorithms());
        assert_eq!(back.stages.len(), plan.stages.len());
    }

    #[test]
    fn small_budget_is_raised_per_branch() {
        let net = parse_network(NET).unwrap();
        let plan = plan_network(&net, 2.0, &CostWeights::default()).unwrap();
        assert!(plan.stages[0].budget_raised);
        assert!(plan_network(&net, 0.0, &CostWeights::default()).is_err());
    }
}
