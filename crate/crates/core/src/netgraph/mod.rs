//! Network descriptors, weight archives, execution and planning.

mod descriptor;
mod exec;
mod plan;
mod weights;

pub use descriptor::{parse_network, BranchSpec, Layer, LayerKind, ModuleSpec, NetworkSpec, Node, PoolKind, EMBEDDING_WIDTH};
pub use exec::{run_network, verify_pair, Embedding, ExecOptions, Executor, LayerStats, Verification, DEFAULT_THRESHOLD};
pub use plan::{layer_choice, plan_network, BranchPlan, LayerChoice, NetworkPlan, StagePlan};
pub use weights::{random_input, WeightEntry, WeightStore};

/// Read and parse a descriptor file.
pub fn load_network(path: impl AsRef<std::path::Path>) -> crate::Result<NetworkSpec> {
    parse_network(&std::fs::read_to_string(path)?)
}
