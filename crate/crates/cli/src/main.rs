//! `hconv`: characterize, plan and run hybrid Winograd/FFT convolution networks.
//!
//! Exit status is 0 on success, 1 for invalid input or arguments and 2 when
//! a file cannot be read or written.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hconv::costmodel::{characterize, default_grid, parse_grid, selection_matrix, write_csv, CostWeights};
use hconv::netgraph::{
    load_network, plan_network, random_input, verify_pair, ExecOptions, Executor, LayerStats, NetworkPlan, WeightStore,
};
use hconv::num::Field;
use hconv::tensor::{read_tensor, write_tensor, DType, Tensor};
use hconv::winograd::cook_toom;
use hconv::ExactTransforms;

#[derive(Parser)]
#[command(name = "hconv", version, propagate_version = true, about = "Hybrid Winograd/FFT convolution planner and executor")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Copy)]
struct CostFlags {
    /// Weight of one multiplication
    #[arg(long, env = "HCONV_W_MULT", default_value_t = 1.0)]
    w_mult: f64,
    /// Weight of one addition or transform operation
    #[arg(long, env = "HCONV_W_ADD", default_value_t = 0.15)]
    w_add: f64,
    /// Penalty multiplier on the FFT cost
    #[arg(long, env = "HCONV_LAMBDA", default_value_t = 1.5)]
    lambda: f64,
}

impl CostFlags {
    fn weights(self) -> Result<CostWeights, Failure> {
        for (name, v) in [("--w-mult", self.w_mult), ("--w-add", self.w_add), ("--lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Failure::Invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(CostWeights { mult: self.w_mult, add: self.w_add, fft_penalty: self.lambda })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Cost every algorithm over a (kernel, feature map, channels) grid
    Characterize {
        /// `default` or a CSV file of Q,fm,L,K rows
        #[arg(long, default_value = "default")]
        grid: String,
        /// Also time each engine once (timings make the output run-dependent)
        #[arg(long)]
        bench: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cost: CostFlags,
    },
    /// Choose per-layer algorithms and split resources across a network
    Plan {
        #[arg(long)]
        net: PathBuf,
        /// Total resource units to distribute
        #[arg(long)]
        resources: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cost: CostFlags,
    },
    /// Compute the embedding of one input
    Run {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "float")]
        mode: DType,
        /// Plan file whose per-layer algorithms override the cost model
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Print per-layer operation counts
        #[arg(long)]
        stats: bool,
        /// Run every convolution direct
        #[arg(long)]
        force_direct: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cost: CostFlags,
    },
    /// Compare two embeddings by squared Euclidean distance
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        /// Also write the result as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print exact Cook-Toom transforms for F(m, r)
    GenTransforms {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        r: usize,
        /// Also write the matrices as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded random weights for a network
    RandWeights {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded random input tensor for a network
    RandInput {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

/// Attach the path to library errors and classify them.
fn at(path: &Path) -> impl Fn(hconv::Error) -> Failure + '_ {
    move |e| {
        if e.is_io() {
            Failure::Io(format!("{}: {e}", path.display()))
        } else {
            Failure::Invalid(format!("{}: {e}", path.display()))
        }
    }
}

fn invalid(e: hconv::Error) -> Failure {
    if e.is_io() {
        Failure::Io(e.to_string())
    } else {
        Failure::Invalid(e.to_string())
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Invalid(msg) | Failure::Io(msg)) = &f;
            eprintln!("hconv: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Characterize { grid, bench, out, cost } => {
            let weights = cost.weights()?;
            let points = if grid == "default" {
                default_grid()
            } else {
                let path = PathBuf::from(&grid);
                parse_grid(&read_text(&path)?).map_err(at(&path))?
            };
            let rows = characterize(&points, &weights, bench).map_err(invalid)?;
            let mut csv = Vec::new();
            write_csv(&rows, &mut csv).expect("writing to memory");
            write_out(&out, &csv)?;
            let matrix = selection_matrix(&rows);
            println!("{} rows written to {}", rows.len(), out.display());
            for ((q, fm), alg) in &matrix {
                println!("  {q}x{q} at {fm}x{fm}: {alg}");
            }
        }
        Cmd::Plan { net, resources, out, cost } => {
            let weights = cost.weights()?;
            let spec = load_network(&net).map_err(at(&net))?;
            let plan = plan_network(&spec, resources, &weights).map_err(invalid)?;
            let mut json = plan.to_json().map_err(invalid)?;
            json.push('\n');
            write_out(&out, json.as_bytes())?;
            println!("{}: {} stages, estimated latency {:.4e}", spec.name, plan.stages.len(), plan.estimated_latency);
            for stage in plan.stages.iter().filter(|s| !s.branches.is_empty()) {
                let units: Vec<String> = stage.branches.iter().map(|b| b.r.to_string()).collect();
                println!("  {}: R = {:.2}, branches [{}]", stage.name, stage.resources, units.join(", "));
            }
        }
        Cmd::Run { net, weights, input, mode, plan, stats, force_direct, out, cost } => {
            let cost = cost.weights()?;
            let spec = load_network(&net).map_err(at(&net))?;
            let store = WeightStore::read(&weights).map_err(at(&weights))?;
            let x: Tensor<f64> = read_tensor(&input).map_err(at(&input))?;
            let mut options = ExecOptions { cost, force_direct, ..Default::default() };
            if let Some(path) = &plan {
                let plan = NetworkPlan::from_json(&read_text(path)?).map_err(at(path))?;
                if plan.network != spec.name {
                    return Err(Failure::Invalid(format!(
                        "{}: plan is for network {:?}, not {:?}",
                        path.display(),
                        plan.network,
                        spec.name
                    )));
                }
                options.overrides = plan.algorithms();
            }
            let exec = Executor::new(&spec, &store, mode, &options).map_err(invalid)?;
            let embedding = exec.run(&x).map_err(invalid)?;
            let n = embedding.values.len();
            let t = Tensor::new(n, 1, 1, embedding.values).map_err(invalid)?;
            write_tensor(&out, &t).map_err(at(&out))?;
            if stats {
                print_stats(&embedding.layers);
            }
        }
        Cmd::Verify { a, b, threshold, out } => {
            if !threshold.is_finite() || threshold < 0.0 {
                return Err(Failure::Invalid(format!("--threshold must be a non-negative number, got {threshold}")));
            }
            let ea: Tensor<f64> = read_tensor(&a).map_err(at(&a))?;
            let eb: Tensor<f64> = read_tensor(&b).map_err(at(&b))?;
            let v = verify_pair(ea.data(), eb.data(), threshold).map_err(invalid)?;
            println!("distance {}", v.distance);
            println!("{}", if v.same { "same" } else { "different" });
            if let Some(out) = out {
                let mut json = serde_json::to_string_pretty(&v).expect("plain struct");
                json.push('\n');
                write_out(&out, json.as_bytes())?;
            }
        }
        Cmd::GenTransforms { m, r, out } => {
            let t: ExactTransforms = cook_toom(m, r).map_err(invalid)?;
            let mats = [("A^T", t.a.transpose()), ("G", t.g.clone()), ("B^T", t.b.transpose())];
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "F({m}, {r}): tile {}", t.tile());
            for (name, mat) in &mats {
                let _ = writeln!(stdout, "\n{name} (exact)\n{mat}");
                let _ = writeln!(stdout, "{name} (decimal)\n{}", mat.map(Field::to_f64));
            }
            if let Some(out) = out {
                let json: serde_json::Map<String, serde_json::Value> = mats
                    .iter()
                    .map(|(name, mat)| {
                        let rows: Vec<Vec<String>> =
                            (0..mat.rows()).map(|i| mat.row(i).iter().map(|v| v.to_string()).collect()).collect();
                        (name.to_string(), serde_json::json!(rows))
                    })
                    .collect();
                let mut text = serde_json::to_string_pretty(&json).expect("strings only");
                text.push('\n');
                write_out(&out, text.as_bytes())?;
            }
        }
        Cmd::RandWeights { net, seed, out } => {
            let spec = load_network(&net).map_err(at(&net))?;
            let store = WeightStore::random(&spec, seed);
            store.write(&out).map_err(at(&out))?;
            println!("{} tensors written to {}", store.len(), out.display());
        }
        Cmd::RandInput { net, seed, out } => {
            let spec = load_network(&net).map_err(at(&net))?;
            write_tensor(&out, &random_input(&spec, seed)).map_err(at(&out))?;
        }
    }
    Ok(())
}

fn print_stats(layers: &[LayerStats]) {
    println!("{:<12} {:<10} {:>14} {:>14} {:>8} {:>7} {:>7}", "layer", "algorithm", "mults", "direct", "ratio", "tiles", "ffts");
    let (mut total, mut direct) = (0u64, 0u64);
    for l in layers {
        total += l.stats.multiplications;
        direct += l.direct_multiplications;
        println!(
            "{:<12} {:<10} {:>14} {:>14} {:>8.2} {:>7} {:>7}",
            l.id,
            l.algorithm.to_string(),
            l.stats.multiplications,
            l.direct_multiplications,
            l.direct_multiplications as f64 / l.stats.multiplications.max(1) as f64,
            l.stats.tiles,
            l.stats.forward_ffts + l.stats.inverse_ffts
        );
    }
    println!("total multiplications {total} vs direct {direct} ({:.2}x)", direct as f64 / total.max(1) as f64);
}
