//! slugplan: batch CLI over the fusion planner and the two executors.
//!
//! Exit codes: 0 success, 2 usage, 3 parse/validate/IO, 4 planning,
//! 5 output mismatch in `compare`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use slugplan_core::error::Error;
use slugplan_core::executor::{
    bench, render_csv, render_table, run_breadth_first, run_depth_first, TrafficReport,
};
use slugplan_core::graph::{builtin_blocks, parse_network_file, validate, NetworkGraph, ValidatedGraph};
use slugplan_core::planner::{plan, DeviceConfig};
use slugplan_core::tensor::{prng_fill, read_tensor_file, write_tensor_file, Shape, Tensor};

#[derive(Parser)]
#[command(name = "slugplan", version, about = "Layer-fusion planner and depth-first tiled executor")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Bf,
    Df,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a network, printing one shape row per node.
    Validate {
        network: PathBuf,
    },
    /// Compile a network into stacks, steps, and sequences.
    Plan {
        network: PathBuf,
        #[arg(long)]
        device: Option<PathBuf>,
        /// Cap steps per sequence (policy override; omit for unrestricted).
        #[arg(long)]
        max_steps: Option<usize>,
        /// Emit the machine-readable report instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Run a network over an input tensor and write the output.
    Run {
        network: PathBuf,
        /// BSTN file path, or prng:SEEDxN,C,H,W
        #[arg(long)]
        input: String,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run both modes and verify the outputs are identical.
    Compare {
        network: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Benchmark a network file, or builtin:blocks across a depth range
    /// under all three packing policies.
    Bench {
        /// Network file path, or "builtin:blocks" with --depth.
        network: String,
        /// Depth range a..b (inclusive) for builtin:blocks.
        #[arg(long)]
        depth: Option<String>,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Planning(_) => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}

/// Writes to stdout, treating a closed pipe as a normal exit so commands
/// compose with `head` and friends.
fn emit(text: &str) {
    use std::io::Write;
    if std::io::stdout().write_all(text.as_bytes()).is_err() {
        std::process::exit(0);
    }
}

macro_rules! out {
    ($($arg:tt)*) => { emit(&format!($($arg)*)) };
}

macro_rules! outln {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::Validate { network } => cmd_validate(&network),
        Cmd::Plan { network, device, max_steps, json } => {
            cmd_plan(&network, device.as_deref(), max_steps, json)
        }
        Cmd::Run { network, input, mode, device, out, workers } => {
            cmd_run(&network, &input, mode, device.as_deref(), &out, workers)
        }
        Cmd::Compare { network, input, device, workers } => {
            cmd_compare(&network, &input, device.as_deref(), workers)
        }
        Cmd::Bench { network, depth, device, batch, reps, csv, seed, workers } => cmd_bench(
            &network,
            depth.as_deref(),
            device.as_deref(),
            &batch,
            reps,
            csv.as_deref(),
            seed,
            workers,
        ),
    }
}

fn load_device(path: Option<&Path>, workers: Option<usize>) -> Result<DeviceConfig, Error> {
    let mut cfg = match path {
        Some(p) => DeviceConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => DeviceConfig::default(),
    };
    if let Some(w) = workers {
        cfg.worker_count = w;
        cfg.check()?;
    }
    Ok(cfg)
}

fn load_graph(path: &Path) -> Result<Arc<ValidatedGraph>, Error> {
    Ok(Arc::new(validate(parse_network_file(path)?)?))
}

/// Input spec: a BSTN file path or "prng:SEEDxN,C,H,W".
fn load_input(spec: &str) -> Result<Tensor, Error> {
    match spec.strip_prefix("prng:") {
        None => read_tensor_file(Path::new(spec)),
        Some(rest) => {
            let (seed_s, dims_s) = rest
                .split_once('x')
                .ok_or_else(|| Error::Parse(format!("input spec \"{spec}\": expected prng:SEEDxN,C,H,W")))?;
            let seed: u64 = seed_s
                .parse()
                .map_err(|_| Error::Parse(format!("input spec \"{spec}\": bad seed")))?;
            let dims: Vec<usize> = dims_s
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Parse(format!("input spec \"{spec}\": bad dimensions")))?;
            if dims.len() != 4 {
                return Err(Error::Parse(format!(
                    "input spec \"{spec}\": expected 4 dimensions, got {}",
                    dims.len()
                )));
            }
            prng_fill(seed, Shape::new(dims[0], dims[1], dims[2], dims[3]))
        }
    }
}

fn cmd_validate(network: &Path) -> Result<ExitCode, Error> {
    let graph = load_graph(network)?;
    outln!("{:<6} {:<10} {:<16} flatten", "node", "kind", "output_shape");
    for (idx, layer) in graph.layers.iter().enumerate() {
        let s = &graph.shapes[idx];
        outln!(
            "{:<6} {:<10} {:<16} {}",
            idx,
            layer.kind().name(),
            s.out.to_string(),
            if s.flattens_input { "yes" } else { "-" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(
    network: &Path,
    device: Option<&Path>,
    max_steps: Option<usize>,
    json: bool,
) -> Result<ExitCode, Error> {
    let graph = load_graph(network)?;
    let mut cfg = load_device(device, None)?;
    if max_steps.is_some() {
        cfg.max_steps_per_sequence = max_steps;
    }
    let p = plan(graph, &cfg)?;
    let report = p.report();
    if json {
        outln!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::Serialize(e.to_string()))?
        );
    } else {
        out!("{report}");
    }
    Ok(ExitCode::SUCCESS)
}

fn print_traffic(label: &str, report: &TrafficReport) {
    let t = &report.total;
    outln!(
        "{label}: read {} B (data {} + params {}), written {} B, redundant {} elems, {} ops, wall {:.3} ms",
        t.bytes_read_main(),
        t.data_bytes_read,
        t.param_bytes_read,
        t.bytes_written_main(),
        t.redundant_elements,
        t.op_count,
        report.wall_seconds * 1e3
    );
}

fn cmd_run(
    network: &Path,
    input: &str,
    mode: Mode,
    device: Option<&Path>,
    out: &Path,
    workers: Option<usize>,
) -> Result<ExitCode, Error> {
    let graph = load_graph(network)?;
    let cfg = load_device(device, workers)?;
    let x = load_input(input)?;
    let (label, (y, report)) = match mode {
        Mode::Bf => ("bf", run_breadth_first(&graph, &x)?),
        Mode::Df => {
            let p = plan(graph.clone(), &cfg)?;
            ("df", run_depth_first(&p, &x)?)
        }
    };
    write_tensor_file(&y, out)?;
    print_traffic(label, &report);
    outln!("output: {} shape {}", out.display(), y.shape());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(
    network: &Path,
    input: &str,
    device: Option<&Path>,
    workers: Option<usize>,
) -> Result<ExitCode, Error> {
    let graph = load_graph(network)?;
    let cfg = load_device(device, workers)?;
    let x = load_input(input)?;
    let p = plan(graph.clone(), &cfg)?;
    let (bf, bf_report) = run_breadth_first(&graph, &x)?;
    let (df, df_report) = run_depth_first(&p, &x)?;

    let identical = df.bit_eq(&bf);
    let max_abs_diff = bf
        .data()
        .iter()
        .zip(df.data().iter())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    print_traffic("bf", &bf_report);
    print_traffic("df", &df_report);
    outln!("bf_data_bytes: {}", bf_report.total.data_bytes());
    outln!("df_data_bytes: {}", df_report.total.data_bytes());
    outln!(
        "traffic_ratio: {:.4}",
        bf_report.total.data_bytes() as f64 / df_report.total.data_bytes() as f64
    );
    outln!(
        "speedup: {:.4}",
        bf_report.wall_seconds / df_report.wall_seconds.max(1e-12)
    );
    outln!("max_abs_diff: {max_abs_diff}");
    outln!("identical: {identical}");
    if identical {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(5))
    }
}

fn parse_depth_range(spec: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Parse(format!("depth range \"{spec}\": expected a..b"));
    if let Some((a, b)) = spec.split_once("..") {
        let lo: usize = a.parse().map_err(|_| bad())?;
        let hi: usize = b.parse().map_err(|_| bad())?;
        if lo < 1 || hi < lo {
            return Err(bad());
        }
        Ok((lo, hi))
    } else {
        let d: usize = spec.parse().map_err(|_| bad())?;
        if d < 1 {
            return Err(bad());
        }
        Ok((d, d))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    network: &str,
    depth: Option<&str>,
    device: Option<&Path>,
    batches: &[usize],
    reps: usize,
    csv: Option<&Path>,
    seed: u64,
    workers: Option<usize>,
) -> Result<ExitCode, Error> {
    let cfg = load_device(device, workers)?;
    let mut rows = Vec::new();

    if network == "builtin:blocks" {
        let Some(depth) = depth else {
            eprintln!("error: builtin:blocks requires --depth a..b");
            return Ok(ExitCode::from(2));
        };
        let (lo, hi) = parse_depth_range(depth)?;
        let policies: [(&str, Option<usize>); 3] =
            [("1step", Some(1)), ("max5", Some(5)), ("unrestricted", None)];
        for d in lo..=hi {
            let net = builtin_blocks(d, Shape::new(1, 4, 32, 32), seed);
            for (label, max_steps) in policies {
                let policy_cfg =
                    DeviceConfig { max_steps_per_sequence: max_steps, ..cfg.clone() };
                let name = format!("blocks:{d}/{label}");
                rows.extend(bench(&name, &net, &policy_cfg, batches, reps, seed)?);
            }
        }
    } else {
        let path = Path::new(network);
        let net: NetworkGraph = parse_network_file(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| network.to_string());
        rows.extend(bench(&name, &net, &cfg, batches, reps, seed)?);
    }

    out!("{}", render_table(&rows));
    if let Some(path) = csv {
        std::fs::write(path, render_csv(&rows))?;
        outln!("csv: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
