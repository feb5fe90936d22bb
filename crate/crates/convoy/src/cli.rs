//! Command-line interface: benchmarks, the detection experiment, the cost
//! ratio, and the standalone server.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::bench::{
    self, channel_sweep, default_cin_sweep, default_cout_sweep, detection_csv_row, median, preset,
    run_detection_experiment, run_phase_bench, spearman, theoretical_ratio, BenchConfig,
    BenchError, DetectionStats, LayerShape, PhaseTimings, SweepAxis, DETECTION_CSV_HEADER,
    PRESET_NAMES,
};
use crate::net::{serve, ServerConfig};
use crate::server::ServerBehavior;
use crate::tensor::{ConvShape, KernelSet, Scalar};

#[derive(Parser)]
#[command(
    name = "convoy",
    version,
    about = "Verifiable privacy-preserving convolution offloading: benchmarks, detection experiments, and a model server"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Arithmetic mode for all payloads.
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Int)]
    mode: ModeArg,
    /// Bit width of mask and check-vector magnitudes.
    #[arg(long, global = true, default_value_t = 16)]
    lambda1: u32,
    /// Number of precomputed masks in the pool.
    #[arg(long, global = true, default_value_t = 4)]
    lambda2: u32,
    /// Seed for all randomness; same seed, same run.
    #[arg(long, global = true, default_value_t = 0xC0FFEE)]
    seed: u64,
    /// Remote server address; omitted means in-process loopback servers.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Write results as CSV to this path.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Magnitude bound for synthetic inputs and weights.
    #[arg(long, global = true, default_value_t = 1024)]
    input_bound: u64,
    /// Concurrent sessions; above 1 the timing columns are contended.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Int,
    Float,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Cin,
    Cout,
}

#[derive(Subcommand)]
enum Command {
    /// Timing and operation-count benchmarks.
    Bench {
        #[command(subcommand)]
        what: BenchCommand,
    },
    /// Run tampered sessions and report the detection rate next to the
    /// theoretical floor, plus an honest control arm.
    Detect {
        /// Server behavior, e.g. tamper-one, tamper-sparse:3, scale-all:2,
        /// random-matrix, lazy-zero.
        #[arg(long)]
        behavior: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Layer shape as MxNxKxCINxCOUT; a small default otherwise.
        #[arg(long)]
        shape: Option<String>,
    },
    /// Print the theoretical client/server multiply ratio for a shape.
    Ratio {
        /// Layer shape as MxNxKxCINxCOUT.
        #[arg(long)]
        shape: String,
        /// Also run one loopback session and compare the measured ratio.
        #[arg(long)]
        measure: bool,
    },
    /// Serve a randomly weighted model until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7171")]
        listen: String,
        /// Server behavior on compute requests.
        #[arg(long, default_value = "honest")]
        behavior: String,
        /// Layer shape as MxNxKxCINxCOUT.
        #[arg(long)]
        shape: String,
        /// Seed for the model weights (defaults to --seed).
        #[arg(long)]
        weights_seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Per-phase timings and counts for explicit layer shapes.
    Phases {
        /// Layer shape as MxNxKxCINxCOUT; repeatable.
        #[arg(long = "shape", required = true)]
        shapes: Vec<String>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Sweep one channel axis and report the growth trend.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated channel counts; sensible defaults otherwise.
        #[arg(long)]
        values: Option<String>,
        /// Base shape as MxNxKxCINxCOUT for the non-swept dimensions.
        #[arg(long)]
        base_shape: Option<String>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Run every conv layer of a named architecture preset.
    Models {
        /// One of: vgg16, vgg19, resnet50, resnet101, resnet152, cnn3layer.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Feed activations into the next layer where shapes line up.
        #[arg(long)]
        chain: bool,
    },
}

/// Entry point used by the `convoy` binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONVOY_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.common.mode {
        ModeArg::Int => run::<i64>(cli),
        ModeArg::Float => run::<f64>(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run<T: Scalar>(cli: Cli) -> Result<(), BenchError> {
    let common = cli.common.clone();
    match cli.command {
        Command::Bench { what } => run_bench::<T>(&common, what),
        Command::Detect {
            behavior,
            trials,
            shape,
        } => run_detect::<T>(&common, &behavior, trials, shape.as_deref()),
        Command::Ratio { shape, measure } => run_ratio::<T>(&common, &shape, measure),
        Command::Serve {
            listen,
            behavior,
            shape,
            weights_seed,
        } => run_serve::<T>(&common, &listen, &behavior, &shape, weights_seed),
    }
}

fn base_config(common: &CommonArgs, shapes: Vec<LayerShape>) -> BenchConfig {
    let mut cfg = BenchConfig::new(shapes);
    cfg.lambda1 = common.lambda1;
    cfg.lambda2 = common.lambda2;
    cfg.seed = common.seed;
    cfg.endpoint = common.endpoint.clone();
    cfg.csv_path = common.csv.clone();
    cfg.input_bound = common.input_bound;
    cfg.parallel = common.parallel;
    cfg
}

fn run_bench<T: Scalar>(common: &CommonArgs, what: BenchCommand) -> Result<(), BenchError> {
    match what {
        BenchCommand::Phases { shapes, reps } => {
            let layers = shapes
                .iter()
                .map(|s| parse_shape(s).map(|shape| LayerShape::new(s.clone(), shape)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut cfg = base_config(common, layers);
            cfg.repetitions = reps;
            let rows = run_phase_bench::<T>(&cfg)?;
            print_phase_table(&rows);
            Ok(())
        }
        BenchCommand::Sweep {
            axis,
            values,
            base_shape,
            reps,
        } => {
            let axis = match axis {
                AxisArg::Cin => SweepAxis::CIn,
                AxisArg::Cout => SweepAxis::COut,
            };
            let layers = match (&values, &base_shape) {
                (None, None) => match axis {
                    SweepAxis::CIn => default_cin_sweep(),
                    SweepAxis::COut => default_cout_sweep(),
                },
                _ => {
                    let base = match base_shape {
                        Some(s) => parse_shape(&s)?,
                        None => ConvShape::new(16, 16, 3, 16, 16)
                            .map_err(|e| BenchError::Config(e.to_string()))?,
                    };
                    let vals = match values {
                        Some(v) => parse_values(&v)?,
                        None => vec![1, 2, 4, 8, 16, 32, 64],
                    };
                    channel_sweep(axis, &vals, base)
                }
            };
            let mut cfg = base_config(common, layers);
            cfg.repetitions = reps;
            let rows = run_phase_bench::<T>(&cfg)?;
            print_phase_table(&rows);
            print_sweep_trends(axis, &rows);
            Ok(())
        }
        BenchCommand::Models { preset: name, reps, chain } => {
            let layers = preset(&name).ok_or_else(|| {
                BenchError::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                ))
            })?;
            let mut cfg = base_config(common, layers);
            cfg.repetitions = reps;
            cfg.chain = chain;
            let rows = run_phase_bench::<T>(&cfg)?;
            print_phase_table(&rows);
            Ok(())
        }
    }
}

fn run_detect<T: Scalar>(
    common: &CommonArgs,
    behavior: &str,
    trials: usize,
    shape: Option<&str>,
) -> Result<(), BenchError> {
    let behavior = ServerBehavior::parse(behavior).map_err(BenchError::Config)?;
    let shapes = match shape {
        Some(s) => vec![LayerShape::new(s, parse_shape(s)?)],
        None => vec![LayerShape::new("default", bench::default_detect_shape())],
    };
    let cfg = base_config(common, shapes);

    let mut results = vec![run_detection_experiment::<T>(&cfg, behavior, trials)?];
    if !behavior.is_honest() {
        // Control arm: an honest server must never be rejected.
        results.push(run_detection_experiment::<T>(&cfg, ServerBehavior::Honest, trials)?);
    }
    print_detection_table(&results);

    if let Some(path) = &common.csv {
        let mut out = String::from(DETECTION_CSV_HEADER);
        out.push('\n');
        for r in &results {
            out.push_str(&detection_csv_row(r));
            out.push('\n');
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}

fn run_ratio<T: Scalar>(common: &CommonArgs, shape: &str, measure: bool) -> Result<(), BenchError> {
    let shape = parse_shape(shape)?;
    let ratio = theoretical_ratio(&shape);
    let patch = shape.patch_len();
    println!("shape {shape}: client/server multiply ratio");
    println!(
        "  (c_out + c_in*k^2) / (c_in*c_out*k^2) = ({} + {}) / {} = {ratio:.6}",
        shape.c_out,
        patch,
        shape.c_out * patch
    );
    if measure {
        let mut cfg = base_config(common, vec![LayerShape::new("ratio", shape)]);
        cfg.repetitions = 1;
        cfg.csv_path = None;
        let rows = run_phase_bench::<T>(&cfg)?;
        match rows[0].measured_ratio() {
            Some(measured) => {
                println!("  measured verify/server multiply ratio = {measured:.6}");
                println!(
                    "  exact match: {}",
                    if measured == ratio { "yes" } else { "no" }
                );
            }
            None => println!("  measured ratio unavailable against a remote endpoint"),
        }
    }
    Ok(())
}

fn run_serve<T: Scalar>(
    common: &CommonArgs,
    listen: &str,
    behavior: &str,
    shape: &str,
    weights_seed: Option<u64>,
) -> Result<(), BenchError> {
    let behavior = ServerBehavior::parse(behavior).map_err(BenchError::Config)?;
    let shape = parse_shape(shape)?;
    let mut rng = ChaCha12Rng::seed_from_u64(weights_seed.unwrap_or(common.seed));
    let kernels = KernelSet::<T>::random(shape, common.input_bound, &mut rng);
    println!("serving {shape} model on {listen} ({} mode, behavior {behavior})", T::MODE);
    serve(
        listen,
        kernels,
        ServerConfig {
            behavior,
            lambda1: common.lambda1,
            seed: Some(common.seed),
        },
    )?;
    Ok(())
}

fn parse_shape(s: &str) -> Result<ConvShape, BenchError> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 5 {
        return Err(BenchError::Config(format!(
            "shape {s:?} must be MxNxKxCINxCOUT, e.g. 16x16x3x8x16"
        )));
    }
    let dims = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| BenchError::Config(format!("shape {s:?} has a non-numeric field")))?;
    ConvShape::new(dims[0], dims[1], dims[2], dims[3], dims[4])
        .map_err(|e| BenchError::Config(e.to_string()))
}

fn parse_values(s: &str) -> Result<Vec<usize>, BenchError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| BenchError::Config(format!("bad channel count {p:?}")))
        })
        .collect()
}

fn print_phase_table(rows: &[PhaseTimings]) {
    println!(
        "{:<12} {:<16} {:>3} {:>11} {:>11} {:>11} {:>11} {:>11} {:>12} {:>9}",
        "layer", "shape", "|I|", "blind ms", "verify ms", "recover ms", "rtt ms", "server ms",
        "original ms", "speedup"
    );
    for t in rows {
        let server = t
            .server_compute_ms
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:<16} {:>3} {:>11.3} {:>11.3} {:>11.3} {:>11.3} {:>11} {:>12.3} {:>8.1}x",
            t.label,
            t.shape.to_string(),
            t.index_len,
            t.blind_ms,
            t.verify_ms,
            t.recover_ms,
            t.roundtrip_ms,
            server,
            t.original_compute_ms,
            t.speedup()
        );
    }
    if rows.len() > 1 {
        let sum = |f: fn(&PhaseTimings) -> f64| rows.iter().map(f).sum::<f64>();
        let original = sum(|t| t.original_compute_ms);
        let scheme = sum(|t| t.scheme_ms());
        println!(
            "{:<12} {:<16} {:>3} {:>11.3} {:>11.3} {:>11.3} {:>11.3} {:>11} {:>12.3} {:>8.1}x",
            "TOTAL",
            "-",
            "-",
            sum(|t| t.blind_ms),
            sum(|t| t.verify_ms),
            sum(|t| t.recover_ms),
            sum(|t| t.roundtrip_ms),
            "-",
            original,
            original / scheme
        );
    }
    if rows.iter().any(|t| t.contended) {
        println!("note: sessions ran concurrently; timing columns are contended");
    }
}

fn print_sweep_trends(axis: SweepAxis, rows: &[PhaseTimings]) {
    let axis_name = match axis {
        SweepAxis::CIn => "c_in",
        SweepAxis::COut => "c_out",
    };
    let xs: Vec<f64> = rows
        .iter()
        .map(|t| match axis {
            SweepAxis::CIn => t.shape.c_in as f64,
            SweepAxis::COut => t.shape.c_out as f64,
        })
        .collect();
    let client: Vec<f64> = rows.iter().map(|t| t.client_phase_ms()).collect();
    let client_rho = spearman(&xs, &client);
    println!("trend: client phase time vs {axis_name}: spearman rho = {client_rho:.3}");
    let server: Vec<f64> = rows
        .iter()
        .filter_map(|t| t.server_compute_ms)
        .collect();
    if server.len() == rows.len() {
        let server_rho = spearman(&xs, &server);
        println!("trend: server compute time vs {axis_name}: spearman rho = {server_rho:.3}");
    }
    let speedups: Vec<f64> = rows.iter().map(|t| t.speedup()).collect();
    println!(
        "speedup across the sweep: min {:.1}x, median {:.1}x, max {:.1}x",
        speedups.iter().cloned().fold(f64::INFINITY, f64::min),
        median(&speedups),
        speedups.iter().cloned().fold(0.0, f64::max)
    );
}

fn print_detection_table(results: &[DetectionStats]) {
    println!(
        "{:<16} {:<6} {:>8} {:>8} {:>9} {:>12} {:>14} {:>8}",
        "behavior", "mode", "lambda1", "trials", "detected", "rate", "floor 1-1/|Z|", "verdict"
    );
    for d in results {
        let floor = d
            .theoretical_floor()
            .map(|f| format!("{f:.8}"))
            .unwrap_or_else(|| "empirical".into());
        let verdict = if d.is_control_arm() {
            // Control arm: any rejection of an honest server is a failure.
            if d.detected == 0 {
                "ok"
            } else {
                "FALSE-REJ"
            }
        } else {
            match d.meets_floor() {
                Some(true) => "ok",
                Some(false) => "BELOW",
                None => "-",
            }
        };
        println!(
            "{:<16} {:<6} {:>8} {:>8} {:>9} {:>12.6} {:>14} {:>8}",
            d.behavior,
            d.mode.to_string(),
            d.lambda1,
            d.trials,
            d.detected,
            d.rate(),
            floor,
            verdict
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        let s = parse_shape("16x16x3x8x64").unwrap();
        assert_eq!((s.m, s.n, s.k, s.c_in, s.c_out), (16, 16, 3, 8, 64));
        assert!(parse_shape("16x16x3x8").is_err());
        assert!(parse_shape("16x16xZx8x64").is_err());
        assert!(parse_shape("2x2x3x1x1").is_err()); // k > min(m, n)
    }

    #[test]
    fn value_list_parsing() {
        assert_eq!(parse_values("1, 2,4").unwrap(), vec![1, 2, 4]);
        assert!(parse_values("1,x").is_err());
    }

    #[test]
    fn cli_parses_the_documented_subcommands() {
        Cli::try_parse_from([
            "convoy", "bench", "sweep", "--axis", "cout", "--values", "8,16", "--mode", "float",
        ])
        .unwrap();
        Cli::try_parse_from([
            "convoy", "detect", "--behavior", "tamper-one", "--trials", "100",
        ])
        .unwrap();
        Cli::try_parse_from(["convoy", "ratio", "--shape", "8x8x3x64x64"]).unwrap();
        Cli::try_parse_from([
            "convoy", "serve", "--listen", "127.0.0.1:0", "--shape", "6x6x3x2x4", "--behavior",
            "lazy-zero",
        ])
        .unwrap();
        Cli::try_parse_from([
            "convoy", "bench", "models", "--preset", "resnet50", "--chain", "--csv", "/tmp/x.csv",
        ])
        .unwrap();
    }
}
