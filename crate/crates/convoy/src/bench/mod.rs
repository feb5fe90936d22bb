//! Experiment harness: per-phase timing sweeps, operation-count accounting,
//! the client/server cost ratio, and the detection-rate experiment.
//!
//! Timings are medians over repeated sessions with one discarded warm-up,
//! measured on a monotonic clock. Absolute numbers are machine-bound; the
//! reproducible quantities are the operation counts, their closed forms, and
//! same-machine relative comparisons.

pub mod presets;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::cost::{tally, OpCounts};
use crate::keymask::{ParamError, SecurityParams};
use crate::net::{spawn_server, Client, ServerConfig, SessionError, SessionStats};
use crate::server::ServerBehavior;
use crate::tensor::{
    direct_conv, unflatten_kernels, ArithMode, ConvShape, InputTensor, KernelSet, Matrix,
    OutputTensor, Scalar, TensorError,
};

pub use presets::{
    channel_sweep, default_cin_sweep, default_cout_sweep, preset, LayerShape, SweepAxis,
    PRESET_NAMES,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad configuration: {0}")]
    Config(String),
}

/// Plan for a timing or detection run.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub shapes: Vec<LayerShape>,
    /// Timed repetitions per layer, after one discarded warm-up.
    pub repetitions: usize,
    pub lambda1: u32,
    pub lambda2: u32,
    pub seed: u64,
    /// Remote server address; unset means an in-process loopback server per
    /// layer.
    pub endpoint: Option<String>,
    pub csv_path: Option<PathBuf>,
    /// Magnitude bound for synthetic inputs and weights.
    pub input_bound: u64,
    /// Concurrent sessions; anything above 1 marks timings as contended.
    pub parallel: usize,
    /// Feed each layer's activated output into the next compatible layer.
    pub chain: bool,
}

impl BenchConfig {
    pub fn new(shapes: Vec<LayerShape>) -> Self {
        BenchConfig {
            shapes,
            repetitions: 3,
            lambda1: 16,
            lambda2: 4,
            seed: 0xC0_FFEE,
            endpoint: None,
            csv_path: None,
            input_bound: SecurityParams::DEFAULT_INPUT_BOUND,
            parallel: 1,
            chain: false,
        }
    }
}

/// Closed-form per-phase operation counts for one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseCosts {
    pub blind: OpCounts,
    pub verify: OpCounts,
    pub recover: OpCounts,
    pub server: OpCounts,
}

/// The four cost-table entries for a session whose key selected `index_len`
/// masks: blinding multiplies `c_in*c_out*k^2` (the tag) and adds
/// `|I|*c_in*k^2*(m-k+1)(n-k+1)`; verification multiplies
/// `(c_out + c_in*k^2)*(m-k+1)(n-k+1)`; recovery adds
/// `|I|*c_out*(m-k+1)(n-k+1)`; the server multiplies
/// `c_in*c_out*k^2*(m-k+1)(n-k+1)`.
pub fn count_costs(shape: &ConvShape, index_len: usize) -> PhaseCosts {
    let windows = shape.window_count() as u64;
    let patch = shape.patch_len() as u64;
    let c_out = shape.c_out as u64;
    let i = index_len as u64;
    PhaseCosts {
        blind: OpCounts {
            sm: c_out * patch,
            sa: i * patch * windows,
        },
        verify: OpCounts {
            sm: (c_out + patch) * windows,
            sa: 0,
        },
        recover: OpCounts {
            sm: 0,
            sa: i * c_out * windows,
        },
        server: OpCounts {
            sm: c_out * patch * windows,
            sa: 0,
        },
    }
}

/// The asymptotic client/server multiply ratio
/// `(c_out + c_in*k^2) / (c_in*c_out*k^2)`, which tends to zero as channels
/// and kernels grow.
pub fn theoretical_ratio(shape: &ConvShape) -> f64 {
    let patch = shape.patch_len() as f64;
    let c_out = shape.c_out as f64;
    (c_out + patch) / (c_out * patch)
}

/// Client-side activation between chained layers: elementwise `max(0, x)`.
pub fn relu_local<T: Scalar>(t: &OutputTensor<T>) -> Vec<Matrix<T>> {
    t.channels()
        .iter()
        .map(|ch| {
            let data = ch
                .data()
                .iter()
                .map(|&v| if v < T::zero() { T::zero() } else { v })
                .collect();
            Matrix::new(ch.rows(), ch.cols(), data).expect("same dimensions")
        })
        .collect()
}

/// Median of a sample list; 0 for an empty list.
pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "series must have equal length");
    pearson(&ranks(xs), &ranks(ys))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    cov / (var_a * var_b).sqrt()
}

// ---------------------------------------------------------------------------
// Phase benchmark
// ---------------------------------------------------------------------------

/// Per-layer benchmark result: median phase times and the operation counts
/// of one representative session.
#[derive(Debug, Clone)]
pub struct PhaseTimings {
    pub label: String,
    pub shape: ConvShape,
    pub index_len: usize,
    pub blind_ms: f64,
    pub verify_ms: f64,
    pub recover_ms: f64,
    pub roundtrip_ms: f64,
    /// Measured on the server; absent when benchmarking a remote endpoint.
    pub server_compute_ms: Option<f64>,
    /// Client-side plain convolution of the same task.
    pub original_compute_ms: f64,
    pub total_ms: f64,
    pub blind_counts: OpCounts,
    pub verify_counts: OpCounts,
    pub recover_counts: OpCounts,
    pub server_counts: Option<OpCounts>,
    pub original_counts: OpCounts,
    pub contended: bool,
}

impl PhaseTimings {
    /// Blind + verify + recover.
    pub fn client_phase_ms(&self) -> f64 {
        self.blind_ms + self.verify_ms + self.recover_ms
    }

    /// Client phases plus the server round-trip, the full scheme cost.
    pub fn scheme_ms(&self) -> f64 {
        self.client_phase_ms() + self.roundtrip_ms
    }

    pub fn speedup(&self) -> f64 {
        self.original_compute_ms / self.scheme_ms()
    }

    /// Measured verify-phase to server multiply ratio. The blind phase's
    /// one-time tag product is excluded, matching the asymptotic ratio.
    pub fn measured_ratio(&self) -> Option<f64> {
        self.server_counts
            .map(|s| self.verify_counts.sm as f64 / s.sm as f64)
    }
}

pub const PHASE_CSV_HEADER: &str = "m,n,k,c_in,c_out,i_len,phase,ms,sm,sa,contended";

/// Serializes one layer's result as `(shape, phase)` CSV rows.
pub fn phase_csv_rows(t: &PhaseTimings) -> Vec<String> {
    let s = t.shape;
    let prefix = format!("{},{},{},{},{},{}", s.m, s.n, s.k, s.c_in, s.c_out, t.index_len);
    let contended = if t.contended { 1 } else { 0 };
    let row = |phase: &str, ms: Option<f64>, counts: OpCounts| {
        let ms = ms.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!("{prefix},{phase},{ms},{},{},{contended}", counts.sm, counts.sa)
    };
    let client_total = t.blind_counts + t.verify_counts + t.recover_counts;
    vec![
        row("blind", Some(t.blind_ms), t.blind_counts),
        row("verify", Some(t.verify_ms), t.verify_counts),
        row("recover", Some(t.recover_ms), t.recover_counts),
        row("roundtrip", Some(t.roundtrip_ms), OpCounts::ZERO),
        row(
            "server_compute",
            t.server_compute_ms,
            t.server_counts.unwrap_or(OpCounts::ZERO),
        ),
        row("original_compute", Some(t.original_compute_ms), t.original_counts),
        row("total", Some(t.total_ms), client_total),
    ]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn tensor_max_abs<T: Scalar>(x: &InputTensor<T>) -> f64 {
    x.channels().iter().fold(0.0, |acc, ch| acc.max(ch.max_abs()))
}

/// Runs the per-phase timing benchmark over every configured layer.
///
/// Each layer gets a warm-up session plus `repetitions` timed sessions with
/// fresh keys, then `repetitions` timed plain convolutions of the same task.
/// Rows are appended to the CSV as they complete, so partial results survive
/// an abort.
pub fn run_phase_bench<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<PhaseTimings>, BenchError> {
    if cfg.repetitions < 1 {
        return Err(BenchError::Config("repetitions must be >= 1".into()));
    }
    if cfg.chain && cfg.parallel > 1 {
        return Err(BenchError::Config("chaining requires sequential sessions".into()));
    }
    let mut csv = match &cfg.csv_path {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "{PHASE_CSV_HEADER}")?;
            Some(w)
        }
        None => None,
    };

    let mut results = Vec::with_capacity(cfg.shapes.len());
    let mut carried: Option<Vec<Matrix<T>>> = None;

    for (layer_idx, layer) in cfg.shapes.iter().enumerate() {
        let shape = layer.shape;
        let salt = layer_idx as u64;

        let x = match carried.take() {
            Some(channels)
                if channels.len() == shape.c_in
                    && channels[0].rows() == shape.m
                    && channels[0].cols() == shape.n =>
            {
                InputTensor::new(shape, channels)?
            }
            _ => {
                let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, salt * 4 + 1));
                InputTensor::random(shape, cfg.input_bound, &mut rng)
            }
        };
        // Chained activations can exceed the configured bound; widen the
        // overflow budget to the actual data magnitude.
        let bound = cfg.input_bound.max(tensor_max_abs(&x).ceil() as u64);
        let params =
            SecurityParams::with_input_bound::<T>(cfg.lambda1, cfg.lambda2, &shape, bound)?;

        let local = match &cfg.endpoint {
            Some(_) => None,
            None => {
                let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, salt * 4 + 2));
                let kernels = KernelSet::<T>::random(shape, cfg.input_bound, &mut rng);
                let handle = spawn_server(
                    "127.0.0.1:0",
                    kernels.clone(),
                    ServerConfig {
                        behavior: ServerBehavior::Honest,
                        lambda1: cfg.lambda1,
                        seed: Some(mix_seed(cfg.seed, salt * 4 + 3)),
                    },
                )?;
                Some((handle, kernels))
            }
        };
        let endpoint = match (&cfg.endpoint, &local) {
            (Some(ep), _) => ep.clone(),
            (None, Some((handle, _))) => handle.endpoint(),
            (None, None) => unreachable!(),
        };

        let (rep_stats, last_output, model_wbar) =
            run_layer_sessions::<T>(cfg, &endpoint, params, &x, salt, local.as_ref())?;

        // Client-side baseline on the same task.
        let kernels = match &local {
            Some((_, k)) => k.clone(),
            None => unflatten_kernels(&model_wbar, &shape)?,
        };
        let (warmup_out, original_counts) = tally(|| direct_conv(&x, &kernels));
        let warmup_out = warmup_out?;
        let mut original_times = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let start = Instant::now();
            let out = direct_conv(&x, &kernels)?;
            original_times.push(start.elapsed().as_secs_f64() * 1e3);
            debug_assert_eq!(out.shape(), warmup_out.shape());
        }

        let (server_compute_ms, server_counts) = match &local {
            Some((handle, _)) => {
                let records = handle.take_compute_records();
                let times: Vec<f64> = records.iter().map(|r| r.ms).collect();
                (
                    Some(median(&times)),
                    records.last().map(|r| r.counts),
                )
            }
            None => (None, None),
        };

        let pick = |f: fn(&SessionStats) -> f64| {
            let values: Vec<f64> = rep_stats.iter().map(f).collect();
            median(&values)
        };
        let last = rep_stats.last().expect("at least one repetition");
        let timings = PhaseTimings {
            label: layer.label.clone(),
            shape,
            index_len: last.index_len,
            blind_ms: pick(|s| s.blind_ms),
            verify_ms: pick(|s| s.verify_ms),
            recover_ms: pick(|s| s.recover_ms),
            roundtrip_ms: pick(|s| s.roundtrip_ms),
            server_compute_ms,
            original_compute_ms: median(&original_times),
            total_ms: pick(|s| s.total_ms),
            blind_counts: last.blind_counts,
            verify_counts: last.verify_counts,
            recover_counts: last.recover_counts,
            server_counts,
            original_counts,
            contended: cfg.parallel > 1,
        };

        if let Some(w) = csv.as_mut() {
            for row in phase_csv_rows(&timings) {
                writeln!(w, "{row}")?;
            }
            w.flush()?;
        }
        results.push(timings);

        if cfg.chain {
            carried = Some(relu_local(&last_output));
        }
        if let Some((handle, _)) = local {
            handle.shutdown();
        }
    }
    Ok(results)
}

/// Runs warm-up plus `repetitions` sessions against `endpoint`, sequentially
/// or across `cfg.parallel` workers, and returns the per-session stats, the
/// last output, and the fetched kernel matrix.
fn run_layer_sessions<T: Scalar>(
    cfg: &BenchConfig,
    endpoint: &str,
    params: SecurityParams,
    x: &InputTensor<T>,
    salt: u64,
    local: Option<&(crate::net::ServerHandle, KernelSet<T>)>,
) -> Result<(Vec<SessionStats>, OutputTensor<T>, Matrix<T>), BenchError> {
    if cfg.parallel <= 1 {
        let mut client =
            Client::<T>::with_seed(endpoint, params, mix_seed(cfg.seed, salt * 4 + 4))?;
        let (warm_out, _) = client.infer(x)?;
        if let Some((handle, _)) = local {
            handle.take_compute_records(); // discard the warm-up record
        }
        let mut stats = Vec::with_capacity(cfg.repetitions);
        let mut last_output = warm_out;
        for _ in 0..cfg.repetitions {
            let (out, s) = client.infer(x)?;
            stats.push(s);
            last_output = out;
        }
        let wbar = client.model().expect("model fetched").wbar.clone();
        return Ok((stats, last_output, wbar));
    }

    let workers = cfg.parallel.min(cfg.repetitions.max(1));
    let results: Vec<Result<(Vec<SessionStats>, OutputTensor<T>, Matrix<T>), SessionError>> =
        thread::scope(|scope| {
            let mut joins = Vec::with_capacity(workers);
            for w in 0..workers {
                let share = cfg.repetitions / workers
                    + usize::from(w < cfg.repetitions % workers);
                let seed = mix_seed(cfg.seed, salt * 131 + w as u64);
                joins.push(scope.spawn(move || {
                    let mut client = Client::<T>::with_seed(endpoint, params, seed)?;
                    let (mut last, _) = client.infer(x)?; // warm-up
                    let mut stats = Vec::with_capacity(share);
                    for _ in 0..share {
                        let (out, s) = client.infer(x)?;
                        stats.push(s);
                        last = out;
                    }
                    let wbar = client.model().expect("model fetched").wbar.clone();
                    Ok((stats, last, wbar))
                }));
            }
            joins.into_iter().map(|j| j.join().expect("worker panicked")).collect()
        });

    let mut all_stats = Vec::new();
    let mut last_output = None;
    let mut wbar = None;
    for r in results {
        let (stats, out, w) = r?;
        all_stats.extend(stats);
        last_output = Some(out);
        wbar = Some(w);
    }
    Ok((
        all_stats,
        last_output.expect("at least one worker"),
        wbar.expect("at least one worker"),
    ))
}

// ---------------------------------------------------------------------------
// Detection experiment
// ---------------------------------------------------------------------------

/// Outcome of a detection run against one server behavior.
#[derive(Debug, Clone)]
pub struct DetectionStats {
    pub behavior: String,
    pub mode: ArithMode,
    pub lambda1: u32,
    pub trials: usize,
    /// Sessions ending in a verification failure.
    pub detected: usize,
}

impl DetectionStats {
    pub fn rate(&self) -> f64 {
        self.detected as f64 / self.trials as f64
    }

    /// Whether this is the honest control arm, where any detection at all is
    /// a false rejection.
    pub fn is_control_arm(&self) -> bool {
        self.behavior == "honest"
    }

    /// `1 - 1/|Z|` with `|Z| = 2 (2^lambda1 - 1)`; only meaningful in
    /// integer mode, where the counting argument applies.
    pub fn theoretical_floor(&self) -> Option<f64> {
        match self.mode {
            ArithMode::Int => {
                let z = 2.0 * ((1u128 << self.lambda1) - 1) as f64;
                Some(1.0 - 1.0 / z)
            }
            ArithMode::Float => None,
        }
    }

    /// Standard deviation of the empirical rate under the floor probability.
    pub fn binomial_sigma(&self) -> Option<f64> {
        self.theoretical_floor()
            .map(|p| (p * (1.0 - p) / self.trials as f64).sqrt())
    }

    /// Whether the empirical rate clears `floor - 3 sigma`.
    pub fn meets_floor(&self) -> Option<bool> {
        match (self.theoretical_floor(), self.binomial_sigma()) {
            (Some(floor), Some(sigma)) => Some(self.rate() >= floor - 3.0 * sigma),
            _ => None,
        }
    }
}

pub const DETECTION_CSV_HEADER: &str =
    "behavior,mode,lambda1,trials,detected,rate,theoretical_floor";

pub fn detection_csv_row(d: &DetectionStats) -> String {
    let floor = d
        .theoretical_floor()
        .map(|f| format!("{f:.10}"))
        .unwrap_or_default();
    format!(
        "{},{},{},{},{},{:.6},{}",
        d.behavior,
        d.mode,
        d.lambda1,
        d.trials,
        d.detected,
        d.rate(),
        floor
    )
}

pub fn default_detect_shape() -> ConvShape {
    ConvShape::new(6, 6, 3, 2, 4).expect("static shape is valid")
}

/// Runs `trials` sessions against a server with the given behavior and
/// counts verification failures. Fresh keys per session; the honest control
/// arm must report zero.
pub fn run_detection_experiment<T: Scalar>(
    cfg: &BenchConfig,
    behavior: ServerBehavior,
    trials: usize,
) -> Result<DetectionStats, BenchError> {
    if trials == 0 {
        return Err(BenchError::Config("trials must be >= 1".into()));
    }
    let shape = cfg
        .shapes
        .first()
        .map(|l| l.shape)
        .unwrap_or_else(default_detect_shape);
    let params =
        SecurityParams::with_input_bound::<T>(cfg.lambda1, cfg.lambda2, &shape, cfg.input_bound)?;
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xDE7EC7));
    let kernels = KernelSet::<T>::random(shape, cfg.input_bound, &mut rng);
    let handle = spawn_server(
        "127.0.0.1:0",
        kernels,
        ServerConfig {
            behavior,
            lambda1: cfg.lambda1,
            seed: Some(mix_seed(cfg.seed, 0x5E47ED)),
        },
    )?;
    let endpoint = handle.endpoint();

    let workers = cfg.parallel.max(1).min(trials);
    let outcomes: Vec<Result<usize, SessionError>> = thread::scope(|scope| {
        let mut joins = Vec::with_capacity(workers);
        for w in 0..workers {
            let share = trials / workers + usize::from(w < trials % workers);
            let endpoint = endpoint.clone();
            let seed = mix_seed(cfg.seed, 0xA11CE + w as u64);
            joins.push(scope.spawn(move || {
                let mut client = Client::<T>::with_seed(&endpoint, params, seed)?;
                let mut input_rng = ChaCha12Rng::seed_from_u64(seed ^ 0xF00D);
                let x = InputTensor::<T>::random(shape, params.input_bound(), &mut input_rng);
                let mut detected = 0usize;
                for _ in 0..share {
                    match client.infer(&x) {
                        Ok(_) => {}
                        Err(SessionError::VerificationFailed(_)) => detected += 1,
                        Err(e) => return Err(e),
                    }
                }
                Ok(detected)
            }));
        }
        joins.into_iter().map(|j| j.join().expect("worker panicked")).collect()
    });
    handle.shutdown();

    let mut detected = 0;
    for outcome in outcomes {
        detected += outcome?;
    }
    Ok(DetectionStats {
        behavior: behavior.to_string(),
        mode: T::MODE,
        lambda1: cfg.lambda1,
        trials,
        detected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn count_costs_matches_the_worked_example() {
        // m = n = 3, k = 2, one channel each way, one selected mask.
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let costs = count_costs(&shape, 1);
        assert_eq!(costs.blind.sa, 16);
        assert_eq!(costs.blind.sm, 4);
        assert_eq!(costs.verify.sm, 20);
        assert_eq!(costs.verify.sa, 0);
        assert_eq!(costs.recover.sa, 4);
        assert_eq!(costs.recover.sm, 0);
        assert_eq!(costs.server.sm, 16);
    }

    #[test]
    fn ratio_known_values() {
        let unit = ConvShape::new(1, 1, 1, 1, 1).unwrap();
        assert_eq!(theoretical_ratio(&unit), 2.0);

        let wide = ConvShape::new(8, 8, 3, 64, 64).unwrap();
        let expected = (64.0 + 576.0) / 36864.0;
        assert!((theoretical_ratio(&wide) - expected).abs() < 1e-15);
        assert!((theoretical_ratio(&wide) - 0.01736).abs() < 1e-5);
    }

    #[test]
    fn ratio_decreases_with_output_channels() {
        let mut prev = f64::INFINITY;
        for c_out in [1, 2, 4, 8, 16, 32, 64, 128] {
            let shape = ConvShape::new(8, 8, 3, 4, c_out).unwrap();
            let r = theoretical_ratio(&shape);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let neg = OutputTensor::new(
            shape,
            vec![Matrix::new(2, 2, vec![-1i64, -5, -3, -2]).unwrap()],
        )
        .unwrap();
        assert!(relu_local(&neg)[0].data().iter().all(|&v| v == 0));

        let pos = OutputTensor::new(
            shape,
            vec![Matrix::new(2, 2, vec![1i64, 5, 3, 2]).unwrap()],
        )
        .unwrap();
        assert_eq!(relu_local(&pos)[0].data(), &[1, 5, 3, 2]);

        let mixed = OutputTensor::new(
            shape,
            vec![Matrix::new(2, 2, vec![-7i64, 0, 9, -1]).unwrap()],
        )
        .unwrap();
        assert_eq!(relu_local(&mixed)[0].data(), &[0, 0, 9, 0]);
    }

    #[test]
    fn median_and_spearman_basics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);

        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.0, 5.0, 8.0, 9.0];
        let down = [9.0, 8.0, 5.0, 4.0, 2.0];
        assert!((spearman(&xs, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &down) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_tolerates_one_adjacent_swap() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let swapped = [2.0, 1.0, 3.0, 4.0, 5.0];
        let rho = spearman(&xs, &swapped);
        assert!(rho >= 0.9, "rho = {rho}");
    }

    #[test]
    fn detection_floor_formula() {
        let stats = DetectionStats {
            behavior: "tamper-one".into(),
            mode: ArithMode::Int,
            lambda1: 16,
            trials: 10_000,
            detected: 10_000,
        };
        let floor = stats.theoretical_floor().unwrap();
        let z = 2.0 * (65536.0 - 1.0);
        assert!((floor - (1.0 - 1.0 / z)).abs() < 1e-15);
        assert_eq!(stats.meets_floor(), Some(true));

        let float_stats = DetectionStats {
            mode: ArithMode::Float,
            ..stats
        };
        assert_eq!(float_stats.theoretical_floor(), None);
    }

    #[test]
    fn csv_rows_have_the_documented_width() {
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let t = PhaseTimings {
            label: "x".into(),
            shape,
            index_len: 1,
            blind_ms: 0.1,
            verify_ms: 0.2,
            recover_ms: 0.3,
            roundtrip_ms: 0.4,
            server_compute_ms: Some(0.5),
            original_compute_ms: 0.6,
            total_ms: 1.0,
            blind_counts: OpCounts { sm: 4, sa: 16 },
            verify_counts: OpCounts { sm: 20, sa: 0 },
            recover_counts: OpCounts { sm: 0, sa: 4 },
            server_counts: Some(OpCounts { sm: 16, sa: 0 }),
            original_counts: OpCounts { sm: 16, sa: 0 },
            contended: false,
        };
        let columns = PHASE_CSV_HEADER.split(',').count();
        for row in phase_csv_rows(&t) {
            assert_eq!(row.split(',').count(), columns, "row {row}");
        }
    }
}
