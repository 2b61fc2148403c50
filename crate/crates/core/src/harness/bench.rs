//! Wall-time scaling of the sequence and retrieval kernels.
//!
//! Each size is timed on warm inputs: one untimed call, then a calibration
//! call that picks how many repetitions fill a trial. Trials are interleaved
//! across sizes, one round per trial. The slope is an ordinary least-squares fit of log
//! median time against log size.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, StapError};
use crate::numerics::tensor::{dot, Tensor};
use crate::numerics::ParamStore;
use crate::spatial::bank::{init_bank, MemoryBank};
use crate::spatial::routing::{route, top_k_indices};
use crate::temporal::{
    dense_attention, score_frames, sparse_attention, ssm_scan, Direction, FrameScorer,
    FrameSequence, SparseAttention, SparseAttnConfig, SsmBlock, SsmConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchKernel {
    SsmScan,
    SparseAttention,
    DenseAttention,
    Route,
    FlatRetrieval,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 5] = [
        BenchKernel::SsmScan,
        BenchKernel::SparseAttention,
        BenchKernel::DenseAttention,
        BenchKernel::Route,
        BenchKernel::FlatRetrieval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::SsmScan => "ssm_scan",
            BenchKernel::SparseAttention => "sparse_attention",
            BenchKernel::DenseAttention => "dense_attention",
            BenchKernel::Route => "route",
            BenchKernel::FlatRetrieval => "flat_retrieval",
        }
    }

    /// Sizes are sequence lengths for the temporal kernels and stored-corpus
    /// sizes for the retrieval kernels.
    pub fn default_sizes(self) -> Vec<usize> {
        match self {
            BenchKernel::Route | BenchKernel::FlatRetrieval => {
                vec![1_000, 3_000, 10_000, 30_000, 100_000]
            }
            _ => vec![256, 512, 1024, 2048],
        }
    }
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKernel {
    type Err = StapError;

    fn from_str(s: &str) -> Result<Self> {
        BenchKernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| StapError::invalid(format!("unknown benchmark kernel {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub trials: usize,
    /// Target duration of one trial; repetitions are chosen to reach it.
    pub min_trial_secs: f64,
    pub d: usize,
    /// Fixed half-window of the sparse kernel.
    pub window: f64,
    pub partitions: usize,
    pub clusters: usize,
    pub top_k: usize,
    /// Queries routed per call of the retrieval kernels.
    pub queries: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            trials: 15,
            min_trial_secs: 0.05,
            d: 16,
            window: 4.0,
            partitions: 6,
            clusters: 4,
            top_k: 3,
            queries: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub kernel: BenchKernel,
    pub sizes: Vec<usize>,
    /// Median seconds per call.
    pub medians: Vec<f64>,
    pub reps: Vec<usize>,
    /// Trial standard deviation over the median, per size.
    pub spread: Vec<f64>,
    pub slope: f64,
    /// 95% confidence half-width of the slope.
    pub slope_half_width: f64,
    pub unstable: bool,
    pub retried: bool,
    /// SHA-256 of each size's output; independent of timing.
    pub checksums: Vec<String>,
    /// Values the retrieval kernels keep resident per size: slot count times
    /// width for routing, stored items times width for flat retrieval.
    pub stored_values: Vec<Option<usize>>,
}

impl ScalingReport {
    /// Largest over smallest median.
    pub fn max_min_ratio(&self) -> f64 {
        let max = self.medians.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.medians.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }
}

fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

type Workload = Box<dyn FnMut() -> Result<Vec<f64>>>;

fn random_seq(rng: &mut impl Rng, t: usize, d: usize) -> Result<FrameSequence> {
    FrameSequence::new(Tensor::uniform(&[t, d], 1.0, rng))
}

fn build_bank(n: usize, cfg: &BenchConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, MemoryBank)> {
    let embeddings = Tensor::uniform(&[n, cfg.d], 1.0, rng);
    let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let bank = init_bank(&embeddings, &labels, cfg.partitions, cfg.clusters, cfg.seed)?;
    Ok((embeddings, bank))
}

fn workload(kernel: BenchKernel, size: usize, cfg: &BenchConfig) -> Result<Workload> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (size as u64).wrapping_mul(0x9e37_79b9));
    let d = cfg.d;
    let mut store = ParamStore::new();
    Ok(match kernel {
        BenchKernel::SsmScan => {
            let scorer = FrameScorer::new(&mut store, "bench.score", d, d, &mut rng);
            let block = SsmBlock::new(&mut store, "bench.ssm", d, SsmConfig::default(), &mut rng)?;
            let seq = random_seq(&mut rng, size, d)?;
            let scores = score_frames(&seq, &scorer, &store)?;
            Box::new(move || {
                ssm_scan(&seq, &scores, &block, &store, Direction::Forward).map(Tensor::into_data)
            })
        }
        BenchKernel::SparseAttention | BenchKernel::DenseAttention => {
            let attn_cfg = SparseAttnConfig {
                d_a: d,
                window_base: cfg.window,
                window_beta: 0.0,
            };
            let block = SparseAttention::new(&mut store, "bench.attn", d, attn_cfg, &mut rng);
            let seq = random_seq(&mut rng, size, d)?;
            if kernel == BenchKernel::SparseAttention {
                Box::new(move || sparse_attention(&seq, &block, &store).map(Tensor::into_data))
            } else {
                Box::new(move || dense_attention(&seq, &block, &store).map(Tensor::into_data))
            }
        }
        BenchKernel::Route => {
            let (_, bank) = build_bank(size, cfg, &mut rng)?;
            let w_q = Tensor::uniform(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
            let queries = Tensor::uniform(&[cfg.queries, d], 1.0, &mut rng);
            let k = cfg.top_k;
            Box::new(move || {
                let mut out = Vec::with_capacity(queries.rows() * (d + 1));
                for i in 0..queries.rows() {
                    let r = route(queries.row(i), &bank, &w_q, k)?;
                    out.extend_from_slice(&r.z_aug);
                    out.push(r.c_pop);
                }
                Ok(out)
            })
        }
        BenchKernel::FlatRetrieval => {
            let stored = Tensor::uniform(&[size, d], 1.0, &mut rng);
            let queries = Tensor::uniform(&[cfg.queries, d], 1.0, &mut rng);
            let k = cfg.top_k;
            Box::new(move || {
                let mut out = Vec::with_capacity(queries.rows() * d);
                let mut scores = vec![0.0; stored.rows()];
                for i in 0..queries.rows() {
                    let q = queries.row(i);
                    for (s, j) in scores.iter_mut().zip(0..stored.rows()) {
                        *s = dot(q, stored.row(j));
                    }
                    let mut z = vec![0.0; d];
                    for j in top_k_indices(&scores, k) {
                        for (a, b) in z.iter_mut().zip(stored.row(j)) {
                            *a += b / k as f64;
                        }
                    }
                    out.extend(z);
                }
                Ok(out)
            })
        }
    })
}

fn calibrate(work: &mut Workload, cfg: &BenchConfig) -> Result<usize> {
    black_box(work()?);
    let start = Instant::now();
    black_box(work()?);
    let once = start.elapsed().as_secs_f64().max(1e-9);
    Ok(((cfg.min_trial_secs / once).ceil() as usize).max(1))
}

/// Median and relative spread of per-call times.
fn summarize(mut times: Vec<f64>) -> (f64, f64) {
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let sd =
        (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64).sqrt();
    (median, sd / median)
}

/// Runs `trials` rounds, each timing every size once, so a slow stretch of
/// wall time is shared across sizes instead of landing on one of them.
fn time_interleaved(
    works: &mut [Workload],
    reps: &[usize],
    trials: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut times = vec![Vec::with_capacity(trials); works.len()];
    for _ in 0..trials {
        for ((work, &n), out) in works.iter_mut().zip(reps).zip(&mut times) {
            let start = Instant::now();
            for _ in 0..n {
                black_box(work()?);
            }
            out.push(start.elapsed().as_secs_f64() / n as f64);
        }
    }
    Ok(times.into_iter().map(summarize).collect())
}

/// Least-squares slope and its 95% confidence half-width.
pub fn loglog_slope(sizes: &[usize], times: &[f64]) -> (f64, f64) {
    let x: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    let y: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let dof = n - 2.0;
    let se = (ssr / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::NAN);
    (slope, t * se)
}

pub fn bench_scaling(
    kernel: BenchKernel,
    sizes: &[usize],
    cfg: &BenchConfig,
) -> Result<ScalingReport> {
    if sizes.len() < 4 || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(StapError::invalid(
            "benchmark sizes must be positive, strictly increasing, with at least four points",
        ));
    }
    if cfg.trials < 5 {
        return Err(StapError::invalid(
            "at least five trials per size are required",
        ));
    }
    let mut report = ScalingReport {
        kernel,
        sizes: sizes.to_vec(),
        medians: Vec::new(),
        reps: Vec::new(),
        spread: Vec::new(),
        slope: f64::NAN,
        slope_half_width: f64::NAN,
        unstable: false,
        retried: false,
        checksums: Vec::new(),
        stored_values: Vec::new(),
    };
    let mut works = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut work = workload(kernel, size, cfg)?;
        report.checksums.push(checksum(&work()?));
        report.stored_values.push(match kernel {
            BenchKernel::Route => Some(cfg.partitions * cfg.clusters * cfg.d),
            BenchKernel::FlatRetrieval => Some(size * cfg.d),
            _ => None,
        });
        report.reps.push(calibrate(&mut work, cfg)?);
        works.push(work);
    }
    let mut timings = time_interleaved(&mut works, &report.reps, cfg.trials)?;
    if timings.iter().any(|t| t.1 > 0.5) {
        report.retried = true;
        timings = time_interleaved(&mut works, &report.reps, cfg.trials)?;
        report.unstable = timings.iter().any(|t| t.1 > 0.5);
    }
    (report.medians, report.spread) = timings.into_iter().unzip();
    let (slope, hw) = loglog_slope(sizes, &report.medians);
    report.slope = slope;
    report.slope_half_width = hw;
    Ok(report)
}

/// Deterministic part of a report: `kernel,size,stored_values,checksum`,
/// with `na` for kernels that keep no store.
pub fn write_checksums(
    reports: &[ScalingReport],
    seed: u64,
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "kernel,size,stored_values,checksum")?;
    for r in reports {
        for ((s, c), m) in r.sizes.iter().zip(&r.checksums).zip(&r.stored_values) {
            let m = m.map_or_else(|| "na".to_string(), |m| m.to_string());
            writeln!(w, "{},{s},{m},{c}", r.kernel)?;
        }
    }
    Ok(())
}

/// Timing part of a report: `kernel,size,reps,median_seconds,spread` rows
/// followed by `kernel,slope,half_width,unstable` summary rows.
pub fn write_timings(
    reports: &[ScalingReport],
    seed: u64,
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "kernel,size,reps,median_seconds,spread")?;
    for r in reports {
        for i in 0..r.sizes.len() {
            writeln!(
                w,
                "{},{},{},{:.6e},{:.4}",
                r.kernel, r.sizes[i], r.reps[i], r.medians[i], r.spread[i]
            )?;
        }
    }
    writeln!(w, "# summary")?;
    writeln!(w, "kernel,slope,half_width,unstable")?;
    for r in reports {
        writeln!(
            w,
            "{},{:.4},{:.4},{}",
            r.kernel, r.slope, r.slope_half_width, r.unstable
        )?;
    }
    Ok(())
}
