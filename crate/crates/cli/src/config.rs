//! Flat `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must appear in
//! [`SCHEMA`]; anything else is rejected with the offending key named.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stap_core::harness::{BenchConfig, ExperimentConfig};
use stap_core::numerics::gradcheck::GradCheckConfig;
use stap_core::synth::spaced_bases;
use stap_core::temporal::DeltaMode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path} could not be read: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown config key {key:?} (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("bad value {value:?} for config key {key:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line} is not key=value: {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config key {key:?} given twice")]
    Duplicate { key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub exp: ExperimentConfig,
    /// Topic bases are spread evenly over `[0, topic_spread]` unless
    /// `topic_base` is given.
    pub topic_spread: f64,
    pub topic_base: Option<Vec<f64>>,
    pub bench: BenchConfig,
    pub grid_partitions: Vec<usize>,
    pub grid_clusters: Vec<usize>,
    /// Training fractions swept by `ablate`; empty skips the sweep.
    pub robustness_fractions: Vec<f64>,
    pub gradcheck: GradCheckConfig,
    pub gradcheck_model_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            exp: ExperimentConfig::default(),
            topic_spread: 3.0,
            topic_base: None,
            bench: BenchConfig::default(),
            grid_partitions: vec![3, 6, 9],
            grid_clusters: vec![2, 4, 8],
            robustness_fractions: Vec::new(),
            gradcheck: GradCheckConfig::default(),
            gradcheck_model_tol: 1e-3,
        }
    }
}

trait Value: Sized {
    fn show(&self) -> String;
    fn parse_value(s: &str) -> Result<Self, String>;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
        }
    )*};
}

scalar_value!(usize, u64, bool);

impl Value for f64 {
    fn show(&self) -> String {
        // shortest representation that round-trips
        format!("{self:?}")
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        let v = f64::from_str(s).map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }
}

impl Value for DeltaMode {
    fn show(&self) -> String {
        match self {
            DeltaMode::Score => "score".into(),
            DeltaMode::Anchor => "anchor".into(),
        }
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: stap_core::StapError| e.to_string())
    }
}

/// Comma lists; `none` is the empty list.
impl<T: Value> Value for Vec<T> {
    fn show(&self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
}

impl Value for Option<Vec<f64>> {
    fn show(&self) -> String {
        self.as_ref()
            .map(Value::show)
            .unwrap_or_else(|| "auto".into())
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            Vec::<f64>::parse_value(s).map(Some)
        }
    }
}

pub struct Field {
    pub key: &'static str,
    pub doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

macro_rules! field {
    ($key:literal, $doc:literal, $($path:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| Value::show(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = Value::parse_value(v)?;
                Ok(())
            },
        }
    };
}

/// Every accepted key, in echo order.
pub static SCHEMA: &[Field] = &[
    field!("seed", "run seed; --seed overrides", seed),
    // synthetic corpus
    field!("samples", "corpus size N", exp.synth.samples),
    field!("frames", "frames per item T", exp.synth.frames),
    field!("d_v", "frame feature width", exp.synth.d_v),
    field!("d_t", "text token width", exp.synth.d_t),
    field!("d_u", "metadata width", exp.synth.d_u),
    field!("topics", "topic count G", exp.synth.topics),
    field!(
        "highlights",
        "highlight frames per item H",
        exp.synth.highlights
    ),
    field!(
        "highlight_magnitude",
        "highlight jump in background steps",
        exp.synth.highlight_magnitude
    ),
    field!(
        "background_step",
        "RMS background step",
        exp.synth.background_step
    ),
    field!(
        "topic_spread",
        "topic bases spread evenly over [0, spread]",
        topic_spread
    ),
    field!(
        "topic_base",
        "explicit topic bases (comma list) or auto",
        topic_base
    ),
    field!("c1", "label weight of highlight energy", exp.synth.c1),
    field!("c2", "label weight of creator strength", exp.synth.c2),
    field!("noise", "label noise sd", exp.synth.noise),
    field!("text_tokens", "text tokens per item", exp.synth.text_tokens),
    field!("text_noise", "text token noise sd", exp.synth.text_noise),
    // temporal
    field!(
        "score_hidden",
        "frame scorer hidden width",
        exp.model.temporal.score_hidden
    ),
    field!("d_h", "SSM state width", exp.model.temporal.ssm.d_h),
    field!(
        "delta_mode",
        "step-size rule: score or anchor",
        exp.model.temporal.ssm.mode
    ),
    field!("delta_base", "base step", exp.model.temporal.ssm.delta_base),
    field!(
        "delta_alpha",
        "step modulation factor",
        exp.model.temporal.ssm.alpha
    ),
    field!(
        "delta_rho",
        "score term of the anchor rule",
        exp.model.temporal.ssm.rho
    ),
    field!(
        "delta_min",
        "step lower clamp",
        exp.model.temporal.ssm.delta_min
    ),
    field!(
        "delta_max",
        "step upper clamp",
        exp.model.temporal.ssm.delta_max
    ),
    field!("d_a", "attention width", exp.model.temporal.attn.d_a),
    field!(
        "window_base",
        "base attention half-window",
        exp.model.temporal.attn.window_base
    ),
    field!(
        "window_beta",
        "half-window growth per unit frame norm",
        exp.model.temporal.attn.window_beta
    ),
    field!(
        "use_frame_scoring",
        "learned frame scores",
        exp.model.temporal.use_frame_scoring
    ),
    field!("use_ssm", "SSM pathway", exp.model.temporal.use_ssm),
    field!(
        "use_sparse_attn",
        "sparse attention pathway",
        exp.model.temporal.use_sparse_attn
    ),
    // memory and predictor
    field!("d_m", "memory width", exp.model.d_m),
    field!("width", "cross-attention and head width", exp.model.width),
    field!("head_hidden", "head hidden width", exp.model.head_hidden),
    field!(
        "cross_layers",
        "cross-attention layers",
        exp.model.cross_layers
    ),
    field!(
        "partitions",
        "popularity partitions P",
        exp.model.partitions
    ),
    field!("clusters", "clusters per partition C", exp.model.clusters),
    field!("top_k", "routed slots K", exp.model.top_k),
    field!(
        "renormalize_top_k",
        "renormalize top-K gates",
        exp.model.renormalize_top_k
    ),
    field!(
        "use_memory",
        "retrieval from the memory bank",
        exp.model.use_memory
    ),
    field!(
        "tau_init",
        "initial routing temperature",
        exp.model.bank.tau
    ),
    field!("tau_min", "temperature lower clamp", exp.model.bank.tau_min),
    field!("tau_max", "temperature upper clamp", exp.model.bank.tau_max),
    field!(
        "kmeans_iters",
        "k-means iteration cap",
        exp.model.bank.kmeans.max_iters
    ),
    field!(
        "kmeans_tol",
        "k-means convergence tolerance",
        exp.model.bank.kmeans.tol
    ),
    // objective
    field!("huber_delta", "Huber threshold", exp.loss.huber_delta),
    field!(
        "lambda_pref",
        "preference loss weight",
        exp.loss.lambda_pref
    ),
    field!("lambda_bal", "balance loss weight", exp.loss.lambda_bal),
    field!(
        "gamma_lb",
        "partition-marginal KL weight",
        exp.loss.balance.gamma_lb
    ),
    field!(
        "beta_lb",
        "cluster-marginal KL weight",
        exp.loss.balance.beta_lb
    ),
    field!(
        "zipf_exponent",
        "partition prior exponent",
        exp.loss.balance.zipf_exponent
    ),
    field!("dppo_gamma", "preference sharpness", exp.loss.dppo_gamma),
    field!(
        "pair_margin",
        "pair margin in label sd",
        exp.loss.pair_margin
    ),
    // optimization
    field!(
        "learning_rate",
        "SGD learning rate",
        exp.train.learning_rate
    ),
    field!("weight_decay", "SGD weight decay", exp.train.weight_decay),
    field!("batch_size", "mini-batch size", exp.train.batch_size),
    field!("epochs", "training epochs", exp.train.epochs),
    field!("ema_eta", "slot EMA rate", exp.train.ema_eta),
    field!("tau_lr", "temperature step size", exp.train.tau_lr),
    field!(
        "check_dead_parameters",
        "fail on gradient-free parameters at startup",
        exp.train.check_dead_parameters
    ),
    // benchmarks
    field!("bench_trials", "timed trials per size", bench.trials),
    field!(
        "bench_min_trial_secs",
        "minimum duration of one trial",
        bench.min_trial_secs
    ),
    field!("bench_d", "feature width of benchmark inputs", bench.d),
    field!(
        "bench_window",
        "fixed half-window for sparse attention",
        bench.window
    ),
    field!(
        "bench_partitions",
        "bank partitions for routing benchmarks",
        bench.partitions
    ),
    field!(
        "bench_clusters",
        "bank clusters for routing benchmarks",
        bench.clusters
    ),
    field!(
        "bench_top_k",
        "routed slots for routing benchmarks",
        bench.top_k
    ),
    field!("bench_queries", "queries per routing trial", bench.queries),
    // grid search
    field!("grid_partitions", "P values (comma list)", grid_partitions),
    field!("grid_clusters", "C values (comma list)", grid_clusters),
    field!(
        "robustness_fractions",
        "training fractions swept by ablate (comma list or none)",
        robustness_fractions
    ),
    // gradient checks
    field!("gradcheck_step", "finite-difference step", gradcheck.step),
    field!(
        "gradcheck_tol",
        "relative tolerance for kernels and blocks",
        gradcheck.tol
    ),
    field!(
        "gradcheck_model_tol",
        "relative tolerance for the full model",
        gradcheck_model_tol
    ),
    field!(
        "gradcheck_probes",
        "coordinates probed per check",
        gradcheck.probes
    ),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let field =
                SCHEMA
                    .iter()
                    .find(|f| f.key == key)
                    .ok_or_else(|| ConfigError::UnknownKey {
                        key: key.to_string(),
                        line: i + 1,
                    })?;
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { key: key.into() });
            }
            seen.push(key);
            (field.set)(&mut cfg, value).map_err(|reason| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                reason,
            })?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Missing {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Propagates shared widths and seeds, then validates.
    fn finish(&mut self) -> Result<(), ConfigError> {
        let e = &mut self.exp;
        e.model.temporal.d_v = e.synth.d_v;
        e.model.d_t = e.synth.d_t;
        e.model.d_u = e.synth.d_u;
        e.synth.topic_base = match &self.topic_base {
            Some(b) => b.clone(),
            None => spaced_bases(e.synth.topics, self.topic_spread),
        };
        self.set_seed(self.seed);
        let invalid = |e: stap_core::StapError| ConfigError::Invalid(e.to_string());
        self.exp.synth.validate().map_err(invalid)?;
        self.exp.model.validate().map_err(invalid)?;
        self.exp.train.validate().map_err(invalid)?;
        if self.grid_partitions.is_empty() || self.grid_clusters.is_empty() {
            return Err(ConfigError::Invalid("grid lists must be non-empty".into()));
        }
        if self
            .robustness_fractions
            .iter()
            .any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(ConfigError::Invalid(
                "robustness fractions must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.exp.synth.seed = seed;
        self.exp.train.seed = seed;
        self.bench.seed = seed;
        self.gradcheck.seed = seed;
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for f in SCHEMA {
            let _ = writeln!(out, "{}={}", f.key, (f.get)(self));
        }
        out
    }
}

/// Schema listing for `--help`.
pub fn schema_help() -> String {
    let mut out = String::from("Config keys (flat key=value, # comments):\n");
    let defaults = RunConfig::default();
    for f in SCHEMA {
        let _ = writeln!(
            out,
            "  {:<24} {} [default {}]",
            f.key,
            f.doc,
            (f.get)(&defaults)
        );
    }
    out
}
