use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use stap_core::checks::{block_suite, end_to_end_check};
use stap_core::harness::bench::{write_checksums, write_timings};
use stap_core::harness::export::highlight_alignment;
use stap_core::harness::grid::write_grid_csv;
use stap_core::harness::robustness::write_robustness_csv;
use stap_core::harness::{
    bench_scaling, compute_metrics, export_diagnostics, grid_search, robustness_sweep,
    run_on_corpus, AblationResult, BenchKernel, MetricReport, ScalingReport, Variant,
};
use stap_core::numerics::gradcheck::{run_kernel_suite, GradCheckConfig};
use stap_core::predictor::{fit, load_checkpoint, save_checkpoint, StapModel};
use stap_core::synth::{generate_corpus, write_corpus, Corpus, SynthSample};
use stap_core::StapError;

use crate::config::RunConfig;
use crate::{Cli, Command, Outcome};

pub enum CommandError {
    Usage(String),
    Runtime(StapError),
}

impl From<StapError> for CommandError {
    fn from(e: StapError) -> Self {
        match e {
            StapError::InvalidArgument(m) | StapError::Config(m) => CommandError::Usage(m),
            other => CommandError::Runtime(other),
        }
    }
}

type CmdResult<T> = Result<T, CommandError>;

/// One acceptance-tagged check.
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            pass,
            detail,
        }
    }
}

/// Artifacts written so far, for the manifest.
struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> CmdResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| StapError::io(dir, e))?;
        Ok(Out {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> CmdResult<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| StapError::io(&path, e))?);
        body(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| StapError::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn record(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.files.extend(paths);
    }

    fn manifest(mut self, command: &str, cfg: &RunConfig) -> CmdResult<()> {
        self.files.sort();
        self.files.dedup();
        let mut text = format!(
            "# stap manifest\ncommand={command}\nseed={}\n\n[config]\n",
            cfg.seed
        );
        text.push_str(&cfg.echo());
        text.push_str("\n[artifacts]\n");
        for f in &self.files {
            let bytes = std::fs::read(f).map_err(|e| StapError::io(f, e))?;
            let rel = f.strip_prefix(&self.dir).unwrap_or(f);
            let _ = writeln!(
                text,
                "{}  {}",
                hex::encode(Sha256::digest(&bytes)),
                rel.display()
            );
        }
        let path = self.dir.join("manifest.txt");
        std::fs::write(&path, text).map_err(|e| StapError::io(&path, e))?;
        Ok(())
    }
}

fn report_checks(out: &mut Out, checks: &[Check], seed: u64) -> CmdResult<Outcome> {
    for c in checks {
        println!(
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    out.write("checks.csv", |w| {
        writeln!(w, "# seed={seed}")?;
        writeln!(w, "check,pass,detail")?;
        for c in checks {
            writeln!(
                w,
                "{},{},\"{}\"",
                c.name,
                c.pass,
                c.detail.replace('"', "'")
            )?;
        }
        Ok(())
    })?;
    Ok(if checks.iter().all(|c| c.pass) {
        Outcome::Passed
    } else {
        Outcome::ChecksFailed
    })
}

fn write_metrics(out: &mut Out, rows: &[(&str, &MetricReport)], seed: u64) -> CmdResult<()> {
    out.write("metrics.csv", |w| {
        writeln!(w, "# seed={seed}")?;
        writeln!(w, "split,n,MAE,nMSE,SRC")?;
        for (split, m) in rows {
            writeln!(
                w,
                "{split},{},{:.17e},{:.17e},{:.17e}",
                m.n, m.mae, m.nmse, m.src
            )?;
        }
        Ok(())
    })
}

fn test_samples(corpus: &Corpus) -> Vec<&SynthSample> {
    corpus.test.iter().map(|&i| &corpus.samples[i]).collect()
}

fn evaluate(model: &StapModel, corpus: &Corpus, idx: &[usize]) -> CmdResult<MetricReport> {
    let items = corpus.items(idx);
    let preds = model.predict(&items)?;
    let labels: Vec<f64> = items.iter().map(|s| s.label).collect();
    Ok(compute_metrics(&preds, &labels)?)
}

fn train(cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    let mut out = Out::new(&cli.out)?;
    let exp = &cfg.exp;
    let corpus = generate_corpus(&exp.synth)?;
    let corpus_dir = out.dir.join("corpus");
    write_corpus(&corpus, &corpus_dir)?;
    out.record(
        [
            "samples.csv",
            "frames.csv",
            "text.csv",
            "ground_truth.jsonl",
        ]
        .iter()
        .map(|f| corpus_dir.join(f)),
    );

    let train_items = corpus.train_items();
    let mut model = StapModel::new(exp.model.clone(), &train_items, cfg.seed)?;
    let history = fit(&mut model, &train_items, &exp.loss, &exp.train, None)?;
    out.write("training_log.csv", |w| history.write_log(cfg.seed, w))?;
    out.write("model.ckpt", |w| save_checkpoint(&model, w))?;

    let val = evaluate(&model, &corpus, &corpus.val)?;
    let test = evaluate(&model, &corpus, &corpus.test)?;
    write_metrics(&mut out, &[("val", &val), ("test", &test)], cfg.seed)?;
    let written = export_diagnostics(&model, &test_samples(&corpus), &out.dir, cfg.seed)?;
    out.record(written);
    println!(
        "test: n={} MAE={:.4} nMSE={:.4} SRC={:.4}",
        test.n, test.mae, test.nmse, test.src
    );
    out.manifest("train", cfg)?;
    Ok(Outcome::Passed)
}

fn bench_checks(r: &ScalingReport) -> Option<Check> {
    let name = format!("{}_scaling", r.kernel);
    match r.kernel {
        BenchKernel::DenseAttention => Some(Check::new(
            &name,
            (1.7..=2.3).contains(&r.slope),
            format!(
                "slope {:.3} ± {:.3}, expected in [1.7, 2.3]",
                r.slope, r.slope_half_width
            ),
        )),
        BenchKernel::SparseAttention | BenchKernel::SsmScan => Some(Check::new(
            &name,
            (0.75..=1.25).contains(&r.slope),
            format!(
                "slope {:.3} ± {:.3}, expected in [0.75, 1.25]",
                r.slope, r.slope_half_width
            ),
        )),
        BenchKernel::Route => {
            let span = *r.sizes.last()? as f64 / r.sizes[0] as f64;
            Some(Check::new(
                &name,
                r.max_min_ratio() < 1.2 && span >= 100.0,
                format!(
                    "max/min wall time {:.3} over a {span:.0}x corpus range, expected < 1.2",
                    r.max_min_ratio()
                ),
            ))
        }
        BenchKernel::FlatRetrieval => None,
    }
}

fn bench(cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    let kernels: Vec<BenchKernel> = match cli.kernel.as_deref() {
        None | Some("all") => BenchKernel::ALL.to_vec(),
        Some(name) => vec![name.parse()?],
    };
    let mut out = Out::new(&cli.out)?;
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for k in kernels {
        let sizes = cli.sizes.clone().unwrap_or_else(|| k.default_sizes());
        let r = bench_scaling(k, &sizes, &cfg.bench)?;
        eprintln!(
            "{k}: slope {:.3} ± {:.3}{}",
            r.slope,
            r.slope_half_width,
            if r.unstable { " (unstable)" } else { "" }
        );
        // the scaling claims are stated for the default size ranges
        if sizes == k.default_sizes() {
            checks.extend(bench_checks(&r));
        }
        reports.push(r);
    }
    out.write("bench_checksums.csv", |w| {
        write_checksums(&reports, cfg.seed, w)
    })?;
    out.write("bench_timings.csv", |w| {
        write_timings(&reports, cfg.seed, w)
    })?;
    let outcome = report_checks(&mut out, &checks, cfg.seed)?;
    out.manifest("bench", cfg)?;
    Ok(outcome)
}

fn find(results: &[AblationResult], v: Variant) -> Option<&AblationResult> {
    results.iter().find(|r| r.variant == v)
}

fn ablation_checks(results: &[AblationResult], corpus: &Corpus) -> CmdResult<Vec<Check>> {
    let mut checks = Vec::new();
    let full = find(results, Variant::Full);
    let last = |r: &AblationResult| r.slot_history.last().map(|s| (s.entropy, s.gini));
    if let (Some(f), Some(nb)) = (full, find(results, Variant::NoBalance)) {
        if let (Some((ef, gf)), Some((eb, gb))) = (last(f), last(nb)) {
            checks.push(Check::new(
                "balance_entropy",
                ef - eb >= 0.05,
                format!("entropy full {ef:.4} vs no_balance {eb:.4}, need +0.05"),
            ));
            checks.push(Check::new(
                "balance_gini",
                gb - gf >= 0.05,
                format!("gini full {gf:.4} vs no_balance {gb:.4}, need -0.05"),
            ));
        }
    }
    if let (Some(f), Some(nd)) = (full, find(results, Variant::NoDppo)) {
        let (a, b) = (
            f.pair_accuracy.unwrap_or(f64::NAN),
            nd.pair_accuracy.unwrap_or(f64::NAN),
        );
        checks.push(Check::new(
            "dppo_pair_accuracy",
            a > b,
            format!("margin-pair accuracy full {a:.4} vs no_dppo {b:.4}"),
        ));
    }
    if let (Some(f), Some(nm)) = (full, find(results, Variant::NoMemory)) {
        checks.push(Check::new(
            "retrieval_mae",
            f.metrics.mae < nm.metrics.mae,
            format!(
                "test MAE full {:.4} vs no_memory {:.4}",
                f.metrics.mae, nm.metrics.mae
            ),
        ));
    }
    if let Some(t) = find(results, Variant::Top1) {
        checks.push(Check::new(
            "top1_runs",
            t.model.cfg.top_k == 1 && t.metrics.mae.is_finite(),
            format!("K={} MAE {:.4}", t.model.cfg.top_k, t.metrics.mae),
        ));
    }
    if let Some(f) = full {
        let (hi, bg) = highlight_alignment(&f.model, &test_samples(corpus))?;
        checks.push(Check::new(
            "frame_score_alignment",
            hi > bg,
            format!("mean score at highlights {hi:.4} vs background {bg:.4}"),
        ));
    }
    Ok(checks)
}

fn ablate(cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    let variants: Vec<Variant> = match cli.variant.as_deref() {
        None | Some("all") => Variant::ALL.to_vec(),
        Some(name) => vec![name.parse()?],
    };
    let mut out = Out::new(&cli.out)?;
    let corpus = generate_corpus(&cfg.exp.synth)?;
    let mut results = Vec::new();
    for v in variants {
        let r = run_on_corpus(v, &cfg.exp, &corpus, cfg.seed)?;
        println!(
            "{v}: MAE={:.4} nMSE={:.4} SRC={:.4} pair_acc={}",
            r.metrics.mae,
            r.metrics.nmse,
            r.metrics.src,
            r.pair_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        out.write(&format!("training_log_{v}.csv"), |w| {
            r.history.write_log(cfg.seed, w)
        })?;
        results.push(r);
    }
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
    out.write("ablation_metrics.csv", |w| {
        writeln!(w, "# seed={}", cfg.seed)?;
        writeln!(
            w,
            "variant,n,MAE,nMSE,SRC,pair_accuracy,entropy,gini,top_share"
        )?;
        for r in &results {
            let s = r.slot_history.last();
            writeln!(
                w,
                "{},{},{:.17e},{:.17e},{:.17e},{},{},{},{}",
                r.variant,
                r.metrics.n,
                r.metrics.mae,
                r.metrics.nmse,
                r.metrics.src,
                opt(r.pair_accuracy),
                opt(s.map(|s| s.entropy)),
                opt(s.map(|s| s.gini)),
                opt(s.map(|s| s.top_share)),
            )?;
        }
        Ok(())
    })?;
    out.write("slot_history.csv", |w| {
        writeln!(w, "# seed={}", cfg.seed)?;
        writeln!(w, "variant,epoch,entropy,gini,top_share")?;
        for r in &results {
            for (e, s) in r.slot_history.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{:.17e},{:.17e},{:.17e}",
                    r.variant,
                    e + 1,
                    s.entropy,
                    s.gini,
                    s.top_share
                )?;
            }
        }
        Ok(())
    })?;
    if !cfg.robustness_fractions.is_empty() {
        let rows = robustness_sweep(&cfg.robustness_fractions, &cfg.exp, cfg.seed)?;
        for r in &rows {
            println!(
                "fraction {}: n_train={} SRC={:.4} delta_SRC={:.4}",
                r.fraction, r.train_items, r.metrics.src, r.delta_src
            );
        }
        out.write("robustness.csv", |w| {
            write_robustness_csv(&rows, cfg.seed, w)
        })?;
    }
    let checks = ablation_checks(&results, &corpus)?;
    let outcome = report_checks(&mut out, &checks, cfg.seed)?;
    out.manifest("ablate", cfg)?;
    Ok(outcome)
}

fn gridsearch(cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    let mut out = Out::new(&cli.out)?;
    let rows = grid_search(&cfg.grid_partitions, &cfg.grid_clusters, &cfg.exp, cfg.seed)?;
    for r in &rows {
        match &r.metrics {
            Some(m) => println!(
                "P={} C={} slots={}: MAE={:.4} nMSE={:.4} SRC={:.4}",
                r.partitions,
                r.clusters,
                r.slots(),
                m.mae,
                m.nmse,
                m.src
            ),
            None => println!(
                "P={} C={} slots={}: skipped",
                r.partitions,
                r.clusters,
                r.slots()
            ),
        }
    }
    out.write("grid.csv", |w| write_grid_csv(&rows, cfg.seed, w))?;
    out.manifest("gridsearch", cfg)?;
    Ok(Outcome::Passed)
}

fn inspect(cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    let ckpt = cli
        .checkpoint
        .clone()
        .unwrap_or_else(|| cli.out.join("model.ckpt"));
    let corpus = generate_corpus(&cfg.exp.synth)?;
    let train_items = corpus.train_items();
    let mut model = StapModel::new(cfg.exp.model.clone(), &train_items, cfg.seed)?;
    let mut r = std::io::BufReader::new(
        File::open(&ckpt)
            .map_err(|e| CommandError::Usage(format!("checkpoint {}: {e}", ckpt.display())))?,
    );
    load_checkpoint(&mut model, &mut r)?;

    let mut out = Out::new(&cli.out)?;
    let test = test_samples(&corpus);
    let written = export_diagnostics(&model, &test, &out.dir, cfg.seed)?;
    out.record(written);
    let (hi, bg) = highlight_alignment(&model, &test)?;
    let m = evaluate(&model, &corpus, &corpus.test)?;
    println!("mean frame score: highlights {hi:.4}, background {bg:.4}");
    println!(
        "test: n={} MAE={:.4} nMSE={:.4} SRC={:.4}",
        m.n, m.mae, m.nmse, m.src
    );
    out.manifest("inspect", cfg)?;
    Ok(Outcome::Passed)
}

fn gradcheck(cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    let mut out = Out::new(&cli.out)?;
    let gc = &cfg.gradcheck;
    let mut rows: Vec<(String, f64, f64, bool)> = Vec::new();
    for r in run_kernel_suite(5, gc)? {
        rows.push((r.kernel, r.worst_rel_error, gc.tol, r.pass));
    }
    for r in block_suite(gc)? {
        rows.push((r.kernel, r.max_rel_error, gc.tol, r.pass));
    }
    let model_gc = GradCheckConfig {
        tol: cfg.gradcheck_model_tol,
        ..gc.clone()
    };
    let r = end_to_end_check(&model_gc)?;
    rows.push(("end_to_end".into(), r.max_rel_error, model_gc.tol, r.pass));

    let checks: Vec<Check> = rows
        .iter()
        .map(|(name, err, tol, pass)| {
            Check::new(
                name,
                *pass,
                format!("max relative error {err:.3e}, tol {tol:.0e}"),
            )
        })
        .collect();
    let outcome = report_checks(&mut out, &checks, cfg.seed)?;
    out.manifest("gradcheck", cfg)?;
    Ok(outcome)
}

pub fn run(command: Command, cli: &Cli, cfg: &RunConfig) -> CmdResult<Outcome> {
    match command {
        Command::Train => train(cli, cfg),
        Command::Bench => bench(cli, cfg),
        Command::Ablate => ablate(cli, cfg),
        Command::Gridsearch => gridsearch(cli, cfg),
        Command::Inspect => inspect(cli, cfg),
        Command::Gradcheck => gradcheck(cli, cfg),
    }
}
