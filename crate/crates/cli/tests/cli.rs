use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
samples = 60
frames = 8
d_v = 4
d_t = 4
d_u = 2
topics = 2
highlights = 1
partitions = 2
clusters = 2
top_k = 4
width = 8
epochs = 2
batch_size = 16
grid_partitions = 1,2
grid_clusters = 1,2
";

fn stap(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stap"));
    cmd.args(args).env_remove("STAP_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.cfg");
    if !path.exists() {
        fs::write(&path, SMALL).unwrap();
    }
    path
}

fn run_in(
    dir: &Path,
    sub: &str,
    cmd: &str,
    extra: &[&str],
    envs: &[(&str, &str)],
) -> (Output, PathBuf) {
    let cfg = small_config(dir);
    let out = dir.join(sub);
    let mut args = vec![
        cmd,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    (stap(&args, envs), out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every artifact listed in the manifest exists and hashes to the listed digest.
fn verify_manifest(out: &Path) -> Vec<String> {
    let text = fs::read_to_string(out.join("manifest.txt")).unwrap();
    let artifacts = text
        .split("[artifacts]\n")
        .nth(1)
        .expect("artifact section");
    artifacts
        .lines()
        .map(|line| {
            let (digest, name) = line.split_once("  ").unwrap();
            let bytes = fs::read(out.join(name)).unwrap();
            use sha2::Digest;
            assert_eq!(hex::encode(sha2::Sha256::digest(&bytes)), digest, "{name}");
            name.to_string()
        })
        .collect()
}

#[test]
fn gradcheck_passes_and_writes_a_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    let o = stap(&["gradcheck", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let names = verify_manifest(&out);
    assert!(names.contains(&"checks.csv".to_string()));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command=gradcheck"));
    assert!(manifest.contains("seed=0"));
}

#[test]
fn train_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, out_a) = run_in(dir.path(), "a", "train", &["--seed", "7"], &[]);
    let (b, out_b) = run_in(dir.path(), "b", "train", &["--seed", "7"], &[]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let names = verify_manifest(&out_a);
    for name in [
        "training_log.csv",
        "model.ckpt",
        "metrics.csv",
        "corpus/samples.csv",
    ] {
        assert!(
            names.iter().any(|n| n == name),
            "{name} missing from manifest"
        );
    }
    for name in &names {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name}"
        );
    }
    let log = fs::read_to_string(out_a.join("training_log.csv")).unwrap();
    assert!(log.starts_with("# seed=7\n"));
    assert!(fs::read_to_string(out_a.join("manifest.txt"))
        .unwrap()
        .contains("seed=7"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let (a, out_a) = run_in(dir.path(), "one", "train", &[], &[("STAP_THREADS", "1")]);
    let (b, out_b) = run_in(dir.path(), "many", "train", &[], &[("STAP_THREADS", "4")]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    assert_eq!(
        fs::read(out_a.join("manifest.txt")).unwrap(),
        fs::read(out_b.join("manifest.txt")).unwrap()
    );
}

#[test]
fn ablate_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("small.cfg"),
        format!("{SMALL}robustness_fractions = 1, 0.5\n"),
    )
    .unwrap();
    let (a, out_a) = run_in(dir.path(), "a", "ablate", &["--variant", "all"], &[]);
    let (b, out_b) = run_in(dir.path(), "b", "ablate", &["--variant", "all"], &[]);
    // Acceptance directions may or may not hold on a corpus this small.
    assert!(matches!(a.status.code(), Some(0 | 1)), "{}", stderr(&a));
    assert_eq!(a.status.code(), b.status.code());
    let names = verify_manifest(&out_a);
    assert!(names.iter().any(|n| n == "ablation_metrics.csv"));
    assert!(names.iter().any(|n| n == "training_log_no_dppo.csv"));
    assert!(names.iter().any(|n| n == "robustness.csv"));
    assert_eq!(
        fs::read(out_a.join("manifest.txt")).unwrap(),
        fs::read(out_b.join("manifest.txt")).unwrap()
    );
}

#[test]
fn bench_checksums_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let extra = ["--kernel", "ssm_scan", "--sizes", "16,32,64,128"];
    let (a, out_a) = run_in(dir.path(), "a", "bench", &extra, &[]);
    let (b, out_b) = run_in(dir.path(), "b", "bench", &extra, &[]);
    assert!(matches!(a.status.code(), Some(0 | 1)), "{}", stderr(&a));
    assert!(matches!(b.status.code(), Some(0 | 1)), "{}", stderr(&b));
    let names = verify_manifest(&out_a);
    assert!(names.iter().any(|n| n == "bench_timings.csv"));
    assert_eq!(
        fs::read(out_a.join("bench_checksums.csv")).unwrap(),
        fs::read(out_b.join("bench_checksums.csv")).unwrap()
    );
}

#[test]
fn inspect_reads_the_trained_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (t, out) = run_in(dir.path(), "run", "train", &[], &[]);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    let (i, _) = run_in(dir.path(), "run", "inspect", &[], &[]);
    assert!(matches!(i.status.code(), Some(0 | 1)), "{}", stderr(&i));
    let names = verify_manifest(&out);
    assert!(names.iter().any(|n| n == "frame_scores.csv"));
    assert!(names.iter().any(|n| n == "slot_heatmap.csv"));
}

#[test]
fn gridsearch_writes_one_row_per_pair() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(dir.path(), "g", "gridsearch", &[], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2 + 4);
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.cfg");
    let o = stap(&["train", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_usage_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\nlearnin_rate = 0.1\n").unwrap();
    let o = stap(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
}

#[test]
fn bad_values_and_names_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = many\n").unwrap();
    let o = stap(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));

    let (o, _) = run_in(
        dir.path(),
        "v",
        "ablate",
        &["--variant", "no_everything"],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let (o, _) = run_in(dir.path(), "k", "bench", &["--kernel", "warp_drive"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = stap(
        &["gradcheck", "--out", dir.path().to_str().unwrap()],
        &[("STAP_THREADS", "0")],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("STAP_THREADS"));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = stap(&["gradcheck", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("file"), "{}", stderr(&o));
}
