use std::collections::BTreeSet;

use stap_core::spatial::quantile_partitions;
use stap_core::synth::{generate_corpus, read_corpus, spaced_bases, write_corpus, SynthConfig};
use stap_core::StapError;

fn delta_norms(frames: &stap_core::temporal::FrameSequence) -> Vec<f64> {
    (1..frames.len())
        .map(|t| {
            frames
                .frame(t)
                .iter()
                .zip(frames.frame(t - 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn small() -> SynthConfig {
    SynthConfig {
        samples: 60,
        frames: 12,
        d_v: 5,
        d_t: 4,
        d_u: 3,
        ..SynthConfig::default()
    }
}

#[test]
fn noiseless_labels_take_one_value_per_topic() {
    let cfg = SynthConfig {
        noise: 0.0,
        c1: 0.0,
        c2: 0.0,
        ..small()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let distinct: BTreeSet<u64> = corpus
        .samples
        .iter()
        .map(|s| s.sample.label.to_bits())
        .collect();
    assert_eq!(distinct.len(), cfg.topics);
    for s in &corpus.samples {
        assert_eq!(s.sample.label, cfg.topic_base[s.truth.topic]);
    }
}

#[test]
fn label_follows_planted_energy_and_creator() {
    let cfg = SynthConfig {
        noise: 0.0,
        c1: 0.7,
        c2: 1.3,
        ..small()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    for s in &corpus.samples {
        let d = delta_norms(&s.sample.frames);
        let energy = s.truth.highlights.iter().map(|&t| d[t - 1]).sum::<f64>()
            / s.truth.highlights.len() as f64;
        let expect = cfg.topic_base[s.truth.topic] + 0.7 * energy + 1.3 * s.truth.creator;
        assert!((s.sample.label - expect).abs() < 1e-9);
        assert_eq!(s.sample.meta[0], s.truth.creator);
    }
}

#[test]
fn same_seed_same_corpus() {
    let a = generate_corpus(&small()).unwrap();
    let b = generate_corpus(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(&SynthConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a.samples[0].sample, c.samples[0].sample);
}

#[test]
fn highlight_jumps_stand_out_from_background() {
    let cfg = SynthConfig {
        samples: 1000,
        frames: 32,
        highlights: 3,
        highlight_magnitude: 10.0,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let mut separated = 0;
    for s in &corpus.samples {
        let d = delta_norms(&s.sample.frames);
        let mut background: Vec<f64> = (1..cfg.frames)
            .filter(|t| !s.truth.highlights.contains(t))
            .map(|t| d[t - 1])
            .collect();
        background.sort_by(f64::total_cmp);
        let rank = 0.95 * (background.len() - 1) as f64;
        let (lo, frac) = (rank.floor() as usize, rank.fract());
        let p95 = background[lo]
            + frac * (background[(lo + 1).min(background.len() - 1)] - background[lo]);
        if s.truth.highlights.iter().all(|&t| d[t - 1] > p95) {
            separated += 1;
        }
    }
    assert!(separated >= 990, "{separated} of 1000 samples separated");
}

#[test]
fn split_is_seven_one_two_and_disjoint() {
    let corpus = generate_corpus(&SynthConfig::default()).unwrap();
    assert_eq!(corpus.train.len(), 420);
    assert_eq!(corpus.val.len(), 60);
    assert_eq!(corpus.test.len(), 120);
    let all: BTreeSet<usize> = corpus
        .train
        .iter()
        .chain(&corpus.val)
        .chain(&corpus.test)
        .copied()
        .collect();
    assert_eq!(all.len(), 600);
}

#[test]
fn ground_truth_is_retained_and_shapes_match() {
    let cfg = small();
    let corpus = generate_corpus(&cfg).unwrap();
    for (i, s) in corpus.samples.iter().enumerate() {
        assert_eq!(s.truth.sample_id, i);
        assert!(s.truth.topic < cfg.topics);
        assert_eq!(s.truth.highlights.len(), cfg.highlights);
        assert!(s.truth.highlights.iter().all(|&t| t >= 1 && t < cfg.frames));
        assert_eq!(s.sample.frames.len(), cfg.frames);
        assert_eq!(s.sample.frames.dim(), cfg.d_v);
        assert_eq!(s.sample.text.shape(), &[cfg.text_tokens, cfg.d_t]);
        assert_eq!(s.sample.meta.len(), cfg.d_u);
    }
}

#[test]
fn labels_fill_every_quantile_partition() {
    let cfg = SynthConfig {
        samples: 60,
        ..small()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let labels: Vec<f64> = corpus.samples.iter().map(|s| s.sample.label).collect();
    let parts = quantile_partitions(&labels, 6);
    assert!(parts.iter().all(|p| p.len() == 10));
    for w in parts.windows(2) {
        let hi = w[0].iter().map(|&i| labels[i]).fold(f64::MIN, f64::max);
        let lo = w[1].iter().map(|&i| labels[i]).fold(f64::MAX, f64::min);
        assert!(hi < lo);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cases = [
        SynthConfig {
            samples: 11,
            topics: 6,
            ..small()
        },
        SynthConfig {
            highlights: 12,
            ..small()
        },
        SynthConfig {
            noise: -0.1,
            ..small()
        },
        SynthConfig {
            topic_base: spaced_bases(5, 3.0),
            ..small()
        },
    ];
    for cfg in cases {
        assert!(matches!(
            generate_corpus(&cfg),
            Err(StapError::InvalidArgument(_))
        ));
    }
}

#[test]
fn bundle_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small()).unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        if path.extension().is_some_and(|e| e == "csv") {
            assert!(text.starts_with("# seed=0\n"), "{}", path.display());
        }
    }
}

#[test]
fn missing_bundle_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let err = read_corpus(&missing).unwrap_err();
    assert!(err.to_string().contains("nowhere"), "{err}");
}
