//! Synthetic corpus with planted structure.
//!
//! Each item belongs to one of `G` topics. Frames follow a low-step random
//! walk, except at `H` highlight frames where the walk jumps toward the
//! topic's frame center. Text tokens are the topic's text center plus
//! isotropic noise. The first metadata entry is a creator-strength scalar.
//! Labels are
//!
//! ```text
//! y = b[topic] + c1 * mean |Δx| over highlight frames + c2 * creator + N(0, σ²)
//! ```
//!
//! # Bundle layout
//!
//! A corpus directory holds four files, each headed by a `# seed=` line:
//!
//! - `samples.csv`: `sample_id,split,label,u0..u{d_u-1}`
//! - `frames.csv`: `sample_id,frame_index,f0..f{d_v-1}`
//! - `text.csv`: `sample_id,token_index,t0..t{d_t-1}`
//! - `ground_truth.jsonl`: one `{"sample_id","topic","highlights","creator"}` object per line
//!
//! Ground truth never enters model inputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StapError};
use crate::numerics::tensor::Tensor;
use crate::predictor::Sample;
use crate::temporal::FrameSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub frames: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_u: usize,
    pub topics: usize,
    pub highlights: usize,
    /// Highlight jump size as a multiple of the background step.
    pub highlight_magnitude: f64,
    /// RMS norm of a background frame step.
    pub background_step: f64,
    /// Base popularity per topic, length `topics`.
    pub topic_base: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub noise: f64,
    pub text_tokens: usize,
    pub text_noise: f64,
    pub seed: u64,
}

/// Evenly spaced topic bases over `[0, spread]`.
pub fn spaced_bases(topics: usize, spread: f64) -> Vec<f64> {
    if topics <= 1 {
        return vec![0.0; topics];
    }
    (0..topics)
        .map(|g| spread * g as f64 / (topics - 1) as f64)
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 600,
            frames: 64,
            d_v: 16,
            d_t: 16,
            d_u: 4,
            topics: 6,
            highlights: 3,
            highlight_magnitude: 10.0,
            background_step: 0.1,
            topic_base: spaced_bases(6, 3.0),
            c1: 1.0,
            c2: 1.0,
            noise: 0.1,
            text_tokens: 4,
            text_noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StapError::invalid(m));
        if self.topics == 0 || self.samples < 2 * self.topics {
            return bad(format!(
                "need at least two samples per topic ({} samples, {} topics)",
                self.samples, self.topics
            ));
        }
        if self.highlights >= self.frames {
            return bad(format!(
                "{} highlights do not fit in {} frames",
                self.highlights, self.frames
            ));
        }
        if self.d_v == 0 || self.d_t == 0 || self.d_u == 0 || self.text_tokens == 0 {
            return bad("dimensions and token count must be positive".into());
        }
        if !(self.noise >= 0.0) || !(self.text_noise >= 0.0) || !(self.background_step >= 0.0) {
            return bad("noise levels and step must be non-negative".into());
        }
        if !(self.highlight_magnitude >= 0.0) {
            return bad("highlight magnitude must be non-negative".into());
        }
        if self.topic_base.len() != self.topics {
            return bad(format!(
                "{} topic bases for {} topics",
                self.topic_base.len(),
                self.topics
            ));
        }
        Ok(())
    }
}

/// Planted facts about one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_id: usize,
    pub topic: usize,
    pub highlights: Vec<usize>,
    pub creator: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub truth: GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(StapError::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<SynthSample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Corpus {
    pub fn items(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&i| &self.samples[i].sample).collect()
    }

    pub fn train_items(&self) -> Vec<&Sample> {
        self.items(&self.train)
    }

    pub fn val_items(&self) -> Vec<&Sample> {
        self.items(&self.val)
    }

    pub fn test_items(&self) -> Vec<&Sample> {
        self.items(&self.test)
    }

    fn split_of(&self) -> Vec<Split> {
        let mut s = vec![Split::Train; self.samples.len()];
        for &i in &self.val {
            s[i] = Split::Val;
        }
        for &i in &self.test {
            s[i] = Split::Test;
        }
        s
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(rng)).collect::<Vec<f64>>()
}

struct TopicCenters {
    frame: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
}

fn sample_item(cfg: &SynthConfig, centers: &TopicCenters, id: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64 + 1);
    let topic = id % cfg.topics;
    let (t_len, d_v) = (cfg.frames, cfg.d_v);

    let mut highlights: Vec<usize> = rand::seq::index::sample(&mut rng, t_len - 1, cfg.highlights)
        .into_iter()
        .map(|t| t + 1)
        .collect();
    highlights.sort_unstable();

    let step_sd = cfg.background_step / (d_v as f64).sqrt();
    let mut frames = Vec::with_capacity(t_len * d_v);
    let mut x = normal_vec(&mut rng, d_v, 0.5);
    frames.extend_from_slice(&x);
    let mut energy = 0.0;
    for t in 1..t_len {
        if highlights.binary_search(&t).is_ok() {
            let jump = cfg.highlight_magnitude * rng.random_range(0.5..1.5) * cfg.background_step;
            let mut dir: Vec<f64> = centers.frame[topic]
                .iter()
                .zip(&x)
                .map(|(c, v)| c - v)
                .collect();
            let mut norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                dir = normal_vec(&mut rng, d_v, 1.0);
                norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for (xi, di) in x.iter_mut().zip(&dir) {
                *xi += jump * di / norm;
            }
            energy += jump;
        } else {
            for xi in x.iter_mut() {
                *xi += step_sd * gauss(&mut rng);
            }
        }
        frames.extend_from_slice(&x);
    }
    if cfg.highlights > 0 {
        energy /= cfg.highlights as f64;
    }

    let mut text = Vec::with_capacity(cfg.text_tokens * cfg.d_t);
    for _ in 0..cfg.text_tokens {
        for c in &centers.text[topic] {
            text.push(c + cfg.text_noise * gauss(&mut rng));
        }
    }
    let creator: f64 = rng.random_range(0.0..1.0);
    let mut meta = vec![creator];
    meta.extend(normal_vec(&mut rng, cfg.d_u - 1, 1.0));
    let noise = gauss(&mut rng);
    let label = cfg.topic_base[topic] + cfg.c1 * energy + cfg.c2 * creator + cfg.noise * noise;

    Ok(SynthSample {
        sample: Sample {
            frames: FrameSequence::new(Tensor::new(vec![t_len, d_v], frames)?)?,
            text: Tensor::new(vec![cfg.text_tokens, cfg.d_t], text)?,
            meta,
            label,
        },
        truth: GroundTruth {
            sample_id: id,
            topic,
            highlights,
            creator,
        },
    })
}

/// Generates the corpus and a shuffled 7:1:2 split. Items are generated in
/// parallel from per-item streams, so the result depends only on `cfg`.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = TopicCenters {
        frame: (0..cfg.topics)
            .map(|_| normal_vec(&mut rng, cfg.d_v, 1.0))
            .collect(),
        text: (0..cfg.topics)
            .map(|_| normal_vec(&mut rng, cfg.d_t, 1.0))
            .collect(),
    };
    let samples: Vec<SynthSample> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| sample_item(cfg, &centers, i))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    order.shuffle(&mut rng);
    let n = cfg.samples as f64;
    let n_train = (0.7 * n).round() as usize;
    let n_val = (0.1 * n).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Corpus {
        samples,
        train,
        val,
        test,
        seed: cfg.seed,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StapError + '_ {
    move |e| StapError::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> StapError + '_ {
    move |e| StapError::Format(format!("{}: {e}", path.display()))
}

fn create(path: &Path, seed: u64) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(f, "# seed={seed}").map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Writes the CSV bundle and ground-truth sidecar into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let first = &corpus.samples[0].sample;
    let (d_v, d_t, d_u) = (first.frames.dim(), first.text.cols(), first.meta.len());
    let splits = corpus.split_of();

    let path = dir.join("samples.csv");
    let mut w = create(&path, corpus.seed)?;
    let mut header = vec!["sample_id".to_string(), "split".into(), "label".into()];
    header.extend((0..d_u).map(|i| format!("u{i}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for (i, s) in corpus.samples.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            splits[i].as_str().into(),
            fmt(s.sample.label),
        ];
        rec.extend(s.sample.meta.iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    for (name, prefix, width) in [("frames.csv", "f", d_v), ("text.csv", "t", d_t)] {
        let path = dir.join(name);
        let mut w = create(&path, corpus.seed)?;
        let index = if prefix == "f" {
            "frame_index"
        } else {
            "token_index"
        };
        let mut header = vec!["sample_id".to_string(), index.into()];
        header.extend((0..width).map(|i| format!("{prefix}{i}")));
        w.write_record(&header).map_err(csv_err(&path))?;
        for (i, s) in corpus.samples.iter().enumerate() {
            let t = if prefix == "f" {
                s.sample.frames.tensor()
            } else {
                &s.sample.text
            };
            for r in 0..t.rows() {
                let mut rec = vec![i.to_string(), r.to_string()];
                rec.extend(t.row(r).iter().map(|&v| fmt(v)));
                w.write_record(&rec).map_err(csv_err(&path))?;
            }
        }
        w.flush().map_err(io_err(&path))?;
    }

    let path = dir.join("ground_truth.jsonl");
    let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for s in &corpus.samples {
        let line = serde_json::to_string(&s.truth).map_err(|e| StapError::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))?;
    Ok(())
}

fn open(path: &Path) -> Result<(u64, csv::Reader<BufReader<File>>)> {
    let mut f = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut first = String::new();
    f.read_line(&mut first).map_err(io_err(path))?;
    let seed = first
        .trim()
        .strip_prefix("# seed=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| StapError::Format(format!("{}: missing seed line", path.display())))?;
    Ok((seed, csv::Reader::from_reader(f)))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| StapError::Format(format!("{}: bad number {s:?}", path.display())))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| StapError::Format(format!("{}: bad index {s:?}", path.display())))
}

/// Rows of `frames.csv` / `text.csv` grouped per sample.
fn read_blocks(path: &Path, n: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let (_, mut r) = open(path)?;
    let mut blocks = vec![Vec::new(); n];
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let id = parse_usize(path, &rec[0])?;
        let row = parse_usize(path, &rec[1])?;
        let block = blocks
            .get_mut(id)
            .ok_or_else(|| StapError::Format(format!("{}: unknown sample {id}", path.display())))?;
        if row != block.len() {
            return Err(StapError::Format(format!(
                "{}: sample {id} rows out of order",
                path.display()
            )));
        }
        block.push(
            rec.iter()
                .skip(2)
                .map(|v| parse_f64(path, v))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(blocks)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("samples.csv");
    let (seed, mut r) = open(&path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(&path))?;
        let id = parse_usize(&path, &rec[0])?;
        if id != rows.len() {
            return Err(StapError::Format(format!(
                "{}: ids must be consecutive",
                path.display()
            )));
        }
        let split = Split::parse(&rec[1])?;
        let label = parse_f64(&path, &rec[2])?;
        let meta = rec
            .iter()
            .skip(3)
            .map(|v| parse_f64(&path, v))
            .collect::<Result<Vec<_>>>()?;
        rows.push((split, label, meta));
    }
    let n = rows.len();
    if n == 0 {
        return Err(StapError::Format(format!("{}: no samples", path.display())));
    }
    let frames = read_blocks(&dir.join("frames.csv"), n)?;
    let text = read_blocks(&dir.join("text.csv"), n)?;
    let path = dir.join("ground_truth.jsonl");
    let f = BufReader::new(File::open(&path).map_err(io_err(&path))?);
    let truths: Vec<GroundTruth> = f
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(&path))?;
            serde_json::from_str(&l)
                .map_err(|e| StapError::Format(format!("{}: {e}", path.display())))
        })
        .collect::<Result<_>>()?;
    if truths.len() != n {
        return Err(StapError::Format(format!(
            "{}: {} records for {n} samples",
            path.display(),
            truths.len()
        )));
    }
    let mut corpus = Corpus {
        samples: Vec::with_capacity(n),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (i, (((split, label, meta), f), (t, truth))) in rows
        .into_iter()
        .zip(frames)
        .zip(text.into_iter().zip(truths))
        .enumerate()
    {
        match split {
            Split::Train => corpus.train.push(i),
            Split::Val => corpus.val.push(i),
            Split::Test => corpus.test.push(i),
        }
        if f.is_empty() || t.is_empty() {
            return Err(StapError::Format(format!(
                "sample {i} has no frames or tokens"
            )));
        }
        corpus.samples.push(SynthSample {
            sample: Sample {
                frames: FrameSequence::new(Tensor::from_rows(&f)?)?,
                text: Tensor::from_rows(&t)?,
                meta,
                label,
            },
            truth,
        });
    }
    Ok(corpus)
}
