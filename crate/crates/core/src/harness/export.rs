//! Frame-importance and slot-activation exports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Result, StapError};
use crate::predictor::{Prediction, StapModel};
use crate::spatial::stats::{slot_statistics, write_heatmap};
use crate::synth::SynthSample;

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| StapError::io(path, e))?);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| StapError::io(path, e))
}

/// Writes `frame_scores.csv` and, when the model routes, `slot_heatmap.csv`
/// for `samples`. Returns the written paths.
pub fn export_diagnostics(
    model: &StapModel,
    samples: &[&SynthSample],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| StapError::io(out_dir, e))?;
    let preds: Vec<Prediction> = samples
        .par_iter()
        .map(|s| model.predict_one(&s.sample))
        .collect::<Result<_>>()?;
    let mut written = Vec::new();

    let path = out_dir.join("frame_scores.csv");
    write_file(&path, |w| {
        writeln!(w, "# seed={seed}")?;
        writeln!(w, "sample_id,frame_index,score,is_planted_highlight")?;
        for (s, p) in samples.iter().zip(&preds) {
            for (t, score) in p.frame_weights.iter().enumerate() {
                let planted = s.truth.highlights.binary_search(&t).is_ok();
                writeln!(
                    w,
                    "{},{t},{score:.17e},{}",
                    s.truth.sample_id,
                    u8::from(planted)
                )?;
            }
        }
        Ok(())
    })?;
    written.push(path);

    let rows: Vec<&[f64]> = preds
        .iter()
        .filter_map(|p| p.routing.as_ref().map(|r| r.soft.data()))
        .collect();
    if !rows.is_empty() {
        let (p, c) = (model.cfg.partitions, model.cfg.clusters);
        let stats = slot_statistics(&rows, p, c, 5.min(p * c))?;
        let path = out_dir.join("slot_heatmap.csv");
        write_file(&path, |w| write_heatmap(&stats, seed, w))?;
        written.push(path);
    }
    Ok(written)
}

/// Mean frame score at planted highlights and at background frames.
pub fn highlight_alignment(model: &StapModel, samples: &[&SynthSample]) -> Result<(f64, f64)> {
    let weights: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| model.predict_one(&s.sample).map(|p| p.frame_weights))
        .collect::<Result<_>>()?;
    let (mut hi, mut nh, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (s, w) in samples.iter().zip(&weights) {
        for (t, v) in w.iter().enumerate() {
            if s.truth.highlights.binary_search(&t).is_ok() {
                hi += v;
                nh += 1;
            } else {
                bg += v;
                nb += 1;
            }
        }
    }
    if nh == 0 || nb == 0 {
        return Err(StapError::Data(
            "need both highlight and background frames".into(),
        ));
    }
    Ok((hi / nh as f64, bg / nb as f64))
}
