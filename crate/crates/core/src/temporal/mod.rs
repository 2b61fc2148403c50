//! Temporal pathway: frame scoring, bidirectional selective scan, adaptive
//! sparse attention and gated residual fusion.

pub mod attention;
pub mod fusion;
pub mod scoring;
pub mod ssm;

use rand::Rng;

use crate::error::{Result, StapError};
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamStore;

pub use attention::{
    dense_attention, sparse_attention, window_size, SparseAttention, SparseAttnConfig,
};
pub use fusion::{FusionOutput, GatedFusion};
pub use scoring::{score_frames, FrameScoreOutput, FrameScorer};
pub use ssm::{bidirectional_ssm, ssm_scan, DeltaMode, Direction, SsmBlock, SsmConfig, Steps};

/// `T x d_v` frame features in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
}

impl FrameSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 || frames.is_empty() {
            return Err(StapError::shape(format!(
                "frame sequence must be T x d_v, got {:?}",
                frames.shape()
            )));
        }
        Ok(FrameSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn reversed(&self) -> FrameSequence {
        let rows: Vec<Vec<f64>> = (0..self.len())
            .rev()
            .map(|t| self.frame(t).to_vec())
            .collect();
        FrameSequence {
            frames: Tensor::from_rows(&rows).expect("rows share width"),
        }
    }
}

/// Widths and switches for the temporal pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConfig {
    pub d_v: usize,
    pub score_hidden: usize,
    pub ssm: SsmConfig,
    pub attn: SparseAttnConfig,
    pub use_frame_scoring: bool,
    pub use_ssm: bool,
    pub use_sparse_attn: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            d_v: 16,
            score_hidden: 16,
            ssm: SsmConfig::default(),
            attn: SparseAttnConfig::default(),
            use_frame_scoring: true,
            use_ssm: true,
            use_sparse_attn: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub scorer: FrameScorer,
    pub ssm: SsmBlock,
    pub attn: SparseAttention,
    pub fusion: GatedFusion,
    pub cfg: TemporalConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalOutput {
    pub v_seq: Tensor,
    pub pooled: Vec<f64>,
    pub gates: [f64; 3],
    pub y_ssm: Tensor,
    pub y_attn: Tensor,
    pub scores: FrameScoreOutput,
}

#[derive(Clone, Debug)]
pub(crate) struct TemporalCache {
    score: scoring::ScoreCache,
    steps: Steps,
    fwd: Option<ssm::ScanCache>,
    bwd: Option<ssm::ScanCache>,
    attn: Option<attention::AttnCache>,
    fusion: fusion::FusionCache,
}

impl TemporalBlock {
    pub fn new(store: &mut ParamStore, cfg: TemporalConfig, rng: &mut impl Rng) -> Result<Self> {
        let d_v = cfg.d_v;
        let mut scorer = FrameScorer::new(store, "temporal.score", d_v, cfg.score_hidden, rng);
        scorer.learned = cfg.use_frame_scoring;
        let ssm = SsmBlock::new(store, "temporal.ssm", d_v, cfg.ssm.clone(), rng)?;
        let attn = SparseAttention::new(store, "temporal.attn", d_v, cfg.attn.clone(), rng);
        let fusion = GatedFusion::new(store, "temporal.fusion", d_v, rng);
        Ok(TemporalBlock {
            scorer,
            ssm,
            attn,
            fusion,
            cfg,
        })
    }

    pub(crate) fn forward_cached(
        &self,
        seq: &FrameSequence,
        store: &ParamStore,
    ) -> Result<(TemporalOutput, TemporalCache)> {
        let (t_len, d_v) = (seq.len(), seq.dim());
        if d_v != self.cfg.d_v {
            return Err(StapError::shape(format!(
                "temporal block built for d_v={}, got {d_v}",
                self.cfg.d_v
            )));
        }
        let (scores, score_cache) = self.scorer.forward(seq, store)?;
        let steps = self.ssm.steps(seq, &scores);
        let (y_ssm, fwd, bwd) = if self.cfg.use_ssm {
            let (mut y, fc) = self
                .ssm
                .scan(seq, &steps.delta, store, Direction::Forward)?;
            let (yb, bc) = self
                .ssm
                .scan(seq, &steps.delta, store, Direction::Backward)?;
            y.axpy(1.0, &yb);
            (y, Some(fc), Some(bc))
        } else {
            (Tensor::zeros(&[t_len, d_v]), None, None)
        };
        let (y_attn, attn_cache) = if self.cfg.use_sparse_attn {
            let windows = self.attn.windows(seq);
            let (y, c) = self.attn.forward_with_windows(seq, &windows, store)?;
            (y, Some(c))
        } else {
            (Tensor::zeros(&[t_len, d_v]), None)
        };
        let (fused, fusion_cache) =
            self.fusion
                .forward(seq, &y_ssm, &y_attn, &scores.anchor, store)?;
        Ok((
            TemporalOutput {
                v_seq: fused.v_seq,
                pooled: fused.pooled,
                gates: fused.gates,
                y_ssm,
                y_attn,
                scores,
            },
            TemporalCache {
                score: score_cache,
                steps,
                fwd,
                bwd,
                attn: attn_cache,
                fusion: fusion_cache,
            },
        ))
    }

    pub fn forward(&self, seq: &FrameSequence, store: &ParamStore) -> Result<TemporalOutput> {
        self.forward_cached(seq, store).map(|(o, _)| o)
    }

    /// Accumulates gradients of every temporal parameter given upstream
    /// gradients of the fused sequence and of the pooled vector.
    pub(crate) fn backward(
        &self,
        seq: &FrameSequence,
        store: &ParamStore,
        out: &TemporalOutput,
        cache: &TemporalCache,
        grad_seq: &Tensor,
        grad_pooled: &[f64],
        grads: &mut [Tensor],
    ) {
        let fg = self.fusion.backward(
            seq,
            &out.y_ssm,
            &out.y_attn,
            &out.scores.anchor,
            out.gates,
            &cache.fusion,
            store,
            grad_seq,
            grad_pooled,
            grads,
        );
        let mut grad_anchor = fg.anchor;
        let mut grad_weights = vec![0.0; seq.len()];
        if let Some(ac) = &cache.attn {
            self.attn.backward(seq, store, ac, &fg.y_attn, grads);
        }
        if let (Some(fc), Some(bc)) = (&cache.fwd, &cache.bwd) {
            let delta = &cache.steps.delta;
            let mut gd = self
                .ssm
                .scan_backward(seq, delta, store, fc, &fg.y_ssm, grads);
            let gb = self
                .ssm
                .scan_backward(seq, delta, store, bc, &fg.y_ssm, grads);
            for (a, b) in gd.iter_mut().zip(gb) {
                *a += b;
            }
            self.ssm.steps_backward(
                seq,
                &out.scores,
                &cache.steps,
                &gd,
                &mut grad_weights,
                &mut grad_anchor,
            );
        }
        self.scorer.backward(
            seq,
            store,
            &out.scores,
            &cache.score,
            &grad_weights,
            &grad_anchor,
            grads,
        );
    }
}

/// Fused temporal representation for one frame sequence.
pub fn temporal_forward(
    seq: &FrameSequence,
    block: &TemporalBlock,
    store: &ParamStore,
) -> Result<TemporalOutput> {
    block.forward(seq, store)
}

/// Gated fusion of precomputed pathway outputs.
pub fn gated_fusion(
    seq: &FrameSequence,
    y_ssm: &Tensor,
    y_attn: &Tensor,
    anchor: &[f64],
    fusion: &GatedFusion,
    store: &ParamStore,
) -> Result<fusion::FusionOutput> {
    fusion
        .forward(seq, y_ssm, y_attn, anchor, store)
        .map(|(o, _)| o)
}
