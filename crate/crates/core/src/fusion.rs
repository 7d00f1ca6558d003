//! Cross-modal interaction module and vocabulary projection.
//!
//! Video frames are projected without bias and scaled by the proposal's
//! temporal weights before positional encodings are added, so a proposal
//! conditions everything downstream and an all-zero video carries no
//! proposal information. A query encoder (self-attention over the masked
//! query) feeds both the query-only branch and a decoder that cross-attends
//! from query positions to the weighted video.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore, Var};
use crate::data::{MaskedQuery, VideoFeatures};
use crate::error::{CcrError, Result};
use crate::model::{uniform, xavier, Ctx, Model};
use crate::proposals::{Proposal, ProposalSet, TemporalWeights, SIGMA_MAX, SIGMA_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub max_query_len: usize,
    pub num_positives: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Initial width of every positive, before training moves it.
    pub init_width: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            vocab_size: 40,
            hidden_dim: 32,
            layers: 1,
            heads: 4,
            ff_dim: 64,
            dropout: 0.0,
            max_frames: 256,
            max_query_len: 32,
            num_positives: 2,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_MAX,
            init_width: 0.15,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_frames", self.max_frames),
            ("max_query_len", self.max_query_len),
            ("num_positives", self.num_positives),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CcrError::Config(format!("{k} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(CcrError::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CcrError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(CcrError::Config("need 0 < sigma_min < sigma_max".into()));
        }
        if !(self.sigma_min..=self.sigma_max).contains(&self.init_width) {
            return Err(CcrError::Config("init_width outside sigma bounds".into()));
        }
        Ok(())
    }

    pub fn check_inputs(&self, v: &VideoFeatures, q: &MaskedQuery) -> Result<()> {
        if v.feature_dim() != self.feature_dim {
            return Err(CcrError::Shape(format!(
                "video {} has feature dim {}, model expects {}",
                v.video_id,
                v.feature_dim(),
                self.feature_dim
            )));
        }
        if v.frame_count() > self.max_frames {
            return Err(CcrError::Shape(format!(
                "video {} has {} frames, model accepts at most {}",
                v.video_id,
                v.frame_count(),
                self.max_frames
            )));
        }
        if q.len() > self.max_query_len || q.is_empty() {
            return Err(CcrError::Shape(format!(
                "query length {} outside [1, {}]",
                q.len(),
                self.max_query_len
            )));
        }
        if let Some(&t) = q.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(CcrError::Shape(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// What the fusion module produces for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// One row per masked position.
    pub masked_hidden: Mat,
    /// `(center, width)` per positive, already squashed into bounds.
    pub proposal_params: Vec<(f64, f64)>,
}

fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

fn init_block(prefix: &str, d: usize, ff: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.attn.{w}"), xavier(d, d, rng));
    }
    params.insert(format!("{prefix}.attn.bo"), Mat::zeros(1, d));
    params.insert(format!("{prefix}.ln1.g"), Mat::filled(1, d, 1.0));
    params.insert(format!("{prefix}.ln1.b"), Mat::zeros(1, d));
    params.insert(format!("{prefix}.ff.w1"), xavier(d, ff, rng));
    params.insert(format!("{prefix}.ff.b1"), Mat::zeros(1, ff));
    params.insert(format!("{prefix}.ff.w2"), xavier(ff, d, rng));
    params.insert(format!("{prefix}.ff.b2"), Mat::zeros(1, d));
    params.insert(format!("{prefix}.ln2.g"), Mat::filled(1, d, 1.0));
    params.insert(format!("{prefix}.ln2.b"), Mat::zeros(1, d));
}

pub(crate) fn init_params(cfg: &FusionConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let d = cfg.hidden_dim;
    let np = cfg.num_positives;
    params.insert("video.proj", xavier(cfg.feature_dim, d, rng));
    params.insert("query.embed", uniform(cfg.vocab_size, d, 0.1, rng));
    for l in 0..cfg.layers {
        init_block(&format!("qenc.{l}"), d, cfg.ff_dim, params, rng);
        init_block(&format!("venc.{l}"), d, cfg.ff_dim, params, rng);
        init_block(&format!("dec.{l}"), d, cfg.ff_dim, params, rng);
    }
    params.insert("head.query", xavier(d, d, rng));
    params.insert("head.key", xavier(d, d, rng));
    params.insert("head.center_w", Mat::zeros(d, np));
    let offsets = (0..np)
        .map(|i| {
            if np == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (np - 1) as f64
            }
        })
        .collect();
    params.insert("head.center_b", Mat::row_vector(offsets));
    params.insert("head.width_w", Mat::zeros(d, np));
    params.insert(
        "head.width_b",
        Mat::filled(1, np, inv_softplus(cfg.init_width)),
    );
    params.insert("proj.w", xavier(d, cfg.vocab_size, rng));
    params.insert("proj.b", Mat::zeros(1, cfg.vocab_size));
}

fn positional(rows: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(rows, d);
    for pos in 0..rows {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

fn linear(ctx: &mut Ctx, x: Var, w: &str, b: Option<&str>) -> Var {
    let w = ctx.param(w);
    let y = ctx.g.matmul(x, w);
    match b {
        Some(b) => {
            let b = ctx.param(b);
            ctx.g.add_row(y, b)
        }
        None => y,
    }
}

fn affine_norm(ctx: &mut Ctx, x: Var, prefix: &str) -> Var {
    let n = ctx.g.layer_norm(x);
    let g = ctx.param(&format!("{prefix}.g"));
    let b = ctx.param(&format!("{prefix}.b"));
    let n = ctx.g.mul_row(n, g);
    ctx.g.add_row(n, b)
}

fn attention(ctx: &mut Ctx, cfg: &FusionConfig, x: Var, memory: Var, prefix: &str) -> Var {
    let q = linear(ctx, x, &format!("{prefix}.wq"), None);
    let k = linear(ctx, memory, &format!("{prefix}.wk"), None);
    let v = linear(ctx, memory, &format!("{prefix}.wv"), None);
    let dh = cfg.hidden_dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Var> = (0..cfg.heads)
        .map(|h| {
            let qh = ctx.g.slice_cols(q, h * dh, dh);
            let kh = ctx.g.slice_cols(k, h * dh, dh);
            let vh = ctx.g.slice_cols(v, h * dh, dh);
            let scores = ctx.g.matmul_t(qh, kh);
            let scores = ctx.g.scale(scores, scale);
            let attn = ctx.g.softmax_rows(scores);
            ctx.g.matmul(attn, vh)
        })
        .collect();
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        ctx.g.concat_cols(&heads)
    };
    linear(
        ctx,
        cat,
        &format!("{prefix}.wo"),
        Some(&format!("{prefix}.bo")),
    )
}

/// Post-norm block: attention to `memory` (self-attention when it is `x`),
/// then a GELU feed-forward layer.
fn block(ctx: &mut Ctx, cfg: &FusionConfig, x: Var, memory: Var, prefix: &str) -> Var {
    let a = attention(ctx, cfg, x, memory, &format!("{prefix}.attn"));
    let a = ctx.dropout(a);
    let h = ctx.g.add(x, a);
    let h = affine_norm(ctx, h, &format!("{prefix}.ln1"));
    let f = linear(ctx, h, &format!("{prefix}.ff.w1"), Some(&format!("{prefix}.ff.b1")));
    let f = ctx.g.gelu(f);
    let f = linear(ctx, f, &format!("{prefix}.ff.w2"), Some(&format!("{prefix}.ff.b2")));
    let f = ctx.dropout(f);
    let h = ctx.g.add(h, f);
    affine_norm(ctx, h, &format!("{prefix}.ln2"))
}

/// Unimodal encoding of the masked query, `L x D`.
pub fn query_encode(ctx: &mut Ctx, cfg: &FusionConfig, tokens: &[usize]) -> Var {
    let table = ctx.param("query.embed");
    let emb = ctx.g.gather_rows(table, tokens);
    let emb = ctx.g.scale(emb, (cfg.hidden_dim as f64).sqrt());
    let pe = ctx.g.constant(positional(tokens.len(), cfg.hidden_dim));
    let mut h = ctx.g.add(emb, pe);
    for l in 0..cfg.layers {
        h = block(ctx, cfg, h, h, &format!("qenc.{l}"));
    }
    h
}

/// Bias-free frame projection, `T x D`.
pub fn video_project(ctx: &mut Ctx, frames: &Mat) -> Var {
    let f = ctx.g.constant(frames.clone());
    linear(ctx, f, "video.proj", None)
}

/// Per-positive `(center, width)` scalars predicted from the query-attended
/// video summary.
///
/// Frames are scored against the pooled query; the attention-weighted mean
/// frame time gives a base center, which each positive shifts in logit space.
pub fn proposal_head(
    ctx: &mut Ctx,
    cfg: &FusionConfig,
    vproj: Var,
    q_enc: Var,
) -> Vec<(Var, Var)> {
    let frames = ctx.g.value(vproj).rows();
    let summary = ctx.g.mean_rows(q_enc);
    let qh = linear(ctx, summary, "head.query", None);
    let keys = linear(ctx, vproj, "head.key", None);
    let scores = ctx.g.matmul_t(qh, keys);
    let scores = ctx.g.scale(scores, 1.0 / (cfg.hidden_dim as f64).sqrt());
    let attn = ctx.g.softmax_rows(scores); // 1 x T
    let times = ctx.g.constant(Mat::column(
        (0..frames).map(|t| t as f64 / (frames - 1) as f64).collect(),
    ));
    let base = ctx.g.matmul(attn, times);
    let base = ctx.g.clamp(base, 1e-3, 1.0 - 1e-3);
    let log_p = ctx.g.ln(base);
    let one_minus = ctx.g.scale(base, -1.0);
    let one_minus = ctx.g.add_const(one_minus, 1.0);
    let log_q = ctx.g.ln(one_minus);
    let base_logit = ctx.g.sub(log_p, log_q);
    let pooled = ctx.g.matmul(attn, vproj); // 1 x D

    let np = cfg.num_positives;
    let shift = linear(ctx, pooled, "head.center_w", Some("head.center_b"));
    let base_logit = ctx.g.broadcast(base_logit, 1, np);
    let z = ctx.g.add(base_logit, shift);
    let centers = ctx.g.sigmoid(z);
    let centers = ctx.g.clamp(centers, 1e-6, 1.0 - 1e-6);
    let wz = linear(ctx, pooled, "head.width_w", Some("head.width_b"));
    let widths = ctx.g.softplus(wz);
    let widths = ctx.g.clamp(widths, cfg.sigma_min, cfg.sigma_max);
    (0..np)
        .map(|i| {
            (
                ctx.g.slice_cols(centers, i, 1),
                ctx.g.slice_cols(widths, i, 1),
            )
        })
        .collect()
}

/// Cross-modal hidden states at the masked positions, `k x D`, for the
/// proposal given by the `T x 1` weights.
pub fn fuse(
    ctx: &mut Ctx,
    cfg: &FusionConfig,
    vproj: Var,
    weights: Var,
    q_enc: Var,
    mask_positions: &[usize],
) -> Var {
    let frames = ctx.g.value(vproj).rows();
    let scaled = ctx.g.mul_col(vproj, weights);
    let pe = ctx.g.constant(positional(frames, cfg.hidden_dim));
    let mut mem = ctx.g.add(scaled, pe);
    for l in 0..cfg.layers {
        mem = block(ctx, cfg, mem, mem, &format!("venc.{l}"));
    }
    let mut h = q_enc;
    for l in 0..cfg.layers {
        h = block(ctx, cfg, h, mem, &format!("dec.{l}"));
    }
    ctx.g.gather_rows(h, mask_positions)
}

/// The shared vocabulary projection.
pub fn project_var(ctx: &mut Ctx, hidden: Var) -> Var {
    linear(ctx, hidden, "proj.w", Some("proj.b"))
}

impl Model {
    fn proposal_values(ctx: &Ctx, heads: &[(Var, Var)]) -> Vec<(f64, f64)> {
        heads
            .iter()
            .map(|&(c, s)| (ctx.g.value(c).item(), ctx.g.value(s).item()))
            .collect()
    }

    /// Evaluation-mode fusion of a video under the given proposal weights.
    pub fn encode(
        &self,
        v: &VideoFeatures,
        q: &MaskedQuery,
        weights: &TemporalWeights,
    ) -> Result<FusionOutput> {
        let cfg = &self.config.fusion;
        cfg.check_inputs(v, q)?;
        if weights.0.len() != v.frame_count() {
            return Err(CcrError::Shape(format!(
                "{} weights for {} frames",
                weights.0.len(),
                v.frame_count()
            )));
        }
        let mut ctx = Ctx::eval(&self.params);
        let q_enc = query_encode(&mut ctx, cfg, &q.tokens);
        let vproj = video_project(&mut ctx, &v.frames);
        let heads = proposal_head(&mut ctx, cfg, vproj, q_enc);
        let w = ctx.g.constant(weights.to_column());
        let hidden = fuse(&mut ctx, cfg, vproj, w, q_enc, &q.mask_positions);
        Ok(FusionOutput {
            masked_hidden: ctx.g.value(hidden).clone(),
            proposal_params: Self::proposal_values(&ctx, &heads),
        })
    }

    /// Positives from the prediction head, their flanking negatives, and the
    /// whole-video reference.
    pub fn propose(&self, v: &VideoFeatures, q: &MaskedQuery) -> Result<ProposalSet> {
        let cfg = &self.config.fusion;
        cfg.check_inputs(v, q)?;
        let mut ctx = Ctx::eval(&self.params);
        let q_enc = query_encode(&mut ctx, cfg, &q.tokens);
        let vproj = video_project(&mut ctx, &v.frames);
        let heads = proposal_head(&mut ctx, cfg, vproj, q_enc);
        let positives = Self::proposal_values(&ctx, &heads)
            .into_iter()
            .map(|(c, s)| Proposal::positive(c, s))
            .collect::<Result<Vec<_>>>()?;
        ProposalSet::from_positives(positives, &self.config.mining)
    }

    /// Affine map of hidden rows to vocabulary logits.
    pub fn project(&self, hidden: &Mat) -> Result<Mat> {
        if hidden.cols() != self.config.fusion.hidden_dim {
            return Err(CcrError::Shape(format!(
                "hidden width {} != {}",
                hidden.cols(),
                self.config.fusion.hidden_dim
            )));
        }
        let mut ctx = Ctx::eval(&self.params);
        let h = ctx.g.constant(hidden.clone());
        let out = project_var(&mut ctx, h);
        Ok(ctx.g.value(out).clone())
    }

    /// Query-only hidden states at the masked positions.
    pub fn query_hidden(&self, q: &MaskedQuery) -> Result<Mat> {
        let cfg = &self.config.fusion;
        if let Some(&t) = q.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(CcrError::Shape(format!("token id {t} outside vocabulary")));
        }
        let mut ctx = Ctx::eval(&self.params);
        let q_enc = query_encode(&mut ctx, cfg, &q.tokens);
        let h = ctx.g.gather_rows(q_enc, &q.mask_positions);
        Ok(ctx.g.value(h).clone())
    }
}
