use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ccr::{aggregate, counterfactual_logits, debias, main_branch, side_branch, Aggregator, CounterfactualKnowledge, ReconLogits};
use crate::data::{mask_query, DatasetRecord, MaskedQuery, TokenizedQuery, VideoFeatures, Vocab};
use crate::error::{CcrError, Result};
use crate::eval::metrics::{evaluate, vote_select, EvalReport, Segment};
use crate::losses::cross_entropy;
use crate::model::Model;
use crate::proposals::{weights_to_segment, Proposal, ProposalSet};
use crate::rng::{derive_seed, rng_for, stream};

/// Ranked segments of one record, best first, with the reconstruction loss
/// that scored each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub segments: Vec<Segment>,
    pub scores: Vec<f64>,
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Evaluation masks depend only on the record, never on run order.
pub fn eval_mask(video_id: &str, q: &TokenizedQuery, p_mask: f64, vocab: &Vocab, seed: u64) -> Result<MaskedQuery> {
    let key = derive_seed(&[seed, stable_hash(video_id), stable_hash(&q.text)]);
    mask_query(q, p_mask, vocab, &mut rng_for(&[key, stream::EVAL_MASK]))
}

/// Reconstruction losses of one proposal role.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleLoss {
    /// Cross-entropy of `softmax(q_hat - q_cf)`.
    pub debiased: f64,
    /// Cross-entropy of `softmax(q_hat)`.
    pub plain: f64,
}

/// Every proposal of a record, scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredProposals {
    pub set: ProposalSet,
    pub positives: Vec<RoleLoss>,
    /// `(left, right)` per positive.
    pub negatives: Vec<(RoleLoss, RoleLoss)>,
    pub reference: RoleLoss,
    /// Loss each positive is ranked by: debiased with CCR, plain without.
    pub ranking: Vec<f64>,
}

fn logits_for(model: &Model, v: &VideoFeatures, q: &MaskedQuery, p: &Proposal) -> Result<ReconLogits> {
    let weights = p.weights(v.frame_count())?;
    main_branch(model, &model.encode(v, q, &weights)?)
}

/// Scores all proposals the model emits for `(v, q)`.
pub fn score_proposals(model: &Model, v: &VideoFeatures, q: &MaskedQuery) -> Result<ScoredProposals> {
    let set = model.propose(v, q)?;
    let agg = Aggregator::of_model(model);
    let psi = side_branch(model, q)?;
    let pos_phi = set
        .positives
        .iter()
        .map(|p| logits_for(model, v, q, p))
        .collect::<Result<Vec<_>>>()?;
    let ck = CounterfactualKnowledge {
        strategy: model.config.ccr.strategy,
        mu: model.mu(),
    };
    let mut rng = rng_for(&[stable_hash(&v.video_id), stream::COUNTERFACTUAL]);
    let q_cf = counterfactual_logits(&ck, &psi, &pos_phi, &agg, &mut rng)?;
    let score = |phi: &ReconLogits| -> Result<RoleLoss> {
        let q_hat = aggregate(phi, &psi, &agg)?;
        Ok(RoleLoss {
            debiased: cross_entropy(&debias(&q_hat, &q_cf)?.values, &q.targets)?,
            plain: cross_entropy(&q_hat.values, &q.targets)?,
        })
    };
    let positives = pos_phi.iter().map(&score).collect::<Result<Vec<_>>>()?;
    let negatives = set
        .negatives
        .iter()
        .map(|(l, r)| Ok((score(&logits_for(model, v, q, l)?)?, score(&logits_for(model, v, q, r)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let reference = score(&logits_for(model, v, q, &set.reference)?)?;
    let ranking = positives
        .iter()
        .map(|l| if model.config.ccr.enabled { l.debiased } else { l.plain })
        .collect();
    Ok(ScoredProposals {
        set,
        positives,
        negatives,
        reference,
        ranking,
    })
}

/// Vote winner first, remaining positives by ascending loss.
pub fn rank_scored(video_id: &str, scored: &ScoredProposals, duration_s: f64, gamma: f64) -> Result<Prediction> {
    let segments: Vec<Segment> = scored
        .set
        .positives
        .iter()
        .map(|p| weights_to_segment(p, duration_s, gamma))
        .collect();
    let winner = vote_select(&segments, &scored.ranking)?;
    let mut rest: Vec<usize> = (0..segments.len()).filter(|&i| i != winner).collect();
    rest.sort_by(|&a, &b| scored.ranking[a].total_cmp(&scored.ranking[b]).then(a.cmp(&b)));
    let order: Vec<usize> = std::iter::once(winner).chain(rest).collect();
    Ok(Prediction {
        video_id: video_id.to_string(),
        segments: order.iter().map(|&i| segments[i]).collect(),
        scores: order.iter().map(|&i| scored.ranking[i]).collect(),
    })
}

pub fn rank_proposals(model: &Model, v: &VideoFeatures, q: &MaskedQuery, gamma: f64) -> Result<Prediction> {
    rank_scored(&v.video_id, &score_proposals(model, v, q)?, v.duration_s, gamma)
}

/// Predictions for every record, plus the report over those with a
/// ground-truth span.
pub fn predict_dataset(
    model: &Model,
    records: &[(DatasetRecord, VideoFeatures)],
    vocab: &Vocab,
    p_mask: f64,
    gamma: f64,
    seed: u64,
) -> Result<(Vec<Prediction>, EvalReport)> {
    let preds = records
        .iter()
        .map(|(r, v)| {
            let q = eval_mask(&r.video_id, &r.query, p_mask, vocab, seed)?;
            rank_scored(&r.video_id, &score_proposals(model, v, &q)?, r.duration_s, gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked: Vec<Vec<Segment>> = preds.iter().map(|p| p.segments.clone()).collect();
    let gts: Vec<Option<Segment>> = records.iter().map(|(r, _)| r.gt_span).collect();
    let report = evaluate(&ranked, &gts)?;
    Ok((preds, report))
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).expect("prediction serializes");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| CcrError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path).map_err(|e| CcrError::io(path, e))?;
    let mut preds = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CcrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        preds.push(
            serde_json::from_str(&line)
                .map_err(|e| CcrError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(preds)
}
