//! Training objectives.
//!
//! Each loss has a value-level function operating on plain logits and a
//! graph-level builder used by the trainer. The two share their definitions
//! and are tested against each other and against scalar oracles.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, softmax_rows, Graph, Mat, Var};
use crate::ccr::ReconLogits;
use crate::error::{CcrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub alpha_p: f64,
    pub alpha_n: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            alpha_p: 0.2,
            alpha_n: 0.1,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_p >= 0.0 && self.alpha_n >= 0.0 && self.alpha_p.is_finite() && self.alpha_n.is_finite()) {
            return Err(CcrError::Config(format!("margins must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Loss values of one training step, averaged over the pairs of the batch.
///
/// The per-role reconstruction losses are means over the proposal
/// triplets; `l_c` sums its hinges over the triplets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub lc_p: f64,
    pub lc_r: f64,
    pub lc_n1: f64,
    pub lc_n2: f64,
    pub l_c: f64,
    pub l_q: f64,
    pub l_div: f64,
    pub total: f64,
    pub l_kl: f64,
    pub alpha_p: f64,
    pub alpha_n: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.lc_p, self.lc_r, self.lc_n1, self.lc_n2, self.l_c, self.l_q, self.l_div, self.total, self.l_kl,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_targets(logits: &Mat, targets: &[usize]) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(CcrError::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(CcrError::Data("no masked positions to reconstruct".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(CcrError::Data(format!(
            "target id {t} outside vocabulary of {}",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against `targets`.
pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets)?;
    let lp = log_softmax_rows(logits);
    let total: f64 = targets.iter().enumerate().map(|(r, &t)| -lp.get(r, t)).sum();
    Ok(total / targets.len() as f64)
}

/// `CE(softmax(debiased)) + CE(softmax(q_hat))`.
pub fn recon_loss(debiased: &ReconLogits, q_hat: &ReconLogits, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy(&debiased.values, targets)? + cross_entropy(&q_hat.values, targets)?)
}

pub fn contrastive_loss(lp: f64, lr: f64, ln1: f64, ln2: f64, margins: Margins) -> f64 {
    (margins.alpha_p + lp - lr).max(0.0)
        + (margins.alpha_n + lp - ln1).max(0.0)
        + (margins.alpha_n + lp - ln2).max(0.0)
}

pub fn query_loss(psi: &ReconLogits, targets: &[usize]) -> Result<f64> {
    cross_entropy(&psi.values, targets)
}

pub fn total_loss(l_c: f64, l_q: f64, l_div: f64) -> f64 {
    l_c + l_q + l_div
}

/// Row-mean of `KL(softmax(p) || softmax(q))`.
pub fn kl_rows(p: &Mat, q: &Mat) -> Result<f64> {
    if p.shape() != q.shape() || p.rows() == 0 {
        return Err(CcrError::Shape(format!("kl between {:?} and {:?}", p.shape(), q.shape())));
    }
    let lp = log_softmax_rows(p);
    let lq = log_softmax_rows(q);
    let pp = softmax_rows(p);
    let mut total = 0.0;
    for i in 0..p.len() {
        let w = pp.data()[i];
        if w > 0.0 {
            total += w * (lp.data()[i] - lq.data()[i]);
        }
    }
    Ok((total / p.rows() as f64).max(0.0))
}

/// Sum over proposal roles of the row-mean KL to the counterfactual.
pub fn kl_loss(q_stars: &[&ReconLogits], q_cf: &ReconLogits) -> Result<f64> {
    q_stars.iter().map(|q| kl_rows(&q.values, &q_cf.values)).sum()
}

/// Graph form of the reconstruction loss. `debiased = None` drops the
/// rectified term, as in the model with CCR disabled.
pub fn recon_loss_var(g: &mut Graph, debiased: Option<Var>, q_hat: Var, targets: &[usize]) -> Var {
    let plain = g.cross_entropy(q_hat, targets);
    match debiased {
        Some(d) => {
            let rect = g.cross_entropy(d, targets);
            g.add(rect, plain)
        }
        None => plain,
    }
}

pub fn contrastive_loss_var(g: &mut Graph, lp: Var, lr: Var, ln1: Var, ln2: Var, margins: Margins) -> Var {
    let hinge = |g: &mut Graph, other: Var, alpha: f64| {
        let d = g.sub(lp, other);
        let d = g.add_const(d, alpha);
        g.relu(d)
    };
    let a = hinge(g, lr, margins.alpha_p);
    let b = hinge(g, ln1, margins.alpha_n);
    let c = hinge(g, ln2, margins.alpha_n);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Graph form of one KL term. `reference` is held constant.
pub fn kl_var(g: &mut Graph, reference: &Mat, q_cf: Var) -> Var {
    let rows = reference.rows() as f64;
    let p = softmax_rows(reference);
    let lp = log_softmax_rows(reference);
    let neg_entropy: f64 = p
        .data()
        .iter()
        .zip(lp.data())
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, l)| w * l)
        .sum();
    let pv = g.constant(p);
    let lq = g.log_softmax_rows(q_cf);
    let cross = g.mul(pv, lq);
    let cross = g.sum(cross);
    let cross = g.neg(cross);
    let kl = g.add_const(cross, neg_entropy);
    g.scale(kl, 1.0 / rows)
}
