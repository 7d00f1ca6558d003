//! Counterfactual cross-modality reasoning.
//!
//! The reconstruction of a masked query is split into a main branch driven by
//! the cross-modal fusion (`phi = proj(fuse(S, q))`) and a side branch driven
//! by the masked query alone (`psi = proj(q)`). The two are aggregated into
//! `q_hat = rho(phi, psi)`. Replacing `phi` by counterfactual knowledge that
//! carries no video information gives `q_cf = rho(mu, psi)`, and the
//! difference `q_hat - q_cf` keeps only the effect that flows through the
//! video.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::data::MaskedQuery;
use crate::error::{CcrError, Result};
use crate::fusion::FusionOutput;
use crate::model::{CcrConfig, Ctx, Model, MU_PARAM};

const AGG_W: &str = "ccr.agg.w";
const AGG_B: &str = "ccr.agg.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    /// `x * sigmoid(y)`
    SigmoidGate,
    /// `sigmoid(x + y)`
    SumSigmoid,
    /// `[x; y] W + b`
    LearnedConcat,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 3] = [
        AggregatorKind::SigmoidGate,
        AggregatorKind::SumSigmoid,
        AggregatorKind::LearnedConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::SigmoidGate => "sigmoid_gate",
            AggregatorKind::SumSigmoid => "sum_sigmoid",
            AggregatorKind::LearnedConcat => "learned_concat",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregatorKind {
    type Err = CcrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CcrError::Config(format!("unknown aggregator {s:?}")))
    }
}

/// How the counterfactual replacement for the main branch is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualStrategy {
    /// A learnable constant logit `mu` everywhere.
    Uniform,
    /// The mean main-branch logits of the mini-batch.
    Average,
    /// The main-branch logits of another, randomly drawn, batch element.
    RandomSelected,
}

impl CounterfactualStrategy {
    pub const ALL: [CounterfactualStrategy; 3] = [
        CounterfactualStrategy::Uniform,
        CounterfactualStrategy::Average,
        CounterfactualStrategy::RandomSelected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CounterfactualStrategy::Uniform => "uniform",
            CounterfactualStrategy::Average => "average",
            CounterfactualStrategy::RandomSelected => "random_selected",
        }
    }
}

impl fmt::Display for CounterfactualStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CounterfactualStrategy {
    type Err = CcrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CcrError::Config(format!("unknown counterfactual strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Main,
    Side,
    Aggregated,
    Counterfactual,
    Debiased,
}

/// Vocabulary logits, one row per masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconLogits {
    pub values: Mat,
    pub branch: Branch,
}

impl ReconLogits {
    pub fn new(values: Mat, branch: Branch) -> Result<Self> {
        if !values.is_finite() {
            return Err(CcrError::Data(format!("{branch:?} logits are not finite")));
        }
        Ok(Self { values, branch })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.values.rows()).map(|r| self.values.argmax_row(r)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterfactualKnowledge {
    pub strategy: CounterfactualStrategy,
    pub mu: f64,
}

/// An aggregation function with its parameters, if it has any.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator {
    SigmoidGate,
    SumSigmoid,
    LearnedConcat { weight: Mat, bias: Mat },
}

impl Aggregator {
    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::SigmoidGate => AggregatorKind::SigmoidGate,
            Aggregator::SumSigmoid => AggregatorKind::SumSigmoid,
            Aggregator::LearnedConcat { .. } => AggregatorKind::LearnedConcat,
        }
    }

    pub fn of_model(model: &Model) -> Self {
        match model.config.ccr.aggregator {
            AggregatorKind::SigmoidGate => Aggregator::SigmoidGate,
            AggregatorKind::SumSigmoid => Aggregator::SumSigmoid,
            AggregatorKind::LearnedConcat => Aggregator::LearnedConcat {
                weight: model.params.get(AGG_W).expect("aggregator weight").clone(),
                bias: model.params.get(AGG_B).expect("aggregator bias").clone(),
            },
        }
    }
}

pub(crate) fn init_params(cfg: &CcrConfig, vocab: usize, params: &mut ParamStore) {
    params.insert(MU_PARAM, Mat::scalar(0.0));
    if cfg.aggregator == AggregatorKind::LearnedConcat {
        // starts as the identity on the main branch
        let mut w = Mat::zeros(2 * vocab, vocab);
        for i in 0..vocab {
            w.set(i, i, 1.0);
        }
        params.insert(AGG_W, w);
        params.insert(AGG_B, Mat::zeros(1, vocab));
    }
}

/// `rho(x, y)` on the graph. `params` are the learned-concat weight and bias.
pub fn aggregate_var(
    g: &mut Graph,
    kind: AggregatorKind,
    x: Var,
    y: Var,
    params: Option<(Var, Var)>,
) -> Var {
    match kind {
        AggregatorKind::SigmoidGate => {
            let gate = g.sigmoid(y);
            g.mul(x, gate)
        }
        AggregatorKind::SumSigmoid => {
            let s = g.add(x, y);
            g.sigmoid(s)
        }
        AggregatorKind::LearnedConcat => {
            let (w, b) = params.expect("learned_concat needs parameters");
            let cat = g.concat_cols(&[x, y]);
            let out = g.matmul(cat, w);
            g.add_row(out, b)
        }
    }
}

/// Binds the aggregator parameters of the model, trainable or frozen.
pub(crate) fn aggregator_params(ctx: &mut Ctx, kind: AggregatorKind, frozen: bool) -> Option<(Var, Var)> {
    (kind == AggregatorKind::LearnedConcat).then(|| {
        if frozen {
            (ctx.frozen_param(AGG_W), ctx.frozen_param(AGG_B))
        } else {
            (ctx.param(AGG_W), ctx.param(AGG_B))
        }
    })
}

/// The `rows x V` matrix standing in for the main branch.
///
/// `batch_means` holds one mean main-branch row (`1 x V`) per batch element;
/// `own` indexes the element being reconstructed; an out-of-range `own`
/// lets `random_selected` draw from the whole batch.
pub fn counterfactual_main<R: Rng + ?Sized>(
    strategy: CounterfactualStrategy,
    mu: f64,
    batch_means: &[Mat],
    own: usize,
    rows: usize,
    vocab: usize,
    rng: &mut R,
) -> Result<Mat> {
    match strategy {
        CounterfactualStrategy::Uniform => Ok(Mat::filled(rows, vocab, mu)),
        CounterfactualStrategy::Average | CounterfactualStrategy::RandomSelected
            if batch_means.is_empty() =>
        {
            Err(CcrError::Data(format!(
                "{strategy} counterfactual needs a non-empty batch"
            )))
        }
        CounterfactualStrategy::Average => {
            let mut mean = vec![0.0; vocab];
            for m in batch_means {
                for (a, b) in mean.iter_mut().zip(m.data()) {
                    *a += b;
                }
            }
            let n = batch_means.len() as f64;
            Ok(broadcast_row(&mean.iter().map(|v| v / n).collect::<Vec<_>>(), rows))
        }
        CounterfactualStrategy::RandomSelected => {
            let n = batch_means.len();
            let pick = if n == 1 {
                0
            } else if own >= n {
                rng.random_range(0..n)
            } else {
                let k = rng.random_range(0..n - 1);
                if k >= own {
                    k + 1
                } else {
                    k
                }
            };
            Ok(broadcast_row(batch_means[pick].data(), rows))
        }
    }
}

fn broadcast_row(row: &[f64], rows: usize) -> Mat {
    let mut m = Mat::zeros(rows, row.len());
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

fn check_same(a: &ReconLogits, b: &ReconLogits) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(CcrError::Shape(format!(
            "{:?} logits {:?} vs {:?} logits {:?}",
            a.branch,
            a.values.shape(),
            b.branch,
            b.values.shape()
        )));
    }
    Ok(())
}

/// `phi = proj(hidden)` for a fused proposal.
pub fn main_branch(model: &Model, fused: &FusionOutput) -> Result<ReconLogits> {
    ReconLogits::new(model.project(&fused.masked_hidden)?, Branch::Main)
}

/// `psi = proj(query-only hidden states at the masked positions)`.
pub fn side_branch(model: &Model, q: &MaskedQuery) -> Result<ReconLogits> {
    ReconLogits::new(model.project(&model.query_hidden(q)?)?, Branch::Side)
}

pub fn aggregate(x: &ReconLogits, y: &ReconLogits, agg: &Aggregator) -> Result<ReconLogits> {
    check_same(x, y)?;
    let mut g = Graph::new();
    let xv = g.constant(x.values.clone());
    let yv = g.constant(y.values.clone());
    let params = match agg {
        Aggregator::LearnedConcat { weight, bias } => {
            let v = x.values.cols();
            if weight.shape() != (2 * v, v) || bias.shape() != (1, v) {
                return Err(CcrError::Shape(format!(
                    "learned aggregator {:?}/{:?} for vocabulary {v}",
                    weight.shape(),
                    bias.shape()
                )));
            }
            Some((g.constant(weight.clone()), g.constant(bias.clone())))
        }
        _ => None,
    };
    let out = aggregate_var(&mut g, agg.kind(), xv, yv, params);
    ReconLogits::new(g.value(out).clone(), Branch::Aggregated)
}

/// `rho(counterfactual main, psi)`.
pub fn counterfactual_logits<R: Rng + ?Sized>(
    ck: &CounterfactualKnowledge,
    psi: &ReconLogits,
    batch_mains: &[ReconLogits],
    agg: &Aggregator,
    rng: &mut R,
) -> Result<ReconLogits> {
    let means: Vec<Mat> = batch_mains
        .iter()
        .map(|m| {
            let mut g = Graph::new();
            let v = g.constant(m.values.clone());
            let r = g.mean_rows(v);
            g.value(r).clone()
        })
        .collect();
    let (rows, vocab) = psi.values.shape();
    if means.iter().any(|m| m.cols() != vocab) {
        return Err(CcrError::Shape("batch logits vocabulary mismatch".into()));
    }
    let main = counterfactual_main(ck.strategy, ck.mu, &means, usize::MAX, rows, vocab, rng)?;
    let main = ReconLogits::new(main, Branch::Main)?;
    let mut out = aggregate(&main, psi, agg)?;
    out.branch = Branch::Counterfactual;
    Ok(out)
}

/// `q_hat - q_cf`; apply softmax where a distribution is needed.
pub fn debias(q_hat: &ReconLogits, q_cf: &ReconLogits) -> Result<ReconLogits> {
    check_same(q_hat, q_cf)?;
    ReconLogits::new(
        q_hat.values.zip_map(&q_cf.values, |a, b| a - b),
        Branch::Debiased,
    )
}
