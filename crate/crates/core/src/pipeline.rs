//! The per-pair forward pass over all proposal roles and the two training
//! objectives built on it.
//!
//! A mini-batch is one graph. The main objective (reconstruction, contrastive,
//! query and diversity terms) reaches every parameter except `mu`, which
//! enters that path as a constant. The alignment objective reaches `mu` only:
//! its reference logits are constants, the side branch is detached and the
//! aggregator parameters are frozen copies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Mat, Var};
use crate::ccr::{aggregate_var, aggregator_params, counterfactual_main, CounterfactualStrategy};
use crate::data::{MaskedQuery, VideoFeatures};
use crate::error::{CcrError, Result};
use crate::fusion::{fuse, project_var, proposal_head, query_encode, video_project};
use crate::losses::{contrastive_loss_var, kl_var, recon_loss_var, LossBundle, Margins};
use crate::model::{Ctx, Model, MU_PARAM};
use crate::proposals::{diversity_loss_var, gaussian_weights_var, mine_negative_centers_var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub margins: Margins,
    /// Target self-similarity in the diversity loss.
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            margins: Margins::default(),
            lambda: 0.15,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.margins.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(CcrError::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// One video with a masked query.
#[derive(Clone, Copy, Debug)]
pub struct PairSample<'a> {
    pub video: &'a VideoFeatures,
    pub query: &'a MaskedQuery,
}

#[derive(Clone, Copy, Debug)]
struct Role {
    phi: Var,
    q_hat: Var,
}

struct PairVars {
    psi: Var,
    /// `(positive, left negative, right negative)` per positive.
    triplets: Vec<[Role; 3]>,
    reference: Role,
    positive_weights: Vec<Var>,
    targets: Vec<usize>,
}

fn role(ctx: &mut Ctx, model: &Model, vproj: Var, weights: Var, q_enc: Var, psi: Var, q: &MaskedQuery) -> Role {
    let cfg = &model.config.fusion;
    let hidden = fuse(ctx, cfg, vproj, weights, q_enc, &q.mask_positions);
    let phi = project_var(ctx, hidden);
    let agg = aggregator_params(ctx, model.config.ccr.aggregator, false);
    let q_hat = aggregate_var(&mut ctx.g, model.config.ccr.aggregator, phi, psi, agg);
    Role { phi, q_hat }
}

fn forward_pair(ctx: &mut Ctx, model: &Model, s: PairSample) -> Result<PairVars> {
    let cfg = &model.config.fusion;
    cfg.check_inputs(s.video, s.query)?;
    let frames = s.video.frame_count();
    let q_enc = query_encode(ctx, cfg, &s.query.tokens);
    let vproj = video_project(ctx, &s.video.frames);
    let heads = proposal_head(ctx, cfg, vproj, q_enc);
    let q_mask = ctx.g.gather_rows(q_enc, &s.query.mask_positions);
    let psi = project_var(ctx, q_mask);

    let mut triplets = Vec::with_capacity(heads.len());
    let mut positive_weights = Vec::with_capacity(heads.len());
    for (c, sigma) in heads {
        let wp = gaussian_weights_var(&mut ctx.g, c, sigma, frames);
        let (l, r) = mine_negative_centers_var(&mut ctx.g, c, sigma, &model.config.mining);
        let wl = gaussian_weights_var(&mut ctx.g, l, sigma, frames);
        let wr = gaussian_weights_var(&mut ctx.g, r, sigma, frames);
        positive_weights.push(wp);
        triplets.push([
            role(ctx, model, vproj, wp, q_enc, psi, s.query),
            role(ctx, model, vproj, wl, q_enc, psi, s.query),
            role(ctx, model, vproj, wr, q_enc, psi, s.query),
        ]);
    }
    let ones = ctx.g.constant(Mat::filled(frames, 1, 1.0));
    let reference = role(ctx, model, vproj, ones, q_enc, psi, s.query);
    Ok(PairVars {
        psi,
        triplets,
        reference,
        positive_weights,
        targets: s.query.targets.clone(),
    })
}

/// Mean main-branch row of a pair over its positives, as a constant.
fn mean_positive_phi(g: &Graph, p: &PairVars) -> Mat {
    let vocab = g.value(p.psi).cols();
    let mut acc = vec![0.0; vocab];
    let mut rows = 0usize;
    for t in &p.triplets {
        let m = g.value(t[0].phi);
        for r in 0..m.rows() {
            for (a, b) in acc.iter_mut().zip(m.row(r)) {
                *a += b;
            }
        }
        rows += m.rows();
    }
    Mat::row_vector(acc.into_iter().map(|v| v / rows as f64).collect())
}

/// Gradient probes for the two-group update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IsolationProbe {
    /// Largest `|d l_kl / d theta|` over every parameter other than `mu`.
    pub kl_leak: f64,
    /// `|d l / d mu|` under the main objective.
    pub mu_under_main: f64,
}

impl IsolationProbe {
    pub fn is_clean(&self) -> bool {
        self.kl_leak == 0.0 && self.mu_under_main == 0.0
    }
}

pub struct Objective {
    pub losses: LossBundle,
    /// Gradients of the main objective.
    pub main: Gradients,
    /// Gradients of the alignment objective.
    pub kl: Gradients,
    pub probe: IsolationProbe,
}

/// Builds both objectives for a mini-batch and differentiates them.
///
/// Losses are averaged over the pairs. `cf_rng` drives the
/// `random_selected` strategy; `dropout_rng` feeds dropout when enabled.
pub fn batch_objective(
    model: &Model,
    samples: &[PairSample],
    cfg: &ObjectiveConfig,
    dropout_rng: ChaCha8Rng,
    cf_rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    if samples.is_empty() {
        return Err(CcrError::Data("empty batch".into()));
    }
    let ccr = model.config.ccr;
    let mut ctx = Ctx::train(&model.params, model.config.fusion.dropout, dropout_rng);
    let pairs = samples
        .iter()
        .map(|&s| forward_pair(&mut ctx, model, s))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<Mat> = pairs.iter().map(|p| mean_positive_phi(&ctx.g, p)).collect();
    let vocab = model.config.fusion.vocab_size;
    let n = pairs.len() as f64;

    let mut bundle = LossBundle {
        alpha_p: cfg.margins.alpha_p,
        alpha_n: cfg.margins.alpha_n,
        ..LossBundle::default()
    };
    let mut main_terms = Vec::with_capacity(pairs.len());
    let mut kl_terms = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let rows = p.targets.len();
        let (cf_main, cf_main_kl) = match ccr.strategy {
            CounterfactualStrategy::Uniform => {
                let frozen = ctx.frozen_param(MU_PARAM);
                let live = ctx.param(MU_PARAM);
                (
                    ctx.g.broadcast(frozen, rows, vocab),
                    ctx.g.broadcast(live, rows, vocab),
                )
            }
            strategy => {
                let m = counterfactual_main(strategy, 0.0, &means, i, rows, vocab, cf_rng)?;
                let v = ctx.g.constant(m);
                (v, v)
            }
        };
        let agg = aggregator_params(&mut ctx, ccr.aggregator, false);
        let q_cf = aggregate_var(&mut ctx.g, ccr.aggregator, cf_main, p.psi, agg);

        let recon = |ctx: &mut Ctx, r: Role| {
            let debiased = ccr.enabled.then(|| ctx.g.sub(r.q_hat, q_cf));
            recon_loss_var(&mut ctx.g, debiased, r.q_hat, &p.targets)
        };
        let lr = recon(&mut ctx, p.reference);
        let mut hinges = Vec::with_capacity(p.triplets.len());
        let k = p.triplets.len() as f64;
        for t in &p.triplets {
            let [lp, ln1, ln2] = t.map(|r| recon(&mut ctx, r));
            bundle.lc_p += ctx.g.value(lp).item() / k / n;
            bundle.lc_n1 += ctx.g.value(ln1).item() / k / n;
            bundle.lc_n2 += ctx.g.value(ln2).item() / k / n;
            hinges.push(contrastive_loss_var(&mut ctx.g, lp, lr, ln1, ln2, cfg.margins));
        }
        bundle.lc_r += ctx.g.value(lr).item() / n;
        let l_c = hinges[1..].iter().fold(hinges[0], |acc, &h| ctx.g.add(acc, h));
        let l_q = ctx.g.cross_entropy(p.psi, &p.targets);
        let l_div = diversity_loss_var(&mut ctx.g, &p.positive_weights, cfg.lambda);
        bundle.l_c += ctx.g.value(l_c).item() / n;
        bundle.l_q += ctx.g.value(l_q).item() / n;
        bundle.l_div += ctx.g.value(l_div).item() / n;
        let s = ctx.g.add(l_c, l_q);
        main_terms.push(ctx.g.add(s, l_div));

        if ccr.enabled {
            let psi = ctx.g.detach(p.psi);
            let agg = aggregator_params(&mut ctx, ccr.aggregator, true);
            let q_cf = aggregate_var(&mut ctx.g, ccr.aggregator, cf_main_kl, psi, agg);
            // per-role means over the triplets, summed over the four roles
            let mut kl = None;
            for slot in 0..3 {
                for t in &p.triplets {
                    let reference = ctx.g.value(t[slot].q_hat).clone();
                    let term = kl_var(&mut ctx.g, &reference, q_cf);
                    let term = ctx.g.scale(term, 1.0 / k);
                    kl = Some(kl.map_or(term, |acc| ctx.g.add(acc, term)));
                }
            }
            let reference = ctx.g.value(p.reference.q_hat).clone();
            let term = kl_var(&mut ctx.g, &reference, q_cf);
            let kl = ctx.g.add(kl.expect("at least one positive"), term);
            bundle.l_kl += ctx.g.value(kl).item() / n;
            kl_terms.push(kl);
        }
    }
    bundle.total = bundle.l_c + bundle.l_q + bundle.l_div;

    let main_sum = main_terms[1..].iter().fold(main_terms[0], |acc, &t| ctx.g.add(acc, t));
    let main_root = ctx.g.scale(main_sum, 1.0 / n);
    let main = ctx.g.backward(main_root);
    let kl = match kl_terms.split_first() {
        Some((&first, rest)) => {
            let sum = rest.iter().fold(first, |acc, &t| ctx.g.add(acc, t));
            let root = ctx.g.scale(sum, 1.0 / n);
            ctx.g.backward(root)
        }
        None => Gradients::default(),
    };

    let mu_slot = model.mu_slot();
    let probe = IsolationProbe {
        kl_leak: kl
            .iter()
            .filter(|(s, _)| *s != mu_slot)
            .flat_map(|(_, m)| m.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max),
        mu_under_main: main.get(mu_slot).map_or(0.0, |m| m.item().abs()),
    };
    Ok(Objective {
        losses: bundle,
        main,
        kl,
        probe,
    })
}

/// The main objective alone, for finite-difference checks.
pub fn main_loss(model: &Model, samples: &[PairSample], cfg: &ObjectiveConfig) -> Result<f64> {
    let mut rng = crate::rng::rng_for(&[0]);
    let dropout = crate::rng::rng_for(&[rng.random()]);
    Ok(batch_objective(model, samples, cfg, dropout, &mut rng)?.losses.total)
}
