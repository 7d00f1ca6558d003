//! Gaussian temporal proposals over normalized video time `[0, 1]`.
//!
//! Frame `t` of a `T`-frame video sits at normalized time `t / (T - 1)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{CcrError, Result};

pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Positive,
    Negative,
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub center: f64,
    pub width: f64,
    pub kind: ProposalKind,
}

impl Proposal {
    pub fn new(center: f64, width: f64, kind: ProposalKind) -> Result<Self> {
        if !(center > 0.0 && center < 1.0) {
            return Err(CcrError::Data(format!("proposal center {center} outside (0, 1)")));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(CcrError::Data(format!("proposal width {width} must be positive")));
        }
        Ok(Self {
            center,
            width,
            kind,
        })
    }

    pub fn positive(center: f64, width: f64) -> Result<Self> {
        Self::new(center, width, ProposalKind::Positive)
    }

    /// The whole video. Its weights are uniform and, with `gamma = 1`, its
    /// segment is `[0, duration]`.
    pub fn reference() -> Self {
        Self {
            center: 0.5,
            width: 0.5,
            kind: ProposalKind::Reference,
        }
    }

    pub fn weights(&self, frames: usize) -> Result<TemporalWeights> {
        match self.kind {
            ProposalKind::Reference => Ok(TemporalWeights(vec![1.0; frames])),
            _ => gaussian_weights(self.center, self.width, frames),
        }
    }
}

/// Non-negative per-frame weights with peak 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWeights(pub Vec<f64>);

impl TemporalWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_column(&self) -> Mat {
        Mat::column(self.0.clone())
    }
}

/// Heuristic for the two intra-video negatives flanking a positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeMining {
    pub delta: f64,
    pub eps: f64,
    pub min_width: f64,
}

impl Default for NegativeMining {
    fn default() -> Self {
        Self {
            delta: 3.0,
            eps: 0.01,
            min_width: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub positives: Vec<Proposal>,
    /// `negatives[j] = (n1, n2)` flank `positives[j]`.
    pub negatives: Vec<(Proposal, Proposal)>,
    pub reference: Proposal,
}

impl ProposalSet {
    pub fn from_positives(positives: Vec<Proposal>, mining: &NegativeMining) -> Result<Self> {
        let negatives = positives
            .iter()
            .map(|p| mine_negatives(p, mining))
            .collect::<Result<_>>()?;
        Ok(Self {
            positives,
            negatives,
            reference: Proposal::reference(),
        })
    }

    pub fn negative_count(&self) -> usize {
        2 * self.negatives.len()
    }
}

/// `exp(-(t/(T-1) - c)^2 / (2 sigma^2))`, divided by its maximum.
pub fn gaussian_weights(center: f64, width: f64, frames: usize) -> Result<TemporalWeights> {
    if !(width > 0.0) {
        return Err(CcrError::Data(format!("gaussian width {width} must be positive")));
    }
    if frames < 2 {
        return Err(CcrError::Data(format!("need at least 2 frames, got {frames}")));
    }
    let denom = (frames - 1) as f64;
    let raw: Vec<f64> = (0..frames)
        .map(|t| {
            let d = t as f64 / denom - center;
            (-(d * d) / (2.0 * width * width)).exp()
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(CcrError::Data(format!(
            "gaussian at center {center} width {width} underflows on every frame"
        )));
    }
    Ok(TemporalWeights(raw.into_iter().map(|w| w / peak).collect()))
}

pub fn mine_negatives(p: &Proposal, mining: &NegativeMining) -> Result<(Proposal, Proposal)> {
    if p.kind != ProposalKind::Positive {
        return Err(CcrError::Data(format!(
            "negatives are mined from positives, got {:?}",
            p.kind
        )));
    }
    let reach = mining.delta * p.width.max(mining.min_width);
    let left = (p.center - reach).max(mining.eps);
    let right = (p.center + reach).min(1.0 - mining.eps);
    Ok((
        Proposal {
            center: left,
            width: p.width,
            kind: ProposalKind::Negative,
        },
        Proposal {
            center: right,
            width: p.width,
            kind: ProposalKind::Negative,
        },
    ))
}

/// `[(c - gamma sigma) d, (c + gamma sigma) d]` clamped to `[0, d]`.
pub fn weights_to_segment(p: &Proposal, duration_s: f64, gamma: f64) -> [f64; 2] {
    let lo = ((p.center - gamma * p.width) * duration_s).clamp(0.0, duration_s);
    let hi = ((p.center + gamma * p.width) * duration_s).clamp(0.0, duration_s);
    [lo, hi]
}

/// `|| Omega Omega^T - lambda I ||_F^2` with each row of `omega` L2-normalized.
pub fn diversity_loss(omega: &Mat, lambda: f64) -> Result<f64> {
    if omega.rows() == 0 {
        return Err(CcrError::Data("diversity loss needs at least one proposal".into()));
    }
    let mut g = Graph::new();
    let rows: Vec<Var> = (0..omega.rows())
        .map(|r| g.constant(Mat::column(omega.row(r).to_vec())))
        .collect();
    let loss = diversity_loss_var(&mut g, &rows, lambda);
    Ok(g.value(loss).item())
}

/// Differentiable Gaussian weights; `center` and `width` are 1x1.
pub fn gaussian_weights_var(g: &mut Graph, center: Var, width: Var, frames: usize) -> Var {
    let denom = (frames - 1) as f64;
    let times = g.constant(Mat::column((0..frames).map(|t| t as f64 / denom).collect()));
    let c = g.broadcast(center, frames, 1);
    let d = g.sub(times, c);
    let d2 = g.mul(d, d);
    let s2 = g.mul(width, width);
    let s2 = g.scale(s2, -2.0);
    let s2 = g.broadcast(s2, frames, 1);
    let expo = g.div(d2, s2);
    let raw = g.exp(expo);
    let peak = g.max_all(raw);
    let peak = g.broadcast(peak, frames, 1);
    g.div(raw, peak)
}

/// Differentiable counterpart of [`mine_negatives`]: `(left, right)` centers.
pub fn mine_negative_centers_var(
    g: &mut Graph,
    center: Var,
    width: Var,
    mining: &NegativeMining,
) -> (Var, Var) {
    let w = g.clamp(width, mining.min_width, f64::INFINITY);
    let reach = g.scale(w, mining.delta);
    let left = g.sub(center, reach);
    let left = g.clamp(left, mining.eps, f64::INFINITY);
    let right = g.add(center, reach);
    let right = g.clamp(right, f64::NEG_INFINITY, 1.0 - mining.eps);
    (left, right)
}

/// `rows` are `T x 1` weight columns, one per positive.
pub fn diversity_loss_var(g: &mut Graph, rows: &[Var], lambda: f64) -> Var {
    let n = rows.len();
    let stacked: Vec<Var> = rows.iter().map(|&r| g.transpose(r)).collect();
    let omega = g.concat_rows(&stacked);
    let omega = g.l2_normalize_rows(omega);
    let gram = g.matmul_t(omega, omega);
    let mut eye = Mat::zeros(n, n);
    for i in 0..n {
        eye.set(i, i, lambda);
    }
    let eye = g.constant(eye);
    let diff = g.sub(gram, eye);
    let sq = g.mul(diff, diff);
    g.sum(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centered_weights_are_mirror_symmetric_with_unit_peak() {
        for t in [3, 5, 9, 31] {
            for sigma in [0.05, 0.2, 0.9] {
                let w = gaussian_weights(0.5, sigma, t).unwrap();
                for i in 0..t {
                    assert!((w.0[i] - w.0[t - 1 - i]).abs() < 1e-15);
                }
                assert_eq!(w.0[t / 2], 1.0);
            }
        }
        assert_eq!(gaussian_weights(0.5, 0.3, 3).unwrap().0[1], 1.0);
    }

    #[test]
    fn weights_match_scalar_formula() {
        // c = 0.25, sigma = 0.1, T = 5: the frame at t = 1 sits exactly on the
        // center, so the peak is exp(0) = 1 and no rescaling happens.
        let w = gaussian_weights(0.25, 0.1, 5).unwrap();
        let expected: Vec<f64> = (0..5)
            .map(|t| {
                let d = t as f64 / 4.0 - 0.25;
                (-d * d / 0.02).exp()
            })
            .collect();
        for (a, b) in w.0.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(w.0[1], 1.0);
    }

    #[test]
    fn invalid_width_rejected() {
        assert!(gaussian_weights(0.5, 0.0, 5).is_err());
        assert!(gaussian_weights(0.5, -1.0, 5).is_err());
        assert!(Proposal::positive(0.0, 0.1).is_err());
        assert!(Proposal::positive(0.5, 0.0).is_err());
    }

    #[test]
    fn graph_weights_agree_with_direct_evaluation() {
        for (c, s, t) in [(0.25, 0.1, 5), (0.7, 0.33, 16), (0.03, 0.02, 32)] {
            let mut g = Graph::new();
            let cv = g.scalar(c);
            let sv = g.scalar(s);
            let w = gaussian_weights_var(&mut g, cv, sv, t);
            let direct = gaussian_weights(c, s, t).unwrap();
            for (a, b) in g.value(w).data().iter().zip(&direct.0) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn negatives_flank_with_defaults() {
        let m = NegativeMining::default();
        let (l, r) = mine_negatives(&Proposal::positive(0.5, 0.1).unwrap(), &m).unwrap();
        assert!((l.center - 0.2).abs() < 1e-12);
        assert!((r.center - 0.8).abs() < 1e-12);
        assert_eq!((l.width, r.width), (0.1, 0.1));
        assert_eq!(l.kind, ProposalKind::Negative);

        let (l, _) = mine_negatives(&Proposal::positive(0.02, 0.3).unwrap(), &m).unwrap();
        assert_eq!(l.center, 0.01);
        assert!(mine_negatives(&Proposal::reference(), &m).is_err());
    }

    #[test]
    fn graph_negatives_agree() {
        let m = NegativeMining::default();
        for (c, s) in [(0.5, 0.1), (0.02, 0.3), (0.9, 0.05), (0.4, 0.02)] {
            let mut g = Graph::new();
            let cv = g.scalar(c);
            let sv = g.scalar(s);
            let (lv, rv) = mine_negative_centers_var(&mut g, cv, sv, &m);
            let (l, r) = mine_negatives(&Proposal::positive(c, s).unwrap(), &m).unwrap();
            assert_eq!(g.value(lv).item(), l.center);
            assert_eq!(g.value(rv).item(), r.center);
        }
    }

    /// Brute-force interval IoU, independent of the evaluation module.
    fn brute_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
        let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
        let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    #[test]
    fn negatives_overlap_less_than_self() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(&[42]);
        let m = NegativeMining::default();
        for _ in 0..100 {
            let p = Proposal::positive(
                rng.random_range(0.01..0.99),
                rng.random_range(SIGMA_MIN..0.5),
            )
            .unwrap();
            let seg = weights_to_segment(&p, 10.0, 1.0);
            assert_eq!(brute_iou(seg, seg), 1.0);
            let (l, r) = mine_negatives(&p, &m).unwrap();
            for n in [l, r] {
                let iou = brute_iou(seg, weights_to_segment(&n, 10.0, 1.0));
                assert!(iou < 1.0, "{p:?} vs {n:?}: {iou}");
            }
        }
    }

    #[test]
    fn segment_conversion() {
        let p = Proposal::positive(0.5, 0.25).unwrap();
        assert_eq!(weights_to_segment(&p, 10.0, 1.0), [2.5, 7.5]);
        let edge = Proposal::positive(0.01, 0.4).unwrap();
        let [s, e] = weights_to_segment(&edge, 10.0, 1.0);
        assert_eq!(s, 0.0);
        assert!(e <= 10.0);
        let [s, e] = weights_to_segment(&Proposal::positive(0.99, 0.4).unwrap(), 10.0, 1.0);
        assert!(s >= 0.0 && e == 10.0);
        assert_eq!(weights_to_segment(&Proposal::reference(), 7.0, 1.0), [0.0, 7.0]);
    }

    #[test]
    fn segment_midpoint_inverts_to_center() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(&[3]);
        for _ in 0..200 {
            let c = rng.random_range(0.3..0.7);
            let s = rng.random_range(0.01..0.29);
            let d = rng.random_range(1.0..100.0);
            let [a, b] = weights_to_segment(&Proposal::positive(c, s).unwrap(), d, 1.0);
            assert!(((a + b) / 2.0 / d - c).abs() < 1e-12);
        }
    }

    /// Dense `||A A^T - lambda I||_F^2` after row normalization, with plain loops.
    fn dense_oracle(rows: &[Vec<f64>], lambda: f64) -> f64 {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let dot: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
                let target = if i == j { lambda } else { 0.0 };
                total += (dot - target).powi(2);
            }
        }
        total
    }

    #[test]
    fn diversity_loss_cases() {
        let one = Mat::from_rows(&[vec![0.6, 0.8]]).unwrap();
        assert!(diversity_loss(&one, 1.0).unwrap().abs() < 1e-15);
        let two = Mat::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert!((diversity_loss(&two, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(diversity_loss(&Mat::zeros(0, 4), 1.0).is_err());

        use rand::Rng;
        let mut rng = crate::rng::rng_for(&[11]);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..12).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let lambda = rng.random_range(0.0..1.5);
            let got = diversity_loss(&Mat::from_rows(&rows).unwrap(), lambda).unwrap();
            assert!((got - dense_oracle(&rows, lambda)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_are_unimodal(c in 0.001f64..0.999, s in SIGMA_MIN..SIGMA_MAX, t in 2usize..64) {
            let w = gaussian_weights(c, s, t).unwrap();
            let peak = w.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(peak, 1.0);
            let argmax = w.0.iter().position(|&x| x == peak).unwrap();
            for i in 1..=argmax {
                prop_assert!(w.0[i] >= w.0[i - 1]);
            }
            for i in argmax + 1..t {
                prop_assert!(w.0[i] <= w.0[i - 1]);
            }
            prop_assert!(w.0.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn diversity_loss_nonnegative(
            rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 6), 1..5),
            lambda in 0.0f64..2.0,
        ) {
            let m = Mat::from_rows(&rows).unwrap();
            prop_assert!(diversity_loss(&m, lambda).unwrap() >= 0.0);
        }
    }
}
