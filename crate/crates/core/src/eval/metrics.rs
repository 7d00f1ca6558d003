use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CcrError, Result};

/// `[start_s, end_s]`.
pub type Segment = [f64; 2];

pub const RANKS: [usize; 2] = [1, 5];
pub const THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

fn check(s: &Segment) -> Result<()> {
    if !(s[0].is_finite() && s[1].is_finite()) || s[0] > s[1] {
        return Err(CcrError::Data(format!("invalid segment [{}, {}]", s[0], s[1])));
    }
    Ok(())
}

/// Temporal intersection over union; 0 when the union is empty.
pub fn iou(a: &Segment, b: &Segment) -> Result<f64> {
    check(a)?;
    check(b)?;
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Index of the segment with the largest summed IoU against the others.
/// Ties go to the lower reconstruction loss, then the lower index.
pub fn vote_select(segments: &[Segment], losses: &[f64]) -> Result<usize> {
    if segments.is_empty() {
        return Err(CcrError::Data("vote over an empty proposal set".into()));
    }
    if segments.len() != losses.len() {
        return Err(CcrError::Shape(format!(
            "{} segments but {} losses",
            segments.len(),
            losses.len()
        )));
    }
    let mut votes = vec![0.0; segments.len()];
    for i in 0..segments.len() {
        for j in 0..segments.len() {
            if i != j {
                votes[i] += iou(&segments[i], &segments[j])?;
            }
        }
    }
    let mut best = 0;
    for i in 1..segments.len() {
        let better = votes[i] > votes[best] || (votes[i] == votes[best] && losses[i] < losses[best]);
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Recall and mean-IoU table over evaluation records.
///
/// `recall[a][b]` is the fraction of records whose best IoU among the top
/// `RANKS[a]` predictions exceeds `THRESHOLDS[b]`; `miou[a]` averages, over
/// records, the mean IoU of the top `RANKS[a]` predictions. Records with
/// fewer predictions than the rank use all they have.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ranks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub recall: Vec<Vec<f64>>,
    pub miou: Vec<f64>,
    pub samples: usize,
    /// Records without a ground-truth span.
    pub skipped: usize,
}

impl EvalReport {
    pub fn recall_at(&self, rank: usize, threshold: f64) -> Option<f64> {
        let a = self.ranks.iter().position(|&r| r == rank)?;
        let b = self.thresholds.iter().position(|&t| t == threshold)?;
        Some(self.recall[a][b])
    }

    pub fn miou_at(&self, rank: usize) -> Option<f64> {
        let a = self.ranks.iter().position(|&r| r == rank)?;
        Some(self.miou[a])
    }

    /// Aligned plain-text table, values in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut header = format!("{:<6}", "");
        for t in &self.thresholds {
            header.push_str(&format!("{:>10}", format!("IoU={t}")));
        }
        header.push_str(&format!("{:>10}", "mIoU"));
        out.push_str(header.trim_end());
        out.push('\n');
        for (a, rank) in self.ranks.iter().enumerate() {
            let mut line = format!("{:<6}", format!("R@{rank}"));
            for v in &self.recall[a] {
                let _ = write!(line, "{:>10.2}", v * 100.0);
            }
            let _ = write!(line, "{:>10.2}", self.miou[a] * 100.0);
            out.push_str(&line);
            out.push('\n');
        }
        let _ = writeln!(out, "samples: {}  skipped (no gt): {}", self.samples, self.skipped);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `ranked[i]` are the predictions for record `i`, best first.
pub fn evaluate(ranked: &[Vec<Segment>], gts: &[Option<Segment>]) -> Result<EvalReport> {
    evaluate_with(ranked, gts, &RANKS, &THRESHOLDS)
}

/// [`evaluate`] at arbitrary ranks and IoU thresholds.
pub fn evaluate_with(ranked: &[Vec<Segment>], gts: &[Option<Segment>], ranks: &[usize], thresholds: &[f64]) -> Result<EvalReport> {
    if ranks.contains(&0) {
        return Err(CcrError::Config("rank 0 is not a rank".into()));
    }
    if ranked.len() != gts.len() {
        return Err(CcrError::Shape(format!(
            "{} predictions for {} records",
            ranked.len(),
            gts.len()
        )));
    }
    let mut recall = vec![vec![0.0; thresholds.len()]; ranks.len()];
    let mut miou = vec![0.0; ranks.len()];
    let (mut samples, mut skipped) = (0usize, 0usize);
    for (preds, gt) in ranked.iter().zip(gts) {
        let Some(gt) = gt else {
            skipped += 1;
            continue;
        };
        if preds.is_empty() {
            return Err(CcrError::Data("record without predictions".into()));
        }
        samples += 1;
        let ious = preds.iter().map(|p| iou(p, gt)).collect::<Result<Vec<_>>>()?;
        for (a, &rank) in ranks.iter().enumerate() {
            let top = &ious[..rank.min(ious.len())];
            let best = top.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (b, &t) in thresholds.iter().enumerate() {
                if best > t {
                    recall[a][b] += 1.0;
                }
            }
            miou[a] += top.iter().sum::<f64>() / top.len() as f64;
        }
    }
    if samples > 0 {
        let n = samples as f64;
        recall.iter_mut().flatten().for_each(|v| *v /= n);
        miou.iter_mut().for_each(|v| *v /= n);
    }
    Ok(EvalReport {
        ranks: ranks.to_vec(),
        thresholds: thresholds.to_vec(),
        recall,
        miou,
        samples,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[1.0, 4.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(iou(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 0.0);
        assert!((iou(&[0.0, 2.0], &[1.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(iou(&[3.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote_select(&[[0.0, 1.0]], &[3.0]).unwrap(), 0);
        let same = [[1.0, 2.0]; 3];
        assert_eq!(vote_select(&same, &[0.5, 0.2, 0.2]).unwrap(), 1);
        let segs = [[0.0, 1.0], [5.0, 7.0], [5.5, 7.0]];
        assert!(vote_select(&segs, &[0.0, 1.0, 1.0]).unwrap() != 0);
        assert!(vote_select(&[], &[]).is_err());
    }

    #[test]
    fn evaluate_examples() {
        // top-1 IoU 0.6: gt [0, 10], prediction [0, 6]
        let r = evaluate(&[vec![[0.0, 6.0]]], &[Some([0.0, 10.0])]).unwrap();
        assert_eq!(r.recall_at(1, 0.5), Some(1.0));
        assert_eq!(r.recall_at(1, 0.7), Some(0.0));
        // top-2 IoUs 0.2 and 0.6
        let r = evaluate(&[vec![[0.0, 2.0], [0.0, 6.0]]], &[Some([0.0, 10.0])]).unwrap();
        assert_eq!(r.recall_at(1, 0.5), Some(0.0));
        assert_eq!(r.recall_at(5, 0.5), Some(1.0));
        let r2 = evaluate_with(&[vec![[0.0, 2.0], [0.0, 6.0]]], &[Some([0.0, 10.0])], &[2], &[0.5]).unwrap();
        assert_eq!(r2.recall_at(2, 0.5), Some(1.0));
        assert!((r.miou_at(5).unwrap() - 0.4).abs() < 1e-15);
        let r = evaluate(&[vec![[0.0, 2.0]], vec![[0.0, 1.0]]], &[None, Some([0.0, 1.0])]).unwrap();
        assert_eq!((r.samples, r.skipped), (1, 1));
        assert_eq!(r.recall_at(1, 0.7), Some(1.0));
    }

    #[test]
    fn table_and_json_agree() {
        let r = evaluate(&[vec![[0.0, 6.0], [1.0, 3.0]]], &[Some([0.0, 10.0])]).unwrap();
        let table = r.table();
        assert!(table.contains("R@1"));
        assert!(table.contains("60.00"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn seg() -> impl Strategy<Value = Segment> {
        (0.0f64..50.0, 0.0f64..20.0).prop_map(|(s, l)| [s, s + l])
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in seg(), b in seg()) {
            let x = iou(&a, &b).unwrap();
            prop_assert_eq!(x, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            if a[1] > a[0] {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn recall_monotone(preds in prop::collection::vec(prop::collection::vec(seg(), 1..7), 1..10), gts in prop::collection::vec(seg(), 10)) {
            let gts: Vec<Option<Segment>> = gts.into_iter().take(preds.len()).map(Some).collect();
            let r = evaluate(&preds, &gts).unwrap();
            for a in 0..r.ranks.len() {
                for b in 1..r.thresholds.len() {
                    prop_assert!(r.recall[a][b] <= r.recall[a][b - 1]);
                }
            }
            for b in 0..r.thresholds.len() {
                prop_assert!(r.recall[1][b] >= r.recall[0][b]);
            }
        }

        #[test]
        fn vote_permutation_invariant(segs in prop::collection::vec(seg(), 1..6), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let losses: Vec<f64> = (0..segs.len()).map(|i| i as f64 * 0.37 % 1.0).collect();
            let best = vote_select(&segs, &losses).unwrap();
            let mut order: Vec<usize> = (0..segs.len()).collect();
            order.shuffle(&mut crate::rng::rng_for(&[seed]));
            let s2: Vec<Segment> = order.iter().map(|&i| segs[i]).collect();
            let l2: Vec<f64> = order.iter().map(|&i| losses[i]).collect();
            let best2 = order[vote_select(&s2, &l2).unwrap()];
            // identical up to ties in both vote and loss
            prop_assert!(best2 == best || (segs[best2] == segs[best] && losses[best2] == losses[best]));
        }
    }
}
