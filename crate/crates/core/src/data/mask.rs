use rand::Rng;

use crate::error::{CcrError, Result};

use super::{MaskedQuery, TokenizedQuery, Vocab};

/// Masks each maskable token independently with probability `p_mask`.
/// When nothing is selected, one maskable position is drawn uniformly so the
/// mask set is never empty.
pub fn mask_query<R: Rng + ?Sized>(
    q: &TokenizedQuery,
    p_mask: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<MaskedQuery> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(CcrError::Config(format!("p_mask {p_mask} outside [0, 1]")));
    }
    let maskable: Vec<usize> = q
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| vocab.is_maskable(t))
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(CcrError::Data(format!(
            "query {:?} has no maskable tokens",
            q.text
        )));
    }
    // one draw per maskable position, always, so the stream stays aligned
    let mut positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < p_mask)
        .collect();
    if positions.is_empty() {
        positions.push(maskable[rng.random_range(0..maskable.len())]);
    }
    MaskedQuery::from_positions(q, &positions)
}
