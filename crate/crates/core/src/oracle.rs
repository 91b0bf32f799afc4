//! Brute-force reference for prediction-set membership.
//!
//! Shares no code with the scoring path: ranks come from pairwise counting,
//! and every score is recomputed per class. Intended for tests; it is
//! cubic in the class count.

use crate::conformal::Tau;
use crate::score::{ScoreKind, ScoreSpec};

/// 1-indexed rank of `class`, ties broken by ascending class index.
fn rank_by_counting(probs: &[f64], class: usize) -> usize {
    let p = probs[class];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < class))
        .count()
}

fn oracle_score(spec: &ScoreSpec, probs: &[f64], class: usize, u: f64) -> f64 {
    let rank = rank_by_counting(probs, class);
    let u = if spec.randomized { u } else { 1.0 };
    // classes ahead of `class`, summed from the top down
    let mut ahead: Vec<(usize, f64)> = (0..probs.len())
        .map(|j| (rank_by_counting(probs, j), probs[j]))
        .filter(|&(r, _)| r < rank)
        .collect();
    ahead.sort_by_key(|&(r, _)| r);
    let mass_ahead = ahead.iter().fold(0.0, |acc, &(_, q)| acc + q);
    let p_max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    match spec.kind {
        ScoreKind::Aps => mass_ahead + u * probs[class],
        ScoreKind::Raps => {
            let lambda = spec.raps_lambda.expect("raps_lambda");
            let k_reg = spec.raps_kreg.expect("raps_kreg");
            let excess = if rank > k_reg { (rank - k_reg) as f64 } else { 0.0 };
            mass_ahead + u * probs[class] + lambda * excess
        }
        ScoreKind::Saps => {
            let lambda = spec.saps_lambda.expect("saps_lambda");
            if rank == 1 {
                u * p_max
            } else {
                p_max + (rank as f64 - 2.0 + u) * lambda
            }
        }
        ScoreKind::Lac => 1.0 - probs[class],
    }
}

/// Classes whose recomputed score is `<= tau`, ascending.
pub fn oracle_set(spec: &ScoreSpec, probs: &[f64], u: f64, tau: Tau) -> Vec<usize> {
    (0..probs.len())
        .filter(|&k| match tau {
            Tau::IncludeAll => true,
            Tau::Value(t) => oracle_score(spec, probs, k, u) <= t,
        })
        .collect()
}

/// Every class score as the oracle computes it; used to place thresholds
/// exactly on score boundaries in tests.
pub fn oracle_scores(spec: &ScoreSpec, probs: &[f64], u: f64) -> Vec<f64> {
    (0..probs.len()).map(|k| oracle_score(spec, probs, k, u)).collect()
}
