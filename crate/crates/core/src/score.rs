//! Non-conformity scores (APS, RAPS, SAPS, LAC) and the ranking they share.
//!
//! For a probability row sorted in descending order and a class at
//! 1-indexed rank `r`, with `u` the per-sample uniform draw:
//!
//! | kind | score |
//! |------|-------|
//! | APS  | `p(1) + ... + p(r-1) + u * p(r)` |
//! | RAPS | APS `+ lambda * max(0, r - k_reg)` |
//! | SAPS | `u * p_max` if `r == 1`, else `p_max + (r - 2 + u) * lambda` |
//! | LAC  | `1 - p_y` |
//!
//! Non-randomized scores use `u = 1` through the same arithmetic, so the
//! two agree bit for bit at `u = 1`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::CalibrationMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Aps,
    Raps,
    Saps,
    Lac,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            "saps" => Ok(ScoreKind::Saps),
            "lac" => Ok(ScoreKind::Lac),
            other => Err(Error::Score(format!("unknown score kind `{other}`"))),
        }
    }
}

/// Which score to compute, with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    pub randomized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raps_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raps_kreg: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saps_lambda: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ScoreSpec {
    pub fn aps(randomized: bool) -> Self {
        Self {
            kind: ScoreKind::Aps,
            randomized,
            raps_lambda: None,
            raps_kreg: None,
            saps_lambda: None,
            rng_seed: 0,
        }
    }

    pub fn raps(lambda: f64, k_reg: usize, randomized: bool) -> Self {
        Self {
            kind: ScoreKind::Raps,
            raps_lambda: Some(lambda),
            raps_kreg: Some(k_reg),
            ..Self::aps(randomized)
        }
    }

    pub fn saps(lambda: f64, randomized: bool) -> Self {
        Self {
            kind: ScoreKind::Saps,
            saps_lambda: Some(lambda),
            ..Self::aps(randomized)
        }
    }

    pub fn lac() -> Self {
        Self {
            kind: ScoreKind::Lac,
            ..Self::aps(false)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// True when scores depend on a uniform draw (LAC never does).
    pub fn uses_u(&self) -> bool {
        self.randomized && self.kind != ScoreKind::Lac
    }

    pub fn validate(&self) -> Result<()> {
        let raps = self.kind == ScoreKind::Raps;
        let saps = self.kind == ScoreKind::Saps;
        match (raps, self.raps_lambda, self.raps_kreg) {
            (true, Some(l), Some(k)) => {
                if !(l.is_finite() && l >= 0.0) {
                    return Err(Error::Score(format!("raps_lambda must be >= 0, got {l}")));
                }
                if k == 0 {
                    return Err(Error::Score("raps_kreg must be positive".into()));
                }
            }
            (true, _, _) => return Err(Error::Score("raps needs raps_lambda and raps_kreg".into())),
            (false, None, None) => {}
            (false, _, _) => {
                return Err(Error::Score("raps_lambda/raps_kreg given for a non-raps score".into()))
            }
        }
        match (saps, self.saps_lambda) {
            (true, Some(l)) if l.is_finite() && l >= 0.0 => {}
            (true, Some(l)) => return Err(Error::Score(format!("saps_lambda must be >= 0, got {l}"))),
            (true, None) => return Err(Error::Score("saps needs saps_lambda".into())),
            (false, Some(_)) => return Err(Error::Score("saps_lambda given for a non-saps score".into())),
            (false, None) => {}
        }
        Ok(())
    }

    /// The `u` used for sample `index`: a seeded draw when randomized,
    /// otherwise 1.
    pub fn sample_u(&self, index: u64) -> f64 {
        if self.uses_u() {
            draw_u(self.rng_seed, index)
        } else {
            1.0
        }
    }

    /// Score of the class at 1-indexed `rank` in `ranked`, with `u` already
    /// resolved (1 for non-randomized scores).
    #[inline]
    pub fn score_at_rank(&self, ranked: &RankedRow, rank: usize, u: f64) -> f64 {
        let sorted = &ranked.sorted_probs;
        match self.kind {
            ScoreKind::Aps => aps(sorted, rank, u),
            ScoreKind::Raps => {
                let lambda = self.raps_lambda.unwrap_or(0.0);
                let k_reg = self.raps_kreg.unwrap_or(1);
                aps(sorted, rank, u) + lambda * rank.saturating_sub(k_reg) as f64
            }
            ScoreKind::Saps => {
                let lambda = self.saps_lambda.unwrap_or(0.0);
                let p_max = sorted[0];
                if rank == 1 {
                    u * p_max
                } else {
                    p_max + (rank as f64 - 2.0 + u) * lambda
                }
            }
            ScoreKind::Lac => 1.0 - sorted[rank - 1],
        }
    }

    /// Scores for every class (indexed by class) sharing one `u`.
    pub fn scores_ranked(&self, ranked: &RankedRow, u: f64, out: &mut [f64]) {
        let sorted = &ranked.sorted_probs;
        let mut before = 0.0;
        for (pos, (&class, &p)) in ranked.perm.iter().zip(sorted).enumerate() {
            let rank = pos + 1;
            out[class] = match self.kind {
                ScoreKind::Aps => before + u * p,
                ScoreKind::Raps => {
                    let lambda = self.raps_lambda.unwrap_or(0.0);
                    let k_reg = self.raps_kreg.unwrap_or(1);
                    before + u * p + lambda * rank.saturating_sub(k_reg) as f64
                }
                _ => self.score_at_rank(ranked, rank, u),
            };
            before += p;
        }
    }
}

/// Cumulative mass strictly above `rank`, plus `u` times the mass at it.
#[inline]
fn aps(sorted: &[f64], rank: usize, u: f64) -> f64 {
    let mut before = 0.0;
    for &p in &sorted[..rank - 1] {
        before += p;
    }
    before + u * sorted[rank - 1]
}

/// A probability row sorted in descending order.
///
/// Ties are ordered by ascending class index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRow {
    pub sorted_probs: Vec<f64>,
    /// Sorted position -> class.
    pub perm: Vec<usize>,
    /// Class -> 1-indexed rank.
    pub rank_of: Vec<usize>,
}

impl RankedRow {
    pub fn rank(&self, class: usize) -> usize {
        self.rank_of[class]
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

pub fn rank_row(probs: &[f64]) -> RankedRow {
    let mut perm: Vec<usize> = (0..probs.len()).collect();
    // stable: equal probabilities keep ascending class order
    perm.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]));
    let sorted_probs = perm.iter().map(|&c| probs[c]).collect();
    let mut rank_of = vec![0; probs.len()];
    for (pos, &c) in perm.iter().enumerate() {
        rank_of[c] = pos + 1;
    }
    RankedRow {
        sorted_probs,
        perm,
        rank_of,
    }
}

fn resolve_u(spec: &ScoreSpec, u: Option<f64>) -> Result<f64> {
    spec.validate()?;
    match (spec.uses_u(), u) {
        (true, Some(u)) if (0.0..=1.0).contains(&u) => Ok(u),
        (true, Some(u)) => Err(Error::Score(format!("u = {u} outside [0, 1]"))),
        (true, None) => Err(Error::Score("randomized score needs u".into())),
        (false, None) => Ok(1.0),
        (false, Some(_)) if spec.kind == ScoreKind::Lac => Ok(1.0),
        (false, Some(_)) => Err(Error::Score("u given for a non-randomized score".into())),
    }
}

fn check_class(probs: &[f64], class: usize) -> Result<()> {
    if class >= probs.len() {
        return Err(Error::Score(format!(
            "class {class} out of range [0, {})",
            probs.len()
        )));
    }
    Ok(())
}

/// Non-conformity score of `class` for one probability row.
pub fn score(spec: &ScoreSpec, probs: &[f64], class: usize, u: Option<f64>) -> Result<f64> {
    let u = resolve_u(spec, u)?;
    check_class(probs, class)?;
    let ranked = rank_row(probs);
    Ok(spec.score_at_rank(&ranked, ranked.rank(class), u))
}

/// Scores of every class, indexed by class, with one shared `u`.
pub fn score_all_classes(spec: &ScoreSpec, probs: &[f64], u: Option<f64>) -> Result<Vec<f64>> {
    let u = resolve_u(spec, u)?;
    let ranked = rank_row(probs);
    let mut out = vec![0.0; probs.len()];
    spec.scores_ranked(&ranked, u, &mut out);
    Ok(out)
}

/// Uniform draw in `[0, 1)` for sample `index` under `seed`.
///
/// Counter-based: the value depends only on `(seed, index)`, never on how
/// many draws came before, so parallel and serial evaluation agree.
pub fn draw_u(seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(u128::from(index) * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Non-randomized APS score of `class` at each temperature in `t_grid`.
pub fn score_temperature_curve(logits: &[f64], class: usize, t_grid: &[f64]) -> Result<Vec<f64>> {
    check_class(logits, class)?;
    if let Some(t) = t_grid.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Map(format!("temperature must be positive, got {t}")));
    }
    if t_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("temperature grid must be ascending".into()));
    }
    let spec = ScoreSpec::aps(false);
    t_grid
        .iter()
        .map(|&t| {
            let probs = crate::maps::apply_map(&CalibrationMap::temperature(t)?, logits)?;
            score(&spec, &probs, class, None)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: [f64; 3] = [0.6, 0.3, 0.1];

    #[test]
    fn rank_examples() {
        let r = rank_row(&[0.1, 0.6, 0.3]);
        assert_eq!(r.sorted_probs, vec![0.6, 0.3, 0.1]);
        assert_eq!(r.rank(1), 1);
        assert_eq!(r.perm, vec![1, 2, 0]);
        assert_eq!(rank_row(&[0.5, 0.5]).perm, vec![0, 1]);
        assert_eq!(rank_row(&[0.25; 4]).perm, vec![0, 1, 2, 3]);
        assert_eq!(rank_row(&[0.2, 0.4, 0.4]).perm, vec![1, 2, 0]);
    }

    #[test]
    fn aps_examples() {
        let s = ScoreSpec::aps(false);
        assert!((score(&s, &P, 1, None).unwrap() - 0.9).abs() < 1e-12);
        assert!((score(&s, &P, 2, None).unwrap() - 1.0).abs() < 1e-12);
        let r = ScoreSpec::aps(true);
        for class in 0..3 {
            assert_eq!(score(&r, &P, class, Some(1.0)).unwrap(), score(&s, &P, class, None).unwrap());
        }
        assert!((score(&r, &P, 1, Some(0.5)).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn raps_penalty() {
        let s = ScoreSpec::raps(0.1, 1, true);
        assert!((score(&s, &P, 2, Some(1.0)).unwrap() - 1.2).abs() < 1e-12);
        assert!((score(&s, &P, 0, Some(1.0)).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn saps_examples() {
        let s = ScoreSpec::saps(0.02, true);
        assert!((score(&s, &P, 0, Some(0.5)).unwrap() - 0.30).abs() < 1e-12);
        assert!((score(&s, &P, 2, Some(0.5)).unwrap() - 0.63).abs() < 1e-12);
        let n = ScoreSpec::saps(0.02, false);
        assert_eq!(score(&n, &P, 0, None).unwrap(), 0.6);
    }

    #[test]
    fn lac_complement() {
        let s = ScoreSpec::lac();
        assert!((score(&s, &P, 0, None).unwrap() - 0.4).abs() < 1e-12);
        let all = score_all_classes(&s, &P, None).unwrap();
        for (a, b) in all.iter().zip([0.4, 0.7, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_classes_aps() {
        let all = score_all_classes(&ScoreSpec::aps(false), &P, None).unwrap();
        for (a, b) in all.iter().zip([0.6, 0.9, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_errors() {
        let r = ScoreSpec::aps(true);
        assert!(score(&r, &P, 0, None).is_err());
        assert!(score(&r, &P, 0, Some(1.5)).is_err());
        assert!(score(&r, &P, 0, Some(-0.1)).is_err());
        assert!(score(&ScoreSpec::aps(false), &P, 0, Some(0.5)).is_err());
        assert!(score(&ScoreSpec::aps(false), &P, 3, None).is_err());
        let mut missing = ScoreSpec::raps(0.1, 1, false);
        missing.raps_kreg = None;
        assert!(score(&missing, &P, 0, None).is_err());
        let mut saps = ScoreSpec::saps(0.1, false);
        saps.saps_lambda = None;
        assert!(score(&saps, &P, 0, None).is_err());
        assert!(score(&ScoreSpec::raps(0.1, 0, false), &P, 0, None).is_err());
        assert!(score(&ScoreSpec::raps(-0.1, 1, false), &P, 0, None).is_err());
    }

    #[test]
    fn json_shape() {
        let s = ScoreSpec::raps(0.001, 1, true).with_seed(9);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"kind":"raps","randomized":true,"raps_lambda":0.001,"raps_kreg":1,"rng_seed":9}"#);
        assert_eq!(serde_json::from_str::<ScoreSpec>(&text).unwrap(), s);
    }

    #[test]
    fn draw_u_is_deterministic_and_order_free() {
        assert_eq!(draw_u(7, 123), draw_u(7, 123));
        assert_ne!(draw_u(7, 123), draw_u(8, 123));
        let forward: Vec<f64> = (0..100).map(|i| draw_u(1, i)).collect();
        let mut backward: Vec<f64> = (0..100).rev().map(|i| draw_u(1, i)).collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn draw_u_mean() {
        let n = 100_000u64;
        let mut sum = 0.0;
        for i in 0..n {
            let u = draw_u(2024, i);
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        // standard error 0.0009; 0.01 is > 10 sigma
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn temperature_curve_examples() {
        let c = score_temperature_curve(&[2.0, 1.0, 0.0], 0, &[0.5, 1.0]).unwrap();
        assert!((c[0] - 0.8668133321).abs() < 1e-9);
        assert!((c[1] - 0.6652409557).abs() < 1e-9);
        assert!(c[0] >= c[1]);
        let last = score_temperature_curve(&[2.0, 1.0, 0.0], 2, &[0.5, 1.0]).unwrap();
        assert!(last.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let flat = score_temperature_curve(&[1.0, 1.0, 1.0], 1, &[0.1, 1.0, 10.0]).unwrap();
        assert!(flat.iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-12));
        assert!(score_temperature_curve(&[1.0, 0.0], 0, &[0.0, 1.0]).is_err());
        assert!(score_temperature_curve(&[1.0, 0.0], 0, &[2.0, 1.0]).is_err());
    }

    fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
        })
    }

    proptest! {
        #[test]
        fn aps_scores_nondecreasing_in_rank(p in (2usize..15).prop_flat_map(probs)) {
            let scores = score_all_classes(&ScoreSpec::aps(false), &p, None).unwrap();
            let ranked = rank_row(&p);
            let in_order: Vec<f64> = ranked.perm.iter().map(|&c| scores[c]).collect();
            prop_assert!(in_order.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((in_order[in_order.len() - 1] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn raps_zero_lambda_is_aps(p in (2usize..15).prop_flat_map(probs), u in 0.0f64..=1.0) {
            let a = score_all_classes(&ScoreSpec::aps(true), &p, Some(u)).unwrap();
            let r = score_all_classes(&ScoreSpec::raps(0.0, 2, true), &p, Some(u)).unwrap();
            prop_assert_eq!(a, r);
        }

        #[test]
        fn per_class_matches_all_classes(p in (2usize..15).prop_flat_map(probs), u in 0.0f64..=1.0, which in 0usize..4) {
            let spec = [ScoreSpec::aps(true), ScoreSpec::raps(0.05, 2, true), ScoreSpec::saps(0.1, true), ScoreSpec::lac()][which].clone();
            let u = if spec.uses_u() { Some(u) } else { None };
            let all = score_all_classes(&spec, &p, u).unwrap();
            for (k, &v) in all.iter().enumerate() {
                prop_assert_eq!(v, score(&spec, &p, k, u).unwrap());
            }
        }

        #[test]
        fn saps_rank_one_at_u_one_is_pmax(p in (2usize..15).prop_flat_map(probs), lambda in 0.0f64..0.5) {
            let ranked = rank_row(&p);
            let spec = ScoreSpec::saps(lambda, true);
            prop_assert_eq!(score(&spec, &p, ranked.perm[0], Some(1.0)).unwrap(), ranked.sorted_probs[0]);
        }

        #[test]
        fn rank_row_is_a_bijection(p in (2usize..15).prop_flat_map(probs)) {
            let r = rank_row(&p);
            prop_assert!(r.sorted_probs.windows(2).all(|w| w[0] >= w[1]));
            for (pos, &c) in r.perm.iter().enumerate() {
                prop_assert_eq!(r.rank_of[c], pos + 1);
            }
        }
    }
}
