//! Evaluation metrics: concordance index, Kaplan-Meier curves, risk-group
//! stratification, the two-group log-rank test, and fold aggregation.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{CoreError, Result};
use crate::survival::SurvivalLabel;

/// Risk scores paired with outcome labels. Scores are oriented so that a
/// LARGER score predicts LONGER survival; callers scoring with a Cox linear
/// predictor should pass -eta.
#[derive(Debug, Clone)]
pub struct ScoredCohort {
    scores: Vec<f64>,
    labels: Vec<SurvivalLabel>,
}

impl ScoredCohort {
    pub fn new(scores: Vec<f64>, labels: Vec<SurvivalLabel>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(CoreError::BatchMismatch {
                left: scores.len(),
                right: labels.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(CoreError::NonFinite(format!("score {i}")));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[SurvivalLabel] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieCredit {
    /// Score ties contribute nothing (strict inequality).
    #[default]
    Strict,
    /// Score ties contribute half a concordant pair.
    Half,
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks <= i.
    fn prefix(&self, mut i: usize) -> u64 {
        i += 1;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn dense_ranks(scores: &[f64]) -> (Vec<usize>, usize) {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let ranks = scores
        .iter()
        .map(|s| sorted.partition_point(|x| x < s))
        .collect();
    (ranks, sorted.len())
}

/// Concordance over pairs with T_i < T_j and delta_i = 1: a pair is
/// concordant when the shorter-lived subject has the strictly lower score.
pub fn concordance_index(c: &ScoredCohort) -> Result<f64> {
    concordance_index_with(c, TieCredit::Strict)
}

pub fn concordance_index_with(c: &ScoredCohort, credit: TieCredit) -> Result<f64> {
    if c.is_empty() {
        return Err(CoreError::EmptyInput("concordance_index"));
    }
    let (ranks, n_ranks) = dense_ranks(&c.scores);
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c.labels[a].time.partial_cmp(&c.labels[b].time).unwrap());

    // sweep equal-time groups from latest to earliest; the tree holds score
    // ranks of every subject with a strictly LATER time
    let mut tree = Fenwick::new(n_ranks);
    let mut later: u64 = 0;
    let mut numerator = 0.0;
    let mut denominator: u64 = 0;
    let mut idx = order.len();
    while idx > 0 {
        let hi = idx;
        let t = c.labels[order[hi - 1]].time;
        let mut lo = hi;
        while lo > 0 && c.labels[order[lo - 1]].time == t {
            lo -= 1;
        }
        for &i in &order[lo..hi] {
            if c.labels[i].event {
                denominator += later;
                let le = tree.prefix(ranks[i]);
                let eq = le - if ranks[i] > 0 { tree.prefix(ranks[i] - 1) } else { 0 };
                let above = later - le;
                numerator += above as f64;
                if credit == TieCredit::Half {
                    numerator += 0.5 * eq as f64;
                }
            }
        }
        for &i in &order[lo..hi] {
            tree.add(ranks[i]);
            later += 1;
        }
        idx = lo;
    }

    if denominator == 0 {
        return Err(CoreError::NoComparablePairs);
    }
    Ok(numerator / denominator as f64)
}

/// Kaplan-Meier step curve over distinct event times.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Step-function evaluation; 1.0 before the first event time.
    pub fn survival_at(&self, t: f64) -> f64 {
        let mut s = 1.0;
        for (tk, sk) in self.times.iter().zip(&self.survival) {
            if *tk <= t {
                s = *sk;
            } else {
                break;
            }
        }
        s
    }
}

pub fn kaplan_meier(labels: &[SurvivalLabel]) -> Result<KmCurve> {
    if labels.is_empty() {
        return Err(CoreError::EmptyInput("kaplan_meier"));
    }
    let mut times: Vec<f64> = labels
        .iter()
        .filter(|l| l.event)
        .map(|l| l.time)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();

    let mut survival = Vec::with_capacity(times.len());
    let mut at_risk = Vec::with_capacity(times.len());
    let mut events = Vec::with_capacity(times.len());
    let mut s = 1.0;
    for &tk in &times {
        let n_k = labels.iter().filter(|l| l.time >= tk).count();
        let d_k = labels.iter().filter(|l| l.event && l.time == tk).count();
        s *= 1.0 - d_k as f64 / n_k as f64;
        survival.push(s);
        at_risk.push(n_k);
        events.push(d_k);
    }
    Ok(KmCurve {
        times,
        survival,
        at_risk,
        events,
    })
}

/// Median split on scores; subjects at or below the median go to the
/// low-score group. Returned indices refer to the input order.
#[derive(Debug, Clone)]
pub struct RiskGroups {
    pub low: Vec<usize>,
    pub high: Vec<usize>,
    /// Set when the high group came out empty (e.g. constant scores).
    pub degenerate: bool,
}

pub fn stratify_risk(c: &ScoredCohort) -> Result<RiskGroups> {
    if c.len() < 2 {
        return Err(CoreError::TooFewSubjects {
            needed: 2,
            got: c.len(),
        });
    }
    let mut sorted = c.scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (i, &s) in c.scores.iter().enumerate() {
        if s <= median {
            low.push(i);
        } else {
            high.push(i);
        }
    }
    let degenerate = high.is_empty();
    if degenerate {
        log::warn!("risk stratification degenerate: all scores at or below the median");
    }
    Ok(RiskGroups {
        low,
        high,
        degenerate,
    })
}

/// Two-group log-rank test; p-value from a chi-square with 1 dof.
pub fn logrank_test(group_a: &[SurvivalLabel], group_b: &[SurvivalLabel]) -> Result<(f64, f64)> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(CoreError::EmptyInput("logrank_test group"));
    }
    let mut times: Vec<f64> = group_a
        .iter()
        .chain(group_b)
        .filter(|l| l.event)
        .map(|l| l.time)
        .collect();
    if times.is_empty() {
        return Err(CoreError::NoEvents);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();

    let mut observed_minus_expected = 0.0;
    let mut variance = 0.0;
    for &tk in &times {
        let n1 = group_a.iter().filter(|l| l.time >= tk).count() as f64;
        let n2 = group_b.iter().filter(|l| l.time >= tk).count() as f64;
        let d1 = group_a
            .iter()
            .filter(|l| l.event && l.time == tk)
            .count() as f64;
        let d2 = group_b
            .iter()
            .filter(|l| l.event && l.time == tk)
            .count() as f64;
        let n = n1 + n2;
        let d = d1 + d2;
        if n < 2.0 {
            continue;
        }
        observed_minus_expected += d1 - d * n1 / n;
        variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1.0);
    }
    if variance <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let chi = observed_minus_expected * observed_minus_expected / variance;
    let dist = ChiSquared::new(1.0).expect("dof 1");
    let p = 1.0 - dist.cdf(chi);
    Ok((chi, p))
}

/// Mean and sample standard deviation (n-1 denominator; 0 for one fold).
pub fn aggregate_folds(per_fold: &[f64]) -> Result<(f64, f64)> {
    if per_fold.is_empty() {
        return Err(CoreError::EmptyInput("aggregate_folds"));
    }
    let n = per_fold.len() as f64;
    let mean = per_fold.iter().sum::<f64>() / n;
    if per_fold.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = per_fold.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(t: f64, e: bool) -> SurvivalLabel {
        SurvivalLabel::new(t, e).unwrap()
    }

    fn cohort(scores: Vec<f64>, labels: Vec<SurvivalLabel>) -> ScoredCohort {
        ScoredCohort::new(scores, labels).unwrap()
    }

    /// Quadratic reference implementation of the same definition.
    fn brute_force(c: &ScoredCohort, credit: TieCredit) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0u64;
        for i in 0..c.len() {
            if !c.labels()[i].event {
                continue;
            }
            for j in 0..c.len() {
                if c.labels()[i].time < c.labels()[j].time {
                    den += 1;
                    if c.scores()[i] < c.scores()[j] {
                        num += 1.0;
                    } else if c.scores()[i] == c.scores()[j] && credit == TieCredit::Half {
                        num += 0.5;
                    }
                }
            }
        }
        (den > 0).then(|| num / den as f64)
    }

    #[test]
    fn perfect_and_reversed_ordering() {
        let labels = vec![label(1.0, true), label(2.0, true), label(3.0, true)];
        let perfect = cohort(vec![10.0, 20.0, 30.0], labels.clone());
        assert_relative_eq!(concordance_index(&perfect).unwrap(), 1.0);
        let reversed = cohort(vec![30.0, 20.0, 10.0], labels);
        assert_relative_eq!(concordance_index(&reversed).unwrap(), 0.0);
    }

    #[test]
    fn hand_case_half_concordant() {
        let c = cohort(
            vec![2.0, 3.0, 1.0],
            vec![label(1.0, true), label(2.0, false), label(3.0, true)],
        );
        assert_relative_eq!(concordance_index(&c).unwrap(), 0.5);
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<SurvivalLabel> = (0..25)
            .map(|_| label(rng.gen_range(1.0..100.0), rng.gen_bool(0.7)))
            .collect();
        let base = concordance_index(&cohort(scores.clone(), labels.clone())).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        let transformed = concordance_index(&cohort(warped, labels)).unwrap();
        assert_relative_eq!(base, transformed, epsilon = 1e-12);
    }

    #[test]
    fn negation_complements_when_no_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<SurvivalLabel> = (0..30)
            .map(|i| label(1.0 + i as f64, rng.gen_bool(0.6)))
            .collect();
        let c1 = concordance_index(&cohort(scores.clone(), labels.clone())).unwrap();
        let c2 = concordance_index(&cohort(
            scores.iter().map(|s| -s).collect(),
            labels,
        ))
        .unwrap();
        assert_relative_eq!(c1 + c2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_cohorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let n = 30;
            // coarse grids force plenty of time and score ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            let labels: Vec<SurvivalLabel> = (0..n)
                .map(|_| label(rng.gen_range(1..15) as f64, rng.gen_bool(0.7)))
                .collect();
            let c = cohort(scores, labels);
            for credit in [TieCredit::Strict, TieCredit::Half] {
                match (brute_force(&c, credit), concordance_index_with(&c, credit)) {
                    (Some(expected), Ok(got)) => {
                        assert_relative_eq!(expected, got, epsilon = 1e-12);
                    }
                    (None, Err(CoreError::NoComparablePairs)) => {}
                    (e, g) => panic!("trial {trial}: mismatch {e:?} vs {g:?}"),
                }
            }
        }
    }

    #[test]
    fn no_comparable_pairs_is_error() {
        let c = cohort(
            vec![1.0, 2.0],
            vec![label(5.0, false), label(6.0, false)],
        );
        assert!(matches!(
            concordance_index(&c),
            Err(CoreError::NoComparablePairs)
        ));
        // equal times are never comparable
        let c = cohort(vec![1.0, 2.0], vec![label(5.0, true), label(5.0, true)]);
        assert!(matches!(
            concordance_index(&c),
            Err(CoreError::NoComparablePairs)
        ));
    }

    #[test]
    fn km_hand_values() {
        let km = kaplan_meier(&[label(1.0, true), label(2.0, true), label(3.0, true)]).unwrap();
        assert_eq!(km.times, vec![1.0, 2.0, 3.0]);
        assert_relative_eq!(km.survival[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(km.survival[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(km.survival[2], 0.0, epsilon = 1e-12);
        assert_eq!(km.at_risk, vec![3, 2, 1]);

        let km = kaplan_meier(&[label(1.0, true), label(2.0, false), label(3.0, true)]).unwrap();
        assert_relative_eq!(km.survival_at(1.0), 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(km.survival_at(2.5), 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(km.survival_at(3.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn km_all_censored_stays_at_one() {
        let km = kaplan_meier(&[label(1.0, false), label(2.0, false)]).unwrap();
        assert!(km.times.is_empty());
        assert_relative_eq!(km.survival_at(100.0), 1.0);
    }

    #[test]
    fn km_monotone_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<SurvivalLabel> = (0..60)
            .map(|_| label(rng.gen_range(1..40) as f64, rng.gen_bool(0.6)))
            .collect();
        let km = kaplan_meier(&labels).unwrap();
        assert!(km.survival.iter().all(|&s| (0.0..=1.0).contains(&s)));
        assert!(km.survival.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn stratify_examples() {
        let labels = vec![label(1.0, true); 4];
        let g = stratify_risk(&cohort(vec![1.0, 2.0, 3.0, 4.0], labels.clone())).unwrap();
        assert_eq!(g.low, vec![0, 1]);
        assert_eq!(g.high, vec![2, 3]);
        assert!(!g.degenerate);

        let g = stratify_risk(&cohort(vec![2.0, 2.0, 2.0, 2.0], labels.clone())).unwrap();
        assert_eq!(g.low.len(), 4);
        assert!(g.high.is_empty());
        assert!(g.degenerate);

        let g = stratify_risk(&cohort(vec![1.0, 2.0, 2.0, 3.0], labels)).unwrap();
        assert_eq!(g.low, vec![0, 1, 2]);
        assert_eq!(g.high, vec![3]);
    }

    #[test]
    fn logrank_identical_groups() {
        let group: Vec<SurvivalLabel> = (1..=10).map(|t| label(t as f64, t % 3 != 0)).collect();
        let (chi, p) = logrank_test(&group, &group).unwrap();
        assert!(chi.abs() < 1e-12, "chi = {chi}");
        assert!(p > 0.999);
    }

    #[test]
    fn logrank_hand_tabulation() {
        // A events at 1,3,5; B events at 2,4,6; O1=3, E1=67/30, V=1091/900
        // chi = (23/30)^2 / (1091/900) = 529/1091
        let a = vec![label(1.0, true), label(3.0, true), label(5.0, true)];
        let b = vec![label(2.0, true), label(4.0, true), label(6.0, true)];
        let (chi, p) = logrank_test(&a, &b).unwrap();
        assert_relative_eq!(chi, 529.0 / 1091.0, epsilon = 1e-6);
        assert!(p > 0.0 && p < 1.0);
        assert!((0.45..0.52).contains(&p), "p = {p}");
    }

    #[test]
    fn logrank_separated_groups_significant() {
        let a: Vec<SurvivalLabel> = (1..=20).map(|t| label(t as f64, true)).collect();
        let b: Vec<SurvivalLabel> = (101..=120).map(|t| label(t as f64, true)).collect();
        let (chi, p) = logrank_test(&a, &b).unwrap();
        assert!(chi > 10.0);
        assert!(p < 0.01);
    }

    #[test]
    fn aggregate_hand_values() {
        let (m, s) = aggregate_folds(&[0.7, 0.7, 0.7, 0.7]).unwrap();
        assert_relative_eq!(m, 0.7, epsilon = 1e-15);
        assert_relative_eq!(s, 0.0, epsilon = 1e-15);

        let (m, s) = aggregate_folds(&[0.5]).unwrap();
        assert_relative_eq!(m, 0.5, epsilon = 1e-15);
        assert_eq!(s, 0.0);

        let (m, s) = aggregate_folds(&[0.70, 0.72, 0.74, 0.76]).unwrap();
        assert_relative_eq!(m, 0.73, epsilon = 1e-12);
        assert_relative_eq!(s, 0.02581988897471611, epsilon = 1e-12);
    }
}
