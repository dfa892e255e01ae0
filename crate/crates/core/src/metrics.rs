//! Reconstruction-fidelity primitives and the correlation suite used to
//! evaluate concreteness scores against human labels.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("similarity {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("edit similarity is undefined for two empty strings")]
    BothEmpty,
    #[error("no candidates to choose from")]
    NoCandidates,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A similarity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Similarity(f64);

impl Similarity {
    pub fn new(value: f64) -> Result<Self, MetricsError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Similarity(value))
        } else {
            Err(MetricsError::OutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Similarity {
    type Error = MetricsError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Similarity::new(value)
    }
}

impl From<Similarity> for f64 {
    fn from(s: Similarity) -> f64 {
        s.0
    }
}

/// Levenshtein distance over unicode scalar values.
pub fn edit_distance(x: &str, y: &str) -> usize {
    let a: Vec<char> = x.chars().collect();
    let b: Vec<char> = y.chars().collect();

    // Common prefix and suffix never contribute.
    let prefix = a.iter().zip(&b).take_while(|(p, q)| p == q).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(p, q)| p == q).count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);

    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }

    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, &lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &sc) in short.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if lc == sc {
                diag
            } else {
                1 + diag.min(above).min(row[j])
            };
            diag = above;
        }
    }
    row[short.len()]
}

/// `1 - edit_distance(x, y) / max(|x|, |y|)`, lengths counted in unicode
/// scalar values.
pub fn edit_similarity(x: &str, y: &str) -> Result<Similarity, MetricsError> {
    let longest = x.chars().count().max(y.chars().count());
    if longest == 0 {
        return Err(MetricsError::BothEmpty);
    }
    let d = edit_distance(x, y);
    Similarity::new(1.0 - d as f64 / longest as f64)
}

/// Picks the candidate most similar to `source`; ties go to the lowest index.
pub fn best_of<S, F>(source: &str, candidates: &[S], mut sim: F) -> Result<(usize, Similarity), MetricsError>
where
    S: AsRef<str>,
    F: FnMut(&str, &str) -> Result<Similarity, MetricsError>,
{
    let mut best: Option<(usize, Similarity)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let s = sim(source, cand.as_ref())?;
        if best.is_none_or(|(_, b)| s.value() > b.value()) {
            best = Some((i, s));
        }
    }
    best.ok_or(MetricsError::NoCandidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    pub n: usize,
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFewSamples(x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("x"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("y"));
    }
    Ok(())
}

/// Pearson, Spearman (average ranks) and Kendall tau-b for paired samples.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<CorrelationReport, MetricsError> {
    check_inputs(x, y)?;
    Ok(CorrelationReport {
        pearson: pearson(x, y)?,
        spearman: spearman(x, y)?,
        kendall: kendall_tau_b(x, y)?,
        n: x.len(),
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_inputs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties assigned their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_inputs(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall tau-b in O(n log n) (Knight's merge-sort algorithm).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_inputs(x, y)?;
    let n = x.len();
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));

    let tied_pairs = |run: u64| run * (run - 1) / 2;

    // ties in x, and joint ties in (x, y)
    let (mut ties_x, mut ties_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_x += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_xy += 1;
            } else {
                ties_xy += tied_pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += tied_pairs(run_x);
            ties_xy += tied_pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += tied_pairs(run_x);
    ties_xy += tied_pairs(run_xy);

    // Sorting the y column (stable merge sort) counts the discordant pairs as
    // inversions; pairs tied in x are already ordered by y so they add none.
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut scratch = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut scratch);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_y += 1;
        } else {
            ties_y += tied_pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += tied_pairs(run_y);

    let total = tied_pairs(n as u64);
    let untied_x = total - ties_x;
    let untied_y = total - ties_y;
    if untied_x == 0 {
        return Err(MetricsError::ZeroVariance("x"));
    }
    if untied_y == 0 {
        return Err(MetricsError::ZeroVariance("y"));
    }
    // concordant - discordant = total - ties_x - ties_y + ties_xy - 2 * swaps
    let numerator = total as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    let tau = numerator / ((untied_x as f64).sqrt() * (untied_y as f64).sqrt());
    Ok(tau.clamp(-1.0, 1.0))
}

/// Bottom-up merge sort returning the number of strict inversions.
fn merge_count(values: &mut [f64], scratch: &mut [f64]) -> u64 {
    let n = values.len();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if values[j].total_cmp(&values[i]) == Ordering::Less {
                    scratch[k] = values[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    scratch[k] = values[i];
                    i += 1;
                }
                k += 1;
            }
            scratch[k..k + mid - i].copy_from_slice(&values[i..mid]);
            k += mid - i;
            scratch[k..k + hi - j].copy_from_slice(&values[j..hi]);
            values[lo..hi].copy_from_slice(&scratch[lo..hi]);
            lo = hi;
        }
        width *= 2;
    }
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full (|x|+1) x (|y|+1) Levenshtein table.
    fn dp_oracle(x: &str, y: &str) -> usize {
        let a: Vec<char> = x.chars().collect();
        let b: Vec<char> = y.chars().collect();
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in t.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in t[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
            }
        }
        t[a.len()][b.len()]
    }

    /// tau-b by enumerating every pair.
    fn kendall_oracle(x: &[f64], y: &[f64]) -> f64 {
        let (mut c, mut d, mut tx, mut ty) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let sx = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
                let sy = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
                match (sx == 0.0, sy == 0.0) {
                    (true, true) => {}
                    (true, false) => tx += 1.0,
                    (false, true) => ty += 1.0,
                    (false, false) => {
                        if sx == sy {
                            c += 1.0
                        } else {
                            d += 1.0
                        }
                    }
                }
            }
        }
        (c - d) / ((c + d + tx) * (c + d + ty)).sqrt()
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("abc", ""), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(dp_oracle("kitten", "sitting"), 3);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        // scalar values, not bytes
        assert_eq!(edit_distance("caf\u{e9}", "cafe"), 1);
    }

    #[test]
    fn edit_similarity_examples() {
        assert_eq!(edit_similarity("abc", "abc").unwrap().value(), 1.0);
        assert_eq!(edit_similarity("abc", "xyz").unwrap().value(), 0.0);
        let expected = 1.0 - dp_oracle("kitten", "sitting") as f64 / 7.0;
        assert!((edit_similarity("kitten", "sitting").unwrap().value() - expected).abs() < 1e-15);
        assert!((expected - 0.5714).abs() < 1e-4);
        assert_eq!(edit_similarity("", "a").unwrap().value(), 0.0);
        assert_eq!(edit_similarity("", ""), Err(MetricsError::BothEmpty));
    }

    #[test]
    fn best_of_examples() {
        let (i, s) = best_of("a dog", &["a dog", "a cat"], edit_similarity).unwrap();
        assert_eq!((i, s.value()), (0, 1.0));

        let (i, s) = best_of("a dog", &["a cat", "a cat", "a cat"], edit_similarity).unwrap();
        assert_eq!(i, 0);
        assert_eq!(s, edit_similarity("a dog", "a cat").unwrap());

        let sims: Vec<f64> = ["abd", "xbc", "abc"]
            .iter()
            .map(|c| 1.0 - dp_oracle("abc", c) as f64 / 3.0)
            .collect();
        assert!(sims[0] == sims[1] && sims[1] < sims[2]);
        let (i, s) = best_of("abc", &["abd", "xbc", "abc"], edit_similarity).unwrap();
        assert_eq!((i, s.value()), (2, 1.0));

        let none: [&str; 0] = [];
        assert_eq!(best_of("abc", &none, edit_similarity), Err(MetricsError::NoCandidates));
    }

    #[test]
    fn correlate_examples() {
        let r = correlate(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((r.pearson, r.spearman, r.kendall, r.n), (1.0, 1.0, 1.0, 4));
        let r = correlate(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!((r.pearson, r.spearman, r.kendall), (-1.0, -1.0, -1.0));

        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        // pairs: 5 concordant, 0 discordant, 1 tied in x only -> 5/sqrt(5*6)
        let oracle = kendall_oracle(&x, &y);
        assert!((oracle - 5.0 / 30f64.sqrt()).abs() < 1e-15);
        assert!((kendall_tau_b(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn correlate_errors() {
        assert_eq!(correlate(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1)));
        assert_eq!(correlate(&[1.0], &[1.0]), Err(MetricsError::TooFewSamples(1)));
        assert_eq!(correlate(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ZeroVariance("x")));
        assert_eq!(correlate(&[1.0, 2.0], &[3.0, 3.0]), Err(MetricsError::ZeroVariance("y")));
        assert_eq!(correlate(&[1.0, f64::NAN], &[1.0, 2.0]), Err(MetricsError::NonFinite("x")));
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), [2.0, 3.5, 3.5, 1.0]);
    }

    proptest! {
        #[test]
        fn edit_distance_matches_oracle(x in "[abc\u{e9}]{0,40}", y in "[abc\u{e9}]{0,40}") {
            prop_assert_eq!(edit_distance(&x, &y), dp_oracle(&x, &y));
        }

        #[test]
        fn edit_distance_is_symmetric_metric(x in "[ab ]{0,12}", y in "[ab ]{0,12}", z in "[ab ]{0,12}") {
            prop_assert_eq!(edit_distance(&x, &y), edit_distance(&y, &x));
            prop_assert!(edit_distance(&x, &z) <= edit_distance(&x, &y) + edit_distance(&y, &z));
        }

        #[test]
        fn similarity_one_iff_equal(x in "[ab]{0,6}", y in "[ab]{0,6}") {
            prop_assume!(!x.is_empty() || !y.is_empty());
            let s = edit_similarity(&x, &y).unwrap().value();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, x == y);
        }

        #[test]
        fn kendall_matches_pair_enumeration(
            pairs in proptest::collection::vec((0u8..5, 0u8..5), 2..13),
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
            let oracle = kendall_oracle(&x, &y);
            match kendall_tau_b(&x, &y) {
                Ok(tau) => prop_assert!((tau - oracle).abs() < 1e-12, "{} vs {}", tau, oracle),
                Err(_) => prop_assert!(oracle.is_nan()),
            }
        }

        #[test]
        fn coefficients_invariant_under_increasing_transforms(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..20),
            ys in proptest::collection::vec(-10.0f64..10.0, 3..20),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let n = xs.len().min(ys.len());
            let (x, y) = (&xs[..n], &ys[..n]);
            let Ok(base) = correlate(x, y) else { return Ok(()) };
            let affine: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let r = correlate(&affine, y).unwrap();
            prop_assert!((r.pearson - base.pearson).abs() < 1e-9);
            let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + v).collect();
            let r = correlate(&cubed, y).unwrap();
            prop_assert!((r.spearman - base.spearman).abs() < 1e-12);
            prop_assert!((r.kendall - base.kendall).abs() < 1e-12);
        }
    }
}
