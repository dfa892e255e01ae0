//! Logistic fusion of the visual and semantic reconstruction scores into a
//! single concreteness target: `sigmoid(a * vba + b * sba + c)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationSet, CaptionRecord, ReadMode};
use crate::standardize::sigmoid;

pub const FORMAT_VERSION: u32 = 1;

/// Condition number above which the Newton step is replaced by a gradient
/// step.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("labels contain a single class; both classes are required")]
    SingleClass,
    #[error("no labels to binarize")]
    Empty,
    #[error("non-finite input at point {0}")]
    NonFinite(usize),
    #[error("invalid fit config: {0}")]
    Config(String),
    #[error("fusion parameters must be finite")]
    NonFiniteParams,
    #[error("record {id:?} has no score {score:?}")]
    MissingScore { id: String, score: String },
    #[error("unknown params preset {0:?}")]
    UnknownPreset(String),
    #[error("unsupported params format_version {0}")]
    Version(u32),
    #[error("params file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("params file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// VBA weight.
    pub a: f64,
    /// SBA weight.
    pub b: f64,
    /// Bias.
    pub c: f64,
}

impl FusionParams {
    /// The published fit: a = 13.2, b = 3.6, c = -9.4.
    pub const PAPER_A8: FusionParams = FusionParams { a: 13.2, b: 3.6, c: -9.4 };

    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, FusionError> {
        let p = FusionParams { a, b, c };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), FusionError> {
        if [self.a, self.b, self.c].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(FusionError::NonFiniteParams)
        }
    }

    pub fn preset(name: &str) -> Option<FusionParams> {
        match name {
            "paper-a8" => Some(Self::PAPER_A8),
            _ => None,
        }
    }

    /// `a * vba + b * sba + c`.
    pub fn logit(&self, vba: f64, sba: f64) -> f64 {
        self.a * vba + self.b * sba + self.c
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        #[derive(Deserialize)]
        struct File {
            format_version: u32,
            #[serde(flatten)]
            params: FusionParams,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: File = serde_json::from_str(&text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(FusionError::Version(file.format_version));
        }
        file.params.check()?;
        Ok(file.params)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        let path = path.as_ref();
        let value = serde_json::json!({
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "format_version": FORMAT_VERSION,
        });
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        fs::write(path, text).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// A preset name or a params file path.
    pub fn load(spec: &str) -> Result<Self, FusionError> {
        match Self::preset(spec) {
            Some(p) => Ok(p),
            None if Path::new(spec).exists() => Self::read(spec),
            None => Err(FusionError::UnknownPreset(spec.to_string())),
        }
    }
}

pub fn apply_fusion(params: &FusionParams, vba: f64, sba: f64) -> f64 {
    sigmoid(params.logit(vba, sba))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// Label 1 iff the score is strictly above the lower median.
    Median,
    /// Label 1 iff the score is strictly above the threshold.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub l2: f64,
    pub binarize: Binarize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 10_000,
            tol: 1e-8,
            l2: 1e-6,
            binarize: Binarize::Median,
        }
    }
}

/// Returns the binary labels and the cut point that produced them.
pub fn binarize_labels(annotations: &AnnotationSet, mode: Binarize) -> Result<(BTreeMap<String, u8>, f64), FusionError> {
    if annotations.is_empty() {
        return Err(FusionError::Empty);
    }
    let cut = match mode {
        Binarize::Threshold(theta) => theta,
        Binarize::Median => {
            let mut values: Vec<f64> = annotations.labels().values().copied().collect();
            values.sort_by(f64::total_cmp);
            values[(values.len() - 1) / 2]
        }
    };
    let labels: BTreeMap<String, u8> = annotations
        .labels()
        .iter()
        .map(|(id, &v)| (id.clone(), u8::from(v > cut)))
        .collect();
    let ones = labels.values().filter(|&&l| l == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(FusionError::SingleClass);
    }
    Ok((labels, cut))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub vba: f64,
    pub sba: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: FusionParams,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value before the first step and after every step.
    pub loss_trace: Vec<f64>,
    /// Steps that fell back to gradient descent.
    pub gradient_steps: usize,
}

impl FitOutcome {
    /// Set when the solver hit `max_iters` without converging.
    pub fn warning(&self) -> bool {
        !self.converged
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Objective<'a> {
    points: &'a [LabeledPoint],
    l2: f64,
}

impl Objective<'_> {
    fn features(p: &LabeledPoint) -> Vector3<f64> {
        Vector3::new(p.vba, p.sba, 1.0)
    }

    fn loss(&self, w: &Vector3<f64>) -> f64 {
        let n = self.points.len() as f64;
        let data: f64 = self
            .points
            .iter()
            .map(|p| {
                let z = w.dot(&Self::features(p));
                softplus(z) - f64::from(p.label) * z
            })
            .sum::<f64>()
            / n;
        data + 0.5 * self.l2 * (w[0] * w[0] + w[1] * w[1])
    }

    fn gradient_hessian(&self, w: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let n = self.points.len() as f64;
        let mut g = Vector3::zeros();
        let mut h = Matrix3::zeros();
        for p in self.points {
            let x = Self::features(p);
            let s = sigmoid(w.dot(&x));
            g += x * (s - f64::from(p.label));
            h += (x * x.transpose()) * (s * (1.0 - s));
        }
        g /= n;
        h /= n;
        g[0] += self.l2 * w[0];
        g[1] += self.l2 * w[1];
        h[(0, 0)] += self.l2;
        h[(1, 1)] += self.l2;
        (g, h)
    }
}

/// Minimizes mean logistic loss plus `l2/2 * (a^2 + b^2)` with damped Newton
/// steps (backtracking line search), falling back to gradient steps when the
/// Hessian is ill-conditioned.
pub fn fit_fusion(points: &[LabeledPoint], config: &FitConfig) -> Result<FitOutcome, FusionError> {
    if config.max_iters < 1 {
        return Err(FusionError::Config("max_iters must be >= 1".into()));
    }
    if config.tol.is_nan() || config.tol <= 0.0 {
        return Err(FusionError::Config("tol must be positive".into()));
    }
    if !(config.l2 >= 0.0 && config.l2.is_finite()) {
        return Err(FusionError::Config("l2 must be >= 0".into()));
    }
    if let Some(i) = points.iter().position(|p| !p.vba.is_finite() || !p.sba.is_finite()) {
        return Err(FusionError::NonFinite(i));
    }
    let ones = points.iter().filter(|p| p.label == 1).count();
    if ones == 0 || ones == points.len() {
        return Err(FusionError::SingleClass);
    }

    let objective = Objective { points, l2: config.l2 };
    let mut w = Vector3::zeros();
    let mut loss = objective.loss(&w);
    let mut trace = vec![loss];
    let mut gradient_steps = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let (g, h) = objective.gradient_hessian(&w);
        let direction = match newton_direction(&g, &h) {
            Some(d) if d.dot(&g) < 0.0 => d,
            _ => {
                gradient_steps += 1;
                -g
            }
        };

        // Armijo backtracking keeps the loss monotone.
        let slope = direction.dot(&g);
        let mut step = 1.0;
        let mut next = w + direction * step;
        let mut next_loss = objective.loss(&next);
        while next_loss > loss + 1e-4 * step * slope && step > 1e-12 {
            step *= 0.5;
            next = w + direction * step;
            next_loss = objective.loss(&next);
        }
        if next_loss > loss {
            // no decrease possible at machine precision
            converged = g.amax() < config.tol.sqrt();
            break;
        }

        let change = (next - w).amax();
        w = next;
        loss = next_loss;
        trace.push(loss);
        if change < config.tol {
            converged = true;
            break;
        }
    }

    Ok(FitOutcome {
        params: FusionParams {
            a: w[0],
            b: w[1],
            c: w[2],
        },
        iterations,
        converged,
        loss_trace: trace,
        gradient_steps,
    })
}

fn newton_direction(g: &Vector3<f64>, h: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eigen = SymmetricEigen::new(*h);
    let max = eigen.eigenvalues.amax();
    let min = eigen.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min.is_nan() || min <= 0.0 || max / min > MAX_CONDITION {
        return None;
    }
    h.cholesky().map(|c| -c.solve(g))
}

/// Attaches `out_name = apply_fusion(params, vba, sba)` to each record.
pub struct FuseCorpus<I> {
    records: I,
    params: FusionParams,
    vba_name: String,
    sba_name: String,
    out_name: String,
    mode: ReadMode,
    skipped: usize,
    failed: bool,
}

pub fn fuse_corpus<I>(
    records: I,
    params: FusionParams,
    vba_name: &str,
    sba_name: &str,
    out_name: &str,
    mode: ReadMode,
) -> FuseCorpus<I::IntoIter>
where
    I: IntoIterator<Item = CaptionRecord>,
{
    FuseCorpus {
        records: records.into_iter(),
        params,
        vba_name: vba_name.to_string(),
        sba_name: sba_name.to_string(),
        out_name: out_name.to_string(),
        mode,
        skipped: 0,
        failed: false,
    }
}

impl<I> FuseCorpus<I> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<I: Iterator<Item = CaptionRecord>> Iterator for FuseCorpus<I> {
    type Item = Result<CaptionRecord, FusionError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        for mut record in self.records.by_ref() {
            let (vba, sba) = (record.score(&self.vba_name), record.score(&self.sba_name));
            let (Some(vba), Some(sba)) = (vba, sba) else {
                if self.mode == ReadMode::Lenient {
                    self.skipped += 1;
                    continue;
                }
                self.failed = true;
                let missing = if vba.is_none() { &self.vba_name } else { &self.sba_name };
                return Some(Err(FusionError::MissingScore {
                    id: record.id,
                    score: missing.clone(),
                }));
            };
            record
                .scores
                .insert(self.out_name.clone(), apply_fusion(&self.params, vba, sba));
            return Some(Ok(record));
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn direct_sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn ann(scale: (i64, i64), labels: &[(&str, f64)]) -> AnnotationSet {
        AnnotationSet::new(scale.0, scale.1, labels.iter().map(|(k, v)| (k.to_string(), *v)).collect()).unwrap()
    }

    #[test]
    fn median_binarization_uses_lower_median() {
        let set = ann((0, 3), &[("a", 0.0), ("b", 1.0), ("c", 2.0), ("d", 3.0)]);
        let (labels, cut) = binarize_labels(&set, Binarize::Median).unwrap();
        assert_eq!(cut, 1.0);
        let got: Vec<_> = labels.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        assert_eq!(got, [("a", 0), ("b", 0), ("c", 1), ("d", 1)]);
    }

    #[test]
    fn binarization_errors_and_threshold() {
        let set = ann((0, 3), &[("a", 2.0), ("b", 2.0)]);
        assert!(matches!(binarize_labels(&set, Binarize::Median), Err(FusionError::SingleClass)));

        let set = ann((0, 3), &[("a", 1.0), ("b", 2.0)]);
        let (labels, _) = binarize_labels(&set, Binarize::Threshold(1.5)).unwrap();
        assert_eq!((labels["a"], labels["b"]), (0, 1));
        assert!(matches!(binarize_labels(&set, Binarize::Threshold(5.0)), Err(FusionError::SingleClass)));

        let empty = ann((0, 3), &[]);
        assert!(matches!(binarize_labels(&empty, Binarize::Median), Err(FusionError::Empty)));
    }

    #[test]
    fn preset_params_spot_values() {
        let p = FusionParams::PAPER_A8;
        // sheep row: vba 0.95, sba 0.72
        assert!((p.logit(0.95, 0.72) - 5.732).abs() < 1e-12);
        let v = apply_fusion(&p, 0.95, 0.72);
        assert!((v - direct_sigmoid(5.732)).abs() < 1e-12);
        assert!((v - 0.9968).abs() < 1e-4);
        // "keep an eye on the ball" row: vba 0.19, sba 0.91
        assert!((p.logit(0.19, 0.91) + 3.616).abs() < 1e-12);
        let v = apply_fusion(&p, 0.19, 0.91);
        assert!((v - direct_sigmoid(-3.616)).abs() < 1e-12);
        assert!((v - 0.0262).abs() < 1e-4);
    }

    #[test]
    fn zero_params_give_one_half() {
        let p = FusionParams::new(0.0, 0.0, 0.0).unwrap();
        for (v, s) in [(0.0, 0.0), (0.3, 0.9), (1.0, 1.0)] {
            assert_eq!(apply_fusion(&p, v, s), 0.5);
        }
        assert!(FusionParams::new(f64::NAN, 0.0, 0.0).is_err());
    }

    fn synthetic(truth: FusionParams, n: usize) -> Vec<LabeledPoint> {
        // low-discrepancy grid over [0,1]^2
        (0..n)
            .map(|i| {
                let vba = (i as f64 * 0.618_033_988_749_895).fract();
                let sba = (i as f64 * 0.754_877_666_246_693).fract();
                let label = u8::from(apply_fusion(&truth, vba, sba) > 0.5);
                LabeledPoint { vba, sba, label }
            })
            .collect()
    }

    #[test]
    fn recovers_decision_boundary() {
        let truth = FusionParams::new(4.0, 2.0, -3.0).unwrap();
        let points = synthetic(truth, 200);
        let fit = fit_fusion(&points, &FitConfig::default()).unwrap();
        for p in &points {
            let predicted = u8::from(apply_fusion(&fit.params, p.vba, p.sba) > 0.5);
            assert_eq!(predicted, p.label, "{p:?} with {:?}", fit.params);
        }
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fit_errors() {
        let ones = vec![LabeledPoint { vba: 0.1, sba: 0.2, label: 1 }; 3];
        assert!(matches!(fit_fusion(&ones, &FitConfig::default()), Err(FusionError::SingleClass)));
        let bad = [
            LabeledPoint { vba: f64::NAN, sba: 0.2, label: 1 },
            LabeledPoint { vba: 0.1, sba: 0.2, label: 0 },
        ];
        assert!(matches!(fit_fusion(&bad, &FitConfig::default()), Err(FusionError::NonFinite(0))));
    }

    #[test]
    fn separable_pair_hits_iteration_cap() {
        let points = [
            LabeledPoint { vba: 0.2, sba: 0.3, label: 0 },
            LabeledPoint { vba: 0.8, sba: 0.6, label: 1 },
        ];
        // without a ridge the separable optimum is at infinity
        let config = FitConfig {
            max_iters: 50,
            l2: 0.0,
            ..Default::default()
        };
        let fit = fit_fusion(&points, &config).unwrap();
        assert_eq!(fit.iterations, 50);
        assert!(fit.warning());
        assert!([fit.params.a, fit.params.b, fit.params.c].iter().all(|v| v.is_finite()));
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fit_depends_only_on_triples() {
        // binarize + fit through two differently named score pairs
        let truth = FusionParams::new(3.0, -1.0, -1.0).unwrap();
        let points = synthetic(truth, 80);
        let records: Vec<_> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                CaptionRecord::new(format!("r{i}"), "x")
                    .with_score("v1", p.vba)
                    .with_score("s1", p.sba)
                    .with_score("vis", p.vba)
                    .with_score("sem", p.sba)
            })
            .collect();
        let collect = |v: &str, s: &str| -> Vec<LabeledPoint> {
            records
                .iter()
                .zip(&points)
                .map(|(r, p)| LabeledPoint { vba: r.score(v).unwrap(), sba: r.score(s).unwrap(), label: p.label })
                .collect()
        };
        let f1 = fit_fusion(&collect("v1", "s1"), &FitConfig::default()).unwrap();
        let f2 = fit_fusion(&collect("vis", "sem"), &FitConfig::default()).unwrap();
        for p in &points {
            assert_eq!(
                apply_fusion(&f1.params, p.vba, p.sba) > 0.5,
                apply_fusion(&f2.params, p.vba, p.sba) > 0.5
            );
        }
    }

    #[test]
    fn params_file_and_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = FusionParams::new(1.5, -2.0, 0.25).unwrap();
        p.write(&path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("format_version"));
        assert_eq!(FusionParams::load(path.to_str().unwrap()).unwrap(), p);
        assert_eq!(FusionParams::load("paper-a8").unwrap(), FusionParams::PAPER_A8);
        assert!(matches!(FusionParams::load("nope"), Err(FusionError::UnknownPreset(_))));
    }

    #[test]
    fn fuse_corpus_modes() {
        let records = vec![
            CaptionRecord::new("a", "sheep").with_score("vba", 0.95).with_score("sba", 0.72),
            CaptionRecord::new("b", "x").with_score("vba", 0.5),
        ];
        let mut it = fuse_corpus(records.clone(), FusionParams::PAPER_A8, "vba", "sba", "icc", ReadMode::Lenient);
        let out: Vec<_> = it.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(it.skipped(), 1);
        assert_eq!(out.len(), 1);
        assert!((out[0].score("icc").unwrap() - 0.9968).abs() < 1e-4);
        assert_eq!(out[0].score("vba"), Some(0.95));

        let strict: Result<Vec<_>, _> =
            fuse_corpus(records, FusionParams::PAPER_A8, "vba", "sba", "icc", ReadMode::Strict).collect();
        assert!(matches!(strict, Err(FusionError::MissingScore { ref id, ref score }) if id == "b" && score == "sba"));

        let empty: Vec<_> = fuse_corpus(Vec::new(), FusionParams::PAPER_A8, "vba", "sba", "icc", ReadMode::Strict).collect();
        assert!(empty.is_empty());
    }

    proptest! {
        #[test]
        fn monotone_in_each_score_for_nonnegative_weights(
            a in 0.0f64..20.0, b in 0.0f64..20.0, c in -20.0f64..20.0,
            v1 in 0.0f64..=1.0, v2 in 0.0f64..=1.0, s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0,
        ) {
            let p = FusionParams::new(a, b, c).unwrap();
            let (vlo, vhi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
            let (slo, shi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(apply_fusion(&p, vlo, s1) <= apply_fusion(&p, vhi, s1));
            prop_assert!(apply_fusion(&p, v1, slo) <= apply_fusion(&p, v1, shi));
            let out = apply_fusion(&p, v1, s1);
            prop_assert!((0.0..=1.0).contains(&out));
        }
    }
}
