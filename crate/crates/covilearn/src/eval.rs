//! Confusion matrix, accuracy/sensitivity/specificity, ROC/AUC, and the
//! serialized metrics report.
//!
//! Covid is the positive class throughout. The confusion matrix classifies
//! at argmax (0.5 on the positive probability); the ROC sweep is independent
//! of that choice. Metrics with a zero denominator are reported as explicit
//! nulls, never silently as zero.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureGraph, ParameterStore};
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::predict;

/// Binary confusion counts; covid is positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Counts prediction/truth agreement per class.
pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::argument(format!(
            "prediction and truth lengths differ: {} vs {}",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::argument("confusion matrix needs at least one sample"));
    }
    let mut cm = ConfusionMatrix { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (&pred, &truth) in predictions.iter().zip(truths) {
        match (truth, pred) {
            (Label::Covid, Label::Covid) => cm.tp += 1,
            (Label::Normal, Label::Normal) => cm.tn += 1,
            (Label::Normal, Label::Covid) => cm.fp += 1,
            (Label::Covid, Label::Normal) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Accuracy, sensitivity, specificity. `None` marks an undefined metric
/// (zero denominator); it serializes as JSON null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// The three ratio metrics of a confusion matrix:
/// accuracy (TP+TN)/total, sensitivity TP/(TP+FN), specificity TN/(TN+FP).
pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let ratio = |num: usize, den: usize| (den != 0).then(|| num as f64 / den as f64);
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
    }
}

/// ROC curve points and area from positive-class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` points from (0,0) to (1,1), monotone in both coordinates.
    pub points: Vec<[f64; 2]>,
    pub auc: f64,
}

/// Threshold sweep over the unique scores (descending, with sentinels),
/// trapezoidal area. Tied scores advance TP and FP together, which makes the
/// area equal to the Mann-Whitney statistic with ties counted one half.
pub fn roc_auc(scores: &[f64], truths: &[Label]) -> Result<RocCurve> {
    if scores.len() != truths.len() {
        return Err(Error::argument(format!(
            "score and truth lengths differ: {} vs {}",
            scores.len(),
            truths.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::argument("scores must be finite"));
    }
    let positives = truths.iter().filter(|l| **l == Label::Covid).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::argument(
            "ROC needs at least one positive and one negative sample",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![[0.0, 0.0]];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_fpr, mut prev_tpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        // Advance through the whole tie group at once.
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            match truths[order[i]] {
                Label::Covid => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        let tpr = tp as f64 / positives as f64;
        let fpr = fp as f64 / negatives as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push([fpr, tpr]);
        (prev_fpr, prev_tpr) = (fpr, tpr);
    }
    Ok(RocCurve { points, auc })
}

/// Run configuration echoed into the report for traceability.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub variant: String,
    pub head_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mean_subtract: bool,
    pub threshold: String,
}

/// Everything the evaluation produces, serializable as the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: f64,
    pub roc: Vec<[f64; 2]>,
    pub provenance: ReportProvenance,
}

/// JSON shape of the confusion block: `{tp, tn, fp, fn}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<ConfusionMatrix> for Confusion {
    fn from(cm: ConfusionMatrix) -> Self {
        Confusion { tp: cm.tp, tn: cm.tn, fp: cm.fp, fn_: cm.fn_ }
    }
}

impl From<Confusion> for ConfusionMatrix {
    fn from(c: Confusion) -> Self {
        ConfusionMatrix { tp: c.tp, tn: c.tn, fp: c.fp, fn_: c.fn_ }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    /// Formats the headline numbers at the 4-decimal precision used in
    /// result tables.
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "undefined".to_string(),
        };
        format!(
            "accuracy {} | sensitivity {} | specificity {} | auc {:.4} | confusion tp={} fn={} tn={} fp={}",
            fmt(self.accuracy),
            fmt(self.sensitivity),
            fmt(self.specificity),
            self.auc,
            self.confusion.tp,
            self.confusion.fn_,
            self.confusion.tn,
            self.confusion.fp,
        )
    }

    /// ROC points as a `fpr,tpr` CSV for external plotting.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for [fpr, tpr] in &self.roc {
            out.push_str(&format!("{fpr},{tpr}\n"));
        }
        out
    }
}

/// Predicts the given samples and assembles the full report: argmax
/// confusion matrix, ratio metrics, ROC/AUC over positive-class scores.
pub fn evaluate(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    samples: &[Sample],
    provenance: ReportProvenance,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::argument("evaluation set is empty"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    let truths: Vec<Label> = samples.iter().map(|s| s.label).collect();
    for chunk in samples.chunks(16) {
        let pixels: Vec<&Tensor> = chunk.iter().map(|s| &s.pixels).collect();
        let batch = Tensor::stack(&pixels)?;
        for p in predict(graph, store, &batch)? {
            scores.push(p.probabilities[0]);
            predictions.push(p.label);
        }
    }
    let cm = confusion(&predictions, &truths)?;
    let m = metrics(&cm);
    let roc = roc_auc(&scores, &truths)?;
    Ok(MetricsReport {
        confusion: cm.into(),
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        auc: roc.auc,
        roc: roc.points,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise Mann-Whitney oracle: P(score_pos > score_neg) + 0.5 ties.
    fn mann_whitney(scores: &[f64], truths: &[Label]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &ti) in truths.iter().enumerate() {
            if ti != Label::Covid {
                continue;
            }
            for (j, &tj) in truths.iter().enumerate() {
                if tj != Label::Normal {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Brute-force per-sample counting oracle for the ratio metrics.
    fn counting_oracle(preds: &[Label], truths: &[Label]) -> (f64, Option<f64>, Option<f64>) {
        let n = preds.len() as f64;
        let agree = preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64;
        let pos: Vec<usize> =
            (0..preds.len()).filter(|&i| truths[i] == Label::Covid).collect();
        let neg: Vec<usize> =
            (0..preds.len()).filter(|&i| truths[i] == Label::Normal).collect();
        let sens = (!pos.is_empty()).then(|| {
            pos.iter().filter(|&&i| preds[i] == Label::Covid).count() as f64 / pos.len() as f64
        });
        let spec = (!neg.is_empty()).then(|| {
            neg.iter().filter(|&&i| preds[i] == Label::Normal).count() as f64 / neg.len() as f64
        });
        (agree / n, sens, spec)
    }

    #[test]
    fn all_correct_covid_only() {
        let labels = vec![Label::Covid; 10];
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (10, 0, 0, 0));
        let m = metrics(&cm);
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, None);
    }

    #[test]
    fn all_wrong_balanced() {
        let truths: Vec<Label> =
            (0..10).map(|i| if i < 5 { Label::Covid } else { Label::Normal }).collect();
        let preds: Vec<Label> =
            (0..10).map(|i| if i < 5 { Label::Normal } else { Label::Covid }).collect();
        let cm = confusion(&preds, &truths).unwrap();
        assert_eq!((cm.fn_, cm.fp, cm.tp, cm.tn), (5, 5, 0, 0));
    }

    #[test]
    fn forced_dnn3_scenario() {
        // 48 covid all detected, 50 normal with one false positive.
        let mut truths = vec![Label::Covid; 48];
        truths.extend(vec![Label::Normal; 50]);
        let mut preds = vec![Label::Covid; 48];
        preds.push(Label::Covid);
        preds.extend(vec![Label::Normal; 49]);
        let cm = confusion(&preds, &truths).unwrap();
        assert_eq!((cm.tp, cm.fn_, cm.tn, cm.fp), (48, 0, 49, 1));
        let m = metrics(&cm);
        assert!((m.accuracy.unwrap() - 0.9898).abs() < 5e-5);
        assert!((m.sensitivity.unwrap() - 1.0).abs() < 5e-5);
        assert!((m.specificity.unwrap() - 0.98).abs() < 5e-5);
        let (acc, sens, spec) = counting_oracle(&preds, &truths);
        assert_eq!(m.accuracy, Some(acc));
        assert_eq!(m.sensitivity, sens);
        assert_eq!(m.specificity, spec);
    }

    #[test]
    fn metrics_match_counting_oracle_randomly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let truths: Vec<Label> = (0..n)
                .map(|_| if rng.random::<bool>() { Label::Covid } else { Label::Normal })
                .collect();
            let preds: Vec<Label> = (0..n)
                .map(|_| if rng.random::<bool>() { Label::Covid } else { Label::Normal })
                .collect();
            let cm = confusion(&preds, &truths).unwrap();
            let m = metrics(&cm);
            let (acc, sens, spec) = counting_oracle(&preds, &truths);
            assert!((m.accuracy.unwrap() - acc).abs() < 1e-12);
            match (m.sensitivity, sens) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
            match (m.specificity, spec) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(confusion(&[Label::Covid], &[Label::Covid, Label::Normal]).is_err());
    }

    #[test]
    fn perfect_separation_auc_one() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let truths = [Label::Covid, Label::Covid, Label::Normal, Label::Normal];
        let roc = roc_auc(&scores, &truths).unwrap();
        assert!((roc.auc - 1.0).abs() < 1e-12);
        assert_eq!(roc.points.first(), Some(&[0.0, 0.0]));
        assert_eq!(roc.points.last(), Some(&[1.0, 1.0]));
    }

    #[test]
    fn single_tie_gives_half() {
        let scores = [0.8, 0.8];
        let truths = [Label::Covid, Label::Normal];
        let roc = roc_auc(&scores, &truths).unwrap();
        assert!((roc.auc - 0.5).abs() < 1e-12);
        assert!((roc.auc - mann_whitney(&scores, &truths)).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let scores = [0.5, 0.6];
        assert!(roc_auc(&scores, &[Label::Covid, Label::Covid]).is_err());
    }

    #[test]
    fn trapezoid_equals_mann_whitney_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for round in 0..200 {
            let n = rng.random_range(2..=50);
            let mut truths: Vec<Label> = (0..n)
                .map(|_| if rng.random::<bool>() { Label::Covid } else { Label::Normal })
                .collect();
            // Force both classes to be present.
            truths[0] = Label::Covid;
            truths[n - 1] = Label::Normal;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Quantized scores so ties actually occur.
                    (rng.random_range(0..=10) as f64) / 10.0
                })
                .collect();
            let roc = roc_auc(&scores, &truths).unwrap();
            let mw = mann_whitney(&scores, &truths);
            assert!((roc.auc - mw).abs() < 1e-9, "round {round}: {} vs {mw}", roc.auc);
        }
    }

    #[test]
    fn auc_complement_under_score_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(4..30);
            let mut truths: Vec<Label> = (0..n)
                .map(|_| if rng.random::<bool>() { Label::Covid } else { Label::Normal })
                .collect();
            truths[0] = Label::Covid;
            truths[1] = Label::Normal;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let a = roc_auc(&scores, &truths).unwrap().auc;
            let b = roc_auc(&flipped, &truths).unwrap().auc;
            assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truths: Vec<Label> = (0..40)
            .map(|i| if i % 3 == 0 { Label::Covid } else { Label::Normal })
            .collect();
        let scores: Vec<f64> = (0..40).map(|_| (rng.random_range(0..=5) as f64) / 5.0).collect();
        let roc = roc_auc(&scores, &truths).unwrap();
        for pair in roc.points.windows(2) {
            assert!(pair[1][0] >= pair[0][0]);
            assert!(pair[1][1] >= pair[0][1]);
        }
    }

    #[test]
    fn sensitivity_invariant_to_extra_true_negatives() {
        let mut preds = vec![Label::Covid, Label::Normal, Label::Covid];
        let mut truths = vec![Label::Covid, Label::Covid, Label::Covid];
        let before = metrics(&confusion(&preds, &truths).unwrap()).sensitivity;
        preds.extend(vec![Label::Normal; 10]);
        truths.extend(vec![Label::Normal; 10]);
        let after = metrics(&confusion(&preds, &truths).unwrap()).sensitivity;
        assert_eq!(before, after);
    }

    #[test]
    fn report_json_recomputes_from_embedded_matrix() {
        let report = MetricsReport {
            confusion: ConfusionMatrix { tp: 48, tn: 49, fp: 1, fn_: 0 }.into(),
            accuracy: Some(97.0 / 98.0),
            sensitivity: Some(1.0),
            specificity: Some(49.0 / 50.0),
            auc: 0.99,
            roc: vec![[0.0, 0.0], [0.02, 1.0], [1.0, 1.0]],
            provenance: ReportProvenance {
                variant: "densenet121-gapdense".into(),
                head_kind: "gapdense".into(),
                seed: Some(42),
                mean_subtract: false,
                threshold: "argmax".into(),
            },
        };
        let parsed = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(parsed, report);
        let cm: ConfusionMatrix = parsed.confusion.into();
        let m = metrics(&cm);
        // Full-precision JSON lets the metrics recompute exactly.
        assert_eq!(m.accuracy, parsed.accuracy);
        assert_eq!(m.sensitivity, parsed.sensitivity);
        assert_eq!(m.specificity, parsed.specificity);
        // Undefined metrics serialize as null.
        let undef = MetricsReport {
            confusion: ConfusionMatrix { tp: 0, tn: 2, fp: 0, fn_: 0 }.into(),
            accuracy: Some(1.0),
            sensitivity: None,
            specificity: Some(1.0),
            auc: 0.5,
            roc: vec![],
            provenance: ReportProvenance::default(),
        };
        let json = undef.to_json().unwrap();
        assert!(json.contains("\"sensitivity\": null"), "{json}");
    }
}
