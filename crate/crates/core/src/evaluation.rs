//! Micro-averaged intent and entity metrics and multi-run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::EntitySpan;
use crate::{DietError, Result};

/// How a predicted span must relate to a gold span to count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Any character overlap.
    Overlap,
    /// Identical boundaries.
    Exact,
}

impl MatchMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Overlap => "overlap",
            Self::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    pub fn from_counts(counts: Counts) -> Self {
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub total: usize,
}

/// Single-label intent metrics. Every prediction is either a true
/// positive or both a false positive and a false negative, so micro
/// precision, recall and F1 all equal accuracy.
pub fn intent_metrics<S: AsRef<str>>(predictions: &[S], golds: &[S]) -> Result<IntentMetrics> {
    if predictions.len() != golds.len() {
        return Err(DietError::Invalid(format!(
            "{} predictions for {} gold intents",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(DietError::EmptyDataset("no utterances to evaluate".into()));
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    let total = golds.len();
    let p = Prf::from_counts(Counts {
        tp: correct,
        fp: total - correct,
        fn_: total - correct,
    });
    Ok(IntentMetrics {
        accuracy: ratio(correct, total),
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        correct,
        total,
    })
}

/// Greedy one-to-one matching within one utterance. Candidate pairs share
/// a label and satisfy the mode's span condition; they are taken by
/// descending overlap, ties by prediction then gold order.
pub fn match_spans(predicted: &[EntitySpan], gold: &[EntitySpan], mode: MatchMode) -> Counts {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            if p.label != g.label {
                continue;
            }
            let ov = p.overlap(g);
            let ok = match mode {
                MatchMode::Overlap => ov > 0,
                MatchMode::Exact => p.start == g.start && p.end == g.end,
            };
            if ok {
                pairs.push((ov, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_g = vec![false; gold.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: predicted.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Corpus-level micro P/R/F1 over aligned per-utterance span lists.
pub fn entity_metrics(
    predicted: &[Vec<EntitySpan>],
    gold: &[Vec<EntitySpan>],
    mode: MatchMode,
) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(DietError::Invalid(format!(
            "{} predicted span lists for {} utterances",
            predicted.len(),
            gold.len()
        )));
    }
    let mut total = Counts::default();
    for (p, g) in predicted.iter().zip(gold) {
        total += match_spans(p, g, mode);
    }
    Ok(Prf::from_counts(total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub intent: IntentMetrics,
    /// Entity metrics keyed by matching mode.
    pub entities: BTreeMap<MatchMode, Prf>,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>>(
        predicted_intents: &[S],
        gold_intents: &[S],
        predicted_spans: &[Vec<EntitySpan>],
        gold_spans: &[Vec<EntitySpan>],
        modes: &[MatchMode],
    ) -> Result<Self> {
        let intent = intent_metrics(predicted_intents, gold_intents)?;
        let mut entities = BTreeMap::new();
        for &m in modes {
            entities.insert(m, entity_metrics(predicted_spans, gold_spans, m)?);
        }
        Ok(Self { intent, entities })
    }

    pub fn entity(&self, mode: MatchMode) -> Option<&Prf> {
        self.entities.get(&mode)
    }

    /// Every scalar metric under a stable dotted name.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("intent.accuracy".to_string(), self.intent.accuracy),
            ("intent.precision".to_string(), self.intent.precision),
            ("intent.recall".to_string(), self.intent.recall),
            ("intent.f1".to_string(), self.intent.f1),
        ];
        for (m, p) in &self.entities {
            let n = m.name();
            out.push((format!("entity.{n}.precision"), p.precision));
            out.push((format!("entity.{n}.recall"), p.recall));
            out.push((format!("entity.{n}.f1"), p.f1));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, String)> = self
            .metrics()
            .into_iter()
            .map(|(k, v)| (k, format!("{:.2}", 100.0 * v)))
            .collect();
        table(&rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub stdev: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: 0.0,
            stdev: 0.0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stdev = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, stdev }
}

/// Per-metric mean and sample stdev over several runs or folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    pub reports: Vec<EvalReport>,
}

impl RunSummary {
    pub fn get(&self, metric: &str) -> Option<MeanStd> {
        self.metrics.get(metric).copied()
    }

    /// `metric  mean ± stdev` lines, in percent.
    pub fn to_table(&self) -> String {
        let rows: Vec<(String, String)> = self
            .metrics
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    format!("{:.2} ± {:.2}", 100.0 * v.mean, 100.0 * v.stdev),
                )
            })
            .collect();
        table(&rows)
    }
}

/// Mean ± sample stdev of every metric shared by all `reports`.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunSummary> {
    let Some(first) = reports.first() else {
        return Err(DietError::Invalid("no reports to aggregate".into()));
    };
    let mut metrics = BTreeMap::new();
    for (name, _) in first.metrics() {
        let values: Option<Vec<f64>> = reports
            .iter()
            .map(|r| {
                r.metrics()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| v)
            })
            .collect();
        if let Some(values) = values {
            metrics.insert(name, mean_std(&values));
        }
    }
    Ok(RunSummary {
        runs: reports.len(),
        metrics,
        reports: reports.to_vec(),
    })
}

fn table(rows: &[(String, String)]) -> String {
    let w = rows
        .iter()
        .map(|(k, _)| k.chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  value", "metric");
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<w$}  {v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(start: usize, end: usize, label: &str) -> EntitySpan {
        EntitySpan {
            start,
            end,
            label: label.into(),
            value: String::new(),
        }
    }

    #[test]
    fn intent_counting() {
        let m = intent_metrics(&["a", "b", "a", "c"], &["a", "b", "a", "a"]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.f1, 0.75);
        assert_eq!(m.precision, m.recall);
        let all = intent_metrics(&["a"], &["a"]).unwrap();
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
        assert!(intent_metrics::<&str>(&[], &[]).is_err());
        assert!(intent_metrics(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn overlap_versus_exact() {
        let p = [sp(3, 7, "x")];
        let g = [sp(5, 9, "x")];
        assert_eq!(
            match_spans(&p, &g, MatchMode::Overlap),
            Counts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(
            match_spans(&p, &g, MatchMode::Exact),
            Counts {
                tp: 0,
                fp: 1,
                fn_: 1
            }
        );
        let g = [sp(3, 7, "y")];
        for m in [MatchMode::Overlap, MatchMode::Exact] {
            assert_eq!(
                match_spans(&p, &g, m),
                Counts {
                    tp: 0,
                    fp: 1,
                    fn_: 1
                }
            );
        }
    }

    #[test]
    fn three_span_corpus() {
        let pred = vec![vec![sp(0, 4, "a")], vec![sp(10, 12, "b")], vec![]];
        let gold = vec![vec![sp(0, 4, "a")], vec![], vec![sp(2, 5, "c")]];
        for m in [MatchMode::Overlap, MatchMode::Exact] {
            let r = entity_metrics(&pred, &gold, m).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        }
    }

    #[test]
    fn matching_is_one_to_one() {
        // Two predictions inside one gold span: only one can match.
        let p = [sp(0, 3, "x"), sp(4, 9, "x")];
        let g = [sp(0, 9, "x")];
        assert_eq!(
            match_spans(&p, &g, MatchMode::Overlap),
            Counts {
                tp: 1,
                fp: 1,
                fn_: 0
            }
        );
    }

    #[test]
    fn aggregation() {
        let r = |acc: f64| EvalReport {
            intent: IntentMetrics {
                accuracy: acc,
                precision: acc,
                recall: acc,
                f1: acc,
                correct: 0,
                total: 0,
            },
            entities: BTreeMap::new(),
        };
        let s = aggregate_runs(&[r(0.8), r(0.9)]).unwrap();
        let m = s.get("intent.f1").unwrap();
        assert!((m.mean - 0.85).abs() < 1e-12);
        assert!((m.stdev - 0.070_710_678_118_654_76).abs() < 1e-12);
        let one = aggregate_runs(&[r(0.7)]).unwrap().get("intent.f1").unwrap();
        assert_eq!((one.mean, one.stdev), (0.7, 0.0));
        let same = aggregate_runs(&[r(0.6), r(0.6), r(0.6)])
            .unwrap()
            .get("intent.f1")
            .unwrap();
        assert_eq!(same.stdev, 0.0);
        assert!(aggregate_runs(&[]).is_err());
        assert!(s.to_table().contains("85.00 ± 7.07"));
    }
}
