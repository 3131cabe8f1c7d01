//! Top-k loss, manager accuracy, trap diagnostics and the multi-round report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{Hyperparameters, TrainerKind};
use crate::datasets::{resample, CorpusSplit, SplitMode};
use crate::error::{CatpError, Result};
use crate::manager::{manager_forward, ManagerModel};
use crate::scalar::{argmax, argmin, Scalar};
use crate::training::{train, PreparedSample};
use crate::workers::{rollout_loss, AnyWorker, WorkerLoss};

/// Manager output and every worker's rollout loss on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub probs: Vec<f64>,
    pub losses: Vec<f64>,
}

impl SampleScore {
    /// Minimum loss over the `k` workers ranked highest by the manager
    /// (ties by lower index).
    pub fn top_k(&self, k: usize) -> Result<f64> {
        top_k_of(&self.probs, &self.losses, k)
    }

    pub fn selected(&self) -> usize {
        argmax(&self.probs)
    }

    /// The worker with the lowest loss (ties by lower index).
    pub fn best(&self) -> usize {
        argmin(&self.losses)
    }
}

pub fn top_k_of(probs: &[f64], losses: &[f64], k: usize) -> Result<f64> {
    if probs.len() != losses.len() {
        return Err(CatpError::invalid("probability and loss vectors differ in length"));
    }
    if k == 0 || k > probs.len() {
        return Err(CatpError::invalid(format!("k must lie in 1..={}, got {k}", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min))
}

pub fn score_sample<T: Scalar>(
    manager: &ManagerModel<T>,
    workers: &[AnyWorker<T>],
    sample: &PreparedSample<T>,
    loss: WorkerLoss,
) -> Result<SampleScore> {
    let probs = manager_forward(manager, &sample.context)?.iter().map(|p| p.as_f64()).collect();
    let losses = workers
        .iter()
        .map(|w| rollout_loss(w, &sample.input, loss).map(|l| l.as_f64()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleScore { probs, losses })
}

pub fn score_samples<T: Scalar>(
    manager: &ManagerModel<T>,
    workers: &[AnyWorker<T>],
    samples: &[PreparedSample<T>],
    loss: WorkerLoss,
) -> Result<Vec<SampleScore>> {
    samples.iter().map(|s| score_sample(manager, workers, s, loss)).collect()
}

pub fn top_k_loss<T: Scalar>(
    manager: &ManagerModel<T>,
    workers: &[AnyWorker<T>],
    sample: &PreparedSample<T>,
    k: usize,
    loss: WorkerLoss,
) -> Result<f64> {
    if k == 0 || k > workers.len() {
        return Err(CatpError::invalid(format!("k must lie in 1..={}, got {k}", workers.len())));
    }
    score_sample(manager, workers, sample, loss)?.top_k(k)
}

/// Fraction of samples whose selected worker is their lowest-loss worker.
pub fn accuracy_of(scores: &[SampleScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(CatpError::invalid("accuracy of an empty split"));
    }
    let hits = scores.iter().filter(|s| s.selected() == s.best()).count();
    Ok(hits as f64 / scores.len() as f64)
}

pub fn manager_accuracy<T: Scalar>(
    manager: &ManagerModel<T>,
    workers: &[AnyWorker<T>],
    split: &[PreparedSample<T>],
    loss: WorkerLoss,
) -> Result<f64> {
    accuracy_of(&score_samples(manager, workers, split, loss)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub top1: f64,
    pub topk: f64,
    pub accuracy: f64,
    pub k: usize,
    pub samples: usize,
}

pub fn summarize(scores: &[SampleScore], k: usize) -> Result<EvalSummary> {
    if scores.is_empty() {
        return Err(CatpError::invalid("cannot evaluate an empty split"));
    }
    let n = scores.len() as f64;
    let mut top1 = 0.0;
    let mut topk = 0.0;
    for s in scores {
        top1 += s.top_k(1)?;
        topk += s.top_k(k)?;
    }
    Ok(EvalSummary {
        top1: top1 / n,
        topk: topk / n,
        accuracy: accuracy_of(scores)?,
        k,
        samples: scores.len(),
    })
}

pub fn evaluate_split<T: Scalar>(
    manager: &ManagerModel<T>,
    workers: &[AnyWorker<T>],
    split: &[PreparedSample<T>],
    k: usize,
    loss: WorkerLoss,
) -> Result<EvalSummary> {
    if k == 0 || k > workers.len() {
        return Err(CatpError::invalid(format!("k must lie in 1..={}, got {k}", workers.len())));
    }
    summarize(&score_samples(manager, workers, split, loss)?, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapFlag {
    /// One dominant worker is selected in all contexts.
    T1,
    /// Workers are used evenly and the manager cannot tell them apart.
    T2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapThresholds {
    pub dominant_share: f64,
    pub accuracy: f64,
    /// Fraction of `log K` the selection entropy must exceed for T2.
    pub entropy_fraction: f64,
}

impl Default for TrapThresholds {
    fn default() -> Self {
        Self {
            dominant_share: 0.9,
            accuracy: 0.2,
            entropy_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapDiagnostics {
    pub selection_shares: Vec<f64>,
    pub manager_accuracy: f64,
    /// Entropy (nats) of the selection shares.
    pub selection_entropy: f64,
    pub flag: Option<TrapFlag>,
}

/// Trap flags from per-sample scores. With a single worker no trap is defined.
pub fn diagnose_scores(scores: &[SampleScore], thresholds: TrapThresholds) -> Result<TrapDiagnostics> {
    let accuracy = accuracy_of(scores)?;
    let k = scores[0].probs.len();
    let mut counts = vec![0usize; k];
    for s in scores {
        counts[s.selected()] += 1;
    }
    let n = scores.len() as f64;
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let entropy: f64 = shares.iter().filter(|&&s| s > 0.0).map(|&s| -s * s.ln()).sum();
    let max_share = shares.iter().copied().fold(0.0, f64::max);
    let flag = if k < 2 {
        None
    } else if max_share > thresholds.dominant_share {
        Some(TrapFlag::T1)
    } else if accuracy < thresholds.accuracy && entropy > thresholds.entropy_fraction * (k as f64).ln() {
        Some(TrapFlag::T2)
    } else {
        None
    };
    Ok(TrapDiagnostics {
        selection_shares: shares,
        manager_accuracy: accuracy,
        selection_entropy: entropy,
        flag,
    })
}

pub fn diagnose_traps<T: Scalar>(
    manager: &ManagerModel<T>,
    workers: &[AnyWorker<T>],
    split: &[PreparedSample<T>],
    loss: WorkerLoss,
    thresholds: TrapThresholds,
) -> Result<TrapDiagnostics> {
    diagnose_scores(&score_samples(manager, workers, split, loss)?, thresholds)
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    pub summary: EvalSummary,
    pub flag: Option<TrapFlag>,
}

/// One table row: a metric of one model across rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl ReportRow {
    pub fn new(model: impl Into<String>, values: Vec<f64>) -> Self {
        let (mean, sd) = mean_sd(&values);
        Self {
            model: model.into(),
            values,
            mean,
            sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rounds: Vec<RoundResult>,
    pub rows: Vec<ReportRow>,
    pub config_hash: String,
}

impl EvaluationReport {
    pub fn from_rounds(label: &str, loss: WorkerLoss, rounds: Vec<RoundResult>, config_hash: String) -> Self {
        let name = match loss {
            WorkerLoss::Ade => "ADE",
            WorkerLoss::Fde => "FDE",
            WorkerLoss::Mse => "MSE",
        };
        let k = rounds.first().map_or(1, |r| r.summary.k);
        let col = |f: fn(&EvalSummary) -> f64| rounds.iter().map(|r| f(&r.summary)).collect::<Vec<_>>();
        let rows = vec![
            ReportRow::new(format!("{label} top-1 {name}"), col(|s| s.top1)),
            ReportRow::new(format!("{label} top-{k} {name}"), col(|s| s.topk)),
            ReportRow::new(format!("{label} accuracy"), col(|s| s.accuracy)),
        ];
        Self {
            rounds,
            rows,
            config_hash,
        }
    }

    /// `Model | Round 0 | … | Round n−1 | MEAN | SD`, values to four decimals.
    pub fn to_table(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.values.len());
        let mut header = vec!["Model".to_string()];
        header.extend((0..n).map(|i| format!("Round {i}")));
        header.push("MEAN".into());
        header.push("SD".into());
        let mut lines = vec![header];
        for row in &self.rows {
            let mut cells = vec![row.model.clone()];
            cells.extend(row.values.iter().map(|v| format!("{v:.4}")));
            cells.push(format!("{:.4}", row.mean));
            cells.push(format!("{:.4}", row.sd));
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "| {} |", rule.join(" | "));
            }
        }
        out
    }

    /// One JSON object per round followed by one per row.
    pub fn to_records(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Resample, retrain and evaluate on the test split, once per round.
pub fn run_rounds<T: Scalar>(
    hp: &Hyperparameters,
    corpus: &CorpusSplit<T>,
    rounds: usize,
    mode: SplitMode,
    label: &str,
    config_hash: String,
) -> Result<EvaluationReport> {
    if rounds == 0 {
        return Err(CatpError::config("rounds must be at least 1"));
    }
    let mut results = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let seed = hp.seed.wrapping_add(round as u64);
        let split = resample(corpus, seed, mode);
        let mut h = hp.clone();
        h.seed = seed;
        let outcome = train(&h, &split)?;
        let test = crate::training::prepare(&split.test, &split.schema, h.max_step)?;
        let scores = score_samples(&outcome.manager, &outcome.workers, &test, h.worker_loss)?;
        let summary = summarize(&scores, h.top_k)?;
        let flag = diagnose_scores(&scores, TrapThresholds::default())?.flag;
        results.push(RoundResult {
            round,
            seed,
            summary,
            flag,
        });
    }
    Ok(EvaluationReport::from_rounds(label, hp.worker_loss, results, config_hash))
}

/// A single context-blind worker of the same capacity trained on all data.
pub fn baseline_single_worker<T: Scalar>(hp: &Hyperparameters, corpus: &CorpusSplit<T>) -> Result<EvalSummary> {
    let h = baseline_hyper(hp);
    let outcome = train(&h, corpus)?;
    let test = crate::training::prepare(&corpus.test, &corpus.schema, h.max_step)?;
    evaluate_split(&outcome.manager, &outcome.workers, &test, 1, h.worker_loss)
}

/// `hp` reduced to one worker.
pub fn baseline_hyper(hp: &Hyperparameters) -> Hyperparameters {
    Hyperparameters {
        workers: 1,
        top_k: 1,
        trainer: TrainerKind::CompetitionSymbiosis,
        ..hp.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(probs: &[f64], losses: &[f64]) -> SampleScore {
        SampleScore {
            probs: probs.to_vec(),
            losses: losses.to_vec(),
        }
    }

    #[test]
    fn top_k_examples() {
        let s = score(&[0.5, 0.3, 0.2], &[5.0, 3.0, 7.0]);
        assert_eq!(s.top_k(1).unwrap(), 5.0);
        assert_eq!(s.top_k(2).unwrap(), 3.0);
        assert_eq!(s.top_k(3).unwrap(), 3.0);
        assert!(s.top_k(0).is_err());
        assert!(s.top_k(4).is_err());
        let tie = score(&[0.5, 0.5], &[2.0, 1.0]);
        assert_eq!(tie.top_k(1).unwrap(), 2.0);
    }

    #[test]
    fn accuracy_counts_hits() {
        let mut scores = Vec::new();
        for i in 0..10 {
            let hit = i < 7;
            scores.push(score(&[0.9, 0.1], if hit { &[1.0, 2.0] } else { &[2.0, 1.0] }));
        }
        assert_eq!(accuracy_of(&scores).unwrap(), 0.7);
        assert!(accuracy_of(&[]).is_err());
    }

    #[test]
    fn diagnostics_flags() {
        let dominant: Vec<_> = (0..10).map(|i| score(&[0.8, 0.1, 0.1], &[1.0, i as f64, 0.5])).collect();
        assert_eq!(diagnose_scores(&dominant, TrapThresholds::default()).unwrap().flag, Some(TrapFlag::T1));

        // uniform shares over 10 workers, every selection wrong
        let even: Vec<_> = (0..100)
            .map(|i| {
                let mut p = vec![0.05; 10];
                p[i % 10] = 0.55;
                let mut l = vec![1.0; 10];
                l[(i + 1) % 10] = 0.5;
                score(&p, &l)
            })
            .collect();
        let d = diagnose_scores(&even, TrapThresholds::default()).unwrap();
        assert!((d.selection_entropy - 10f64.ln()).abs() < 1e-12);
        assert_eq!(d.flag, Some(TrapFlag::T2));

        let oracle: Vec<_> = (0..30)
            .map(|i| {
                let mut p = vec![0.1; 3];
                p[i % 3] = 0.8;
                let mut l = vec![2.0; 3];
                l[i % 3] = 1.0;
                score(&p, &l)
            })
            .collect();
        let d = diagnose_scores(&oracle, TrapThresholds::default()).unwrap();
        assert_eq!((d.manager_accuracy, d.flag), (1.0, None));
        assert!((d.selection_shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_sd_examples() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((sd - 0.8165).abs() < 1e-4);
        assert_eq!(mean_sd(&[4.2]).1, 0.0);
    }

    #[test]
    fn table_layout() {
        let rounds: Vec<RoundResult> = (0..3)
            .map(|i| RoundResult {
                round: i,
                seed: i as u64,
                summary: EvalSummary {
                    top1: 1.0 + i as f64,
                    topk: 0.5,
                    accuracy: 0.75,
                    k: 3,
                    samples: 10,
                },
                flag: None,
            })
            .collect();
        let report = EvaluationReport::from_rounds("CATP", WorkerLoss::Ade, rounds, "abc".into());
        let table = report.to_table();
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.trim_matches('|').split('|').map(str::trim).collect();
        assert_eq!(cols, ["Model", "Round 0", "Round 1", "Round 2", "MEAN", "SD"]);
        assert!(table.contains("CATP top-1 ADE"));
        assert!(table.contains("CATP top-3 ADE"));
        assert_eq!(report.rows[0].mean, 2.0);
        assert_eq!(report.to_records().unwrap().lines().count(), 6);
    }

    proptest! {
        #[test]
        fn top_k_is_monotone(
            probs in prop::collection::vec(0.0..1.0f64, 1..8),
            seed in prop::collection::vec(0.0..10.0f64, 8),
        ) {
            let losses = &seed[..probs.len()];
            let mut prev = f64::INFINITY;
            for k in 1..=probs.len() {
                let v = top_k_of(&probs, losses, k).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
            let global = losses.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(prev, global);
        }

        #[test]
        fn summary_ignores_order(
            rows in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 3), prop::collection::vec(0.0..5.0f64, 3)), 1..20),
        ) {
            let scores: Vec<_> = rows.iter().map(|(p, l)| score(p, l)).collect();
            let mut rev = scores.clone();
            rev.reverse();
            let a = summarize(&scores, 2).unwrap();
            let b = summarize(&rev, 2).unwrap();
            prop_assert!((a.top1 - b.top1).abs() < 1e-12);
            prop_assert!((a.topk - b.topk).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert!(a.topk <= a.top1 + 1e-12);
        }
    }
}
