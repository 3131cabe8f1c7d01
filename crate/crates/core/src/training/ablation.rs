//! Sweeps over hyperparameter axes under a shared seed and corpus.

use serde::{Deserialize, Serialize};

use crate::config::{AblationGrid, Hyperparameters};
use crate::datasets::CorpusSplit;
use crate::error::Result;
use crate::evaluation::{evaluate_split, EvalSummary, TrapDiagnostics};
use crate::scalar::Scalar;

use super::{prepare, train};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// Axis settings that differ from the base, e.g. `beta=0 workers=3`.
    pub label: String,
    pub hyper: Hyperparameters,
    pub test: EvalSummary,
    pub diagnostics: Option<TrapDiagnostics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut out = String::from("| Setting | top-1 | top-k | accuracy | trap |\n|---|---|---|---|---|\n");
        for c in &self.cells {
            let trap = c
                .diagnostics
                .as_ref()
                .and_then(|d| d.flag)
                .map_or("-".to_string(), |f| format!("{f:?}"));
            out.push_str(&format!(
                "| {} | {:.6} | {:.6} | {:.4} | {} |\n",
                c.label, c.test.top1, c.test.topk, c.test.accuracy, trap
            ));
        }
        out
    }
}

fn axis<V: Clone>(values: &[V]) -> Vec<Option<V>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

/// Every combination of the grid's non-empty axes, applied to `base`.
pub fn expand_grid(base: &Hyperparameters, grid: &AblationGrid) -> Vec<(String, Hyperparameters)> {
    let mut out = vec![(String::new(), base.clone())];
    fn extend<V: Clone + std::fmt::Debug>(
        out: Vec<(String, Hyperparameters)>,
        name: &str,
        values: Vec<Option<V>>,
        set: impl Fn(&mut Hyperparameters, V),
    ) -> Vec<(String, Hyperparameters)> {
        let mut next = Vec::new();
        for (label, hp) in out {
            for v in &values {
                let mut hp = hp.clone();
                let mut label = label.clone();
                if let Some(v) = v {
                    set(&mut hp, v.clone());
                    if !label.is_empty() {
                        label.push(' ');
                    }
                    label.push_str(&format!("{name}={v:?}"));
                }
                next.push((label, hp));
            }
        }
        next
    }
    out = extend(out, "workers", axis(&grid.workers), |h, v| {
        h.workers = v;
        h.top_k = h.top_k.min(v);
    });
    out = extend(out, "alpha", axis(&grid.alpha), |h, v| h.alpha = v);
    out = extend(out, "beta", axis(&grid.beta), |h, v| h.beta = v);
    out = extend(out, "target_rule", axis(&grid.target_rule), |h, v| h.target_rule = v);
    out = extend(out, "manager_loss", axis(&grid.manager_loss), |h, v| h.manager_loss = v);
    out = extend(out, "worker_loss", axis(&grid.worker_loss), |h, v| h.worker_loss = v);
    out = extend(out, "trainer", axis(&grid.trainer), |h, v| h.trainer = v);
    for (label, _) in &mut out {
        if label.is_empty() {
            *label = "base".into();
        }
    }
    out
}

/// Trains and tests every grid cell on the same corpus and seed.
pub fn ablation_matrix<T: Scalar>(
    base: &Hyperparameters,
    grid: &AblationGrid,
    corpus: &CorpusSplit<T>,
) -> Result<AblationTable> {
    let test = prepare(&corpus.test, &corpus.schema, corpus.max_step)?;
    let mut cells = Vec::new();
    for (label, hp) in expand_grid(base, grid) {
        hp.validate()?;
        let outcome = train(&hp, corpus)?;
        let summary = evaluate_split(&outcome.manager, &outcome.workers, &test, hp.top_k, hp.worker_loss)?;
        cells.push(AblationCell {
            label,
            hyper: hp,
            test: summary,
            diagnostics: outcome.final_diagnostics,
        });
    }
    Ok(AblationTable { cells })
}
