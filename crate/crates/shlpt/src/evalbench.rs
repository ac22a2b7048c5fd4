//! Metrics and transfer studies: test-error reduction, the pairwise
//! transfer matrix, backward/forward transfer scores, and construction of
//! task orderings where every earlier task hurts the later ones.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::pool::PromptPool;
use crate::task_data::TaskDataset;
use crate::trainer::{train_task, Method, TrainConfig};

fn check_score(field: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument {
            field,
            reason: format!("scores are fractions in [0,1], got {v}"),
        });
    }
    Ok(())
}

/// Test-error reduction after transfer, in percentage points. Inputs are
/// fractional accuracies; negative output means negative transfer.
pub fn error_reduction(baseline: f64, transferred: f64) -> Result<f64> {
    check_score("baseline", baseline)?;
    check_score("transferred", transferred)?;
    Ok((transferred - baseline) * 100.0)
}

/// Pairwise transfer study: per-task no-transfer baselines plus the score
/// of every target after initializing from every other source's prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tasks: Vec<String>,
    /// Fractional accuracy of each task trained on its own.
    pub baseline: Vec<f64>,
    /// `cell[s][t]`: target `t` accuracy after initializing from source
    /// `s`. Diagonal and failed cells are absent.
    pub cell: Vec<Vec<Option<f64>>>,
    /// (source, target, reason) for cells whose training failed.
    pub failures: Vec<(usize, usize, String)>,
}

impl TransferMatrix {
    /// Error reduction of the (source, target) cell in points.
    pub fn reduction(&self, source: usize, target: usize) -> Option<f64> {
        let transferred = self.cell[source][target]?;
        error_reduction(self.baseline[target], transferred).ok()
    }

    /// CSV rows `source,target,baseline,transferred,r`, one per defined
    /// off-diagonal cell.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["source", "target", "baseline", "transferred", "r"])?;
        for (s, row) in self.cell.iter().enumerate() {
            for (t, cell) in row.iter().enumerate() {
                if let Some(score) = cell {
                    w.write_record([
                        self.tasks[s].as_str(),
                        self.tasks[t].as_str(),
                        &format!("{}", self.baseline[t]),
                        &format!("{score}"),
                        &format!("{}", self.reduction(s, t).expect("cell defined")),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut tasks: Vec<String> = Vec::new();
        let mut baseline: BTreeMap<String, f64> = BTreeMap::new();
        let mut entries: Vec<(String, String, f64, f64)> = Vec::new();
        let index = |tasks: &mut Vec<String>, id: &str| {
            if !tasks.iter().any(|t| t == id) {
                tasks.push(id.to_string());
            }
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Config(format!("bad matrix csv: {e}")))?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad matrix csv row: {rec:?}")))
            };
            let source = rec.get(0).unwrap_or_default().to_string();
            let target = rec.get(1).unwrap_or_default().to_string();
            index(&mut tasks, &source);
            index(&mut tasks, &target);
            baseline.insert(target.clone(), parse(2)?);
            entries.push((source, target, parse(2)?, parse(3)?));
        }
        let n = tasks.len();
        let pos = |id: &str| tasks.iter().position(|t| t == id).expect("indexed above");
        let mut cell = vec![vec![None; n]; n];
        let mut base = vec![0.0; n];
        for (id, b) in &baseline {
            base[pos(id)] = *b;
        }
        for (s, t, _, transferred) in entries {
            cell[pos(&s)][pos(&t)] = Some(transferred);
        }
        Ok(Self {
            tasks,
            baseline: base,
            cell,
            failures: Vec::new(),
        })
    }
}

/// Trains every task alone and every ordered (source → target) pair with
/// the target prompt initialized from the source's finalized prompt.
/// Failed cells are recorded rather than aborting the study.
pub fn transfer_matrix(
    backbone: &Backbone,
    datasets: &[TaskDataset],
    config: &TrainConfig,
    seed: u64,
) -> Result<TransferMatrix> {
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument {
            field: "datasets",
            reason: "the transfer study needs at least two tasks".into(),
        });
    }
    let per_task = TrainConfig {
        method: Method::PerTaskPrompts,
        ..config.clone()
    };
    per_task.validate()?;
    let n = datasets.len();
    let empty = PromptPool::new();

    let mut prompts = Vec::with_capacity(n);
    let mut baseline = Vec::with_capacity(n);
    for (i, dataset) in datasets.iter().enumerate() {
        let mut est = None;
        let (prompt, result) =
            train_task(backbone, &empty, &mut est, dataset, &per_task, seed, i, None)?;
        baseline.push(result.test_accuracy);
        prompts.push(prompt);
    }

    let mut cell = vec![vec![None; n]; n];
    let mut failures = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s == t {
                continue;
            }
            let mut est = None;
            match train_task(
                backbone,
                &empty,
                &mut est,
                &datasets[t],
                &per_task,
                seed,
                t,
                Some(prompts[s].matrix()),
            ) {
                Ok((_, result)) => cell[s][t] = Some(result.test_accuracy),
                Err(e) => {
                    log::warn!("transfer cell {s}->{t} failed: {e}");
                    failures.push((s, t, e.to_string()));
                }
            }
        }
    }

    Ok(TransferMatrix {
        tasks: datasets.iter().map(|d| d.task_id.clone()).collect(),
        baseline,
        cell,
        failures,
    })
}

/// Pair requirement for a negative-transfer ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// Every preceding pair must transfer negatively.
    #[default]
    Strict,
    /// Only consecutive pairs must.
    Adjacent,
}

/// All orderings of `length` distinct tasks in which earlier tasks hurt
/// later ones (`r < 0` for the pairs the mode requires). Cells with no
/// measured score never satisfy the requirement.
pub fn build_negative_transfer_sequences(
    matrix: &TransferMatrix,
    length: usize,
    mode: SequenceMode,
) -> Result<Vec<Vec<String>>> {
    let n = matrix.tasks.len();
    if length == 0 || length > n {
        return Err(Error::InvalidArgument {
            field: "length",
            reason: format!("length must be in 1..={n}, got {length}"),
        });
    }
    let negative =
        |s: usize, t: usize| matrix.reduction(s, t).map_or(false, |r| r < 0.0);
    let mut out = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(length);
    // depth-first over partial orderings, pruning as soon as a required
    // pair fails
    fn extend(
        n: usize,
        length: usize,
        mode: SequenceMode,
        negative: &dyn Fn(usize, usize) -> bool,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if current.len() == length {
            out.push(current.clone());
            return;
        }
        for cand in 0..n {
            if current.contains(&cand) {
                continue;
            }
            let ok = match mode {
                SequenceMode::Adjacent => {
                    current.last().map_or(true, |&prev| negative(prev, cand))
                }
                SequenceMode::Strict => current.iter().all(|&prev| negative(prev, cand)),
            };
            if ok {
                current.push(cand);
                extend(n, length, mode, negative, current, out);
                current.pop();
            }
        }
    }
    let mut raw = Vec::new();
    extend(n, length, mode, &negative, &mut current, &mut raw);
    for seq in raw {
        out.push(seq.iter().map(|&i| matrix.tasks[i].clone()).collect());
    }
    Ok(out)
}

/// Backward transfer: how much the final model lost on earlier tasks,
/// `mean_{j<n}(a[n-1][j] - a[j][j])`. Zero for frozen-prompt methods.
pub fn bwt(accuracy: &[Vec<f64>]) -> Result<f64> {
    let n = accuracy.len();
    if n < 2 {
        return Err(Error::InvalidArgument {
            field: "accuracy",
            reason: format!("backward transfer needs at least 2 tasks, got {n}"),
        });
    }
    let last = &accuracy[n - 1];
    let total: f64 = (0..n - 1).map(|j| last[j] - accuracy[j][j]).sum();
    Ok(total / (n - 1) as f64)
}

/// Forward transfer: diagonal gain over single-task training,
/// `mean_{j>=2}(a[j][j] - b[j])` with `b` the per-task baseline.
pub fn fwt(accuracy: &[Vec<f64>], baseline: &[f64]) -> Result<f64> {
    let n = accuracy.len();
    if n < 2 {
        return Err(Error::InvalidArgument {
            field: "accuracy",
            reason: format!("forward transfer needs at least 2 tasks, got {n}"),
        });
    }
    if baseline.len() != n {
        return Err(Error::InvalidArgument {
            field: "baseline",
            reason: format!("need one baseline per task: {} vs {n}", baseline.len()),
        });
    }
    let total: f64 = (1..n).map(|j| accuracy[j][j] - baseline[j]).sum();
    Ok(total / (n - 1) as f64)
}

/// Summary metrics of one finished sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub avg_accuracy_after_last: f64,
    pub bwt: f64,
    pub fwt: f64,
}

impl MetricReport {
    pub fn from_matrix(accuracy: &[Vec<f64>], baseline: &[f64]) -> Result<Self> {
        let last = accuracy.last().ok_or_else(|| Error::InvalidArgument {
            field: "accuracy",
            reason: "empty accuracy matrix".into(),
        })?;
        Ok(Self {
            avg_accuracy_after_last: last.iter().sum::<f64>() / last.len() as f64,
            bwt: bwt(accuracy)?,
            fwt: fwt(accuracy, baseline)?,
        })
    }
}

/// Writes the lower-triangular accuracy matrix as `i,j,acc` rows.
pub fn save_accuracy_csv(accuracy: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "acc"])?;
    for (i, row) in accuracy.iter().enumerate() {
        for (j, acc) in row.iter().enumerate() {
            w.write_record([&format!("{i}"), &format!("{j}"), &format!("{acc}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_accuracy_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Config(format!("bad accuracy csv: {e}")))?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad accuracy csv row: {rec:?}")))
        };
        let (i, j, acc) = (get(0)? as usize, get(1)? as usize, get(2)?);
        if rows.len() <= i {
            rows.resize(i + 1, Vec::new());
        }
        if rows[i].len() <= j {
            rows[i].resize(j + 1, 0.0);
        }
        rows[i][j] = acc;
    }
    Ok(rows)
}

/// Mean and (population) standard deviation, for per-seed summaries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
