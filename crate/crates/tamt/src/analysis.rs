// Copyright 2026 The tamt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Exports behind the analysis figures: loss-vs-score scatter, pre-training
//! budget curve, mask similarity, and reduced-data curves.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use tamt_core::masking::{jaccard, mask_distance};
use tamt_core::metrics::{avg_score, correlation, MetricKind, TaskScore};
use tamt_core::{Method, SubnetworkCheckpoint};

use crate::error::{Error, Result};
use crate::format::write_atomic;
use crate::runner::{final_steps, MaskId, Record, Report};

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One fine-tuning repeat of one mask, averaged over the task suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub mask: MaskId,
    pub repeat: usize,
    pub train_size: usize,
}

/// avg_score of every run that has a record for each task of the suite.
pub fn run_scores(report: &Report) -> Result<BTreeMap<RunKey, f64>> {
    let tasks = report.task_ids();
    let expected: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let mut grouped: BTreeMap<RunKey, Vec<TaskScore>> = BTreeMap::new();
    for r in &report.records {
        let key = RunKey {
            mask: r.mask(),
            repeat: r.repeat,
            train_size: r.train_size,
        };
        grouped.entry(key).or_default().push(TaskScore {
            task: r.task.clone(),
            metric: r.metric_name.parse::<MetricKind>()?,
            value: r.value,
        });
    }
    let mut out = BTreeMap::new();
    for (k, scores) in grouped {
        if expected.iter().all(|t| scores.iter().any(|s| s.task == *t)) {
            out.insert(k, avg_score(&expected, &scores)?);
        }
    }
    Ok(out)
}

fn is_final(report: &Report, id: &MaskId) -> bool {
    final_steps(&report.spec, id.method, id.sparsity).is_ok_and(|s| s == id.steps)
}

/// avg_score of final masks in the main sweep, keyed by mask and averaged
/// over fine-tuning repeats.
pub fn mask_scores(report: &Report) -> Result<BTreeMap<MaskId, Vec<f64>>> {
    let size = report.main_train_size();
    let mut out: BTreeMap<MaskId, Vec<f64>> = BTreeMap::new();
    for (k, v) in run_scores(report)? {
        if k.train_size == size && is_final(report, &k.mask) {
            out.entry(k.mask).or_default().push(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub sparsity: f64,
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

/// Main-sweep avg_score per (method, sparsity) over seeds and repeats.
pub fn summary(report: &Report) -> Result<Vec<SummaryRow>> {
    let mut cells: BTreeMap<(Method, u64), Vec<f64>> = BTreeMap::new();
    for (id, scores) in mask_scores(report)? {
        cells.entry((id.method, id.sparsity.to_bits())).or_default().extend(scores);
    }
    let mut rows: Vec<SummaryRow> = cells
        .into_iter()
        .map(|((method, bits), v)| {
            let (mean, stddev) = mean_std(&v);
            SummaryRow {
                method,
                sparsity: f64::from_bits(bits),
                mean,
                stddev,
                n: v.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity).then(a.method.cmp(&b.method)));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossScoreRow {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub steps: usize,
    pub mlm_dev_loss: f64,
    pub kd_dev_loss: f64,
    pub avg_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossVsScore {
    pub rows: Vec<LossScoreRow>,
    /// Pearson correlation of MLM dev loss with avg_score (`None` when
    /// undefined).
    pub mlm_correlation: Option<f64>,
    pub kd_correlation: Option<f64>,
}

/// One row per searched mask of the selected methods and sparsities (all
/// when a filter is empty), pairing its final dev losses with its mean
/// downstream score.
pub fn loss_vs_score(report: &Report, methods: &[Method], sparsities: &[f64]) -> Result<LossVsScore> {
    let mut rows = Vec::new();
    for (id, scores) in mask_scores(report)? {
        if (!methods.is_empty() && !methods.contains(&id.method))
            || (!sparsities.is_empty() && !sparsities.contains(&id.sparsity))
        {
            continue;
        }
        let last = report
            .traces
            .get(&id)
            .and_then(|t| t.last())
            .ok_or_else(|| Error::Missing(format!("trace of {}", id.label())))?;
        rows.push(LossScoreRow {
            method: id.method,
            sparsity: id.sparsity,
            seed: id.seed,
            steps: id.steps,
            mlm_dev_loss: last.dev_mlm_loss,
            kd_dev_loss: last.dev_kd_loss,
            avg_score: mean_std(&scores).0,
        });
    }
    let score: Vec<f64> = rows.iter().map(|r| r.avg_score).collect();
    let mlm: Vec<f64> = rows.iter().map(|r| r.mlm_dev_loss).collect();
    let kd: Vec<f64> = rows.iter().map(|r| r.kd_dev_loss).collect();
    Ok(LossVsScore {
        mlm_correlation: correlation(&mlm, &score),
        kd_correlation: correlation(&kd, &score),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub method: Method,
    pub pretrain_steps: usize,
    pub wall_ms: u64,
    pub avg_score: f64,
}

/// Downstream score against pre-training steps at the budget sparsity:
/// OMP (zero steps), IMP per schedule length and TAMT-MLM per checkpoint,
/// each averaged over budget seeds and repeats.
pub fn budget_curve(report: &Report) -> Result<Vec<BudgetRow>> {
    let b = report
        .spec
        .budget
        .as_ref()
        .ok_or_else(|| Error::Missing("config has no budget section".into()))?;
    let size = report.main_train_size();
    let scores = run_scores(report)?;
    let mut cells: BTreeMap<(Method, usize), (Vec<f64>, Vec<u64>)> = BTreeMap::new();
    let tamt_final = final_steps(&report.spec, Method::TamtMlm, b.sparsity)?;
    for (k, v) in &scores {
        let id = k.mask;
        if k.train_size != size || id.sparsity != b.sparsity || !b.seeds.contains(&id.seed) || k.repeat >= b.repeats {
            continue;
        }
        let wall = match id.method {
            Method::Omp => 0,
            Method::Imp => {
                let imp_final = id;
                report.traces.get(&imp_final).and_then(|t| t.last()).map_or(0, |r| r.wall_ms)
            }
            Method::TamtMlm if b.tamt_steps.contains(&id.steps) => {
                let run = MaskId { steps: tamt_final, ..id };
                report
                    .traces
                    .get(&run)
                    .and_then(|t| t.iter().find(|r| r.step == id.steps))
                    .map_or(0, |r| r.wall_ms)
            }
            _ => continue,
        };
        let cell = cells.entry((id.method, id.steps)).or_default();
        cell.0.push(*v);
        cell.1.push(wall);
    }
    Ok(cells
        .into_iter()
        .map(|((method, steps), (v, w))| BudgetRow {
            method,
            pretrain_steps: steps,
            wall_ms: w.iter().sum::<u64>() / w.len().max(1) as u64,
            avg_score: mean_std(&v).0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetSummary {
    pub imp_best_score: f64,
    pub imp_best_steps: usize,
    /// First TAMT-MLM checkpoint scoring at least `imp_best_score`.
    pub tamt_steps_to_match: Option<usize>,
    /// `imp_best_steps / tamt_steps_to_match`.
    pub speedup: Option<f64>,
}

pub fn budget_summary(rows: &[BudgetRow]) -> Result<BudgetSummary> {
    let best = rows
        .iter()
        .filter(|r| r.method == Method::Imp)
        .max_by(|a, b| a.avg_score.total_cmp(&b.avg_score).then(b.pretrain_steps.cmp(&a.pretrain_steps)))
        .ok_or_else(|| Error::Missing("no IMP rows in the budget curve".into()))?;
    let hit = rows
        .iter()
        .filter(|r| r.method == Method::TamtMlm && r.avg_score >= best.avg_score)
        .map(|r| r.pretrain_steps)
        .min();
    Ok(BudgetSummary {
        imp_best_score: best.avg_score,
        imp_best_steps: best.pretrain_steps,
        tamt_steps_to_match: hit,
        speedup: hit.map(|s| best.pretrain_steps as f64 / s.max(1) as f64),
    })
}

/// Symmetric Jaccard similarity matrix.
pub fn similarity(ckpts: &[&SubnetworkCheckpoint]) -> Result<Vec<Vec<f64>>> {
    if ckpts.len() < 2 {
        return Err(Error::Missing("similarity needs at least two checkpoints".into()));
    }
    let n = ckpts.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = jaccard(ckpts[i], ckpts[j])?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub distance_to_omp: f64,
    pub avg_score: f64,
}

/// Mask distance from the OMP mask of the same sparsity against score.
pub fn distance_vs_score(report: &Report) -> Result<Vec<DistanceRow>> {
    let scores = mask_scores(report)?;
    let mut rows = Vec::new();
    for (id, v) in &scores {
        let Some(ckpt) = report.masks.get(id) else { continue };
        let omp = report
            .masks
            .iter()
            .find(|(k, _)| k.method == Method::Omp && k.sparsity == id.sparsity)
            .map(|(_, c)| c);
        let Some(omp) = omp else { continue };
        rows.push(DistanceRow {
            method: id.method,
            sparsity: id.sparsity,
            seed: id.seed,
            distance_to_omp: mask_distance(ckpt, omp)?,
            avg_score: mean_std(v).0,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionRow {
    pub method: Method,
    pub sparsity: f64,
    pub train_size: usize,
    pub task: String,
    pub mean: f64,
    pub stddev: f64,
    /// Number of (seed, repeat) runs behind the row.
    pub n: usize,
}

/// Per-task metric over training-set sizes for the reduced-data sweep.
pub fn data_reduction(report: &Report) -> Result<Vec<ReductionRow>> {
    let dr = report
        .spec
        .data_reduction
        .as_ref()
        .ok_or_else(|| Error::Missing("config has no data_reduction section".into()))?;
    let wanted = |r: &Record| {
        let method_ok = r.method == Method::Full && r.sparsity == 0.0
            || dr.methods.contains(&r.method) && dr.sparsities.contains(&r.sparsity);
        method_ok
            && dr.families.contains(&r.task)
            && dr.sizes.contains(&r.train_size)
            && dr.seeds.contains(&r.seed)
            && r.repeat < dr.repeats
            && is_final(report, &r.mask())
    };
    let mut cells: BTreeMap<(Method, u64, usize, String), Vec<f64>> = BTreeMap::new();
    for r in report.records.iter().filter(|r| wanted(r)) {
        cells
            .entry((r.method, r.sparsity.to_bits(), r.train_size, r.task.clone()))
            .or_default()
            .push(r.value);
    }
    let mut rows: Vec<ReductionRow> = cells
        .into_iter()
        .map(|((method, bits, train_size, task), v)| {
            let (mean, stddev) = mean_std(&v);
            ReductionRow {
                method,
                sparsity: f64::from_bits(bits),
                train_size,
                task,
                mean,
                stddev,
                n: v.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.sparsity.total_cmp(&b.sparsity))
            .then(b.train_size.cmp(&a.train_size))
            .then(a.task.cmp(&b.task))
    });
    Ok(rows)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes every applicable export into `dir`; returns the file names.
pub fn export_all(report: &Report, dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&dir.join(name), &bytes)?;
        written.push(name.to_string());
        Ok(())
    };
    put("summary.csv", csv_bytes(&summary(report)?)?)?;

    let lvs = loss_vs_score(report, &[], &[])?;
    put("loss_vs_score.csv", csv_bytes(&lvs.rows)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["loss", "pearson", "points"])?;
    w.write_record(["mlm_dev_loss", &opt(lvs.mlm_correlation), &lvs.rows.len().to_string()])?;
    w.write_record(["kd_dev_loss", &opt(lvs.kd_correlation), &lvs.rows.len().to_string()])?;
    put("loss_vs_score_correlation.csv", w.into_inner().map_err(|e| Error::Config(e.to_string()))?)?;

    let finals: Vec<(&MaskId, &SubnetworkCheckpoint)> =
        report.masks.iter().filter(|(id, _)| is_final(report, id)).collect();
    if finals.len() >= 2 {
        let matrix = similarity(&finals.iter().map(|(_, c)| *c).collect::<Vec<_>>())?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let labels: Vec<String> = finals.iter().map(|(id, _)| id.label()).collect();
        w.write_record(std::iter::once("mask".to_string()).chain(labels.iter().cloned()))?;
        for (label, row) in labels.iter().zip(&matrix) {
            w.write_record(std::iter::once(label.clone()).chain(row.iter().map(f64::to_string)))?;
        }
        put("similarity.csv", w.into_inner().map_err(|e| Error::Config(e.to_string()))?)?;
        put("distance_vs_score.csv", csv_bytes(&distance_vs_score(report)?)?)?;
    }
    if report.spec.budget.is_some() {
        let rows = budget_curve(report)?;
        put("budget_curve.csv", csv_bytes(&rows)?)?;
        let s = budget_summary(&rows)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["imp_best_score", "imp_best_steps", "tamt_steps_to_match", "speedup"])?;
        w.write_record([
            s.imp_best_score.to_string(),
            s.imp_best_steps.to_string(),
            s.tamt_steps_to_match.map_or_else(String::new, |v| v.to_string()),
            opt(s.speedup),
        ])?;
        put("budget_summary.csv", w.into_inner().map_err(|e| Error::Config(e.to_string()))?)?;
    }
    if report.spec.data_reduction.is_some() {
        put("data_reduction.csv", csv_bytes(&data_reduction(report)?)?)?;
    }
    Ok(written)
}
