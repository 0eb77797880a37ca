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

//! Experiment configs and the resumable runner on a tiny setup.

use std::fs;
use std::path::Path;

use tamt::analysis::{data_reduction, export_all, similarity};
use tamt::config::{BudgetSpec, DataReductionSpec, ExperimentSpec};
use tamt::runner::{read_records, run, Report, RunOptions};
use tamt_core::Method;

fn tiny(dir: &Path) -> ExperimentSpec {
    let text = format!(
        r#"
output_dir = "{}"
methods = ["OMP", "IMP", "TAMT-MLM", "RAND"]
sparsities = [0.5]
seeds = [0, 1]
repeats = 2

[model]
layers = 1
heads = 1
hidden = 8
intermediate = 16

[corpus]
synthetic_sentences = 300

[theta0]
steps = 20

[tasks]
families = ["motif", "span"]
train = 40
dev = 20

[search]
imp_total_steps = 20
eval_every = 4

[finetune]
epochs = 1
batch_size = 8
eval_every = 0

[budget]
sparsity = 0.5
seeds = [0]
imp_totals = [10, 20]
tamt_steps = [0, 4, 8]

[data_reduction]
sizes = [40, 20]
families = ["motif"]
methods = ["OMP", "TAMT-MLM"]
sparsities = [0.5]
"#,
        dir.display()
    );
    ExperimentSpec::from_toml(&text).unwrap()
}

#[test]
fn defaults_validate_and_round_trip() {
    let spec = ExperimentSpec::default();
    spec.validate().unwrap();
    assert_eq!(ExperimentSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    assert_eq!(ExperimentSpec::from_toml("").unwrap(), spec);
    assert_eq!(ExperimentSpec::with_overrides(None, &[]).unwrap(), spec);
}

#[test]
fn overrides_set_nested_keys() {
    let spec = ExperimentSpec::with_overrides(
        Some("seeds = [4]\n[search]\nmask_lr = 0.1\n"),
        &[
            "search.mask_lr=0.25".into(),
            "model.layers = 3".into(),
            "output_dir=runs/x".into(),
            "budget.sparsity=0.5".into(),
        ],
    )
    .unwrap();
    assert_eq!(spec.seeds, [4]);
    assert_eq!(spec.search.mask_lr, 0.25);
    assert_eq!(spec.model.layers, 3);
    assert_eq!(spec.output_dir, Path::new("runs/x"));
    assert_eq!(
        spec.budget,
        Some(BudgetSpec {
            sparsity: 0.5,
            ..BudgetSpec::default()
        })
    );
    for bad in ["search.mask_lr", "nope=1", "search.mask_lr=fast", "seeds.x=1"] {
        assert!(ExperimentSpec::with_overrides(None, &[bad.into()]).is_err(), "{bad}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let cases = [
        "sparsities = [1.0]",
        "sparsities = []",
        "methods = []",
        "repeats = 0",
        "sparsities = [0.75]\nmethods = [\"IMP\"]",
        "[tasks]\nfamilies = [\"poetry\"]",
        "[tasks]\nmax_chars = 47",
        "[tasks]\ntrain_size = 5000",
        "[model]\nhidden = 30\nheads = 4",
        "[search]\nmask_prob = 0.0",
        "[finetune]\nlr = 0.0",
        "[data_reduction]\nsizes = [999999]",
        "[budget]\nimp_totals = [5]",
        "[search]\nunknown = 1",
    ];
    for text in cases {
        assert!(ExperimentSpec::from_toml(text).is_err(), "{text}");
    }
}

#[test]
fn sweep_runs_resumes_and_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let spec = tiny(&dir);
    let report = run(&spec, RunOptions::default()).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);

    // Main grid: 2 seeds × (FULL + 4 methods) × 2 repeats × 2 tasks = 40.
    // Reduced data adds the size-20 motif cells of FULL, OMP and TAMT-MLM
    // (3). The budget curve adds IMP with a 10-step schedule (2) and
    // TAMT-MLM at steps 0 and 4 (4); its other points coincide with the
    // main grid.
    assert_eq!(report.records.len(), 49);
    // Main-grid records of other tasks stay out of the reduced-data curves.
    let reduction = data_reduction(&report).unwrap();
    assert_eq!(reduction.len(), 3 * 2);
    assert!(reduction.iter().all(|r| r.task == "motif"));
    let methods: Vec<Method> = report.masks.keys().map(|id| id.method).collect();
    for m in [Method::Full, Method::Omp, Method::Imp, Method::TamtMlm, Method::Rand] {
        assert!(methods.contains(&m));
    }
    for trace in report.traces.values() {
        assert!(!trace.is_empty());
    }

    // Resuming a finished run does nothing.
    let records_path = dir.join("records.csv");
    let bytes = fs::read(&records_path).unwrap();
    let again = run(&spec, RunOptions::default()).unwrap();
    assert_eq!(fs::read(&records_path).unwrap(), bytes);
    assert_eq!(again.records, report.records);

    // Dropped cells are recomputed to identical values.
    let text = String::from_utf8(bytes).unwrap();
    let kept: Vec<&str> = text.lines().take(30).collect();
    fs::write(&records_path, kept.join("\n") + "\n").unwrap();
    let resumed = run(&spec, RunOptions::default()).unwrap();
    assert_eq!(resumed.records, report.records);
    assert_eq!(read_records(&records_path).unwrap(), report.records);

    // A different experiment may not reuse the directory.
    let other = ExperimentSpec {
        repeats: 3,
        ..spec.clone()
    };
    assert!(run(&other, RunOptions::default()).is_err());

    let loaded = Report::load(&dir).unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    fs::create_dir_all(&out_a).unwrap();
    fs::create_dir_all(&out_b).unwrap();
    let names = export_all(&loaded, &out_a).unwrap();
    assert_eq!(export_all(&Report::load(&dir).unwrap(), &out_b).unwrap(), names);
    for name in &names {
        assert_eq!(fs::read(out_a.join(name)).unwrap(), fs::read(out_b.join(name)).unwrap(), "{name}");
    }
    for expected in ["summary.csv", "similarity.csv", "budget_curve.csv", "budget_summary.csv", "data_reduction.csv"] {
        assert!(names.iter().any(|n| n == expected), "{expected}");
    }

    // The similarity export is symmetric with a unit diagonal.
    let mut r = csv::Reader::from_path(out_a.join("similarity.csv")).unwrap();
    let matrix: Vec<Vec<f64>> = r
        .records()
        .map(|row| row.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(matrix.len() >= 2);
    for i in 0..matrix.len() {
        assert_eq!(matrix[i][i], 1.0);
        for j in 0..matrix.len() {
            assert_eq!(matrix[i][j], matrix[j][i]);
            assert!((0.0..=1.0).contains(&matrix[i][j]));
        }
    }
    let finals: Vec<_> = loaded.masks.values().take(3).collect();
    assert_eq!(similarity(&finals).unwrap().len(), 3);
}

#[test]
fn data_reduction_defaults_cover_the_standard_sizes() {
    assert_eq!(DataReductionSpec::default().sizes, [20_000, 10_000, 5_000, 2_000, 1_000]);
}
