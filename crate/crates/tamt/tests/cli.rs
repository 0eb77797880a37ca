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

//! The command-line interface end to end on a tiny config.

use std::path::Path;
use std::process::{Command, Output};

use tamt::config::ExperimentSpec;

const TINY: &str = r#"
methods = ["OMP", "TAMT-MLM"]
sparsities = [0.5]
seeds = [0]
repeats = 1

[model]
layers = 1
heads = 1
hidden = 8
intermediate = 16

[corpus]
synthetic_sentences = 200

[theta0]
steps = 10

[tasks]
families = ["count"]
train = 30
dev = 10

[search]
imp_total_steps = 10

[finetune]
epochs = 1
batch_size = 8
"#;

fn tamt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tamt")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn config_prints_the_effective_spec() {
    let text = stdout(&tamt(&["config", "--set", "repeats=5"]));
    let spec = ExperimentSpec::from_toml(&text).unwrap();
    assert_eq!(spec.repeats, 5);
    let bad = tamt(&["config", "--set", "repeats=0"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("repeats"));
}

#[test]
fn pretrain_search_finetune_sweep_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = tmp.path().join("run");
    let set = format!("output_dir={}", run_dir.display());
    let base = ["--config", cfg.to_str().unwrap(), "--set", set.as_str()];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        std::iter::once(cmd).chain(base).chain(extra.iter().copied()).map(String::from).collect()
    };
    let call = |args: Vec<String>| tamt(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let out = stdout(&call(with("pretrain", &[])));
    assert!(out.contains("vocabulary"));
    assert!(run_dir.join("theta0.weights").exists());
    assert!(run_dir.join("tasks").is_dir());

    let mask = tmp.path().join("m.mask");
    let out = stdout(&call(with(
        "search",
        &["--method", "TAMT-MLM", "--sparsity", "0.5", "--seed", "3", "--out", mask.to_str().unwrap()],
    )));
    assert!(out.starts_with("TAMT-MLM S=0.5 seed=3"), "{out}");
    assert!(mask.exists() && mask.with_extension("csv").exists());

    let ft = |seed: &str| stdout(&call(with("finetune", &["--mask", mask.to_str().unwrap(), "--task", "count", "--seed", seed])));
    let first = ft("1");
    assert!(first.starts_with("count pearson "), "{first}");
    assert_eq!(ft("1"), first);

    let out = stdout(&call(with("sweep", &[])));
    assert!(out.contains("0 failures"), "{out}");
    let out = stdout(&tamt(&["analyze", run_dir.to_str().unwrap()]));
    assert!(out.lines().any(|l| Path::new(l).ends_with("summary.csv")), "{out}");
    assert!(run_dir.join("analysis/summary.csv").exists());

    let missing = tamt(&["analyze", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}
