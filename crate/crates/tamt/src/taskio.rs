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

//! Task files: one tab-separated `text<TAB>label` record per line after a
//! header, plus a small TOML sidecar naming the head kind and metric.
//! Labels are a class index, a real value, or `start:end` for spans.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tamt_core::metrics::{Label, MetricKind};
use tamt_core::tasks::{Example, Task};
use tamt_core::HeadKind;

use crate::error::{Error, IoContext, Result};
use crate::format::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub id: String,
    /// `class:<n>`, `regression` or `span`.
    pub kind: String,
    pub metric: String,
}

pub fn kind_to_str(kind: HeadKind) -> String {
    match kind {
        HeadKind::Classification(n) => format!("class:{n}"),
        HeadKind::Regression => "regression".into(),
        HeadKind::Span => "span".into(),
    }
}

pub fn kind_from_str(s: &str) -> Result<HeadKind> {
    match s {
        "regression" => Ok(HeadKind::Regression),
        "span" => Ok(HeadKind::Span),
        _ => s
            .strip_prefix("class:")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n >= 2)
            .map(HeadKind::Classification)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`"))),
    }
}

pub fn label_to_str(label: &Label) -> String {
    match *label {
        Label::Class(c) => c.to_string(),
        Label::Value(v) => format!("{v:?}"),
        Label::Span { start, end } => format!("{start}:{end}"),
    }
}

pub fn label_from_str(kind: HeadKind, s: &str) -> Option<Label> {
    match kind {
        HeadKind::Classification(_) => s.parse().ok().map(Label::Class),
        HeadKind::Regression => s.parse().ok().map(Label::Value),
        HeadKind::Span => {
            let (a, b) = s.split_once(':')?;
            Some(Label::Span {
                start: a.parse().ok()?,
                end: b.parse().ok()?,
            })
        }
    }
}

fn tsv_writer() -> csv::WriterBuilder {
    let mut b = csv::WriterBuilder::new();
    b.delimiter(b'\t');
    b
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = tsv_writer().from_writer(Vec::new());
    w.write_record(["text", "label"])?;
    for ex in examples {
        w.write_record([ex.text.as_str(), label_to_str(&ex.label).as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_examples(path: &Path, kind: HeadKind) -> Result<Vec<Example>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Format {
            path: path.to_path_buf(),
            message: format!("record {}: expected `text<TAB>label` for {}", line + 1, kind_to_str(kind)),
        };
        if rec.len() != 2 {
            return Err(bad());
        }
        let label = label_from_str(kind, &rec[1]).ok_or_else(bad)?;
        out.push(Example {
            text: rec[0].to_string(),
            label,
        });
    }
    Ok(out)
}

/// Writes `<dir>/<id>.toml`, `<id>.train.tsv` and `<id>.dev.tsv`.
pub fn write_task(dir: &Path, task: &Task) -> Result<()> {
    let meta = TaskMeta {
        id: task.id.clone(),
        kind: kind_to_str(task.kind),
        metric: task.metric.as_str().into(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join(format!("{}.toml", task.id)), text.as_bytes())?;
    write_examples(&dir.join(format!("{}.train.tsv", task.id)), &task.train)?;
    write_examples(&dir.join(format!("{}.dev.tsv", task.id)), &task.dev)
}

pub fn read_task(dir: &Path, id: &str) -> Result<Task> {
    let meta_path = dir.join(format!("{id}.toml"));
    let text = fs::read_to_string(&meta_path).at(&meta_path)?;
    let meta: TaskMeta = toml::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let kind = kind_from_str(&meta.kind)?;
    let metric: MetricKind = meta.metric.parse()?;
    let task = Task {
        id: meta.id,
        kind,
        metric,
        train: read_examples(&dir.join(format!("{id}.train.tsv")), kind)?,
        dev: read_examples(&dir.join(format!("{id}.dev.tsv")), kind)?,
    };
    task.validate()?;
    Ok(task)
}
