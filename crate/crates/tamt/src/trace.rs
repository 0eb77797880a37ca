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

//! Pre-training loss traces as CSV:
//! `step,wall_ms,train_loss,dev_mlm_loss,dev_kd_loss,sparsity`, with an
//! empty `train_loss` before the first optimizer step.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tamt_core::pretrain::TraceRow;

use crate::error::{Error, Result};
use crate::format::write_atomic;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    step: usize,
    wall_ms: u64,
    train_loss: Option<f64>,
    dev_mlm_loss: f64,
    dev_kd_loss: f64,
    sparsity: f64,
}

pub fn encode_trace(rows: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(Row {
            step: r.step,
            wall_ms: r.wall_ms,
            train_loss: r.train_loss,
            dev_mlm_loss: r.dev_mlm_loss,
            dev_kd_loss: r.dev_kd_loss,
            sparsity: r.sparsity,
        })?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_atomic(path, &encode_trace(rows)?)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(TraceRow {
                step: row.step,
                wall_ms: row.wall_ms,
                train_loss: row.train_loss,
                dev_mlm_loss: row.dev_mlm_loss,
                dev_kd_loss: row.dev_kd_loss,
                sparsity: row.sparsity,
            })
        })
        .collect()
}
