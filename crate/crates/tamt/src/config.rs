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

//! TOML experiment specification with full defaulting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tamt_core::finetune::FineTuneConfig;
use tamt_core::pretrain::{ImpSchedule, MaskInit, Objective, PretrainConfig};
use tamt_core::tasks::FAMILIES;
use tamt_core::optim::AdamWConfig;
use tamt_core::{Method, ModelConfig, SparsityTarget};

use crate::corpus::CorpusSpec;
use crate::error::{Error, IoContext, Result};

/// Encoder shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_len: usize,
    pub dropout: f64,
}

/// The toy encoder: two layers of width 32, sized for one CPU core.
impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            intermediate: 64,
            max_len: 48,
            dropout: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            intermediate: self.intermediate,
            vocab,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

/// How θ₀ is obtained: loaded from `path`, or trained on the corpus MLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theta0Spec {
    pub path: Option<PathBuf>,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for Theta0Spec {
    fn default() -> Self {
        Self {
            path: None,
            steps: 4000,
            seed: 0,
            lr: 2e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteSpec {
    pub families: Vec<String>,
    /// Generated training pool per task.
    pub train: usize,
    pub dev: usize,
    pub seed: u64,
    pub max_chars: usize,
    /// Training examples used by the main sweep (`None`: the whole pool).
    pub train_size: Option<usize>,
}

impl Default for TaskSuiteSpec {
    fn default() -> Self {
        Self {
            families: FAMILIES.iter().map(|s| s.to_string()).collect(),
            train: 2000,
            dev: 500,
            seed: 7,
            max_chars: 40,
            train_size: None,
        }
    }
}

/// Mask-search hyper-parameters shared by all methods of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    /// STE step size for the MLM-family objectives.
    pub mask_lr: f64,
    /// STE step size for TAMT-KD.
    pub kd_mask_lr: f64,
    /// AdamW learning rate of the MLM head during mask training.
    pub head_lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub lambda_mlm: f64,
    pub lambda_kd: f64,
    pub eval_every: usize,
    pub alpha: f64,
    pub phi: f64,
    pub mask_init: MaskInit,
    pub adamw: AdamWConfig,
    /// IMP schedule length; TAMT runs the matched number of steps.
    pub imp_total_steps: usize,
    /// AdamW learning rate of IMP weight training.
    pub imp_lr: f64,
}

impl Default for SearchSpec {
    fn default() -> Self {
        let mlm = PretrainConfig::for_objective(Objective::Mlm);
        Self {
            mask_lr: 1.0,
            kd_mask_lr: 1.0,
            head_lr: 1e-3,
            batch_size: mlm.batch_size,
            mask_prob: mlm.mask_prob,
            lambda_mlm: mlm.lambda_mlm,
            lambda_kd: mlm.lambda_kd,
            eval_every: mlm.eval_every,
            alpha: mlm.alpha,
            phi: mlm.phi,
            mask_init: mlm.mask_init,
            adamw: mlm.adamw,
            imp_total_steps: 1000,
            imp_lr: 1e-2,
        }
    }
}

impl SearchSpec {
    /// Resolved configuration for one search run.
    pub fn pretrain_config(&self, objective: Objective, max_steps: usize, seed: u64) -> PretrainConfig {
        let mask_lr = match objective {
            Objective::Kd => self.kd_mask_lr,
            _ => self.mask_lr,
        };
        PretrainConfig {
            objective,
            lr: self.head_lr,
            mask_lr,
            batch_size: self.batch_size,
            max_steps,
            mask_prob: self.mask_prob,
            lambda_mlm: self.lambda_mlm,
            lambda_kd: self.lambda_kd,
            seed,
            eval_every: self.eval_every,
            checkpoint_steps: Vec::new(),
            alpha: self.alpha,
            phi: self.phi,
            mask_init: self.mask_init,
            adamw: self.adamw,
        }
    }

    pub fn imp_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            lr: self.imp_lr,
            ..self.pretrain_config(Objective::Mlm, self.imp_total_steps, seed)
        }
    }

    pub fn schedule(&self) -> ImpSchedule {
        ImpSchedule::new(self.imp_total_steps)
    }
}

/// Fine-tuning on shrinking training subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataReductionSpec {
    pub sizes: Vec<usize>,
    /// Task families to fine-tune; the regression task is left out by
    /// default.
    pub families: Vec<String>,
    pub methods: Vec<Method>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub repeats: usize,
}

impl Default for DataReductionSpec {
    fn default() -> Self {
        Self {
            sizes: vec![20_000, 10_000, 5_000, 2_000, 1_000],
            families: ["motif", "acceptability", "sentiment", "span"].map(String::from).to_vec(),
            methods: vec![Method::Omp, Method::Imp, Method::TamtMlm],
            sparsities: vec![0.7],
            seeds: vec![0],
            repeats: 1,
        }
    }
}

/// Downstream score as a function of pre-training steps for IMP and TAMT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSpec {
    pub sparsity: f64,
    pub seeds: Vec<u64>,
    pub repeats: usize,
    /// IMP schedule lengths to compare.
    pub imp_totals: Vec<usize>,
    /// TAMT-MLM steps at which intermediate masks are evaluated.
    pub tamt_steps: Vec<usize>,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        Self {
            sparsity: 0.7,
            seeds: vec![0],
            repeats: 1,
            imp_totals: vec![250, 500, 1000],
            tamt_steps: vec![0, 75, 150, 300, 600],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fine-tuning repeats per searched mask.
    pub repeats: usize,
    pub model: ModelSpec,
    pub corpus: CorpusSpec,
    pub theta0: Theta0Spec,
    pub tasks: TaskSuiteSpec,
    pub search: SearchSpec,
    pub finetune: FineTuneConfig,
    pub data_reduction: Option<DataReductionSpec>,
    pub budget: Option<BudgetSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            methods: Method::SEARCH.to_vec(),
            sparsities: vec![0.5, 0.7],
            seeds: vec![0, 1, 2],
            repeats: 3,
            model: ModelSpec::default(),
            corpus: CorpusSpec::default(),
            theta0: Theta0Spec::default(),
            tasks: TaskSuiteSpec::default(),
            search: SearchSpec::default(),
            finetune: FineTuneConfig {
                lr: 3e-3,
                batch_size: 32,
                epochs: 3,
                eval_every: 20,
                ..FineTuneConfig::default()
            },
            data_reduction: None,
            budget: None,
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_sparsities(list: &[f64], what: &str) -> Result<()> {
    check(!list.is_empty(), || format!("{what}: at least one sparsity is required"))?;
    for &s in list {
        SparsityTarget::new(s).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    }
    Ok(())
}

fn check_imp(schedule: ImpSchedule, sparsities: &[f64], what: &str) -> Result<()> {
    for &s in sparsities {
        let target = SparsityTarget::new(s)?;
        schedule
            .levels(target)
            .map_err(|e| Error::Config(format!("{what}: IMP cannot reach {s}: {e}")))?;
    }
    Ok(())
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{key}`")))?;
    let mut table = root;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    /// Parses `text` (or the defaults when `None`) and then applies
    /// `key=value` overrides, where `key` is a dotted path and `value` is a
    /// TOML literal. Values that do not parse as TOML are taken as strings.
    pub fn with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = match text {
            Some(t) => t.to_string(),
            None => Self::default().to_toml(),
        };
        let mut root: toml::Table = base.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
            let value = format!("v = {}", raw.trim())
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            set_path(&mut root, key.trim(), value)?;
        }
        let spec: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.methods.is_empty(), || "at least one method is required".into())?;
        check(!self.seeds.is_empty(), || "at least one seed is required".into())?;
        check(self.repeats >= 1, || "repeats must be at least 1".into())?;
        check_sparsities(&self.sparsities, "sparsities")?;
        check(!self.tasks.families.is_empty(), || "the task suite is empty".into())?;
        for f in &self.tasks.families {
            check(FAMILIES.contains(&f.as_str()), || format!("unknown task family `{f}`"))?;
        }
        check(self.tasks.train >= 1 && self.tasks.dev >= 1, || "task sizes must be positive".into())?;
        check(self.tasks.max_chars + 2 <= self.model.max_len, || {
            format!("task texts of {} chars do not fit max_len {}", self.tasks.max_chars, self.model.max_len)
        })?;
        if let Some(n) = self.tasks.train_size {
            check((1..=self.tasks.train).contains(&n), || format!("train_size {n} outside 1..={}", self.tasks.train))?;
        }
        let model = self.model.config(tamt_core::data::NUM_SPECIAL + 1);
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        check(self.theta0.path.is_some() || self.theta0.steps > 0, || "theta0 needs a path or training steps".into())?;
        self.search
            .pretrain_config(Objective::Mlm, 1, 0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        check(self.search.imp_total_steps >= 10, || "imp_total_steps must be at least 10".into())?;
        if self.methods.contains(&Method::Imp) {
            check_imp(self.search.schedule(), &self.sparsities, "sparsities")?;
        }
        check(self.finetune.batch_size > 0 && self.finetune.lr > 0.0 && self.finetune.epochs > 0, || {
            "finetune needs positive batch size, lr and epochs".into()
        })?;
        if let Some(dr) = &self.data_reduction {
            check(!dr.sizes.is_empty() && !dr.seeds.is_empty() && dr.repeats >= 1, || {
                "data_reduction needs sizes, seeds and repeats".into()
            })?;
            check_sparsities(&dr.sparsities, "data_reduction")?;
            for f in &dr.families {
                check(self.tasks.families.contains(f), || {
                    format!("data_reduction family `{f}` is not in the task suite")
                })?;
            }
            for &n in &dr.sizes {
                check((1..=self.tasks.train).contains(&n), || format!("data_reduction size {n} exceeds the pool"))?;
            }
            if dr.methods.contains(&Method::Imp) {
                check_imp(self.search.schedule(), &dr.sparsities, "data_reduction")?;
            }
        }
        if let Some(b) = &self.budget {
            check_sparsities(&[b.sparsity], "budget")?;
            check(!b.seeds.is_empty() && b.repeats >= 1, || "budget needs seeds and repeats".into())?;
            check(!b.imp_totals.is_empty() && !b.tamt_steps.is_empty(), || "budget needs IMP totals and TAMT steps".into())?;
            for &t in &b.imp_totals {
                check(t >= 10, || format!("budget IMP total {t} is below 10"))?;
                check_imp(ImpSchedule::new(t), &[b.sparsity], "budget")?;
            }
        }
        Ok(())
    }

    /// Methods searched in the main sweep: the requested ones plus OMP.
    pub fn main_methods(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        if !m.contains(&Method::Omp) {
            m.push(Method::Omp);
        }
        m.retain(|&x| x != Method::Full);
        m
    }
}
