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

//! Resumable experiment runner: search → fine-tune → evaluate for every
//! cell of an [`ExperimentSpec`], with one CSV record per
//! (method, sparsity, seed, repeat, steps, task, train size).
//!
//! Output directory layout:
//! ```text
//! config.toml        resolved config
//! corpus.bin         corpus cache
//! theta0.weights     pre-trained weights (unless loaded from elsewhere)
//! tasks/             generated task files
//! masks/<id>.mask    searched masks, one per (method, sparsity, seed, steps)
//! traces/<id>.csv    pre-training loss traces
//! records.csv        downstream results (appended as cells finish)
//! failures.csv       cells that failed in the latest run
//! timings.csv        wall-clock per phase of the latest run
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tamt_core::data::{Corpus, Vocab};
use tamt_core::finetune::{fine_tune, FineTuneConfig};
use tamt_core::masking::{omp_mask, random_mask};
use tamt_core::pretrain::{
    eval_pretrain, imp_run, init_pretrained, matched_budget, tamt_train, Hooks, ImpSchedule, Objective,
    PretrainConfig, PretrainData, TraceRow,
};
use tamt_core::tasks::{make_task, Task};
use tamt_core::{EncoderModel, Method, SparsityTarget, SubnetworkCheckpoint};

use crate::config::ExperimentSpec;
use crate::corpus::load_or_build;
use crate::error::{Error, IoContext, Result};
use crate::format::{load_mask, load_weights, save_mask, save_weights, write_atomic};
use crate::taskio::write_task;
use crate::trace::{read_trace, write_trace};

/// Identity of one searched mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskId {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    /// Pre-training steps spent on the mask.
    pub steps: usize,
}

impl Eq for MaskId {}

impl Ord for MaskId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.method
            .cmp(&other.method)
            .then(self.sparsity.total_cmp(&other.sparsity))
            .then(self.seed.cmp(&other.seed))
            .then(self.steps.cmp(&other.steps))
    }
}

impl PartialOrd for MaskId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl MaskId {
    pub fn stem(&self) -> String {
        format!("{}_s{}_seed{}_t{}", self.method, self.sparsity, self.seed, self.steps)
    }

    pub fn parse_stem(stem: &str) -> Option<Self> {
        let mut parts = stem.split('_');
        let method = parts.next()?.parse().ok()?;
        let sparsity = parts.next()?.strip_prefix('s')?.parse().ok()?;
        let seed = parts.next()?.strip_prefix("seed")?.parse().ok()?;
        let steps = parts.next()?.strip_prefix('t')?.parse().ok()?;
        parts.next().is_none().then_some(Self {
            method,
            sparsity,
            seed,
            steps,
        })
    }

    pub fn label(&self) -> String {
        format!("{}@{}/seed{}/t{}", self.method, self.sparsity, self.seed, self.steps)
    }
}

/// One downstream result. `value` is the raw metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub repeat: usize,
    pub steps: usize,
    pub task: String,
    pub metric_name: String,
    pub value: f64,
    pub train_size: usize,
}

impl Record {
    pub fn mask(&self) -> MaskId {
        MaskId {
            method: self.method,
            sparsity: self.sparsity,
            seed: self.seed,
            steps: self.steps,
        }
    }

    fn key(&self) -> JobKey {
        JobKey {
            mask: self.mask(),
            repeat: self.repeat,
            task: self.task.clone(),
            train_size: self.train_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub repeat: usize,
    pub steps: usize,
    pub task: String,
    pub train_size: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct JobKey {
    mask: MaskId,
    repeat: usize,
    task: String,
    train_size: usize,
}

/// Everything a finished (or resumed) run produced.
#[derive(Debug, Clone)]
pub struct Report {
    pub spec: ExperimentSpec,
    pub records: Vec<Record>,
    pub failures: Vec<Failure>,
    pub traces: BTreeMap<MaskId, Vec<TraceRow>>,
    pub masks: BTreeMap<MaskId, SubnetworkCheckpoint>,
    /// `(phase, wall ms)` of the latest invocation.
    pub timings: Vec<(String, u64)>,
}

impl Report {
    /// Training-set size used by the main sweep.
    pub fn main_train_size(&self) -> usize {
        main_train_size(&self.spec)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.spec.tasks.families.clone()
    }

    /// Reads a completed output directory without running anything.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = ExperimentSpec::load(&dir.join("config.toml"))?;
        let records = read_records(&dir.join("records.csv"))?;
        let failures = read_csv(&dir.join("failures.csv"))?;
        let mut traces = BTreeMap::new();
        for (id, path) in list_stems(&dir.join("traces"), "csv")? {
            traces.insert(id, read_trace(&path)?);
        }
        let mut masks = BTreeMap::new();
        for (id, path) in list_stems(&dir.join("masks"), "mask")? {
            masks.insert(id, load_mask(&path)?);
        }
        Ok(Self {
            spec,
            records,
            failures,
            traces,
            masks,
            timings: Vec::new(),
        })
    }
}

fn list_stems(dir: &Path, ext: &str) -> Result<Vec<(MaskId, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(MaskId::parse_stem) {
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Records sorted by cell, keeping the first entry of duplicated cells.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut seen = BTreeMap::new();
    for r in read_csv::<Record>(path)? {
        seen.entry(r.key()).or_insert(r);
    }
    Ok(seen.into_values().collect())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

const RECORD_HEADER: [&str; 9] = [
    "method",
    "sparsity",
    "seed",
    "repeat",
    "steps",
    "task",
    "metric_name",
    "value",
    "train_size",
];
const FAILURE_HEADER: [&str; 8] = ["method", "sparsity", "seed", "repeat", "steps", "task", "train_size", "error"];

/// Appends one record, creating the file with a header when needed.
fn append_record(path: &Path, rec: &Record) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if fresh {
        w.write_record(RECORD_HEADER)?;
    }
    w.serialize(rec)?;
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    f.write_all(&bytes).at(path)?;
    f.sync_data().at(path)
}

pub fn main_train_size(spec: &ExperimentSpec) -> usize {
    spec.tasks.train_size.unwrap_or(spec.tasks.train)
}

/// Fine-tuning seed shared by every method for a given (seed, repeat), so
/// methods are compared on identical data orders and head initializations.
pub fn finetune_seed(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(repeat as u64)
}

/// One mask-search run and the masks it must emit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Group {
    method: Method,
    sparsity_bits: u64,
    seed: u64,
    /// IMP schedule length (IMP only).
    imp_total: usize,
    /// Final step count of the search.
    steps: usize,
    /// Extra intermediate checkpoints (TAMT only).
    intermediate: BTreeSet<usize>,
}

impl Group {
    fn sparsity(&self) -> f64 {
        f64::from_bits(self.sparsity_bits)
    }

    fn ids(&self) -> Vec<MaskId> {
        let mut steps: BTreeSet<usize> = self.intermediate.clone();
        steps.insert(self.steps);
        steps
            .into_iter()
            .map(|steps| MaskId {
                method: self.method,
                sparsity: self.sparsity(),
                seed: self.seed,
                steps,
            })
            .collect()
    }
}

fn objective(method: Method) -> Option<Objective> {
    match method {
        Method::TamtMlm => Some(Objective::Mlm),
        Method::TamtKd => Some(Objective::Kd),
        Method::TamtMlmKd => Some(Objective::MlmKd),
        _ => None,
    }
}

/// Shared state of one invocation.
struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    dir: &'a Path,
    prep: &'a Prepared,
    memo: HashMap<([u8; 32], usize, usize, u64), f64>,
    verbose: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Progress lines on stderr.
    pub verbose: bool,
}

fn mask_fingerprint(ckpt: &SubnetworkCheckpoint) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, m) in &ckpt.masks {
        h.update(name.as_bytes());
        h.update(m.to_bytes());
    }
    h.finalize().into()
}

/// Pre-training steps of the final mask of `method` at `sparsity` under
/// the main IMP schedule.
pub fn final_steps(spec: &ExperimentSpec, method: Method, sparsity: f64) -> Result<usize> {
    group_steps(spec, method, SparsityTarget::new(sparsity)?, spec.search.imp_total_steps)
}

fn group_steps(spec: &ExperimentSpec, method: Method, target: SparsityTarget, imp_total: usize) -> Result<usize> {
    Ok(match method {
        Method::Imp => ImpSchedule::new(imp_total).steps_for(target)?,
        m if objective(m).is_some() => matched_budget(spec.search.schedule(), target)?,
        _ => 0,
    })
}

/// Enumerates search groups and downstream jobs of the whole config.
fn plan(spec: &ExperimentSpec) -> Result<BTreeMap<Group, BTreeSet<JobKey>>> {
    let mut out: BTreeMap<Group, BTreeSet<JobKey>> = BTreeMap::new();
    let main_total = spec.search.imp_total_steps;
    let mut add = |method: Method,
                   sparsity: f64,
                   seed: u64,
                   imp_total: usize,
                   at_step: Option<usize>,
                   repeats: usize,
                   families: &[String],
                   sizes: &[usize]|
     -> Result<()> {
        let target = SparsityTarget::new(sparsity)?;
        let steps = group_steps(spec, method, target, imp_total)?;
        let probe = Group {
            method,
            sparsity_bits: sparsity.to_bits(),
            seed,
            imp_total,
            steps,
            intermediate: BTreeSet::new(),
        };
        // Groups differ only in the intermediate set; merge by identity.
        let key = out
            .keys()
            .find(|g| {
                g.method == probe.method
                    && g.sparsity_bits == probe.sparsity_bits
                    && g.seed == probe.seed
                    && g.imp_total == probe.imp_total
            })
            .cloned();
        let mut group = key.clone().unwrap_or(probe);
        let mut jobs = key.and_then(|k| out.remove(&k)).unwrap_or_default();
        let mask_steps = match at_step {
            Some(s) if s != group.steps => {
                group.intermediate.insert(s);
                s
            }
            _ => group.steps,
        };
        let mask = MaskId {
            method,
            sparsity,
            seed,
            steps: mask_steps,
        };
        for repeat in 0..repeats {
            for task in families {
                for &train_size in sizes {
                    jobs.insert(JobKey {
                        mask,
                        repeat,
                        task: task.clone(),
                        train_size,
                    });
                }
            }
        }
        out.insert(group, jobs);
        Ok(())
    };
    let main = [main_train_size(spec)];
    let all = &spec.tasks.families;
    for &seed in &spec.seeds {
        add(Method::Full, 0.0, seed, main_total, None, spec.repeats, all, &main)?;
        for method in spec.main_methods() {
            for &s in &spec.sparsities {
                add(method, s, seed, main_total, None, spec.repeats, all, &main)?;
            }
        }
    }
    if let Some(dr) = &spec.data_reduction {
        for &seed in &dr.seeds {
            add(Method::Full, 0.0, seed, main_total, None, dr.repeats, &dr.families, &dr.sizes)?;
            for &method in dr.methods.iter().filter(|&&m| m != Method::Full) {
                for &s in &dr.sparsities {
                    add(method, s, seed, main_total, None, dr.repeats, &dr.families, &dr.sizes)?;
                }
            }
        }
    }
    if let Some(b) = &spec.budget {
        let budget = matched_budget(spec.search.schedule(), SparsityTarget::new(b.sparsity)?)?;
        for &seed in &b.seeds {
            add(Method::Omp, b.sparsity, seed, main_total, None, b.repeats, all, &main)?;
            for &total in &b.imp_totals {
                add(Method::Imp, b.sparsity, seed, total, None, b.repeats, all, &main)?;
            }
            for &step in &b.tamt_steps {
                if step > budget {
                    return Err(Error::Config(format!(
                        "budget step {step} exceeds the matched TAMT budget {budget}"
                    )));
                }
                add(Method::TamtMlm, b.sparsity, seed, main_total, Some(step), b.repeats, all, &main)?;
            }
        }
    }
    Ok(out)
}

impl Ctx<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[tamt] {}", msg.as_ref());
        }
    }

    fn data(&self) -> PretrainData<'_> {
        PretrainData {
            train: &self.prep.train,
            dev: &self.prep.dev,
        }
    }

    fn mask_path(&self, id: &MaskId) -> PathBuf {
        self.dir.join("masks").join(format!("{}.mask", id.stem()))
    }

    fn trace_path(&self, id: &MaskId) -> PathBuf {
        self.dir.join("traces").join(format!("{}.csv", id.stem()))
    }

    /// Loads every mask of `group`, running the search when any is missing.
    fn masks(&self, group: &Group) -> Result<BTreeMap<usize, SubnetworkCheckpoint>> {
        let ids = group.ids();
        if ids.iter().all(|id| self.mask_path(id).exists() && self.trace_path(&final_id(group)).exists()) {
            return ids.iter().map(|id| Ok((id.steps, load_mask(&self.mask_path(id))?))).collect();
        }
        let found = self.search(group)?;
        for id in &ids {
            let ckpt = found
                .0
                .get(&id.steps)
                .ok_or_else(|| Error::Missing(format!("search did not emit step {}", id.steps)))?;
            save_mask(ckpt, &self.mask_path(id))?;
        }
        write_trace(&self.trace_path(&final_id(group)), &found.1)?;
        Ok(found.0)
    }

    fn search(&self, group: &Group) -> Result<(BTreeMap<usize, SubnetworkCheckpoint>, Vec<TraceRow>)> {
        let target = SparsityTarget::new(group.sparsity())?;
        let seed = group.seed;
        let theta0 = &self.prep.theta0;
        self.log(format!("search {} S={} seed={} steps={}", group.method, group.sparsity(), seed, group.steps));
        let start = Instant::now();
        let clock = move || start.elapsed().as_millis() as u64;
        let mut hooks = Hooks {
            clock: Some(&clock),
            ..Hooks::default()
        };
        let single = |ckpt: SubnetworkCheckpoint| -> Result<_> {
            let mut m = theta0.clone();
            m.apply_checkpoint(&ckpt)?;
            let (dev_mlm_loss, dev_kd_loss) = eval_pretrain(&m, theta0, &self.prep.dev, self.spec.search.mask_prob)?;
            let row = TraceRow {
                step: 0,
                wall_ms: clock(),
                train_loss: None,
                dev_mlm_loss,
                dev_kd_loss,
                sparsity: tamt_core::masking::sparsity_of(&ckpt),
            };
            Ok((BTreeMap::from([(0, ckpt)]), vec![row]))
        };
        match group.method {
            Method::Full => single(theta0.checkpoint(Method::Full, seed, 0.0)),
            Method::Omp => {
                let mut c = omp_mask(theta0.named_weights(), target);
                c.seed = seed;
                single(c)
            }
            Method::Rand => single(random_mask(theta0.named_shapes(), target, seed)),
            Method::Imp => {
                let cfg = PretrainConfig {
                    max_steps: group.steps,
                    ..self.spec.search.imp_config(seed)
                };
                let out = imp_run(theta0, target, ImpSchedule::new(group.imp_total), &cfg, self.data(), &mut hooks)?;
                Ok((BTreeMap::from([(group.steps, out.checkpoint)]), out.trace))
            }
            m => {
                let objective = objective(m).expect("TAMT method");
                let mut cfg = self.spec.search.pretrain_config(objective, group.steps, seed);
                cfg.checkpoint_steps = group.intermediate.iter().copied().collect();
                let out = tamt_train(theta0, target, &cfg, self.data(), &mut hooks)?;
                let mut all: BTreeMap<usize, SubnetworkCheckpoint> = out.intermediate.into_iter().collect();
                all.insert(group.steps, out.checkpoint);
                Ok((all, out.trace))
            }
        }
    }

    fn finetune(&mut self, ckpt: &SubnetworkCheckpoint, job: &JobKey) -> Result<Record> {
        let (ti, task) = self
            .prep
            .tasks
            .iter()
            .enumerate()
            .find(|(_, t)| t.id == job.task)
            .ok_or_else(|| Error::Missing(format!("task {}", job.task)))?;
        let ft_seed = finetune_seed(job.mask.seed, job.repeat);
        let key = (mask_fingerprint(ckpt), ti, job.train_size, ft_seed);
        let value = match self.memo.get(&key) {
            Some(&v) => v,
            None => {
                let cfg = FineTuneConfig {
                    seed: ft_seed,
                    train_subset: Some(job.train_size),
                    ..self.spec.finetune.clone()
                };
                let v = fine_tune(&self.prep.theta0, ckpt, task, self.prep.vocab(), &cfg)?.best;
                self.memo.insert(key, v);
                v
            }
        };
        Ok(Record {
            method: job.mask.method,
            sparsity: job.mask.sparsity,
            seed: job.mask.seed,
            repeat: job.repeat,
            steps: job.mask.steps,
            task: job.task.clone(),
            metric_name: task.metric.as_str().into(),
            value,
            train_size: job.train_size,
        })
    }
}

fn final_id(group: &Group) -> MaskId {
    MaskId {
        method: group.method,
        sparsity: group.sparsity(),
        seed: group.seed,
        steps: group.steps,
    }
}

/// Produces θ₀ according to the config, caching trained weights in `dir`.
pub fn theta0(spec: &ExperimentSpec, train: &Corpus, dir: &Path) -> Result<EncoderModel> {
    if let Some(path) = &spec.theta0.path {
        let model = load_weights(path)?;
        let expected = spec.model.config(train.vocab.len());
        if *model.config() != expected {
            return Err(Error::Config(format!(
                "{}: configuration {:?} does not match the config {:?}",
                path.display(),
                model.config(),
                expected
            )));
        }
        return Ok(model);
    }
    let path = dir.join("theta0.weights");
    if path.exists() {
        return load_weights(&path);
    }
    let t = &spec.theta0;
    let cfg = PretrainConfig {
        lr: t.lr,
        batch_size: t.batch_size,
        mask_prob: spec.search.mask_prob,
        adamw: spec.search.adamw,
        ..PretrainConfig::default()
    };
    let model = init_pretrained(spec.model.config(train.vocab.len()), train, t.steps, t.seed, &cfg)?;
    save_weights(&model, &path)?;
    Ok(model)
}

/// Generates the task suite of a config.
pub fn build_tasks(spec: &ExperimentSpec) -> Result<Vec<Task>> {
    let t = &spec.tasks;
    t.families
        .iter()
        .map(|f| Ok(make_task(f, t.train, t.dev, t.seed, t.max_chars)?))
        .collect()
}

/// Corpus, θ₀ and tasks of a config, materialized under its output directory.
pub struct Prepared {
    pub train: Corpus,
    pub dev: Corpus,
    pub theta0: EncoderModel,
    pub tasks: Vec<Task>,
}

impl Prepared {
    pub fn vocab(&self) -> &Vocab {
        &self.train.vocab
    }
}

fn check_config(spec: &ExperimentSpec, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    let text = spec.to_toml();
    if path.exists() {
        let old = fs::read_to_string(&path).at(&path)?;
        if old != text {
            return Err(Error::Config(format!(
                "{} holds a different experiment; use a fresh output directory",
                dir.display()
            )));
        }
        return Ok(());
    }
    write_atomic(&path, text.as_bytes())
}

pub fn prepare(spec: &ExperimentSpec, timings: &mut Vec<(String, u64)>) -> Result<Prepared> {
    spec.validate()?;
    let dir = spec.output_dir.as_path();
    fs::create_dir_all(dir).at(dir)?;
    check_config(spec, dir)?;
    let mut phase = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, u64)>| {
        timings.push((name.into(), phase.elapsed().as_millis() as u64));
        phase = Instant::now();
    };
    let (train, dev) = load_or_build(&spec.corpus, spec.model.max_len, Some(&dir.join("corpus.bin")))?;
    lap("corpus", timings);
    let theta0 = theta0(spec, &train, dir)?;
    lap("theta0", timings);
    let tasks = build_tasks(spec)?;
    let task_dir = dir.join("tasks");
    for t in &tasks {
        if !task_dir.join(format!("{}.toml", t.id)).exists() {
            write_task(&task_dir, t)?;
        }
    }
    lap("tasks", timings);
    Ok(Prepared {
        train,
        dev,
        theta0,
        tasks,
    })
}

/// Runs every cell of `spec` that has no record yet.
pub fn run(spec: &ExperimentSpec, opts: RunOptions) -> Result<Report> {
    let mut timings = Vec::new();
    let jobs = plan(spec)?;
    let prepared = prepare(spec, &mut timings)?;
    let dir = spec.output_dir.as_path();
    let records_path = dir.join("records.csv");
    let done: BTreeSet<JobKey> = read_records(&records_path)?.iter().map(Record::key).collect();
    let mut ctx = Ctx {
        spec,
        dir,
        prep: &prepared,
        memo: HashMap::new(),
        verbose: opts.verbose,
    };
    let mut failures = Vec::new();
    let (mut search_ms, mut finetune_ms) = (0u64, 0u64);
    let fail = |job: &JobKey, err: &Error| Failure {
        method: job.mask.method,
        sparsity: job.mask.sparsity,
        seed: job.mask.seed,
        repeat: job.repeat,
        steps: job.mask.steps,
        task: job.task.clone(),
        train_size: job.train_size,
        error: err.to_string(),
    };
    for (group, group_jobs) in &jobs {
        let todo: Vec<&JobKey> = group_jobs.iter().filter(|j| !done.contains(j)).collect();
        if todo.is_empty() {
            continue;
        }
        let t = Instant::now();
        let masks = ctx.masks(group);
        search_ms += t.elapsed().as_millis() as u64;
        let masks = match masks {
            Ok(m) => m,
            Err(e) => {
                ctx.log(format!("search failed: {e}"));
                failures.extend(todo.iter().map(|j| fail(j, &e)));
                continue;
            }
        };
        for job in todo {
            let t = Instant::now();
            let result = ctx.finetune(&masks[&job.mask.steps], job);
            finetune_ms += t.elapsed().as_millis() as u64;
            match result.and_then(|rec| append_record(&records_path, &rec).map(|_| rec)) {
                Ok(rec) => ctx.log(format!(
                    "{} {} rep{} n={}: {} = {:.4}",
                    job.mask.label(),
                    job.task,
                    job.repeat,
                    job.train_size,
                    rec.metric_name,
                    rec.value
                )),
                Err(e) => {
                    ctx.log(format!("fine-tune failed: {e}"));
                    failures.push(fail(job, &e));
                }
            }
        }
    }
    timings.push(("search".into(), search_ms));
    timings.push(("finetune".into(), finetune_ms));
    write_csv(&dir.join("failures.csv"), &failures, &FAILURE_HEADER)?;
    let mut tw = csv::Writer::from_writer(Vec::new());
    tw.write_record(["phase", "wall_ms"])?;
    for (p, ms) in &timings {
        tw.write_record([p.as_str(), &ms.to_string()])?;
    }
    write_atomic(&dir.join("timings.csv"), &tw.into_inner().map_err(|e| Error::Config(e.to_string()))?)?;
    let mut report = Report::load(dir)?;
    report.timings = timings;
    Ok(report)
}

/// Searches one final mask of the main sweep without touching the output
/// directory. Returns the mask and its pre-training trace.
pub fn search_one(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    method: Method,
    sparsity: f64,
    seed: u64,
    verbose: bool,
) -> Result<(SubnetworkCheckpoint, Vec<TraceRow>)> {
    let imp_total = spec.search.imp_total_steps;
    let group = Group {
        method,
        sparsity_bits: sparsity.to_bits(),
        seed,
        imp_total,
        steps: group_steps(spec, method, SparsityTarget::new(sparsity)?, imp_total)?,
        intermediate: BTreeSet::new(),
    };
    let ctx = Ctx {
        spec,
        dir: &spec.output_dir,
        prep: prepared,
        memo: HashMap::new(),
        verbose,
    };
    let (mut masks, trace) = ctx.search(&group)?;
    let ckpt = masks
        .remove(&group.steps)
        .ok_or_else(|| Error::Missing(format!("search did not emit step {}", group.steps)))?;
    Ok((ckpt, trace))
}

/// Fine-tunes `ckpt` on one task with an explicit fine-tuning seed.
/// Returns the metric name and the best dev value.
pub fn finetune_one(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    ckpt: &SubnetworkCheckpoint,
    task: &str,
    seed: u64,
    train_size: Option<usize>,
) -> Result<(String, f64)> {
    let task = prepared
        .tasks
        .iter()
        .find(|t| t.id == task)
        .ok_or_else(|| Error::Missing(format!("task {task}")))?;
    let cfg = FineTuneConfig {
        seed,
        train_subset: Some(train_size.unwrap_or_else(|| main_train_size(spec))),
        ..spec.finetune.clone()
    };
    let best = fine_tune(&prepared.theta0, ckpt, task, prepared.vocab(), &cfg)?.best;
    Ok((task.metric.as_str().into(), best))
}
