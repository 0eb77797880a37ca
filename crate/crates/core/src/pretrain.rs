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

//! Subnetwork search on the pre-training corpus: MLM and hidden-state
//! distillation objectives, straight-through mask training and iterative
//! magnitude pruning with rewinding.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::autograd::{Graph, Var};
use crate::data::{Corpus, MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::masking::{
    omp_mask, random_mask, rethreshold, scores_from_mask, sparsity_of, ste_step, top_k_by_magnitude, Bitmask,
    Method, SparsityTarget, SubnetworkCheckpoint,
};
use crate::model::{Bound, EncoderModel, ModelConfig, Trainable};
use crate::optim::{linear_decay, AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Seed of the fixed corruption pattern used for dev-set MLM loss.
pub const DEV_MASK_SEED: u64 = 0x5eed_0de7;

/// Sequences per graph during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Objective {
    #[cfg_attr(feature = "serde", serde(rename = "mlm"))]
    Mlm,
    #[cfg_attr(feature = "serde", serde(rename = "kd"))]
    Kd,
    #[cfg_attr(feature = "serde", serde(rename = "mlm+kd"))]
    MlmKd,
}

impl Objective {
    pub fn method(self) -> Method {
        match self {
            Objective::Mlm => Method::TamtMlm,
            Objective::Kd => Method::TamtKd,
            Objective::MlmKd => Method::TamtMlmKd,
        }
    }
}

/// How mask scores are initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskInit {
    Omp,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PretrainConfig {
    pub objective: Objective,
    /// AdamW learning rate for trained weights (the MLM head during mask
    /// training, every weight during IMP stages and θ₀ pre-training).
    pub lr: f64,
    /// Step size of the straight-through update on mask scores.
    pub mask_lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub mask_prob: f64,
    pub lambda_mlm: f64,
    pub lambda_kd: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Steps at which intermediate checkpoints are emitted.
    pub checkpoint_steps: Vec<usize>,
    pub alpha: f64,
    pub phi: f64,
    pub mask_init: MaskInit,
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::for_objective(Objective::Mlm)
    }
}

impl PretrainConfig {
    /// Defaults per objective: lr 5e-5 for the MLM family and 2e-5 for KD,
    /// batch 16, mask probability 0.15, `α = 2`, `φ = 0.01`.
    pub fn for_objective(objective: Objective) -> Self {
        let lr = match objective {
            Objective::Kd => 2e-5,
            _ => 5e-5,
        };
        Self {
            objective,
            lr,
            mask_lr: lr,
            batch_size: 16,
            max_steps: 1000,
            mask_prob: 0.15,
            lambda_mlm: 0.5,
            lambda_kd: 0.5,
            seed: 0,
            eval_every: 100,
            checkpoint_steps: Vec::new(),
            alpha: 2.0,
            phi: 0.01,
            mask_init: MaskInit::Omp,
            adamw: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(alloc::format!("mask_prob {} outside (0, 1)", self.mask_prob)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.mask_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lambda_mlm >= 0.0 && self.lambda_kd >= 0.0) {
            return Err(Error::Config("objective weights must be non-negative".into()));
        }
        Ok(())
    }

    /// `(λ_MLM, λ_KD)` actually applied for this objective.
    pub fn weights(&self) -> (f64, f64) {
        match self.objective {
            Objective::Mlm => (1.0, 0.0),
            Objective::Kd => (0.0, 1.0),
            Objective::MlmKd => (self.lambda_mlm, self.lambda_kd),
        }
    }

    fn mlm_active(&self) -> bool {
        self.weights().0 > 0.0
    }
}

/// Corrupted inputs and per-position targets (`None` = not predicted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
}

impl MlmBatch {
    pub fn selected(&self) -> usize {
        self.targets.iter().flatten().filter(|t| t.is_some()).count()
    }
}

/// Applies BERT-style corruption to one sequence: each non-special position
/// is selected with `mask_prob` (at least one is forced); selected tokens
/// become `[MASK]` 80% of the time, a random character 10%, unchanged 10%.
pub fn corrupt_sequence(
    ids: &[usize],
    vocab_len: usize,
    mask_prob: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(alloc::format!("sequence of {} tokens is too short", ids.len())));
    }
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= NUM_SPECIAL).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("sequence has no maskable tokens".into()));
    }
    let mut selected: Vec<bool> = ids.iter().map(|_| false).collect();
    for &i in &candidates {
        selected[i] = rng.random::<f64>() < mask_prob;
    }
    if !selected.iter().any(|&s| s) {
        selected[candidates[rng.random_range(0..candidates.len())]] = true;
    }
    let mut input = ids.to_vec();
    let mut target = vec![None; ids.len()];
    for i in 0..ids.len() {
        if !selected[i] {
            continue;
        }
        target[i] = Some(ids[i]);
        let r = rng.random::<f64>();
        if r < 0.8 {
            input[i] = MASK;
        } else if r < 0.9 && vocab_len > NUM_SPECIAL {
            input[i] = rng.random_range(NUM_SPECIAL..vocab_len);
        }
    }
    Ok((input, target))
}

/// Samples `batch` sequences (with replacement) and corrupts them.
pub fn mlm_batch(corpus: &Corpus, batch: usize, mask_prob: f64, rng: &mut SeededRng) -> Result<MlmBatch> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("mask_prob {mask_prob} outside (0, 1)")));
    }
    let mut out = MlmBatch {
        inputs: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let doc = &corpus.docs[rng.random_range(0..corpus.len())];
        let (i, t) = corrupt_sequence(doc, corpus.vocab.len(), mask_prob, rng)?;
        out.inputs.push(i);
        out.targets.push(t);
    }
    Ok(out)
}

/// Fixed corruption of every dev sequence, independent of training state.
pub fn dev_mlm_batch(dev: &Corpus, mask_prob: f64) -> Result<MlmBatch> {
    let mut rng = SeededRng::seed_from_u64(DEV_MASK_SEED);
    let mut out = MlmBatch {
        inputs: Vec::new(),
        targets: Vec::new(),
    };
    for doc in &dev.docs {
        let (i, t) = corrupt_sequence(doc, dev.vocab.len(), mask_prob, &mut rng)?;
        out.inputs.push(i);
        out.targets.push(t);
    }
    Ok(out)
}

/// Cross-entropy over the selected positions of the whole batch.
pub fn mlm_loss(
    g: &mut Graph,
    model: &EncoderModel,
    bound: &Bound,
    batch: &MlmBatch,
    mut rng: Option<&mut SeededRng>,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.inputs.len());
    for ids in &batch.inputs {
        let states = model.encode(g, bound, ids, rng.as_deref_mut())?;
        logits.push(model.mlm_logits(g, bound, &states)?);
    }
    let all = g.concat_rows(&logits)?;
    let targets: Vec<Option<usize>> = batch.targets.iter().flatten().copied().collect();
    g.cross_entropy(all, &targets)
}

/// Hidden states of layers `1..=L` (embedding output excluded) of a model
/// run without dropout.
pub fn layer_states(model: &EncoderModel, ids: &[usize]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::NONE)?;
    let states = model.encode(&mut g, &bound, ids, None)?;
    Ok(states.layers[1..].iter().map(|&v| g.value(v).clone()).collect())
}

/// Mean over layers and positions of `1 − cos(teacher, student)` for one
/// sequence; `teacher[l]` and `student[l]` are `|x| × d_H`.
pub fn distill_loss(g: &mut Graph, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} teacher layers vs {} student layers",
            teacher.len(),
            student.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (t, &s) in teacher.iter().zip(student) {
        let tv = g.constant(t.clone());
        let cos = g.cosine_rows(tv, s)?;
        count += g.value(cos).numel();
        let sum = g.sum(cos);
        total = Some(match total {
            Some(acc) => g.add(acc, sum)?,
            None => sum,
        });
    }
    let mean = g.scale(total.expect("non-empty"), -1.0 / count as f64);
    Ok(g.add_scalar(mean, 1.0))
}

/// Batch mean of the per-sequence distillation loss between an unmasked
/// `teacher` and the bound `student`.
pub fn kd_loss(
    g: &mut Graph,
    teacher: &EncoderModel,
    student: &EncoderModel,
    bound: &Bound,
    inputs: &[Vec<usize>],
    mut rng: Option<&mut SeededRng>,
) -> Result<Var> {
    check_pair(teacher.config(), student.config())?;
    let mut per_seq = Vec::with_capacity(inputs.len());
    for ids in inputs {
        let t = layer_states(teacher, ids)?;
        let s = student.encode(g, bound, ids, rng.as_deref_mut())?;
        per_seq.push(distill_loss(g, &t, &s.layers[1..])?);
    }
    batch_mean(g, &per_seq)
}

fn check_pair(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a != b {
        return Err(Error::Config("teacher and student configurations differ".into()));
    }
    Ok(())
}

fn batch_mean(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = *parts.first().ok_or(Error::Empty("batch"))?;
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

/// Loss and its MLM / KD components for one training step.
struct StepLoss {
    loss: Var,
}

/// One student forward per sequence shared by both objective terms.
fn objective_loss(
    g: &mut Graph,
    model: &EncoderModel,
    teacher: &EncoderModel,
    bound: &Bound,
    batch: &MlmBatch,
    (w_mlm, w_kd): (f64, f64),
    mut rng: Option<&mut SeededRng>,
) -> Result<StepLoss> {
    let use_mlm = w_mlm > 0.0 || w_kd == 0.0;
    let use_kd = w_kd > 0.0;
    let mut logits = Vec::new();
    let mut kd_terms = Vec::new();
    for ids in &batch.inputs {
        let states = model.encode(g, bound, ids, rng.as_deref_mut())?;
        if use_mlm {
            logits.push(model.mlm_logits(g, bound, &states)?);
        }
        if use_kd {
            let t = layer_states(teacher, ids)?;
            kd_terms.push(distill_loss(g, &t, &states.layers[1..])?);
        }
    }
    let mlm = if use_mlm {
        let all = g.concat_rows(&logits)?;
        let targets: Vec<Option<usize>> = batch.targets.iter().flatten().copied().collect();
        Some(g.cross_entropy(all, &targets)?)
    } else {
        None
    };
    let kd = if use_kd { Some(batch_mean(g, &kd_terms)?) } else { None };
    let loss = match (mlm, kd) {
        (Some(m), None) if w_mlm == 1.0 => m,
        (None, Some(k)) if w_kd == 1.0 && w_mlm == 0.0 => k,
        (Some(m), Some(k)) => {
            let a = g.scale(m, w_mlm);
            let b = g.scale(k, w_kd);
            g.add(a, b)?
        }
        (Some(m), None) => g.scale(m, w_mlm),
        (None, Some(k)) => g.scale(k, w_kd),
        (None, None) => unreachable!("at least one term is active"),
    };
    Ok(StepLoss { loss })
}

/// Deterministic dev-set losses `(MLM, KD)` with dropout off. KD compares
/// against `teacher` on uncorrupted dev sequences.
pub fn eval_pretrain(model: &EncoderModel, teacher: &EncoderModel, dev: &Corpus, mask_prob: f64) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Err(Error::Empty("dev corpus"));
    }
    check_pair(teacher.config(), model.config())?;
    let batch = dev_mlm_batch(dev, mask_prob)?;
    let mut nll_sum = 0.0;
    let mut count = 0usize;
    for (inputs, targets) in batch.inputs.chunks(EVAL_CHUNK).zip(batch.targets.chunks(EVAL_CHUNK)) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::NONE)?;
        let chunk = MlmBatch {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
        };
        let loss = mlm_loss(&mut g, model, &bound, &chunk, None)?;
        let n = chunk.selected();
        nll_sum += g.value(loss).item() * n as f64;
        count += n;
    }
    let mut kd_sum = 0.0;
    for docs in dev.docs.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::NONE)?;
        for ids in docs {
            let t = layer_states(teacher, ids)?;
            let s = model.encode(&mut g, &bound, ids, None)?;
            let l = distill_loss(&mut g, &t, &s.layers[1..])?;
            kd_sum += g.value(l).item();
        }
    }
    Ok((nll_sum / count as f64, kd_sum / dev.len() as f64))
}

/// One row of a pre-training loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub wall_ms: u64,
    /// Training loss of the most recent step (`None` before the first).
    pub train_loss: Option<f64>,
    pub dev_mlm_loss: f64,
    pub dev_kd_loss: f64,
    pub sparsity: f64,
}

/// Optional observers for long-running loops.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Milliseconds since an arbitrary origin.
    pub clock: Option<&'a dyn Fn() -> u64>,
    /// Called after every optimizer step with the 1-based step count.
    pub on_step: Option<&'a mut dyn FnMut(usize, &EncoderModel)>,
    /// Called by IMP after every pruning event, once the weights have been
    /// rewound.
    pub on_prune: Option<&'a mut dyn FnMut(&PruneEvent, &EncoderModel)>,
}

impl Hooks<'_> {
    fn now(&self) -> u64 {
        self.clock.map_or(0, |c| c())
    }

    fn step(&mut self, step: usize, model: &EncoderModel) {
        if let Some(f) = self.on_step.as_mut() {
            f(step, model);
        }
    }

    fn prune(&mut self, event: &PruneEvent, model: &EncoderModel) {
        if let Some(f) = self.on_prune.as_mut() {
            f(event, model);
        }
    }
}

/// Train and dev corpora for a search run.
#[derive(Debug, Clone, Copy)]
pub struct PretrainData<'a> {
    pub train: &'a Corpus,
    pub dev: &'a Corpus,
}

#[derive(Debug, Clone)]
pub struct TamtOutcome {
    pub model: EncoderModel,
    pub checkpoint: SubnetworkCheckpoint,
    /// `(step, checkpoint)` for every requested intermediate step.
    pub intermediate: Vec<(usize, SubnetworkCheckpoint)>,
    pub trace: Vec<TraceRow>,
}

fn grad_or_zeros(g: &Graph, v: Var) -> Vec<f64> {
    g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec)
}

fn head_step(model: &mut EncoderModel, g: &Graph, bound: &Bound, opt: &mut AdamW, slot: usize, lr: f64) {
    let head = model.mlm_head_mut();
    let gw = grad_or_zeros(g, bound.mlm_head.0);
    let gb = grad_or_zeros(g, bound.mlm_head.1);
    opt.update(slot, head.weight.data_mut(), &gw, lr, None);
    opt.update(slot + 1, head.bias.data_mut(), &gb, lr, None);
}

fn trace_row(
    model: &EncoderModel,
    teacher: &EncoderModel,
    data: PretrainData<'_>,
    cfg: &PretrainConfig,
    step: usize,
    train_loss: Option<f64>,
    wall_ms: u64,
    sparsity: f64,
) -> Result<TraceRow> {
    let (dev_mlm_loss, dev_kd_loss) = eval_pretrain(model, teacher, data.dev, cfg.mask_prob)?;
    Ok(TraceRow {
        step,
        wall_ms,
        train_loss,
        dev_mlm_loss,
        dev_kd_loss,
        sparsity,
    })
}

fn dropout_rng<'r>(model: &EncoderModel, rng: &'r mut SeededRng) -> Option<&'r mut SeededRng> {
    (model.config().dropout > 0.0).then_some(rng)
}

/// Task-agnostic mask training: weights stay at θ₀ while mask scores follow
/// straight-through gradients of the configured objective and are
/// re-thresholded to the target sparsity after every step.
pub fn tamt_train(
    theta0: &EncoderModel,
    target: SparsityTarget,
    cfg: &PretrainConfig,
    data: PretrainData<'_>,
    hooks: &mut Hooks<'_>,
) -> Result<TamtOutcome> {
    cfg.validate()?;
    let method = cfg.objective.method();
    let mut teacher = theta0.clone();
    teacher.clear_masks();
    let mut model = teacher.clone();
    let init_mask = match cfg.mask_init {
        MaskInit::Omp => omp_mask(model.named_weights(), target),
        MaskInit::Random => random_mask(model.named_shapes(), target, cfg.seed),
    };
    let scores = scores_from_mask(&init_mask, cfg.alpha, cfg.phi)?;
    for (p, s) in model.prunable_mut().iter_mut().zip(scores) {
        p.init_scores(s, cfg.phi)?;
    }

    let start = hooks.now();
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw);
    let weights = cfg.weights();
    let mut trace = vec![trace_row(&model, &teacher, data, cfg, 0, None, 0, target.sparsity())?];
    let mut intermediate = Vec::new();
    let snapshot = |m: &EncoderModel| m.checkpoint(method, cfg.seed, target.sparsity());
    if cfg.checkpoint_steps.contains(&0) {
        intermediate.push((0, snapshot(&model)));
    }
    let trainable = Trainable {
        masks: true,
        mlm_head: cfg.mlm_active(),
        ..Trainable::NONE
    };
    for step in 0..cfg.max_steps {
        let batch = mlm_batch(data.train, cfg.batch_size, cfg.mask_prob, &mut rng)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, trainable)?;
        let drop = dropout_rng(&model, &mut rng);
        let StepLoss { loss } = objective_loss(&mut g, &model, &teacher, &bound, &batch, weights, drop)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
            });
        }
        g.backward(loss)?;
        let mask_lr = linear_decay(cfg.mask_lr, step, cfg.max_steps);
        for (p, &m) in model.prunable_mut().iter_mut().zip(&bound.masks) {
            ste_step(p, &grad_or_zeros(&g, m), mask_lr)?;
            rethreshold(p, target);
        }
        if trainable.mlm_head {
            opt.begin_step();
            head_step(&mut model, &g, &bound, &mut opt, 0, linear_decay(cfg.lr, step, cfg.max_steps));
        }
        let done = step + 1;
        hooks.step(done, &model);
        let emit = cfg.checkpoint_steps.contains(&done);
        if emit {
            intermediate.push((done, snapshot(&model)));
        }
        if emit || done == cfg.max_steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let wall = hooks.now().saturating_sub(start);
            let sparsity = sparsity_of(&snapshot(&model));
            trace.push(trace_row(&model, &teacher, data, cfg, done, Some(loss_value), wall, sparsity)?);
        }
    }
    let checkpoint = snapshot(&model);
    Ok(TamtOutcome {
        model,
        checkpoint,
        intermediate,
        trace,
    })
}

/// Iterative magnitude pruning schedule: sparsity grows by `increment`
/// every `total_steps / 10` steps, with the first prune at step 0.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImpSchedule {
    pub total_steps: usize,
    pub increment: f64,
}

impl ImpSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            total_steps,
            increment: 0.1,
        }
    }

    pub fn stage_len(&self) -> usize {
        self.total_steps / 10
    }

    /// Sparsity after each pruning event, ending exactly at `target`.
    pub fn levels(&self, target: SparsityTarget) -> Result<Vec<f64>> {
        let s = target.sparsity();
        let n = libm::round(s / self.increment) as usize;
        if (n as f64 * self.increment - s).abs() > 1e-9 {
            return Err(Error::Config(alloc::format!(
                "target sparsity {s} is not a multiple of the increment {}",
                self.increment
            )));
        }
        Ok((1..=n).map(|i| if i == n { s } else { i as f64 * self.increment }).collect())
    }

    /// Training steps executed before the target is reached.
    pub fn steps_for(&self, target: SparsityTarget) -> Result<usize> {
        Ok(self.levels(target)?.len().saturating_sub(1) * self.stage_len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneEvent {
    pub step: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct ImpOutcome {
    /// θ₀ with the final masks.
    pub model: EncoderModel,
    pub checkpoint: SubnetworkCheckpoint,
    pub events: Vec<PruneEvent>,
    pub trace: Vec<TraceRow>,
}

fn magnitude_prune(model: &mut EncoderModel, level: SparsityTarget) {
    for p in model.prunable_mut() {
        let k = level.kept(p.len());
        // Pruned entries rank below every survivor.
        let ranked: Vec<f64> = p
            .weight()
            .data()
            .iter()
            .zip(p.mask())
            .map(|(&w, &m)| if m { 1.0 + w.abs() } else { 0.0 })
            .collect();
        let (keep, _) = top_k_by_magnitude(&ranked, k);
        let mask = Bitmask::from_bools(p.shape(), &keep).expect("own shape");
        p.set_mask(&mask).expect("own shape");
    }
}

/// IMP with rewinding: train weights on MLM for one stage with masks fixed,
/// prune the survivors by magnitude to the next level, rewind every weight
/// to θ₀, and repeat until the target sparsity is reached.
pub fn imp_run(
    theta0: &EncoderModel,
    target: SparsityTarget,
    schedule: ImpSchedule,
    cfg: &PretrainConfig,
    data: PretrainData<'_>,
    hooks: &mut Hooks<'_>,
) -> Result<ImpOutcome> {
    cfg.validate()?;
    let levels = schedule.levels(target)?;
    let total = schedule.steps_for(target)?;
    let mut teacher = theta0.clone();
    teacher.clear_masks();
    let mut model = teacher.clone();
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let start = hooks.now();
    let mut events = Vec::with_capacity(levels.len());
    let mut trace = Vec::new();
    let mut step = 0;
    let mut last_loss = None;
    let trainable = Trainable {
        weights: true,
        aux: true,
        mlm_head: true,
        ..Trainable::NONE
    };
    for (stage, &level) in levels.iter().enumerate() {
        if stage > 0 {
            let mut opt = AdamW::new(cfg.adamw);
            for _ in 0..schedule.stage_len() {
                let batch = mlm_batch(data.train, cfg.batch_size, cfg.mask_prob, &mut rng)?;
                let mut g = Graph::new();
                let bound = model.bind(&mut g, trainable)?;
                let drop = dropout_rng(&model, &mut rng);
                let loss = mlm_loss(&mut g, &model, &bound, &batch, drop)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                g.backward(loss)?;
                opt.begin_step();
                let lr = linear_decay(cfg.lr, step, total);
                update_all(&mut model, &g, &bound, &mut opt, lr);
                step += 1;
                last_loss = Some(value);
                hooks.step(step, &model);
            }
        }
        magnitude_prune(&mut model, SparsityTarget::new(level)?);
        model.copy_weights_from(theta0);
        let event = PruneEvent { step, sparsity: level };
        hooks.prune(&event, &model);
        events.push(event);
        let wall = hooks.now().saturating_sub(start);
        let sparsity = sparsity_of(&model.checkpoint(Method::Imp, cfg.seed, level));
        trace.push(trace_row(&model, &teacher, data, cfg, step, last_loss, wall, sparsity)?);
    }
    if levels.is_empty() {
        trace.push(trace_row(&model, &teacher, data, cfg, 0, None, 0, 0.0)?);
    }
    let checkpoint = model.checkpoint(Method::Imp, cfg.seed, target.sparsity());
    Ok(ImpOutcome {
        model,
        checkpoint,
        events,
        trace,
    })
}

/// AdamW step on prunable weights (pruned entries frozen), auxiliaries and
/// the MLM head. Slots: prunable, then auxiliaries, then head.
fn update_all(model: &mut EncoderModel, g: &Graph, bound: &Bound, opt: &mut AdamW, lr: f64) {
    let n_prunable = bound.weights.len();
    for (i, (p, &w)) in model.prunable_mut().iter_mut().zip(&bound.weights).enumerate() {
        let frozen: Vec<bool> = p.mask().iter().map(|&m| !m).collect();
        let grad = grad_or_zeros(g, w);
        opt.update(i, p.weight_mut().data_mut(), &grad, lr, Some(&frozen));
    }
    let n_aux = bound.aux.len();
    for (i, ((_, t), &v)) in model.aux_mut().iter_mut().zip(&bound.aux).enumerate() {
        opt.update(n_prunable + i, t.data_mut(), &grad_or_zeros(g, v), lr, None);
    }
    head_step(model, g, bound, opt, n_prunable + n_aux, lr);
}

/// Produces θ₀: a randomly initialized model trained on `corpus` MLM for
/// `steps` steps with every mask at one.
pub fn init_pretrained(
    config: ModelConfig,
    corpus: &Corpus,
    steps: usize,
    seed: u64,
    cfg: &PretrainConfig,
) -> Result<EncoderModel> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut model = EncoderModel::new(config, seed)?;
    let mut rng = SeededRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(cfg.adamw);
    let trainable = Trainable {
        weights: true,
        aux: true,
        mlm_head: true,
        ..Trainable::NONE
    };
    for step in 0..steps {
        let batch = mlm_batch(corpus, cfg.batch_size, cfg.mask_prob, &mut rng)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, trainable)?;
        let drop = dropout_rng(&model, &mut rng);
        let loss = mlm_loss(&mut g, &model, &bound, &batch, drop)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        g.backward(loss)?;
        opt.begin_step();
        update_all(&mut model, &g, &bound, &mut opt, linear_decay(cfg.lr, step, steps));
    }
    Ok(model)
}

/// Matched pre-training budget: the number of steps IMP needs to reach
/// `target`, used for TAMT as well.
pub fn matched_budget(schedule: ImpSchedule, target: SparsityTarget) -> Result<usize> {
    schedule.steps_for(target)
}
