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

//! Downstream fine-tuning of a fixed subnetwork.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autograd::{Graph, Var};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::masking::SubnetworkCheckpoint;
use crate::metrics::{metric, Label, Output};
use crate::model::{Bound, EncoderModel, HeadKind, Trainable};
use crate::optim::{linear_decay, AdamW, AdamWConfig};
use crate::tasks::{subsample, Example, Task};
use crate::SeededRng;

/// Sequences per graph during evaluation.
const EVAL_CHUNK: usize = 32;

/// Longest predicted span in tokens.
const MAX_SPAN: usize = 30;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FineTuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Dev evaluation period in optimizer steps (0: end of each epoch only).
    pub eval_every: usize,
    pub seed: u64,
    /// Stratified subset size of the training split.
    pub train_subset: Option<usize>,
    pub adamw: AdamWConfig,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 32,
            epochs: 3,
            eval_every: 0,
            seed: 0,
            train_subset: None,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: EncoderModel,
    /// Best dev metric over all evaluations.
    pub best: f64,
    /// `(step, dev metric)` for every evaluation.
    pub history: Vec<(usize, f64)>,
    pub steps: usize,
}

fn check_example(vocab: &Vocab, model: &EncoderModel, ex: &Example) -> Result<Vec<usize>> {
    let ids = ex.tokens(vocab);
    model.check_tokens(&ids)?;
    Ok(ids)
}

fn example_loss(g: &mut Graph, model: &EncoderModel, bound: &Bound, task: &Task, ids: &[usize], label: Label, rng: Option<&mut SeededRng>) -> Result<Var> {
    let states = model.encode(g, bound, ids, rng)?;
    let out = model.task_logits(g, bound, &states, &task.id)?;
    match (task.kind, label) {
        (HeadKind::Classification(n), Label::Class(c)) => {
            if c >= n {
                return Err(Error::ClassOutOfRange { index: c, classes: n });
            }
            g.cross_entropy(out, &[Some(c)])
        }
        (HeadKind::Regression, Label::Value(y)) => {
            let diff = g.add_scalar(out, -y);
            let sq = g.mul(diff, diff)?;
            Ok(g.sum(sq))
        }
        (HeadKind::Span, Label::Span { start, end }) => {
            // Character `c` sits at token `c + 1` after `[CLS]`.
            let logits = g.transpose(out)?;
            g.cross_entropy(logits, &[Some(start + 1), Some(end)])
        }
        (kind, label) => Err(Error::InvalidArgument(alloc::format!("label {label:?} does not fit head {kind:?}"))),
    }
}

fn decode(kind: HeadKind, out: &[f64], rows: usize) -> Output {
    match kind {
        HeadKind::Classification(_) => {
            let best = out
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            Label::Class(best.0)
        }
        HeadKind::Regression => Label::Value(out[0]),
        HeadKind::Span => {
            // Content tokens only: skip [CLS] and [SEP].
            let mut best = (1, 1, f64::NEG_INFINITY);
            for i in 1..rows.saturating_sub(1) {
                for j in i..rows.saturating_sub(1).min(i + MAX_SPAN) {
                    let s = out[2 * i] + out[2 * j + 1];
                    if s > best.2 {
                        best = (i, j, s);
                    }
                }
            }
            Label::Span {
                start: best.0 - 1,
                end: best.1,
            }
        }
    }
}

/// Head predictions for `examples` with dropout off.
pub fn predict(model: &EncoderModel, task: &Task, vocab: &Vocab, examples: &[Example]) -> Result<Vec<Output>> {
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::NONE)?;
        for ex in chunk {
            let ids = check_example(vocab, model, ex)?;
            let states = model.encode(&mut g, &bound, &ids, None)?;
            let out = model.task_logits(&mut g, &bound, &states, &task.id)?;
            let value = g.value(out);
            preds.push(decode(task.kind, value.data(), value.rows()));
        }
    }
    Ok(preds)
}

/// Task metric of `model` on the dev split.
pub fn evaluate(model: &EncoderModel, task: &Task, vocab: &Vocab) -> Result<f64> {
    let preds = predict(model, task, vocab, &task.dev)?;
    let gold: Vec<Label> = task.dev.iter().map(|e| e.label).collect();
    metric(task.metric, &preds, &gold)
}

fn grad_or_zeros(g: &Graph, v: Var) -> Vec<f64> {
    g.grad(v).map_or_else(|| alloc::vec![0.0; g.value(v).numel()], <[f64]>::to_vec)
}

/// Fine-tunes `θ₀ ⊙ M` on `task`: pruned weights are zeroed and frozen,
/// surviving weights, auxiliaries and a fresh task head are trained with
/// AdamW under linear decay. Returns the best periodic dev score.
pub fn fine_tune(
    theta0: &EncoderModel,
    ckpt: &SubnetworkCheckpoint,
    task: &Task,
    vocab: &Vocab,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    task.validate()?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("fine-tuning needs a positive batch size and learning rate".into()));
    }
    let reduced;
    let task = match cfg.train_subset {
        Some(n) => {
            reduced = subsample(task, n, cfg.seed)?;
            &reduced
        }
        None => task,
    };
    if task.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut model = theta0.clone();
    model.apply_checkpoint(ckpt)?;
    for p in model.prunable_mut() {
        p.prune_weights();
    }
    model.register_task(&task.id, task.kind, cfg.seed);
    let encoded: Vec<Vec<usize>> = task.train.iter().map(|e| check_example(vocab, &model, e)).collect::<Result<_>>()?;
    let frozen: Vec<Vec<bool>> = model.prunable().iter().map(|p| p.mask().iter().map(|&m| !m).collect()).collect();

    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw);
    let per_epoch = task.train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let trainable = Trainable {
        weights: true,
        aux: true,
        task_heads: true,
        ..Trainable::NONE
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, trainable)?;
            let mut acc: Option<Var> = None;
            for &i in batch {
                let drop = (model.config().dropout > 0.0).then_some(&mut rng);
                let l = example_loss(&mut g, &model, &bound, task, &encoded[i], task.train[i].label, drop)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            let loss = g.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            g.backward(loss)?;
            opt.begin_step();
            let lr = linear_decay(cfg.lr, step, total);
            for (i, (p, &w)) in model.prunable_mut().iter_mut().zip(&bound.weights).enumerate() {
                opt.update(i, p.weight_mut().data_mut(), &grad_or_zeros(&g, w), lr, Some(&frozen[i]));
            }
            let base = bound.weights.len();
            for (i, ((_, t), &v)) in model.aux_mut().iter_mut().zip(&bound.aux).enumerate() {
                opt.update(base + i, t.data_mut(), &grad_or_zeros(&g, v), lr, None);
            }
            let base = base + bound.aux.len();
            let (hw, hb) = bound.task_heads[&task.id];
            let head = model.task_head_mut(&task.id).expect("registered");
            opt.update(base, head.linear.weight.data_mut(), &grad_or_zeros(&g, hw), lr, None);
            opt.update(base + 1, head.linear.bias.data_mut(), &grad_or_zeros(&g, hb), lr, None);
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != total {
                history.push((step, evaluate(&model, task, vocab)?));
            }
        }
        if cfg.eval_every == 0 || step == total {
            history.push((step, evaluate(&model, task, vocab)?));
        }
    }
    if history.is_empty() {
        history.push((0, evaluate(&model, task, vocab)?));
    }
    let best = history.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(FineTuneOutcome {
        model,
        best,
        history,
        steps: step,
    })
}
