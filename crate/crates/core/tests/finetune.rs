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

//! Fine-tuning of fixed subnetworks.

use rand::{Rng, SeedableRng};
use tamt_core::data::Vocab;
use tamt_core::finetune::{evaluate, fine_tune, FineTuneConfig};
use tamt_core::masking::{omp_mask, random_mask, SparsityTarget};
use tamt_core::metrics::{Label, MetricKind};
use tamt_core::tasks::{make_task, Example, Task};
use tamt_core::{EncoderModel, HeadKind, ModelConfig, SeededRng};

fn model(vocab: usize, dropout: f64) -> EncoderModel {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        intermediate: 32,
        vocab,
        max_len: 48,
        dropout,
    };
    EncoderModel::new(cfg, 5).unwrap()
}

fn ft_cfg(seed: u64) -> FineTuneConfig {
    FineTuneConfig {
        lr: 3e-3,
        batch_size: 8,
        epochs: 2,
        eval_every: 5,
        seed,
        ..FineTuneConfig::default()
    }
}

fn small_task() -> (Task, Vocab) {
    let task = make_task("sentiment", 48, 24, 3, 40).unwrap();
    let vocab = Vocab::from_texts(task.train.iter().chain(&task.dev).map(|e| e.text.as_str()));
    (task, vocab)
}

#[test]
fn subnetwork_is_preserved_by_fine_tuning() {
    let (task, vocab) = small_task();
    let m = model(vocab.len(), 0.1);
    let ckpt = omp_mask(m.named_weights(), SparsityTarget::new(0.6).unwrap());
    let out = fine_tune(&m, &ckpt, &task, &vocab, &ft_cfg(1)).unwrap();
    for ((p, (_, mask)), p0) in out.model.prunable().iter().zip(&ckpt.masks).zip(m.prunable()) {
        assert_eq!(p.mask(), &mask.to_bools()[..], "{}", p.name());
        let mut moved = false;
        for ((&w, &w0), &keep) in p.weight().data().iter().zip(p0.weight().data()).zip(p.mask()) {
            if keep {
                moved |= w != w0;
            } else {
                assert_eq!(w, 0.0);
            }
        }
        assert!(moved, "{} never trained", p.name());
    }
}

#[test]
fn pruned_weights_do_not_participate() {
    let (task, vocab) = small_task();
    let base = model(vocab.len(), 0.1);
    let ckpt = random_mask(base.named_shapes(), SparsityTarget::new(0.5).unwrap(), 9);
    let mut other = base.clone();
    let mut rng = SeededRng::seed_from_u64(0);
    for (p, (_, mask)) in other.prunable_mut().iter_mut().zip(&ckpt.masks) {
        for (i, w) in p.weight_mut().data_mut().iter_mut().enumerate() {
            if !mask.get(i) {
                *w = rng.random_range(-5.0..5.0);
            }
        }
    }
    let a = fine_tune(&base, &ckpt, &task, &vocab, &ft_cfg(2)).unwrap();
    let b = fine_tune(&other, &ckpt, &task, &vocab, &ft_cfg(2)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn fine_tuning_is_deterministic_per_seed() {
    let (task, vocab) = small_task();
    let m = model(vocab.len(), 0.1);
    let ckpt = omp_mask(m.named_weights(), SparsityTarget::new(0.3).unwrap());
    let a = fine_tune(&m, &ckpt, &task, &vocab, &ft_cfg(4)).unwrap();
    let b = fine_tune(&m, &ckpt, &task, &vocab, &ft_cfg(4)).unwrap();
    let c = fine_tune(&m, &ckpt, &task, &vocab, &ft_cfg(5)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_ne!(a.model, c.model);
    assert_eq!(a.best, a.history.iter().map(|h| h.1).fold(f64::MIN, f64::max));
    assert_eq!(a.steps, 2 * 48usize.div_ceil(8));
}

#[test]
fn separable_task_is_learned() {
    // The label is the first letter, which the [CLS] position can read off
    // after one attention hop.
    let mut rng = SeededRng::seed_from_u64(6);
    let mut example = |_| {
        let c = rng.random_range(0..2usize);
        let body: String = (0..5).map(|_| ['x', 'y', 'z'][rng.random_range(0..3)]).collect();
        Example {
            text: format!("{}{body}", ['a', 'b'][c]),
            label: Label::Class(c),
        }
    };
    let task = Task {
        id: "first".into(),
        kind: HeadKind::Classification(2),
        metric: MetricKind::Accuracy,
        train: (0..200).map(&mut example).collect(),
        dev: (0..50).map(&mut example).collect(),
    };
    let vocab = Vocab::from_chars("abxyz".chars());
    let m = model(vocab.len(), 0.0);
    let ckpt = omp_mask(m.named_weights(), SparsityTarget::dense());
    let cfg = FineTuneConfig {
        epochs: 6,
        eval_every: 0,
        ..ft_cfg(7)
    };
    let out = fine_tune(&m, &ckpt, &task, &vocab, &cfg).unwrap();
    assert_eq!(out.best, 1.0, "{:?}", out.history);
    assert_eq!(evaluate(&out.model, &task, &vocab).unwrap(), *out.history.last().map(|(_, v)| v).unwrap());
}
