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

//! End-to-end gradient checks of the MLM and distillation losses with
//! respect to every parameter group of a two-layer model.

use rand::SeedableRng;
use tamt_core::autograd::max_rel_error;
use tamt_core::masking::{omp_mask, SparsityTarget};
use tamt_core::model::Trainable;
use tamt_core::pretrain::{kd_loss, mlm_loss, MlmBatch};
use tamt_core::{EncoderModel, Graph, ModelConfig, SeededRng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn toy() -> EncoderModel {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        intermediate: 12,
        vocab: 11,
        max_len: 8,
        dropout: 0.0,
    };
    let mut m = EncoderModel::new(cfg, 3).unwrap();
    // Larger weights than the default init keep every term well away from
    // the finite-difference noise floor.
    let mut rng = SeededRng::seed_from_u64(4);
    for p in m.prunable_mut() {
        for w in p.weight_mut().data_mut() {
            *w = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            *w *= 0.4;
        }
    }
    m
}

fn batch() -> MlmBatch {
    MlmBatch {
        inputs: vec![vec![2, 5, 1, 7, 9, 3], vec![2, 10, 6, 1, 3]],
        targets: vec![
            vec![None, None, Some(8), None, Some(9), None],
            vec![None, Some(5), None, Some(6), None],
        ],
    }
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Weight(usize),
    Aux(usize),
    HeadWeight,
    HeadBias,
}

fn slots(m: &EncoderModel) -> Vec<Slot> {
    let mut out: Vec<Slot> = (0..m.prunable().len()).map(Slot::Weight).collect();
    out.extend((0..m.aux().len()).map(Slot::Aux));
    out.extend([Slot::HeadWeight, Slot::HeadBias]);
    out
}

fn data_mut(m: &mut EncoderModel, s: Slot) -> &mut [f64] {
    match s {
        Slot::Weight(i) => m.prunable_mut()[i].weight_mut().data_mut(),
        Slot::Aux(i) => m.aux_mut()[i].1.data_mut(),
        Slot::HeadWeight => m.mlm_head_mut().weight.data_mut(),
        Slot::HeadBias => m.mlm_head_mut().bias.data_mut(),
    }
}

fn check_all(model: &EncoderModel, loss: impl Fn(&mut Graph, &EncoderModel, &tamt_core::model::Bound) -> tamt_core::Var, with_head: bool) {
    let mut g = Graph::new();
    let all = Trainable {
        masks: true,
        weights: true,
        aux: true,
        mlm_head: with_head,
        task_heads: false,
    };
    let bound = model.bind(&mut g, all).unwrap();
    let l = loss(&mut g, model, &bound);
    g.backward(l).unwrap();
    let eval = |m: &EncoderModel| {
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::NONE).unwrap();
        let l = loss(&mut g, m, &b);
        g.value(l).item()
    };
    for slot in slots(model) {
        if !with_head && matches!(slot, Slot::HeadWeight | Slot::HeadBias) {
            continue;
        }
        let var = match slot {
            Slot::Weight(i) => bound.weights[i],
            Slot::Aux(i) => bound.aux[i],
            Slot::HeadWeight => bound.mlm_head.0,
            Slot::HeadBias => bound.mlm_head.1,
        };
        let analytic = g.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(var).numel()]);
        let mut probe_model = model.clone();
        let x = data_mut(&mut probe_model, slot).to_vec();
        let err = max_rel_error(&analytic, &x, H, |p| {
            data_mut(&mut probe_model, slot).copy_from_slice(p);
            eval(&probe_model)
        });
        assert!(err < TOL, "{slot:?}: relative error {err}");
    }
    // Straight-through mask gradient: dL/dM = dL/d(W⊙M) ⊙ W, and at kept
    // entries dL/dW = dL/d(W⊙M).
    for (i, p) in model.prunable().iter().enumerate() {
        let gm = g.grad(bound.masks[i]).unwrap();
        let gw = g.grad(bound.weights[i]).unwrap();
        for (j, (&w, &keep)) in p.weight().data().iter().zip(p.mask()).enumerate() {
            if keep {
                let expected = gw[j] * w;
                assert!((gm[j] - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{} [{j}]", p.name());
            }
        }
    }
}

#[test]
fn mlm_loss_gradients_for_every_parameter() {
    let model = toy();
    check_all(&model, |g, m, b| mlm_loss(g, m, b, &batch(), None).unwrap(), true);
}

#[test]
fn mlm_loss_gradients_under_a_sparse_mask() {
    let mut model = toy();
    let ckpt = omp_mask(model.named_weights(), SparsityTarget::new(0.5).unwrap());
    model.apply_checkpoint(&ckpt).unwrap();
    check_all(&model, |g, m, b| mlm_loss(g, m, b, &batch(), None).unwrap(), true);
}

#[test]
fn kd_loss_gradients_for_every_parameter() {
    let teacher = toy();
    let mut student = teacher.clone();
    let ckpt = omp_mask(student.named_weights(), SparsityTarget::new(0.3).unwrap());
    student.apply_checkpoint(&ckpt).unwrap();
    let inputs = batch().inputs;
    check_all(&student, |g, m, b| kd_loss(g, &teacher, m, b, &inputs, None).unwrap(), false);
}
