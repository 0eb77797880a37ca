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

//! BERT-style encoder whose Transformer matrices and word embedding are
//! masked parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::masking::{Bitmask, MaskedParameter, Method, SubnetworkCheckpoint};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, hidden 128, FFN 512.
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            intermediate: 512,
            vocab: 100,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-layer prunable matrices, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMatrix {
    Query,
    Key,
    Value,
    AttnOut,
    FfnIn,
    FfnOut,
}

impl LayerMatrix {
    pub const ALL: [LayerMatrix; 6] = [
        LayerMatrix::Query,
        LayerMatrix::Key,
        LayerMatrix::Value,
        LayerMatrix::AttnOut,
        LayerMatrix::FfnIn,
        LayerMatrix::FfnOut,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            LayerMatrix::Query => "wq",
            LayerMatrix::Key => "wk",
            LayerMatrix::Value => "wv",
            LayerMatrix::AttnOut => "wao",
            LayerMatrix::FfnIn => "wfi",
            LayerMatrix::FfnOut => "wfo",
        }
    }

    fn shape(self, cfg: &ModelConfig) -> [usize; 2] {
        match self {
            LayerMatrix::FfnIn => [cfg.hidden, cfg.intermediate],
            LayerMatrix::FfnOut => [cfg.intermediate, cfg.hidden],
            _ => [cfg.hidden, cfg.hidden],
        }
    }
}

/// Unmasked per-layer parameters, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerAux {
    BiasQ,
    BiasK,
    BiasV,
    BiasAttnOut,
    AttnLnGain,
    AttnLnBias,
    BiasFfnIn,
    BiasFfnOut,
    FfnLnGain,
    FfnLnBias,
}

const LAYER_AUX: [(LayerAux, &str); 10] = [
    (LayerAux::BiasQ, "bq"),
    (LayerAux::BiasK, "bk"),
    (LayerAux::BiasV, "bv"),
    (LayerAux::BiasAttnOut, "bao"),
    (LayerAux::AttnLnGain, "attn_ln.gain"),
    (LayerAux::AttnLnBias, "attn_ln.bias"),
    (LayerAux::BiasFfnIn, "bfi"),
    (LayerAux::BiasFfnOut, "bfo"),
    (LayerAux::FfnLnGain, "ffn_ln.gain"),
    (LayerAux::FfnLnBias, "ffn_ln.bias"),
];

const EMB_AUX: usize = 3; // pos, emb_ln.gain, emb_ln.bias

/// Output layout of a downstream head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum HeadKind {
    /// Logits over `n` classes from the first position.
    Classification(usize),
    /// One real output from the first position.
    Regression,
    /// Start/end logits at every position.
    Span,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification(n) => n,
            HeadKind::Regression => 1,
            HeadKind::Span => 2,
        }
    }
}

/// A linear map `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: normal(&[inputs, outputs], rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub linear: Linear,
}

fn normal(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    prunable: Vec<MaskedParameter>,
    aux: Vec<(String, Tensor)>,
    mlm_head: Linear,
    task_heads: BTreeMap<String, TaskHead>,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub masks: bool,
    pub weights: bool,
    pub aux: bool,
    pub mlm_head: bool,
    pub task_heads: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        masks: false,
        weights: false,
        aux: false,
        mlm_head: false,
        task_heads: false,
    };
}

/// Graph handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct Bound {
    pub weights: Vec<Var>,
    pub masks: Vec<Var>,
    /// `W ⊙ M` for each prunable matrix.
    pub effective: Vec<Var>,
    pub aux: Vec<Var>,
    pub mlm_head: (Var, Var),
    pub task_heads: BTreeMap<String, (Var, Var)>,
}

/// Embedding output followed by every layer output.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub layers: Vec<Var>,
}

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding output")
    }
}

impl EncoderModel {
    /// Randomly initialized model with all-ones masks.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut prunable = vec![MaskedParameter::new("emb", normal(&[config.vocab, config.hidden], &mut rng))];
        for l in 0..config.layers {
            for m in LayerMatrix::ALL {
                let name = format!("layer{l}.{}", m.suffix());
                prunable.push(MaskedParameter::new(name, normal(&m.shape(&config), &mut rng)));
            }
        }
        let d = config.hidden;
        let mut aux = vec![
            ("pos".to_string(), normal(&[config.max_len, d], &mut rng)),
            ("emb_ln.gain".to_string(), Tensor::full(&[d], 1.0)),
            ("emb_ln.bias".to_string(), Tensor::zeros(&[d])),
        ];
        for l in 0..config.layers {
            for (kind, suffix) in LAYER_AUX {
                let t = match kind {
                    LayerAux::AttnLnGain | LayerAux::FfnLnGain => Tensor::full(&[d], 1.0),
                    LayerAux::BiasFfnIn => Tensor::zeros(&[config.intermediate]),
                    _ => Tensor::zeros(&[d]),
                };
                aux.push((format!("layer{l}.{suffix}"), t));
            }
        }
        let mlm_head = Linear::init(d, config.vocab, &mut rng);
        Ok(Self {
            config,
            prunable,
            aux,
            mlm_head,
            task_heads: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prunable(&self) -> &[MaskedParameter] {
        &self.prunable
    }

    pub fn prunable_mut(&mut self) -> &mut [MaskedParameter] {
        &mut self.prunable
    }

    pub fn aux(&self) -> &[(String, Tensor)] {
        &self.aux
    }

    pub fn aux_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.aux
    }

    pub fn mlm_head(&self) -> &Linear {
        &self.mlm_head
    }

    pub fn mlm_head_mut(&mut self) -> &mut Linear {
        &mut self.mlm_head
    }

    pub fn task_head(&self, task: &str) -> Option<&TaskHead> {
        self.task_heads.get(task)
    }

    pub fn task_head_mut(&mut self, task: &str) -> Option<&mut TaskHead> {
        self.task_heads.get_mut(task)
    }

    /// Prunable matrices as `(name, weight)` pairs in storage order.
    pub fn named_weights(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.prunable.iter().map(|p| (p.name(), p.weight()))
    }

    pub fn named_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.prunable.iter().map(|p| (p.name(), p.shape()))
    }

    pub fn prunable_len(&self) -> usize {
        self.prunable.iter().map(|p| p.len()).sum()
    }

    /// Index of a prunable matrix in storage order.
    pub fn index_of(layer: usize, matrix: LayerMatrix) -> usize {
        1 + layer * LayerMatrix::ALL.len() + matrix as usize
    }

    fn aux_index(layer: usize, kind: LayerAux) -> usize {
        EMB_AUX + layer * LAYER_AUX.len() + kind as usize
    }

    /// Adds (or re-initializes) a freshly initialized head for `task`.
    pub fn register_task(&mut self, task: &str, kind: HeadKind, seed: u64) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let linear = Linear::init(self.config.hidden, kind.outputs(), &mut rng);
        self.task_heads.insert(task.to_string(), TaskHead { kind, linear });
    }

    /// Snapshot of the current binary masks.
    pub fn checkpoint(&self, method: Method, seed: u64, sparsity: f64) -> SubnetworkCheckpoint {
        SubnetworkCheckpoint {
            sparsity,
            method,
            seed,
            masks: self.prunable.iter().map(|p| (p.name().to_string(), p.bitmask())).collect(),
        }
    }

    /// Installs fixed masks from a checkpoint covering exactly this model's matrices.
    pub fn apply_checkpoint(&mut self, ckpt: &SubnetworkCheckpoint) -> Result<()> {
        if ckpt.masks.len() != self.prunable.len() {
            return Err(Error::MaskMismatch(format!(
                "checkpoint has {} matrices, model has {}",
                ckpt.masks.len(),
                self.prunable.len()
            )));
        }
        for (p, (name, mask)) in self.prunable.iter_mut().zip(&ckpt.masks) {
            if p.name() != name {
                return Err(Error::MaskMismatch(format!("expected `{}`, found `{name}`", p.name())));
            }
            p.set_mask(mask)?;
        }
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        for p in &mut self.prunable {
            let ones = Bitmask::ones(p.shape());
            p.set_mask(&ones).expect("own shape");
        }
    }

    /// Copies every weight (prunable, auxiliary and MLM head) from `other`,
    /// leaving masks and task heads untouched.
    pub fn copy_weights_from(&mut self, other: &EncoderModel) {
        for (p, q) in self.prunable.iter_mut().zip(&other.prunable) {
            *p.weight_mut() = q.weight().clone();
        }
        for (a, b) in self.aux.iter_mut().zip(&other.aux) {
            a.1 = b.1.clone();
        }
        self.mlm_head = other.mlm_head.clone();
    }

    /// Order-sensitive checksum over all prunable weights.
    pub fn weight_checksum(&self) -> u64 {
        self.prunable
            .iter()
            .fold(0u64, |h, p| h.rotate_left(5) ^ p.weight_checksum())
    }

    /// Registers every parameter on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> Result<Bound> {
        let mut weights = Vec::with_capacity(self.prunable.len());
        let mut masks = Vec::with_capacity(self.prunable.len());
        let mut effective = Vec::with_capacity(self.prunable.len());
        for p in &self.prunable {
            let w = g.leaf(p.weight().clone(), trainable.weights);
            let m = g.leaf(p.mask_tensor(), trainable.masks);
            effective.push(g.mul(w, m)?);
            weights.push(w);
            masks.push(m);
        }
        let aux = self.aux.iter().map(|(_, t)| g.leaf(t.clone(), trainable.aux)).collect();
        let mlm_head = (
            g.leaf(self.mlm_head.weight.clone(), trainable.mlm_head),
            g.leaf(self.mlm_head.bias.clone(), trainable.mlm_head),
        );
        let task_heads = self
            .task_heads
            .iter()
            .map(|(k, h)| {
                let w = g.leaf(h.linear.weight.clone(), trainable.task_heads);
                let b = g.leaf(h.linear.bias.clone(), trainable.task_heads);
                (k.clone(), (w, b))
            })
            .collect();
        Ok(Bound {
            weights,
            masks,
            effective,
            aux,
            mlm_head,
            task_heads,
        })
    }

    pub fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).numel();
        let scale = 1.0 / (1.0 - p);
        let keep = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let keep = g.constant(Tensor::new(&shape, keep)?);
        g.mul(x, keep)
    }

    /// Runs the encoder on one sequence. Dropout is active only when an RNG
    /// is supplied and the configured probability is positive.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ids: &[usize],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<HiddenStates> {
        self.check_tokens(ids)?;
        let n = ids.len();
        let tok = g.gather_rows(bound.effective[0], ids)?;
        let pos = g.slice_rows(bound.aux[0], 0, n)?;
        let x = g.add(tok, pos)?;
        let x = g.layer_norm(x, bound.aux[1], bound.aux[2], LAYER_NORM_EPS)?;
        let mut h = self.dropout(g, x, rng.as_deref_mut())?;
        let mut layers = vec![h];
        for l in 0..self.config.layers {
            let attn = self.attention_block(g, bound, l, h, rng.as_deref_mut())?;
            h = self.ffn_block(g, bound, l, attn, rng.as_deref_mut())?;
            layers.push(h);
        }
        Ok(HiddenStates { layers })
    }

    fn project(&self, g: &mut Graph, bound: &Bound, x: Var, layer: usize, m: LayerMatrix, bias: LayerAux) -> Result<Var> {
        let y = g.matmul(x, bound.effective[Self::index_of(layer, m)])?;
        g.add_row(y, bound.aux[Self::aux_index(layer, bias)])
    }

    /// Multi-head self-attention, then residual and layer norm.
    pub fn attention_block(
        &self,
        g: &mut Graph,
        bound: &Bound,
        layer: usize,
        h: Var,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let q = self.project(g, bound, h, layer, LayerMatrix::Query, LayerAux::BiasQ)?;
        let k = self.project(g, bound, h, layer, LayerMatrix::Key, LayerAux::BiasK)?;
        let v = self.project(g, bound, h, layer, LayerMatrix::Value, LayerAux::BiasV)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = self.project(g, bound, cat, layer, LayerMatrix::AttnOut, LayerAux::BiasAttnOut)?;
        let out = self.dropout(g, out, rng)?;
        let res = g.add(h, out)?;
        g.layer_norm(
            res,
            bound.aux[Self::aux_index(layer, LayerAux::AttnLnGain)],
            bound.aux[Self::aux_index(layer, LayerAux::AttnLnBias)],
            LAYER_NORM_EPS,
        )
    }

    fn ffn_block(&self, g: &mut Graph, bound: &Bound, layer: usize, h: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        let inner = self.project(g, bound, h, layer, LayerMatrix::FfnIn, LayerAux::BiasFfnIn)?;
        let inner = g.gelu(inner);
        let out = self.project(g, bound, inner, layer, LayerMatrix::FfnOut, LayerAux::BiasFfnOut)?;
        let out = self.dropout(g, out, rng)?;
        let res = g.add(h, out)?;
        g.layer_norm(
            res,
            bound.aux[Self::aux_index(layer, LayerAux::FfnLnGain)],
            bound.aux[Self::aux_index(layer, LayerAux::FfnLnBias)],
            LAYER_NORM_EPS,
        )
    }

    /// Vocabulary logits (`|x| × V`) from the final hidden states.
    pub fn mlm_logits(&self, g: &mut Graph, bound: &Bound, states: &HiddenStates) -> Result<Var> {
        let y = g.matmul(states.last(), bound.mlm_head.0)?;
        g.add_row(y, bound.mlm_head.1)
    }

    /// Head outputs: `1 × n` for classification/regression, `|x| × 2` for span.
    pub fn task_logits(&self, g: &mut Graph, bound: &Bound, states: &HiddenStates, task: &str) -> Result<Var> {
        let head = self.task_heads.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let &(w, b) = bound
            .task_heads
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let input = match head.kind {
            HeadKind::Span => states.last(),
            _ => g.slice_rows(states.last(), 0, 1)?,
        };
        let y = g.matmul(input, w)?;
        g.add_row(y, b)
    }
}
