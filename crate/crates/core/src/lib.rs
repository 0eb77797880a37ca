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

//! Task-agnostic mask training for small transformer encoders.
//!
//! Everything here is pure computation over `alloc` containers: a
//! define-by-run autodiff tape, a BERT-style encoder whose prunable matrices
//! carry binary masks, the mask-search procedures (one-shot and iterative
//! magnitude pruning, straight-through mask training on MLM and
//! hidden-state distillation objectives), and a fine-tuning harness with
//! the usual evaluation metrics. File formats, corpus ingestion and the
//! experiment runner live in the companion `tamt` crate.

#![no_std]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod error;
pub mod finetune;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod tasks;
pub mod tensor;

pub use autograd::{grad_check, Graph, Var};
pub use error::{Error, Result};
pub use masking::{Bitmask, MaskedParameter, Method, SparsityTarget, SubnetworkCheckpoint};
pub use model::{EncoderModel, HeadKind, HiddenStates, ModelConfig, Trainable};
pub use tensor::Tensor;

/// Seeded generator used for every stochastic choice in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;
