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

//! AdamW with decoupled weight decay and a linear learning-rate decay.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-slot AdamW state. Callers address parameter buffers by a stable slot
/// index and call [`AdamW::begin_step`] once per optimizer step.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Moments>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            slots: Vec::new(),
            t: 0,
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates `params` in place. Entries with `frozen[i] == true` are left
    /// untouched and keep zero moments.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grad: &[f64], lr: f64, frozen: Option<&[bool]>) {
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Moments::default);
        }
        let st = &mut self.slots[slot];
        if st.m.len() != params.len() {
            st.m = vec![0.0; params.len()];
            st.v = vec![0.0; params.len()];
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
            st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            params[i] -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * params[i]);
        }
    }
}

/// `base · (1 − step / total)`, so the last of `total` steps still moves.
pub fn linear_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = [1.0, 1.0, 1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[2.0, -3.0, 0.0], 0.1, Some(&[false, false, true]));
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(linear_decay(1.0, 0, 4), 1.0);
        assert_eq!(linear_decay(1.0, 3, 4), 0.25);
    }
}
