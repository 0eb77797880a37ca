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

//! Mask construction and mask algebra against brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use tamt_core::masking::{
    binarize, jaccard, omp_init, omp_mask, random_mask, rethreshold, ste_step, Bitmask, MaskedParameter,
    SparsityTarget,
};
use tamt_core::{Method, SeededRng, SubnetworkCheckpoint, Tensor};

const SPARSITIES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

fn random_matrix(rng: &mut SeededRng, coarse: bool) -> Tensor {
    let rows = rng.random_range(1..12);
    let cols = rng.random_range(1..12);
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            // Coarse values produce many ties in magnitude.
            if coarse {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Full sort by descending magnitude, ties to the lower index.
fn sort_oracle(w: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; w.len()];
    for &i in &idx[..k] {
        keep[i] = true;
    }
    keep
}

#[test]
fn omp_matches_full_sort_oracle() {
    let mut rng = SeededRng::seed_from_u64(11);
    for trial in 0..100 {
        let w = random_matrix(&mut rng, trial % 2 == 1);
        for s in SPARSITIES {
            let target = SparsityTarget::new(s).unwrap();
            let k = (((1.0 - s) * w.numel() as f64).round() as usize).max(1);
            let ck = omp_mask([("w", &w)], target);
            assert_eq!(ck.masks[0].1.to_bools(), sort_oracle(w.data(), k), "trial {trial}, S = {s}");
            assert_eq!(ck.masks[0].1.count_ones(), k);
        }
    }
}

#[test]
fn binarized_omp_init_is_the_omp_mask() {
    let mut rng = SeededRng::seed_from_u64(12);
    for trial in 0..50 {
        let mats: Vec<Tensor> = (0..3).map(|_| random_matrix(&mut rng, trial % 3 == 0)).collect();
        let named: Vec<(String, &Tensor)> = mats.iter().enumerate().map(|(i, t)| (format!("m{i}"), t)).collect();
        for s in SPARSITIES {
            let target = SparsityTarget::new(s).unwrap();
            let it = || named.iter().map(|(n, t)| (n.as_str(), *t));
            let scores = omp_init(it(), target, 2.0, 0.01).unwrap();
            let omp = omp_mask(it(), target);
            for (sc, (_, m)) in scores.iter().zip(&omp.masks) {
                assert_eq!(binarize(sc, 0.01), m.to_bools());
            }
        }
    }
}

fn random_checkpoint(rng: &mut SeededRng, shapes: &[[usize; 2]]) -> SubnetworkCheckpoint {
    let density: f64 = rng.random_range(0.0..1.0);
    let masks = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let bits: Vec<bool> = (0..s[0] * s[1]).map(|_| rng.random::<f64>() < density).collect();
            (format!("m{i}"), Bitmask::from_bools(s, &bits).unwrap())
        })
        .collect();
    SubnetworkCheckpoint {
        sparsity: 1.0 - density,
        method: Method::Rand,
        seed: 0,
        masks,
    }
}

#[test]
fn jaccard_matches_bit_enumeration() {
    let mut rng = SeededRng::seed_from_u64(13);
    let shapes = [[3, 5], [7, 2], [1, 9]];
    for _ in 0..1000 {
        let a = random_checkpoint(&mut rng, &shapes);
        let b = random_checkpoint(&mut rng, &shapes);
        let (mut inter, mut union) = (0usize, 0usize);
        for ((_, x), (_, y)) in a.masks.iter().zip(&b.masks) {
            for i in 0..x.len() {
                inter += (x.get(i) && y.get(i)) as usize;
                union += (x.get(i) || y.get(i)) as usize;
            }
        }
        let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert_eq!(jaccard(&a, &b).unwrap(), expected);
        assert_eq!(jaccard(&b, &a).unwrap(), expected);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn jaccard_rejects_mismatched_checkpoints() {
    let mut rng = SeededRng::seed_from_u64(14);
    let a = random_checkpoint(&mut rng, &[[2, 2]]);
    let b = random_checkpoint(&mut rng, &[[2, 3]]);
    assert!(jaccard(&a, &b).is_err());
}

#[test]
fn random_mask_is_uniform_over_positions() {
    // Each position of a 6×5 matrix at S = 0.6 survives with probability
    // 12/30; 4000 draws give a standard error of about 0.0077.
    let target = SparsityTarget::new(0.6).unwrap();
    let shape = [6usize, 5];
    let mut hits = [0usize; 30];
    let draws = 4000;
    for seed in 0..draws {
        let ck = random_mask([("w", &shape[..])], target, seed);
        assert_eq!(ck.masks[0].1.count_ones(), 12);
        for (i, h) in hits.iter_mut().enumerate() {
            *h += ck.masks[0].1.get(i) as usize;
        }
    }
    for h in hits {
        let p = h as f64 / draws as f64;
        assert!((p - 0.4).abs() < 0.04, "{p}");
    }
}

proptest! {
    #[test]
    fn rethreshold_keeps_exactly_k(
        scores in proptest::collection::vec(-1.0f64..1.0, 1..60),
        grad_seed in 0u64..1000,
        s in 0.0f64..0.99,
    ) {
        let n = scores.len();
        let mut p = MaskedParameter::new("w", Tensor::vector(vec![1.0; n]));
        p.init_scores(scores, 0.01).unwrap();
        let target = SparsityTarget::new(s).unwrap();
        let k = (((1.0 - s) * n as f64).round() as usize).max(1);
        let mut rng = SeededRng::seed_from_u64(grad_seed);
        for _ in 0..5 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            ste_step(&mut p, &g, 0.3).unwrap();
            rethreshold(&mut p, target);
            prop_assert_eq!(p.mask().iter().filter(|&&m| m).count(), k);
            // Every kept score is at least as large in magnitude as every pruned one.
            let kept_min = p.scores().iter().zip(p.mask()).filter(|(_, &m)| m).map(|(s, _)| s.abs()).fold(f64::INFINITY, f64::min);
            let pruned_max = p.scores().iter().zip(p.mask()).filter(|(_, &m)| !m).map(|(s, _)| s.abs()).fold(0.0, f64::max);
            prop_assert!(kept_min >= pruned_max);
        }
    }

    #[test]
    fn bitmask_bytes_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..100)) {
        let m = Bitmask::from_bools(&[bits.len()], &bits).unwrap();
        let back = Bitmask::from_bytes(&[bits.len()], &m.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bools(), bits);
    }
}
