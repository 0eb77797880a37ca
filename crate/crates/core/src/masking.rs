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

//! Binary masks over frozen weights.
//!
//! Each prunable matrix carries a real-valued score buffer `M̄`, a threshold
//! `φ` and the binary mask `M` derived from them. Scores are updated with a
//! straight-through gradient step and re-thresholded so every matrix keeps
//! exactly `k = round((1 - S) · size)` entries.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Target fraction of pruned entries, applied per matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityTarget(f64);

impl SparsityTarget {
    pub fn new(sparsity: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::InvalidArgument(alloc::format!(
                "sparsity {sparsity} outside [0, 1)"
            )));
        }
        Ok(Self(sparsity))
    }

    pub fn dense() -> Self {
        Self(0.0)
    }

    pub fn sparsity(self) -> f64 {
        self.0
    }

    /// Entries kept in a matrix of `size` elements; never less than one.
    pub fn kept(self, size: usize) -> usize {
        let k = libm::round((1.0 - self.0) * size as f64) as usize;
        k.clamp(1, size)
    }
}

/// Packed row-major bits, LSB-first within each 64-bit word.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitmask {
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl fmt::Debug for Bitmask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bitmask")
            .field("shape", &self.shape)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl Bitmask {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut m = Self::zeros(shape);
        for i in 0..m.len {
            m.set(i, true);
        }
        m
    }

    pub fn from_bools(shape: &[usize], bits: &[bool]) -> Result<Self> {
        let mut m = Self::zeros(shape);
        if bits.len() != m.len {
            return Err(Error::Shape {
                op: "bitmask",
                left: shape.to_vec(),
                right: vec![bits.len()],
            });
        }
        for (i, &b) in bits.iter().enumerate() {
            m.set(i, b);
        }
        Ok(m)
    }

    /// Builds a mask from LSB-first packed bytes.
    pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let mut m = Self::zeros(shape);
        if bytes.len() != m.len.div_ceil(8) {
            return Err(Error::Shape {
                op: "bitmask bytes",
                left: shape.to_vec(),
                right: vec![bytes.len()],
            });
        }
        for i in 0..m.len {
            m.set(i, bytes[i / 8] >> (i % 8) & 1 == 1);
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.iter().collect()
    }

    fn intersection_union(&self, other: &Self) -> (usize, usize) {
        self.words.iter().zip(&other.words).fold((0, 0), |(i, u), (a, b)| {
            (i + (a & b).count_ones() as usize, u + (a | b).count_ones() as usize)
        })
    }
}

/// Binarization: 1 iff `score >= threshold`.
pub fn binarize(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Total order used for every top-k selection: larger magnitude first,
/// then lower index.
fn magnitude_order(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    }
}

/// Keeps the `k` largest entries of `values` by absolute value. Returns the
/// keep flags and the magnitude of the `k`-th kept entry.
pub fn top_k_by_magnitude(values: &[f64], k: usize) -> (Vec<bool>, f64) {
    let k = k.min(values.len());
    let mut keep = vec![false; values.len()];
    if k == 0 {
        return (keep, f64::INFINITY);
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let order = magnitude_order(values);
    idx.select_nth_unstable_by(k - 1, &order);
    for &i in &idx[..k] {
        keep[i] = true;
    }
    (keep, values[idx[k - 1]].abs())
}

/// A frozen weight matrix with its mask scores, threshold and binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParameter {
    name: String,
    weight: Tensor,
    scores: Vec<f64>,
    mask: Vec<bool>,
    threshold: f64,
}

impl MaskedParameter {
    /// A dense parameter: scores at zero, threshold at `-inf`, mask all ones.
    pub fn new(name: impl Into<String>, weight: Tensor) -> Self {
        let n = weight.numel();
        Self {
            name: name.into(),
            weight,
            scores: vec![0.0; n],
            mask: vec![true; n],
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn shape(&self) -> &[usize] {
        self.weight.shape()
    }

    pub fn len(&self) -> usize {
        self.weight.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.numel() == 0
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn mask_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(self.weight.shape(), data).expect("mask matches weight")
    }

    pub fn bitmask(&self) -> Bitmask {
        Bitmask::from_bools(self.weight.shape(), &self.mask).expect("mask matches weight")
    }

    /// Installs a fixed binary mask. Scores are set to 1 at kept entries and
    /// 0 elsewhere with threshold 0.5, so binarization reproduces the mask.
    pub fn set_mask(&mut self, mask: &Bitmask) -> Result<()> {
        if mask.shape() != self.weight.shape() {
            return Err(Error::MaskMismatch(alloc::format!(
                "{}: mask shape {:?} vs weight {:?}",
                self.name,
                mask.shape(),
                self.weight.shape()
            )));
        }
        self.mask = mask.to_bools();
        self.scores = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        self.threshold = 0.5;
        Ok(())
    }

    /// Installs initial scores and binarizes them with the signed rule.
    pub fn init_scores(&mut self, scores: Vec<f64>, threshold: f64) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::MaskMismatch(alloc::format!(
                "{}: {} scores for {} weights",
                self.name,
                scores.len(),
                self.len()
            )));
        }
        self.mask = binarize(&scores, threshold);
        self.scores = scores;
        self.threshold = threshold;
        Ok(())
    }

    /// Zeroes weights at pruned positions.
    pub fn prune_weights(&mut self) {
        for (w, &m) in self.weight.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *w = 0.0;
            }
        }
    }

    /// Order-sensitive FNV-1a hash over the weight bit patterns.
    pub fn weight_checksum(&self) -> u64 {
        checksum(self.weight.data())
    }
}

pub(crate) fn checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Straight-through update `M̄ ← M̄ − η · ∂L/∂M`, applied to every entry
/// including currently pruned ones. The weight is not touched.
pub fn ste_step(param: &mut MaskedParameter, grad: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("learning rate {lr} must be positive")));
    }
    if grad.len() != param.scores.len() {
        return Err(Error::Shape {
            op: "ste_step",
            left: param.shape().to_vec(),
            right: vec![grad.len()],
        });
    }
    for (s, g) in param.scores.iter_mut().zip(grad) {
        *s -= lr * g;
    }
    Ok(())
}

/// Moves the threshold to the `k`-th largest `|M̄|` and rebuilds the mask so
/// that exactly `k` entries survive.
pub fn rethreshold(param: &mut MaskedParameter, target: SparsityTarget) {
    let k = target.kept(param.len());
    let (keep, phi) = top_k_by_magnitude(&param.scores, k);
    param.mask = keep;
    param.threshold = phi;
}

/// Which procedure produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Method {
    #[cfg_attr(feature = "serde", serde(rename = "FULL"))]
    Full,
    #[cfg_attr(feature = "serde", serde(rename = "OMP"))]
    Omp,
    #[cfg_attr(feature = "serde", serde(rename = "IMP"))]
    Imp,
    #[cfg_attr(feature = "serde", serde(rename = "TAMT-MLM"))]
    TamtMlm,
    #[cfg_attr(feature = "serde", serde(rename = "TAMT-KD"))]
    TamtKd,
    #[cfg_attr(feature = "serde", serde(rename = "TAMT-MLM+KD"))]
    TamtMlmKd,
    #[cfg_attr(feature = "serde", serde(rename = "RAND"))]
    Rand,
}

impl Method {
    pub const SEARCH: [Method; 6] = [
        Method::Omp,
        Method::Imp,
        Method::TamtMlm,
        Method::TamtKd,
        Method::TamtMlmKd,
        Method::Rand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "FULL",
            Method::Omp => "OMP",
            Method::Imp => "IMP",
            Method::TamtMlm => "TAMT-MLM",
            Method::TamtKd => "TAMT-KD",
            Method::TamtMlmKd => "TAMT-MLM+KD",
            Method::Rand => "RAND",
        }
    }

    /// Whether the mask depends on the seed (OMP and the full model do not).
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Method::Full | Method::Omp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Full]
            .into_iter()
            .chain(Method::SEARCH)
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown method `{s}`")))
    }
}

/// A named bitmask per prunable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetworkCheckpoint {
    pub sparsity: f64,
    pub method: Method,
    pub seed: u64,
    pub masks: Vec<(String, Bitmask)>,
}

impl SubnetworkCheckpoint {
    pub fn total_len(&self) -> usize {
        self.masks.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn total_kept(&self) -> usize {
        self.masks.iter().map(|(_, m)| m.count_ones()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Bitmask> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        let same = self.masks.len() == other.masks.len()
            && self
                .masks
                .iter()
                .zip(&other.masks)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::MaskMismatch("checkpoints cover different matrices".to_string()))
        }
    }
}

/// Fraction of pruned entries over all masked matrices.
pub fn sparsity_of(ckpt: &SubnetworkCheckpoint) -> f64 {
    let total = ckpt.total_len();
    if total == 0 {
        return 0.0;
    }
    1.0 - ckpt.total_kept() as f64 / total as f64
}

/// Pooled `|A ∩ B| / |A ∪ B|` over all matrices; two empty masks give 1.
pub fn jaccard(a: &SubnetworkCheckpoint, b: &SubnetworkCheckpoint) -> Result<f64> {
    a.check_compatible(b)?;
    let (inter, union) = a
        .masks
        .iter()
        .zip(&b.masks)
        .map(|((_, x), (_, y))| x.intersection_union(y))
        .fold((0, 0), |(i, u), (x, y)| (i + x, u + y));
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mask_distance(a: &SubnetworkCheckpoint, b: &SubnetworkCheckpoint) -> Result<f64> {
    jaccard(a, b).map(|j| 1.0 - j)
}

/// One-shot magnitude pruning, ranked locally inside each matrix.
pub fn omp_mask<'a, I>(weights: I, target: SparsityTarget) -> SubnetworkCheckpoint
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let masks = weights
        .into_iter()
        .map(|(name, w)| {
            let (keep, _) = top_k_by_magnitude(w.data(), target.kept(w.numel()));
            (name.to_string(), Bitmask::from_bools(w.shape(), &keep).expect("same shape"))
        })
        .collect();
    SubnetworkCheckpoint {
        sparsity: target.sparsity(),
        method: Method::Omp,
        seed: 0,
        masks,
    }
}

/// A uniformly random `k`-subset per matrix.
pub fn random_mask<'a, I>(shapes: I, target: SparsityTarget, seed: u64) -> SubnetworkCheckpoint
where
    I: IntoIterator<Item = (&'a str, &'a [usize])>,
{
    let mut rng = SeededRng::seed_from_u64(seed);
    let masks = shapes
        .into_iter()
        .map(|(name, shape)| {
            let mut m = Bitmask::zeros(shape);
            let k = target.kept(m.len());
            for i in rand::seq::index::sample(&mut rng, m.len(), k).iter() {
                m.set(i, true);
            }
            (name.to_string(), m)
        })
        .collect();
    SubnetworkCheckpoint {
        sparsity: target.sparsity(),
        method: Method::Rand,
        seed,
        masks,
    }
}

/// Scores that binarize to `ckpt` at threshold `phi`: `α·φ` where kept, else 0.
pub fn scores_from_mask(ckpt: &SubnetworkCheckpoint, alpha: f64, phi: f64) -> Result<Vec<Vec<f64>>> {
    if !(alpha >= 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("alpha {alpha} must be >= 1")));
    }
    if !(phi > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("threshold {phi} must be > 0")));
    }
    Ok(ckpt
        .masks
        .iter()
        .map(|(_, m)| m.iter().map(|b| if b { alpha * phi } else { 0.0 }).collect())
        .collect())
}

/// Score initialization from the OMP mask.
pub fn omp_init<'a, I>(weights: I, target: SparsityTarget, alpha: f64, phi: f64) -> Result<Vec<Vec<f64>>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    scores_from_mask(&omp_mask(weights, target), alpha, phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> MaskedParameter {
        MaskedParameter::new("w", Tensor::vector(values.to_vec()))
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.02, 0.005], 0.01), vec![true, false]);
        assert_eq!(binarize(&[0.01], 0.01), vec![true]);
        assert_eq!(binarize(&[-1e300, 0.0], f64::NEG_INFINITY), vec![true, true]);
    }

    #[test]
    fn ste_step_examples() {
        let mut p = param(&[0.02]);
        p.init_scores(vec![0.02], 0.01).unwrap();
        let before = p.weight_checksum();
        ste_step(&mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p.scores(), &[0.02]);
        ste_step(&mut p, &[0.5], 0.1).unwrap();
        assert!((p.scores()[0] + 0.03).abs() < 1e-15);
        assert_eq!(p.weight_checksum(), before);
        assert!(ste_step(&mut p, &[0.0], 0.0).is_err());
        assert!(ste_step(&mut p, &[0.0], -1.0).is_err());
    }

    #[test]
    fn pruned_entry_reenters_after_rethreshold() {
        // 2×2 at S = 0.5: entries 0 and 1 start kept, 3 starts pruned.
        let mut p = MaskedParameter::new("w", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        p.init_scores(vec![0.02, 0.02, 0.0, 0.0], 0.01).unwrap();
        let target = SparsityTarget::new(0.5).unwrap();
        // Negative gradient on entry 3 pushes its score up; positive on 1 pushes it down.
        ste_step(&mut p, &[0.0, 0.15, 0.0, -0.3], 0.1).unwrap();
        // Scores: [0.02, 0.005, 0.0, 0.03].
        rethreshold(&mut p, target);
        assert_eq!(p.mask(), &[true, false, false, true]);
        assert!((p.threshold() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rethreshold_examples() {
        let mut p = param(&[0.0; 4]);
        p.init_scores(vec![0.3, -0.2, 0.1, 0.05], 0.01).unwrap();
        rethreshold(&mut p, SparsityTarget::new(0.5).unwrap());
        assert_eq!(p.mask(), &[true, true, false, false]);

        let mut p = param(&[0.0; 5]);
        p.init_scores(vec![0.7; 5], 0.01).unwrap();
        rethreshold(&mut p, SparsityTarget::new(0.4).unwrap());
        assert_eq!(p.mask(), &[true, true, true, false, false]);
    }

    #[test]
    fn kept_count_rounds_and_clamps() {
        assert_eq!(SparsityTarget::new(0.5).unwrap().kept(5), 3);
        assert_eq!(SparsityTarget::new(0.99).unwrap().kept(10), 1);
        assert_eq!(SparsityTarget::dense().kept(7), 7);
        assert!(SparsityTarget::new(1.0).is_err());
        assert!(SparsityTarget::new(-0.1).is_err());
    }

    #[test]
    fn omp_examples() {
        let w = Tensor::from_rows(&[&[3.0, -4.0], &[1.0, 2.0]]).unwrap();
        let ck = omp_mask([("w", &w)], SparsityTarget::new(0.5).unwrap());
        assert_eq!(ck.masks[0].1.to_bools(), vec![true, true, false, false]);
        let ck = omp_mask([("w", &w)], SparsityTarget::dense());
        assert_eq!(ck.masks[0].1.count_ones(), 4);
    }

    #[test]
    fn omp_init_examples() {
        let w = Tensor::from_rows(&[&[3.0, -4.0], &[1.0, 2.0]]).unwrap();
        let t = SparsityTarget::new(0.5).unwrap();
        let scores = omp_init([("w", &w)], t, 2.0, 0.01).unwrap();
        assert_eq!(scores[0], vec![0.02, 0.02, 0.0, 0.0]);
        assert!(omp_init([("w", &w)], t, 0.5, 0.01).is_err());
        assert!(omp_init([("w", &w)], t, 2.0, 0.0).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let mk = |bits: &[bool]| SubnetworkCheckpoint {
            sparsity: 0.5,
            method: Method::Rand,
            seed: 0,
            masks: vec![("w".to_string(), Bitmask::from_bools(&[bits.len()], bits).unwrap())],
        };
        let a = mk(&[true, true, false, false]);
        let b = mk(&[true, false, true, false]);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &mk(&[false, false, true, true])).unwrap(), 0.0);
        let e = mk(&[false; 4]);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert_eq!(mask_distance(&a, &a).unwrap(), 0.0);
        assert!(jaccard(&a, &mk(&[true; 3])).is_err());
    }

    #[test]
    fn bitmask_bytes_are_lsb_first() {
        let m = Bitmask::from_bools(&[10], &[true, false, false, false, false, false, false, false, false, true]).unwrap();
        assert_eq!(m.to_bytes(), vec![0b0000_0001, 0b0000_0010]);
        assert_eq!(Bitmask::from_bytes(&[10], &m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn sparsity_of_extremes() {
        let mut ck = omp_mask([], SparsityTarget::dense());
        ck.masks.push(("a".to_string(), Bitmask::ones(&[3, 3])));
        assert_eq!(sparsity_of(&ck), 0.0);
        ck.masks[0].1 = Bitmask::zeros(&[3, 3]);
        assert_eq!(sparsity_of(&ck), 1.0);
    }
}
