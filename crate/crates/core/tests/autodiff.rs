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

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamt_core::autograd::{max_rel_error, LAYER_NORM_EPS};
use tamt_core::{grad_check, Error, Graph, Tensor};

const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

// Weighted sum so that gradients of matrix-valued ops are not all equal.
fn weighted_sum(g: &mut Graph, x: tamt_core::Var, seed: u64) -> tamt_core::Result<tamt_core::Var> {
    let w = random(g.value(x).shape(), seed);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph::new();
    let id = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let x = g.constant(random(&[2, 3], 1));
    let y = g.matmul(id, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let a = random(&[3, 4], 2);
    let b = random(&[4, 2], 3);
    let bb = b.clone();
    let err_a = grad_check(
        move |g, x| {
            let bv = g.constant(bb.clone());
            let y = g.matmul(x, bv)?;
            weighted_sum(g, y, 9)
        },
        &a,
        H,
    )
    .unwrap();
    let err_b = grad_check(
        move |g, x| {
            let av = g.constant(a.clone());
            let y = g.matmul(av, x)?;
            weighted_sum(g, y, 9)
        },
        &b,
        H,
    )
    .unwrap();
    assert!(err_a < 1e-4 && err_b < 1e-4, "{err_a} {err_b}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);

    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }

    let x = g.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]).unwrap());
    assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite(_))));
}

// Composite Simpson over [a, b] with n (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 12.0, 1.0]));
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 12.0).abs() < 1e-12);
    // Φ(1) by quadrature of the standard normal density from 0 to 1.
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let phi1 = 0.5 + simpson(pdf, 0.0, 1.0, 2000);
    assert!((v[2] - phi1).abs() < 1e-8, "{} vs {}", v[2], phi1);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[&[3.0, 3.0], &[1.0, -1.0]]).unwrap());
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] - 1.0).abs() < 1e-10 && (v[3] + 1.0).abs() < 1e-10);

    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(g.layer_norm(x, bad, bias, LAYER_NORM_EPS).is_err());
}

#[test]
fn layer_norm_gradients() {
    let x = random(&[3, 5], 4);
    let gain = random(&[5], 5);
    let bias = random(&[5], 6);
    let (g2, b2) = (gain.clone(), bias.clone());
    let err_x = grad_check(
        move |g, x| {
            let gv = g.constant(g2.clone());
            let bv = g.constant(b2.clone());
            let y = g.layer_norm(x, gv, bv, LAYER_NORM_EPS)?;
            weighted_sum(g, y, 7)
        },
        &x,
        H,
    )
    .unwrap();
    let x2 = x.clone();
    let err_gain = grad_check(
        move |g, gv| {
            let xv = g.constant(x2.clone());
            let bv = g.constant(bias.clone());
            let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS)?;
            weighted_sum(g, y, 7)
        },
        &gain,
        H,
    )
    .unwrap();
    assert!(err_x < 1e-4 && err_gain < 1e-4, "{err_x} {err_gain}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let v = 7;
    let logits = g.constant(Tensor::full(&[3, v], 0.25));
    let l = g.cross_entropy(logits, &[Some(0), Some(3), None]).unwrap();
    assert!((g.value(l).item() - (v as f64).ln()).abs() < 1e-12);

    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 50.0] {
        let t = g.constant(Tensor::from_rows(&[&[margin, 0.0, 0.0]]).unwrap());
        let l = g.cross_entropy(t, &[Some(0)]).unwrap();
        let val = g.value(l).item();
        assert!(val < last);
        last = val;
    }
    assert!(last < 1e-20);

    let raw = random(&[2, 3], 8);
    let t = g.constant(raw.clone());
    let l = g.cross_entropy(t, &[Some(2), Some(0)]).unwrap();
    let direct: f64 = [(0usize, 2usize), (1, 0)]
        .iter()
        .map(|&(r, c)| {
            let row = raw.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[c].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    assert!((g.value(l).item() - direct).abs() < 1e-10);

    assert_eq!(g.cross_entropy(t, &[None, None]), Err(Error::EmptyLoss));
    assert!(matches!(g.cross_entropy(t, &[Some(3), None]), Err(Error::ClassOutOfRange { .. })));
}

#[test]
fn cross_entropy_gradient() {
    let x = random(&[4, 5], 10);
    let err = grad_check(|g, x| g.cross_entropy(x, &[Some(1), None, Some(4), Some(0)]), &x, H).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cosine_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![2.0, 1.0]));
    let c = g.cosine(a, b).unwrap();
    assert!((g.value(c).item() - 0.8).abs() < 1e-15);
    let c = g.cosine(a, a).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-15);
    let o = g.constant(Tensor::vector(vec![-2.0, 1.0]));
    let c = g.cosine(a, o).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(g.cosine(a, z), Err(Error::DegenerateVector(_))));
}

#[test]
fn cosine_gradient_both_arguments() {
    let a = random(&[3, 4], 11);
    let b = random(&[3, 4], 12);
    let b2 = b.clone();
    let ea = grad_check(
        move |g, x| {
            let bv = g.constant(b2.clone());
            let c = g.cosine_rows(x, bv)?;
            weighted_sum(g, c, 3)
        },
        &a,
        H,
    )
    .unwrap();
    let eb = grad_check(
        move |g, x| {
            let av = g.constant(a.clone());
            let c = g.cosine_rows(av, x)?;
            weighted_sum(g, c, 3)
        },
        &b,
        H,
    )
    .unwrap();
    assert!(ea < 1e-4 && eb < 1e-4, "{ea} {eb}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(random(&[2, 3], 13), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    // Repeated backward accumulates.
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn grad_check_trivial_cases() {
    let x = random(&[2, 2], 14);
    let err = grad_check(|g, x| Ok(g.sum(x)), &x, H).unwrap();
    assert!(err < 1e-9);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    let analytic = g.grad(x).unwrap()[0];
    let numeric = (3.00001f64.powi(2) - 2.99999f64.powi(2)) / 2e-5;
    assert!((analytic - 6.0).abs() < 1e-7 && (numeric - 6.0).abs() < 1e-7);
}

#[test]
fn reused_tensor_accumulates_both_paths() {
    // f(x) = sum(gelu(x) * x) + sum(x·xᵀ): x participates in several branches.
    let x = random(&[3, 3], 15);
    let err = grad_check(
        |g, x| {
            let a = g.gelu(x);
            let b = g.mul(a, x)?;
            let t = g.transpose(x)?;
            let c = g.matmul(x, t)?;
            let s1 = g.sum(b);
            let s2 = g.sum(c);
            g.add(s1, s2)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn structural_ops_gradients() {
    let x = random(&[4, 6], 16);
    let err = grad_check(
        |g, x| {
            let a = g.slice_cols(x, 0, 3)?;
            let b = g.slice_cols(x, 3, 3)?;
            let c = g.concat_cols(&[b, a])?;
            let r = g.slice_rows(c, 1, 2)?;
            let s = g.concat_rows(&[r, c])?;
            let table = g.gather_rows(x, &[3, 0, 3])?;
            let bias = g.slice_rows(x, 2, 1)?;
            let bias = g.transpose(bias)?;
            let bias = g.slice_rows(bias, 0, 6)?;
            let t = g.transpose(bias)?;
            let u = g.add_row(table, t)?;
            let m1 = weighted_sum(g, s, 1)?;
            let m2 = weighted_sum(g, u, 2)?;
            let m2 = g.scale(m2, 0.5);
            let m2 = g.add_scalar(m2, 1.0);
            let tot = g.add(m1, m2)?;
            let mean_term = g.mean(x);
            g.add(tot, mean_term)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn max_rel_error_uses_floor() {
    let err = max_rel_error(&[0.0], &[1.0], 1e-5, |_| 5.0);
    assert_eq!(err, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn primitives_pass_grad_check(seed in 0u64..1000) {
        let x = random(&[3, 4], seed);
        let checks: [fn(&mut Graph, tamt_core::Var) -> tamt_core::Result<tamt_core::Var>; 3] = [
            |g, x| { let y = g.softmax_rows(x)?; weighted_sum(g, y, 21) },
            |g, x| { let y = g.gelu(x); weighted_sum(g, y, 22) },
            |g, x| { let t = g.transpose(x)?; let y = g.matmul(x, t)?; weighted_sum(g, y, 23) },
        ];
        for f in checks {
            let err = grad_check(f, &x, H).unwrap();
            prop_assert!(err < 1e-4, "err {}", err);
        }
    }
}
