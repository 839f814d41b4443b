//! Primitive forward passes against brute-force oracles, and every adjoint
//! against central finite differences (f64).

use ceph_landmark::autodiff::{Graph, Var};
use ceph_landmark::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct 6-nested-loop cross-correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b[o];
                for c in 0..ci {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.at(&[c, iy as usize, ix as usize]) * k.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[o, y, xx], s);
            }
        }
    }
    out
}

/// Checks d(sum(weights * f(inputs)))/d(inputs) against central differences.
fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let y = build(&mut g, &vars);
        g.value(y).len()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |ins: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| g.leaf(&t.clone().with_requires_grad(want_grad)))
            .collect();
        let y = build(&mut g, &vars);
        let zeros = vec![0.0; weights.len()];
        let z = g.affine(y, &weights, &zeros).unwrap();
        let l = g.sum(z).unwrap();
        let v = g.value(l).data()[0];
        if !want_grad {
            return (v, vec![]);
        }
        g.backward(l).unwrap();
        (v, vars.iter().map(|&x| g.grad(x).unwrap().to_vec()).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let h = 1e-5;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= h;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic[ti][i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "input {ti} element {i}: analytic {a} numeric {num}");
        }
    }
}

#[test]
fn conv2d_trivial_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let k = g.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
    let b = g.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = g.conv2d(x, k, b, 1, 1).unwrap();
    let out = g.value(y);
    for c in 0..3 {
        assert!(out.channel(c).unwrap().iter().all(|&v| v == [1.0, -2.0, 0.5][c]));
    }

    let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv2d_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.leaf(&x), g.leaf(&k), g.leaf(&b));
        let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
        let oracle = conv_oracle(&x, &k, b.data(), stride, pad);
        assert_eq!(g.value(y).shape(), oracle.shape());
        for (a, o) in g.value(y).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    let err = g.conv2d(x, k, b, 1, 0).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(err.to_string().contains("[2, 4, 4]") && err.to_string().contains("[3, 1, 3, 3]"));
    let k = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
    let b1 = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, k, b1, 1, 1).is_err());
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, k, b1, 0, 1).is_err());
}

#[test]
fn conv2d_non_finite_is_numeric_failure() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2, 2], f64::MAX));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], f64::MAX));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, k, b, 1, 0), Err(Error::NumericFailure(_))));
}

#[test]
fn maxpool_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let c = g.constant(Tensor::full(&[2, 4, 4], 3.5));
    let y = g.maxpool2d(c, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.5));
    let odd = g.constant(Tensor::zeros(&[1, 5, 4]));
    assert!(g.maxpool2d(odd, 2).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random(&[4, 8, 8], &mut rng);
    let x = g.constant(t.clone());
    let y = g.maxpool2d(x, 2).unwrap();
    let out = g.value(y);
    for c in 0..4 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(t.at(&[c, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                assert_eq!(out.at(&[c, oy, ox]), m);
            }
        }
    }
}

#[test]
fn maxpool_tie_routes_gradient_to_first() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::full(&[1, 2, 2], 1.0).with_requires_grad(true));
    let y = g.maxpool2d(x, 2).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_cases() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
    let x = g.constant(t.clone());
    let y = g.upsample2d(x, 1).unwrap();
    assert_eq!(g.value(y), &t);
    let v = g.leaf(&Tensor::new(&[1, 1, 1], vec![2.5]).unwrap().with_requires_grad(true));
    let y = g.upsample2d(v, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.5; 4]);

    let x = g.leaf(&t.clone().with_requires_grad(true));
    let y = g.upsample2d(x, 2).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&d| d == 4.0));
}

fn scalar_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[20, 2, 2], 3.0));
    let y = g.channel_softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.05).abs() < 1e-15));

    let x = g.constant(Tensor::new(&[2, 1, 1], vec![0.0, 800.0]).unwrap());
    let y = g.channel_softmax(x).unwrap();
    assert!(g.value(y).data()[0] < 1e-300 && (g.value(y).data()[1] - 1.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::from_fn(&[20, 4, 4], |_| rng.gen_range(-5.0..5.0));
    let x = g.constant(t.clone());
    let y = g.channel_softmax(x).unwrap();
    let out = g.value(y);
    for p in 0..16 {
        let col: Vec<f64> = (0..20).map(|c| t.data()[c * 16 + p]).collect();
        let o = scalar_softmax(&col);
        let s: f64 = (0..20).map(|c| out.data()[c * 16 + p]).sum();
        assert!((s - 1.0).abs() < 1e-6);
        for c in 0..20 {
            assert!((out.data()[c * 16 + p] - o[c]).abs() < 1e-12);
        }
    }

    let one = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(g.channel_softmax(one).is_err());
    let bad = g.constant(Tensor::new(&[2, 1, 1], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(g.channel_softmax(bad), Err(Error::NumericFailure(_))));
}

#[test]
fn backward_basic_and_errors() {
    let t = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0).with_requires_grad(true);
    let mut g = Graph::new();
    let x = g.leaf(&t);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&d| d == 1.0));
    assert!(matches!(g.backward(s), Err(Error::Graph(_))));

    let mut g = Graph::new();
    let x = g.leaf(&t);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (d, v) in g.grad(x).unwrap().iter().zip(t.data()) {
        assert_eq!(*d, 2.0 * v);
    }

    let mut g = Graph::new();
    let x = g.leaf(&t);
    assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    let c = g.constant(t.clone());
    let s = g.sum(c).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Graph(_))));

    let mut other = Graph::<f64>::new();
    let y = other.leaf(&t);
    let s = other.sum(y).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Graph(_))));
}

#[test]
fn two_branch_gradients_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = random(&[1, 4, 4], &mut rng).with_requires_grad(true);
    let branch_a = |g: &mut Graph<f64>, x: Var| {
        let e = g.exp(x).unwrap();
        g.sum(e).unwrap()
    };
    let branch_b = |g: &mut Graph<f64>, x: Var| {
        let u = g.upsample2d(x, 2).unwrap();
        let p = g.maxpool2d(u, 2).unwrap();
        let q = g.mul(p, p).unwrap();
        g.sum(q).unwrap()
    };
    let single = |f: &dyn Fn(&mut Graph<f64>, Var) -> Var| {
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let l = f(&mut g, x);
        g.backward(l).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let ga = single(&branch_a);
    let gb = single(&branch_b);
    let mut g = Graph::new();
    let x = g.leaf(&t);
    let a = branch_a(&mut g, x);
    let b = branch_b(&mut g, x);
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    for ((&s, &a), &b) in g.grad(x).unwrap().iter().zip(&ga).zip(&gb) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    grad_check(&[x.clone(), k.clone(), b.clone()], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap(), 1);
    grad_check(&[x.clone(), k, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 0).unwrap(), 2);

    let p = random(&[3, 4, 4], &mut rng);
    grad_check(&[p.clone()], |g, v| g.maxpool2d(v[0], 2).unwrap(), 3);
    grad_check(&[p.clone()], |g, v| g.upsample2d(v[0], 3).unwrap(), 4);
    grad_check(&[p.clone()], |g, v| g.channel_softmax(v[0]).unwrap(), 5);
    grad_check(&[p.clone()], |g, v| g.relu(v[0]).unwrap(), 6);
    grad_check(&[p.clone()], |g, v| g.crop2d(v[0], 1, 0, 2, 3).unwrap(), 7);
    let q = random(&[2, 4, 4], &mut rng);
    grad_check(&[p.clone(), q], |g, v| g.concat_channels(&[v[0], v[1], v[0]]).unwrap(), 8);
    grad_check(&[p.clone()], |g, v| g.exp(v[0]).unwrap(), 9);
    grad_check(&[p.clone(), p.clone()], |g, v| g.mul(v[0], v[1]).unwrap(), 10);
    grad_check(&[p.clone(), p.clone()], |g, v| g.add(v[0], v[1]).unwrap(), 11);
    grad_check(&[p.clone()], |g, v| g.scale(v[0], -1.7).unwrap(), 12);
    grad_check(&[p.clone()], |g, v| g.clamp(v[0], -0.5, 0.5).unwrap(), 13);
    let pos = Tensor::from_fn(&[3, 4, 4], |i| 0.2 + (i as f64 * 0.37).sin().abs());
    grad_check(&[pos.clone()], |g, v| g.log(v[0]).unwrap(), 14);
    grad_check(&[pos.clone()], |g, v| g.powf(v[0], 2.3).unwrap(), 15);
    let scale: Vec<f64> = (0..48).map(|i| (i as f64).cos()).collect();
    let shift = vec![0.3; 48];
    grad_check(&[pos], move |g, v| g.affine(v[0], &scale, &shift).unwrap(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitives_are_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let run = || {
            let mut g = Graph::<f64>::new();
            let (xv, kv, bv) = (g.leaf(&x), g.leaf(&k), g.leaf(&b));
            let c = g.conv2d(xv, kv, bv, 1, 1).unwrap();
            let p = g.maxpool2d(c, 2).unwrap();
            let u = g.upsample2d(p, 2).unwrap();
            let s = g.channel_softmax(u).unwrap();
            g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn softmax_columns_sum_to_one(seed in 0u64..1000, c in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[c, 3, 3], |_| rng.gen_range(-30.0..30.0));
        let mut g = Graph::<f32>::new();
        let x = g.constant(t.cast());
        let y = g.channel_softmax(x).unwrap();
        for p in 0..9 {
            let s: f32 = (0..c).map(|ch| g.value(y).data()[ch * 9 + p]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
