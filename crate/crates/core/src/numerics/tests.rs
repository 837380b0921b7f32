use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check(f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>, inputs: &[Tensor<f64>]) {
    let report = gradcheck(f, inputs, GradcheckOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn stop_gradient_forward_is_identity() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
    assert_eq!(stop_gradient(x).value().data(), &[1.5, -2.0]);
}

#[test]
fn stop_gradient_treats_argument_as_constant() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let loss = stop_gradient(x).mul(x).sum();
    let grads = g.backward(loss);
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);

    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let loss = stop_gradient(x).sum();
    let grads = g.backward(loss);
    assert_eq!(grads.get_or_zero(x).data(), &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn stop_gradient_composes(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::<f64>::new();
        let a = g.leaf(rand_tensor(&mut rng, &[rows, cols]));
        let b = g.leaf(rand_tensor(&mut rng, &[rows, cols]));
        let loss = stop_gradient(a).add(b).sum();
        let grads = g.backward(loss);
        prop_assert!(grads.get_or_zero(a).data().iter().all(|&x| x == 0.0));
        prop_assert!(grads.get_or_zero(b).data().iter().all(|&x| x == 1.0));
    }
}

#[test]
fn finite_difference_of_square() {
    let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
    let d = finite_difference_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
    assert!((d.data()[0] - 6.0).abs() < 1e-8);
}

#[test]
fn finite_difference_of_softmax_component() {
    // d/dx softmax(x)_0 at 0 = (p0(1-p0), -p0 p1) = (0.25, -0.25)
    let f = |t: &Tensor<f64>| {
        let e: Vec<f64> = t.data().iter().map(|x| x.exp()).collect();
        e[0] / e.iter().sum::<f64>()
    };
    let d = finite_difference_gradient(f, &Tensor::zeros(&[2]), 1e-5).unwrap();
    assert!((d.data()[0] - 0.25).abs() < 1e-9);
    assert!((d.data()[1] + 0.25).abs() < 1e-9);
}

#[test]
fn finite_difference_of_constant() {
    let d = finite_difference_gradient(|_| 4.0, &Tensor::zeros(&[3]), 1e-5).unwrap();
    assert_eq!(d.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn finite_difference_rejects_non_finite() {
    let r = finite_difference_gradient(|t| t.data()[0].ln(), &Tensor::zeros(&[1]), 1e-5);
    assert!(r.is_err());
}

struct WrongSquare;

impl Adjoint<f64> for WrongSquare {
    fn backward(&self, inputs: &[&Tensor<f64>], _out: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Tensor<f64>> {
        // true adjoint is 2x·g; this one forgets the factor 2
        vec![Tensor::new(
            inputs[0].shape(),
            inputs[0].data().iter().zip(grad.data()).map(|(x, g)| x * g).collect(),
        )
        .unwrap()]
    }
}

#[test]
fn gradcheck_catches_wrong_adjoint() {
    let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
    let report = gradcheck(
        |g, v| {
            let sq = v[0].value().map(|x| x * x);
            g.custom(&[v[0]], sq, Rc::new(WrongSquare)).sum()
        },
        &[x],
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed);
    let worst = report.worst.unwrap();
    assert!((worst.numeric - 2.0 * worst.analytic).abs() < 1e-6);
}

#[test]
fn elementwise_primitives_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let pos = a.map(|x| x.abs() + 0.5);
    check(|_, v| v[0].add(v[1]).mul(v[0]).sum(), &[a.clone(), b.clone()]);
    check(|_, v| v[0].sub(v[1]).square().sum(), &[a.clone(), b.clone()]);
    check(|_, v| v[0].tanh().mul(v[1].sigmoid()).sum(), &[a.clone(), b.clone()]);
    check(|_, v| v[0].exp().scale(0.3).offset(1.0).ln().sum(), std::slice::from_ref(&a));
    check(|_, v| v[0].ln().mean(), &[pos]);
    // keep relu inputs away from the kink
    let r = a.map(|x| if x.abs() < 0.1 { 0.3 } else { x });
    check(|_, v| v[0].relu().square().sum(), &[r]);
    let mask = Rc::new((0..12).map(|i| (i % 3) as f64).collect::<Vec<_>>());
    check(move |_, v| v[0].mul_const(mask.clone()).square().sum(), &[a]);
}

#[test]
fn matmul_variants_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    fn weighted<'g>(g: &'g Graph<f64>, v: &[Var<'g, f64>], w: &Tensor<f64>, ta: bool, tb: bool) -> Var<'g, f64> {
        v[0].matmul_t(v[1], ta, tb).mul(g.constant(w.clone())).sum()
    }
    check(|g, v| weighted(g, v, &w, false, false), &[a.clone(), b.clone()]);
    let at = rand_tensor(&mut rng, &[4, 3]);
    let bt = rand_tensor(&mut rng, &[5, 4]);
    check(|g, v| weighted(g, v, &w, true, false), &[at.clone(), b.clone()]);
    check(|g, v| weighted(g, v, &w, false, true), &[a.clone(), bt.clone()]);
    check(|g, v| weighted(g, v, &w, true, true), &[at, bt]);

    let a3 = rand_tensor(&mut rng, &[2, 3, 4]);
    let b3 = rand_tensor(&mut rng, &[2, 5, 4]);
    let w3 = rand_tensor(&mut rng, &[2, 3, 5]);
    check(move |g, v| v[0].matmul_t(v[1], false, true).mul(g.constant(w3.clone())).sum(), &[a3, b3]);
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let g = Graph::new();
    let c = g.constant(a.clone()).matmul(g.constant(b.clone())).value();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
            assert!((c.data()[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn reductions_and_softmax_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let w2 = w.clone();
    check(move |g, v| v[0].log_softmax().mul(g.constant(w.clone())).sum(), std::slice::from_ref(&a));
    check(move |g, v| v[0].softmax().mul(g.constant(w2.clone())).sum(), std::slice::from_ref(&a));
    check(|_, v| v[0].sum_last().square().sum(), std::slice::from_ref(&a));
    let idx = Rc::new(vec![4, 0, 2]);
    check(move |_, v| v[0].log_softmax().pick_last(idx.clone()).sum(), &[a]);
}

#[test]
fn masked_softmax_zeroes_masked_and_empty_rows() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let mask = [true, false, false, false];
    let y = x.masked_softmax(Some(&mask)).value();
    assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3, 3]);
    let w = rand_tensor(&mut rng, &[2, 3, 3]);
    let m: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    check(move |g, v| v[0].masked_softmax(Some(&m)).mul(g.constant(w.clone())).sum(), &[a]);
}

#[test]
fn shape_primitives_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4]);
    let w = rand_tensor(&mut rng, &[4, 3, 2]);
    check(move |g, v| v[0].permute(&[2, 1, 0]).mul(g.constant(w.clone())).sum(), std::slice::from_ref(&a));
    let w = rand_tensor(&mut rng, &[2, 5, 4]);
    check(move |g, v| g.concat(&[v[0], v[1]], 1).mul(g.constant(w.clone())).sum(), &[a.clone(), b]);
    let w = rand_tensor(&mut rng, &[2, 2, 4]);
    check(move |g, v| v[0].narrow(1, 1, 2).mul(g.constant(w.clone())).sum(), std::slice::from_ref(&a));
    let w = rand_tensor(&mut rng, &[4, 6]);
    check(move |g, v| v[0].reshape(&[4, 6]).mul(g.constant(w.clone())).sum(), &[a]);
    let t = rand_tensor(&mut rng, &[5, 3]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let idx = Rc::new(vec![4, 1, 1, 0]);
    check(move |g, v| v[0].gather_rows(idx.clone()).mul(g.constant(w.clone())).sum(), &[t]);
}

#[test]
fn permute_matches_index_definition() {
    let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let g = Graph::new();
    let p = g.constant(t).permute(&[1, 2, 0]).value();
    assert_eq!(p.shape(), &[3, 4, 2]);
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                assert_eq!(p.data()[(j * 4 + k) * 2 + i], (i * 12 + j * 4 + k) as f64);
            }
        }
    }
}

#[test]
fn layer_norm_and_bias_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    check(
        move |g, v| v[0].layer_norm(v[1], v[2], 1e-5).mul(g.constant(w.clone())).sum(),
        &[x.clone(), gamma, beta.clone()],
    );
    check(|_, v| v[0].add_bias(v[1]).square().sum(), &[x, beta]);
}

#[test]
fn rel_shift_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (r, min_rel) in [(4usize, -3isize), (4, 0), (7, -3)] {
        let a = rand_tensor(&mut rng, &[2, 4, r]);
        let w = rand_tensor(&mut rng, &[2, 4, 4]);
        check(move |g, v| v[0].rel_shift(4, min_rel).mul(g.constant(w.clone())).sum(), &[a]);
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
    let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store);
    for _ in 0..300 {
        let g = Graph::new();
        let p = store.bind(&g);
        let loss = p.get(id).square().sum();
        let grads = p.collect(&g.backward(loss));
        drop(p);
        drop(g);
        opt.update(&mut store, &grads);
    }
    assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
}
