use ndiff::{
    finite_diff_check, primitive_suite, Graph, GraphOptions, NdError, ParamStore, Precision,
    Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..3 {
        for r in primitive_suite(seed, 1e-5).unwrap() {
            assert!(
                r.max_relative_error < 1e-4,
                "{} failed with relative error {}",
                r.kind,
                r.max_relative_error
            );
        }
    }
}

#[test]
fn linear_function_is_exact() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![0.3, -0.7, 1.1, 2.0])).unwrap();
    let err = finite_diff_check(&store, &[p], 1e-5, |g| {
        let v = g.param(p);
        g.sum(v)
    })
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn softmax_cross_entropy() {
    let mut store = ParamStore::new();
    let p = store.add("logits", Tensor::vector(vec![0.2, -1.3, 0.8, 0.05])).unwrap();
    let err = finite_diff_check(&store, &[p], 1e-5, |g| {
        let v = g.param(p);
        let ls = g.log_softmax(v)?;
        let onehot = g.constant(Tensor::vector(vec![0., 0., 1., 0.]));
        let picked = g.mul(ls, onehot)?;
        let s = g.sum(picked)?;
        g.scale(s, -1.0)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn three_layer_tanh_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let dims = [5usize, 8, 6, 1];
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let wi = store.add(format!("w{i}"), random(&mut rng, &[w[0], w[1]], 0.8)).unwrap();
        let bi = store.add(format!("b{i}"), random(&mut rng, &[w[1]], 0.1)).unwrap();
        layers.push((wi, bi));
    }
    let x = random(&mut rng, &[4, 5], 1.0);
    let ids: Vec<_> = store.ids().collect();
    let err = finite_diff_check(&store, &ids, 1e-5, |g| {
        let mut h = g.constant(x.clone());
        for (w, b) in &layers {
            let (w, b) = (g.param(*w), g.param(*b));
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = g.tanh(z)?;
        }
        g.sum(h)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dropout_makes_check_refuse() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::full(&[64], 1.0)).unwrap();
    let err = finite_diff_check(&store, &[p], 1e-5, |g| {
        let v = g.param(p);
        let d = g.dropout(v, 0.5, false)?;
        g.sum(d)
    })
    .unwrap_err();
    assert!(matches!(err, NdError::NonDeterministic { .. }));
}

#[test]
fn identical_seeds_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[6, 6], 1.0)).unwrap();
    let run = || {
        let mut g = Graph::new(
            &store,
            GraphOptions {
                precision: Precision::F32,
                training: true,
                seed: 99,
            },
        );
        let v = g.param(w);
        let d = g.dropout(v, 0.3, false).unwrap();
        let s = g.softmax(d).unwrap();
        let m = g.matmul(s, v).unwrap();
        let loss = g.mean(m).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item().to_bits(), grads)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// backward(l1 + l2) == backward(l1) + backward(l2)
    #[test]
    fn backward_is_linear(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[3, 4], 1.0)).unwrap();
        let b = store.add("b", random(&mut rng, &[4, 2], 1.0)).unwrap();
        let opts = GraphOptions { precision: Precision::F64, ..Default::default() };
        let l1 = |g: &mut Graph| {
            let (x, y) = (g.param(a), g.param(b));
            let z = g.matmul(x, y).unwrap();
            let z = g.tanh(z).unwrap();
            g.sum(z).unwrap()
        };
        let l2 = |g: &mut Graph| {
            let x = g.param(a);
            let s = g.softmax(x).unwrap();
            let s = g.mul(s, x).unwrap();
            g.mean(s).unwrap()
        };
        let mut g = Graph::new(&store, opts);
        let (x1, x2) = (l1(&mut g), l2(&mut g));
        let total = g.add(x1, x2).unwrap();
        let joint = g.backward(total).unwrap();
        let mut g1 = Graph::new(&store, opts);
        let v1 = l1(&mut g1);
        let mut g2 = Graph::new(&store, opts);
        let v2 = l2(&mut g2);
        let summed = g1.backward(v1).unwrap().merged(&g2.backward(v2).unwrap());
        for id in [a, b] {
            let (j, s) = (joint.get(id).unwrap(), summed.get(id).unwrap());
            prop_assert!(j.max_abs_diff(s) < 1e-12);
        }
    }
}

#[test]
fn backward_ignores_nodes_recorded_after_the_loss() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![2.0, -1.0])).unwrap();
    let late = store.add("late", Tensor::vector(vec![5.0])).unwrap();
    let mut g = Graph::new(&store, GraphOptions::default());
    let wv = g.param(w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq).unwrap();
    let lv = g.param(late);
    let _unused = g.scale(lv, 3.0).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[4.0, -2.0]);
    assert!(grads.get(late).is_none());
}
