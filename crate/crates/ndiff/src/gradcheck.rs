//! Central finite-difference verification of analytic gradients.

use crate::error::{NdError, Result};
use crate::graph::{Graph, GraphOptions, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Precision, Tensor};

/// Worst entry found by [`finite_diff_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn eval(store: &ParamStore, seed: u64, f: &impl Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(
        store,
        GraphOptions {
            precision: Precision::F64,
            training: true,
            seed,
        },
    );
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Returns the maximum over every entry of the selected parameters of
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
///
/// Graphs are built in 64-bit mode with training enabled, and two forward
/// passes with different dropout seeds must agree bit for bit; otherwise the
/// check fails with [`NdError::NonDeterministic`].
pub fn finite_diff_check(
    store: &ParamStore,
    params: &[ParamId],
    eps: f64,
    f: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<f64> {
    finite_diff_report(store, params, eps, f).map(|r| r.max_relative_error)
}

pub fn finite_diff_report(
    store: &ParamStore,
    params: &[ParamId],
    eps: f64,
    f: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(NdError::Contract(format!("eps must be positive, got {eps}")));
    }
    let first = eval(store, 1, &f)?;
    let second = eval(store, 2, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(NdError::NonDeterministic { first, second });
    }

    let mut g = Graph::new(
        store,
        GraphOptions {
            precision: Precision::F64,
            training: true,
            seed: 1,
        },
    );
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for &id in params {
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work, 1, &f)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work, 1, &f)?;
            work.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let err = (analytic - numeric).abs() / denom;
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// One row of [`primitive_suite`].
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub kind: &'static str,
    pub max_relative_error: f64,
}

fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            if away_from_zero {
                x.signum() * (0.2 + x.abs())
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Finite-difference check of every primitive kind on small random tensors.
///
/// Each primitive's output is contracted with a fixed random weight tensor so
/// that every output entry contributes to the scalar loss.
pub fn primitive_suite(seed: u64, eps: f64) -> Result<Vec<SuiteResult>> {
    use crate::graph::Padding;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[3, 4], true))?;
    let b = store.add("b", rand_tensor(&mut rng, &[4, 5], true))?;
    let c = store.add("c", rand_tensor(&mut rng, &[3, 4], true))?;
    let bias = store.add("bias", rand_tensor(&mut rng, &[4], true))?;
    let gain = store.add("gain", rand_tensor(&mut rng, &[4], true))?;
    let table = store.add("table", rand_tensor(&mut rng, &[5, 3], false))?;
    let img = store.add("img", rand_tensor(&mut rng, &[2, 5, 4], false))?;
    let kern = store.add("kern", rand_tensor(&mut rng, &[3, 2, 3, 3], false))?;
    let kbias = store.add("kbias", rand_tensor(&mut rng, &[3], false))?;
    let probe = |shape: &[usize], salt: usize| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i + salt) as f64) * 0.731).sin() + 0.1)
            .collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    };
    // Contract `y` with a fixed probe tensor to get a scalar.
    fn contract(g: &mut Graph, y: Var, probe: Tensor) -> Result<Var> {
        let w = g.constant(probe);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    type Case<'a> = (&'static str, Vec<ParamId>, Box<dyn Fn(&mut Graph) -> Result<Var> + 'a>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a, b], Box::new(|g: &mut Graph| {
            let (x, y) = (g.param(a), g.param(b));
            let z = g.matmul(x, y)?;
            contract(g, z, probe(&[3, 5], 0))
        })),
        ("add", vec![a, c, bias], Box::new(|g: &mut Graph| {
            let (x, y, z) = (g.param(a), g.param(c), g.param(bias));
            let s = g.add(x, y)?;
            let s = g.add(s, z)?;
            contract(g, s, probe(&[3, 4], 1))
        })),
        ("mul", vec![a, c, bias], Box::new(|g: &mut Graph| {
            let (x, y, z) = (g.param(a), g.param(c), g.param(bias));
            let s = g.mul(x, y)?;
            let s = g.mul(s, z)?;
            contract(g, s, probe(&[3, 4], 2))
        })),
        ("sub", vec![a, bias], Box::new(|g: &mut Graph| {
            let (x, z) = (g.param(a), g.param(bias));
            let s = g.sub(x, z)?;
            let s = g.scale(s, 1.7)?;
            contract(g, s, probe(&[3, 4], 3))
        })),
        ("relu", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.relu(x)?;
            contract(g, s, probe(&[3, 4], 4))
        })),
        ("tanh", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.tanh(x)?;
            contract(g, s, probe(&[3, 4], 5))
        })),
        ("sigmoid", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.sigmoid(x)?;
            contract(g, s, probe(&[3, 4], 6))
        })),
        ("softplus", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.softplus(x)?;
            contract(g, s, probe(&[3, 4], 7))
        })),
        ("abs", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.abs(x)?;
            contract(g, s, probe(&[3, 4], 8))
        })),
        ("softmax", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.softmax(x)?;
            contract(g, s, probe(&[3, 4], 9))
        })),
        ("masked_softmax", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4).collect();
            let s = g.masked_softmax(x, &mask)?;
            contract(g, s, probe(&[3, 4], 10))
        })),
        ("log_softmax", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.log_softmax(x)?;
            contract(g, s, probe(&[3, 4], 11))
        })),
        ("layer_norm", vec![a, gain, bias], Box::new(|g: &mut Graph| {
            let (x, ga, bi) = (g.param(a), g.param(gain), g.param(bias));
            let s = g.layer_norm(x, ga, bi, 1e-5)?;
            contract(g, s, probe(&[3, 4], 12))
        })),
        ("dropout", vec![a], Box::new(|g: &mut Graph| {
            // A fixed mask keeps the check deterministic.
            let x = g.param(a);
            let mask = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            let s = g.dropout_with_mask(x, mask)?;
            contract(g, s, probe(&[3, 4], 13))
        })),
        ("embedding_lookup", vec![table], Box::new(|g: &mut Graph| {
            let t = g.param(table);
            let s = g.embedding(t, &[4, 0, 4, 2])?;
            contract(g, s, probe(&[4, 3], 14))
        })),
        ("conv2d", vec![img, kern, kbias], Box::new(|g: &mut Graph| {
            let (x, w, bb) = (g.param(img), g.param(kern), g.param(kbias));
            let s = g.conv2d(x, w, Some(bb), (2, 2), Padding::Same)?;
            let s2 = g.conv2d(x, w, None, (1, 1), Padding::Valid)?;
            let l1 = contract(g, s, probe(&[3, 3, 2], 15))?;
            let l2 = contract(g, s2, probe(&[3, 3, 2], 16))?;
            g.add(l1, l2)
        })),
        ("reshape", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.reshape(x, &[2, 6])?;
            contract(g, s, probe(&[2, 6], 17))
        })),
        ("concat", vec![a, c], Box::new(|g: &mut Graph| {
            let (x, y) = (g.param(a), g.param(c));
            let s = g.concat(&[x, y, x], 1)?;
            contract(g, s, probe(&[3, 12], 18))
        })),
        ("slice", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let s = g.slice(x, 1, 1, 2)?;
            contract(g, s, probe(&[3, 2], 19))
        })),
        ("transpose", vec![img], Box::new(|g: &mut Graph| {
            let x = g.param(img);
            let s = g.transpose(x, 0, 2)?;
            contract(g, s, probe(&[4, 5, 2], 20))
        })),
        ("mean", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let sq = g.mul(x, x)?;
            g.mean(sq)
        })),
        ("sum", vec![a], Box::new(|g: &mut Graph| {
            let x = g.param(a);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })),
    ];

    cases
        .into_iter()
        .map(|(kind, params, f)| {
            finite_diff_check(&store, &params, eps, f).map(|e| SuiteResult {
                kind,
                max_relative_error: e,
            })
        })
        .collect()
}
