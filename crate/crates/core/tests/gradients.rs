#![allow(clippy::needless_range_loop)]

use adapmtl::model::HeadSpec;
use adapmtl::pruner::{PrunerKind, PrunerState};
use adapmtl::tensor::sigmoid;
use adapmtl::trainer::{batch_gradients, batch_loss};
use adapmtl::{LossKind, ModelSpec, MultitaskModel, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL * analytic.abs().max(numeric.abs()).max(1e-3)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Checks d sum(f(a, b)) / da against central differences, skipping
/// entries within `kink` of a non-differentiable point given by `near_kink`.
fn check_op(
    name: &str,
    rng: &mut ChaCha8Rng,
    binary: bool,
    f: impl Fn(&mut Tape, adapmtl::tensor::TensorId, adapmtl::tensor::TensorId) -> adapmtl::tensor::TensorId,
    near_kink: impl Fn(f64) -> bool,
) {
    for trial in 0..100 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = random_tensor(rng, &[r, c]);
        let b = random_tensor(rng, &[r, c]);
        let eval = |a: &Tensor| {
            let mut tape = Tape::new();
            let ai = tape.param(a.clone());
            let bi = tape.param(b.clone());
            let out = f(&mut tape, ai, bi);
            let s = tape.sum(out).unwrap();
            tape.get(s).item()
        };
        let mut tape = Tape::new();
        let ai = tape.param(a.clone());
        let bi = tape.param(b.clone());
        let out = f(&mut tape, ai, bi);
        let s = tape.sum(out).unwrap();
        tape.backward(s).unwrap();
        let ga = tape.grad(ai).unwrap().to_vec();
        for i in 0..a.len() {
            if near_kink(a.values()[i]) {
                continue;
            }
            let mut p = a.clone();
            p.values_mut()[i] += H;
            let mut m = a.clone();
            m.values_mut()[i] -= H;
            let num = (eval(&p) - eval(&m)) / (2.0 * H);
            assert!(close(ga[i], num), "{name} trial {trial} entry {i}: {} vs {num}", ga[i]);
        }
        if binary {
            let gb = tape.grad(bi).unwrap();
            assert_eq!(gb.len(), b.len());
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let never = |_: f64| false;
    check_op("add", &mut rng, true, |t, a, b| t.add(a, b).unwrap(), never);
    check_op("sub", &mut rng, true, |t, a, b| t.sub(a, b).unwrap(), never);
    check_op("mul", &mut rng, true, |t, a, b| t.mul(a, b).unwrap(), never);
    check_op("scale", &mut rng, false, |t, a, _| t.scale(a, -1.7).unwrap(), never);
    check_op("sigmoid", &mut rng, false, |t, a, _| t.sigmoid(a).unwrap(), never);
    check_op(
        "relu",
        &mut rng,
        false,
        |t, a, _| t.relu(a).unwrap(),
        |x| x.abs() < 1e-4,
    );
    // square through mul so the sum is not linear in a
    check_op(
        "mul-self",
        &mut rng,
        false,
        |t, a, _| t.mul(a, a).unwrap(),
        never,
    );
}

#[test]
fn matmul_and_bias_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (m, k, n) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let bias = random_tensor(&mut rng, &[n]);
        let weights = random_tensor(&mut rng, &[m, n]);
        let loss = |a: &Tensor, b: &Tensor, bias: &Tensor| {
            let mut tape = Tape::new();
            let (ai, bi, ci) = (
                tape.param(a.clone()),
                tape.param(b.clone()),
                tape.param(bias.clone()),
            );
            let w = tape.constant(weights.clone());
            let y = tape.matmul(ai, bi).unwrap();
            let y = tape.add_bias(y, ci).unwrap();
            let y = tape.mul(y, w).unwrap();
            let s = tape.sum(y).unwrap();
            (tape, ai, bi, ci, s)
        };
        let (mut tape, ai, bi, ci, s) = loss(&a, &b, &bias);
        tape.backward(s).unwrap();
        for (which, id) in [(0, ai), (1, bi), (2, ci)] {
            let g = tape.grad(id).unwrap().to_vec();
            for i in 0..g.len() {
                let bump = |d: f64| {
                    let mut ts = [a.clone(), b.clone(), bias.clone()];
                    ts[which].values_mut()[i] += d;
                    let (t, .., s) = loss(&ts[0], &ts[1], &ts[2]);
                    t.get(s).item()
                };
                let num = (bump(H) - bump(-H)) / (2.0 * H);
                assert!(close(g[i], num), "tensor {which} entry {i}: {} vs {num}", g[i]);
            }
        }
    }
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [
        LossKind::MeanSquaredError,
        LossKind::CrossEntropy,
        LossKind::NegativeCosine,
        LossKind::L1,
    ] {
        for _ in 0..100 {
            let (r, c) = (rng.random_range(1..=8), rng.random_range(2..=8));
            let pred = random_tensor(&mut rng, &[r, c]);
            let target = match kind {
                LossKind::CrossEntropy => Tensor::new(
                    vec![r],
                    (0..r).map(|_| rng.random_range(0..c) as f64).collect(),
                )
                .unwrap(),
                _ => random_tensor(&mut rng, &[r, c]),
            };
            let value = |p: &Tensor| adapmtl::tensor::loss_value(kind, p, &target).unwrap();
            let mut tape = Tape::new();
            let pi = tape.param(pred.clone());
            let ti = tape.constant(target.clone());
            let l = tape.loss(kind, pi, ti).unwrap();
            assert!((tape.get(l).item() - value(&pred)).abs() < 1e-12);
            tape.backward(l).unwrap();
            let g = tape.grad(pi).unwrap().to_vec();
            for i in 0..pred.len() {
                if kind == LossKind::L1 && (pred.values()[i] - target.values()[i]).abs() < 1e-4 {
                    continue;
                }
                let mut p = pred.clone();
                p.values_mut()[i] += H;
                let mut m = pred.clone();
                m.values_mut()[i] -= H;
                let num = (value(&p) - value(&m)) / (2.0 * H);
                assert!(close(g[i], num), "{kind} entry {i}: {} vs {num}", g[i]);
            }
        }
    }
}

#[test]
fn soft_threshold_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let w = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let coef = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let theta0: f64 = rng.random_range(-3.0..0.0);
        let alpha = sigmoid(theta0);
        if w.values().iter().any(|x| (x.abs() - alpha).abs() < 1e-4) {
            continue;
        }
        let eval = |w: &Tensor, theta: f64| {
            let mut tape = Tape::new();
            let wi = tape.param(w.clone());
            let ti = tape.param(Tensor::scalar(theta));
            let ci = tape.constant(coef.clone());
            let s = tape.soft_threshold(wi, ti).unwrap();
            let s = tape.mul(s, ci).unwrap();
            let out = tape.sum(s).unwrap();
            (tape, wi, ti, out)
        };
        let (mut tape, wi, ti, out) = eval(&w, theta0);
        tape.backward(out).unwrap();
        let gw = tape.grad(wi).unwrap().to_vec();
        let gt = tape.grad(ti).unwrap()[0];
        let value = |w: &Tensor, th: f64| {
            let (t, .., o) = eval(w, th);
            t.get(o).item()
        };
        for i in 0..n {
            let mut p = w.clone();
            p.values_mut()[i] += H;
            let mut m = w.clone();
            m.values_mut()[i] -= H;
            let num = (value(&p, theta0) - value(&m, theta0)) / (2.0 * H);
            assert!(close(gw[i], num), "w[{i}]: {} vs {num}", gw[i]);
        }
        let num = (value(&w, theta0 + H) - value(&w, theta0 - H)) / (2.0 * H);
        assert!(close(gt, num), "theta: {gt} vs {num}");
    }
}

/// One input, two-unit backbone, two scalar heads: 10 parameters.
fn tiny_model(seed: u64) -> MultitaskModel {
    let spec = ModelSpec {
        backbone: vec![1, 2],
        heads: vec![
            HeadSpec {
                name: "a".into(),
                widths: vec![2, 1],
                loss: LossKind::MeanSquaredError,
            },
            HeadSpec {
                name: "b".into(),
                widths: vec![2, 1],
                loss: LossKind::MeanSquaredError,
            },
        ],
    };
    MultitaskModel::build(&spec, seed).unwrap()
}

#[test]
fn model_gradients_wrt_weights_and_thetas() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for trial in 0..20 {
        let mut model = tiny_model(trial);
        assert_eq!(model.total_params(), 10);
        for comp in model.components_mut() {
            for layer in &mut comp.layers {
                for b in layer.bias.values_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
        }
        let mut pruner = PrunerState::new(PrunerKind::Adapmtl, &model, -20.0, 0.8);
        for i in 0..pruner.thetas.len() {
            pruner.thetas[i] = rng.random_range(-4.0..-1.0);
            pruner.alphas[i] = sigmoid(pruner.thetas[i]);
        }
        let x = random_tensor(&mut rng, &[5, 1]);
        let targets = vec![random_tensor(&mut rng, &[5, 1]), random_tensor(&mut rng, &[5, 1])];
        let betas = [1.3, 0.7];
        let g = batch_gradients(&model, &pruner, &x, &targets, &betas).unwrap();
        let raw = g.raw_weight_grads();
        for c in 0..model.num_components() {
            let alpha = pruner.alpha(c);
            for l in 0..model.component(c).layers.len() {
                let n = model.component(c).layers[l].weight.len();
                for i in 0..n {
                    let w = model.component(c).layers[l].weight.values()[i];
                    if (w.abs() - alpha).abs() < 1e-4 {
                        continue;
                    }
                    let bump = |d: f64| {
                        let mut m = model.clone();
                        m.component_mut(c).layers[l].weight.values_mut()[i] += d;
                        batch_loss(&m, &pruner, &x, &targets, &betas).unwrap()
                    };
                    let num = (bump(H) - bump(-H)) / (2.0 * H);
                    assert!(close(raw[c][l][i], num), "trial {trial} c{c} l{l} w{i}: {} vs {num}", raw[c][l][i]);
                    checked += 1;
                }
            }
        }
        let tg = g.thetas.expect("thresholds active");
        for k in 0..pruner.thetas.len() {
            let bump = |d: f64| {
                let mut p = pruner.clone();
                p.thetas[k] += d;
                p.alphas[k] = sigmoid(p.thetas[k]);
                batch_loss(&model, &p, &x, &targets, &betas).unwrap()
            };
            let num = (bump(H) - bump(-H)) / (2.0 * H);
            assert!(close(tg[k], num), "trial {trial} theta {k}: {} vs {num}", tg[k]);
        }
    }
    assert!(checked >= 20 * 6 * 9 / 10);
}

#[test]
fn shared_theta_gradient_sums_over_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_model(3);
    let mut pruner = PrunerState::new(PrunerKind::SharedThreshold, &model, -2.0, 0.8);
    assert_eq!(pruner.thetas.len(), 1);
    pruner.alphas[0] = sigmoid(pruner.thetas[0]);
    let x = random_tensor(&mut rng, &[4, 1]);
    let targets = vec![random_tensor(&mut rng, &[4, 1]), random_tensor(&mut rng, &[4, 1])];
    let g = batch_gradients(&model, &pruner, &x, &targets, &[1.0, 1.0]).unwrap();
    let bump = |d: f64| {
        let mut p = pruner.clone();
        p.thetas[0] += d;
        p.alphas[0] = sigmoid(p.thetas[0]);
        batch_loss(&model, &p, &x, &targets, &[1.0, 1.0]).unwrap()
    };
    let num = (bump(H) - bump(-H)) / (2.0 * H);
    assert!(close(g.thetas.unwrap()[0], num));
}
