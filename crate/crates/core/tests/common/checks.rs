//! Tape gradients versus f64 central differences, one routine per operator
//! plus whole-objective sweeps on the miniature network.

use robustfeat::attacks::{self, AttackConfig};
use robustfeat::autodiff::{BatchNormState, NormMode, Padding, Tape, Var};
use robustfeat::data::LabeledBatch;
use robustfeat::nn::Model;
use robustfeat::training::{objective_loss, DistortionReduction, ObjectiveConfig};
use robustfeat::{RngStream, Tensor};

use super::*;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-2;

fn leaf(tape: &mut Tape, t: &Tensor) -> Var {
    tape.leaf(t.clone(), true)
}

/// `Σ r ⊙ y` on the tape, `r` fixed.
fn weighted_sum(tape: &mut Tape, y: Var, r: &Tensor) -> Var {
    let rv = tape.leaf(r.clone(), false);
    let p = tape.mul(y, rv).unwrap();
    tape.sum(p)
}

fn dot(a: &[f64], r: &Tensor) -> f64 {
    a.iter().zip(r.data()).map(|(x, &w)| x * w as f64).sum()
}

fn grads(tape: &Tape, vars: &[Var]) -> Vec<Vec<f32>> {
    vars.iter().map(|&v| tape.grad_data(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()])).collect()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn conv2d(seed: u64, padding: Padding) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let (xs, ks) = ([2, 3, 6, 5], [4, 3, 3, 3]);
    let x = random_tensor(&xs, &mut rng, -1.0, 1.0);
    let k = random_tensor(&ks, &mut rng, -1.0, 1.0);
    let b = random_tensor(&[4], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (leaf(&mut tape, &x), leaf(&mut tape, &k), leaf(&mut tape, &b));
    let y = tape.conv2d(xv, kv, bv, padding).unwrap();
    let r = random_tensor(tape.value(y).shape(), &mut rng, -1.0, 1.0);
    let loss = weighted_sum(&mut tape, y, &r);
    tape.backward(loss).unwrap();
    let analytic = grads(&tape, &[xv, kv, bv]);
    let same = padding == Padding::Same;
    check_gradients(&[to_f64(&x), to_f64(&k), to_f64(&b)], &analytic, &names(&["x", "kernel", "bias"]), H, FLOOR, |p| {
        let (out, _) = super::conv2d(&p[0], xs, &p[1], ks, &p[2], same);
        (dot(&out, &r), Pattern::default())
    })
}

pub fn maxpool(seed: u64) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let xs = [2, 2, 4, 6];
    let x = random_tensor(&xs, &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = leaf(&mut tape, &x);
    let y = tape.maxpool2x2(xv).unwrap();
    let r = random_tensor(tape.value(y).shape(), &mut rng, -1.0, 1.0);
    let loss = weighted_sum(&mut tape, y, &r);
    tape.backward(loss).unwrap();
    check_gradients(&[to_f64(&x)], &grads(&tape, &[xv]), &names(&["x"]), H, FLOOR, |p| {
        let (out, arg, _) = super::maxpool(&p[0], xs);
        (dot(&out, &r), Pattern { relu: Vec::new(), pool: arg })
    })
}

pub fn dense(seed: u64) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let x = random_tensor(&[3, 5], &mut rng, -1.0, 1.0);
    let w = random_tensor(&[5, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[4], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (leaf(&mut tape, &x), leaf(&mut tape, &w), leaf(&mut tape, &b));
    let y = tape.dense(xv, wv, bv).unwrap();
    let r = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let loss = weighted_sum(&mut tape, y, &r);
    tape.backward(loss).unwrap();
    check_gradients(&[to_f64(&x), to_f64(&w), to_f64(&b)], &grads(&tape, &[xv, wv, bv]), &names(&["x", "w", "b"]), H, FLOOR, |p| {
        (dot(&super::dense(&p[0], 3, 5, &p[1], 4, &p[2]), &r), Pattern::default())
    })
}

pub fn relu(seed: u64) -> GradCheck {
    let mut rng = RngStream::new(seed);
    // Keep every input at least 1e-3 away from the kink.
    let data = (0..40)
        .map(|_| {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() < 1e-2 { v.signum() * 0.5 } else { v }
        })
        .collect();
    let x = Tensor::new([4, 10], data).unwrap();
    let mut tape = Tape::new();
    let xv = leaf(&mut tape, &x);
    let y = tape.relu(xv);
    let r = random_tensor(&[4, 10], &mut rng, -1.0, 1.0);
    let loss = weighted_sum(&mut tape, y, &r);
    tape.backward(loss).unwrap();
    check_gradients(&[to_f64(&x)], &grads(&tape, &[xv]), &names(&["x"]), H, FLOOR, |p| {
        let out: Vec<f64> = p[0].iter().map(|v| v.max(0.0)).collect();
        (dot(&out, &r), Pattern { relu: p[0].iter().map(|v| *v > 0.0).collect(), pool: Vec::new() })
    })
}

/// Train-mode batch norm; the loss weights both `γz + β` and `z`.
pub fn batch_norm_train(seed: u64, shape: &[usize]) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let x = random_tensor(shape, &mut rng, -2.0, 2.0);
    let g = random_tensor(&[c], &mut rng, 0.5, 1.5);
    let b = random_tensor(&[c], &mut rng, -0.5, 0.5);
    let state = BatchNormState::new(c);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (leaf(&mut tape, &x), leaf(&mut tape, &g), leaf(&mut tape, &b));
    let out = tape.batch_norm(xv, gv, bv, &state, NormMode::Train, 1e-5).unwrap();
    let r1 = random_tensor(shape, &mut rng, -1.0, 1.0);
    let r2 = random_tensor(shape, &mut rng, -1.0, 1.0);
    let l1 = weighted_sum(&mut tape, out.output, &r1);
    let l2 = weighted_sum(&mut tape, out.normalized, &r2);
    let loss = tape.add(l1, l2).unwrap();
    tape.backward(loss).unwrap();
    check_gradients(&[to_f64(&x), to_f64(&g), to_f64(&b)], &grads(&tape, &[xv, gv, bv]), &names(&["x", "gamma", "beta"]), H, FLOOR, |p| {
        let (y, z) = super::batch_norm(&p[0], n, c, spatial, &p[1], &p[2], 1e-5);
        (dot(&y, &r1) + dot(&z, &r2), Pattern::default())
    })
}

/// Eval-mode batch norm against fixed running statistics.
pub fn batch_norm_eval(seed: u64) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let (n, c) = (4, 3);
    let x = random_tensor(&[n, c], &mut rng, -2.0, 2.0);
    let g = random_tensor(&[c], &mut rng, 0.5, 1.5);
    let b = random_tensor(&[c], &mut rng, -0.5, 0.5);
    let mut state = BatchNormState::new(c);
    state.running_mean = vec![0.3, -0.2, 0.1];
    state.running_var = vec![0.8, 1.7, 0.4];
    state.updates = 1;
    let mut tape = Tape::new();
    let (xv, gv, bv) = (leaf(&mut tape, &x), leaf(&mut tape, &g), leaf(&mut tape, &b));
    let out = tape.batch_norm(xv, gv, bv, &state, NormMode::Eval, 1e-5).unwrap();
    let r = random_tensor(&[n, c], &mut rng, -1.0, 1.0);
    let loss = weighted_sum(&mut tape, out.output, &r);
    tape.backward(loss).unwrap();
    let (mean, var) = (state.running_mean.clone(), state.running_var.clone());
    check_gradients(&[to_f64(&x), to_f64(&g), to_f64(&b)], &grads(&tape, &[xv, gv, bv]), &names(&["x", "gamma", "beta"]), H, FLOOR, |p| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..c {
                let z = (p[0][i * c + j] - mean[j] as f64) / (var[j] as f64 + 1e-5).sqrt();
                acc += (p[1][j] * z + p[2][j]) * r.data()[i * c + j] as f64;
            }
        }
        (acc, Pattern::default())
    })
}

pub fn cross_entropy(seed: u64) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let logits = random_tensor(&[4, 10], &mut rng, -3.0, 3.0);
    let labels = [3, 0, 9, 5];
    let mut tape = Tape::new();
    let lv = leaf(&mut tape, &logits);
    let loss = tape.softmax_cross_entropy(lv, &labels).unwrap();
    tape.backward(loss).unwrap();
    check_gradients(&[to_f64(&logits)], &grads(&tape, &[lv]), &names(&["logits"]), H, FLOOR, |p| {
        (super::cross_entropy(&p[0], 10, &labels), Pattern::default())
    })
}

/// add, sub, mul, scale, sum, reshape and squared_distance in one expression.
pub fn elementwise(seed: u64) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let a = random_tensor(&[2, 3, 2], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 3, 2], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let (av, bv) = (leaf(&mut tape, &a), leaf(&mut tape, &b));
    let s = tape.add(av, bv).unwrap();
    let d = tape.sub(av, bv).unwrap();
    let m = tape.mul(s, d).unwrap();
    let m = tape.reshape(m, vec![3, 4]).unwrap();
    let m = tape.scale(m, 0.7);
    let t1 = tape.sum(m);
    let t2 = tape.squared_distance(av, bv).unwrap();
    let t2 = tape.scale(t2, 1.3);
    let loss = tape.add(t1, t2).unwrap();
    tape.backward(loss).unwrap();
    check_gradients(&[to_f64(&a), to_f64(&b)], &grads(&tape, &[av, bv]), &names(&["a", "b"]), H, FLOOR, |p| {
        let v: f64 = p[0].iter().zip(&p[1]).map(|(x, y)| 0.7 * (x + y) * (x - y) + 1.3 * (x - y).powi(2)).sum();
        (v, Pattern::default())
    })
}

/// Parameter and input gradients of one train-mode forward plus cross-entropy.
pub fn network_standard(spec: &robustfeat::nn::NetworkSpec, seed: u64, batch: usize) -> GradCheck {
    let mut rng = RngStream::new(seed);
    let model = Model::build(spec.clone(), &mut rng).unwrap();
    let [c, h, w] = spec.input_shape;
    let x = random_tensor(&[batch, c, h, w], &mut rng, 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| (i * 3) % 10).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = leaf(&mut tape, &x);
    let out = model.forward(&mut tape, &bound, xv, robustfeat::nn::Mode::Train).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let mut vars = bound.vars().to_vec();
    vars.push(xv);
    let mut point = params_f64(&model);
    point.push(to_f64(&x));
    let mut labels_n: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    labels_n.push("input".into());
    let last = point.len() - 1;
    check_gradients(&point, &grads(&tape, &vars), &labels_n, H, FLOOR, |p| {
        let f = network_forward(spec, &p[..last], &p[last], batch);
        (super::cross_entropy(&f.logits, spec.classes, &labels), f.pattern)
    })
}

/// Parameter gradients of the full regularized objective with `x*` held fixed.
pub fn network_objective(seed: u64, cfg: &ObjectiveConfig) -> GradCheck {
    let spec = tiny_spec();
    let mut rng = RngStream::new(seed);
    let mut model = Model::build(spec.clone(), &mut rng).unwrap();
    let batch = 4;
    let x = random_tensor(&[batch, 1, 8, 8], &mut rng, 0.0, 1.0);
    let labels = vec![1, 7, 3, 3];
    model.warm_up_stats(&x).unwrap();
    let attack = cfg.attack.unwrap_or_else(|| AttackConfig::fgsm(0.0, 0.0, 1.0));
    let x_adv = attacks::attack(&model, &x, &labels, &attack).unwrap();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let lb = LabeledBatch { inputs: x.clone(), labels: labels.clone() };
    let terms = objective_loss(&model, &mut tape, &bound, &lb, cfg).unwrap();
    tape.backward(terms.total).unwrap();

    let betas: Vec<f64> = cfg.betas.iter().map(|&b| b as f64).collect();
    let (xs, xas) = (to_f64(&x), to_f64(&x_adv));
    let standard = cfg.kind == robustfeat::training::ObjectiveKind::Standard;
    let o = ObjectiveSpec {
        alpha: cfg.alpha as f64,
        betas: &betas,
        reduction: cfg.distortion_reduction,
        x_adv: (!standard).then_some(xas.as_slice()),
    };
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    check_gradients(&params_f64(&model), &grads(&tape, bound.vars()), &names, H, FLOOR, |p| {
        let (v, pattern, _) = objective(&spec, p, &xs, &labels, &o);
        (v, pattern)
    })
}

/// The miniature-network regularized objective used by the acceptance suite.
pub fn regularized_config(reduction: DistortionReduction) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::distortion_regularized(0.2, AttackConfig::fgsm(0.1, 0.0, 1.0), vec![0.05, 0.1]);
    cfg.distortion_reduction = reduction;
    if reduction == DistortionReduction::Mean {
        cfg.betas = vec![0.5, 1.0];
    }
    cfg
}
