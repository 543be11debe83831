//! Finite-difference gradient checks and brute-force metric oracles shared by
//! the integration and acceptance targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vimkit::model::{ClassTokenPosition, Strategy, VimConfig, VimModel};
use vimkit::ssm::{ssm_forward, SsmParams, SsmVars};
use vimkit::tensor::Unary;
use vimkit::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects `out` onto fixed random weights so every output element matters.
fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(shape, w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Max relative error between tape gradients and central differences of `f`
/// with respect to every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = scalarize(&mut tape, out).unwrap();
        tape.value(loss)[0]
    };

    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = scalarize(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Small model for the end-to-end check, with a random (not zero) head so
/// gradients reach the encoder.
pub fn grad_model() -> VimModel<f64> {
    let cfg = VimConfig {
        image_size: 16,
        patch_size: 8,
        in_channels: 3,
        embed_dim: 8,
        depth: 1,
        state_dim: 4,
        expand_ratio: 2,
        conv_kernel: 3,
        num_classes: 3,
        class_token: ClassTokenPosition::Middle,
    };
    let names = (0..3).map(|i| format!("c{i}")).collect();
    let mut m = VimModel::<f64>::new(cfg, names, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["head.weight", "head.bias"] {
        let t = m.param_mut(name).unwrap();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    m.set_trainable(Strategy::Full);
    m
}

/// Every parameter of the model against central differences of the
/// cross-entropy loss on a two-image batch.
pub fn check_model() -> f64 {
    let mut model = grad_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = model.config().clone();
    let images = rand_tensor(&[2, 3, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut rng);
    let labels = [0usize, 2];
    let loss_of = |m: &VimModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let logits = m.forward_batch(&mut tape, &vars, &images).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.value(loss)[0]
    };

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward_batch(&mut tape, &vars, &images).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; p.tensor.numel()])
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = model.params()[i].tensor.data()[j];
            model.params_mut()[i].tensor.data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&model);
            model.params_mut()[i].tensor.data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&model);
            model.params_mut()[i].tensor.data_mut()[j] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// `(name, max relative error)` for every differentiable op, the selective
/// SSM and the whole model.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = op_checks(2024);
    out.push(("vim_model", check_model()));
    out
}

/// One random instance of every differentiable op and of the selective SSM.
pub fn op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let a = rand_tensor(&[2, 3, 4], -1.0, 1.0, r);
    let b = rand_tensor(&[4, 5], -1.0, 1.0, r);
    out.push(("matmul", check(&[a, b], |t, v| t.matmul(v[0], v[1]))));

    let a = rand_tensor(&[3, 4], -1.0, 1.0, r);
    let b = rand_tensor(&[3, 4], -1.0, 1.0, r);
    out.push((
        "add",
        check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
    ));
    out.push(("mul", check(&[a.clone(), b], |t, v| t.mul(v[0], v[1]))));
    let bias = rand_tensor(&[4], -1.0, 1.0, r);
    out.push((
        "add_broadcast",
        check(&[a, bias], |t, v| t.add_broadcast(v[0], v[1])),
    ));

    let x = rand_tensor(&[2, 5], -3.0, 3.0, r);
    for (name, f) in [
        ("silu", Unary::Silu),
        ("softplus", Unary::Softplus),
        ("exp", Unary::Exp),
    ] {
        out.push((
            name,
            check(std::slice::from_ref(&x), move |t, v| t.unary(v[0], f)),
        ));
    }
    out.push((
        "softmax",
        check(std::slice::from_ref(&x), |t, v| t.softmax(v[0])),
    ));

    let x = rand_tensor(&[2, 3, 6], -2.0, 2.0, r);
    let g = rand_tensor(&[6], 0.5, 1.5, r);
    let be = rand_tensor(&[6], -0.5, 0.5, r);
    out.push((
        "layer_norm",
        check(&[x.clone(), g, be], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
    ));

    let k = rand_tensor(&[3, 6], -1.0, 1.0, r);
    let kb = rand_tensor(&[6], -1.0, 1.0, r);
    out.push((
        "conv1d_causal_depthwise",
        check(&[x.clone(), k, kb], |t, v| {
            t.conv1d_causal_depthwise(v[0], v[1], v[2])
        }),
    ));
    out.push((
        "slice_last",
        check(std::slice::from_ref(&x), |t, v| t.slice_last(v[0], 2, 3)),
    ));
    out.push((
        "reverse_time",
        check(std::slice::from_ref(&x), |t, v| t.reverse_time(v[0])),
    ));
    let tok = rand_tensor(&[6], -1.0, 1.0, r);
    out.push((
        "insert_token",
        check(&[x.clone(), tok], |t, v| t.insert_token(v[0], v[1], 1)),
    ));
    out.push(("select_token", check(&[x], |t, v| t.select_token(v[0], 2))));

    let logits = rand_tensor(&[4, 5], -2.0, 2.0, r);
    out.push((
        "cross_entropy",
        check(std::slice::from_ref(&logits), |t, v| {
            t.cross_entropy(v[0], &[0, 4, 2, 2])
        }),
    ));
    out.push(("sum", check(&[logits], |t, v| t.sum(v[0]))));

    let (l, d, n) = (7, 3, 4);
    let scan_inputs = [
        rand_tensor(&[2, l, d], -1.0, 1.0, r),
        rand_tensor(&[2, l, d], 0.05, 0.6, r),
        rand_tensor(&[d, n], -0.5, 1.0, r),
        rand_tensor(&[2, l, n], -1.0, 1.0, r),
        rand_tensor(&[2, l, n], -1.0, 1.0, r),
        rand_tensor(&[d], -1.0, 1.0, r),
    ];
    out.push((
        "selective_scan",
        check(&scan_inputs, |t, v| {
            t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
        }),
    ));

    let p = SsmParams::<f64>::init(d, n, r);
    let ssm_inputs = [
        rand_tensor(&[2, l, d], -1.0, 1.0, r),
        p.a_log,
        p.d_skip,
        rand_tensor(&[d, 1], -1.0, 1.0, r),
        rand_tensor(&[1, d], -1.0, 1.0, r),
        p.dt_bias,
        rand_tensor(&[d, n], -1.0, 1.0, r),
        rand_tensor(&[d, n], -1.0, 1.0, r),
    ];
    out.push((
        "selective_ssm",
        check(&ssm_inputs, |t, v| {
            let s = SsmVars {
                a_log: v[1],
                d_skip: v[2],
                w_delta: v[3],
                dt_proj: v[4],
                dt_bias: v[5],
                w_b: v[6],
                w_c: v[7],
            };
            ssm_forward(t, v[0], s)
        }),
    ));
    out
}

/// Per-class TP/FP/TN/FN tallied one sample at a time.
pub fn brute_counts(y_true: &[usize], y_pred: &[usize], k: usize) -> Vec<[u64; 4]> {
    let mut c = vec![[0u64; 4]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for (cls, row) in c.iter_mut().enumerate() {
            match (t == cls, p == cls) {
                (true, true) => row[0] += 1,
                (false, true) => row[1] += 1,
                (false, false) => row[2] += 1,
                (true, false) => row[3] += 1,
            }
        }
    }
    c
}

/// Fraction of (positive, negative) pairs ranked correctly, ties worth half.
pub fn pair_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut good, mut pairs) = (0.0, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    (pairs > 0).then(|| good / pairs as f64)
}

/// Largest deviation of `metrics(confusion(..))` from per-sample counting
/// over `instances` random problems with up to 8 classes.
pub fn metric_oracle_max_err(instances: usize, seed: u64) -> f64 {
    use vimkit::eval::{confusion, metrics};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..=8);
        let m = rng.random_range(1..=60);
        let y_true: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let got = metrics(&confusion(&y_true, &y_pred, k).unwrap()).unwrap();
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut weighted = [0.0; 4];
        for (c, &[tp, fp, tn, fn_]) in brute_counts(&y_true, &y_pred, k).iter().enumerate() {
            let p = div(tp, tp + fp);
            let r = div(tp, tp + fn_);
            let f1 = if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            let s = div(tn, tn + fp);
            let pc = &got.per_class[c];
            for (a, b) in [
                (pc.precision, p),
                (pc.recall, r),
                (pc.f1, f1),
                (pc.specificity, s),
            ] {
                worst = worst.max((a - b).abs());
            }
            let w = (tp + fn_) as f64 / m as f64;
            for (acc, v) in weighted.iter_mut().zip([p, r, f1, s]) {
                *acc += w * v;
            }
        }
        for (a, b) in [got.precision, got.recall, got.f1, got.specificity]
            .iter()
            .zip(weighted)
        {
            worst = worst.max((a - b).abs());
        }
        let correct = y_true.iter().zip(&y_pred).filter(|(a, b)| a == b).count();
        worst = worst.max((got.accuracy - correct as f64 / m as f64).abs());
        worst = worst.max((got.sensitivity - got.recall).abs());
    }
    worst
}

/// Largest deviation of one-vs-rest AUC from exhaustive pair counting, with
/// coarse scores so ties are common. Returns `(max error, instances scored)`.
pub fn auc_oracle_max_err(instances: usize, seed: u64) -> (f64, usize) {
    use vimkit::eval::roc_auc_ovr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut scored) = (0.0f64, 0);
    for _ in 0..instances {
        let k = rng.random_range(2..=5);
        let m = rng.random_range(2..=200);
        let y: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let scores: Vec<f64> = (0..m * k)
            .map(|_| rng.random_range(0..10) as f64 / 10.0)
            .collect();
        let Ok(r) = roc_auc_ovr(&scores, &y, k) else {
            continue;
        };
        scored += 1;
        let (mut sum, mut n) = (0.0, 0);
        for c in 0..k {
            let col: Vec<f64> = scores.iter().skip(c).step_by(k).copied().collect();
            let pos: Vec<bool> = y.iter().map(|&l| l == c).collect();
            match (r.per_class[c], pair_auc(&col, &pos)) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    sum += b;
                    n += 1;
                }
                (None, None) => {}
                _ => return (f64::INFINITY, scored),
            }
        }
        worst = worst.max((r.macro_auc - sum / n as f64).abs());
    }
    (worst, scored)
}

/// Class sizes of the six-class T1 brain MRI corpus.
pub const CORPUS: [(&str, usize); 6] = [
    ("glioma", 463),
    ("meningioma", 345),
    ("normal", 272),
    ("neurocitoma", 169),
    ("outros", 152),
    ("schwannoma", 153),
];

/// Stand-in dataset with the corpus class sizes and blank images.
pub fn corpus_dataset() -> vimkit::data::LabeledDataset {
    use vimkit::data::{GrayImage, LabeledDataset, Sample};
    let img = GrayImage::new(2, 2, vec![0.0; 4], 255.0).unwrap();
    let mut names: Vec<&str> = CORPUS.iter().map(|(n, _)| *n).collect();
    names.sort();
    let mut samples = Vec::new();
    for (label, name) in names.iter().enumerate() {
        let n = CORPUS.iter().find(|(c, _)| c == name).unwrap().1;
        for i in 0..n {
            samples.push(Sample {
                id: format!("{name}/{i:04}.png"),
                image: img.clone(),
                label,
            });
        }
    }
    LabeledDataset {
        samples,
        class_names: names.iter().map(|s| s.to_string()).collect(),
        source_dir: None,
    }
}
