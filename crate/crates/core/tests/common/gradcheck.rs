//! Central finite-difference checks of every differentiable tape operation
//! and every loss, in f64 over randomized shapes. Each suite panics on the
//! first mismatch.

use bwssl::losses::{
    barlow_twins, block_loss, cross_correlation, cross_correlation_weighted, cross_entropy, simclr, vicreg, LossConfig,
    LossKind, VicregCoeffs,
};
use bwssl::pooling::{gsp, lsp, rms_pool, signed_sqrt_pool};
use bwssl::tensor::{ConvAlgo, ConvGeometry, Tape, Tensor, Var};
use bwssl::Result;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 20;

type Builder<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Scalar objective: the output contracted against a fixed random weighting.
fn objective(
    inputs: &[Tensor<f64>],
    weights: Option<&Tensor<f64>>,
    build: Builder,
    algo: ConvAlgo,
) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new().with_conv_algo(algo);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let loss = match weights {
        Some(w) => {
            let w = tape.constant(w.clone());
            let prod = tape.mul(out, w).unwrap();
            tape.sum_all(prod).unwrap()
        }
        None => out,
    };
    (tape, vars, loss)
}

fn check_with(name: &str, case: usize, inputs: Vec<Tensor<f64>>, build: Builder, algo: ConvAlgo) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ case as u64);
    let (tape, _, out) = objective(&inputs, None, build, algo);
    let shape = tape.shape(out).to_vec();
    let weights = (tape.value(out).numel() != 1 || !shape.is_empty()).then(|| {
        Tensor::from_fn(&shape, |_| {
            rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 }
        })
    });
    let (tape, vars, loss) = objective(&inputs, weights.as_ref(), build, algo);
    let grads = tape.backward(loss).expect("backward");
    let eval = |perturbed: &[Tensor<f64>]| {
        let (t, _, l) = objective(perturbed, weights.as_ref(), build, algo);
        t.value(l).data()[0]
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut probe = inputs.clone();
            probe[k].data_mut()[j] = input.data()[j] + STEP;
            let up = eval(&probe);
            probe[k].data_mut()[j] = input.data()[j] - STEP;
            let down = eval(&probe);
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        assert!(
            rel <= TOLERANCE,
            "{name} case {case} input {k} shape {:?}: relative error {rel:e}\n analytic {analytic:?}\n numeric  {numeric:?}",
            input.shape()
        );
        for (j, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                (a - n).abs() <= TOLERANCE * a.abs().max(n.abs()) + 1e-8,
                "{name} case {case} input {k} element {j}: analytic {a} numeric {n}"
            );
        }
    }
}

fn check(name: &str, case: usize, inputs: Vec<Tensor<f64>>, build: Builder) {
    check_with(name, case, inputs, build, ConvAlgo::default());
}

fn rng_for(name: &str) -> ChaCha8Rng {
    let seed = name
        .bytes()
        .fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_shape(rng: &mut ChaCha8Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = rng.random_range(min_rank..=max_rank);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero by `gap`, either sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Pairwise-distinct values spaced at least 0.01 apart, shuffled.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| -1.0 + 0.05 * i as f64 + rng.random_range(0.0..0.02))
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

/// A shape that broadcasts into `shape`: trailing suffix with some axes set to 1.
fn broadcast_shape(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    match rng.random_range(0..4) {
        0 => shape.to_vec(),
        1 => vec![1],
        _ => {
            let drop = rng.random_range(0..shape.len());
            shape[drop..]
                .iter()
                .map(|&d| if rng.random::<bool>() { 1 } else { d })
                .collect()
        }
    }
}

pub fn elementwise_binary_with_broadcasting() {
    let mut rng = rng_for("binary");
    for case in 0..CASES {
        let a = random_shape(&mut rng, 1, 4);
        let b = broadcast_shape(&mut rng, &a);
        let x = uniform(&mut rng, &a, -1.0, 1.0);
        let y = uniform(&mut rng, &b, -1.0, 1.0);
        check("add", case, vec![x.clone(), y.clone()], &|t, v| t.add(v[0], v[1]));
        check("sub", case, vec![x.clone(), y.clone()], &|t, v| t.sub(v[0], v[1]));
        check("mul", case, vec![x.clone(), y], &|t, v| t.mul(v[0], v[1]));
        let d = Tensor::from_fn(&b, |_| {
            rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }
        });
        check("div", case, vec![x, d], &|t, v| t.div(v[0], v[1]));
    }
}

pub fn elementwise_unary() {
    let mut rng = rng_for("unary");
    for case in 0..CASES {
        let s = random_shape(&mut rng, 1, 4);
        let x = uniform(&mut rng, &s, -1.5, 1.5);
        let c = rng.random_range(-2.0..2.0);
        check("add_scalar", case, vec![x.clone()], &move |t, v| {
            Ok(t.add_scalar(v[0], c))
        });
        check("mul_scalar", case, vec![x.clone()], &move |t, v| {
            Ok(t.mul_scalar(v[0], c))
        });
        check("neg", case, vec![x.clone()], &|t, v| Ok(t.neg(v[0])));
        check("square", case, vec![x.clone()], &|t, v| Ok(t.square(v[0])));
        check("exp", case, vec![x], &|t, v| Ok(t.exp(v[0])));
        let pos = uniform(&mut rng, &s, 0.2, 2.0);
        check("sqrt", case, vec![pos.clone()], &|t, v| Ok(t.sqrt(v[0])));
        check("log", case, vec![pos], &|t, v| Ok(t.log(v[0])));
        let signed = away_from_zero(&mut rng, &s, 0.05);
        check("relu", case, vec![signed.clone()], &|t, v| Ok(t.relu(v[0])));
        check("signed_sqrt", case, vec![signed.clone()], &|t, v| {
            Ok(t.signed_sqrt(v[0]))
        });
        check("clamp_min", case, vec![signed], &|t, v| Ok(t.clamp_min(v[0], 0.0)));
    }
}

pub fn linear_algebra_and_layout() {
    let mut rng = rng_for("layout");
    for case in 0..CASES {
        let (m, k, n) = (
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        );
        let a = uniform(&mut rng, &[m, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[k, n], -1.0, 1.0);
        check("matmul", case, vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]));
        check("transpose", case, vec![a], &|t, v| t.transpose(v[0]));

        let s = random_shape(&mut rng, 2, 4);
        let x = uniform(&mut rng, &s, -1.0, 1.0);
        let flat = vec![x.numel()];
        check("reshape", case, vec![x.clone()], &move |t, v| t.reshape(v[0], &flat));
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.shuffle(&mut rng);
        check("permute", case, vec![x.clone()], &move |t, v| t.permute(v[0], &perm));

        let rows = rng.random_range(1..=3);
        let tail: Vec<usize> = s[1..].to_vec();
        let mut other_shape = vec![rows];
        other_shape.extend(&tail);
        let y = uniform(&mut rng, &other_shape, -1.0, 1.0);
        check("concat", case, vec![x, y], &|t, v| t.concat(&[v[0], v[1]]));
    }
}

pub fn reductions() {
    let mut rng = rng_for("reductions");
    for case in 0..CASES {
        let s = random_shape(&mut rng, 1, 4);
        let mut axes: Vec<usize> = (0..s.len()).filter(|_| rng.random::<bool>()).collect();
        if axes.is_empty() {
            axes.push(rng.random_range(0..s.len()));
        }
        let keep = rng.random::<bool>();
        let x = distinct(&mut rng, &s);
        let (a1, a2, a3) = (axes.clone(), axes.clone(), axes);
        check("sum", case, vec![x.clone()], &move |t, v| t.sum(v[0], &a1, keep));
        check("mean", case, vec![x.clone()], &move |t, v| t.mean(v[0], &a2, keep));
        check("max", case, vec![x.clone()], &move |t, v| t.max(v[0], &a3, keep));
        check("sum_all", case, vec![x.clone()], &|t, v| t.sum_all(v[0]));
        check("mean_all", case, vec![x], &|t, v| t.mean_all(v[0]));
    }
}

pub fn conv2d_both_algorithms() {
    let mut rng = rng_for("conv");
    for case in 0..CASES {
        let groups = [1, 1, 2, 3][rng.random_range(0..4)];
        let c = groups * rng.random_range(1..=2);
        let o = groups * rng.random_range(1..=2);
        let k = [1, 2, 3][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=k / 2 + 1);
        let (h, w) = (rng.random_range(k..=5), rng.random_range(k..=5));
        let n = rng.random_range(1..=2);
        let geom = ConvGeometry {
            stride,
            padding,
            groups,
        };
        let x = uniform(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let kern = uniform(&mut rng, &[o, c / groups, k, k], -1.0, 1.0);
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            check_with(
                "conv2d",
                case,
                vec![x.clone(), kern.clone()],
                &move |t, v| t.conv2d(v[0], v[1], geom),
                algo,
            );
        }
    }
}

pub fn normalization_and_softmax() {
    let mut rng = rng_for("norm");
    for case in 0..CASES {
        let mut s = vec![rng.random_range(2..=4), rng.random_range(1..=3)];
        if rng.random::<bool>() {
            s.extend([rng.random_range(1..=3), rng.random_range(1..=3)]);
        }
        let x = uniform(&mut rng, &s, -2.0, 2.0);
        check("batch_norm", case, vec![x.clone()], &|t, v| {
            Ok(t.batch_norm(v[0], 1e-5)?.0)
        });
        let ch = s[1];
        let scale = uniform(&mut rng, &[ch], 0.5, 1.5);
        let shift = uniform(&mut rng, &[ch], -1.0, 1.0);
        check("channel_affine", case, vec![x, scale, shift], &|t, v| {
            t.channel_affine(v[0], v[1], v[2])
        });
        let ls = [rng.random_range(1..=4), rng.random_range(2..=6)];
        let logits = uniform(&mut rng, &ls, -3.0, 3.0);
        check("log_softmax", case, vec![logits], &|t, v| t.log_softmax(v[0]));
    }
}

pub fn pooling_reductions() {
    let mut rng = rng_for("pooling");
    for case in 0..CASES {
        let g = rng.random_range(1..=2);
        let s = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            g * rng.random_range(1..=3),
            g * rng.random_range(1..=3),
        ];
        let x = away_from_zero(&mut rng, &s, 0.1);
        check("gsp", case, vec![x.clone()], &|t, v| gsp(t, v[0]));
        check("lsp", case, vec![x.clone()], &move |t, v| lsp(t, v[0], g));
        check("rms_pool", case, vec![x.clone()], &|t, v| rms_pool(t, v[0]));
        check("signed_sqrt_pool", case, vec![x], &|t, v| signed_sqrt_pool(t, v[0]));
    }
}

fn embedding_pair(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = (rng.random_range(3..=8), rng.random_range(1..=5));
    let a = uniform(rng, &[n, d], -1.0, 1.0);
    let b = Tensor::from_fn(&[n, d], |i| 0.6 * a.data()[i] + rng.random_range(-0.5..0.5));
    (a, b)
}

pub fn correlation_and_barlow_twins() {
    let mut rng = rng_for("barlow");
    for case in 0..CASES {
        let (a, b) = embedding_pair(&mut rng);
        let n = a.shape()[0];
        let center = rng.random::<bool>();
        check("cross_correlation", case, vec![a.clone(), b.clone()], &move |t, v| {
            cross_correlation(t, v[0], v[1], center)
        });
        let weights: Vec<f64> = (0..n)
            .map(|i| if i == 0 { 1.0 } else { rng.random_range(0.0..2.0) })
            .collect();
        check(
            "cross_correlation_weighted",
            case,
            vec![a.clone(), b.clone()],
            &move |t, v| cross_correlation_weighted(t, v[0], v[1], center, Some(&weights)),
        );
        let d = a.shape()[1];
        let lambda = rng.random_range(0.001..1.0);
        let targets: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.0)).collect();
        check("barlow_twins", case, vec![a.clone(), b.clone()], &move |t, v| {
            let c = cross_correlation(t, v[0], v[1], true)?;
            Ok(barlow_twins(t, c, lambda, &targets)?.total)
        });
        let cfg = LossConfig::of(LossKind::BarlowTwins);
        check("block_loss", case, vec![a, b], &move |t, v| {
            Ok(block_loss(t, &cfg, v[0], v[1], None, None)?.total)
        });
    }
}

pub fn contrastive_and_variance_losses() {
    let mut rng = rng_for("contrastive");
    let mut case = 0;
    while case < CASES {
        let (a, b) = embedding_pair(&mut rng);
        let tau = rng.random_range(0.1..1.0);
        // the variance hinge has a kink at unit std; keep clear of it
        let stds = |z: &Tensor<f64>| {
            let (n, d) = (z.shape()[0], z.shape()[1]);
            (0..d)
                .map(|j| {
                    let m = (0..n).map(|i| z.data()[i * d + j]).sum::<f64>() / n as f64;
                    ((0..n).map(|i| (z.data()[i * d + j] - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
                })
                .collect::<Vec<_>>()
        };
        if stds(&a).iter().chain(&stds(&b)).any(|s| (s - 1.0).abs() < 1e-3) {
            continue;
        }
        check("simclr", case, vec![a.clone(), b.clone()], &move |t, v| {
            Ok(simclr(t, v[0], v[1], tau)?.total)
        });
        let coeffs = VicregCoeffs {
            invariance: rng.random_range(0.5..25.0),
            variance: rng.random_range(0.5..25.0),
            covariance: rng.random_range(0.5..2.0),
        };
        check("vicreg", case, vec![a, b], &move |t, v| {
            Ok(vicreg(t, v[0], v[1], coeffs)?.total)
        });
        case += 1;
    }
}

pub fn supervised_cross_entropy() {
    let mut rng = rng_for("ce");
    for case in 0..CASES {
        let (n, k) = (rng.random_range(1..=6), rng.random_range(2..=5));
        let logits = uniform(&mut rng, &[n, k], -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let use_w = rng.random::<bool>();
        check("cross_entropy", case, vec![logits], &move |t, v| {
            Ok(cross_entropy(t, v[0], &labels, use_w.then_some(&weights[..]))?.total)
        });
    }
}

pub fn stop_gradient_passes_value_and_blocks_gradient() {
    let mut rng = rng_for("stop");
    for _ in 0..CASES {
        let s = random_shape(&mut rng, 1, 3);
        let x = uniform(&mut rng, &s, -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone(), true);
        let frozen = tape.stop_gradient(v);
        assert_eq!(tape.value(frozen), &x);
        let prod = tape.mul(v, frozen).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dx sum(x * sg(x)) = sg(x): the stopped factor contributes nothing
        assert_eq!(g.get(v).unwrap(), &x);
    }
}

/// Every suite with its name, in a fixed order.
pub const SUITES: &[(&str, fn())] = &[
    (
        "elementwise_binary_with_broadcasting",
        elementwise_binary_with_broadcasting,
    ),
    ("elementwise_unary", elementwise_unary),
    ("linear_algebra_and_layout", linear_algebra_and_layout),
    ("reductions", reductions),
    ("conv2d_both_algorithms", conv2d_both_algorithms),
    ("normalization_and_softmax", normalization_and_softmax),
    ("pooling_reductions", pooling_reductions),
    ("correlation_and_barlow_twins", correlation_and_barlow_twins),
    ("contrastive_and_variance_losses", contrastive_and_variance_losses),
    ("supervised_cross_entropy", supervised_cross_entropy),
    (
        "stop_gradient_passes_value_and_blocks_gradient",
        stop_gradient_passes_value_and_blocks_gradient,
    ),
];
