use faqd_core::autodiff::{Graph, Var};
use faqd_core::ffa::{ffa_loss_k_graph, sample_sketch, SketchMatrix};
use faqd_core::losses::normalize_rows;
use faqd_core::quantizers::qrelu;
use faqd_core::{Error, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

/// Builds the graph under test. Returns the output followed by any ReLU
/// pre-activations; a coordinate is skipped when one of them changes sign
/// across the finite-difference stencil or sits within 1e-2 of zero.
type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Vec<Var>> + 'a;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(0.5..2.0)).collect()).unwrap()
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

struct Eval {
    loss: f64,
    kinks: Vec<f64>,
}

/// Contracts the output against fixed weights so every output coordinate
/// contributes to the scalar being differentiated.
fn evaluate(build: &Build, inputs: &[Tensor<f64>], weights: &Tensor<f64>, grads: bool) -> Result<(Eval, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let outs = build(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(outs[0], w)?;
    let loss = g.sum(prod)?;
    let kinks = outs[1..].iter().flat_map(|v| g.value(*v).data().to_vec()).collect();
    let value = g.value(loss).item();
    let mut out = Vec::new();
    if grads {
        g.backward_scalar(loss)?;
        for (v, t) in vars.iter().zip(inputs) {
            out.push(g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
        }
    }
    Ok((Eval { loss: value, kinks }, out))
}

fn output_shape(build: &Build, inputs: &[Tensor<f64>]) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let outs = build(&mut g, &vars).unwrap();
    g.value(outs[0]).shape().to_vec()
}

/// Returns the number of coordinates compared.
fn grad_check(name: &str, build: &Build, inputs: &[Tensor<f64>], seed: u64) -> usize {
    let weights = randn(&output_shape(build, inputs), &mut rng(seed ^ 0xabcd));
    let (base, analytic) = evaluate(build, inputs, &weights, true).unwrap();
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let shifted = |delta: f64| {
                let mut p = inputs.to_vec();
                p[i].data_mut()[j] += delta;
                evaluate(build, &p, &weights, false).unwrap().0
            };
            let (plus, minus) = (shifted(H), shifted(-H));
            let near_kink = base.kinks.iter().any(|k| k.abs() < 1e-2)
                || plus.kinks.iter().zip(&minus.kinks).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
            if near_kink {
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * H);
            let a = analytic[i].data()[j];
            // relative error with a unit floor so tiny gradients compare absolutely
            let scale = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() <= TOL * scale,
                "{name}: input {i} coord {j}: analytic {a} vs numeric {numeric}"
            );
            checked += 1;
        }
    }
    checked
}

fn check_primitive(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build) {
    let mut total = 0;
    for s in 0..INSTANCES {
        let mut r = rng(s * 7919 + name.len() as u64);
        total += grad_check(name, build, &make(&mut r), s);
    }
    assert!(total > 0, "{name}: every coordinate was skipped");
}

#[test]
fn matmul_gradients() {
    check_primitive(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![randn(&[m, k], r), randn(&[k, n], r)]
        },
        &|g, v| Ok(vec![g.matmul(v[0], v[1])?]),
    );
}

#[test]
fn conv2d_gradients() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        check_primitive(
            "conv2d",
            |r| {
                let (b, c, o) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
                let (h, w) = (dim(r, 3, 5), dim(r, 3, 5));
                vec![randn(&[b, c, h, w], r), randn(&[o, c, 3, 3], r)]
            },
            &move |g, v| Ok(vec![g.conv2d(v[0], v[1], stride, padding)?]),
        );
    }
}

#[test]
fn bias_add_gradients() {
    check_primitive(
        "bias_add",
        |r| {
            let (b, c, h) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3));
            vec![randn(&[b, c, h, h], r), randn(&[c], r)]
        },
        &|g, v| Ok(vec![g.bias_add(v[0], v[1])?]),
    );
}

#[test]
fn elementwise_gradients() {
    let pair = |r: &mut ChaCha8Rng| {
        let shape = [dim(r, 1, 4), dim(r, 1, 4)];
        vec![randn(&shape, r), randn(&shape, r)]
    };
    check_primitive("add", pair, &|g, v| Ok(vec![g.add(v[0], v[1])?]));
    check_primitive("sub", pair, &|g, v| Ok(vec![g.sub(v[0], v[1])?]));
    check_primitive("mul", pair, &|g, v| Ok(vec![g.mul(v[0], v[1])?]));
    let one = |r: &mut ChaCha8Rng| vec![randn(&[dim(r, 1, 6)], r)];
    check_primitive("scale", one, &|g, v| Ok(vec![g.scale(v[0], -2.5)?]));
    check_primitive("square", one, &|g, v| Ok(vec![g.square(v[0])?]));
    check_primitive("log", |r| vec![positive(&[dim(r, 1, 6)], r)], &|g, v| Ok(vec![g.log(v[0])?]));
}

#[test]
fn relu_gradients_away_from_kink() {
    check_primitive("relu", |r| vec![randn(&[dim(r, 2, 8)], r)], &|g, v| Ok(vec![g.relu(v[0])?, v[0]]));
}

#[test]
fn pooling_gradients() {
    check_primitive(
        "avg_pool",
        |r| {
            let k = dim(r, 1, 2);
            vec![randn(&[dim(r, 1, 2), dim(r, 1, 3), 2 * k, 2 * k], r)]
        },
        &|g, v| {
            let k = g.value(v[0]).shape()[2] / 2;
            Ok(vec![g.avg_pool(v[0], k)?])
        },
    );
    check_primitive(
        "global_avg_pool",
        |r| vec![randn(&[dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)], r)],
        &|g, v| Ok(vec![g.global_avg_pool(v[0])?]),
    );
}

#[test]
fn batch_norm_gradients() {
    let make = |r: &mut ChaCha8Rng| {
        let c = dim(r, 1, 3);
        vec![randn(&[dim(r, 2, 3), c, dim(r, 1, 3), 2], r), positive(&[c], r), randn(&[c], r)]
    };
    check_primitive("batch_norm_train", make, &|g, v| Ok(vec![g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0]));
    check_primitive("batch_norm_infer", make, &|g, v| {
        let c = g.value(v[1]).numel();
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        Ok(vec![g.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?])
    });
}

#[test]
fn softmax_and_reduction_gradients() {
    let m = |r: &mut ChaCha8Rng| vec![randn(&[dim(r, 1, 4), dim(r, 2, 5)], r)];
    check_primitive("softmax", m, &|g, v| Ok(vec![g.softmax(v[0])?]));
    check_primitive("log_softmax", m, &|g, v| Ok(vec![g.log_softmax(v[0])?]));
    check_primitive("sum", m, &|g, v| Ok(vec![g.sum(v[0])?]));
    check_primitive("mean", m, &|g, v| Ok(vec![g.mean(v[0])?]));
    check_primitive("transpose", m, &|g, v| Ok(vec![g.transpose(v[0])?]));
    check_primitive("reshape", m, &|g, v| {
        let n = g.value(v[0]).numel();
        Ok(vec![g.reshape(v[0], &[n])?])
    });
    check_primitive("row_normalize", m, &|g, v| Ok(vec![g.row_normalize(v[0], 1e-8)?]));
    check_primitive("pick", m, &|g, v| {
        let [rows, cols] = *g.value(v[0]).shape() else { unreachable!() };
        let labels: Vec<usize> = (0..rows).map(|i| (3 * i + 1) % cols).collect();
        Ok(vec![g.pick(v[0], &labels)?])
    });
}

#[test]
fn layout_gradients() {
    let map = |r: &mut ChaCha8Rng| vec![randn(&[dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)], r)];
    check_primitive("pixel_matrix", map, &|g, v| {
        let b = g.value(v[0]).shape()[0];
        Ok(vec![g.pixel_matrix(v[0], b - 1)?])
    });
    check_primitive("resize_bilinear", map, &|g, v| Ok(vec![g.resize_bilinear(v[0], 3, 5)?]));
}

#[test]
fn composite_network_gradients() {
    check_primitive(
        "composite",
        |r| {
            vec![
                randn(&[2, 2, 4, 4], r),
                randn(&[3, 2, 3, 3], r),
                randn(&[3], r),
                positive(&[3], r),
                randn(&[3], r),
                randn(&[3, 4], r),
            ]
        },
        &|g, v| {
            let c = g.conv2d(v[0], v[1], 1, 1)?;
            let c = g.bias_add(c, v[2])?;
            let (bn, _) = g.batch_norm_train(c, v[3], v[4], 1e-5)?;
            let a = g.relu(bn)?;
            let p = g.global_avg_pool(a)?;
            let logits = g.matmul(p, v[5])?;
            let ls = g.log_softmax(logits)?;
            let picked = g.pick(ls, &[1, 3])?;
            Ok(vec![g.mean(picked)?, bn])
        },
    );
}

#[test]
fn ffa_estimator_gradient_with_fixed_sketch() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let (n, c2, c1, k) = (dim(&mut r, 2, 9), dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 3));
        let ft = normalize_rows(&randn(&[n, c2], &mut r)).unwrap();
        let z: SketchMatrix<f64> = sample_sketch(n, k, s + 100).unwrap();
        let fs = randn(&[n, c1], &mut r);
        let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Vec<Var>> {
            let norm = g.row_normalize(v[0], 1e-8)?;
            let loss = ffa_loss_k_graph(g, &ft, norm, &z)?;
            Ok(vec![loss])
        };
        assert!(grad_check("ffa_loss_k", &build, &[fs], s) > 0);
    }
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 5, 5]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn small_forward_examples() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let b = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[6.0]);
    let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn square_and_relu_backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    g.backward_scalar(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.backward_scalar(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, 1, 0), Err(Error::Shape { op: "conv2d", .. })));
}

#[test]
fn backward_on_foreign_node_is_state_error() {
    let mut other = Graph::<f64>::new();
    let v = other.param(&Tensor::scalar(1.0));
    let mut g = Graph::<f64>::new();
    assert!(matches!(g.backward_scalar(v), Err(Error::State(_))));
    let mut cleared = Graph::<f64>::new();
    let y = cleared.param(&Tensor::scalar(1.0));
    cleared.clear();
    assert!(matches!(cleared.backward_scalar(y), Err(Error::State(_))));
}

#[test]
fn identity_forward_zero_backward_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let id = g.custom_grad(
        "blocker",
        |xs| Ok(xs[0].clone()),
        |xs, _up| Ok(vec![Tensor::zeros(xs[0].shape())]),
    );
    let x = g.param(&Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
    let y = g.apply(id, &[x]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    let sq = g.square(y).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward_scalar(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn round_with_pass_through_reports_upstream() {
    let mut g = Graph::<f64>::new();
    let id = g.custom_grad("round_ste", |xs| Ok(xs[0].map(f64::round)), |_xs, up| Ok(vec![up.clone()]));
    let x = g.param(&Tensor::new(&[3], vec![0.4, 1.6, -2.2]).unwrap());
    let y = g.apply(id, &[x]).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0, -2.0]);
    let seed = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    g.backward(y, &seed).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), seed.data());
}

#[test]
fn custom_backward_arity_mismatch_is_config_error() {
    let mut g = Graph::<f64>::new();
    let id = g.custom_grad("bad", |xs| Ok(xs[0].clone()), |xs, _| Ok(vec![xs[0].clone(), xs[0].clone()]));
    let x = g.param(&Tensor::scalar(1.0));
    let y = g.apply(id, &[x]).unwrap();
    assert!(matches!(g.backward_scalar(y), Err(Error::Config(_))));
}

#[test]
fn unknown_primitive_id_is_config_error() {
    let mut donor = Graph::<f64>::new();
    let id = donor.custom_grad("only_here", |xs| Ok(xs[0].clone()), |_, up| Ok(vec![up.clone()]));
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::scalar(1.0));
    assert!(matches!(g.apply(id, &[x]), Err(Error::Config(_))));
}

#[test]
fn qrelu_uses_clipped_relu_backward() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::new(&[4], vec![-0.5, 0.3, 1.2, 9.0]).unwrap());
    let alpha = g.param(&Tensor::scalar(1.0));
    let y = qrelu(&mut g, x, alpha, 2).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    let s = g.sum(y).unwrap();
    g.backward_scalar(s).unwrap();
    // pass-through inside (0, 3 alpha), blocked outside
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

fn small_net(g: &mut Graph<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> (Var, Var, Var) {
    let xv = g.param(x);
    let wv = g.param(w);
    let c = g.conv2d(xv, wv, 1, 1).unwrap();
    let a = g.relu(c).unwrap();
    let p = g.global_avg_pool(a).unwrap();
    (xv, wv, p)
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut r = rng(3);
    let (x, w) = (randn(&[2, 3, 5, 5], &mut r), randn(&[4, 3, 3, 3], &mut r));
    let run = || {
        let mut g = Graph::new();
        let (xv, wv, p) = small_net(&mut g, &x, &w);
        let s = g.sum(p).unwrap();
        g.backward_scalar(s).unwrap();
        (g.grad(xv).unwrap(), g.grad(wv).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_seed(seed in 0u64..1000, c in -8i32..8) {
        let c = c as f64 * 0.5;
        let mut r = rng(seed);
        let (x, w) = (randn(&[1, 2, 4, 4], &mut r), randn(&[3, 2, 3, 3], &mut r));
        let s = randn(&[1, 3], &mut r);
        let grads = |seed_t: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, wv, p) = small_net(&mut g, &x, &w);
            g.backward(p, seed_t).unwrap();
            (g.grad(xv).unwrap(), g.grad(wv).unwrap())
        };
        let (gx, gw) = grads(&s);
        let (cx, cw) = grads(&s.map(|v| v * c));
        // powers of two keep every product exact
        let exact = c == 0.0 || (c.abs().log2().fract() == 0.0);
        for (a, b) in gx.data().iter().chain(gw.data()).zip(cx.data().iter().chain(cw.data())) {
            if exact {
                prop_assert_eq!(*b, c * a);
            } else {
                prop_assert!((b - c * a).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn accumulation_adds_into_existing_grads(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = randn(&[5], &mut r);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.square(xv).unwrap();
        let s = g.sum(y).unwrap();
        g.backward_scalar(s).unwrap();
        let once = g.grad(xv).unwrap();
        g.backward_scalar(s).unwrap();
        let twice = g.grad(xv).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn forward_stays_nan_free(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = randn(&[2, 2, 4, 4], &mut r).map(|v| v * 100.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (bn, _) = g.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
        let p = g.global_avg_pool(bn).unwrap();
        let ls = g.log_softmax(p).unwrap();
        let sm = g.softmax(p).unwrap();
        prop_assert!(!g.value(ls).has_nan() && !g.value(sm).has_nan());
    }
}
