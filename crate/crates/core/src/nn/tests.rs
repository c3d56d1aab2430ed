use super::*;
use crate::losses::{cross_entropy_loss, kd_loss, softmax_t, Distribution, LossConfig};
use crate::rng::SeededRng;
use crate::tensor::{Padding, Tensor};

fn random_batch(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.standard_normal()).collect()).unwrap()
}

/// Mean cross-entropy against hard labels, gradient already divided by B.
fn mean_ce(labels: Vec<usize>) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) {
    move |logits: &Tensor<f64>| {
        let b = logits.shape()[0];
        let c = logits.shape()[1];
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(b * c);
        for (i, &k) in labels.iter().enumerate() {
            let q = Distribution::one_hot(k, c).unwrap();
            let l = cross_entropy_loss(&q, logits.outer(i)).unwrap();
            value += l.value / b as f64;
            grad.extend(l.grad.iter().map(|g| g / b as f64));
        }
        (value, Tensor::new(vec![b, c], grad).unwrap())
    }
}

fn labels(rng: &mut SeededRng, b: usize, c: usize) -> Vec<usize> {
    (0..b).map(|_| rng.below(c)).collect()
}

fn check(spec: &ModelSpec, mode: Mode, batch: usize, seed: u64, eps: f64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed);
    let mut model: Model<f64> = Model::init(spec, &mut rng).unwrap();
    // Non-zero biases and BN shifts so their gradients are exercised away
    // from the symmetric starting point.
    for tensors in model.params_mut() {
        for t in tensors.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.standard_normal();
            }
        }
    }
    model.set_mode(mode);
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let x = random_batch(&mut rng, &shape);
    let y = labels(&mut rng, batch, spec.classes());
    grad_check(&model, mean_ce(y), &x, eps, seed ^ 0xD0).unwrap()
}

fn out(c: usize) -> LayerSpec {
    LayerSpec::Output { classes: c }
}

#[test]
fn init_is_deterministic() {
    let spec = presets_like_small_conv();
    let a: Model = Model::init(&spec, &mut SeededRng::new(11)).unwrap();
    let b: Model = Model::init(&spec, &mut SeededRng::new(11)).unwrap();
    assert_eq!(a, b);
    let c: Model = Model::init(&spec, &mut SeededRng::new(12)).unwrap();
    assert_ne!(a.flat_params(), c.flat_params());
}

fn presets_like_small_conv() -> ModelSpec {
    ModelSpec::new(
        vec![1, 8, 8],
        vec![
            LayerSpec::conv(1, 3, 3, 1, Padding::Same),
            LayerSpec::batch_norm(3),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::dense(48, 5),
            out(5),
        ],
    )
}

#[test]
fn glorot_bound_and_zero_biases() {
    let spec = ModelSpec::new(vec![784], vec![LayerSpec::dense(784, 10), out(10)]);
    let m: Model = Model::init(&spec, &mut SeededRng::new(1)).unwrap();
    let limit = (6.0f64 / 794.0).sqrt() as f32;
    let w = &m.params()[0][0];
    assert_eq!(w.shape(), [784, 10]);
    assert!(w.data().iter().all(|v| v.abs() <= limit));
    assert!(w.max_abs() > 0.9 * limit as f64);
    assert!(m.params()[0][1].data().iter().all(|&b| b == 0.0));

    let bn: Model = Model::init(&presets_like_small_conv(), &mut SeededRng::new(1)).unwrap();
    assert!(bn.params()[1][0].data().iter().all(|&g| g == 1.0));
    assert!(bn.params()[1][1].data().iter().all(|&s| s == 0.0));
    assert!(bn.params()[0][1].data().iter().all(|&b| b == 0.0));
}

#[test]
fn single_dense_forward_is_affine() {
    let spec = ModelSpec::new(vec![3], vec![LayerSpec::dense(3, 2), out(2)]);
    let w = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::new(vec![2], vec![0.5f32, -0.5]).unwrap();
    let m = Model::from_parts(&spec, vec![vec![w, b], vec![]], vec![None, None]).unwrap();
    let x = Tensor::new(vec![1, 3], vec![1.0f32, 0.0, -1.0]).unwrap();
    let pass = m.predict(&x).unwrap();
    assert_eq!(pass.logits.data(), [1.0 - 5.0 + 0.5, 2.0 - 6.0 - 0.5]);
    assert_eq!(pass.penultimate, x.reshape(&[1, 3]).unwrap());
}

#[test]
fn dropout_rate_zero_matches_eval() {
    let spec = ModelSpec::new(
        vec![6],
        vec![LayerSpec::dense(6, 4), LayerSpec::Relu, LayerSpec::Dropout { rate: 0.0 }, LayerSpec::dense(4, 3), out(3)],
    );
    let mut m: Model = Model::init(&spec, &mut SeededRng::new(2)).unwrap();
    let x = random_batch(&mut SeededRng::new(3), &[5, 6]).cast::<f32>();
    let eval = m.predict(&x).unwrap().logits;
    m.set_mode(Mode::Train);
    let train = m.forward(&x, None).unwrap().logits;
    assert_eq!(eval, train);
}

#[test]
fn dropout_zero_fraction_and_scaling() {
    let rate = 0.3;
    let spec = ModelSpec::new(vec![1000], vec![LayerSpec::Dropout { rate }, LayerSpec::dense(1000, 2), out(2)]);
    let mut m: Model = Model::init(&spec, &mut SeededRng::new(4)).unwrap();
    m.set_mode(Mode::Train);
    let x = Tensor::filled(&[100, 1000], 1.0f32);
    let pass = m.forward(&x, Some(&mut SeededRng::new(5))).unwrap();
    let kept = 1.0 / (1.0 - rate as f32);
    let acts = pass.penultimate.data();
    assert!(acts.iter().all(|&v| v == 0.0 || v == kept));
    let zeros = acts.iter().filter(|&&v| v == 0.0).count() as f64 / acts.len() as f64;
    assert!((zeros - rate).abs() < 0.01, "zero fraction {zeros}");
}

#[test]
fn dropout_in_train_mode_requires_rng() {
    let spec = ModelSpec::new(vec![4], vec![LayerSpec::Dropout { rate: 0.5 }, LayerSpec::dense(4, 2), out(2)]);
    let mut m: Model = Model::init(&spec, &mut SeededRng::new(4)).unwrap();
    m.set_mode(Mode::Train);
    let x = Tensor::filled(&[1, 4], 1.0f32);
    assert!(matches!(m.forward(&x, None), Err(NnError::MissingRng { index: 0 })));
}

#[test]
fn identical_rows_give_identical_logits() {
    let spec = presets_like_small_conv();
    let mut m: Model = Model::init(&spec, &mut SeededRng::new(8)).unwrap();
    m.set_mode(Mode::Eval);
    let one = random_batch(&mut SeededRng::new(9), &[1, 1, 8, 8]).cast::<f32>();
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let two = Tensor::new(vec![2, 1, 8, 8], data).unwrap();
    let logits = m.predict(&two).unwrap().logits;
    assert_eq!(logits.outer(0), logits.outer(1));
    assert_eq!(m.predict(&two).unwrap().logits, logits);
}

#[test]
fn batch_shape_is_checked() {
    let m: Model = Model::init(&presets_like_small_conv(), &mut SeededRng::new(8)).unwrap();
    let bad = Tensor::zeros(&[2, 1, 8, 7]);
    assert!(matches!(m.predict(&bad), Err(NnError::BatchShape { .. })));
}

#[test]
fn zero_logit_gradient_gives_zero_gradients() {
    let spec = presets_like_small_conv();
    let mut m: Model = Model::init(&spec, &mut SeededRng::new(6)).unwrap();
    m.set_mode(Mode::Train);
    let x = random_batch(&mut SeededRng::new(7), &[3, 1, 8, 8]).cast::<f32>();
    let pass = m.forward(&x, Some(&mut SeededRng::new(1))).unwrap();
    let g = m.backward(&pass, &Tensor::zeros(&[3, 5])).unwrap();
    assert_eq!(g.max_abs(), 0.0);
    assert!(m.backward(&pass, &Tensor::zeros(&[2, 5])).is_err());
}

#[test]
fn dense_weight_gradient_is_input_transpose_times_delta() {
    let spec = ModelSpec::new(vec![2], vec![LayerSpec::dense(2, 2), out(2)]);
    let m: Model<f64> = Model::init(&spec, &mut SeededRng::new(1)).unwrap();
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let dy = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let pass = m.predict(&x).unwrap();
    let g = m.backward(&pass, &dy).unwrap();
    // xᵀ·dy = [[1,3],[2,4]]·[[0.5,-1],[2,0.25]]
    assert_eq!(g.layers[0][0].data(), [6.5, -0.25, 9.0, -1.0]);
    assert_eq!(g.layers[0][1].data(), [2.5, -0.75]);
}

#[test]
fn batchnorm_running_statistics_follow_momentum() {
    let spec = ModelSpec::new(vec![2], vec![LayerSpec::batch_norm(2), LayerSpec::dense(2, 2), out(2)]);
    let mut m: Model<f64> = Model::init(&spec, &mut SeededRng::new(1)).unwrap();
    let x = Tensor::new(vec![2, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap();
    m.forward(&x, None).unwrap();
    let s = m.bn_stats()[0].as_ref().unwrap();
    assert!((s.mean[0] - 0.2).abs() < 1e-12 && (s.mean[1] - 1.5).abs() < 1e-12);
    // Unbiased batch variances 2 and 50.
    assert!((s.var[0] - (0.9 + 0.2)).abs() < 1e-12 && (s.var[1] - (0.9 + 5.0)).abs() < 1e-12);
    m.set_mode(Mode::Eval);
    let before = m.clone();
    m.predict(&x).unwrap();
    assert_eq!(m, before);
}

#[test]
fn grad_check_dense() {
    let spec = ModelSpec::new(vec![4], vec![LayerSpec::dense(4, 3), out(3)]);
    let r = check(&spec, Mode::Eval, 2, 1, 1e-3);
    assert_eq!(r.checked, 15);
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

#[test]
fn grad_check_conv_relu() {
    let spec = ModelSpec::new(
        vec![1, 5, 5],
        vec![
            LayerSpec::conv(1, 2, 3, 1, Padding::Valid),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(18, 3),
            out(3),
        ],
    );
    let eps = 1e-3;
    // Central differences are meaningless across a ReLU kink, so use the
    // first fixture whose pre-activations all stay clear of zero under any
    // single-parameter perturbation of size eps.
    let seed = (0..64u64)
        .find(|&seed| relu_margin(&spec, seed) > 2.0 * eps)
        .expect("a kink-free fixture");
    let r = check(&spec, Mode::Eval, 2, seed, eps);
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

/// Smallest `|z| / (1 + max|x|)` over the first conv layer's outputs for the
/// fixture [`check`] builds from `seed`: a bound on how far the nearest
/// pre-activation is from its kink, per unit of parameter perturbation.
fn relu_margin(spec: &ModelSpec, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut model: Model<f64> = Model::init(spec, &mut rng).unwrap();
    for tensors in model.params_mut() {
        for t in tensors.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.standard_normal();
            }
        }
    }
    let mut shape = vec![2];
    shape.extend_from_slice(&spec.input_shape);
    let x = random_batch(&mut rng, &shape);
    let (kernels, bias) = (&model.params()[0][0], &model.params()[0][1]);
    let (stride, padding) = match spec.layers[0] {
        LayerSpec::Conv2d { stride, padding, .. } => (stride, padding),
        _ => unreachable!(),
    };
    let mut margin = f64::INFINITY;
    for ex in 0..2 {
        let input = Tensor::new(spec.input_shape.clone(), x.outer(ex).to_vec()).unwrap();
        let z = crate::tensor::conv2d(&input, kernels, stride, padding).unwrap();
        let per = z.len() / bias.len();
        for (i, v) in z.data().iter().enumerate() {
            margin = margin.min((v + bias.data()[i / per]).abs() / (1.0 + input.max_abs()));
        }
    }
    margin
}

#[test]
fn grad_check_batchnorm_train_mode() {
    let spec = ModelSpec::new(
        vec![2, 4, 4],
        vec![
            LayerSpec::conv(2, 3, 3, 1, Padding::Same),
            LayerSpec::batch_norm(3),
            LayerSpec::Flatten,
            LayerSpec::dense(48, 6),
            LayerSpec::batch_norm(6),
            LayerSpec::dense(6, 3),
            out(3),
        ],
    );
    let r = check(&spec, Mode::Train, 4, 3, 1e-3);
    assert!(r.max_relative_error < 1e-3, "{r:?}");
}

#[test]
fn grad_check_rejects_bad_eps_and_non_finite_loss() {
    let spec = ModelSpec::new(vec![2], vec![LayerSpec::dense(2, 2), out(2)]);
    let m: Model<f64> = Model::init(&spec, &mut SeededRng::new(1)).unwrap();
    let x = Tensor::zeros(&[1, 2]);
    assert!(grad_check(&m, mean_ce(vec![0]), &x, 0.0, 0).is_err());
    let nan = |l: &Tensor<f64>| (f64::NAN, l.clone());
    assert!(matches!(grad_check(&m, nan, &x, 1e-3, 0), Err(NnError::NonFiniteLoss)));
}

#[test]
fn grad_check_through_distillation_loss() {
    let spec = ModelSpec::new(
        vec![6],
        vec![LayerSpec::dense(6, 5), LayerSpec::Relu, LayerSpec::dense(5, 4), out(4)],
    );
    let mut rng = SeededRng::new(21);
    let model: Model<f64> = Model::init(&spec, &mut rng).unwrap();
    let x = random_batch(&mut rng, &[3, 6]);
    let teacher: Vec<Distribution> = (0..3)
        .map(|_| softmax_t(&(0..4).map(|_| 3.0 * rng.standard_normal()).collect::<Vec<_>>(), 9.0).unwrap())
        .collect();
    let y = labels(&mut rng, 3, 4);
    let cfg = LossConfig::default();
    let loss = move |logits: &Tensor<f64>| {
        let mut value = 0.0;
        let mut grad = Vec::new();
        for i in 0..3 {
            let q = Distribution::one_hot(y[i], 4).unwrap();
            let l = kd_loss(&q, &teacher[i], logits.outer(i), &cfg).unwrap();
            value += l.value / 3.0;
            grad.extend(l.grad.iter().map(|g| g / 3.0));
        }
        (value, Tensor::new(vec![3, 4], grad).unwrap())
    };
    let r = grad_check(&model, loss, &x, 1e-5, 0).unwrap();
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

/// A random stack that exercises every layer type.
fn random_spec(rng: &mut SeededRng) -> ModelSpec {
    let c = 1 + rng.below(2);
    let hw = [4, 6][rng.below(2)];
    let co = 1 + rng.below(3);
    let k = 1 + rng.below(3);
    let padding = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
    let stride = if padding == Padding::Same { 1 } else { 1 + rng.below(2) };
    // Batch norm sits after the ReLU: a bias feeding batch norm directly has
    // an exactly zero gradient, which a relative-error check cannot score.
    let mut layers = vec![LayerSpec::conv(c, co, k, stride, padding), LayerSpec::Relu, LayerSpec::batch_norm(co)];
    let conv_out = layers[0].output_shape(0, &[c, hw, hw]).unwrap();
    let mut flat = conv_out.iter().product::<usize>();
    if conv_out[1] % 2 == 0 && conv_out[2] % 2 == 0 {
        layers.push(LayerSpec::MaxPool2);
        flat /= 4;
    }
    let hidden = 2 + rng.below(4);
    let classes = 2 + rng.below(3);
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(flat, hidden),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::dense(hidden, classes),
        out(classes),
    ]);
    ModelSpec::new(vec![c, hw, hw], layers)
}

#[test]
fn every_layer_type_passes_grad_check_over_seeds() {
    for seed in 0..24u64 {
        let mut rng = SeededRng::new(1000 + seed);
        let spec = random_spec(&mut rng);
        spec.validate().unwrap();
        // Eval mode isolates the layer Jacobians, train mode adds dropout
        // masks and batch-statistics coupling.
        let eval = check(&spec, Mode::Eval, 3, seed, 1e-5);
        assert!(eval.max_relative_error < 1e-4, "seed {seed} eval {eval:?} {spec:?}");
        let train = check(&spec, Mode::Train, 3, seed, 1e-5);
        assert!(train.max_relative_error < 1e-3, "seed {seed} train {train:?} {spec:?}");
    }
}

