use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ssvr::loss::{
    kl_loss, reconstruction_loss, regression_loss, total_loss, total_loss_with_entropy, Batch, LossConfig,
    LossError,
};
use ssvr::model::{
    ordinal_encode, Arch, GaussianLatent, ModelParams, NoiseSource, OrdinalPrediction, ParamGroup,
    REGRESSOR_OUTPUT,
};
use ssvr::tensor::{finite_diff_grad, GradCheck, Tensor};

/// Replays a fixed noise stream so repeated evaluations see the same samples.
struct Replay {
    values: Vec<f64>,
    pos: usize,
}

impl Replay {
    fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }
}

impl NoiseSource for Replay {
    fn standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.values[self.pos % self.values.len()];
            self.pos += 1;
        }
    }
}

fn tiny_arch() -> Arch {
    Arch {
        image_side: 8,
        latent_dim: 4,
        latent_shape: [4, 1, 1],
        blocks: 2,
        base_channels: 3,
        regressor_blocks: 1,
        regressor_hidden: 4,
    }
}

/// Generic evaluation point: zero-initialized biases put ReLU inputs exactly
/// on the kink wherever upstream activations vanish.
fn random_biases(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).filter(|k| k.ends_with(".b")).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().values_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
}

fn random_images(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..5 {
        let d = 6;
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = GaussianLatent::new(mu.clone(), lv.clone()).unwrap();
        let closed = kl_loss(&q, 1.0).unwrap();
        // E_q[log q(z) − log p(z)] estimated from 2·10⁵ draws.
        let draws = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let mut log_ratio = 0.0;
            for k in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = mu[k] + (0.5 * lv[k]).exp() * e;
                let log_q = -0.5 * (lv[k] + e * e);
                let log_p = -0.5 * z * z;
                log_ratio += log_q - log_p;
            }
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        let mean = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((mean - closed).abs() < 3.0 * se, "closed {closed}, mc {mean} ± {se}");
    }
}

#[test]
fn kl_is_nonnegative_and_zero_only_at_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let mu: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lv: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let kl = kl_loss(&GaussianLatent::new(mu, lv).unwrap(), 1.0).unwrap();
        assert!(kl > 0.0);
    }
}

#[test]
fn regression_loss_is_nonnegative_and_minimal_at_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for c in 0..=3 {
        let label = ordinal_encode(c).unwrap();
        let at_label = regression_loss(&OrdinalPrediction(label.as_f64()), &label);
        for _ in 0..200 {
            let p = OrdinalPrediction([rng.gen(), rng.gen(), rng.gen()]);
            let l = regression_loss(&p, &label);
            assert!(l >= 0.0);
            assert!(l >= at_label);
        }
    }
}

#[test]
fn reconstruction_matches_per_pixel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = LossConfig::for_arch(&tiny_arch());
    for _ in 0..20 {
        let a: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let mut naive = 0.0;
        for i in 0..64 {
            naive += 0.5 * (a[i] - b[i]).powi(2) / 10.0 / 64.0;
        }
        let x = Tensor::new(vec![8, 8], a).unwrap();
        let y = Tensor::new(vec![8, 8], b).unwrap();
        assert!((reconstruction_loss(&x, &y, &cfg).unwrap() - naive).abs() < 1e-12);
    }
}

#[test]
fn unlabeled_batch_has_no_regression_term() {
    let params = ModelParams::init(tiny_arch(), 1).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs = random_images(&mut rng, 3, 8);
    let batch = Batch::unlabeled(imgs.iter().map(Vec::as_slice).collect());
    let eval = total_loss(&batch, &params, &cfg, &mut rng).unwrap();
    let b = eval.breakdown;
    assert!(b.regression.is_none() && b.entropy.is_none());
    assert!((b.total - (b.kl + b.reconstruction)).abs() < 1e-12);
    assert!(eval
        .bindings
        .iter()
        .all(|(name, _)| ParamGroup::of(name) != Some(ParamGroup::Regressor)));
}

#[test]
fn labeled_breakdown_sums_to_total() {
    let params = ModelParams::init(tiny_arch(), 2).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs = random_images(&mut rng, 2, 8);
    let labels = vec![ordinal_encode(0).unwrap(), ordinal_encode(3).unwrap()];
    let batch = Batch::labeled(imgs.iter().map(Vec::as_slice).collect(), labels);
    let b = total_loss(&batch, &params, &cfg, &mut rng).unwrap().breakdown;
    assert!(b.kl >= 0.0 && b.reconstruction >= 0.0 && b.regression.unwrap() >= 0.0);
    assert!((b.total - (b.kl + b.regression.unwrap() + b.reconstruction)).abs() < 1e-12);
}

#[test]
fn mixed_and_empty_batches_are_rejected() {
    let params = ModelParams::init(tiny_arch(), 2).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs = random_images(&mut rng, 2, 8);
    let mixed = Batch {
        images: imgs.iter().map(Vec::as_slice).collect(),
        labels: vec![Some(ordinal_encode(1).unwrap()), None],
    };
    assert_eq!(total_loss(&mixed, &params, &cfg, &mut rng).unwrap_err(), LossError::MixedBatch);
    let empty = Batch::unlabeled(Vec::new());
    assert_eq!(total_loss(&empty, &params, &cfg, &mut rng).unwrap_err(), LossError::EmptyBatch);
}

#[test]
fn duplicated_images_give_the_single_image_value() {
    let params = ModelParams::init(tiny_arch(), 5).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_images(&mut rng, 1, 8).pop().unwrap();
    let label = ordinal_encode(2).unwrap();
    let noise: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
    let single = Batch::labeled(vec![&img], vec![label]);
    let double = Batch::labeled(vec![&img, &img], vec![label, label]);
    let a = total_loss(&single, &params, &cfg, &mut Replay::new(noise.clone())).unwrap().breakdown;
    let b = total_loss(&double, &params, &cfg, &mut Replay::new(noise)).unwrap().breakdown;
    assert!((a.total - b.total).abs() < 1e-12);
    assert!((a.kl - b.kl).abs() < 1e-12);
}

#[test]
fn batch_value_is_mean_of_single_image_values() {
    let params = ModelParams::init(tiny_arch(), 7).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let imgs = random_images(&mut rng, 2, 8);
    let labels = [ordinal_encode(1).unwrap(), ordinal_encode(2).unwrap()];
    let noise: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
    let pair = Batch::labeled(vec![&imgs[0], &imgs[1]], labels.to_vec());
    let joint = total_loss(&pair, &params, &cfg, &mut Replay::new(noise.clone())).unwrap().breakdown;
    let first = Batch::labeled(vec![&imgs[0]], vec![labels[0]]);
    let second = Batch::labeled(vec![&imgs[1]], vec![labels[1]]);
    let a = total_loss(&first, &params, &cfg, &mut Replay::new(noise[..4].to_vec())).unwrap().breakdown;
    let b = total_loss(&second, &params, &cfg, &mut Replay::new(noise[4..].to_vec())).unwrap().breakdown;
    assert!((joint.total - (a.total + b.total) / 2.0).abs() < 1e-10);
}

/// Evaluates the objective with parameter `name` replaced by `value`.
fn loss_with(params: &ModelParams, name: &str, value: &Tensor, batch: &Batch<'_>, noise: &[f64], entropy: Option<f64>) -> f64 {
    let mut p = params.clone();
    p.get_mut(name).unwrap().values_mut().copy_from_slice(value.values());
    let cfg = LossConfig::for_arch(p.arch());
    let mut replay = Replay::new(noise.to_vec());
    match entropy {
        Some(w) => total_loss_with_entropy(batch, &p, &cfg, &mut replay, w),
        None => total_loss(batch, &p, &cfg, &mut replay),
    }
    .unwrap()
    .breakdown
    .total
}

fn check_all_params(params: &ModelParams, batch: &Batch<'_>, noise: &[f64], entropy: Option<f64>) -> GradCheck {
    let cfg = LossConfig::for_arch(params.arch());
    let mut eval = match entropy {
        Some(w) => total_loss_with_entropy(batch, params, &cfg, &mut Replay::new(noise.to_vec()), w),
        None => total_loss(batch, params, &cfg, &mut Replay::new(noise.to_vec())),
    }
    .unwrap();
    let grads = eval.graph.backward(eval.total).unwrap();
    let mut check = GradCheck::compare(&[], &[]);
    for (name, id) in &eval.bindings {
        let analytic = grads.get(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params.get(name).unwrap().numel()]);
        let numeric = finite_diff_grad(
            |v: &Tensor| Ok::<_, ()>(loss_with(params, name, v, batch, noise, entropy)),
            params.get(name).unwrap(),
            1e-5,
        )
        .unwrap();
        check = check.merge(GradCheck::compare(&analytic, &numeric));
    }
    check
}

#[test]
fn unlabeled_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for instance in 0..3 {
        let mut params = ModelParams::init(tiny_arch(), 100 + instance).unwrap();
        random_biases(&mut params, &mut rng);
        let imgs = random_images(&mut rng, 2, 8);
        let batch = Batch::unlabeled(imgs.iter().map(Vec::as_slice).collect());
        let noise: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let check = check_all_params(&params, &batch, &noise, Some(0.1));
        assert!(check.passes(1e-4, 1e-6), "{check:?}");
    }
}

#[test]
fn labeled_objective_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for instance in 0..3 {
        let mut params = ModelParams::init(tiny_arch(), 200 + instance).unwrap();
        random_biases(&mut params, &mut rng);
        let imgs = random_images(&mut rng, 2, 8);
        let labels = vec![ordinal_encode(rng.gen_range(0..4)).unwrap(), ordinal_encode(rng.gen_range(0..4)).unwrap()];
        let batch = Batch::labeled(imgs.iter().map(Vec::as_slice).collect(), labels);
        let noise: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let check = check_all_params(&params, &batch, &noise, None);
        assert!(check.passes(1e-4, 1e-6), "{check:?}");
    }
}

#[test]
fn zero_entropy_weight_leaves_regressor_gradient_zero() {
    let params = ModelParams::init(tiny_arch(), 3).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let imgs = random_images(&mut rng, 2, 8);
    let batch = Batch::unlabeled(imgs.iter().map(Vec::as_slice).collect());
    let mut eval = total_loss_with_entropy(&batch, &params, &cfg, &mut rng, 0.0).unwrap();
    let grads = eval.graph.backward(eval.total).unwrap();
    for (name, id) in &eval.bindings {
        if ParamGroup::of(name) == Some(ParamGroup::Regressor) {
            assert!(grads.get(*id).unwrap().iter().all(|&g| g == 0.0), "{name}");
        }
    }
}

#[test]
fn entropy_penalty_at_uniform_prediction() {
    let mut params = ModelParams::init(tiny_arch(), 3).unwrap();
    params.zero_layer(REGRESSOR_OUTPUT).unwrap();
    let cfg = LossConfig::for_arch(params.arch());
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let imgs = random_images(&mut rng, 2, 8);
    let batch = Batch::unlabeled(imgs.iter().map(Vec::as_slice).collect());
    let b = total_loss_with_entropy(&batch, &params, &cfg, &mut rng, 1.0).unwrap().breakdown;
    assert!((b.entropy.unwrap() - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
}
