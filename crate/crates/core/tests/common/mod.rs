//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use amint::layers::{Grads, Mode};
use amint::nets::{BackboneSpec, ConvBlockSpec, EnhancedModel, InputShape, MintHeadSpec, Setup};
use amint::objective::{binary_cross_entropy, combine, softmax_cross_entropy, LossNormalizer, LossWeights};
use amint::tensor::{MapShape, Maps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(setup: Setup, seed: u64) -> EnhancedModel<f64> {
    let spec = BackboneSpec {
        blocks: vec![ConvBlockSpec::new(2, 2), ConvBlockSpec::new(2, 3), ConvBlockSpec::new(2, 3)],
        num_classes: 3,
        input_shape: InputShape::new(8, 8, 1),
    };
    let head = MintHeadSpec { per_path_conv_channels: vec![2], dropout: 0.3, hidden_dim: 4 };
    let mut model = EnhancedModel::new(spec, setup, head, seed).unwrap();
    // Zero biases put all-zero patches exactly on a ReLU kink, where central
    // differences are meaningless.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            p.value.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    model
}

pub struct Case {
    pub images: Maps<f64>,
    pub class: Vec<usize>,
    pub member: Vec<u8>,
    pub n_extra: usize,
    pub weights: LossWeights,
    pub norms: (LossNormalizer, LossNormalizer),
}

pub fn case(seed: u64, weights: LossWeights) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7;
    let data = (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let images = Maps::from_vec(MapShape::new(1, 8, 8), n, data).unwrap();
    let n_extra = 1;
    let class = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let norm = |v| LossNormalizer { ema_abs: v, initialized: true, ..LossNormalizer::default() };
    Case { images, class, member: vec![1, 1, 1, 0, 0, 0], n_extra, weights, norms: (norm(1.7), norm(0.6)) }
}

/// Total loss and analytic gradient. Dropout masks come from a fresh rng
/// with the same seed on every call so perturbed passes see the same mask.
pub fn total_and_grad(model: &EnhancedModel<f64>, c: &Case) -> (f64, Grads<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fwd = model.joint_forward(&c.images, 0..c.n_extra + 3, c.n_extra..c.images.batch, Mode::Train, &mut rng).unwrap();
    let (la, mut dl) = softmax_cross_entropy(fwd.logits.as_ref().unwrap(), &c.class).unwrap();
    let (lm, mut dp) = binary_cross_entropy(fwd.probs.as_ref().unwrap(), &c.member).unwrap();
    let params = model.params();
    let (out, s) = combine(la, lm, (&c.norms.0, &c.norms.1), &c.weights, &params);
    dl.values.iter_mut().for_each(|g| *g *= s.audited);
    dp.iter_mut().for_each(|g| *g *= s.mint);
    let mut grads = model.zero_grads();
    model.joint_backward(&fwd, Some(&dl), Some(&dp), &mut grads);
    for (g, p) in grads.bufs.iter_mut().zip(&params) {
        for (gi, w) in g.iter_mut().zip(&p.value) {
            *gi += s.l2 * w;
        }
    }
    (out.total, grads)
}

pub fn max_rel_error(setup: Setup, seed: u64, weights: LossWeights, samples: usize) -> f64 {
    let mut model = tiny(setup, seed);
    assert!(model.num_parameters() <= 1000, "{} parameters", model.num_parameters());
    let c = case(seed, weights);
    let (_, g) = total_and_grad(&model, &c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let n_slots = model.params().len();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let slot = rng.gen_range(0..n_slots);
        let idx = rng.gen_range(0..model.params()[slot].len());
        let orig = model.params()[slot].value[idx];
        model.params_mut()[slot].value[idx] = orig + h;
        let (lp, _) = total_and_grad(&model, &c);
        model.params_mut()[slot].value[idx] = orig - h;
        let (lm, _) = total_and_grad(&model, &c);
        model.params_mut()[slot].value[idx] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = g.bufs[slot][idx];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Largest absolute gap between the combined gradient with `λ2 = 0, c = 0`
/// and the raw audited gradient scaled by `λ1 / ema`. The scale is 2, so
/// the two should agree bit for bit.
pub fn audited_scaling_gap(setup: Setup, seed: u64) -> f64 {
    let model = tiny(setup, seed);
    let mut c = case(seed, LossWeights { lambda1: 1.5, lambda2: 0.0, l2_coeff: 0.0 });
    c.norms.0.ema_abs = 0.75;
    let (_, combined) = total_and_grad(&model, &c);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fwd = model.joint_forward(&c.images, 0..c.n_extra + 3, c.n_extra..c.images.batch, Mode::Train, &mut rng).unwrap();
    let (_, dl) = softmax_cross_entropy(fwd.logits.as_ref().unwrap(), &c.class).unwrap();
    let mut raw = model.zero_grads();
    model.joint_backward(&fwd, Some(&dl), None, &mut raw);
    let scale = 1.5 / 0.75;
    combined.bufs.iter().flatten().zip(raw.bufs.iter().flatten()).map(|(a, b)| (a - scale * b).abs()).fold(0.0, f64::max)
}

/// Synthetic 28×28 grayscale pool with random pixels and cycling labels.
pub fn noise_handle(n_train: usize, n_test: usize, seed: u64) -> amint::data::DatasetHandle {
    use amint::data::{DatasetHandle, DatasetName, ImagePool};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = InputShape::new(28, 28, 1);
    let mut mk = |n: usize| {
        let pixels = (0..n * 784).map(|_| rng.gen::<u8>()).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        ImagePool::new(shape, pixels, labels).unwrap()
    };
    let train = mk(n_train);
    let test = mk(n_test);
    DatasetHandle::from_pools(DatasetName::Mnist, 10, train, test)
}

/// Dataset root for live checks: `$AMINT_DATA_DIR`, else `data/` at the
/// workspace root.
pub fn data_root() -> std::path::PathBuf {
    std::env::var_os(amint::experiment::DATA_ENV)
        .map(Into::into)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}
