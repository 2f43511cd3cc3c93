//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use numgrad::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use segzsl::networks::{
    encode_batch, reparameterize_vars, Dims, EncoderParams, GaussianVars, GeneratorParams, ModelParams, Network,
    RegressorParams,
};
use segzsl::objectives::{
    kl_diag_gauss_vars, loss_vae, AttributeBank, LabeledBatch, ModelGrads, PosteriorNoise, PriorDraw, Session,
    Trainable,
};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-8;

pub fn small_dims() -> Dims {
    Dims::new(6, 3, 2, 4).unwrap()
}

/// Initialized parameters with every tensor (biases included) jittered, so no
/// ReLU sits exactly on its kink.
pub fn jittered_params(dims: Dims, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut all: Vec<&mut Tensor> = p.encoder.tensors_mut();
    all.extend(p.generator.tensors_mut());
    all.extend(p.regressor.tensors_mut());
    for t in all {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    p
}

fn tensors_mut(p: &mut ModelParams) -> Vec<&mut Tensor> {
    let mut all: Vec<&mut Tensor> = p.encoder.tensors_mut();
    all.extend(p.generator.tensors_mut());
    all.extend(p.regressor.tensors_mut());
    all
}

/// Which flattened tensor indices belong to the selected networks.
fn selected(mask: Trainable) -> Vec<bool> {
    let e = EncoderParams::tensor_names().len();
    let g = GeneratorParams::tensor_names().len();
    let r = RegressorParams::tensor_names().len();
    std::iter::repeat(mask.encoder)
        .take(e)
        .chain(std::iter::repeat(mask.generator).take(g))
        .chain(std::iter::repeat(mask.regressor).take(r))
        .collect()
}

pub fn flatten(grads: &ModelGrads) -> Vec<Tensor> {
    grads
        .encoder
        .iter()
        .chain(&grads.generator)
        .chain(&grads.regressor)
        .cloned()
        .collect()
}

/// Central differences of a scalar function of the parameters, for the
/// tensors of the networks selected by `mask` (others are `None`).
pub fn numeric_grads(params: &ModelParams, mask: Trainable, f: &dyn Fn(&ModelParams) -> f64) -> Vec<Option<Tensor>> {
    let mut work = params.clone();
    let sel = selected(mask);
    let mut out = Vec::with_capacity(sel.len());
    for (gi, &on) in sel.iter().enumerate() {
        if !on {
            out.push(None);
            continue;
        }
        let len = tensors_mut(&mut work)[gi].len();
        let mut g = Tensor::zeros(tensors_mut(&mut work)[gi].shape());
        for j in 0..len {
            let orig = tensors_mut(&mut work)[gi].data()[j];
            tensors_mut(&mut work)[gi].data_mut()[j] = orig + FD_STEP;
            let up = f(&work);
            tensors_mut(&mut work)[gi].data_mut()[j] = orig - FD_STEP;
            let down = f(&work);
            tensors_mut(&mut work)[gi].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(Some(g));
    }
    out
}

/// Evaluates a session-built loss at the given parameters.
pub fn eval_loss(params: &ModelParams, loss: &dyn Fn(&mut Session) -> Var) -> f64 {
    let mut s = Session::new(params, Trainable::ALL);
    let v = loss(&mut s);
    s.value(v)
}

pub fn autodiff(params: &ModelParams, loss: &dyn Fn(&mut Session) -> Var) -> ModelGrads {
    let mut s = Session::new(params, Trainable::ALL);
    let v = loss(&mut s);
    s.gradients(v).unwrap()
}

/// Largest relative error over compared entries; pairs within `ABS_TOL` count as equal.
pub fn max_rel_error(auto: &[Tensor], numeric: &[Option<Tensor>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in auto.iter().zip(numeric) {
        let Some(n) = n else { continue };
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let diff = (x - y).abs();
            if diff <= ABS_TOL {
                continue;
            }
            worst = worst.max(diff / x.abs().max(y.abs()));
        }
    }
    worst
}

/// Autodiff of `loss` against central differences of `loss` itself on the
/// networks in `mask`.
pub fn grad_check(params: &ModelParams, mask: Trainable, loss: &dyn Fn(&mut Session) -> Var) -> f64 {
    grad_check_with(params, mask, loss, &|p| eval_loss(p, loss))
}

/// Autodiff of `loss` against central differences of a separately written
/// forward function `oracle`.
pub fn grad_check_with(
    params: &ModelParams,
    mask: Trainable,
    loss: &dyn Fn(&mut Session) -> Var,
    oracle: &dyn Fn(&ModelParams) -> f64,
) -> f64 {
    let auto = flatten(&autodiff(params, loss));
    let numeric = numeric_grads(params, mask, oracle);
    max_rel_error(&auto, &numeric)
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn params_bits(p: &ModelParams) -> Vec<u64> {
    p.tensors().into_iter().flat_map(bits).collect()
}

/// A small benchmark: 4 seen and 2 unseen classes, D=6, L=5.
pub fn tiny_benchmark(seed: u64) -> (segzsl::data::DatasetContainer, segzsl::data::SyntheticTruth) {
    segzsl::data::gen_synthetic_benchmark(&segzsl::data::SyntheticSpec {
        seen: 4,
        unseen: 2,
        features: 6,
        attributes: 5,
        n_per_class: 20,
        noise_sigma: 0.1,
        nuisance_dim: 1,
        seed,
    })
    .unwrap()
}

/// Seen rows of a container as a training batch, plus its attribute bank.
pub fn seen_batch(ds: &segzsl::data::DatasetContainer) -> (segzsl::objectives::LabeledBatch, segzsl::objectives::AttributeBank) {
    let rows = ds.rows_of_classes(&ds.seen);
    (ds.batch(&rows).unwrap(), ds.bank().unwrap())
}

pub fn tiny_train_config(seed: u64) -> segzsl::trainer::TrainConfig {
    segzsl::trainer::TrainConfig {
        batch_size: 16,
        pretrain_epochs: 2,
        joint_epochs: 2,
        latent_dim: 2,
        hidden: 8,
        seed,
        ..Default::default()
    }
}

pub const ENCODER: Trainable = Trainable {
    encoder: true,
    generator: false,
    regressor: false,
};
pub const GENERATOR: Trainable = Trainable {
    encoder: false,
    generator: true,
    regressor: false,
};

/// Random inputs for the objective gradient checks on [`small_dims`].
pub struct Fixture {
    pub params: ModelParams,
    pub bank: AttributeBank,
    pub batch: LabeledBatch,
    pub noise: PosteriorNoise,
    pub draw: PriorDraw,
}

pub fn fixture(seed: u64) -> Fixture {
    let dims = small_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attrs: Vec<f64> = (0..4 * dims.attributes).map(|_| rng.random_range(0..2) as f64).collect();
    let bank = AttributeBank::new(Tensor::matrix(4, dims.attributes, attrs).unwrap(), vec![0, 1], vec![2, 3]).unwrap();
    let m = 5;
    let x: Vec<f64> = (0..m * dims.features).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
    let batch = LabeledBatch::new(Tensor::matrix(m, dims.features, x).unwrap(), labels).unwrap();
    let noise = PosteriorNoise::sample(&mut rng, m, dims).unwrap();
    let draw = PriorDraw::sample(&mut rng, 4, &bank, dims).unwrap();
    Fixture {
        params: jittered_params(dims, seed),
        bank,
        batch,
        noise,
        draw,
    }
}

/// Posterior-mode latent loss with its target computed once from `base` and
/// held constant, i.e. the function whose gradient the stop-gradient defines.
pub fn latent_posterior_fixed_target(p: &ModelParams, base: &ModelParams, f: &Fixture) -> f64 {
    let (qm, ql) = encode_batch(&base.encoder, &f.batch.x).unwrap();
    let mut s = Session::new(p, Trainable::ALL);
    let vae = loss_vae(&mut s, &f.batch, &f.bank, &f.noise).unwrap();
    let eps = s.graph.constant(f.noise.eps_x.clone());
    let x_hat = reparameterize_vars(&mut s.graph, vae.recon_dist, eps).unwrap();
    let enc = s.encoder.forward(&mut s.graph, x_hat).unwrap();
    let q = GaussianVars {
        mean: s.graph.constant(qm),
        logvar: s.graph.constant(ql),
    };
    let kl = kl_diag_gauss_vars(&mut s.graph, enc, q).unwrap();
    s.value(kl)
}

