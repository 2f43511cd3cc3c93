//! Training objectives.
//!
//! Each loss is built on a [`Session`], which binds the three networks to a
//! fresh graph. Losses enforce their own gradient routing with detached
//! copies, independent of which networks the session marks trainable:
//!
//! | loss                        | receives gradient        |
//! |-----------------------------|--------------------------|
//! | [`loss_sup`]                | regressor                |
//! | [`loss_unsup`]              | regressor (x̂ detached)  |
//! | [`loss_vae`]                | encoder, generator       |
//! | [`loss_cyclic_attr`]        | generator (regressor detached) |
//! | [`loss_reg`]                | generator                |
//! | [`loss_latent_consistency`] | encoder, generator (target detached) |
//!
//! Every loss is a mean over its batch or draws. Regressor likelihoods use a
//! unit-variance Gaussian with constants dropped, i.e. `½‖â − a‖²`.

use std::str::FromStr;

use numgrad::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{
    reparameterize_vars, BoundEncoder, BoundGenerator, BoundRegressor, Dims, GaussianDiag,
    GaussianVars, ModelParams,
};

/// Weights of the auxiliary terms in the regressor and generator objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_reg: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 0.1,
            lambda_c: 0.1,
            lambda_reg: 0.1,
            lambda_e: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_r: 0.0,
            lambda_c: 0.0,
            lambda_reg: 0.0,
            lambda_e: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_c", self.lambda_c),
            ("lambda_reg", self.lambda_reg),
            ("lambda_e", self.lambda_e),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Class-attribute matrix (one row per class id) and the seen/unseen partition.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBank {
    attrs: Tensor,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl AttributeBank {
    pub fn new(attrs: Tensor, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        if attrs.shape().len() != 2 {
            return Err(Error::InvalidConfig("attribute matrix must be 2-D".into()));
        }
        if attrs.rows() == 0 {
            return Err(Error::EmptyBank);
        }
        let c = attrs.rows();
        if let Some(&bad) = seen.iter().chain(&unseen).find(|&&k| k >= c) {
            return Err(Error::UnknownClass(bad));
        }
        if let Some(dup) = seen.iter().find(|k| unseen.contains(k)) {
            return Err(Error::InvalidConfig(format!("class {dup} is both seen and unseen")));
        }
        Ok(Self { attrs, seen, unseen })
    }

    pub fn num_classes(&self) -> usize {
        self.attrs.rows()
    }

    pub fn dim(&self) -> usize {
        self.attrs.cols()
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn matrix(&self) -> &Tensor {
        &self.attrs
    }

    pub fn row(&self, class: usize) -> Result<&[f64]> {
        if class >= self.num_classes() {
            return Err(Error::UnknownClass(class));
        }
        Ok(self.attrs.row(class))
    }

    /// Attribute rows for each label, stacked `m × L`.
    pub fn gather(&self, classes: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(classes.len() * self.dim());
        for &c in classes {
            data.extend_from_slice(self.row(c)?);
        }
        Ok(Tensor::matrix(classes.len(), self.dim(), data)?)
    }
}

/// Labeled minibatch of real features.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != labels.len() {
            return Err(Error::DimMismatch {
                what: "batch labels",
                expected: x.rows(),
                found: labels.len(),
            });
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Randomness for generator-side terms: `z ~ N(0, I)`, a class drawn uniformly
/// from every row of the bank, and the feature-space reparameterization noise.
#[derive(Debug, Clone)]
pub struct PriorDraw {
    pub z: Tensor,
    pub classes: Vec<usize>,
    pub eps: Tensor,
}

impl PriorDraw {
    /// Per row, in order: `d_z` latent normals, one class index, `D` feature normals.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, bank: &AttributeBank, dims: Dims) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyBatch("prior draw"));
        }
        let c = bank.num_classes();
        let mut z = Vec::with_capacity(n * dims.latent);
        let mut eps = Vec::with_capacity(n * dims.features);
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            z.extend((0..dims.latent).map(|_| rng.sample::<f64, _>(StandardNormal)));
            classes.push(rng.random_range(0..c));
            eps.extend((0..dims.features).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        Ok(Self {
            z: Tensor::matrix(n, dims.latent, z)?,
            classes,
            eps: Tensor::matrix(n, dims.features, eps)?,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Reparameterization noise for a labeled batch: `eps_z` for the encoder
/// posterior, `eps_x` for sampling a reconstruction.
#[derive(Debug, Clone)]
pub struct PosteriorNoise {
    pub eps_z: Tensor,
    pub eps_x: Tensor,
}

impl PosteriorNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, m: usize, dims: Dims) -> Result<Self> {
        let mut normals = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample(StandardNormal)).collect() };
        let eps_z = normals(m * dims.latent);
        let eps_x = normals(m * dims.features);
        Ok(Self {
            eps_z: Tensor::matrix(m, dims.latent, eps_z)?,
            eps_x: Tensor::matrix(m, dims.features, eps_x)?,
        })
    }
}

/// Which networks a [`Session`] registers as gradient-receiving parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub generator: bool,
    pub regressor: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        encoder: true,
        generator: true,
        regressor: true,
    };
    pub const REGRESSOR: Self = Self {
        encoder: false,
        generator: false,
        regressor: true,
    };
    pub const ENCODER_GENERATOR: Self = Self {
        encoder: true,
        generator: true,
        regressor: false,
    };
}

/// A graph with the three networks bound to it.
pub struct Session {
    pub graph: Graph,
    pub encoder: BoundEncoder,
    pub generator: BoundGenerator,
    pub regressor: BoundRegressor,
    pub dims: Dims,
}

/// Per-network gradients in declared tensor order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<Tensor>,
    pub generator: Vec<Tensor>,
    pub regressor: Vec<Tensor>,
}

impl ModelGrads {
    pub fn all_zero(group: &[Tensor]) -> bool {
        group.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

impl Session {
    pub fn new(params: &ModelParams, trainable: Trainable) -> Self {
        let mut graph = Graph::new();
        let encoder = params.encoder.bind(&mut graph, trainable.encoder);
        let generator = params.generator.bind(&mut graph, trainable.generator);
        let regressor = params.regressor.bind(&mut graph, trainable.regressor);
        Self {
            graph,
            encoder,
            generator,
            regressor,
            dims: params.dims,
        }
    }

    pub fn value(&self, v: Var) -> f64 {
        self.graph.value(v).data()[0]
    }

    pub fn gradients(&self, loss: Var) -> Result<ModelGrads> {
        let grads = self.graph.backward(loss)?;
        Ok(ModelGrads {
            encoder: self.encoder.0.grads(&self.graph, &grads),
            generator: self.generator.0.grads(&self.graph, &grads),
            regressor: self.regressor.0.grads(&self.graph, &grads),
        })
    }

    fn constant(&mut self, t: &Tensor) -> Var {
        self.graph.constant(t.clone())
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3; // ln(2π)

/// `½ Σ (pred − target)²`, averaged over rows.
fn half_sq_error(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let m = g.value(pred).rows() as f64;
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5 / m))
}

/// Gaussian negative log-likelihood `½ Σ [(x − μ)²/σ² + log σ² + log 2π]`, averaged over rows.
fn gaussian_nll(g: &mut Graph, x: Var, dist: GaussianVars) -> Result<Var> {
    let t = g.value(x);
    let (m, k) = (t.rows() as f64, t.cols() as f64);
    let d = g.sub(x, dist.mean)?;
    let d2 = g.square(d);
    let neg = g.scale(dist.logvar, -1.0);
    let inv_var = g.exp(neg);
    let quad = g.mul(d2, inv_var)?;
    let inner = g.add(quad, dist.logvar)?;
    let s = g.sum(inner);
    let s = g.scale(s, 0.5 / m);
    Ok(g.add_scalar(s, 0.5 * k * LN_2PI))
}

/// `KL(p ‖ N(0, I))`, averaged over rows.
fn kl_to_standard(g: &mut Graph, p: GaussianVars) -> Result<Var> {
    let t = g.value(p.mean);
    let (m, k) = (t.rows() as f64, t.cols() as f64);
    let var = g.exp(p.logvar);
    let mu2 = g.square(p.mean);
    let a = g.add(var, mu2)?;
    let b = g.sub(a, p.logvar)?;
    let s = g.sum(b);
    let s = g.scale(s, 0.5 / m);
    Ok(g.add_scalar(s, -0.5 * k))
}

/// `KL(p ‖ q)` between diagonal Gaussians, averaged over rows:
/// `½ Σ [exp(lp − lq) + (μp − μq)² / exp(lq) − 1 + lq − lp]`.
pub fn kl_diag_gauss_vars(g: &mut Graph, p: GaussianVars, q: GaussianVars) -> Result<Var> {
    let (ps, qs) = (g.value(p.mean).shape().to_vec(), g.value(q.mean).shape().to_vec());
    if ps != qs {
        return Err(numgrad::NumError::ShapeMismatch {
            op: "kl_diag_gauss",
            lhs: ps,
            rhs: qs,
        }
        .into());
    }
    let t = g.value(p.mean);
    let (m, k) = (t.rows() as f64, t.cols() as f64);
    let dl = g.sub(p.logvar, q.logvar)?;
    let ratio = g.exp(dl);
    let dm = g.sub(p.mean, q.mean)?;
    let dm2 = g.square(dm);
    let neg_lq = g.scale(q.logvar, -1.0);
    let inv_q = g.exp(neg_lq);
    let quad = g.mul(dm2, inv_q)?;
    let a = g.add(ratio, quad)?;
    let b = g.sub(a, dl)?;
    let s = g.sum(b);
    let s = g.scale(s, 0.5 / m);
    Ok(g.add_scalar(s, -0.5 * k))
}

/// Closed-form KL divergence between two diagonal Gaussians.
pub fn kl_diag_gauss(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimMismatch {
            what: "kl_diag_gauss",
            expected: p.dim(),
            found: q.dim(),
        });
    }
    let mut s = 0.0;
    for i in 0..p.dim() {
        let (mp, lp, mq, lq) = (p.mean[i], p.logvar[i], q.mean[i], q.logvar[i]);
        s += (lp - lq).exp() + (mp - mq).powi(2) / lq.exp() - 1.0 + lq - lp;
    }
    Ok(0.5 * s)
}

fn check_batch(what: &'static str, batch: &LabeledBatch, dims: Dims) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch(what));
    }
    if batch.x.cols() != dims.features {
        return Err(Error::DimMismatch {
            what,
            expected: dims.features,
            found: batch.x.cols(),
        });
    }
    Ok(())
}

/// Supervised regressor loss: mean `½‖regress(x_n) − a_{y_n}‖²`.
pub fn loss_sup(s: &mut Session, batch: &LabeledBatch, bank: &AttributeBank) -> Result<Var> {
    check_batch("loss_sup", batch, s.dims)?;
    let a = bank.gather(&batch.labels)?;
    let x = s.constant(&batch.x);
    let a = s.constant(&a);
    let pred = s.regressor.forward(&mut s.graph, x)?;
    half_sq_error(&mut s.graph, pred, a)
}

/// Generator output for a prior draw.
#[derive(Debug, Clone, Copy)]
pub struct Generated {
    pub dist: GaussianVars,
    pub x_hat: Var,
    pub attrs: Var,
}

pub fn generate_from_draw(s: &mut Session, draw: &PriorDraw, bank: &AttributeBank) -> Result<Generated> {
    if draw.is_empty() {
        return Err(Error::EmptyBatch("prior draw"));
    }
    let a = bank.gather(&draw.classes)?;
    let z = s.constant(&draw.z);
    let attrs = s.constant(&a);
    let eps = s.constant(&draw.eps);
    let dist = s.generator.forward(&mut s.graph, z, attrs)?;
    let x_hat = reparameterize_vars(&mut s.graph, dist, eps)?;
    Ok(Generated { dist, x_hat, attrs })
}

/// Unsupervised regressor loss on generated exemplars; the generator is held fixed.
pub fn loss_unsup(s: &mut Session, draw: &PriorDraw, bank: &AttributeBank) -> Result<Var> {
    let gen = generate_from_draw(s, draw, bank)?;
    unsup_from(s, gen)
}

fn unsup_from(s: &mut Session, gen: Generated) -> Result<Var> {
    let x = s.graph.detach(gen.x_hat);
    let pred = s.regressor.forward(&mut s.graph, x)?;
    half_sq_error(&mut s.graph, pred, gen.attrs)
}

#[derive(Debug, Clone, Copy)]
pub struct RegressorTerms {
    pub sup: Var,
    pub unsup: Var,
    pub total: Var,
}

/// `L_sup + λ_R · L_unsup`.
pub fn loss_regressor_total(
    s: &mut Session,
    batch: &LabeledBatch,
    draw: &PriorDraw,
    bank: &AttributeBank,
    weights: &LossWeights,
) -> Result<RegressorTerms> {
    let sup = loss_sup(s, batch, bank)?;
    let unsup = loss_unsup(s, draw, bank)?;
    let scaled = s.graph.scale(unsup, weights.lambda_r);
    let total = s.graph.add(sup, scaled)?;
    Ok(RegressorTerms { sup, unsup, total })
}

/// VAE loss and the intermediate distributions other terms reuse.
#[derive(Debug, Clone, Copy)]
pub struct VaeTerms {
    pub loss: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub posterior: GaussianVars,
    pub recon_dist: GaussianVars,
}

/// Reconstruction NLL of `x_n` under `generate(reparameterize(encode(x_n)), a_{y_n})`
/// plus `KL(encode(x_n) ‖ N(0, I))`, averaged over the batch.
pub fn loss_vae(
    s: &mut Session,
    batch: &LabeledBatch,
    bank: &AttributeBank,
    noise: &PosteriorNoise,
) -> Result<VaeTerms> {
    check_batch("loss_vae", batch, s.dims)?;
    if noise.eps_z.rows() != batch.len() {
        return Err(Error::DimMismatch {
            what: "posterior noise rows",
            expected: batch.len(),
            found: noise.eps_z.rows(),
        });
    }
    let a = bank.gather(&batch.labels)?;
    let x = s.constant(&batch.x);
    let a = s.constant(&a);
    let eps_z = s.constant(&noise.eps_z);
    let posterior = s.encoder.forward(&mut s.graph, x)?;
    let z = reparameterize_vars(&mut s.graph, posterior, eps_z)?;
    let recon_dist = s.generator.forward(&mut s.graph, z, a)?;
    let reconstruction = gaussian_nll(&mut s.graph, x, recon_dist)?;
    let kl = kl_to_standard(&mut s.graph, posterior)?;
    let loss = s.graph.add(reconstruction, kl)?;
    Ok(VaeTerms {
        loss,
        reconstruction,
        kl,
        posterior,
        recon_dist,
    })
}

/// Attribute-consistency loss `L_c`: the regressor is frozen, so the gradient
/// pushes generated exemplars toward regions it maps onto their attributes.
pub fn loss_cyclic_attr(s: &mut Session, draw: &PriorDraw, bank: &AttributeBank) -> Result<Var> {
    let gen = generate_from_draw(s, draw, bank)?;
    cyclic_from(s, gen)
}

fn cyclic_from(s: &mut Session, gen: Generated) -> Result<Var> {
    let frozen = s.regressor.detached(&mut s.graph);
    let pred = frozen.forward(&mut s.graph, gen.x_hat)?;
    half_sq_error(&mut s.graph, pred, gen.attrs)
}

/// `L_Reg`: negative log-likelihood of the generated sample under its own
/// distribution, `½ Σ [ε² + logvar + log 2π]`, averaged over draws.
pub fn loss_reg(s: &mut Session, draw: &PriorDraw, bank: &AttributeBank) -> Result<Var> {
    let gen = generate_from_draw(s, draw, bank)?;
    reg_from(s, gen, draw)
}

fn reg_from(s: &mut Session, gen: Generated, draw: &PriorDraw) -> Result<Var> {
    let n = draw.len() as f64;
    let d = draw.eps.cols() as f64;
    let eps_sq: f64 = draw.eps.data().iter().map(|e| e * e).sum();
    let sum_lv = s.graph.sum(gen.dist.logvar);
    let scaled = s.graph.scale(sum_lv, 0.5 / n);
    Ok(s.graph.add_scalar(scaled, 0.5 * eps_sq / n + 0.5 * d * LN_2PI))
}

/// Target distribution for the latent-consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Encoder posterior of the labeled example the sample was reconstructed from.
    Posterior,
    /// Standard normal prior, on samples from prior draws.
    Prior,
    /// Sum of both terms.
    Both,
}

impl FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(Self::Posterior),
            "prior" => Ok(Self::Prior),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidConfig(format!(
                "latent mode must be posterior, prior or both, got {other:?}"
            ))),
        }
    }
}

pub enum LatentSource<'a> {
    Posterior {
        batch: &'a LabeledBatch,
        noise: &'a PosteriorNoise,
    },
    Prior {
        draw: &'a PriorDraw,
    },
}

/// `L_E = KL(encode(x̂) ‖ q)`, minimized so generated exemplars encode like
/// their source. For the posterior source, `x̂` is a sample of the
/// reconstruction of `x_n` and `q = encode(x_n)` is detached; for the prior
/// source, `x̂` comes from a prior draw and `q = N(0, I)`.
pub fn loss_latent_consistency(s: &mut Session, source: LatentSource<'_>, bank: &AttributeBank) -> Result<Var> {
    match source {
        LatentSource::Posterior { batch, noise } => {
            let vae = loss_vae(s, batch, bank, noise)?;
            latent_posterior_from(s, &vae, noise)
        }
        LatentSource::Prior { draw } => {
            let gen = generate_from_draw(s, draw, bank)?;
            latent_prior_from(s, gen)
        }
    }
}

fn latent_posterior_from(s: &mut Session, vae: &VaeTerms, noise: &PosteriorNoise) -> Result<Var> {
    let eps_x = s.constant(&noise.eps_x);
    let x_hat = reparameterize_vars(&mut s.graph, vae.recon_dist, eps_x)?;
    let p = s.encoder.forward(&mut s.graph, x_hat)?;
    let q = GaussianVars {
        mean: s.graph.detach(vae.posterior.mean),
        logvar: s.graph.detach(vae.posterior.logvar),
    };
    kl_diag_gauss_vars(&mut s.graph, p, q)
}

fn latent_prior_from(s: &mut Session, gen: Generated) -> Result<Var> {
    let p = s.encoder.forward(&mut s.graph, gen.x_hat)?;
    kl_to_standard(&mut s.graph, p)
}

/// Terms of the encoder/generator objective. Terms with zero weight are not built.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub vae: VaeTerms,
    pub cyclic: Option<Var>,
    pub reg: Option<Var>,
    pub latent: Option<Var>,
    pub total: Var,
}

/// `L_VAE + λ_c·L_c + λ_reg·L_Reg + λ_E·L_E`. One prior draw is shared by
/// `L_c`, `L_Reg` and the prior part of `L_E`; the posterior part of `L_E`
/// reuses the VAE's reconstruction distribution.
pub fn loss_generator_total(
    s: &mut Session,
    batch: &LabeledBatch,
    noise: &PosteriorNoise,
    draw: &PriorDraw,
    bank: &AttributeBank,
    weights: &LossWeights,
    mode: LatentMode,
) -> Result<GeneratorTerms> {
    let vae = loss_vae(s, batch, bank, noise)?;
    let needs_draw = weights.lambda_c != 0.0
        || weights.lambda_reg != 0.0
        || (weights.lambda_e != 0.0 && mode != LatentMode::Posterior);
    let gen = if needs_draw {
        Some(generate_from_draw(s, draw, bank)?)
    } else {
        None
    };

    let mut total = vae.loss;
    let mut add_term = |s: &mut Session, term: Var, w: f64| -> Result<()> {
        let scaled = s.graph.scale(term, w);
        total = s.graph.add(total, scaled)?;
        Ok(())
    };

    let cyclic = match gen {
        Some(gen) if weights.lambda_c != 0.0 => {
            let t = cyclic_from(s, gen)?;
            add_term(s, t, weights.lambda_c)?;
            Some(t)
        }
        _ => None,
    };
    let reg = match gen {
        Some(gen) if weights.lambda_reg != 0.0 => {
            let t = reg_from(s, gen, draw)?;
            add_term(s, t, weights.lambda_reg)?;
            Some(t)
        }
        _ => None,
    };
    let latent = if weights.lambda_e != 0.0 {
        let t = match mode {
            LatentMode::Posterior => latent_posterior_from(s, &vae, noise)?,
            LatentMode::Prior => latent_prior_from(s, gen.expect("draw generated"))?,
            LatentMode::Both => {
                let a = latent_posterior_from(s, &vae, noise)?;
                let b = latent_prior_from(s, gen.expect("draw generated"))?;
                s.graph.add(a, b)?
            }
        };
        add_term(s, t, weights.lambda_e)?;
        Some(t)
    } else {
        None
    };

    Ok(GeneratorTerms {
        vae,
        cyclic,
        reg,
        latent,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_identical_is_zero() {
        let p = GaussianDiag::new(vec![0.3, -1.0], vec![0.5, -0.2]).unwrap();
        assert_eq!(kl_diag_gauss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_variance_closed_form() {
        let p = GaussianDiag::new(vec![1.0, 2.0, -2.0], vec![0.0; 3]).unwrap();
        let q = GaussianDiag::standard(3);
        assert!((kl_diag_gauss(&p, &q).unwrap() - 4.5).abs() < 1e-15);
    }

    #[test]
    fn kl_dim_mismatch() {
        let p = GaussianDiag::standard(2);
        let q = GaussianDiag::standard(3);
        assert!(kl_diag_gauss(&p, &q).is_err());
    }

    #[test]
    fn latent_mode_parse() {
        assert_eq!("prior".parse::<LatentMode>().unwrap(), LatentMode::Prior);
        assert!("neither".parse::<LatentMode>().is_err());
    }

    #[test]
    fn bank_validation() {
        let a = Tensor::zeros(&[3, 2]);
        assert!(AttributeBank::new(a.clone(), vec![0, 1], vec![1]).is_err());
        assert!(matches!(
            AttributeBank::new(a.clone(), vec![0], vec![3]),
            Err(Error::UnknownClass(3))
        ));
        assert!(matches!(
            AttributeBank::new(Tensor::zeros(&[0, 2]), vec![], vec![]),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn prior_draw_rejects_zero_samples() {
        let bank = AttributeBank::new(Tensor::zeros(&[2, 2]), vec![0], vec![1]).unwrap();
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PriorDraw::sample(&mut rng, 0, &bank, dims).is_err());
    }

    #[test]
    fn sup_loss_closed_form() {
        // zero regressor with bias (1, 0, 0) against target 0 → ½
        let dims = Dims::new(4, 3, 2, 3).unwrap();
        let mut params = ModelParams::zeros(dims).unwrap();
        params.regressor.head.bias = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let bank = AttributeBank::new(Tensor::zeros(&[1, 3]), vec![0], vec![]).unwrap();
        let batch = LabeledBatch::new(Tensor::zeros(&[1, 4]), vec![0]).unwrap();
        let mut s = Session::new(&params, Trainable::ALL);
        let l = loss_sup(&mut s, &batch, &bank).unwrap();
        assert_eq!(s.value(l), 0.5);
    }

    #[test]
    fn empty_batch_rejected() {
        let dims = Dims::new(4, 3, 2, 3).unwrap();
        let params = ModelParams::zeros(dims).unwrap();
        let bank = AttributeBank::new(Tensor::zeros(&[1, 3]), vec![0], vec![]).unwrap();
        let batch = LabeledBatch::new(Tensor::zeros(&[0, 4]), vec![]).unwrap();
        let mut s = Session::new(&params, Trainable::ALL);
        assert!(matches!(loss_sup(&mut s, &batch, &bank), Err(Error::EmptyBatch(_))));
    }
}
