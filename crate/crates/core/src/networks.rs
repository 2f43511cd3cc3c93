//! Encoder, conditional generator and attribute regressor.
//!
//! All three are small ReLU MLPs with weights stored input-major (`in × out`),
//! so a batch `X` of row vectors maps to `X·W + b`.
//!
//! * encoder: `D → h → h`, then Gaussian heads over the latent code (`d_z`)
//! * generator: `[z; a]` (`d_z + L`) `→ h`, then Gaussian heads over features (`D`)
//! * regressor: `D → h → L`, the attribute mean under a unit-variance Gaussian
//!
//! Log-variance heads are clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.

use std::path::Path;

use numgrad::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::framing;
use crate::rng;

pub const LOGVAR_MIN: f64 = -6.0;
pub const LOGVAR_MAX: f64 = 2.0;

/// Layer widths shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Feature dimension `D`.
    pub features: usize,
    /// Attribute dimension `L`.
    pub attributes: usize,
    /// Latent dimension `d_z`.
    pub latent: usize,
    /// Hidden width `h` of every hidden layer.
    pub hidden: usize,
}

impl Dims {
    pub fn new(features: usize, attributes: usize, latent: usize, hidden: usize) -> Result<Self> {
        let d = Self {
            features,
            attributes,
            latent,
            hidden,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("features", self.features),
            ("attributes", self.attributes),
            ("latent", self.latent),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("dimension `{name}` must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Diagonal Gaussian given by its mean and per-dimension log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::DimMismatch {
                what: "gaussian logvar",
                expected: mean.len(),
                found: logvar.len(),
            });
        }
        Ok(Self { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Batch of diagonal Gaussians living on a graph (`m × k` mean and logvar).
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

/// Affine layer `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = init_bound(fan_in, fan_out);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let (w, b) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        BoundLinear { w, b }
    }
}

pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
struct BoundLinear {
    w: Var,
    b: Var,
}

impl BoundLinear {
    fn forward(self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w)?;
        Ok(g.add_bias(h, self.b)?)
    }
}

/// Parameter container with a fixed, declared layer order.
pub trait Network {
    const NAME: &'static str;
    const LAYER_NAMES: &'static [&'static str];

    fn layers(&self) -> Vec<&Linear>;
    fn layers_mut(&mut self) -> Vec<&mut Linear>;

    /// Weight and bias of every layer, in declared order.
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn tensor_names() -> Vec<String> {
        Self::LAYER_NAMES
            .iter()
            .flat_map(|l| {
                [
                    format!("{}.{l}.weight", Self::NAME),
                    format!("{}.{l}.bias", Self::NAME),
                ]
            })
            .collect()
    }
}

/// A network's parameters registered on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    layers: Vec<BoundLinear>,
}

impl Bound {
    fn new<N: Network>(net: &N, g: &mut Graph, trainable: bool) -> Self {
        Self {
            layers: net.layers().into_iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Graph variables in the network's declared tensor order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Gradients in declared order; zeros where nothing flowed.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| grads.wrt(g, v)).collect()
    }

    /// Same parameter values as constants, so no gradient reaches the originals.
    pub fn detached(&self, g: &mut Graph) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| BoundLinear {
                    w: g.detach(l.w),
                    b: g.detach(l.b),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub mean: Linear,
    pub logvar: Linear,
}

impl Network for EncoderParams {
    const NAME: &'static str = "encoder";
    const LAYER_NAMES: &'static [&'static str] = &["hidden1", "hidden2", "mean", "logvar"];

    fn layers(&self) -> Vec<&Linear> {
        vec![&self.hidden1, &self.hidden2, &self.mean, &self.logvar]
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.hidden1, &mut self.hidden2, &mut self.mean, &mut self.logvar]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub hidden: Linear,
    pub mean: Linear,
    pub logvar: Linear,
}

impl Network for GeneratorParams {
    const NAME: &'static str = "generator";
    const LAYER_NAMES: &'static [&'static str] = &["hidden", "mean", "logvar"];

    fn layers(&self) -> Vec<&Linear> {
        vec![&self.hidden, &self.mean, &self.logvar]
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.hidden, &mut self.mean, &mut self.logvar]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub hidden: Linear,
    pub head: Linear,
}

impl Network for RegressorParams {
    const NAME: &'static str = "regressor";
    const LAYER_NAMES: &'static [&'static str] = &["hidden", "head"];

    fn layers(&self) -> Vec<&Linear> {
        vec![&self.hidden, &self.head]
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.hidden, &mut self.head]
    }
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.hidden1.fan_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.fan_out()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        BoundEncoder(Bound::new(self, g, trainable))
    }
}

impl GeneratorParams {
    pub fn input_dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.fan_out()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator(Bound::new(self, g, trainable))
    }
}

impl RegressorParams {
    pub fn input_dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.head.fan_out()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundRegressor {
        BoundRegressor(Bound::new(self, g, trainable))
    }
}

#[derive(Debug, Clone)]
pub struct BoundEncoder(pub Bound);

#[derive(Debug, Clone)]
pub struct BoundGenerator(pub Bound);

#[derive(Debug, Clone)]
pub struct BoundRegressor(pub Bound);

impl BoundEncoder {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<GaussianVars> {
        let l = &self.0.layers;
        let h = l[0].forward(g, x)?;
        let h = g.relu(h);
        let h = l[1].forward(g, h)?;
        let h = g.relu(h);
        gaussian_heads(g, h, l[2], l[3])
    }

    pub fn detached(&self, g: &mut Graph) -> Self {
        Self(self.0.detached(g))
    }
}

impl BoundGenerator {
    /// `z` is `m × d_z`, `a` is `m × L`.
    pub fn forward(&self, g: &mut Graph, z: Var, a: Var) -> Result<GaussianVars> {
        let l = &self.0.layers;
        let input = g.concat(z, a)?;
        let h = l[0].forward(g, input)?;
        let h = g.relu(h);
        gaussian_heads(g, h, l[1], l[2])
    }

    pub fn detached(&self, g: &mut Graph) -> Self {
        Self(self.0.detached(g))
    }
}

impl BoundRegressor {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let l = &self.0.layers;
        let h = l[0].forward(g, x)?;
        let h = g.relu(h);
        l[1].forward(g, h)
    }

    pub fn detached(&self, g: &mut Graph) -> Self {
        Self(self.0.detached(g))
    }
}

fn gaussian_heads(g: &mut Graph, h: Var, mean: BoundLinear, logvar: BoundLinear) -> Result<GaussianVars> {
    let mean = mean.forward(g, h)?;
    let raw = logvar.forward(g, h)?;
    let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Ok(GaussianVars { mean, logvar })
}

/// `z = mean + exp(logvar / 2) ⊙ eps`, differentiable in mean and logvar.
pub fn reparameterize_vars(g: &mut Graph, gauss: GaussianVars, eps: Var) -> Result<Var> {
    let half = g.scale(gauss.logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    Ok(g.add(gauss.mean, noise)?)
}

/// All network parameters plus the dimensions they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub encoder: EncoderParams,
    pub generator: GeneratorParams,
    pub regressor: RegressorParams,
}

impl ModelParams {
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::stream_rng(seed, rng::INIT, 0);
        let Dims {
            features: d,
            attributes: l,
            latent: z,
            hidden: h,
        } = dims;
        let encoder = EncoderParams {
            hidden1: Linear::init(&mut r, d, h),
            hidden2: Linear::init(&mut r, h, h),
            mean: Linear::init(&mut r, h, z),
            logvar: Linear::init(&mut r, h, z),
        };
        let generator = GeneratorParams {
            hidden: Linear::init(&mut r, z + l, h),
            mean: Linear::init(&mut r, h, d),
            logvar: Linear::init(&mut r, h, d),
        };
        let regressor = RegressorParams {
            hidden: Linear::init(&mut r, d, h),
            head: Linear::init(&mut r, h, l),
        };
        Ok(Self {
            dims,
            encoder,
            generator,
            regressor,
        })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let Dims {
            features: d,
            attributes: l,
            latent: z,
            hidden: h,
        } = dims;
        Ok(Self {
            dims,
            encoder: EncoderParams {
                hidden1: Linear::zeros(d, h),
                hidden2: Linear::zeros(h, h),
                mean: Linear::zeros(h, z),
                logvar: Linear::zeros(h, z),
            },
            generator: GeneratorParams {
                hidden: Linear::zeros(z + l, h),
                mean: Linear::zeros(h, d),
                logvar: Linear::zeros(h, d),
            },
            regressor: RegressorParams {
                hidden: Linear::zeros(d, h),
                head: Linear::zeros(h, l),
            },
        })
    }

    /// Every tensor in checkpoint order: encoder, generator, regressor.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.generator.tensors());
        out.extend(self.regressor.tensors());
        out
    }

    pub fn tensor_names() -> Vec<String> {
        let mut out = EncoderParams::tensor_names();
        out.extend(GeneratorParams::tensor_names());
        out.extend(RegressorParams::tensor_names());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Tensor shapes in checkpoint order.
    fn shapes(dims: Dims) -> Vec<Vec<usize>> {
        let Dims {
            features: d,
            attributes: l,
            latent: z,
            hidden: h,
        } = dims;
        let layers = [
            (d, h),
            (h, h),
            (h, z),
            (h, z),
            (z + l, h),
            (h, d),
            (h, d),
            (d, h),
            (h, l),
        ];
        layers
            .iter()
            .flat_map(|&(i, o)| [vec![i, o], vec![o]])
            .collect()
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_cols(what: &'static str, t: &Tensor, expected: usize) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::DimMismatch {
            what,
            expected: 2,
            found: t.shape().len(),
        });
    }
    check_len(what, expected, t.cols())
}

fn row_tensor(x: &[f64]) -> Tensor {
    Tensor::matrix(1, x.len(), x.to_vec()).expect("row shape")
}

fn gaussian_rows(g: &Graph, out: GaussianVars) -> (Tensor, Tensor) {
    (g.value(out.mean).clone(), g.value(out.logvar).clone())
}

/// Posterior over the latent code for one feature vector.
pub fn encode(enc: &EncoderParams, x: &[f64]) -> Result<GaussianDiag> {
    check_len("encoder input", enc.input_dim(), x.len())?;
    let (m, l) = encode_batch(enc, &row_tensor(x))?;
    GaussianDiag::new(m.into_data(), l.into_data())
}

/// Row-wise posterior means and log-variances for an `m × D` batch.
pub fn encode_batch(enc: &EncoderParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    check_cols("encoder input", x, enc.input_dim())?;
    let mut g = Graph::new();
    let net = enc.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, xv)?;
    Ok(gaussian_rows(&g, out))
}

pub fn reparameterize(gauss: &GaussianDiag, eps: &[f64]) -> Result<Vec<f64>> {
    check_len("reparameterize noise", gauss.dim(), eps.len())?;
    Ok(gauss
        .mean
        .iter()
        .zip(&gauss.logvar)
        .zip(eps)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect())
}

/// Feature distribution for latent code `z` and class attributes `a`.
pub fn generate(gen: &GeneratorParams, z: &[f64], a: &[f64]) -> Result<GaussianDiag> {
    check_len("generator input", gen.input_dim(), z.len() + a.len())?;
    let (m, l) = generate_batch(gen, &row_tensor(z), &row_tensor(a))?;
    GaussianDiag::new(m.into_data(), l.into_data())
}

pub fn generate_batch(gen: &GeneratorParams, z: &Tensor, a: &Tensor) -> Result<(Tensor, Tensor)> {
    if z.rows() != a.rows() {
        return Err(Error::DimMismatch {
            what: "generator batch rows",
            expected: z.rows(),
            found: a.rows(),
        });
    }
    check_len("generator input", gen.input_dim(), z.cols() + a.cols())?;
    let mut g = Graph::new();
    let net = gen.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let av = g.constant(a.clone());
    let out = net.forward(&mut g, zv, av)?;
    Ok(gaussian_rows(&g, out))
}

/// Predicted attribute vector (regressor mean) for one feature vector.
pub fn regress(reg: &RegressorParams, x: &[f64]) -> Result<Vec<f64>> {
    check_len("regressor input", reg.input_dim(), x.len())?;
    Ok(regress_batch(reg, &row_tensor(x))?.into_data())
}

pub fn regress_batch(reg: &RegressorParams, x: &Tensor) -> Result<Tensor> {
    check_cols("regressor input", x, reg.input_dim())?;
    let mut g = Graph::new();
    let net = reg.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, xv)?;
    Ok(g.value(out).clone())
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    dims: Dims,
}

const MODEL_KIND: &str = "segzsl-model";

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let header = ModelHeader {
        kind: MODEL_KIND.to_string(),
        dims: params.dims,
    };
    let payload: Vec<f64> = params
        .tensors()
        .into_iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    framing::encode(&header, &payload)
}

pub fn params_from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let (header, payload): (ModelHeader, _) = framing::decode(bytes)?;
    if header.kind != MODEL_KIND {
        return Err(CheckpointError::BadHeader(format!("kind {:?} is not a model", header.kind)).into());
    }
    header
        .dims
        .validate()
        .map_err(|e| CheckpointError::DimMismatch(e.to_string()))?;
    let shapes = ModelParams::shapes(header.dims);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let values = framing::payload_f64(payload, total, bytes.len() - payload.len())?;

    let mut params = ModelParams::zeros(header.dims)?;
    let mut offset = 0;
    let mut targets: Vec<&mut Tensor> = params.encoder.tensors_mut();
    targets.extend(params.generator.tensors_mut());
    targets.extend(params.regressor.tensors_mut());
    for t in targets {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    framing::write_atomic(path.as_ref(), &checkpoint_bytes(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    params_from_checkpoint_bytes(&framing::read_file(path.as_ref())?)
}

/// Loads a checkpoint and insists on the given dimensions.
pub fn load_checkpoint_with_dims(path: impl AsRef<Path>, dims: Dims) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.dims != dims {
        return Err(CheckpointError::DimMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            params.dims, dims
        ))
        .into());
    }
    Ok(params)
}
