//! Exemplar synthesis from class attributes, and attribute imputation.

use std::str::FromStr;

use numgrad::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{generate_batch, regress_batch, GeneratorParams, RegressorParams};
use crate::objectives::AttributeBank;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthesized,
    Mixed,
}

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    /// `M × D`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl ExemplarSet {
    pub fn new(features: Tensor, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::DimMismatch {
                what: "exemplar labels",
                expected: features.shape().first().copied().unwrap_or(0),
                found: labels.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            provenance,
        })
    }

    pub fn empty(width: usize, provenance: Provenance) -> Self {
        Self {
            features: Tensor::zeros(&[0, width]),
            labels: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Appends `other`'s rows; mixing provenances yields [`Provenance::Mixed`].
    pub fn extend(&mut self, other: &ExemplarSet) -> Result<()> {
        if other.width() != self.width() {
            return Err(Error::DimMismatch {
                what: "exemplar width",
                expected: self.width(),
                found: other.width(),
            });
        }
        let mut data = std::mem::replace(&mut self.features, Tensor::zeros(&[0, 0])).into_data();
        data.extend_from_slice(other.features.data());
        let rows = self.labels.len() + other.len();
        self.features = Tensor::matrix(rows, other.width(), data)?;
        self.labels.extend_from_slice(&other.labels);
        if self.provenance != other.provenance {
            self.provenance = Provenance::Mixed;
        }
        Ok(())
    }

    /// Rows labeled `class`, in order.
    pub fn rows_of(&self, class: usize) -> Vec<&[f64]> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .map(|i| self.features.row(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Generator mean plus `σ ⊙ ε`.
    #[default]
    Sample,
    /// Generator mean only.
    Mean,
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidConfig(format!("synthesis mode must be sample or mean, got {other:?}"))),
        }
    }
}

/// `n` exemplars of class `class` with attributes `attrs`. Randomness comes
/// from the `(seed, class)` stream: first all `n × d_z` latent normals, then
/// (sample mode) all `n × D` feature normals.
pub fn synthesize_class(
    gen: &GeneratorParams,
    attrs: &[f64],
    class: usize,
    n: usize,
    seed: u64,
    mode: SynthMode,
) -> Result<ExemplarSet> {
    if n == 0 {
        return Err(Error::InvalidConfig("exemplar count must be >= 1".into()));
    }
    let d_z = gen.input_dim().saturating_sub(attrs.len());
    if d_z == 0 || d_z + attrs.len() != gen.input_dim() {
        return Err(Error::DimMismatch {
            what: "class attributes",
            expected: gen.input_dim().saturating_sub(1),
            found: attrs.len(),
        });
    }
    let mut r = rng::stream_rng(seed, rng::SYNTHESIS, class as u64);
    let z: Vec<f64> = (0..n * d_z).map(|_| r.sample(StandardNormal)).collect();
    let z = Tensor::matrix(n, d_z, z)?;
    let a = Tensor::matrix(n, attrs.len(), attrs.repeat(n))?;
    let (mean, logvar) = generate_batch(gen, &z, &a)?;
    let features = match mode {
        SynthMode::Mean => mean,
        SynthMode::Sample => {
            let mut out = mean;
            for (v, l) in out.data_mut().iter_mut().zip(logvar.data()) {
                *v += (0.5 * l).exp() * r.sample::<f64, _>(StandardNormal);
            }
            out
        }
    };
    ExemplarSet::new(features, vec![class; n], Provenance::Synthesized)
}

/// Per-class synthesis concatenated in the order of `classes`. Each class
/// draws from its own stream, so its rows do not depend on the other classes
/// requested or their order.
pub fn synthesize_all(
    gen: &GeneratorParams,
    bank: &AttributeBank,
    classes: &[usize],
    n_per_class: usize,
    seed: u64,
    mode: SynthMode,
) -> Result<ExemplarSet> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("no classes requested for synthesis".into()));
    }
    let mut out = ExemplarSet::empty(gen.output_dim(), Provenance::Synthesized);
    for &c in classes {
        let set = synthesize_class(gen, bank.row(c)?, c, n_per_class, seed, mode)?;
        out.extend(&set)?;
    }
    Ok(out)
}

/// Point estimate of the attributes of each row: the regressor mean, `M × L`.
pub fn impute_attributes(reg: &RegressorParams, x: &Tensor) -> Result<Tensor> {
    regress_batch(reg, x)
}
