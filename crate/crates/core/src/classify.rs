//! Final classifiers: one-vs-rest linear SVM (Pegasos), multinomial softmax,
//! and 1-nearest-neighbor.
//!
//! Linear training first sorts the rows into a canonical order (by label,
//! then feature bits) and shuffles that order with the seed, so the fitted
//! model does not depend on the order rows were supplied in.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use numgrad::{Adam, AdamConfig, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::framing;
use crate::rng;
use crate::synthesis::ExemplarSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Svm,
    Softmax,
    Knn,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Svm, ClassifierKind::Softmax, ClassifierKind::Knn];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Svm => "svm",
            ClassifierKind::Softmax => "softmax",
            ClassifierKind::Knn => "knn",
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(Self::Svm),
            "softmax" => Ok(Self::Softmax),
            "knn" => Ok(Self::Knn),
            other => Err(Error::InvalidConfig(format!(
                "classifier must be svm, softmax or knn, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// SVM regularization; the penalty is `λ = 1/(C·M)` for `M` training rows.
    pub c: f64,
    /// Per-class multipliers on the loss of that class's rows; unlisted classes get 1.
    pub class_weights: BTreeMap<usize, f64>,
    pub epochs: usize,
    pub seed: u64,
    pub softmax_lr: f64,
    pub softmax_l2: f64,
    pub softmax_batch: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Svm,
            c: 1.0,
            class_weights: BTreeMap::new(),
            epochs: 50,
            seed: 0,
            softmax_lr: 1e-2,
            softmax_l2: 1e-4,
            softmax_batch: 64,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig(format!("C must be a finite value > 0, got {}", self.c)));
        }
        if let Some((k, w)) = self.class_weights.iter().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig(format!("class weight for {k} must be > 0, got {w}")));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("classifier epochs must be >= 1".into()));
        }
        if !(self.softmax_lr > 0.0) || !(self.softmax_l2 >= 0.0) || self.softmax_batch == 0 {
            return Err(Error::InvalidConfig("softmax needs lr > 0, l2 >= 0, batch >= 1".into()));
        }
        Ok(())
    }

    fn weight(&self, class: usize) -> f64 {
        self.class_weights.get(&class).copied().unwrap_or(1.0)
    }
}

/// Class scores `W x + b`; row `k` of `W` belongs to `classes[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// Ascending class ids.
    pub classes: Vec<usize>,
    /// `C × D`.
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl LinearModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|k| self.w.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[k])
            .collect()
    }
}

/// Stored training rows for nearest-neighbor lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Linear(LinearModel),
    Knn(KnnModel),
}

impl Classifier {
    pub fn width(&self) -> usize {
        match self {
            Classifier::Linear(m) => m.w.cols(),
            Classifier::Knn(m) => m.features.cols(),
        }
    }

    /// Linear: highest score, ties to the lowest class id. 1-NN: label of the
    /// closest stored row, ties to the lowest row index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.shape().len() != 2 || x.cols() != self.width() {
            return Err(Error::DimMismatch {
                what: "classifier input width",
                expected: self.width(),
                found: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok((0..x.rows()).map(|i| self.predict_row(x.row(i))).collect())
    }

    fn predict_row(&self, x: &[f64]) -> usize {
        match self {
            Classifier::Linear(m) => {
                let s = m.scores(x);
                let mut best = 0;
                for k in 1..s.len() {
                    if s[k] > s[best] {
                        best = k;
                    }
                }
                m.classes[best]
            }
            Classifier::Knn(m) => {
                let mut best = (f64::INFINITY, 0);
                for i in 0..m.labels.len() {
                    let d: f64 = m.features.row(i).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                m.labels[best.1]
            }
        }
    }
}

fn check_training_set(train: &ExemplarSet, classes: &[usize]) -> Result<Vec<usize>> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("no classes declared for the classifier".into()));
    }
    let mut declared = classes.to_vec();
    declared.sort_unstable();
    declared.dedup();
    if let Some(&bad) = train.labels.iter().find(|l| declared.binary_search(l).is_err()) {
        return Err(Error::UnknownClass(bad));
    }
    let missing: Vec<usize> = declared.iter().copied().filter(|c| !train.labels.contains(c)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    if !train.features.is_finite() {
        return Err(Error::InvalidConfig("non-finite classifier training features".into()));
    }
    Ok(declared)
}

/// Canonical row order (label, then feature bits), shuffled by epoch.
fn canonical_order(train: &ExemplarSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.sort_by(|&a, &b| {
        train.labels[a].cmp(&train.labels[b]).then_with(|| {
            let ra = train.features.row(a).iter().map(|v| v.to_bits());
            let rb = train.features.row(b).iter().map(|v| v.to_bits());
            ra.cmp(rb)
        })
    });
    idx
}

fn epoch_order(canonical: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = canonical.to_vec();
    order.shuffle(&mut rng::stream_rng(seed, rng::CLASSIFIER, epoch as u64));
    order
}

/// Per-row loss multipliers, rescaled to average 1 over the training rows so
/// that a uniform weight is the same as no weighting.
fn row_weights(train: &ExemplarSet, cfg: &ClassifierConfig) -> Vec<f64> {
    let raw: Vec<f64> = train.labels.iter().map(|&l| cfg.weight(l)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

pub fn fit(train: &ExemplarSet, classes: &[usize], cfg: &ClassifierConfig) -> Result<Classifier> {
    cfg.validate()?;
    let classes = check_training_set(train, classes)?;
    match cfg.kind {
        ClassifierKind::Svm => Ok(Classifier::Linear(fit_svm(train, &classes, cfg)?.0)),
        ClassifierKind::Softmax => Ok(Classifier::Linear(fit_softmax(train, &classes, cfg)?)),
        ClassifierKind::Knn => Ok(Classifier::Knn(KnnModel {
            features: train.features.clone(),
            labels: train.labels.clone(),
        })),
    }
}

/// Per-class primal SVM objective `λ/2 ‖(w, b)‖² + mean_i c_i·max(0, 1 − y_i (w·x_i + b))`,
/// summed over the one-vs-rest problems.
pub fn svm_objective(model: &LinearModel, train: &ExemplarSet, cfg: &ClassifierConfig) -> f64 {
    let m = train.len() as f64;
    let lambda = 1.0 / (cfg.c * m);
    let weights = row_weights(train, cfg);
    let mut total = 0.0;
    for (k, &class) in model.classes.iter().enumerate() {
        let w = model.w.row(k);
        let norm2 = w.iter().map(|v| v * v).sum::<f64>() + model.b[k] * model.b[k];
        let mut hinge = 0.0;
        for i in 0..train.len() {
            let y = if train.labels[i] == class { 1.0 } else { -1.0 };
            let s: f64 = w.iter().zip(train.features.row(i)).map(|(a, b)| a * b).sum::<f64>() + model.b[k];
            hinge += weights[i] * (1.0 - y * s).max(0.0);
        }
        total += 0.5 * lambda * norm2 + hinge / m;
    }
    total
}

/// Pegasos with projection, bias as a regularized constant feature, and
/// iterate averaging. Also returns the averaged model's objective after each
/// epoch.
pub fn fit_svm(train: &ExemplarSet, classes: &[usize], cfg: &ClassifierConfig) -> Result<(LinearModel, Vec<f64>)> {
    cfg.validate()?;
    let classes = check_training_set(train, classes)?;
    let d = train.width();
    let m = train.len();
    let lambda = 1.0 / (cfg.c * m as f64);
    let radius = 1.0 / lambda.sqrt();
    let weights = row_weights(train, cfg);
    let canonical = canonical_order(train);
    let nc = classes.len();

    // augmented weights (w, b) per class: current and running sum
    let mut cur = vec![vec![0.0; d + 1]; nc];
    let mut sum = vec![vec![0.0; d + 1]; nc];
    let mut t = 0u64;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let averaged = |sum: &Vec<Vec<f64>>, t: u64| -> LinearModel {
        let mut w = Vec::with_capacity(nc * d);
        let mut b = Vec::with_capacity(nc);
        for s in sum {
            w.extend(s[..d].iter().map(|v| v / t as f64));
            b.push(s[d] / t as f64);
        }
        LinearModel {
            classes: classes.clone(),
            w: Tensor::matrix(nc, d, w).expect("shape"),
            b,
        }
    };

    for epoch in 0..cfg.epochs {
        for &i in &epoch_order(&canonical, cfg.seed, epoch) {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = train.features.row(i);
            for (k, &class) in classes.iter().enumerate() {
                let y = if train.labels[i] == class { 1.0 } else { -1.0 };
                let w = &mut cur[k];
                let margin = y * (w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]);
                let shrink = 1.0 - eta * lambda;
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    let step = eta * weights[i] * y;
                    for (v, xv) in w[..d].iter_mut().zip(x) {
                        *v += step * xv;
                    }
                    w[d] += step;
                }
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    let s = radius / norm;
                    w.iter_mut().for_each(|v| *v *= s);
                }
                for (a, v) in sum[k].iter_mut().zip(w.iter()) {
                    *a += v;
                }
            }
        }
        trace.push(svm_objective(&averaged(&sum, t), train, cfg));
    }
    let model = averaged(&sum, t);
    if !model.w.is_finite() {
        return Err(Error::NonFinite {
            phase: "svm",
            what: "weights".into(),
            epoch: cfg.epochs,
            batch: 0,
        });
    }
    Ok((model, trace))
}

/// Weighted cross-entropy plus `l2/2 ‖W‖²`, trained with Adam on minibatches.
fn fit_softmax(train: &ExemplarSet, classes: &[usize], cfg: &ClassifierConfig) -> Result<LinearModel> {
    let d = train.width();
    let nc = classes.len();
    let weights = row_weights(train, cfg);
    let target: Vec<usize> = train
        .labels
        .iter()
        .map(|l| classes.binary_search(l).expect("checked"))
        .collect();
    let canonical = canonical_order(train);
    let mut w = Tensor::zeros(&[nc, d]);
    let mut b = Tensor::zeros(&[nc]);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.softmax_lr), [&w, &b]);
    let mut probs = vec![0.0; nc];
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&canonical, cfg.seed, epoch);
        for chunk in order.chunks(cfg.softmax_batch) {
            let mut gw = Tensor::zeros(&[nc, d]);
            let mut gb = Tensor::zeros(&[nc]);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = train.features.row(i);
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = w.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.data()[k];
                }
                let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for (k, p) in probs.iter().enumerate() {
                    let g = weights[i] * scale * (p / z - if k == target[i] { 1.0 } else { 0.0 });
                    gb.data_mut()[k] += g;
                    for (gv, xv) in gw.data_mut()[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gv += g * xv;
                    }
                }
            }
            for (gv, wv) in gw.data_mut().iter_mut().zip(w.data()) {
                *gv += cfg.softmax_l2 * wv;
            }
            opt.step(&mut [&mut w, &mut b], &[gw, gb]).map_err(|e| match e {
                numgrad::NumError::NonFiniteGradient { .. } => Error::NonFinite {
                    phase: "softmax",
                    what: "gradient".into(),
                    epoch,
                    batch: 0,
                },
                other => other.into(),
            })?;
        }
    }
    Ok(LinearModel {
        classes: classes.to_vec(),
        w,
        b: b.into_data(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierHeader {
    kind: String,
    model: String,
    classes: Vec<usize>,
    rows: usize,
    features: usize,
}

const CLASSIFIER_KIND: &str = "segzsl-classifier";

/// Framed like model checkpoints. Linear payload: `W` then `b`; 1-NN payload:
/// the stored rows, with their labels in the header's `classes`.
pub fn classifier_bytes(model: &Classifier) -> Vec<u8> {
    let (header, payload) = match model {
        Classifier::Linear(m) => (
            ClassifierHeader {
                kind: CLASSIFIER_KIND.into(),
                model: "linear".into(),
                classes: m.classes.clone(),
                rows: m.classes.len(),
                features: m.w.cols(),
            },
            m.w.data().iter().chain(&m.b).copied().collect::<Vec<f64>>(),
        ),
        Classifier::Knn(m) => (
            ClassifierHeader {
                kind: CLASSIFIER_KIND.into(),
                model: "knn".into(),
                classes: m.labels.clone(),
                rows: m.labels.len(),
                features: m.features.cols(),
            },
            m.features.data().to_vec(),
        ),
    };
    framing::encode(&header, &payload)
}

pub fn classifier_from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let (h, payload): (ClassifierHeader, _) = framing::decode(bytes)?;
    if h.kind != CLASSIFIER_KIND {
        return Err(CheckpointError::BadHeader(format!("expected a classifier, found {:?}", h.kind)).into());
    }
    if h.classes.len() != h.rows {
        return Err(CheckpointError::DimMismatch("class list length differs from row count".into()).into());
    }
    let offset = bytes.len() - payload.len();
    match h.model.as_str() {
        "linear" => {
            let v = framing::payload_f64(payload, h.rows * h.features + h.rows, offset)?;
            let (w, b) = v.split_at(h.rows * h.features);
            Ok(Classifier::Linear(LinearModel {
                classes: h.classes,
                w: Tensor::matrix(h.rows, h.features, w.to_vec())?,
                b: b.to_vec(),
            }))
        }
        "knn" => {
            let v = framing::payload_f64(payload, h.rows * h.features, offset)?;
            Ok(Classifier::Knn(KnnModel {
                features: Tensor::matrix(h.rows, h.features, v)?,
                labels: h.classes,
            }))
        }
        other => Err(CheckpointError::BadHeader(format!("unknown classifier model {other:?}")).into()),
    }
}

pub fn save_classifier(model: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    framing::write_atomic(path.as_ref(), &classifier_bytes(model))
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<Classifier> {
    classifier_from_bytes(&framing::read_file(path.as_ref())?)
}
