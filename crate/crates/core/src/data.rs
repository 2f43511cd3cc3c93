//! Dataset containers, attribute/feature preprocessing, and the synthetic
//! benchmark with its Bayes oracle.
//!
//! A container is a directory holding:
//!
//! | file         | content                                         |
//! |--------------|-------------------------------------------------|
//! | `manifest`   | JSON: format `"segzsl-ds/1"`, counts, dims, dtypes, endianness, class lists, splits |
//! | `features`   | `N × D` little-endian `f32`, row-major          |
//! | `labels`     | `N` little-endian `u32`                         |
//! | `attributes` | `C × L` little-endian `f32`, row-major          |

use std::collections::BTreeMap;
use std::path::Path;

use numgrad::Tensor;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Error, Result};
use crate::framing::{read_file, write_atomic};
use crate::objectives::{AttributeBank, LabeledBatch};
use crate::rng;

pub const FORMAT: &str = "segzsl-ds/1";

/// Features and labels with their class-attribute matrix. Values are kept in
/// the on-disk `f32` precision and widened on access.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub num_features: usize,
    pub num_attributes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub attributes: Vec<f32>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Named index lists into the rows.
    pub splits: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    num_examples: usize,
    num_features: usize,
    num_classes: usize,
    num_attributes: usize,
    feature_dtype: String,
    label_dtype: String,
    attribute_dtype: String,
    endianness: String,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    #[serde(default)]
    splits: BTreeMap<String, Vec<usize>>,
}

impl DatasetContainer {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        if self.num_attributes == 0 {
            0
        } else {
            self.attributes.len() / self.num_attributes
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// All features as an `N × D` tensor.
    pub fn feature_tensor(&self) -> Tensor {
        let data = self.features.iter().map(|&v| f64::from(v)).collect();
        Tensor::matrix(self.len(), self.num_features, data).expect("validated shape")
    }

    /// Selected rows as an `m × D` tensor.
    pub fn rows_tensor(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.num_features);
        for &r in rows {
            data.extend(self.row(r).iter().map(|&v| f64::from(v)));
        }
        Tensor::matrix(rows.len(), self.num_features, data).expect("validated shape")
    }

    pub fn attribute_tensor(&self) -> Tensor {
        let data = self.attributes.iter().map(|&v| f64::from(v)).collect();
        Tensor::matrix(self.num_classes(), self.num_attributes, data).expect("validated shape")
    }

    pub fn bank(&self) -> Result<AttributeBank> {
        AttributeBank::new(self.attribute_tensor(), self.seen.clone(), self.unseen.clone())
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<LabeledBatch> {
        LabeledBatch::new(self.rows_tensor(rows), self.labels_of(rows))
    }

    /// Checks every invariant the on-disk format relies on.
    pub fn validate(&self) -> Result<(), ContainerError> {
        let inconsistent = |m: String| Err(ContainerError::Inconsistent(m));
        if self.num_features == 0 || self.num_attributes == 0 {
            return inconsistent("feature and attribute widths must be >= 1".into());
        }
        if self.features.len() != self.len() * self.num_features {
            return Err(ContainerError::SizeMismatch {
                file: "features",
                expected: 4 * self.len() * self.num_features,
                found: 4 * self.features.len(),
            });
        }
        if self.attributes.len() % self.num_attributes != 0 || self.attributes.is_empty() {
            return inconsistent(format!(
                "{} attribute values do not form rows of width {}",
                self.attributes.len(),
                self.num_attributes
            ));
        }
        let c = self.num_classes();
        if let Some((row, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(ContainerError::LabelOutOfRange { row, label, classes: c });
        }
        let mut seen_flag = vec![0u8; c];
        for &k in self.seen.iter().chain(&self.unseen) {
            if k >= c {
                return inconsistent(format!("class list names class {k} but there are {c} classes"));
            }
            seen_flag[k] += 1;
            if seen_flag[k] > 1 {
                return inconsistent(format!("class {k} listed twice across seen/unseen"));
            }
        }
        for (name, idx) in &self.splits {
            if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
                return inconsistent(format!("split {name:?} references row {bad} of {}", self.len()));
            }
        }
        if !self.features.iter().chain(&self.attributes).all(|v| v.is_finite()) {
            return inconsistent("non-finite feature or attribute value".into());
        }
        Ok(())
    }

    /// Rows whose label is in `classes`, in row order.
    pub fn rows_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn save_container(ds: &DatasetContainer, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        num_examples: ds.len(),
        num_features: ds.num_features,
        num_classes: ds.num_classes(),
        num_attributes: ds.num_attributes,
        feature_dtype: "f32".into(),
        label_dtype: "u32".into(),
        attribute_dtype: "f32".into(),
        endianness: "little".into(),
        seen: ds.seen.clone(),
        unseen: ds.unseen.clone(),
        splits: ds.splits.clone(),
    };
    let labels: Vec<u8> = ds.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    write_atomic(&dir.join("features"), &f32_bytes(&ds.features))?;
    write_atomic(&dir.join("labels"), &labels)?;
    write_atomic(&dir.join("attributes"), &f32_bytes(&ds.attributes))?;
    // manifest last, so a directory with a manifest is complete
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&dir.join("manifest"), text.as_bytes())
}

fn read_sized(dir: &Path, file: &'static str, expected: usize) -> Result<Vec<u8>> {
    let bytes = read_file(&dir.join(file))?;
    if bytes.len() != expected {
        return Err(ContainerError::SizeMismatch {
            file,
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(bytes)
}

fn le_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn load_container(dir: impl AsRef<Path>) -> Result<DatasetContainer> {
    let dir = dir.as_ref();
    let text = read_file(&dir.join("manifest"))?;
    let probe: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| ContainerError::BadManifest(e.to_string()))?;
    match probe.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT) => {}
        Some(other) => return Err(ContainerError::UnknownVersion(other.into()).into()),
        None => return Err(ContainerError::BadManifest("missing \"format\"".into()).into()),
    }
    let m: Manifest = serde_json::from_value(probe).map_err(|e| ContainerError::BadManifest(e.to_string()))?;
    for (what, v, want) in [
        ("feature_dtype", &m.feature_dtype, "f32"),
        ("label_dtype", &m.label_dtype, "u32"),
        ("attribute_dtype", &m.attribute_dtype, "f32"),
        ("endianness", &m.endianness, "little"),
    ] {
        if v != want {
            return Err(ContainerError::BadManifest(format!("{what} must be {want:?}, got {v:?}")).into());
        }
    }
    let features = le_f32(&read_sized(dir, "features", 4 * m.num_examples * m.num_features)?);
    let labels: Vec<usize> = read_sized(dir, "labels", 4 * m.num_examples)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let attributes = le_f32(&read_sized(dir, "attributes", 4 * m.num_classes * m.num_attributes)?);
    let ds = DatasetContainer {
        num_features: m.num_features,
        num_attributes: m.num_attributes,
        features,
        labels,
        attributes,
        seen: m.seen,
        unseen: m.unseen,
        splits: m.splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Class-level attributes as the mean of per-image attribute rows.
pub fn average_image_attributes(per_image: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if per_image.shape().len() != 2 || per_image.rows() != labels.len() {
        return Err(Error::DimMismatch {
            what: "per-image attribute rows",
            expected: labels.len(),
            found: per_image.shape().first().copied().unwrap_or(0),
        });
    }
    let l = per_image.cols();
    let mut sums = vec![0.0; num_classes * l];
    let mut counts = vec![0usize; num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::UnknownClass(c));
        }
        counts[c] += 1;
        for (s, v) in sums[c * l..(c + 1) * l].iter_mut().zip(per_image.row(i)) {
            *s += v;
        }
    }
    let empty: Vec<usize> = (0..num_classes).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        return Err(Error::MissingClasses(empty));
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in &mut sums[c * l..(c + 1) * l] {
            *s /= n as f64;
        }
    }
    Ok(Tensor::matrix(num_classes, l, sums)?)
}

/// Per-dimension affine transform `x' = (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics from the given rows. A dimension with zero variance gets
    /// mean 0 and std 1, i.e. it passes through unchanged.
    pub fn fit(x: &Tensor, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch("standardization rows"));
        }
        let d = x.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut std = Vec::with_capacity(d);
        for j in 0..d {
            let sd = (var[j] / n).sqrt();
            if sd > 0.0 {
                std.push(sd);
            } else {
                mean[j] = 0.0;
                std.push(1.0);
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.std[j] + self.mean[j];
        }
        Ok(out)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.mean.len() {
            return Err(Error::DimMismatch {
                what: "standardizer input width",
                expected: self.mean.len(),
                found: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }
}

/// Standardizes every row of the container with statistics of `train_rows`.
pub fn standardize_features(ds: &DatasetContainer, train_rows: &[usize]) -> Result<(Tensor, Standardizer)> {
    let x = ds.feature_tensor();
    let st = Standardizer::fit(&x, train_rows)?;
    Ok((st.apply(&x)?, st))
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seen: usize,
    pub unseen: usize,
    pub features: usize,
    pub attributes: usize,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub nuisance_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seen: 15,
            unseen: 5,
            features: 32,
            attributes: 16,
            n_per_class: 150,
            noise_sigma: 0.15,
            nuisance_dim: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("seen", self.seen),
            ("unseen", self.unseen),
            ("features", self.features),
            ("attributes", self.attributes),
            ("n_per_class", self.n_per_class),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.nuisance_dim > self.features {
            return Err(Error::InvalidConfig(format!(
                "nuisance_dim {} exceeds feature width {}",
                self.nuisance_dim, self.features
            )));
        }
        Ok(())
    }
}

/// Generating parameters kept aside for the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// `D × L` map from attributes to class means.
    pub w: Tensor,
    /// `C × D` class means `W a_c`.
    pub class_means: Tensor,
    pub noise_sigma: f64,
    pub nuisance_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    kind: String,
    w: Vec<Vec<f64>>,
    class_means: Vec<Vec<f64>>,
    noise_sigma: f64,
    nuisance_dim: usize,
}

const TRUTH_KIND: &str = "segzsl-synthetic-truth";

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl SyntheticTruth {
    pub fn to_json(&self) -> String {
        let rec = TruthRecord {
            kind: TRUTH_KIND.into(),
            w: rows_of(&self.w),
            class_means: rows_of(&self.class_means),
            noise_sigma: self.noise_sigma,
            nuisance_dim: self.nuisance_dim,
        };
        serde_json::to_string_pretty(&rec).expect("truth serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("truth record: {m}"));
        let rec: TruthRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if rec.kind != TRUTH_KIND {
            return Err(bad(format!("unexpected kind {:?}", rec.kind)));
        }
        Ok(Self {
            w: Tensor::from_rows(&rec.w).map_err(|e| bad(e.to_string()))?,
            class_means: Tensor::from_rows(&rec.class_means).map_err(|e| bad(e.to_string()))?,
            noise_sigma: rec.noise_sigma,
            nuisance_dim: rec.nuisance_dim,
        })
    }
}

const MAX_REDRAWS: usize = 100;

/// Draws a benchmark: binary attributes (distinct rows), `x = W a_c` plus
/// class-independent unit noise on the first `nuisance_dim` coordinates plus
/// isotropic `N(0, σ²)` noise. Classes `0..S` are seen, `S..S+U` unseen, rows
/// are grouped by class.
pub fn gen_synthetic_benchmark(spec: &SyntheticSpec) -> Result<(DatasetContainer, SyntheticTruth)> {
    spec.validate()?;
    let mut r = rng::stream_rng(spec.seed, rng::DATASET, 0);
    let c = spec.seen + spec.unseen;
    let (d, l) = (spec.features, spec.attributes);

    let mut attrs: Vec<Vec<f64>> = Vec::with_capacity(c);
    for class in 0..c {
        let mut tries = 0;
        loop {
            let row: Vec<f64> = (0..l).map(|_| f64::from(r.random_range(0..2u8))).collect();
            if !attrs.contains(&row) {
                attrs.push(row);
                break;
            }
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::InvalidConfig(format!(
                    "could not draw a distinct attribute row for class {class} with L={l} after {MAX_REDRAWS} tries"
                )));
            }
        }
    }

    let w_dist = Normal::new(0.0, (1.0 / l as f64).sqrt()).expect("positive scale");
    let w: Vec<f64> = (0..d * l).map(|_| r.sample(w_dist)).collect();
    let mut means = Vec::with_capacity(c * d);
    for a in &attrs {
        for i in 0..d {
            means.push((0..l).map(|j| w[i * l + j] * a[j]).sum::<f64>());
        }
    }

    let n = c * spec.n_per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        for _ in 0..spec.n_per_class {
            for i in 0..d {
                let mut v = means[class * d + i];
                if i < spec.nuisance_dim {
                    v += r.sample::<f64, _>(StandardNormal);
                }
                v += spec.noise_sigma * r.sample::<f64, _>(StandardNormal);
                features.push(v as f32);
            }
            labels.push(class);
        }
    }

    let ds = DatasetContainer {
        num_features: d,
        num_attributes: l,
        features,
        labels,
        attributes: attrs.iter().flatten().map(|&v| v as f32).collect(),
        seen: (0..spec.seen).collect(),
        unseen: (spec.seen..c).collect(),
        splits: BTreeMap::new(),
    };
    let truth = SyntheticTruth {
        w: Tensor::matrix(d, l, w)?,
        class_means: Tensor::matrix(c, d, means)?,
        noise_sigma: spec.noise_sigma,
        nuisance_dim: spec.nuisance_dim,
    };
    Ok((ds, truth))
}

/// Per-dimension inverse variances of the generating noise. With zero
/// isotropic noise the nuisance coordinates carry no class information
/// relative to the exact ones, so they get weight 0.
fn oracle_weights(truth: &SyntheticTruth, d: usize) -> Vec<f64> {
    let s2 = truth.noise_sigma * truth.noise_sigma;
    (0..d)
        .map(|i| {
            let nuisance = i < truth.nuisance_dim;
            if s2 > 0.0 {
                1.0 / (s2 + if nuisance { 1.0 } else { 0.0 })
            } else if nuisance && truth.nuisance_dim < d {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Maximum-likelihood class among `label_space` for one feature row under the
/// known generating model (equal priors, shared diagonal covariance); ties go
/// to the first class listed.
pub fn bayes_oracle_predict(truth: &SyntheticTruth, x: &[f64], label_space: &[usize]) -> usize {
    let wts = oracle_weights(truth, x.len());
    let mut best = (f64::INFINITY, label_space[0]);
    for &c in label_space {
        let mu = truth.class_means.row(c);
        let dist: f64 = x.iter().zip(mu).zip(&wts).map(|((a, b), w)| w * (a - b).powi(2)).sum();
        if dist < best.0 {
            best = (dist, c);
        }
    }
    best.1
}

/// Per-class accuracy of the Bayes-optimal classifier on `eval_rows`,
/// predicting over `label_space`.
pub fn bayes_oracle_accuracy(
    ds: &DatasetContainer,
    truth: Option<&SyntheticTruth>,
    eval_rows: &[usize],
    label_space: &[usize],
) -> Result<f64> {
    let truth = truth.ok_or_else(|| Error::InvalidConfig("bayes oracle needs the synthetic truth record".into()))?;
    if truth.class_means.rows() != ds.num_classes() || truth.class_means.cols() != ds.num_features {
        return Err(Error::InvalidConfig("truth record does not match the container".into()));
    }
    if label_space.is_empty() {
        return Err(Error::InvalidConfig("empty label space".into()));
    }
    if let Some(&bad) = label_space.iter().find(|&&c| c >= ds.num_classes()) {
        return Err(Error::UnknownClass(bad));
    }
    let mut y_true = Vec::with_capacity(eval_rows.len());
    let mut y_pred = Vec::with_capacity(eval_rows.len());
    for &r in eval_rows {
        let x: Vec<f64> = ds.row(r).iter().map(|&v| f64::from(v)).collect();
        y_true.push(ds.labels[r]);
        y_pred.push(bayes_oracle_predict(truth, &x, label_space));
    }
    let classes: Vec<usize> = {
        let mut c = y_true.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    Ok(crate::protocol::per_class_accuracy(&y_true, &y_pred, &classes)?.mean)
}
