//! Evaluation protocols: the GZSL split, per-class accuracy and harmonic mean,
//! and the ZSL / GZSL / ablation / exemplar-sweep runners.
//!
//! Every runner standardizes features with statistics of the rows the
//! generative model is trained on, trains in that space, and synthesizes and
//! classifies there. The protocol seed overrides the seeds inside the training
//! and classifier configs, and also keys the split and the synthesis streams.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classify::{fit, ClassifierConfig, ClassifierKind};
use crate::data::{DatasetContainer, Standardizer};
use crate::error::{Error, Result};
use crate::networks::ModelParams;
use crate::objectives::{AttributeBank, LabeledBatch, LossWeights};
use crate::rng;
use crate::synthesis::{synthesize_all, ExemplarSet, Provenance, SynthMode};
use crate::trainer::{train, Phase, TrainConfig, TrainLog};

pub const METRICS_SCHEMA: &str = "segzsl-metrics/1";

/// Seen/unseen partition and the row indices of each evaluation subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub seen_train: Vec<usize>,
    pub seen_test: Vec<usize>,
    pub unseen_test: Vec<usize>,
}

impl SplitSpec {
    /// Order-sensitive 64-bit FNV-1a digest of every index list.
    pub fn digest(&self) -> String {
        let mut h = Fnv::new();
        for list in [&self.seen, &self.unseen, &self.seen_train, &self.seen_test, &self.unseen_test] {
            h.write(list.len() as u64);
            for &i in list {
                h.write(i as u64);
            }
        }
        format!("{:016x}", h.0)
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Stratified split: per seen class, `ceil(fraction · n_c)` shuffled rows go
/// to training (capped at `n_c − 1` so every class keeps a test row), the rest
/// to testing. All unseen rows are test rows. Index lists are ascending.
pub fn make_gzsl_split(ds: &DatasetContainer, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &c in &ds.seen {
        let mut rows = ds.rows_of_classes(&[c]);
        if rows.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "seen class {c} has {} example(s); the split needs at least 2",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng::stream_rng(seed, rng::SPLIT, c as u64));
        let n = rows.len();
        let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        seen: ds.seen.clone(),
        unseen: ds.unseen.clone(),
        seen_train: train,
        seen_test: test,
        unseen_test: ds.rows_of_classes(&ds.unseen),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassAccuracy {
    pub mean: f64,
    pub per_class: BTreeMap<usize, f64>,
}

/// Mean over classes of within-class accuracy. Classes in `classes` with no
/// rows in `y_true` are left out of the mean.
pub fn per_class_accuracy(y_true: &[usize], y_pred: &[usize], classes: &[usize]) -> Result<PerClassAccuracy> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimMismatch {
            what: "prediction count",
            expected: y_true.len(),
            found: y_pred.len(),
        });
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if !classes.contains(&t) {
            return Err(Error::UnknownClass(t));
        }
        let e = tally.entry(t).or_default();
        e.0 += usize::from(t == p);
        e.1 += 1;
    }
    if tally.is_empty() {
        return Err(Error::EmptyBatch("per-class accuracy"));
    }
    let per_class: BTreeMap<usize, f64> = tally
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(PerClassAccuracy { mean, per_class })
}

/// `2ab / (a + b)`, or 0 when both are 0. Inputs are fractions in `[0, 1]`.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    for v in [a, b] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("accuracy {v} outside [0, 1]")));
        }
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

/// Everything a runner needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    /// Synthesized exemplars per class.
    pub n_per_class: usize,
    pub synth_mode: SynthMode,
    pub seen_weight: f64,
    pub unseen_weight: f64,
    /// Add synthesized seen exemplars to the GZSL classifier's training set.
    pub augment_seen: bool,
    pub split_fraction: f64,
    pub standardize: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            n_per_class: 100,
            synth_mode: SynthMode::Sample,
            seen_weight: 1.0,
            unseen_weight: 0.2,
            augment_seen: false,
            split_fraction: 0.8,
            standardize: true,
        }
    }
}

impl ProtocolConfig {
    /// The config with the protocol seed pushed into the nested configs.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.classifier.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.classifier.validate()?;
        if self.n_per_class == 0 {
            return Err(Error::InvalidConfig(
                "n_per_class must be >= 1: without synthesized unseen exemplars no unseen class can be predicted".into(),
            ));
        }
        for (name, w) in [("seen_weight", self.seen_weight), ("unseen_weight", self.unseen_weight)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {w}")));
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig("split_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Synthesis stream seed, shared by matched runs.
    pub fn synthesis_seed(&self) -> u64 {
        rng::derive_seed(self.seed, rng::SYNTHESIS, 0)
    }
}

/// Final-epoch training losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub pretrain_vae_last: Option<f64>,
    pub vae_last: Option<f64>,
    pub sup_last: Option<f64>,
    pub generator_last: Option<f64>,
}

impl TrainSummary {
    pub fn from_log(log: &TrainLog) -> Self {
        let joint = log.last(Phase::Joint);
        Self {
            epochs: log.epochs.len(),
            pretrain_vae_last: log.last(Phase::Pretrain).map(|r| r.vae),
            vae_last: joint.map(|r| r.vae),
            sup_last: joint.and_then(|r| r.sup),
            generator_last: joint.and_then(|r| r.generator),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub description: String,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// Serialized with a fixed key order; accuracies are fractions at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    pub acc_seen: Option<f64>,
    pub acc_unseen: Option<f64>,
    #[serde(rename = "H")]
    pub h: Option<f64>,
    pub acc_zsl: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
    pub baseline: Option<BaselineReport>,
    pub split_digest: String,
    pub synthesis_seed: u64,
    pub train_summary: TrainSummary,
    pub config: ProtocolConfig,
}

impl MetricsReport {
    /// Range and harmonic-mean consistency checks.
    pub fn check(&self) -> Result<()> {
        let accs = [self.acc_seen, self.acc_unseen, self.h, self.acc_zsl];
        for v in accs.into_iter().flatten().chain(self.per_class.values().copied()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("accuracy {v} outside [0, 1]")));
            }
        }
        if let (Some(a), Some(b), Some(h)) = (self.acc_seen, self.acc_unseen, self.h) {
            let lo = a.min(b) - 1e-12;
            let hi = a.max(b) + 1e-12;
            if !(lo..=hi).contains(&h) || (harmonic_mean(a, b)? - h).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!("H {h} inconsistent with ({a}, {b})")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Features of every row in the space the model is trained in.
struct Prepared {
    x: numgrad::Tensor,
    bank: AttributeBank,
}

fn prepare(ds: &DatasetContainer, fit_rows: &[usize], cfg: &ProtocolConfig) -> Result<Prepared> {
    ds.validate()?;
    let raw = ds.feature_tensor();
    let x = if cfg.standardize {
        Standardizer::fit(&raw, fit_rows)?.apply(&raw)?
    } else {
        raw
    };
    Ok(Prepared { x, bank: ds.bank()? })
}

fn rows_batch(p: &Prepared, ds: &DatasetContainer, rows: &[usize]) -> Result<LabeledBatch> {
    let d = p.x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(p.x.row(r));
    }
    LabeledBatch::new(numgrad::Tensor::matrix(rows.len(), d, data)?, ds.labels_of(rows))
}

fn real_set(b: &LabeledBatch) -> ExemplarSet {
    ExemplarSet {
        features: b.x.clone(),
        labels: b.labels.clone(),
        provenance: Provenance::Real,
    }
}

fn require_classes(ds: &DatasetContainer) -> Result<()> {
    if ds.seen.is_empty() || ds.unseen.is_empty() {
        return Err(Error::InvalidConfig("the dataset needs both seen and unseen classes".into()));
    }
    let missing: Vec<usize> = ds.unseen.iter().copied().filter(|&c| ds.rows_of_classes(&[c]).is_empty()).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidConfig(format!("unseen classes without test rows: {missing:?}")));
    }
    Ok(())
}

fn accuracy_of(
    model: &crate::classify::Classifier,
    test: &LabeledBatch,
    classes: &[usize],
) -> Result<PerClassAccuracy> {
    let pred = model.predict(&test.x)?;
    per_class_accuracy(&test.labels, &pred, classes)
}

/// A generative model trained for the ZSL setting plus what evaluation needs.
pub struct ZslSetup {
    pub cfg: ProtocolConfig,
    pub params: ModelParams,
    pub log: TrainLog,
    pub bank: AttributeBank,
    pub unseen_test: LabeledBatch,
    pub split_digest: String,
}

/// Trains on every seen row; the test set is every unseen row.
pub fn zsl_setup(ds: &DatasetContainer, cfg: &ProtocolConfig) -> Result<ZslSetup> {
    let cfg = cfg.effective();
    cfg.validate()?;
    require_classes(ds)?;
    let seen_rows = ds.rows_of_classes(&ds.seen);
    let unseen_rows = ds.rows_of_classes(&ds.unseen);
    let p = prepare(ds, &seen_rows, &cfg)?;
    let train_batch = rows_batch(&p, ds, &seen_rows)?;
    let (params, log) = train(&train_batch, &p.bank, &cfg.train)?;
    let split = SplitSpec {
        seen: ds.seen.clone(),
        unseen: ds.unseen.clone(),
        seen_train: seen_rows,
        seen_test: Vec::new(),
        unseen_test: unseen_rows.clone(),
    };
    Ok(ZslSetup {
        unseen_test: rows_batch(&p, ds, &unseen_rows)?,
        bank: p.bank,
        params,
        log,
        split_digest: split.digest(),
        cfg,
    })
}

/// ZSL accuracy of one classifier kind trained on `n` synthesized exemplars
/// per unseen class.
pub fn zsl_accuracy(setup: &ZslSetup, n: usize, kind: ClassifierKind) -> Result<PerClassAccuracy> {
    let cfg = &setup.cfg;
    let unseen = setup.bank.unseen().to_vec();
    let synth = synthesize_all(&setup.params.generator, &setup.bank, &unseen, n, cfg.synthesis_seed(), cfg.synth_mode)?;
    let ccfg = ClassifierConfig {
        kind,
        ..cfg.classifier.clone()
    };
    let model = fit(&synth, &unseen, &ccfg)?;
    accuracy_of(&model, &setup.unseen_test, &unseen)
}

pub fn zsl_report(setup: &ZslSetup) -> Result<MetricsReport> {
    let acc = zsl_accuracy(setup, setup.cfg.n_per_class, setup.cfg.classifier.kind)?;
    let report = MetricsReport {
        schema: METRICS_SCHEMA.into(),
        mode: "zsl".into(),
        seed: setup.cfg.seed,
        acc_seen: None,
        acc_unseen: None,
        h: None,
        acc_zsl: Some(acc.mean),
        per_class: acc.per_class,
        baseline: None,
        split_digest: setup.split_digest.clone(),
        synthesis_seed: setup.cfg.synthesis_seed(),
        train_summary: TrainSummary::from_log(&setup.log),
        config: setup.cfg.clone(),
    };
    report.check()?;
    Ok(report)
}

/// Train on all seen data, synthesize unseen classes only, classify over the
/// unseen label space.
pub fn run_zsl(ds: &DatasetContainer, cfg: &ProtocolConfig) -> Result<MetricsReport> {
    zsl_report(&zsl_setup(ds, cfg)?)
}

/// Train on the seen training split; classify over seen ∪ unseen with a
/// classifier fit on real seen rows plus synthesized unseen rows (and
/// optionally synthesized seen rows). Also reports a classifier fit on real
/// seen rows only, and the unseen-only ZSL accuracy.
pub fn run_gzsl(ds: &DatasetContainer, cfg: &ProtocolConfig) -> Result<MetricsReport> {
    let cfg = cfg.effective();
    cfg.validate()?;
    require_classes(ds)?;
    let split = make_gzsl_split(ds, cfg.split_fraction, cfg.seed)?;
    let p = prepare(ds, &split.seen_train, &cfg)?;
    let train_batch = rows_batch(&p, ds, &split.seen_train)?;
    let seen_test = rows_batch(&p, ds, &split.seen_test)?;
    let unseen_test = rows_batch(&p, ds, &split.unseen_test)?;
    let (params, log) = train(&train_batch, &p.bank, &cfg.train)?;

    let all: Vec<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
    let seed = cfg.synthesis_seed();
    let synth_unseen = synthesize_all(&params.generator, &p.bank, &split.unseen, cfg.n_per_class, seed, cfg.synth_mode)?;
    let mut train_set = real_set(&train_batch);
    train_set.extend(&synth_unseen)?;
    if cfg.augment_seen {
        train_set.extend(&synthesize_all(
            &params.generator,
            &p.bank,
            &split.seen,
            cfg.n_per_class,
            seed,
            cfg.synth_mode,
        )?)?;
    }
    let mut ccfg = cfg.classifier.clone();
    for &c in &split.seen {
        ccfg.class_weights.entry(c).or_insert(cfg.seen_weight);
    }
    for &c in &split.unseen {
        ccfg.class_weights.entry(c).or_insert(cfg.unseen_weight);
    }
    let model = fit(&train_set, &all, &ccfg)?;
    let acc_s = accuracy_of(&model, &seen_test, &all)?;
    let acc_u = accuracy_of(&model, &unseen_test, &all)?;
    let h = harmonic_mean(acc_s.mean, acc_u.mean)?;
    let mut per_class = acc_s.per_class;
    per_class.extend(acc_u.per_class);

    let baseline_model = fit(&real_set(&train_batch), &split.seen, &cfg.classifier)?;
    let b_seen = accuracy_of(&baseline_model, &seen_test, &all)?.mean;
    let b_unseen = accuracy_of(&baseline_model, &unseen_test, &all)?.mean;
    let baseline = BaselineReport {
        description: "classifier trained on real seen rows only".into(),
        acc_seen: b_seen,
        acc_unseen: b_unseen,
        h: harmonic_mean(b_seen, b_unseen)?,
    };

    let zsl_model = fit(&synth_unseen, &split.unseen, &cfg.classifier)?;
    let acc_zsl = accuracy_of(&zsl_model, &unseen_test, &split.unseen)?.mean;

    let report = MetricsReport {
        schema: METRICS_SCHEMA.into(),
        mode: "gzsl".into(),
        seed: cfg.seed,
        acc_seen: Some(acc_s.mean),
        acc_unseen: Some(acc_u.mean),
        h: Some(h),
        acc_zsl: Some(acc_zsl),
        per_class,
        baseline: Some(baseline),
        split_digest: split.digest(),
        synthesis_seed: seed,
        train_summary: TrainSummary::from_log(&log),
        config: cfg,
    };
    report.check()?;
    Ok(report)
}

/// The no-feedback variant: no regressor feedback into the generator
/// (`λ_c = λ_E = 0`) and a supervised-only regressor (`λ_R = 0`).
pub fn ablated_config(cfg: &ProtocolConfig) -> ProtocolConfig {
    let mut c = cfg.clone();
    c.train.weights = LossWeights {
        lambda_r: 0.0,
        lambda_c: 0.0,
        lambda_e: 0.0,
        ..cfg.train.weights
    };
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    pub full: MetricsReport,
    pub ablated: MetricsReport,
    /// `full.acc_zsl − ablated.acc_zsl`.
    pub delta_zsl: f64,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Paired ZSL runs, full model versus no feedback, with identical seeds,
/// data and synthesis streams.
pub fn run_ablation_no_feedback(ds: &DatasetContainer, cfg: &ProtocolConfig) -> Result<AblationReport> {
    let full = run_zsl(ds, cfg)?;
    let ablated = run_zsl(ds, &ablated_config(cfg))?;
    if full.split_digest != ablated.split_digest || full.synthesis_seed != ablated.synthesis_seed {
        return Err(Error::InvalidConfig("paired runs diverged in split or synthesis seed".into()));
    }
    let delta = full.acc_zsl.unwrap_or(0.0) - ablated.acc_zsl.unwrap_or(0.0);
    Ok(AblationReport {
        schema: METRICS_SCHEMA.into(),
        mode: "ablate".into(),
        seed: cfg.seed,
        full,
        ablated,
        delta_zsl: delta,
    })
}

pub const DEFAULT_SWEEP_COUNTS: [usize; 5] = [2, 5, 10, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    pub counts: Vec<usize>,
    /// ZSL accuracy per count, keyed by classifier kind.
    pub accuracy: BTreeMap<String, Vec<f64>>,
    pub split_digest: String,
    pub synthesis_seed: u64,
    pub train_summary: TrainSummary,
    pub config: ProtocolConfig,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text table, one row per count.
    pub fn table(&self) -> String {
        let kinds: Vec<&String> = self.accuracy.keys().collect();
        let mut out = String::from("count");
        for k in &kinds {
            let _ = write!(out, "\t{k}");
        }
        out.push('\n');
        for (i, n) in self.counts.iter().enumerate() {
            let _ = write!(out, "{n}");
            for k in &kinds {
                let _ = write!(out, "\t{:.1}", 100.0 * self.accuracy[*k][i]);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model, then per count synthesizes unseen exemplars and fits
/// every classifier kind. Points are spread over up to `threads` workers;
/// results do not depend on the thread count.
pub fn exemplar_sweep(ds: &DatasetContainer, cfg: &ProtocolConfig, counts: &[usize], threads: usize) -> Result<SweepReport> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::InvalidConfig("sweep counts must be a nonempty list of values >= 1".into()));
    }
    let setup = zsl_setup(ds, cfg)?;
    let jobs: Vec<(usize, ClassifierKind)> = counts
        .iter()
        .flat_map(|&n| ClassifierKind::ALL.into_iter().map(move |k| (n, k)))
        .collect();
    let results = run_jobs(&jobs, threads.max(1), |&(n, k)| zsl_accuracy(&setup, n, k).map(|a| a.mean))?;
    let mut accuracy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((_, k), acc) in jobs.iter().zip(results) {
        accuracy.entry(k.name().to_string()).or_default().push(acc);
    }
    Ok(SweepReport {
        schema: METRICS_SCHEMA.into(),
        mode: "sweep".into(),
        seed: setup.cfg.seed,
        counts: counts.to_vec(),
        accuracy,
        split_digest: setup.split_digest.clone(),
        synthesis_seed: setup.cfg.synthesis_seed(),
        train_summary: TrainSummary::from_log(&setup.log),
        config: setup.cfg.clone(),
    })
}

/// Maps `f` over `jobs` on up to `threads` scoped workers, keeping job order.
fn run_jobs<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Line chart of accuracy against exemplar count (log-scaled x axis).
pub fn sweep_svg(report: &SweepReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 130.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let lx = |n: usize| (n as f64).ln();
    let (x0, x1) = report
        .counts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &n| (a.min(lx(n)), b.max(lx(n))));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |n: usize| L + (lx(n) - x0) / span * (W - L - R);
    let py = |acc: f64| T + (1.0 - acc) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    );
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        let y = py(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{:.0}</text>"##,
            L,
            W - R,
            L - 6.0,
            y + 4.0,
            acc * 100.0
        );
    }
    for &n in &report.counts {
        let x = px(n);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{n}</text>"#,
            H - B + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle"># exemplars per class</text>"#,
        (L + W - R) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy (%)</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    );
    for (i, (kind, accs)) in report.accuracy.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = report
            .counts
            .iter()
            .zip(accs)
            .map(|(&n, &a)| format!("{:.1},{:.1}", px(n), py(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = T + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{kind}</text>"#,
            W - R + 15.0,
            W - R + 40.0,
            W - R + 46.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_accuracy_example() {
        let acc = per_class_accuracy(&[0, 0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1, 1], &[0, 1]).unwrap();
        assert_eq!(acc.mean, 0.75);
        assert!(per_class_accuracy(&[0, 1], &[0], &[0, 1]).is_err());
        assert!(matches!(per_class_accuracy(&[4], &[4], &[0, 1]), Err(Error::UnknownClass(4))));
    }

    #[test]
    fn harmonic_mean_edges() {
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!((harmonic_mean(0.4, 0.4).unwrap() - 0.4).abs() < 1e-15);
        assert!(harmonic_mean(1.5, 0.2).is_err());
        assert!(harmonic_mean(-0.1, 0.2).is_err());
    }

    #[test]
    fn zero_exemplars_rejected() {
        let cfg = ProtocolConfig {
            n_per_class: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn jobs_keep_order_across_threads() {
        let jobs: Vec<usize> = (0..7).collect();
        let one = run_jobs(&jobs, 1, |&j| Ok(j * j)).unwrap();
        let many = run_jobs(&jobs, 3, |&j| Ok(j * j)).unwrap();
        assert_eq!(one, many);
    }
}
