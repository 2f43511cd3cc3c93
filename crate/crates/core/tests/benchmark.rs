//! Oracles that need a model trained on the synthetic benchmark. One model is
//! trained per test binary (full schedule, narrower hidden layer for speed).

use std::sync::OnceLock;

use numgrad::Tensor;
use segzsl::data::{gen_synthetic_benchmark, DatasetContainer, Standardizer, SyntheticSpec, SyntheticTruth};
use segzsl::networks::ModelParams;
use segzsl::objectives::{loss_sup, AttributeBank, LabeledBatch, Session, Trainable};
use segzsl::synthesis::{impute_attributes, synthesize_all, synthesize_class, SynthMode};
use segzsl::trainer::{pretrain_vae, train_joint, Phase, TrainConfig, TrainLog, Trainer};

struct Fixture {
    ds: DatasetContainer,
    truth: SyntheticTruth,
    st: Standardizer,
    x: Tensor,
    bank: AttributeBank,
    log: TrainLog,
    sup_after_pretrain: f64,
    params: ModelParams,
}

fn sup_loss(params: &ModelParams, batch: &LabeledBatch, bank: &AttributeBank) -> f64 {
    let mut s = Session::new(params, Trainable::REGRESSOR);
    let l = loss_sup(&mut s, batch, bank).unwrap();
    s.value(l)
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (ds, truth) = gen_synthetic_benchmark(&SyntheticSpec::default()).unwrap();
        let rows = ds.rows_of_classes(&ds.seen);
        let raw = ds.feature_tensor();
        let st = Standardizer::fit(&raw, &rows).unwrap();
        let x = st.apply(&raw).unwrap();
        let mut batch = ds.batch(&rows).unwrap();
        batch.x = st.apply(&batch.x).unwrap();
        let bank = ds.bank().unwrap();

        let cfg = TrainConfig {
            hidden: 128,
            ..Default::default()
        };
        let params = ModelParams::init(cfg.dims(ds.num_features, ds.num_attributes).unwrap(), cfg.seed).unwrap();
        let mut trainer = Trainer::new(params, &cfg).unwrap();
        let mut log = TrainLog::default();
        pretrain_vae(&mut trainer, &batch, &bank, &mut log).unwrap();
        let sup_after_pretrain = sup_loss(&trainer.params, &batch, &bank);
        train_joint(&mut trainer, &batch, &bank, &mut log).unwrap();
        Fixture {
            ds,
            truth,
            st,
            x,
            bank,
            log,
            sup_after_pretrain,
            params: trainer.into_params(),
        }
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(rows: &Tensor, v: &[f64]) -> usize {
    (0..rows.rows())
        .min_by(|&i, &j| sq_dist(rows.row(i), v).total_cmp(&sq_dist(rows.row(j), v)))
        .unwrap()
}

#[test]
fn pretraining_lowers_the_vae_objective() {
    let f = fixture();
    let pre: Vec<f64> = f.log.epochs.iter().filter(|e| e.phase == Phase::Pretrain).map(|e| e.vae).collect();
    assert_eq!(pre.len(), 20);
    assert!(pre[19] < pre[0], "epoch 1 {} vs epoch 20 {}", pre[0], pre[19]);
}

#[test]
fn joint_training_halves_the_supervised_regressor_loss() {
    let f = fixture();
    let last = f.log.last(Phase::Joint).unwrap().sup.unwrap();
    assert!(last < 0.5 * f.sup_after_pretrain, "{} -> {last}", f.sup_after_pretrain);
}

#[test]
fn synthesized_class_means_land_on_the_true_means() {
    let f = fixture();
    let all: Vec<usize> = (0..f.ds.num_classes()).collect();
    for &c in &all {
        let set = synthesize_class(&f.params.generator, f.bank.row(c).unwrap(), c, 500, 11, SynthMode::Sample).unwrap();
        let raw = f.st.inverse(&set.features).unwrap();
        let mut mean = vec![0.0; raw.cols()];
        for i in 0..raw.rows() {
            for (m, v) in mean.iter_mut().zip(raw.row(i)) {
                *m += v / raw.rows() as f64;
            }
        }
        // unseen means are compared within the unseen label space: against
        // all 20 means, several drift toward a seen class
        let space: &[usize] = if f.ds.seen.contains(&c) { &all } else { &f.ds.unseen };
        let best = space
            .iter()
            .copied()
            .min_by(|&i, &j| sq_dist(f.truth.class_means.row(i), &mean).total_cmp(&sq_dist(f.truth.class_means.row(j), &mean)))
            .unwrap();
        assert_eq!(best, c, "class {c}");
    }
}

#[test]
fn imputed_attributes_beat_the_global_mean() {
    let f = fixture();
    let rows = f.ds.rows_of_classes(&f.ds.unseen);
    let x = Tensor::matrix(rows.len(), f.x.cols(), rows.iter().flat_map(|&r| f.x.row(r).to_vec()).collect()).unwrap();
    let pred = impute_attributes(&f.params.regressor, &x).unwrap();
    let l = f.ds.num_attributes;
    let mut global = vec![0.0; l];
    for &c in &f.ds.seen {
        for (g, v) in global.iter_mut().zip(f.bank.row(c).unwrap()) {
            *g += v / f.ds.seen.len() as f64;
        }
    }
    let (mut model_err, mut base_err) = (0.0, 0.0);
    for (i, &r) in rows.iter().enumerate() {
        let truth = f.bank.row(f.ds.labels[r]).unwrap();
        model_err += sq_dist(pred.row(i), truth);
        base_err += sq_dist(&global, truth);
    }
    assert!(model_err < base_err, "model {model_err} vs global mean {base_err}");
}

#[test]
fn regressor_recognizes_synthesized_exemplars() {
    let f = fixture();
    let classes: Vec<usize> = (0..f.ds.num_classes()).collect();
    let set = synthesize_all(&f.params.generator, &f.bank, &classes, 100, 12, SynthMode::Sample).unwrap();
    let pred = impute_attributes(&f.params.regressor, &set.features).unwrap();
    for group in [&f.ds.seen, &f.ds.unseen] {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| group.contains(&set.labels[i])).collect();
        let hits = idx.iter().filter(|&&i| nearest(f.bank.matrix(), pred.row(i)) == set.labels[i]).count();
        let frac = hits as f64 / idx.len() as f64;
        assert!(frac >= 0.8, "{frac} of exemplars map back to their class");
    }
}
