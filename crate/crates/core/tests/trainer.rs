mod common;

use common::{bits, params_bits, seen_batch, tiny_benchmark, tiny_train_config};
use numgrad::{Adam, AdamConfig, Tensor};
use segzsl::networks::{ModelParams, Network};
use segzsl::objectives::{
    loss_sup, loss_vae, AttributeBank, LabeledBatch, LossWeights, PosteriorNoise, Session, Trainable,
};
use segzsl::rng;
use segzsl::trainer::{pretrain_vae, train, train_joint, EarlyStop, Phase, TrainConfig, TrainLog, Trainer};
use segzsl::Error;

fn group_bits<N: Network>(n: &N) -> Vec<u64> {
    n.tensors().into_iter().flat_map(bits).collect()
}

fn fixture(seed: u64) -> (LabeledBatch, AttributeBank, TrainConfig, ModelParams) {
    let (ds, _) = tiny_benchmark(seed);
    let (batch, bank) = seen_batch(&ds);
    let cfg = tiny_train_config(seed);
    let params = ModelParams::init(cfg.dims(6, 5).unwrap(), seed).unwrap();
    (batch, bank, cfg, params)
}

#[test]
fn zero_epochs_leave_params_untouched() {
    let (batch, bank, mut cfg, params) = fixture(1);
    cfg.pretrain_epochs = 0;
    cfg.joint_epochs = 0;
    let (out, log) = train(&batch, &bank, &cfg).unwrap();
    assert_eq!(params_bits(&out), params_bits(&params));
    assert!(log.epochs.is_empty());
}

#[test]
fn each_step_touches_only_its_group() {
    let (batch, bank, cfg, params) = fixture(2);
    let mut t = Trainer::new(params, &cfg).unwrap();

    let (enc, gen, reg) = (group_bits(&t.params.encoder), group_bits(&t.params.generator), group_bits(&t.params.regressor));
    t.pretrain_step(&batch, &bank).unwrap();
    assert_eq!(group_bits(&t.params.regressor), reg);
    assert_ne!(group_bits(&t.params.encoder), enc);
    assert_ne!(group_bits(&t.params.generator), gen);

    let (enc, gen, reg) = (group_bits(&t.params.encoder), group_bits(&t.params.generator), group_bits(&t.params.regressor));
    t.regressor_step(&batch, &bank).unwrap();
    assert_eq!(group_bits(&t.params.encoder), enc);
    assert_eq!(group_bits(&t.params.generator), gen);
    assert_ne!(group_bits(&t.params.regressor), reg);

    let (enc, gen, reg) = (group_bits(&t.params.encoder), group_bits(&t.params.generator), group_bits(&t.params.regressor));
    t.generator_step(&batch, &bank).unwrap();
    assert_eq!(group_bits(&t.params.regressor), reg);
    assert_ne!(group_bits(&t.params.encoder), enc);
    assert_ne!(group_bits(&t.params.generator), gen);
}

#[test]
fn regressor_step_without_unsup_weight_is_a_supervised_step() {
    let (batch, bank, mut cfg, params) = fixture(3);
    cfg.weights.lambda_r = 0.0;
    let mut t = Trainer::new(params.clone(), &cfg).unwrap();
    let step = t.regressor_step(&batch, &bank).unwrap();

    let mut s = Session::new(&params, Trainable::REGRESSOR);
    let sup = loss_sup(&mut s, &batch, &bank).unwrap();
    assert_eq!(step.sup, s.value(sup));
    assert_eq!(step.total, step.sup);
    let g = s.gradients(sup).unwrap();
    let mut expected = params.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), expected.regressor.tensors());
    opt.step(&mut expected.regressor.tensors_mut(), &g.regressor).unwrap();
    assert_eq!(group_bits(&t.params.regressor), group_bits(&expected.regressor));
}

#[test]
fn generator_step_without_feedback_is_a_vae_step() {
    let (batch, bank, mut cfg, params) = fixture(4);
    cfg.weights = LossWeights::zero();
    let mut t = Trainer::new(params.clone(), &cfg).unwrap();
    let step = t.generator_step(&batch, &bank).unwrap();

    // Same noise the trainer draws first on its generator stream.
    let mut r = rng::stream_rng(cfg.seed, rng::GENERATOR_STEP, 0);
    let noise = PosteriorNoise::sample(&mut r, batch.len(), params.dims).unwrap();
    let mut s = Session::new(&params, Trainable::ENCODER_GENERATOR);
    let vae = loss_vae(&mut s, &batch, &bank, &noise).unwrap();
    assert_eq!(step.vae, s.value(vae.loss));
    assert_eq!(step.total, step.vae);

    let g = s.gradients(vae.loss).unwrap();
    let mut expected = params.clone();
    let mut opt = Adam::new(
        AdamConfig::with_lr(cfg.lr),
        expected.encoder.tensors().into_iter().chain(expected.generator.tensors()),
    );
    let grads: Vec<Tensor> = g.encoder.into_iter().chain(g.generator).collect();
    let mut targets = expected.encoder.tensors_mut();
    targets.extend(expected.generator.tensors_mut());
    opt.step(&mut targets, &grads).unwrap();
    for (a, b) in t.params.tensors().into_iter().zip(expected.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn repeated_regressor_steps_fit_the_attributes() {
    let (batch, bank, mut cfg, params) = fixture(5);
    cfg.lr = 1e-2;
    let mut t = Trainer::new(params, &cfg).unwrap();
    let first = t.regressor_step(&batch, &bank).unwrap().sup;
    let mut last = first;
    for _ in 0..400 {
        last = t.regressor_step(&batch, &bank).unwrap().sup;
    }
    assert!(last < 0.1 * first, "sup loss {first} -> {last}");
}

#[test]
fn repeated_generator_steps_lower_the_objective() {
    let (batch, bank, mut cfg, params) = fixture(6);
    cfg.lr = 5e-3;
    let mut t = Trainer::new(params, &cfg).unwrap();
    let totals: Vec<f64> = (0..50).map(|_| t.generator_step(&batch, &bank).unwrap().total).collect();
    let head = totals[..5].iter().sum::<f64>() / 5.0;
    let tail = totals[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "objective {head} -> {tail}");
}

#[test]
fn no_joint_epochs_equals_pretraining() {
    let (batch, bank, mut cfg, params) = fixture(7);
    cfg.joint_epochs = 0;
    let (out, log) = train(&batch, &bank, &cfg).unwrap();
    let mut t = Trainer::new(params, &cfg).unwrap();
    let mut manual = TrainLog::default();
    pretrain_vae(&mut t, &batch, &bank, &mut manual).unwrap();
    assert_eq!(params_bits(&out), params_bits(&t.params));
    assert_eq!(log.without_timing(), manual.without_timing());
    assert!(log.epochs.iter().all(|e| e.phase == Phase::Pretrain));
}

#[test]
fn training_is_deterministic() {
    let (batch, bank, cfg, _) = fixture(8);
    let (a, la) = train(&batch, &bank, &cfg).unwrap();
    let (b, lb) = train(&batch, &bank, &cfg).unwrap();
    assert_eq!(params_bits(&a), params_bits(&b));
    assert_eq!(la.without_timing().to_jsonl(), lb.without_timing().to_jsonl());

    let other = TrainConfig { seed: 9, ..cfg };
    let (c, _) = train(&batch, &bank, &other).unwrap();
    assert_ne!(params_bits(&a), params_bits(&c));
}

#[test]
fn log_records_every_epoch_in_order() {
    let (batch, bank, cfg, _) = fixture(10);
    let (_, log) = train(&batch, &bank, &cfg).unwrap();
    assert_eq!(log.epochs.len(), cfg.pretrain_epochs + cfg.joint_epochs);
    for (i, e) in log.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        let joint = i >= cfg.pretrain_epochs;
        assert_eq!(e.phase == Phase::Joint, joint);
        assert_eq!(e.sup.is_some(), joint);
        assert_eq!(e.generator.is_some(), joint);
        assert!(e.vae.is_finite());
    }
    let text = log.without_timing().to_jsonl();
    assert_eq!(text.lines().count(), log.epochs.len());
    assert!(text.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn early_stop_cuts_a_plateau_short() {
    let (batch, bank, mut cfg, params) = fixture(11);
    cfg.pretrain_epochs = 0;
    cfg.joint_epochs = 30;
    cfg.lr = 1e-12;
    cfg.early_stop = Some(EarlyStop {
        patience: 3,
        rel_tol: 0.5,
    });
    let mut t = Trainer::new(params, &cfg).unwrap();
    let mut log = TrainLog::default();
    train_joint(&mut t, &batch, &bank, &mut log).unwrap();
    assert_eq!(log.epochs.len(), 4);
}

#[test]
fn non_finite_data_is_reported_as_numeric_failure() {
    let (mut batch, bank, cfg, _) = fixture(12);
    batch.x.data_mut()[0] = 1e300;
    let err = train(&batch, &bank, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(matches!(err, Error::NonFinite { phase: "pretrain", .. }));
}

#[test]
fn unseen_labels_are_rejected() {
    let (ds, _) = tiny_benchmark(13);
    let bank = ds.bank().unwrap();
    let batch = ds.batch(&ds.rows_of_classes(&ds.unseen)).unwrap();
    let err = train(&batch, &bank, &tiny_train_config(13)).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}
