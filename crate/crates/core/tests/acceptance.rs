//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness (`harness = false`). By default a failing
//! criterion is reported but the process still exits 0; set
//! `SEGZSL_ACCEPT_STRICT=1` to turn any FAIL into a nonzero exit.

mod common;

use std::time::Instant;

use common::{fixture, grad_check, grad_check_with, latent_posterior_fixed_target, ENCODER, GENERATOR};
use numgrad::{Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segzsl::classify::ClassifierKind;
use segzsl::data::{bayes_oracle_accuracy, gen_synthetic_benchmark, load_container, save_container, SyntheticSpec};
use segzsl::networks::{checkpoint_bytes, params_from_checkpoint_bytes, Dims, GaussianDiag, GaussianVars, ModelParams};
use segzsl::objectives::*;
use segzsl::protocol::{
    exemplar_sweep, harmonic_mean, make_gzsl_split, per_class_accuracy, run_ablation_no_feedback, run_gzsl,
    ProtocolConfig, DEFAULT_SWEEP_COUNTS,
};
use segzsl::trainer::TrainConfig;

const SEEDS: std::ops::Range<u64> = 0..5;
const CASES: u32 = 100;

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn record(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        println!("[{}] criterion {n}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

fn kl_fd_worst(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut draw = |n: usize| Tensor::matrix(3, n, (0..3 * n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let leaves = [draw(4), draw(4), draw(4), draw(4)];
    let kl = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.param(t.clone())).collect();
        let p = GaussianVars {
            mean: vars[0],
            logvar: vars[1],
        };
        let q = GaussianVars {
            mean: vars[2],
            logvar: vars[3],
        };
        let out = kl_diag_gauss_vars(&mut g, p, q).unwrap();
        (g, out, vars)
    };
    let eval = |vals: &[Tensor]| {
        let (g, out, _) = kl(vals);
        g.value(out).item().unwrap()
    };
    let (g, out, vars) = kl(&leaves);
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let auto = grads.wrt(&g, *v);
        for j in 0..leaves[i].len() {
            let mut up = leaves.clone();
            up[i].data_mut()[j] += common::FD_STEP;
            let mut down = leaves.clone();
            down[i].data_mut()[j] -= common::FD_STEP;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * common::FD_STEP);
            let a = auto.data()[j];
            let diff = (a - numeric).abs();
            if diff > common::ABS_TOL {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    worst
}

fn gradient_oracle(t: &mut Tally) {
    let start = Instant::now();
    let w = LossWeights::default();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, v: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(v),
        None => worst.push((name, v)),
    };
    for seed in SEEDS {
        let f = fixture(seed);
        note("sup", grad_check(&f.params, Trainable::REGRESSOR, &|s| loss_sup(s, &f.batch, &f.bank).unwrap()));
        note("unsup", grad_check(&f.params, Trainable::REGRESSOR, &|s| loss_unsup(s, &f.draw, &f.bank).unwrap()));
        note(
            "regressor total",
            grad_check(&f.params, Trainable::REGRESSOR, &|s| {
                loss_regressor_total(s, &f.batch, &f.draw, &f.bank, &w).unwrap().total
            }),
        );
        note(
            "vae",
            grad_check(&f.params, Trainable::ENCODER_GENERATOR, &|s| {
                loss_vae(s, &f.batch, &f.bank, &f.noise).unwrap().loss
            }),
        );
        note("cyclic", grad_check(&f.params, GENERATOR, &|s| loss_cyclic_attr(s, &f.draw, &f.bank).unwrap()));
        note("reg", grad_check(&f.params, GENERATOR, &|s| loss_reg(s, &f.draw, &f.bank).unwrap()));
        let prior = |s: &mut Session| loss_latent_consistency(s, LatentSource::Prior { draw: &f.draw }, &f.bank).unwrap();
        note("latent prior", grad_check(&f.params, Trainable::ENCODER_GENERATOR, &prior));
        let posterior = |s: &mut Session| {
            let src = LatentSource::Posterior {
                batch: &f.batch,
                noise: &f.noise,
            };
            loss_latent_consistency(s, src, &f.bank).unwrap()
        };
        note("latent posterior", grad_check(&f.params, GENERATOR, &posterior));
        note(
            "latent posterior",
            grad_check_with(&f.params, ENCODER, &posterior, &|p| latent_posterior_fixed_target(p, &f.params, &f)),
        );
        let total = |s: &mut Session| {
            loss_generator_total(s, &f.batch, &f.noise, &f.draw, &f.bank, &w, LatentMode::Both).unwrap().total
        };
        note("generator total", grad_check(&f.params, GENERATOR, &total));
        let no_latent = LossWeights { lambda_e: 0.0, ..w };
        let oracle = |p: &ModelParams| {
            common::eval_loss(p, &|s| {
                loss_generator_total(s, &f.batch, &f.noise, &f.draw, &f.bank, &no_latent, LatentMode::Both).unwrap().total
            })
                + w.lambda_e * (latent_posterior_fixed_target(p, &f.params, &f) + common::eval_loss(p, &prior))
        };
        note("generator total", grad_check_with(&f.params, ENCODER, &total, &oracle));
        note("kl", kl_fd_worst(seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = max <= common::REL_TOL && secs < 30.0;
    let per: Vec<String> = worst.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect();
    t.record(
        1,
        "gradient oracle",
        pass,
        format!(
            "worst rel err {max:.2e} (<= 1e-4; |diff| <= 1e-8 counts as exact) over {} seeds in {secs:.1}s (< 30s) [{}]",
            SEEDS.end,
            per.join(", ")
        ),
    );
}

fn metric_reproduction(t: &mut Tally) {
    let rows = [(40.9, 30.5, 34.9), (41.5, 53.3, 46.7), (56.3, 67.8, 61.5), (58.3, 68.1, 62.8)];
    let mut pass = true;
    let mut got = Vec::new();
    for (a, b, want) in rows {
        let h = 100.0 * harmonic_mean(a / 100.0, b / 100.0).unwrap();
        let rounded = (h * 10.0).round() / 10.0;
        pass &= (rounded - want).abs() <= 0.1 + 1e-9;
        got.push(format!("({a}, {b}) -> {rounded:.1} (want {want})"));
    }
    t.record(2, "harmonic mean reproduction", pass, got.join(", "));
}

fn end_to_end(t: &mut Tally) {
    let (ds, truth) = gen_synthetic_benchmark(&SyntheticSpec::default()).unwrap();
    let cfg = ProtocolConfig::default();
    let start = Instant::now();
    let report = run_gzsl(&ds, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let split = make_gzsl_split(&ds, cfg.split_fraction, cfg.seed).unwrap();
    let all: Vec<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
    let oracle = bayes_oracle_accuracy(&ds, Some(&truth), &split.unseen_test, &all).unwrap();
    let unseen = report.acc_unseen.unwrap();
    let h = report.h.unwrap();
    let baseline = report.baseline.as_ref().unwrap().acc_unseen;
    let pass = oracle >= 0.9 && unseen >= 0.7 * oracle && unseen >= baseline + 0.3 && h >= 0.5 && secs < 300.0;
    t.record(
        3,
        "end-to-end synthetic GZSL",
        pass,
        format!(
            "oracle unseen {oracle:.3} (>= 0.9), acc_unseen {unseen:.3} (>= {:.3}), baseline unseen {baseline:.3} \
             (gap {:.3} >= 0.3), acc_seen {:.3}, H {h:.3} (>= 0.5), {secs:.1}s (< 300s)",
            0.7 * oracle,
            unseen - baseline,
            report.acc_seen.unwrap()
        ),
    );
}

fn feedback_ablation(t: &mut Tally) {
    let mut deltas = Vec::new();
    for seed in SEEDS {
        let (ds, _) = gen_synthetic_benchmark(&SyntheticSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = ProtocolConfig {
            seed,
            ..Default::default()
        };
        deltas.push(run_ablation_no_feedback(&ds, &cfg).unwrap().delta_zsl);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let pass = mean >= -0.01 && positive >= 3;
    let list: Vec<String> = deltas.iter().map(|d| format!("{d:+.4}")).collect();
    t.record(
        4,
        "feedback ablation direction",
        pass,
        format!("full - ablated per seed [{}], mean {mean:+.4} (>= -0.01), positive {positive}/5 (>= 3)", list.join(", ")),
    );
}

fn exemplar_sweep_shape(t: &mut Tally) {
    let (ds, _) = gen_synthetic_benchmark(&SyntheticSpec::default()).unwrap();
    let report = exemplar_sweep(&ds, &ProtocolConfig::default(), &DEFAULT_SWEEP_COUNTS, 1).unwrap();
    let at = |n: usize| report.counts.iter().position(|&c| c == n).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in ClassifierKind::ALL {
        let acc = &report.accuracy[kind.name()];
        let (a2, a50, a100) = (acc[at(2)], acc[at(50)], acc[at(100)]);
        pass &= a100 >= a2 - 0.02 && (a50 - a100).abs() <= 0.03;
        parts.push(format!("{} n=2 {a2:.3} n=50 {a50:.3} n=100 {a100:.3}", kind.name()));
    }
    t.record(5, "exemplar sweep shape", pass, parts.join("; "));
}

fn determinism(t: &mut Tally) {
    let (ds, _) = gen_synthetic_benchmark(&SyntheticSpec {
        seen: 6,
        unseen: 3,
        n_per_class: 30,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let cfg = ProtocolConfig {
        seed: 9,
        train: TrainConfig {
            pretrain_epochs: 2,
            joint_epochs: 3,
            hidden: 32,
            ..Default::default()
        },
        n_per_class: 20,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let outputs = [
            ("gzsl", run_gzsl(&ds, &cfg).unwrap().to_json()),
            ("ablate", run_ablation_no_feedback(&ds, &cfg).unwrap().to_json()),
            ("sweep", exemplar_sweep(&ds, &cfg, &[2, 10], 1 + run).unwrap().to_json()),
        ];
        for (name, json) in outputs {
            let path = dir.path().join(format!("{name}-{run}.json"));
            std::fs::write(&path, json).unwrap();
            files.push((name, path));
        }
    }
    let half = files.len() / 2;
    let mut same = Vec::new();
    let mut pass = true;
    for i in 0..half {
        let a = std::fs::read(&files[i].1).unwrap();
        let b = std::fs::read(&files[i + half].1).unwrap();
        pass &= a == b;
        same.push(format!("{} {}", files[i].0, if a == b { "identical" } else { "DIFFERENT" }));
    }
    t.record(
        6,
        "determinism",
        pass,
        format!("two runs, same seed/config: {} (sweep with 1 vs 2 threads)", same.join(", ")),
    );
}

fn invariant_suites(t: &mut Tally) {
    let mut results: Vec<(&str, Result<(), String>)> = Vec::new();
    let runner = || {
        let cfg = Config {
            failure_persistence: None,
            ..Config::with_cases(CASES)
        };
        TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
    };

    let r = runner().run(
        &prop::collection::vec((-5.0f64..5.0, -6.0f64..2.0, -5.0f64..5.0, -6.0f64..2.0), 1..8),
        |v| {
            let p = GaussianDiag::new(v.iter().map(|t| t.0).collect(), v.iter().map(|t| t.1).collect()).unwrap();
            let q = GaussianDiag::new(v.iter().map(|t| t.2).collect(), v.iter().map(|t| t.3).collect()).unwrap();
            prop_assert!(kl_diag_gauss(&p, &q).unwrap() >= 0.0);
            Ok(())
        },
    );
    results.push(("kl >= 0", r.map_err(|e| e.to_string())));

    let r = runner().run(&(0.0f64..=1.0, 0.0f64..=1.0), |(a, b)| {
        let h = harmonic_mean(a, b).unwrap();
        prop_assert!(a.min(b) - 1e-15 <= h && h <= a.max(b) + 1e-15);
        Ok(())
    });
    results.push(("H bounds", r.map_err(|e| e.to_string())));

    let r = runner().run(
        &(
            prop::collection::vec((0usize..5, 0usize..5), 1..50),
            Just((0usize..5).collect::<Vec<_>>()).prop_shuffle(),
            Just((0usize..50).collect::<Vec<_>>()).prop_shuffle(),
        ),
        |(pairs, rename, order)| {
            let classes: Vec<usize> = (0..5).collect();
            let (y, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let base = per_class_accuracy(&y, &p, &classes).unwrap().mean;
            let idx: Vec<usize> = order.into_iter().filter(|&i| i < pairs.len()).collect();
            let (y2, p2): (Vec<usize>, Vec<usize>) = idx.iter().map(|&i| (rename[y[i]], rename[p[i]])).unzip();
            prop_assert!((per_class_accuracy(&y2, &p2, &classes).unwrap().mean - base).abs() < 1e-12);
            Ok(())
        },
    );
    results.push(("per-class accuracy permutation", r.map_err(|e| e.to_string())));

    let r = runner().run(&(2usize..5, 1usize..3, 2usize..8, 0.05f64..0.95, any::<u64>()), |(s, u, n, frac, seed)| {
        let (ds, _) = gen_synthetic_benchmark(&SyntheticSpec {
            seen: s,
            unseen: u,
            features: 4,
            attributes: 3,
            n_per_class: n,
            nuisance_dim: 0,
            seed,
            ..Default::default()
        })
        .unwrap();
        let sp = make_gzsl_split(&ds, frac, seed).unwrap();
        let mut train_test: Vec<usize> = sp.seen_train.iter().chain(&sp.seen_test).copied().collect();
        train_test.sort_unstable();
        prop_assert_eq!(train_test, ds.rows_of_classes(&ds.seen));
        prop_assert!(sp.seen_train.iter().all(|r| !sp.seen_test.contains(r)));
        prop_assert_eq!(&sp.unseen_test, &ds.rows_of_classes(&ds.unseen));
        Ok(())
    });
    results.push(("split partition", r.map_err(|e| e.to_string())));

    let r = runner().run(&(1usize..6, 1usize..4, 1usize..3, 1usize..5, any::<u64>()), |(d, l, z, h, seed)| {
        let p = common::jittered_params(Dims::new(d, l, z, h).unwrap(), seed);
        let q = params_from_checkpoint_bytes(&checkpoint_bytes(&p)).unwrap();
        prop_assert_eq!(common::params_bits(&p), common::params_bits(&q));
        Ok(())
    });
    results.push(("checkpoint round trip", r.map_err(|e| e.to_string())));

    let r = runner().run(&(1usize..4, 1usize..3, 1usize..5, any::<u64>()), |(s, u, n, seed)| {
        let (ds, _) = gen_synthetic_benchmark(&SyntheticSpec {
            seen: s,
            unseen: u,
            features: 5,
            attributes: 3,
            n_per_class: n,
            nuisance_dim: 1,
            seed,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_container(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_container(dir.path()).unwrap(), ds);
        Ok(())
    });
    results.push(("container round trip", r.map_err(|e| e.to_string())));

    let pass = results.iter().all(|r| r.1.is_ok());
    let parts: Vec<String> = results
        .iter()
        .map(|(n, r)| match r {
            Ok(()) => format!("{n} ok"),
            Err(e) => format!("{n} failed: {e}"),
        })
        .collect();
    t.record(7, "invariant suites", pass, format!("{CASES} cases each: {}", parts.join(", ")));
}

fn main() {
    let mut t = Tally { failed: Vec::new() };
    gradient_oracle(&mut t);
    metric_reproduction(&mut t);
    invariant_suites(&mut t);
    determinism(&mut t);
    end_to_end(&mut t);
    exemplar_sweep_shape(&mut t);
    feedback_ablation(&mut t);
    println!("acceptance: {}/7 criteria passed", 7 - t.failed.len());
    if !t.failed.is_empty() && std::env::var("SEGZSL_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
