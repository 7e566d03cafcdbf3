mod common;

use common::{ema_closed_form, momentum_closed_form, random_tensor, rng};
use odil::adapt::full_data_statistics;
use odil::batchnorm::SnapshotOrigin;
use odil::nn::diff_checkpoints;
use odil::{
    adapt_domain, bn_restore, bn_snapshot, infer_with_task, momentum_sequence, AdaptSample, AdaptationConfig, BnState,
    Checkpoint, DomainStatsRegistry, Error, Mode, Model, ModelConfig, MomentumSchedule, SelectionPolicy, TaskId, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

fn constant_mean_batch(m: f64, spread: f64, n: usize) -> Tensor {
    // Symmetric values around m: batch mean is m, batch variance is spread^2.
    let data: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { m + spread } else { m - spread }).collect();
    Tensor::new(vec![n, 1], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ema_matches_closed_form(
        m0 in -5.0f64..5.0,
        m in -5.0f64..5.0,
        spread in 0.1f64..3.0,
        alpha in 0.01f64..1.0,
        j in 1i32..60,
    ) {
        let mut bn = BnState::new(1, 1e-5, alpha).unwrap();
        bn.set_running_stats(&[m0], &[1.0]).unwrap();
        let x = constant_mean_batch(m, spread, 4);
        for _ in 0..j {
            bn.forward_train(&x).unwrap();
        }
        let expected = ema_closed_form(m0, m, alpha, j);
        prop_assert!((bn.running_mean()[0] - expected).abs() < 1e-10);
        let expected_var = ema_closed_form(1.0, spread * spread, alpha, j);
        prop_assert!((bn.running_var()[0] - expected_var).abs() < 1e-10);
    }

    #[test]
    fn running_variance_stays_non_negative(
        seed in 0u64..10_000,
        steps in 1usize..30,
    ) {
        let mut r = rng(seed);
        let mut bn = BnState::new(2, 1e-5, 0.5).unwrap();
        for _ in 0..steps {
            bn.set_momentum(r.random_range(0.01..=1.0)).unwrap();
            let scale = r.random_range(0.0..10.0);
            let n = r.random_range(1..4);
            bn.forward_train(&random_tensor(&mut r, &[n, 2, 2, 2], scale)).unwrap();
            prop_assert!(bn.running_var().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn momentum_sequence_matches_closed_form(
        alpha0 in 0.001f64..=1.0,
        omega in 0.001f64..0.999,
        frac in 0.001f64..0.999,
        k in 1usize..1000,
    ) {
        let delta = alpha0 * frac;
        let schedule = MomentumSchedule { initial: alpha0, decay: omega, offset: delta, samples: k };
        match momentum_sequence(&schedule) {
            Ok(seq) => {
                prop_assert_eq!(seq.len(), k);
                for (i, a) in seq.iter().enumerate() {
                    let expected = momentum_closed_form(alpha0, omega, delta, i as i32 + 1);
                    prop_assert!((a - expected).abs() < 1e-12, "k={} {} vs {}", i + 1, a, expected);
                }
                let fixed = schedule.fixed_point();
                let strictly = |f: fn(f64, f64) -> bool| seq.windows(2).all(|w| f(w[0], w[1]));
                if fixed > alpha0 {
                    prop_assert!(alpha0 < seq[0]);
                    prop_assert!(strictly(|a, b| a <= b));
                } else if fixed < alpha0 {
                    prop_assert!(alpha0 > seq[0]);
                    prop_assert!(strictly(|a, b| a >= b));
                }
            }
            // Rejected only when some term would exceed 1.
            Err(_) => prop_assert!(fixed_point_exceeds_one(&schedule)),
        }
    }
}

fn fixed_point_exceeds_one(s: &MomentumSchedule) -> bool {
    (1..=s.samples as i32).any(|k| momentum_closed_form(s.initial, s.decay, s.offset, k) > 1.0)
}

#[test]
fn momentum_sequence_is_strictly_monotone_away_from_the_fixed_point() {
    let up = momentum_sequence(&MomentumSchedule::standard(50)).unwrap();
    assert!(up.windows(2).all(|w| w[0] < w[1]));
    let down = momentum_sequence(&MomentumSchedule::decaying(50)).unwrap();
    assert!(down.windows(2).all(|w| w[0] > w[1]));
    let flat = MomentumSchedule { initial: 0.5, decay: 0.5, offset: 0.25, samples: 20 };
    assert!(momentum_sequence(&flat).unwrap().iter().all(|&a| (a - 0.5).abs() < 1e-15));
}

#[test]
fn momentum_sequence_closed_form_for_twenty_random_schedules() {
    let mut r = rng(77);
    let mut done = 0;
    while done < 20 {
        let alpha0 = r.random_range(0.01..1.0);
        let omega = r.random_range(0.01..0.99);
        let delta = alpha0 * r.random_range(0.01..0.99);
        let s = MomentumSchedule { initial: alpha0, decay: omega, offset: delta, samples: 100 };
        let Ok(seq) = momentum_sequence(&s) else { continue };
        for (i, a) in seq.iter().enumerate() {
            assert!((a - momentum_closed_form(alpha0, omega, delta, i as i32 + 1)).abs() < 1e-12);
        }
        done += 1;
    }
}

#[test]
fn fresh_snapshot_holds_init_statistics_and_restore_round_trips() {
    let mut model = Model::new(ModelConfig::reference((3, 4), 5), 1).unwrap();
    let fresh = bn_snapshot(&model, TaskId::BASE, SnapshotOrigin::Base);
    for layer in fresh.layers() {
        assert!(layer.running_mean.iter().all(|&m| m == 0.0));
        assert!(layer.running_var.iter().all(|&v| v == 1.0));
    }
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[3, 1, 16, 16], 1.0);
    model.forward(&x, Mode::Train).unwrap();
    model.clear_cache();
    let snap = bn_snapshot(&model, TaskId(2), SnapshotOrigin::Manual);
    let expected = model.forward_eval(&x).unwrap();
    model.forward(&random_tensor(&mut r, &[3, 1, 16, 16], 4.0), Mode::Train).unwrap();
    model.clear_cache();
    assert!(!model.forward_eval(&x).unwrap().bit_eq(&expected));
    bn_restore(&mut model, &snap).unwrap();
    assert!(model.forward_eval(&x).unwrap().bit_eq(&expected));

    let mut other = Model::new(ModelConfig::reference((2, 4), 5), 1).unwrap();
    assert!(bn_restore(&mut other, &snap).is_err());
}

fn adapt_samples(r: &mut rand_chacha::ChaCha8Rng, k: usize, scale: f64, offset: f64) -> Vec<AdaptSample> {
    (0..k)
        .map(|i| {
            let mut t = random_tensor(r, &[1, 16, 16], 1.0);
            t.data_mut().iter_mut().for_each(|v| *v = *v * scale + offset);
            AdaptSample { input: t, label: Some(i % 5) }
        })
        .collect()
}

#[test]
fn adapt_domain_changes_only_running_statistics() {
    let model = Model::new(ModelConfig::reference((3, 4), 5), 3).unwrap();
    let mut adapted = model.clone();
    let mut registry = DomainStatsRegistry::from_base(&model);
    let mut r = rng(9);
    let samples = adapt_samples(&mut r, 10, 2.0, 1.0);
    let cfg = AdaptationConfig::new(MomentumSchedule::standard(10));
    adapt_domain(&mut adapted, &mut registry, TaskId(2), &samples, &cfg).unwrap();
    let a = Checkpoint::new(model, 0, None);
    let b = Checkpoint::new(adapted, 0, None);
    let diff = diff_checkpoints(&a, &b);
    assert!(!diff.is_empty());
    assert!(diff.iter().all(|d| d.ends_with("running_mean") || d.ends_with("running_var")), "{diff:?}");
    // Momentum is restored too.
    for (x, y) in a.model.bn_layers().zip(b.model.bn_layers()) {
        assert_eq!(x.momentum().to_bits(), y.momentum().to_bits());
    }
}

#[test]
fn adapt_domain_is_deterministic() {
    let model = Model::new(ModelConfig::reference((3, 4), 5), 3).unwrap();
    let mut r = rng(10);
    let samples = adapt_samples(&mut r, 6, 1.5, -0.5);
    for selection in [SelectionPolicy::FinalK, SelectionPolicy::BestLabeled] {
        let mut cfg = AdaptationConfig::new(MomentumSchedule::standard(6));
        cfg.selection = selection;
        let run = || {
            let mut m = model.clone();
            let mut reg = DomainStatsRegistry::from_base(&m);
            adapt_domain(&mut m, &mut reg, TaskId(4), &samples, &cfg).unwrap()
        };
        assert!(run().stats_bit_eq(&run()));
    }
}

#[test]
fn adapt_domain_rejects_bad_input_without_side_effects() {
    let model = Model::new(ModelConfig::reference((3, 4), 5), 3).unwrap();
    let mut m = model.clone();
    let mut reg = DomainStatsRegistry::from_base(&m);
    let mut r = rng(11);
    let cfg = AdaptationConfig::new(MomentumSchedule::standard(4));
    let short = adapt_samples(&mut r, 3, 1.0, 0.0);
    assert!(matches!(adapt_domain(&mut m, &mut reg, TaskId(2), &short, &cfg), Err(Error::Config(_))));
    assert!(matches!(
        adapt_domain(&mut m, &mut reg, TaskId::BASE, &adapt_samples(&mut r, 4, 1.0, 0.0), &cfg),
        Err(Error::DuplicateTask(_))
    ));
    let mut unlabeled = adapt_samples(&mut r, 4, 1.0, 0.0);
    unlabeled[2].label = None;
    let mut best = cfg.clone();
    best.selection = SelectionPolicy::BestLabeled;
    assert!(adapt_domain(&mut m, &mut reg, TaskId(2), &unlabeled, &best).is_err());
    let mut wrong_shape = adapt_samples(&mut r, 4, 1.0, 0.0);
    wrong_shape[3].input = Tensor::zeros(&[1, 8, 8]);
    assert!(adapt_domain(&mut m, &mut reg, TaskId(2), &wrong_shape, &cfg).is_err());
    assert_eq!(reg.len(), 1);
    assert!(diff_checkpoints(&Checkpoint::new(model, 0, None), &Checkpoint::new(m, 0, None)).is_empty());
}

#[test]
fn earlier_tasks_are_untouched_by_later_adaptations() {
    let mut model = Model::new(ModelConfig::reference((3, 4), 5), 4).unwrap();
    let mut r = rng(12);
    // Give the base statistics some history.
    model.forward(&random_tensor(&mut r, &[8, 1, 16, 16], 1.0), Mode::Train).unwrap();
    model.clear_cache();
    let mut reg = DomainStatsRegistry::from_base(&model);
    let probe = random_tensor(&mut r, &[20, 1, 16, 16], 2.0);
    let cfg = AdaptationConfig::new(MomentumSchedule::standard(5));
    let mut recorded = vec![infer_with_task(&mut model, &reg, TaskId::BASE, &probe).unwrap()];
    for t in 2..=6u32 {
        let samples = adapt_samples(&mut r, 5, t as f64 * 0.5, t as f64 * 0.3 - 1.0);
        adapt_domain(&mut model, &mut reg, TaskId(t), &samples, &cfg).unwrap();
        recorded.push(infer_with_task(&mut model, &reg, TaskId(t), &probe).unwrap());
        for s in 1..=t {
            let again = infer_with_task(&mut model, &reg, TaskId(s), &probe).unwrap();
            assert_eq!(again, recorded[s as usize - 1], "task {s} after adapting {t}");
        }
    }
    assert!(matches!(infer_with_task(&mut model, &reg, TaskId(99), &probe), Err(Error::UnknownTask(TaskId(99)))));
}

#[test]
fn full_data_statistics_are_exact_moments_of_the_first_layer_input() {
    let model = Model::new(ModelConfig::reference((3, 4), 5), 4).unwrap();
    let mut r = rng(13);
    let x = random_tensor(&mut r, &[7, 1, 16, 16], 1.0);
    let snap = full_data_statistics(&model, &x, TaskId(3)).unwrap();
    let odil::nn::Layer::Conv2d(conv) = &model.layers()[0] else { panic!() };
    let y = conv.forward(&x).unwrap();
    let per = 14 * 14;
    for c in 0..3 {
        let vals: Vec<f64> = (0..7).flat_map(|b| y.item(b)[c * per..(c + 1) * per].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((snap.layers()[0].running_mean[c] - mean).abs() < 1e-10);
        assert!((snap.layers()[0].running_var[c] - var).abs() < 1e-10);
    }
}
