mod common;

use moat_core::autodiff::Tape;
use moat_core::nn::{Ctx, Mode, ParamStore};
use moat_core::rng::{stream, Stream};
use moat_core::train::{
    accuracy, adamw_update, clip_global_norm, cosine_lr, global_norm, label_smoothed_ce, recalibrate_bn,
    smoothed_target_entropy, synth_dataset, train, AdamW, DatasetKind, TrainConfig,
};
use moat_core::zoo::{micro_config, Model};
use moat_core::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

// ---------------------------------------------------------------- AdamW

fn step_scalar(theta: f64, g: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, wd: f64) -> f64 {
    let mut th = [theta];
    let (mut mm, mut vv) = ([*m], [*v]);
    adamw_update(&mut th, &[g], &mut mm, &mut vv, t, lr, 0.9, 0.999, 1e-8, wd);
    *m = mm[0];
    *v = vv[0];
    th[0]
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let (mut m, mut v) = (0.0, 0.0);
    assert_eq!(step_scalar(0.7, 0.0, &mut m, &mut v, 1, 0.1, 0.0), 0.7);
}

#[test]
fn adamw_pure_decay() {
    let (mut m, mut v) = (0.0, 0.0);
    let got = step_scalar(0.7, 0.0, &mut m, &mut v, 1, 0.1, 0.05);
    assert!((got - 0.7 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
}

#[test]
fn adamw_first_step_with_unit_gradient() {
    let (lr, wd, th) = (0.01, 0.05, 0.5);
    let (mut m, mut v) = (0.0, 0.0);
    let got = step_scalar(th, 1.0, &mut m, &mut v, 1, lr, wd);
    let want = th - lr / (1.0 + 1e-8) - lr * wd * th;
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn adamw_matches_scripted_recurrence() {
    let (lr, wd, b1, b2, eps) = (3e-3, 0.05, 0.9f64, 0.999f64, 1e-8);
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 1.1];
    let (mut th, mut m, mut v) = (0.8, 0.0, 0.0);
    let (mut rth, mut rm, mut rv) = (0.8f64, 0.0f64, 0.0f64);
    for (i, &g) in grads.iter().enumerate() {
        let t = i as u64 + 1;
        th = step_scalar(th, g, &mut m, &mut v, t, lr, wd);
        rm = b1 * rm + (1.0 - b1) * g;
        rv = b2 * rv + (1.0 - b2) * g * g;
        let mh = rm / (1.0 - b1.powi(t as i32));
        let vh = rv / (1.0 - b2.powi(t as i32));
        rth -= lr * (mh / (vh.sqrt() + eps) + wd * rth);
        assert!((th - rth).abs() < 1e-14, "step {t}");
    }
}

#[test]
fn adamw_aborts_on_non_finite_gradient_naming_the_parameter() {
    let mut store = ParamStore::<f64>::from_tensors(vec![
        ("a.weight".into(), Tensor::ones(&[2])),
        ("b.weight".into(), Tensor::ones(&[2])),
    ])
    .unwrap();
    let a = store.id("a.weight").unwrap();
    let b = store.id("b.weight").unwrap();
    store.accumulate_grads(vec![
        (a, Tensor::ones(&[2])),
        (b, Tensor::<f64>::from_f64(&[2], &[1.0, f64::NAN]).unwrap()),
    ]);
    let mut opt = AdamW::new(0.0);
    let err = opt.step(&mut store, 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("b.weight")), "{err}");
    assert_eq!(**store.value(a), Tensor::ones(&[2]));
}

// ---------------------------------------------------------------- cross-entropy

fn ce(logits: &[f64], k: usize, labels: &[usize], alpha: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::<f64>::from_f64(&[labels.len(), k], logits).unwrap());
    let loss = label_smoothed_ce(&mut tape, l, labels, alpha).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn ce_uniform_logits_is_ln_k() {
    assert!((ce(&[0.3; 8], 4, &[1, 3], 0.0) - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn ce_confident_prediction_is_near_zero() {
    assert!(ce(&[20.0, 0.0, 0.0], 3, &[0], 0.0) < 1e-3);
}

#[test]
fn ce_matches_straight_line_oracle() {
    let (k, n, alpha) = (10, 3, 0.1);
    let mut rng = stream(1, Stream::Data);
    let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels = [2, 9, 0];
    let mut want = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        for (j, &z) in row.iter().enumerate() {
            let t = if j == y { 1.0 - alpha + alpha / k as f64 } else { alpha / k as f64 };
            want -= t * (z - lse);
        }
    }
    want /= n as f64;
    assert!((ce(&logits, k, &labels, alpha) - want).abs() < 1e-12);
}

#[test]
fn ce_rejects_out_of_range_labels() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::zeros(&[1, 3]));
    assert!(matches!(label_smoothed_ce(&mut tape, l, &[3], 0.1), Err(Error::Label { label: 3, classes: 3 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothed_ce_is_bounded_by_target_entropy(logits in proptest::collection::vec(-30.0f64..30.0, 10), label in 0usize..10, alpha in 0.01f64..0.5) {
        let bound = smoothed_target_entropy(10, alpha);
        prop_assert!(ce(&logits, 10, &[label], alpha) >= bound - 1e-9);
    }

    #[test]
    fn clipping_never_increases_the_norm(vals in proptest::collection::vec(-10.0f64..10.0, 2..40), max in 0.01f64..20.0) {
        let mid = vals.len() / 2;
        let mut grads = vec![
            Tensor::<f64>::from_f64(&[mid], &vals[..mid]).unwrap(),
            Tensor::<f64>::from_f64(&[vals.len() - mid], &vals[mid..]).unwrap(),
        ];
        let before = global_norm(&grads.iter().collect::<Vec<_>>());
        let reported = clip_global_norm(&mut grads, max);
        let after = global_norm(&grads.iter().collect::<Vec<_>>());
        prop_assert_eq!(before, reported);
        prop_assert!(after <= before + 1e-12);
        prop_assert!((after - before.min(max)).abs() < 1e-9);
    }
}

#[test]
fn smoothed_loss_gradient_passes_gradcheck() {
    use moat_core::gradcheck::{check_primitive, GradcheckOptions};
    let logits = common::random_input(&[3, 5], 2).map(|v| 3.0 * v);
    let r = check_primitive(vec![("logits", logits)], &GradcheckOptions::default(), |t, xs| {
        label_smoothed_ce(t, xs[0], &[0, 4, 2], 0.1)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn accuracy_uses_first_argmax() {
    let logits = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
    assert_eq!(accuracy(&logits, &[0, 1, 0]), 1.0);
    assert_eq!(accuracy(&logits, &[1, 1, 1]), 1.0 / 3.0);
}

// ---------------------------------------------------------------- schedule

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    let cfg = TrainConfig { peak_lr: 1e-2, min_lr: 1e-4, warmup_steps: 10, total_steps: 110, ..Default::default() };
    assert_eq!(cosine_lr(0, &cfg), 0.0);
    assert!((cosine_lr(5, &cfg) - 5e-3).abs() < 1e-15);
    assert_eq!(cosine_lr(10, &cfg), 1e-2);
    assert!((cosine_lr(60, &cfg) - (1e-4 + (1e-2 - 1e-4) / 2.0)).abs() < 1e-12);
    assert!((cosine_lr(110, &cfg) - 1e-4).abs() < 1e-15);
    let lrs: Vec<f64> = (10..=110).map(|s| cosine_lr(s, &cfg)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

// ---------------------------------------------------------------- clipping

#[test]
fn clipping_cases() {
    let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!(g[0].max_abs_diff(&Tensor::<f64>::from_f64(&[2], &[0.6, 0.8]).unwrap()) < 1e-15);

    let orig = vec![Tensor::<f64>::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap()];
    let mut g = orig.clone();
    clip_global_norm(&mut g, 1.0);
    assert_eq!(g, orig);
}

// ---------------------------------------------------------------- data

#[test]
fn datasets_are_seeded_and_balanced() {
    for kind in [DatasetKind::Stripes, DatasetKind::TwoGaussians] {
        let a = synth_dataset::<f32>(kind, 100, 16, 7).unwrap();
        let b = synth_dataset::<f32>(kind, 100, 16, 7).unwrap();
        let c = synth_dataset::<f32>(kind, 100, 16, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 50);
        assert_eq!(a.images.shape(), &[100, 16, 16, 3]);
        assert!(a.images.data().iter().all(|v| v.is_finite()));
    }
    assert!(synth_dataset::<f32>(DatasetKind::Stripes, 10, 15, 0).is_err());
}

#[test]
fn gaussian_classes_differ_in_mean() {
    let d = synth_dataset::<f64>(DatasetKind::TwoGaussians, 40, 16, 1).unwrap();
    let per = 16 * 16 * 3;
    let mean = |cls: usize| {
        let rows: Vec<_> = (0..40).filter(|&i| d.labels[i] == cls).collect();
        rows.iter().map(|&i| d.images.data()[i * per..(i + 1) * per].iter().sum::<f64>()).sum::<f64>()
            / (rows.len() * per) as f64
    };
    assert!(mean(1) - mean(0) > 0.3);
}

// ---------------------------------------------------------------- training loop

fn tiny_model(seed: u64) -> Model<f64> {
    Model::new(&micro_config([16, 16, 32, 32, 32], 32, 2), seed).unwrap()
}

#[test]
fn one_small_step_lowers_the_first_batch_loss() {
    let data = synth_dataset::<f64>(DatasetKind::Stripes, 8, 32, 0).unwrap();
    let (x, y) = data.batch(&(0..8).collect::<Vec<_>>());
    // Batch statistics, as in training: with untouched running statistics the
    // fresh model's logits are nearly constant.
    let loss = |m: &Model<f64>| {
        let mut cx = Ctx::new(&m.store, Mode::Train, 0);
        let xv = cx.input(x.clone());
        let logits = m.forward(&mut cx, xv).unwrap();
        let l = label_smoothed_ce(&mut cx.tape, logits, &y, 0.1).unwrap();
        cx.value(l).data()[0]
    };
    let mut improved = 0;
    for seed in 0..20 {
        let mut m = tiny_model(seed);
        let before = loss(&m);
        let grads = {
            let mut cx = Ctx::new(&m.store, Mode::Train, 0);
            let xv = cx.input(x.clone());
            let logits = m.forward(&mut cx, xv).unwrap();
            let l = label_smoothed_ce(&mut cx.tape, logits, &y, 0.1).unwrap();
            cx.backward(l).unwrap();
            cx.param_grads()
        };
        m.store.accumulate_grads(grads);
        AdamW::new(0.0).step(&mut m.store, 1e-3).unwrap();
        if loss(&m) < before {
            improved += 1;
        }
    }
    assert!(improved >= 19, "{improved}/20");
}

#[test]
fn recalibrated_statistics_make_eval_match_full_batch_training_mode() {
    let data = synth_dataset::<f64>(DatasetKind::Stripes, 12, 32, 4).unwrap();
    let mut m = tiny_model(2);
    let (x, _) = data.batch(&(0..12).collect::<Vec<_>>());
    let run = |m: &Model<f64>, mode| {
        let mut cx = Ctx::new(&m.store, mode, 0);
        cx.disable_drop_path();
        let xv = cx.input(x.clone());
        let y = m.forward(&mut cx, xv).unwrap();
        cx.value(y).clone()
    };
    let train_mode = run(&m, Mode::Train);
    assert!(run(&m, Mode::Eval).max_abs_diff(&train_mode) > 1e-3);
    recalibrate_bn(&mut m, &data, 12).unwrap();
    assert!(run(&m, Mode::Eval).max_abs_diff(&train_mode) < 1e-9);

    // Smaller batches average the per-batch statistics with equal weight.
    let mut halves = tiny_model(2);
    recalibrate_bn(&mut halves, &data, 6).unwrap();
    let batch_mean = |idx: std::ops::Range<usize>| {
        let (xb, _) = data.batch(&idx.collect::<Vec<_>>());
        let mut cx = Ctx::new(&halves.store, Mode::Train, 0);
        let xv = cx.input(xb);
        halves.forward(&mut cx, xv).unwrap();
        let (id, t) = cx.take_batch_stats().into_iter().next().unwrap();
        assert_eq!(halves.store.entry(id).spec.name, "stem.norm.running_mean");
        t
    };
    let (a, b) = (batch_mean(0..6), batch_mean(6..12));
    let got = halves.store.get("stem.norm.running_mean").unwrap().value.clone();
    for i in 0..got.len() {
        assert!((got.data()[i] - (a.data()[i] + b.data()[i]) / 2.0).abs() < 1e-12);
    }
}

fn short_cfg() -> TrainConfig {
    TrainConfig { warmup_steps: 2, total_steps: 4, batch_size: 4, ..Default::default() }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = synth_dataset::<f64>(DatasetKind::Stripes, 16, 32, 3).unwrap();
    let run = |seed: u64| {
        let mut m = tiny_model(1);
        let cfg = TrainConfig { seed, ..short_cfg() };
        let out = train(&mut m, &data, &cfg, |_| {}).unwrap();
        (out, m.store)
    };
    let (a, sa) = run(5);
    let (b, sb) = run(5);
    assert_eq!(a, b);
    for (ea, eb) in sa.entries().iter().zip(sb.entries()) {
        assert_eq!(ea.value, eb.value);
    }
    let (c, _) = run(6);
    assert_ne!(a.history, c.history);
    assert_eq!(a.history.len(), 5);
    assert_eq!(a.history[0].step, 0);
}

#[test]
fn ema_is_rejected() {
    let data = synth_dataset::<f64>(DatasetKind::Stripes, 4, 32, 0).unwrap();
    let cfg = TrainConfig { ema_decay: Some(0.9999), ..short_cfg() };
    let err = train(&mut tiny_model(0), &data, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Unsupported(ref m) if m.contains("EMA")), "{err}");
}

#[test]
fn bad_train_configs_are_rejected() {
    assert!(TrainConfig { label_smoothing: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { warmup_steps: 10, total_steps: 5, ..Default::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
