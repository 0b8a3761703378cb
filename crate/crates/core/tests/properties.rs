//! Property tests of the numerical and metric invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssl_lab::augment::{augment, AugmentParams, AugmentPolicy};
use ssl_lab::eval::MetricsReport;
use ssl_lab::image::Image;
use ssl_lab::rng;
use ssl_lab::ssl::{cbm_mask, row_argmax, tsa_alpha, tsa_mask, tsa_threshold, StepContext, TsaSchedule};
use ssl_lab::tensor::{softmax_rows, Graph, Tensor};

fn logits(rows: usize, classes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * classes)
}

fn distributions(rows: usize, classes: usize) -> impl Strategy<Value = Vec<f64>> {
    logits(rows, classes).prop_map(move |z| softmax_rows(&z, classes, 1.0))
}

fn eval_scalar(shape: &[usize], p: &[f64], q: Option<&[f64]>, op: &str) -> f64 {
    let mut g: Graph<f64> = Graph::inference();
    let pv = g.constant(shape, p.to_vec()).unwrap();
    let out = match (op, q) {
        ("kl", Some(q)) => {
            let qv = g.constant(shape, q.to_vec()).unwrap();
            g.kl_divergence(pv, qv, None).unwrap()
        }
        ("entropy", None) => g.entropy(pv, None).unwrap(),
        _ => unreachable!(),
    };
    g.item(out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one(z in logits(4, 7), t in 0.01f64..10.0) {
        let mut g: Graph<f64> = Graph::inference();
        let v = g.constant(&[4, 7], z).unwrap();
        let p = g.softmax(v, t).unwrap();
        for row in g.value(p).chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_in_f32(z in prop::collection::vec(-30.0f32..30.0, 3 * 14), t in 0.05f32..10.0) {
        let p = softmax_rows(&z, 14, t);
        for row in p.chunks(14) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_is_zero_on_the_diagonal_and_nonnegative(p in distributions(3, 5), q in distributions(3, 5)) {
        prop_assert!(eval_scalar(&[3, 5], &p, Some(&p), "kl").abs() <= 1e-9);
        prop_assert!(eval_scalar(&[3, 5], &p, Some(&q), "kl") >= -1e-9);
    }

    #[test]
    fn entropy_is_bounded_by_log_classes(p in distributions(2, 6)) {
        let h = eval_scalar(&[2, 6], &p, None, "entropy");
        prop_assert!(h >= -1e-12 && h <= 6f64.ln() + 1e-9);
    }

    #[test]
    fn sharpening_lowers_entropy(z in logits(1, 5)) {
        prop_assume!(z.iter().any(|&v| (v - z[0]).abs() > 1e-3));
        let plain = softmax_rows(&z, 5, 1.0);
        let sharp = softmax_rows(&z, 5, 0.8);
        let h = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
        prop_assert!(h(&sharp) < h(&plain) + 1e-12);
    }

    #[test]
    fn tsa_threshold_is_monotone_with_fixed_endpoints(total in 1usize..2000, classes in 2usize..20) {
        for s in [TsaSchedule::Linear, TsaSchedule::Log, TsaSchedule::Exp] {
            let eta = |t| tsa_threshold(&StepContext { step: t, total_steps: total, num_classes: classes }, s).unwrap();
            prop_assert_eq!(eta(0), 1.0 / classes as f64);
            prop_assert_eq!(eta(total), 1.0);
            let mut prev = eta(0);
            for t in (0..=total).step_by((total / 50).max(1)) {
                let e = eta(t);
                prop_assert!(e >= prev);
                prev = e;
            }
        }
        let past = StepContext { step: total + 1, total_steps: total, num_classes: classes };
        prop_assert!(tsa_threshold(&past, TsaSchedule::Log).is_err());
    }

    #[test]
    fn cbm_ignores_non_argmax_mass(p in distributions(1, 6), shuffle_seed in any::<u64>()) {
        let (arg, max) = row_argmax(&p);
        // Redistribute the non-argmax mass while keeping every entry below the max.
        let rest: f64 = 1.0 - max;
        let others: Vec<usize> = (0..6).filter(|&c| c != arg).collect();
        let mut r = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let w: Vec<f64> = others.iter().map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect();
        let wsum: f64 = w.iter().sum::<f64>() + 1e-12;
        let mut q = p.clone();
        for (&c, &wc) in others.iter().zip(&w) {
            q[c] = (rest * wc / wsum).min(max * 0.999);
        }
        prop_assume!(row_argmax(&q).0 == arg);
        for thresholds in [vec![0.75; 6], vec![0.25; 6], vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.5]] {
            prop_assert_eq!(cbm_mask(&p, &thresholds), cbm_mask(&q, &thresholds));
        }
    }

    #[test]
    fn tsa_masked_loss_equals_loss_over_kept_rows(z in logits(6, 4), labels in prop::collection::vec(0usize..4, 6), eta in 0.0f64..1.0) {
        let probs = softmax_rows(&z, 4, 1.0);
        let mask = tsa_mask(&probs, 4, &labels, eta, false);
        let mut g: Graph<f64> = Graph::inference();
        let pv = g.constant(&[6, 4], probs.clone()).unwrap();
        let masked = g.cross_entropy(pv, &labels, Some(&mask)).unwrap();
        let kept: Vec<usize> = (0..6).filter(|&i| mask[i]).collect();
        let expected = if kept.is_empty() {
            0.0
        } else {
            kept.iter().map(|&i| -probs[i * 4 + labels[i]].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / kept.len() as f64
        };
        prop_assert!((g.item(masked) - expected).abs() < 1e-9);
        for (i, &m) in mask.iter().enumerate() {
            prop_assert_eq!(m, probs[i * 4 + labels[i]] <= eta);
        }
    }

    #[test]
    fn augmentation_preserves_range_and_shape(seed in any::<u64>(), h in 4usize..24, w in 4usize..24) {
        let mut r = rng::derive_stream(seed, 0, 0);
        let img = Image::from_fn(h, w, |_, _| rand::Rng::gen_range(&mut r, 0.0f32..=1.0));
        let out = augment(&img, &AugmentPolicy::default(), &mut rng::derive_stream(seed, 1, 0));
        prop_assert_eq!((out.height(), out.width()), (h, w));
        prop_assert!(out.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn quantization_round_trip_is_within_one_step(pixels in prop::collection::vec(0.0f32..=1.0, 64)) {
        let img = Image::new(8, 8, pixels);
        let back = Image::from_u8(8, 8, &img.to_u8());
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn metric_contracts(
        pairs in prop::collection::vec((0usize..8, 0usize..8), 1..300),
        with_background in any::<bool>(),
    ) {
        let names: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
        let cluster = [3usize, 4, 5];
        let background = with_background.then_some(7);
        let report = MetricsReport::from_predictions(names.clone(), pairs.iter().copied(), &cluster, background);
        let total: u64 = report.row_sums().iter().sum();
        prop_assert_eq!(total as usize, pairs.len());
        for t in 0..8 {
            prop_assert_eq!(report.row_sums()[t] as usize, pairs.iter().filter(|p| p.0 == t).count());
        }
        prop_assert!(report.grouped_cluster_accuracy >= report.overall_accuracy_anatomical);
        prop_assert!((0.0..=1.0).contains(&report.overall_accuracy_anatomical));
        prop_assert!((0.0..=1.0).contains(&report.grouped_cluster_accuracy));
        let unscored = MetricsReport::from_predictions(names, pairs.iter().copied(), &cluster, None);
        prop_assert_eq!(&report.confusion[..7], &unscored.confusion[..7]);
    }
}

#[test]
fn schedule_shape_ordering_on_a_grid() {
    for i in 1..100 {
        let p = i as f64 / 100.0;
        let (log, lin, exp) =
            (tsa_alpha(p, TsaSchedule::Log), tsa_alpha(p, TsaSchedule::Linear), tsa_alpha(p, TsaSchedule::Exp));
        assert!(log > lin && lin > exp, "ordering fails at {p}: {log} {lin} {exp}");
    }
}

#[test]
fn sampled_parameters_stay_inside_policy_ranges() {
    let policy = AugmentPolicy::default();
    let mut r = rng::stream(11, "policy-draws", &[]);
    let mut flips = 0;
    for _ in 0..10_000 {
        let p = AugmentParams::sample(&policy, &mut r);
        flips += p.flip as usize;
        assert!((0.7..=1.3).contains(&(p.contrast as f64)));
        assert!(p.angle.abs() as f64 <= std::f64::consts::FRAC_PI_4 + 1e-6);
        assert!(p.crop_fraction >= 0.01 - 1e-6 && p.crop_fraction <= 0.20 + 1e-6);
        assert!((0.0..=1.0).contains(&p.crop_offset.0) && (0.0..=1.0).contains(&p.crop_offset.1));
    }
    assert!((4_700..5_300).contains(&flips), "flip rate {flips}/10000");
}

#[test]
fn neighbouring_streams_rarely_collide() {
    let img = Image::from_fn(16, 16, |y, x| ((y * 16 + x) as f32 / 255.0).min(1.0));
    let policy = AugmentPolicy::default();
    let mut same = 0;
    for i in 0..10_000u64 {
        let a = AugmentParams::sample(&policy, &mut rng::derive_stream(5, i, 0));
        let b = AugmentParams::sample(&policy, &mut rng::derive_stream(5, i, 1));
        same += (a == b) as usize;
    }
    assert_eq!(same, 0);
    let a = augment(&img, &policy, &mut rng::derive_stream(5, 0, 0));
    let b = augment(&img, &policy, &mut rng::derive_stream(5, 0, 0));
    let c = augment(&img, &policy, &mut rng::derive_stream(6, 0, 0));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn uniform_random_predictor_is_near_chance() {
    let names: Vec<String> = (0..14).map(|i| format!("c{i}")).collect();
    let mut r = rng::stream(3, "random-predictor", &[]);
    let n = 14_000;
    let pairs: Vec<(usize, usize)> =
        (0..n).map(|i| (i % 14, rand::Rng::gen_range(&mut r, 0..14))).collect();
    let report = MetricsReport::from_predictions(names, pairs, &[9, 10, 11, 12], None);
    let p = 1.0 / 14.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((report.overall_accuracy_anatomical - p).abs() < 3.0 * sigma);
}

#[test]
fn tensor_rejects_inconsistent_grad() {
    let mut t = Tensor::<f32>::zeros(&[2, 3]);
    assert!(t.set_grad(vec![0.0; 5]).is_err());
    assert!(t.set_grad(vec![0.0; 6]).is_ok());
}
