mod common;

use common::{random_tensor, rng};
use ddmt_core::adnm::{build_mask, reconstruction_error, train_autoencoder, MaskMatrix};
use ddmt_core::data::{
    fit_and_normalize, generate_synthetic, slice_windows, synthetic_benchmark, AnomalyKind, MultivariateSeries,
    SliceMode,
};
use ddmt_core::diffusion::{build_schedule, diffusion_loss, q_sample, reconstruct, standard_normal};
use ddmt_core::tensor::{layer_norm, Tensor};
use ddmt_core::Result;
use proptest::prelude::*;

const KINDS: [AnomalyKind; 2] = [AnomalyKind::Spike, AnomalyKind::LevelShift];

fn series(t: usize, c: usize, seed: u64) -> MultivariateSeries {
    let mut r = rng(seed);
    MultivariateSeries::unnamed(random_tensor(&mut r, &[t, c]), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_train_is_standard(t in 2usize..80, c in 1usize..5, seed in any::<u64>()) {
        let train = series(t, c, seed);
        let (_, out) = fit_and_normalize(&train, &[]).unwrap();
        for ch in 0..c {
            let col: Vec<f64> = (0..t).map(|i| out[0].values().get(i, ch)).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn infer_windows_cover_each_timestamp(t in 1usize..300, w in 1usize..60) {
        prop_assume!(t >= w);
        let s = series(t, 2, t as u64);
        let train = slice_windows(&s, w, SliceMode::Train).unwrap();
        prop_assert_eq!(train.len(), t / w);
        let infer = slice_windows(&s, w, SliceMode::Infer).unwrap();
        let mut hits = vec![0usize; t];
        for (k, &o) in infer.offsets.iter().enumerate() {
            for i in o..o + w {
                hits[i] += 1;
                prop_assert_eq!(infer.windows[k].row(i - o), s.values().row(i));
            }
        }
        let overlap_start = infer.offsets.last().copied().unwrap();
        for (i, &h) in hits.iter().enumerate() {
            let in_tail_overlap = t % w != 0 && i >= overlap_start && i < (t / w) * w;
            prop_assert_eq!(h, if in_tail_overlap { 2 } else { 1 });
        }
    }

    #[test]
    fn synthetic_label_count_is_exact(c in 1usize..6, t in 100usize..1500, r in 0.01f64..0.2, seed in any::<u64>()) {
        let s = generate_synthetic(c, t, r, &KINDS, seed).unwrap();
        let n = s.labels().unwrap().iter().filter(|&&l| l).count();
        prop_assert_eq!(n, (r * t as f64 - 1e-9).ceil() as usize);
        prop_assert_eq!(s, generate_synthetic(c, t, r, &KINDS, seed).unwrap());
    }

    #[test]
    fn layer_norm_output_is_standardized(xs in prop::collection::vec(-50.0f64..50.0, 2..32)) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let n = xs.len();
        let y = layer_norm(&xs, &vec![1.0; n], &vec![0.0; n], 1e-5);
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!(var < 1.0 + 1e-9 && var > 0.99);
    }

    #[test]
    fn raising_the_cap_never_shrinks_a_mask(w in 4usize..30, cap in 0usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[w, 3]);
        let errors: Vec<f64> = random_tensor(&mut r, &[w]).into_data();
        let a = build_mask(&errors, &x, 0.2, 0.3, cap).unwrap();
        let b = build_mask(&errors, &x, 0.2, 0.3, cap + 1).unwrap();
        prop_assert_eq!(a.seeds(), b.seeds());
        for i in 0..w {
            prop_assert!(a.scales()[i] <= b.scales()[i]);
        }
    }
}

#[test]
fn zero_predictor_loss_is_one() {
    let sched = build_schedule(100, 1e-4, 0.02).unwrap();
    let zero = |x: &Tensor, _: usize, _: &MaskMatrix| -> Result<Tensor> { Ok(Tensor::zeros(x.shape())) };
    let mut r = rng(8);
    let x0 = random_tensor(&mut r, &[50, 4]);
    let mask = MaskMatrix::none(50);
    let mut total = 0.0;
    let draws = 400;
    for k in 0..draws {
        let eps = standard_normal(&mut r, &[50, 4]);
        total += diffusion_loss(&sched, &zero, &x0, &mask, 1 + k % 100, &eps).unwrap();
    }
    let mean = total / draws as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean loss {mean}");
}

#[test]
fn exact_noise_oracle_recovers_the_input() {
    // with the true noise the last reverse step lands on x0 whatever was sampled before
    let sched = build_schedule(60, 1e-4, 0.02).unwrap();
    let mut r = rng(21);
    let x0 = random_tensor(&mut r, &[6, 3]);
    let (target, known) = (x0.clone(), sched.clone());
    let oracle = move |xt: &Tensor, t: usize, _: &MaskMatrix| -> Result<Tensor> {
        let ab = known.alpha_bar(t);
        xt.zip_map(&target, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
    };
    let out = reconstruct(&sched, &oracle, &x0, &MaskMatrix::none(6), 40, 3).unwrap();
    assert!(out.max_abs_diff(&x0) < 1e-9, "{}", out.max_abs_diff(&x0));
}

#[test]
fn q_sample_matches_closed_form_entrywise() {
    let sched = build_schedule(500, 1e-4, 0.02).unwrap();
    let mut r = rng(4);
    let x0 = random_tensor(&mut r, &[5, 2]);
    let eps = random_tensor(&mut r, &[5, 2]);
    for t in [1, 250, 500] {
        let xt = q_sample(&sched, &x0, t, &eps).unwrap();
        let mut ab = 1.0;
        for k in 1..=t {
            ab *= 1.0 - sched.beta(k);
        }
        for i in 0..10 {
            let want = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!((xt.data()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn autoencoder_learns_and_separates_anomalies() {
    let (train, test) = synthetic_benchmark(5, 2000, 2000, 0.05, &KINDS, 11).unwrap();
    let (_, norm) = fit_and_normalize(&train, &[&test]).unwrap();
    let windows = slice_windows(&norm[0], 100, SliceMode::Train).unwrap();
    let fit = train_autoencoder(&windows, 40, 0.01, 5).unwrap();
    let h = &fit.loss_history;
    assert!(h.last().unwrap() < &(0.5 * h[0]), "loss {} -> {}", h[0], h.last().unwrap());

    let test_windows = slice_windows(&norm[1], 100, SliceMode::Infer).unwrap();
    let labels = norm[1].labels().unwrap();
    let (mut normal, mut anomalous) = (Vec::new(), Vec::new());
    for (w, &o) in test_windows.windows.iter().zip(&test_windows.offsets) {
        for (i, e) in reconstruction_error(&fit.params, w).unwrap().into_iter().enumerate() {
            if labels[o + i] {
                anomalous.push(e);
            } else {
                normal.push(e);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&anomalous) > mean(&normal), "{} vs {}", mean(&anomalous), mean(&normal));
}
