use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecloss_core::ecloss::{
    conditional_likelihood, ecloss_and_gradient, mutual_information, BetaSchedule, LossConfig,
};
use ecloss_core::metrics::{
    count_peaks, iou_sets, location_consistency, top_fraction_threshold, top10_threshold,
    AssignmentMatrix,
};
use ecloss_core::nn::{forward, init_params, train, NetworkSpec, TrainerState};
use ecloss_core::synthdata::{generate, split, DatasetSpec, PartSpec};
use ecloss_core::templates::{
    build_full_set, combine_two_peak, deserialize, make_one_peak, serialize, subsample_even,
    TemplateParams,
};
use ecloss_core::viz::render_overlay;
use ecloss_core::FeatureBatch;

fn params() -> impl Strategy<Value = TemplateParams> {
    (1usize..=7, 1usize..=7, 0.001f64..2.0, 0.5f64..6.0)
        .prop_map(|(h, w, tau, r)| TemplateParams::new(h, w, tau, r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn templates_stay_within_tau(p in params()) {
        for t in build_full_set(&p).unwrap().templates() {
            for &v in t.values() {
                prop_assert!(v >= -p.tau && v <= p.tau);
            }
        }
    }

    #[test]
    fn one_peak_is_radially_monotone(p in params(), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let peak = (r.random_range(0..p.height), r.random_range(0..p.width));
        let t = make_one_peak(&p, peak).unwrap();
        let dist = |(u, v): (usize, usize)| {
            ((u as f64 - peak.0 as f64).powi(2) + (v as f64 - peak.1 as f64).powi(2)).sqrt()
        };
        let cells: Vec<(usize, usize)> =
            (0..p.height).flat_map(|u| (0..p.width).map(move |v| (u, v))).collect();
        for &a in &cells {
            for &b in &cells {
                let (va, vb) = (t.get(a.0, a.1), t.get(b.0, b.1));
                if dist(a) < dist(b) && va > -p.tau {
                    prop_assert!(va > vb, "{a:?}={va} {b:?}={vb}");
                }
            }
        }
    }

    #[test]
    fn two_peak_commutes_and_absorbs(p in params(), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = p.cells();
        prop_assume!(n >= 2);
        let a = r.random_range(0..n);
        let b = (a + 1 + r.random_range(0..n - 1)) % n;
        let ta = make_one_peak(&p, (a / p.width, a % p.width)).unwrap();
        let tb = make_one_peak(&p, (b / p.width, b % p.width)).unwrap();
        let ab = combine_two_peak(&ta, &tb).unwrap();
        let ba = combine_two_peak(&tb, &ta).unwrap();
        prop_assert_eq!(ab.values(), ba.values());
        let again: Vec<f64> = ab.values().iter().zip(ta.values()).map(|(x, y)| x.max(*y)).collect();
        prop_assert_eq!(ab.values(), &again[..]);
        prop_assert!(combine_two_peak(&ta, &ta).is_err());
    }

    #[test]
    fn subsample_is_deterministic_and_serializable(p in params(), frac in 0.0f64..1.0, seed in any::<u64>()) {
        let full = build_full_set(&p).unwrap();
        let count = 2 + ((full.len() - 2) as f64 * frac) as usize;
        let a = subsample_even(&full, count, seed).unwrap();
        let b = subsample_even(&full, count, seed).unwrap();
        prop_assert_eq!(a.kinds(), b.kinds());
        prop_assert_eq!(a.len(), count);
        prop_assert_eq!(a.prior(), 1.0 / count as f64);
        let back = deserialize(&serialize(&a)).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn conditional_rows_are_stochastic(
        values in prop::collection::vec(-50.0f64..50.0, 2 * 3 * 9),
        tau in 0.01f64..3.0,
    ) {
        let p = TemplateParams::new(3, 3, tau, 2.0).unwrap();
        let set = build_full_set(&p).unwrap();
        let batch = FeatureBatch::from_vec(2, 3, 3, 3, values).unwrap();
        let res = mutual_information(&batch, &set).unwrap();
        for r in 0..batch.rows() {
            let s: f64 = res.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!((res.marginal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_ignores_logit_shift(f in prop::collection::vec(-30.0f64..30.0, 1..40), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        for (a, b) in conditional_likelihood(&f).iter().zip(conditional_likelihood(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn peak_count_invariant_under_affine_maps(
        cells in prop::collection::vec(0u32..64, 36),
        shift in -16i32..16,
        scale_pow in 0i32..4,
    ) {
        // Dyadic values keep every transform exact.
        let map: Vec<f64> = cells.iter().map(|&v| v as f64 / 8.0).collect();
        let s = f64::from(1 << scale_pow);
        let thr = 0.5;
        let base = count_peaks(&map, 6, 6, thr);
        let shifted: Vec<f64> = map.iter().map(|v| v + f64::from(shift)).collect();
        let scaled: Vec<f64> = map.iter().map(|v| v * s).collect();
        prop_assert_eq!(count_peaks(&shifted, 6, 6, thr), base);
        prop_assert_eq!(count_peaks(&scaled, 6, 6, thr * s), base);
    }

    #[test]
    fn threshold_fraction_is_monotone(map in prop::collection::vec(0u8..20, 1..120)) {
        let map: Vec<f64> = map.into_iter().map(f64::from).collect();
        let n = map.len();
        let t10 = top10_threshold(&map, 1, n).unwrap();
        if !t10.degenerate {
            let k = n.div_ceil(10) as f64 / n as f64;
            let ties = map.iter().filter(|&&v| v == t10.threshold).count() as f64 / n as f64;
            prop_assert!(t10.retained_fraction >= k && t10.retained_fraction <= k + ties);
        }
        let mut last: Option<(f64, f64)> = None;
        for step in 1..=20 {
            let t = top_fraction_threshold(&map, 1, n, step as f64 / 20.0).unwrap();
            if let Some((thr, kept)) = last {
                prop_assert!(t.threshold <= thr && t.retained_fraction >= kept);
            }
            last = Some((t.threshold, t.retained_fraction));
        }
    }

    #[test]
    fn overlay_is_identity_off_support(
        image in prop::collection::vec(0.0f64..=1.0, 25),
        heat in prop::collection::vec(0.0f64..1.0, 25),
    ) {
        let t = top10_threshold(&heat, 5, 5).unwrap();
        let out = render_overlay(&image, &t, &Default::default()).unwrap();
        for ((px, &g), &v) in out.pixels.iter().zip(&image).zip(&t.values) {
            if v == 0.0 {
                prop_assert_eq!(*px, [g, g, g]);
            }
        }
    }
}

#[test]
fn iou_symmetry_identity_and_monotonicity() {
    // Masks on a 4x4 grid with at most 6 pixels.
    let masks: Vec<u16> = (0u32..1 << 16)
        .filter(|m| m.count_ones() <= 6)
        .map(|m| m as u16)
        .collect();
    let bools = |m: u16| (0..16).map(|i| m >> i & 1 == 1).collect::<Vec<bool>>();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20_000 {
        let a = masks[r.random_range(0..masks.len())];
        let b = masks[r.random_range(0..masks.len())];
        let (ba, bb) = (bools(a), bools(b));
        let ab = iou_sets(&ba, &bb).unwrap();
        assert_eq!(ab, iou_sets(&bb, &ba).unwrap());
        if a != 0 {
            assert_eq!(iou_sets(&ba, &ba).unwrap(), 1.0);
        }
        // Moving one pixel of the symmetric difference to agree with `a`.
        let diff = a ^ b;
        if diff != 0 {
            let bit = diff.trailing_zeros();
            let closer = b ^ (1 << bit);
            assert!(iou_sets(&ba, &bools(closer)).unwrap() >= ab);
        }
    }
}

#[test]
fn location_consistency_extremes() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for k in 2..=6 {
        let one_hot: Vec<f64> = (0..k).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let uniform = vec![1.0 / k as f64; k];
        let mut rows = vec![one_hot, uniform];
        for _ in 0..200 {
            let raw: Vec<f64> = (0..k).map(|_| -r.random_range(1e-12f64..1.0).ln()).collect();
            let s: f64 = raw.iter().sum();
            rows.push(raw.iter().map(|v| v / s).collect());
        }
        let a = AssignmentMatrix { n_parts: k, channels: (0..rows.len()).collect(), rows };
        let (s, _) = location_consistency(&a);
        let (max, min) = (s[0], s[1]);
        assert!(min.abs() < 1e-15);
        for &v in &s[2..] {
            assert!(v < max && v > min, "k={k}: {v} outside ({min}, {max})");
        }
    }
}

#[test]
fn duplicated_sample_splits_the_gradient() {
    let p = TemplateParams::new(4, 4, 0.5, 2.0).unwrap();
    let set = subsample_even(&build_full_set(&p).unwrap(), 30, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let single: Vec<f64> = (0..2 * 16).map(|_| r.random_range(0.0..2.0)).collect();
    let twice: Vec<f64> = single.iter().chain(&single).copied().collect();
    let (l1, g1) = ecloss_and_gradient(&FeatureBatch::from_vec(1, 2, 4, 4, single).unwrap(), &set).unwrap();
    let (l2, g2) = ecloss_and_gradient(&FeatureBatch::from_vec(2, 2, 4, 4, twice).unwrap(), &set).unwrap();
    assert!((l1 - l2).abs() < 1e-15);
    let (a, b) = g2.data().split_at(32);
    for ((x, y), z) in a.iter().zip(b).zip(g1.data()) {
        assert_eq!(x, y);
        assert!((x + y - z).abs() < 1e-15);
    }
}

#[test]
fn loss_decreases_along_negative_gradient() {
    let p = TemplateParams::new(5, 5, 0.3, 3.0).unwrap();
    let set = subsample_even(&build_full_set(&p).unwrap(), 40, 0).unwrap();
    for trial in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + trial);
        let x: Vec<f64> = (0..3 * 25).map(|_| r.random_range(0.0..3.0)).collect();
        let batch = FeatureBatch::from_vec(1, 3, 5, 5, x.clone()).unwrap();
        let (loss, grad) = ecloss_and_gradient(&batch, &set).unwrap();
        let stepped: Vec<f64> = x.iter().zip(grad.data()).map(|(v, g)| v - 1e-3 * g).collect();
        let (after, _) = ecloss_and_gradient(&FeatureBatch::from_vec(1, 3, 5, 5, stepped).unwrap(), &set).unwrap();
        assert!(after < loss, "trial {trial}: {after} >= {loss}");
    }
}

#[test]
fn training_raises_held_out_mi() {
    let spec_d = DatasetSpec { n_identities: 4, samples_per_identity: 40, ..DatasetSpec::default() };
    let ds = generate(&spec_d, &PartSpec::face_parts()).unwrap();
    let (train_idx, eval_idx) = split(&ds, 0.8, 0).unwrap();
    let spec = NetworkSpec::reference(56, 16, 4);
    let tp = TemplateParams::new(14, 14, 0.001, 4.0).unwrap();
    let set = subsample_even(&build_full_set(&tp).unwrap(), 400, 0).unwrap();
    let held_out = |params: &[f64]| {
        let (images, _) = ds.labeled(&eval_idx).batch(&(0..eval_idx.len()).collect::<Vec<_>>()).unwrap();
        let (_, feats) = forward(&spec, params, &images).unwrap();
        mutual_information(&feats, &set).unwrap().mi
    };
    let state = TrainerState {
        params: init_params(&spec, 1).unwrap(),
        learning_rate: 0.1,
        batch_size: 16,
        step: 0,
        rng_seed: 1,
        loss_config: LossConfig { alpha: 1.0, beta: 1e-5, beta_schedule: BetaSchedule::Fixed },
    };
    let before = held_out(&state.params);
    let (state, _) = train(&spec, &ds.labeled(&train_idx), &set, state, 8).unwrap();
    let after = held_out(&state.params);
    assert!(after > before, "{after} <= {before}");
}
