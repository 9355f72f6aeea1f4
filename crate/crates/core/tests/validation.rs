use hydrocorr::mask::{BinaryMask, SoftMask};
use hydrocorr::raster::band;
use hydrocorr::synthgen::{generate_site, relative_dtm, SiteSpec};
use hydrocorr::validation::{
    best_threshold, contingency_map, dtm_water_mask, iou, threshold_sweep, MaskPair, Reference,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

#[test]
fn contingency_counts_reconstruct_iou_on_100_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (pp, pr) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let pred = random_mask(&mut rng, h, w, pp);
        let refm = random_mask(&mut rng, h, w, pr);
        let mut valid = random_mask(&mut rng, h, w, 0.9);
        if valid.count() == 0 {
            valid = BinaryMask::filled(h, w, true);
        }
        let pair = MaskPair::new(pred, refm, valid).unwrap();
        let report = iou(&pair).unwrap();
        let codes = contingency_map(&pair);
        let count = |k: f32| codes.values().iter().filter(|&&v| v == k).count();
        let (tp, tn, fp, fn_) = (count(1.0), count(2.0), count(3.0), count(4.0));
        let expect = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        assert_eq!(report.iou_water, expect(tp, tp + fp + fn_));
        assert_eq!(report.iou_nonwater, expect(tn, tn + fp + fn_));
    }
}

#[test]
fn v_valley_water_width_matches_the_bank_intercept() {
    let spec = SiteSpec::default();
    let rel = relative_dtm(&spec);
    let dtm = rel.map(|v| (v as f64 + spec.gauge_zero) as f32);
    let v = &spec.valley_profile;
    for reading in [0.1, 0.37, 0.8, 1.5] {
        let mask = dtm_water_mask(&dtm, spec.gauge_zero + reading, None).water;
        let width = (0..spec.width).filter(|&c| mask.get(0, c)).count() as f64;
        let analytic = 2.0 * (v.half_width + reading / v.bank_slope);
        assert!((width - analytic).abs() <= 1.0, "reading {reading}: {width} vs {analytic}");
    }
}

#[test]
fn best_threshold_matches_brute_force_rescoring() {
    let site = generate_site(&SiteSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = site.series.shape();
    let mut soft = Vec::new();
    let mut refs = Vec::new();
    for s in &site.series.scenes {
        let truth = s.band(band::REF_WATER).unwrap();
        let probs: Vec<f64> =
            truth.values().iter().map(|&t| (0.3 * t as f64 + rng.random_range(0.1..0.6)).min(0.99)).collect();
        soft.push(SoftMask::from_probabilities(h, w, &probs).unwrap());
        refs.push(Reference::from_truth(truth));
    }
    let thresholds: Vec<f32> = (0..10).map(|k| 0.10 + 0.05 * k as f32).collect();
    let rows = threshold_sweep(&soft, &refs, &thresholds).unwrap();

    let mut oracle = Vec::new();
    for &t in &thresholds {
        let mut total = 0.0;
        for (s, r) in soft.iter().zip(&refs) {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &truth) in s.grid().values().iter().zip(r.water.values()) {
                let pred = p >= t;
                inter += (pred && truth) as usize;
                union += (pred || truth) as usize;
            }
            total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
        oracle.push(total / soft.len() as f64);
    }
    let best_oracle = (0..thresholds.len()).fold(0, |b, i| if oracle[i] > oracle[b] { i } else { b });
    for (row, o) in rows.iter().zip(&oracle) {
        assert!((row.iou_water - o).abs() < 1e-12);
    }
    assert_eq!(best_threshold(&rows).unwrap().threshold, thresholds[best_oracle]);
}

fn pair_strategy() -> impl Strategy<Value = MaskPair> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(p, r, mut v)| {
                v[0] = true;
                MaskPair::new(
                    BinaryMask::new(h, w, p).unwrap(),
                    BinaryMask::new(h, w, r).unwrap(),
                    BinaryMask::new(h, w, v).unwrap(),
                )
                .unwrap()
            })
    })
}

proptest! {
    #[test]
    fn iou_swaps_under_complement(pair in pair_strategy()) {
        let a = iou(&pair).unwrap();
        let b = iou(&pair.complement()).unwrap();
        prop_assert_eq!(a.iou_water, b.iou_nonwater);
        prop_assert_eq!(a.iou_nonwater, b.iou_water);
    }

    #[test]
    fn iou_is_symmetric(pair in pair_strategy()) {
        let swapped = MaskPair::new(pair.reference().clone(), pair.predicted().clone(), pair.valid().clone()).unwrap();
        let (a, b) = (iou(&pair).unwrap(), iou(&swapped).unwrap());
        prop_assert_eq!(a.iou_water, b.iou_water);
        prop_assert_eq!(a.iou_nonwater, b.iou_nonwater);
        prop_assert!((0.0..=1.0).contains(&a.iou_water) && (0.0..=1.0).contains(&a.iou_nonwater));
    }

    #[test]
    fn dtm_mask_is_monotone_in_elevation(seed in 0u64..500, lo in 99.0f64..102.0, step in 0.0f64..1.0) {
        let spec = SiteSpec { seed, ..SiteSpec::default() };
        let dtm = relative_dtm(&spec).map(|v| v + 100.0);
        let low = dtm_water_mask(&dtm, lo, None).water;
        let high = dtm_water_mask(&dtm, lo + step, None).water;
        prop_assert_eq!(low.and(&high), low);
    }

    #[test]
    fn swept_water_count_is_non_increasing(probs in proptest::collection::vec(0.0f64..1.0, 36)) {
        let soft = SoftMask::from_probabilities(6, 6, &probs).unwrap();
        let r = Reference { water: BinaryMask::filled(6, 6, false), valid: BinaryMask::filled(6, 6, true) };
        let thresholds: Vec<f32> = (0..10).map(|k| 0.10 + 0.05 * k as f32).collect();
        let rows = threshold_sweep(&[soft], &[r], &thresholds).unwrap();
        prop_assert!(rows.windows(2).all(|p| p[1].water_pixels <= p[0].water_pixels));
    }
}
