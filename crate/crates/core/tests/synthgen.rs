use hydrocorr::raster::band;
use hydrocorr::synthgen::{generate_site, SiteSpec, ValleyShape};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = SiteSpec> {
    (any::<u64>(), prop_oneof![Just(ValleyShape::V), Just(ValleyShape::U)], 0.05f64..0.4, 0.0f64..0.02, 1u32..8).prop_map(
        |(seed, shape, slope, tilt, looks)| {
            let mut spec = SiteSpec { height: 24, width: 24, seed, speckle_looks: looks, ..SiteSpec::default() };
            spec.valley_profile.shape = shape;
            spec.valley_profile.bank_slope = slope;
            spec.valley_profile.half_width = 3.0;
            spec.valley_profile.tilt = tilt;
            spec.elevation_series.n_dates = 12;
            spec.elevation_series.flood_spikes.clear();
            spec
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn water_area_is_monotone_in_elevation(spec in spec_strategy()) {
        let site = generate_site(&spec).unwrap();
        let e = site.series.elevations();
        let area: Vec<usize> = site
            .series
            .scenes
            .iter()
            .map(|s| s.band(band::REF_WATER).unwrap().values().iter().filter(|&&v| v != 0.0).count())
            .collect();
        for i in 0..e.len() {
            for j in 0..e.len() {
                if e[i] <= e[j] {
                    prop_assert!(area[i] <= area[j], "elev {} -> {} but area {} -> {}", e[i], e[j], area[i], area[j]);
                }
            }
        }
    }

    #[test]
    fn water_is_darker_than_land_on_clean_dates(spec in spec_strategy()) {
        let site = generate_site(&spec).unwrap();
        for s in &site.series.scenes {
            let truth = s.band(band::REF_WATER).unwrap().values();
            let vv = s.band(band::VV).unwrap().values();
            let mean = |water: bool| {
                let v: Vec<f64> = vv
                    .iter()
                    .zip(truth)
                    .filter(|(_, &t)| (t != 0.0) == water)
                    .map(|(&x, _)| 10.0 * (x as f64).log10())
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            if let (Some(w), Some(l)) = (mean(true), mean(false)) {
                prop_assert!(w < l);
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical(spec in spec_strategy()) {
        let a = generate_site(&spec).unwrap();
        let b = generate_site(&spec).unwrap();
        for (x, y) in a.series.scenes.iter().zip(&b.series.scenes) {
            for (name, g) in x.bands() {
                let bits = |g: &hydrocorr::raster::Grid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(g), bits(y.band(name).unwrap()));
            }
        }
        prop_assert_eq!(a, b);
    }
}
