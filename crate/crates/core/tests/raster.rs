use chrono::{Duration, NaiveDate};
use hydrocorr::raster::{band, from_db, pair_scenes, to_db, GaugeEntry, GaugeSeries, Grid, GridStack};
use proptest::prelude::*;

fn day(offset: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + Duration::days(offset)
}

fn scene(offset: i64) -> GridStack {
    GridStack::new(2, 2).with_date(day(offset)).with_band(band::VV, Grid::filled(2, 2, 0.1)).unwrap()
}

proptest! {
    #[test]
    fn pairing_respects_the_gap_and_prefers_earlier_dates(
        gauge_days in proptest::collection::btree_set(0i64..200, 1..30),
        scene_days in proptest::collection::btree_set(0i64..200, 1..20),
        max_gap in 0i64..10,
    ) {
        let entries: Vec<GaugeEntry> = gauge_days.iter().map(|&d| GaugeEntry { date: day(d), elevation_m: d as f64 }).collect();
        let gauge = GaugeSeries::new(entries, 0.0).unwrap();
        let scenes: Vec<GridStack> = scene_days.iter().map(|&d| scene(d)).collect();
        match pair_scenes(scenes.clone(), gauge.clone(), max_gap) {
            Ok((series, dropped)) => {
                prop_assert_eq!(series.len() + dropped.len(), scenes.len());
                for (k, s) in series.scenes.iter().enumerate() {
                    let sd = s.acquisition_date.unwrap();
                    let gd = gauge.entries()[series.pairing[k].1].date;
                    let gap = (sd - gd).num_days().abs();
                    prop_assert!(gap <= max_gap);
                    // nothing strictly closer, and no equally close earlier entry
                    for e in gauge.entries() {
                        let g = (sd - e.date).num_days().abs();
                        prop_assert!(g > gap || (g == gap && e.date >= gd));
                    }
                }
                for d in &dropped {
                    prop_assert!(d.nearest_gap_days.is_none_or(|g| g > max_gap));
                }
                let (again, _) = pair_scenes(scenes, gauge, max_gap).unwrap();
                prop_assert_eq!(again.pairing, series.pairing);
            }
            Err(_) => {
                let all_far = scene_days.iter().all(|&s| gauge_days.iter().all(|&g| (s - g).abs() > max_gap));
                prop_assert!(all_far);
            }
        }
    }

    #[test]
    fn db_round_trip_is_identity(values in proptest::collection::vec(1e-6f32..1e4, 1..64)) {
        let n = values.len();
        let g = Grid::new(1, n, values).unwrap();
        let back = from_db(&to_db(&g).unwrap());
        for (a, b) in g.values().iter().zip(back.values()) {
            prop_assert!(((a - b) / a).abs() < 1e-6, "{} vs {}", a, b);
        }
    }
}
