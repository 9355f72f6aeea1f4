use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{GridStack, RasterError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaugeEntry {
    pub date: NaiveDate,
    /// Reading in meters above gauge zero.
    pub elevation_m: f64,
}

/// Daily (or sparser) river gauge readings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeSeries {
    entries: Vec<GaugeEntry>,
    /// Height of gauge zero above sea level, meters.
    pub gauge_zero_m: f64,
}

impl GaugeSeries {
    /// Sorts by date and checks for duplicates and non-finite readings.
    pub fn new(mut entries: Vec<GaugeEntry>, gauge_zero_m: f64) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.elevation_m.is_finite()) {
            return Err(RasterError::NonFiniteElevation(e.date));
        }
        entries.sort_by_key(|e| e.date);
        if let Some(w) = entries.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(RasterError::DuplicateDate(w[0].date));
        }
        Ok(Self { entries, gauge_zero_m })
    }

    pub fn entries(&self) -> &[GaugeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Water surface elevation above sea level for entry `i`.
    pub fn elevation_asl(&self, i: usize) -> f64 {
        self.entries[i].elevation_m + self.gauge_zero_m
    }

    /// Index of the entry nearest to `date`; ties go to the earlier entry.
    pub fn nearest(&self, date: NaiveDate) -> Option<(usize, i64)> {
        let pos = self.entries.partition_point(|e| e.date < date);
        let after = self.entries.get(pos).map(|e| (pos, (e.date - date).num_days()));
        let before = pos
            .checked_sub(1)
            .map(|i| (i, (date - self.entries[i].date).num_days()));
        match (before, after) {
            (Some(b), Some(a)) => Some(if b.1 <= a.1 { b } else { a }),
            (b, a) => b.or(a),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct GaugeRow {
    date: String,
    elevation_m: String,
}

/// Reads a `date,elevation_m` CSV with ISO-8601 dates. Gauge zero is not
/// part of the file and defaults to 0.
pub fn read_gauge_csv(path: impl AsRef<Path>) -> Result<GaugeSeries> {
    let path = path.as_ref();
    let bad = |reason: String| RasterError::GaugeCsv { path: path.display().to_string(), reason };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "elevation_m"] {
        return Err(bad(format!("expected header date,elevation_m, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut entries = Vec::new();
    for (line, row) in reader.deserialize::<GaugeRow>().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| bad(format!("row {}: date {:?}: {e}", line + 1, row.date)))?;
        let elevation_m: f64 = row
            .elevation_m
            .parse()
            .map_err(|e| bad(format!("row {}: elevation {:?}: {e}", line + 1, row.elevation_m)))?;
        entries.push(GaugeEntry { date, elevation_m });
    }
    GaugeSeries::new(entries, 0.0)
}

pub fn write_gauge_csv(gauge: &GaugeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| RasterError::GaugeCsv { path: path.display().to_string(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["date", "elevation_m"]).map_err(io)?;
    for e in gauge.entries() {
        w.write_record([e.date.to_string(), e.elevation_m.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|source| RasterError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Scenes each paired with one gauge reading.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSeries {
    pub scenes: Vec<GridStack>,
    pub gauge: GaugeSeries,
    /// `(scene index, gauge entry index)` for every scene, in scene order.
    pub pairing: Vec<(usize, usize)>,
}

impl SceneSeries {
    /// Builds a series where scene `i` pairs with gauge entry `i`.
    pub fn aligned(scenes: Vec<GridStack>, gauge: GaugeSeries) -> Result<Self> {
        if scenes.is_empty() {
            return Err(RasterError::NoScenes);
        }
        if scenes.len() != gauge.len() {
            return Err(RasterError::NoPairs);
        }
        let pairing = (0..scenes.len()).map(|i| (i, i)).collect();
        let series = Self { scenes, gauge, pairing };
        series.check_shapes()?;
        Ok(series)
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, w) = self.scenes[0].shape();
        for (i, s) in self.scenes.iter().enumerate() {
            if s.shape() != (h, w) {
                return Err(RasterError::ShapeMismatch {
                    band: format!("scene {i}"),
                    height: h,
                    width: w,
                    found_h: s.height(),
                    found_w: s.width(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scenes[0].shape()
    }

    /// Gauge reading (above gauge zero) paired with scene `i`.
    pub fn elevation(&self, i: usize) -> f64 {
        self.gauge.entries()[self.pairing[i].1].elevation_m
    }

    pub fn elevations(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.elevation(i)).collect()
    }

    /// A new series containing the listed scenes, in the given order.
    pub fn subset(&self, indices: &[usize]) -> SceneSeries {
        let scenes = indices.iter().map(|&i| self.scenes[i].clone()).collect();
        let pairing = indices.iter().enumerate().map(|(k, &i)| (k, self.pairing[i].1)).collect();
        SceneSeries { scenes, gauge: self.gauge.clone(), pairing }
    }
}

/// A scene that found no gauge reading within the allowed gap.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedScene {
    pub scene_index: usize,
    pub date: NaiveDate,
    pub nearest_gap_days: Option<i64>,
}

/// Pairs each scene with the nearest gauge entry no more than
/// `max_gap_days` away. Unmatched scenes are dropped and reported.
pub fn pair_scenes(
    scenes: Vec<GridStack>,
    gauge: GaugeSeries,
    max_gap_days: i64,
) -> Result<(SceneSeries, Vec<DroppedScene>)> {
    if scenes.is_empty() {
        return Err(RasterError::NoScenes);
    }
    let mut kept = Vec::new();
    let mut pairing = Vec::new();
    let mut dropped = Vec::new();
    for (i, scene) in scenes.into_iter().enumerate() {
        let date = scene.acquisition_date.ok_or(RasterError::MissingDate(i))?;
        match gauge.nearest(date) {
            Some((g, gap)) if gap <= max_gap_days => {
                pairing.push((kept.len(), g));
                kept.push(scene);
            }
            other => dropped.push(DroppedScene { scene_index: i, date, nearest_gap_days: other.map(|o| o.1) }),
        }
    }
    if kept.is_empty() {
        return Err(RasterError::NoPairs);
    }
    let series = SceneSeries { scenes: kept, gauge, pairing };
    series.check_shapes()?;
    Ok((series, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{band, Grid};

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn scene(date: &str) -> GridStack {
        GridStack::new(2, 2).with_date(d(date)).with_band(band::VV, Grid::filled(2, 2, 1.0)).unwrap()
    }

    fn gauge(dates: &[&str]) -> GaugeSeries {
        GaugeSeries::new(dates.iter().map(|s| GaugeEntry { date: d(s), elevation_m: 1.0 }).collect(), 0.0).unwrap()
    }

    #[test]
    fn csv_parse_and_sort() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        std::fs::write(&p, "date,elevation_m\n2019-01-13,2.0\n2019-01-01,1.5\n").unwrap();
        let g = read_gauge_csv(&p).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.entries()[0].date, d("2019-01-01"));
        assert_eq!(g.entries()[1].elevation_m, 2.0);
    }

    #[test]
    fn csv_duplicate_date() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        std::fs::write(&p, "date,elevation_m\n2019-01-01,1.5\n2019-01-01,2.0\n").unwrap();
        assert!(matches!(read_gauge_csv(&p), Err(RasterError::DuplicateDate(_))));
    }

    #[test]
    fn csv_bad_date_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        std::fs::write(&p, "date,elevation_m\n2019-13-01,1.5\n").unwrap();
        assert!(matches!(read_gauge_csv(&p), Err(RasterError::GaugeCsv { .. })));
        std::fs::write(&p, "date,elevation_m\n2019-01-01,NaN\n").unwrap();
        assert!(matches!(read_gauge_csv(&p), Err(RasterError::NonFiniteElevation(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        let g = GaugeSeries::new(
            vec![
                GaugeEntry { date: d("2019-01-01"), elevation_m: 0.1 + 0.2 },
                GaugeEntry { date: d("2019-02-01"), elevation_m: -1.25 },
            ],
            0.0,
        )
        .unwrap();
        write_gauge_csv(&g, &p).unwrap();
        assert_eq!(read_gauge_csv(&p).unwrap(), g);
    }

    #[test]
    fn exact_pairing() {
        let (s, dropped) = pair_scenes(vec![scene("2019-01-02")], gauge(&["2019-01-02"]), 0).unwrap();
        assert!(dropped.is_empty());
        assert_eq!(s.pairing, vec![(0, 0)]);
    }

    #[test]
    fn pairing_within_gap() {
        let (s, _) = pair_scenes(vec![scene("2019-01-05")], gauge(&["2019-01-01"]), 4).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn pairing_drops_beyond_gap() {
        let (s, dropped) =
            pair_scenes(vec![scene("2019-01-10"), scene("2019-01-02")], gauge(&["2019-01-01"]), 4).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].scene_index, 0);
        assert_eq!(dropped[0].nearest_gap_days, Some(9));
        assert!(matches!(
            pair_scenes(vec![scene("2019-01-10")], gauge(&["2019-01-01"]), 4),
            Err(RasterError::NoPairs)
        ));
    }

    #[test]
    fn pairing_tie_goes_to_earlier_date() {
        let (s, _) = pair_scenes(vec![scene("2019-01-03")], gauge(&["2019-01-01", "2019-01-05"]), 4).unwrap();
        assert_eq!(s.pairing, vec![(0, 0)]);
    }
}
