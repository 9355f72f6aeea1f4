//! Synthetic study sites: a river valley DTM, a gauge series, the exact
//! flood masks they imply, and speckled SAR plus MNDWI-like bands derived
//! from those masks.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{band, GaugeEntry, GaugeSeries, Grid, GridStack, RasterError, SceneSeries};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid site spec: {0}")]
    InvalidSpec(String),
    #[error("confounder date index {index} outside a series of {len}")]
    DateOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValleyShape {
    V,
    U,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValleyProfile {
    pub shape: ValleyShape,
    /// Bank rise in meters per pixel of distance from the channel edge
    /// (for U valleys, the rise one half-width out).
    pub bank_slope: f64,
    /// Channel half-width in pixels.
    pub half_width: f64,
    /// Along-stream floor gradient in meters per row.
    pub tilt: f64,
}

impl Default for ValleyProfile {
    fn default() -> Self {
        Self { shape: ValleyShape::V, bank_slope: 0.12, half_width: 4.0, tilt: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloodSpike {
    pub date_index: usize,
    /// Rise in meters on the spike date; half of it carries to the next date.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElevationSeries {
    pub n_dates: usize,
    pub start_date: NaiveDate,
    pub interval_days: i64,
    /// Mean gauge reading in meters above gauge zero.
    pub base: f64,
    pub seasonal_amplitude: f64,
    pub flood_spikes: Vec<FloodSpike>,
    /// Standard deviation of independent per-date noise, meters.
    pub jitter: f64,
}

impl Default for ElevationSeries {
    fn default() -> Self {
        Self {
            n_dates: 40,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
            interval_days: 12,
            base: 1.0,
            seasonal_amplitude: 0.8,
            flood_spikes: vec![FloodSpike { date_index: 10, magnitude: 0.4 }, FloodSpike { date_index: 27, magnitude: 0.5 }],
            jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfounderKind {
    WindRoughening,
    IceCover,
    BareFields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfounderSpec {
    pub kind: ConfounderKind,
    /// Scene indices the confounder applies to.
    pub dates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteSpec {
    pub height: usize,
    pub width: usize,
    pub valley_profile: ValleyProfile,
    /// Elevation above sea level of a zero gauge reading, meters.
    pub gauge_zero: f64,
    pub elevation_series: ElevationSeries,
    pub speckle_looks: u32,
    pub water_db_mean: f64,
    pub land_db_mean: f64,
    /// VH mean relative to VV, dB.
    pub vh_offset_db: f64,
    /// MNDWI is `+contrast` over water and `-contrast` over land before noise.
    pub optical_contrast: f64,
    pub optical_noise: f64,
    pub confounders: Vec<ConfounderSpec>,
    pub seed: u64,
}

impl Default for SiteSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            valley_profile: ValleyProfile::default(),
            gauge_zero: 100.0,
            elevation_series: ElevationSeries::default(),
            speckle_looks: 5,
            water_db_mean: -20.0,
            land_db_mean: -8.0,
            vh_offset_db: -6.0,
            optical_contrast: 0.5,
            optical_noise: 0.1,
            confounders: Vec::new(),
            seed: 7,
        }
    }
}

impl SiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.water_db_mean >= self.land_db_mean {
            return bad(format!(
                "water_db_mean {} must be below land_db_mean {} (water is darker)",
                self.water_db_mean, self.land_db_mean
            ));
        }
        let v = &self.valley_profile;
        if !(v.half_width >= 2.0) {
            return bad(format!("river half-width {} must be at least 2 pixels", v.half_width));
        }
        if !(v.bank_slope > 0.0) {
            return bad(format!("bank_slope {} must be positive", v.bank_slope));
        }
        if self.height == 0 || self.width == 0 {
            return bad("grid must be non-empty".into());
        }
        if 2.0 * v.half_width >= self.width as f64 {
            return bad(format!("channel of half-width {} does not fit width {}", v.half_width, self.width));
        }
        let e = &self.elevation_series;
        if e.n_dates == 0 || e.interval_days <= 0 {
            return bad("need at least one date and a positive interval".into());
        }
        if let Some(s) = e.flood_spikes.iter().find(|s| s.date_index >= e.n_dates) {
            return bad(format!("flood spike at date {} beyond {} dates", s.date_index, e.n_dates));
        }
        if self.speckle_looks == 0 {
            return bad("speckle_looks must be at least 1".into());
        }
        if !(self.optical_noise >= 0.0 && self.optical_contrast > 0.0) {
            return bad("optical contrast must be positive and noise nonnegative".into());
        }
        if !(e.jitter >= 0.0) {
            return bad("jitter must be nonnegative".into());
        }
        for c in &self.confounders {
            if let Some(&d) = c.dates.iter().find(|&&d| d >= e.n_dates) {
                return bad(format!("confounder date {d} beyond {} dates", e.n_dates));
            }
        }
        Ok(())
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        let e = &self.elevation_series;
        (0..e.n_dates).map(|i| e.start_date + Duration::days(e.interval_days * i as i64)).collect()
    }
}

/// A generated site: the scene series (bands VV, VH, MNDWI, CLOUD,
/// REF_WATER) with its gauge, and the DTM in meters above sea level.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSite {
    pub series: SceneSeries,
    pub dtm: Grid,
}

/// Ground height relative to gauge zero.
pub fn relative_dtm(spec: &SiteSpec) -> Grid {
    let v = &spec.valley_profile;
    let (h, w) = (spec.height, spec.width);
    let centre = w as f64 / 2.0;
    let mid_row = (h as f64 - 1.0) / 2.0;
    Grid::from_fn(h, w, |r, c| {
        let d = (c as f64 + 0.5 - centre).abs();
        let bank = if d <= v.half_width {
            -1.0
        } else {
            let x = d - v.half_width;
            match v.shape {
                ValleyShape::V => v.bank_slope * x,
                ValleyShape::U => v.bank_slope * x * x / v.half_width,
            }
        };
        (bank + v.tilt * (r as f64 - mid_row)) as f32
    })
}

/// Gauge readings (meters above gauge zero) for every date.
pub fn elevation_series(spec: &SiteSpec, rng: &mut impl Rng) -> Vec<f64> {
    let e = &spec.elevation_series;
    let noise = Normal::new(0.0, e.jitter.max(0.0)).expect("finite sd");
    let mut out: Vec<f64> = (0..e.n_dates)
        .map(|i| {
            let days = (e.interval_days * i as i64) as f64;
            e.base + e.seasonal_amplitude * (std::f64::consts::TAU * days / 365.25).sin()
        })
        .collect();
    for s in &e.flood_spikes {
        out[s.date_index] += s.magnitude;
        if let Some(next) = out.get_mut(s.date_index + 1) {
            *next += s.magnitude / 2.0;
        }
    }
    for v in &mut out {
        *v += noise.sample(rng);
    }
    out
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Builds the whole site. Confounders listed in the spec are applied last,
/// each with its own seed derived from the spec seed.
pub fn generate_site(spec: &SiteSpec) -> Result<SyntheticSite> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rel = relative_dtm(spec);
    let dtm = rel.map(|v| (v as f64 + spec.gauge_zero) as f32);
    let readings = elevation_series(spec, &mut rng);
    let dates = spec.dates();
    let looks = spec.speckle_looks as f64;
    let speckle = Gamma::new(looks, 1.0 / looks).expect("positive looks");
    let optical = Normal::new(0.0, spec.optical_noise).expect("finite sd");

    let mut scenes = Vec::with_capacity(dates.len());
    for (&date, &reading) in dates.iter().zip(&readings) {
        let level = reading + spec.gauge_zero;
        let water: Vec<bool> = dtm.values().iter().map(|&z| (z as f64) < level).collect();
        let mean_db = |wet: bool| if wet { spec.water_db_mean } else { spec.land_db_mean };
        let vv: Vec<f32> = water.iter().map(|&wt| (db_to_linear(mean_db(wt)) * speckle.sample(&mut rng)) as f32).collect();
        let vh: Vec<f32> = water
            .iter()
            .map(|&wt| (db_to_linear(mean_db(wt) + spec.vh_offset_db) * speckle.sample(&mut rng)) as f32)
            .collect();
        let mndwi: Vec<f32> = water
            .iter()
            .map(|&wt| {
                let base = if wt { spec.optical_contrast } else { -spec.optical_contrast };
                (base + optical.sample(&mut rng)).clamp(-1.0, 1.0) as f32
            })
            .collect();
        let truth: Vec<f32> = water.iter().map(|&wt| if wt { 1.0 } else { 0.0 }).collect();
        let stack = GridStack::new(h, w)
            .with_date(date)
            .with_band(band::VV, Grid::new(h, w, vv)?)?
            .with_band(band::VH, Grid::new(h, w, vh)?)?
            .with_band(band::MNDWI, Grid::new(h, w, mndwi)?)?
            .with_band(band::CLOUD, Grid::filled(h, w, 0.0))?
            .with_band(band::REF_WATER, Grid::new(h, w, truth)?)?;
        scenes.push(stack);
    }
    let entries = dates.iter().zip(&readings).map(|(&date, &elevation_m)| GaugeEntry { date, elevation_m }).collect();
    let gauge = GaugeSeries::new(entries, spec.gauge_zero)?;
    let mut series = SceneSeries::aligned(scenes, gauge)?;
    for (k, c) in spec.confounders.iter().enumerate() {
        let seed = spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1));
        series = inject_confounders(&series, c.kind, &c.dates, seed, spec)?;
    }
    Ok(SyntheticSite { series, dtm })
}

/// Multiplies VV and VH by `10^(shift_db / 10)` where `shift_db` is given.
/// The speckle realization is kept, only the class mean moves.
fn shift_pixels(stack: &mut GridStack, shifts: &[Option<f64>]) -> Result<()> {
    for name in [band::VV, band::VH] {
        let g = stack.band_mut(name).ok_or_else(|| RasterError::MissingBand(name.into()))?;
        for (v, s) in g.values_mut().iter_mut().zip(shifts) {
            if let Some(db) = s {
                *v = (*v as f64 * db_to_linear(*db)) as f32;
            }
        }
    }
    Ok(())
}

/// Fraction of the water/land dB gap that wind closes on open water.
pub const WIND_FRACTION: f64 = 0.5;
/// Fraction of the land/water gap by which bare fields darken.
pub const BARE_FIELD_FRACTION: f64 = 0.7;
/// Range of per-date ice brightness above the land mean, dB.
pub const ICE_EXCESS_DB: (f64, f64) = (0.0, 1.0);
/// Range of per-date frozen fraction of water blocks.
pub const ICE_FROZEN_FRACTION: (f64, f64) = (0.7, 1.0);
const ICE_BLOCK: usize = 8;

/// Degrades the listed scenes. Only VV and VH change; REF_WATER and the
/// optical bands are untouched.
///
/// * `WindRoughening` lifts every water pixel toward the land mean.
/// * `IceCover` freezes a random share of water in 8x8 blocks; frozen
///   water reads slightly brighter than land.
/// * `BareFields` darkens a few rectangular land patches toward water.
pub fn inject_confounders(
    series: &SceneSeries,
    kind: ConfounderKind,
    dates: &[usize],
    seed: u64,
    spec: &SiteSpec,
) -> Result<SceneSeries> {
    let mut out = series.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = spec.land_db_mean - spec.water_db_mean;
    for &d in dates {
        let stack = out.scenes.get_mut(d).ok_or(SynthError::DateOutOfRange { index: d, len: series.len() })?;
        let (h, w) = stack.shape();
        let water: Vec<bool> = stack.require(band::REF_WATER)?.values().iter().map(|&v| v != 0.0).collect();
        let shifts: Vec<Option<f64>> = match kind {
            ConfounderKind::WindRoughening => water.iter().map(|&wt| wt.then_some(WIND_FRACTION * gap)).collect(),
            ConfounderKind::IceCover => {
                let excess = rng.random_range(ICE_EXCESS_DB.0..ICE_EXCESS_DB.1);
                let frozen_share = rng.random_range(ICE_FROZEN_FRACTION.0..ICE_FROZEN_FRACTION.1);
                let (bh, bw) = (h.div_ceil(ICE_BLOCK), w.div_ceil(ICE_BLOCK));
                let frozen: Vec<bool> = (0..bh * bw).map(|_| rng.random_bool(frozen_share)).collect();
                water
                    .iter()
                    .enumerate()
                    .map(|(i, &wt)| {
                        let block = (i / w / ICE_BLOCK) * bw + (i % w) / ICE_BLOCK;
                        (wt && frozen[block]).then_some(gap + excess)
                    })
                    .collect()
            }
            ConfounderKind::BareFields => {
                let mut field = vec![false; h * w];
                let n_fields = rng.random_range(3..=5);
                for _ in 0..n_fields {
                    let fh = rng.random_range(h / 8..=h / 4).max(1);
                    let fw = rng.random_range(w / 8..=w / 4).max(1);
                    let r0 = rng.random_range(0..=h - fh);
                    let c0 = rng.random_range(0..=w - fw);
                    for r in r0..r0 + fh {
                        for c in c0..c0 + fw {
                            field[r * w + c] = true;
                        }
                    }
                }
                water
                    .iter()
                    .zip(&field)
                    .map(|(&wt, &f)| (!wt && f).then_some(-BARE_FIELD_FRACTION * gap))
                    .collect()
            }
        };
        shift_pixels(stack, &shifts)?;
    }
    Ok(out)
}
