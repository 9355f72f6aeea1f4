//! Raster data model: single-band grids, named multi-band stacks, gauge
//! series and the scene/gauge pairing used for training.
//!
//! Grids store `f32` samples in row-major order. A grid may carry a nodata
//! sentinel; operations that transform values pass sentinel pixels through
//! unchanged.

mod gauge;
mod io;

pub use gauge::{pair_scenes, read_gauge_csv, write_gauge_csv, DroppedScene, GaugeEntry, GaugeSeries, SceneSeries};
pub use io::{read_gridstack, write_gridstack, BandHeader, StackHeader};

use chrono::NaiveDate;
use indexmap_lite::BandMap;
use thiserror::Error;

/// Canonical band names used across the toolkit.
pub mod band {
    pub const VV: &str = "VV";
    pub const VH: &str = "VH";
    pub const DTM: &str = "DTM";
    pub const MNDWI: &str = "MNDWI";
    pub const CLOUD: &str = "CLOUD";
    pub const REF_WATER: &str = "REF_WATER";
    pub const SOFT_WATER: &str = "SOFT_WATER";
    pub const WATER: &str = "WATER";
    pub const CONTINGENCY: &str = "CONTINGENCY";
}

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: u64, found: u64 },
    #[error("duplicate band name {0:?}")]
    DuplicateBand(String),
    #[error("no bands")]
    NoBands,
    #[error("grid length {len} does not match {height}x{width}")]
    GridLength { len: usize, height: usize, width: usize },
    #[error("band {band:?} is {found_h}x{found_w}, stack is {height}x{width}")]
    ShapeMismatch {
        band: String,
        height: usize,
        width: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("bands disagree on the nodata sentinel")]
    NodataMismatch,
    #[error("missing band {0:?}")]
    MissingBand(String),
    #[error("nonpositive value {value} at index {index} cannot be converted to dB")]
    Nonpositive { index: usize, value: f32 },
    #[error("gauge csv {path}: {reason}")]
    GaugeCsv { path: String, reason: String },
    #[error("duplicate gauge date {0}")]
    DuplicateDate(NaiveDate),
    #[error("non-finite elevation on {0}")]
    NonFiniteElevation(NaiveDate),
    #[error("scene {0} has no acquisition date")]
    MissingDate(usize),
    #[error("no scene could be paired with a gauge entry")]
    NoPairs,
    #[error("empty scene list")]
    NoScenes,
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// A single-band row-major raster plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f32>,
    nodata: Option<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(RasterError::GridLength { len: values.len(), height, width });
        }
        Ok(Self { height, width, values, nodata: None })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, values: vec![value; height * width], nodata: None }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self { height, width, values, nodata: None }
    }

    pub fn with_nodata(mut self, nodata: Option<f32>) -> Self {
        self.nodata = nodata;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.values[row * self.width + col] = value;
    }

    /// True when `value` equals the sentinel (NaN sentinels match NaN).
    pub fn is_nodata_value(&self, value: f32) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => value.is_nan(),
            Some(nd) => value == nd,
            None => false,
        }
    }

    pub fn is_nodata(&self, index: usize) -> bool {
        self.is_nodata_value(self.values[index])
    }

    /// Iterator over `(index, value)` of pixels that are not nodata.
    pub fn valid(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.values.iter().copied().enumerate().filter(move |&(_, v)| !self.is_nodata_value(v))
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Grid {
        let values = self
            .values
            .iter()
            .map(|&v| if self.is_nodata_value(v) { v } else { f(v) })
            .collect();
        Grid { height: self.height, width: self.width, values, nodata: self.nodata }
    }
}

/// Converts linear power to decibels, `10 log10(v)`.
pub fn to_db(grid: &Grid) -> Result<Grid> {
    if let Some((index, value)) = grid.valid().find(|&(_, v)| !(v > 0.0)) {
        return Err(RasterError::Nonpositive { index, value });
    }
    Ok(grid.map(|v| 10.0 * v.log10()))
}

/// Inverse of [`to_db`].
pub fn from_db(grid: &Grid) -> Grid {
    grid.map(|v| 10f32.powf(v / 10.0))
}

/// A set of co-registered named bands sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    height: usize,
    width: usize,
    bands: BandMap,
    pub acquisition_date: Option<NaiveDate>,
    pub crs_note: String,
}

impl GridStack {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, bands: BandMap::default(), acquisition_date: None, crs_note: String::new() }
    }

    pub fn with_date(mut self, date: NaiveDate) -> Self {
        self.acquisition_date = Some(date);
        self
    }

    pub fn with_band(mut self, name: &str, grid: Grid) -> Result<Self> {
        self.insert(name, grid)?;
        Ok(self)
    }

    /// Adds a band; fails on duplicate names or shape mismatch.
    pub fn insert(&mut self, name: &str, grid: Grid) -> Result<()> {
        if grid.shape() != (self.height, self.width) {
            return Err(RasterError::ShapeMismatch {
                band: name.to_string(),
                height: self.height,
                width: self.width,
                found_h: grid.height,
                found_w: grid.width,
            });
        }
        if self.bands.contains(name) {
            return Err(RasterError::DuplicateBand(name.to_string()));
        }
        self.bands.push(name.to_string(), grid);
        Ok(())
    }

    /// Adds or replaces a band.
    pub fn replace(&mut self, name: &str, grid: Grid) -> Result<()> {
        if self.bands.contains(name) {
            if grid.shape() != (self.height, self.width) {
                return Err(RasterError::ShapeMismatch {
                    band: name.to_string(),
                    height: self.height,
                    width: self.width,
                    found_h: grid.height,
                    found_w: grid.width,
                });
            }
            *self.bands.get_mut(name).expect("present") = grid;
            Ok(())
        } else {
            self.insert(name, grid)
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn band(&self, name: &str) -> Option<&Grid> {
        self.bands.get(name)
    }

    pub fn band_mut(&mut self, name: &str) -> Option<&mut Grid> {
        self.bands.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Grid> {
        self.band(name).ok_or_else(|| RasterError::MissingBand(name.to_string()))
    }

    pub fn band_names(&self) -> impl Iterator<Item = &str> {
        self.bands.iter().map(|(n, _)| n)
    }

    pub fn bands(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.bands.iter()
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    /// Checks the stack invariants: at least one band, uniform shapes and
    /// a single shared nodata sentinel.
    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(RasterError::NoBands);
        }
        let mut nodata: Option<Option<f32>> = None;
        for (name, grid) in self.bands.iter() {
            if grid.shape() != (self.height, self.width) {
                return Err(RasterError::ShapeMismatch {
                    band: name.to_string(),
                    height: self.height,
                    width: self.width,
                    found_h: grid.height,
                    found_w: grid.width,
                });
            }
            match nodata {
                None => nodata = Some(grid.nodata),
                Some(nd) if nd.map(f32::to_bits) != grid.nodata.map(f32::to_bits) => {
                    return Err(RasterError::NodataMismatch)
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn nodata(&self) -> Option<f32> {
        self.bands.iter().next().and_then(|(_, g)| g.nodata)
    }
}

/// Insertion-ordered band map. Band counts are tiny, so a vector with
/// linear lookup keeps file order without another dependency.
mod indexmap_lite {
    use super::Grid;

    #[derive(Debug, Clone, PartialEq, Default)]
    pub struct BandMap(Vec<(String, Grid)>);

    impl BandMap {
        pub fn contains(&self, name: &str) -> bool {
            self.0.iter().any(|(n, _)| n == name)
        }

        pub fn get(&self, name: &str) -> Option<&Grid> {
            self.0.iter().find(|(n, _)| n == name).map(|(_, g)| g)
        }

        pub fn get_mut(&mut self, name: &str) -> Option<&mut Grid> {
            self.0.iter_mut().find(|(n, _)| n == name).map(|(_, g)| g)
        }

        pub fn push(&mut self, name: String, grid: Grid) {
            self.0.push((name, grid));
        }

        pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
            self.0.iter().map(|(n, g)| (n.as_str(), g))
        }

        pub fn len(&self) -> usize {
            self.0.len()
        }

        pub fn is_empty(&self) -> bool {
            self.0.is_empty()
        }
    }
}
