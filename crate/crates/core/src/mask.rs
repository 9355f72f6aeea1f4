//! Binary and soft water masks.

use chrono::NaiveDate;

use crate::raster::{Grid, RasterError};

/// A 0/1 mask; `true` marks water (or, for validity masks, a scoreable pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self, RasterError> {
        if values.len() != height * width {
            return Err(RasterError::GridLength { len: values.len(), height, width });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, values }
    }

    /// Interprets any nonzero value as 1. Nodata pixels become 0.
    pub fn from_grid(grid: &Grid) -> Self {
        let values = (0..grid.len()).map(|i| !grid.is_nodata(i) && grid.values()[i] != 0.0).collect();
        Self { height: grid.height(), width: grid.width(), values }
    }

    pub fn to_grid(&self) -> Grid {
        Grid::new(self.height, self.width, self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("shape is consistent")
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

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self { height: self.height, width: self.width, values: self.values.iter().map(|b| !b).collect() }
    }

    pub fn and(&self, other: &Self) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| *a && *b).collect();
        Self { height: self.height, width: self.width, values }
    }
}

/// Per-pixel water probability from the sigmoid head, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    values: Grid,
    pub source_date: Option<NaiveDate>,
}

impl SoftMask {
    /// Builds a mask from probabilities, nudging exact 0/1 (from `f32`
    /// rounding) into the open interval.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64]) -> Result<Self, RasterError> {
        const LO: f32 = f32::MIN_POSITIVE;
        const HI: f32 = 1.0 - f32::EPSILON / 2.0;
        let values = probs.iter().map(|&p| (p as f32).clamp(LO, HI)).collect();
        Ok(Self { values: Grid::new(height, width, values)?, source_date: None })
    }

    /// Wraps an existing grid, e.g. one read back from disk.
    pub fn from_grid(grid: Grid) -> Self {
        Self { values: grid, source_date: None }
    }

    pub fn with_date(mut self, date: Option<NaiveDate>) -> Self {
        self.source_date = date;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// `max - min` over the mask.
    pub fn range(&self) -> f32 {
        let (lo, hi) = self
            .values
            .values()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

/// Water wherever the soft value is at or above `threshold`.
pub fn harden(mask: &SoftMask, threshold: f32) -> BinaryMask {
    let g = mask.grid();
    BinaryMask {
        height: g.height(),
        width: g.width(),
        values: g.values().iter().map(|&v| v >= threshold).collect(),
    }
}
