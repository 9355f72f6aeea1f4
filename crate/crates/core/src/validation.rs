//! Reference masks from terrain and optical data, per-class IoU and
//! contingency maps.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{otsu_threshold, BaselineError};
use crate::mask::{harden, BinaryMask, SoftMask};
use crate::raster::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("shape mismatch: expected {height}x{width}, found {found_h}x{found_w}")]
    ShapeMismatch { height: usize, width: usize, found_h: usize, found_w: usize },
    #[error("no valid pixels to score")]
    EmptyValid,
    #[error("MNDWI image is not separable by Otsu ({0}); use a manual threshold")]
    RequiresManual(BaselineError),
    #[error("nothing to score")]
    EmptyInput,
    #[error("{soft} soft masks but {references} references")]
    LengthMismatch { soft: usize, references: usize },
}

pub type Result<T, E = ValidationError> = std::result::Result<T, E>;

fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(ValidationError::ShapeMismatch {
            height: expected.0,
            width: expected.1,
            found_h: found.0,
            found_w: found.1,
        });
    }
    Ok(())
}

/// Rectangular region of interest; pixels outside it are not scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }
}

/// A reference water mask with the pixels it can be trusted on.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub water: BinaryMask,
    pub valid: BinaryMask,
}

impl Reference {
    /// Every non-nodata pixel of `grid` is valid; water where it is nonzero.
    pub fn from_truth(grid: &Grid) -> Self {
        let (h, w) = grid.shape();
        let valid = BinaryMask::new(h, w, (0..grid.len()).map(|i| !grid.is_nodata(i)).collect()).expect("shape from grid");
        Self { water: BinaryMask::from_grid(grid), valid }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.count() as f64 / self.valid.values().len().max(1) as f64
    }
}

/// Water wherever the terrain lies strictly below `elevation_asl`
/// (gauge reading plus gauge zero). Nodata and out-of-ROI pixels are invalid.
pub fn dtm_water_mask(dtm: &Grid, elevation_asl: f64, roi: Option<Roi>) -> Reference {
    let (h, w) = dtm.shape();
    let valid = BinaryMask::from_fn(h, w, |r, c| !dtm.is_nodata(r * w + c) && roi.is_none_or(|roi| roi.contains(r, c)));
    let water = BinaryMask::from_fn(h, w, |r, c| valid.get(r, c) && (dtm.get(r, c) as f64) < elevation_asl);
    Reference { water, valid }
}

/// `(green - swir) / (green + swir)`, 0 where both are 0. Nodata in either
/// input stays nodata (using `green`'s sentinel).
pub fn mndwi(green: &Grid, swir: &Grid) -> Result<Grid> {
    check_shape(green.shape(), swir.shape())?;
    let nodata = green.nodata().or(swir.nodata());
    let values = (0..green.len())
        .map(|i| {
            if green.is_nodata(i) || swir.is_nodata(i) {
                return nodata.expect("a sentinel exists if a pixel is nodata");
            }
            let (g, s) = (green.values()[i], swir.values()[i]);
            if g + s == 0.0 { 0.0 } else { (g - s) / (g + s) }
        })
        .collect();
    Ok(Grid::new(green.height(), green.width(), values).expect("shape from input").with_nodata(nodata))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MndwiThreshold {
    Otsu,
    Manual(f64),
}

/// Water where MNDWI is at or above the threshold; clouds and nodata are invalid.
pub fn mndwi_water_mask(index: &Grid, cloud: Option<&BinaryMask>, mode: MndwiThreshold) -> Result<Reference> {
    let (h, w) = index.shape();
    if let Some(c) = cloud {
        check_shape((h, w), c.shape())?;
    }
    let valid = BinaryMask::from_fn(h, w, |r, c| !index.is_nodata(r * w + c) && !cloud.is_some_and(|m| m.get(r, c)));
    let threshold = match mode {
        MndwiThreshold::Manual(t) => t,
        MndwiThreshold::Otsu => {
            const HIDDEN: f32 = f32::NEG_INFINITY;
            let visible = Grid::new(h, w, (0..h * w).map(|i| if valid.values()[i] { index.values()[i] } else { HIDDEN }).collect())
                .expect("shape from input")
                .with_nodata(Some(HIDDEN));
            otsu_threshold(&visible).map_err(ValidationError::RequiresManual)?
        }
    };
    let water = BinaryMask::from_fn(h, w, |r, c| valid.get(r, c) && index.get(r, c) as f64 >= threshold);
    Ok(Reference { water, valid })
}

/// Predicted and reference masks with the pixels that may be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    predicted: BinaryMask,
    reference: BinaryMask,
    valid: BinaryMask,
}

impl MaskPair {
    pub fn new(predicted: BinaryMask, reference: BinaryMask, valid: BinaryMask) -> Result<Self> {
        check_shape(predicted.shape(), reference.shape())?;
        check_shape(predicted.shape(), valid.shape())?;
        Ok(Self { predicted, reference, valid })
    }

    pub fn against(predicted: BinaryMask, reference: &Reference) -> Result<Self> {
        Self::new(predicted, reference.water.clone(), reference.valid.clone())
    }

    pub fn predicted(&self) -> &BinaryMask {
        &self.predicted
    }

    pub fn reference(&self) -> &BinaryMask {
        &self.reference
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    /// The same pair with water and land swapped in both masks.
    pub fn complement(&self) -> Self {
        Self { predicted: self.predicted.complement(), reference: self.reference.complement(), valid: self.valid.clone() }
    }

    pub fn contingency(&self) -> Contingency {
        let mut c = Contingency::default();
        for ((&p, &r), &v) in self.predicted.values().iter().zip(self.reference.values()).zip(self.valid.values()) {
            match (v, p, r) {
                (false, _, _) => c.invalid += 1,
                (true, true, true) => c.tp += 1,
                (true, false, false) => c.tn += 1,
                (true, true, false) => c.fp += 1,
                (true, false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Pixel counts of a [`MaskPair`], water being the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Contingency {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub invalid: usize,
}

impl Contingency {
    pub fn valid(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `TP / (TP + FP + FN)`, or 1 if neither mask has water.
    pub fn iou_water(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_nonwater(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub date: Option<NaiveDate>,
    pub iou_water: f64,
    pub iou_nonwater: f64,
    pub iou_mean: f64,
    pub valid_fraction: f64,
}

/// Per-class intersection over union on the valid pixels.
pub fn iou(pair: &MaskPair) -> Result<IouReport> {
    let c = pair.contingency();
    if c.valid() == 0 {
        return Err(ValidationError::EmptyValid);
    }
    let (w, n) = (c.iou_water(), c.iou_nonwater());
    Ok(IouReport {
        date: None,
        iou_water: w,
        iou_nonwater: n,
        iou_mean: (w + n) / 2.0,
        valid_fraction: c.valid() as f64 / (c.valid() + c.invalid) as f64,
    })
}

pub mod code {
    pub const INVALID: u8 = 0;
    pub const TP: u8 = 1;
    pub const TN: u8 = 2;
    pub const FP: u8 = 3;
    pub const FN: u8 = 4;
}

/// RGB colour for each contingency code: black, blue, gray, green, red.
pub const CONTINGENCY_PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [0, 90, 255], [160, 160, 160], [0, 190, 0], [230, 0, 0]];

/// Per-pixel contingency codes (see [`code`]).
pub fn contingency_map(pair: &MaskPair) -> Grid {
    let (h, w) = pair.predicted.shape();
    Grid::from_fn(h, w, |r, c| {
        let (p, t) = (pair.predicted.get(r, c), pair.reference.get(r, c));
        let k = match (pair.valid.get(r, c), p, t) {
            (false, _, _) => code::INVALID,
            (true, true, true) => code::TP,
            (true, false, false) => code::TN,
            (true, true, false) => code::FP,
            (true, false, true) => code::FN,
        };
        k as f32
    })
}

/// Scores of every date at one threshold, with their average.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f32,
    pub iou_water: f64,
    pub iou_nonwater: f64,
    pub iou_mean: f64,
    pub valid_fraction: f64,
    /// Predicted water pixels on valid pixels, summed over scored dates.
    pub water_pixels: usize,
    /// One report per scored date; dates without valid pixels are skipped.
    pub per_date: Vec<IouReport>,
}

/// Hardens every soft mask at every threshold and averages the per-class
/// IoU over the dates that have valid pixels.
pub fn threshold_sweep(soft: &[SoftMask], references: &[Reference], thresholds: &[f32]) -> Result<Vec<SweepRow>> {
    if soft.len() != references.len() {
        return Err(ValidationError::LengthMismatch { soft: soft.len(), references: references.len() });
    }
    if soft.is_empty() || thresholds.is_empty() {
        return Err(ValidationError::EmptyInput);
    }
    for (s, r) in soft.iter().zip(references) {
        check_shape(r.water.shape(), s.shape())?;
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut per_date = Vec::new();
        let mut water_pixels = 0;
        for (s, r) in soft.iter().zip(references) {
            let pair = MaskPair::against(harden(s, t), r)?;
            match iou(&pair) {
                Ok(report) => {
                    water_pixels += pair.predicted.and(&pair.valid).count();
                    per_date.push(IouReport { date: s.source_date, ..report });
                }
                Err(ValidationError::EmptyValid) => continue,
                Err(e) => return Err(e),
            }
        }
        if per_date.is_empty() {
            return Err(ValidationError::EmptyValid);
        }
        let mean = |f: fn(&IouReport) -> f64| per_date.iter().map(f).sum::<f64>() / per_date.len() as f64;
        rows.push(SweepRow {
            threshold: t,
            iou_water: mean(|r| r.iou_water),
            iou_nonwater: mean(|r| r.iou_nonwater),
            iou_mean: mean(|r| r.iou_mean),
            valid_fraction: mean(|r| r.valid_fraction),
            water_pixels,
            per_date,
        });
    }
    Ok(rows)
}

/// Row with the highest mean water-class IoU; ties go to the lower threshold.
pub fn best_threshold(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.iou_water >= r.iou_water => Some(b),
        _ => Some(r),
    })
}
