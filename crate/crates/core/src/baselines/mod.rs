//! Single-band unsupervised segmenters used as benchmarks. Every method
//! takes a dB-scale grid and labels the darker class as water; nodata
//! pixels are ignored when fitting and come out as land.

mod chanvese;
mod gmm;
mod otsu;
mod spectral;

pub use chanvese::{chan_vese_energy, chan_vese_segment, ChanVeseConfig, ChanVeseOutcome};
pub use gmm::{gmm_fit, gmm_segment, GmmFit, GmmParams, VARIANCE_FLOOR};
pub use otsu::{otsu_segment, otsu_split, otsu_threshold, OtsuSplit, OTSU_BINS};
pub use spectral::{affinity_matrix, ncut, spectral_bipartition, spectral_segment, SpectralConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::raster::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("image has fewer than two distinct values")]
    ConstantImage,
    #[error("image has no valid pixels")]
    NoValidPixels,
    #[error("too many pixels for exact Otsu arithmetic: {0}")]
    TooLarge(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = BaselineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Otsu,
    ChanVese,
    Gmm,
    Spectral,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Otsu, Method::ChanVese, Method::Gmm, Method::Spectral];

    pub fn name(self) -> &'static str {
        match self {
            Method::Otsu => "otsu",
            Method::ChanVese => "chanvese",
            Method::Gmm => "gmm",
            Method::Spectral => "spectral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Runs the method with its default settings. A constant image is all land.
    pub fn segment(self, grid: &Grid, seed: u64) -> Result<BinaryMask> {
        let r = match self {
            Method::Otsu => otsu_segment(grid),
            Method::ChanVese => chan_vese_segment(grid, &ChanVeseConfig::default()).map(|o| o.mask),
            Method::Gmm => gmm_segment(grid, 2, seed).map(|(m, _)| m),
            Method::Spectral => spectral_segment(grid, &SpectralConfig { seed, ..Default::default() }),
        };
        match r {
            Err(BaselineError::ConstantImage) => Ok(BinaryMask::filled(grid.height(), grid.width(), false)),
            other => other,
        }
    }
}

/// `(index, value)` of every finite, non-nodata pixel.
pub(crate) fn valid_pixels(grid: &Grid) -> Vec<(usize, f64)> {
    grid.valid().filter(|(_, v)| v.is_finite()).map(|(i, v)| (i, v as f64)).collect()
}

/// Water mask from per-pixel labels: the label whose pixels have the lower
/// mean value is water. If either label is empty the result is all land.
pub(crate) fn orient(grid: &Grid, pixels: &[(usize, f64)], labels: &[bool]) -> BinaryMask {
    let (mut s, mut n) = ([0.0; 2], [0usize; 2]);
    for (&(_, v), &l) in pixels.iter().zip(labels) {
        s[l as usize] += v;
        n[l as usize] += 1;
    }
    let mut out = vec![false; grid.len()];
    if n[0] > 0 && n[1] > 0 {
        let water_label = s[1] / (n[1] as f64) < s[0] / (n[0] as f64);
        for (&(i, _), &l) in pixels.iter().zip(labels) {
            out[i] = l == water_label;
        }
    }
    BinaryMask::new(grid.height(), grid.width(), out).expect("shape from grid")
}
