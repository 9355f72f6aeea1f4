//! Reference masks and shared output helpers for `validate` and `benchmark`.

use std::path::Path;

use clap::ValueEnum;
use hydrocorr::mask::BinaryMask;
use hydrocorr::raster::{band, Grid};
use hydrocorr::validation::{
    dtm_water_mask, mndwi_water_mask, MndwiThreshold, Reference, Roi, CONTINGENCY_PALETTE,
};
use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};
use crate::site::Site;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefMode {
    /// Pixels below the gauge water level on the DTM.
    Dtm,
    /// MNDWI thresholded per scene, clouds excluded.
    Mndwi,
    /// The REF_WATER band of each scene.
    Truth,
}

impl RefMode {
    pub fn name(self) -> &'static str {
        match self {
            RefMode::Dtm => "dtm",
            RefMode::Mndwi => "mndwi",
            RefMode::Truth => "truth",
        }
    }
}

/// `otsu` or a fixed MNDWI value.
pub fn parse_mndwi_threshold(s: &str) -> Result<MndwiThreshold, String> {
    if s.eq_ignore_ascii_case("otsu") {
        return Ok(MndwiThreshold::Otsu);
    }
    match s.parse::<f64>() {
        Ok(v) if (-1.0..=1.0).contains(&v) => Ok(MndwiThreshold::Manual(v)),
        _ => Err(format!("expected `otsu` or a number in [-1, 1], got {s:?}")),
    }
}

/// `row,col,height,width`.
pub fn parse_roi(s: &str) -> Result<Roi, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("ROI {s:?}: {e}"))?;
    match parts[..] {
        [row, col, height, width] if height > 0 && width > 0 => Ok(Roi { row, col, height, width }),
        _ => Err(format!("ROI {s:?}: expected row,col,height,width with positive size")),
    }
}

pub struct RefOptions {
    pub mode: RefMode,
    pub mndwi: MndwiThreshold,
    pub roi: Option<Roi>,
}

/// Reference mask for scene `i` of the site series.
pub fn reference_for(site: &Site, i: usize, opts: &RefOptions) -> Result<Reference> {
    let scene = &site.series.scenes[i];
    let mut reference = match opts.mode {
        RefMode::Dtm => {
            let dtm = site.dtm.as_ref().ok_or_else(|| CliError::invalid("dtm mode needs a DTM in the site directory"))?;
            if dtm.shape() != scene.shape() {
                return Err(CliError::invalid(format!(
                    "DTM is {:?} but scenes are {:?}",
                    dtm.shape(),
                    scene.shape()
                )));
            }
            let level = site.series.elevation(i) + site.series.gauge.gauge_zero_m;
            dtm_water_mask(dtm, level, None)
        }
        RefMode::Mndwi => {
            let index = scene.require(band::MNDWI)?;
            let cloud = scene.band(band::CLOUD).map(BinaryMask::from_grid);
            mndwi_water_mask(index, cloud.as_ref(), opts.mndwi).map_err(|e| {
                CliError::invalid(format!("{}: {e}", scene_label(site, i)))
            })?
        }
        RefMode::Truth => Reference::from_truth(scene.require(band::REF_WATER)?),
    };
    if let Some(roi) = opts.roi {
        let (h, w) = scene.shape();
        reference.valid = reference.valid.and(&BinaryMask::from_fn(h, w, |r, c| roi.contains(r, c)));
    }
    Ok(reference)
}

pub fn scene_label(site: &Site, i: usize) -> String {
    site.series.scenes[i].acquisition_date.map_or_else(|| format!("scene {i}"), |d| d.to_string())
}

/// Index of the site scene acquired on `date`.
pub fn scene_index(site: &Site, date: chrono::NaiveDate) -> Option<usize> {
    site.series.scenes.iter().position(|s| s.acquisition_date == Some(date))
}

/// Contingency codes rendered with the fixed palette.
pub fn write_contingency_png(codes: &Grid, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(codes.width() as u32, codes.height() as u32, |x, y| {
        let code = codes.get(y as usize, x as usize) as usize;
        Rgb(CONTINGENCY_PALETTE[code.min(CONTINGENCY_PALETTE.len() - 1)])
    });
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::io(path, e))
}
