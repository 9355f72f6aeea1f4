//! Site directory layout:
//!
//! ```text
//! site/
//!   site.json          gauge zero, optional generator spec
//!   gauge.csv          date,elevation_m
//!   dtm.json/.bin      GridStack with a DTM band (optional for real data)
//!   scenes/<date>.json/.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use hydrocorr::raster::{
    band, pair_scenes, read_gauge_csv, read_gridstack, Grid, GridStack, SceneSeries,
};
use hydrocorr::synthgen::SiteSpec;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SITE_FILE: &str = "site.json";
pub const GAUGE_FILE: &str = "gauge.csv";
pub const DTM_STEM: &str = "dtm";
pub const SCENES_DIR: &str = "scenes";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteInfo {
    /// Elevation above sea level of a zero gauge reading, meters.
    pub gauge_zero_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SiteSpec>,
}

pub struct Site {
    pub series: SceneSeries,
    pub dtm: Option<Grid>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Stems of every GridStack header in `dir`, sorted by file name.
pub fn stack_stems(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn read_stacks(dir: &Path) -> Result<Vec<GridStack>> {
    stack_stems(dir)?.iter().map(|p| Ok(read_gridstack(p)?)).collect()
}

pub fn load_site(dir: &Path, max_gap_days: i64) -> Result<Site> {
    let info: SiteInfo = read_json(&dir.join(SITE_FILE))?;
    let mut gauge = read_gauge_csv(dir.join(GAUGE_FILE))?;
    gauge.gauge_zero_m = info.gauge_zero_m;
    let scenes = read_stacks(&dir.join(SCENES_DIR))?;
    if scenes.is_empty() {
        return Err(CliError::invalid(format!("no scenes under {}", dir.join(SCENES_DIR).display())));
    }
    let (series, dropped) = pair_scenes(scenes, gauge, max_gap_days)?;
    for d in &dropped {
        warn!("scene {} has no gauge reading within {max_gap_days} days; dropped", d.date);
    }
    let dtm_header = dir.join(format!("{DTM_STEM}.json"));
    let dtm = if dtm_header.exists() {
        Some(read_gridstack(&dtm_header)?.require(band::DTM)?.clone())
    } else {
        None
    };
    Ok(Site { series, dtm })
}

/// File stem used for a dated output.
pub fn date_stem(stack: &GridStack, index: usize) -> String {
    match stack.acquisition_date {
        Some(d) => d.format("%Y-%m-%d").to_string(),
        None => format!("scene_{index:04}"),
    }
}
