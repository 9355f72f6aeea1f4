//! GridStack files: a JSON header `<name>.json` next to a raw payload
//! `<name>.bin` holding the band planes back to back as little-endian
//! IEEE-754 binary32, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Grid, GridStack, RasterError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandHeader {
    pub name: String,
    pub offset_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub height: usize,
    pub width: usize,
    pub bands: Vec<BandHeader>,
    pub date: Option<NaiveDate>,
    #[serde(default)]
    pub crs_note: String,
    pub nodata: Option<f32>,
}

/// Resolves `path` (either stem, `.json` or `.bin`) to the header/payload pair.
fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io { path: path.display().to_string(), source }
}

pub fn read_gridstack(path: impl AsRef<Path>) -> Result<GridStack> {
    let (json_path, bin_path) = pair_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let malformed = |reason: String| RasterError::MalformedHeader { path: json_path.display().to_string(), reason };
    let header: StackHeader = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if header.bands.is_empty() {
        return Err(RasterError::NoBands);
    }
    if let Some(nd) = header.nodata {
        if !nd.is_finite() {
            return Err(malformed("nodata must be finite".into()));
        }
    }
    let plane_bytes = (header.height * header.width * 4) as u64;
    for (i, b) in header.bands.iter().enumerate() {
        if b.offset_bytes != i as u64 * plane_bytes {
            return Err(malformed(format!(
                "band {:?} offset {} is not {} (planes must be contiguous)",
                b.name,
                b.offset_bytes,
                i as u64 * plane_bytes
            )));
        }
    }
    let payload = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let expected = plane_bytes * header.bands.len() as u64;
    if payload.len() as u64 != expected {
        return Err(RasterError::PayloadLength { expected, found: payload.len() as u64 });
    }

    let mut stack = GridStack::new(header.height, header.width);
    stack.acquisition_date = header.date;
    stack.crs_note = header.crs_note;
    for (i, b) in header.bands.iter().enumerate() {
        let start = i * plane_bytes as usize;
        let plane = &payload[start..start + plane_bytes as usize];
        let values = plane
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let grid = Grid::new(header.height, header.width, values)?.with_nodata(header.nodata);
        stack.insert(&b.name, grid)?;
    }
    Ok(stack)
}

pub fn write_gridstack(stack: &GridStack, path: impl AsRef<Path>) -> Result<()> {
    stack.validate()?;
    let (json_path, bin_path) = pair_paths(path.as_ref());
    if let Some(nd) = stack.nodata() {
        if !nd.is_finite() {
            return Err(RasterError::MalformedHeader {
                path: json_path.display().to_string(),
                reason: "nodata must be finite".into(),
            });
        }
    }
    let plane_bytes = (stack.height() * stack.width() * 4) as u64;
    let mut bands = Vec::with_capacity(stack.band_count());
    let mut payload = Vec::with_capacity(plane_bytes as usize * stack.band_count());
    for (i, (name, grid)) in stack.bands().enumerate() {
        bands.push(BandHeader { name: name.to_string(), offset_bytes: i as u64 * plane_bytes });
        for v in grid.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = StackHeader {
        height: stack.height(),
        width: stack.width(),
        bands,
        date: stack.acquisition_date,
        crs_note: stack.crs_note.clone(),
        nodata: stack.nodata(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&json_path, text + "\n").map_err(io_err(&json_path))?;
    fs::write(&bin_path, payload).map_err(io_err(&bin_path))?;
    Ok(())
}
