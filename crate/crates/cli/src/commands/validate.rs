use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use hydrocorr::mask::BinaryMask;
use hydrocorr::raster::{band, read_gridstack, write_gridstack, GridStack};
use hydrocorr::validation::{contingency_map, iou, MaskPair, MndwiThreshold, Roi, ValidationError};
use log::{info, warn};

use crate::commands::infer::HARD_DIR;
use crate::error::{CliError, Result};
use crate::manifest::ManifestBuilder;
use crate::reference::{
    parse_mndwi_threshold, parse_roi, reference_for, scene_index, write_contingency_png, RefMode, RefOptions,
};
use crate::site::{create_dir, load_site, stack_stems, Site};

pub const IOU_FILE: &str = "iou.csv";
pub const CONTINGENCY_DIR: &str = "contingency";
pub const IOU_HEADER: [&str; 5] = ["date", "threshold", "iou_water", "iou_nonwater", "valid_fraction"];

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Output of `infer` (its `hard/t*` directories are scored) or a
    /// directory of GridStacks carrying a WATER band.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub site: PathBuf,
    #[arg(long, value_enum)]
    pub mode: RefMode,
    /// Directory for iou.csv, contingency maps and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Only pixels inside `row,col,height,width` are scored.
    #[arg(long, value_parser = parse_roi)]
    pub roi: Option<Roi>,
    /// MNDWI water threshold: `otsu` or a fixed value.
    #[arg(long, default_value = "otsu", value_parser = parse_mndwi_threshold)]
    pub mndwi_threshold: MndwiThreshold,
    #[arg(long, default_value_t = 4)]
    pub max_gap_days: i64,
}

/// One directory of hard masks, with its threshold when known.
struct PredictionSet {
    label: String,
    threshold: Option<f32>,
    dir: PathBuf,
}

fn prediction_sets(pred: &Path) -> Result<Vec<PredictionSet>> {
    if !pred.is_dir() {
        return Err(CliError::io(pred, "not a directory"));
    }
    let hard = pred.join(HARD_DIR);
    if !hard.is_dir() {
        return Ok(vec![PredictionSet { label: "masks".into(), threshold: None, dir: pred.to_path_buf() }]);
    }
    let mut sets = Vec::new();
    for entry in fs::read_dir(&hard).map_err(|e| CliError::io(&hard, e))? {
        let path = entry.map_err(|e| CliError::io(&hard, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else { continue };
        if let Some(t) = name.strip_prefix('t').and_then(|t| t.parse::<f32>().ok()) {
            sets.push(PredictionSet { label: name, threshold: Some(t), dir: path });
        }
    }
    sets.sort_by(|a, b| a.threshold.partial_cmp(&b.threshold).unwrap());
    Ok(sets)
}

pub struct DateScore {
    pub date: String,
    pub iou_water: f64,
    pub iou_nonwater: f64,
    pub valid_fraction: f64,
}

/// Scores a predicted mask against scene `i`. `None` when the reference
/// has no valid pixel.
pub fn score(site: &Site, i: usize, predicted: BinaryMask, opts: &RefOptions) -> Result<Option<(MaskPair, DateScore)>> {
    let reference = reference_for(site, i, opts)?;
    let pair = MaskPair::against(predicted, &reference)?;
    let date = crate::reference::scene_label(site, i);
    match iou(&pair) {
        Ok(r) => Ok(Some((
            pair,
            DateScore { date, iou_water: r.iou_water, iou_nonwater: r.iou_nonwater, valid_fraction: r.valid_fraction },
        ))),
        Err(ValidationError::EmptyValid) => {
            warn!("{date}: reference has no valid pixels; skipped");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn mean_score(scores: &[DateScore]) -> DateScore {
    let n = scores.len() as f64;
    let avg = |f: fn(&DateScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    DateScore {
        date: "mean".into(),
        iou_water: avg(|s| s.iou_water),
        iou_nonwater: avg(|s| s.iou_nonwater),
        valid_fraction: avg(|s| s.valid_fraction),
    }
}

pub fn run(args: &ValidateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("validate");
    manifest.input(&args.pred).input(&args.site);
    let site = load_site(&args.site, args.max_gap_days)?;
    let opts = RefOptions { mode: args.mode, mndwi: args.mndwi_threshold, roi: args.roi };
    let sets = prediction_sets(&args.pred)?;

    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut aligned = 0;
    for set in &sets {
        let cont_dir = args.out.join(CONTINGENCY_DIR).join(&set.label);
        let mut scores = Vec::new();
        for stem in stack_stems(&set.dir)? {
            let stack = read_gridstack(&stem)?;
            let Some(date) = stack.acquisition_date else {
                warn!("{}: no acquisition date; skipped", stem.display());
                continue;
            };
            let Some(i) = scene_index(&site, date) else {
                warn!("{date}: no paired site scene; skipped");
                continue;
            };
            let predicted = BinaryMask::from_grid(stack.require(band::WATER)?);
            let Some((pair, s)) = score(&site, i, predicted, &opts)? else { continue };
            create_dir(&cont_dir)?;
            let codes = contingency_map(&pair);
            let (h, wd) = codes.shape();
            let mut cstack = GridStack::new(h, wd).with_band(band::CONTINGENCY, codes.clone())?;
            cstack.acquisition_date = Some(date);
            write_gridstack(&cstack, cont_dir.join(&s.date))?;
            write_contingency_png(&codes, &cont_dir.join(format!("{}.png", s.date)))?;
            scores.push(s);
        }
        if scores.is_empty() {
            continue;
        }
        aligned += scores.len();
        let threshold = set.threshold.map(|t| format!("{t:.2}")).unwrap_or_default();
        let mean = mean_score(&scores);
        for s in scores.iter().chain(std::iter::once(&mean)) {
            rows.push([
                s.date.clone(),
                threshold.clone(),
                s.iou_water.to_string(),
                s.iou_nonwater.to_string(),
                s.valid_fraction.to_string(),
            ]);
        }
        info!(
            "{} ({}): mean water IoU {:.4}, non-water IoU {:.4} over {} dates",
            set.label,
            args.mode.name(),
            mean.iou_water,
            mean.iou_nonwater,
            scores.len()
        );
    }
    if aligned == 0 {
        return Err(CliError::invalid(format!(
            "no predictions in {} align with a scene of {}",
            args.pred.display(),
            args.site.display()
        )));
    }
    let csv_path = args.out.join(IOU_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    w.write_record(IOU_HEADER).map_err(|e| CliError::io(&csv_path, e))?;
    for row in &rows {
        w.write_record(row).map_err(|e| CliError::io(&csv_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    manifest.output(&csv_path).output(&args.out.join(CONTINGENCY_DIR));
    manifest.finish(&args.out)?;
    Ok(())
}
