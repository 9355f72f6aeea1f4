use std::path::{Path, PathBuf};

use clap::Args;
use hydrocorr::baselines::Method;
use hydrocorr::fpgnn::{harden, infer, FpgnnModel};
use hydrocorr::mask::BinaryMask;
use hydrocorr::raster::{band, to_db, write_gridstack, GridStack};
use hydrocorr::validation::{MndwiThreshold, Roi};
use log::info;

use crate::commands::validate::{mean_score, score, DateScore};
use crate::error::{CliError, Result};
use crate::manifest::{resolve_seed, ManifestBuilder};
use crate::reference::{parse_mndwi_threshold, parse_roi, RefMode, RefOptions};
use crate::site::{create_dir, date_stem, load_site};

pub const SUMMARY_FILE: &str = "iou.csv";
pub const BY_DATE_FILE: &str = "iou_by_date.csv";
pub const FPGNN: &str = "fpgnn";

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub site: PathBuf,
    /// Comma-separated subset of otsu, chanvese, gmm, spectral.
    #[arg(long, default_value = "otsu,chanvese,gmm,spectral")]
    pub methods: String,
    /// SAR band the baselines segment, in dB.
    #[arg(long, default_value = band::VV)]
    pub band: String,
    /// Directory for per-method masks and the IoU tables.
    #[arg(long)]
    pub out: PathBuf,
    /// References to score against; every one the site supports when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub references: Vec<RefMode>,
    /// Also score a trained checkpoint, hardened at `--threshold`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, value_parser = parse_roi)]
    pub roi: Option<Roi>,
    #[arg(long, default_value = "otsu", value_parser = parse_mndwi_threshold)]
    pub mndwi_threshold: MndwiThreshold,
    #[arg(long, default_value_t = 4)]
    pub max_gap_days: i64,
}

fn io(p: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(p, e)
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let names: Vec<&str> = s.split(',').map(str::trim).filter(|n| !n.is_empty()).collect();
    if names.is_empty() {
        return Err(CliError::invalid("no methods given; choose from otsu, chanvese, gmm, spectral"));
    }
    let mut methods = Vec::new();
    for n in names {
        let m = Method::parse(&n.to_ascii_lowercase())
            .ok_or_else(|| CliError::invalid(format!("unknown method {n:?}; choose from otsu, chanvese, gmm, spectral")))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    Ok(methods)
}

pub fn run(args: &BenchmarkArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("benchmark");
    manifest.input(&args.site);
    let methods = parse_methods(&args.methods)?;
    let sar_band = match args.band.to_ascii_uppercase().as_str() {
        "VV" => band::VV,
        "VH" => band::VH,
        other => return Err(CliError::invalid(format!("band must be VV or VH, got {other:?}"))),
    };
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::invalid(format!("threshold {} outside (0, 1)", args.threshold)));
    }
    let seed = resolve_seed(0)?;
    manifest.seed(seed);
    let site = load_site(&args.site, args.max_gap_days)?;
    let references = if args.references.is_empty() {
        let first = &site.series.scenes[0];
        let mut r = Vec::new();
        if site.dtm.is_some() {
            r.push(RefMode::Dtm);
        }
        if first.band(band::MNDWI).is_some() {
            r.push(RefMode::Mndwi);
        }
        if first.band(band::REF_WATER).is_some() {
            r.push(RefMode::Truth);
        }
        if r.is_empty() {
            return Err(CliError::invalid("site has no DTM, MNDWI or REF_WATER to score against"));
        }
        r
    } else {
        args.references.clone()
    };
    let model = match &args.model {
        Some(p) => {
            manifest.input(p);
            Some(FpgnnModel::load(p)?)
        }
        None => None,
    };

    let mut columns: Vec<String> = methods.iter().map(|m| m.name().to_string()).collect();
    if model.is_some() {
        columns.push(FPGNN.into());
    }
    // masks[c][i]: column c, scene i
    let mut masks: Vec<Vec<BinaryMask>> = vec![Vec::new(); columns.len()];
    for (i, scene) in site.series.scenes.iter().enumerate() {
        let db = to_db(scene.require(sar_band)?)?;
        for (k, m) in methods.iter().enumerate() {
            masks[k].push(m.segment(&db, seed)?);
        }
        if let Some(model) = &model {
            masks[methods.len()].push(harden(&infer(model, scene)?, args.threshold));
        }
        log::debug!("segmented {}", date_stem(scene, i));
    }

    create_dir(&args.out)?;
    for (name, per_scene) in columns.iter().zip(&masks) {
        let dir = args.out.join(name);
        create_dir(&dir)?;
        for (i, (scene, mask)) in site.series.scenes.iter().zip(per_scene).enumerate() {
            let (h, w) = mask.shape();
            let mut stack = GridStack::new(h, w).with_band(band::WATER, mask.to_grid())?;
            stack.acquisition_date = scene.acquisition_date;
            write_gridstack(&stack, dir.join(date_stem(scene, i)))?;
        }
        manifest.output(&dir);
    }

    let by_date_path = args.out.join(BY_DATE_FILE);
    let summary_path = args.out.join(SUMMARY_FILE);
    let mut by_date = csv::Writer::from_path(&by_date_path).map_err(io(&by_date_path))?;
    by_date
        .write_record(["method", "reference", "date", "iou_water", "iou_nonwater", "valid_fraction"])
        .map_err(io(&by_date_path))?;
    let mut summary = csv::Writer::from_path(&summary_path).map_err(io(&summary_path))?;
    summary.write_record(["method", "reference", "class", "iou", "dates"]).map_err(io(&summary_path))?;
    for (name, per_scene) in columns.iter().zip(&masks) {
        for &mode in &references {
            let opts = RefOptions { mode, mndwi: args.mndwi_threshold, roi: args.roi };
            let mut scores: Vec<DateScore> = Vec::new();
            for (i, mask) in per_scene.iter().enumerate() {
                if let Some((_, s)) = score(&site, i, mask.clone(), &opts)? {
                    scores.push(s);
                }
            }
            for s in &scores {
                by_date
                    .write_record([
                        name.as_str(),
                        mode.name(),
                        s.date.as_str(),
                        &s.iou_water.to_string(),
                        &s.iou_nonwater.to_string(),
                        &s.valid_fraction.to_string(),
                    ])
                    .map_err(io(&by_date_path))?;
            }
            if scores.is_empty() {
                continue;
            }
            let mean = mean_score(&scores);
            let n = scores.len().to_string();
            for (class, v) in [("water", mean.iou_water), ("nonwater", mean.iou_nonwater)] {
                summary
                    .write_record([name.as_str(), mode.name(), class, &v.to_string(), &n])
                    .map_err(io(&summary_path))?;
            }
            info!("{name} vs {}: water IoU {:.4}, non-water IoU {:.4}", mode.name(), mean.iou_water, mean.iou_nonwater);
        }
    }
    by_date.flush().map_err(|e| CliError::io(&by_date_path, e))?;
    summary.flush().map_err(|e| CliError::io(&summary_path, e))?;
    manifest.output(&summary_path).output(&by_date_path);
    manifest.finish(&args.out)?;
    Ok(())
}
