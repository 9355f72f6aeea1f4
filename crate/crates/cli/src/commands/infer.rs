use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;
use hydrocorr::fpgnn::{harden, infer, FpgnnModel};
use hydrocorr::raster::{band, write_gridstack, GridStack};
use log::info;

use crate::error::{CliError, Result};
use crate::manifest::ManifestBuilder;
use crate::site::{create_dir, date_stem, read_stacks, SCENES_DIR};

pub const DEFAULT_THRESHOLDS: &str = "0.1:0.55:0.05";
pub const SOFT_DIR: &str = "soft";
pub const HARD_DIR: &str = "hard";

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint written by `train` (stem or .json).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub site: PathBuf,
    /// Directory for `soft/` and `hard/t*/` mask stacks.
    #[arg(long)]
    pub out: PathBuf,
    /// Hard-mask thresholds as `start:stop:step`. Bare `--thresholds` uses
    /// 0.1:0.55:0.05; without the flag only soft masks are written.
    #[arg(long, num_args = 0..=1, default_missing_value = DEFAULT_THRESHOLDS)]
    pub thresholds: Option<String>,
}

/// Parses `start:stop:step` into an inclusive grid inside (0, 1).
pub fn parse_thresholds(s: &str) -> Result<Vec<f32>> {
    let bad = |why: &str| CliError::invalid(format!("thresholds {s:?}: {why}"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("expected start:stop:step"))?;
    let [start, stop, step] = parts[..] else {
        return Err(bad("expected start:stop:step"));
    };
    if !(start > 0.0 && stop < 1.0 && start <= stop) {
        return Err(bad("need 0 < start <= stop < 1"));
    }
    if !(step > 0.0) {
        return Err(bad("step must be positive"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let values: Vec<f32> = (0..n).map(|k| ((start + step * k as f64) * 1e6).round() as f32 / 1e6).collect();
    let labels: BTreeSet<String> = values.iter().map(|&t| threshold_label(t)).collect();
    if labels.len() != values.len() {
        return Err(bad("steps finer than 0.01 are not supported"));
    }
    Ok(values)
}

/// Directory name for a threshold, e.g. `t0.10`.
pub fn threshold_label(t: f32) -> String {
    format!("t{t:.2}")
}

pub fn run(args: &InferArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("infer");
    manifest.input(&args.model).input(&args.site);
    let thresholds = args.thresholds.as_deref().map(parse_thresholds).transpose()?.unwrap_or_default();
    let model = FpgnnModel::load(&args.model)?;
    let scenes = read_stacks(&args.site.join(SCENES_DIR))?;
    if scenes.is_empty() {
        return Err(CliError::invalid(format!("no scenes under {}", args.site.join(SCENES_DIR).display())));
    }

    let soft_dir = args.out.join(SOFT_DIR);
    create_dir(&soft_dir)?;
    let hard_dirs: Vec<PathBuf> = thresholds.iter().map(|&t| args.out.join(HARD_DIR).join(threshold_label(t))).collect();
    for d in &hard_dirs {
        create_dir(d)?;
    }
    for (i, scene) in scenes.iter().enumerate() {
        let soft = infer(&model, scene)?;
        let (h, w) = soft.shape();
        let stem = date_stem(scene, i);
        let mut stack = GridStack::new(h, w).with_band(band::SOFT_WATER, soft.grid().clone())?;
        stack.acquisition_date = scene.acquisition_date;
        write_gridstack(&stack, soft_dir.join(&stem))?;
        for (&t, dir) in thresholds.iter().zip(&hard_dirs) {
            let mut hard = GridStack::new(h, w).with_band(band::WATER, harden(&soft, t).to_grid())?;
            hard.acquisition_date = scene.acquisition_date;
            write_gridstack(&hard, dir.join(&stem))?;
        }
    }
    manifest.output(&soft_dir);
    if !thresholds.is_empty() {
        manifest.output(&args.out.join(HARD_DIR));
    }
    manifest.finish(&args.out)?;
    info!("wrote soft masks for {} scenes and {} threshold(s)", scenes.len(), thresholds.len());
    Ok(())
}
