use std::path::PathBuf;

use clap::Args;
use hydrocorr::fpgnn::{train, write_loss_csv, TrainConfig};
use log::{debug, info};

use crate::error::{CliError, Result};
use crate::manifest::{resolve_seed, ManifestBuilder};
use crate::site::{create_dir, date_stem, load_site, read_json, write_json};

pub const MODEL_STEM: &str = "model";
pub const LOSS_FILE: &str = "losses.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Site directory (see `synth`).
    #[arg(long)]
    pub site: PathBuf,
    /// TrainConfig JSON; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for the checkpoint, loss log and split.
    #[arg(long)]
    pub out: PathBuf,
    /// Largest scene/gauge date gap accepted when pairing.
    #[arg(long, default_value_t = 4)]
    pub max_gap_days: i64,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("train");
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    config.seed = resolve_seed(config.seed)?;
    manifest.config(args.config.as_deref()).seed(config.seed).input(&args.site);
    if let Some(p) = &args.config {
        manifest.input(p);
    }
    let site = load_site(&args.site, args.max_gap_days)?;
    info!("training on {} scenes of {:?}", site.series.len(), site.series.shape());
    let outcome = train(&site.series, &config, config.seed)?;
    for r in &outcome.reports {
        debug!("epoch {} train {:.4} val {:.4} range {:.3}", r.epoch, r.train_loss, r.val_loss, r.mask_range);
    }
    let best = outcome.best_report();
    info!(
        "best epoch {} of {}: train loss {:.4}, val loss {:.4}{}",
        outcome.best_epoch,
        outcome.reports.len(),
        best.train_loss,
        best.val_loss,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );

    create_dir(&args.out)?;
    let model_path = args.out.join(MODEL_STEM);
    outcome.model.save(&model_path)?;
    let loss_path = args.out.join(LOSS_FILE);
    write_loss_csv(&outcome.reports, &loss_path)?;

    let split_path = args.out.join(SPLIT_FILE);
    let mut w = csv::Writer::from_path(&split_path).map_err(|e| CliError::io(&split_path, e))?;
    let mut rows: Vec<(usize, &str)> = outcome.train_indices.iter().map(|&i| (i, "train")).collect();
    rows.extend(outcome.test_indices.iter().map(|&i| (i, "test")));
    rows.sort();
    w.write_record(["date", "split", "elevation_m"]).map_err(|e| CliError::io(&split_path, e))?;
    for (i, split) in rows {
        let date = date_stem(&site.series.scenes[i], i);
        let elev = site.series.elevation(i).to_string();
        w.write_record([date.as_str(), split, elev.as_str()]).map_err(|e| CliError::io(&split_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&split_path, e))?;

    let config_path = args.out.join(CONFIG_FILE);
    write_json(&config, &config_path)?;
    manifest
        .output(&model_path.with_extension("json"))
        .output(&loss_path)
        .output(&split_path)
        .output(&config_path);
    manifest.finish(&args.out)?;
    Ok(())
}
