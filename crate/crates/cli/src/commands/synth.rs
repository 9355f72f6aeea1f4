use std::path::PathBuf;

use clap::Args;
use hydrocorr::raster::{band, write_gauge_csv, write_gridstack, GridStack};
use hydrocorr::synthgen::{generate_site, SiteSpec};
use log::info;

use crate::error::Result;
use crate::manifest::{resolve_seed, ManifestBuilder};
use crate::site::{create_dir, date_stem, read_json, write_json, SiteInfo, DTM_STEM, GAUGE_FILE, SCENES_DIR, SITE_FILE};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SiteSpec JSON; the built-in default site when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Site directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("synth");
    let mut spec: SiteSpec = match &args.spec {
        Some(p) => {
            manifest.input(p);
            read_json(p)?
        }
        None => SiteSpec::default(),
    };
    spec.seed = resolve_seed(spec.seed)?;
    manifest.config(args.spec.as_deref()).seed(spec.seed);
    let site = generate_site(&spec)?;

    let scenes_dir = args.out.join(SCENES_DIR);
    create_dir(&scenes_dir)?;
    for (i, scene) in site.series.scenes.iter().enumerate() {
        write_gridstack(scene, scenes_dir.join(date_stem(scene, i)))?;
    }
    write_gauge_csv(&site.series.gauge, args.out.join(GAUGE_FILE))?;
    let (h, w) = site.dtm.shape();
    let dtm = GridStack::new(h, w).with_band(band::DTM, site.dtm.clone())?;
    write_gridstack(&dtm, args.out.join(DTM_STEM))?;
    let info = SiteInfo { gauge_zero_m: spec.gauge_zero, synthetic: Some(spec) };
    write_json(&info, &args.out.join(SITE_FILE))?;

    for name in [SITE_FILE, GAUGE_FILE, "dtm.json", SCENES_DIR] {
        manifest.output(&args.out.join(name));
    }
    manifest.finish(&args.out)?;
    info!("wrote {} scenes to {}", site.series.len(), scenes_dir.display());
    Ok(())
}
