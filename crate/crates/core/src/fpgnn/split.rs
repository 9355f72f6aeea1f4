use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::raster::SceneSeries;

use super::{FpgnnError, Result, TrainConfig};

pub(crate) const MIN_SERIES: usize = 5;

/// Splits scene indices into `(train, test)`. Elevations fall into
/// `strata` equal-width bins; each bin sends `round((1 - fraction) * n)`
/// of its members, chosen by a seeded shuffle, to the test side. Both lists
/// come back sorted.
pub fn split_indices(elevations: &[f64], strata: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if elevations.len() < MIN_SERIES {
        return Err(FpgnnError::SeriesTooShort { len: elevations.len(), min: MIN_SERIES });
    }
    let lo = elevations.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = elevations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let strata = if hi > lo { strata.max(1) } else { 1 };
    let width = (hi - lo) / strata as f64;
    let mut bins = vec![Vec::new(); strata];
    for (i, &e) in elevations.iter().enumerate() {
        let b = if width > 0.0 { (((e - lo) / width) as usize).min(strata - 1) } else { 0 };
        bins[b].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut bin in bins {
        bin.shuffle(&mut rng);
        let n_test = ((1.0 - fraction) * bin.len() as f64 + 0.5).floor() as usize;
        test.extend_from_slice(&bin[..n_test]);
        train.extend_from_slice(&bin[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified 80/20 (by default) split of a scene series.
pub fn stratified_split(series: &SceneSeries, config: &TrainConfig, seed: u64) -> Result<(SceneSeries, SceneSeries)> {
    let (train, test) = split_indices(&series.elevations(), config.stratum_count, config.split_fraction, seed)?;
    Ok((series.subset(&train), series.subset(&test)))
}
