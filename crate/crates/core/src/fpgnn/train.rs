use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape};
use crate::raster::SceneSeries;

use super::loss::reg_graph;
use super::model::{FpgnnModel, Normalization, PreparedInput};
use super::split::split_indices;
use super::{FpgnnError, RegTerms, Result, TrainConfig, PEARSON_EPS};

const MIN_SIDE: usize = 16;
const EVAL_CHUNK: usize = 8;

/// Per-epoch metrics, measured after the epoch's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    /// Correlation loss over the whole training split.
    pub train_loss: f64,
    /// Correlation loss over the held-out split.
    pub val_loss: f64,
    /// Smallest `max - min` of any training scene's soft mask.
    pub mask_range: f64,
    pub dense_penalty: f64,
    pub range_penalty: f64,
    pub clip_variance_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FpgnnModel,
    pub reports: Vec<LossReport>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_report(&self) -> &LossReport {
        &self.reports[self.best_epoch - 1]
    }
}

struct Snapshot {
    monitor: f64,
    epoch: usize,
    model: FpgnnModel,
}

fn check_learnable(elevations: &[f64], what: &str) -> Result<()> {
    let n = elevations.len() as f64;
    let mean = elevations.iter().sum::<f64>() / n;
    let var = elevations.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    if !var.is_finite() || var == 0.0 {
        return Err(FpgnnError::Unlearnable(format!(
            "{what} gauge elevations are constant, so area and elevation cannot correlate"
        )));
    }
    Ok(())
}

/// Trains a fresh network on `series` and returns the parameters from the
/// best epoch by validation loss, preferring epochs whose masks pass the
/// range gate.
pub fn train(series: &SceneSeries, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let (h, w) = series.shape();
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(FpgnnError::InvalidConfig(format!("scenes are {h}x{w}, need at least {MIN_SIDE}x{MIN_SIDE}")));
    }
    config.check_dry_patch(h, w)?;
    let elevations = series.elevations();
    if elevations.len() >= 2 {
        check_learnable(&elevations, "all")?;
    }
    let (train_idx, test_idx) = split_indices(&elevations, config.stratum_count, config.split_fraction, seed)?;
    let train_y: Vec<f64> = train_idx.iter().map(|&i| elevations[i]).collect();
    check_learnable(&train_y, "training")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalization = Normalization::fit(train_idx.iter().map(|&i| &series.scenes[i]))?;
    let prepared: Vec<PreparedInput> =
        series.scenes.iter().map(|s| PreparedInput::new(s, &normalization)).collect::<Result<_>>()?;
    let mut model = screen_initializations(&mut rng, config.init_candidates, &prepared, &train_idx, &elevations)?;
    model.normalization = normalization;
    model.input_shape = Some((prepared[0].padded_height, prepared[0].padded_width));

    let n_train = train_idx.len();
    let batch = ((n_train as f64 * config.batch_fraction).round() as usize).clamp(2, n_train);
    let mut adam = AdamState::new(config.lr);
    let mut reports = Vec::new();
    let mut best_any: Option<Snapshot> = None;
    let mut best_gated: Option<Snapshot> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    log::info!(
        "training on {n_train} scenes ({} held out), batch {batch}, {} parameters",
        test_idx.len(),
        model.parameter_count()
    );

    for epoch in 1..=config.early_stop.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().unwrap_or_default();
            batches.last_mut().expect("at least one batch").extend(tail);
        }
        for b in &batches {
            step(&mut model, &mut adam, &prepared, b, &elevations, config)?;
        }

        let report = evaluate(&model, &prepared, &train_idx, &test_idx, &elevations, config, epoch)?;
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} range {:.4}",
            report.train_loss,
            report.val_loss,
            report.mask_range
        );
        let monitor = if test_idx.len() >= 2 { report.val_loss } else { report.train_loss };
        let gated = report.mask_range > config.early_stop.range_gate;
        if best_any.as_ref().is_none_or(|s| monitor < s.monitor) {
            best_any = Some(Snapshot { monitor, epoch, model: model.clone() });
            since_best = 0;
        } else {
            since_best += 1;
        }
        if gated && best_gated.as_ref().is_none_or(|s| monitor < s.monitor) {
            best_gated = Some(Snapshot { monitor, epoch, model: model.clone() });
        }
        reports.push(report);
        if since_best >= config.early_stop.patience && gated {
            stopped_early = true;
            break;
        }
    }
    let best = best_gated.or(best_any).expect("at least one epoch ran");
    log::info!("kept epoch {} of {}", best.epoch, reports.len());
    Ok(TrainOutcome {
        model: best.model,
        reports,
        train_indices: train_idx,
        test_indices: test_idx,
        best_epoch: best.epoch,
        stopped_early,
    })
}

/// The range penalty saturates the mask within a few steps, locking in
/// whatever polarity the random network starts with, and a fully
/// anticorrelated mask sits on a flat maximum of the loss. Drawing a few
/// initializations and keeping the best-correlated one avoids starting there.
fn screen_initializations(
    rng: &mut ChaCha8Rng,
    candidates: usize,
    prepared: &[PreparedInput],
    train_idx: &[usize],
    elevations: &[f64],
) -> Result<FpgnnModel> {
    let ys: Vec<f64> = train_idx.iter().map(|&i| elevations[i]).collect();
    let mut best: Option<(f64, FpgnnModel)> = None;
    for k in 0..candidates {
        let model = FpgnnModel::new(rng);
        if candidates == 1 {
            return Ok(model);
        }
        let mut areas = Vec::with_capacity(train_idx.len());
        for chunk in train_idx.chunks(EVAL_CHUNK) {
            let inputs: Vec<&PreparedInput> = chunk.iter().map(|&i| &prepared[i]).collect();
            areas.extend(model.run(&inputs)?.1);
        }
        let mut tape = Tape::new();
        let p = tape.constant(vec![areas.len()], areas)?;
        let l = tape.pearson_loss(p, &ys, PEARSON_EPS)?;
        let loss = tape.scalar(l);
        log::debug!("initialization {k}: correlation loss {loss:.4}");
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, model));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Full training objective on one batch: correlation loss plus the activity
/// regularizers. Stores the gradient in every layer's `grad`, weights then
/// bias in [`FpgnnModel::layers`] order, and returns the objective value.
pub fn training_objective(
    model: &mut FpgnnModel,
    batch: &[&PreparedInput],
    elevations: &[f64],
    config: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != elevations.len() {
        return Err(FpgnnError::InvalidConfig(format!(
            "batch of {} inputs with {} elevations",
            batch.len(),
            elevations.len()
        )));
    }
    let (ph, pw) = (batch[0].padded_height, batch[0].padded_width);
    let data: Vec<f64> = batch.iter().flat_map(|p| p.data.iter().copied()).collect();
    let mut tape = Tape::new();
    let x = tape.constant(vec![batch.len(), 2, ph, pw], data)?;
    let g = model.graph(&mut tape, x)?;
    let corr = tape.pearson_loss(g.area, elevations, PEARSON_EPS)?;
    let reg = reg_graph(&mut tape, g.mask, g.area, config.dry_patch, &config.reg_weights)?;
    let reg = reg.total(&mut tape)?;
    let total = tape.add(corr, reg)?;
    let grads = tape.backward(total)?;
    for (layer, pair) in model.layers_mut().into_iter().zip(g.params.chunks_exact(2)) {
        grads.write_to(pair[0], &mut layer.weights);
        grads.write_to(pair[1], &mut layer.bias);
    }
    Ok(tape.scalar(total))
}

fn step(
    model: &mut FpgnnModel,
    adam: &mut AdamState,
    prepared: &[PreparedInput],
    batch: &[usize],
    elevations: &[f64],
    config: &TrainConfig,
) -> Result<()> {
    let inputs: Vec<&PreparedInput> = batch.iter().map(|&i| &prepared[i]).collect();
    let ys: Vec<f64> = batch.iter().map(|&i| elevations[i]).collect();
    training_objective(model, &inputs, &ys, config)?;
    adam_step(&mut model.layers_mut(), adam)?;
    Ok(())
}

/// Forward-only pass over every scene.
fn evaluate(
    model: &FpgnnModel,
    prepared: &[PreparedInput],
    train_idx: &[usize],
    test_idx: &[usize],
    elevations: &[f64],
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    let mut masks = vec![Vec::new(); prepared.len()];
    let mut areas = vec![0.0; prepared.len()];
    let all: Vec<usize> = train_idx.iter().chain(test_idx).copied().collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let inputs: Vec<&PreparedInput> = chunk.iter().map(|&i| &prepared[i]).collect();
        let (m, a) = model.run(&inputs)?;
        for ((&i, m), a) in chunk.iter().zip(m).zip(a) {
            masks[i] = m;
            areas[i] = a;
        }
    }
    let corr = |idx: &[usize]| -> Result<f64> {
        if idx.len() < 2 {
            return Ok(f64::NAN);
        }
        let mut tape = Tape::new();
        let p = tape.constant(vec![idx.len()], idx.iter().map(|&i| areas[i]).collect())?;
        let ys: Vec<f64> = idx.iter().map(|&i| elevations[i]).collect();
        let l = tape.pearson_loss(p, &ys, PEARSON_EPS)?;
        Ok(tape.scalar(l))
    };
    let train_loss = corr(train_idx)?;
    let val_loss = corr(test_idx)?;

    let (ph, pw) = (prepared[0].padded_height, prepared[0].padded_width);
    let mask_range = train_idx
        .iter()
        .map(|&i| {
            let crop = prepared[i].crop(&masks[i]);
            let hi = crop.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = crop.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(f64::INFINITY, f64::min);

    let mut tape = Tape::new();
    let mv = tape.constant(vec![train_idx.len(), 1, ph, pw], train_idx.iter().flat_map(|&i| masks[i].iter().copied()).collect())?;
    let av = tape.constant(vec![train_idx.len(), 1], train_idx.iter().map(|&i| areas[i]).collect())?;
    let RegTerms { dense_penalty, range_penalty, clip_variance_penalty } =
        reg_graph(&mut tape, mv, av, config.dry_patch, &config.reg_weights)?.values(&tape);
    Ok(LossReport { epoch, train_loss, val_loss, mask_range, dense_penalty, range_penalty, clip_variance_penalty })
}

pub fn write_loss_csv(reports: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
