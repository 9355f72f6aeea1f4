use crate::autodiff::{NnError, PatchWindow, Tape, Var};
use crate::mask::SoftMask;

use super::{DryPatch, FpgnnError, RegWeights, Result};

/// Floor under `max - min` in the range term.
pub(crate) const RANGE_FLOOR: f64 = 1e-6;
/// Floor under the variance of predicted areas in the dense penalty.
pub(crate) const AREA_VARIANCE_FLOOR: f64 = 1e-12;

/// `1 - PCC(predicted, observed)`. Unlike the training graph this has no
/// stabilizer and fails when either input is constant.
pub fn pearson_loss(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() || predicted.len() < 2 {
        return Err(NnError::Invalid {
            op: "pearson_loss",
            reason: format!("need equal lengths >= 2, got {} and {}", predicted.len(), observed.len()),
        }
        .into());
    }
    let n = predicted.len() as f64;
    let mp = predicted.iter().sum::<f64>() / n;
    let mo = observed.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (p, o) in predicted.iter().zip(observed) {
        let (a, b) = (p - mp, o - mo);
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    if saa == 0.0 {
        return Err(FpgnnError::DegenerateVariance("predicted"));
    }
    if sbb == 0.0 {
        return Err(FpgnnError::DegenerateVariance("observed"));
    }
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - r)
}

/// The three activity penalties, already weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegTerms {
    pub dense_penalty: f64,
    pub range_penalty: f64,
    pub clip_variance_penalty: f64,
}

impl RegTerms {
    pub fn total(&self) -> f64 {
        self.dense_penalty + self.range_penalty + self.clip_variance_penalty
    }
}

/// Mask penalties averaged over the batch (range and dry-patch variance)
/// plus the inverse-variance penalty on the predicted areas.
pub fn activity_regularizers(
    masks: &[SoftMask],
    areas: &[f64],
    dry_patch: DryPatch,
    weights: &RegWeights,
) -> Result<RegTerms> {
    if masks.len() < 2 || areas.len() != masks.len() {
        return Err(NnError::Invalid {
            op: "activity_regularizers",
            reason: format!("need a batch of >= 2 masks with one area each, got {} and {}", masks.len(), areas.len()),
        }
        .into());
    }
    let (h, w) = masks[0].shape();
    let mut tape = Tape::new();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.shape() != (h, w) {
            return Err(NnError::Shape { op: "activity_regularizers", expected: vec![h, w], found: vec![m.shape().0, m.shape().1] }.into());
        }
        data.extend(m.grid().values().iter().map(|&v| v as f64));
    }
    let mv = tape.constant(vec![masks.len(), 1, h, w], data)?;
    let av = tape.constant(vec![areas.len(), 1], areas.to_vec())?;
    let terms = reg_graph(&mut tape, mv, av, dry_patch, weights)?;
    Ok(terms.values(&tape))
}

pub(crate) struct RegVars {
    pub dense: Var,
    pub range: Var,
    pub clip: Var,
}

impl RegVars {
    pub fn values(&self, tape: &Tape) -> RegTerms {
        RegTerms {
            dense_penalty: tape.scalar(self.dense),
            range_penalty: tape.scalar(self.range),
            clip_variance_penalty: tape.scalar(self.clip),
        }
    }

    pub fn total(&self, tape: &mut Tape) -> Result<Var> {
        let s = tape.add(self.dense, self.range)?;
        Ok(tape.add(s, self.clip)?)
    }
}

/// Builds the regularizer terms on `tape` for masks `(B, 1, H, W)` and areas `(B, 1)`.
pub(crate) fn reg_graph(tape: &mut Tape, masks: Var, areas: Var, dry: DryPatch, w: &RegWeights) -> Result<RegVars> {
    let rng = tape.sample_range(masks)?;
    let inv = tape.reciprocal(rng, RANGE_FLOOR);
    let inv = tape.mean(inv);
    let range = tape.scale(inv, w.range_term);

    let window = PatchWindow { row: dry.row, col: dry.col, size: DryPatch::SIZE };
    let pv = tape.patch_variance(masks, window)?;
    let pv = tape.mean(pv);
    let clip = tape.scale(pv, w.clip_var_term);

    let var = tape.variance(areas);
    let scaled = tape.scale(var, w.dense_penalty_scale);
    let dense = tape.reciprocal(scaled, w.dense_penalty_scale * AREA_VARIANCE_FLOOR);
    Ok(RegVars { dense, range, clip })
}
