use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
use crate::autodiff::{AdamState, LayerKind, LayerParams, NnError, Tape, Var};
use crate::mask::SoftMask;
use crate::raster::{band, GridStack};

use super::{FpgnnError, Result};

/// Linear backscatter below this is treated as this before the dB transform.
const LINEAR_FLOOR: f64 = 1e-10;
const STD_FLOOR: f64 = 1e-6;

/// Per-band (VV, VH) dB statistics frozen from the training scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.0; 2], std: [1.0; 2] }
    }
}

fn db(v: f32) -> f64 {
    10.0 * (v as f64).max(LINEAR_FLOOR).log10()
}

/// dB values of VV and VH, with `None` where either band is nodata.
fn db_pixels(stack: &GridStack) -> Result<Vec<Option<[f64; 2]>>> {
    let vv = stack.require(band::VV)?;
    let vh = stack.require(band::VH)?;
    Ok((0..vv.len())
        .map(|i| {
            if vv.is_nodata(i) || vh.is_nodata(i) {
                None
            } else {
                Some([db(vv.values()[i]), db(vh.values()[i])])
            }
        })
        .collect())
}

impl Normalization {
    /// Mean and standard deviation of each band's dB values over every valid pixel.
    pub fn fit<'a>(stacks: impl IntoIterator<Item = &'a GridStack>) -> Result<Self> {
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut n = 0usize;
        for s in stacks {
            for p in db_pixels(s)?.into_iter().flatten() {
                for b in 0..2 {
                    sum[b] += p[b];
                    sq[b] += p[b] * p[b];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(FpgnnError::AllNodata);
        }
        let nf = n as f64;
        let mean = [sum[0] / nf, sum[1] / nf];
        let std = [0, 1].map(|b| (sq[b] / nf - mean[b] * mean[b]).max(0.0).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }
}

/// Network input for one scene: standardized dB bands, edge-padded to a
/// multiple of 8.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    /// `(2, padded_height, padded_width)` row-major.
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

fn pad8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl PreparedInput {
    pub fn new(stack: &GridStack, norm: &Normalization) -> Result<Self> {
        let (h, w) = stack.shape();
        let px = db_pixels(stack)?;
        if px.iter().all(Option::is_none) {
            return Err(FpgnnError::AllNodata);
        }
        let (ph, pw) = (pad8(h), pad8(w));
        let mut data = vec![0.0; 2 * ph * pw];
        for b in 0..2 {
            for r in 0..ph {
                for c in 0..pw {
                    let src = r.min(h - 1) * w + c.min(w - 1);
                    data[(b * ph + r) * pw + c] = px[src].map_or(0.0, |p| (p[b] - norm.mean[b]) / norm.std[b]);
                }
            }
        }
        Ok(Self { data, height: h, width: w, padded_height: ph, padded_width: pw })
    }

    /// Crops a padded `(ph, pw)` plane back to `(height, width)`.
    pub fn crop(&self, plane: &[f64]) -> Vec<f64> {
        (0..self.height)
            .flat_map(|r| plane[r * self.padded_width..r * self.padded_width + self.width].iter().copied())
            .collect()
    }
}

/// Feature extraction (six 3x3 convolutions, three poolings), upsampling
/// (three transposed convolutions with skip additions, 1x1 sigmoid head)
/// and the regression head on the summed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FpgnnModel {
    pub feature_layers: Vec<LayerParams>,
    /// 1x1 reducers for the full-, half- and quarter-resolution skips.
    pub skip_reducers: Vec<LayerParams>,
    /// Three transposed convolutions, then the final 1x1 convolution.
    pub upsample_layers: Vec<LayerParams>,
    pub head: LayerParams,
    pub normalization: Normalization,
    /// Padded input size the model was trained on.
    pub input_shape: Option<(usize, usize)>,
}

pub(crate) struct Graph {
    pub params: Vec<Var>,
    pub mask: Var,
    pub area: Var,
}

const FEATURE_CHANNELS: [(usize, usize); 6] = [(2, 16), (16, 16), (16, 32), (32, 32), (32, 64), (64, 64)];

impl FpgnnModel {
    pub fn new(rng: &mut impl Rng) -> Self {
        let feature_layers = FEATURE_CHANNELS.iter().map(|&(i, o)| LayerParams::conv(i, o, 3, rng)).collect();
        let skip_reducers = vec![LayerParams::conv(16, 1, 1, rng), LayerParams::conv(16, 1, 1, rng), LayerParams::conv(32, 1, 1, rng)];
        let upsample_layers = vec![
            LayerParams::transposed_conv(64, 1, rng),
            LayerParams::transposed_conv(1, 1, rng),
            LayerParams::transposed_conv(1, 1, rng),
            LayerParams::conv(1, 1, 1, rng),
        ];
        let head = LayerParams::nonnegative_dense(1, 1, rng);
        Self {
            feature_layers,
            skip_reducers,
            upsample_layers,
            head,
            normalization: Normalization::default(),
            input_shape: None,
        }
    }

    fn layer_names() -> Vec<String> {
        let mut n: Vec<String> = (0..6).map(|i| format!("feature_{i}")).collect();
        n.extend(["reducer_full", "reducer_half", "reducer_quarter"].map(String::from));
        n.extend((0..3).map(|i| format!("deconv_{i}")));
        n.extend(["final_conv", "head"].map(String::from));
        n
    }

    /// Every layer in a fixed order: features, reducers, upsampling, head.
    pub fn layers(&self) -> Vec<&LayerParams> {
        self.feature_layers.iter().chain(&self.skip_reducers).chain(&self.upsample_layers).chain([&self.head]).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.feature_layers
            .iter_mut()
            .chain(&mut self.skip_reducers)
            .chain(&mut self.upsample_layers)
            .chain([&mut self.head])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    /// Records the network on `tape` for an input `(B, 2, H, W)` with `H`,
    /// `W` multiples of 8. Parameter leaves come back in [`Self::layers`]
    /// order, weights then bias.
    pub(crate) fn graph(&self, tape: &mut Tape, input: Var) -> Result<Graph> {
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, l: &LayerParams| {
            let w = tape.leaf(&l.weights);
            let b = tape.leaf(&l.bias);
            params.extend([w, b]);
            (w, b)
        };
        let f: Vec<_> = self.feature_layers.iter().map(|l| leaf(tape, l)).collect();
        let r: Vec<_> = self.skip_reducers.iter().map(|l| leaf(tape, l)).collect();
        let u: Vec<_> = self.upsample_layers.iter().map(|l| leaf(tape, l)).collect();
        let head = leaf(tape, &self.head);

        let conv_relu = |tape: &mut Tape, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.conv2d(x, w, b)?;
            Ok(tape.relu(y))
        };
        let c1 = conv_relu(tape, input, f[0])?;
        let c2 = conv_relu(tape, c1, f[1])?;
        let p1 = tape.avg_pool2(c2)?;
        let c3 = conv_relu(tape, p1, f[2])?;
        let c4 = conv_relu(tape, c3, f[3])?;
        let p2 = tape.avg_pool2(c4)?;
        let c5 = conv_relu(tape, p2, f[4])?;
        let c6 = conv_relu(tape, c5, f[5])?;
        let p3 = tape.avg_pool2(c6)?;

        let mut x = p3;
        for (deconv, (skip, reducer)) in u[..3].iter().zip([(p2, r[2]), (p1, r[1]), (c2, r[0])]) {
            let d = tape.conv_transpose2(x, deconv.0, deconv.1)?;
            let d = tape.relu(d);
            let s = tape.conv2d(skip, reducer.0, reducer.1)?;
            x = tape.add(d, s)?;
        }
        let z = tape.conv2d(x, u[3].0, u[3].1)?;
        let mask = tape.sigmoid(z);
        let total = tape.global_sum_pool(mask)?;
        let area = tape.dense(total, head.0, head.1)?;
        Ok(Graph { params, mask, area })
    }

    /// Soft masks and predicted areas for a batch of prepared inputs of one size.
    pub(crate) fn run(&self, inputs: &[&PreparedInput]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let (ph, pw) = (inputs[0].padded_height, inputs[0].padded_width);
        let data: Vec<f64> = inputs.iter().flat_map(|p| p.data.iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![inputs.len(), 2, ph, pw], data)?;
        let g = self.graph(&mut tape, x)?;
        let masks = tape.value(g.mask).chunks_exact(ph * pw).map(<[f64]>::to_vec).collect();
        Ok((masks, tape.value(g.area).to_vec()))
    }

    /// Runs the network on a stack whose sides are already multiples of 8.
    pub fn forward(&self, stack: &GridStack) -> Result<(SoftMask, f64)> {
        let (h, w) = stack.shape();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(NnError::Invalid { op: "forward", reason: format!("{h}x{w} is not padded to a multiple of 8") }.into());
        }
        let input = PreparedInput::new(stack, &self.normalization)?;
        let (masks, areas) = self.run(&[&input])?;
        let mask = SoftMask::from_probabilities(h, w, &masks[0])?.with_date(stack.acquisition_date);
        Ok((mask, areas[0]))
    }

    pub fn to_checkpoint(&self, adam: Option<AdamState>) -> Checkpoint {
        let layers = Self::layer_names().into_iter().zip(self.layers().into_iter().cloned()).collect();
        let metadata = serde_json::json!({
            "model": "fpgnn",
            "normalization": self.normalization,
            "input_shape": self.input_shape,
        });
        Checkpoint { layers, adam, metadata }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let corrupt = |m: String| FpgnnError::Checkpoint(CheckpointError::Corrupt(m));
        let names = Self::layer_names();
        if ckpt.layers.len() != names.len() || ckpt.layers.iter().zip(&names).any(|((a, _), b)| a != b) {
            return Err(corrupt("layer list does not describe this network".into()));
        }
        let template = Self::new(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        for ((_, l), t) in ckpt.layers.iter().zip(template.layers()) {
            if l.kind != t.kind || l.weights.shape() != t.weights.shape() || l.constraint != t.constraint {
                return Err(corrupt(format!("layer shape {:?} does not match {:?}", l.weights.shape(), t.weights.shape())));
            }
        }
        if ckpt.layers.last().map(|(_, l)| l.kind) != Some(LayerKind::Dense) {
            return Err(corrupt("missing dense head".into()));
        }
        let normalization = serde_json::from_value(ckpt.metadata["normalization"].clone())
            .map_err(|e| corrupt(format!("normalization: {e}")))?;
        let input_shape = serde_json::from_value(ckpt.metadata["input_shape"].clone())
            .map_err(|e| corrupt(format!("input_shape: {e}")))?;
        let mut it = ckpt.layers.iter().map(|(_, l)| l.clone());
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        Ok(Self {
            feature_layers: take(6),
            skip_reducers: take(3),
            upsample_layers: take(4),
            head: take(1).remove(0),
            normalization,
            input_shape,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_checkpoint(&self.to_checkpoint(None), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Soft water mask for one scene, at the scene's own size.
pub fn infer(model: &FpgnnModel, stack: &GridStack) -> Result<SoftMask> {
    let input = PreparedInput::new(stack, &model.normalization)?;
    if let Some((h, w)) = model.input_shape {
        if (input.padded_height, input.padded_width) != (h, w) {
            return Err(FpgnnError::ShapeMismatch { height: h, width: w, found_h: stack.height(), found_w: stack.width() });
        }
    }
    let (masks, _) = model.run(&[&input])?;
    Ok(SoftMask::from_probabilities(input.height, input.width, &input.crop(&masks[0]))?.with_date(stack.acquisition_date))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::raster::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(h: usize, w: usize, seed: u64) -> GridStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vv = Grid::from_fn(h, w, |_, _| rng.random_range(0.01..0.2));
        let vh = Grid::from_fn(h, w, |_, _| rng.random_range(0.002..0.05));
        GridStack::new(h, w).with_band(band::VV, vv).unwrap().with_band(band::VH, vh).unwrap()
    }

    #[test]
    fn constant_network() {
        let mut m = FpgnnModel::new(&mut ChaCha8Rng::seed_from_u64(0));
        for l in &mut m.upsample_layers {
            l.weights = Tensor::zeros(l.weights.shape().to_vec()).trainable();
        }
        for l in &mut m.skip_reducers {
            l.weights = Tensor::zeros(l.weights.shape().to_vec()).trainable();
        }
        let b = 0.4;
        m.upsample_layers[3].bias.data_mut()[0] = b;
        let wh = m.head.weights.data()[0];
        let (mask, area) = m.forward(&stack(16, 24, 1)).unwrap();
        let s = 1.0 / (1.0 + (-b).exp());
        assert!(mask.grid().values().iter().all(|&v| (v as f64 - s).abs() < 1e-6));
        assert!((area - wh * 16.0 * 24.0 * s).abs() < 1e-9);
    }

    #[test]
    fn forward_requires_padding_and_bands() {
        let m = FpgnnModel::new(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(m.forward(&stack(12, 16, 0)).is_err());
        let only_vv = GridStack::new(8, 8).with_band(band::VV, Grid::filled(8, 8, 0.1)).unwrap();
        assert!(matches!(m.forward(&only_vv), Err(FpgnnError::Raster(_))));
    }

    #[test]
    fn infer_crops_padding_and_is_pure() {
        let m = FpgnnModel::new(&mut ChaCha8Rng::seed_from_u64(2));
        let s = stack(13, 19, 4);
        let a = infer(&m, &s).unwrap();
        assert_eq!(a.shape(), (13, 19));
        assert!(a.grid().values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(infer(&m, &s).unwrap(), a);
    }

    #[test]
    fn infer_rejects_other_sizes() {
        let mut m = FpgnnModel::new(&mut ChaCha8Rng::seed_from_u64(2));
        m.input_shape = Some((16, 16));
        assert!(infer(&m, &stack(15, 16, 0)).is_ok());
        assert!(matches!(infer(&m, &stack(24, 16, 0)), Err(FpgnnError::ShapeMismatch { .. })));
    }

    #[test]
    fn all_nodata_input() {
        let m = FpgnnModel::new(&mut ChaCha8Rng::seed_from_u64(2));
        let g = Grid::filled(8, 8, -9999.0).with_nodata(Some(-9999.0));
        let s = GridStack::new(8, 8).with_band(band::VV, g.clone()).unwrap().with_band(band::VH, g).unwrap();
        assert!(matches!(infer(&m, &s), Err(FpgnnError::AllNodata)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = FpgnnModel::new(&mut ChaCha8Rng::seed_from_u64(5));
        m.normalization = Normalization { mean: [-12.5, -18.0], std: [3.0, 2.5] };
        m.input_shape = Some((64, 64));
        m.save(dir.path().join("model")).unwrap();
        assert_eq!(FpgnnModel::load(dir.path().join("model.json")).unwrap(), m);
    }

    #[test]
    fn normalization_fit() {
        let g = Grid::new(1, 2, vec![0.1, 1.0]).unwrap();
        let s = GridStack::new(1, 2).with_band(band::VV, g.clone()).unwrap().with_band(band::VH, g).unwrap();
        let n = Normalization::fit([&s]).unwrap();
        assert!((n.mean[0] + 5.0).abs() < 1e-6);
        assert!((n.std[1] - 5.0).abs() < 1e-6);
    }
}
