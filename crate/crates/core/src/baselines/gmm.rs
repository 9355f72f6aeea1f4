use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::raster::Grid;

use super::{valid_pixels, BaselineError, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const MAX_ITERS: usize = 200;
const LL_TOL: f64 = 1e-6;

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GmmParams {
    pub fn component_count(&self) -> usize {
        self.means.len()
    }

    /// `ln(pi_c) + ln N(x | mean_c, var_c)` for every component.
    fn log_joint(&self, x: f64, out: &mut [f64]) {
        for c in 0..self.component_count() {
            let var = self.variances[c];
            out[c] = self.weights[c].ln() - 0.5 * (std::f64::consts::TAU * var).ln() - (x - self.means[c]).powi(2) / (2.0 * var);
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Mean log-likelihood per sample, before the first update and after each iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
}

fn mean_log_likelihood(params: &GmmParams, xs: &[f64], buf: &mut [f64]) -> f64 {
    xs.iter()
        .map(|&x| {
            params.log_joint(x, buf);
            log_sum_exp(buf)
        })
        .sum::<f64>()
        / xs.len() as f64
}

/// Expectation-maximization from quantile-group starting means, until the
/// mean log-likelihood moves by less than 1e-6 or 200 iterations pass.
pub fn gmm_fit(xs: &[f64], components: usize) -> Result<GmmFit> {
    if components == 0 {
        return Err(BaselineError::InvalidConfig("component count must be positive".into()));
    }
    if xs.len() < components {
        return Err(BaselineError::NoValidPixels);
    }
    let n = xs.len();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut params = GmmParams { weights: vec![1.0 / components as f64; components], means: vec![], variances: vec![] };
    for c in 0..components {
        let group = &sorted[c * n / components..(c + 1) * n / components];
        let m = group.iter().sum::<f64>() / group.len() as f64;
        let v = group.iter().map(|x| (x - m).powi(2)).sum::<f64>() / group.len() as f64;
        params.means.push(m);
        params.variances.push(v.max(VARIANCE_FLOOR));
    }
    let mut buf = vec![0.0; components];
    let mut resp = vec![0.0; n * components];
    let mut lls = vec![mean_log_likelihood(&params, xs, &mut buf)];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        for (i, &x) in xs.iter().enumerate() {
            params.log_joint(x, &mut buf);
            let z = log_sum_exp(&buf);
            for c in 0..components {
                resp[i * components + c] = (buf[c] - z).exp();
            }
        }
        for c in 0..components {
            let nk: f64 = (0..n).map(|i| resp[i * components + c]).sum();
            if nk <= 0.0 {
                // Keep an emptied component where it is, with zero weight.
                params.weights[c] = 0.0;
                continue;
            }
            let mean = xs.iter().enumerate().map(|(i, x)| resp[i * components + c] * x).sum::<f64>() / nk;
            let var = xs.iter().enumerate().map(|(i, x)| resp[i * components + c] * (x - mean).powi(2)).sum::<f64>() / nk;
            params.weights[c] = nk / n as f64;
            params.means[c] = mean;
            params.variances[c] = var.max(VARIANCE_FLOOR);
        }
        let total: f64 = params.weights.iter().sum();
        for w in &mut params.weights {
            *w /= total;
        }
        iterations += 1;
        let ll = mean_log_likelihood(&params, xs, &mut buf);
        let prev = *lls.last().expect("initial value");
        lls.push(ll);
        if (ll - prev).abs() < LL_TOL {
            break;
        }
    }
    Ok(GmmFit { params, log_likelihoods: lls, iterations })
}

/// Labels each pixel with its most probable component; the lowest-mean
/// component is water.
pub fn gmm_segment(grid: &Grid, components: usize, _seed: u64) -> Result<(BinaryMask, GmmParams)> {
    let px = valid_pixels(grid);
    if px.is_empty() {
        return Err(BaselineError::NoValidPixels);
    }
    let xs: Vec<f64> = px.iter().map(|p| p.1).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(BaselineError::ConstantImage);
    }
    let fit = gmm_fit(&xs, components)?;
    let p = &fit.params;
    let water = (0..components).min_by(|&a, &b| p.means[a].total_cmp(&p.means[b])).expect("components > 0");
    let mut buf = vec![0.0; components];
    let mut out = vec![false; grid.len()];
    let mut labelled = [0usize; 2];
    for &(i, x) in &px {
        p.log_joint(x, &mut buf);
        let best = (0..components).fold(0, |b, c| if buf[c] > buf[b] { c } else { b });
        out[i] = best == water;
        labelled[out[i] as usize] += 1;
    }
    if labelled[0] == 0 || labelled[1] == 0 {
        out.fill(false);
    }
    Ok((BinaryMask::new(grid.height(), grid.width(), out).expect("shape from grid"), fit.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn recovers_two_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (Normal::new(-20.0, 1.0).unwrap(), Normal::new(-8.0, 1.0).unwrap());
        let mut xs: Vec<f64> = (0..5000).map(|_| a.sample(&mut rng)).collect();
        xs.extend((0..5000).map(|_| b.sample(&mut rng)));
        let fit = gmm_fit(&xs, 2).unwrap();
        let p = &fit.params;
        let (lo, hi) = if p.means[0] < p.means[1] { (0, 1) } else { (1, 0) };
        assert!((p.means[lo] + 20.0).abs() < 0.2 && (p.means[hi] + 8.0).abs() < 0.2);
        assert!((p.weights[0] - 0.5).abs() < 0.05);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(fit.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn identical_samples_hit_the_floor() {
        let fit = gmm_fit(&[3.0; 50], 2).unwrap();
        assert!(fit.params.variances.iter().all(|&v| v == VARIANCE_FLOOR));
        let g = Grid::filled(5, 10, 3.0);
        assert_eq!(gmm_segment(&g, 2, 0), Err(BaselineError::ConstantImage));
    }

    #[test]
    fn segment_bimodal_grid() {
        let g = Grid::from_fn(8, 8, |r, c| if c < 3 { -20.0 + 0.1 * r as f32 } else { -8.0 - 0.1 * r as f32 });
        let (m, _) = gmm_segment(&g, 2, 0).unwrap();
        assert!((0..8).all(|r| (0..8).all(|c| m.get(r, c) == (c < 3))));
    }
}
