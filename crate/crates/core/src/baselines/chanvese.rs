use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::raster::Grid;

use super::{valid_pixels, BaselineError, Result};

const MAX_HALVINGS: usize = 30;
const MAX_STEP: f64 = 1e4;
/// Intensities are mapped onto an 8-bit range so `mu` has its usual scale.
const INTENSITY_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChanVeseConfig {
    pub mu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_iterations: usize,
    /// Relative energy change that ends the iteration.
    pub tolerance: f64,
    /// Width of the regularized Heaviside.
    pub epsilon: f64,
    /// Keeps the total-variation term differentiable at flat spots.
    pub eta: f64,
    pub initial_step: f64,
}

impl Default for ChanVeseConfig {
    fn default() -> Self {
        Self { mu: 0.25, lambda1: 1.0, lambda2: 1.0, max_iterations: 200, tolerance: 1e-4, epsilon: 1.0, eta: 1e-8, initial_step: 1.0 }
    }
}

impl ChanVeseConfig {
    fn validate(&self) -> Result<()> {
        let positive = [self.lambda1, self.lambda2, self.epsilon, self.eta, self.initial_step];
        if !(self.mu >= 0.0) || positive.iter().any(|v| !(*v > 0.0)) || !(self.tolerance >= 0.0) {
            return Err(BaselineError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChanVeseOutcome {
    pub mask: BinaryMask,
    /// Level set; the region `phi > 0` has mean `c1`.
    pub phi: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    /// Mean energy per pixel at the start and after every iteration.
    pub energies: Vec<f64>,
    pub iterations: usize,
}

fn heaviside(phi: f64, eps: f64) -> f64 {
    0.5 * (1.0 + 2.0 / PI * (phi / eps).atan())
}

fn dirac(phi: f64, eps: f64) -> f64 {
    eps / (PI * (eps * eps + phi * phi))
}

struct Problem<'a> {
    u: &'a [f64],
    weight: &'a [f64],
    h: usize,
    w: usize,
    cfg: &'a ChanVeseConfig,
}

impl Problem<'_> {
    fn forward_diffs(&self, hv: &[f64], i: usize) -> (f64, f64) {
        let (r, c) = (i / self.w, i % self.w);
        let dx = if c + 1 < self.w { hv[i + 1] - hv[i] } else { 0.0 };
        let dy = if r + 1 < self.h { hv[i + self.w] - hv[i] } else { 0.0 };
        (dx, dy)
    }

    fn energy(&self, phi: &[f64], c1: f64, c2: f64) -> f64 {
        let cfg = self.cfg;
        let hv: Vec<f64> = phi.iter().map(|&p| heaviside(p, cfg.epsilon)).collect();
        let mut e = 0.0;
        for i in 0..phi.len() {
            let (dx, dy) = self.forward_diffs(&hv, i);
            e += cfg.mu * (dx * dx + dy * dy + cfg.eta).sqrt();
            let u = self.u[i];
            e += self.weight[i] * (cfg.lambda1 * (u - c1).powi(2) * hv[i] + cfg.lambda2 * (u - c2).powi(2) * (1.0 - hv[i]));
        }
        e / phi.len() as f64
    }

    fn means(&self, phi: &[f64]) -> (f64, f64) {
        let (mut s1, mut n1, mut s2, mut n2) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..phi.len() {
            let hv = heaviside(phi[i], self.cfg.epsilon) * self.weight[i];
            let rest = self.weight[i] - hv;
            s1 += hv * self.u[i];
            n1 += hv;
            s2 += rest * self.u[i];
            n2 += rest;
        }
        (if n1 > 0.0 { s1 / n1 } else { 0.0 }, if n2 > 0.0 { s2 / n2 } else { 0.0 })
    }

    /// Gradient of the mean energy with respect to `phi`.
    fn gradient(&self, phi: &[f64], c1: f64, c2: f64) -> Vec<f64> {
        let cfg = self.cfg;
        let n = phi.len();
        let hv: Vec<f64> = phi.iter().map(|&p| heaviside(p, cfg.epsilon)).collect();
        let mut dh = vec![0.0; n];
        for i in 0..n {
            let (dx, dy) = self.forward_diffs(&hv, i);
            let t = (dx * dx + dy * dy + cfg.eta).sqrt();
            let (r, c) = (i / self.w, i % self.w);
            if c + 1 < self.w {
                dh[i + 1] += cfg.mu * dx / t;
                dh[i] -= cfg.mu * dx / t;
            }
            if r + 1 < self.h {
                dh[i + self.w] += cfg.mu * dy / t;
                dh[i] -= cfg.mu * dy / t;
            }
            let u = self.u[i];
            dh[i] += self.weight[i] * (cfg.lambda1 * (u - c1).powi(2) - cfg.lambda2 * (u - c2).powi(2));
        }
        dh.iter().zip(phi).map(|(g, &p)| g * dirac(p, cfg.epsilon) / n as f64).collect()
    }
}

/// Mean Chan-Vese energy of level set `phi` over the image `u` (row-major,
/// `height * width`) for fixed region means.
pub fn chan_vese_energy(u: &[f64], phi: &[f64], height: usize, width: usize, c1: f64, c2: f64, config: &ChanVeseConfig) -> f64 {
    let weight = vec![1.0; u.len()];
    Problem { u, weight: &weight, h: height, w: width, cfg: config }.energy(phi, c1, c2)
}

/// Two-phase piecewise-constant segmentation. The image is rescaled to
/// [0, 255], the level set starts as a checkerboard, and each iteration
/// recomputes the region means exactly and takes a backtracking gradient
/// step on the level set, so the energy never increases.
pub fn chan_vese_segment(grid: &Grid, config: &ChanVeseConfig) -> Result<ChanVeseOutcome> {
    config.validate()?;
    let px = valid_pixels(grid);
    if px.is_empty() {
        return Err(BaselineError::NoValidPixels);
    }
    let lo = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(BaselineError::ConstantImage);
    }
    let (h, w) = (grid.height(), grid.width());
    let mut u = vec![0.0; grid.len()];
    let mut weight = vec![0.0; grid.len()];
    for &(i, v) in &px {
        u[i] = INTENSITY_SCALE * (v - lo) / (hi - lo);
        weight[i] = 1.0;
    }
    let prob = Problem { u: &u, weight: &weight, h, w, cfg: config };
    let mut phi: Vec<f64> =
        (0..h * w).map(|i| (PI * (i / w) as f64 / 5.0).sin() * (PI * (i % w) as f64 / 5.0).sin()).collect();
    let (mut c1, mut c2) = prob.means(&phi);
    let mut e = prob.energy(&phi, c1, c2);
    let mut energies = vec![e];
    let mut step = config.initial_step;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let g = prob.gradient(&phi, c1, c2);
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            break;
        }
        // Dividing by the Dirac weight keeps the direction a descent one and
        // lets pixels far from the zero level move as fast as those near it.
        let g: Vec<f64> = g.iter().zip(&phi).map(|(d, &p)| d / dirac(p, config.epsilon)).collect();
        let scale = 1.0 / g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = phi.iter().zip(&g).map(|(p, d)| p - step * scale * d).collect();
            let ec = prob.energy(&cand, c1, c2);
            if ec <= e {
                accepted = Some((cand, ec));
                break;
            }
            step *= 0.5;
        }
        let Some((next, _)) = accepted else {
            break;
        };
        phi = next;
        (c1, c2) = prob.means(&phi);
        let next_e = prob.energy(&phi, c1, c2);
        let change = (e - next_e).abs() / e.abs().max(f64::MIN_POSITIVE);
        e = next_e;
        energies.push(e);
        step = (step * 2.0).min(MAX_STEP);
        if change < config.tolerance {
            break;
        }
    }
    let inside_is_water = c1 < c2;
    let mut out = vec![false; grid.len()];
    let mut counts = [0usize; 2];
    for &(i, _) in &px {
        let inside = phi[i] > 0.0;
        counts[inside as usize] += 1;
        out[i] = inside == inside_is_water;
    }
    if counts[0] == 0 || counts[1] == 0 {
        out.fill(false);
    }
    Ok(ChanVeseOutcome { mask: BinaryMask::new(h, w, out).expect("shape from grid"), phi, c1, c2, energies, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, radius: f64) -> Grid {
        let mid = n as f64 / 2.0;
        Grid::from_fn(n, n, |r, c| {
            let d = ((r as f64 + 0.5 - mid).powi(2) + (c as f64 + 0.5 - mid).powi(2)).sqrt();
            if d < radius { -20.0 } else { -8.0 }
        })
    }

    #[test]
    fn energy_never_increases() {
        let out = chan_vese_segment(&disk(32, 9.0), &ChanVeseConfig::default()).unwrap();
        assert!(out.energies.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{:?}", out.energies);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (h, w) = (5, 6);
        let u: Vec<f64> = (0..h * w).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let phi: Vec<f64> = (0..h * w).map(|i| ((i * 5) % 9) as f64 / 4.0 - 1.0).collect();
        let weight = vec![1.0; h * w];
        let cfg = ChanVeseConfig { eta: 1e-2, ..Default::default() };
        let p = Problem { u: &u, weight: &weight, h, w, cfg: &cfg };
        let g = p.gradient(&phi, 0.2, 0.7);
        for i in 0..h * w {
            let mut a = phi.clone();
            let mut b = phi.clone();
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (p.energy(&a, 0.2, 0.7) - p.energy(&b, 0.2, 0.7)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-7 + 1e-4 * fd.abs(), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn segments_a_disk() {
        let g = disk(32, 9.0);
        let out = chan_vese_segment(&g, &ChanVeseConfig::default()).unwrap();
        let truth = BinaryMask::from_fn(32, 32, |r, c| g.get(r, c) < -10.0);
        let inter = out.mask.and(&truth).count();
        let union = out.mask.count() + truth.count() - inter;
        assert!(inter as f64 / union as f64 >= 0.95, "{inter}/{union}");
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ChanVeseConfig { epsilon: 0.0, ..Default::default() };
        assert!(matches!(chan_vese_segment(&disk(8, 2.0), &cfg), Err(BaselineError::InvalidConfig(_))));
    }
}
