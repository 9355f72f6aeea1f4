use crate::mask::BinaryMask;
use crate::raster::Grid;

use super::{valid_pixels, BaselineError, Result};

pub const OTSU_BINS: usize = 256;
/// Beyond this many pixels the exact integer comparison could overflow.
const MAX_PIXELS: usize = 1 << 26;

/// The chosen histogram split: pixels in bins `< bin` form the low class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub bin: usize,
    pub min: f64,
    pub max: f64,
}

impl OtsuSplit {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / OTSU_BINS as f64
    }

    /// Histogram bin of `v`, clamped into `0..256`.
    pub fn bin_of(&self, v: f64) -> usize {
        (((v - self.min) / self.bin_width()) as usize).min(OTSU_BINS - 1)
    }

    /// Lower edge of the split bin.
    pub fn threshold(&self) -> f64 {
        self.min + self.bin as f64 * self.bin_width()
    }
}

/// `(hi, lo)` of the 192-bit product `a * b`.
fn widening_mul(a: u128, b: u64) -> (u128, u128) {
    let (ah, al) = (a >> 64, a & u64::MAX as u128);
    let lo = al * b as u128;
    let mid = ah * b as u128 + (lo >> 64);
    (mid >> 64, (mid << 64) | (lo & u64::MAX as u128))
}

/// Between-class variance for split `k` is proportional to
/// `(N*S0 - n0*S)^2 / (n0*n1)` with `S` sums of bin indices. Candidates
/// are compared by cross-multiplication, so the maximum is exact.
pub fn otsu_split(grid: &Grid) -> Result<OtsuSplit> {
    let px = valid_pixels(grid);
    if px.is_empty() {
        return Err(BaselineError::NoValidPixels);
    }
    if px.len() > MAX_PIXELS {
        return Err(BaselineError::TooLarge(px.len()));
    }
    let min = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(BaselineError::ConstantImage);
    }
    let mut split = OtsuSplit { bin: 0, min, max };
    let mut hist = [0u64; OTSU_BINS];
    for &(_, v) in &px {
        hist[split.bin_of(v)] += 1;
    }
    let n = px.len() as i128;
    let s: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c as i128).sum();
    let (mut n0, mut s0) = (0i128, 0i128);
    let mut best: Option<(u128, u64)> = None;
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1] as i128;
        s0 += (k as i128 - 1) * hist[k - 1] as i128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (n * s0 - n0 * s).unsigned_abs();
        let num = d * d;
        let den = (n0 * n1) as u64;
        let better = match best {
            None => true,
            Some((bn, bd)) => widening_mul(num, bd) > widening_mul(bn, den),
        };
        if better {
            best = Some((num, den));
            split.bin = k;
        }
    }
    Ok(split)
}

/// Threshold value (a histogram bin edge) maximizing between-class variance.
pub fn otsu_threshold(grid: &Grid) -> Result<f64> {
    Ok(otsu_split(grid)?.threshold())
}

/// Water wherever a pixel falls in a bin below the Otsu split.
pub fn otsu_segment(grid: &Grid) -> Result<BinaryMask> {
    let split = otsu_split(grid)?;
    let mut out = vec![false; grid.len()];
    for (i, v) in valid_pixels(grid) {
        out[i] = split.bin_of(v) < split.bin;
    }
    Ok(BinaryMask::new(grid.height(), grid.width(), out).expect("shape from grid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_value_image() {
        let g = Grid::from_fn(4, 4, |r, _| if r < 2 { 0.0 } else { 10.0 });
        let t = otsu_threshold(&g).unwrap();
        assert!(t > 0.0 && t < 10.0);
        let m = otsu_segment(&g).unwrap();
        assert!((0..4).all(|c| m.get(0, c) && m.get(1, c) && !m.get(2, c) && !m.get(3, c)));
    }

    #[test]
    fn ties_go_to_the_lowest_bin() {
        // Every split between the two values scores the same.
        let g = Grid::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(otsu_split(&g).unwrap().bin, 1);
    }

    #[test]
    fn inverted_contrast_keeps_water_low() {
        let g = Grid::from_fn(4, 4, |_, c| if c < 1 { -20.0 } else { -8.0 });
        let m = otsu_segment(&g).unwrap();
        assert_eq!(m.count(), 4);
        let flipped = g.map(|v| -28.0 - v);
        let m2 = otsu_segment(&flipped).unwrap();
        assert_eq!(m2.count(), 12);
    }

    #[test]
    fn constant_and_empty() {
        assert_eq!(otsu_threshold(&Grid::filled(3, 3, 2.0)), Err(BaselineError::ConstantImage));
        let nd = Grid::filled(2, 2, -1.0).with_nodata(Some(-1.0));
        assert_eq!(otsu_threshold(&nd), Err(BaselineError::NoValidPixels));
    }

    #[test]
    fn widening_mul_matches_small_products() {
        assert_eq!(widening_mul(3, 5), (0, 15));
        let (hi, lo) = widening_mul(u128::MAX, 2);
        assert_eq!((hi, lo), (1, u128::MAX - 1));
    }
}
