use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::raster::Grid;

use super::{orient, valid_pixels, BaselineError, Result};

const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    /// Pixels drawn for the graph; the rest copy their nearest sample's label.
    pub sample_count: usize,
    pub knn_k: usize,
    /// Gaussian kernel width. `None` uses the median distance to the k-th neighbour.
    pub sigma: Option<f64>,
    /// Scale of the row/column features relative to z-scored intensity.
    pub spatial_weight: f64,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { sample_count: 400, knn_k: 20, sigma: None, spatial_weight: 0.25, seed: 0 }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Symmetric k-nearest-neighbour affinities `exp(-d^2 / (2 sigma^2))`,
/// plus the edges of a Euclidean minimum spanning tree so the graph is
/// connected. Returns the row-major `n x n` matrix and the sigma used.
pub fn affinity_matrix(points: &[Vec<f64>], k: usize, sigma: Option<f64>) -> Result<(Vec<f64>, f64)> {
    let n = points.len();
    if n < 2 || k == 0 {
        return Err(BaselineError::InvalidConfig(format!("need at least 2 points and k > 0, got {n} points, k = {k}")));
    }
    if sigma.is_some_and(|s| !(s > 0.0)) {
        return Err(BaselineError::InvalidConfig("sigma must be positive".into()));
    }
    let k = k.min(n - 1);
    let d2: Vec<f64> = (0..n * n).map(|ij| dist2(&points[ij / n], &points[ij % n])).collect();
    let mut neighbours = Vec::with_capacity(n);
    let mut kth = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d2[i * n + a].total_cmp(&d2[i * n + b]));
        order.truncate(k);
        kth.push(d2[i * n + order[k - 1]].sqrt());
        neighbours.push(order);
    }
    let sigma = match sigma {
        Some(s) => s,
        None => {
            kth.sort_by(f64::total_cmp);
            let m = kth[n / 2];
            if m > 0.0 { m } else { 1.0 }
        }
    };
    let weight = |d2: f64| (-d2 / (2.0 * sigma * sigma)).exp().max(WEIGHT_FLOOR);
    let mut w = vec![0.0; n * n];
    for (i, nb) in neighbours.iter().enumerate() {
        for &j in nb {
            w[i * n + j] = weight(d2[i * n + j]);
            w[j * n + i] = w[i * n + j];
        }
    }
    // Prim's algorithm on the complete graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    best[0].0 = 0.0;
    for _ in 0..n {
        let u = (0..n).filter(|&v| !in_tree[v]).min_by(|&a, &b| best[a].0.total_cmp(&best[b].0)).expect("vertex left");
        in_tree[u] = true;
        if u != 0 {
            let p = best[u].1;
            w[u * n + p] = weight(d2[u * n + p]);
            w[p * n + u] = w[u * n + p];
        }
        for v in 0..n {
            if !in_tree[v] && d2[u * n + v] < best[v].0 {
                best[v] = (d2[u * n + v], u);
            }
        }
    }
    Ok((w, sigma))
}

/// Normalized cut `cut(A,B)/assoc(A,V) + cut(A,B)/assoc(B,V)` of the
/// partition `labels` under affinities `w`. Infinite if a side is empty.
pub fn ncut(w: &[f64], labels: &[bool]) -> f64 {
    let n = labels.len();
    let (mut cut, mut assoc) = (0.0, [0.0; 2]);
    for i in 0..n {
        for j in 0..n {
            let wij = w[i * n + j];
            assoc[labels[i] as usize] += wij;
            if labels[i] && !labels[j] {
                cut += wij;
            }
        }
    }
    if assoc[0] == 0.0 || assoc[1] == 0.0 || labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return f64::INFINITY;
    }
    cut / assoc[0] + cut / assoc[1]
}

/// Fiedler-vector bipartition of the graph `w` (row-major, `n x n`): the
/// second eigenvector of the symmetric normalized Laplacian, mapped back by
/// `D^{-1/2}`, is sorted and the prefix with the lowest normalized cut wins.
pub fn spectral_bipartition(w: &[f64], n: usize) -> Vec<bool> {
    assert_eq!(w.len(), n * n, "affinity matrix must be n x n");
    if n < 2 {
        return vec![false; n];
    }
    let deg: Vec<f64> = (0..n).map(|i| w[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { d.powf(-0.5) } else { 0.0 }).collect();
    let lap = DMatrix::from_fn(n, n, |i, j| (if i == j { 1.0 } else { 0.0 }) - inv_sqrt[i] * w[i * n + j] * inv_sqrt[j]);
    let eig = SymmetricEigen::new(lap);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let v = eig.eigenvectors.column(idx[1]);
    let u: Vec<f64> = (0..n).map(|i| v[i] * inv_sqrt[i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]));

    // Incremental sweep: moving vertex x to side A changes the cut by
    // deg(x) - 2 * w(x, A).
    let total: f64 = deg.iter().sum();
    let mut in_a = vec![false; n];
    let (mut cut, mut assoc_a) = (0.0, 0.0);
    let mut best = (f64::INFINITY, 0usize);
    for (pos, &x) in order.iter().enumerate().take(n - 1) {
        let to_a: f64 = (0..n).filter(|&j| in_a[j]).map(|j| w[x * n + j]).sum();
        cut += deg[x] - 2.0 * to_a;
        assoc_a += deg[x];
        in_a[x] = true;
        let assoc_b = total - assoc_a;
        let score = if assoc_a > 0.0 && assoc_b > 0.0 { cut / assoc_a + cut / assoc_b } else { f64::INFINITY };
        if score < best.0 {
            best = (score, pos + 1);
        }
    }
    let mut labels = vec![false; n];
    for &x in &order[..best.1.max(1)] {
        labels[x] = true;
    }
    labels
}

/// Spectral bipartition of a pixel sample in (standardized intensity,
/// row / height, column / width) space; every pixel takes the label of its
/// nearest sample.
pub fn spectral_segment(grid: &Grid, config: &SpectralConfig) -> Result<BinaryMask> {
    if config.sample_count < 2 || config.knn_k == 0 || !(config.spatial_weight >= 0.0) {
        return Err(BaselineError::InvalidConfig(format!("{config:?}")));
    }
    let px = valid_pixels(grid);
    if px.is_empty() {
        return Err(BaselineError::NoValidPixels);
    }
    let n = px.len() as f64;
    let mean = px.iter().map(|p| p.1).sum::<f64>() / n;
    let std = (px.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(BaselineError::ConstantImage);
    }
    let (h, w) = (grid.height() as f64, grid.width() as f64);
    let width = grid.width();
    let sw = config.spatial_weight;
    let feature =
        |&(i, v): &(usize, f64)| vec![(v - mean) / std, sw * (i / width) as f64 / h, sw * (i % width) as f64 / w];
    let features: Vec<Vec<f64>> = px.iter().map(feature).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.sample_count.min(px.len());
    let mut sample = rand::seq::index::sample(&mut rng, px.len(), m).into_vec();
    sample.sort_unstable();
    let points: Vec<Vec<f64>> = sample.iter().map(|&s| features[s].clone()).collect();
    let (aff, _) = affinity_matrix(&points, config.knn_k, config.sigma)?;
    let sample_labels = spectral_bipartition(&aff, m);

    let labels: Vec<bool> = features
        .iter()
        .map(|f| {
            let nearest = (0..m).min_by(|&a, &b| dist2(f, &points[a]).total_cmp(&dist2(f, &points[b]))).expect("m >= 1");
            sample_labels[nearest]
        })
        .collect();
    Ok(orient(grid, &px, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_force_min(w: &[f64], n: usize) -> f64 {
        (1..(1u32 << n) - 1)
            .map(|bits| ncut(w, &(0..n).map(|i| bits >> i & 1 == 1).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min)
    }

    fn blobs(rng: &mut ChaCha8Rng, sizes: (usize, usize)) -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for (k, centre) in [(sizes.0, 0.0), (sizes.1, 10.0)] {
            for _ in 0..k {
                pts.push(vec![centre + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
            }
        }
        pts
    }

    #[test]
    fn matches_brute_force_on_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (a, b) in [(3, 3), (4, 6), (5, 7), (2, 9)] {
            let pts = blobs(&mut rng, (a, b));
            let n = pts.len();
            let (w, _) = affinity_matrix(&pts, 3, None).unwrap();
            let labels = spectral_bipartition(&w, n);
            let best = brute_force_min(&w, n);
            let got = ncut(&w, &labels);
            assert!((got - best).abs() <= 1e-9 * best.max(1e-300) + 1e-300, "{a}+{b}: {got} vs {best}");
            assert!(labels[..a].iter().all(|&l| l == labels[0]) && labels[a..].iter().all(|&l| l != labels[0]));
        }
    }

    #[test]
    fn affinity_is_symmetric_and_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = blobs(&mut rng, (5, 5));
        let (w, sigma) = affinity_matrix(&pts, 2, None).unwrap();
        assert!(sigma > 0.0);
        let n = pts.len();
        for i in 0..n {
            assert_eq!(w[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(w[i * n + j], w[j * n + i]);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            if !std::mem::replace(&mut seen[i], true) {
                stack.extend((0..n).filter(|&j| w[i * n + j] > 0.0));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn ncut_of_trivial_partition_is_infinite() {
        let w = vec![0.0, 1.0, 1.0, 0.0];
        assert!(ncut(&w, &[true, true]).is_infinite());
        assert!((ncut(&w, &[true, false]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn segments_a_two_region_grid() {
        let g = Grid::from_fn(20, 20, |r, c| if c < 7 { -20.0 + 0.05 * r as f32 } else { -8.0 + 0.05 * c as f32 });
        let m = spectral_segment(&g, &SpectralConfig { sample_count: 150, seed: 1, ..Default::default() }).unwrap();
        let wrong = (0..20).flat_map(|r| (0..20).map(move |c| (r, c))).filter(|&(r, c)| m.get(r, c) != (c < 7)).count();
        assert!(wrong <= 4, "{wrong} pixels wrong");
    }
}
