use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::NnError;

/// Mean and top-`k` principal directions of a data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` orthonormal directions, each of length `d`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each direction.
    pub variances: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Maps a `k`-vector of coordinates back into data space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        out
    }
}

/// Fits a PCA basis to the rows of `data` (n × d).
pub fn pca_fit(data: &[Vec<f64>], k: usize) -> Result<PcaBasis, NnError> {
    let n = data.len();
    if k == 0 || n < k {
        return Err(NnError::Invalid(format!(
            "pca needs n >= k >= 1, got n = {n}, k = {k}"
        )));
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d) {
        return Err(NnError::Shape("pca rows have differing lengths".into()));
    }
    if k > d {
        return Err(NnError::Invalid(format!("k = {k} exceeds dimension {d}")));
    }
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let col = eig.eigenvectors.column(idx);
        // Sign convention: largest-magnitude entry positive.
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.push(col.iter().map(|v| v * sign).collect());
        variances.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaBasis {
        mean,
        components,
        variances,
    })
}

/// Coordinates of `v` in the basis.
pub fn pca_project(basis: &PcaBasis, v: &[f64]) -> Result<Vec<f64>, NnError> {
    if v.len() != basis.dim() {
        return Err(NnError::Shape(format!(
            "vector has length {}, basis expects {}",
            v.len(),
            basis.dim()
        )));
    }
    Ok(basis
        .components
        .iter()
        .map(|c| {
            c.iter()
                .zip(v.iter().zip(&basis.mean))
                .map(|(ci, (x, m))| ci * (x - m))
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn line_in_3d_reconstructs_exactly() {
        let dir = [1.0, 2.0, -2.0];
        let data: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.7 - 3.0;
                vec![1.0 + t * dir[0], -0.5 + t * dir[1], 2.0 + t * dir[2]]
            })
            .collect();
        let b = pca_fit(&data, 1).unwrap();
        for row in &data {
            let rec = b.reconstruct(&pca_project(&b, row).unwrap());
            let err: f64 = rec.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(err < 1e-20, "{err}");
        }
    }

    #[test]
    fn full_rank_projection_preserves_centered_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                vec![
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ]
            })
            .collect();
        let b = pca_fit(&data, 2).unwrap();
        for row in &data {
            let p = pca_project(&b, row).unwrap();
            let n_in: f64 = row
                .iter()
                .zip(&b.mean)
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>()
                .sqrt();
            let n_out: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n_in - n_out).abs() < 1e-6);
        }
    }

    #[test]
    fn k_larger_than_dimension_is_rejected() {
        let data = vec![vec![1.0, 2.0]; 5];
        assert!(pca_fit(&data, 3).is_err());
        assert!(pca_fit(&data, 0).is_err());
    }
}
