//! Principal component analysis by symmetric eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Fitted PCA basis. `components` is row-major `out_dim × in_dim` with
/// orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    pub components: Vec<f32>,
    pub explained_variance: Vec<f32>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Eigenvalues below `EIG_RTOL * largest` are treated as zero when the basis
/// is built from the Gram matrix.
const EIG_RTOL: f64 = 1e-10;

/// Fit PCA to `samples` (all of equal length), keeping at most `max_dim`
/// components, clipped to `min(n - 1, in_dim)`.
///
/// Uses the `n × n` Gram matrix when samples are fewer than dimensions and
/// the `d × d` covariance otherwise. Components are sign-normalized so the
/// largest-magnitude entry is positive.
pub fn fit_pca(samples: &[Vec<f32>], max_dim: usize) -> Result<PcaModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: n });
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::dims(d, "ragged feature vectors"));
    }
    let out_dim = max_dim.min(n - 1).min(d);
    if out_dim == 0 {
        return Err(Error::InvalidConfig("PCA output dimension is zero".into()));
    }

    let mut mean = vec![0.0f64; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] as f64 - mean[j]);
    let denom = (n - 1) as f64;

    let (mut basis, mut variances) = if n <= d {
        let gram = &centered * centered.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut rows = Vec::with_capacity(out_dim);
        let mut vars = Vec::with_capacity(out_dim);
        for &idx in order.iter().take(out_dim) {
            let lambda = eig.eigenvalues[idx].max(0.0);
            if lambda <= EIG_RTOL * top || lambda == 0.0 {
                break;
            }
            // v = Xᵀu / sqrt((n-1) λ)
            let u = eig.eigenvectors.column(idx);
            let v = centered.transpose() * u / (denom * lambda).sqrt();
            rows.push(v.iter().copied().collect::<Vec<f64>>());
            vars.push(lambda);
        }
        complete_orthonormal(&mut rows, d, out_dim);
        vars.resize(out_dim, 0.0);
        (rows, vars)
    } else {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let rows = order
            .iter()
            .take(out_dim)
            .map(|&idx| eig.eigenvectors.column(idx).iter().copied().collect())
            .collect();
        let vars = order
            .iter()
            .take(out_dim)
            .map(|&idx| eig.eigenvalues[idx].max(0.0))
            .collect();
        (rows, vars)
    };

    for row in basis.iter_mut() {
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    // keep the reported spectrum monotone after clamping tiny negatives
    for i in 1..variances.len() {
        variances[i] = variances[i].min(variances[i - 1]);
    }

    Ok(PcaModel {
        mean: mean.iter().map(|&m| m as f32).collect(),
        components: basis.iter().flatten().map(|&v| v as f32).collect(),
        explained_variance: variances.iter().map(|&v| v as f32).collect(),
        in_dim: d,
        out_dim,
    })
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Extend `rows` to `target` orthonormal vectors by Gram-Schmidt against the
/// standard basis, for directions the data does not span.
fn complete_orthonormal(rows: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut e = 0;
    while rows.len() < target && e < dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for r in rows.iter() {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(x, &ri)| *x -= dot * ri);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
}

impl PcaModel {
    /// `components · (f - mean)`.
    pub fn project(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.in_dim {
            return Err(Error::dims(self.in_dim, features.len()));
        }
        let centered: Vec<f64> = features
            .iter()
            .zip(&self.mean)
            .map(|(&f, &m)| f as f64 - m as f64)
            .collect();
        Ok(self
            .components
            .chunks_exact(self.in_dim)
            .map(|row| {
                row.iter()
                    .zip(&centered)
                    .map(|(&c, &x)| c as f64 * x)
                    .sum::<f64>() as f32
            })
            .collect())
    }

    /// `mean + componentsᵀ · z`.
    pub fn reconstruct(&self, projected: &[f32]) -> Result<Vec<f32>> {
        if projected.len() != self.out_dim {
            return Err(Error::dims(self.out_dim, projected.len()));
        }
        let mut out: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (row, &z) in self.components.chunks_exact(self.in_dim).zip(projected) {
            for (o, &c) in out.iter_mut().zip(row) {
                *o += c as f64 * z as f64;
            }
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    pub fn component(&self, i: usize) -> &[f32] {
        &self.components[i * self.in_dim..(i + 1) * self.in_dim]
    }
}
