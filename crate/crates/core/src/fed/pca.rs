use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// One `[pc1, pc2]` per input vector.
    pub coords: Vec<[f64; 2]>,
    /// Variance captured by each component (population normalisation).
    pub explained: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalise(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its first nonzero coordinate is positive.
fn fix_sign(v: &mut [f64]) {
    if v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects the vectors onto their top two principal directions, found by
/// orthogonalised power iteration on the covariance.
pub fn pca_embed(vectors: &[&[f64]]) -> Result<Embedding> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, |v| v.len());
    if n == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("PCA needs equally sized, nonempty vectors".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(*v).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    // Covariance-vector product without forming the D×D matrix.
    let cov = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &centred {
            let s = dot(row, v) / n as f64;
            out.iter_mut().zip(row).for_each(|(o, r)| *o += s * r);
        }
        out
    };
    let mut rng = seed::rng(0x9ca);
    let mut basis: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let orthonormalise = |basis: &mut Vec<Vec<f64>>| {
        normalise(&mut basis[0]);
        let (a, b) = basis.split_at_mut(1);
        let p = dot(&a[0], &b[0]);
        b[0].iter_mut().zip(&a[0]).for_each(|(y, x)| *y -= p * x);
        normalise(&mut b[0]);
    };
    orthonormalise(&mut basis);
    for _ in 0..PCA_MAX_ITERS {
        let mut next: Vec<Vec<f64>> = basis.iter().map(|b| cov(b)).collect();
        orthonormalise(&mut next);
        for v in &mut next {
            fix_sign(v);
        }
        let change = next
            .iter()
            .zip(&basis)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        basis = next;
        if change < PCA_TOLERANCE {
            break;
        }
    }
    let explained = [dot(&basis[0], &cov(&basis[0])), dot(&basis[1], &cov(&basis[1]))];
    let coords = centred.iter().map(|r| [dot(r, &basis[0]), dot(r, &basis[1])]).collect();
    Ok(Embedding { coords, explained })
}
