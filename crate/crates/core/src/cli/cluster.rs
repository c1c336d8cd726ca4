//! k-means grouping of matrix columns by their (mean, variance).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::obs::ObsMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Group of every column.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Group centroids as (mean, variance) in data units.
    pub centroids: Vec<(f64, f64)>,
    pub iterations: usize,
}

/// Per-column (mean, population variance) of observed cells.
pub fn column_features(m: &ObsMatrix) -> Result<Vec<(f64, f64)>> {
    (0..m.columns.len())
        .map(|j| {
            let v: Vec<f64> = m.column(j).collect();
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("column `{}` has no observations", m.columns[j])));
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            Ok((mean, var))
        })
        .collect()
}

fn d2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

pub fn cluster_columns(m: &ObsMatrix, k: usize, seed: u64) -> Result<Clustering> {
    let feats = column_features(m)?;
    cluster_features(&feats, k, seed)
}

/// k-means++ seeding, then Lloyd iterations on standardized features.
pub fn cluster_features(feats: &[(f64, f64)], k: usize, seed: u64) -> Result<Clustering> {
    let mut distinct: Vec<(f64, f64)> = feats.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} but there are {} distinct feature points",
            distinct.len()
        )));
    }
    let n = feats.len() as f64;
    let stats = |f: fn(&(f64, f64)) -> f64| {
        let mean = feats.iter().map(f).sum::<f64>() / n;
        let sd = (feats.iter().map(|x| (f(x) - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, if sd > 0.0 { sd } else { 1.0 })
    };
    let (m0, s0) = stats(|x| x.0);
    let (m1, s1) = stats(|x| x.1);
    let pts: Vec<[f64; 2]> = feats.iter().map(|(a, b)| [(a - m0) / s0, (b - m1) / s1]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 2]> = vec![pts[rng.random_range(0..pts.len())]];
    let mut dist: Vec<f64> = pts.iter().map(|p| d2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = dist.iter().rposition(|d| *d > 0.0).unwrap();
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            unreachable!("k does not exceed the number of distinct points")
        };
        centers.push(pts[next]);
        for (d, p) in dist.iter_mut().zip(&pts) {
            *d = d.min(d2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignment = vec![usize::MAX; pts.len()];
    let mut iterations = 0;
    for _ in 0..300 {
        iterations += 1;
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| d2(p, &centers[a]).total_cmp(&d2(p, &centers[b])))
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignment) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            } else {
                // Re-seed an empty group at the point farthest from its center.
                let far = (0..pts.len())
                    .max_by(|&a, &b| {
                        d2(&pts[a], &centers[assignment[a]]).total_cmp(&d2(&pts[b], &centers[assignment[b]]))
                    })
                    .unwrap();
                centers[c] = pts[far];
                assignment[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes = vec![0usize; k];
    let mut raw = vec![(0.0, 0.0); k];
    for (f, &a) in feats.iter().zip(&assignment) {
        sizes[a] += 1;
        raw[a].0 += f.0;
        raw[a].1 += f.1;
    }
    let centroids = raw
        .iter()
        .zip(&sizes)
        .map(|((a, b), &s)| (a / s as f64, b / s as f64))
        .collect();
    Ok(Clustering {
        assignment,
        sizes,
        centroids,
        iterations,
    })
}
