use crate::error::{Error, Result};
use crate::metrics::image::pearson;

/// `corr[i][j] = pearson(recon_i, truth_j)`; zero-variance vectors give 0.
pub fn correlation_matrix(recon: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if recon.len() != truth.len() {
        return Err(Error::dim("correlation_matrix", &[recon.len()], &[truth.len()]));
    }
    recon
        .iter()
        .map(|r| {
            truth
                .iter()
                .map(|t| {
                    if r.len() != t.len() {
                        return Err(Error::dim("correlation_matrix", &[r.len()], &[t.len()]));
                    }
                    Ok(pearson(r, t).unwrap_or(0.0))
                })
                .collect()
        })
        .collect()
}

/// Percentage of `(i, j != i)` pairs with `corr[i][i] > corr[i][j]`; ties score half.
pub fn two_way_from_correlations(corr: &[Vec<f64>]) -> Result<f64> {
    let n = corr.len();
    if n < 2 {
        return Err(Error::Data(format!("two-way identification needs at least 2 items, got {n}")));
    }
    let mut score = 0.0;
    for (i, row) in corr.iter().enumerate() {
        if row.len() != n {
            return Err(Error::dim("two_way", &[n, n], &[n, row.len()]));
        }
        for (j, &c) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            score += match row[i].partial_cmp(&c) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(100.0 * score / (n * (n - 1)) as f64)
}

pub fn two_way_identification(recon: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    two_way_from_correlations(&correlation_matrix(recon, truth)?)
}

/// Mean correlation distance `1 - pearson(recon_i, truth_i)`.
pub fn correlation_distance(recon: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if recon.len() != truth.len() || recon.is_empty() {
        return Err(Error::dim("correlation_distance", &[recon.len()], &[truth.len()]));
    }
    let mut total = 0.0;
    for (r, t) in recon.iter().zip(truth) {
        if r.len() != t.len() {
            return Err(Error::dim("correlation_distance", &[r.len()], &[t.len()]));
        }
        total += 1.0 - pearson(r, t).unwrap_or(0.0);
    }
    Ok((total / recon.len() as f64).max(0.0))
}
