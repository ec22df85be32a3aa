use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Array, Var};

/// Lower bound applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian fitted to a set of latent codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, count: usize) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("GaussianSummary", &[mean.len()], &[var.len()]));
        }
        if count == 0 {
            return Err(Error::invalid("a Gaussian summary needs a positive count"));
        }
        let var = var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
        Ok(GaussianSummary { mean, var, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Empirical mean and population variance (floored) of the rows of `latents`.
pub fn fit_gaussian(latents: &Array) -> Result<GaussianSummary> {
    if latents.shape().len() != 2 {
        return Err(Error::shape("fit_gaussian", &[0, 0], latents.shape()));
    }
    let (n, d) = (latents.rows(), latents.cols());
    if n == 0 {
        return Err(Error::invalid("cannot fit a Gaussian to zero latents"));
    }
    let mut mean = vec![0.0; d];
    for row in latents.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in latents.data().chunks(d) {
        var.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    GaussianSummary::new(mean, var, n)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `‖μa − μb‖² + Σᵢ (√σa,i − √σb,i)²`.
pub fn bures_cost_sq(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("bures_cost", &[a.dim()], &[b.dim()]));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let cov: f64 = a
        .var
        .iter()
        .zip(&b.var)
        .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
        .sum();
    Ok(mean + cov)
}

pub fn bures_cost(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    Ok(bures_cost_sq(a, b)?.sqrt())
}

/// Graph form of `bures_cost_sq(fit_gaussian(z), target)` for `z: [n, d]`.
///
/// With `with_variance = false` only the mean term is kept.
pub(crate) fn bures_sq_graph<'g>(z: Var<'g>, target: &GaussianSummary, with_variance: bool) -> Result<Var<'g>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != target.dim() {
        return Err(Error::shape("bures_cost", &[0, target.dim()], &shape));
    }
    let g = z.graph();
    let d = target.dim();
    let mean = z.mean_cols();
    let mu = g.constant_from([d], target.mean.clone());
    let mean_term = (mean - mu).square().sum();
    if !with_variance {
        return Ok(mean_term);
    }
    let centered = z.add_row(mean.neg());
    let var = centered.square().mean_cols().clamp_min(VARIANCE_FLOOR);
    let sd = g.constant_from([d], target.var.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
    Ok(mean_term + (var.sqrt() - sd).square().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Graph;

    fn summary(mean: &[f64], var: &[f64]) -> GaussianSummary {
        GaussianSummary::new(mean.to_vec(), var.to_vec(), 1).unwrap()
    }

    #[test]
    fn single_point_gets_floor() {
        let s = fit_gaussian(&Array::matrix(1, 2, vec![3.0, -1.0]).unwrap()).unwrap();
        assert_eq!(s.mean, vec![3.0, -1.0]);
        assert_eq!(s.var, vec![VARIANCE_FLOOR; 2]);
        assert_eq!(s.count, 1);
    }

    #[test]
    fn two_points_population_variance() {
        let s = fit_gaussian(&Array::matrix(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.var, vec![1.0, VARIANCE_FLOOR]);
    }

    #[test]
    fn empty_rejected() {
        assert!(fit_gaussian(&Array::zeros(vec![0, 3])).is_err());
    }

    #[test]
    fn closed_form_cases() {
        let a = summary(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(bures_cost(&a, &a).unwrap(), 0.0);
        assert_eq!(bures_cost(&a, &summary(&[3.0, 4.0], &[1.0, 1.0])).unwrap(), 5.0);
        assert_eq!(bures_cost_sq(&summary(&[0.0, 0.0], &[4.0, 9.0]), &a).unwrap(), 5.0);
        assert!(bures_cost(&a, &summary(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn graph_form_matches_direct() {
        let z = Array::matrix(3, 2, vec![0.1, 2.0, -0.4, 1.0, 0.9, 0.5]).unwrap();
        let target = summary(&[0.3, -0.2], &[0.5, 2.0]);
        let direct = bures_cost_sq(&fit_gaussian(&z).unwrap(), &target).unwrap();
        let g = Graph::new();
        let v = bures_sq_graph(g.constant(&z), &target, true).unwrap().item();
        assert!((v - direct).abs() < 1e-12);
    }
}
