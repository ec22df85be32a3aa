//! Class-conditional Gaussian latent priors.
//!
//! * `unvp`: fixed `μ_c = c · 1`, `Σ_c = I`.
//! * `eunvp`: learnable `μ_c = γ · G_m(c) + λ · H_m(n)` and
//!   `Σ_c = exp(G_std(c))`, where `n ~ N(0, I)` is redrawn for every training
//!   batch and set to zero at evaluation.
//!
//! Covariances are diagonal throughout.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{Array, Bound, Graph, ParamId, ParamStore, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Unvp,
    Eunvp,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unvp" => Ok(PriorMode::Unvp),
            "eunvp" => Ok(PriorMode::Eunvp),
            other => Err(Error::invalid(format!("unknown prior mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorMode::Unvp => "unvp",
            PriorMode::Eunvp => "eunvp",
        })
    }
}

/// Width of the hidden layer of the noise-shift map `H_m`.
pub const SHIFT_HIDDEN: usize = 32;

/// Learnable parts of an `eunvp` prior set.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPriors {
    /// `G_m`: one row per class.
    pub mean_table: ParamId,
    /// `G_std`: per-class log-variances.
    pub logvar_table: ParamId,
    /// `H_m`: noise → hidden (tanh) → latent shift.
    pub shift_hidden: Linear,
    pub shift_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPriorSet {
    pub mode: PriorMode,
    pub classes: usize,
    pub dim: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub noise_dim: usize,
    pub store: ParamStore,
    pub learned: Option<LearnedPriors>,
}

impl ClassPriorSet {
    pub fn unvp(classes: usize, dim: usize) -> Self {
        ClassPriorSet {
            mode: PriorMode::Unvp,
            classes,
            dim,
            gamma: 1.0,
            lambda: 0.0,
            noise_dim: 0,
            store: ParamStore::new(),
            learned: None,
        }
    }

    /// Learnable priors. `G_m` starts at the fixed `unvp` means, `G_std` at
    /// unit variance and `H_m` at zero output.
    pub fn eunvp<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        gamma: f64,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(gamma >= 0.0 && lambda >= 0.0) {
            return Err(Error::invalid("gamma and lambda must be non-negative"));
        }
        let noise_dim = dim.min(32);
        let mut store = ParamStore::new();
        let means: Vec<f64> = (0..classes)
            .flat_map(|c| std::iter::repeat(c as f64).take(dim))
            .collect();
        let mean_table = store.add("g_mean", Array::matrix(classes, dim, means)?);
        let logvar_table = store.add("g_logvar", Array::zeros(vec![classes, dim]));
        let shift_hidden = Linear::new(&mut store, "h_mean.hidden", noise_dim, SHIFT_HIDDEN, rng);
        let shift_out = Linear::zeros(&mut store, "h_mean.out", SHIFT_HIDDEN, dim);
        Ok(ClassPriorSet {
            mode: PriorMode::Eunvp,
            classes,
            dim,
            gamma,
            lambda,
            noise_dim,
            store,
            learned: Some(LearnedPriors {
                mean_table,
                logvar_table,
                shift_hidden,
                shift_out,
            }),
        })
    }

    pub fn check_class(&self, c: usize) -> Result<()> {
        if c < self.classes {
            Ok(())
        } else {
            Err(Error::UnknownClass {
                class: c,
                classes: self.classes,
            })
        }
    }

    /// Draws `n ~ N(0, I_{d_n})`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if self.mode != PriorMode::Eunvp {
            return Err(Error::invalid("noise is only defined for eunvp priors"));
        }
        Ok((0..self.noise_dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    /// Per-sample means `[n, d]` and log-variances `[n, d]` as graph nodes.
    ///
    /// `noise` is ignored in `unvp` mode; absent noise means `n = 0`.
    pub fn params_graph<'g>(
        &self,
        p: &Bound<'g>,
        g: &'g Graph,
        labels: &[usize],
        noise: Option<&[f64]>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        for &c in labels {
            self.check_class(c)?;
        }
        let n = labels.len();
        let d = self.dim;
        match &self.learned {
            None => {
                let mu: Vec<f64> = labels
                    .iter()
                    .flat_map(|&c| std::iter::repeat(c as f64).take(d))
                    .collect();
                Ok((
                    g.constant_from([n, d], mu),
                    g.constant_from([n, d], vec![0.0; n * d]),
                ))
            }
            Some(l) => {
                let zeros;
                let noise = match noise {
                    Some(v) => {
                        if v.len() != self.noise_dim {
                            return Err(Error::shape("prior noise", &[self.noise_dim], &[v.len()]));
                        }
                        v
                    }
                    None => {
                        zeros = vec![0.0; self.noise_dim];
                        &zeros
                    }
                };
                let means = p.get(l.mean_table).select_rows(labels).scale(self.gamma);
                let nv = g.constant_from([1, self.noise_dim], noise.to_vec());
                let shift = l
                    .shift_out
                    .forward(p, l.shift_hidden.forward(p, nv).tanh())
                    .reshape([d])
                    .scale(self.lambda);
                let mu = means.add_row(shift);
                let logvar = p.get(l.logvar_table).select_rows(labels);
                Ok((mu, logvar))
            }
        }
    }

    /// `(μ_c, diag Σ_c)` for one class.
    pub fn prior_params(&self, c: usize, noise: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_class(c)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let (mu, logvar) = self.params_graph(&p, &g, &[c], noise)?;
        Ok((mu.value(), logvar.value().iter().map(|v| v.exp()).collect()))
    }

    /// Per-sample `log N(z; μ_c, Σ_c)` on the graph; `z` is `[n, d]`.
    pub fn log_prob_graph<'g>(
        &self,
        p: &Bound<'g>,
        z: Var<'g>,
        labels: &[usize],
        noise: Option<&[f64]>,
    ) -> Result<Var<'g>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] != labels.len() {
            return Err(Error::shape("prior log_prob", &[labels.len(), self.dim], &shape));
        }
        let (mu, logvar) = self.params_graph(p, z.graph(), labels, noise)?;
        let quad = (z - mu).square() * logvar.neg().exp();
        Ok((quad + logvar)
            .sum_rows()
            .scale(-0.5)
            .offset(-0.5 * self.dim as f64 * LN_2PI))
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(z: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != var.len() {
        return Err(Error::shape("gaussian_log_prob", &[mu.len()], &[z.len()]));
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!("variance must be positive, got {v}")));
    }
    let mut acc = -0.5 * z.len() as f64 * (2.0 * PI).ln();
    for ((zi, mi), vi) in z.iter().zip(mu).zip(var) {
        acc -= 0.5 * ((zi - mi).powi(2) / vi + vi.ln());
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn unvp_means_are_class_times_ones() {
        let p = ClassPriorSet::unvp(4, 3);
        assert_eq!(p.prior_params(0, None).unwrap(), (vec![0.0; 3], vec![1.0; 3]));
        let p2 = ClassPriorSet::unvp(4, 2);
        assert_eq!(p2.prior_params(3, None).unwrap().0, vec![3.0, 3.0]);
    }

    #[test]
    fn class_out_of_range() {
        let p = ClassPriorSet::unvp(3, 2);
        assert!(matches!(p.prior_params(3, None), Err(Error::UnknownClass { .. })));
    }

    #[test]
    fn lambda_zero_ignores_noise() {
        let mut rng = stream(3, Stream::PriorInit, 0);
        let mut p = ClassPriorSet::eunvp(3, 4, 1.5, 0.0, &mut rng).unwrap();
        p.store.perturb(&mut rng, 0.5);
        let n1 = p.sample_noise(&mut rng).unwrap();
        let n2 = p.sample_noise(&mut rng).unwrap();
        let (m1, _) = p.prior_params(2, Some(&n1)).unwrap();
        let (m2, _) = p.prior_params(2, Some(&n2)).unwrap();
        assert_eq!(m1, m2);
        let table = p.store.get(p.learned.as_ref().unwrap().mean_table).row(2).to_vec();
        for (a, b) in m1.iter().zip(&table) {
            assert!((a - 1.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn eunvp_variances_positive_for_any_parameters() {
        let mut rng = stream(4, Stream::PriorInit, 0);
        let mut p = ClassPriorSet::eunvp(2, 3, 1.0, 0.1, &mut rng).unwrap();
        p.store.perturb(&mut rng, 20.0);
        for c in 0..2 {
            let (_, v) = p.prior_params(c, None).unwrap();
            assert!(v.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn noise_rejected_in_unvp() {
        let p = ClassPriorSet::unvp(2, 2);
        assert!(p.sample_noise(&mut stream(0, Stream::PriorNoise, 0)).is_err());
    }

    #[test]
    fn log_prob_closed_forms() {
        let lp = gaussian_log_prob(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
        let lp2 = gaussian_log_prob(&[2.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((lp2 - (lp - 0.5)).abs() < 1e-12);
        let wide = gaussian_log_prob(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[2.0; 3]).unwrap();
        let unit = gaussian_log_prob(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        assert!((unit - wide - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!(gaussian_log_prob(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn graph_log_prob_matches_closed_form() {
        let mut rng = stream(5, Stream::PriorInit, 0);
        let mut p = ClassPriorSet::eunvp(3, 2, 1.0, 0.1, &mut rng).unwrap();
        p.store.perturb(&mut rng, 0.3);
        let noise = p.sample_noise(&mut rng).unwrap();
        let z = Array::matrix(2, 2, vec![0.3, -0.7, 1.2, 2.5]).unwrap();
        let labels = [1, 2];
        let g = Graph::new();
        let b = p.store.bind_frozen(&g);
        let lp = p.log_prob_graph(&b, g.constant(&z), &labels, Some(&noise)).unwrap().value();
        for (i, &c) in labels.iter().enumerate() {
            let (mu, var) = p.prior_params(c, Some(&noise)).unwrap();
            let expect = gaussian_log_prob(z.row(i), &mu, &var).unwrap();
            assert!((lp[i] - expect).abs() < 1e-12);
        }
    }
}
