use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Array, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// First-order optimizer with per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Optimizer::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Optimizer::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub(crate) fn restore(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, step: u64) {
        self.first = first;
        self.second = second;
        self.step = step;
    }

    /// Applies one update to `params` from explicit gradients.
    ///
    /// Shapes are checked for every parameter before anything is modified.
    pub fn apply(&mut self, params: &mut [Array], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape("optimizer_step", p.shape(), &[g.len()]));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("optimizer_step received non-finite gradient"));
            }
        }
        if self.kind == OptimizerKind::Adam {
            if self.first.is_empty() {
                self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
                self.second = self.first.clone();
            } else if self.first.len() != params.len()
                || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
            {
                return Err(Error::shape(
                    "optimizer_step",
                    &self.first.iter().map(Vec::len).collect::<Vec<_>>(),
                    &params.iter().map(Array::len).collect::<Vec<_>>(),
                ));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.iter()).for_each(|(w, d)| *w -= lr * d);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let gj = g[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates a store from its accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let grads: Vec<Vec<f64>> = store
            .arrays()
            .iter()
            .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.apply(store.arrays_mut(), &refs)?;
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = vec![Array::vector(vec![1.0, -2.0])];
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.apply(&mut p, &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_rule() {
        let mut p = vec![Array::scalar(1.0)];
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.apply(&mut p, &[&[2.0]]).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut p = vec![Array::scalar(0.0)];
            let mut opt = Optimizer::adam(0.01).unwrap();
            opt.apply(&mut p, &[&[g]]).unwrap();
            // m_hat / sqrt(v_hat) = g / |g|, up to eps relative to |g|.
            let expected = -0.01 * g.signum();
            assert!((p[0].item() - expected).abs() < 1e-6, "g={g}: {}", p[0].item());
        }
    }

    #[test]
    fn shape_mismatch_rejected_without_update() {
        let mut p = vec![Array::vector(vec![1.0, 2.0])];
        let mut opt = Optimizer::adam(0.1).unwrap();
        assert!(opt.apply(&mut p, &[&[1.0]]).is_err());
        assert_eq!(p[0].data(), &[1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn non_positive_learning_rate_rejected() {
        assert!(Optimizer::sgd(0.0).is_err());
        assert!(Optimizer::adam(-1.0).is_err());
    }
}
