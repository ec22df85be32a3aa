use crate::error::{Error, Result};
use crate::numeric::{Array, Bound, ParamId, ParamStore, Var};

/// Per-channel affine normalization `y = s ⊙ x + t` with `s = exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub initialized: bool,
    /// Position in the owning model, used in error messages.
    pub index: usize,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, index: usize) -> Self {
        ActNorm {
            log_scale: store.add(format!("{name}.log_scale"), Array::zeros(vec![dim])),
            bias: store.add(format!("{name}.bias"), Array::zeros(vec![dim])),
            dim,
            initialized: false,
            index,
        }
    }

    pub fn scale(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.log_scale).data().iter().map(|v| v.exp()).collect()
    }

    pub fn bias(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.bias).data().to_vec()
    }

    /// Data-dependent initialization: after it, `batch` maps to per-channel
    /// mean 0 and (population) standard deviation 1.
    pub fn initialize(&mut self, store: &mut ParamStore, batch: &Array) -> Result<()> {
        let n = batch.rows();
        if batch.cols() != self.dim {
            return Err(Error::shape("actnorm_init", &[n, self.dim], batch.shape()));
        }
        if n < 2 {
            return Err(Error::Degenerate(format!(
                "actnorm initialization needs at least 2 samples, got {n}"
            )));
        }
        let mut mean = vec![0.0; self.dim];
        for i in 0..n {
            mean.iter_mut().zip(batch.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; self.dim];
        for i in 0..n {
            for (j, x) in batch.row(i).iter().enumerate() {
                var[j] += (x - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        if let Some(j) = var.iter().position(|&v| !(v > 1e-24)) {
            return Err(Error::Degenerate(format!(
                "channel {j} has zero variance in the actnorm initialization batch"
            )));
        }
        let log_scale: Vec<f64> = var.iter().map(|v| -0.5 * v.ln()).collect();
        let bias: Vec<f64> = mean.iter().zip(&var).map(|(m, v)| -m / v.sqrt()).collect();
        store.set(self.log_scale, &log_scale)?;
        store.set(self.bias, &bias)?;
        self.initialized = true;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::Uninitialized(self.index))
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        self.check()?;
        let ls = p.get(self.log_scale);
        let y = x.mul_row(ls.exp()).add_row(p.get(self.bias));
        let n = x.shape()[0];
        Ok((y, ls.sum().expand(n)))
    }

    pub fn inverse(&self, store: &ParamStore, y: &Array) -> Result<Array> {
        self.check()?;
        let s = self.scale(store);
        let t = store.get(self.bias).data();
        let d = self.dim;
        let mut x = y.clone();
        for row in x.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - t[j]) / s[j];
            }
        }
        Ok(x)
    }

    #[cfg(test)]
    pub(crate) fn forward_values(&self, store: &ParamStore, x: &Array) -> Result<Array> {
        let g = crate::numeric::Graph::new();
        let p = store.bind_frozen(&g);
        let (y, _) = self.forward(&p, g.constant(x))?;
        Ok(y.to_array())
    }
}
