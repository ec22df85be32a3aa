use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::{Array, Bound, ParamId, ParamStore, Var, GATHER_ZERO};

/// Invertible linear channel mixing `y = W x`, the vector analogue of an
/// invertible 1×1 convolution.
///
/// `W = P · L · (U + diag(sign ⊙ exp(log_diag)))` with `P` a fixed permutation,
/// `L` unit lower-triangular and `U` strictly upper-triangular. The
/// log-determinant is `Σ log_diag`, and `|det W| > 0` for any parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mix {
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_diag: ParamId,
    pub sign: Vec<f64>,
    /// Row `i` of `P` has its one in column `perm[i]`.
    pub perm: Vec<usize>,
    pub dim: usize,
}

impl Mix {
    /// Identity initialization.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Mix {
            lower: store.add(format!("{name}.lower"), Array::zeros(vec![dim, dim])),
            upper: store.add(format!("{name}.upper"), Array::zeros(vec![dim, dim])),
            log_diag: store.add(format!("{name}.log_diag"), Array::zeros(vec![dim])),
            sign: vec![1.0; dim],
            perm: (0..dim).collect(),
            dim,
        }
    }

    fn masks(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut lower = vec![0.0; d * d];
        let mut upper = vec![0.0; d * d];
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lower[i * d + j] = 1.0;
                } else if j > i {
                    upper[i * d + j] = 1.0;
                } else {
                    eye[i * d + j] = 1.0;
                }
            }
        }
        (lower, upper, eye)
    }

    /// The mixing matrix as a graph node.
    pub fn weight<'g>(&self, p: &Bound<'g>) -> Var<'g> {
        let d = self.dim;
        let g = p.get(self.lower).graph();
        let (lm, um, eye) = self.masks();
        let l = p.get(self.lower).mul(g.constant_from([d, d], lm)) + g.constant_from([d, d], eye);
        let diag_index: Rc<[u32]> = (0..d * d)
            .map(|k| if k / d == k % d { (k / d) as u32 } else { GATHER_ZERO })
            .collect::<Vec<_>>()
            .into();
        let diag = p
            .get(self.log_diag)
            .exp()
            .mul(g.constant_from([d], self.sign.clone()))
            .gather(diag_index, [d, d]);
        let u = p.get(self.upper).mul(g.constant_from([d, d], um)) + diag;
        let lu = l.matmul(u);
        if self.perm.iter().enumerate().all(|(i, &p)| i == p) {
            lu
        } else {
            lu.select_rows(&self.perm)
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let n = x.shape()[0];
        let y = x.matmul(self.weight(p).t());
        Ok((y, p.get(self.log_diag).sum().expand(n)))
    }

    pub fn inverse(&self, store: &ParamStore, y: &Array) -> Result<Array> {
        let d = self.dim;
        if y.cols() != d {
            return Err(Error::shape("mix_inverse", &[y.rows(), d], y.shape()));
        }
        let lower = store.get(self.lower).data();
        let upper = store.get(self.upper).data();
        let diag: Vec<f64> = store
            .get(self.log_diag)
            .data()
            .iter()
            .zip(&self.sign)
            .map(|(l, s)| s * l.exp())
            .collect();
        let mut out = Vec::with_capacity(y.len());
        let mut v = vec![0.0; d];
        for row in y.data().chunks(d) {
            // Pᵀ y
            for i in 0..d {
                v[self.perm[i]] = row[i];
            }
            // L w = v (unit diagonal)
            for i in 0..d {
                let mut s = v[i];
                for j in 0..i {
                    s -= lower[i * d + j] * v[j];
                }
                v[i] = s;
            }
            // (U + D) x = w
            for i in (0..d).rev() {
                let mut s = v[i];
                for j in i + 1..d {
                    s -= upper[i * d + j] * v[j];
                }
                v[i] = s / diag[i];
            }
            out.extend_from_slice(&v);
        }
        Array::new(y.shape().to_vec(), out)
    }
}
