use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ResidualNet;
use crate::numeric::{Array, Bound, Graph, ParamStore, Var};

/// Bound on the log-scale produced by `S`: raw outputs pass through
/// `c · tanh(s / c)`.
pub const SCALE_CLAMP: f64 = 2.0;

/// Affine coupling block
/// `y = b ⊙ x + (1 − b) ⊙ [x ⊙ exp(S(b ⊙ x)) + T(b ⊙ x)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    /// Binary mask `b`; ones pass through unchanged and condition `S`, `T`.
    pub mask: Vec<f64>,
    pub scale_net: ResidualNet,
    pub shift_net: ResidualNet,
    pub dim: usize,
}

impl Coupling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mask: Vec<f64>,
        hidden: usize,
        residual_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("coupling mask must be binary"));
        }
        let dim = mask.len();
        let scale_net = ResidualNet::new(
            store,
            &format!("{name}.s"),
            dim,
            hidden,
            dim,
            residual_blocks,
            rng,
        );
        let shift_net = ResidualNet::new(
            store,
            &format!("{name}.t"),
            dim,
            hidden,
            dim,
            residual_blocks,
            rng,
        );
        Ok(Coupling {
            mask,
            scale_net,
            shift_net,
            dim,
        })
    }

    fn complement(&self) -> Vec<f64> {
        self.mask.iter().map(|m| 1.0 - m).collect()
    }

    /// Clamped log-scale and shift for conditioning input `xb = b ⊙ x`, both
    /// zeroed on masked coordinates.
    fn scale_shift<'g>(&self, p: &Bound<'g>, xb: Var<'g>) -> (Var<'g>, Var<'g>) {
        let g = xb.graph();
        let inv = g.constant_from([self.dim], self.complement());
        let s = self
            .scale_net
            .forward(p, xb)
            .scale(1.0 / SCALE_CLAMP)
            .tanh()
            .scale(SCALE_CLAMP)
            .mul_row(inv);
        let t = self.shift_net.forward(p, xb).mul_row(inv);
        (s, t)
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("coupling", &[0, self.dim], shape));
        }
        Ok(())
    }

    /// Returns `y` and the per-sample log-determinant `Σ_{b=0} S(b ⊙ x)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        self.check(&x.shape())?;
        let g = x.graph();
        let mask = g.constant_from([self.dim], self.mask.clone());
        let inv = g.constant_from([self.dim], self.complement());
        let xb = x.mul_row(mask);
        let (s, t) = self.scale_shift(p, xb);
        let y = xb + (x * s.exp() + t).mul_row(inv);
        Ok((y, s.sum_rows()))
    }

    /// Exact inverse `x = b ⊙ y + (1 − b) ⊙ [(y − T(b ⊙ y)) ⊙ exp(−S(b ⊙ y))]`.
    pub fn inverse(&self, store: &ParamStore, y: &Array) -> Result<Array> {
        self.check(y.shape())?;
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let yv = g.constant(y);
        let mask = g.constant_from([self.dim], self.mask.clone());
        let inv = g.constant_from([self.dim], self.complement());
        let yb = yv.mul_row(mask);
        let (s, t) = self.scale_shift(&p, yb);
        let x = yb + ((yv - t) * s.neg().exp()).mul_row(inv);
        g.check_finite()?;
        Ok(x.to_array())
    }
}
