use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ActNorm, Coupling, Mix};
use crate::numeric::{Array, Bound, Graph, ParamStore, Var};
use crate::priors::ClassPriorSet;

/// How coupling masks are laid out over the input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MaskLayout {
    /// First half of the coordinates vs. second half.
    Half,
    /// Checkerboard over a `height × width` single-channel image.
    Checkerboard { height: usize, width: usize },
}

impl MaskLayout {
    /// Mask for coupling number `step`; consecutive steps alternate `b` and `1 − b`.
    pub fn mask(&self, dim: usize, step: usize) -> Vec<f64> {
        let base: Vec<f64> = match *self {
            MaskLayout::Half => (0..dim).map(|i| if i < dim / 2 { 1.0 } else { 0.0 }).collect(),
            MaskLayout::Checkerboard { width, .. } => (0..dim)
                .map(|i| if (i / width + i % width) % 2 == 0 { 1.0 } else { 0.0 })
                .collect(),
        };
        if step % 2 == 0 {
            base
        } else {
            base.into_iter().map(|b| 1.0 - b).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Number of actnorm → mix → coupling steps.
    pub depth: usize,
    pub hidden: usize,
    pub residual_blocks: usize,
    pub mask: MaskLayout,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            depth: 8,
            hidden: 64,
            residual_blocks: 3,
            mask: MaskLayout::Half,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowBlock {
    ActNorm(ActNorm),
    Mix(Mix),
    Coupling(Coupling),
}

impl FlowBlock {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowBlock::ActNorm(_) => "actnorm",
            FlowBlock::Mix(_) => "mix",
            FlowBlock::Coupling(_) => "coupling",
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        match self {
            FlowBlock::ActNorm(b) => b.forward(p, x),
            FlowBlock::Mix(b) => b.forward(p, x),
            FlowBlock::Coupling(b) => b.forward(p, x),
        }
    }

    pub fn inverse(&self, store: &ParamStore, y: &Array) -> Result<Array> {
        match self {
            FlowBlock::ActNorm(b) => b.inverse(store, y),
            FlowBlock::Mix(b) => b.inverse(store, y),
            FlowBlock::Coupling(b) => b.inverse(store, y),
        }
    }
}

/// Invertible map `F = f_1 ∘ … ∘ f_N` from model-space inputs to latents of
/// the same dimension.
///
/// `input_logdet` is the constant log-determinant of the preprocessing map
/// that produced the model-space inputs; it is added to every forward
/// log-determinant so likelihoods refer to the original data scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub dim: usize,
    pub config: FlowConfig,
    pub blocks: Vec<FlowBlock>,
    pub store: ParamStore,
    pub input_logdet: f64,
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, config: FlowConfig, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("flows need at least two input coordinates"));
        }
        if let MaskLayout::Checkerboard { height, width } = config.mask {
            if height * width != dim {
                return Err(Error::invalid(format!(
                    "checkerboard {height}x{width} does not cover {dim} coordinates"
                )));
            }
        }
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(3 * config.depth);
        for step in 0..config.depth {
            blocks.push(FlowBlock::ActNorm(ActNorm::new(
                &mut store,
                &format!("step{step}.actnorm"),
                dim,
                blocks.len(),
            )));
            blocks.push(FlowBlock::Mix(Mix::new(&mut store, &format!("step{step}.mix"), dim)));
            blocks.push(FlowBlock::Coupling(Coupling::new(
                &mut store,
                &format!("step{step}.coupling"),
                config.mask.mask(dim, step),
                config.hidden,
                config.residual_blocks,
                rng,
            )?));
        }
        Ok(FlowModel {
            dim,
            config,
            blocks,
            store,
            input_logdet: 0.0,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks.iter().all(|b| match b {
            FlowBlock::ActNorm(a) => a.initialized,
            _ => true,
        })
    }

    /// Data-dependent actnorm initialization, block by block, on the
    /// activations `batch` produces at each actnorm.
    pub fn initialize(&mut self, batch: &Array) -> Result<()> {
        self.check_input(batch.shape())?;
        let mut h = batch.clone();
        for i in 0..self.blocks.len() {
            if let FlowBlock::ActNorm(a) = &mut self.blocks[i] {
                a.initialize(&mut self.store, &h)?;
            }
            let g = Graph::new();
            let p = self.store.bind_frozen(&g);
            let (y, _) = self.blocks[i].forward(&p, g.constant(&h))?;
            g.check_finite()?;
            h = y.to_array();
        }
        Ok(())
    }

    /// Marks every actnorm as initialized at its current parameters.
    pub fn mark_initialized(&mut self) {
        for b in &mut self.blocks {
            if let FlowBlock::ActNorm(a) = b {
                a.initialized = true;
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("flow", &[0, self.dim], shape));
        }
        Ok(())
    }

    /// `z = F(x)` and per-sample `log|det ∂F/∂x|` plus the preprocessing constant.
    pub fn forward_graph<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        self.check_input(&x.shape())?;
        let n = x.shape()[0];
        let g = x.graph();
        let mut h = x;
        let mut logdet = g.constant_from([n], vec![self.input_logdet; n]);
        for b in &self.blocks {
            let (y, ld) = b.forward(p, h)?;
            h = y;
            logdet = logdet + ld;
        }
        Ok((h, logdet))
    }

    pub fn forward(&self, x: &Array) -> Result<(Array, Vec<f64>)> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let (z, ld) = self.forward_graph(&p, g.constant(x))?;
        g.check_finite()?;
        Ok((z.to_array(), ld.value()))
    }

    pub fn inverse(&self, z: &Array) -> Result<Array> {
        self.check_input(z.shape())?;
        let mut h = z.clone();
        for b in self.blocks.iter().rev() {
            h = b.inverse(&self.store, &h)?;
        }
        Ok(h)
    }

    /// Inserts a fresh identity coupling block before block `at`.
    pub fn insert_identity_coupling<R: Rng + ?Sized>(&mut self, at: usize, rng: &mut R) -> Result<()> {
        let step = self.blocks.len();
        let c = Coupling::new(
            &mut self.store,
            &format!("extra{step}.coupling"),
            self.config.mask.mask(self.dim, step),
            self.config.hidden,
            self.config.residual_blocks,
            rng,
        )?;
        self.blocks.insert(at.min(self.blocks.len()), FlowBlock::Coupling(c));
        Ok(())
    }
}

/// Per-sample `log p_X(x, c) = log p_Z(F(x), c) + log|det ∂F/∂x|` on the graph.
pub fn log_likelihood_graph<'g>(
    flow: &FlowModel,
    flow_params: &Bound<'g>,
    priors: &ClassPriorSet,
    prior_params: &Bound<'g>,
    x: Var<'g>,
    labels: &[usize],
    noise: Option<&[f64]>,
) -> Result<Var<'g>> {
    let (z, logdet) = flow.forward_graph(flow_params, x)?;
    let lp = priors.log_prob_graph(prior_params, z, labels, noise)?;
    Ok(lp + logdet)
}

/// Per-sample class-conditional log-likelihood at evaluation (`n = 0`).
pub fn log_likelihood(
    flow: &FlowModel,
    priors: &ClassPriorSet,
    x: &Array,
    labels: &[usize],
) -> Result<Vec<f64>> {
    if x.rows() != labels.len() {
        return Err(Error::shape("log_likelihood", &[labels.len()], &[x.rows()]));
    }
    let g = Graph::new();
    let fp = flow.store.bind_frozen(&g);
    let pp = priors.store.bind_frozen(&g);
    let ll = log_likelihood_graph(flow, &fp, priors, &pp, g.constant(x), labels, None)?;
    g.check_finite()?;
    Ok(ll.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn half_masks_alternate() {
        assert_eq!(MaskLayout::Half.mask(4, 0), vec![1., 1., 0., 0.]);
        assert_eq!(MaskLayout::Half.mask(4, 1), vec![0., 0., 1., 1.]);
    }

    #[test]
    fn checkerboard_alternates() {
        let m = MaskLayout::Checkerboard { height: 2, width: 2 };
        assert_eq!(m.mask(4, 0), vec![1., 0., 0., 1.]);
        assert_eq!(m.mask(4, 1), vec![0., 1., 1., 0.]);
    }

    #[test]
    fn uninitialized_model_rejected() {
        let m = FlowModel::new(2, FlowConfig::default(), &mut stream(0, Stream::FlowInit, 0)).unwrap();
        assert!(matches!(m.forward(&Array::zeros(vec![1, 2])), Err(Error::Uninitialized(0))));
    }

    #[test]
    fn identity_flow_standard_normal_density() {
        let mut m =
            FlowModel::new(2, FlowConfig::default(), &mut stream(0, Stream::FlowInit, 0)).unwrap();
        m.mark_initialized();
        let ll = log_likelihood(&m, &ClassPriorSet::unvp(2, 2), &Array::zeros(vec![1, 2]), &[0]).unwrap();
        assert!((ll[0] + 1.837877).abs() < 1e-6);
        let at_mode = Array::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let ll = log_likelihood(&m, &ClassPriorSet::unvp(2, 2), &at_mode, &[1]).unwrap();
        assert!((ll[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn unknown_class_rejected() {
        let mut m =
            FlowModel::new(2, FlowConfig::default(), &mut stream(0, Stream::FlowInit, 0)).unwrap();
        m.mark_initialized();
        let r = log_likelihood(&m, &ClassPriorSet::unvp(2, 2), &Array::zeros(vec![1, 2]), &[5]);
        assert!(matches!(r, Err(Error::UnknownClass { .. })));
    }
}
