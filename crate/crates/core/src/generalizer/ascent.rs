use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy_rows, Classifier};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::generalizer::gaussian::{bures_sq_graph, fit_gaussian, GaussianSummary};
use crate::numeric::{Array, Bound, Graph, Var};

/// Model-space inputs live in this box; hard samples are projected into it.
pub const INPUT_BOUND: f64 = 0.5;

/// Class batches smaller than this compare latent means only.
pub const MIN_VARIANCE_BATCH: usize = 4;

/// Step halvings tried before an ascent step is given up.
pub const MAX_HALVINGS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationConfig {
    /// Weight of the distribution-shift penalty.
    pub alpha: f64,
    /// Fraction of the source set perturbed in each maximization round.
    pub beta: f64,
    /// Number of maximization rounds (`K`).
    pub rounds: usize,
    pub ascent_steps: usize,
    pub ascent_step_size: f64,
    pub feature_reg_weight: f64,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        GeneralizationConfig {
            alpha: 0.1,
            beta: 0.2,
            rounds: 2,
            ascent_steps: 15,
            ascent_step_size: 0.1,
            feature_reg_weight: 1.0,
        }
    }
}

impl GeneralizationConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.alpha, self.ascent_step_size, self.feature_reg_weight];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("alpha, ascent step size and feature weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// What a class batch is compared against while it is being perturbed:
/// the Gaussian fit of its own source latents and its source features.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceReference {
    pub summary: GaussianSummary,
    pub features: Array,
}

impl SourceReference {
    pub fn new(flow: &FlowModel, clf: &Classifier, x_src: &Array) -> Result<Self> {
        let (z, _) = flow.forward(x_src)?;
        let (_, features) = clf.forward(x_src)?;
        Ok(SourceReference {
            summary: fit_gaussian(&z)?,
            features,
        })
    }
}

/// Squared latent Bures cost plus the weighted mean squared feature drift,
/// on the graph.
pub(crate) fn regularized_cost_graph<'g>(
    flow: &FlowModel,
    fp: &Bound<'g>,
    features: Var<'g>,
    x: Var<'g>,
    reference: &SourceReference,
    feature_reg_weight: f64,
) -> Result<Var<'g>> {
    let n = x.shape()[0];
    if n != reference.features.rows() {
        return Err(Error::shape("regularized_cost", &[reference.features.rows()], &[n]));
    }
    let (z, _) = flow.forward_graph(fp, x)?;
    let bures = bures_sq_graph(z, &reference.summary, n >= MIN_VARIANCE_BATCH)?;
    if feature_reg_weight == 0.0 {
        return Ok(bures);
    }
    let src = x.graph().constant(&reference.features);
    let drift = (features - src).square().sum().scale(feature_reg_weight / n as f64);
    Ok(bures + drift)
}

/// Regularized cost² of a same-class batch against its source reference.
pub fn regularized_cost(
    x_batch: &Array,
    flow: &FlowModel,
    clf: &Classifier,
    reference: &SourceReference,
    feature_reg_weight: f64,
) -> Result<f64> {
    if x_batch.rows() == 0 {
        return Err(Error::invalid("regularized cost of an empty batch"));
    }
    let g = Graph::new();
    let fp = flow.store.bind_frozen(&g);
    let cp = clf.store.bind_frozen(&g);
    let x = g.constant(x_batch);
    let (_, feats) = clf.forward_graph(&cp, x)?;
    let cost = regularized_cost_graph(flow, &fp, feats, x, reference, feature_reg_weight)?;
    g.check_finite()?;
    Ok(cost.item())
}

/// Result of perturbing one class batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AscentOutcome {
    pub x: Array,
    /// Objective value before the first step and after every step.
    pub trace: Vec<f64>,
}

impl AscentOutcome {
    /// Euclidean distance of each perturbed row from its starting point.
    pub fn displacement(&self, x_src: &Array) -> Vec<f64> {
        let d = x_src.cols();
        self.x
            .data()
            .chunks(d)
            .zip(x_src.data().chunks(d))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
            .collect()
    }
}

struct Objective<'a> {
    flow: &'a FlowModel,
    clf: &'a Classifier,
    labels: Vec<usize>,
    reference: &'a SourceReference,
    alpha: f64,
    feature_reg_weight: f64,
}

impl Objective<'_> {
    /// `J(X) = Σᵢ CE(xᵢ, c) − α·n·R(X)` and its input gradient.
    fn eval(&self, x: &Array) -> Result<(f64, Vec<f64>)> {
        let g = Graph::new();
        let fp = self.flow.store.bind_frozen(&g);
        let cp = self.clf.store.bind_frozen(&g);
        let xv = g.input(x);
        let n = x.rows() as f64;
        let (logits, feats) = self.clf.forward_graph(&cp, xv)?;
        let ce = cross_entropy_rows(logits, &self.labels)?.sum();
        let j = if self.alpha > 0.0 {
            let r = regularized_cost_graph(self.flow, &fp, feats, xv, self.reference, self.feature_reg_weight)?;
            ce - r.scale(self.alpha * n)
        } else {
            ce
        };
        g.check_finite()?;
        let grads = g.backward(j)?;
        Ok((j.item(), grads.get_or_zeros(xv)))
    }
}

fn project(x: &mut Array) {
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-INPUT_BOUND, INPUT_BOUND));
}

/// Gradient ascent on `J` from `x_src`, every row labelled `class`.
///
/// Each step starts at `cfg.ascent_step_size` and is halved until `J` does
/// not decrease; a step that cannot be made within [`MAX_HALVINGS`] ends the
/// ascent early. Iterates are projected into the input box.
pub fn synthesize_hard_samples(
    x_src: &Array,
    class: usize,
    flow: &FlowModel,
    clf: &Classifier,
    cfg: &GeneralizationConfig,
) -> Result<AscentOutcome> {
    let reference = SourceReference::new(flow, clf, x_src)?;
    synthesize_with_reference(x_src, class, flow, clf, &reference, cfg)
}

pub fn synthesize_with_reference(
    x_src: &Array,
    class: usize,
    flow: &FlowModel,
    clf: &Classifier,
    reference: &SourceReference,
    cfg: &GeneralizationConfig,
) -> Result<AscentOutcome> {
    if class >= clf.classes() {
        return Err(Error::UnknownClass {
            class,
            classes: clf.classes(),
        });
    }
    let obj = Objective {
        flow,
        clf,
        labels: vec![class; x_src.rows()],
        reference,
        alpha: cfg.alpha,
        feature_reg_weight: cfg.feature_reg_weight,
    };
    let mut x = x_src.clone();
    project(&mut x);
    let (mut j, mut grad) = obj.eval(&x)?;
    let mut trace = vec![j];
    'steps: for _ in 0..cfg.ascent_steps {
        let mut eta = cfg.ascent_step_size;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = x.clone();
            cand.data_mut().iter_mut().zip(&grad).for_each(|(v, g)| *v += eta * g);
            project(&mut cand);
            let (jc, gc) = obj.eval(&cand)?;
            if jc >= j {
                x = cand;
                j = jc;
                grad = gc;
                trace.push(j);
                continue 'steps;
            }
            eta *= 0.5;
        }
        break;
    }
    Ok(AscentOutcome { x, trace })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardSample {
    pub x: Vec<f64>,
    pub label: usize,
    pub round: usize,
}

/// Synthesized samples in model space, replayed in every later epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HardSamplePool {
    entries: Vec<HardSample>,
}

impl HardSamplePool {
    pub fn new() -> Self {
        HardSamplePool::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HardSample] {
        &self.entries
    }

    pub fn push(&mut self, sample: HardSample, dim: usize, classes: usize) -> Result<()> {
        if sample.x.len() != dim {
            return Err(Error::shape("HardSamplePool::push", &[dim], &[sample.x.len()]));
        }
        if sample.label >= classes {
            return Err(Error::UnknownClass {
                class: sample.label,
                classes,
            });
        }
        if sample.x.iter().any(|v| !v.is_finite() || v.abs() > INPUT_BOUND) {
            return Err(Error::invalid("hard sample outside the input box"));
        }
        self.entries.push(sample);
        Ok(())
    }

    /// Adds every row of `x` with the same label and round.
    pub fn extend_rows(&mut self, x: &Array, label: usize, round: usize, classes: usize) -> Result<()> {
        let d = x.cols();
        for row in x.data().chunks(d) {
            self.push(
                HardSample {
                    x: row.to_vec(),
                    label,
                    round,
                },
                d,
                classes,
            )?;
        }
        Ok(())
    }
}
