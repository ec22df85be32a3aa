//! Two-stage training: flow pretraining, then minimization epochs on the
//! joint loss `CE − log p_X` interleaved with `K` maximization rounds that
//! grow the hard-sample pool.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy_graph, Classifier, ClassifierArch};
use crate::data::{preprocess, Dataset, InputMeta};
use crate::error::{Error, Result};
use crate::flow::{log_likelihood_graph, FlowConfig, FlowModel, MaskLayout};
use crate::generalizer::ascent::{synthesize_hard_samples, GeneralizationConfig, HardSamplePool};
use crate::numeric::{Array, Graph, Optimizer, OptimizerKind};
use crate::priors::ClassPriorSet;
use crate::rng::{stream, Stream};

/// Which branches are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Classifier only.
    Pure,
    /// Flow with fixed class priors.
    Unvp,
    /// Flow with learnable noise-shifted priors.
    Eunvp,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(Mode::Pure),
            "unvp" => Ok(Mode::Unvp),
            "eunvp" => Ok(Mode::Eunvp),
            other => Err(Error::invalid(format!("unknown mode '{other}' (pure, unvp, eunvp)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pure => "pure",
            Mode::Unvp => "unvp",
            Mode::Eunvp => "eunvp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub generalization: GeneralizationConfig,
    /// The mask layout is replaced by a checkerboard for image-shaped data.
    pub flow: FlowConfig,
    /// Hidden widths of the MLP used for vector data.
    pub classifier_hidden: Vec<usize>,
    pub gamma: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Minimization epochs (`E`).
    pub epochs: usize,
    /// Flow-only epochs before the two-stage loop.
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Eunvp,
            generalization: GeneralizationConfig::default(),
            flow: FlowConfig::default(),
            classifier_hidden: vec![128, 128],
            gamma: 1.0,
            lambda: 0.1,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 30,
            pretrain_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generalization.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.gamma >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::invalid("gamma and lambda must be non-negative"));
        }
        if self.flow.depth == 0 || self.flow.hidden == 0 {
            return Err(Error::invalid("flow depth and width must be positive"));
        }
        Ok(())
    }

    /// Maximization rounds actually run (none without a flow).
    pub fn rounds(&self) -> usize {
        match self.mode {
            Mode::Pure => 0,
            _ => self.generalization.rounds,
        }
    }
}

/// Architecture used for data of the given sample shape.
pub fn classifier_arch(sample_shape: &[usize], classes: usize, hidden: &[usize]) -> ClassifierArch {
    match sample_shape {
        [h, w] if *h >= 4 && *w >= 4 => ClassifierArch::conv(*h, *w, classes),
        _ => ClassifierArch::Mlp {
            inputs: sample_shape.iter().product(),
            hidden: hidden.to_vec(),
            classes,
        },
    }
}

fn flow_config(cfg: &FlowConfig, sample_shape: &[usize]) -> FlowConfig {
    let mut out = *cfg;
    out.mask = match sample_shape {
        [h, w] => MaskLayout::Checkerboard { height: *h, width: *w },
        _ => MaskLayout::Half,
    };
    out
}

/// Epochs before which maximization rounds run: the first after a warm-up
/// of `2·⌊E/(K+2)⌋` epochs, the rest evenly spaced over the remainder.
pub fn maximization_epochs(epochs: usize, rounds: usize) -> Vec<usize> {
    if rounds == 0 {
        return Vec::new();
    }
    let e_min = epochs / (rounds + 2);
    let warmup = 2 * e_min;
    let spacing = epochs.saturating_sub(warmup) / rounds;
    (0..rounds).map(|r| warmup + r * spacing).collect()
}

/// One structured metrics record per minimization epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub nll: Option<f64>,
    pub acc_src: f64,
    pub acc_unseen: Option<f64>,
    pub pool_size: usize,
}

/// Flow branch: the flow, its priors and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBranch {
    pub flow: FlowModel,
    pub flow_opt: Optimizer,
    pub priors: ClassPriorSet,
    pub prior_opt: Optimizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub meta: InputMeta,
    pub classifier: Classifier,
    pub clf_opt: Optimizer,
    pub branch: Option<FlowBranch>,
    pub pool: HardSamplePool,
    /// Completed flow pretraining epochs.
    pub pretrain_done: usize,
    /// Completed minimization epochs.
    pub epoch: usize,
    /// Completed maximization rounds.
    pub rounds_done: usize,
    pub history: Vec<EpochMetrics>,
}

/// Returned by the per-epoch callback of [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

const EVAL_CHUNK: usize = 500;
const INIT_BATCH: usize = 512;
const PRETRAIN_INDEX: u64 = 1 << 39;

impl TrainState {
    /// Fresh models with the deterministic initialization of `config.seed`;
    /// the flow's actnorm layers are not yet data-initialized.
    pub fn build(config: TrainConfig, sample_shape: Vec<usize>, classes: usize, meta: InputMeta) -> Result<Self> {
        config.validate()?;
        meta.validate()?;
        let dim: usize = sample_shape.iter().product();
        let arch = classifier_arch(&sample_shape, classes, &config.classifier_hidden);
        let classifier = Classifier::new(arch, &mut stream(config.seed, Stream::ClassifierInit, 0))?;
        let clf_opt = Optimizer::new(config.optimizer, config.learning_rate)?;
        let branch = match config.mode {
            Mode::Pure => None,
            mode => {
                let mut flow = FlowModel::new(
                    dim,
                    flow_config(&config.flow, &sample_shape),
                    &mut stream(config.seed, Stream::FlowInit, 0),
                )?;
                flow.input_logdet = meta.logdet(dim);
                let priors = match mode {
                    Mode::Eunvp => ClassPriorSet::eunvp(
                        classes,
                        dim,
                        config.gamma,
                        config.lambda,
                        &mut stream(config.seed, Stream::PriorInit, 0),
                    )?,
                    _ => ClassPriorSet::unvp(classes, dim),
                };
                Some(FlowBranch {
                    flow,
                    flow_opt: Optimizer::new(config.optimizer, config.learning_rate)?,
                    priors,
                    prior_opt: Optimizer::new(config.optimizer, config.learning_rate)?,
                })
            }
        };
        Ok(TrainState {
            config,
            sample_shape,
            classes,
            meta,
            classifier,
            clf_opt,
            branch,
            pool: HardSamplePool::new(),
            pretrain_done: 0,
            epoch: 0,
            rounds_done: 0,
            history: Vec::new(),
        })
    }

    /// [`build`](Self::build) plus data-dependent actnorm initialization on
    /// a seeded, dequantized batch of `source`.
    pub fn new(config: TrainConfig, source: &Dataset) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut state = TrainState::build(config, source.sample_shape.clone(), source.classes, source.meta)?;
        if let Some(b) = &mut state.branch {
            let seed = state.config.seed;
            let mut order: Vec<usize> = (0..source.len()).collect();
            order.shuffle(&mut stream(seed, Stream::FlowShuffle, u64::MAX));
            order.truncate(INIT_BATCH);
            let mut rng = stream(seed, Stream::FlowDequantize, u64::MAX);
            let x = preprocess_rows(source, &order, Some(&mut rng))?;
            b.flow.initialize(&x)?;
        }
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }
}

/// Preprocessed `[n, d]` model-space inputs for the given rows.
pub fn preprocess_rows(data: &Dataset, rows: &[usize], mut rng: Option<&mut crate::rng::Rng>) -> Result<Array> {
    let d = data.dim();
    let mut out = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        out.extend(preprocess(data.input(i), &data.meta, rng.as_deref_mut())?);
    }
    Array::matrix(rows.len(), d, out)
}

/// Whole dataset dequantized with one stream, in index order.
fn preprocess_all(data: &Dataset, rng: &mut crate::rng::Rng) -> Result<Array> {
    let rows: Vec<usize> = (0..data.len()).collect();
    preprocess_rows(data, &rows, Some(rng))
}

/// Classifier accuracy on a dataset at deterministic (midpoint) preprocessing.
pub fn evaluate(clf: &Classifier, data: &Dataset) -> Result<f64> {
    Ok(confusion(clf, data)?.accuracy())
}

/// Per-class confusion counts: `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: usize = (0..self.counts.len()).map(|c| self.counts[c][c]).sum();
        hits as f64 / self.total().max(1) as f64
    }
}

pub fn confusion(clf: &Classifier, data: &Dataset) -> Result<Confusion> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if data.dim() != clf.arch.inputs() || data.classes != clf.classes() {
        return Err(Error::shape(
            "evaluate",
            &[clf.arch.inputs(), clf.classes()],
            &[data.dim(), data.classes],
        ));
    }
    let c = clf.classes();
    let mut counts = vec![vec![0; c]; c];
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = preprocess_rows(data, chunk, None)?;
        for (p, &i) in clf.predict(&x)?.into_iter().zip(chunk) {
            counts[data.labels[i]][p] += 1;
        }
    }
    Ok(Confusion { counts })
}

/// Mean per-sample negative log-likelihood of `data` under the flow branch.
pub fn mean_nll(branch: &FlowBranch, data: &Dataset) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = preprocess_rows(data, chunk, None)?;
        let ll = crate::flow::log_likelihood(&branch.flow, &branch.priors, &x, &data.labels_of(chunk))?;
        total -= ll.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

fn batch_rows(x: &Array, rows: &[usize]) -> Array {
    let d = x.cols();
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Array::matrix(rows.len(), d, out).expect("batch shape")
}

fn prior_noise(branch: &FlowBranch, seed: u64, index: u64) -> Result<Option<Vec<f64>>> {
    if branch.priors.learned.is_none() {
        return Ok(None);
    }
    branch
        .priors
        .sample_noise(&mut stream(seed, Stream::PriorNoise, index))
        .map(Some)
}

/// One optimizer step of `−mean log p_X` on the flow branch; returns the
/// batch mean NLL.
fn flow_step(branch: &mut FlowBranch, x: &Array, labels: &[usize], noise: Option<&[f64]>) -> Result<f64> {
    let g = Graph::new();
    let fp = branch.flow.store.bind(&g);
    let pp = branch.priors.store.bind(&g);
    let ll = log_likelihood_graph(&branch.flow, &fp, &branch.priors, &pp, g.constant(x), labels, noise)?;
    let nll = ll.mean().neg();
    g.check_finite()?;
    let grads = g.backward(nll)?;
    branch.flow.store.accumulate(&fp, &grads)?;
    branch.priors.store.accumulate(&pp, &grads)?;
    branch.flow_opt.step(&mut branch.flow.store)?;
    if !branch.priors.store.is_empty() {
        branch.prior_opt.step(&mut branch.priors.store)?;
    }
    Ok(nll.item())
}

fn classifier_step(clf: &mut Classifier, opt: &mut Optimizer, x: &Array, labels: &[usize]) -> Result<f64> {
    let g = Graph::new();
    let p = clf.store.bind(&g);
    let (logits, _) = clf.forward_graph(&p, g.constant(x))?;
    let ce = cross_entropy_graph(logits, labels)?;
    g.check_finite()?;
    let grads = g.backward(ce)?;
    clf.store.accumulate(&p, &grads)?;
    opt.step(&mut clf.store)?;
    Ok(ce.item())
}

/// Flow-only epoch maximizing the class-conditional likelihood.
pub fn pretrain_epoch(state: &mut TrainState, source: &Dataset) -> Result<f64> {
    let seed = state.config.seed;
    let e = state.pretrain_done as u64;
    let bs = state.config.batch_size;
    let Some(branch) = state.branch.as_mut() else {
        return Err(Error::invalid("pretraining needs a flow branch"));
    };
    let x = preprocess_all(source, &mut stream(seed, Stream::FlowDequantize, e))?;
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut stream(seed, Stream::FlowShuffle, e));
    let snapshot = branch.clone();
    let mut total = 0.0;
    for (b, rows) in order.chunks(bs).enumerate() {
        let noise = prior_noise(branch, seed, PRETRAIN_INDEX | (e << 20) | b as u64)?;
        let labels = source.labels_of(rows);
        match flow_step(branch, &batch_rows(&x, rows), &labels, noise.as_deref()) {
            Ok(nll) => total += nll * rows.len() as f64,
            Err(err) => {
                *branch = snapshot;
                return Err(err);
            }
        }
    }
    state.pretrain_done += 1;
    Ok(total / source.len() as f64)
}

/// Mean losses of one minimization epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub ce: f64,
    pub nll: Option<f64>,
}

/// One pass over source plus pool on `CE − log p_X`. Classifier and flow
/// share no parameters, so each takes its own step on the same batch.
///
/// On any failure every model and optimizer is restored to its state at
/// the start of the epoch.
pub fn minimization_epoch(state: &mut TrainState, source: &Dataset) -> Result<EpochLosses> {
    let snapshot = (state.classifier.clone(), state.clf_opt.clone(), state.branch.clone());
    match minimization_pass(state, source) {
        Ok(losses) => {
            state.epoch += 1;
            Ok(losses)
        }
        Err(err) => {
            (state.classifier, state.clf_opt, state.branch) = snapshot;
            Err(err)
        }
    }
}

fn minimization_pass(state: &mut TrainState, source: &Dataset) -> Result<EpochLosses> {
    if source.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let seed = state.config.seed;
    let e = state.epoch as u64;
    let mut x = preprocess_all(source, &mut stream(seed, Stream::Dequantize, e))?;
    let mut labels = source.labels.clone();
    if !state.pool.is_empty() {
        let mut data = x.into_data();
        for s in state.pool.entries() {
            data.extend_from_slice(&s.x);
            labels.push(s.label);
        }
        x = Array::matrix(labels.len(), state.dim(), data)?;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut stream(seed, Stream::Shuffle, e));
    let (mut ce_total, mut nll_total) = (0.0, 0.0);
    for (b, rows) in order.chunks(state.config.batch_size).enumerate() {
        let xb = batch_rows(&x, rows);
        let yb: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        ce_total += classifier_step(&mut state.classifier, &mut state.clf_opt, &xb, &yb)? * rows.len() as f64;
        if let Some(branch) = state.branch.as_mut() {
            let noise = prior_noise(branch, seed, (e << 20) | b as u64)?;
            nll_total += flow_step(branch, &xb, &yb, noise.as_deref())? * rows.len() as f64;
        }
    }
    let n = labels.len() as f64;
    Ok(EpochLosses {
        ce: ce_total / n,
        nll: state.branch.as_ref().map(|_| nll_total / n),
    })
}

/// Maximization round `round` (1-based): perturbs a seeded random `β`
/// fraction of the source set, class by class, and adds the results to the
/// pool. Returns the number of samples added.
///
/// A class batch whose ascent hits a numeric failure is discarded with a
/// warning; the round continues.
pub fn maximization_phase(state: &mut TrainState, source: &Dataset, round: usize) -> Result<usize> {
    let Some(branch) = state.branch.as_ref() else {
        return Err(Error::invalid("maximization needs a flow branch"));
    };
    let cfg = &state.config.generalization;
    let take = (cfg.beta * source.len() as f64).round() as usize;
    if take == 0 {
        return Ok(0);
    }
    let mut rng = stream(state.config.seed, Stream::Select, round as u64);
    let mut picked = index::sample(&mut rng, source.len(), take.min(source.len())).into_vec();
    picked.sort_unstable();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in picked {
        by_class.entry(source.labels[i]).or_default().push(i);
    }
    let mut added = 0;
    let mut fresh = HardSamplePool::new();
    for (&class, rows) in &by_class {
        for chunk in rows.chunks(state.config.batch_size) {
            let x_src = preprocess_rows(source, chunk, None)?;
            match synthesize_hard_samples(&x_src, class, &branch.flow, &state.classifier, cfg) {
                Ok(out) => {
                    fresh.extend_rows(&out.x, class, round, state.classes)?;
                    added += chunk.len();
                }
                Err(err) if err.is_numeric() => {
                    log::warn!("round {round}: discarded {} samples of class {class}: {err}", chunk.len());
                }
                Err(err) => return Err(err),
            }
        }
    }
    for s in fresh.entries() {
        state.pool.push(s.clone(), state.dim(), state.classes)?;
    }
    Ok(added)
}

/// Runs the schedule from wherever `state` stands: remaining pretraining
/// epochs, then minimization epochs with maximization rounds before the
/// epochs given by [`maximization_epochs`]. `on_epoch` sees the state after
/// every minimization epoch and may stop the run early.
pub fn train(
    state: &mut TrainState,
    source: &Dataset,
    unseen: Option<&Dataset>,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
) -> Result<()> {
    if source.sample_shape != state.sample_shape || source.classes != state.classes {
        return Err(Error::shape(
            "train",
            &[state.dim(), state.classes],
            &[source.dim(), source.classes],
        ));
    }
    while state.branch.is_some() && state.pretrain_done < state.config.pretrain_epochs {
        let nll = pretrain_epoch(state, source)?;
        log::info!("pretrain epoch {}: nll {nll:.4}", state.pretrain_done);
    }
    let schedule = maximization_epochs(state.config.epochs, state.config.rounds());
    while state.epoch < state.config.epochs {
        while state.rounds_done < schedule.len() && schedule[state.rounds_done] <= state.epoch {
            let round = state.rounds_done + 1;
            let added = maximization_phase(state, source, round)?;
            state.rounds_done = round;
            log::info!("round {round}: {added} hard samples, pool {}", state.pool.len());
        }
        let losses = minimization_epoch(state, source)?;
        let metrics = EpochMetrics {
            epoch: state.epoch,
            ce: losses.ce,
            nll: losses.nll,
            acc_src: evaluate(&state.classifier, source)?,
            acc_unseen: unseen.map(|u| evaluate(&state.classifier, u)).transpose()?,
            pool_size: state.pool.len(),
        };
        state.history.push(metrics.clone());
        if on_epoch(state, &metrics)? == Control::Stop {
            break;
        }
    }
    Ok(())
}

/// The Pure-CNN baseline on its own: the classifier trained on the source
/// set with the same initialization, shuffling and dequantization streams
/// as [`train`] uses, and nothing else.
pub fn train_classifier(
    config: &TrainConfig,
    source: &Dataset,
    unseen: Option<&Dataset>,
) -> Result<(Classifier, Vec<EpochMetrics>)> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let arch = classifier_arch(&source.sample_shape, source.classes, &config.classifier_hidden);
    let mut clf = Classifier::new(arch, &mut stream(config.seed, Stream::ClassifierInit, 0))?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut history = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let x = preprocess_all(source, &mut stream(config.seed, Stream::Dequantize, e as u64))?;
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut stream(config.seed, Stream::Shuffle, e as u64));
        let mut total = 0.0;
        for rows in order.chunks(config.batch_size) {
            let labels = source.labels_of(rows);
            total += classifier_step(&mut clf, &mut opt, &batch_rows(&x, rows), &labels)? * rows.len() as f64;
        }
        history.push(EpochMetrics {
            epoch: e + 1,
            ce: total / source.len() as f64,
            nll: None,
            acc_src: evaluate(&clf, source)?,
            acc_unseen: unseen.map(|u| evaluate(&clf, u)).transpose()?,
            pool_size: 0,
        });
    }
    Ok((clf, history))
}
