//! Independent checks shared by the property tests and the acceptance run.

use nalgebra::DMatrix;
use serde_json::Value;
use unvp::classifier::{cross_entropy_graph, Classifier, ClassifierArch};
use unvp::data::{checkpoint_bytes, checkpoint_from_bytes, make_blob_domains, BlobShift, Dataset};
use unvp::flow::{log_likelihood_graph, ActNorm, Coupling, FlowBlock, FlowModel, Mix};
use unvp::generalizer::{train, train_classifier, Control, Mode, TrainConfig, TrainState};
use unvp::numeric::{finite_diff_grad, Array, Graph, ParamStore};
use unvp::priors::ClassPriorSet;
use unvp::rng::{stream, Stream};

use super::{random_flow, tiny_config, uniform_batch};

fn perturbed(mut store: ParamStore, std: f64, seed: u64) -> ParamStore {
    store.perturb(&mut stream(seed, Stream::Misc, 7), std);
    store
}

pub fn single_block(kind: &str, dim: usize, seed: u64) -> (FlowBlock, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, Stream::FlowInit, 0);
    let block = match kind {
        "actnorm" => {
            let mut a = ActNorm::new(&mut store, "a", dim, 0);
            a.initialized = true;
            FlowBlock::ActNorm(a)
        }
        "mix" => FlowBlock::Mix(Mix::new(&mut store, "m", dim)),
        _ => {
            let mask = (0..dim).map(|i| (i % 2) as f64).collect();
            FlowBlock::Coupling(Coupling::new(&mut store, "c", mask, 16, 2, &mut rng).unwrap())
        }
    };
    let std = if kind == "mix" { 0.3 / (dim as f64).sqrt() } else { 0.2 };
    (block, perturbed(store, std, seed))
}

pub fn block_roundtrip_error(block: &FlowBlock, store: &ParamStore, x: &Array) -> f64 {
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let (y, _) = block.forward(&p, g.constant(x)).unwrap();
    let back = block.inverse(store, &y.to_array()).unwrap();
    back.max_abs_diff(x)
}

/// `log|det J|` of the flow at one point, from a central-difference Jacobian.
pub fn fd_logdet(flow: &FlowModel, x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[j] += h;
        down[j] -= h;
        let (zu, _) = flow.forward(&Array::matrix(1, d, up).unwrap()).unwrap();
        let (zd, _) = flow.forward(&Array::matrix(1, d, down).unwrap()).unwrap();
        for i in 0..d {
            jac[(i, j)] = (zu.data()[i] - zd.data()[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

struct Tiny {
    clf: Classifier,
    flow: FlowModel,
    priors: ClassPriorSet,
    x: Array,
    labels: Vec<usize>,
    noise: Vec<f64>,
}

impl Tiny {
    fn new(seed: u64) -> Self {
        let mut rng = stream(seed, Stream::ClassifierInit, 0);
        let mut clf = Classifier::new(
            ClassifierArch::Mlp {
                inputs: 2,
                hidden: vec![6, 5],
                classes: 3,
            },
            &mut rng,
        )
        .unwrap();
        clf.store.perturb(&mut rng, 0.3);
        let mut priors = ClassPriorSet::eunvp(3, 2, 1.0, 0.5, &mut stream(seed, Stream::PriorInit, 0)).unwrap();
        priors.store.perturb(&mut stream(seed, Stream::PriorInit, 1), 0.2);
        let noise = priors.sample_noise(&mut stream(seed, Stream::PriorNoise, 0)).unwrap();
        Tiny {
            clf,
            flow: random_flow(2, 2, 4, 1, seed),
            priors,
            x: uniform_batch(6, 2, 0.5, seed),
            labels: vec![0, 1, 2, 0, 1, 2],
            noise,
        }
    }

    fn stores(&self) -> [&ParamStore; 3] {
        [&self.clf.store, &self.flow.store, &self.priors.store]
    }

    /// Stage-one loss `CE − mean log p_X`; with `grad` also the reverse-mode
    /// gradient over all three parameter stores, concatenated.
    fn loss(&self, grad: bool) -> (f64, Vec<f64>) {
        let g = Graph::new();
        let bind = |s: &ParamStore| if grad { s.bind(&g) } else { s.bind_frozen(&g) };
        let (cp, fp, pp) = (bind(&self.clf.store), bind(&self.flow.store), bind(&self.priors.store));
        let x = g.constant(&self.x);
        let (logits, _) = self.clf.forward_graph(&cp, x).unwrap();
        let ce = cross_entropy_graph(logits, &self.labels).unwrap();
        let ll = log_likelihood_graph(&self.flow, &fp, &self.priors, &pp, x, &self.labels, Some(&self.noise)).unwrap();
        let loss = ce - ll.mean();
        if !grad {
            return (loss.item(), Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        let mut flat = Vec::new();
        for (store, bound) in self.stores().into_iter().zip([&cp, &fp, &pp]) {
            let mut s = store.clone();
            s.zero_grad();
            s.accumulate(bound, &grads).unwrap();
            flat.extend(s.flat_grad());
        }
        (loss.item(), flat)
    }

    fn flat(&self) -> Vec<f64> {
        self.stores().iter().flat_map(|s| s.flatten()).collect()
    }

    fn with_flat(&self, flat: &[f64]) -> Tiny {
        let mut t = Tiny {
            clf: self.clf.clone(),
            flow: self.flow.clone(),
            priors: self.priors.clone(),
            x: self.x.clone(),
            labels: self.labels.clone(),
            noise: self.noise.clone(),
        };
        let (a, rest) = flat.split_at(t.clf.store.numel());
        let (b, c) = rest.split_at(t.flow.store.numel());
        t.clf.store.unflatten(a).unwrap();
        t.flow.store.unflatten(b).unwrap();
        t.priors.store.unflatten(c).unwrap();
        t
    }
}

/// Relative error between reverse-mode and central-difference gradients of
/// the joint loss at one random parameter point.
pub fn joint_loss_gradient_error(seed: u64) -> f64 {
    let t = Tiny::new(seed);
    let (_, analytic) = t.loss(true);
    let p = Array::vector(t.flat());
    let fd = finite_diff_grad(|q| Ok(t.with_flat(q.data()).loss(false).0), &p, 1e-6).unwrap();
    rel_err(&analytic, fd.data())
}

/// Trains `total` epochs straight through and, separately, stops after
/// `split`, reloads from checkpoint bytes and finishes. Returns both final
/// checkpoints.
pub fn resume_pair(mode: Mode, split: usize, total: usize) -> (Vec<u8>, Vec<u8>) {
    let (src, un) = make_blob_domains(3, 40, BlobShift::rotate_scale(30.0, 1.3), 2).unwrap();
    let mut cfg = tiny_config(mode, 2);
    cfg.epochs = total;
    let mut straight = TrainState::new(cfg.clone(), &src).unwrap();
    train(&mut straight, &src, Some(&un), &mut |_, _| Ok(Control::Continue)).unwrap();

    let mut first = TrainState::new(cfg, &src).unwrap();
    train(&mut first, &src, Some(&un), &mut |s, _| {
        Ok(if s.epoch == split { Control::Stop } else { Control::Continue })
    })
    .unwrap();
    let saved = checkpoint_bytes(&first, &Value::Null).unwrap();
    drop(first);
    let mut resumed = checkpoint_from_bytes(&saved).unwrap().state;
    train(&mut resumed, &src, Some(&un), &mut |_, _| Ok(Control::Continue)).unwrap();
    (
        checkpoint_bytes(&straight, &Value::Null).unwrap(),
        checkpoint_bytes(&resumed, &Value::Null).unwrap(),
    )
}

pub fn blobs(seed: u64) -> (Dataset, Dataset) {
    make_blob_domains(3, 100, BlobShift::rotate_scale(30.0, 1.3), seed).unwrap()
}

pub fn run(cfg: TrainConfig, src: &Dataset, un: &Dataset) -> TrainState {
    let mut st = TrainState::new(cfg, src).unwrap();
    train(&mut st, src, Some(un), &mut |_, _| Ok(Control::Continue)).unwrap();
    st
}

pub fn bits(a: &[f64]) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

/// Whether pure-mode training reproduces the standalone classifier bit for bit.
pub fn pure_matches_standalone(seed: u64) -> bool {
    let (src, un) = blobs(seed);
    let cfg = tiny_config(Mode::Pure, seed);
    let st = run(cfg.clone(), &src, &un);
    let (clf, history) = train_classifier(&cfg, &src, Some(&un)).unwrap();
    bits(&st.classifier.store.flatten()) == bits(&clf.store.flatten()) && st.history == history
}

