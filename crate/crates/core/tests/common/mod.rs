#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use unvp::flow::{FlowConfig, FlowModel, MaskLayout};
use unvp::generalizer::{Mode, TrainConfig};
use unvp::numeric::Array;
use unvp::rng::{stream, Stream};

/// A flow with every parameter moved away from its identity initialization.
/// Mixing and coupling-net weights get noise scaled by one over the root of
/// their width, so the map stays well conditioned at large `d`.
pub fn random_flow(dim: usize, depth: usize, hidden: usize, residual_blocks: usize, seed: u64) -> FlowModel {
    let cfg = FlowConfig {
        depth,
        hidden,
        residual_blocks,
        mask: MaskLayout::Half,
    };
    let mut flow = FlowModel::new(dim, cfg, &mut stream(seed, Stream::FlowInit, 0)).unwrap();
    flow.mark_initialized();
    let mut rng = stream(seed, Stream::Misc, 0);
    let names = flow.store.names().to_vec();
    for (name, p) in names.iter().zip(flow.store.arrays_mut()) {
        let std = if name.contains(".mix.") {
            0.3 / (dim as f64).sqrt()
        } else if name.contains(".coupling.") {
            0.3 / (dim.max(hidden) as f64).sqrt()
        } else {
            0.1
        };
        let normal = Normal::new(0.0, std).unwrap();
        p.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    flow
}

/// `n × d` batch uniform in `[−half, half]`.
pub fn uniform_batch(n: usize, d: usize, half: f64, seed: u64) -> Array {
    let mut rng = stream(seed, Stream::Misc, 1);
    let data = (0..n * d).map(|_| rng.gen_range(-half..half)).collect();
    Array::matrix(n, d, data).unwrap()
}

pub fn max_abs(a: &Array, b: &Array) -> f64 {
    a.max_abs_diff(b)
}

/// Settings used for the 2-d blob experiments.
pub fn blob_config(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        mode,
        seed,
        learning_rate: 3e-3,
        batch_size: 64,
        epochs: 30,
        pretrain_epochs: 10,
        ..TrainConfig::default()
    };
    cfg.flow.depth = 4;
    cfg.flow.hidden = 32;
    cfg.flow.residual_blocks = 2;
    cfg.generalization.beta = 0.3;
    cfg
}

/// A small, fast configuration for plumbing tests.
pub fn tiny_config(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = blob_config(mode, seed);
    cfg.epochs = 6;
    cfg.pretrain_epochs = 2;
    cfg.flow.depth = 2;
    cfg.flow.hidden = 8;
    cfg.flow.residual_blocks = 1;
    cfg.classifier_hidden = vec![16, 16];
    cfg.generalization.ascent_steps = 5;
    cfg
}

/// Settings used for the 14×14 digit experiments.
pub fn digit_config(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        mode,
        seed,
        learning_rate: 1e-3,
        batch_size: 64,
        epochs: 10,
        pretrain_epochs: 3,
        ..TrainConfig::default()
    };
    cfg.flow.depth = 4;
    cfg.flow.hidden = 64;
    cfg.flow.residual_blocks = 1;
    cfg.generalization.beta = 0.3;
    cfg
}
