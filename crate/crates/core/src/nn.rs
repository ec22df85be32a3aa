//! Small building blocks shared by the flow networks, the priors and the
//! classifier.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numeric::{Array, Bound, ParamId, ParamStore, Var};

/// Affine map `x W + b` with `W: [inputs, outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        Linear::with_std(store, name, inputs, outputs, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w: Vec<f64> = if std == 0.0 {
            vec![0.0; inputs * outputs]
        } else {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..inputs * outputs).map(|_| normal.sample(rng)).collect()
        };
        let weight = store.add(
            format!("{name}.weight"),
            Array::matrix(inputs, outputs, w).expect("weight shape"),
        );
        let bias = store.add(format!("{name}.bias"), Array::zeros(vec![outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// All-zero layer; the output is identically zero until trained.
    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Array::zeros(vec![inputs, outputs]));
        let bias = store.add(format!("{name}.bias"), Array::zeros(vec![outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(p.get(self.weight)).add_row(p.get(self.bias))
    }
}

/// Rectifier MLP with identity skips: `input -> hidden -> [residual]* -> output`.
///
/// Each residual block computes `h + W2 relu(W1 h)`. The output layer is
/// zero-initialized so a fresh network maps everything to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    pub input: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub output: Linear,
}

impl ResidualNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        residual_blocks: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.in"), inputs, hidden, rng);
        let blocks = (0..residual_blocks)
            .map(|i| {
                let a = Linear::new(store, &format!("{name}.res{i}.a"), hidden, hidden, rng);
                // Small second layer keeps each block near the identity at init.
                let b = Linear::with_std(
                    store,
                    &format!("{name}.res{i}.b"),
                    hidden,
                    hidden,
                    0.1 / (hidden as f64).sqrt(),
                    rng,
                );
                (a, b)
            })
            .collect();
        let output = Linear::zeros(store, &format!("{name}.out"), hidden, outputs);
        ResidualNet {
            input,
            blocks,
            output,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = self.input.forward(p, x).relu();
        for (a, b) in &self.blocks {
            let r = b.forward(p, a.forward(p, h).relu());
            h = h + r;
        }
        self.output.forward(p, h.relu())
    }
}
