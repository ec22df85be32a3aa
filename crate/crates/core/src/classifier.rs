//! The discriminative model `M`: logits for cross-entropy training plus the
//! penultimate activations used as features by the latent regularizer.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{Array, Bound, Graph, ParamStore, Var, GATHER_ZERO};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ClassifierArch {
    /// Rectifier MLP; the last hidden layer is the feature map.
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Two 3×3 convolutions (each followed by 2×2 average pooling) and two
    /// dense layers over a single-channel `height × width` image.
    Conv {
        height: usize,
        width: usize,
        channels: [usize; 2],
        dense: usize,
        classes: usize,
    },
}

impl ClassifierArch {
    pub fn mlp(inputs: usize, classes: usize) -> Self {
        ClassifierArch::Mlp {
            inputs,
            hidden: vec![128, 128],
            classes,
        }
    }

    pub fn conv(height: usize, width: usize, classes: usize) -> Self {
        ClassifierArch::Conv {
            height,
            width,
            channels: [8, 16],
            dense: 64,
            classes,
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            ClassifierArch::Mlp { inputs, .. } => *inputs,
            ClassifierArch::Conv { height, width, .. } => height * width,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ClassifierArch::Mlp { classes, .. } | ClassifierArch::Conv { classes, .. } => *classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ClassifierArch::Mlp { inputs, hidden, .. } => hidden.last().copied().unwrap_or(*inputs),
            ClassifierArch::Conv { dense, .. } => *dense,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    Mlp {
        hidden: Vec<Linear>,
        out: Linear,
    },
    Conv {
        conv1: Linear,
        conv2: Linear,
        dense: Linear,
        out: Linear,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub store: ParamStore,
    layers: Layers,
}

/// im2col gather for a 3×3, stride-1, zero-padded convolution over a
/// `[n·h·w, c]` activation: output is `[n·h·w, 9·c]`.
fn conv3_index(n: usize, h: usize, w: usize, c: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * h * w * 9 * c);
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                for dr in 0..3 {
                    for dc in 0..3 {
                        let rr = r as isize + dr as isize - 1;
                        let cc = col as isize + dc as isize - 1;
                        let inside = rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w;
                        for ch in 0..c {
                            idx.push(if inside {
                                (((b * h + rr as usize) * w + cc as usize) * c + ch) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// 2×2 stride-2 average pooling (floor) over `[n·h·w, c]`.
fn avg_pool2<'g>(x: Var<'g>, n: usize, h: usize, w: usize, c: usize) -> (Var<'g>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut acc: Option<Var<'g>> = None;
    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut idx = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for r in 0..ho {
                for col in 0..wo {
                    let src = (b * h + 2 * r + dr) * w + 2 * col + dc;
                    for ch in 0..c {
                        idx.push((src * c + ch) as u32);
                    }
                }
            }
        }
        let part = x.gather(idx.into(), [n * ho * wo, c]);
        acc = Some(match acc {
            None => part,
            Some(a) => a + part,
        });
    }
    (acc.expect("four taps").scale(0.25), ho, wo)
}

impl Classifier {
    /// Hidden layers are He-initialized; the output layer starts at zero so
    /// a fresh classifier predicts the uniform distribution.
    pub fn new<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = match &arch {
            ClassifierArch::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                if *inputs == 0 || *classes < 2 {
                    return Err(Error::invalid("classifier needs inputs and at least 2 classes"));
                }
                let mut layers = Vec::new();
                let mut prev = *inputs;
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(Linear::new(&mut store, &format!("hidden{i}"), prev, h, rng));
                    prev = h;
                }
                let out = Linear::zeros(&mut store, "out", prev, *classes);
                Layers::Mlp { hidden: layers, out }
            }
            ClassifierArch::Conv {
                height,
                width,
                channels,
                dense,
                classes,
            } => {
                if *height < 4 || *width < 4 || *classes < 2 {
                    return Err(Error::invalid("conv classifier needs at least 4x4 inputs"));
                }
                let conv1 = Linear::new(&mut store, "conv1", 9, channels[0], rng);
                let conv2 = Linear::new(&mut store, "conv2", 9 * channels[0], channels[1], rng);
                let flat = (height / 4) * (width / 4) * channels[1];
                let dense_l = Linear::new(&mut store, "dense", flat, *dense, rng);
                let out = Linear::zeros(&mut store, "out", *dense, *classes);
                Layers::Conv {
                    conv1,
                    conv2,
                    dense: dense_l,
                    out,
                }
            }
        };
        Ok(Classifier {
            arch,
            store,
            layers,
        })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Logits `[n, C]` and penultimate features `[n, d_f]` from one pass.
    pub fn forward_graph<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let shape = x.shape();
        let inputs = self.arch.inputs();
        if shape.len() != 2 || shape[1] != inputs {
            return Err(Error::shape("classifier", &[0, inputs], &shape));
        }
        let n = shape[0];
        match (&self.layers, &self.arch) {
            (Layers::Mlp { hidden, out }, _) => {
                let mut h = x;
                for l in hidden {
                    h = l.forward(p, h).relu();
                }
                Ok((out.forward(p, h), h))
            }
            (
                Layers::Conv {
                    conv1,
                    conv2,
                    dense,
                    out,
                },
                ClassifierArch::Conv {
                    height,
                    width,
                    channels,
                    ..
                },
            ) => {
                let (h, w) = (*height, *width);
                let a = x.reshape([n * h * w, 1]);
                let a = conv1
                    .forward(p, a.gather(conv3_index(n, h, w, 1), [n * h * w, 9]))
                    .relu();
                let (a, h2, w2) = avg_pool2(a, n, h, w, channels[0]);
                let a = conv2
                    .forward(
                        p,
                        a.gather(conv3_index(n, h2, w2, channels[0]), [n * h2 * w2, 9 * channels[0]]),
                    )
                    .relu();
                let (a, h3, w3) = avg_pool2(a, n, h2, w2, channels[1]);
                let flat = a.reshape([n, h3 * w3 * channels[1]]);
                let feats = dense.forward(p, flat).relu();
                Ok((out.forward(p, feats), feats))
            }
            _ => unreachable!("layers are built from the architecture"),
        }
    }

    pub fn forward(&self, x: &Array) -> Result<(Array, Array)> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let (logits, feats) = self.forward_graph(&p, g.constant(x))?;
        g.check_finite()?;
        Ok((logits.to_array(), feats.to_array()))
    }

    /// Arg-max class per row.
    pub fn predict(&self, x: &Array) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x)?;
        let c = self.classes();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Array, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Mean cross-entropy `−log softmax(logits)[c]` over rows, on the graph.
pub fn cross_entropy_graph<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    Ok(cross_entropy_rows(logits, labels)?.mean())
}

/// Per-row cross-entropy `[n]`.
pub fn cross_entropy_rows<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &[labels.len(), 0], &shape));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::UnknownClass {
            class: bad,
            classes: c,
        });
    }
    let idx: Vec<u32> = labels.iter().enumerate().map(|(i, &l)| (i * c + l) as u32).collect();
    Ok(logits.log_softmax().gather(idx.into(), [labels.len()]).neg())
}

/// Cross-entropy of a single logit row.
pub fn cross_entropy(logits: &[f64], c: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[c]
}

/// Row-wise softmax of a logits array.
pub fn softmax(logits: &Array) -> Array {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn uniform_at_init() {
        let clf = Classifier::new(ClassifierArch::mlp(2, 3), &mut stream(0, Stream::ClassifierInit, 0))
            .unwrap();
        let x = Array::matrix(2, 2, vec![0.3, -0.1, 2.0, 5.0]).unwrap();
        let (logits, feats) = clf.forward(&x).unwrap();
        assert_eq!(feats.shape(), &[2, 128]);
        for p in softmax(&logits).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_ten_class_loss() {
        assert!((cross_entropy(&[0.0; 10], 3) - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_loss_vanishes() {
        let mut logits = vec![0.0; 4];
        logits[2] = 60.0;
        assert!(cross_entropy(&logits, 2) < 1e-20);
    }

    #[test]
    fn conv_shapes_and_duplicate_rows() {
        let clf = Classifier::new(ClassifierArch::conv(14, 14, 10), &mut stream(1, Stream::ClassifierInit, 0))
            .unwrap();
        let mut rng = stream(1, Stream::Misc, 0);
        let row: Vec<f64> = (0..196).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = Array::matrix(2, 196, data).unwrap();
        let mut c = clf.clone();
        c.store.perturb(&mut rng, 0.1);
        let (logits, feats) = c.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert_eq!(feats.shape(), &[2, 64]);
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let clf = Classifier::new(ClassifierArch::mlp(3, 5), &mut stream(2, Stream::ClassifierInit, 0))
            .unwrap();
        let mut c = clf.clone();
        let mut rng = stream(2, Stream::Misc, 0);
        c.store.perturb(&mut rng, 1.0);
        let x = Array::matrix(4, 3, (0..12).map(|i| i as f64 - 6.0).collect()).unwrap();
        let (logits, _) = c.forward(&x).unwrap();
        for row in softmax(&logits).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let clf = Classifier::new(ClassifierArch::mlp(2, 3), &mut stream(0, Stream::ClassifierInit, 0))
            .unwrap();
        assert!(clf.forward(&Array::zeros(vec![1, 3])).is_err());
    }
}
