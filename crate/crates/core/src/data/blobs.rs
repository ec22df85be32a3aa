use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InputMeta};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Affine shift applied to the unseen domain: rotation about the origin,
/// then isotropic scaling, then translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobShift {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl BlobShift {
    pub const NONE: BlobShift = BlobShift {
        rotation_deg: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    pub fn rotate_scale(rotation_deg: f64, scale: f64) -> Self {
        BlobShift {
            rotation_deg,
            scale,
            translation: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }
}

/// Where the class centers sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrangement {
    /// Evenly spaced on a circle of radius `radius`, first class at the top.
    Ring,
    /// On the horizontal axis, `radius` apart and centered on the origin.
    Line,
}

/// Placement of the class blobs. Each blob is a Gaussian with separate
/// standard deviations along its "radial" axis (away from the origin on a
/// ring, horizontal on a line) and the perpendicular "tangential" axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobLayout {
    pub arrangement: Arrangement,
    pub radius: f64,
    pub radial_std: f64,
    pub tangential_std: f64,
    /// Inputs are declared (and clamped) to `[−half_range, half_range]²`.
    pub half_range: f64,
}

impl Default for BlobLayout {
    fn default() -> Self {
        BlobLayout {
            arrangement: Arrangement::Ring,
            radius: 2.0,
            radial_std: 0.6,
            tangential_std: 0.3,
            half_range: 6.0,
        }
    }
}

impl BlobLayout {
    pub fn center(&self, c: usize, classes: usize) -> [f64; 2] {
        let (center, _) = self.frame(c, classes);
        center
    }

    /// Center and unit radial direction of class `c`.
    fn frame(&self, c: usize, classes: usize) -> ([f64; 2], [f64; 2]) {
        match self.arrangement {
            Arrangement::Ring => {
                let angle = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * c as f64 / classes as f64;
                let (s, co) = angle.sin_cos();
                ([self.radius * co, self.radius * s], [co, s])
            }
            Arrangement::Line => {
                let x = (c as f64 - (classes - 1) as f64 / 2.0) * self.radius;
                ([x, 0.0], [1.0, 0.0])
            }
        }
    }

    fn sample(&self, classes: usize, n_per_class: usize, seed: u64, index: u64) -> Vec<(usize, [f64; 2])> {
        let mut rng = stream(seed, Stream::Data, index);
        let radial = Normal::new(0.0, self.radial_std).expect("finite std");
        let tangential = Normal::new(0.0, self.tangential_std).expect("finite std");
        let mut out = Vec::with_capacity(classes * n_per_class);
        for _ in 0..n_per_class {
            for c in 0..classes {
                let (m, u) = self.frame(c, classes);
                let r = radial.sample(&mut rng);
                let t = tangential.sample(&mut rng);
                out.push((c, [m[0] + r * u[0] - t * u[1], m[1] + r * u[1] + t * u[0]]));
            }
        }
        out
    }
}

fn to_dataset(points: Vec<(usize, [f64; 2])>, classes: usize, tag: &str, half: f64) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(points.len() * 2);
    let mut labels = Vec::with_capacity(points.len());
    for (c, p) in points {
        inputs.push(p[0].clamp(-half, half));
        inputs.push(p[1].clamp(-half, half));
        labels.push(c);
    }
    Dataset::new(vec![2], inputs, labels, classes, tag, InputMeta::continuous(-half, half))
}

/// Source and unseen 2-d blob domains with the default layout.
pub fn make_blob_domains(
    classes: usize,
    n_per_class: usize,
    shift: BlobShift,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    make_blob_domains_with(&BlobLayout::default(), classes, n_per_class, shift, seed)
}

/// Source blobs and an independently drawn unseen sample of the same blobs
/// under `shift`. Both are label-balanced.
pub fn make_blob_domains_with(
    layout: &BlobLayout,
    classes: usize,
    n_per_class: usize,
    shift: BlobShift,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::invalid("blob domains need at least 2 classes"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("blob domains need at least one sample per class"));
    }
    if !(shift.scale.abs() > 1e-12) || !shift.scale.is_finite() {
        return Err(Error::Degenerate(format!("blob shift scale {} is degenerate", shift.scale)));
    }
    let source = layout.sample(classes, n_per_class, seed, 0);
    let unseen = layout
        .sample(classes, n_per_class, seed, 1)
        .into_iter()
        .map(|(c, p)| (c, shift.apply(p)))
        .collect();
    Ok((
        to_dataset(source, classes, "blobs-source", layout.half_range)?,
        to_dataset(unseen, classes, "blobs-unseen", layout.half_range)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fraction of `query` points whose nearest `reference` point has the same label.
    fn one_nn_agreement(reference: &Dataset, query: &Dataset) -> f64 {
        let mut hits = 0;
        for i in 0..query.len() {
            let q = query.input(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..reference.len() {
                let r = reference.input(j);
                let d = (q[0] - r[0]).powi(2) + (q[1] - r[1]).powi(2);
                if d < best.0 {
                    best = (d, reference.labels[j]);
                }
            }
            if best.1 == query.labels[i] {
                hits += 1;
            }
        }
        hits as f64 / query.len() as f64
    }

    #[test]
    fn same_seed_same_data() {
        let a = make_blob_domains(3, 50, BlobShift::rotate_scale(30.0, 1.3), 4).unwrap();
        let b = make_blob_domains(3, 50, BlobShift::rotate_scale(30.0, 1.3), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn balanced_labels() {
        let (s, u) = make_blob_domains(4, 37, BlobShift::NONE, 1).unwrap();
        assert_eq!(s.class_counts(), vec![37; 4]);
        assert_eq!(u.class_counts(), vec![37; 4]);
    }

    #[test]
    fn zero_scale_rejected() {
        let r = make_blob_domains(3, 10, BlobShift::rotate_scale(10.0, 0.0), 0);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_shift_matches_source_distribution() {
        let (s, u) = make_blob_domains(3, 400, BlobShift::NONE, 2).unwrap();
        for c in 0..3 {
            let mean = |d: &Dataset, k: usize| {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
                idx.iter().map(|&i| d.input(i)[k]).sum::<f64>() / idx.len() as f64
            };
            for k in 0..2 {
                assert!((mean(&s, k) - mean(&u, k)).abs() < 0.1);
            }
        }
        assert!(one_nn_agreement(&s, &u) > 0.97);
    }

    #[test]
    fn half_turn_destroys_one_nn_agreement() {
        let (s, same) = make_blob_domains(3, 200, BlobShift::NONE, 3).unwrap();
        let (_, turned) = make_blob_domains(3, 200, BlobShift::rotate_scale(180.0, 1.0), 3).unwrap();
        let base = one_nn_agreement(&s, &same);
        let after = one_nn_agreement(&s, &turned);
        // With three blobs at 120° spacing a half turn lands every blob
        // between the other two, so agreement collapses well below chance-free levels.
        assert!(base > 0.97, "{base}");
        assert!(after < 0.1, "{after}");
    }
}
