use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value range of a dataset and its quantization step, if discrete.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMeta {
    pub low: f64,
    pub high: f64,
    /// Grid spacing of discrete data; `None` for continuous inputs.
    pub quant_step: Option<f64>,
}

const RANGE_SLACK: f64 = 1e-9;

impl InputMeta {
    pub fn continuous(low: f64, high: f64) -> Self {
        InputMeta {
            low,
            high,
            quant_step: None,
        }
    }

    pub fn quantized(low: f64, high: f64, step: f64) -> Self {
        InputMeta {
            low,
            high,
            quant_step: Some(step),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.high > self.low) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::invalid(format!(
                "input range [{}, {}] is empty",
                self.low, self.high
            )));
        }
        if let Some(q) = self.quant_step {
            if !(q > 0.0) {
                return Err(Error::invalid("quantization step must be positive"));
            }
        }
        Ok(())
    }

    /// Width of the continuous support: dequantized values reach up to
    /// `high + step`.
    pub fn width(&self) -> f64 {
        self.high - self.low + self.quant_step.unwrap_or(0.0)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.low - RANGE_SLACK && v <= self.high + RANGE_SLACK
    }

    /// Constant `log|det|` of [`preprocess`] for `dim` coordinates.
    pub fn logdet(&self, dim: usize) -> f64 {
        -(dim as f64) * self.width().ln()
    }
}

/// Maps raw inputs into model space `[−0.5, 0.5]`.
///
/// Discrete inputs are dequantized first: with `rng` each coordinate gets
/// `u·step`, `u ~ U[0, 1)`; without it the bin midpoint (`u = 0.5`) is used so
/// evaluation is deterministic.
pub fn preprocess<R: Rng + ?Sized>(raw: &[f64], meta: &InputMeta, rng: Option<&mut R>) -> Result<Vec<f64>> {
    if let Some((i, v)) = raw.iter().enumerate().find(|(_, v)| !meta.contains(**v)) {
        return Err(Error::invalid(format!(
            "input coordinate {i} = {v} outside declared range [{}, {}]",
            meta.low, meta.high
        )));
    }
    let width = meta.width();
    let mut out: Vec<f64> = raw.to_vec();
    if let Some(step) = meta.quant_step {
        match rng {
            Some(r) => out.iter_mut().for_each(|v| *v += step * r.gen::<f64>()),
            None => out.iter_mut().for_each(|v| *v += 0.5 * step),
        }
    }
    out.iter_mut().for_each(|v| *v = (*v - meta.low) / width - 0.5);
    Ok(out)
}

/// Inverse of the affine part of [`preprocess`]; discrete data is snapped
/// back onto its grid and clamped into the declared range.
pub fn invert(x: &[f64], meta: &InputMeta) -> Vec<f64> {
    let width = meta.width();
    x.iter()
        .map(|v| {
            let raw = (v + 0.5) * width + meta.low;
            let raw = match meta.quant_step {
                Some(step) => meta.low + ((raw - meta.low) / step).floor() * step,
                None => raw,
            };
            raw.clamp(meta.low, meta.high)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream, Rng as StreamRng};

    #[test]
    fn continuous_unit_range_is_a_shift() {
        let meta = InputMeta::continuous(0.0, 1.0);
        let x = preprocess::<StreamRng>(&[0.0, 0.25, 1.0], &meta, None).unwrap();
        assert_eq!(x, vec![-0.5, -0.25, 0.5]);
        assert_eq!(meta.logdet(3), 0.0);
    }

    #[test]
    fn eight_bit_zero_lands_in_first_bin() {
        let meta = InputMeta::quantized(0.0, 255.0, 1.0);
        let mut rng = stream(0, Stream::Dequantize, 0);
        for _ in 0..1000 {
            let x = preprocess(&[0.0], &meta, Some(&mut rng)).unwrap()[0];
            assert!(x >= -0.5 && x < -0.5 + 1.0 / 256.0, "{x}");
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let meta = InputMeta::continuous(0.0, 1.0);
        assert!(preprocess::<StreamRng>(&[1.5], &meta, None).is_err());
    }

    #[test]
    fn roundtrip_within_one_step() {
        let meta = InputMeta::quantized(0.0, 1.0, 1.0 / 255.0);
        let raw: Vec<f64> = (0..=255).map(|k| k as f64 / 255.0).collect();
        let mut rng = stream(1, Stream::Dequantize, 0);
        let x = preprocess(&raw, &meta, Some(&mut rng)).unwrap();
        for (a, b) in invert(&x, &meta).iter().zip(&raw) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
}
