use crate::error::{Error, Result};
use crate::numeric::Array;

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is perturbed by `±h` in turn. A non-finite evaluation is
/// reported as a numeric failure naming the coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Array, h: f64) -> Result<Array>
where
    F: FnMut(&Array) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric {
                node: i,
                op: "finite_diff",
            });
        }
        out.push((up - down) / (2.0 * h));
    }
    Array::new(x.shape().to_vec(), out)
}
