use crate::error::{Error, Result};

/// Largest double strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, branching on the sign of `z` so `exp` never overflows.
///
/// The result always lies in the open interval (0, 1): far in the tails it
/// saturates at `f64::MIN_POSITIVE` and at the largest double below one
/// instead of rounding to exactly 0 or 1.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// `tanh` kept inside the open interval (-1, 1).
pub fn bounded_tanh(z: f64) -> f64 {
    z.tanh().clamp(-ONE_MINUS_ULP, ONE_MINUS_ULP)
}

/// Numerically stable softmax (max subtraction). Every output is strictly
/// positive: probabilities that would underflow are floored at
/// `f64::MIN_POSITIVE` before normalisation.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(values: &mut [f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("softmax input has non-finite entries"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp().max(f64::MIN_POSITIVE);
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
    Ok(())
}
