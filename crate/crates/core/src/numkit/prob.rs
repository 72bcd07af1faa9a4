use crate::error::{Error, Result};

use super::matrix::dot;
use super::RngStream;

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit-length copy of `v`; zero-norm input is an argument error.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Argument("cannot normalize a zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// ⟨u,v⟩ / (‖u‖‖v‖), clamped to [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Argument(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Argument("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Temperature-scaled softmax, stabilized by subtracting the maximum.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `n` draws of −ln(−ln U), U ~ Uniform(0, 1).
pub fn gumbel_noise(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| -(-rng.open_uniform().ln()).ln()).collect()
}

/// Gumbel-softmax with caller-supplied noise. In hard mode the result is the
/// one-hot of the perturbed soft argmax.
pub fn gumbel_softmax_with_noise(
    logits: &[f64],
    temperature: f64,
    noise: &[f64],
    hard: bool,
) -> Result<Vec<f64>> {
    if noise.len() != logits.len() {
        return Err(Error::Argument(format!(
            "{} noise values for {} logits",
            noise.len(),
            logits.len()
        )));
    }
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l + g).collect();
    let soft = softmax(&perturbed, temperature)?;
    if !hard {
        return Ok(soft);
    }
    let hot = argmax(&soft);
    Ok((0..soft.len()).map(|i| if i == hot { 1.0 } else { 0.0 }).collect())
}

pub fn gumbel_softmax(
    logits: &[f64],
    temperature: f64,
    rng: &mut RngStream,
    hard: bool,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_softmax_with_noise(logits, temperature, &noise, hard)
}
