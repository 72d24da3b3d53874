//! Scalar kernels shared by the tape and the tensor-level functional API.

use rand::Rng;

use crate::error::{HagError, Result};
use crate::tensor::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the exact error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Returns `(xhat, inv_std)` for each row of width `d`.
pub(crate) fn normalize_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / d.max(1));
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|v| (v - mean) * is));
    }
    (xhat, inv_std)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        Err(HagError::LabelOutOfRange { label, classes })
    } else {
        Ok(())
    }
}

pub(crate) fn cross_entropy_smoothed_with_grad(logits: &[f64], label: usize, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    check_label(label, c)?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(HagError::InvalidArgument(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    let off = if c > 1 { epsilon / (c - 1) as f64 } else { 0.0 };
    let target: Vec<f64> = (0..c)
        .map(|j| if j == label { 1.0 - if c > 1 { epsilon } else { 0.0 } } else { off })
        .collect();
    let lse = log_sum_exp(logits);
    let loss = -target
        .iter()
        .zip(logits)
        .map(|(t, z)| if *t == 0.0 { 0.0 } else { t * (z - lse) })
        .sum::<f64>();
    let grad = logits.iter().zip(&target).map(|(z, t)| (z - lse).exp() - t).collect();
    Ok((loss, grad))
}

pub(crate) fn smooth_top1_svm_with_grad(logits: &[f64], label: usize, tau: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    check_label(label, c)?;
    if !(tau > 0.0) {
        return Err(HagError::InvalidArgument(format!("tau={tau} must be > 0")));
    }
    let zy = logits[label];
    let s: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let margin = if j == label { 0.0 } else { alpha };
            (z + margin - zy) / tau
        })
        .collect();
    let lse = log_sum_exp(&s);
    let loss = tau * lse;
    let p: Vec<f64> = s.iter().map(|v| (v - lse).exp()).collect();
    let grad = (0..c).map(|j| if j == label { p[j] - 1.0 } else { p[j] }).collect();
    Ok((loss, grad))
}

// Tensor-level functional forms. These do not record on a tape.

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts_unchecked(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
}

pub fn layer_norm(h: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let d = h.cols();
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(HagError::ShapeMismatch {
            op: "layer_norm",
            left: h.shape().to_vec(),
            right: vec![gamma.len()],
        });
    }
    let (mut out, _) = normalize_rows(h.data(), d, eps);
    for row in out.chunks_mut(d) {
        for j in 0..d {
            row[j] = row[j] * gamma[j] + beta[j];
        }
    }
    Ok(Tensor::from_parts_unchecked(h.shape().to_vec(), out))
}

/// Softmax over all elements of `v`, computed with max subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(HagError::Empty("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn cross_entropy_smoothed(logits: &[f64], label: usize, epsilon: f64) -> Result<f64> {
    cross_entropy_smoothed_with_grad(logits, label, epsilon).map(|(l, _)| l)
}

pub fn smooth_top1_svm(logits: &[f64], label: usize, tau: f64, alpha: f64) -> Result<f64> {
    smooth_top1_svm_with_grad(logits, label, tau, alpha).map(|(l, _)| l)
}

/// Inverted dropout on a plain tensor; identity when `training` is false.
pub fn dropout<R: Rng + ?Sized>(h: &Tensor, p: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(HagError::InvalidArgument(format!("dropout p={p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(h.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let data = h
        .data()
        .iter()
        .map(|&v| if rng.gen::<f64>() < p { 0.0 } else { v * keep })
        .collect();
    Ok(Tensor::from_parts_unchecked(h.shape().to_vec(), data))
}
