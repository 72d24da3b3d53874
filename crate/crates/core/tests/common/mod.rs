#![allow(dead_code)]

use hagmil::autodiff::{Tape, Var};
use hagmil::rng::seeded;
use hagmil::{Result, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-7;

pub fn random_tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = seeded(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Largest relative error between tape gradients and central differences
/// of the scalar `f` with respect to every entry of every input:
/// `|g - g_fd| / max(|g|, |g_fd|, ABS_FLOOR)`.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        vars.iter().map(|v| grads.wrt(*v).unwrap()).collect()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).unwrap().to_tensor().item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[k] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Median of a non-empty slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
