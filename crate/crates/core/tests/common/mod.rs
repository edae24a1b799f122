#![allow(dead_code)]

pub mod grads;

use squidlet::{Result, Tape, Tensor};
use squidlet::tensor::Var;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

/// Compares analytic gradients of a scalar function against central
/// differences with step `H`. Returns the worst relative error.
///
/// Relative error is measured per input tensor as
/// `||a - n||_2 / max(||a||_2, ||n||_2)`.
pub fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..grads.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + H;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - H;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            diff += (grads[j] - numeric).powi(2);
            na += grads[j].powi(2);
            nn += numeric.powi(2);
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        if std::env::var("GRADCHECK_DEBUG").is_ok() {
            eprintln!("input {i}: |g| {:.3e} rel {rel:.3e}", na.sqrt());
        }
        worst = worst.max(rel);
    }
    worst
}
