//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use ditune_core::{Graph, Result, Tensor, Var};

/// Central-difference gradient of `f` with respect to every element of every input.
pub fn finite_difference(
    inputs: &[Tensor<f64>],
    step: f64,
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Vec<Vec<f64>> {
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).data()[0]
    };
    let mut grads = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut gi = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            gi.push((eval(&plus) - eval(&minus)) / (2.0 * step));
        }
        grads.push(gi);
    }
    grads
}

/// Analytic gradients from the tape.
pub fn analytic(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    vars.iter()
        .map(|v| {
            g.grad(*v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(*v).len()])
        })
        .collect()
}

/// Largest elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(a: &[Vec<f64>], n: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn gradcheck(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let a = analytic(inputs, f);
    let n = finite_difference(inputs, 1e-5, f);
    max_rel_err(&a, &n, 1e-2)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
