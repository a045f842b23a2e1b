//! Finite-difference oracles shared by the unit tests.

use crate::tensor::{Real, Result, Tape, Tensor, Var};

pub(crate) type Builder<T> = dyn Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>;

/// Central-difference oracle; returns (analytic, numeric) flattened per input.
pub(crate) fn fd_pair<T: Real>(inputs: &[Tensor<T>], f: &Builder<T>, eps: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let leaves: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().iter().map(|g| g.as_f64()).collect())
        .collect();
    drop(tape);

    let eval = |ts: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.value(l)[0].as_f64()
    };
    let mut out = Vec::new();
    for (i, a) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[i].data()[j].as_f64();
            plus[i].data_mut()[j] = T::lit(x + eps);
            minus[i].data_mut()[j] = T::lit(x - eps);
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * eps));
        }
        out.push((a, numeric));
    }
    out
}

pub(crate) fn normwise_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|x| x.abs()).fold(1e-12, f64::max);
    diff / scale
}

pub(crate) fn assert_grads<T: Real>(inputs: &[Tensor<T>], f: &Builder<T>, eps: f64, tol: f64) {
    for (i, (a, n)) in fd_pair(inputs, f, eps).iter().enumerate() {
        let e = normwise_err(a, n);
        assert!(
            e <= tol,
            "input {i}: rel err {e:e} > {tol:e}\nanalytic {a:?}\nnumeric {n:?}"
        );
    }
}
