//! Central finite-difference oracle for analytic gradients.
//!
//! Used by unit tests and the acceptance suite; it only evaluates the scalar
//! function and never looks at the backward pass it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::tensor::Array;

/// Uniform `[-1, 1)` array from a fixed seed.
pub fn rand_array(shape: &[usize], seed: u64) -> Array<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_gradient(
    inputs: &[Array<f64>],
    f: impl Fn(&[Array<f64>]) -> f64,
    step: f64,
) -> Vec<Array<f64>> {
    let mut xs = inputs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        let mut g = Array::zeros(xs[k].shape());
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + step;
            let fp = f(&xs);
            xs[k].data_mut()[i] = orig - step;
            let fm = f(&xs);
            xs[k].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Largest entrywise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[Array<f64>], numeric: &[Array<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let den = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / den);
        }
    }
    worst
}

/// Panics if the analytic gradient disagrees with central differences
/// (step 1e-4) by more than `tol` relative error.
pub fn check_gradient(
    inputs: &[Array<f64>],
    f: impl Fn(&[Array<f64>]) -> f64,
    grads: impl Fn(&[Array<f64>]) -> Vec<Array<f64>>,
    tol: f64,
) {
    let analytic = grads(inputs);
    let numeric = numeric_gradient(inputs, f, 1e-4);
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(
        err <= tol,
        "gradient mismatch: max relative error {err:e} > {tol:e}"
    );
}

/// [`check_gradient`] for a graph built on a fresh tape from leaf inputs.
pub fn check_tape_gradient(
    inputs: &[Array<f64>],
    build: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    tol: f64,
) {
    let eval = |xs: &[Array<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        build(&tape, &vars).item()
    };
    let grads = |xs: &[Array<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&tape, &vars);
        let g = tape.backward(loss);
        vars.iter()
            .map(|&v| {
                g.get(v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(v.value().shape()))
            })
            .collect()
    };
    check_gradient(inputs, eval, grads, tol);
}
