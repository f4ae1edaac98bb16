//! Central finite differences, used by test suites as an oracle that is
//! independent of the backward pass.

use ndarray::ArrayD;

/// Numerical gradient of `f` at `xs` by central differences, one array per input.
pub fn numeric_grad<F>(f: F, xs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut g = ArrayD::<f64>::zeros(xs[i].raw_dim());
        for j in 0..xs[i].len() {
            let mut plus: Vec<ArrayD<f64>> = xs.to_vec();
            let mut minus: Vec<ArrayD<f64>> = xs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += eps;
            minus[i].as_slice_mut().unwrap()[j] -= eps;
            g.as_slice_mut().unwrap()[j] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between two gradient sets, with an absolute floor
/// so near-zero entries do not explode the ratio.
pub fn max_rel_err(got: &[ArrayD<f64>], want: &[ArrayD<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (g, w) in got.iter().zip(want) {
        for (a, b) in g.iter().zip(w.iter()) {
            let denom = a.abs().max(b.abs()).max(floor);
            worst = worst.max((a - b).abs() / denom);
        }
    }
    worst
}
