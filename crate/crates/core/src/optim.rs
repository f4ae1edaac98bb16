//! Plain-array optimizers applied outside the autodiff tape.

use ndarray::ArrayD;

/// SGD with classical momentum and decoupled-from-nothing weight decay
/// (decay is added to the gradient, matching the usual formulation).
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let mut eff = g.clone();
            if self.weight_decay != 0.0 {
                eff = eff + &p.mapv(|x| x * self.weight_decay);
            }
            *v = v.mapv(|x| x * self.momentum) + &eff;
            *p = &*p - &v.mapv(|x| x * self.lr);
        }
    }
}
