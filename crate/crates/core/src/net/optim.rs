use super::network::Parameter;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `w <- w - lr * v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [Parameter], lr: f64) {
        for p in params {
            let m = self.momentum;
            p.momentum.zip_mut_with(&p.grad, |v, &g| *v = m * *v + g);
            p.value.scaled_add(-lr, &p.momentum);
        }
    }
}

/// Exponentially decayed learning rate at (zero-based) `epoch`.
pub fn learning_rate(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}
