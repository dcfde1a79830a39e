use crate::error::{Error, Result};
use crate::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`,
    /// then clears every gradient.
    ///
    /// All gradients are checked before anything is written, so a missing
    /// gradient leaves every parameter untouched.
    pub fn step(&self, params: &mut [&mut Param]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            let (momentum, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            let values: Vec<f64> = p.value.data().to_vec();
            let v = p.velocity_mut();
            for ((vi, gi), xi) in v.iter_mut().zip(&grad).zip(&values) {
                *vi = momentum * *vi + gi + wd * xi;
            }
            let v = v.clone();
            for (xi, vi) in p.value.data_mut().iter_mut().zip(&v) {
                *xi -= lr * vi;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(params: &mut [&mut Param], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    Sgd {
        lr,
        momentum,
        weight_decay,
    }
    .step(params)
}
