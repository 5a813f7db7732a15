use super::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// AdamW with decoupled weight decay: the decay shrinks the value directly
/// and never enters the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) {
        assert_eq!(self.m.len(), params.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, b1, b2, eps) = (T::lit(c.lr), T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let decay = T::one() - T::lit(c.lr * c.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (val, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, g), mi), vi) in val.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *x *= decay;
                *mi = b1 * *mi + (T::one() - b1) * *g;
                *vi = b2 * *vi + (T::one() - b2) * *g * *g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
