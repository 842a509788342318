use crate::error::{Error, Result};
use crate::nets::ParameterSet;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates taken so far.
    pub t: u64,
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParameterSet<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            let mut s = ParameterSet::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape().to_vec())).expect("unique names");
            }
            s
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. `grads` follow the name order of `params`.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((name, p), gr), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().map(|(_, m)| m).zip(self.v.iter_mut().map(|(_, v)| v)))
        {
            if gr.shape() != p.shape() {
                return Err(Error::InvalidArgument(format!("gradient shape mismatch for {name}")));
            }
            for (((x, &g), mi), vi) in p.data_mut().iter_mut().zip(gr.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.to_f64_lossy();
                let m1 = self.beta1 * mi.to_f64_lossy() + (1.0 - self.beta1) * g;
                let v1 = self.beta2 * vi.to_f64_lossy() + (1.0 - self.beta2) * g * g;
                *mi = T::of(m1);
                *vi = T::of(v1);
                let step = self.lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                *x = T::of(x.to_f64_lossy() - step);
            }
        }
        Ok(())
    }
}
