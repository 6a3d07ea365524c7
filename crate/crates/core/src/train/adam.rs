use crate::{Error, ParamStore, Result, Scalar};

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Updates every trainable parameter from its stored gradient, then clears the gradients.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.is_empty() {
            let sizes: Vec<usize> = store.ids().map(|id| store.get(id).len()).collect();
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
        if self.m.len() != store.len() {
            return Err(Error::usage("parameter set changed between optimizer steps"));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id);
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::usage(format!("parameter `{}` has no gradient", store.name(id))));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let g: Vec<f64> = t.grad.take().expect("checked above").iter().map(|x| x.to_f64_lossy()).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let upd = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x = T::of(x.to_f64_lossy() - upd);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
