use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adaptive-moment first-order optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update; gradients are for the minimized objective.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let n = g.numel();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.param("x", Tensor::vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            adam.step(&mut store, &[(id, Tensor::vector(g))]);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        let b = store.buffer("running", Tensor::scalar(1.0));
        Adam::new(0.1).step(&mut store, &[(b, Tensor::scalar(5.0))]);
        assert_eq!(store.get(b).item(), 1.0);
    }
}
