use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter of one store.
#[derive(Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f32>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            config,
            steps: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update for the given gradients. Parameters without a
    /// gradient entry are left untouched (their moments do not decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(*id).data_mut();
            for (((pi, gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }

    /// Moments as a parameter store (`m/<name>`, `v/<name>`, plus a `steps` scalar).
    pub fn state_store(&self, params: &ParamStore) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("steps", Tensor::scalar(self.steps as f32));
        for id in params.ids() {
            let shape = params.get(id).shape();
            s.add(
                format!("m/{}", params.name(id)),
                Tensor::new(shape, self.m[id.0].clone()).expect("moment shape"),
            );
            s.add(
                format!("v/{}", params.name(id)),
                Tensor::new(shape, self.v[id.0].clone()).expect("moment shape"),
            );
        }
        s
    }

    pub fn restore(params: &ParamStore, state: &ParamStore, config: AdamConfig) -> Result<Self> {
        let missing = |n: &str| TensorError::Format(format!("optimizer state lacks {n}"));
        let steps = state.find("steps").ok_or_else(|| missing("steps"))?;
        let mut adam = Adam::new(params, config);
        adam.steps = state.get(steps).item() as u64;
        for id in params.ids() {
            let name = params.name(id);
            let m = state.find(&format!("m/{name}")).ok_or_else(|| missing(name))?;
            let v = state.find(&format!("v/{name}")).ok_or_else(|| missing(name))?;
            adam.m[id.0] = state.get(m).data().to_vec();
            adam.v[id.0] = state.get(v).data().to_vec();
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::with_lr(0.1));
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, p, true);
            let s = g.square(x);
            let loss = g.sum(s);
            let grads = g.backward(loss).for_store(&store);
            adam.step(&mut store, &grads);
        }
        assert!(store.get(p).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::with_lr(0.01));
        adam.step(&mut store, &[(p, Tensor::new(&[2], vec![0.5, -0.5]).unwrap())]);
        let st = ParamStore::from_bytes(&adam.state_store(&store).to_bytes()).unwrap();
        let back = Adam::restore(&store, &st, adam.config).unwrap();
        assert_eq!(back.steps, 1);
        assert_eq!(back.m, adam.m);
        assert_eq!(back.v, adam.v);
    }
}
