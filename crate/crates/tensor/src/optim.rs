use serde::{Deserialize, Serialize};

use crate::{ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched.
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    lr_scale: Vec<f64>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; consumes the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<Option<Tensor<T>>>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.step as i32));
        let eps = T::c(c.eps);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let lr = T::c(c.lr * self.lr_scale[id.index()]);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).value.data_mut();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, InitSpec};

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", &[2], InitSpec::Constant(3.0)).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let l = g.sum_all(sq);
            let grads = g.backward(l).unwrap().param_grads(&store);
            adam.step(&mut store, grads);
        }
        assert!(store.get(id).value.data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", &[1], InitSpec::Constant(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, vec![Some(Tensor::from_f64(vec![1], &[0.5]).unwrap())]);
        assert!((store.get(id).value.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn lr_scale_applies_per_parameter() {
        let mut store = ParamStore::<f64>::new(0);
        let a = store.add("a", &[1], InitSpec::Constant(1.0)).unwrap();
        let b = store.add("b", &[1], InitSpec::Constant(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.set_lr_scale(b, 0.1);
        let g = || Some(Tensor::from_f64(vec![1], &[2.0]).unwrap());
        adam.step(&mut store, vec![g(), g()]);
        assert!((store.get(a).value.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((store.get(b).value.data()[0] - (1.0 - 1e-4)).abs() < 1e-9);
    }
}
