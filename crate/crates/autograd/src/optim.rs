//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::{Error, Gradients, ParamStore, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store, in store order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// The optimizer; a thin owner of [`AdamState`].
#[derive(Debug, Clone)]
pub struct Adam {
    state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            state: AdamState::new(store, config),
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One update of every parameter. Parameters without a gradient entry
    /// are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let st = &mut self.state;
        if st.first_moment.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                st.first_moment.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            let p = store.get(id);
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        st.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = st.config;
        let t = st.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let m = st.first_moment[id.0].data_mut();
            let v = st.second_moment[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            match grads.get(id) {
                Some(g) => {
                    for (((p, m), v), g) in p
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                    }
                }
                None => {
                    for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        if *m == 0.0 && *v == 0.0 {
                            continue;
                        }
                        *m *= beta1;
                        *v *= beta2;
                        *p -= learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn grads_for(store: &ParamStore, g: f64) -> Gradients {
        // loss = g * x, so d loss / dx = g
        let id = store.ids().next().unwrap();
        let mut graph = Graph::new(store);
        let x = graph.param(id);
        let y = graph.scale(x, g).unwrap();
        graph.backward(y).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(1.5));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = grads_for(&store, 0.0);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).item(), 1.5);
        adam.step(&mut store, &Gradients::default()).unwrap();
        assert_eq!(store.get(id).item(), 1.5);
        assert_eq!(adam.state().step, 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = grads_for(&store, 0.5);
        adam.step(&mut store, &grads).unwrap();
        // m_hat = 0.5, v_hat = 0.25: update = 0.001 * 0.5 / (0.5 + 1e-8)
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..2 {
            let grads = grads_for(&store, -2.0);
            adam.step(&mut store, &grads).unwrap();
            let now = store.get(id).item();
            assert!(now > prev);
            prev = now;
        }
        // with a constant gradient the bias-corrected ratio stays 1
        assert!((prev - 0.002).abs() < 1e-9);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut other = ParamStore::new();
        other.insert("x", Tensor::zeros(&[3]));
        let mut g = Graph::new(&other);
        let x = g.param(other.ids().next().unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(matches!(
            adam.step(&mut store, &grads),
            Err(Error::Shape { .. })
        ));
    }
}
