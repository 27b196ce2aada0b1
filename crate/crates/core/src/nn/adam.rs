use serde::{Deserialize, Serialize};

use super::graph::NetworkGraph;
use super::params::Params;
use crate::error::Result;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-5, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates plus the bias-correction step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(graph: &NetworkGraph, config: AdamConfig) -> Result<Self> {
        Ok(Adam { config, m: Params::zeros(graph)?, v: Params::zeros(graph)?, t: 0 })
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let corr2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let tensors = params.tensors_mut().zip(grads.tensors()).zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::rng_from_seed;
    use crate::nn::graph::{build_network, NetworkKind};
    use num_rational::Ratio;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let g = build_network(NetworkKind::Discriminator, 3, (16, 16), Ratio::new(1, 8)).unwrap();
        let mut p = Params::<f64>::init(&g, &mut rng_from_seed(2)).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(&g, AdamConfig::default()).unwrap();
        adam.step(&mut p, &Params::zeros(&g).unwrap());
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let g = build_network(NetworkKind::Discriminator, 3, (16, 16), Ratio::new(1, 8)).unwrap();
        let mut p = Params::<f64>::zeros(&g).unwrap();
        let mut grads = Params::zeros(&g).unwrap();
        grads.fill(3.0);
        let mut adam = Adam::new(&g, AdamConfig { learning_rate: 0.01, epsilon: 0.0, ..Default::default() }).unwrap();
        adam.step(&mut p, &grads);
        assert!(p.tensors().flatten().all(|&v| (v + 0.01).abs() < 1e-12));
    }
}
