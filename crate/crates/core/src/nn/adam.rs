//! Adaptive-moment optimizer with bias correction.

use ndarray::{Array1, Array2};

use super::{DenseNetwork, Gradients, NnError};

/// Adam state for one network: first/second moment accumulators per
/// parameter plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
}

impl AdamState {
    /// Default hyper-parameters: step size 1e-3, decays 0.9/0.999, eps 1e-8.
    pub fn new(net: &DenseNetwork) -> Self {
        Self::with_learning_rate(net, 1e-3)
    }

    pub fn with_learning_rate(net: &DenseNetwork, learning_rate: f64) -> Self {
        let zeros = Gradients::zeros_like(net);
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m_weights: zeros.weights.clone(),
            v_weights: zeros.weights,
            m_biases: zeros.biases.clone(),
            v_biases: zeros.biases,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients) -> Result<(), NnError> {
        self.check_gradients(net, grads)?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            update(
                layer.weights.iter_mut(),
                grads.weights[i].iter(),
                self.m_weights[i].iter_mut(),
                self.v_weights[i].iter_mut(),
                self.beta1,
                self.beta2,
                self.learning_rate,
                self.epsilon,
                c1,
                c2,
            );
            update(
                layer.biases.iter_mut(),
                grads.biases[i].iter(),
                self.m_biases[i].iter_mut(),
                self.v_biases[i].iter_mut(),
                self.beta1,
                self.beta2,
                self.learning_rate,
                self.epsilon,
                c1,
                c2,
            );
        }
        Ok(())
    }

    fn check_gradients(&self, net: &DenseNetwork, grads: &Gradients) -> Result<(), NnError> {
        if grads.weights.len() != net.layers.len() || grads.biases.len() != net.layers.len() {
            return Err(NnError::TraceMismatch);
        }
        let mut index = 0usize;
        for (i, layer) in net.layers.iter().enumerate() {
            if grads.weights[i].raw_dim() != layer.weights.raw_dim()
                || grads.biases[i].raw_dim() != layer.biases.raw_dim()
            {
                return Err(NnError::TraceMismatch);
            }
            for &g in grads.weights[i].iter() {
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGradient { index });
                }
                index += 1;
            }
            for &g in grads.biases[i].iter() {
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGradient { index });
                }
                index += 1;
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    beta1: f64,
    beta2: f64,
    lr: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for (((p, &g), m), v) in params.zip(grads).zip(m).zip(v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseNetwork;

    fn toy_net() -> DenseNetwork {
        DenseNetwork::init(2, &[3], 1, 0.0, 7).unwrap()
    }

    fn flat_params(net: &DenseNetwork) -> Vec<f64> {
        net.layers()
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = toy_net();
        let before = flat_params(&net);
        let mut adam = AdamState::new(&net);
        let grads = Gradients::zeros_like(&net);
        adam.step(&mut net, &grads).unwrap();
        assert_eq!(before, flat_params(&net));
    }

    #[test]
    fn single_step_magnitude_equals_step_size() {
        // With zero state and g = 1 the bias-corrected moments cancel and
        // the update is lr / (1 + eps) in magnitude.
        let mut net = toy_net();
        let before = flat_params(&net);
        let mut adam = AdamState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        for gw in &mut grads.weights {
            gw.fill(1.0);
        }
        for gb in &mut grads.biases {
            gb.fill(1.0);
        }
        adam.step(&mut net, &grads).unwrap();
        for (b, a) in before.iter().zip(flat_params(&net)) {
            let delta = b - a;
            assert!((delta - 1e-3).abs() < 1e-10, "delta {delta}");
        }
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut net = toy_net();
        let before = flat_params(&net);
        let mut adam = AdamState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        for gw in &mut grads.weights {
            gw.fill(0.5);
        }
        for gb in &mut grads.biases {
            gb.fill(-0.25);
        }
        for _ in 0..200 {
            adam.step(&mut net, &grads).unwrap();
        }
        let after = flat_params(&net);
        let n_w: usize = net.layers()[0].weights.len() + net.layers()[1].weights.len();
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            // weights come first per layer; their gradient is +0.5 so they
            // must decrease, biases (-0.25) must increase
            let weight_slot = i < net.layers()[0].weights.len()
                || (net.layers()[0].weights.len() + net.layers()[0].biases.len() <= i
                    && i < net.layers()[0].weights.len() + net.layers()[0].biases.len() + net.layers()[1].weights.len());
            if weight_slot {
                assert!(a < b, "weight param {i} did not descend");
            } else {
                assert!(a > b, "bias param {i} did not ascend");
            }
        }
        let _ = n_w;
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_index() {
        let mut net = toy_net();
        let mut adam = AdamState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0][[1, 0]] = f64::NAN;
        match adam.step(&mut net, &grads) {
            Err(NnError::NonFiniteGradient { index }) => assert_eq!(index, 2),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }
}
