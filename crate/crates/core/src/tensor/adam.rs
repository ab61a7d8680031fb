use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub steps: Vec<u64>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (mut steps, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for n in sizes {
            steps.push(0);
            m.push(vec![T::zero(); n]);
            v.push(vec![T::zero(); n]);
        }
        AdamState { steps, m, v }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        Adam {
            config,
            state: AdamState::new(sizes),
        }
    }

    /// One bias-corrected Adam update. Parameters whose gradient is `None`
    /// were not reached by the loss and are left untouched, moments included.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Option<Vec<T>>], lr: f64) {
        self.step_with(params, grads, |_| lr);
    }

    /// Like [`step`](Self::step) with a learning rate per parameter tensor.
    pub fn step_with<F: Fn(usize) -> f64>(&mut self, params: &mut [Vec<T>], grads: &[Option<Vec<T>>], lr: F) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.state.m.len());
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.state.steps[i] += 1;
            let t = self.state.steps[i] as i32;
            let c1 = T::of(lr(i) / (1.0 - beta1.powi(t)));
            let c2 = T::of(1.0 / (1.0 - beta2.powi(t)));
            let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                p[j] -= c1 * m[j] / ((v[j] * c2).sqrt() + e);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), [2]);
        let mut params = vec![vec![1.0, -1.0]];
        adam.step(&mut params, &[Some(vec![0.5, -3.0])], 0.1);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((params[0][0] - 0.9).abs() < 1e-6);
        assert!((params[0][1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut adam = Adam::<f32>::new(AdamConfig::default(), [3]);
        let mut params = vec![vec![0.25f32, 2.0, -7.5]];
        let before = params.clone();
        adam.step(&mut params, &[Some(vec![1.0, 2.0, 3.0])], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn missing_gradient_leaves_parameter_and_moments() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), [1, 1]);
        let mut params = vec![vec![1.0], vec![2.0]];
        adam.step(&mut params, &[Some(vec![1.0]), None], 0.01);
        assert_eq!(params[1], vec![2.0]);
        assert_eq!(adam.state.steps, vec![1, 0]);
        assert_eq!(adam.state.m[1], vec![0.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![Some(vec![3.0f64]), None, Some(vec![4.0])];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((grads[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }
}
