use crate::error::{PanError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn matches(&self, params: &[&Tensor]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel())
    }
}

/// One bias-corrected Adam update, tensor by tensor in the given order.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(PanError::usage(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - (hyper.beta1 as f64).powi(t);
    let c2 = 1.0 - (hyper.beta2 as f64).powi(t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(PanError::usage(format!("adam_step: size mismatch on tensor {i}")));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] as f64 / c1;
            let v_hat = v[k] as f64 / c2;
            *w -= (hyper.learning_rate as f64 * m_hat / (v_hat.sqrt() + hyper.epsilon as f64)) as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 && norm > 0.0 {
        let s = (max_norm as f64 / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grad: f32, steps: usize, hyper: AdamConfig) -> (Vec<f32>, f32) {
        let mut p = Tensor::zeros(&[3]);
        let mut state = AdamState::new(&[&p]);
        let mut last = 0.0;
        for _ in 0..steps {
            let before = p.data()[0];
            adam_step(&mut [&mut p], &[vec![grad; 3]], &mut state, &hyper).unwrap();
            last = p.data()[0] - before;
        }
        (p.into_data(), last)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_fn(&[4], |i| i as f32 * 0.3 - 0.5);
        let before = p.clone();
        let mut state = AdamState::new(&[&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[vec![0.0; 4]], &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr_times_normalised_gradient() {
        let hyper = AdamConfig::default();
        for g in [1e-3f32, 0.05, 2.0, -7.5] {
            let (_, step) = run(g, 1, hyper);
            let expected = -hyper.learning_rate * g / (g.abs() + hyper.epsilon);
            assert!((step - expected).abs() <= 1e-6, "g={g}: {step} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let hyper = AdamConfig::default();
        for g in [0.01f32, -3.0] {
            let (_, step) = run(g, 500, hyper);
            assert!((step.abs() - hyper.learning_rate).abs() <= 0.01 * hyper.learning_rate);
            assert_eq!(step.signum(), -g.signum());
        }
    }

    #[test]
    fn mismatched_buffers_are_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p]);
        let err = adam_step(&mut [&mut p], &[vec![0.0; 3]], &mut state, &AdamConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
        let mut small = vec![vec![0.1f32]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
