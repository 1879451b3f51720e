use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step and must stay congruent with the parameter list afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update using each parameter's stored gradient. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        for (index, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence { index });
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Input(
                "adam: parameter list changed between steps".into(),
            ));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.t as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                data[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f32) -> f32 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f32> = g.iter().map(|x| x * s).collect();
                p.set_grad(Some(scaled)).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec())
            .unwrap()
            .with_grad();
        t.set_grad(Some(grad.to_vec())).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![param(&[1.0, -2.0, 3.0], &[0.0, 0.0, 0.0])];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let mut params = vec![param(&[0.5], &[1.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut params).unwrap();
        let delta = 0.5 - params[0].data()[0];
        assert!((delta - 0.1).abs() < 1e-6, "delta {delta}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = vec![param(&[0.0], &[1.0]), param(&[0.0], &[f32::NAN])];
        let err = Adam::new(AdamConfig::default())
            .step(&mut params)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { index: 1 }));
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut params = vec![param(&[0.3, 0.7], &[0.1, -0.2])];
            let mut adam = Adam::new(AdamConfig::default());
            for i in 0..20 {
                let g = vec![0.1 * i as f32, -0.05];
                params[0].set_grad(Some(g)).unwrap();
                adam.step(&mut params).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut params = vec![param(&[0.0, 0.0], &[3.0, 4.0])];
        let before = clip_grad_norm(&mut params, 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        let g = params[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }
}
