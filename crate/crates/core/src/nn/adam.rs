use super::Param;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Adam without weight decay. Moment buffers are keyed by parameter order.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter, then zero its gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    let n = if p.wants_grad() { p.numel() } else { 0 };
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.wants_grad() {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                p.value[i] -= (learning_rate * m_hat / (v_hat.sqrt() + epsilon)) as f32;
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::weight("w", vec![2], vec![1.0, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p]);
        // Bias-corrected first step is lr·sign(g) up to epsilon.
        assert!((p.value[0] - (1.0 - 1e-4)).abs() < 1e-7);
        assert!((p.value[1] - (-1.0 + 1e-4)).abs() < 1e-7);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Param::weight("w", vec![1], vec![5.0]);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            p.grad = vec![2.0 * p.value[0]];
            adam.step(&mut [&mut p]);
        }
        assert!(p.value[0].abs() < 0.05, "{}", p.value[0]);
    }
}
