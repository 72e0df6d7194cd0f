use super::AutogradError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated on the first step and
/// keyed by parameter order, which must stay stable across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_state(config: AdamConfig, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self { config, step_count, m, v }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update over all parameters. `params` yields
    /// (name, values, gradient) triples in a fixed order.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), AutogradError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut [f64], &'a [f64])>,
    {
        self.step_count += 1;
        let t = self.step_count;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (idx, (name, values, grad)) in params.into_iter().enumerate() {
            if grad.iter().any(|g| g.is_nan()) {
                return Err(AutogradError::NanGrad { name: name.to_string() });
            }
            if self.m.len() == idx {
                self.m.push(vec![0.0; values.len()]);
                self.v.push(vec![0.0; values.len()]);
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            assert_eq!(m.len(), values.len(), "parameter {name} changed size between steps");
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![1.5, -2.0];
        let g = vec![0.0, 0.0];
        adam.step([("p", p.as_mut_slice(), g.as_slice())]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // hand evaluation for t=1, g=1: mhat=1, vhat=1, step = lr/(1+eps)
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![0.0];
        let g = vec![1.0];
        adam.step([("p", p.as_mut_slice(), g.as_slice())]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "got {}", p[0]);
    }

    #[test]
    fn moment_recurrences_track_hand_evaluation() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![0.0];
        let g = vec![1.0];
        adam.step([("p", p.as_mut_slice(), g.as_slice())]).unwrap();
        adam.step([("p", p.as_mut_slice(), g.as_slice())]).unwrap();
        assert_eq!(adam.step_count(), 2);
        // m2 = 0.9*0.1 + 0.1 = 0.19; v2 = 0.999*0.001 + 0.001 = 0.001999
        assert!((adam.first_moments()[0][0] - 0.19).abs() < 1e-15);
        assert!((adam.second_moments()[0][0] - 0.001999).abs() < 1e-15);
        // both bias-corrected steps are ~lr for a constant unit gradient
        assert!((p[0] + 2.0 * 1e-3).abs() < 1e-9, "got {}", p[0]);
    }

    #[test]
    fn nan_grad_names_parameter() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![0.0];
        let g = vec![f64::NAN];
        let err = adam.step([("enc.block1.conv1.weight", p.as_mut_slice(), g.as_slice())]).unwrap_err();
        assert!(err.to_string().contains("enc.block1.conv1.weight"));
    }
}
