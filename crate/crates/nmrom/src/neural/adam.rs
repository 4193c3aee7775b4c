//! Adam optimizer state with bias correction.

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over parameter/gradient slots. Slot order
    /// and shapes must stay stable across calls.
    pub fn step(&mut self, slots: &mut [(&mut Tensor, &Tensor)], lr: f64) {
        if self.first.is_empty() {
            for (p, _) in slots.iter() {
                self.first.push(vec![0.0; p.len()]);
                self.second.push(vec![0.0; p.len()]);
            }
        }
        debug_assert_eq!(self.first.len(), slots.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, (param, grad)) in slots.iter_mut().enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let pd = param.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                let g = gd[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut [(&mut p, &g)], 0.1);
        // m_hat / sqrt(v_hat) = g / |g| at t = 1 for |g| >> eps
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut adam = AdamState::new();
        adam.step(&mut [(&mut p, &g)], 0.5);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_steps_match_hand_computed_moments() {
        let g_val = 0.3f64;
        let lr = 0.01;
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![g_val]).unwrap();
        let mut adam = AdamState::new();
        // hand-rolled two updates
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g_val;
            v = b2 * v + (1.0 - b2) * g_val * g_val;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat: f64 = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        adam.step(&mut [(&mut p, &g)], lr);
        adam.step(&mut [(&mut p, &g)], lr);
        assert!((p.data()[0] - x).abs() < 1e-15);
    }
}
