//! Adam and the feature-noise annealing schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments mirroring `params`.
    pub fn new(params: &[&Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn with_defaults(params: &[&Tensor], lr: f64) -> Self {
        Self::new(params, lr, 0.9, 0.999, 1e-8)
    }

    /// One update of every parameter; `names` label errors.
    ///
    /// Nothing is modified when any gradient is rejected.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let label = || names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.data().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteGradient(label()));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `σ₀ · decay^⌊step/period⌋`
    #[default]
    Stepwise,
    /// `σ₀ · decay^(step/period)`
    Continuous,
}

/// Exponential annealing of the feature-noise gain `σ_ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub decay: f64,
    pub period: u64,
    pub mode: DecayMode,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma0: 0.2,
            decay: 0.98,
            period: 1000,
            mode: DecayMode::Stepwise,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.period == 0 {
            return Err(Error::invalid("period must be ≥ 1"));
        }
        if !(self.sigma0 >= 0.0) || !self.sigma0.is_finite() {
            return Err(Error::invalid(format!("sigma0 must be ≥ 0, got {}", self.sigma0)));
        }
        Ok(())
    }

    /// Training-time noise gain at `step`. Inference uses 0 explicitly.
    pub fn sigma_at(&self, step: u64) -> f64 {
        let exponent = match self.mode {
            DecayMode::Stepwise => (step / self.period) as f64,
            DecayMode::Continuous => step as f64 / self.period as f64,
        };
        self.sigma0 * self.decay.powf(exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    fn run(state: &mut AdamState, theta: &mut Tensor, g: &Tensor) {
        state.step(&mut [theta], &[g], &[]).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut theta = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let before = theta.clone();
        let mut st = AdamState::with_defaults(&[&theta], 1e-4);
        let g = Tensor::zeros(&[2]);
        for _ in 0..10 {
            run(&mut st, &mut theta, &g);
        }
        assert_eq!(theta, before);
        assert_eq!(st.t, 10);
    }

    #[test]
    fn first_step_closed_form() {
        let mut theta = scalar(0.0);
        let mut st = AdamState::with_defaults(&[&theta], 1e-4);
        run(&mut st, &mut theta, &scalar(0.5));
        // m̂ = g, v̂ = g², Δ = −lr·g/(|g| + eps)
        let expect = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert_eq!(theta.data()[0], expect);
        assert!((theta.data()[0] + 9.99998e-5).abs() < 1e-9);
    }

    #[test]
    fn two_steps_hand_unrolled() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let g = 0.3;
        let mut theta = scalar(1.0);
        let mut st = AdamState::new(&[&theta], lr, b1, b2, eps);
        run(&mut st, &mut theta, &scalar(g));
        run(&mut st, &mut theta, &scalar(g));

        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let th1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let th2 = th1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((theta.data()[0] - th2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut theta = scalar(1.0);
        let mut st = AdamState::with_defaults(&[&theta], 1e-4);
        let g = Tensor::zeros(&[2]);
        assert!(st.step(&mut [&mut theta], &[&g], &[]).is_err());
        // non-finite tensors cannot be constructed, so poke one in directly
        let mut bad = scalar(0.0);
        bad.data_mut()[0] = f64::NAN;
        let err = st
            .step(&mut [&mut theta], &[&bad], &["encoder.layer0.bias".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("encoder.layer0.bias"), "{err}");
        assert_eq!(st.t, 0);
        assert_eq!(theta.data()[0], 1.0);
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sigma_at(0), 0.2);
        assert!((s.sigma_at(1000) - 0.196).abs() < 1e-15);
        assert_eq!(s.sigma_at(999), 0.2);
        let c = NoiseSchedule {
            mode: DecayMode::Continuous,
            ..s
        };
        assert!((c.sigma_at(1000) - 0.196).abs() < 1e-15);
        assert!(c.sigma_at(999) < 0.2);
    }

    #[test]
    fn schedule_validation() {
        let s = NoiseSchedule::default();
        assert!(NoiseSchedule { decay: 0.0, ..s }.validate().is_err());
        assert!(NoiseSchedule { decay: 1.5, ..s }.validate().is_err());
        assert!(NoiseSchedule { period: 0, ..s }.validate().is_err());
        assert!(NoiseSchedule { sigma0: -1.0, ..s }.validate().is_err());
        assert!(s.validate().is_ok());
    }

    proptest! {
        #[test]
        fn schedule_non_increasing(step in 0u64..5_000_000, continuous: bool) {
            let s = NoiseSchedule {
                mode: if continuous { DecayMode::Continuous } else { DecayMode::Stepwise },
                ..NoiseSchedule::default()
            };
            let a = s.sigma_at(step);
            let b = s.sigma_at(step + 1);
            prop_assert!(b <= a);
            prop_assert!(a > 0.0 && a <= 0.2);
        }

        #[test]
        fn update_bounded_after_warmup(scale in 1e-6f64..1e6, sign: bool, jitter in 0.5f64..2.0) {
            let lr = 1e-4;
            let mut theta = scalar(0.0);
            let mut st = AdamState::with_defaults(&[&theta], lr);
            let s = if sign { 1.0 } else { -1.0 };
            for i in 0..100 {
                let g = s * scale * if i % 2 == 0 { jitter } else { 1.0 };
                run(&mut st, &mut theta, &scalar(g));
            }
            let before = theta.data()[0];
            run(&mut st, &mut theta, &scalar(s * scale));
            prop_assert!((theta.data()[0] - before).abs() <= 3.0 * lr);
        }

        #[test]
        fn step_is_deterministic(g in -10.0f64..10.0) {
            let mut a = scalar(0.3);
            let mut b = scalar(0.3);
            let mut sa = AdamState::with_defaults(&[&a], 1e-3);
            let mut sb = sa.clone();
            for _ in 0..5 {
                run(&mut sa, &mut a, &scalar(g));
                run(&mut sb, &mut b, &scalar(g));
            }
            prop_assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
            prop_assert_eq!(sa, sb);
        }
    }
}
