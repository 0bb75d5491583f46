//! Parameter update rules. Both optimizers keep one state tensor per
//! trainable parameter, matched by position in the slice passed to `step`.

use ndarray::{ArrayD, Zip};

use super::{NnError, Param};

fn check_state(state: &mut Vec<ArrayD<f64>>, params: &[&mut Param]) -> Result<(), NnError> {
    if state.is_empty() {
        *state = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
    }
    if state.len() != params.len() {
        return Err(NnError::Config(format!(
            "optimizer tracks {} tensors but received {}",
            state.len(),
            params.len()
        )));
    }
    for (s, p) in state.iter().zip(params) {
        if s.shape() != p.value.shape() {
            return Err(NnError::shape(&p.name, "optimizer state shape differs from parameter"));
        }
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay:
/// `v <- mu v + (g + wd theta); theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[ArrayD<f64>] {
        &self.velocity
    }

    /// Updates every param in `params`; callers filter out frozen ones.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), NnError> {
        check_state(&mut self.velocity, params)?;
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for (v, p) in self.velocity.iter_mut().zip(params.iter_mut()) {
            let Param { value, grad, .. } = &mut **p;
            Zip::from(v).and(value).and(&*grad).for_each(|v, theta, &g| {
                *v = mu * *v + (g + wd * *theta);
                *theta -= lr * *v;
            });
        }
        Ok(())
    }
}

/// Bias-corrected Adam with optional L2 weight decay folded into the
/// gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), NnError> {
        check_state(&mut self.m, params)?;
        check_state(&mut self.v, params)?;
        self.t += 1;
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((m, v), p) in self.m.iter_mut().zip(self.v.iter_mut()).zip(params.iter_mut()) {
            let Param { value, grad, .. } = &mut **p;
            Zip::from(m).and(v).and(value).and(&*grad).for_each(|m, v, theta, &g| {
                let g = g + wd * *theta;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn param(values: &[f64], grads: &[f64]) -> Param {
        let mut p = Param::new("p", arr1(values).into_dyn());
        p.grad = arr1(grads).into_dyn();
        p
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let mut p = param(&[1.0, -2.0], &[0.5, 0.25]);
        SgdMomentum::new(0.1, 0.0, 0.0).step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, arr1(&[1.0 - 0.05, -2.0 - 0.025]).into_dyn());
    }

    #[test]
    fn sgd_weight_decay_shrinks_idle_params() {
        let mut p = param(&[3.0], &[0.0]);
        SgdMomentum::new(0.5, 0.0, 0.1).step(&mut [&mut p]).unwrap();
        assert!((p.value[0] - 3.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_constant_steps() {
        let mut p = param(&[1.0], &[2.0]);
        let mut opt = SgdMomentum::new(0.01, 0.9, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value[0] - (1.0 - 0.01 * 2.0 * 2.9)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = param(&[0.0, 0.0, 0.0], &[3.0, -0.2, 0.0]);
        let mut opt = Adam::new(0.01, 0.5, 0.999);
        opt.step(&mut [&mut p]).unwrap();
        let expect = |g: f64| -0.01 * g / (g.abs() + 1e-8);
        for (i, g) in [3.0, -0.2, 0.0].into_iter().enumerate() {
            assert!((p.value[i] - expect(g)).abs() < 1e-15);
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn mismatched_param_count_is_an_error() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = param(&[1.0], &[1.0]);
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        opt.step(&mut [&mut a]).unwrap();
        assert!(opt.step(&mut [&mut a, &mut b]).is_err());
    }
}
