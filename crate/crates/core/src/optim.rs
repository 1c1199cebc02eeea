//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// A parameter tensor together with its name and whether weight decay
/// applies to it.
pub struct ParamRef<'a, F> {
    pub name: &'a str,
    pub value: &'a mut Tensor<F>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<F = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        AdamWState {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
        }
    }

    /// One AdamW update of every parameter with learning rate `lr`.
    ///
    /// Gradients are checked before anything is mutated, so a NaN leaves
    /// both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut [ParamRef<'_, F>], grads: &[&Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid("adamw_step", format!("{} params, {} grads, {} state slots", params.len(), grads.len(), self.m.len())));
        }
        if lr < 0.0 {
            return Err(Error::invalid("adamw_step", format!("negative learning rate {lr}")));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.value.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.to_string()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step_size = F::from_f64(lr / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(c.eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { F::from_f64(1.0 - lr * c.weight_decay) } else { F::one() };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
                *w = *w * decay - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = F::from_f64(max_norm / (total + 1e-6));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[v]).unwrap()
    }

    #[test]
    fn zero_lr_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamWState::<f64>::new(cfg, &[&[1]]);
        let mut p = one(0.3);
        let g = one(5.0);
        st.step(&mut [ParamRef { name: "p", value: &mut p, decay: true }], &[&g], 0.0).unwrap();
        assert_eq!(p.data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 on step one, so the update is lr * g / (|g| + eps).
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamWState::<f64>::new(cfg, &[&[1]]);
        let mut p = one(0.0);
        let g = one(1.0);
        st.step(&mut [ParamRef { name: "p", value: &mut p, decay: false }], &[&g], 0.1).unwrap();
        assert_abs_diff_eq!(p.data()[0], -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut st = AdamWState::<f32>::new(AdamWConfig::default(), &[&[3], &[3]]);
        let mut a = Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let mut b = a.clone();
        for i in 0..25 {
            let g = Tensor::new(vec![3], vec![i as f32 * 0.1, -0.3, 1.7]).unwrap();
            st.step(&mut [ParamRef { name: "a", value: &mut a, decay: true }, ParamRef { name: "b", value: &mut b, decay: true }], &[&g, &g], 1e-2).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(st.step, 25);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut st = AdamWState::<f64>::new(AdamWConfig::default(), &[&[1]]);
        let mut p = one(1.0);
        let g = one(f64::NAN);
        let err = st.step(&mut [ParamRef { name: "h.0.attn.w", value: &mut p, decay: true }], &[&g], 0.1).unwrap_err();
        assert!(err.to_string().contains("h.0.attn.w"));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut gs = vec![Tensor::<f64>::from_f64(vec![2], &[3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut gs, 1.0);
        assert_abs_diff_eq!(n, 5.0, epsilon = 1e-12);
        let d = gs[0].data();
        assert_abs_diff_eq!((d[0] * d[0] + d[1] * d[1]).sqrt(), 1.0, epsilon = 1e-6);
    }
}
