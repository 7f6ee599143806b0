use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<F>>,
    pub second_moment: BTreeMap<String, Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter yielded, then clears their grads.
    ///
    /// Every parameter must carry a gradient; the step is rejected before any
    /// mutation otherwise.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<F>)>,
    {
        let mut params: Vec<(&str, &mut Tensor<F>)> = params.into_iter().collect();
        for (name, t) in &params {
            match &t.grad {
                None => return Err(Error::MissingGrad(name.to_string())),
                Some(g) if g.len() != t.numel() => {
                    return Err(Error::shape("adamw_step", t.shape(), &[g.len()]))
                }
                Some(_) => {}
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let b1 = F::cast_f64(c.beta1);
        let b2 = F::cast_f64(c.beta2);
        let one = F::one();
        let lr = F::cast_f64(c.lr);
        let decay = F::cast_f64(1.0 - c.lr * c.weight_decay);
        let inv_bias1 = F::cast_f64(1.0 / bias1);
        let inv_bias2 = F::cast_f64(1.0 / bias2);
        let eps = F::cast_f64(c.eps);

        for (name, param) in params.iter_mut() {
            let grad = param.grad.take().expect("checked above");
            let n = grad.len();
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); n]);
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); n]);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m * inv_bias1;
                let v_hat = *v * inv_bias2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::<f64>::new(cfg);
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        p.grad = Some(vec![0.0; 3]);
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), before.data());
        assert!(p.grad.is_none());
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m̂ = g and v̂ = g², so the update is
        // θ(1 - lr·wd) - lr·g/(|g| + ε).
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::<f64>::new(cfg);
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        p.grad = Some(vec![0.3]);
        opt.step([("w", &mut p)]).unwrap();
        let expected = 2.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.3 / (0.3 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut a = Tensor::<f32>::zeros(&[2]);
        a.grad = Some(vec![1.0, 1.0]);
        let mut b = Tensor::<f32>::zeros(&[2]);
        let err = opt.step([("a", &mut a), ("b", &mut b)]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "b"));
        // Nothing was mutated.
        assert_eq!(opt.step, 0);
        assert!(a.grad.is_some());
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamWConfig::default().lr, 1e-4);
    }
}
