use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// AdamW with decoupled weight decay; the learning rate is supplied per
/// step. Moment estimates are exposed for checkpointing.
pub struct AdamW {
    params: AdamWParams,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, params: AdamWParams) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            vars,
            m,
            v,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let AdamWParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2_sqrt = (1.0 - beta2.powi(self.t as i32)).sqrt();
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((v.sqrt()? / bc2_sqrt)? + eps)?;
            let update = ((&m / denom)? * (lr / bc1))?;
            let decayed = (var.as_tensor() * (1.0 - lr * weight_decay))?;
            var.set(&(decayed - update)?.detach())?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` per variable.
    pub fn state(&self) -> Vec<(&str, &Tensor, &Tensor)> {
        self.vars
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((n, _), (m, v))| (n.as_str(), m, v))
            .collect()
    }

    pub fn load_state(
        &mut self,
        t: usize,
        m: &HashMap<String, Tensor>,
        v: &HashMap<String, Tensor>,
    ) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let (Some(mi), Some(vi)) = (m.get(name), v.get(name)) else {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` missing")));
            };
            if mi.dims() != var.dims() || vi.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has wrong shape")));
            }
            self.m[i] = mi.clone();
            self.v[i] = vi.clone();
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_hand_computed_first_steps() {
        // f(x) = x², g = 2x; two steps from x = 1 with lr 0.1
        let x = Var::new(&[1.0f32], &Device::Cpu).unwrap();
        let p = AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], p).unwrap();
        let mut expect = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.1).unwrap();
            let g = 2.0 * expect;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            expect = expect * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
            let got = x.as_tensor().to_vec1::<f32>().unwrap()[0] as f64;
            assert!((got - expect).abs() < 1e-6, "step {t}: {got} vs {expect}");
        }
        assert_eq!(opt.steps_taken(), 2);
    }
}
