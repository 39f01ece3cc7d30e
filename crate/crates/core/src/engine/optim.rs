use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

struct Moments {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. State exists only for the parameters
/// it was built with.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Param]) -> Self {
        let state = params
            .iter()
            .map(|p| Moments {
                name: p.name.clone(),
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            })
            .collect();
        AdamW { cfg, step: 0, state }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Number of parameter scalars with optimizer state.
    pub fn tracked_scalars(&self) -> usize {
        self.state.iter().map(|s| s.m.len()).sum()
    }

    pub fn tracked_names(&self) -> impl Iterator<Item = &str> {
        self.state.iter().map(|s| s.name.as_str())
    }

    /// One update. `grads` must name every tracked parameter and nothing
    /// else; a gradient for an untracked (frozen) tensor is an error.
    pub fn step(&mut self, params: &mut [Param], grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (name, _) in grads {
            if !self.state.iter().any(|s| &s.name == name) {
                return Err(Error::Contract(format!("gradient for frozen or unknown parameter {name:?}")));
            }
        }
        if let Some(st) = self.state.iter().find(|s| !grads.iter().any(|(n, _)| n == &s.name)) {
            return Err(Error::Contract(format!("no gradient for tunable parameter {:?}", st.name)));
        }
        if params.len() != self.state.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (param, st) in params.iter_mut().zip(&mut self.state) {
            if param.name != st.name {
                return Err(Error::Contract(format!(
                    "parameter order changed: expected {:?}, got {:?}",
                    st.name, param.name
                )));
            }
            let g = grads
                .iter()
                .find(|(n, _)| n == &param.name)
                .map(|(_, g)| g)
                .expect("presence checked above");
            if g.len() != param.value.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: param.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let mut theta = param.value.to_vec();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
            }
            param.value = Tensor::new(param.value.shape().to_vec(), theta)?;
        }
        Ok(())
    }
}

/// Linear warmup over `⌈warmup_rate · total⌉` steps to `peak`, then linear
/// decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, warmup_rate: f64) -> f64 {
    let warmup = (warmup_rate * total as f64).ceil() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Param> {
        vec![Param::new("theta", Tensor::scalar(v))]
    }

    fn grad(v: f64) -> Vec<(String, Tensor)> {
        vec![("theta".into(), Tensor::scalar(v))]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_param(0.0);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &grad(1.0), 0.01).unwrap();
        let expected = -0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &grad(0.0), 0.01).unwrap();
        assert!((p[0].value.item() - (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn three_step_trajectory_matches_hand_recursion() {
        // Hand recursion, written out step by step:
        //   g = [0.5, -1.0, 2.0], θ0 = 0.3, lr = [0.1, 0.05, 0.02], wd = 0.1
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let gs = [0.5, -1.0, 2.0];
        let lrs = [0.1, 0.05, 0.02];
        let (mut m, mut v, mut th) = (0.0f64, 0.0f64, 0.3f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = gs[t - 1];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lrs[t - 1] * (mh / (vh.sqrt() + eps) + wd * th);
            expected.push(th);
        }
        // frozen anchors of the same recursion
        assert!((expected[0] - 0.197).abs() < 1e-8);

        let mut p = scalar_param(0.3);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for t in 0..3 {
            opt.step(&mut p, &grad(gs[t]), lrs[t]).unwrap();
            assert!((p[0].value.item() - expected[t]).abs() < 1e-10);
        }
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn rejects_gradients_for_frozen_tensors() {
        let mut p = scalar_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut g = grad(1.0);
        g.push(("encoder.layer0.wq".into(), Tensor::scalar(1.0)));
        assert!(matches!(opt.step(&mut p, &g, 0.1), Err(Error::Contract(_))));
        assert!(matches!(opt.step(&mut p, &[], 0.1), Err(Error::Contract(_))));
        assert_eq!(opt.tracked_scalars(), 1);
    }

    #[test]
    fn schedule_shapes() {
        assert_eq!(lr_schedule(0, 1000, 0.01, 0.0), 0.01);
        assert_eq!(lr_schedule(1000, 1000, 0.01, 0.0), 0.0);
        assert_eq!(lr_schedule(0, 1000, 0.01, 0.06), 0.0);
        assert_eq!(lr_schedule(30, 1000, 0.01, 0.06), 0.005);
        assert_eq!(lr_schedule(60, 1000, 0.01, 0.06), 0.01);
        let mid = lr_schedule(530, 1000, 0.01, 0.06);
        assert!((mid - 0.01 * 470.0 / 940.0).abs() < 1e-15);
    }
}
