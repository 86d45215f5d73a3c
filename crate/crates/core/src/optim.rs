use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut Moments, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Invalid("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m as f64 / c1;
        let v_hat = v as f64 / c2;
        params[i] -= (cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

/// Adam over every trainable parameter of a graph.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Moments>,
    t: u64,
}

impl Adam {
    pub fn new(graph: &Graph<f32>, config: AdamConfig) -> Self {
        Self {
            config,
            state: graph.params().iter().map(|p| Moments::zeros(p.value.len())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, graph: &mut Graph<f32>) -> Result<()> {
        self.t += 1;
        for (p, s) in graph.params_mut().iter_mut().zip(&mut self.state) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            adam_step(p.value.data_mut(), &grad, s, &self.config, self.t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = vec![1.0f32, -2.0, 0.5];
        let mut s = Moments::zeros(3);
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut s, &cfg, 1).unwrap();
        for (after, before, sign) in [(p[0], 1.0, 1.0), (p[1], -2.0, -1.0), (p[2], 0.5, 1.0)] {
            let delta = before - after;
            assert!((delta - sign * 0.01).abs() < 1e-4, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = vec![1.0f32];
        let mut s = Moments {
            m: vec![0.0],
            v: vec![0.5],
        };
        adam_step(&mut p, &[0.0], &mut s, &cfg, 3).unwrap();
        assert_eq!(p[0], 1.0);
        assert!((s.v[0] - 0.4995).abs() < 1e-6);
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut x = vec![1.0f32];
        let mut s = Moments::zeros(1);
        for t in 1..=200 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut s, &cfg, t).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = Moments::zeros(2);
        let cfg = AdamConfig::with_lr(0.1);
        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut s, &cfg, 1).is_err());
    }
}
