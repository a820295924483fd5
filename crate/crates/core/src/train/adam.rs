use crate::error::{Error, Result};
use crate::param::{Parameterized, SlotMut};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// One Adam update of a single tensor. `t` is the 1-based step index.
/// `weight_decay` is added to the gradient as an L2 term.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    value: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    cfg: &AdamConfig,
    weight_decay: f32,
) {
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t as i32);
    let step = (lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for (((w, &g), m), v) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + weight_decay * *w;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *w -= step * *m / (v.sqrt() / bc2_sqrt + cfg.eps);
    }
}

/// Adam over every trainable tensor of a model, in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(cfg: AdamConfig, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::format("adam moment buffers disagree in shape"));
        }
        Ok(Self { cfg, t, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Applies one update with the accumulated gradients. Weight decay hits
    /// latent binary weights and the float tensors flagged for decay.
    pub fn step(&mut self, model: &mut dyn Parameterized, lr: f32) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        let mut err = None;
        model.visit_mut("", &mut |name, slot| {
            let (value, grad, decay) = match slot {
                SlotMut::Float {
                    value,
                    grad,
                    kind,
                    decay,
                } => {
                    if !kind.is_trainable() {
                        return;
                    }
                    (value.data_mut(), grad, decay)
                }
                SlotMut::Binary { layer, grad } => (layer.latent_mut().data_mut(), grad, true),
            };
            if idx == ms.len() {
                ms.push(vec![0.0; value.len()]);
                vs.push(vec![0.0; value.len()]);
            }
            if ms[idx].len() != value.len() {
                err.get_or_insert_with(|| Error::State(format!("optimizer state does not match tensor `{name}`")));
                idx += 1;
                return;
            }
            let wd = if decay { cfg.weight_decay } else { 0.0 };
            adam_step(value, grad, &mut ms[idx], &mut vs[idx], t, lr, &cfg, wd);
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None if idx != self.m.len() => Err(Error::State(format!(
                "optimizer tracks {} tensors, model has {idx}",
                self.m.len()
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Adam in f64 for a scalar parameter.
    fn reference(w0: f64, g: f64, steps: u32, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn zero_grad_keeps_params() {
        let cfg = AdamConfig::default();
        let mut w = vec![0.5f32, -0.25];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, &cfg, 0.0);
        assert_eq!(w, vec![0.5, -0.25]);
    }

    #[test]
    fn constant_gradient_matches_reference() {
        let cfg = AdamConfig::default();
        for &g in &[0.3f32, -2.0, 1e-3] {
            let mut w = vec![0.7f32];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            for t in 1..=25 {
                adam_step(&mut w, &[g], &mut m, &mut v, t, 1e-2, &cfg, 0.0);
            }
            let want = reference(0.7, g as f64, 25, 1e-2);
            assert!((w[0] as f64 - want).abs() < 1e-5, "{} vs {want}", w[0]);
        }
    }

    #[test]
    fn decay_only_step_shrinks_norm() {
        let cfg = AdamConfig::default();
        let mut w = vec![0.8f32, -0.6, 0.1];
        let before: f32 = w.iter().map(|x| x * x).sum();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_step(&mut w, &[0.0; 3], &mut m, &mut v, 1, 1e-2, &cfg, 1e-2);
        let after: f32 = w.iter().map(|x| x * x).sum();
        assert!(after < before);
    }
}
