use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay, applied to tensors of rank >= 2 only (norm gains and
    /// biases are not decayed).
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First/second moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        OptimizerState { config, step: 0, m, v }
    }
}

/// One AdamW update with bias correction over `params`, in order.
///
/// Every parameter must carry a gradient. Tensors with `requires_grad` unset
/// are left untouched (their moments still must line up by position).
pub fn adamw_step(params: &mut [&mut Tensor<f32>], state: &mut OptimizerState, lr: f32) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![state.m[i].len()],
            });
        }
        if p.requires_grad() && p.grad().is_none() {
            return Err(Error::Usage(format!("parameter {i} has no gradient")));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let step_size = (lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let decay = if p.rank() >= 2 { lr * cfg.weight_decay } else { 0.0 };
        let grad = p.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            *w -= decay * *w;
            *w -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to `min_ratio * peak`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f32,
    pub warmup: u64,
    pub total: u64,
    pub min_ratio: f32,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f32 {
        let peak = self.peak as f64;
        if self.warmup > 0 && step < self.warmup {
            return (peak * (step + 1) as f64 / self.warmup as f64) as f32;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup.min(step)) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let min = self.min_ratio as f64;
        (peak * (min + (1.0 - min) * cosine)) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32) -> Tensor<f32> {
        Tensor::new(vec![1], vec![v]).unwrap().with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32).with_requires_grad(true);
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, [&p]);
        p.set_grad(Some(vec![0.0; 6])).unwrap();
        adamw_step(&mut [&mut p], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = param(0.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), [&p]);
        p.set_grad(Some(vec![1.0])).unwrap();
        adamw_step(&mut [&mut p], &mut st, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 -> update = -lr * 1 / (1 + eps)
        let want = -0.1f64 / (1.0 + 1e-8);
        assert!((p.data()[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Tensor::<f32>::from_fn(&[4, 4], |i| (i as f32).sin()).with_requires_grad(true);
            let mut st = OptimizerState::new(AdamWConfig::default(), [&p]);
            for s in 0..20 {
                let g: Vec<f32> = (0..16).map(|i| ((i * s) as f32).cos()).collect();
                p.set_grad(Some(g)).unwrap();
                adamw_step(&mut [&mut p], &mut st, 0.01).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut p = param(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), [&p]);
        assert!(matches!(
            adamw_step(&mut [&mut p], &mut st, 0.1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            peak: 1.0,
            warmup: 10,
            total: 110,
            min_ratio: 0.1,
        };
        assert!((s.at(0) - 0.1).abs() < 1e-6);
        assert!((s.at(9) - 1.0).abs() < 1e-6);
        assert!((s.at(10) - 1.0).abs() < 1e-6);
        assert!((s.at(60) - 0.55).abs() < 1e-6);
        assert!((s.at(110) - 0.1).abs() < 1e-6);
        assert!((s.at(500) - 0.1).abs() < 1e-6);
    }
}
