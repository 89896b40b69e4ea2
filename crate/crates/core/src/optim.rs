//! Adam with decoupled weight decay and a warmup/linear-decay schedule.

use std::collections::BTreeMap;

use crate::error::{contract_err, Result};
use crate::tensor::{ParamId, ParamStore};

pub const WARMUP_FRACTION: f64 = 0.1;

pub fn warmup_steps(total_steps: usize) -> usize {
    (WARMUP_FRACTION * total_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Linear ramp from 0 to `lr_max` over the first tenth of training, then a
/// linear decay that reaches 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    let warm = warmup_steps(total_steps);
    let step = step.min(total_steps);
    if warm > 0 && step <= warm {
        lr_max * step as f64 / warm as f64
    } else if total_steps > warm {
        lr_max * (total_steps - step) as f64 / (total_steps - warm) as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_max: 1e-2, weight_decay: 2e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Optimiser state. Moments are created lazily, and only for trainable
/// parameters that actually received a gradient; a parameter never touched
/// by a step is left bit-identical, weight decay included.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub total_steps: usize,
    pub step: usize,
    moments: BTreeMap<ParamId, Moments>,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, total_steps: usize) -> Self {
        Self { cfg, total_steps, step: 0, moments: BTreeMap::new() }
    }

    pub fn warmup_steps(&self) -> usize {
        warmup_steps(self.total_steps)
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    /// Parameters holding optimiser moments.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Applies one update from the `grad` buffers of `store`, then clears them.
    pub fn adam_step(&mut self, store: &mut ParamStore) -> Result<()> {
        let mut grads = BTreeMap::new();
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            if let Some(g) = t.grad.take() {
                if !t.requires_grad {
                    return Err(contract_err!("frozen parameter {} carries a gradient", id.0));
                }
                grads.insert(id, g);
            }
        }
        self.apply(store, &grads)
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f64>>) -> Result<()> {
        for (&id, g) in grads {
            let t = store.get(id);
            if !t.requires_grad {
                return Err(contract_err!("refusing to update frozen parameter `{}`", store.name(id)));
            }
            if g.len() != t.numel() {
                return Err(contract_err!(
                    "gradient of `{}` has {} entries, parameter has {}",
                    store.name(id),
                    g.len(),
                    t.numel()
                ));
            }
        }
        self.step += 1;
        let lr = lr_at(self.step, self.total_steps, self.cfg.lr_max);
        let AdamConfig { weight_decay, beta1, beta2, eps, .. } = self.cfg;
        for (&id, g) in grads {
            let n = g.len();
            let mo = self.moments.entry(id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
            mo.t += 1;
            let c1 = 1.0 - beta1.powi(mo.t as i32);
            let c2 = 1.0 - beta2.powi(mo.t as i32);
            let theta = &mut store.get_mut(id).data;
            for i in 0..n {
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_examples() {
        let lr = 1e-2;
        assert!((lr_at(50, 1000, lr) - 0.5 * lr).abs() < 1e-15);
        assert_eq!(lr_at(100, 1000, lr), lr);
        assert!((lr_at(550, 1000, lr) - 0.5 * lr).abs() < 1e-15);
        assert_eq!(lr_at(0, 1000, lr), 0.0);
        assert_eq!(lr_at(1000, 1000, lr), 0.0);
        assert_eq!(warmup_steps(1000), 100);
        assert_eq!(warmup_steps(15), 2);
    }

    #[test]
    fn schedule_is_continuous_piecewise_linear() {
        for total in [10usize, 37, 1000] {
            let warm = warmup_steps(total);
            let vals: Vec<f64> = (0..=total).map(|s| lr_at(s, total, 1.0)).collect();
            assert_eq!(vals[warm], 1.0);
            assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let up = 1.0 / warm as f64;
            let down = 1.0 / (total - warm) as f64;
            for s in 1..=total {
                let step = (vals[s] - vals[s - 1]).abs();
                let slope = if s <= warm { up } else { down };
                assert!((step - slope).abs() < 1e-12, "total {total} step {s}");
            }
        }
    }

    fn one_param(v: f64, trainable: bool) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![1], vec![v]).unwrap(), trainable);
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = one_param(0.7, true);
        let mut opt = OptimState::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, 10);
        for _ in 0..5 {
            store.get_mut(id).grad = Some(vec![0.0]);
            opt.adam_step(&mut store).unwrap();
        }
        assert_eq!(store.get(id).data[0], 0.7);
    }

    #[test]
    fn first_step_on_quadratic_moves_downhill() {
        // f(θ) = θ²/2, gradient θ
        let (mut store, id) = one_param(1.0, true);
        let mut opt = OptimState::new(AdamConfig::default(), 10);
        store.get_mut(id).grad = Some(vec![1.0]);
        opt.adam_step(&mut store).unwrap();
        assert!(store.get(id).data[0] < 1.0);
    }

    #[test]
    fn frozen_parameters_are_never_updated() {
        let mut store = ParamStore::new();
        let frozen = store.add("frozen", Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(), false);
        let live = store.add("live", Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(), true);
        let mut opt = OptimState::new(AdamConfig::default(), 10);
        let before = store.get(frozen).data.clone();
        store.get_mut(live).grad = Some(vec![1.0, 1.0]);
        opt.adam_step(&mut store).unwrap();
        assert_eq!(store.get(frozen).data, before);
        assert!(!opt.has_moments(frozen) && opt.has_moments(live));

        let mut bad = BTreeMap::new();
        bad.insert(frozen, vec![1.0, 1.0]);
        assert!(matches!(opt.apply(&mut store, &bad), Err(crate::Error::Contract(_))));
        let mut bad = BTreeMap::new();
        bad.insert(live, vec![1.0]);
        assert!(matches!(opt.apply(&mut store, &bad), Err(crate::Error::Contract(_))));
    }
}
