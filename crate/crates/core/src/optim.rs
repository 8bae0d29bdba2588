//! Adam optimizer over named matrix parameters.
//!
//! All parameters and moment estimates are rounded through f32 after every
//! update so that checkpointed f32 blobs restore training trajectories
//! exactly.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::numeric::tape::{Gradients, NodeId};

pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn round_array_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(round_f32);
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
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

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, Array2<f64>>, &BTreeMap<String, Array2<f64>>) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(
        cfg: AdamConfig,
        step: u64,
        m: BTreeMap<String, Array2<f64>>,
        v: BTreeMap<String, Array2<f64>>,
    ) -> Self {
        Self { cfg, step, m, v }
    }

    /// One update over every parameter that has a gradient entry. Parameters
    /// without gradients are left untouched, including their moments, so a
    /// term whose loss weight is zero behaves exactly as if it never trained.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Array2<f64>)],
        grads: &BTreeMap<String, Array2<f64>>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(g.dim(), param.dim(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            for ((pv, (mv, vv)), gv) in param
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.iter())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                *pv = round_f32(*pv);
                *mv = round_f32(*mv);
                *vv = round_f32(*vv);
            }
        }
    }
}

/// Pull gradients for staged leaves out of a backward pass, keyed by name.
/// Leaves that did not influence the root are absent.
pub fn collect_named_grads(
    grads: &Gradients,
    named: &[(String, NodeId)],
) -> BTreeMap<String, Array2<f64>> {
    named
        .iter()
        .filter_map(|(n, id)| grads.wrt(*id).map(|g| (n.clone(), g.clone())))
        .collect()
}

/// Convenience: round every named parameter through f32.
pub fn round_params_f32(params: &mut [(String, &mut Array2<f64>)]) {
    for (_, p) in params.iter_mut() {
        round_array_f32(p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with any nonzero constant gradient, step 1 moves by exactly
        // -lr * g/|g| (bias corrections cancel, eps negligible)
        let mut p = Array2::from_elem((1, 2), 1.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Array2::from_elem((1, 2), 0.5));
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        {
            let mut params = vec![("p".to_string(), &mut p)];
            adam.step(&mut params, &grads);
        }
        assert_relative_eq!(p[[0, 0]], 1.0 - 0.01, epsilon = 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn missing_gradient_leaves_param_and_moments_alone() {
        let mut p = Array2::from_elem((2, 2), 3.0);
        let grads = BTreeMap::new();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        {
            let mut params = vec![("p".to_string(), &mut p)];
            adam.step(&mut params, &grads);
        }
        assert_eq!(p, Array2::from_elem((2, 2), 3.0));
        assert!(adam.moments().0.is_empty());
    }

    #[test]
    fn params_stay_on_f32_grid() {
        let mut p = Array2::from_elem((1, 1), 0.1);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Array2::from_elem((1, 1), 0.3));
        let mut adam = Adam::new(AdamConfig::with_lr(0.017));
        for _ in 0..5 {
            let mut params = vec![("p".to_string(), &mut p)];
            adam.step(&mut params, &grads);
        }
        let v = p[[0, 0]];
        assert_eq!(v, v as f32 as f64);
        let (m, vv) = adam.moments();
        for map in [m, vv] {
            for a in map.values() {
                for &x in a.iter() {
                    assert_eq!(x, x as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn restored_state_continues_identically() {
        let grad_of = |x: f64| Array2::from_elem((1, 1), 2.0 * x);
        let advance = |adam: &mut Adam, p: &mut Array2<f64>, steps: usize| {
            for _ in 0..steps {
                let mut grads = BTreeMap::new();
                grads.insert("p".to_string(), grad_of(p[[0, 0]]));
                let mut params = vec![("p".to_string(), &mut *p)];
                adam.step(&mut params, &grads);
            }
        };

        let mut p1 = Array2::from_elem((1, 1), 1.0);
        let mut a1 = Adam::new(AdamConfig::with_lr(0.05));
        advance(&mut a1, &mut p1, 10);

        let mut p2 = Array2::from_elem((1, 1), 1.0);
        let mut a2 = Adam::new(AdamConfig::with_lr(0.05));
        advance(&mut a2, &mut p2, 4);
        let (m, v) = a2.moments();
        let mut a3 = Adam::restore(a2.cfg, a2.step_count(), m.clone(), v.clone());
        advance(&mut a3, &mut p2, 6);

        assert_eq!(p1, p2);
    }
}
