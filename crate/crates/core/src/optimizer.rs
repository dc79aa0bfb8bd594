//! Adam with bias correction, plus a per-epoch cosine schedule whose first
//! epoch is pinned to a small warmup rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::classifier::ParamMut;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_WARMUP_LR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// One warmup epoch at 1e-5, cosine decay from `base_lr` afterwards.
    pub fn new(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            base_lr,
            warmup_lr: DEFAULT_WARMUP_LR,
            warmup_epochs: 1,
            total_epochs,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.warmup_lr);
        }
        let span = (self.total_epochs - self.warmup_epochs) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<&'static str, Vec<f64>>,
    v: BTreeMap<&'static str, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One Adam step over every parameter set in `params`. Each must have a
    /// gradient of the same shape in `grads`.
    pub fn apply(
        &mut self,
        params: &mut [ParamMut<'_>],
        grads: &BTreeMap<&'static str, Matrix>,
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for p in params.iter() {
            let g = grads
                .get(p.name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter {}", p.name)))?;
            if g.shape() != p.shape || g.data().len() != p.values.len() {
                return Err(Error::ShapeMismatch {
                    what: format!("gradient of {}", p.name),
                    expected: p.shape,
                    found: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::numerical(p.name, "non-finite gradient"));
            }
            if let Some(m) = self.m.get(p.name) {
                if m.len() != p.values.len() {
                    return Err(Error::ShapeMismatch {
                        what: format!("optimizer state of {}", p.name),
                        expected: p.shape,
                        found: (1, m.len()),
                    });
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let g = grads[p.name].data();
            let n = p.values.len();
            let m = self.m.entry(p.name).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: &mut f64) -> ParamMut<'_> {
        ParamMut {
            name: "theta",
            shape: (1, 1),
            values: std::slice::from_mut(v),
        }
    }

    fn grad(g: f64) -> BTreeMap<&'static str, Matrix> {
        BTreeMap::from([("theta", Matrix::new(1, 1, vec![g]).unwrap())])
    }

    #[test]
    fn schedule_fixture() {
        for base in [2e-3, 2e-4, 0.7] {
            assert_eq!(LrSchedule::new(base, 100).lr_at(0).unwrap(), 1e-5);
        }
        assert_eq!(LrSchedule::new(2e-3, 100).lr_at(1).unwrap(), 2e-3);
        let mid = LrSchedule::new(2e-3, 101).lr_at(51).unwrap();
        assert!((mid - 1e-3).abs() < 1e-15);
        assert!(LrSchedule::new(2e-3, 10).lr_at(10).is_err());
    }

    #[test]
    fn schedule_non_increasing_after_warmup() {
        let s = LrSchedule::new(2e-3, 200);
        let lrs: Vec<f64> = (1..200).map(|e| s.lr_at(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn first_step_is_signed_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut theta = 1.0;
            let mut adam = AdamState::new();
            adam.apply(&mut [scalar_param(&mut theta)], &grad(g), 0.1)
                .unwrap();
            assert!((theta - (1.0 - 0.1 * g.signum())).abs() < 1e-6);
            assert_eq!(adam.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut theta = 0.25;
        let mut adam = AdamState::new();
        for _ in 0..5 {
            adam.apply(&mut [scalar_param(&mut theta)], &grad(0.0), 0.1)
                .unwrap();
        }
        assert_eq!(theta, 0.25);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn quadratic_matches_reference() {
        // f(θ) = (θ - 3)², hand-rolled Adam alongside.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05);
        let mut theta = 0.0;
        let (mut rt, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
        let mut adam = AdamState::new();
        for t in 1..=3 {
            let g = 2.0 * (theta - 3.0);
            adam.apply(&mut [scalar_param(&mut theta)], &grad(g), lr)
                .unwrap();
            let rg = 2.0 * (rt - 3.0);
            rm = b1 * rm + (1.0 - b1) * rg;
            rv = b2 * rv + (1.0 - b2) * rg * rg;
            let mh = rm / (1.0 - b1.powi(t));
            let vh = rv / (1.0 - b2.powi(t));
            rt -= lr * mh / (vh.sqrt() + eps);
            assert!((theta - rt).abs() < 1e-12);
        }
        assert!(adam.second_moment("theta").unwrap()[0] >= 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut theta = 1.0;
        let mut adam = AdamState::new();
        assert!(adam
            .apply(&mut [scalar_param(&mut theta)], &grad(f64::NAN), 0.1)
            .is_err());
        assert!(adam
            .apply(&mut [scalar_param(&mut theta)], &grad(1.0), 0.0)
            .is_err());
        let wrong = BTreeMap::from([("theta", Matrix::zeros(1, 2))]);
        assert!(adam
            .apply(&mut [scalar_param(&mut theta)], &wrong, 0.1)
            .is_err());
        assert!(adam
            .apply(&mut [scalar_param(&mut theta)], &BTreeMap::new(), 0.1)
            .is_err());
        assert_eq!(adam.step_count(), 0);
        assert_eq!(theta, 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn update_envelope_and_determinism(gs in proptest::collection::vec(-100.0f64..100.0, 1..30), lr in 1e-5f64..0.1) {
                let run = || {
                    let mut theta = vec![0.0; 4];
                    let mut adam = AdamState::new();
                    let mut deltas = Vec::new();
                    for g in &gs {
                        let before = theta.clone();
                        let grads = BTreeMap::from([("w", Matrix::new(2, 2, vec![*g, -g, 0.5 * g, 0.0]).unwrap())]);
                        adam.apply(&mut [ParamMut { name: "w", shape: (2, 2), values: &mut theta }], &grads, lr).unwrap();
                        deltas.extend(theta.iter().zip(&before).map(|(a, b)| (a - b).abs()));
                    }
                    (theta, deltas)
                };
                let (a, deltas) = run();
                let (b, _) = run();
                prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                prop_assert!(deltas.iter().all(|&d| d <= 10.0 * lr));
            }
        }
    }
}
