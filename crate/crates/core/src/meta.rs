//! First-order two-loop update.
//!
//! The inner loop runs `k` SGD steps at rate `beta` from the base weights.
//! The outer step moves the base weights toward the inner result by
//! `lambda = exp(-rho * t / T)`, where `t` is the zero-based current task.

use crate::error::{Error, Result};
use crate::network::ModelState;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub decay: f64,
    pub total_tasks: usize,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner-steps must be at least 1".into()));
        }
        if self.total_tasks == 0 {
            return Err(Error::Config("tasks must be at least 1".into()));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.decay)));
        }
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::Config(format!("inner-lr must be positive, got {}", self.inner_lr)));
        }
        Ok(())
    }
}

pub fn balancing_factor(t: usize, cfg: &MetaConfig) -> Result<f64> {
    if t > cfg.total_tasks {
        return Err(Error::invalid(
            "balancing_factor",
            format!("task {t} beyond total {}", cfg.total_tasks),
        ));
    }
    if t == 0 || cfg.decay == 0.0 {
        return Ok(1.0);
    }
    Ok((-cfg.decay * t as f64 / cfg.total_tasks as f64).exp())
}

/// `k` SGD steps from `base`; `grad_fn` returns the flat loss gradient at
/// the given state and is re-evaluated at every step.
pub fn inner_loop<F>(base: &ModelState, cfg: &MetaConfig, mut grad_fn: F) -> Result<ModelState>
where
    F: FnMut(&ModelState) -> Result<Vec<f64>>,
{
    let mut state = base.clone();
    for _ in 0..cfg.inner_steps {
        let grads = grad_fn(&state)?;
        state = state.sgd_step(&grads, cfg.inner_lr)?;
    }
    Ok(state)
}

pub fn outer_update(base: &ModelState, inner: &ModelState, t: usize, cfg: &MetaConfig) -> Result<ModelState> {
    if base.arch != inner.arch || base.params.len() != inner.params.len() {
        return Err(Error::Arch("outer update across different architectures".into()));
    }
    let lambda = balancing_factor(t, cfg)?;
    Ok(interpolate(base, inner, lambda))
}

pub(crate) fn interpolate(base: &ModelState, inner: &ModelState, lambda: f64) -> ModelState {
    if lambda == 1.0 {
        return inner.clone();
    }
    let params = base
        .params
        .iter()
        .zip(&inner.params)
        .map(|(b, i)| b + lambda * (i - b))
        .collect();
    ModelState {
        arch: base.arch.clone(),
        params,
        rng_seed: base.rng_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, ArchSpec, ConvBlock};
    use proptest::prelude::*;

    fn cfg(k: usize, beta: f64, rho: f64, tasks: usize) -> MetaConfig {
        MetaConfig {
            inner_steps: k,
            inner_lr: beta,
            decay: rho,
            total_tasks: tasks,
        }
    }

    fn model() -> ModelState {
        let arch = ArchSpec {
            input_shape: [1, 4, 4],
            conv_blocks: vec![ConvBlock::new(2, 3, 2)],
            tap_layers: vec![0],
            num_classes: 2,
            multi_head: false,
        };
        init_model(&arch, 1).unwrap()
    }

    #[test]
    fn lambda_values() {
        assert_eq!(balancing_factor(0, &cfg(2, 0.1, 5.0, 5)).unwrap(), 1.0);
        assert_eq!(balancing_factor(0, &cfg(2, 0.1, f64::INFINITY, 5)).unwrap(), 1.0);
        assert_eq!(balancing_factor(3, &cfg(2, 0.1, 0.0, 5)).unwrap(), 1.0);
        let l = balancing_factor(5, &cfg(2, 0.1, 2.0, 5)).unwrap();
        assert!((l - 0.1353352832366127).abs() < 1e-9);
        assert!(balancing_factor(6, &cfg(2, 0.1, 2.0, 5)).is_err());
    }

    #[test]
    fn lambda_strictly_decreasing() {
        for rho in [1.0, 2.0, 3.0] {
            let c = cfg(2, 0.1, rho, 5);
            let ls: Vec<f64> = (0..=5).map(|t| balancing_factor(t, &c).unwrap()).collect();
            assert!(ls.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 0.1, 2.0, 5).validate().is_ok());
        assert!(cfg(0, 0.1, 2.0, 5).validate().is_err());
        assert!(cfg(2, 0.0, 2.0, 5).validate().is_err());
        assert!(cfg(2, 0.1, -1.0, 5).validate().is_err());
        assert!(cfg(2, 0.1, f64::NAN, 5).validate().is_err());
        assert!(cfg(2, 0.1, 2.0, 0).validate().is_err());
    }

    #[test]
    fn quadratic_contraction() {
        let base = model();
        let c: Vec<f64> = (0..base.params.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        for (k, beta) in [(1, 0.1), (2, 0.1), (5, 0.3)] {
            let out = inner_loop(&base, &cfg(k, beta, 0.0, 1), |s| {
                Ok(s.params.iter().zip(&c).map(|(p, c)| 2.0 * (p - c)).collect())
            })
            .unwrap();
            let factor = (1.0 - 2.0 * beta).powi(k as i32);
            for ((p, b), c) in out.params.iter().zip(&base.params).zip(&c) {
                assert!((p - (c + factor * (b - c))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steps_compose() {
        let base = model();
        let grad = |s: &ModelState| Ok(s.params.iter().map(|p| p.sin() + 0.1).collect());
        let two = inner_loop(&base, &cfg(2, 0.05, 0.0, 1), grad).unwrap();
        let one = inner_loop(&base, &cfg(1, 0.05, 0.0, 1), grad).unwrap();
        let again = inner_loop(&one, &cfg(1, 0.05, 0.0, 1), grad).unwrap();
        assert_eq!(two.params, again.params);
        assert_eq!(base, model());
    }

    #[test]
    fn interpolation_examples() {
        let base = model();
        let mut inner = base.clone();
        inner.params.iter_mut().for_each(|p| *p += 1.0);
        assert_eq!(outer_update(&base, &inner, 0, &cfg(2, 0.1, 2.0, 5)).unwrap(), inner);
        let frozen = outer_update(&base, &inner, 2, &cfg(2, 0.1, f64::INFINITY, 5)).unwrap();
        assert_eq!(frozen, base);

        let mut b = base.clone();
        let mut i = base.clone();
        b.params.iter_mut().for_each(|p| *p = 0.0);
        i.params.iter_mut().enumerate().for_each(|(j, p)| *p = if j % 2 == 0 { 1.0 } else { 2.0 });
        let half = interpolate(&b, &i, 0.5);
        assert_eq!(&half.params[..2], &[0.5, 1.0]);
    }

    #[test]
    fn arch_mismatch_rejected() {
        let a = model();
        let b = init_model(&ArchSpec::desk_default([1, 8, 8], 10), 1).unwrap();
        assert!(outer_update(&a, &b, 0, &cfg(2, 0.1, 2.0, 5)).is_err());
    }

    proptest! {
        #[test]
        fn outer_result_is_convex_combination(t in 0usize..=5, rho in 0.0f64..5.0, seed in 0u64..50) {
            let base = model();
            let mut inner = base.clone();
            for (j, p) in inner.params.iter_mut().enumerate() {
                *p += ((j as u64 * 31 + seed) % 7) as f64 - 3.0;
            }
            let out = outer_update(&base, &inner, t, &cfg(2, 0.1, rho, 5)).unwrap();
            for ((o, b), i) in out.params.iter().zip(&base.params).zip(&inner.params) {
                prop_assert!(*o >= b.min(*i) - 1e-12 && *o <= b.max(*i) + 1e-12);
            }
        }
    }
}
