//! Learning-rate schedule, AdamW and early stopping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{NdTensor, Scalar};

/// Cosine decay from `lr0` at step 0 to exactly 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::arg("cosine schedule needs total_steps >= 1"));
    }
    if step > total_steps {
        return Err(Error::arg(format!(
            "step {step} beyond schedule of {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
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
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step counter and per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient:
    /// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`.
    ///
    /// All gradients are checked before anything is modified, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, NdTensor<T>>,
        grads: &BTreeMap<String, NdTensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let next = self.step + 1;
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at step {next} in parameter {name} (element {i})"
                )));
            }
        }
        self.step = next;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(next as i32);
        let bc2 = 1.0 - c.beta2.powi(next as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.len();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gf = gi.to_f64().unwrap();
                let mf = c.beta1 * mi.to_f64().unwrap() + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * vi.to_f64().unwrap() + (1.0 - c.beta2) * gf * gf;
                *mi = T::from_f64_lossy(mf);
                *vi = T::from_f64_lossy(vf);
                let th = theta.to_f64().unwrap();
                let update = (mf / bc1) / ((vf / bc2).sqrt() + c.eps) + c.weight_decay * th;
                *theta = T::from_f64_lossy(th - lr * update);
            }
        }
        Ok(())
    }
}

/// Patience-based early stopping on a score to maximize.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`. Non-finite scores never count as an
    /// improvement.
    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = score.is_finite() && self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: f64) -> BTreeMap<String, NdTensor<f64>> {
        BTreeMap::from([("p".to_string(), NdTensor::scalar(v))])
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(matches!(cosine_lr(0, 0, 1e-4), Err(Error::Argument(_))));
        assert!(cosine_lr(101, 100, 1e-4).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(total in 1usize..500, a in 0usize..500, b in 0usize..500) {
            let (a, b) = (a.min(total), b.min(total));
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(cosine_lr(lo, total, 1.0).unwrap() >= cosine_lr(hi, total, 1.0).unwrap());
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = one(0.0);
        opt.step(&mut p, &one(1.0), 1e-3).unwrap();
        assert!((p["p"].data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn pure_decay() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = one(1.0);
        opt.step(&mut p, &one(0.0), 0.01).unwrap();
        assert!((p["p"].data()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = one(0.0);
        for _ in 0..2000 {
            let th = p["p"].data()[0];
            opt.step(&mut p, &one(2.0 * (th - 3.0)), 0.01).unwrap();
        }
        assert!((p["p"].data()[0] - 3.0).abs() < 0.01);
    }

    #[test]
    fn non_finite_gradient_names_step_and_parameter() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = one(1.0);
        opt.step(&mut p, &one(1.0), 0.1).unwrap();
        let before = p.clone();
        let err = opt.step(&mut p, &one(f64::NAN), 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("step 2") && msg.contains("parameter p"),
            "{msg}"
        );
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn early_stopping_policy() {
        let mut es = EarlyStopping::new(3);
        let scores = [0.10, 0.20, 0.15, 0.18, 0.19];
        let mut stopped = None;
        for (i, &s) in scores.iter().enumerate() {
            if es.observe(i + 1, s).stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(5));
        assert_eq!(es.best(), Some((2, 0.20)));
    }
}
