//! Training objectives: smooth L1, the row-wise Pearson correlation loss, the
//! column-wise noise-normalized Pearson correlation loss, and their weighted
//! composite over both hemispheres.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{NdTensor, Scalar, Tape, Var};

/// Denominator epsilon of the row-wise cosine similarity in [`pc_loss`].
pub const PC_EPS: f64 = 1e-6;
/// Denominator epsilon of the per-vertex correlation in [`mnnpc_loss`].
pub const MNNPC_EPS: f64 = 1e-8;

/// Which losses are active and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub w_sl1: f64,
    pub w_pc: f64,
    pub w_mnnpc: f64,
    /// Divide the correlation term by per-vertex noise ceilings. `None` picks
    /// the stage default: off for pretraining, on for fine-tuning.
    pub use_noise_ceiling: Option<bool>,
    pub smooth_l1_beta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            w_sl1: 1.0,
            w_pc: 1.0,
            w_mnnpc: 1.0,
            use_noise_ceiling: None,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_sl1, self.w_pc, self.w_mnnpc];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {ws:?}"
            )));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        if self.smooth_l1_beta.is_nan() || self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config(format!(
                "smooth_l1_beta must be > 0, got {}",
                self.smooth_l1_beta
            )));
        }
        Ok(())
    }
}

fn same_2d<T: Scalar>(tape: &Tape<T>, pred: Var, gt: Var) -> Result<(usize, usize)> {
    let (a, b) = (tape.shape(pred), tape.shape(gt));
    if a != b {
        return Err(Error::shape(format!("prediction {a:?} vs target {b:?}")));
    }
    tape.value(pred).dims2()
}

/// Mean smooth-L1 penalty of `pred − gt`.
pub fn smooth_l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, beta: f64) -> Result<Var> {
    same_2d(tape, pred, gt)?;
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::arg(format!(
            "smooth_l1 beta must be > 0, got {beta}"
        )));
    }
    let d = tape.sub(pred, gt)?;
    let h = tape.smooth_l1(d, T::from_f64_lossy(beta));
    Ok(tape.mean_all(h))
}

/// Pearson correlation across vertices, one value per sample row, averaged and
/// remapped to `1 − (r̄ + 1)/2`.
///
/// Each row's correlation is the cosine similarity of the mean-centered rows,
/// with both norms clamped below at [`PC_EPS`].
pub fn pc_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let (b, v) = same_2d(tape, pred, gt)?;
    if v < 2 {
        return Err(Error::arg(format!(
            "pc_loss needs at least 2 vertices per row, got {v}"
        )));
    }
    let eps = T::from_f64_lossy(PC_EPS);
    let centered = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let mu = tape.mean_axis(x, 1)?;
        let mu = tape.broadcast_cols(mu, v)?;
        tape.sub(x, mu)
    };
    let pc = centered(tape, pred)?;
    let gc = centered(tape, gt)?;
    let prod = tape.mul(pc, gc)?;
    let dot = tape.sum_axis(prod, 1)?;
    let norm = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let sq = tape.square(x);
        let ss = tape.sum_axis(sq, 1)?;
        let n = tape.sqrt(ss);
        Ok(tape.clamp_min(n, eps))
    };
    let np = norm(tape, pc)?;
    let ng = norm(tape, gc)?;
    let den = tape.mul(np, ng)?;
    let r = tape.div(dot, den)?;
    debug_assert_eq!(tape.shape(r), &[b, 1]);
    let rbar = tape.mean_all(r);
    let half = T::from_f64_lossy(0.5);
    let s = tape.scale(rbar, -half);
    Ok(tape.add_scalar(s, half))
}

fn checked_nc(nc: &[f64], v: usize) -> Result<Vec<f64>> {
    if nc.len() != v {
        return Err(Error::shape(format!(
            "noise ceiling has {} entries for {v} vertices",
            nc.len()
        )));
    }
    if let Some(bad) = nc.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::validation(format!(
            "noise ceilings must be finite and >= 0, found {bad}"
        )));
    }
    Ok(nc.iter().map(|&x| if x == 0.0 { 1.0 } else { x }).collect())
}

/// Per-vertex Pearson correlation across the batch, remapped to
/// `t = 1 − (r + 1)/2`. With noise ceilings, `t ← t² / nc` (zero ceilings read
/// as 1). Returns the mean over vertices.
///
/// `nc` is never modified.
pub fn mnnpc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    nc: Option<&[f64]>,
) -> Result<Var> {
    let (b, v) = same_2d(tape, pred, gt)?;
    if b < 2 {
        return Err(Error::arg(format!(
            "mnnpc_loss needs a batch of at least 2 rows, got {b}"
        )));
    }
    let nc = nc.map(|n| checked_nc(n, v)).transpose()?;
    let centered = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let mu = tape.mean_axis(x, 0)?;
        let mu = tape.broadcast_rows(mu, b)?;
        tape.sub(x, mu)
    };
    let gc = centered(tape, gt)?;
    let pc = centered(tape, pred)?;
    let prod = tape.mul(gc, pc)?;
    let ts = tape.sum_axis(prod, 0)?;
    let g2 = tape.square(gc);
    let ms1 = tape.sum_axis(g2, 0)?;
    let p2 = tape.square(pc);
    let ms2 = tape.sum_axis(p2, 0)?;
    let ms = tape.mul(ms1, ms2)?;
    let ms = tape.sqrt(ms);
    let den = tape.add_scalar(ms, T::from_f64_lossy(MNNPC_EPS));
    let r = tape.div(ts, den)?;
    let half = T::from_f64_lossy(0.5);
    let s = tape.scale(r, -half);
    let mut tv = tape.add_scalar(s, half);
    if let Some(nc) = nc {
        let inv: Vec<T> = nc.iter().map(|&x| T::from_f64_lossy(1.0 / x)).collect();
        let inv = tape.constant(NdTensor::new(vec![1, v], inv)?);
        let sq = tape.square(tv);
        tv = tape.mul(sq, inv)?;
    }
    Ok(tape.mean_all(tv))
}

/// Target side of one hemisphere for [`composite_loss`].
#[derive(Clone, Copy, Debug)]
pub struct HemisphereTarget<'a> {
    pub gt: Var,
    /// Per-vertex noise ceilings over the full (unmasked) width.
    pub nc: Option<&'a [f64]>,
    /// Valid-vertex mask over the full width; `None` means all valid.
    pub mask: Option<&'a [bool]>,
}

impl<'a> HemisphereTarget<'a> {
    pub fn new(gt: Var) -> Self {
        Self {
            gt,
            nc: None,
            mask: None,
        }
    }
}

/// Weighted sum of the enabled losses on one hemisphere's valid columns.
pub fn hemisphere_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: HemisphereTarget<'_>,
    spec: &LossSpec,
) -> Result<Var> {
    let (_, width) = same_2d(tape, pred, target.gt)?;
    let (pred, gt, nc) = match target.mask {
        None => (pred, target.gt, target.nc.map(|n| n.to_vec())),
        Some(mask) => {
            if mask.len() != width {
                return Err(Error::shape(format!(
                    "mask has {} entries for {width} vertices",
                    mask.len()
                )));
            }
            let idx: Vec<usize> = (0..width).filter(|&j| mask[j]).collect();
            if idx.is_empty() {
                return Err(Error::arg("all vertices are masked"));
            }
            let nc = match target.nc {
                Some(n) if n.len() != width => {
                    return Err(Error::shape(format!(
                        "noise ceiling has {} entries for {width} vertices",
                        n.len()
                    )))
                }
                Some(n) => Some(idx.iter().map(|&j| n[j]).collect::<Vec<_>>()),
                None => None,
            };
            if idx.len() == width {
                (pred, target.gt, nc)
            } else {
                (
                    tape.gather_cols(pred, &idx)?,
                    tape.gather_cols(target.gt, &idx)?,
                    nc,
                )
            }
        }
    };
    let mut terms: Vec<(f64, Var)> = Vec::with_capacity(3);
    if spec.w_sl1 > 0.0 {
        terms.push((spec.w_sl1, smooth_l1(tape, pred, gt, spec.smooth_l1_beta)?));
    }
    if spec.w_pc > 0.0 {
        terms.push((spec.w_pc, pc_loss(tape, pred, gt)?));
    }
    if spec.w_mnnpc > 0.0 {
        terms.push((spec.w_mnnpc, mnnpc_loss(tape, pred, gt, nc.as_deref())?));
    }
    let mut total: Option<Var> = None;
    for (w, term) in terms {
        let scaled = tape.scale(term, T::from_f64_lossy(w));
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    total.ok_or_else(|| Error::Config("no loss enabled".into()))
}

/// `Σ_k w_k · (loss_k(lh) + loss_k(rh)) / 2` over the enabled losses.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred_l: Var,
    target_l: HemisphereTarget<'_>,
    pred_r: Var,
    target_r: HemisphereTarget<'_>,
    spec: &LossSpec,
) -> Result<Var> {
    let l = hemisphere_loss(tape, pred_l, target_l, spec)?;
    let r = hemisphere_loss(tape, pred_r, target_r, spec)?;
    let s = tape.add(l, r)?;
    Ok(tape.scale(s, T::from_f64_lossy(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{grad_check, DEFAULT_FD_EPS};

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).data()[0])
    }

    fn rows(r: &[Vec<f64>]) -> NdTensor<f64> {
        NdTensor::from_rows(r).unwrap()
    }

    #[test]
    fn smooth_l1_examples() {
        let z = eval(|t| {
            let p = t.constant(rows(&[vec![1.0, 2.0]]));
            smooth_l1(t, p, p, 1.0)
        })
        .unwrap();
        assert_eq!(z, 0.0);
        for (d, want) in [(0.5, 0.125), (2.0, 1.5)] {
            let got = eval(|t| {
                let p = t.constant(rows(&[vec![d]]));
                let g = t.constant(rows(&[vec![0.0]]));
                smooth_l1(t, p, g, 1.0)
            })
            .unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn pc_loss_examples() {
        let pc = |p: &[Vec<f64>], g: &[Vec<f64>]| {
            eval(|t| {
                let p = t.constant(rows(p));
                let g = t.constant(rows(g));
                pc_loss(t, p, g)
            })
            .unwrap()
        };
        assert!(pc(&[vec![1.0, 2.0, 3.0]], &[vec![1.0, 2.0, 3.0]]).abs() < 1e-15);
        assert!((pc(&[vec![1.0, 2.0, 3.0]], &[vec![3.0, 2.0, 1.0]]) - 1.0).abs() < 1e-15);
        let r2 = 1.0 / (2.0 * 7f64.sqrt());
        let want = 1.0 - ((1.0 + r2) / 2.0 + 1.0) / 2.0;
        let got = pc(
            &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]],
            &[vec![2.0, 1.0, 3.0], vec![1.0, 3.0, 0.0]],
        );
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        assert!((got - 0.20275).abs() < 1e-5);
    }

    #[test]
    fn pc_loss_needs_two_vertices() {
        let r = eval(|t| {
            let p = t.constant(rows(&[vec![1.0]]));
            pc_loss(t, p, p)
        });
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn mnnpc_examples() {
        let col = |v: &[f64]| rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>());
        let gt = rows(&[vec![1.0, 2.0], vec![3.0, 0.5], vec![0.0, 4.0]]);
        let same = eval(|t| {
            let g = t.constant(gt.clone());
            mnnpc_loss(t, g, g, None)
        })
        .unwrap();
        assert!(same.abs() < 1e-8, "{same}");

        let neg = gt.map(|x| -x);
        let flipped = eval(|t| {
            let g = t.constant(gt.clone());
            let p = t.constant(neg.clone());
            mnnpc_loss(t, p, g, None)
        })
        .unwrap();
        assert!((flipped - 1.0).abs() < 1e-8);

        let with_zero_nc = eval(|t| {
            let g = t.constant(col(&[1.0, 3.0, 0.0]));
            let p = t.constant(col(&[-1.0, -3.0, 0.0]));
            mnnpc_loss(t, p, g, Some(&[0.0]))
        })
        .unwrap();
        assert!((with_zero_nc - 1.0).abs() < 1e-8);

        let r = 1.0 / (2.0 * 7f64.sqrt());
        let tv = 1.0 - (r + 1.0) / 2.0;
        let got = eval(|t| {
            let p = t.constant(col(&[0.0, 1.0, 1.0]));
            let g = t.constant(col(&[1.0, 3.0, 0.0]));
            mnnpc_loss(t, p, g, Some(&[0.5]))
        })
        .unwrap();
        assert!((got - tv * tv / 0.5).abs() < 1e-9, "{got}");
        assert!((got - 0.32888).abs() < 1e-4);
    }

    #[test]
    fn mnnpc_errors() {
        let one_row = eval(|t| {
            let p = t.constant(rows(&[vec![1.0, 2.0]]));
            mnnpc_loss(t, p, p, None)
        });
        assert!(matches!(one_row, Err(Error::Argument(_))));
        let neg_nc = eval(|t| {
            let p = t.constant(rows(&[vec![1.0], vec![2.0]]));
            mnnpc_loss(t, p, p, Some(&[-0.1]))
        });
        assert!(matches!(neg_nc, Err(Error::Validation(_))));
    }

    #[test]
    fn nc_input_is_not_mutated() {
        let nc = vec![0.0, 0.5];
        let _ = eval(|t| {
            let p = t.constant(rows(&[vec![1.0, 2.0], vec![2.0, 0.0], vec![0.5, 1.0]]));
            mnnpc_loss(t, p, p, Some(&nc))
        })
        .unwrap();
        assert_eq!(nc, vec![0.0, 0.5]);
    }

    #[test]
    fn composite_examples() {
        let gt = rows(&[
            vec![1.0, 2.0, 0.5],
            vec![3.0, 0.5, 1.0],
            vec![0.0, 4.0, 2.0],
        ]);
        let run = |spec: &LossSpec, pred: &NdTensor<f64>| {
            eval(|t| {
                let g = t.constant(gt.clone());
                let p = t.constant(pred.clone());
                composite_loss(
                    t,
                    p,
                    HemisphereTarget::new(g),
                    p,
                    HemisphereTarget::new(g),
                    spec,
                )
            })
            .unwrap()
        };
        let only_l1 = LossSpec {
            w_pc: 0.0,
            w_mnnpc: 0.0,
            ..LossSpec::default()
        };
        assert_eq!(run(&only_l1, &gt), 0.0);
        assert!(run(&LossSpec::default(), &gt).abs() < 1e-8);

        let off = gt.map(|x| 0.3 * x * x - x);
        let base = run(&LossSpec::default(), &off);
        let doubled = LossSpec {
            w_sl1: 2.0,
            w_pc: 2.0,
            w_mnnpc: 2.0,
            ..LossSpec::default()
        };
        assert!((run(&doubled, &off) - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_is_argument_error() {
        let mask = [false, false];
        let r = eval(|t| {
            let p = t.constant(rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
            let target = HemisphereTarget {
                gt: p,
                nc: None,
                mask: Some(&mask),
            };
            hemisphere_loss(t, p, target, &LossSpec::default())
        });
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn masked_columns_get_zero_gradient() {
        let mask = [true, false, true];
        let mut t = Tape::<f64>::new();
        let p = t.param(rows(&[
            vec![1.0, 2.0, 0.1],
            vec![2.0, 1.0, 0.7],
            vec![0.3, 0.2, 0.9],
        ]));
        let g = t.constant(rows(&[
            vec![0.5, 2.0, 1.0],
            vec![1.0, 1.0, 0.2],
            vec![0.1, 0.2, 3.0],
        ]));
        let target = HemisphereTarget {
            gt: g,
            nc: Some(&[0.5, 0.1, 0.9]),
            mask: Some(&mask),
        };
        let l = hemisphere_loss(&mut t, p, target, &LossSpec::default()).unwrap();
        t.backward(l).unwrap();
        let grad = t.grad(p).unwrap();
        for i in 0..3 {
            assert_eq!(grad.at2(i, 1), 0.0);
            assert_ne!(grad.at2(i, 0), 0.0);
        }
    }

    #[test]
    fn spec_validation() {
        let zero = LossSpec {
            w_sl1: 0.0,
            w_pc: 0.0,
            w_mnnpc: 0.0,
            ..LossSpec::default()
        };
        assert!(zero.validate().is_err());
        assert!(LossSpec::default().validate().is_ok());
    }

    #[test]
    fn correlation_losses_pass_grad_check() {
        let gt = rows(&[
            vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1],
            vec![1.1, 0.4, -0.9, 0.2, 0.6, -1.5],
            vec![-0.7, 0.9, 1.4, -0.3, 0.0, 0.8],
            vec![0.5, -0.2, 0.3, 1.7, -1.1, 0.4],
        ]);
        let pred = gt.map(|x| (1.3 * x).sin() + 0.2);
        let nc = [0.2, 0.9, 0.0, 0.5, 1.0, 0.7];
        let pc_err = grad_check(
            |t, x| {
                let g = t.constant(gt.clone());
                pc_loss(t, x, g)
            },
            &pred,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(pc_err < 1e-4, "{pc_err}");
        let mn_err = grad_check(
            |t, x| {
                let g = t.constant(gt.clone());
                mnnpc_loss(t, x, g, Some(&nc))
            },
            &pred,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(mn_err < 1e-4, "{mn_err}");
    }
}
