//! Noise-normalized encoding accuracy and score reports.
//!
//! The headline number is `m = (1/v) Σ_i r_i² / nc_i`, where `r_i` is the
//! Pearson correlation between predicted and measured responses of vertex `i`
//! across samples and `nc_i` its noise ceiling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Hemisphere, Split};
use crate::error::{Error, Result};
use crate::ndiff::{NdTensor, Scalar};
use crate::prediction::PredictionSet;

/// Columns whose variance falls below this are treated as constant (`r = 0`).
pub const CONSTANT_VARIANCE: f64 = 1e-12;

/// Two-pass Pearson correlation of each column of `pred` with the same column
/// of `gt`, in 64-bit.
pub fn pearson_per_vertex<T: Scalar>(pred: &NdTensor<T>, gt: &NdTensor<T>) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (n, v) = pred.dims2()?;
    if n < 2 {
        return Err(Error::arg(format!(
            "correlation needs at least 2 samples, got {n}"
        )));
    }
    let p = pred.data();
    let g = gt.data();
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let mut mp = vec![0.0f64; v];
    let mut mg = vec![0.0f64; v];
    for i in 0..n {
        for j in 0..v {
            mp[j] += f(p[i * v + j]);
            mg[j] += f(g[i * v + j]);
        }
    }
    let nf = n as f64;
    mp.iter_mut().for_each(|x| *x /= nf);
    mg.iter_mut().for_each(|x| *x /= nf);
    let mut cov = vec![0.0f64; v];
    let mut vp = vec![0.0f64; v];
    let mut vg = vec![0.0f64; v];
    for i in 0..n {
        for j in 0..v {
            let a = f(p[i * v + j]) - mp[j];
            let b = f(g[i * v + j]) - mg[j];
            cov[j] += a * b;
            vp[j] += a * a;
            vg[j] += b * b;
        }
    }
    Ok((0..v)
        .map(|j| {
            if vp[j] / nf < CONSTANT_VARIANCE || vg[j] / nf < CONSTANT_VARIANCE {
                0.0
            } else {
                cov[j] / (vp[j] * vg[j]).sqrt()
            }
        })
        .collect())
}

/// Noise ceilings with zero entries replaced by 1, after validation.
pub fn guarded_noise_ceiling(nc: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = nc.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::validation(format!(
            "noise ceilings must be finite and >= 0, found {bad}"
        )));
    }
    Ok(nc.iter().map(|&x| if x == 0.0 { 1.0 } else { x }).collect())
}

/// `mean_i r_i² / nc_i` for precomputed correlations.
pub fn metric_from_r(r: &[f64], nc: &[f64]) -> Result<f64> {
    if r.len() != nc.len() {
        return Err(Error::shape(format!(
            "{} correlations vs {} noise ceilings",
            r.len(),
            nc.len()
        )));
    }
    if r.is_empty() {
        return Err(Error::arg("no vertices to score"));
    }
    let nc = guarded_noise_ceiling(nc)?;
    let s: f64 = r.iter().zip(&nc).map(|(r, c)| r * r / c).sum();
    Ok(s / r.len() as f64)
}

/// Mean noise-normalized encoding accuracy over the columns of `pred`.
pub fn metric_m<T: Scalar>(pred: &NdTensor<T>, gt: &NdTensor<T>, nc: &[f64]) -> Result<f64> {
    let (_, v) = pred.dims2()?;
    if nc.len() != v {
        return Err(Error::shape(format!(
            "{} noise ceilings for {v} vertices",
            nc.len()
        )));
    }
    metric_from_r(&pearson_per_vertex(pred, gt)?, nc)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HemisphereScore {
    pub m: f64,
    pub median_r: f64,
    pub n_vertices: usize,
    pub rois: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub id: usize,
    pub lh: HemisphereScore,
    pub rh: HemisphereScore,
}

impl SubjectScore {
    pub fn hemisphere(&self, h: Hemisphere) -> &HemisphereScore {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }

    /// Vertex-weighted m over both hemispheres.
    pub fn m(&self) -> f64 {
        let n = (self.lh.n_vertices + self.rh.n_vertices) as f64;
        (self.lh.m * self.lh.n_vertices as f64 + self.rh.m * self.rh.n_vertices as f64) / n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_id: String,
    pub split: Split,
    pub fold: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub overall_m: f64,
    pub subjects: Vec<SubjectScore>,
    pub meta: ReportMeta,
}

/// Scores one hemisphere of one subject, including every ROI of that
/// hemisphere.
pub fn score_hemisphere<'a>(
    pred: &NdTensor<f32>,
    gt: &NdTensor<f32>,
    nc: &[f64],
    rois: impl Iterator<Item = (&'a String, &'a [usize])>,
) -> Result<HemisphereScore> {
    let r = pearson_per_vertex(pred, gt)?;
    let m = metric_from_r(&r, nc)?;
    let mut roi_scores = BTreeMap::new();
    for (name, idx) in rois {
        let rr: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
        let cc: Vec<f64> = idx.iter().map(|&i| nc[i]).collect();
        roi_scores.insert(name.clone(), metric_from_r(&rr, &cc)?);
    }
    Ok(HemisphereScore {
        m,
        median_r: median(&r),
        n_vertices: r.len(),
        rois: roi_scores,
    })
}

/// Vertex-weighted mean of per-subject, per-hemisphere m values.
pub fn overall_m(subjects: &[SubjectScore]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for s in subjects {
        for h in Hemisphere::BOTH {
            let hs = s.hemisphere(h);
            num += hs.m * hs.n_vertices as f64;
            den += hs.n_vertices as f64;
        }
    }
    num / den
}

/// Scores a prediction set against the dataset split it was made for.
pub fn score_report(
    predictions: &PredictionSet,
    dataset: &Dataset,
    split: Split,
) -> Result<ScoreReport> {
    if predictions.meta.split != split {
        return Err(Error::validation(format!(
            "predictions are for split {}, asked to score {split}",
            predictions.meta.split
        )));
    }
    if predictions.subjects.is_empty() {
        return Err(Error::validation("prediction set has no subjects"));
    }
    let fold = predictions.meta.fold;
    let mut subjects = Vec::with_capacity(predictions.subjects.len());
    for sp in &predictions.subjects {
        let subj = dataset.subject(sp.subject)?;
        let want = subj.split_indices(split, fold)?;
        if want != sp.indices {
            return Err(Error::validation(format!(
                "subject {}: prediction rows do not match {split} split of fold {fold}",
                sp.subject
            )));
        }
        let data = subj.select(split, want)?;
        let mut hs = Vec::with_capacity(2);
        for h in Hemisphere::BOTH {
            let pred = sp.responses(h);
            let gt = data.responses(h);
            if pred.shape() != gt.shape() {
                return Err(Error::validation(format!(
                    "subject {} {h}: prediction {:?} vs data {:?}",
                    sp.subject,
                    pred.shape(),
                    gt.shape()
                )));
            }
            let rois = subj.spec.rois_of(h).map(|(n, r)| (n, r.indices.as_slice()));
            hs.push(score_hemisphere(
                pred,
                gt,
                subj.spec.noise_ceiling(h),
                rois,
            )?);
        }
        let rh = hs.pop().unwrap();
        let lh = hs.pop().unwrap();
        subjects.push(SubjectScore {
            id: sp.subject,
            lh,
            rh,
        });
    }
    Ok(ScoreReport {
        overall_m: overall_m(&subjects),
        subjects,
        meta: ReportMeta {
            model_id: predictions.meta.model_id.clone(),
            split,
            fold,
            seed: predictions.meta.seed,
        },
    })
}

impl ScoreReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model {}  split {}  fold {}  seed {}",
            self.meta.model_id, self.meta.split, self.meta.fold, self.meta.seed
        );
        let _ = writeln!(
            out,
            "{:<8} {:<4} {:>8} {:>10} {:>9}",
            "subject", "hemi", "m", "median_r", "vertices"
        );
        for s in &self.subjects {
            for h in Hemisphere::BOTH {
                let hs = s.hemisphere(h);
                let _ = writeln!(
                    out,
                    "{:<8} {:<4} {:>8.4} {:>10.4} {:>9}",
                    s.id, h, hs.m, hs.median_r, hs.n_vertices
                );
                for (name, m) in &hs.rois {
                    let _ = writeln!(out, "{:<8} {:<4}   roi {:<12} {:>8.4}", "", "", name, m);
                }
            }
        }
        let _ = writeln!(out, "overall m = {:.4}", self.overall_m);
        out
    }
}
