//! Weighted blending of prediction sets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{read_json, Hemisphere};
use crate::error::{Error, Result};
use crate::evaluation::ScoreReport;
use crate::ndiff::NdTensor;
use crate::prediction::{BlendMember, PredictionMeta, PredictionSet, SubjectPrediction};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// `w ∝ max(val_m, 0)`, uniform when every clipped score is 0.
    #[default]
    ScoreProportional,
    Explicit,
}

/// Validation m of one member for one subject.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectScores {
    pub subject: usize,
    pub lh: f64,
    pub rh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    /// Prediction set directory.
    pub predictions: PathBuf,
    /// Validation scores given inline.
    #[serde(default)]
    pub scores: Option<Vec<SubjectScores>>,
    /// Alternatively, a score report to read them from.
    #[serde(default)]
    pub report: Option<PathBuf>,
    /// Weight for explicit mode.
    #[serde(default)]
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub mode: Option<WeightMode>,
    #[serde(default)]
    pub model_id: Option<String>,
}

/// Ensemble defaults for the run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub mode: WeightMode,
}

/// Member weights per subject, as `[lh, rh]` vectors over members.
pub type Weights = BTreeMap<usize, [Vec<f64>; 2]>;

/// Normalizes non-negative values so that they sum to exactly 1 in any order.
///
/// Weights are quantized to multiples of 2^-53 whose integer counts total
/// 2^53, so every partial sum is exactly representable. The largest entry
/// absorbs the quantization residue. `None` when all are zero.
fn normalize(values: &[f64]) -> Option<Vec<f64>> {
    const UNIT: f64 = (1u64 << 53) as f64;
    let total: f64 = values.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let mut q: Vec<i64> = values
        .iter()
        .map(|v| (v / total * UNIT).floor() as i64)
        .collect();
    let k = (0..q.len()).fold(0, |k, i| if q[i] > q[k] { i } else { k });
    q[k] += (1i64 << 53) - q.iter().sum::<i64>();
    Some(q.into_iter().map(|c| c as f64 / UNIT).collect())
}

fn uniform(n: usize) -> Vec<f64> {
    normalize(&vec![1.0; n]).expect("n >= 1")
}

/// Per-(subject, hemisphere) weights over `n_members`.
///
/// `scores[m]` maps subject → `[lh, rh]` validation m of member `m`;
/// `explicit` holds one weight per member.
pub fn compute_weights(
    mode: WeightMode,
    subjects: &[usize],
    n_members: usize,
    scores: Option<&[BTreeMap<usize, [f64; 2]>]>,
    explicit: Option<&[f64]>,
) -> Result<Weights> {
    if n_members == 0 {
        return Err(Error::validation("an ensemble needs at least one member"));
    }
    let mut out = Weights::new();
    match mode {
        WeightMode::Uniform => {
            for &s in subjects {
                out.insert(s, [uniform(n_members), uniform(n_members)]);
            }
        }
        WeightMode::Explicit => {
            let w = explicit
                .ok_or_else(|| Error::Config("explicit mode needs a weight per member".into()))?;
            if w.len() != n_members {
                return Err(Error::Config(format!(
                    "{} explicit weights for {n_members} members",
                    w.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(
                    "explicit weights must be finite and >= 0".into(),
                ));
            }
            let w = normalize(w)
                .ok_or_else(|| Error::Config("explicit weights are all zero".into()))?;
            for &s in subjects {
                out.insert(s, [w.clone(), w.clone()]);
            }
        }
        WeightMode::ScoreProportional => {
            let scores = scores.ok_or_else(|| {
                Error::Config("score-proportional mode needs member scores".into())
            })?;
            if scores.len() != n_members {
                return Err(Error::validation(format!(
                    "scores for {} of {n_members} members",
                    scores.len()
                )));
            }
            for &s in subjects {
                let mut pair = [Vec::new(), Vec::new()];
                for (h, slot) in pair.iter_mut().enumerate() {
                    let mut vals = Vec::with_capacity(n_members);
                    for (m, sc) in scores.iter().enumerate() {
                        let v = sc.get(&s).ok_or_else(|| {
                            Error::validation(format!("member {m} has no score for subject {s}"))
                        })?[h];
                        if v.is_nan() {
                            return Err(Error::validation(format!(
                                "member {m} subject {s}: score is NaN"
                            )));
                        }
                        vals.push(v.max(0.0));
                    }
                    *slot = normalize(&vals).unwrap_or_else(|| uniform(n_members));
                }
                out.insert(s, pair);
            }
        }
    }
    Ok(out)
}

/// Per-element weighted sum of member predictions, accumulated in 64-bit in
/// member order.
pub fn blend(sets: &[&PredictionSet], weights: &Weights, model_id: &str) -> Result<PredictionSet> {
    let first = *sets
        .first()
        .ok_or_else(|| Error::validation("nothing to blend"))?;
    for (m, set) in sets.iter().enumerate().skip(1) {
        if set.meta.split != first.meta.split || set.meta.fold != first.meta.fold {
            return Err(Error::validation(format!(
                "member {m} predicts {} fold {}, member 0 {} fold {}",
                set.meta.split, set.meta.fold, first.meta.split, first.meta.fold
            )));
        }
        if set.subjects.len() != first.subjects.len() {
            return Err(Error::validation(format!(
                "member {m} covers a different set of subjects"
            )));
        }
    }
    let mut subjects = Vec::with_capacity(first.subjects.len());
    for base in &first.subjects {
        let id = base.subject;
        let w = weights
            .get(&id)
            .ok_or_else(|| Error::validation(format!("no weights for subject {id}")))?;
        let mut members: Vec<&SubjectPrediction> = Vec::with_capacity(sets.len());
        for (m, set) in sets.iter().enumerate() {
            let sp = set
                .subject(id)
                .ok_or_else(|| Error::validation(format!("member {m} has no subject {id}")))?;
            if sp.indices != base.indices {
                return Err(Error::validation(format!(
                    "member {m} subject {id}: sample indices differ"
                )));
            }
            members.push(sp);
        }
        let mut out = [None, None];
        for h in Hemisphere::BOTH {
            let k = usize::from(h == Hemisphere::Rh);
            if w[k].len() != sets.len() {
                return Err(Error::validation(format!(
                    "subject {id} {h}: {} weights for {} members",
                    w[k].len(),
                    sets.len()
                )));
            }
            let shape = base.responses(h).shape();
            let mut acc = vec![0.0f64; base.responses(h).len()];
            for (m, sp) in members.iter().enumerate() {
                let arr = sp.responses(h);
                if arr.shape() != shape {
                    return Err(Error::validation(format!(
                        "member {m} subject {id} {h}: shape {:?}, expected {shape:?}",
                        arr.shape()
                    )));
                }
                let wm = w[k][m];
                for (a, &x) in acc.iter_mut().zip(arr.data()) {
                    *a += wm * x as f64;
                }
            }
            out[k] = Some(NdTensor::new(
                shape.to_vec(),
                acc.into_iter().map(|x| x as f32).collect(),
            )?);
        }
        let [lh, rh] = out;
        subjects.push(SubjectPrediction {
            subject: id,
            indices: base.indices.clone(),
            lh: lh.expect("filled"),
            rh: rh.expect("filled"),
        });
    }
    let members = sets
        .iter()
        .enumerate()
        .map(|(m, s)| BlendMember {
            model_id: s.meta.model_id.clone(),
            weights: first
                .subjects
                .iter()
                .map(|sp| [weights[&sp.subject][0][m], weights[&sp.subject][1][m]])
                .collect(),
        })
        .collect();
    Ok(PredictionSet {
        meta: PredictionMeta {
            model_id: model_id.to_string(),
            split: first.meta.split,
            fold: first.meta.fold,
            seed: first.meta.seed,
            members,
        },
        subjects,
    })
}

/// Subject → `[lh, rh]` m from a score report.
pub fn scores_from_report(report: &ScoreReport) -> BTreeMap<usize, [f64; 2]> {
    report
        .subjects
        .iter()
        .map(|s| (s.id, [s.lh.m, s.rh.m]))
        .collect()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every member of `spec` (relative paths resolve against `base`),
/// computes weights and blends.
pub fn run_ensemble(
    spec: &EnsembleSpec,
    base: &Path,
    default_mode: WeightMode,
) -> Result<PredictionSet> {
    if spec.members.is_empty() {
        return Err(Error::Config("ensemble spec lists no members".into()));
    }
    let mode = spec.mode.unwrap_or(default_mode);
    let sets: Vec<PredictionSet> = spec
        .members
        .iter()
        .map(|m| PredictionSet::load(resolve(base, &m.predictions)))
        .collect::<Result<_>>()?;
    let subjects: Vec<usize> = sets[0].subjects.iter().map(|s| s.subject).collect();
    let scores = if mode == WeightMode::ScoreProportional {
        let mut all = Vec::with_capacity(spec.members.len());
        for (i, m) in spec.members.iter().enumerate() {
            let sc = match (&m.scores, &m.report) {
                (Some(list), _) => list.iter().map(|s| (s.subject, [s.lh, s.rh])).collect(),
                (None, Some(path)) => {
                    let report: ScoreReport = read_json(&resolve(base, path))?;
                    scores_from_report(&report)
                }
                (None, None) => {
                    return Err(Error::Config(format!(
                        "member {i} needs `scores` or `report` for score-proportional weighting"
                    )))
                }
            };
            all.push(sc);
        }
        Some(all)
    } else {
        None
    };
    let explicit = if mode == WeightMode::Explicit {
        Some(
            spec.members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    m.weight
                        .ok_or_else(|| Error::Config(format!("member {i} has no weight")))
                })
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    let weights = compute_weights(
        mode,
        &subjects,
        sets.len(),
        scores.as_deref(),
        explicit.as_deref(),
    )?;
    let refs: Vec<&PredictionSet> = sets.iter().collect();
    blend(
        &refs,
        &weights,
        spec.model_id.as_deref().unwrap_or("ensemble"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Split;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> Vec<BTreeMap<usize, [f64; 2]>> {
        v.iter().map(|&x| BTreeMap::from([(0, [x, x])])).collect()
    }

    fn weights_for(v: &[f64]) -> Vec<f64> {
        compute_weights(
            WeightMode::ScoreProportional,
            &[0],
            v.len(),
            Some(&scores(v)),
            None,
        )
        .unwrap()[&0][0]
            .clone()
    }

    fn set(id: &str, lh: f32, rh: f32) -> PredictionSet {
        PredictionSet {
            meta: PredictionMeta {
                model_id: id.into(),
                split: Split::Val,
                fold: 0,
                seed: 0,
                members: vec![],
            },
            subjects: vec![SubjectPrediction {
                subject: 0,
                indices: vec![4, 9],
                lh: NdTensor::full(&[2, 3], lh),
                rh: NdTensor::full(&[2, 2], rh),
            }],
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weights_for(&[0.2, 0.6]), vec![0.25, 0.75]);
        assert_eq!(weights_for(&[0.4, 0.4]), vec![0.5, 0.5]);
        assert_eq!(weights_for(&[-0.1, 0.0]), vec![0.5, 0.5]);
        let e = compute_weights(WeightMode::Explicit, &[0], 2, None, Some(&[1.0, 3.0])).unwrap();
        assert_eq!(e[&0][1], vec![0.25, 0.75]);
        assert!(compute_weights(WeightMode::Explicit, &[0], 2, None, Some(&[0.0, 0.0])).is_err());
        assert!(compute_weights(WeightMode::Explicit, &[0], 2, None, Some(&[-1.0, 2.0])).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_exactly_one(v in prop::collection::vec(-1.0f64..1.0, 1..9)) {
            let w = weights_for(&v);
            prop_assert_eq!(w.iter().sum::<f64>(), 1.0);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn blend_is_permutation_invariant(a in -5.0f32..5.0, b in -5.0f32..5.0, sa in 0.01f64..1.0, sb in 0.01f64..1.0) {
            let (x, y) = (set("x", a, b), set("y", b, a));
            let w = compute_weights(WeightMode::ScoreProportional, &[0], 2, Some(&scores(&[sa, sb])), None).unwrap();
            let wr = compute_weights(WeightMode::ScoreProportional, &[0], 2, Some(&scores(&[sb, sa])), None).unwrap();
            let p = blend(&[&x, &y], &w, "e").unwrap();
            let q = blend(&[&y, &x], &wr, "e").unwrap();
            prop_assert!(p.subjects[0].lh.max_abs_diff(&q.subjects[0].lh) < 1e-5);
            prop_assert!(p.subjects[0].rh.max_abs_diff(&q.subjects[0].rh) < 1e-5);
        }
    }

    #[test]
    fn blend_examples() {
        let w = compute_weights(WeightMode::Explicit, &[0], 2, None, Some(&[0.25, 0.75])).unwrap();
        let out = blend(&[&set("a", 0.0, 0.0), &set("b", 4.0, 4.0)], &w, "e").unwrap();
        assert!(out.subjects[0].lh.data().iter().all(|&x| x == 3.0));
        assert_eq!(out.meta.members.len(), 2);
        assert_eq!(out.meta.members[1].weights, vec![[0.75, 0.75]]);

        let one = set("a", 1.7, -0.3);
        let w = compute_weights(WeightMode::Uniform, &[0], 4, None, None).unwrap();
        let out = blend(&[&one, &one, &one, &one], &w, "e").unwrap();
        assert_eq!(out.subjects, one.subjects);
    }

    #[test]
    fn mismatched_members_are_rejected() {
        let w = compute_weights(WeightMode::Uniform, &[0], 2, None, None).unwrap();
        let a = set("a", 0.0, 0.0);
        let mut b = set("b", 1.0, 1.0);
        b.subjects[0].lh = NdTensor::zeros(&[2, 4]);
        assert!(matches!(
            blend(&[&a, &b], &w, "e"),
            Err(Error::Validation(_))
        ));
        let mut c = set("c", 1.0, 1.0);
        c.subjects[0].indices = vec![4, 8];
        assert!(matches!(
            blend(&[&a, &c], &w, "e"),
            Err(Error::Validation(_))
        ));
        let mut d = set("d", 1.0, 1.0);
        d.meta.split = Split::Test;
        assert!(matches!(
            blend(&[&a, &d], &w, "e"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn spec_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        set("a", 1.0, 2.0).save(dir.path().join("a")).unwrap();
        set("b", 3.0, 6.0).save(dir.path().join("b")).unwrap();
        let spec: EnsembleSpec = serde_json::from_str(
            r#"{"members": [
                {"predictions": "a", "scores": [{"subject": 0, "lh": 0.2, "rh": 0.1}]},
                {"predictions": "b", "scores": [{"subject": 0, "lh": 0.6, "rh": 0.1}]}
            ]}"#,
        )
        .unwrap();
        let out = run_ensemble(&spec, dir.path(), WeightMode::default()).unwrap();
        assert!(out.subjects[0].lh.data().iter().all(|&x| x == 2.5));
        assert!(out.subjects[0].rh.data().iter().all(|&x| x == 4.0));
        assert!(serde_json::from_str::<EnsembleSpec>(r#"{"members": [], "bogus": 1}"#).is_err());
    }
}
