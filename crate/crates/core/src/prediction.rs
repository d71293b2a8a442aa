//! Stored model predictions: the unit consumed by evaluation and ensembling.
//!
//! On disk a prediction set is a directory holding `predictions.json` and one
//! `NENC` container per subject and hemisphere (`subjNN_lh.nenc`, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{create_dir, nenc, read_json, write_json, Hemisphere, Split};
use crate::error::{Error, Result};
use crate::ndiff::NdTensor;

pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendMember {
    pub model_id: String,
    /// Weight per subject, as `[lh, rh]`.
    pub weights: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionMeta {
    pub model_id: String,
    pub split: Split,
    pub fold: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<BlendMember>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectHeader {
    id: usize,
    indices: Vec<usize>,
    lh_vertices: usize,
    rh_vertices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: PredictionMeta,
    subjects: Vec<SubjectHeader>,
}

/// Predicted responses of one subject on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPrediction {
    pub subject: usize,
    /// Sample indices (within the split's backing arrays), row order.
    pub indices: Vec<usize>,
    pub lh: NdTensor<f32>,
    pub rh: NdTensor<f32>,
}

impl SubjectPrediction {
    pub fn responses(&self, h: Hemisphere) -> &NdTensor<f32> {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }

    pub fn responses_mut(&mut self, h: Hemisphere) -> &mut NdTensor<f32> {
        match h {
            Hemisphere::Lh => &mut self.lh,
            Hemisphere::Rh => &mut self.rh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub meta: PredictionMeta,
    pub subjects: Vec<SubjectPrediction>,
}

fn array_name(subject: usize, h: Hemisphere) -> String {
    format!("subj{subject:02}_{h}.nenc")
}

impl PredictionSet {
    pub fn subject(&self, id: usize) -> Option<&SubjectPrediction> {
        self.subjects.iter().find(|s| s.subject == id)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            for h in Hemisphere::BOTH {
                let (r, _) = s.responses(h).dims2()?;
                if r != s.indices.len() {
                    return Err(Error::validation(format!(
                        "subject {} {h}: {r} rows for {} indices",
                        s.subject,
                        s.indices.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.validate()?;
        create_dir(dir)?;
        let header = Header {
            meta: self.meta.clone(),
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectHeader {
                    id: s.subject,
                    indices: s.indices.clone(),
                    lh_vertices: s.lh.shape()[1],
                    rh_vertices: s.rh.shape()[1],
                })
                .collect(),
        };
        for s in &self.subjects {
            for h in Hemisphere::BOTH {
                nenc::write_array(dir.join(array_name(s.subject, h)), s.responses(h))?;
            }
        }
        write_json(&dir.join(PREDICTIONS_FILE), &header)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: Header = read_json(&dir.join(PREDICTIONS_FILE))?;
        let mut subjects = Vec::with_capacity(header.subjects.len());
        for sh in header.subjects {
            let lh = nenc::read_array(dir.join(array_name(sh.id, Hemisphere::Lh)))?;
            let rh = nenc::read_array(dir.join(array_name(sh.id, Hemisphere::Rh)))?;
            let n = sh.indices.len();
            for (h, arr, v) in [
                (Hemisphere::Lh, &lh, sh.lh_vertices),
                (Hemisphere::Rh, &rh, sh.rh_vertices),
            ] {
                if arr.shape() != [n, v] {
                    return Err(Error::validation(format!(
                        "prediction subject {} {h}: array {:?}, header says [{n}, {v}]",
                        sh.id,
                        arr.shape()
                    )));
                }
            }
            subjects.push(SubjectPrediction {
                subject: sh.id,
                indices: sh.indices,
                lh,
                rh,
            });
        }
        Ok(Self {
            meta: header.meta,
            subjects,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = PredictionSet {
            meta: PredictionMeta {
                model_id: "m".into(),
                split: Split::Val,
                fold: 1,
                seed: 4,
                members: vec![],
            },
            subjects: vec![SubjectPrediction {
                subject: 0,
                indices: vec![3, 7],
                lh: NdTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                rh: NdTensor::full(&[2, 1], 0.25),
            }],
        };
        set.save(dir.path()).unwrap();
        assert_eq!(PredictionSet::load(dir.path()).unwrap(), set);
    }
}
