//! Synthetic multi-subject datasets with a known ground-truth encoder.
//!
//! Images are random smooth fields in `[0, 1]`. A shared latent map
//! `φ(x) = tanh(A·x + c)` turns pixels into `latent_dim` features, and each
//! subject reads them out linearly: `y = W_s·φ(x) + b_s + ε`,
//! `ε ~ N(0, σ_noise²)`. Every row of `W_s` is rescaled so the noiseless signal
//! of each vertex has unit standard deviation over the subject's samples, which
//! makes the noise ceiling `σ²_signal / (σ²_signal + σ²_noise)` exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    create_dir, default_fold_seed, make_folds, nenc, read_json, write_json, ChannelStats, Dataset,
    DatasetManifest, Hemisphere, ImageDims, Roi, Split, SubjectData, SubjectEntry, SubjectSpec,
    TestArrays, DEFAULT_FOLDS, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::evaluation::{score_report, ScoreReport};
use crate::ndiff::NdTensor;
use crate::prediction::{PredictionMeta, PredictionSet, SubjectPrediction};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const GROUND_TRUTH_DIR: &str = "ground_truth";

const ROI_NAMES: [&str; 8] = ["V1v", "V1d", "V2v", "V2d", "V3v", "V3d", "hV4", "FFA-1"];
/// Number of random cosine components per image channel.
const FIELD_COMPONENTS: usize = 6;

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    /// Extra held-out samples per subject, stored as the test split.
    pub test_samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub lh_vertices: usize,
    pub rh_vertices: usize,
    /// Optional per-subject `[lh, rh]` vertex counts overriding the two above.
    pub vertex_counts: Option<Vec<[usize; 2]>>,
    /// Fraction of each subject's samples that use images shared by all
    /// subjects.
    pub shared_fraction: f64,
    /// Noise standard deviation relative to the unit signal standard deviation.
    pub noise_std: f64,
    /// Per-vertex noise std is `noise_std·(1 + h·u)`, `u ~ U(−1, 1)`.
    pub noise_heterogeneity: f64,
    /// Share of readout variance common to all subjects: each subject's
    /// weights are `√ρ·C + √(1−ρ)·W_s` before rescaling.
    pub readout_sharing: f64,
    pub latent_dim: usize,
    pub rois_per_hemisphere: usize,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_subjects: 2,
            samples_per_subject: 512,
            test_samples: 128,
            channels: 3,
            height: 16,
            width: 16,
            lh_vertices: 200,
            rh_vertices: 200,
            vertex_counts: None,
            shared_fraction: 0.25,
            noise_std: 1.0,
            noise_heterogeneity: 0.0,
            readout_sharing: 0.5,
            latent_dim: 16,
            rois_per_hemisphere: 3,
            n_folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("samples_per_subject", self.samples_per_subject),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("lh_vertices", self.lh_vertices),
            ("rh_vertices", self.rh_vertices),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config(format!(
                "shared_fraction must lie in [0, 1], got {}",
                self.shared_fraction
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.readout_sharing) {
            return Err(Error::Config("readout_sharing must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.noise_heterogeneity) {
            return Err(Error::Config(
                "noise_heterogeneity must lie in [0, 1)".into(),
            ));
        }
        if self.n_folds < 2 || self.samples_per_subject < self.n_folds {
            return Err(Error::Config(format!(
                "need n_folds >= 2 and samples_per_subject >= n_folds, got {} / {}",
                self.n_folds, self.samples_per_subject
            )));
        }
        if self.samples_per_subject < 2 {
            return Err(Error::Config("samples_per_subject must be >= 2".into()));
        }
        if let Some(vc) = &self.vertex_counts {
            if vc.len() != self.n_subjects || vc.iter().flatten().any(|&v| v == 0) {
                return Err(Error::Config(
                    "vertex_counts needs one non-zero [lh, rh] pair per subject".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn vertices_of(&self, subject: usize) -> [usize; 2] {
        match &self.vertex_counts {
            Some(vc) => vc[subject],
            None => [self.lh_vertices, self.rh_vertices],
        }
    }

    fn dims(&self) -> ImageDims {
        ImageDims {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Ground-truth readout of one hemisphere of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct HemisphereTruth {
    /// `[vertices, latent_dim]`
    pub weights: NdTensor<f32>,
    pub bias: Vec<f32>,
    pub noise_std: Vec<f32>,
    /// Measured over the subject's generated (non-test) samples.
    pub signal_std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTruth {
    pub lh: HemisphereTruth,
    pub rh: HemisphereTruth,
}

impl SubjectTruth {
    pub fn hemisphere(&self, h: Hemisphere) -> &HemisphereTruth {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }

    pub fn hemisphere_mut(&mut self, h: Hemisphere) -> &mut HemisphereTruth {
        match h {
            Hemisphere::Lh => &mut self.lh,
            Hemisphere::Rh => &mut self.rh,
        }
    }
}

/// The generating process, kept alongside the dataset for oracle scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: ImageDims,
    /// `[latent_dim, pixels]`
    pub projection: NdTensor<f32>,
    pub offset: Vec<f32>,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthHeader {
    latent_dim: usize,
    nonlinearity: String,
    image: ImageDims,
    n_subjects: usize,
    projection: String,
    offset: String,
    subjects: Vec<BTreeMap<String, String>>,
}

fn gt_array(subject: usize, h: Hemisphere, what: &str) -> String {
    format!("subj{subject:02}_{what}_{h}.nenc")
}

impl GroundTruth {
    pub fn latent_dim(&self) -> usize {
        self.offset.len()
    }

    /// `φ(x)` for a `[B, C, H, W]` stack of raw images, in 64-bit.
    pub fn latent(&self, images: &NdTensor<f32>) -> Result<Vec<Vec<f64>>> {
        let px = self.image.pixels();
        if images.row_len() != px {
            return Err(Error::validation(format!(
                "images have {} pixels, ground truth expects {px}",
                images.row_len()
            )));
        }
        let k = self.latent_dim();
        let a = self.projection.data();
        Ok((0..images.rows())
            .map(|i| {
                let x = images.row(i);
                (0..k)
                    .map(|l| {
                        let row = &a[l * px..(l + 1) * px];
                        let z: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
                        (z + self.offset[l] as f64).tanh()
                    })
                    .collect()
            })
            .collect())
    }

    fn readout(h: &HemisphereTruth, latent: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (v, k) = (h.bias.len(), h.weights.shape()[1]);
        let w = h.weights.data();
        latent
            .iter()
            .map(|phi| {
                (0..v)
                    .map(|j| {
                        let s: f64 = (0..k).map(|l| w[j * k + l] as f64 * phi[l]).sum();
                        s + h.bias[j] as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Noiseless responses `W_s·φ(x) + b_s` for both hemispheres.
    pub fn predict(
        &self,
        subject: usize,
        images: &NdTensor<f32>,
    ) -> Result<(NdTensor<f32>, NdTensor<f32>)> {
        let st = self
            .subjects
            .get(subject)
            .ok_or_else(|| Error::validation(format!("ground truth has no subject {subject}")))?;
        let latent = self.latent(images)?;
        let to_tensor = |rows: Vec<Vec<f64>>| {
            let v = rows[0].len();
            NdTensor::new(
                vec![rows.len(), v],
                rows.into_iter().flatten().map(|x| x as f32).collect(),
            )
        };
        Ok((
            to_tensor(Self::readout(&st.lh, &latent))?,
            to_tensor(Self::readout(&st.rh, &latent))?,
        ))
    }

    /// `n` noisy responses of one hemisphere to a single raw image `[C, H, W]`.
    pub fn sample_repeats(
        &self,
        subject: usize,
        h: Hemisphere,
        image: &[f32],
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let st = self
            .subjects
            .get(subject)
            .ok_or_else(|| Error::validation(format!("ground truth has no subject {subject}")))?;
        let mut shape = vec![1];
        shape.extend([self.image.channels, self.image.height, self.image.width]);
        let img = NdTensor::new(shape, image.to_vec())?;
        let ht = st.hemisphere(h);
        let clean = Self::readout(ht, &self.latent(&img)?).remove(0);
        Ok((0..n)
            .map(|_| {
                clean
                    .iter()
                    .zip(&ht.noise_std)
                    .map(|(&c, &s)| c + s as f64 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect())
    }

    /// Checks that this ground truth describes `dataset`.
    pub fn check_matches(&self, dataset: &Dataset) -> Result<()> {
        if self.image != dataset.image_dims() {
            return Err(Error::validation(
                "ground truth image dims differ from dataset",
            ));
        }
        if self.subjects.len() != dataset.n_subjects() {
            return Err(Error::validation(format!(
                "ground truth has {} subjects, dataset {}",
                self.subjects.len(),
                dataset.n_subjects()
            )));
        }
        for (s, (st, sd)) in self.subjects.iter().zip(&dataset.subjects).enumerate() {
            for h in Hemisphere::BOTH {
                let ht = st.hemisphere(h);
                if ht.weights.shape() != [sd.spec.vertices(h), self.latent_dim()]
                    || ht.bias.len() != sd.spec.vertices(h)
                {
                    return Err(Error::validation(format!(
                        "ground truth subject {s} {h} does not match dataset vertex count"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let dir = root.join(GROUND_TRUTH_DIR);
        create_dir(&dir)?;
        let k = self.latent_dim();
        nenc::write_array(dir.join("projection.nenc"), &self.projection)?;
        nenc::write_array(
            dir.join("offset.nenc"),
            &NdTensor::new(vec![k], self.offset.clone())?,
        )?;
        let mut subjects = Vec::new();
        for (s, st) in self.subjects.iter().enumerate() {
            let mut files = BTreeMap::new();
            for h in Hemisphere::BOTH {
                let ht = st.hemisphere(h);
                let v = ht.bias.len();
                let arrays = [
                    ("w", ht.weights.clone()),
                    ("b", NdTensor::new(vec![v], ht.bias.clone())?),
                    ("noise_std", NdTensor::new(vec![v], ht.noise_std.clone())?),
                    ("signal_std", NdTensor::new(vec![v], ht.signal_std.clone())?),
                ];
                for (what, arr) in arrays {
                    let name = gt_array(s, h, what);
                    nenc::write_array(dir.join(&name), &arr)?;
                    files.insert(format!("{what}_{h}"), format!("{GROUND_TRUTH_DIR}/{name}"));
                }
            }
            subjects.push(files);
        }
        let header = GroundTruthHeader {
            latent_dim: k,
            nonlinearity: "tanh".into(),
            image: self.image,
            n_subjects: self.subjects.len(),
            projection: format!("{GROUND_TRUTH_DIR}/projection.nenc"),
            offset: format!("{GROUND_TRUTH_DIR}/offset.nenc"),
            subjects,
        };
        write_json(&root.join(GROUND_TRUTH_FILE), &header)
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let header: GroundTruthHeader = read_json(&root.join(GROUND_TRUTH_FILE))?;
        if header.nonlinearity != "tanh" {
            return Err(Error::validation(format!(
                "unsupported nonlinearity {}",
                header.nonlinearity
            )));
        }
        let projection = nenc::read_array(root.join(&header.projection))?;
        let offset = nenc::read_array(root.join(&header.offset))?.into_data();
        if projection.shape() != [header.latent_dim, header.image.pixels()]
            || offset.len() != header.latent_dim
        {
            return Err(Error::validation("ground truth projection shape mismatch"));
        }
        let mut subjects = Vec::new();
        for files in &header.subjects {
            let get = |key: &str| -> Result<NdTensor<f32>> {
                let rel = files
                    .get(key)
                    .ok_or_else(|| Error::validation(format!("ground truth missing {key}")))?;
                nenc::read_array(root.join(rel))
            };
            let hemi = |h: Hemisphere| -> Result<HemisphereTruth> {
                Ok(HemisphereTruth {
                    weights: get(&format!("w_{h}"))?,
                    bias: get(&format!("b_{h}"))?.into_data(),
                    noise_std: get(&format!("noise_std_{h}"))?.into_data(),
                    signal_std: get(&format!("signal_std_{h}"))?.into_data(),
                })
            };
            subjects.push(SubjectTruth {
                lh: hemi(Hemisphere::Lh)?,
                rh: hemi(Hemisphere::Rh)?,
            });
        }
        Ok(Self {
            image: header.image,
            projection,
            offset,
            subjects,
        })
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One smooth random image `[C, H, W]` with values in `(0, 1)`.
fn smooth_image(rng: &mut ChaCha8Rng, d: ImageDims) -> Vec<f32> {
    let mut out = Vec::with_capacity(d.pixels());
    for _ in 0..d.channels {
        let comps: Vec<(f64, f64, f64, f64)> = (0..FIELD_COMPONENTS)
            .map(|_| {
                let fx = rng.random_range(0..=2) as f64;
                let fy = rng.random_range(-2..=2) as f64;
                let amp = normal(rng);
                let phase = rng.random_range(0.0..2.0 * PI);
                (fx, fy, amp, phase)
            })
            .collect();
        let norm = (FIELD_COMPONENTS as f64 / 2.0).sqrt();
        for y in 0..d.height {
            for x in 0..d.width {
                let v: f64 = comps
                    .iter()
                    .map(|&(fx, fy, a, p)| {
                        a * (2.0
                            * PI
                            * (fx * x as f64 / d.width as f64 + fy * y as f64 / d.height as f64)
                            + p)
                            .cos()
                    })
                    .sum::<f64>()
                    / norm;
                out.push((0.5 + 0.5 * v.tanh()) as f32);
            }
        }
    }
    out
}

fn make_rois(rng: &mut ChaCha8Rng, spec: &GenSpec, counts: [usize; 2]) -> BTreeMap<String, Roi> {
    let mut rois = BTreeMap::new();
    let mut name_iter = ROI_NAMES.iter().cycle();
    for (hi, h) in Hemisphere::BOTH.into_iter().enumerate() {
        let v = counts[hi];
        for k in 0..spec.rois_per_hemisphere {
            let base = name_iter.next().unwrap();
            let name = if k < ROI_NAMES.len() / 2 {
                format!("{h}-{base}")
            } else {
                format!("{h}-{base}-{k}")
            };
            let size = (v / 4).max(2).min(v);
            let start = rng.random_range(0..=v - size);
            rois.insert(
                name,
                Roi {
                    hemisphere: h,
                    indices: (start..start + size).collect(),
                },
            );
        }
    }
    rois
}

/// Generates a dataset and its ground truth in memory.
pub fn generate(spec: &GenSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dims();
    let px = d.pixels();
    let k = spec.latent_dim;
    let n = spec.samples_per_subject;
    let n_all = n + spec.test_samples;
    let n_shared = ((spec.shared_fraction * n as f64).round() as usize).min(n);

    let shared: Vec<Vec<f32>> = (0..n_shared).map(|_| smooth_image(&mut rng, d)).collect();
    let mut images: Vec<Vec<Vec<f32>>> = Vec::with_capacity(spec.n_subjects);
    for _ in 0..spec.n_subjects {
        let mut imgs = shared.clone();
        imgs.extend((n_shared..n_all).map(|_| smooth_image(&mut rng, d)));
        images.push(imgs);
    }

    // Raw projection, then standardized so every latent pre-activation has zero
    // mean and unit variance over the generated images.
    let raw: Vec<f32> = (0..k * px)
        .map(|_| (normal(&mut rng) / (px as f64).sqrt()) as f32)
        .collect();
    let mut mean = vec![0.0f64; k];
    let mut sq = vec![0.0f64; k];
    let total = (spec.n_subjects * n_all) as f64;
    for img in images.iter().flatten() {
        for l in 0..k {
            let z: f64 = raw[l * px..(l + 1) * px]
                .iter()
                .zip(img)
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum();
            mean[l] += z;
            sq[l] += z * z;
        }
    }
    let mut projection = vec![0.0f32; k * px];
    let mut offset = vec![0.0f32; k];
    for l in 0..k {
        let m = mean[l] / total;
        let sd = (sq[l] / total - m * m).max(1e-12).sqrt();
        for p in 0..px {
            projection[l * px + p] = (raw[l * px + p] as f64 / sd) as f32;
        }
        offset[l] = (-m / sd) as f32;
    }
    let mut truth = GroundTruth {
        image: d,
        projection: NdTensor::new(vec![k, px], projection)?,
        offset,
        subjects: Vec::with_capacity(spec.n_subjects),
    };

    let max_v = |hi: usize| {
        (0..spec.n_subjects)
            .map(|s| spec.vertices_of(s)[hi])
            .max()
            .unwrap_or(0)
    };
    let common: Vec<Vec<f64>> = (0..2)
        .map(|hi| (0..max_v(hi) * k).map(|_| normal(&mut rng)).collect())
        .collect();
    let (a, b) = (
        spec.readout_sharing.sqrt(),
        (1.0 - spec.readout_sharing).sqrt(),
    );
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut entries = Vec::with_capacity(spec.n_subjects);
    for (s, imgs) in images.iter().enumerate() {
        let counts = spec.vertices_of(s);
        let flat: Vec<f32> = imgs.iter().flatten().copied().collect();
        let all = NdTensor::new(vec![n_all, d.channels, d.height, d.width], flat)?;
        let latent = truth.latent(&all)?;
        let mut hemis = Vec::with_capacity(2);
        let mut responses = Vec::with_capacity(2);
        for (hi, &v) in counts.iter().enumerate() {
            let w: Vec<f64> = (0..v * k)
                .map(|i| a * common[hi][i] + b * normal(&mut rng))
                .collect();
            let bias: Vec<f32> = (0..v).map(|_| normal(&mut rng) as f32).collect();
            let noise: Vec<f32> = (0..v)
                .map(|_| {
                    let u: f64 = rng.random_range(-1.0..=1.0);
                    (spec.noise_std * (1.0 + spec.noise_heterogeneity * u)) as f32
                })
                .collect();
            // rescale rows to unit signal std over the non-test samples
            let mut wf = vec![0.0f32; v * k];
            for j in 0..v {
                let row = &w[j * k..(j + 1) * k];
                let sig: Vec<f64> = latent[..n]
                    .iter()
                    .map(|phi| row.iter().zip(phi).map(|(a, b)| a * b).sum())
                    .collect();
                let m = sig.iter().sum::<f64>() / n as f64;
                let sd = (sig.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
                for l in 0..k {
                    wf[j * k + l] = (row[l] * scale) as f32;
                }
            }
            let mut ht = HemisphereTruth {
                weights: NdTensor::new(vec![v, k], wf)?,
                bias,
                noise_std: noise,
                signal_std: vec![0.0; v],
            };
            let clean = GroundTruth::readout(&ht, &latent);
            for j in 0..v {
                let m = clean[..n].iter().map(|r| r[j]).sum::<f64>() / n as f64;
                let var = clean[..n].iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
                ht.signal_std[j] = var.sqrt() as f32;
            }
            let noisy: Vec<f32> = clean
                .iter()
                .flat_map(|row| {
                    row.iter()
                        .zip(&ht.noise_std)
                        .map(|(&c, &sd)| (c + sd as f64 * normal(&mut rng)) as f32)
                        .collect::<Vec<_>>()
                })
                .collect();
            responses.push(NdTensor::new(vec![n_all, v], noisy)?);
            hemis.push(ht);
        }
        let nc: Vec<Vec<f64>> = hemis
            .iter()
            .map(|ht| {
                ht.signal_std
                    .iter()
                    .zip(&ht.noise_std)
                    .map(|(&sg, &sn)| {
                        let (sg, sn) = ((sg as f64).powi(2), (sn as f64).powi(2));
                        if sg + sn > 0.0 {
                            sg / (sg + sn)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let rois = make_rois(&mut rng, spec, counts);
        let folds = make_folds(n, spec.n_folds, default_fold_seed(spec.seed, s))?;
        let main_idx: Vec<usize> = (0..n).collect();
        let test_idx: Vec<usize> = (n..n_all).collect();
        let test = if spec.test_samples > 0 {
            Some(TestArrays {
                images: all.select_rows(&test_idx)?,
                lh: responses[0].select_rows(&test_idx)?,
                rh: responses[1].select_rows(&test_idx)?,
            })
        } else {
            None
        };
        subjects.push(SubjectData {
            spec: SubjectSpec {
                subject_index: s,
                lh_vertices: counts[0],
                rh_vertices: counts[1],
                rois,
                noise_ceiling_lh: nc[0].iter().map(|&x| x as f32 as f64).collect(),
                noise_ceiling_rh: nc[1].iter().map(|&x| x as f32 as f64).collect(),
                n_samples: n,
            },
            images: all.select_rows(&main_idx)?,
            lh: responses[0].select_rows(&main_idx)?,
            rh: responses[1].select_rows(&main_idx)?,
            folds,
            test,
        });
        entries.push(SubjectEntry {
            id: s,
            dir: format!("subjects/subj{:02}", s + 1),
            lh_vertices: counts[0],
            rh_vertices: counts[1],
            n_samples: n,
            n_test: spec.test_samples,
        });
        let rh = hemis.pop().unwrap();
        let lh = hemis.pop().unwrap();
        truth.subjects.push(SubjectTruth { lh, rh });
    }

    let stacked: Vec<&NdTensor<f32>> = subjects.iter().map(|s| &s.images).collect();
    let mut flat = Vec::new();
    for t in &stacked {
        flat.extend_from_slice(t.data());
    }
    let all_imgs = NdTensor::new(
        vec![spec.n_subjects * n, d.channels, d.height, d.width],
        flat,
    )?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image: d,
        channel_stats: ChannelStats::estimate(&all_imgs)?,
        seed: spec.seed,
        n_folds: spec.n_folds,
        subjects: entries,
    };
    let ds = Dataset { manifest, subjects };
    ds.validate()?;
    Ok((ds, truth))
}

/// Generates a dataset and writes it, with its ground truth, under `out`.
pub fn generate_to_dir(spec: &GenSpec, out: impl AsRef<Path>) -> Result<(Dataset, GroundTruth)> {
    let out = out.as_ref();
    let (ds, truth) = generate(spec)?;
    ds.save(out)?;
    truth.save(out)?;
    write_json(&out.join("gen_spec.json"), spec)?;
    Ok((ds, truth))
}

/// Scores the noiseless ground-truth predictions on `split`: the attainable
/// ceiling for a trained model.
pub fn oracle_score(
    dataset: &Dataset,
    truth: &GroundTruth,
    split: Split,
    fold: usize,
) -> Result<ScoreReport> {
    truth.check_matches(dataset)?;
    let mut subjects = Vec::with_capacity(dataset.n_subjects());
    for (s, subj) in dataset.subjects.iter().enumerate() {
        let data = subj.split(split, fold)?;
        let (lh, rh) = truth.predict(s, &data.images)?;
        subjects.push(SubjectPrediction {
            subject: s,
            indices: data.indices,
            lh,
            rh,
        });
    }
    let set = PredictionSet {
        meta: PredictionMeta {
            model_id: "ground-truth".into(),
            split,
            fold,
            seed: dataset.manifest.seed,
            members: vec![],
        },
        subjects,
    };
    score_report(&set, dataset, split)
}
