use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::folds::{make_folds, FoldAssignment, DEFAULT_FOLDS};
use super::nenc::{read_array, read_shape, write_array};
use crate::error::{Error, Result};
use crate::ndiff::NdTensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const ROIS_FILE: &str = "rois.json";
pub const FOLDS_FILE: &str = "folds.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Lh,
    Rh,
}

impl Hemisphere {
    pub const BOTH: [Hemisphere; 2] = [Hemisphere::Lh, Hemisphere::Rh];

    pub fn as_str(self) -> &'static str {
        match self {
            Hemisphere::Lh => "lh",
            Hemisphere::Rh => "rh",
        }
    }
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?}"))),
        }
    }
}

/// A named vertex subset of one hemisphere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub hemisphere: Hemisphere,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel statistics over a `[N, C, H, W]` stack.
    pub fn estimate(images: &NdTensor<f32>) -> Result<Self> {
        let [n, c, h, w] = images.shape()[..] else {
            return Err(Error::shape(format!(
                "expected [N,C,H,W], got {:?}",
                images.shape()
            )));
        };
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let d = images.data();
        for ci in 0..c {
            let vals =
                (0..n).flat_map(|i| d[(i * c + ci) * plane..(i * c + ci + 1) * plane].iter());
            let m = vals.clone().map(|&x| x as f64).sum::<f64>() / count;
            let v = vals.map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / count;
            mean[ci] = m;
            var[ci] = v;
        }
        Ok(Self {
            mean,
            std: var.into_iter().map(f64::sqrt).collect(),
        })
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::validation(format!(
                "channel statistics must have {channels} entries, got mean {} / std {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::validation(format!(
                "channel std must be finite and > 0, got {:?}",
                self.std
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::validation("channel mean must be finite"));
        }
        Ok(())
    }

    /// `(x − mean_c) / std_c` per channel of a `[B, C, H, W]` stack.
    pub fn normalize(&self, images: &NdTensor<f32>) -> Result<NdTensor<f32>> {
        let [_, c, h, w] = images.shape()[..] else {
            return Err(Error::shape(format!(
                "expected [B,C,H,W], got {:?}",
                images.shape()
            )));
        };
        if c != self.mean.len() {
            return Err(Error::shape(format!(
                "image has {c} channels, statistics have {}",
                self.mean.len()
            )));
        }
        let plane = h * w;
        let mut out = images.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ci = k % c;
            let (m, s) = (self.mean[ci], self.std[ci]);
            for x in chunk.iter_mut() {
                *x = ((*x as f64 - m) / s) as f32;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: usize,
    /// Directory relative to the dataset root.
    pub dir: String,
    pub lh_vertices: usize,
    pub rh_vertices: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub n_test: usize,
}

impl SubjectEntry {
    pub fn vertices(&self, h: Hemisphere) -> usize {
        match h {
            Hemisphere::Lh => self.lh_vertices,
            Hemisphere::Rh => self.rh_vertices,
        }
    }
}

/// `manifest.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub image: ImageDims,
    pub channel_stats: ChannelStats,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    pub subjects: Vec<SubjectEntry>,
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

impl DatasetManifest {
    /// Checks everything that can be checked without touching array files.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::validation(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let d = &self.image;
        if d.channels == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::validation(format!(
                "image dims must be >= 1, got {d:?}"
            )));
        }
        self.channel_stats.validate(d.channels)?;
        if self.n_folds < 2 {
            return Err(Error::validation(format!("n_folds {} < 2", self.n_folds)));
        }
        if self.subjects.is_empty() {
            return Err(Error::validation("manifest lists no subjects"));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.id != i {
                return Err(Error::validation(format!(
                    "subject ids must be 0..S-1 in order; entry {i} has id {}",
                    s.id
                )));
            }
            if s.lh_vertices == 0 || s.rh_vertices == 0 {
                return Err(Error::validation(format!(
                    "subject {i}: vertex counts must be >= 1"
                )));
            }
            if s.n_samples < self.n_folds {
                return Err(Error::validation(format!(
                    "subject {i}: {} samples cannot fill {} folds",
                    s.n_samples, self.n_folds
                )));
            }
        }
        Ok(())
    }

    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        read_json(&root.as_ref().join(MANIFEST_FILE))
    }

    pub fn max_vertices(&self, h: Hemisphere) -> usize {
        self.subjects
            .iter()
            .map(|s| s.vertices(h))
            .max()
            .unwrap_or(0)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Per-subject metadata: vertex counts, ROIs and noise ceilings.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSpec {
    pub subject_index: usize,
    pub lh_vertices: usize,
    pub rh_vertices: usize,
    pub rois: BTreeMap<String, Roi>,
    pub noise_ceiling_lh: Vec<f64>,
    pub noise_ceiling_rh: Vec<f64>,
    pub n_samples: usize,
}

impl SubjectSpec {
    pub fn vertices(&self, h: Hemisphere) -> usize {
        match h {
            Hemisphere::Lh => self.lh_vertices,
            Hemisphere::Rh => self.rh_vertices,
        }
    }

    pub fn noise_ceiling(&self, h: Hemisphere) -> &[f64] {
        match h {
            Hemisphere::Lh => &self.noise_ceiling_lh,
            Hemisphere::Rh => &self.noise_ceiling_rh,
        }
    }

    pub fn rois_of(&self, h: Hemisphere) -> impl Iterator<Item = (&String, &Roi)> {
        self.rois.iter().filter(move |(_, r)| r.hemisphere == h)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.subject_index;
        for h in Hemisphere::BOTH {
            let nc = self.noise_ceiling(h);
            if nc.len() != self.vertices(h) {
                return Err(Error::validation(format!(
                    "subject {s}: nc_{h} has {} entries for {} vertices",
                    nc.len(),
                    self.vertices(h)
                )));
            }
            if let Some(bad) = nc.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::validation(format!(
                    "subject {s}: nc_{h} contains invalid value {bad}"
                )));
            }
        }
        for (name, roi) in &self.rois {
            let n = self.vertices(roi.hemisphere);
            if roi.indices.is_empty() {
                return Err(Error::validation(format!(
                    "subject {s}: roi {name} is empty"
                )));
            }
            if roi.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation(format!(
                    "subject {s}: roi {name} indices must be sorted and unique"
                )));
            }
            if let Some(&bad) = roi.indices.iter().find(|&&i| i >= n) {
                return Err(Error::validation(format!(
                    "subject {s}: roi {name} index {bad} >= {} vertices of {}",
                    n, roi.hemisphere
                )));
            }
        }
        Ok(())
    }
}

/// Images and responses of one split of one subject.
#[derive(Clone, Debug)]
pub struct SplitData {
    /// Indices into the subject's main arrays (train/val) or test arrays.
    pub indices: Vec<usize>,
    pub images: NdTensor<f32>,
    pub lh: NdTensor<f32>,
    pub rh: NdTensor<f32>,
}

impl SplitData {
    pub fn responses(&self, h: Hemisphere) -> &NdTensor<f32> {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TestArrays {
    pub images: NdTensor<f32>,
    pub lh: NdTensor<f32>,
    pub rh: NdTensor<f32>,
}

/// All arrays of one subject.
#[derive(Clone, Debug)]
pub struct SubjectData {
    pub spec: SubjectSpec,
    pub images: NdTensor<f32>,
    pub lh: NdTensor<f32>,
    pub rh: NdTensor<f32>,
    pub folds: FoldAssignment,
    pub test: Option<TestArrays>,
}

impl SubjectData {
    pub fn responses(&self, h: Hemisphere) -> &NdTensor<f32> {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }

    pub fn split_indices(&self, split: Split, fold: usize) -> Result<Vec<usize>> {
        match split {
            Split::Train => {
                self.folds.check_fold(fold)?;
                Ok(self.folds.train_indices(fold))
            }
            Split::Val => {
                self.folds.check_fold(fold)?;
                Ok(self.folds.val_indices(fold))
            }
            Split::Test => match &self.test {
                Some(t) => Ok((0..t.images.rows()).collect()),
                None => Err(Error::validation(format!(
                    "subject {} has no test split",
                    self.spec.subject_index
                ))),
            },
        }
    }

    pub fn split(&self, split: Split, fold: usize) -> Result<SplitData> {
        let indices = self.split_indices(split, fold)?;
        self.select(split, indices)
    }

    /// Selected samples of the arrays backing `split`.
    pub fn select(&self, split: Split, indices: Vec<usize>) -> Result<SplitData> {
        let (images, lh, rh) = match split {
            Split::Train | Split::Val => (&self.images, &self.lh, &self.rh),
            Split::Test => {
                let t = self.test.as_ref().ok_or_else(|| {
                    Error::validation(format!(
                        "subject {} has no test split",
                        self.spec.subject_index
                    ))
                })?;
                (&t.images, &t.lh, &t.rh)
            }
        };
        Ok(SplitData {
            images: images.select_rows(&indices)?,
            lh: lh.select_rows(&indices)?,
            rh: rh.select_rows(&indices)?,
            indices,
        })
    }
}

/// A validated, immutable in-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub subjects: Vec<SubjectData>,
}

fn subject_dir(root: &Path, entry: &SubjectEntry) -> PathBuf {
    root.join(&entry.dir)
}

fn expect_shape(subject: usize, field: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::validation(format!(
            "subject {subject}: {field} has shape {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject(&self, id: usize) -> Result<&SubjectData> {
        self.subjects
            .get(id)
            .ok_or_else(|| Error::arg(format!("subject {id} not in dataset")))
    }

    pub fn image_dims(&self) -> ImageDims {
        self.manifest.image
    }

    pub fn channel_stats(&self) -> &ChannelStats {
        &self.manifest.channel_stats
    }

    /// Checks every invariant of the in-memory arrays against the manifest.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate_shapes()?;
        if self.subjects.len() != self.manifest.subjects.len() {
            return Err(Error::validation("subject count differs from manifest"));
        }
        let d = self.manifest.image;
        for (entry, subj) in self.manifest.subjects.iter().zip(&self.subjects) {
            let s = entry.id;
            let sp = &subj.spec;
            if sp.subject_index != s
                || sp.lh_vertices != entry.lh_vertices
                || sp.rh_vertices != entry.rh_vertices
                || sp.n_samples != entry.n_samples
            {
                return Err(Error::validation(format!(
                    "subject {s}: spec disagrees with manifest entry"
                )));
            }
            sp.validate()?;
            let n = entry.n_samples;
            expect_shape(
                s,
                "images",
                subj.images.shape(),
                &[n, d.channels, d.height, d.width],
            )?;
            expect_shape(s, "lh", subj.lh.shape(), &[n, entry.lh_vertices])?;
            expect_shape(s, "rh", subj.rh.shape(), &[n, entry.rh_vertices])?;
            check_pixels(s, "images", &subj.images)?;
            check_finite(s, "lh", &subj.lh)?;
            check_finite(s, "rh", &subj.rh)?;
            subj.folds
                .validate(n)
                .map_err(|e| Error::validation(format!("subject {s}: folds: {e}")))?;
            match (&subj.test, entry.n_test) {
                (None, 0) => {}
                (Some(t), nt) if nt > 0 => {
                    expect_shape(
                        s,
                        "test_images",
                        t.images.shape(),
                        &[nt, d.channels, d.height, d.width],
                    )?;
                    expect_shape(s, "test_lh", t.lh.shape(), &[nt, entry.lh_vertices])?;
                    expect_shape(s, "test_rh", t.rh.shape(), &[nt, entry.rh_vertices])?;
                    check_pixels(s, "test_images", &t.images)?;
                    check_finite(s, "test_lh", &t.lh)?;
                    check_finite(s, "test_rh", &t.rh)?;
                }
                _ => {
                    return Err(Error::validation(format!(
                        "subject {s}: test arrays disagree with n_test {}",
                        entry.n_test
                    )))
                }
            }
        }
        Ok(())
    }

    /// Writes the directory layout: `manifest.json` plus, per subject,
    /// `images`, `lh`, `rh`, `nc_lh`, `nc_rh` containers, `rois.json`,
    /// `folds.json` and optional `test_*` containers.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        self.validate()?;
        create_dir(root)?;
        write_json(&root.join(MANIFEST_FILE), &self.manifest)?;
        for (entry, subj) in self.manifest.subjects.iter().zip(&self.subjects) {
            let dir = subject_dir(root, entry);
            create_dir(&dir)?;
            write_array(dir.join("images.nenc"), &subj.images)?;
            write_array(dir.join("lh.nenc"), &subj.lh)?;
            write_array(dir.join("rh.nenc"), &subj.rh)?;
            for h in Hemisphere::BOTH {
                let nc: Vec<f32> = subj
                    .spec
                    .noise_ceiling(h)
                    .iter()
                    .map(|&x| x as f32)
                    .collect();
                write_array(
                    dir.join(format!("nc_{h}.nenc")),
                    &NdTensor::new(vec![nc.len()], nc)?,
                )?;
            }
            write_json(&dir.join(ROIS_FILE), &subj.spec.rois)?;
            write_json(&dir.join(FOLDS_FILE), &subj.folds)?;
            if let Some(t) = &subj.test {
                write_array(dir.join("test_images.nenc"), &t.images)?;
                write_array(dir.join("test_lh.nenc"), &t.lh)?;
                write_array(dir.join("test_rh.nenc"), &t.rh)?;
            }
        }
        Ok(())
    }
}

fn check_pixels(s: usize, field: &str, t: &NdTensor<f32>) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::validation(format!(
            "subject {s}: {field} has value {bad} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_finite(s: usize, field: &str, t: &NdTensor<f32>) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::validation(format!(
            "subject {s}: {field} has non-finite values"
        )));
    }
    Ok(())
}

/// Seed used for a subject's folds when no `folds.json` is present.
pub fn default_fold_seed(manifest_seed: u64, subject: usize) -> u64 {
    manifest_seed.wrapping_add(0x5eed_0000 + subject as u64)
}

/// Loads and eagerly validates a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = DatasetManifest::read(root)?;
    manifest.validate_shapes()?;
    let d = manifest.image;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let dir = subject_dir(root, entry);
        let s = entry.id;
        let n = entry.n_samples;
        // header checks first so a mismatch is reported before the payload read
        let checks: [(&str, Vec<usize>); 5] = [
            ("images", vec![n, d.channels, d.height, d.width]),
            ("lh", vec![n, entry.lh_vertices]),
            ("rh", vec![n, entry.rh_vertices]),
            ("nc_lh", vec![entry.lh_vertices]),
            ("nc_rh", vec![entry.rh_vertices]),
        ];
        for (field, want) in &checks {
            let got = read_shape(dir.join(format!("{field}.nenc")))?;
            expect_shape(s, field, &got, want)?;
        }
        let images = read_array(dir.join("images.nenc"))?;
        let lh = read_array(dir.join("lh.nenc"))?;
        let rh = read_array(dir.join("rh.nenc"))?;
        let nc = |h: &str| -> Result<Vec<f64>> {
            Ok(read_array(dir.join(format!("nc_{h}.nenc")))?
                .data()
                .iter()
                .map(|&x| x as f64)
                .collect())
        };
        let rois: BTreeMap<String, Roi> = read_json(&dir.join(ROIS_FILE))?;
        let folds_path = dir.join(FOLDS_FILE);
        let folds = if folds_path.exists() {
            read_json(&folds_path)?
        } else {
            make_folds(n, manifest.n_folds, default_fold_seed(manifest.seed, s))?
        };
        let test = if entry.n_test > 0 {
            Some(TestArrays {
                images: read_array(dir.join("test_images.nenc"))?,
                lh: read_array(dir.join("test_lh.nenc"))?,
                rh: read_array(dir.join("test_rh.nenc"))?,
            })
        } else {
            None
        };
        subjects.push(SubjectData {
            spec: SubjectSpec {
                subject_index: s,
                lh_vertices: entry.lh_vertices,
                rh_vertices: entry.rh_vertices,
                rois,
                noise_ceiling_lh: nc("lh")?,
                noise_ceiling_rh: nc("rh")?,
                n_samples: n,
            },
            images,
            lh,
            rh,
            folds,
            test,
        });
    }
    let ds = Dataset { manifest, subjects };
    ds.validate()?;
    Ok(ds)
}
