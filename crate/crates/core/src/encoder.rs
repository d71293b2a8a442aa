//! Subject-conditioned encoder: image feature extractor, subject embedding,
//! per-hemisphere heads and optional ROI heads.
//!
//! Parameters live in a name-keyed map so checkpoints, optimizers and weight
//! transfer can treat them uniformly. A forward pass binds every parameter as a
//! tape leaf first ([`Encoder::bind`]).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Hemisphere, ImageDims, Roi};
use crate::error::{Error, Result};
use crate::ndiff::{BatchNormState, Mode, NdTensor, Scalar, Tape, Var};

pub const DEFAULT_D_I: usize = 256;
pub const DEFAULT_D_S: usize = 512;
pub const EMBEDDING_INIT_STD: f64 = 0.02;
/// Conv layers halve the spatial size until it is at most this.
pub const CONV_MIN_SPATIAL: usize = 4;
pub const EXTRACTOR_PREFIX: &str = "extractor.";
pub const EMBEDDING: &str = "embedding";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Conv,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Feature extractor architecture.
///
/// `widths` are the hidden widths of the MLP, or the channel counts of the
/// successive conv layers (the last entry repeats if there are more layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub d_i: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::Mlp,
            widths: vec![256],
            activation: Activation::Relu,
            d_i: DEFAULT_D_I,
        }
    }
}

/// User-facing model settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    /// Subject embedding width; 0 disables the embedding.
    pub d_s: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            d_s: DEFAULT_D_S,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extractor;
        if e.d_i == 0 {
            return Err(Error::Config("model.extractor.d_i must be >= 1".into()));
        }
        if e.widths.contains(&0) {
            return Err(Error::Config(
                "model.extractor.widths must all be >= 1".into(),
            ));
        }
        if e.kind == ExtractorKind::Conv && e.widths.is_empty() {
            return Err(Error::Config(
                "conv extractor needs at least one width".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectShape {
    pub id: usize,
    pub lh_vertices: usize,
    pub rh_vertices: usize,
}

impl SubjectShape {
    pub fn vertices(&self, h: Hemisphere) -> usize {
        match h {
            Hemisphere::Lh => self.lh_vertices,
            Hemisphere::Rh => self.rh_vertices,
        }
    }
}

/// Fully resolved architecture: model settings plus everything derived from
/// the data it is trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLayout {
    pub image: ImageDims,
    pub model: ModelConfig,
    /// Rows of the embedding table.
    pub n_embeddings: usize,
    /// Subjects this model predicts for.
    pub subjects: Vec<SubjectShape>,
    pub lh_width: usize,
    pub rh_width: usize,
    /// ROI heads, keyed by ROI name.
    #[serde(default)]
    pub rois: BTreeMap<String, Roi>,
}

impl EncoderLayout {
    /// Shared heads sized to the widest of `subjects`.
    pub fn for_subjects(
        dataset: &Dataset,
        model: &ModelConfig,
        subjects: &[usize],
    ) -> Result<Self> {
        let mut shapes = Vec::with_capacity(subjects.len());
        for &s in subjects {
            let d = dataset.subject(s)?;
            shapes.push(SubjectShape {
                id: s,
                lh_vertices: d.spec.lh_vertices,
                rh_vertices: d.spec.rh_vertices,
            });
        }
        let layout = Self {
            image: dataset.image_dims(),
            model: model.clone(),
            n_embeddings: dataset.n_subjects(),
            lh_width: shapes.iter().map(|s| s.lh_vertices).max().unwrap_or(0),
            rh_width: shapes.iter().map(|s| s.rh_vertices).max().unwrap_or(0),
            subjects: shapes,
            rois: BTreeMap::new(),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn width(&self, h: Hemisphere) -> usize {
        match h {
            Hemisphere::Lh => self.lh_width,
            Hemisphere::Rh => self.rh_width,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.model.extractor.d_i + self.model.d_s
    }

    pub fn subject(&self, id: usize) -> Option<&SubjectShape> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.image.pixels() == 0 {
            return Err(Error::validation("image dims must be >= 1"));
        }
        if self.subjects.is_empty() {
            return Err(Error::validation("encoder layout covers no subjects"));
        }
        for s in &self.subjects {
            if s.id >= self.n_embeddings {
                return Err(Error::validation(format!(
                    "subject {} outside embedding table of {} rows",
                    s.id, self.n_embeddings
                )));
            }
            for h in Hemisphere::BOTH {
                if s.vertices(h) == 0 || s.vertices(h) > self.width(h) {
                    return Err(Error::validation(format!(
                        "subject {} {h}: {} vertices for head width {}",
                        s.id,
                        s.vertices(h),
                        self.width(h)
                    )));
                }
            }
        }
        for (name, roi) in &self.rois {
            if roi.indices.is_empty() {
                return Err(Error::validation(format!("ROI {name} is empty")));
            }
            let mut seen = vec![false; self.width(roi.hemisphere)];
            for s in &self.subjects {
                let v = s.vertices(roi.hemisphere);
                if let Some(&bad) = roi.indices.iter().find(|&&i| i >= v) {
                    return Err(Error::validation(format!(
                        "ROI {name}: vertex {bad} out of range for subject {} ({v} vertices)",
                        s.id
                    )));
                }
            }
            for &i in &roi.indices {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::validation(format!(
                        "ROI {name}: repeated vertex {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(C_in, C_out)` of each conv layer.
    pub fn conv_plan(&self) -> Vec<(usize, usize)> {
        let widths = &self.model.extractor.widths;
        let (mut h, mut w, mut c) = (self.image.height, self.image.width, self.image.channels);
        let mut plan = Vec::new();
        while h.max(w) > CONV_MIN_SPATIAL {
            let out = widths[plan.len().min(widths.len() - 1)];
            plan.push((c, out));
            h = conv_out(h);
            w = conv_out(w);
            c = out;
        }
        plan
    }
}

/// Output size of a 3×3, stride-2, pad-1 convolution.
fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

enum Init {
    Uniform(usize),
    Zeros,
    Ones,
    Normal(f64),
}

fn head(h: Hemisphere) -> String {
    format!("head_{h}")
}

fn roi_param(name: &str, what: &str) -> String {
    format!("roi.{name}.{what}")
}

type ParamSpec = (String, Vec<usize>, Init);

fn param_plan(layout: &EncoderLayout) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let mut p = Vec::new();
    let mut bn = Vec::new();
    let e = &layout.model.extractor;
    let linear = |p: &mut Vec<ParamSpec>, name: &str, i: usize, o: usize| {
        p.push((format!("{name}.w"), vec![i, o], Init::Uniform(i)));
        p.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let last = match e.kind {
        ExtractorKind::Mlp => {
            let mut i = layout.image.pixels();
            for (k, &w) in e.widths.iter().enumerate() {
                linear(&mut p, &format!("extractor.fc{k}"), i, w);
                i = w;
            }
            i
        }
        ExtractorKind::Conv => {
            let mut c = layout.image.channels;
            for (k, (ci, co)) in layout.conv_plan().into_iter().enumerate() {
                p.push((
                    format!("extractor.conv{k}.w"),
                    vec![9 * ci, co],
                    Init::Uniform(9 * ci),
                ));
                p.push((format!("extractor.conv{k}.bn.gamma"), vec![co], Init::Ones));
                p.push((format!("extractor.conv{k}.bn.beta"), vec![co], Init::Zeros));
                bn.push((format!("extractor.conv{k}.bn"), co));
                c = co;
            }
            c
        }
    };
    linear(&mut p, "extractor.out", last, e.d_i);
    if layout.model.d_s > 0 {
        p.push((
            EMBEDDING.to_string(),
            vec![layout.n_embeddings, layout.model.d_s],
            Init::Normal(EMBEDDING_INIT_STD),
        ));
    }
    let f = layout.feature_width();
    for h in Hemisphere::BOTH {
        let name = head(h);
        p.push((format!("{name}.bn.gamma"), vec![f], Init::Ones));
        p.push((format!("{name}.bn.beta"), vec![f], Init::Zeros));
        bn.push((format!("{name}.bn"), f));
        linear(&mut p, &name, f, layout.width(h));
    }
    for (name, roi) in &layout.rois {
        linear(&mut p, &format!("roi.{name}"), f, roi.indices.len());
    }
    (p, bn)
}

/// Tape handles of every parameter for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Outputs of [`Encoder::forward`], all on the tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub lh: Var,
    pub rh: Var,
    pub rois: BTreeMap<String, Var>,
}

impl ForwardOutput {
    pub fn full(&self, h: Hemisphere) -> Var {
        match h {
            Hemisphere::Lh => self.lh,
            Hemisphere::Rh => self.rh,
        }
    }
}

/// Which pretrained weights a fine-tuning run starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScope {
    Extractor,
    ExtractorEmbedding,
    /// Extractor, embedding and the hemisphere heads (sliced to the subject's
    /// width); ROI heads start as copies of the matching head columns.
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Scalar = f32> {
    pub layout: EncoderLayout,
    pub params: BTreeMap<String, NdTensor<T>>,
    pub buffers: BTreeMap<String, BatchNormState<T>>,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = tape.matmul(x, b.get(&format!("{name}.w"))?)?;
    tape.add_row_vector(y, b.get(&format!("{name}.b"))?)
}

fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

impl<T: Scalar> Encoder<T> {
    /// Fresh parameters: linear weights `U(±1/√fan_in)`, biases 0, batch-norm
    /// scale 1 and shift 0, embedding rows `N(0, 0.02²)`.
    pub fn init(layout: EncoderLayout, rng: &mut impl Rng) -> Result<Self> {
        layout.validate()?;
        let (plan, bn) = param_plan(&layout);
        let mut params = BTreeMap::new();
        for (name, shape, init) in plan {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    let d = Uniform::new_inclusive(-a, a).expect("finite bound");
                    (0..n).map(|_| T::from_f64_lossy(d.sample(rng))).collect()
                }
                Init::Normal(sd) => {
                    let d = Normal::new(0.0, sd).expect("finite std");
                    (0..n).map(|_| T::from_f64_lossy(d.sample(rng))).collect()
                }
            };
            params.insert(name, NdTensor::new(shape, data)?);
        }
        let buffers = bn
            .into_iter()
            .map(|(name, w)| (name, BatchNormState::new(w)))
            .collect();
        Ok(Self {
            layout,
            params,
            buffers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Result<&NdTensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut NdTensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter {name}")))
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, s)| {
                    let c = |v: &[T]| {
                        v.iter()
                            .map(|&x| U::from_f64_lossy(x.to_f64().unwrap()))
                            .collect()
                    };
                    (
                        k.clone(),
                        BatchNormState {
                            running_mean: c(&s.running_mean),
                            running_var: c(&s.running_var),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    fn batch_norm(
        &mut self,
        tape: &mut Tape<T>,
        b: &Bound,
        x: Var,
        name: &str,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = b.get(&format!("{name}.gamma"))?;
        let beta = b.get(&format!("{name}.beta"))?;
        let state = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no batch-norm state {name}")))?;
        tape.batch_norm(x, gamma, beta, state, mode)
    }

    /// Image features `[B, d_i]` from normalized images `[B, C, H, W]`.
    pub fn extract_features(
        &mut self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let d = self.layout.image;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [d.channels, d.height, d.width] {
            return Err(Error::shape(format!(
                "images {shape:?}, model expects [B, {}, {}, {}]",
                d.channels, d.height, d.width
            )));
        }
        let batch = shape[0];
        let act = self.layout.model.extractor.activation;
        let last = match self.layout.model.extractor.kind {
            ExtractorKind::Mlp => {
                let mut x = tape.reshape(images, vec![batch, d.pixels()])?;
                for k in 0..self.layout.model.extractor.widths.len() {
                    x = linear(tape, b, x, &format!("extractor.fc{k}"))?;
                    x = activate(tape, x, act);
                }
                x
            }
            ExtractorKind::Conv => {
                let mut x = tape.nchw_to_nhwc(images)?;
                let (mut h, mut w, mut c) = (d.height, d.width, d.channels);
                for (k, (_, co)) in self.layout.conv_plan().into_iter().enumerate() {
                    let cols = tape.im2col(x, 3, 2, 1)?;
                    let y = tape.matmul(cols, b.get(&format!("extractor.conv{k}.w"))?)?;
                    let y = self.batch_norm(tape, b, y, &format!("extractor.conv{k}.bn"), mode)?;
                    let y = activate(tape, y, act);
                    h = conv_out(h);
                    w = conv_out(w);
                    c = co;
                    x = tape.reshape(y, vec![batch, h, w, c])?;
                }
                let flat = tape.reshape(x, vec![batch * h * w, c])?;
                tape.pool_rows(flat, batch)?
            }
        };
        linear(tape, b, last, "extractor.out")
    }

    /// Embedding rows `[B, d_s]`, or `None` when `d_s = 0`.
    pub fn embed_subject(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        subjects: &[usize],
    ) -> Result<Option<Var>> {
        if let Some(&bad) = subjects.iter().find(|&&s| s >= self.layout.n_embeddings) {
            return Err(Error::arg(format!(
                "subject index {bad} outside embedding table of {} rows",
                self.layout.n_embeddings
            )));
        }
        if self.layout.model.d_s == 0 {
            return Ok(None);
        }
        Ok(Some(tape.gather_rows(b.get(EMBEDDING)?, subjects)?))
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: Var,
        subjects: &[usize],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.forward_with(tape, b, images, subjects, mode, mode)
    }

    /// [`Encoder::forward`] with a separate batch-norm mode for the extractor,
    /// used to keep a frozen extractor's running statistics fixed.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: Var,
        subjects: &[usize],
        extractor_mode: Mode,
        head_mode: Mode,
    ) -> Result<ForwardOutput> {
        let batch = tape.shape(images).first().copied().unwrap_or(0);
        if subjects.len() != batch {
            return Err(Error::shape(format!(
                "{} subject indices for a batch of {batch}",
                subjects.len()
            )));
        }
        let fi = self.extract_features(tape, b, images, extractor_mode)?;
        let fs = self.embed_subject(tape, b, subjects)?;
        let f = tape.concat_last_opt(fi, fs)?;
        let mut full = Vec::with_capacity(2);
        let mut rois = BTreeMap::new();
        for h in Hemisphere::BOTH {
            let name = head(h);
            let n = self.batch_norm(tape, b, f, &format!("{name}.bn"), head_mode)?;
            full.push(linear(tape, b, n, &name)?);
            let names: Vec<String> = self
                .layout
                .rois
                .iter()
                .filter(|(_, r)| r.hemisphere == h)
                .map(|(k, _)| k.clone())
                .collect();
            for roi in names {
                let y = linear(tape, b, n, &format!("roi.{roi}"))?;
                rois.insert(roi, y);
            }
        }
        Ok(ForwardOutput {
            lh: full[0],
            rh: full[1],
            rois,
        })
    }

    /// Full-head output of `h` averaged with its ROI heads.
    pub fn aggregate(&self, tape: &mut Tape<T>, out: &ForwardOutput, h: Hemisphere) -> Result<Var> {
        let parts: Vec<(Var, &[usize])> = self
            .layout
            .rois
            .iter()
            .filter(|(_, r)| r.hemisphere == h)
            .map(|(k, r)| (out.rois[k], r.indices.as_slice()))
            .collect();
        aggregate_prediction(tape, out.full(h), &parts)
    }

    /// Aggregated inference-mode predictions for normalized images, at the
    /// full head widths.
    pub fn predict(
        &mut self,
        images: &NdTensor<T>,
        subjects: &[usize],
    ) -> Result<(NdTensor<T>, NdTensor<T>)> {
        let mut tape = Tape::new();
        let b = self.bind_constants(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &b, x, subjects, Mode::Infer)?;
        let lh = self.aggregate(&mut tape, &out, Hemisphere::Lh)?;
        let rh = self.aggregate(&mut tape, &out, Hemisphere::Rh)?;
        Ok((tape.value(lh).clone(), tape.value(rh).clone()))
    }

    fn bind_constants(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// A model for `target` initialized from this one according to `scope`;
    /// everything not transferred is freshly drawn from `rng`.
    pub fn transfer(
        &self,
        target: EncoderLayout,
        scope: TransferScope,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut out = Self::init(target, rng)?;
        let incompatible = |name: &str, a: &[usize], b: &[usize]| {
            Error::validation(format!(
                "cannot transfer {name}: source shape {a:?}, target {b:?}"
            ))
        };
        if self.layout.image != out.layout.image
            || self.layout.model.extractor != out.layout.model.extractor
        {
            return Err(Error::validation(
                "source checkpoint has a different extractor or image size",
            ));
        }
        let names: Vec<String> = out.params.keys().cloned().collect();
        let mut copy = |name: &String| -> Result<()> {
            let src = self.param(name)?;
            let dst = out.param_mut(name)?;
            if src.shape() != dst.shape() {
                return Err(incompatible(name, src.shape(), dst.shape()));
            }
            *dst = src.clone();
            Ok(())
        };
        for name in &names {
            let take = name.starts_with(EXTRACTOR_PREFIX)
                || (name == EMBEDDING && scope != TransferScope::Extractor)
                || (scope == TransferScope::Full
                    && name.starts_with("head_")
                    && name.contains(".bn."));
            if take {
                copy(name)?;
            }
        }
        for (name, state) in out.buffers.iter_mut() {
            let take = name.starts_with(EXTRACTOR_PREFIX)
                || (scope == TransferScope::Full && name.starts_with("head_"));
            if take {
                let src = self.buffers.get(name).ok_or_else(|| {
                    Error::validation(format!("source has no batch-norm state {name}"))
                })?;
                if src.width() != state.width() {
                    return Err(incompatible(name, &[src.width()], &[state.width()]));
                }
                *state = src.clone();
            }
        }
        if scope == TransferScope::Full {
            for h in Hemisphere::BOTH {
                let name = head(h);
                let width = out.layout.width(h);
                if self.layout.width(h) < width {
                    return Err(Error::validation(format!(
                        "source {h} head has {} outputs, target needs {width}",
                        self.layout.width(h)
                    )));
                }
                let w = self.param(&format!("{name}.w"))?;
                let bias = self.param(&format!("{name}.b"))?;
                let cols: Vec<usize> = (0..width).collect();
                *out.param_mut(&format!("{name}.w"))? = w.select_cols(&cols)?;
                *out.param_mut(&format!("{name}.b"))? =
                    NdTensor::new(vec![width], bias.data()[..width].to_vec())?;
                let rois: Vec<(String, Vec<usize>)> = out
                    .layout
                    .rois
                    .iter()
                    .filter(|(_, r)| r.hemisphere == h)
                    .map(|(k, r)| (k.clone(), r.indices.clone()))
                    .collect();
                for (roi, idx) in rois {
                    *out.param_mut(&roi_param(&roi, "w"))? = w.select_cols(&idx)?;
                    let bv: Vec<T> = idx.iter().map(|&i| bias.data()[i]).collect();
                    *out.param_mut(&roi_param(&roi, "b"))? = NdTensor::new(vec![idx.len()], bv)?;
                }
            }
        }
        Ok(out)
    }
}

/// Per-vertex mean of the full prediction `y_full[B, L]` and every ROI output
/// covering that vertex. Each ROI output `[B, |roi|]` is paired with its vertex
/// indices; vertices in no ROI pass through unchanged.
pub fn aggregate_prediction<T: Scalar>(
    tape: &mut Tape<T>,
    y_full: Var,
    rois: &[(Var, &[usize])],
) -> Result<Var> {
    let (batch, width) = tape.value(y_full).dims2()?;
    if rois.is_empty() {
        return Ok(y_full);
    }
    let mut count = vec![1usize; width];
    for (v, idx) in rois {
        let (rb, rw) = tape.value(*v).dims2()?;
        if rb != batch || rw != idx.len() {
            return Err(Error::shape(format!(
                "ROI output [{rb}, {rw}] for {} vertices in a batch of {batch}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(Error::validation(format!(
                "ROI vertex {bad} outside width {width}"
            )));
        }
        for &i in *idx {
            count[i] += 1;
        }
    }
    let mut sum = y_full;
    for (v, idx) in rois {
        let s = tape.scatter_cols(*v, idx, width)?;
        sum = tape.add(sum, s)?;
    }
    let c = tape.constant(NdTensor::new(
        vec![width],
        count.iter().map(|&c| T::from_f64_lossy(c as f64)).collect(),
    )?);
    let c = tape.broadcast_rows(c, batch)?;
    tape.div(sum, c)
}
