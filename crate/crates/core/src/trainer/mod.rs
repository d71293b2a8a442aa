//! Two-stage training: joint pretraining over all subjects, then per-subject
//! fine-tuning with ROI heads, plus batch prediction from checkpoints.

mod optim;

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::datamodel::{ChannelStats, Dataset, Hemisphere, Split};
use crate::encoder::{
    Encoder, EncoderLayout, ModelConfig, SubjectShape, TransferScope, EXTRACTOR_PREFIX,
};
use crate::error::{Error, Result};
use crate::evaluation::metric_m;
use crate::ndiff::{Mode, NdTensor, Tape, Var};
use crate::objectives::{composite_loss, hemisphere_loss, HemisphereTarget, LossSpec};
use crate::prediction::{PredictionMeta, PredictionSet, SubjectPrediction};

pub use optim::{cosine_lr, AdamW, AdamWConfig, EarlyStopping, StopDecision};

/// Rows per forward pass when predicting.
pub const PREDICT_BATCH: usize = 64;

const SHUFFLE_STREAM: u64 = 1;
const SUBSET_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Validation fold; the other folds are trained on.
    pub fold: usize,
    pub seed: u64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Fine-tuning only: what to take from the source checkpoint.
    pub transfer: TransferScope,
    /// Keep extractor weights and its batch-norm statistics fixed.
    pub freeze_extractor: bool,
    /// Fine-tuning only: add one loss term per ROI head, weighted 1/#ROIs.
    pub roi_loss: bool,
    /// Use at most this many training samples per subject.
    pub max_train_samples: Option<usize>,
    /// Threads used for prediction.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            batch_size: 8,
            max_epochs: 12,
            early_stop_patience: 3,
            fold: 0,
            seed: 0,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            transfer: TransferScope::default(),
            freeze_extractor: false,
            roi_loss: true,
            max_train_samples: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be >= 2, got {}",
                self.batch_size
            ));
        }
        if self.early_stop_patience < 1 {
            return bad("train.early_stop_patience must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("train.lr0 must be > 0, got {}", self.lr0));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!(
                "train.betas must lie in [0, 1), got {:?}",
                self.betas
            ));
        }
        if self.eps.is_nan()
            || self.eps <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad("train.eps must be > 0 and train.weight_decay >= 0".into());
        }
        if self.max_train_samples.is_some_and(|n| n < 2) {
            return bad("train.max_train_samples must be >= 2".into());
        }
        if self.workers == 0 {
            return bad("train.workers must be >= 1".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recipe {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossSpec,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean loss over the epoch's batches (`null` for epoch 0).
    pub train_loss: Option<f64>,
    pub val_m: f64,
    pub best_epoch: usize,
    pub best_val_m: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best weights seen, by validation m.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Mean loss of the initial weights over the first epoch's batches.
    pub initial_loss: f64,
    pub stopped_early: bool,
}

struct SubjectCache {
    id: usize,
    vertices: [usize; 2],
    images: NdTensor<f32>,
    lh: NdTensor<f32>,
    rh: NdTensor<f32>,
    nc: [Vec<f64>; 2],
    val: Vec<usize>,
    is_val: Vec<bool>,
}

impl SubjectCache {
    fn new(ds: &Dataset, id: usize, fold: usize, stats: &ChannelStats) -> Result<Self> {
        let s = ds.subject(id)?;
        let val = s.split_indices(Split::Val, fold)?;
        let mut is_val = vec![false; s.images.rows()];
        for &i in &val {
            is_val[i] = true;
        }
        Ok(Self {
            id,
            vertices: [s.spec.lh_vertices, s.spec.rh_vertices],
            images: stats.normalize(&s.images)?,
            lh: s.lh.clone(),
            rh: s.rh.clone(),
            nc: [
                s.spec.noise_ceiling_lh.clone(),
                s.spec.noise_ceiling_rh.clone(),
            ],
            val,
            is_val,
        })
    }

    fn responses(&self, h: Hemisphere) -> &NdTensor<f32> {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }
}

fn hi(h: Hemisphere) -> usize {
    match h {
        Hemisphere::Lh => 0,
        Hemisphere::Rh => 1,
    }
}

/// One assembled training batch.
struct Batch {
    images: NdTensor<f32>,
    subjects: Vec<usize>,
    gt: [NdTensor<f32>; 2],
    mask: [Option<Vec<bool>>; 2],
    nc: [Option<Vec<f64>>; 2],
}

fn assemble(
    caches: &[SubjectCache],
    slot: &BTreeMap<usize, usize>,
    items: &[(usize, usize)],
    widths: [usize; 2],
    use_nc: bool,
) -> Result<Batch> {
    let first = &caches[slot[&items[0].0]];
    let row = first.images.row_len();
    let mut shape = first.images.shape().to_vec();
    shape[0] = items.len();
    let mut images = Vec::with_capacity(items.len() * row);
    let mut gt = [
        vec![0.0f32; items.len() * widths[0]],
        vec![0.0f32; items.len() * widths[1]],
    ];
    let mut present: Vec<usize> = Vec::new();
    for (b, &(s, i)) in items.iter().enumerate() {
        let c = &caches[slot[&s]];
        if c.is_val[i] {
            return Err(Error::Contract(format!(
                "validation sample {i} of subject {s} reached a training batch"
            )));
        }
        images.extend_from_slice(c.images.row(i));
        for h in Hemisphere::BOTH {
            let v = c.vertices[hi(h)];
            let w = widths[hi(h)];
            gt[hi(h)][b * w..b * w + v].copy_from_slice(c.responses(h).row(i));
        }
        if !present.contains(&s) {
            present.push(s);
        }
    }
    let mut mask = [None, None];
    let mut nc = [None, None];
    for h in Hemisphere::BOTH {
        let w = widths[hi(h)];
        let valid = present
            .iter()
            .map(|s| caches[slot[s]].vertices[hi(h)])
            .min()
            .unwrap_or(w);
        if valid < w {
            mask[hi(h)] = Some((0..w).map(|j| j < valid).collect());
        }
        if use_nc {
            let mut v = vec![1.0f64; w];
            for (j, x) in v.iter_mut().enumerate().take(valid) {
                *x = present
                    .iter()
                    .map(|s| caches[slot[s]].nc[hi(h)][j])
                    .sum::<f64>()
                    / present.len() as f64;
            }
            nc[hi(h)] = Some(v);
        }
    }
    let [gl, gr] = gt;
    Ok(Batch {
        images: NdTensor::new(shape, images)?,
        subjects: items.iter().map(|&(s, _)| s).collect(),
        gt: [
            NdTensor::new(vec![items.len(), widths[0]], gl)?,
            NdTensor::new(vec![items.len(), widths[1]], gr)?,
        ],
        mask,
        nc,
    })
}

struct StepOutput {
    loss: f64,
    grads: BTreeMap<String, NdTensor<f32>>,
}

/// Forward pass and loss for one batch; gradients when `with_grads`.
fn batch_step(
    enc: &mut Encoder<f32>,
    batch: &Batch,
    recipe: &Recipe,
    roi_loss: bool,
    with_grads: bool,
) -> Result<StepOutput> {
    let mut tape: Tape<f32> = Tape::new();
    let bound = enc.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let ext_mode = if recipe.train.freeze_extractor {
        Mode::Infer
    } else {
        Mode::Train
    };
    let out = enc.forward_with(&mut tape, &bound, x, &batch.subjects, ext_mode, Mode::Train)?;
    let pred = [
        enc.aggregate(&mut tape, &out, Hemisphere::Lh)?,
        enc.aggregate(&mut tape, &out, Hemisphere::Rh)?,
    ];
    let gt: Vec<Var> = batch.gt.iter().map(|g| tape.constant(g.clone())).collect();
    let target = |h: usize| HemisphereTarget {
        gt: gt[h],
        nc: batch.nc[h].as_deref(),
        mask: batch.mask[h].as_deref(),
    };
    let mut total = composite_loss(
        &mut tape,
        pred[0],
        target(0),
        pred[1],
        target(1),
        &recipe.loss,
    )?;
    if roi_loss && !enc.layout.rois.is_empty() {
        let mut terms = Vec::new();
        for (name, roi) in &enc.layout.rois {
            let mut spec = recipe.loss.clone();
            if roi.indices.len() < 2 {
                spec.w_pc = 0.0;
            }
            if spec.w_sl1 == 0.0 && spec.w_pc == 0.0 && spec.w_mnnpc == 0.0 {
                continue;
            }
            let h = hi(roi.hemisphere);
            let g = tape.gather_cols(gt[h], &roi.indices)?;
            let nc: Option<Vec<f64>> = batch.nc[h]
                .as_ref()
                .map(|n| roi.indices.iter().map(|&i| n[i]).collect());
            let t = HemisphereTarget {
                gt: g,
                nc: nc.as_deref(),
                mask: None,
            };
            terms.push(hemisphere_loss(&mut tape, out.rois[name], t, &spec)?);
        }
        if !terms.is_empty() {
            let k = terms.len() as f32;
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let scaled = tape.scale(sum, 1.0 / k);
            total = tape.add(total, scaled)?;
        }
    }
    let loss = tape.value(total).data()[0] as f64;
    let mut grads = BTreeMap::new();
    if with_grads {
        tape.backward(total)?;
        for (name, &v) in bound.iter() {
            if recipe.train.freeze_extractor && name.starts_with(EXTRACTOR_PREFIX) {
                continue;
            }
            if let Some(g) = tape.grad(v) {
                grads.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(StepOutput { loss, grads })
}

/// Inference-mode predictions of `images` (already normalized) for one
/// subject, cut to that subject's vertex counts.
type ChunkResult = Result<(NdTensor<f32>, NdTensor<f32>)>;

fn predict_rows(
    enc: &Encoder<f32>,
    images: &NdTensor<f32>,
    shape: SubjectShape,
    batch: usize,
    workers: usize,
) -> ChunkResult {
    let n = images.rows();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect();
    let run = |enc: &mut Encoder<f32>, idx: &[usize]| -> ChunkResult {
        let x = images.select_rows(idx)?;
        let (l, r) = enc.predict(&x, &vec![shape.id; idx.len()])?;
        Ok((
            l.take_cols(shape.lh_vertices)?,
            r.take_cols(shape.rh_vertices)?,
        ))
    };
    let workers = workers.clamp(1, chunks.len().max(1));
    let mut results: Vec<Option<ChunkResult>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        let mut e = enc.clone();
        for (k, c) in chunks.iter().enumerate() {
            results[k] = Some(run(&mut e, c));
        }
    } else {
        let per: Vec<Vec<(usize, ChunkResult)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let run = &run;
                    scope.spawn(move || {
                        let mut e = enc.clone();
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|k| (k, run(&mut e, &chunks[k])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        });
        for (k, r) in per.into_iter().flatten() {
            results[k] = Some(r);
        }
    }
    let mut lh = Vec::with_capacity(n * shape.lh_vertices);
    let mut rh = Vec::with_capacity(n * shape.rh_vertices);
    for r in results {
        let (l, r) = r.expect("every chunk predicted")?;
        lh.extend_from_slice(l.data());
        rh.extend_from_slice(r.data());
    }
    Ok((
        NdTensor::new(vec![n, shape.lh_vertices], lh)?,
        NdTensor::new(vec![n, shape.rh_vertices], rh)?,
    ))
}

/// Mean over subjects of the vertex-weighted validation m.
fn validation_m(enc: &Encoder<f32>, caches: &[SubjectCache], workers: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in caches {
        let shape = SubjectShape {
            id: c.id,
            lh_vertices: c.vertices[0],
            rh_vertices: c.vertices[1],
        };
        let x = c.images.select_rows(&c.val)?;
        let (pl, pr) = predict_rows(enc, &x, shape, PREDICT_BATCH, workers)?;
        let ml = metric_m(&pl, &c.lh.select_rows(&c.val)?, &c.nc[0])?;
        let mr = metric_m(&pr, &c.rh.select_rows(&c.val)?, &c.nc[1])?;
        let (vl, vr) = (c.vertices[0] as f64, c.vertices[1] as f64);
        total += (ml * vl + mr * vr) / (vl + vr);
    }
    Ok(total / caches.len() as f64)
}

fn training_items(
    caches: &[SubjectCache],
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<(usize, usize)>> {
    let mut items = Vec::new();
    for c in caches {
        let mut idx = ds.subject(c.id)?.split_indices(Split::Train, cfg.fold)?;
        if let Some(n) = cfg.max_train_samples {
            if n < idx.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(SUBSET_STREAM);
                idx.shuffle(&mut rng);
                idx.truncate(n);
                idx.sort_unstable();
            }
        }
        items.extend(idx.into_iter().map(|i| (c.id, i)));
    }
    if items.len() < 2 {
        return Err(Error::arg("training split has fewer than 2 samples"));
    }
    Ok(items)
}

struct RunSpec<'a> {
    stage: Stage,
    model_id: String,
    recipe: &'a Recipe,
    stats: ChannelStats,
    use_nc: bool,
    roi_loss: bool,
}

fn run(
    ds: &Dataset,
    mut enc: Encoder<f32>,
    subjects: &[usize],
    spec: RunSpec<'_>,
) -> Result<TrainOutcome> {
    let cfg = &spec.recipe.train;
    let caches: Vec<SubjectCache> = subjects
        .iter()
        .map(|&s| SubjectCache::new(ds, s, cfg.fold, &spec.stats))
        .collect::<Result<_>>()?;
    let slot: BTreeMap<usize, usize> = subjects.iter().enumerate().map(|(k, &s)| (s, k)).collect();
    let widths = [enc.layout.lh_width, enc.layout.rh_width];
    let mut items = training_items(&caches, ds, cfg)?;
    let bs = cfg.batch_size;
    let steps_per_epoch = items.len() / bs + usize::from(items.len() % bs >= 2);
    let total_steps = cfg.max_epochs * steps_per_epoch;

    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut epoch_batches = |items: &mut Vec<(usize, usize)>| -> Vec<Vec<(usize, usize)>> {
        items.shuffle(&mut shuffle);
        items
            .chunks(bs)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    };

    let mut opt: AdamW<f32> = AdamW::new(cfg.adamw());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let val0 = validation_m(&enc, &caches, cfg.workers)?;
    stopper.observe(0, val0);
    let mut best = (0usize, val0, enc.clone());
    let mut history = vec![EpochRecord {
        stage: spec.stage,
        epoch: 0,
        steps: 0,
        lr: cfg.lr0,
        train_loss: None,
        val_m: val0,
        best_epoch: 0,
        best_val_m: val0,
    }];
    info!("{} epoch 0: val m {val0:.5}", spec.stage);

    let mut initial_loss = f64::NAN;
    let mut stopped_early = false;
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(&mut items);
        if epoch == 1 {
            let mut probe = enc.clone();
            let mut sum = 0.0;
            for b in &batches {
                let batch = assemble(&caches, &slot, b, widths, spec.use_nc)?;
                sum += batch_step(&mut probe, &batch, spec.recipe, spec.roi_loss, false)?.loss;
            }
            initial_loss = sum / batches.len() as f64;
        }
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr0;
        for b in &batches {
            let batch = assemble(&caches, &slot, b, widths, spec.use_nc)?;
            let out = batch_step(&mut enc, &batch, spec.recipe, spec.roi_loss, true)?;
            if !out.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {} of {} (epoch {epoch})",
                    step + 1,
                    spec.stage
                )));
            }
            lr = cosine_lr(step, total_steps, cfg.lr0)?;
            opt.step(&mut enc.params, &out.grads, lr)?;
            step += 1;
            loss_sum += out.loss;
        }
        let val = validation_m(&enc, &caches, cfg.workers)?;
        let decision = stopper.observe(epoch, val);
        if decision.improved {
            best = (epoch, val, enc.clone());
        }
        let record = EpochRecord {
            stage: spec.stage,
            epoch,
            steps: batches.len(),
            lr,
            train_loss: Some(loss_sum / batches.len() as f64),
            val_m: val,
            best_epoch: best.0,
            best_val_m: best.1,
        };
        info!(
            "{} epoch {epoch}: loss {:.5}, val m {val:.5}, best {:.5} (epoch {})",
            spec.stage,
            record.train_loss.unwrap(),
            best.1,
            best.0
        );
        history.push(record);
        if decision.stop && epoch < cfg.max_epochs {
            stopped_early = true;
            break;
        }
    }
    if initial_loss.is_nan() {
        let first = epoch_batches(&mut items);
        let mut probe = enc.clone();
        let mut sum = 0.0;
        for b in &first {
            let batch = assemble(&caches, &slot, b, widths, spec.use_nc)?;
            sum += batch_step(&mut probe, &batch, spec.recipe, spec.roi_loss, false)?.loss;
        }
        initial_loss = sum / first.len() as f64;
    }
    let (epoch, val_m, enc) = best;
    let checkpoint = Checkpoint::new(
        spec.model_id,
        spec.stage,
        enc,
        spec.recipe.clone(),
        spec.stats,
        epoch,
        val_m,
    );
    Ok(TrainOutcome {
        checkpoint,
        history,
        initial_loss,
        stopped_early,
    })
}

/// Joint training of extractor, embedding and shared heads on the training
/// folds of every subject.
pub fn pretrain(ds: &Dataset, recipe: &Recipe) -> Result<TrainOutcome> {
    recipe.validate()?;
    if ds.n_subjects() < 2 {
        return Err(Error::arg(format!(
            "pretraining needs at least 2 subjects, dataset has {}",
            ds.n_subjects()
        )));
    }
    let subjects: Vec<usize> = (0..ds.n_subjects()).collect();
    let layout = EncoderLayout::for_subjects(ds, &recipe.model, &subjects)?;
    let enc = Encoder::init(layout, &mut ChaCha8Rng::seed_from_u64(recipe.train.seed))?;
    let spec = RunSpec {
        stage: Stage::Pretrain,
        model_id: format!(
            "pretrain-seed{}-fold{}",
            recipe.train.seed, recipe.train.fold
        ),
        recipe,
        stats: ds.channel_stats().clone(),
        use_nc: recipe.loss.use_noise_ceiling.unwrap_or(false),
        roi_loss: false,
    };
    run(ds, enc, &subjects, spec)
}

/// Continues training on one subject with ROI heads, starting from `source`
/// (or from scratch when `None`).
pub fn finetune(
    ds: &Dataset,
    subject: usize,
    recipe: &Recipe,
    source: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    recipe.validate()?;
    let sd = ds.subject(subject)?;
    if sd.spec.rois.is_empty() {
        return Err(Error::validation(format!(
            "subject {subject} has no ROI table"
        )));
    }
    let mut recipe = recipe.clone();
    let stats = match source {
        Some(src) => {
            if src.header.layout.model != recipe.model {
                warn!("fine-tuning keeps the source checkpoint's model settings");
                recipe.model = src.header.layout.model.clone();
            }
            if src.header.layout.n_embeddings != ds.n_subjects() {
                return Err(Error::validation(format!(
                    "source checkpoint has {} embedding rows, dataset {} subjects",
                    src.header.layout.n_embeddings,
                    ds.n_subjects()
                )));
            }
            src.header.channel_stats.clone()
        }
        None => ds.channel_stats().clone(),
    };
    let mut layout = EncoderLayout::for_subjects(ds, &recipe.model, &[subject])?;
    layout.rois = sd.spec.rois.clone();
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.train.seed);
    let enc = match source {
        Some(src) => src
            .encoder
            .transfer(layout, recipe.train.transfer, &mut rng)?,
        None => Encoder::init(layout, &mut rng)?,
    };
    let origin = if source.is_some() { "" } else { "-scratch" };
    let spec = RunSpec {
        stage: Stage::Finetune,
        model_id: format!(
            "finetune{origin}-subj{subject:02}-seed{}-fold{}",
            recipe.train.seed, recipe.train.fold
        ),
        recipe: &recipe,
        stats,
        use_nc: recipe.loss.use_noise_ceiling.unwrap_or(true),
        roi_loss: recipe.train.roi_loss,
    };
    run(ds, enc, &[subject], spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictOptions {
    pub batch_size: usize,
    pub workers: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            batch_size: PREDICT_BATCH,
            workers: 1,
        }
    }
}

/// Aggregated inference-mode predictions of every subject the checkpoint
/// covers. The validation split is the checkpoint's own held-out fold.
pub fn predict(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    opts: PredictOptions,
) -> Result<PredictionSet> {
    if opts.batch_size == 0 || opts.workers == 0 {
        return Err(Error::arg("batch size and worker count must be >= 1"));
    }
    let layout = &ckpt.encoder.layout;
    if layout.image != ds.image_dims() {
        return Err(Error::validation(
            "checkpoint and dataset image sizes differ",
        ));
    }
    let fold = ckpt.header.recipe.train.fold;
    let mut subjects = Vec::with_capacity(layout.subjects.len());
    for &shape in &layout.subjects {
        let sd = ds.subject(shape.id)?;
        if sd.spec.lh_vertices != shape.lh_vertices || sd.spec.rh_vertices != shape.rh_vertices {
            return Err(Error::validation(format!(
                "subject {}: checkpoint expects [{}, {}] vertices, dataset has [{}, {}]",
                shape.id,
                shape.lh_vertices,
                shape.rh_vertices,
                sd.spec.lh_vertices,
                sd.spec.rh_vertices
            )));
        }
        let data = sd.split(split, fold)?;
        let x = ckpt.header.channel_stats.normalize(&data.images)?;
        let (lh, rh) = predict_rows(&ckpt.encoder, &x, shape, opts.batch_size, opts.workers)?;
        subjects.push(SubjectPrediction {
            subject: shape.id,
            indices: data.indices,
            lh,
            rh,
        });
    }
    Ok(PredictionSet {
        meta: PredictionMeta {
            model_id: ckpt.header.model_id.clone(),
            split,
            fold,
            seed: ckpt.header.recipe.train.seed,
            members: vec![],
        },
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, ExtractorConfig, ExtractorKind};
    use crate::evaluation::score_report;
    use crate::synthgen::{generate, GenSpec};

    fn tiny_data() -> Dataset {
        generate(&GenSpec {
            samples_per_subject: 60,
            test_samples: 16,
            height: 6,
            width: 6,
            vertex_counts: Some(vec![[20, 18], [16, 18]]),
            latent_dim: 4,
            seed: 3,
            ..GenSpec::default()
        })
        .unwrap()
        .0
    }

    fn tiny_recipe(epochs: usize) -> Recipe {
        Recipe {
            model: ModelConfig {
                extractor: ExtractorConfig {
                    kind: ExtractorKind::Mlp,
                    widths: vec![16],
                    activation: Activation::Relu,
                    d_i: 8,
                },
                d_s: 4,
            },
            train: TrainConfig {
                lr0: 3e-3,
                max_epochs: epochs,
                ..TrainConfig::default()
            },
            loss: LossSpec::default(),
        }
    }

    #[test]
    fn pretrain_descends_and_is_deterministic() {
        let ds = tiny_data();
        let a = pretrain(&ds, &tiny_recipe(3)).unwrap();
        assert!(a.history[1].train_loss.unwrap() < a.initial_loss);
        let b = pretrain(&ds, &tiny_recipe(3)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let best = a
            .history
            .iter()
            .map(|r| r.val_m)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.checkpoint.header.val_m, best);
        assert!(a.history.len() <= 4);
    }

    #[test]
    fn padded_head_columns_get_zero_gradient() {
        let ds = tiny_data();
        let recipe = tiny_recipe(1);
        let layout = EncoderLayout::for_subjects(&ds, &recipe.model, &[0, 1]).unwrap();
        let mut enc: Encoder<f32> =
            Encoder::init(layout, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let stats = ds.channel_stats().clone();
        let caches: Vec<SubjectCache> = (0..2)
            .map(|s| SubjectCache::new(&ds, s, 0, &stats).unwrap())
            .collect();
        let slot = BTreeMap::from([(0, 0), (1, 1)]);
        let train = ds.subjects[1].split_indices(Split::Train, 0).unwrap();
        let items: Vec<(usize, usize)> = train[..4].iter().map(|&i| (1, i)).collect();
        let batch = assemble(&caches, &slot, &items, [20, 18], false).unwrap();
        let out = batch_step(&mut enc, &batch, &recipe, false, true).unwrap();
        let g = &out.grads["head_lh.w"];
        let (rows, cols) = g.dims2().unwrap();
        for r in 0..rows {
            for c in 16..cols {
                assert_eq!(g.at2(r, c), 0.0);
            }
        }
        assert!(out.grads["head_lh.b"].data()[16..]
            .iter()
            .all(|&x| x == 0.0));
        assert!(out.grads["head_lh.b"].data()[..16]
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn leakage_is_detected() {
        let ds = tiny_data();
        let stats = ds.channel_stats().clone();
        let caches = vec![SubjectCache::new(&ds, 0, 0, &stats).unwrap()];
        let slot = BTreeMap::from([(0, 0)]);
        let v = caches[0].val[0];
        let t = ds.subjects[0].split_indices(Split::Train, 0).unwrap()[0];
        assert!(matches!(
            assemble(&caches, &slot, &[(0, t), (0, v)], [20, 18], false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_epoch_finetune_matches_pretrained() {
        let ds = tiny_data();
        let pre = pretrain(&ds, &tiny_recipe(2)).unwrap().checkpoint;
        let ft = finetune(&ds, 1, &tiny_recipe(0), Some(&pre)).unwrap();
        let p_pre = predict(&pre, &ds, Split::Val, PredictOptions::default()).unwrap();
        let p_ft = predict(&ft.checkpoint, &ds, Split::Val, PredictOptions::default()).unwrap();
        let a = p_pre.subject(1).unwrap();
        let b = p_ft.subject(1).unwrap();
        assert!(a.lh.max_abs_diff(&b.lh) < 1e-5);
        assert!(a.rh.max_abs_diff(&b.rh) < 1e-5);
        let mut only1 = p_pre.clone();
        only1.subjects.retain(|s| s.subject == 1);
        let m_pre = score_report(&only1, &ds, Split::Val).unwrap().overall_m;
        assert!((ft.checkpoint.header.val_m - m_pre).abs() < 1e-5);
    }

    #[test]
    fn finetune_trains_and_predicts_with_any_batching() {
        let ds = tiny_data();
        let pre = pretrain(&ds, &tiny_recipe(1)).unwrap().checkpoint;
        let ft = finetune(&ds, 0, &tiny_recipe(2), Some(&pre))
            .unwrap()
            .checkpoint;
        assert_eq!(ft.encoder.layout.subjects.len(), 1);
        assert!(!ft.encoder.layout.rois.is_empty());
        let one = predict(
            &ft,
            &ds,
            Split::Test,
            PredictOptions {
                batch_size: 1,
                workers: 1,
            },
        )
        .unwrap();
        let eight = predict(
            &ft,
            &ds,
            Split::Test,
            PredictOptions {
                batch_size: 8,
                workers: 3,
            },
        )
        .unwrap();
        assert_eq!(one, eight);
        assert_eq!(one.subjects[0].lh.shape(), &[16, 20]);
        assert_eq!(one.subjects[0].rh.shape(), &[16, 18]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = tiny_data();
        let ck = pretrain(&ds, &tiny_recipe(1)).unwrap().checkpoint;
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    }

    #[test]
    fn missing_roi_table_and_bad_config_are_rejected() {
        let mut ds = tiny_data();
        ds.subjects[0].spec.rois.clear();
        assert!(matches!(
            finetune(&ds, 0, &tiny_recipe(1), None),
            Err(Error::Validation(_))
        ));
        let mut r = tiny_recipe(1);
        r.train.batch_size = 1;
        assert!(matches!(pretrain(&ds, &r), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_extractor_stays_fixed() {
        let ds = tiny_data();
        let pre = pretrain(&ds, &tiny_recipe(1)).unwrap().checkpoint;
        let mut r = tiny_recipe(2);
        r.train.freeze_extractor = true;
        let ft = finetune(&ds, 0, &r, Some(&pre)).unwrap();
        for (name, p) in &ft.checkpoint.encoder.params {
            if name.starts_with(EXTRACTOR_PREFIX) {
                assert_eq!(p, pre.encoder.param(name).unwrap(), "{name}");
            }
        }
    }
}
