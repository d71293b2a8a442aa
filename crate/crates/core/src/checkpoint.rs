//! Checkpoint directories: `checkpoint.json` plus one `NENC` array per
//! parameter and batch-norm statistic.
//!
//! Array files are numbered in parameter-name order, so two checkpoints with
//! equal contents are byte-identical on disk.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{create_dir, nenc, read_json, write_json, ChannelStats};
use crate::encoder::{Encoder, EncoderLayout};
use crate::error::{Error, Result};
use crate::ndiff::{BatchNormState, NdTensor};
use crate::trainer::Recipe;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: u32,
    pub model_id: String,
    pub stage: Stage,
    pub layout: EncoderLayout,
    pub recipe: Recipe,
    /// Input normalization the model was trained with.
    pub channel_stats: ChannelStats,
    /// Epoch the stored weights come from (0 = before any training).
    pub epoch: usize,
    pub val_m: f64,
    pub params: Vec<String>,
    pub buffers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub encoder: Encoder<f32>,
}

impl Checkpoint {
    pub fn new(
        model_id: String,
        stage: Stage,
        encoder: Encoder<f32>,
        recipe: Recipe,
        channel_stats: ChannelStats,
        epoch: usize,
        val_m: f64,
    ) -> Self {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT,
            model_id,
            stage,
            layout: encoder.layout.clone(),
            recipe,
            channel_stats,
            epoch,
            val_m,
            params: encoder.params.keys().cloned().collect(),
            buffers: encoder.buffers.keys().cloned().collect(),
        };
        Self { header, encoder }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        for (i, name) in self.header.params.iter().enumerate() {
            nenc::write_array(
                dir.join(format!("param_{i:03}.nenc")),
                self.encoder.param(name)?,
            )?;
        }
        for (i, name) in self.header.buffers.iter().enumerate() {
            let s = &self.encoder.buffers[name];
            let w = s.width();
            nenc::write_array(
                dir.join(format!("buffer_{i:03}_mean.nenc")),
                &NdTensor::new(vec![w], s.running_mean.clone())?,
            )?;
            nenc::write_array(
                dir.join(format!("buffer_{i:03}_var.nenc")),
                &NdTensor::new(vec![w], s.running_var.clone())?,
            )?;
        }
        write_json(&dir.join(CHECKPOINT_FILE), &self.header)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: CheckpointHeader = read_json(&dir.join(CHECKPOINT_FILE))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!(
                "unsupported checkpoint format {}",
                header.format
            )));
        }
        header.layout.validate()?;
        // A fresh model fixes the expected names and shapes.
        let template: Encoder<f32> =
            Encoder::init(header.layout.clone(), &mut ChaCha8Rng::seed_from_u64(0))
                .map_err(|e| Error::validation(format!("checkpoint layout: {e}")))?;
        let expected: Vec<&String> = template.params.keys().collect();
        if header.params.iter().collect::<Vec<_>>() != expected
            || header.buffers.iter().collect::<Vec<_>>()
                != template.buffers.keys().collect::<Vec<_>>()
        {
            return Err(Error::validation(
                "checkpoint parameter list does not match its layout",
            ));
        }
        let mut encoder = template;
        for (i, name) in header.params.iter().enumerate() {
            let arr = nenc::read_array(dir.join(format!("param_{i:03}.nenc")))?;
            let slot = encoder.param_mut(name)?;
            if arr.shape() != slot.shape() {
                return Err(Error::validation(format!(
                    "checkpoint parameter {name}: shape {:?}, layout expects {:?}",
                    arr.shape(),
                    slot.shape()
                )));
            }
            *slot = arr;
        }
        for (i, name) in header.buffers.iter().enumerate() {
            let mean = nenc::read_array(dir.join(format!("buffer_{i:03}_mean.nenc")))?.into_data();
            let var = nenc::read_array(dir.join(format!("buffer_{i:03}_var.nenc")))?.into_data();
            let slot = encoder.buffers.get_mut(name).expect("names checked");
            if mean.len() != slot.width() || var.len() != slot.width() {
                return Err(Error::validation(format!(
                    "checkpoint batch-norm state {name} has the wrong width"
                )));
            }
            *slot = BatchNormState {
                running_mean: mean,
                running_var: var,
            };
        }
        Ok(Self { header, encoder })
    }
}
