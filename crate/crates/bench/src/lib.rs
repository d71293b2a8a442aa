//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use brainenc_core::datamodel::ImageDims;
use brainenc_core::encoder::{
    Activation, Encoder, EncoderLayout, ExtractorConfig, ExtractorKind, ModelConfig, SubjectShape,
};
use brainenc_core::ndiff::NdTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdTensor<f32> {
    let n = shape.iter().product();
    NdTensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized")
}

/// Two-subject encoder on 16×16×3 images with 200 vertices per hemisphere.
pub fn encoder(kind: ExtractorKind, seed: u64) -> Encoder<f32> {
    let layout = EncoderLayout {
        image: ImageDims {
            channels: 3,
            height: 16,
            width: 16,
        },
        model: ModelConfig {
            extractor: ExtractorConfig {
                kind,
                widths: vec![256],
                activation: Activation::Tanh,
                d_i: 64,
            },
            d_s: 512,
        },
        n_embeddings: 2,
        subjects: (0..2)
            .map(|id| SubjectShape {
                id,
                lh_vertices: 200,
                rh_vertices: 200,
            })
            .collect(),
        lh_width: 200,
        rh_width: 200,
        rois: BTreeMap::new(),
    };
    Encoder::init(layout, &mut rng(seed)).expect("valid layout")
}
