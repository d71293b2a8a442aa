use std::collections::BTreeMap;

use brainenc_core::datamodel::{Hemisphere, ImageDims, Roi, Split};
use brainenc_core::encoder::{
    aggregate_prediction, Activation, Encoder, EncoderLayout, ExtractorConfig, ExtractorKind,
    ModelConfig, SubjectShape,
};
use brainenc_core::ensemble::{blend, compute_weights, WeightMode};
use brainenc_core::evaluation::metric_m;
use brainenc_core::ndiff::{BatchNormState, Mode, NdTensor, Tape};
use brainenc_core::objectives::{mnnpc_loss, pc_loss};
use brainenc_core::prediction::{PredictionMeta, PredictionSet, SubjectPrediction};
use brainenc_core::synthgen::{generate, GenSpec};
use brainenc_core::trainer::cosine_lr;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = NdTensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| NdTensor::new(vec![rows, cols], d).unwrap())
}

/// Two same-shaped matrices with shape drawn from the given ranges.
fn pair(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = (NdTensor<f64>, NdTensor<f64>)> {
    (rows, cols).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

fn pc(p: &NdTensor<f64>, g: &NdTensor<f64>) -> f64 {
    let mut t = Tape::new();
    let (a, b) = (t.constant(p.clone()), t.constant(g.clone()));
    let l = pc_loss(&mut t, a, b).unwrap();
    t.value(l).data()[0]
}

fn mnnpc(p: &NdTensor<f64>, g: &NdTensor<f64>, nc: Option<&[f64]>) -> f64 {
    let mut t = Tape::new();
    let (a, b) = (t.constant(p.clone()), t.constant(g.clone()));
    let l = mnnpc_loss(&mut t, a, b, nc).unwrap();
    t.value(l).data()[0]
}

fn affine_rows(x: &NdTensor<f64>, a: &[f64], b: &[f64]) -> NdTensor<f64> {
    let c = x.shape()[1];
    let d = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| a[i / c] * v + b[i / c])
        .collect();
    NdTensor::new(x.shape().to_vec(), d).unwrap()
}

fn affine_cols(x: &NdTensor<f64>, a: &[f64], b: &[f64]) -> NdTensor<f64> {
    let c = x.shape()[1];
    let d = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| a[i % c] * v + b[i % c])
        .collect();
    NdTensor::new(x.shape().to_vec(), d).unwrap()
}

fn small_layout(kind: ExtractorKind, lh: [usize; 2], rh: [usize; 2], d_s: usize) -> EncoderLayout {
    EncoderLayout {
        image: ImageDims {
            channels: 2,
            height: 6,
            width: 6,
        },
        model: ModelConfig {
            extractor: ExtractorConfig {
                kind,
                widths: vec![4],
                activation: Activation::Relu,
                d_i: 5,
            },
            d_s,
        },
        n_embeddings: 2,
        subjects: (0..2)
            .map(|i| SubjectShape {
                id: i,
                lh_vertices: lh[i],
                rh_vertices: rh[i],
            })
            .collect(),
        lh_width: lh[0].max(lh[1]),
        rh_width: rh[0].max(rh[1]),
        rois: BTreeMap::new(),
    }
}

fn images(seed: u64, b: usize) -> NdTensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdTensor::new(
        vec![b, 2, 6, 6],
        (0..b * 72).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_bitwise_repeatable((p, g) in pair(2..=8, 2..=12)) {
        prop_assert_eq!(pc(&p, &g).to_bits(), pc(&p, &g).to_bits());
        prop_assert_eq!(mnnpc(&p, &g, None).to_bits(), mnnpc(&p, &g, None).to_bits());
    }

    #[test]
    fn loss_ranges((p, g) in pair(2..=8, 2..=12), nc in prop::collection::vec(0.0f64..1.0, 12)) {
        let v = pc(&p, &g);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        let v = mnnpc(&p, &g, None);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        let v = mnnpc(&p, &g, Some(&nc[..p.shape()[1]]));
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn pc_row_affine_invariance(
        (p, g) in pair(1..=6, 3..=10),
        a in prop::collection::vec(0.2f64..5.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let base = pc(&p, &g);
        prop_assert!((pc(&affine_rows(&p, &a, &b), &g) - base).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((pc(&affine_rows(&p, &neg, &b), &g) - (1.0 - base)).abs() < 1e-9);
    }

    #[test]
    fn mnnpc_vertex_affine_invariance(
        (p, g) in pair(3..=8, 1..=10),
        a in prop::collection::vec(0.2f64..5.0, 10),
        b in prop::collection::vec(-3.0f64..3.0, 10),
    ) {
        let base = mnnpc(&p, &g, None);
        prop_assert!((mnnpc(&affine_cols(&p, &a, &b), &g, None) - base).abs() < 1e-7);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((mnnpc(&affine_cols(&p, &neg, &b), &g, None) - (1.0 - base)).abs() < 1e-7);
    }

    #[test]
    fn identity_minimizes_mnnpc((p, g) in pair(3..=8, 1..=10)) {
        let at_gt = mnnpc(&g, &g, None);
        prop_assert!(at_gt.abs() < 1e-7);
        prop_assert!(at_gt <= mnnpc(&p, &g, None) + 1e-12);
    }

    #[test]
    fn metric_is_vertex_affine_invariant(
        (p, g) in pair(3..=10, 1..=10),
        a in prop::collection::vec(0.2f64..5.0, 10),
        b in prop::collection::vec(-3.0f64..3.0, 10),
        nc in prop::collection::vec(0.05f64..1.0, 10),
    ) {
        let v = p.shape()[1];
        let m0 = metric_m(&p, &g, &nc[..v]).unwrap();
        let m1 = metric_m(&affine_cols(&p, &a, &b), &g, &nc[..v]).unwrap();
        prop_assert!((m0 - m1).abs() < 1e-9);
        let perfect = metric_m(&g, &g, &vec![1.0; v]).unwrap();
        prop_assert!((perfect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_standardizes(x in matrix(12, 5), gamma in prop::collection::vec(0.5f64..2.0, 5), beta in prop::collection::vec(-1.0f64..1.0, 5)) {
        // Spread each column so its variance dominates the epsilon.
        let x = affine_cols(&x, &[3.0; 5], &[0.0; 5]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (gv, bv) = (t.constant(NdTensor::new(vec![5], gamma.clone()).unwrap()), t.constant(NdTensor::new(vec![5], beta.clone()).unwrap()));
        let mut state = BatchNormState::new(5);
        let y = t.batch_norm(xv, gv, bv, &mut state, Mode::Train).unwrap();
        let y = t.value(y);
        for j in 0..5 {
            let col: Vec<f64> = (0..12).map(|i| y.at2(i, j)).collect();
            let xc: Vec<f64> = (0..12).map(|i| x.at2(i, j)).collect();
            let xm = xc.iter().sum::<f64>() / 12.0;
            prop_assume!(xc.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 12.0 > 1e-2);
            let mean = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            prop_assert!((mean - beta[j]).abs() < 1e-5);
            prop_assert!((var - gamma[j] * gamma[j]).abs() < 1e-3);
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(a in matrix(3, 4), b in matrix(3, 2)) {
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.concat_last(av, bv).unwrap();
        let left = t.gather_cols(c, &[0, 1, 2, 3]).unwrap();
        let right = t.gather_cols(c, &[4, 5]).unwrap();
        prop_assert_eq!(t.value(left), &a);
        prop_assert_eq!(t.value(right), &b);
    }

    #[test]
    fn schedule_endpoints(total in 1usize..10_000, lr0 in 1e-6f64..1.0) {
        prop_assert_eq!(cosine_lr(0, total, lr0).unwrap(), lr0);
        prop_assert_eq!(cosine_lr(total, total, lr0).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_is_linear(y in matrix(3, 6), r1 in matrix(3, 2), r2 in matrix(3, 3), s in -2.0f64..2.0) {
        let agg = |y: &NdTensor<f64>, r1: &NdTensor<f64>, r2: &NdTensor<f64>| {
            let mut t = Tape::new();
            let (yv, a, b) = (t.constant(y.clone()), t.constant(r1.clone()), t.constant(r2.clone()));
            let out = aggregate_prediction(&mut t, yv, &[(a, &[1, 4][..]), (b, &[0, 1, 5][..])]).unwrap();
            t.value(out).clone()
        };
        let scaled = |m: &NdTensor<f64>| m.map(|v| v * s);
        let lhs = agg(&scaled(&y), &scaled(&r1), &scaled(&r2));
        let rhs = scaled(&agg(&y, &r1, &r2));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        // ROI heads that copy the full head leave it unchanged.
        let copy1 = y.select_cols(&[1, 4]).unwrap();
        let copy2 = y.select_cols(&[0, 1, 5]).unwrap();
        prop_assert!(agg(&y, &copy1, &copy2).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn blend_is_linear_and_identity_exact(x in prop::collection::vec(-10.0f32..10.0, 6), y in prop::collection::vec(-10.0f32..10.0, 6), s in 0.1f64..0.9) {
        let set = |v: &[f32]| PredictionSet {
            meta: PredictionMeta { model_id: "m".into(), split: Split::Val, fold: 0, seed: 0, members: vec![] },
            subjects: vec![SubjectPrediction {
                subject: 0,
                indices: vec![0, 1, 2],
                lh: NdTensor::new(vec![3, 2], v.to_vec()).unwrap(),
                rh: NdTensor::new(vec![3, 2], v.iter().map(|a| -a).collect()).unwrap(),
            }],
        };
        let w = compute_weights(WeightMode::Explicit, &[0], 2, None, Some(&[s, 1.0 - s])).unwrap();
        let out = blend(&[&set(&x), &set(&y)], &w, "e").unwrap();
        let ws = &w[&0][0];
        for i in 0..6 {
            let want = ws[0] * x[i] as f64 + ws[1] * y[i] as f64;
            prop_assert!((out.subjects[0].lh.data()[i] as f64 - want).abs() < 1e-5);
        }
        let w = compute_weights(WeightMode::Explicit, &[0], 2, None, Some(&[1.0, 3.0])).unwrap();
        let same = blend(&[&set(&x), &set(&x)], &w, "e").unwrap();
        prop_assert_eq!(&same.subjects, &set(&x).subjects);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_output_shapes_and_conditioning(
        lh in (1usize..7, 1usize..7), rh in (1usize..7, 1usize..7), d_s in 1usize..6, conv in any::<bool>(), seed in any::<u64>(), b in 1usize..5,
    ) {
        let kind = if conv { ExtractorKind::Conv } else { ExtractorKind::Mlp };
        let layout = small_layout(kind, [lh.0, lh.1], [rh.0, rh.1], d_s);
        let mut enc: Encoder<f32> = Encoder::init(layout, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = images(seed, b);
        let (l0, r0) = enc.predict(&x, &vec![0; b]).unwrap();
        prop_assert_eq!(l0.shape(), &[b, lh.0.max(lh.1)][..]);
        prop_assert_eq!(r0.shape(), &[b, rh.0.max(rh.1)][..]);
        let (l1, _) = enc.predict(&x, &vec![1; b]).unwrap();
        prop_assert!(l0.max_abs_diff(&l1) > 0.0);
    }

    #[test]
    fn inference_is_batch_independent(seed in any::<u64>(), b in 2usize..6, conv in any::<bool>()) {
        let kind = if conv { ExtractorKind::Conv } else { ExtractorKind::Mlp };
        let mut enc: Encoder<f32> = Encoder::init(small_layout(kind, [4, 3], [2, 5], 3), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = images(seed ^ 1, b);
        let subjects: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let (lb, rb) = enc.predict(&x, &subjects).unwrap();
        for (i, &s) in subjects.iter().enumerate() {
            let xi = x.select_rows(&[i]).unwrap();
            let (li, ri) = enc.predict(&xi, &[s]).unwrap();
            prop_assert_eq!(li.data(), lb.row(i));
            prop_assert_eq!(ri.data(), rb.row(i));
        }
    }

    #[test]
    fn generation_is_reproducible(seed in any::<u64>()) {
        let spec = GenSpec {
            samples_per_subject: 20,
            test_samples: 4,
            height: 4,
            width: 4,
            lh_vertices: 8,
            rh_vertices: 6,
            n_folds: 2,
            seed,
            ..GenSpec::default()
        };
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        prop_assert!(ta == tb);
        prop_assert_eq!(&a.manifest, &b.manifest);
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            let bits = |t: &NdTensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(&x.spec, &y.spec);
            prop_assert_eq!(bits(&x.images), bits(&y.images));
            prop_assert_eq!(bits(&x.lh), bits(&y.lh));
            prop_assert_eq!(bits(&x.rh), bits(&y.rh));
            prop_assert_eq!(&x.folds, &y.folds);
        }
        for s in &a.subjects {
            for h in Hemisphere::BOTH {
                for (_, roi) in s.spec.rois_of(h) {
                    let r: &Roi = roi;
                    prop_assert!(r.indices.iter().all(|&i| i < s.spec.vertices(h)));
                }
            }
        }
    }
}
