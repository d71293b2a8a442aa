//! Built-in numerical self-checks: reverse-mode gradients against finite
//! differences, and losses and metrics against the scalar oracles.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::datamodel::{Hemisphere, ImageDims, Roi};
use crate::encoder::{
    Activation, Encoder, EncoderLayout, ExtractorConfig, ExtractorKind, ModelConfig, SubjectShape,
};
use crate::error::Result;
use crate::evaluation::metric_m;
use crate::ndiff::{grad_check, BatchNormState, Mode, NdTensor, Tape, Var, DEFAULT_FD_EPS};
use crate::objectives::{composite_loss, mnnpc_loss, pc_loss, HemisphereTarget, LossSpec};
use crate::oracle;

pub const ELEMENTWISE_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst error over all cases (relative for gradients, absolute for oracles).
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

type Objective = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    composed: bool,
    build: fn(&mut ChaCha8Rng) -> (NdTensor<f64>, Objective),
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdTensor<f64> {
    let n = shape.iter().product();
    NdTensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("sized")
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdTensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    NdTensor::new(shape.to_vec(), data).expect("sized")
}

/// `Σ w ⊙ y` with fixed random weights, so every output element feeds the
/// gradient with a distinct non-zero coefficient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &NdTensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    x: NdTensor<f64>,
    op: impl Fn(&mut Tape<f64>, Var) -> Var + 'static,
) -> (NdTensor<f64>, Objective) {
    let w = away_from_zero(rng, x.shape(), 0.5, 1.5);
    (
        x,
        Box::new(move |t, v| {
            let y = op(t, v);
            weighted_sum(t, y, &w)
        }),
    )
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    x: NdTensor<f64>,
    other: NdTensor<f64>,
    op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + 'static,
) -> (NdTensor<f64>, Objective) {
    let w = away_from_zero(rng, x.shape(), 0.5, 1.5);
    (
        x,
        Box::new(move |t, v| {
            let o = t.constant(other.clone());
            let y = op(t, v, o)?;
            weighted_sum(t, y, &w)
        }),
    )
}

fn smooth_l1_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdTensor<f64> {
    // Keep clear of the kink at |d| = beta = 1.
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = if rng.random_bool(0.5) {
                rng.random_range(0.1..0.8)
            } else {
                rng.random_range(1.2..3.0)
            };
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    NdTensor::new(shape.to_vec(), data).expect("sized")
}

/// Small two-subject encoder with overlapping ROIs; the second subject has
/// fewer left-hemisphere vertices, so its padded columns are masked.
fn encoder_case(rng: &mut ChaCha8Rng, kind: ExtractorKind) -> (NdTensor<f64>, Objective) {
    let mut rois = BTreeMap::new();
    rois.insert(
        "lh-a".to_string(),
        Roi {
            hemisphere: Hemisphere::Lh,
            indices: vec![0, 2, 3],
        },
    );
    rois.insert(
        "lh-b".to_string(),
        Roi {
            hemisphere: Hemisphere::Lh,
            indices: vec![2, 3],
        },
    );
    rois.insert(
        "rh-a".to_string(),
        Roi {
            hemisphere: Hemisphere::Rh,
            indices: vec![1],
        },
    );
    let layout = EncoderLayout {
        image: ImageDims {
            channels: 2,
            height: 6,
            width: 5,
        },
        model: ModelConfig {
            extractor: ExtractorConfig {
                kind,
                widths: vec![3],
                activation: Activation::Tanh,
                d_i: 4,
            },
            d_s: 3,
        },
        n_embeddings: 2,
        subjects: vec![
            SubjectShape {
                id: 0,
                lh_vertices: 6,
                rh_vertices: 4,
            },
            SubjectShape {
                id: 1,
                lh_vertices: 4,
                rh_vertices: 4,
            },
        ],
        lh_width: 6,
        rh_width: 4,
        rois,
    };
    let enc: Encoder<f64> = Encoder::init(layout, rng).expect("valid layout");
    let x = normal(rng, &[4, 2, 6, 5]);
    let (gl, gr) = (normal(rng, &[4, 6]), normal(rng, &[4, 4]));
    let nc: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.0)).collect();
    let mask: Vec<bool> = (0..6).map(|j| j < 4).collect();
    (
        x,
        Box::new(move |t, v| {
            let mut e = enc.clone();
            let b = e.bind(t);
            let out = e.forward(t, &b, v, &[0, 1, 1, 0], Mode::Train)?;
            let pl = e.aggregate(t, &out, Hemisphere::Lh)?;
            let pr = e.aggregate(t, &out, Hemisphere::Rh)?;
            let (l, r) = (t.constant(gl.clone()), t.constant(gr.clone()));
            let lh = HemisphereTarget {
                gt: l,
                nc: Some(&nc),
                mask: Some(&mask),
            };
            composite_loss(
                t,
                pl,
                lh,
                pr,
                HemisphereTarget::new(r),
                &LossSpec::default(),
            )
        }),
    )
}

fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            composed: false,
            build: |r| {
                let (x, o) = (normal(r, &[3, 4]), normal(r, &[3, 4]));
                binary_case(r, x, o, |t, a, b| t.add(a, b))
            },
        },
        GradCase {
            name: "sub",
            composed: false,
            build: |r| {
                let (x, o) = (normal(r, &[3, 4]), normal(r, &[3, 4]));
                binary_case(r, x, o, |t, a, b| t.sub(b, a))
            },
        },
        GradCase {
            name: "mul",
            composed: false,
            build: |r| {
                let (x, o) = (normal(r, &[3, 4]), away_from_zero(r, &[3, 4], 0.3, 2.0));
                binary_case(r, x, o, |t, a, b| t.mul(a, b))
            },
        },
        GradCase {
            name: "div",
            composed: false,
            build: |r| {
                let (x, o) = (away_from_zero(r, &[3, 4], 0.5, 2.0), normal(r, &[3, 4]));
                binary_case(r, x, o, |t, a, b| t.div(b, a))
            },
        },
        GradCase {
            name: "tanh",
            composed: false,
            build: |r| {
                let x = normal(r, &[4, 5]);
                unary_case(r, x, |t, v| t.tanh(v))
            },
        },
        GradCase {
            name: "relu",
            composed: false,
            build: |r| {
                let x = away_from_zero(r, &[4, 5], 0.1, 2.0);
                unary_case(r, x, |t, v| t.relu(v))
            },
        },
        GradCase {
            name: "square",
            composed: false,
            build: |r| {
                let x = away_from_zero(r, &[4, 5], 0.1, 2.0);
                unary_case(r, x, |t, v| t.square(v))
            },
        },
        GradCase {
            name: "sqrt",
            composed: false,
            build: |r| {
                let x = away_from_zero(r, &[4, 5], 0.5, 3.0).map(f64::abs);
                unary_case(r, x, |t, v| t.sqrt(v))
            },
        },
        GradCase {
            name: "smooth_l1",
            composed: false,
            build: |r| {
                let x = smooth_l1_input(r, &[4, 5]);
                unary_case(r, x, |t, v| t.smooth_l1(v, 1.0))
            },
        },
        GradCase {
            name: "scale_shift",
            composed: false,
            build: |r| {
                let x = normal(r, &[4, 5]);
                unary_case(r, x, |t, v| {
                    let s = t.scale(v, -1.7);
                    t.add_scalar(s, 0.3)
                })
            },
        },
        GradCase {
            name: "matmul",
            composed: true,
            build: |r| {
                let (x, o) = (normal(r, &[5, 4]), normal(r, &[4, 3]));
                let w = away_from_zero(r, &[5, 3], 0.5, 1.5);
                (
                    x,
                    Box::new(move |t, v| {
                        let b = t.constant(o.clone());
                        let y = t.matmul(v, b)?;
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "pc_loss",
            composed: true,
            build: |r| {
                let (x, g) = (normal(r, &[6, 9]), normal(r, &[6, 9]));
                (
                    x,
                    Box::new(move |t, v| {
                        let gt = t.constant(g.clone());
                        pc_loss(t, v, gt)
                    }),
                )
            },
        },
        GradCase {
            name: "mnnpc_loss",
            composed: true,
            build: |r| {
                let (x, g) = (normal(r, &[8, 5]), normal(r, &[8, 5]));
                let nc: Vec<f64> = (0..5).map(|_| r.random_range(0.2..1.0)).collect();
                (
                    x,
                    Box::new(move |t, v| {
                        let gt = t.constant(g.clone());
                        mnnpc_loss(t, v, gt, Some(&nc))
                    }),
                )
            },
        },
        GradCase {
            name: "composite_loss_masked",
            composed: true,
            build: |r| {
                let (x, gl, gr) = (normal(r, &[6, 10]), normal(r, &[6, 10]), normal(r, &[6, 7]));
                let pr = normal(r, &[6, 7]);
                let nc: Vec<f64> = (0..10).map(|_| r.random_range(0.2..1.0)).collect();
                let mask: Vec<bool> = (0..10).map(|j| j < 7).collect();
                (
                    x,
                    Box::new(move |t, v| {
                        let (gl, gr, pr) = (
                            t.constant(gl.clone()),
                            t.constant(gr.clone()),
                            t.constant(pr.clone()),
                        );
                        let lh = HemisphereTarget {
                            gt: gl,
                            nc: Some(&nc),
                            mask: Some(&mask),
                        };
                        composite_loss(
                            t,
                            v,
                            lh,
                            pr,
                            HemisphereTarget::new(gr),
                            &LossSpec::default(),
                        )
                    }),
                )
            },
        },
        GradCase {
            name: "batch_norm_train",
            composed: true,
            build: |r| {
                let x = normal(r, &[6, 4]);
                let gamma = away_from_zero(r, &[4], 0.5, 1.5);
                let beta = normal(r, &[4]);
                let w = away_from_zero(r, &[6, 4], 0.5, 1.5);
                (
                    x,
                    Box::new(move |t, v| {
                        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                        let mut state = BatchNormState::new(4);
                        let y = t.batch_norm(v, g, b, &mut state, Mode::Train)?;
                        let y = t.tanh(y);
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "conv_im2col_pool",
            composed: true,
            build: |r| {
                let x = normal(r, &[2, 2, 5, 5]);
                let k = normal(r, &[18, 3]);
                let w = away_from_zero(r, &[2, 3], 0.5, 1.5);
                (
                    x,
                    Box::new(move |t, v| {
                        let nhwc = t.nchw_to_nhwc(v)?;
                        let cols = t.im2col(nhwc, 3, 2, 1)?;
                        let kw = t.constant(k.clone());
                        let y = t.matmul(cols, kw)?;
                        let y = t.tanh(y);
                        let y = t.pool_rows(y, 2)?;
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "gather_scatter_concat",
            composed: true,
            build: |r| {
                let x = normal(r, &[3, 6]);
                let o = normal(r, &[3, 2]);
                let w = away_from_zero(r, &[3, 7], 0.5, 1.5);
                (
                    x,
                    Box::new(move |t, v| {
                        let g = t.gather_cols(v, &[4, 0, 2])?;
                        let s = t.scatter_cols(g, &[1, 3, 4], 5)?;
                        let e = t.constant(o.clone());
                        let y = t.concat_last(s, e)?;
                        let y = t.square(y);
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "row_broadcast_embedding",
            composed: true,
            build: |r| {
                let x = normal(r, &[4, 3]);
                let w = away_from_zero(r, &[5, 3], 0.5, 1.5);
                (
                    x,
                    Box::new(move |t, v| {
                        let rows = t.gather_rows(v, &[2, 0, 2, 3, 1])?;
                        let mu = t.mean_axis(rows, 0)?;
                        let mu = t.broadcast_rows(mu, 5)?;
                        let y = t.sub(rows, mu)?;
                        let y = t.tanh(y);
                        weighted_sum(t, y, &w)
                    }),
                )
            },
        },
        GradCase {
            name: "encoder_mlp_composite",
            composed: true,
            build: |r| encoder_case(r, ExtractorKind::Mlp),
        },
        GradCase {
            name: "encoder_conv_composite",
            composed: true,
            build: |r| encoder_case(r, ExtractorKind::Conv),
        },
    ]
}

/// Gradient checks of every case at each seed. Elementwise cases are held to
/// [`ELEMENTWISE_TOL`], composed graphs to [`COMPOSED_TOL`].
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, f) = (case.build)(&mut rng);
            let e = grad_check(&f, &x, DEFAULT_FD_EPS)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        out.push(CheckOutcome {
            name: format!("grad/{}", case.name),
            worst,
            tolerance: if case.composed {
                COMPOSED_TOL
            } else {
                ELEMENTWISE_TOL
            },
            cases: seeds.len(),
        });
    }
    Ok(out)
}

fn scalar_of(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).data()[0])
}

/// Compares the tape losses, the metric and matmul against the loop oracles
/// on `instances` random problems each.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let rows = rng.random_range(2..17);
        let cols = rng.random_range(2..33);
        let p = normal(&mut rng, &[rows, cols]);
        let g = normal(&mut rng, &[rows, cols]);
        let nc: Vec<f64> = (0..cols)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    rng.random_range(0.05..1.0)
                }
            })
            .collect();

        let got = scalar_of(|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(g.clone()));
            pc_loss(t, a, b)
        })?;
        let want = oracle::pc_loss_scalar(p.data(), g.data(), rows, cols);
        worst[0] = worst[0].max((got - want).abs());

        let got = scalar_of(|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(g.clone()));
            mnnpc_loss(t, a, b, None)
        })?;
        let want = oracle::mnnpc_loss_scalar(p.data(), g.data(), rows, cols, None);
        worst[1] = worst[1].max((got - want).abs());

        let got = scalar_of(|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(g.clone()));
            mnnpc_loss(t, a, b, Some(&nc))
        })?;
        let want = oracle::mnnpc_loss_scalar(p.data(), g.data(), rows, cols, Some(&nc));
        worst[2] = worst[2].max((got - want).abs());

        // A few constant prediction columns exercise the zero-variance rule.
        let mut pc = p.clone();
        for j in 0..cols {
            if rng.random_bool(0.1) {
                for i in 0..rows {
                    pc.data_mut()[i * cols + j] = 0.25;
                }
            }
        }
        let got = metric_m(&pc, &g, &nc)?;
        let want = oracle::metric_m_bruteforce(pc.data(), g.data(), rows, cols, &nc);
        worst[3] = worst[3].max((got - want).abs());

        let k = rng.random_range(1..9);
        let b = normal(&mut rng, &[cols, k]);
        let got = scalar_of(|t| {
            let (a, bb) = (t.constant(p.clone()), t.constant(b.clone()));
            let y = t.matmul(a, bb)?;
            Ok(t.sum_all(y))
        })?;
        let want: f64 = oracle::matmul_triple_loop(p.data(), b.data(), rows, cols, k)
            .iter()
            .sum();
        worst[4] = worst[4].max((got - want).abs());
    }
    Ok([
        "oracle/pc_loss",
        "oracle/mnnpc_loss",
        "oracle/mnnpc_loss_nc",
        "oracle/metric_m",
        "oracle/matmul",
    ]
    .iter()
    .zip(worst)
    .map(|(name, w)| CheckOutcome {
        name: name.to_string(),
        worst: w,
        tolerance: ORACLE_TOL,
        cases: instances,
    })
    .collect())
}

/// Both suites with the default sizes.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let seeds: Vec<u64> = (0..20).collect();
    let mut out = gradient_suite(&seeds)?;
    out.extend(oracle_suite(1000, 7)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_small_size() {
        for c in gradient_suite(&[0, 1, 2]).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
        for c in oracle_suite(50, 3).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn nan_never_passes() {
        let c = CheckOutcome {
            name: "x".into(),
            worst: f64::NAN,
            tolerance: 1.0,
            cases: 1,
        };
        assert!(!c.passed());
    }
}
