//! Reverse-mode differentiation over a recorded computation.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in reverse insertion order, so
//! reductions happen in a fixed sequence and results are reproducible bit for
//! bit.

use super::tensor::{NdTensor, Scalar};
use crate::error::{Error, Result};

/// Epsilon of [`Tape::sqrt_eps`].
pub const SQRT_EPS: f64 = 1e-8;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of a batch-norm layer. The affine scale and shift are
/// ordinary trainable leaves and live outside this struct.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    SqrtEps(Var),
    ClampMin(Var, T),
    SmoothL1(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    BroadcastRows(Var),
    BroadcastCols(Var),
    ConcatLast(Var, Var),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    NchwToNhwc(Var),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    PoolRows(Var),
    Reshape(Var),
}

struct Node<T> {
    value: NdTensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-threaded computation record.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<NdTensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn same_shape<T: Scalar>(what: &str, a: &NdTensor<T>, b: &NdTensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated in index order over `k`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`
fn mm_a_bt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · g[m×n]`
fn mm_at_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdTensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; accumulates a gradient on backward.
    pub fn param(&mut self, value: NdTensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: NdTensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &NdTensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&NdTensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(
        &mut self,
        what: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(what, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = NdTensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2()?;
        let (k2, n) = vb.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {:?} by {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = NdTensor::new(vec![m, n], mm(va.data(), vb.data(), m, k, n))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// `sqrt(x + 1e-8)`
    pub fn sqrt_eps(&mut self, x: Var) -> Var {
        let e: T = t(SQRT_EPS);
        self.unary(x, move |v| (v + e).sqrt(), Op::SqrtEps(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        self.unary(x, move |v| if v < lo { lo } else { v }, Op::ClampMin(x, lo))
    }

    /// Elementwise smooth-L1 (Huber) penalty of a difference tensor.
    pub fn smooth_l1(&mut self, d: Var, beta: T) -> Var {
        let half: T = t(0.5);
        self.unary(
            d,
            move |v| {
                let a = v.abs();
                if a < beta {
                    half * v * v / beta
                } else {
                    a - half * beta
                }
            },
            Op::SmoothL1(d, beta),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.needs(x);
        self.push(NdTensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n: T = t(v.len() as f64);
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        let ng = self.needs(x);
        self.push(NdTensor::scalar(s), Op::MeanAll(x), ng)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let d = v.data();
        let value = match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *o = *o + x;
                    }
                }
                if mean {
                    let n: T = t(r as f64);
                    out.iter_mut().for_each(|o| *o = *o / n);
                }
                NdTensor::new(vec![1, c], out)?
            }
            1 => {
                let n: T = t(c as f64);
                let out = (0..r)
                    .map(|i| {
                        let s = d[i * c..(i + 1) * c].iter().fold(T::zero(), |a, &b| a + b);
                        if mean {
                            s / n
                        } else {
                            s
                        }
                    })
                    .collect();
                NdTensor::new(vec![r, 1], out)?
            }
            _ => {
                return Err(Error::shape(format!(
                    "axis {axis} out of range for 2-D tensor"
                )))
            }
        };
        let ng = self.needs(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(value, op, ng))
    }

    /// Sum over `axis` of a 2-D tensor, keeping the reduced axis with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis` of a 2-D tensor, keeping the reduced axis with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Repeats a row vector (`[n]` or `[1, n]`) `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let v = self.value(x);
        let n = match v.shape() {
            [n] => *n,
            [1, n] => *n,
            s => {
                return Err(Error::shape(format!(
                    "broadcast_rows expects [n] or [1,n], got {s:?}"
                )))
            }
        };
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let value = NdTensor::new(vec![rows, n], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::BroadcastRows(x), ng))
    }

    /// Repeats a column vector `[r, 1]` into `[r, cols]`.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let v = self.value(x);
        let r = match v.shape() {
            [r, 1] => *r,
            s => {
                return Err(Error::shape(format!(
                    "broadcast_cols expects [r,1], got {s:?}"
                )))
            }
        };
        let data = v
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        let value = NdTensor::new(vec![r, cols], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::BroadcastCols(x), ng))
    }

    /// Adds a bias row vector to every row of `x`.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let b = self.broadcast_rows(bias, rows)?;
        self.add(x, b)
    }

    /// Concatenates two 2-D tensors along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ra, ca) = va.dims2()?;
        let (rb, cb) = vb.dims2()?;
        if ra != rb {
            return Err(Error::shape(format!(
                "concat_last batch mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = NdTensor::new(vec![ra, ca + cb], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatLast(a, b), ng))
    }

    /// [`Tape::concat_last`] with an optional empty-width right operand, which
    /// leaves `a` unchanged.
    pub fn concat_last_opt(&mut self, a: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.concat_last(a, b),
            None => Ok(a),
        }
    }

    /// Selects columns `idx` of a 2-D tensor. Repeated indices are allowed.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).select_cols(idx)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::GatherCols(x, idx.to_vec()), ng))
    }

    /// Places the columns of `x` at positions `idx` of a zero `[rows, width]`
    /// tensor. Indices must be unique.
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        if c != idx.len() {
            return Err(Error::shape(format!(
                "scatter_cols: {c} columns but {} indices",
                idx.len()
            )));
        }
        let mut seen = vec![false; width];
        for &j in idx {
            if j >= width || seen[j] {
                return Err(Error::arg(format!(
                    "scatter_cols index {j} out of range or repeated (width {width})"
                )));
            }
            seen[j] = true;
        }
        let mut data = vec![T::zero(); r * width];
        for i in 0..r {
            let src = v.row(i);
            for (k, &j) in idx.iter().enumerate() {
                data[i * width + j] = src[k];
            }
        }
        let value = NdTensor::new(vec![r, width], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::ScatterCols(x, idx.to_vec()), ng))
    }

    /// Row lookup (embedding).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(table).select_rows(idx)?;
        let ng = self.needs(table);
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Per-column batch normalization of `x[B×D]` with scale `gamma[D]` and
    /// shift `beta[D]`.
    ///
    /// Train mode normalizes with the batch's biased variance and updates the
    /// running statistics (unbiased variance); infer mode reads them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let vx = self.value(x);
        let (b, d) = vx.dims2()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != d {
                return Err(Error::shape(format!(
                    "batch_norm {name} has {} entries for width {d}",
                    self.value(v).len()
                )));
            }
        }
        if state.width() != d {
            return Err(Error::shape(format!(
                "batch_norm state width {} for input width {d}",
                state.width()
            )));
        }
        let eps: T = t(BN_EPS);
        let xs = vx.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::InvalidBatch(format!(
                        "batch_norm in train mode needs at least 2 rows, got {b}"
                    )));
                }
                let n: T = t(b as f64);
                let mut mean = vec![T::zero(); d];
                for i in 0..b {
                    for (m, &x) in mean.iter_mut().zip(&xs[i * d..(i + 1) * d]) {
                        *m = *m + x;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); d];
                for i in 0..b {
                    for j in 0..d {
                        let c = xs[i * d + j] - mean[j];
                        var[j] = var[j] + c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                let mom: T = t(BN_MOMENTUM);
                let keep = T::one() - mom;
                let unbias: T = t(b as f64 / (b as f64 - 1.0));
                for j in 0..d {
                    state.running_mean[j] = keep * state.running_mean[j] + mom * mean[j];
                    state.running_var[j] = keep * state.running_var[j] + mom * var[j] * unbias;
                }
                (mean, var)
            }
            Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); b * d];
        let mut out = vec![T::zero(); b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (xs[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + be[j];
            }
        }
        let value = NdTensor::new(vec![b, d], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            ng,
        ))
    }

    /// `[B, C, H, W]` → `[B, H, W, C]`.
    pub fn nchw_to_nhwc(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.shape()[..] else {
            return Err(Error::shape(format!(
                "expected [B,C,H,W], got {:?}",
                v.shape()
            )));
        };
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[((bi * h + y) * w + xx) * c + ci] = d[((bi * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        let value = NdTensor::new(vec![b, h, w, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::NchwToNhwc(x), ng))
    }

    /// Unfolds square `kernel×kernel` patches of an NHWC tensor into rows of a
    /// `[B·Ho·Wo, kernel·kernel·C]` matrix (zero padding), so a convolution is
    /// a plain matmul with a `[kernel·kernel·C, O]` weight.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let v = self.value(x);
        let [b, h, w, c] = v.shape()[..] else {
            return Err(Error::shape(format!(
                "im2col expects [B,H,W,C], got {:?}",
                v.shape()
            )));
        };
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape(format!(
                "im2col kernel {kernel} stride {stride} pad {pad} on {h}x{w}"
            )));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * c;
        let d = v.data();
        let mut out = vec![T::zero(); b * ho * wo * cols];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * cols;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * kernel + kx) * c;
                            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                        }
                    }
                }
            }
        }
        let value = NdTensor::new(vec![b * ho * wo, cols], out)?;
        let ng = self.needs(x);
        Ok(self.push(
            value,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Averages consecutive groups of rows: `[B·S, C]` → `[B, C]`.
    pub fn pool_rows(&mut self, x: Var, groups: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        if groups == 0 || r % groups != 0 {
            return Err(Error::shape(format!(
                "cannot pool {r} rows into {groups} groups"
            )));
        }
        let s = r / groups;
        let n: T = t(s as f64);
        let d = v.data();
        let mut out = vec![T::zero(); groups * c];
        for gi in 0..groups {
            let o = &mut out[gi * c..(gi + 1) * c];
            for k in 0..s {
                let src = &d[(gi * s + k) * c..(gi * s + k + 1) * c];
                for (a, &b) in o.iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
            o.iter_mut().for_each(|a| *a = *a / n);
        }
        let value = NdTensor::new(vec![groups, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::PoolRows(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    fn accumulate(&mut self, v: Var, g: NdTensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> NdTensor<T> {
        NdTensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches value")
    }

    /// Back-propagates from a scalar node. Gradients from earlier calls are
    /// cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.needs(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(NdTensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &NdTensor<T>) -> Result<()> {
        let gd = g.data();
        // Each arm computes parent contributions from borrowed node data first,
        // then accumulates.
        let mut out: Vec<(Var, NdTensor<T>)> = Vec::with_capacity(3);
        {
            let node = &self.nodes[i];
            let val = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims2()?;
                    let n = vb.shape()[1];
                    if self.needs(*a) {
                        out.push((*a, self.like(*a, mm_a_bt(gd, vb.data(), m, n, k))));
                    }
                    if self.needs(*b) {
                        out.push((*b, self.like(*b, mm_at_b(va.data(), gd, m, k, n))));
                    }
                }
                Op::Add(a, b) => {
                    out.push((*a, g.clone()));
                    out.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    out.push((*a, g.clone()));
                    out.push((*b, g.map(|x| -x)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let d = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                        out.push((*a, self.like(*a, d)));
                    }
                    if self.needs(*b) {
                        let d = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                        out.push((*b, self.like(*b, d)));
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b).data();
                    if self.needs(*a) {
                        let d = gd.iter().zip(vb).map(|(&g, &y)| g / y).collect();
                        out.push((*a, self.like(*a, d)));
                    }
                    if self.needs(*b) {
                        // d(x/y)/dy = -(x/y)/y
                        let d = gd
                            .iter()
                            .zip(val)
                            .zip(vb)
                            .map(|((&g, &q), &y)| -g * q / y)
                            .collect();
                        out.push((*b, self.like(*b, d)));
                    }
                }
                Op::AddScalar(x) => out.push((*x, g.clone())),
                Op::Scale(x, c) => {
                    let c = *c;
                    out.push((*x, g.map(|v| v * c)));
                }
                Op::Relu(x) => {
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::Tanh(x) => {
                    let d = gd
                        .iter()
                        .zip(val)
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::Square(x) => {
                    let two: T = t(2.0);
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| g * two * v)
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::Sqrt(x) | Op::SqrtEps(x) => {
                    let two: T = t(2.0);
                    // A zero upstream gradient stays zero even where sqrt' is infinite.
                    let d = gd
                        .iter()
                        .zip(val)
                        .map(|(&g, &y)| if g == T::zero() { g } else { g / (two * y) })
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::ClampMin(x, lo) => {
                    let lo = *lo;
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| if v < lo { T::zero() } else { g })
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::SmoothL1(x, beta) => {
                    let beta = *beta;
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| {
                            if v.abs() < beta {
                                g * v / beta
                            } else {
                                g * v.signum()
                            }
                        })
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    out.push((*x, self.like(*x, vec![gd[0]; n])));
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).len();
                    let s = gd[0] / t(n as f64);
                    out.push((*x, self.like(*x, vec![s; n])));
                }
                Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                    let (r, c) = self.value(*x).dims2()?;
                    let mean = matches!(node.op, Op::MeanAxis(..));
                    let mut d = vec![T::zero(); r * c];
                    if *axis == 0 {
                        let s: T = if mean {
                            T::one() / t(r as f64)
                        } else {
                            T::one()
                        };
                        for ii in 0..r {
                            for j in 0..c {
                                d[ii * c + j] = gd[j] * s;
                            }
                        }
                    } else {
                        let s: T = if mean {
                            T::one() / t(c as f64)
                        } else {
                            T::one()
                        };
                        for ii in 0..r {
                            for j in 0..c {
                                d[ii * c + j] = gd[ii] * s;
                            }
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::BroadcastRows(x) => {
                    let n = self.value(*x).len();
                    let rows = gd.len() / n;
                    let mut d = vec![T::zero(); n];
                    for r in 0..rows {
                        for (a, &b) in d.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *a = *a + b;
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::BroadcastCols(x) => {
                    let r = self.value(*x).len();
                    let c = gd.len() / r;
                    let d = (0..r)
                        .map(|ii| {
                            gd[ii * c..(ii + 1) * c]
                                .iter()
                                .fold(T::zero(), |a, &b| a + b)
                        })
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                Op::ConcatLast(a, b) => {
                    let (r, ca) = self.value(*a).dims2()?;
                    let cb = self.value(*b).shape()[1];
                    let w = ca + cb;
                    if self.needs(*a) {
                        let mut d = Vec::with_capacity(r * ca);
                        for ii in 0..r {
                            d.extend_from_slice(&gd[ii * w..ii * w + ca]);
                        }
                        out.push((*a, self.like(*a, d)));
                    }
                    if self.needs(*b) {
                        let mut d = Vec::with_capacity(r * cb);
                        for ii in 0..r {
                            d.extend_from_slice(&gd[ii * w + ca..(ii + 1) * w]);
                        }
                        out.push((*b, self.like(*b, d)));
                    }
                }
                Op::GatherCols(x, idx) => {
                    let (r, c) = self.value(*x).dims2()?;
                    let k = idx.len();
                    let mut d = vec![T::zero(); r * c];
                    for ii in 0..r {
                        for (p, &j) in idx.iter().enumerate() {
                            d[ii * c + j] = d[ii * c + j] + gd[ii * k + p];
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::ScatterCols(x, idx) => {
                    let (r, k) = self.value(*x).dims2()?;
                    let w = gd.len() / r;
                    let mut d = Vec::with_capacity(r * k);
                    for ii in 0..r {
                        d.extend(idx.iter().map(|&j| gd[ii * w + j]));
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::GatherRows(table, idx) => {
                    let vt = self.value(*table);
                    let w = vt.row_len();
                    let mut d = vec![T::zero(); vt.len()];
                    for (p, &row) in idx.iter().enumerate() {
                        for j in 0..w {
                            d[row * w + j] = d[row * w + j] + gd[p * w + j];
                        }
                    }
                    out.push((*table, self.like(*table, d)));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (b, dw) = self.value(*x).dims2()?;
                    let gam = self.value(*gamma).data();
                    let mut dg = vec![T::zero(); dw];
                    let mut db = vec![T::zero(); dw];
                    for ii in 0..b {
                        for j in 0..dw {
                            let gv = gd[ii * dw + j];
                            dg[j] = dg[j] + gv * xhat[ii * dw + j];
                            db[j] = db[j] + gv;
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); b * dw];
                        if *train {
                            // dx = inv_std/B · (B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            let n: T = t(b as f64);
                            for j in 0..dw {
                                let s1 = db[j] * gam[j];
                                let s2 = dg[j] * gam[j];
                                for ii in 0..b {
                                    let dxh = gd[ii * dw + j] * gam[j];
                                    dx[ii * dw + j] =
                                        inv_std[j] / n * (n * dxh - s1 - xhat[ii * dw + j] * s2);
                                }
                            }
                        } else {
                            for ii in 0..b {
                                for j in 0..dw {
                                    dx[ii * dw + j] = gd[ii * dw + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        out.push((*x, self.like(*x, dx)));
                    }
                    out.push((*gamma, self.like(*gamma, dg)));
                    out.push((*beta, self.like(*beta, db)));
                }
                Op::NchwToNhwc(x) => {
                    let [b, c, h, w] = self.value(*x).shape()[..] else {
                        unreachable!("checked on forward")
                    };
                    let mut d = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    d[((bi * c + ci) * h + y) * w + xx] =
                                        gd[((bi * h + y) * w + xx) * c + ci];
                                }
                            }
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::Im2Col {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [b, h, w, c] = self.value(*x).shape()[..] else {
                        unreachable!("checked on forward")
                    };
                    let (kernel, stride, pad) = (*kernel, *stride, *pad);
                    let ho = (h + 2 * pad - kernel) / stride + 1;
                    let wo = (w + 2 * pad - kernel) / stride + 1;
                    let cols = kernel * kernel * c;
                    let mut d = vec![T::zero(); b * h * w * c];
                    for bi in 0..b {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let row = ((bi * ho + oy) * wo + ox) * cols;
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                                        let src = row + (ky * kernel + kx) * c;
                                        for ci in 0..c {
                                            d[dst + ci] = d[dst + ci] + gd[src + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::PoolRows(x) => {
                    let (r, c) = self.value(*x).dims2()?;
                    let groups = gd.len() / c;
                    let s = r / groups;
                    let inv = T::one() / t(s as f64);
                    let mut d = vec![T::zero(); r * c];
                    for gi in 0..groups {
                        for k in 0..s {
                            for j in 0..c {
                                d[(gi * s + k) * c + j] = gd[gi * c + j] * inv;
                            }
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                Op::Reshape(x) => out.push((*x, self.like(*x, gd.to_vec()))),
            }
        }
        for (v, gv) in out {
            self.accumulate(v, gv);
        }
        Ok(())
    }
}
