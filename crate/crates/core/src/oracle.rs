//! Scalar reference implementations used as test oracles.
//!
//! Everything here is written with explicit loops over plain slices and shares
//! no code with the tape, the losses or the evaluation module.

/// Row-major `a[m×k] · b[k×n]` by the textbook triple loop.
pub fn matmul_triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Two-pass centered sums for a pair of equally long series:
/// `(Σ(a−ā)(b−b̄), Σ(a−ā)², Σ(b−b̄)²)`.
pub fn pearson_sums(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        sa += (x - ma) * (x - ma);
        sb += (y - mb) * (y - mb);
    }
    (cov, sa, sb)
}

/// Plain Pearson correlation; `None` for a constant series.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (c, sa, sb) = pearson_sums(a, b);
    if sa == 0.0 || sb == 0.0 {
        None
    } else {
        Some(c / (sa * sb).sqrt())
    }
}

fn column(x: &[f64], rows: usize, cols: usize, j: usize) -> Vec<f64> {
    (0..rows).map(|i| x[i * cols + j]).collect()
}

/// Row-wise cosine-of-centered-rows loss: `1 − (mean_r + 1)/2`, each norm
/// clamped below at `1e-6`.
pub fn pc_loss_scalar(pred: &[f64], gt: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        let p = &pred[i * cols..(i + 1) * cols];
        let g = &gt[i * cols..(i + 1) * cols];
        let (c, sp, sg) = pearson_sums(p, g);
        total += c / (sp.sqrt().max(1e-6) * sg.sqrt().max(1e-6));
    }
    let mean = total / rows as f64;
    1.0 - (mean + 1.0) / 2.0
}

/// Smallest row-norm product seen by [`pc_loss_scalar`].
pub fn pc_min_denominator(pred: &[f64], gt: &[f64], rows: usize, cols: usize) -> f64 {
    (0..rows)
        .map(|i| {
            let (_, sp, sg) = pearson_sums(
                &pred[i * cols..(i + 1) * cols],
                &gt[i * cols..(i + 1) * cols],
            );
            sp.sqrt() * sg.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Column-wise correlation loss: `t = 1 − (r + 1)/2` with
/// `r = cov / (sqrt(ss_g·ss_p) + 1e-8)`, optionally `t²/nc` (zero → 1),
/// averaged over columns.
pub fn mnnpc_loss_scalar(
    pred: &[f64],
    gt: &[f64],
    rows: usize,
    cols: usize,
    nc: Option<&[f64]>,
) -> f64 {
    let mut total = 0.0;
    for j in 0..cols {
        let p = column(pred, rows, cols, j);
        let g = column(gt, rows, cols, j);
        let (c, sp, sg) = pearson_sums(&p, &g);
        let r = c / ((sg * sp).sqrt() + 1e-8);
        let mut t = 1.0 - (r + 1.0) / 2.0;
        if let Some(nc) = nc {
            let d = if nc[j] == 0.0 { 1.0 } else { nc[j] };
            t = t * t / d;
        }
        total += t;
    }
    total / cols as f64
}

/// Smallest per-column `sqrt(ss_g·ss_p)` seen by [`mnnpc_loss_scalar`].
pub fn mnnpc_min_denominator(pred: &[f64], gt: &[f64], rows: usize, cols: usize) -> f64 {
    (0..cols)
        .map(|j| {
            let (_, sp, sg) =
                pearson_sums(&column(pred, rows, cols, j), &column(gt, rows, cols, j));
            (sp * sg).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Direct evaluation of `(1/v) Σ r_i² / nc_i` with one explicit loop per
/// vertex. Constant columns score `r = 0`; zero ceilings read as 1.
#[allow(clippy::needless_range_loop)]
pub fn metric_m_bruteforce(pred: &[f64], gt: &[f64], rows: usize, cols: usize, nc: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..cols {
        let p = column(pred, rows, cols, j);
        let g = column(gt, rows, cols, j);
        let (c, sp, sg) = pearson_sums(&p, &g);
        let n = rows as f64;
        let r = if sp / n < 1e-12 || sg / n < 1e-12 {
            0.0
        } else {
            c / (sp * sg).sqrt()
        };
        let d = if nc[j] == 0.0 { 1.0 } else { nc[j] };
        total += r * r / d;
    }
    total / cols as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(
            matmul_triple_loop(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1),
            vec![11.0]
        );
        let r = pearson(&[0.0, 1.0, 1.0], &[1.0, 3.0, 0.0]).unwrap();
        assert!((r - 1.0 / (2.0 * 7f64.sqrt())).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }
}
