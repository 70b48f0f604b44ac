//! Evaluation metrics: linear centered-kernel-alignment similarity,
//! classification accuracy, convergence-speed extraction, and
//! communication-cost accounting.

use crate::error::{Error, Result};

/// Linear CKA similarity between two representation matrices `x` and `y`,
/// both row-major `[n, d]` with one row per example.
///
/// Computed feature-side: after centering each column,
/// `cka = ||Xᵀ·Y||_F² / (||Xᵀ·X||_F · ||Yᵀ·Y||_F)`, which equals the
/// Gram-matrix (HSIC) formulation but costs O(n·d²) instead of O(n²·d).
/// Result is 1.0 for representations equal up to orthogonal transform and
/// isotropic scaling, and 0.0 for uncorrelated features.
///
/// Errors with [`Error::UndefinedSimilarity`] when either input has no
/// variance (all rows identical), where the ratio is 0/0.
pub fn linear_cka(x: &[f64], y: &[f64], n: usize, dx: usize, dy: usize) -> Result<f64> {
    if n == 0 || dx == 0 || dy == 0 {
        return Err(Error::invalid("linear_cka", "empty input"));
    }
    if x.len() != n * dx || y.len() != n * dy {
        return Err(Error::invalid(
            "linear_cka",
            format!(
                "expected {}x{} and {}x{} inputs, got {} and {} elements",
                n, dx, n, dy, x.len(), y.len()
            ),
        ));
    }
    let xc = center_columns(x, n, dx);
    let yc = center_columns(y, n, dy);
    let s_xx = cross_frob_sq(&xc, &xc, n, dx, dx);
    let s_yy = cross_frob_sq(&yc, &yc, n, dy, dy);
    let s_xy = cross_frob_sq(&xc, &yc, n, dx, dy);
    if s_xx <= 0.0 || s_yy <= 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    // √((s_xy/s_xx)·(s_xy/s_yy)) instead of s_xy/√(s_xx·s_yy): keeps the
    // intermediate products in range and returns exactly 1.0 when x == y.
    Ok(((s_xy / s_xx) * (s_xy / s_yy)).sqrt())
}

/// Subtract the column mean from every column of a row-major `[n, d]` matrix.
fn center_columns(m: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for col in 0..d {
            mean[col] += m[row * d + col];
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut out = Vec::with_capacity(n * d);
    for row in 0..n {
        for col in 0..d {
            out.push(m[row * d + col] - mean[col]);
        }
    }
    out
}

/// `||Aᵀ·B||_F²` for row-major `a: [n, da]`, `b: [n, db]`.
fn cross_frob_sq(a: &[f64], b: &[f64], n: usize, da: usize, db: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..da {
        for j in 0..db {
            let mut dot = 0.0;
            for row in 0..n {
                dot += a[row * da + i] * b[row * db + j];
            }
            total += dot * dot;
        }
    }
    total
}

/// Argmax classification accuracy. `logits` is row-major `[labels.len(), c]`;
/// ties resolve to the lowest class index.
pub fn accuracy(logits: &[f64], labels: &[usize], c: usize) -> Result<f64> {
    if c == 0 {
        return Err(Error::invalid("accuracy", "zero classes"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy", "empty label set"));
    }
    if logits.len() != labels.len() * c {
        return Err(Error::invalid(
            "accuracy",
            format!("{} logits for {} labels of {} classes", logits.len(), labels.len(), c),
        ));
    }
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::IndexOutOfRange(format!(
                "accuracy: label {label} out of range for {c} classes"
            )));
        }
        let r = &logits[row * c..(row + 1) * c];
        let mut best = 0usize;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// First round (1-indexed) whose accuracy reaches `target`.
///
/// `accs` holds post-round evaluations only — `accs[0]` is the accuracy
/// after round 1. Callers logging a round-0 (initialization) evaluation must
/// pass the trace from round 1 on. Returns `None` when the target is never
/// reached — render as "R↑" in reports.
pub fn rounds_to_target(accs: &[f64], target: f64) -> Option<usize> {
    accs.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// Up + down communication for one synchronization of `trainable_scalars`
/// parameters with `participants` clients, in bytes (f64 payloads, broadcast
/// counted once per participant).
pub fn comm_cost_bytes(trainable_scalars: usize, participants: usize) -> u64 {
    (trainable_scalars as u64) * (participants as u64) * 8 * 2
}
