//! Forward kernels shared by the recording tape and the inference paths.
//!
//! Both paths call exactly these functions, so a forward pass evaluated
//! with or without a tape is bit-identical.

use super::matrix::gemm;
use super::Matrix;
use crate::error::{Error, Result};

/// `x · wᵀ + b` for a row-batched input.
///
/// `x` is `batch×in`, `w` is `out×in` and `b` (when present) is `1×out`.
pub fn linear(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(Error::shape(format!(
            "linear: input width {} but weight is {}x{}",
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if let Some(b) = b {
        if b.rows() != 1 || b.cols() != w.rows() {
            return Err(Error::shape(format!(
                "linear: bias {}x{} for {} outputs",
                b.rows(),
                b.cols(),
                w.rows()
            )));
        }
    }
    let (batch, inp, out) = (x.rows(), x.cols(), w.rows());
    let mut y = Matrix::zeros(batch, out);
    if let Some(b) = b {
        for r in 0..batch {
            y.row_mut(r).copy_from_slice(b.data());
        }
    }
    gemm(
        batch,
        inp,
        out,
        1.0,
        (x.data(), inp, 1),
        (w.data(), 1, inp),
        if b.is_some() { 1.0 } else { 0.0 },
        (y.data_mut(), out, 1),
    );
    Ok(y)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated recurrent update from precomputed gate pre-activations.
///
/// `gi = x·W_ihᵀ + b_ih` and `gh = h·W_hhᵀ + b_hh`, both `batch×3H` with
/// gate blocks ordered (reset, update, candidate). Returns the new hidden
/// state and the saved activations `[r | z | n]` needed for the backward
/// pass.
///
/// ```text
/// r  = σ(gi_r + gh_r)
/// z  = σ(gi_z + gh_z)
/// n  = tanh(gi_n + r ⊙ gh_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell(gi: &Matrix, gh: &Matrix, h: &Matrix) -> Result<(Matrix, Matrix)> {
    let hidden = h.cols();
    if gi.shape() != gh.shape() || gi.cols() != 3 * hidden || gi.rows() != h.rows() {
        return Err(Error::shape(format!(
            "gru: gates {}x{} / {}x{} for hidden {}x{}",
            gi.rows(),
            gi.cols(),
            gh.rows(),
            gh.cols(),
            h.rows(),
            hidden
        )));
    }
    let batch = h.rows();
    let mut out = Matrix::zeros(batch, hidden);
    let mut saved = Matrix::zeros(batch, 3 * hidden);
    for row in 0..batch {
        let gi = gi.row(row);
        let gh = gh.row(row);
        let hp = h.row(row);
        let (sr, rest) = saved.row_mut(row).split_at_mut(hidden);
        let (sz, sn) = rest.split_at_mut(hidden);
        let o = out.row_mut(row);
        for j in 0..hidden {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[hidden + j] + gh[hidden + j]);
            let n = (gi[2 * hidden + j] + r * gh[2 * hidden + j]).tanh();
            o[j] = (1.0 - z) * n + z * hp[j];
            sr[j] = r;
            sz[j] = z;
            sn[j] = n;
        }
    }
    Ok((out, saved))
}
