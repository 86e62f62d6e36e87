use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::Matrix;
use crate::error::{Error, Result};

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "cannot initialize a {rows}x{cols} matrix"
        )));
    }
    Ok(())
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect::<Vec<f64>>();
    Matrix::new(rows, cols, data).expect("gaussian shape")
}

/// Entries drawn i.i.d. from `N(0, 2/(rows+cols))`.
pub fn xavier_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    check_dims(rows, cols)?;
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Ok(gaussian(rows, cols, std, rng))
}

/// Entries drawn i.i.d. from `U(-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Result<Matrix> {
    check_dims(rows, cols)?;
    if bound <= 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::new(rows, cols, data)
}

/// Orthogonal matrix obtained by orthonormalizing a Gaussian sample.
///
/// For `rows ≥ cols` the columns are orthonormal, otherwise the rows are.
/// Modified Gram–Schmidt is run twice per column; every column keeps the
/// sign it had in the sample, i.e. the triangular factor has a positive
/// diagonal.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    check_dims(rows, cols)?;
    if rows < cols {
        return Ok(orthogonal(cols, rows, rng)?.transpose());
    }
    let sample = gaussian(rows, cols, 1.0, rng);
    // Work on columns as contiguous vectors.
    let mut q: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| sample.get(r, c)).collect())
        .collect();
    for j in 0..cols {
        for _pass in 0..2 {
            for i in 0..j {
                let (done, rest) = q.split_at_mut(j);
                let proj: f64 = done[i].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (x, qi) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= proj * qi;
                }
            }
        }
        let norm = q[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::contract(
                "orthogonal: rank-deficient Gaussian sample",
            ));
        }
        q[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = Matrix::zeros(rows, cols);
    for (c, col) in q.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}
