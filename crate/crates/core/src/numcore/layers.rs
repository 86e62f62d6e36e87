//! Dense and recurrent layers stored in a [`ParamStore`] under a name prefix.
//!
//! A linear layer `p` owns `p.w` (`out×in`) and `p.b` (`1×out`). A GRU
//! `p` owns `p.w_ih` (`3H×in`), `p.w_hh` (`3H×H`), `p.b_ih` and `p.b_hh`
//! (`1×3H`), with gate blocks ordered (reset, update, candidate).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{init, ops, Matrix, ParamStore};
use crate::error::{Error, Result};

/// How fresh parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Xavier-normal weights, orthogonal recurrent blocks, zero biases.
    XavierOrthogonal,
    /// Orthogonal weights everywhere, zero biases.
    Orthogonal,
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    Uniform,
}

fn w(prefix: &str) -> String {
    format!("{prefix}.w")
}

fn b(prefix: &str) -> String {
    format!("{prefix}.b")
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    inputs: usize,
    outputs: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<()> {
    let (weight, bias) = match scheme {
        InitScheme::XavierOrthogonal => (
            init::xavier_normal(outputs, inputs, rng)?,
            Matrix::zeros(1, outputs),
        ),
        InitScheme::Orthogonal => (
            init::orthogonal(outputs, inputs, rng)?,
            Matrix::zeros(1, outputs),
        ),
        InitScheme::Uniform => {
            let bound = 1.0 / (inputs as f64).sqrt();
            (
                init::uniform(outputs, inputs, bound, rng)?,
                init::uniform(1, outputs, bound, rng)?,
            )
        }
    };
    store.insert(w(prefix), weight);
    store.insert(b(prefix), bias);
    Ok(())
}

/// `W·x + b` on the tape, with `x` row-batched.
pub fn linear_forward<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let wv = tape.param(store, &w(prefix))?;
    let bv = tape.param(store, &b(prefix))?;
    tape.linear(x, wv, Some(bv))
}

pub fn linear_plain(store: &ParamStore, prefix: &str, x: &Matrix) -> Result<Matrix> {
    ops::linear(x, store.get(&w(prefix))?, Some(store.get(&b(prefix))?))
}

/// Parameters of one gated recurrent unit.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_ih: Matrix,
    pub w_hh: Matrix,
    pub b_ih: Matrix,
    pub b_hh: Matrix,
}

impl GruParams {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        GruParams {
            w_ih: Matrix::zeros(3 * hidden, inputs),
            w_hh: Matrix::zeros(3 * hidden, hidden),
            b_ih: Matrix::zeros(1, 3 * hidden),
            b_hh: Matrix::zeros(1, 3 * hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        hidden: usize,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        match scheme {
            InitScheme::XavierOrthogonal | InitScheme::Orthogonal => {
                let w_ih = match scheme {
                    InitScheme::Orthogonal => stacked_orthogonal(hidden, inputs, rng)?,
                    _ => init::xavier_normal(3 * hidden, inputs, rng)?,
                };
                Ok(GruParams {
                    w_ih,
                    w_hh: stacked_orthogonal(hidden, hidden, rng)?,
                    b_ih: Matrix::zeros(1, 3 * hidden),
                    b_hh: Matrix::zeros(1, 3 * hidden),
                })
            }
            InitScheme::Uniform => {
                let bound = 1.0 / (hidden as f64).sqrt();
                Ok(GruParams {
                    w_ih: init::uniform(3 * hidden, inputs, bound, rng)?,
                    w_hh: init::uniform(3 * hidden, hidden, bound, rng)?,
                    b_ih: init::uniform(1, 3 * hidden, bound, rng)?,
                    b_hh: init::uniform(1, 3 * hidden, bound, rng)?,
                })
            }
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.w_ih"), self.w_ih);
        store.insert(format!("{prefix}.w_hh"), self.w_hh);
        store.insert(format!("{prefix}.b_ih"), self.b_ih);
        store.insert(format!("{prefix}.b_hh"), self.b_hh);
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(GruParams {
            w_ih: store.get(&format!("{prefix}.w_ih"))?.clone(),
            w_hh: store.get(&format!("{prefix}.w_hh"))?.clone(),
            b_ih: store.get(&format!("{prefix}.b_ih"))?.clone(),
            b_hh: store.get(&format!("{prefix}.b_hh"))?.clone(),
        })
    }
}

/// Three independent orthogonal `hidden×cols` blocks stacked vertically.
fn stacked_orthogonal<R: Rng + ?Sized>(hidden: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    let blocks = [
        init::orthogonal(hidden, cols, rng)?,
        init::orthogonal(hidden, cols, rng)?,
        init::orthogonal(hidden, cols, rng)?,
    ];
    Matrix::vstack(&[&blocks[0], &blocks[1], &blocks[2]])
}

/// One recurrent step on the tape; returns the new hidden state.
pub fn gru_step<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: Var,
    h: Var,
) -> Result<Var> {
    let w_ih = tape.param(store, &format!("{prefix}.w_ih"))?;
    let w_hh = tape.param(store, &format!("{prefix}.w_hh"))?;
    let b_ih = tape.param(store, &format!("{prefix}.b_ih"))?;
    let b_hh = tape.param(store, &format!("{prefix}.b_hh"))?;
    if tape.value(h).cols() != tape.value(w_hh).cols() {
        return Err(Error::shape(format!(
            "gru `{prefix}`: hidden width {} but w_hh is {}x{}",
            tape.value(h).cols(),
            tape.value(w_hh).rows(),
            tape.value(w_hh).cols()
        )));
    }
    let gi = tape.linear(x, w_ih, Some(b_ih))?;
    let gh = tape.linear(h, w_hh, Some(b_hh))?;
    tape.gru(gi, gh, h)
}

pub fn gru_plain(store: &ParamStore, prefix: &str, x: &Matrix, h: &Matrix) -> Result<Matrix> {
    let gi = ops::linear(
        x,
        store.get(&format!("{prefix}.w_ih"))?,
        Some(store.get(&format!("{prefix}.b_ih"))?),
    )?;
    let gh = ops::linear(
        h,
        store.get(&format!("{prefix}.w_hh"))?,
        Some(store.get(&format!("{prefix}.b_hh"))?),
    )?;
    Ok(ops::gru_cell(&gi, &gh, h)?.0)
}

/// Direct step for a standalone [`GruParams`].
pub fn gru_step_params(p: &GruParams, x: &Matrix, h: &Matrix) -> Result<Matrix> {
    if h.cols() != p.hidden() {
        return Err(Error::shape("gru: hidden width mismatch"));
    }
    let gi = ops::linear(x, &p.w_ih, Some(&p.b_ih))?;
    let gh = ops::linear(h, &p.w_hh, Some(&p.b_hh))?;
    Ok(ops::gru_cell(&gi, &gh, h)?.0)
}
