//! Classification heads over the unified weight set `W* = W_base ∪ W_novel`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::init_weight;
use crate::tape::{Tape, Var, NORM_EPS};
use crate::tensor::{Param, Tensor};

pub const TAU_INIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dot,
    Cosine,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Dot => "dot",
            HeadKind::Cosine => "cosine",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(HeadKind::Dot),
            "cosine" => Ok(HeadKind::Cosine),
            other => Err(Error::Config(format!("unknown head `{other}` (dot|cosine)"))),
        }
    }
}

/// `s_k = zᵀ w_k`. `z` is `[d]` or `[B × d]`, `w` is `[K × d]`.
pub fn dot_scores(tape: &mut Tape, z: Var, w: Var) -> Result<Var> {
    with_rows(tape, z, |tape, z| tape.matmul_t(z, w))
}

/// `s_k = τ · z̄ᵀ w̄_k`.
pub fn cosine_scores(tape: &mut Tape, z: Var, w: Var, tau: Var) -> Result<Var> {
    with_rows(tape, z, |tape, z| {
        let zn = tape.l2_normalize(z, NORM_EPS)?;
        let wn = tape.l2_normalize(w, NORM_EPS)?;
        let cos = tape.matmul_t(zn, wn)?;
        tape.mul_scalar(cos, tau)
    })
}

pub fn scores(tape: &mut Tape, head: HeadKind, z: Var, w: Var, tau: Var) -> Result<Var> {
    match head {
        HeadKind::Dot => dot_scores(tape, z, w),
        HeadKind::Cosine => cosine_scores(tape, z, w, tau),
    }
}

/// Runs `f` on a `[B × d]` view of `z`, restoring a vector result for vector input.
fn with_rows(
    tape: &mut Tape,
    z: Var,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    if tape.shape(z).len() == 1 {
        let d = tape.shape(z)[0];
        let z2 = tape.reshape(z, &[1, d])?;
        let s = f(tape, z2)?;
        let k = tape.shape(s)[1];
        tape.reshape(s, &[k])
    } else {
        f(tape, z)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Classifier weights and temperature.
///
/// Base categories occupy rows `[0, K_base)` of `W*`, novel ones follow.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    pub base_weights: Param,
    pub novel_weights: Option<Tensor>,
    pub tau: Param,
    pub head: HeadKind,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub base: Var,
    pub tau: Var,
}

impl ClassifierState {
    pub fn init<R: Rng + ?Sized>(head: HeadKind, k_base: usize, d: usize, rng: &mut R) -> Self {
        Self {
            base_weights: Param::new("classifier.base_weights", init_weight(k_base, d, rng)),
            novel_weights: None,
            tau: Param::new("classifier.tau", Tensor::scalar(TAU_INIT)),
            head,
        }
    }

    pub fn k_base(&self) -> usize {
        self.base_weights.value.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.base_weights.value.cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        if trainable {
            ClassifierVars {
                base: tape.param(&self.base_weights),
                tau: tape.param(&self.tau),
            }
        } else {
            ClassifierVars {
                base: tape.constant(self.base_weights.value.clone()),
                tau: tape.constant(self.tau.value.clone()),
            }
        }
    }

    pub fn pull_grads(&mut self, tape: &Tape, vars: &ClassifierVars) {
        tape.pull_grad(vars.base, &mut self.base_weights);
        if self.head == HeadKind::Cosine {
            tape.pull_grad(vars.tau, &mut self.tau);
        }
    }

    /// Parameters updated by training; τ only matters for the cosine head.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        match self.head {
            HeadKind::Dot => vec![&mut self.base_weights],
            HeadKind::Cosine => vec![&mut self.base_weights, &mut self.tau],
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.base_weights, &self.tau]
    }

    /// `W*` as a single `[K* × d]` matrix.
    pub fn unified_weights(&self) -> Result<Tensor> {
        let base = &self.base_weights.value;
        match &self.novel_weights {
            None => Ok(base.clone()),
            Some(novel) => {
                if novel.cols() != base.cols() {
                    return Err(Error::Shape {
                        op: "unified_weights",
                        lhs: base.shape().to_vec(),
                        rhs: novel.shape().to_vec(),
                    });
                }
                let mut data = base.data().to_vec();
                data.extend_from_slice(novel.data());
                Tensor::matrix(base.rows() + novel.rows(), base.cols(), data)
            }
        }
    }

    /// Probabilities over all `K*` categories for a `[d]` or `[B × d]` input.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        classify_with(z, &self.unified_weights()?, self.head, self.tau.value.item())
    }
}

/// Softmax over the scores of `z` against the rows of `weights`.
pub fn classify_with(z: &Tensor, weights: &Tensor, head: HeadKind, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let wv = tape.constant(weights.clone());
    let tv = tape.constant(Tensor::scalar(tau));
    let s = scores(&mut tape, head, zv, wv, tv)?;
    let p = tape.softmax(s)?;
    Ok(tape.value(p).clone())
}

/// Like [`classify_with`] on a list of rows; an empty list is an error.
pub fn classify_rows(z: &Tensor, rows: &[Vec<f64>], head: HeadKind, tau: f64) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::InvalidTensor("empty weight set".into()));
    }
    classify_with(z, &Tensor::from_rows(rows)?, head, tau)
}
