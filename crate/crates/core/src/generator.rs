//! Few-shot classification weight generator `w' = G(Z', W_base | φ)`.
//!
//! Two mechanisms are combined:
//!
//! * feature averaging, `w'_avg = mean_i z̄'_i`;
//! * attention over the base weights, where each normalized support feature
//!   is mapped to a query `φ_q z̄'_i`, compared with one learnable key per base
//!   category by `γ`-scaled cosine similarity, and the softmax of those
//!   similarities weights the normalized base weights `w̄_b`.
//!
//! The output is `φ_avg ⊙ w'_avg` in [`GeneratorMode::AvgOnly`] and
//! `φ_avg ⊙ w'_avg + φ_att ⊙ w'_att` in [`GeneratorMode::AvgPlusAttention`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, NORM_EPS};
use crate::tensor::{Param, Tensor};

pub const GAMMA_INIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    AvgOnly,
    AvgPlusAttention,
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorMode::AvgOnly => "avg_only",
            GeneratorMode::AvgPlusAttention => "avg_plus_attention",
        })
    }
}

impl FromStr for GeneratorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_only" | "avg" => Ok(GeneratorMode::AvgOnly),
            "avg_plus_attention" | "att" => Ok(GeneratorMode::AvgPlusAttention),
            other => Err(Error::Config(format!(
                "unknown generator `{other}` (avg_only|avg_plus_attention)"
            ))),
        }
    }
}

/// Support features `Z'` of one category, as a `[N' × d]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub features: Tensor,
    pub category: usize,
}

impl SupportSet {
    pub fn new(features: Tensor, category: usize) -> Result<Self> {
        let features = match features.shape().len() {
            1 => {
                let d = features.len();
                features.reshaped(vec![1, d])?
            }
            _ => features,
        };
        Ok(Self { features, category })
    }

    /// From a list of `[d]` feature vectors.
    pub fn from_features(features: &[Vec<f64>], category: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptySupport);
        }
        Self::new(Tensor::from_rows(features)?, category)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Learnable generator parameters φ.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub phi_avg: Param,
    pub phi_att: Param,
    /// `[d × d]`
    pub phi_q: Param,
    /// One key per base category, `[K_base × d]`.
    pub keys: Param,
    pub gamma: Param,
    pub mode: GeneratorMode,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub phi_avg: Var,
    pub phi_att: Var,
    pub phi_q: Var,
    pub keys: Var,
    pub gamma: Var,
}

/// Normalized base weights and keys that the attention reads from.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    pub weights: Var,
    pub keys: Var,
    /// Base-category index of every memory row.
    pub rows: Vec<usize>,
}

impl GeneratorParams {
    /// Starts as the plain averaging generator: `φ_avg = 1`, `φ_att = 0`,
    /// `φ_q = I`, keys at the normalized base weights, `γ = 10`.
    pub fn init(base_weights: &Tensor, mode: GeneratorMode) -> Self {
        let d = base_weights.cols();
        let keys = normalize_rows(base_weights);
        Self {
            phi_avg: Param::new("generator.phi_avg", Tensor::full(&[d], 1.0)),
            phi_att: Param::new("generator.phi_att", Tensor::zeros(&[d])),
            phi_q: Param::new("generator.phi_q", Tensor::identity(d)),
            keys: Param::new("generator.keys", keys),
            gamma: Param::new("generator.gamma", Tensor::scalar(GAMMA_INIT)),
            mode,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.phi_avg.value.len()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        let attention_trainable = trainable && self.mode == GeneratorMode::AvgPlusAttention;
        let mut bind = |p: &Param, t: bool| {
            if t {
                tape.param(p)
            } else {
                tape.constant(p.value.clone())
            }
        };
        GeneratorVars {
            phi_avg: bind(&self.phi_avg, trainable),
            phi_att: bind(&self.phi_att, attention_trainable),
            phi_q: bind(&self.phi_q, attention_trainable),
            keys: bind(&self.keys, attention_trainable),
            gamma: bind(&self.gamma, attention_trainable),
        }
    }

    pub fn pull_grads(&mut self, tape: &Tape, vars: &GeneratorVars) {
        tape.pull_grad(vars.phi_avg, &mut self.phi_avg);
        if self.mode == GeneratorMode::AvgPlusAttention {
            tape.pull_grad(vars.phi_att, &mut self.phi_att);
            tape.pull_grad(vars.phi_q, &mut self.phi_q);
            tape.pull_grad(vars.keys, &mut self.keys);
            tape.pull_grad(vars.gamma, &mut self.gamma);
        }
    }

    /// The parameters the current mode actually uses.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        match self.mode {
            GeneratorMode::AvgOnly => vec![&mut self.phi_avg],
            GeneratorMode::AvgPlusAttention => vec![
                &mut self.phi_avg,
                &mut self.phi_att,
                &mut self.phi_q,
                &mut self.keys,
                &mut self.gamma,
            ],
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.phi_avg,
            &self.phi_att,
            &self.phi_q,
            &self.keys,
            &self.gamma,
        ]
    }

    /// Value-level generation for one support set; `excluded` lists base
    /// rows hidden from the attention memory.
    pub fn generate_weight(
        &self,
        support: &SupportSet,
        base_weights: &Tensor,
        excluded: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let base = tape.constant(base_weights.clone());
        let z = tape.constant(support.features.clone());
        let w = match self.mode {
            GeneratorMode::AvgOnly => generate(&mut tape, &vars, self.mode, z, None)?,
            GeneratorMode::AvgPlusAttention => {
                let memory = build_memory(&mut tape, base, vars.keys, excluded)?;
                generate(&mut tape, &vars, self.mode, z, Some(&memory))?
            }
        };
        Ok(tape.value(w).clone())
    }
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Normalized memory over the base rows not in `excluded`.
pub fn build_memory(
    tape: &mut Tape,
    base_weights: Var,
    keys: Var,
    excluded: &[usize],
) -> Result<AttentionMemory> {
    let k_base = tape.value(base_weights).rows();
    if tape.value(keys).rows() != k_base {
        return Err(Error::Shape {
            op: "build_memory",
            lhs: tape.shape(base_weights).to_vec(),
            rhs: tape.shape(keys).to_vec(),
        });
    }
    let rows: Vec<usize> = (0..k_base).filter(|b| !excluded.contains(b)).collect();
    if rows.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let (w, k) = if rows.len() == k_base {
        (base_weights, keys)
    } else {
        (
            tape.select_rows(base_weights, &rows)?,
            tape.select_rows(keys, &rows)?,
        )
    };
    Ok(AttentionMemory {
        weights: tape.l2_normalize(w, NORM_EPS)?,
        keys: tape.l2_normalize(k, NORM_EPS)?,
        rows,
    })
}

fn check_support(tape: &Tape, support: Var) -> Result<()> {
    if tape.shape(support).len() != 2 {
        return Err(Error::InvalidTensor(format!(
            "support features must be [N' x d], got {:?}",
            tape.shape(support)
        )));
    }
    Ok(())
}

/// `w'_avg = (1/N') Σ z̄'_i` over the rows of `support`.
pub fn avg_weight(tape: &mut Tape, support: Var) -> Result<Var> {
    check_support(tape, support)?;
    let zn = tape.l2_normalize(support, NORM_EPS)?;
    tape.mean_rows(zn)
}

/// Attention coefficients `[N' × |memory|]` for every support row.
pub fn attention_coefficients(
    tape: &mut Tape,
    support: Var,
    memory: &AttentionMemory,
    phi_q: Var,
    gamma: Var,
) -> Result<Var> {
    check_support(tape, support)?;
    let zn = tape.l2_normalize(support, NORM_EPS)?;
    let q = tape.matmul_t(zn, phi_q)?;
    let qn = tape.l2_normalize(q, NORM_EPS)?;
    let cos = tape.matmul_t(qn, memory.keys)?;
    let logits = tape.mul_scalar(cos, gamma)?;
    tape.softmax(logits)
}

/// `w'_att = (1/N') Σ_i Σ_b Att(φ_q z̄'_i, k_b) · w̄_b`.
pub fn attention_weight(
    tape: &mut Tape,
    support: Var,
    memory: &AttentionMemory,
    phi_q: Var,
    gamma: Var,
) -> Result<Var> {
    let att = attention_coefficients(tape, support, memory, phi_q, gamma)?;
    let per_query = tape.matmul(att, memory.weights)?;
    tape.mean_rows(per_query)
}

/// One generated weight vector `[d]` for the support rows `support`.
pub fn generate(
    tape: &mut Tape,
    vars: &GeneratorVars,
    mode: GeneratorMode,
    support: Var,
    memory: Option<&AttentionMemory>,
) -> Result<Var> {
    let w_avg = avg_weight(tape, support)?;
    let avg_term = tape.hadamard(vars.phi_avg, w_avg)?;
    match mode {
        GeneratorMode::AvgOnly => Ok(avg_term),
        GeneratorMode::AvgPlusAttention => {
            let memory = memory.ok_or(Error::EmptyMemory)?;
            let w_att = attention_weight(tape, support, memory, vars.phi_q, vars.gamma)?;
            let att_term = tape.hadamard(vars.phi_att, w_att)?;
            tape.add(avg_term, att_term)
        }
    }
}
