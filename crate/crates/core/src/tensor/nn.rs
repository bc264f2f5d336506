//! Composites over tape primitives: linear layers, two-layer MLPs,
//! layer norm wiring, and multi-head attention, together with the
//! parameter-id bookkeeping used by the model.

use super::params::{ParamId, ParamTable};
use super::tape::{Tape, TensorError, Var};
use super::Tensor;
use crate::scalar::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a per-parameter RNG so init is independent of insertion order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

pub fn insert_linear<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> LinearIds {
    let w_name = format!("{name}.w");
    let mut rng = param_rng(seed, &w_name);
    let w = table.insert(w_name, Tensor::glorot_uniform(fan_in, fan_out, &mut rng));
    let b = table.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    LinearIds { w, b }
}

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub fn insert_layer_norm<S: Scalar>(table: &mut ParamTable<S>, name: &str, dim: usize) -> LnIds {
    let gamma = table.insert(format!("{name}.ln.gamma"), Tensor::filled(&[1, dim], S::one()));
    let beta = table.insert(format!("{name}.ln.beta"), Tensor::zeros(&[1, dim]));
    LnIds { gamma, beta }
}

/// Two-layer MLP with a ReLU between.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
}

pub fn insert_mlp<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    name: &str,
    fan_in: usize,
    hidden: usize,
    fan_out: usize,
) -> MlpIds {
    MlpIds {
        l1: insert_linear(table, seed, &format!("{name}.l1"), fan_in, hidden),
        l2: insert_linear(table, seed, &format!("{name}.l2"), hidden, fan_out),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MhaIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

pub fn insert_mha<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    name: &str,
    dim: usize,
) -> MhaIds {
    let mut mat = |suffix: &str| {
        let full = format!("{name}.{suffix}");
        let mut rng = param_rng(seed, &full);
        table.insert(full, Tensor::glorot_uniform(dim, dim, &mut rng))
    };
    MhaIds {
        wq: mat("wq"),
        wk: mat("wk"),
        wv: mat("wv"),
        wo: mat("wo"),
    }
}

/// Parameters bound into a tape for one forward pass: `binds[id]` is the
/// leaf Var for parameter `id`.
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Bind every parameter as a differentiable leaf.
    pub fn bind_all<S: Scalar>(tape: &mut Tape<S>, table: &ParamTable<S>) -> Self {
        let vars = table
            .iter()
            .map(|(id, _, t)| tape.leaf(t.clone(), Some(id)))
            .collect();
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

pub fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    x: Var,
    ids: LinearIds,
) -> Result<Var, TensorError> {
    let y = tape.matmul(x, binds.var(ids.w))?;
    tape.add_row(y, binds.var(ids.b))
}

pub fn mlp2<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    x: Var,
    ids: MlpIds,
) -> Result<Var, TensorError> {
    let h = linear(tape, binds, x, ids.l1)?;
    let h = tape.relu(h);
    linear(tape, binds, h, ids.l2)
}

pub fn layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    x: Var,
    ids: LnIds,
) -> Result<Var, TensorError> {
    tape.layer_norm(x, binds.var(ids.gamma), binds.var(ids.beta), S::from_f64(1e-5))
}

/// Raw attention projection vars, for callers outside the model.
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head scaled dot-product attention. `queries` is (n, h), `keys`
/// and `values` are (m, h); each head attends with 1/sqrt(head_dim)
/// scaling, heads are concatenated and projected by `wo`. Returns the
/// (n, h) output and the per-head attention matrices.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Var,
    keys: Var,
    values: Var,
    params: &MhaVars,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), TensorError> {
    let h = tape.value(queries).cols();
    if n_heads == 0 || h % n_heads != 0 {
        return Err(TensorError::IndivisibleHeads { heads: n_heads, dim: h });
    }
    let d = h / n_heads;
    let q = tape.matmul(queries, params.wq)?;
    let k = tape.matmul(keys, params.wk)?;
    let v = tape.matmul(values, params.wv)?;
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(n_heads);
    let mut attn_mats = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qh = tape.slice_cols(q, head * d, d)?;
        let kh = tape.slice_cols(k, head * d, d)?;
        let vh = tape.slice_cols(v, head * d, d)?;
        let kht = tape.transpose(kh);
        let scores = tape.matmul(qh, kht)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        attn_mats.push(attn);
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(concat, params.wo)?;
    Ok((out, attn_mats))
}

pub fn mha_vars(binds: &Bindings, ids: MhaIds) -> MhaVars {
    MhaVars {
        wq: binds.var(ids.wq),
        wk: binds.var(ids.wk),
        wv: binds.var(ids.wv),
        wo: binds.var(ids.wo),
    }
}
