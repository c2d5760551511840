//! Decoder-style object reasoner, proposal probabilities, soft selection and
//! the box refinement head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

use super::ModelConfig;

const LN_EPS: f64 = 1e-5;

pub(crate) fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let (d, dt, f) = (cfg.d_obj, cfg.d_t, cfg.ffn_hidden);
    for l in 0..cfg.reasoner_layers {
        let p = format!("reasoner.l{l}");
        for (block, kv_dim) in [("self", d), ("cross", dt)] {
            store.register_uniform(format!("{p}.{block}.w_q"), d, d, rng)?;
            store.register_uniform(format!("{p}.{block}.w_k"), kv_dim, d, rng)?;
            store.register_uniform(format!("{p}.{block}.w_v"), kv_dim, d, rng)?;
            store.register_uniform(format!("{p}.{block}.w_o"), d, d, rng)?;
            // No key bias: it shifts every score of a query equally and has
            // identically zero gradient under softmax.
            for b in ["b_q", "b_v", "b_o"] {
                store.register_zeros(format!("{p}.{block}.{b}"), &[1, d])?;
            }
        }
        store.register_uniform(format!("{p}.ffn.w1"), d, f, rng)?;
        store.register_zeros(format!("{p}.ffn.b1"), &[1, f])?;
        store.register_uniform(format!("{p}.ffn.w2"), f, d, rng)?;
        store.register_zeros(format!("{p}.ffn.b2"), &[1, d])?;
        for ln in ["ln1", "ln2", "ln3"] {
            store.register_filled(format!("{p}.{ln}.gamma"), &[1, d], 1.0)?;
            // The last shift reaches the logits as one constant per row, which
            // softmax cancels, so it would never receive gradient.
            if !(ln == "ln3" && l + 1 == cfg.reasoner_layers) {
                store.register_zeros(format!("{p}.{ln}.beta"), &[1, d])?;
            }
        }
    }
    store.register_uniform("reasoner.logit.w", d, 1, rng)?;
    for l in 0..3 {
        let out = if l == 2 { 4 } else { d };
        store.register_uniform(format!("localizer.l{l}.w"), d, out, rng)?;
        store.register_zeros(format!("localizer.l{l}.b"), &[1, out])?;
    }
    Ok(())
}

fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = tape.param(store, w)?;
    let bv = tape.param(store, b)?;
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

/// Standard multi-head attention with fused projections split per head,
/// scaled by `1/√head_dim`.
fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    kv: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, store, x, &format!("{prefix}.w_q"), &format!("{prefix}.b_q"))?;
    let wk = tape.param(store, &format!("{prefix}.w_k"))?;
    let k = tape.matmul(kv, wk)?;
    let v = linear(tape, store, kv, &format!("{prefix}.w_v"), &format!("{prefix}.b_v"))?;
    let d = tape.value(q).dims2().1;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let a = tape.row_softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, store, cat, &format!("{prefix}.w_o"), &format!("{prefix}.b_o"))
}

fn add_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, y: Var, ln: &str) -> Result<Var> {
    let s = tape.add(x, y)?;
    let g = tape.param(store, &format!("{ln}.gamma"))?;
    let beta = format!("{ln}.beta");
    let b = match store.get(&beta) {
        Some(_) => tape.param(store, &beta)?,
        None => tape.constant(Tensor::zeros(&[1, tape.value(s).dims2().1])),
    };
    tape.layer_norm(s, g, b, T::from_f64(LN_EPS))
}

/// Decoder stack over proposal rows followed by the scalar logit head.
///
/// Each layer: self-attention over proposals, cross-attention to tokens,
/// position-wise feed-forward, each wrapped in residual + layer norm.
/// Returns the logits as a `1 × N` row.
pub fn reason<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    proposals: Var,
    tokens: Var,
) -> Result<Var> {
    let mut x = proposals;
    for l in 0..cfg.reasoner_layers {
        let p = format!("reasoner.l{l}");
        let sa = multi_head(tape, store, &format!("{p}.self"), x, x, cfg.reasoner_heads)?;
        x = add_norm(tape, store, x, sa, &format!("{p}.ln1"))?;
        let ca = multi_head(tape, store, &format!("{p}.cross"), x, tokens, cfg.reasoner_heads)?;
        x = add_norm(tape, store, x, ca, &format!("{p}.ln2"))?;
        let h = linear(tape, store, x, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"))?;
        let h = tape.relu(h)?;
        let h = linear(tape, store, h, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"))?;
        x = add_norm(tape, store, x, h, &format!("{p}.ln3"))?;
    }
    let w = tape.param(store, "reasoner.logit.w")?;
    let s = tape.matmul(x, w)?;
    let n = tape.value(s).len();
    tape.reshape(s, &[1, n])
}

/// Softmax over the proposal logits. Rejects non-finite logits.
pub fn probs<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    if let Some(i) = tape.value(logits).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    tape.row_softmax(logits)
}

/// Plain softmax of a logit vector, stabilized by max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    let mut p = logits.to_vec();
    crate::tensor::softmax_in_place(&mut p);
    Ok(p)
}

/// `Σᵢ pᵢ·Oᵢ` over the unmodified proposal queries; `p` is `1 × N`.
pub fn soft_select<T: Scalar>(tape: &mut Tape<T>, p: Var, queries: Var) -> Result<Var> {
    let n = tape.value(p).len();
    let rows = tape.value(queries).dims2().0;
    if n != rows {
        return Err(Error::Shape {
            op: "soft_select",
            left: tape.value(p).shape().to_vec(),
            right: tape.value(queries).shape().to_vec(),
        });
    }
    tape.matmul(p, queries)
}

/// Three-layer perceptron `D_obj → D_obj → D_obj → 4` with ReLU between
/// layers and a sigmoid on the output `(cx, cy, w, h)`.
pub fn localize<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, o_ref: Var) -> Result<Var> {
    let mut h = o_ref;
    for l in 0..3 {
        h = linear(tape, store, h, &format!("localizer.l{l}.w"), &format!("localizer.l{l}.b"))?;
        if l < 2 {
            h = tape.relu(h)?;
        }
    }
    tape.sigmoid(h)
}
