//! Box, class and visual cross-attention branches and their fusion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Box,
    Class,
    Visual,
}

impl Branch {
    /// Fusion concatenation order.
    pub const ALL: [Branch; 3] = [Branch::Box, Branch::Class, Branch::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Box => "box",
            Branch::Class => "class",
            Branch::Visual => "visual",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown branch `{s}`")))
    }
}

fn layer_prefix(branch: Branch, layer: usize) -> String {
    format!("branch.{}.l{layer}", branch.name())
}

pub(crate) fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let (d, dt, dh) = (cfg.d_obj, cfg.d_t, cfg.d_obj / cfg.branch_heads);
    store.register_uniform("phi.w", 4, d, rng)?;
    store.register_zeros("phi.b", &[1, d])?;
    for branch in Branch::ALL {
        for l in 0..cfg.branch_layers {
            let p = layer_prefix(branch, l);
            if cfg.pre_norm {
                store.register_filled(format!("{p}.ln.gamma"), &[1, d], 1.0)?;
                store.register_zeros(format!("{p}.ln.beta"), &[1, d])?;
            }
            for h in 0..cfg.branch_heads {
                store.register_uniform(format!("{p}.h{h}.w_q"), d, dh, rng)?;
                store.register_uniform(format!("{p}.h{h}.w_k"), dt, dh, rng)?;
                store.register_uniform(format!("{p}.h{h}.w_v"), dt, dh, rng)?;
            }
            store.register_uniform(format!("{p}.w_o"), d, d, rng)?;
        }
    }
    store.register_uniform("fusion.w_psi", 3 * d, d, rng)?;
    Ok(())
}

/// Linear box embedding `B·W_φ + b_φ`, `N × 4 → N × D_obj`.
pub fn phi_project<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, boxes: Var) -> Result<Var> {
    let w = tape.param(store, "phi.w")?;
    let b = tape.param(store, "phi.b")?;
    let x = tape.matmul(boxes, w)?;
    tape.add_row(x, b)
}

/// Multi-head cross-attention from proposal rows `m` to tokens.
///
/// Head `i` computes `softmax((m W_Q,i)(T W_K,i)ᵀ / √D_obj)(T W_V,i)`; heads
/// are concatenated and projected by `W_O`. `prefix` names one branch layer.
pub fn cross_attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    m: Var,
    tokens: Var,
    heads: usize,
) -> Result<Var> {
    let d_obj = tape.value(m).dims2().1;
    let scale = T::from_f64(1.0 / (d_obj as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = tape.param(store, &format!("{prefix}.h{h}.w_q"))?;
        let wk = tape.param(store, &format!("{prefix}.h{h}.w_k"))?;
        let wv = tape.param(store, &format!("{prefix}.h{h}.w_v"))?;
        let q = tape.matmul(m, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.row_softmax(scores)?;
        outs.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let wo = tape.param(store, &format!("{prefix}.w_o"))?;
    tape.matmul(cat, wo)
}

/// `k` residual cross-attention layers `m ← m + A(m, T)` of one branch.
/// The box branch expects `φ(B)` as its input.
pub fn branch_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    branch: Branch,
    input: Var,
    tokens: Var,
) -> Result<Var> {
    let mut m = input;
    for l in 0..cfg.branch_layers {
        let p = layer_prefix(branch, l);
        let src = if cfg.pre_norm {
            let g = tape.param(store, &format!("{p}.ln.gamma"))?;
            let b = tape.param(store, &format!("{p}.ln.beta"))?;
            tape.layer_norm(m, g, b, T::from_f64(1e-5))?
        } else {
            m
        };
        let a = cross_attend(tape, store, &p, src, tokens, cfg.branch_heads)?;
        m = tape.add(m, a)?;
    }
    Ok(m)
}

/// `O* = [B̃ | C̃ | Õ] · W_ψ`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, boxes: Var, classes: Var, visual: Var) -> Result<Var> {
    let cat = tape.concat_cols(&[boxes, classes, visual])?;
    let w = tape.param(store, "fusion.w_psi")?;
    tape.matmul(cat, w)
}
