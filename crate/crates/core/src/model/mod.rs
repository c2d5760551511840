//! The grounding network: branches and fusion, object reasoner, soft
//! selection over the original queries, and box refinement.

mod branch;
mod reasoner;

pub use branch::{branch_forward, cross_attend, fuse, phi_project, Branch};
pub use reasoner::{localize, probs, reason, soft_select, softmax};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWH;
use crate::graph::ProposalGraph;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_obj: usize,
    pub d_t: usize,
    pub branch_heads: usize,
    pub branch_layers: usize,
    pub reasoner_heads: usize,
    pub reasoner_layers: usize,
    pub ffn_hidden: usize,
    /// When off, the branches and fusion are bypassed and the raw queries
    /// feed the reasoner.
    pub multi_branch: bool,
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_obj: 64,
            d_t: 32,
            branch_heads: 4,
            branch_layers: 3,
            reasoner_heads: 4,
            reasoner_layers: 3,
            ffn_hidden: 256,
            multi_branch: true,
            pre_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_obj == 0 || self.d_t == 0 || self.ffn_hidden == 0 {
            return bad("d_obj, d_t and ffn_hidden must be positive".into());
        }
        if self.branch_heads == 0 || !self.d_obj.is_multiple_of(self.branch_heads) {
            return bad(format!("d_obj {} not divisible by branch heads {}", self.d_obj, self.branch_heads));
        }
        if self.reasoner_heads == 0 || !self.d_obj.is_multiple_of(self.reasoner_heads) {
            return bad(format!(
                "d_obj {} not divisible by reasoner heads {}",
                self.d_obj, self.reasoner_heads
            ));
        }
        if self.branch_layers == 0 || self.reasoner_layers == 0 {
            return bad("branch and reasoner layer counts must be >= 1".into());
        }
        Ok(())
    }

    /// Registers every parameter with seeded initialization.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if self.multi_branch {
            branch::register(&mut store, self, &mut rng)?;
        }
        reasoner::register(&mut store, self, &mut rng)?;
        Ok(store)
    }
}

/// Tensors of one proposal graph.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub queries: Tensor<T>,
    pub boxes: Tensor<T>,
    pub class_embs: Tensor<T>,
    pub tokens: Tensor<T>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_graph(g: &ProposalGraph) -> Result<Self> {
        let n = g.len();
        let d = g.d_obj();
        if n == 0 {
            return Err(Error::Dimension(format!("graph `{}` has no proposals", g.image_id)));
        }
        g.validate(d, g.text.d_t())?;
        let flat = |f: &dyn Fn(&crate::graph::ProposalNode) -> Vec<f64>| -> Vec<f64> { g.nodes.iter().flat_map(f).collect() };
        Ok(Self {
            queries: Tensor::from_f64(&[n, d], &flat(&|x| x.query.clone()))?,
            boxes: Tensor::from_f64(&[n, 4], &flat(&|x| x.bbox.to_array().to_vec()))?,
            class_embs: Tensor::from_f64(&[n, d], &flat(&|x| x.class_emb.clone()))?,
            tokens: Tensor::from_f64(&[g.text.n_k(), g.text.d_t()], g.text.data())?,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `N × D_obj` task-aware proposals (the raw queries without branches).
    pub fused: Var,
    /// `1 × N`.
    pub logits: Var,
    /// `1 × N`.
    pub probs: Var,
    /// `1 × D_obj`.
    pub o_ref: Var,
    /// `1 × 4` center-format box.
    pub refined_box: Var,
}

/// Numeric result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub o_ref: Vec<f64>,
    pub refined_box: BoxCxCyWH,
}

impl GroundingOutput {
    /// Index of the most probable proposal (lowest index on ties).
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// Branch outputs `(B̃, C̃, Õ)` and their fusion `O*`.
pub fn multi_branch_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    queries: Var,
    boxes: Var,
    class_embs: Var,
    tokens: Var,
) -> Result<([Var; 3], Var)> {
    let phi = phi_project(tape, store, boxes)?;
    let b = branch_forward(tape, store, cfg, Branch::Box, phi, tokens)?;
    let c = branch_forward(tape, store, cfg, Branch::Class, class_embs, tokens)?;
    let o = branch_forward(tape, store, cfg, Branch::Visual, queries, tokens)?;
    let fused = fuse(tape, store, b, c, o)?;
    Ok(([b, c, o], fused))
}

/// Full forward pass of one graph.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
) -> Result<ForwardVars> {
    let (n, d) = input.queries.dims2();
    if d != cfg.d_obj || input.tokens.dims2().1 != cfg.d_t {
        return Err(Error::Dimension(format!(
            "input has d_obj={d}, d_t={}; model expects d_obj={}, d_t={}",
            input.tokens.dims2().1,
            cfg.d_obj,
            cfg.d_t
        )));
    }
    let queries = tape.constant(input.queries.clone());
    let tokens = tape.constant(input.tokens.clone());
    let fused = if cfg.multi_branch {
        let boxes = tape.constant(input.boxes.clone());
        let class_embs = tape.constant(input.class_embs.clone());
        multi_branch_forward(tape, store, cfg, queries, boxes, class_embs, tokens)?.1
    } else {
        queries
    };
    let logits = reason(tape, store, cfg, fused, tokens)?;
    debug_assert_eq!(tape.value(logits).len(), n);
    let probs = probs(tape, logits)?;
    let o_ref = soft_select(tape, probs, queries)?;
    let refined_box = localize(tape, store, o_ref)?;
    Ok(ForwardVars {
        fused,
        logits,
        probs,
        o_ref,
        refined_box,
    })
}

/// Inference on one graph.
pub fn predict<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, graph: &ProposalGraph) -> Result<GroundingOutput> {
    let input = ModelInput::from_graph(graph)?;
    let mut tape = Tape::new();
    let v = forward(&mut tape, store, cfg, &input)?;
    let b = tape.value(v.refined_box).to_f64_vec();
    Ok(GroundingOutput {
        logits: tape.value(v.logits).to_f64_vec(),
        probs: tape.value(v.probs).to_f64_vec(),
        o_ref: tape.value(v.o_ref).to_f64_vec(),
        refined_box: BoxCxCyWH::new(b[0], b[1], b[2], b[3]),
    })
}
