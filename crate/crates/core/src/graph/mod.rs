//! Per-image proposal graphs: the detector-side input of the grounding model.

mod io;

pub use io::{read_graphs, write_graphs, GraphHeader, GraphReader, FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWH;

/// One detector proposal: visual query, box, class embedding and score.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalNode {
    pub query: Vec<f64>,
    pub bbox: BoxCxCyWH,
    pub class_emb: Vec<f64>,
    pub det_score: f64,
}

/// Token embeddings of the referring expression, `n_k × d_t` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    n_k: usize,
    d_t: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(n_k: usize, d_t: usize, data: Vec<f64>) -> Result<Self> {
        if n_k == 0 {
            return Err(Error::Dimension("token sequence must hold at least one token".into()));
        }
        if data.len() != n_k * d_t {
            return Err(Error::Dimension(format!(
                "token data has {} values, expected {n_k}×{d_t}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("token value at flat index {i}")));
        }
        Ok(Self { n_k, d_t, data })
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_t..(i + 1) * self.d_t]
    }

    /// Same tokens reordered so that row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let data = order.iter().flat_map(|&i| self.token(i).iter().copied()).collect();
        Self {
            n_k: self.n_k,
            d_t: self.d_t,
            data,
        }
    }
}

/// Structured form of the expression, kept for auditing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub class: String,
    pub relation: String,
    pub attribute: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalGraph {
    pub image_id: String,
    pub nodes: Vec<ProposalNode>,
    pub text: TokenSequence,
    pub gt_box: BoxCxCyWH,
    pub expression: ExpressionRecord,
}

impl ProposalGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Query/class-embedding width shared by all nodes.
    pub fn d_obj(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.query.len())
    }

    pub fn boxes(&self) -> Vec<BoxCxCyWH> {
        self.nodes.iter().map(|n| n.bbox).collect()
    }

    /// Checks the structural invariants against the expected dimensions.
    pub fn validate(&self, d_obj: usize, d_t: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Dimension(format!("graph `{}` has no proposals", self.image_id)));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.query.len() != d_obj || n.class_emb.len() != d_obj {
                return Err(Error::Dimension(format!(
                    "graph `{}` node {i}: query/class_emb lengths {}/{} differ from d_obj {d_obj}",
                    self.image_id,
                    n.query.len(),
                    n.class_emb.len()
                )));
            }
        }
        if self.text.d_t() != d_t {
            return Err(Error::Dimension(format!(
                "graph `{}`: token width {} differs from d_t {d_t}",
                self.image_id,
                self.text.d_t()
            )));
        }
        Ok(())
    }

    /// Same graph with nodes reordered so that node `i` is old node `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            nodes: order.iter().map(|&i| self.nodes[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Indices of the `n` highest-scoring nodes, ascending.
///
/// Ties go to the lower original index.
pub fn top_n_indices(g: &ProposalGraph, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.nodes.len()).collect();
    order.sort_by(|&a, &b| {
        g.nodes[b]
            .det_score
            .total_cmp(&g.nodes[a].det_score)
            .then(a.cmp(&b))
    });
    order.truncate(n.max(1));
    order.sort_unstable();
    order
}

/// Keeps the `min(n, len)` highest-scoring nodes in their original order.
pub fn top_n(g: &ProposalGraph, n: usize) -> ProposalGraph {
    if n >= g.nodes.len() {
        return g.clone();
    }
    g.permuted(&top_n_indices(g, n))
}
