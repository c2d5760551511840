//! JSON-lines interchange format for proposal graphs.
//!
//! The first line is a header object, every following line one flat record.
//! All float arrays are stored at single precision, row-major.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWH;

use super::{ExpressionRecord, ProposalGraph, ProposalNode, TokenSequence};

/// `major.minor`; readers accept any minor of a known major.
pub const FORMAT_VERSION: &str = "1.0";
const FORMAT_NAME: &str = "mbores-proposal-graph";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub format: String,
    pub version: String,
    pub d_obj: usize,
    pub d_t: usize,
    pub precision: String,
}

impl GraphHeader {
    pub fn new(d_obj: usize, d_t: usize) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION.into(),
            d_obj,
            d_t,
            precision: "f32".into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    image_id: String,
    n: usize,
    queries: Vec<f32>,
    boxes: Vec<f32>,
    class_embs: Vec<f32>,
    det_scores: Vec<f32>,
    n_k: usize,
    tokens: Vec<f32>,
    gt_box: [f32; 4],
    expr_class: String,
    expr_relation: String,
    expr_attribute: Option<String>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_box(v: &[f32]) -> BoxCxCyWH {
    BoxCxCyWH::new(v[0].into(), v[1].into(), v[2].into(), v[3].into())
}

impl Record {
    fn from_graph(g: &ProposalGraph) -> Self {
        let mut queries = Vec::new();
        let mut boxes = Vec::new();
        let mut class_embs = Vec::new();
        for n in &g.nodes {
            queries.extend(narrow(&n.query));
            boxes.extend(narrow(&n.bbox.to_array()));
            class_embs.extend(narrow(&n.class_emb));
        }
        Record {
            image_id: g.image_id.clone(),
            n: g.nodes.len(),
            queries,
            boxes,
            class_embs,
            det_scores: g.nodes.iter().map(|n| n.det_score as f32).collect(),
            n_k: g.text.n_k(),
            tokens: narrow(g.text.data()),
            gt_box: g.gt_box.to_array().map(|v| v as f32),
            expr_class: g.expression.class.clone(),
            expr_relation: g.expression.relation.clone(),
            expr_attribute: g.expression.attribute.clone(),
        }
    }

    /// Converts to a graph, naming the first field whose length disagrees
    /// with the header.
    fn into_graph(self, h: &GraphHeader) -> std::result::Result<ProposalGraph, (String, String)> {
        let n = self.n;
        let check = |field: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err((field.to_string(), format!("has {got} values, expected {want}")))
            }
        };
        if n == 0 {
            return Err(("n".into(), "graph must have at least one proposal".into()));
        }
        check("queries", self.queries.len(), n * h.d_obj)?;
        check("boxes", self.boxes.len(), n * 4)?;
        check("class_embs", self.class_embs.len(), n * h.d_obj)?;
        check("det_scores", self.det_scores.len(), n)?;
        check("tokens", self.tokens.len(), self.n_k * h.d_t)?;
        let text = TokenSequence::new(self.n_k, h.d_t, widen(&self.tokens)).map_err(|e| ("tokens".to_string(), e.to_string()))?;
        let d = h.d_obj;
        let nodes = (0..n)
            .map(|i| ProposalNode {
                query: widen(&self.queries[i * d..(i + 1) * d]),
                bbox: to_box(&self.boxes[i * 4..(i + 1) * 4]),
                class_emb: widen(&self.class_embs[i * d..(i + 1) * d]),
                det_score: self.det_scores[i].into(),
            })
            .collect();
        Ok(ProposalGraph {
            image_id: self.image_id,
            nodes,
            text,
            gt_box: to_box(&self.gt_box),
            expression: ExpressionRecord {
                class: self.expr_class,
                relation: self.expr_relation,
                attribute: self.expr_attribute,
            },
        })
    }
}

/// Pulls the offending field name out of a serde message such as
/// "missing field `gt_box`".
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<record>").to_string()
}

/// Streaming reader over a graph file.
pub struct GraphReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    header: Option<GraphHeader>,
}

impl GraphReader {
    /// Header of the file; `None` for an empty file.
    pub fn header(&self) -> Option<&GraphHeader> {
        self.header.as_ref()
    }

    fn parse_err(&self, field: impl Into<String>, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            field: field.into(),
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Option<Result<String>> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some(Ok(l)),
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
        }
    }
}

impl Iterator for GraphReader {
    type Item = Result<ProposalGraph>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.next_line()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let Some(header) = self.header.clone() else {
            return Some(Err(self.parse_err("<header>", "record before header")));
        };
        let record: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let msg = e.to_string();
                return Some(Err(self.parse_err(field_from_message(&msg), msg)));
            }
        };
        Some(record.into_graph(&header).map_err(|(field, msg)| {
            Error::Dimension(format!("{}:{}: field `{field}` {msg}", self.path.display(), self.line_no))
        }))
    }
}

/// Opens a graph file and validates its header. An empty file yields an
/// empty stream.
pub fn read_graphs(path: &Path) -> Result<GraphReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = GraphReader {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
        header: None,
    };
    if let Some(line) = reader.next_line() {
        let line = line?;
        let header: GraphHeader = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            reader.parse_err(field_from_message(&msg), msg)
        })?;
        if header.format != FORMAT_NAME {
            return Err(reader.parse_err("format", format!("unknown format `{}`", header.format)));
        }
        let major = FORMAT_VERSION.split('.').next();
        if header.version.split('.').next() != major {
            return Err(reader.parse_err("version", format!("unsupported major version `{}`", header.version)));
        }
        if header.precision != "f32" {
            return Err(reader.parse_err("precision", format!("unsupported precision `{}`", header.precision)));
        }
        reader.header = Some(header);
    }
    Ok(reader)
}

/// Writes a header followed by one record per graph.
pub fn write_graphs<'a>(graphs: impl IntoIterator<Item = &'a ProposalGraph>, header: &GraphHeader, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut w, header).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for g in graphs {
        g.validate(header.d_obj, header.d_t)?;
        serde_json::to_writer(&mut w, &Record::from_graph(g)).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
