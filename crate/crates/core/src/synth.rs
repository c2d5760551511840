//! Seeded generator of solvable proposal-graph scenes.
//!
//! Each scene holds a handful of real objects (high detector score) among
//! low-score background proposals. The expression names a class and a
//! relation; the referent is the unique object of that class that is extreme
//! under the relation. Queries mix a clean class pattern, a projected box
//! code and Gaussian noise; class embeddings are the clean pattern.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWH;
use crate::graph::{ExpressionRecord, ProposalGraph, ProposalNode, TokenSequence};

pub const CLASS_NAMES: [&str; 20] = [
    "airplane",
    "airport",
    "baseball_field",
    "basketball_court",
    "bridge",
    "chimney",
    "dam",
    "service_area",
    "toll_station",
    "golf_field",
    "track_field",
    "harbor",
    "overpass",
    "ship",
    "stadium",
    "storage_tank",
    "tennis_court",
    "train_station",
    "vehicle",
    "windmill",
];

pub const ATTRIBUTE_NAMES: [&str; 8] = ["white", "gray", "red", "blue", "green", "black", "large", "small"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
    Largest,
    Smallest,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Leftmost,
        Relation::Rightmost,
        Relation::Topmost,
        Relation::Bottommost,
        Relation::Largest,
        Relation::Smallest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Leftmost => "leftmost",
            Relation::Rightmost => "rightmost",
            Relation::Topmost => "topmost",
            Relation::Bottommost => "bottommost",
            Relation::Largest => "largest",
            Relation::Smallest => "smallest",
        }
    }

    /// Score that the referent maximizes.
    pub fn key(self, b: &BoxCxCyWH) -> f64 {
        match self {
            Relation::Leftmost => -b.cx,
            Relation::Rightmost => b.cx,
            Relation::Topmost => -b.cy,
            Relation::Bottommost => b.cy,
            Relation::Largest => b.area(),
            Relation::Smallest => -b.area(),
        }
    }

    /// Index of the box maximizing [`Relation::key`]; ties go to the lower index.
    pub fn select(self, boxes: &[BoxCxCyWH]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in boxes.iter().enumerate() {
            let k = self.key(b);
            if best.is_none_or(|(_, bk)| k > bk) {
                best = Some((i, k));
            }
        }
        best.map(|(i, _)| i)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown relation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Proposals per scene, real objects plus background.
    pub num_proposals: usize,
    pub d_obj: usize,
    pub d_t: usize,
    pub noise_sigma: f64,
    pub min_box_size: f64,
    pub max_box_size: f64,
    /// Minimum gap between the referent's relation key and the runner-up's.
    pub relation_margin: f64,
    pub attribute_prob: f64,
    /// Distinct class appearances in the visual queries: class `c` looks like
    /// class `c % query_class_groups`. Class embeddings always keep the exact
    /// class, so separating confusable classes needs the class input.
    pub query_class_groups: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_attributes: 4,
            min_objects: 3,
            max_objects: 8,
            num_proposals: 32,
            d_obj: 64,
            d_t: 32,
            noise_sigma: 0.1,
            min_box_size: 0.06,
            max_box_size: 0.3,
            relation_margin: 0.03,
            attribute_prob: 0.5,
            query_class_groups: 3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return bad(format!("num_classes must be in 2..={}, got {}", CLASS_NAMES.len(), self.num_classes));
        }
        if self.num_attributes < 1 || self.num_attributes > ATTRIBUTE_NAMES.len() {
            return bad(format!("num_attributes must be in 1..={}", ATTRIBUTE_NAMES.len()));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return bad(format!(
                "objects_per_scene range {}..={} must satisfy 2 <= min <= max",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.num_proposals {
            return bad(format!(
                "max_objects {} exceeds num_proposals {}",
                self.max_objects, self.num_proposals
            ));
        }
        if self.d_obj == 0 || self.d_t == 0 {
            return bad("d_obj and d_t must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0 < self.min_box_size && self.min_box_size <= self.max_box_size && self.max_box_size < 1.0) {
            return bad("box sizes must satisfy 0 < min <= max < 1".into());
        }
        if !(0.0..0.5).contains(&self.relation_margin) {
            return bad("relation_margin must be in [0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.attribute_prob) {
            return bad("attribute_prob must be in [0, 1]".into());
        }
        if !(1..=self.num_classes).contains(&self.query_class_groups) {
            return bad(format!("query_class_groups must be in 1..={}", self.num_classes));
        }
        Ok(())
    }

    pub fn class_names(&self) -> &[&'static str] {
        &CLASS_NAMES[..self.num_classes]
    }

    pub fn attribute_names(&self) -> &[&'static str] {
        &ATTRIBUTE_NAMES[..self.num_attributes]
    }
}

/// Fixed random vector per vocabulary symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    symbols: Vec<String>,
    dim: usize,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(symbols: Vec<String>, dim: usize, rng: &mut impl Rng) -> Self {
        let vectors = (0..symbols.len() * dim)
            .map(|_| round_f32(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { symbols, dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn get(&self, symbol: &str) -> Option<&[f64]> {
        let i = self.symbols.iter().position(|s| s == symbol)?;
        Some(&self.vectors[i * self.dim..(i + 1) * self.dim])
    }
}

/// Which split a scene belongs to; each split draws from its own substreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

const WORLD_STREAM: u64 = u64::MAX;

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Scene generator; holds the seeded class patterns, box projection and
/// token table shared by every scene of a configuration.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    config: SceneConfig,
    /// `(num_classes + 1) × d_obj`; the last row is the background pattern.
    class_patterns: Vec<f64>,
    /// `d_obj × 4`.
    box_projection: Vec<f64>,
    table: EmbeddingTable,
}

impl SceneGenerator {
    pub fn new(config: SceneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(WORLD_STREAM);
        let d = config.d_obj;
        let class_patterns = (0..(config.num_classes + 1) * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let box_projection = (0..d * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let symbols = config
            .class_names()
            .iter()
            .chain(config.attribute_names())
            .map(|s| s.to_string())
            .chain(Relation::ALL.iter().map(|r| r.name().to_string()))
            .collect();
        let table = EmbeddingTable::new(symbols, config.d_t, &mut rng);
        Ok(Self {
            config,
            class_patterns,
            box_projection,
            table,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    /// Clean class pattern; `class == num_classes` is the background pattern.
    pub fn class_pattern(&self, class: usize) -> &[f64] {
        let d = self.config.d_obj;
        &self.class_patterns[class * d..(class + 1) * d]
    }

    /// Projected box code added to every query.
    pub fn box_code(&self, b: &BoxCxCyWH) -> Vec<f64> {
        let f = b.to_array().map(|v| 2.0 * v - 1.0);
        self.box_projection
            .chunks_exact(4)
            .map(|row| row.iter().zip(&f).map(|(p, x)| p * x).sum())
            .collect()
    }

    /// Noise-free query of an object of `class` at `b`.
    pub fn clean_query(&self, class: usize, b: &BoxCxCyWH) -> Vec<f64> {
        let appearance = if class == self.config.num_classes {
            class
        } else {
            class % self.config.query_class_groups
        };
        self.class_pattern(appearance)
            .iter()
            .zip(self.box_code(b))
            .map(|(c, x)| c + x)
            .collect()
    }

    /// `count` scenes of the training split.
    pub fn generate(&self, count: usize) -> Vec<ProposalGraph> {
        self.generate_split(Split::Train, count)
    }

    pub fn generate_split(&self, split: Split, count: usize) -> Vec<ProposalGraph> {
        (0..count).map(|i| self.scene(split, i)).collect()
    }

    /// Scene `index` of `split`, drawn from its own substream.
    pub fn scene(&self, split: Split, index: usize) -> ProposalGraph {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((split.stream_tag() << 40) | index as u64);

        let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let referred_class = rng.random_range(0..cfg.num_classes);
        let relation = Relation::ALL[rng.random_range(0..Relation::ALL.len())];
        let same = rng.random_range(2..=k.min(5));

        let mut classes = vec![referred_class; same];
        for _ in same..k {
            let mut c = rng.random_range(0..cfg.num_classes - 1);
            if c >= referred_class {
                c += 1;
            }
            classes.push(c);
        }

        let same_boxes = self.sample_discriminable(&mut rng, same, relation);
        let mut boxes = same_boxes;
        boxes.extend((same..k).map(|_| self.sample_box(&mut rng)));
        let attributes: Vec<usize> = (0..k).map(|_| rng.random_range(0..cfg.num_attributes)).collect();
        let referred = relation.select(&boxes[..same]).expect("at least two same-class objects");

        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        let mut nodes: Vec<ProposalNode> = Vec::with_capacity(cfg.num_proposals);
        for i in 0..cfg.num_proposals {
            let (class, bbox, det_score) = if i < k {
                (classes[i], boxes[i], rng.random_range(0.5..1.0))
            } else {
                (cfg.num_classes, self.sample_box(&mut rng), rng.random_range(0.0..0.5))
            };
            let query = self
                .clean_query(class, &bbox)
                .into_iter()
                .map(|v| round_f32(v + noise.sample(&mut rng)))
                .collect();
            let class_emb = self.class_pattern(class).iter().map(|&v| round_f32(v)).collect();
            nodes.push(ProposalNode {
                query,
                bbox,
                class_emb,
                det_score: round_f32(det_score),
            });
        }
        // real objects would otherwise always lead the node list
        let mut order: Vec<usize> = (0..cfg.num_proposals).collect();
        order.shuffle(&mut rng);
        let nodes = order.iter().map(|&i| nodes[i].clone()).collect();

        let class_name = cfg.class_names()[referred_class];
        let attribute = (rng.random::<f64>() < cfg.attribute_prob).then(|| cfg.attribute_names()[attributes[referred]]);
        let mut words: Vec<&str> = Vec::with_capacity(3);
        words.extend(attribute);
        words.push(class_name);
        words.push(relation.name());
        let tokens = words
            .iter()
            .flat_map(|w| self.table.get(w).expect("vocabulary symbol").iter().copied())
            .collect();
        let text = TokenSequence::new(words.len(), cfg.d_t, tokens).expect("finite embeddings");

        ProposalGraph {
            image_id: format!("{}-{index:06}", split.name()),
            nodes,
            text,
            gt_box: boxes[referred],
            expression: ExpressionRecord {
                class: class_name.to_string(),
                relation: relation.name().to_string(),
                attribute: attribute.map(str::to_string),
            },
        }
    }

    fn sample_box(&self, rng: &mut impl Rng) -> BoxCxCyWH {
        let cfg = &self.config;
        let w = rng.random_range(cfg.min_box_size..=cfg.max_box_size);
        let h = rng.random_range(cfg.min_box_size..=cfg.max_box_size);
        let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
        BoxCxCyWH::new(round_f32(cx), round_f32(cy), round_f32(w), round_f32(h))
    }

    /// `n` boxes whose best relation key beats the runner-up by the margin.
    /// Area margins are relative to the larger area.
    fn sample_discriminable(&self, rng: &mut impl Rng, n: usize, relation: Relation) -> Vec<BoxCxCyWH> {
        let margin = self.config.relation_margin;
        loop {
            let boxes: Vec<BoxCxCyWH> = (0..n).map(|_| self.sample_box(rng)).collect();
            let mut keys: Vec<f64> = boxes.iter().map(|b| relation.key(b)).collect();
            keys.sort_by(|a, b| b.total_cmp(a));
            let gap = match relation {
                Relation::Largest | Relation::Smallest => (keys[0] - keys[1]) / keys[0].abs().max(keys[1].abs()),
                _ => keys[0] - keys[1],
            };
            if gap >= margin {
                return boxes;
            }
        }
    }
}

/// Index of the node whose box equals the ground-truth box exactly.
pub fn oracle_referred_index(g: &ProposalGraph) -> Result<usize> {
    g.nodes
        .iter()
        .position(|n| n.bbox == g.gt_box)
        .ok_or_else(|| Error::Config(format!("graph `{}` has no node matching its ground-truth box", g.image_id)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::top_n;

    fn small() -> SceneConfig {
        SceneConfig {
            d_obj: 16,
            d_t: 8,
            num_proposals: 12,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_scenes() {
        let a = SceneGenerator::new(small()).unwrap().generate(20);
        let b = SceneGenerator::new(small()).unwrap().generate(20);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.max_objects = 1;
        c.min_objects = 1;
        assert!(SceneGenerator::new(c).is_err());
        let mut c = small();
        c.num_classes = 1;
        assert!(SceneGenerator::new(c).is_err());
        let mut c = small();
        c.max_objects = 40;
        assert!(SceneGenerator::new(c).is_err());
    }

    #[test]
    fn relation_select_prefers_extreme() {
        let boxes = [BoxCxCyWH::new(0.7, 0.5, 0.1, 0.1), BoxCxCyWH::new(0.2, 0.5, 0.1, 0.1)];
        assert_eq!(Relation::Leftmost.select(&boxes), Some(1));
        assert_eq!(Relation::Rightmost.select(&boxes), Some(0));
        for r in Relation::ALL {
            assert_eq!(r.name().parse::<Relation>().unwrap(), r);
        }
    }

    #[test]
    fn zero_noise_queries_are_deterministic_in_class_and_box() {
        let cfg = SceneConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let gen = SceneGenerator::new(cfg).unwrap();
        for g in gen.generate(10) {
            for n in &g.nodes {
                let class = (0..=gen.config().num_classes)
                    .find(|&c| gen.class_pattern(c).iter().zip(&n.class_emb).all(|(a, b)| (a - b).abs() < 1e-6))
                    .unwrap();
                let clean = gen.clean_query(class, &n.bbox);
                for (q, c) in n.query.iter().zip(clean) {
                    assert_eq!(*q, c as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn queries_share_appearance_within_a_class_group() {
        let gen = SceneGenerator::new(SceneConfig {
            query_class_groups: 2,
            ..small()
        })
        .unwrap();
        let b = BoxCxCyWH::new(0.4, 0.6, 0.2, 0.1);
        assert_eq!(gen.clean_query(0, &b), gen.clean_query(2, &b));
        assert_ne!(gen.clean_query(0, &b), gen.clean_query(1, &b));
        let bg = gen.config().num_classes;
        assert_ne!(gen.clean_query(bg, &b), gen.clean_query(bg % 2, &b));
        let bad = SceneConfig {
            query_class_groups: 0,
            ..small()
        };
        assert!(SceneGenerator::new(bad).is_err());
    }

    #[test]
    fn oracle_index_tracks_permutation_and_top_n() {
        let gen = SceneGenerator::new(small()).unwrap();
        for g in gen.generate(20) {
            let i = oracle_referred_index(&g).unwrap();
            assert_eq!(g.nodes[i].bbox, g.gt_box);
            let order: Vec<usize> = (0..g.len()).rev().collect();
            let p = g.permuted(&order);
            assert_eq!(oracle_referred_index(&p).unwrap(), g.len() - 1 - i);
            // real objects outscore background, so top max_objects keeps the referent
            let kept = top_n(&g, gen.config().max_objects);
            let j = oracle_referred_index(&kept).unwrap();
            let expect = (0..g.len())
                .filter(|&t| kept.nodes.iter().any(|n| n == &g.nodes[t]))
                .position(|t| t == i)
                .unwrap();
            assert_eq!(j, expect);
        }
    }

    #[test]
    fn oracle_index_errors_without_match() {
        let mut g = SceneGenerator::new(small()).unwrap().scene(Split::Test, 0);
        g.gt_box = BoxCxCyWH::new(2.0, 2.0, 0.0, 0.0);
        assert!(oracle_referred_index(&g).is_err());
    }
}
