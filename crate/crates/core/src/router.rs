// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-category op routing with a zero-shot centroid classifier.
//!
//! An instruction is embedded, compared against one centroid per
//! [`EditCategory`] (the normalized mean of that category's anchor sentences)
//! and the argmax category is looked up in a [`RouteTable`]. Categories that
//! share a route are interchangeable: a misclassification between them leaves
//! the edit bit-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edit::{run_edit, EditOptions};
use crate::error::{Error, Result};
use crate::mmdit::{LatentImage, Model, SampleConfig};
use crate::numerics::{cosine, TensorF};
use crate::ops::OpSpec;
use crate::text::{l2_normalize, HashedBow, TextEmbedder};

/// Shipped routing table.
pub const DEFAULT_ROUTES: &str = include_str!("../data/routes.txt");
/// Shipped anchor sentences, five per category.
pub const DEFAULT_ANCHORS: &str = include_str!("../data/anchors.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EditCategory {
    Replace,
    Add,
    Remove,
    Attribute,
    Style,
    Background,
}

impl EditCategory {
    /// In ordinal order.
    pub const ALL: [EditCategory; 6] = [
        EditCategory::Replace,
        EditCategory::Add,
        EditCategory::Remove,
        EditCategory::Attribute,
        EditCategory::Style,
        EditCategory::Background,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditCategory::Replace => "replace",
            EditCategory::Add => "add",
            EditCategory::Remove => "remove",
            EditCategory::Attribute => "attribute",
            EditCategory::Style => "style",
            EditCategory::Background => "background",
        }
    }
}

impl fmt::Display for EditCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        EditCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::parse(s, "unknown edit category"))
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Total map from category to op.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTable {
    routes: [OpSpec; 6],
}

impl RouteTable {
    pub fn new(routes: [OpSpec; 6]) -> Result<Self> {
        for r in &routes {
            r.validate()?;
        }
        Ok(Self { routes })
    }

    /// Parses `category = <op>` lines; every category must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut found: [Option<OpSpec>; 6] = Default::default();
        for (lineno, line) in data_lines(text) {
            let (cat, op) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("line {lineno}: expected `category = op`")))?;
            let cat: EditCategory = cat.parse()?;
            let slot = &mut found[cat.ordinal()];
            if slot.is_some() {
                return Err(Error::parse(line, format!("line {lineno}: duplicate category `{cat}`")));
            }
            *slot = Some(op.trim().parse()?);
        }
        let mut routes = Vec::with_capacity(6);
        for (cat, op) in EditCategory::ALL.into_iter().zip(found) {
            routes.push(op.ok_or_else(|| Error::Router(format!("routing table has no entry for `{cat}`")))?);
        }
        Self::new(routes.try_into().expect("six entries"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::error::read_file(path)?)
    }

    pub fn route(&self, category: EditCategory) -> &OpSpec {
        &self.routes[category.ordinal()]
    }

    /// Groups of categories with identical routes, in ordinal order.
    pub fn shared_groups(&self) -> Vec<Vec<EditCategory>> {
        let mut groups: Vec<Vec<EditCategory>> = Vec::new();
        for cat in EditCategory::ALL {
            match groups.iter_mut().find(|g| self.route(g[0]) == self.route(cat)) {
                Some(g) => g.push(cat),
                None => groups.push(vec![cat]),
            }
        }
        groups
    }

    pub fn to_text(&self) -> String {
        EditCategory::ALL
            .iter()
            .map(|c| format!("{c} = {}\n", self.route(*c)))
            .collect()
    }
}

impl Default for RouteTable {
    fn default() -> Self {
        Self::parse(DEFAULT_ROUTES).expect("shipped routing table parses")
    }
}

/// Anchor sentences per category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    anchors: BTreeMap<EditCategory, Vec<String>>,
}

impl AnchorSet {
    pub fn new(anchors: BTreeMap<EditCategory, Vec<String>>) -> Result<Self> {
        for cat in EditCategory::ALL {
            if anchors.get(&cat).is_none_or(Vec::is_empty) {
                return Err(Error::Router(format!("category `{cat}` has no anchor sentences")));
            }
        }
        Ok(Self { anchors })
    }

    /// Parses `category | sentence` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut anchors: BTreeMap<EditCategory, Vec<String>> = BTreeMap::new();
        for (lineno, line) in data_lines(text) {
            let (cat, sentence) = line
                .split_once('|')
                .ok_or_else(|| Error::parse(line, format!("line {lineno}: expected `category | sentence`")))?;
            anchors.entry(cat.parse()?).or_default().push(sentence.trim().to_string());
        }
        Self::new(anchors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::error::read_file(path)?)
    }

    pub fn get(&self, category: EditCategory) -> &[String] {
        &self.anchors[&category]
    }

    /// Keeps the first `k` anchors of every category.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        Self::new(
            self.anchors
                .iter()
                .map(|(c, v)| (*c, v.iter().take(k).cloned().collect()))
                .collect(),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (EditCategory, &str)> {
        self.anchors.iter().flat_map(|(c, v)| v.iter().map(move |s| (*c, s.as_str())))
    }
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self::parse(DEFAULT_ANCHORS).expect("shipped anchors parse")
    }
}

/// Unit-length class prototypes plus the embedder that produced them.
pub struct CentroidClassifier {
    embedder: Box<dyn TextEmbedder>,
    centroids: [Vec<f32>; 6],
}

impl fmt::Debug for CentroidClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CentroidClassifier")
            .field("embedder", &self.embedder.id())
            .finish_non_exhaustive()
    }
}

/// Mean of each category's anchor embeddings, re-normalized.
///
/// Anchors are summed in sorted order so the result does not depend on the
/// order of the anchor list.
pub fn build_centroids(anchors: &AnchorSet, embedder: Box<dyn TextEmbedder>) -> Result<CentroidClassifier> {
    let dim = embedder.dim();
    let mut centroids: [Vec<f32>; 6] = Default::default();
    for cat in EditCategory::ALL {
        let mut sentences: Vec<&String> = anchors.get(cat).iter().collect();
        sentences.sort();
        let mut acc = vec![0.0f64; dim];
        for s in &sentences {
            for (a, v) in acc.iter_mut().zip(embedder.embed_text(s)) {
                *a += f64::from(v);
            }
        }
        let n = sentences.len() as f64;
        let mut mean: Vec<f32> = acc.iter().map(|a| (a / n) as f32).collect();
        let norm: f64 = acc.iter().map(|a| (a / n) * (a / n)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Router(format!("anchors of `{cat}` average to a zero vector")));
        }
        l2_normalize(&mut mean);
        centroids[cat.ordinal()] = mean;
    }
    Ok(CentroidClassifier { embedder, centroids })
}

impl CentroidClassifier {
    /// Shipped anchors with the hashed bag-of-words provider.
    pub fn default_toy() -> Result<Self> {
        build_centroids(&AnchorSet::default(), Box::new(HashedBow::default()))
    }

    pub fn embedder_id(&self) -> String {
        self.embedder.id()
    }

    pub fn centroid(&self, category: EditCategory) -> &[f32] {
        &self.centroids[category.ordinal()]
    }

    /// Cosine of the instruction against each centroid, ordinal order. Zero
    /// embeddings score 0 everywhere.
    pub fn scores(&self, instruction: &str) -> [f64; 6] {
        let e = self.embedder.embed_text(instruction);
        std::array::from_fn(|i| cosine(&e, &self.centroids[i]).unwrap_or(0.0))
    }

    /// Argmax cosine; ties go to the lowest ordinal.
    pub fn classify(&self, instruction: &str) -> EditCategory {
        let scores = self.scores(instruction);
        let mut best = 0;
        for i in 1..6 {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        EditCategory::ALL[best]
    }
}

pub fn route(category: EditCategory, table: &RouteTable) -> &OpSpec {
    table.route(category)
}

/// Output of one routed edit.
#[derive(Debug)]
pub struct RoutedEdit {
    pub category: EditCategory,
    pub op: OpSpec,
    pub latent: TensorF,
    pub firings: u64,
    pub applied: u64,
}

/// Classifies (unless `oracle` is given), looks up the op and samples with it
/// on a fresh hub.
#[allow(clippy::too_many_arguments)]
pub fn routed_edit(
    model: &Model,
    source: &LatentImage,
    instruction: &str,
    table: &RouteTable,
    classifier: &CentroidClassifier,
    oracle: Option<EditCategory>,
    sc: &SampleConfig,
) -> Result<RoutedEdit> {
    let category = oracle.unwrap_or_else(|| classifier.classify(instruction));
    let op = table.route(category).clone();
    let run = run_edit(model, source, instruction, &op, sc, EditOptions::default())?;
    Ok(RoutedEdit {
        category,
        firings: run.total_firings(),
        applied: run.total_applied(),
        op,
        latent: run.latent,
    })
}
