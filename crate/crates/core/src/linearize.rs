//! Graph simplification, depth-first linearization, and the per-token graph
//! features (depth from the root, root-subtree index) fed to the encoder.

use std::collections::{HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::amr::{AmrGraph, Target, Violation, WalkEvent};
use crate::lang::{is_language_token, Language};

pub const MAX_DEPTH_BUCKET: u32 = 32;
pub const MAX_SUBGRAPH_BUCKET: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinearizeError {
    #[error("invalid graph: {0:?}")]
    InvalidGraph(Vec<Violation>),
    #[error("token {index} is aligned to node `{node}`, which has no features")]
    MissingAlignment { index: usize, node: String },
    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),
    #[error("sequence already starts with a language token")]
    AlreadyHasLanguageToken,
    #[error("feature line has {features} entries for {tokens} tokens")]
    FeatureCountMismatch { tokens: usize, features: usize },
    #[error("malformed feature `{0}`; expected `depth:subgraph`")]
    MalformedFeature(String),
}

/// Clamp limits for the depth and subgraph embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureBuckets {
    pub max_depth: u32,
    pub max_subgraph: u32,
}

impl Default for FeatureBuckets {
    fn default() -> Self {
        FeatureBuckets {
            max_depth: MAX_DEPTH_BUCKET,
            max_subgraph: MAX_SUBGRAPH_BUCKET,
        }
    }
}

/// A linearized graph.  `alignment[i]` is the node that governs token `i`;
/// `None` marks the reserved language-token slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedAmr {
    pub tokens: Vec<String>,
    pub alignment: Vec<Option<String>>,
    pub depth_ids: Vec<u32>,
    pub subgraph_ids: Vec<u32>,
    pub language: Option<Language>,
}

/// Tokens with their feature ids but without node alignment, as read back
/// from the linearized file format.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeaturedTokens {
    pub tokens: Vec<String>,
    pub depth_ids: Vec<u32>,
    pub subgraph_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeFeatures {
    pub depth: HashMap<String, u32>,
    pub subgraph: HashMap<String, u32>,
}

/// Drops nothing but validates: variables and `/` vanish at linearization
/// time, and entities and dates are kept as written.
pub fn simplify(graph: &AmrGraph) -> Result<AmrGraph, LinearizeError> {
    check(graph)?;
    Ok(graph.clone())
}

fn check(graph: &AmrGraph) -> Result<(), LinearizeError> {
    let violations = graph.validate();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(LinearizeError::InvalidGraph(violations))
    }
}

/// Surface form of a concept or literal: surrounding quotes are removed and
/// inner whitespace becomes `_`, unless that would yield something that reads
/// as structure.
pub fn surface_token(text: &str) -> String {
    let unquoted = text
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .map(|t| t.split_whitespace().collect::<Vec<_>>().join("_"));
    match unquoted {
        Some(t) if !(t.is_empty() || t == "(" || t == ")" || t.starts_with(':') || is_language_token(&t)) => t,
        _ => text.split_whitespace().collect::<Vec<_>>().join("_"),
    }
}

/// Depth-first, PENMAN-order linearization without variables.  Re-entrant
/// mentions repeat the target's concept without parentheses.
pub fn linearize(graph: &AmrGraph) -> Result<LinearizedAmr, LinearizeError> {
    check(graph)?;
    let mut tokens = Vec::new();
    let mut alignment = Vec::new();
    let mut push = |token: String, node: &str| {
        tokens.push(token);
        alignment.push(Some(node.to_string()));
    };
    graph.walk(|event| match event {
        WalkEvent::Open(id) => {
            push("(".to_string(), id);
            push(surface_token(&graph.nodes[id].concept), id);
        }
        WalkEvent::Role { source, role } => push(role.to_string(), source),
        WalkEvent::Literal { source, value } => push(surface_token(value), source),
        WalkEvent::Reentry(id) => push(surface_token(&graph.nodes[id].concept), id),
        WalkEvent::Close(id) => push(")".to_string(), id),
    });
    let n = tokens.len();
    Ok(LinearizedAmr {
        tokens,
        alignment,
        depth_ids: vec![0; n],
        subgraph_ids: vec![0; n],
        language: None,
    })
}

/// Depth is the shortest directed distance from the root.  The subgraph id is
/// 0 for the root and `1 + k` for nodes first reached from the root's `k`-th
/// child edge.
pub fn compute_node_features(graph: &AmrGraph) -> Result<NodeFeatures, LinearizeError> {
    check(graph)?;
    let children = |id: &str| -> Vec<&str> {
        graph.nodes[id]
            .relations
            .iter()
            .filter_map(|r| match &r.target {
                Target::Node(t) => Some(t.as_str()),
                Target::Literal(_) => None,
            })
            .collect()
    };

    let mut depth = HashMap::new();
    let mut queue = VecDeque::new();
    depth.insert(graph.root.clone(), 0u32);
    queue.push_back(graph.root.as_str());
    while let Some(id) = queue.pop_front() {
        let d = depth[id];
        for child in children(id) {
            if !depth.contains_key(child) {
                depth.insert(child.to_string(), d + 1);
                queue.push_back(child);
            }
        }
    }

    let mut subgraph = HashMap::new();
    subgraph.insert(graph.root.clone(), 0u32);
    for (k, top) in children(&graph.root).into_iter().enumerate() {
        let id = k as u32 + 1;
        let mut stack = vec![top];
        let mut seen = HashSet::new();
        while let Some(at) = stack.pop() {
            if !seen.insert(at) {
                continue;
            }
            subgraph.entry(at.to_string()).or_insert(id);
            stack.extend(children(at));
        }
    }
    Ok(NodeFeatures { depth, subgraph })
}

/// Fills `depth_ids`/`subgraph_ids` from the aligned nodes, clamping to the
/// bucket limits.  The language slot (alignment `None`) gets zeros.
pub fn attach_features(
    mut lin: LinearizedAmr,
    features: &NodeFeatures,
    buckets: FeatureBuckets,
) -> Result<LinearizedAmr, LinearizeError> {
    for (i, node) in lin.alignment.iter().enumerate() {
        let (d, s) = match node {
            None => (0, 0),
            Some(node) => {
                let missing = || LinearizeError::MissingAlignment {
                    index: i,
                    node: node.clone(),
                };
                let d = *features.depth.get(node).ok_or_else(missing)?;
                let s = *features.subgraph.get(node).ok_or_else(missing)?;
                (d, s)
            }
        };
        lin.depth_ids[i] = d.min(buckets.max_depth);
        lin.subgraph_ids[i] = s.min(buckets.max_subgraph);
    }
    Ok(lin)
}

pub fn prepend_language_token(mut lin: LinearizedAmr, code: &str) -> Result<LinearizedAmr, LinearizeError> {
    let lang = Language::new(code).map_err(|e| LinearizeError::UnknownLanguage(e.0))?;
    if lin.language.is_some() || lin.tokens.first().is_some_and(|t| is_language_token(t)) {
        return Err(LinearizeError::AlreadyHasLanguageToken);
    }
    lin.tokens.insert(0, lang.token());
    lin.alignment.insert(0, None);
    lin.depth_ids.insert(0, 0);
    lin.subgraph_ids.insert(0, 0);
    lin.language = Some(lang);
    Ok(lin)
}

/// simplify → linearize → features, the full encoder-side preprocessing.
pub fn linearize_with_features(graph: &AmrGraph, buckets: FeatureBuckets) -> Result<LinearizedAmr, LinearizeError> {
    let graph = simplify(graph)?;
    let lin = linearize(&graph)?;
    let features = compute_node_features(&graph)?;
    attach_features(lin, &features, buckets)
}

impl LinearizedAmr {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn featured(&self) -> FeaturedTokens {
        FeaturedTokens {
            tokens: self.tokens.clone(),
            depth_ids: self.depth_ids.clone(),
            subgraph_ids: self.subgraph_ids.clone(),
        }
    }

    pub fn token_line(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn feature_line(&self) -> String {
        feature_line(&self.depth_ids, &self.subgraph_ids)
    }
}

pub fn feature_line(depth_ids: &[u32], subgraph_ids: &[u32]) -> String {
    depth_ids
        .iter()
        .zip(subgraph_ids)
        .map(|(d, s)| format!("{d}:{s}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl FeaturedTokens {
    /// Reads one line of the token file and its companion feature line.
    pub fn from_lines(token_line: &str, feature_line: &str) -> Result<Self, LinearizeError> {
        let tokens: Vec<String> = token_line.split_whitespace().map(str::to_string).collect();
        let mut depth_ids = Vec::with_capacity(tokens.len());
        let mut subgraph_ids = Vec::with_capacity(tokens.len());
        for pair in feature_line.split_whitespace() {
            let parsed = pair
                .split_once(':')
                .and_then(|(d, s)| Some((d.parse::<u32>().ok()?, s.parse::<u32>().ok()?)));
            let (d, s) = parsed.ok_or_else(|| LinearizeError::MalformedFeature(pair.to_string()))?;
            depth_ids.push(d);
            subgraph_ids.push(s);
        }
        if depth_ids.len() != tokens.len() {
            return Err(LinearizeError::FeatureCountMismatch {
                tokens: tokens.len(),
                features: depth_ids.len(),
            });
        }
        Ok(FeaturedTokens {
            tokens,
            depth_ids,
            subgraph_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Adds a leading language token with zero features.
    pub fn with_language(mut self, lang: Language) -> Result<Self, LinearizeError> {
        if self.tokens.first().is_some_and(|t| is_language_token(t)) {
            return Err(LinearizeError::AlreadyHasLanguageToken);
        }
        self.tokens.insert(0, lang.token());
        self.depth_ids.insert(0, 0);
        self.subgraph_ids.insert(0, 0);
        Ok(self)
    }
}
