//! AMR graphs and their PENMAN surface syntax.
//!
//! A graph is stored node-centric: every node owns its outgoing relations in
//! the order they were written, so the per-source edge order survives a
//! parse/serialize round trip.  [`AmrGraph::edges`] and
//! [`AmrGraph::attributes`] give the flat views.

mod lexer;
mod parser;

use std::collections::{HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

pub use lexer::{lex, PenmanToken, TokenKind};
pub use parser::{parse_penman, parse_records, MAX_DEPTH};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PenmanError {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced parentheses at offset {offset}")]
    UnbalancedParens { offset: usize },
    #[error("variable `{var}` is defined twice (second definition at offset {offset})")]
    DuplicateVariableDefinition { var: String, offset: usize },
    #[error("reference to undefined variable `{var}` at offset {offset}")]
    UndefinedVariableReference { var: String, offset: usize },
    #[error("cycle detected through node `{node}`")]
    CycleDetected { node: String },
    #[error("unexpected {found} at offset {offset}; expected {expected}")]
    UnexpectedToken {
        found: String,
        expected: &'static str,
        offset: usize,
    },
    #[error("unexpected end of input; expected {expected}")]
    UnexpectedEnd { expected: &'static str },
    #[error("unterminated string literal starting at offset {offset}")]
    UnterminatedString { offset: usize },
    #[error("invalid variable name `{var}` at offset {offset}")]
    InvalidVariable { var: String, offset: usize },
    #[error("nesting deeper than {limit} levels at offset {offset}")]
    DepthLimitExceeded { limit: usize, offset: usize },
    #[error("invalid graph: {}", format_violations(.0))]
    InvalidGraph(Vec<Violation>),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// The target of a relation: another node, or a literal value written
/// verbatim (quoted strings keep their quotes).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Node(String),
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    pub role: String,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub concept: String,
    pub relations: Vec<Relation>,
}

/// A rooted, directed, acyclic concept graph.
///
/// Equality is label- and order-preserving: same root, same node set with the
/// same concepts, and the same ordered relation list on every node.  The
/// order in which nodes were inserted is not significant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmrGraph {
    pub root: String,
    pub nodes: IndexMap<String, Node>,
}

/// Flat view of a node-to-node relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge<'a> {
    pub source: &'a str,
    pub role: &'a str,
    pub target: &'a str,
}

/// Flat view of a node-to-literal relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attribute<'a> {
    pub source: &'a str,
    pub role: &'a str,
    pub value: &'a str,
}

/// A broken [`AmrGraph`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Violation {
    MissingRoot(String),
    DanglingEdgeTarget {
        source: String,
        role: String,
        target: String,
    },
    UnreachableNode(String),
    CycleDetected { node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingRoot(root) => write!(f, "root `{root}` is not a node"),
            Violation::DanglingEdgeTarget {
                source,
                role,
                target,
            } => write!(f, "edge ({source}, {role}, {target}) points to a missing node"),
            Violation::UnreachableNode(node) => write!(f, "node `{node}` is unreachable from the root"),
            Violation::CycleDetected { node } => write!(f, "directed cycle through `{node}`"),
        }
    }
}

/// One step of a depth-first walk over a graph, in PENMAN order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkEvent<'a> {
    /// First visit of a node.
    Open(&'a str),
    /// A relation leaving `source`; its target follows as the next event.
    Role { source: &'a str, role: &'a str },
    Literal { source: &'a str, value: &'a str },
    /// A mention of a node that was already opened (or that does not exist).
    Reentry(&'a str),
    Close(&'a str),
}

impl AmrGraph {
    /// Single-node graph.
    pub fn new(root: impl Into<String>, concept: impl Into<String>) -> Self {
        let root = root.into();
        let mut nodes = IndexMap::new();
        nodes.insert(
            root.clone(),
            Node {
                concept: concept.into(),
                relations: Vec::new(),
            },
        );
        AmrGraph { root, nodes }
    }

    /// Adds (or relabels) a node.
    pub fn add_node(&mut self, id: impl Into<String>, concept: impl Into<String>) -> &mut Self {
        let id = id.into();
        let concept = concept.into();
        self.nodes
            .entry(id)
            .and_modify(|n| n.concept = concept.clone())
            .or_insert(Node {
                concept,
                relations: Vec::new(),
            });
        self
    }

    /// Appends an edge to `source`'s relation list.  `source` must already be
    /// a node; the target is not checked (see [`AmrGraph::validate`]).
    pub fn add_edge(&mut self, source: &str, role: impl Into<String>, target: impl Into<String>) -> &mut Self {
        self.push_relation(source, role.into(), Target::Node(target.into()))
    }

    pub fn add_attribute(&mut self, source: &str, role: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.push_relation(source, role.into(), Target::Literal(value.into()))
    }

    fn push_relation(&mut self, source: &str, role: String, target: Target) -> &mut Self {
        let node = self
            .nodes
            .get_mut(source)
            .unwrap_or_else(|| panic!("add_edge: unknown source node `{source}`"));
        node.relations.push(Relation { role, target });
        self
    }

    pub fn concept(&self, id: &str) -> Option<&str> {
        self.nodes.get(id).map(|n| n.concept.as_str())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Node-to-node relations in PENMAN (depth-first, written) order.
    pub fn edges(&self) -> Vec<Edge<'_>> {
        let mut out = Vec::new();
        let mut pending: Option<(&str, &str)> = None;
        self.walk(|event| match event {
            WalkEvent::Role { source, role } => pending = Some((source, role)),
            WalkEvent::Open(target) | WalkEvent::Reentry(target) => {
                if let Some((source, role)) = pending.take() {
                    out.push(Edge { source, role, target });
                }
            }
            WalkEvent::Literal { .. } => pending = None,
            WalkEvent::Close(_) => {}
        });
        out
    }

    /// Node-to-literal relations in PENMAN order.
    pub fn attributes(&self) -> Vec<Attribute<'_>> {
        let mut out = Vec::new();
        let mut pending_role = "";
        self.walk(|event| match event {
            WalkEvent::Role { role, .. } => pending_role = role,
            WalkEvent::Literal { source, value } => out.push(Attribute {
                source,
                role: pending_role,
                value,
            }),
            _ => {}
        });
        out
    }

    /// Number of node mentions that refer back to an already-opened node.
    pub fn reentrancy_count(&self) -> usize {
        let mut count = 0;
        self.walk(|event| {
            if let WalkEvent::Reentry(_) = event {
                count += 1;
            }
        });
        count
    }

    /// Iterative depth-first walk from the root.  Each node is opened at its
    /// first mention; later mentions (and mentions of missing nodes) are
    /// reported as [`WalkEvent::Reentry`], so the walk terminates on any
    /// input, cyclic or not.
    pub fn walk<'a>(&'a self, mut visit: impl FnMut(WalkEvent<'a>)) {
        let Some((root, root_node)) = self.nodes.get_key_value(self.root.as_str()) else {
            return;
        };
        let mut opened: HashSet<&str> = HashSet::new();
        let mut stack: Vec<(&str, &Node, usize)> = Vec::new();
        opened.insert(root);
        visit(WalkEvent::Open(root));
        stack.push((root, root_node, 0));
        while let Some(frame) = stack.last_mut() {
            let (source, node, next) = *frame;
            if next == node.relations.len() {
                visit(WalkEvent::Close(source));
                stack.pop();
                continue;
            }
            frame.2 += 1;
            let relation = &node.relations[next];
            visit(WalkEvent::Role {
                source,
                role: &relation.role,
            });
            match &relation.target {
                Target::Literal(value) => visit(WalkEvent::Literal { source, value }),
                Target::Node(target) => match self.nodes.get_key_value(target.as_str()) {
                    Some((id, child)) if !opened.contains(id.as_str()) => {
                        opened.insert(id);
                        visit(WalkEvent::Open(id));
                        stack.push((id, child, 0));
                    }
                    _ => visit(WalkEvent::Reentry(target)),
                },
            }
        }
    }

    /// Checks every graph invariant; an empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        if !self.nodes.contains_key(&self.root) {
            violations.push(Violation::MissingRoot(self.root.clone()));
        }
        for (source, node) in &self.nodes {
            for relation in &node.relations {
                if let Target::Node(target) = &relation.target {
                    if !self.nodes.contains_key(target) {
                        violations.push(Violation::DanglingEdgeTarget {
                            source: source.clone(),
                            role: relation.role.clone(),
                            target: target.clone(),
                        });
                    }
                }
            }
        }
        if violations.iter().all(|v| !matches!(v, Violation::MissingRoot(_))) {
            let reachable = self.reachable_from_root();
            for id in self.nodes.keys() {
                if !reachable.contains(id.as_str()) {
                    violations.push(Violation::UnreachableNode(id.clone()));
                }
            }
        }
        if let Some(node) = self.find_cycle() {
            violations.push(Violation::CycleDetected { node });
        }
        violations
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    pub(crate) fn ensure_valid(&self) -> Result<(), PenmanError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(PenmanError::InvalidGraph(violations))
        }
    }

    fn reachable_from_root(&self) -> HashSet<&str> {
        let mut seen = HashSet::new();
        self.walk(|event| {
            if let WalkEvent::Open(id) = event {
                seen.insert(id);
            }
        });
        seen
    }

    /// Three-colour DFS over all nodes; returns a node on the first cycle found.
    fn find_cycle(&self) -> Option<String> {
        #[derive(Clone, Copy, PartialEq)]
        enum Colour {
            White,
            Grey,
            Black,
        }
        let index: HashMap<&str, usize> = self
            .nodes
            .keys()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        let mut colour = vec![Colour::White; self.nodes.len()];
        for start in 0..self.nodes.len() {
            if colour[start] != Colour::White {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            colour[start] = Colour::Grey;
            while let Some(top) = stack.last_mut() {
                let at = top.0;
                let relations = &self.nodes[at].relations;
                let Some(rel) = relations.get(top.1) else {
                    colour[at] = Colour::Black;
                    stack.pop();
                    continue;
                };
                top.1 += 1;
                let Target::Node(target) = &rel.target else { continue };
                let Some(&t) = index.get(target.as_str()) else { continue };
                match colour[t] {
                    Colour::Grey => return Some(target.clone()),
                    Colour::White => {
                        colour[t] = Colour::Grey;
                        stack.push((t, 0));
                    }
                    Colour::Black => {}
                }
            }
        }
        None
    }

    /// Canonical single-line PENMAN text.  Each node is written in full at its
    /// first depth-first mention; later mentions print only the variable.
    pub fn to_penman(&self) -> Result<String, PenmanError> {
        self.ensure_valid()?;
        let mut out = String::new();
        self.walk(|event| match event {
            WalkEvent::Open(id) => {
                out.push('(');
                out.push_str(id);
                out.push_str(" / ");
                out.push_str(&self.nodes[id].concept);
            }
            WalkEvent::Role { role, .. } => {
                out.push(' ');
                out.push_str(role);
                out.push(' ');
            }
            WalkEvent::Literal { value, .. } => out.push_str(value),
            WalkEvent::Reentry(id) => out.push_str(id),
            WalkEvent::Close(_) => out.push(')'),
        });
        Ok(out)
    }
}

/// Free-function form of [`AmrGraph::to_penman`].
pub fn serialize_penman(graph: &AmrGraph) -> Result<String, PenmanError> {
    graph.to_penman()
}

/// Free-function form of [`AmrGraph::validate`].
pub fn validate(graph: &AmrGraph) -> Vec<Violation> {
    graph.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WANT: &str = "(w / want-01 :ARG0 (b / boy) :ARG1 (g / go-01 :ARG0 b))";

    #[test]
    fn single_node_graph() {
        let g = parse_penman("(b / boy)").unwrap();
        assert_eq!(g.root, "b");
        assert_eq!(g.concept("b"), Some("boy"));
        assert!(g.edges().is_empty());
        assert!(g.attributes().is_empty());
        assert_eq!(g.to_penman().unwrap(), "(b / boy)");
    }

    #[test]
    fn want_graph_has_reentrancy() {
        let g = parse_penman(WANT).unwrap();
        assert_eq!(g.node_count(), 3);
        let edges: Vec<_> = g.edges().iter().map(|e| (e.source, e.role, e.target)).collect();
        assert_eq!(
            edges,
            vec![("w", ":ARG0", "b"), ("w", ":ARG1", "g"), ("g", ":ARG0", "b")]
        );
        assert_eq!(g.reentrancy_count(), 1);
        assert_eq!(g.to_penman().unwrap(), WANT);
    }

    #[test]
    fn numeric_target_is_attribute() {
        let g = parse_penman("(d / date-entity :year 2020)").unwrap();
        let attrs: Vec<_> = g.attributes().iter().map(|a| (a.source, a.role, a.value)).collect();
        assert_eq!(attrs, vec![("d", ":year", "2020")]);
        assert_eq!(g.to_penman().unwrap(), "(d / date-entity :year 2020)");
    }

    #[test]
    fn validate_reports_dangling_target() {
        let mut g = AmrGraph::new("a", "thing");
        g.add_edge("a", ":ARG0", "x");
        assert_eq!(
            g.validate(),
            vec![Violation::DanglingEdgeTarget {
                source: "a".into(),
                role: ":ARG0".into(),
                target: "x".into()
            }]
        );
        assert!(matches!(g.to_penman(), Err(PenmanError::InvalidGraph(_))));
    }

    #[test]
    fn validate_reports_cycle() {
        let mut g = AmrGraph::new("a", "x");
        g.add_node("b", "y");
        g.add_edge("a", ":ARG0", "b").add_edge("b", ":ARG1", "a");
        assert_eq!(g.validate(), vec![Violation::CycleDetected { node: "a".into() }]);
    }

    #[test]
    fn validate_reports_unreachable_and_missing_root() {
        let mut g = AmrGraph::new("a", "x");
        g.add_node("z", "orphan");
        assert_eq!(g.validate(), vec![Violation::UnreachableNode("z".into())]);
        g.root = "q".into();
        assert_eq!(g.validate(), vec![Violation::MissingRoot("q".into())]);
    }

    #[test]
    fn equality_ignores_node_insertion_order() {
        let a = parse_penman("(a / x :r1 b :r2 (b / y))").unwrap();
        let b = parse_penman(&a.to_penman().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_penman().unwrap(), "(a / x :r1 (b / y) :r2 b)");
    }
}
