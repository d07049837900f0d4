use indexmap::IndexMap;

use super::lexer::{is_valid_variable, lex, PenmanToken, TokenKind};
use super::{AmrGraph, Node, PenmanError, Relation, Target, Violation};

/// Maximum nesting depth accepted by the parser.
pub const MAX_DEPTH: usize = 512;

/// Parses a single PENMAN expression into a validated graph.
pub fn parse_penman(text: &str) -> Result<AmrGraph, PenmanError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens: &tokens,
        at: 0,
        nodes: IndexMap::new(),
    };
    let root = parser.node(0)?;
    if let Some(extra) = parser.peek() {
        return Err(unexpected(extra, "end of input"));
    }
    let graph = AmrGraph {
        root,
        nodes: parser.nodes,
    };
    match graph.validate().into_iter().next() {
        None => Ok(graph),
        Some(Violation::CycleDetected { node }) => Err(PenmanError::CycleDetected { node }),
        Some(other) => Err(PenmanError::InvalidGraph(vec![other])),
    }
}

/// Parses a multi-graph file: records are separated by blank lines, or
/// start on a line opening with `(` once the previous record's parentheses
/// are balanced, so one-graph-per-line files work too.  Lines starting with
/// `#` are metadata comments.
pub fn parse_records(text: &str) -> Vec<Result<AmrGraph, PenmanError>> {
    let mut out = Vec::new();
    let mut record = String::new();
    let mut depth = 0i64;
    for line in text.lines().chain(std::iter::once("")) {
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        let starts_graph = trimmed.starts_with('(') && depth <= 0;
        if trimmed.is_empty() || starts_graph {
            if !record.trim().is_empty() {
                out.push(parse_penman(&record));
            }
            record.clear();
            depth = 0;
        }
        if !trimmed.is_empty() {
            record.push_str(line);
            record.push('\n');
            depth += paren_balance(line);
        }
    }
    out
}

/// Opening minus closing parentheses outside quoted strings.
fn paren_balance(line: &str) -> i64 {
    let (mut balance, mut quoted, mut escaped) = (0, false, false);
    for c in line.chars() {
        match c {
            _ if escaped => escaped = false,
            '\\' if quoted => escaped = true,
            '"' => quoted = !quoted,
            '(' if !quoted => balance += 1,
            ')' if !quoted => balance -= 1,
            _ => {}
        }
    }
    balance
}

struct Parser<'t> {
    tokens: &'t [PenmanToken],
    at: usize,
    nodes: IndexMap<String, Node>,
}

fn unexpected(token: &PenmanToken, expected: &'static str) -> PenmanError {
    PenmanError::UnexpectedToken {
        found: format!("`{}`", token.text),
        expected,
        offset: token.position,
    }
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&'t PenmanToken> {
        self.tokens.get(self.at)
    }

    fn expect(&mut self, kind: TokenKind, expected: &'static str) -> Result<&'t PenmanToken, PenmanError> {
        match self.tokens.get(self.at) {
            Some(token) if token.kind == kind => {
                self.at += 1;
                Ok(token)
            }
            Some(token) => Err(unexpected(token, expected)),
            None => Err(PenmanError::UnexpectedEnd { expected }),
        }
    }

    /// `( var / concept relation* )`; returns the variable.
    fn node(&mut self, depth: usize) -> Result<String, PenmanError> {
        let open = self.expect(TokenKind::OpenParen, "`(`")?;
        if depth >= MAX_DEPTH {
            return Err(PenmanError::DepthLimitExceeded {
                limit: MAX_DEPTH,
                offset: open.position,
            });
        }
        let var = self.expect(TokenKind::Variable, "a variable")?;
        if !is_valid_variable(&var.text) {
            return Err(PenmanError::InvalidVariable {
                var: var.text.clone(),
                offset: var.position,
            });
        }
        if self.nodes.contains_key(&var.text) {
            return Err(PenmanError::DuplicateVariableDefinition {
                var: var.text.clone(),
                offset: var.position,
            });
        }
        self.expect(TokenKind::Slash, "`/`")?;
        let concept = self.expect(TokenKind::Concept, "a concept")?;
        self.nodes.insert(
            var.text.clone(),
            Node {
                concept: concept.text.clone(),
                relations: Vec::new(),
            },
        );

        loop {
            let Some(token) = self.peek() else {
                return Err(PenmanError::UnexpectedEnd { expected: "a role or `)`" });
            };
            match token.kind {
                TokenKind::CloseParen => {
                    self.at += 1;
                    return Ok(var.text.clone());
                }
                TokenKind::Role => {
                    self.at += 1;
                    let target = self.target(depth)?;
                    self.nodes[var.text.as_str()].relations.push(Relation {
                        role: token.text.clone(),
                        target,
                    });
                }
                _ => return Err(unexpected(token, "a role or `)`")),
            }
        }
    }

    fn target(&mut self, depth: usize) -> Result<Target, PenmanError> {
        let Some(token) = self.peek() else {
            return Err(PenmanError::UnexpectedEnd {
                expected: "a relation target",
            });
        };
        match token.kind {
            TokenKind::OpenParen => Ok(Target::Node(self.node(depth + 1)?)),
            TokenKind::Variable => {
                self.at += 1;
                Ok(Target::Node(token.text.clone()))
            }
            TokenKind::Literal => {
                self.at += 1;
                Ok(Target::Literal(token.text.clone()))
            }
            _ => Err(unexpected(token, "a relation target")),
        }
    }
}
