use std::collections::HashSet;

use super::PenmanError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    OpenParen,
    CloseParen,
    Variable,
    Slash,
    Role,
    Concept,
    Literal,
}

/// A classified PENMAN token.  `position` is a character offset into the
/// source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PenmanToken {
    pub kind: TokenKind,
    pub text: String,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Raw {
    Open,
    Close,
    Slash,
    Role,
    Quoted,
    Symbol,
}

/// Tokenizes PENMAN text and classifies every symbol by its grammatical
/// position.  A bare symbol after a role is a variable reference when some
/// node in the text binds it, otherwise a literal.
pub fn lex(text: &str) -> Result<Vec<PenmanToken>, PenmanError> {
    let raw = scan(text)?;
    if raw.is_empty() {
        return Err(PenmanError::EmptyInput);
    }
    check_balance(&raw)?;

    let defined: HashSet<&str> = raw
        .windows(2)
        .filter(|w| w[0].0 == Raw::Open && w[1].0 == Raw::Symbol)
        .map(|w| w[1].1.as_str())
        .collect();

    let mut tokens = Vec::with_capacity(raw.len());
    let mut prev: Option<Raw> = None;
    for (raw_kind, text, position) in &raw {
        let kind = match (raw_kind, prev) {
            (Raw::Open, _) => TokenKind::OpenParen,
            (Raw::Close, _) => TokenKind::CloseParen,
            (Raw::Slash, _) => TokenKind::Slash,
            (Raw::Role, _) => TokenKind::Role,
            (Raw::Symbol, Some(Raw::Open)) => TokenKind::Variable,
            (Raw::Symbol | Raw::Quoted, Some(Raw::Slash)) => TokenKind::Concept,
            (Raw::Symbol, Some(Raw::Role)) => {
                if defined.contains(text.as_str()) {
                    TokenKind::Variable
                } else if looks_like_variable(text) {
                    return Err(PenmanError::UndefinedVariableReference {
                        var: text.clone(),
                        offset: *position,
                    });
                } else {
                    TokenKind::Literal
                }
            }
            (Raw::Quoted, _) => TokenKind::Literal,
            (Raw::Symbol, _) => TokenKind::Literal,
        };
        tokens.push(PenmanToken {
            kind,
            text: text.clone(),
            position: *position,
        });
        prev = Some(*raw_kind);
    }
    Ok(tokens)
}

/// Conventional AMR variable shape: one lowercase letter plus optional
/// digits (`b`, `x12`).  Only used to tell a dangling reference apart from a
/// bare literal such as `-` or `imperative`.
fn looks_like_variable(symbol: &str) -> bool {
    let mut chars = symbol.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase()) && chars.all(|c| c.is_ascii_digit())
}

pub(crate) fn is_valid_variable(symbol: &str) -> bool {
    let mut chars = symbol.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '-')
}

fn scan(text: &str) -> Result<Vec<(Raw, String, usize)>, PenmanError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push((Raw::Open, "(".to_string(), i));
                i += 1;
            }
            ')' => {
                out.push((Raw::Close, ")".to_string(), i));
                i += 1;
            }
            '/' => {
                out.push((Raw::Slash, "/".to_string(), i));
                i += 1;
            }
            '"' => {
                let start = i;
                i += 1;
                let mut closed = false;
                while i < chars.len() {
                    match chars[i] {
                        '\\' => i += 2,
                        '"' => {
                            closed = true;
                            i += 1;
                            break;
                        }
                        _ => i += 1,
                    }
                }
                if !closed {
                    return Err(PenmanError::UnterminatedString { offset: start });
                }
                out.push((Raw::Quoted, chars[start..i].iter().collect(), start));
            }
            _ => {
                let start = i;
                let kind = if c == ':' { Raw::Role } else { Raw::Symbol };
                i += 1;
                while i < chars.len() && !is_delimiter(chars[i], kind) {
                    i += 1;
                }
                out.push((kind, chars[start..i].iter().collect(), start));
            }
        }
    }
    Ok(out)
}

fn is_delimiter(c: char, kind: Raw) -> bool {
    c.is_whitespace() || c == '(' || c == ')' || c == '"' || (kind == Raw::Symbol && c == '/')
}

fn check_balance(raw: &[(Raw, String, usize)]) -> Result<(), PenmanError> {
    let mut open = Vec::new();
    for (kind, _, position) in raw {
        match kind {
            Raw::Open => open.push(*position),
            Raw::Close => {
                if open.pop().is_none() {
                    return Err(PenmanError::UnbalancedParens { offset: *position });
                }
            }
            _ => {}
        }
    }
    match open.pop() {
        Some(offset) => Err(PenmanError::UnbalancedParens { offset }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_by_position() {
        let toks = lex("(w / want-01 :ARG0 (b / boy) :ARG1 b :polarity - :name \"Bo\")").unwrap();
        let kinds: Vec<_> = toks.iter().map(|t| t.kind).collect();
        use TokenKind::*;
        assert_eq!(
            kinds,
            vec![
                OpenParen, Variable, Slash, Concept, Role, OpenParen, Variable, Slash, Concept, CloseParen, Role,
                Variable, Role, Literal, Role, Literal, CloseParen
            ]
        );
        assert!(toks.windows(2).all(|w| w[0].position < w[1].position));
    }

    #[test]
    fn positions_are_character_offsets() {
        let toks = lex("(é / café)").unwrap();
        assert_eq!(toks[3].text, "café");
        assert_eq!(toks[3].position, 5);
        assert_eq!(toks[4].position, 9);
    }

    #[test]
    fn reports_unbalanced_offsets() {
        assert_eq!(lex("(a / b"), Err(PenmanError::UnbalancedParens { offset: 0 }));
        assert_eq!(lex("(a / b))"), Err(PenmanError::UnbalancedParens { offset: 7 }));
    }

    #[test]
    fn quoted_literal_may_contain_parens() {
        let toks = lex("(n / name :op1 \"a (b)\")").unwrap();
        assert_eq!(toks[5].text, "\"a (b)\"");
        assert_eq!(toks[5].kind, TokenKind::Literal);
    }

    #[test]
    fn unterminated_string() {
        assert_eq!(
            lex("(n / name :op1 \"abc)"),
            Err(PenmanError::UnterminatedString { offset: 15 })
        );
    }

    #[test]
    fn dangling_variable_reference() {
        assert_eq!(
            lex("(a / x :ARG0 q2)"),
            Err(PenmanError::UndefinedVariableReference {
                var: "q2".into(),
                offset: 13
            })
        );
    }

    #[test]
    fn empty_input() {
        assert_eq!(lex("   \n "), Err(PenmanError::EmptyInput));
    }
}
