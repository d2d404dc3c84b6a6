//! A restricted YAML-like document reader.
//!
//! Supported: block mappings, block sequences (`- item`, including
//! `- key: value` items), flow sequences and flow mappings of scalars,
//! plain and quoted scalars, and `#` comments. Every node keeps the
//! line/column it started at so later stages can point at the source.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{pos}: {msg}")]
pub struct DocError {
    pub pos: Pos,
    pub msg: String,
}

impl DocError {
    pub fn new(pos: Pos, msg: impl Into<String>) -> Self {
        DocError {
            pos,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Null(Pos),
    Scalar(String, Pos),
    Seq(Vec<Node>, Pos),
    Map(Vec<(String, Pos, Node)>, Pos),
}

impl Node {
    pub fn pos(&self) -> Pos {
        match self {
            Node::Null(p) | Node::Scalar(_, p) | Node::Seq(_, p) | Node::Map(_, p) => *p,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Node::Scalar(s, _) => Some(s),
            _ => None,
        }
    }

    pub fn get(&self, key: &str) -> Option<&Node> {
        match self {
            Node::Map(entries, _) => entries.iter().find(|(k, _, _)| k == key).map(|(_, _, n)| n),
            _ => None,
        }
    }

    pub fn entries(&self) -> &[(String, Pos, Node)] {
        match self {
            Node::Map(entries, _) => entries,
            _ => &[],
        }
    }

    pub fn items(&self) -> &[Node] {
        match self {
            Node::Seq(items, _) => items,
            _ => &[],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Node::Null(_) => "empty value",
            Node::Scalar(..) => "scalar",
            Node::Seq(..) => "sequence",
            Node::Map(..) => "mapping",
        }
    }
}

#[derive(Debug, Clone)]
struct Line {
    indent: usize,
    text: String,
    no: usize,
}

fn strip_comment(s: &str) -> &str {
    let mut quote = None;
    let mut prev_space = true;
    for (i, ch) in s.char_indices() {
        match quote {
            Some(q) if ch == q => quote = None,
            Some(_) => {}
            None if ch == '"' || ch == '\'' => quote = Some(ch),
            None if ch == '#' && prev_space => return &s[..i],
            None => {}
        }
        prev_space = ch.is_whitespace();
    }
    s
}

/// Position of the `:` separating a mapping key, outside brackets/quotes.
fn key_split(s: &str) -> Option<usize> {
    let mut depth = 0i32;
    let mut quote = None;
    let bytes = s.as_bytes();
    for (i, ch) in s.char_indices() {
        match quote {
            Some(q) if ch == q => quote = None,
            Some(_) => {}
            None => match ch {
                '"' | '\'' => quote = Some(ch),
                '[' | '(' | '{' => depth += 1,
                ']' | ')' | '}' => depth -= 1,
                ':' if depth == 0 && (i + 1 == s.len() || bytes[i + 1] == b' ') => return Some(i),
                _ => {}
            },
        }
    }
    None
}

fn is_seq_item(text: &str) -> bool {
    text == "-" || text.starts_with("- ")
}

pub fn parse(src: &str) -> Result<Node, DocError> {
    let mut lines = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let no = i + 1;
        let body = strip_comment(raw).trim_end();
        if body.trim().is_empty() {
            continue;
        }
        let indent = body.len() - body.trim_start_matches(' ').len();
        if body[indent..].starts_with('\t') {
            return Err(DocError::new(
                Pos {
                    line: no,
                    col: indent + 1,
                },
                "tab in indentation",
            ));
        }
        lines.push(Line {
            indent,
            text: body[indent..].to_string(),
            no,
        });
    }
    if lines.is_empty() {
        return Ok(Node::Map(Vec::new(), Pos { line: 1, col: 1 }));
    }
    let mut p = Parser { lines, i: 0 };
    let indent = p.lines[0].indent;
    let node = p.block(indent)?;
    if let Some(l) = p.lines.get(p.i) {
        return Err(DocError::new(
            Pos {
                line: l.no,
                col: l.indent + 1,
            },
            "unexpected indentation",
        ));
    }
    Ok(node)
}

struct Parser {
    lines: Vec<Line>,
    i: usize,
}

impl Parser {
    fn pos(&self, l: &Line) -> Pos {
        Pos {
            line: l.no,
            col: l.indent + 1,
        }
    }

    fn block(&mut self, indent: usize) -> Result<Node, DocError> {
        let l = &self.lines[self.i];
        if is_seq_item(&l.text) {
            self.seq(indent)
        } else {
            self.map(indent)
        }
    }

    fn seq(&mut self, indent: usize) -> Result<Node, DocError> {
        let start = self.pos(&self.lines[self.i]);
        let mut items = Vec::new();
        while let Some(l) = self.lines.get(self.i) {
            if l.indent != indent || !is_seq_item(&l.text) {
                break;
            }
            let l = l.clone();
            let rest = l.text[1..].trim_start();
            if rest.is_empty() {
                self.i += 1;
                items.push(self.nested(indent, self.pos(&l))?);
                continue;
            }
            let offset = l.text.len() - rest.len();
            if key_split(rest).is_some() && !rest.starts_with('{') {
                // `- key: value` opens a mapping at the item's column
                self.lines[self.i] = Line {
                    indent: indent + offset,
                    text: rest.to_string(),
                    no: l.no,
                };
                items.push(self.map(indent + offset)?);
            } else {
                self.i += 1;
                let pos = Pos {
                    line: l.no,
                    col: indent + offset + 1,
                };
                items.push(inline(rest, pos)?);
            }
        }
        Ok(Node::Seq(items, start))
    }

    fn map(&mut self, indent: usize) -> Result<Node, DocError> {
        let start = self.pos(&self.lines[self.i]);
        let mut entries: Vec<(String, Pos, Node)> = Vec::new();
        while let Some(l) = self.lines.get(self.i) {
            if l.indent != indent || is_seq_item(&l.text) {
                if l.indent > indent {
                    return Err(DocError::new(self.pos(l), "unexpected indentation"));
                }
                break;
            }
            let l = l.clone();
            let pos = self.pos(&l);
            let at = key_split(&l.text).ok_or_else(|| {
                DocError::new(pos, format!("expected `key: value`, found `{}`", l.text))
            })?;
            let key = unquote(l.text[..at].trim());
            if entries.iter().any(|(k, _, _)| *k == key) {
                return Err(DocError::new(pos, format!("duplicate key `{key}`")));
            }
            let rest = l.text[at + 1..].trim();
            self.i += 1;
            let value = if rest.is_empty() {
                self.nested(indent, pos)?
            } else {
                let vpos = Pos {
                    line: l.no,
                    col: indent + l.text.len() - l.text[at + 1..].trim_start().len() + 1,
                };
                inline(rest, vpos)?
            };
            entries.push((key, pos, value));
        }
        Ok(Node::Map(entries, start))
    }

    /// Value on the lines following `key:` or a bare `-`.
    fn nested(&mut self, parent: usize, pos: Pos) -> Result<Node, DocError> {
        match self.lines.get(self.i) {
            Some(n) if n.indent > parent => {
                let ind = n.indent;
                self.block(ind)
            }
            Some(n) if n.indent == parent && is_seq_item(&n.text) => self.seq(parent),
            _ => Ok(Node::Null(pos)),
        }
    }
}

fn unquote(s: &str) -> String {
    let b = s.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        s[1..s.len() - 1].to_string()
    } else {
        s.to_string()
    }
}

/// Splits on top-level commas.
fn split_top(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    let mut quote = None;
    for (i, ch) in s.char_indices() {
        match quote {
            Some(q) if ch == q => quote = None,
            Some(_) => {}
            None => match ch {
                '"' | '\'' => quote = Some(ch),
                '[' | '(' | '{' => depth += 1,
                ']' | ')' | '}' => depth -= 1,
                ',' if depth == 0 => {
                    out.push(&s[start..i]);
                    start = i + 1;
                }
                _ => {}
            },
        }
    }
    out.push(&s[start..]);
    out
}

fn inline(s: &str, pos: Pos) -> Result<Node, DocError> {
    if let Some(inner) = s.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| DocError::new(pos, "unterminated flow sequence"))?;
        if inner.trim().is_empty() {
            return Ok(Node::Seq(Vec::new(), pos));
        }
        let items = split_top(inner)
            .into_iter()
            .map(|item| inline(item.trim(), pos))
            .collect::<Result<_, _>>()?;
        return Ok(Node::Seq(items, pos));
    }
    if let Some(inner) = s.strip_prefix('{') {
        let inner = inner
            .strip_suffix('}')
            .ok_or_else(|| DocError::new(pos, "unterminated flow mapping"))?;
        let mut entries = Vec::new();
        if !inner.trim().is_empty() {
            for item in split_top(inner) {
                let item = item.trim();
                let at = key_split(item).ok_or_else(|| {
                    DocError::new(pos, format!("expected `key: value` in `{item}`"))
                })?;
                let v = item[at + 1..].trim();
                let value = if v.is_empty() {
                    Node::Null(pos)
                } else {
                    inline(v, pos)?
                };
                entries.push((unquote(item[..at].trim()), pos, value));
            }
        }
        return Ok(Node::Map(entries, pos));
    }
    if s.is_empty() {
        return Err(DocError::new(pos, "empty flow item"));
    }
    Ok(Node::Scalar(unquote(s), pos))
}
