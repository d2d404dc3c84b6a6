//! Einsum statements: `Z[m,n] = A[k,m] * B[k,n]`, `T[q,s] = I[q+s]`,
//! `T[k,m,n] = take(A[k,m], B[k,n], 1)`, and bare copies `P1 = P0`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A subscript: one index variable or an affine sum of variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Index {
    Var(String),
    Sum(Vec<String>),
}

impl Index {
    pub fn vars(&self) -> &[String] {
        match self {
            Index::Var(v) => std::slice::from_ref(v),
            Index::Sum(vs) => vs,
        }
    }

    pub fn as_var(&self) -> Option<&str> {
        match self {
            Index::Var(v) => Some(v),
            Index::Sum(_) => None,
        }
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.vars().join("+"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: String,
    pub indices: Vec<Index>,
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.tensor)?;
        for (i, x) in self.indices.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{x}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Access(Access),
    Mul(Box<Expr>, Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    /// Intersection of all arguments emitting argument `pick`'s payload.
    Take(Vec<Expr>, usize),
}

impl Expr {
    /// Operand accesses in left-to-right order.
    pub fn accesses(&self) -> Vec<&Access> {
        let mut out = Vec::new();
        self.visit(&mut |a| out.push(a));
        out
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Access)) {
        match self {
            Expr::Access(a) => f(a),
            Expr::Mul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Take(args, _) => args.iter().for_each(|a| a.visit(f)),
        }
    }

    pub fn vars(&self) -> BTreeSet<String> {
        self.accesses()
            .into_iter()
            .flat_map(|a| a.indices.iter().flat_map(|i| i.vars().iter().cloned()))
            .collect()
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| {
            if e.prec() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Access(a) => write!(f, "{a}"),
            Expr::Mul(a, b) => {
                side(f, a, 2)?;
                f.write_str(" * ")?;
                side(f, b, 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                side(f, a, 1)?;
                f.write_str(if matches!(self, Expr::Add(..)) {
                    " + "
                } else {
                    " - "
                })?;
                side(f, b, 2)
            }
            Expr::Take(args, n) => {
                f.write_str("take(")?;
                for a in args {
                    write!(f, "{a}, ")?;
                }
                write!(f, "{n})")
            }
        }
    }
}

/// One statement of a cascade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub output: Access,
    pub expr: Expr,
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.output, self.expr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("column {col}: {msg}")]
pub struct ExprError {
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(usize),
    Sym(char),
}

fn lex(s: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (at, ch) = chars[i];
        if ch.is_whitespace() {
            i += 1;
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let st = i;
            while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '_') {
                i += 1;
            }
            out.push((
                Tok::Ident(chars[st..i].iter().map(|c| c.1).collect()),
                at + 1,
            ));
        } else if ch.is_ascii_digit() {
            let st = i;
            while i < chars.len() && chars[i].1.is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[st..i].iter().map(|c| c.1).collect();
            out.push((Tok::Num(text.parse().unwrap()), at + 1));
        } else if "[](),=+-*·".contains(ch) {
            out.push((Tok::Sym(if ch == '·' { '*' } else { ch }), at + 1));
            i += 1;
        } else {
            return Err(ExprError {
                col: at + 1,
                msg: format!("unexpected character `{ch}`"),
            });
        }
    }
    Ok(out)
}

struct P {
    toks: Vec<(Tok, usize)>,
    i: usize,
    end: usize,
}

impl P {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.0)
    }

    fn col(&self) -> usize {
        self.toks.get(self.i).map_or(self.end, |t| t.1)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError {
            col: self.col(),
            msg: msg.into(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn ident(&mut self) -> Result<String, ExprError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.i += 1;
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn access(&mut self, name: String) -> Result<Access, ExprError> {
        let mut indices = Vec::new();
        if self.eat('[') && !self.eat(']') {
            loop {
                let mut vars = vec![self.ident()?];
                while self.eat('+') {
                    vars.push(self.ident()?);
                }
                if self.peek() == Some(&Tok::Sym('*')) {
                    return self.err("products of index variables are not supported");
                }
                indices.push(if vars.len() == 1 {
                    Index::Var(vars.pop().unwrap())
                } else {
                    Index::Sum(vars)
                });
                if self.eat(']') {
                    break;
                }
                self.expect(',')?;
            }
        }
        Ok(Access {
            tensor: name,
            indices,
        })
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        while self.eat('*') {
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        if self.eat('(') {
            let e = self.expr()?;
            self.expect(')')?;
            return Ok(e);
        }
        let name = self.ident()?;
        if name == "take" && self.eat('(') {
            let mut args = Vec::new();
            loop {
                if let Some(Tok::Num(n)) = self.peek() {
                    let n = *n;
                    self.i += 1;
                    self.expect(')')?;
                    if n >= args.len() {
                        return self.err(format!("take selects operand {n} of {}", args.len()));
                    }
                    if args.len() < 2 {
                        return self.err("take needs at least two operands");
                    }
                    return Ok(Expr::Take(args, n));
                }
                args.push(self.expr()?);
                self.expect(',')?;
            }
        }
        Ok(Expr::Access(self.access(name)?))
    }
}

/// Parses one statement. Bare copies (`P1 = P0`) come back with empty
/// index lists; the caller fills them from the declarations.
pub fn parse_statement(s: &str) -> Result<Statement, ExprError> {
    let toks = lex(s)?;
    let mut p = P {
        toks,
        i: 0,
        end: s.len() + 1,
    };
    let name = p.ident()?;
    let output = p.access(name)?;
    p.expect('=')?;
    let expr = p.expr()?;
    if p.i != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(Statement { output, expr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul() {
        let s = parse_statement("Z[m, n] = A[k, m] * B[k, n]").unwrap();
        assert_eq!(s.output.tensor, "Z");
        assert_eq!(s.expr.accesses().len(), 2);
        assert_eq!(s.to_string(), "Z[m, n] = A[k, m] * B[k, n]");
    }

    #[test]
    fn take_and_index_sum() {
        let s = parse_statement("T[k,m,n] = take(A[k,m], B[k,n], 1)").unwrap();
        assert!(matches!(s.expr, Expr::Take(ref a, 1) if a.len() == 2));
        let s = parse_statement("T[q, s] = I[q+s]").unwrap();
        let Expr::Access(a) = &s.expr else { panic!() };
        assert_eq!(a.indices[0], Index::Sum(vec!["q".into(), "s".into()]));
    }

    #[test]
    fn precedence_round_trips() {
        for src in [
            "M[v] = P1[v] - P0[v]",
            "X[i] = (A[i] + B[i]) * C[i]",
            "P1 = P0",
        ] {
            let s = parse_statement(src).unwrap();
            let again = parse_statement(&s.to_string()).unwrap();
            assert_eq!(s, again);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_statement("Z[m] = A[m*k]").is_err());
        assert!(parse_statement("Z[m] = take(A[m], 0)").is_err());
        assert!(parse_statement("Z[m] = A[m] $").is_err());
        assert!(parse_statement("Z[m] = take(A[m], B[m], 2)").is_err());
    }
}
