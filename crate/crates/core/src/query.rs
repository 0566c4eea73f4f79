//! Query ASTs, their s-expression surface syntax, query templates and the
//! symbolic reference evaluator.
//!
//! Grammar:
//!
//! ```text
//! query := (basic ENT+)
//!        | (follow query rels)
//!        | (filter query rels query)
//!        | (intersect query query+)
//!        | (union query query+)
//!        | (difference query query)
//! rels  := (rel REL+)
//! ENT   := e:NAME        REL := r:NAME
//! ```
//!
//! `NAME` is either a run of characters other than whitespace, parentheses
//! and `"`, or a double-quoted string with `\"` and `\\` escapes.
//! Intersections and unions of more than two children fold left.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{KbqError, Result};
use crate::kbstore::{KbIndex, Vocab};

/// Untyped syntax tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SExpr {
    Atom { text: String, offset: usize },
    List { items: Vec<SExpr>, offset: usize },
}

impl SExpr {
    pub fn offset(&self) -> usize {
        match self {
            SExpr::Atom { offset, .. } | SExpr::List { offset, .. } => *offset,
        }
    }
}

fn needs_quotes(name: &str) -> bool {
    name.is_empty() || name.chars().any(|c| c.is_whitespace() || matches!(c, '(' | ')' | '"' | '\\'))
}

fn write_name(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    if !needs_quotes(name) {
        return f.write_str(name);
    }
    f.write_str("\"")?;
    for c in name.chars() {
        if c == '"' || c == '\\' {
            write!(f, "\\")?;
        }
        write!(f, "{c}")?;
    }
    f.write_str("\"")
}

fn write_atom(f: &mut fmt::Formatter<'_>, text: &str) -> fmt::Result {
    match text.split_once(':') {
        Some((prefix @ ("e" | "r"), name)) => {
            write!(f, "{prefix}:")?;
            write_name(f, name)
        }
        _ => write_name(f, text),
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Atom { text, .. } => write_atom(f, text),
            SExpr::List { items, .. } => {
                f.write_str("(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str(")")
            }
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(KbqError::QuerySyntax {
            offset,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn quoted(&mut self, out: &mut String) -> Result<()> {
        let start = self.pos;
        self.pos += 1;
        loop {
            match self.peek() {
                None => return self.err(start, "unterminated string"),
                Some('"') => {
                    self.pos += 1;
                    return Ok(());
                }
                Some('\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ ('"' | '\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return self.err(self.pos, "invalid escape"),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
    }

    fn atom(&mut self) -> Result<SExpr> {
        let offset = self.pos;
        let mut text = String::new();
        while let Some(c) = self.peek() {
            match c {
                '"' => self.quoted(&mut text)?,
                '(' | ')' => break,
                c if c.is_whitespace() => break,
                c => {
                    text.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
        Ok(SExpr::Atom { text, offset })
    }

    fn expr(&mut self) -> Result<SExpr> {
        self.skip_ws();
        match self.peek() {
            None => self.err(self.pos, "unexpected end of input"),
            Some(')') => self.err(self.pos, "unexpected ')'"),
            Some('(') => {
                let offset = self.pos;
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        None => return self.err(offset, "unclosed '('"),
                        Some(')') => {
                            self.pos += 1;
                            return Ok(SExpr::List { items, offset });
                        }
                        _ => items.push(self.expr()?),
                    }
                }
            }
            Some(_) => self.atom(),
        }
    }
}

/// Parse one s-expression; trailing input is an error.
pub fn parse_sexpr(src: &str) -> Result<SExpr> {
    let mut lx = Lexer { src, pos: 0 };
    let e = lx.expr()?;
    lx.skip_ws();
    if lx.pos != src.len() {
        return lx.err(lx.pos, "trailing input");
    }
    Ok(e)
}

/// Reprint a query in canonical spacing and quoting without resolving names.
pub fn canonicalize(src: &str) -> Result<String> {
    let e = parse_sexpr(src)?;
    syntax_check(&e)?;
    Ok(e.to_string())
}

/// Query over entity and relation ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Query {
    Basic(Vec<usize>),
    Follow(Box<Query>, Vec<usize>),
    Filter(Box<Query>, Vec<usize>, Box<Query>),
    Intersect(Vec<Query>),
    Union(Vec<Query>),
    Difference(Box<Query>, Box<Query>),
}

fn syntax_err<T>(e: &SExpr, message: impl Into<String>) -> Result<T> {
    Err(KbqError::QuerySyntax {
        offset: e.offset(),
        message: message.into(),
    })
}

fn head(e: &SExpr) -> Result<(&str, &[SExpr])> {
    match e {
        SExpr::List { items, .. } => match items.split_first() {
            Some((SExpr::Atom { text, .. }, rest)) => Ok((text.as_str(), rest)),
            _ => syntax_err(e, "expected an operator"),
        },
        SExpr::Atom { .. } => syntax_err(e, "expected a parenthesised expression"),
    }
}

fn prefixed<'a>(e: &'a SExpr, prefix: &str) -> Result<&'a str> {
    match e {
        SExpr::Atom { text, .. } => match text.strip_prefix(prefix) {
            Some(name) => Ok(name),
            None => syntax_err(e, format!("expected {prefix}NAME")),
        },
        _ => syntax_err(e, format!("expected {prefix}NAME")),
    }
}

fn names<'a>(e: &'a SExpr, op: &str, prefix: &str) -> Result<Vec<&'a str>> {
    let (h, rest) = head(e)?;
    if h != op {
        return syntax_err(e, format!("expected ({op} ...)"));
    }
    if rest.is_empty() {
        return syntax_err(e, format!("({op}) needs at least one name"));
    }
    rest.iter().map(|a| prefixed(a, prefix)).collect()
}

/// Shape-only check; names are not resolved.
fn syntax_check(e: &SExpr) -> Result<()> {
    build(e, &mut |_| Ok(0), &mut |_| Ok(0)).map(|_| ())
}

fn build(
    e: &SExpr,
    ent: &mut dyn FnMut(&str) -> Result<usize>,
    rel: &mut dyn FnMut(&str) -> Result<usize>,
) -> Result<Query> {
    let (h, rest) = head(e)?;
    let arity = |n: usize| -> Result<()> {
        if rest.len() != n {
            return syntax_err(e, format!("({h} ...) takes {n} arguments, got {}", rest.len()));
        }
        Ok(())
    };
    let rels = |x: &SExpr, rel: &mut dyn FnMut(&str) -> Result<usize>| -> Result<Vec<usize>> {
        names(x, "rel", "r:")?.into_iter().map(rel).collect()
    };
    Ok(match h {
        "basic" => {
            if rest.is_empty() {
                return syntax_err(e, "(basic) needs at least one entity");
            }
            Query::Basic(
                rest.iter()
                    .map(|a| prefixed(a, "e:").and_then(&mut *ent))
                    .collect::<Result<_>>()?,
            )
        }
        "follow" => {
            arity(2)?;
            let x = build(&rest[0], ent, rel)?;
            Query::Follow(Box::new(x), rels(&rest[1], rel)?)
        }
        "filter" => {
            arity(3)?;
            let x = build(&rest[0], ent, rel)?;
            let r = rels(&rest[1], rel)?;
            let y = build(&rest[2], ent, rel)?;
            Query::Filter(Box::new(x), r, Box::new(y))
        }
        "intersect" | "union" => {
            if rest.len() < 2 {
                return syntax_err(e, format!("({h} ...) needs at least two arguments"));
            }
            let cs = rest.iter().map(|c| build(c, ent, rel)).collect::<Result<Vec<_>>>()?;
            if h == "intersect" {
                Query::Intersect(cs)
            } else {
                Query::Union(cs)
            }
        }
        "difference" => {
            arity(2)?;
            Query::Difference(Box::new(build(&rest[0], ent, rel)?), Box::new(build(&rest[1], ent, rel)?))
        }
        other => return syntax_err(e, format!("unknown operator '{other}'")),
    })
}

/// Parse and resolve names against `vocab`.
pub fn parse_query(src: &str, vocab: &Vocab) -> Result<Query> {
    let e = parse_sexpr(src)?;
    build(&e, &mut |n| vocab.entity_id(n), &mut |n| vocab.relation_id(n))
}

struct Printer<'a> {
    q: &'a Query,
    vocab: &'a Vocab,
}

impl fmt::Display for Printer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sub = |q| Printer { q, vocab: self.vocab };
        let rels = |f: &mut fmt::Formatter<'_>, rs: &[usize]| -> fmt::Result {
            f.write_str("(rel")?;
            for &r in rs {
                f.write_str(" r:")?;
                write_name(f, self.vocab.relation_name(r))?;
            }
            f.write_str(")")
        };
        match self.q {
            Query::Basic(es) => {
                f.write_str("(basic")?;
                for &e in es {
                    f.write_str(" e:")?;
                    write_name(f, self.vocab.entity_name(e))?;
                }
                f.write_str(")")
            }
            Query::Follow(x, rs) => {
                write!(f, "(follow {} ", sub(x))?;
                rels(f, rs)?;
                f.write_str(")")
            }
            Query::Filter(x, rs, y) => {
                write!(f, "(filter {} ", sub(x))?;
                rels(f, rs)?;
                write!(f, " {})", sub(y))
            }
            Query::Intersect(cs) | Query::Union(cs) => {
                f.write_str(if matches!(self.q, Query::Intersect(_)) { "(intersect" } else { "(union" })?;
                for c in cs {
                    write!(f, " {}", sub(c))?;
                }
                f.write_str(")")
            }
            Query::Difference(a, b) => write!(f, "(difference {} {})", sub(a), sub(b)),
        }
    }
}

impl Query {
    pub fn basic(e: usize) -> Self {
        Query::Basic(vec![e])
    }

    pub fn follow(self, rel: usize) -> Self {
        Query::Follow(Box::new(self), vec![rel])
    }

    /// Canonical s-expression with names from `vocab`.
    pub fn to_sexpr(&self, vocab: &Vocab) -> String {
        Printer { q: self, vocab }.to_string()
    }

    /// Number of AST nodes.
    pub fn size(&self) -> usize {
        1 + match self {
            Query::Basic(_) => 0,
            Query::Follow(x, _) => x.size(),
            Query::Filter(x, _, y) | Query::Difference(x, y) => x.size() + y.size(),
            Query::Intersect(cs) | Query::Union(cs) => cs.iter().map(Query::size).sum(),
        }
    }

    /// All anchor entities, in order of appearance.
    pub fn anchors(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |q| {
            if let Query::Basic(es) = q {
                out.extend_from_slice(es);
            }
        });
        out
    }

    fn visit(&self, f: &mut dyn FnMut(&Query)) {
        f(self);
        match self {
            Query::Basic(_) => {}
            Query::Follow(x, _) => x.visit(f),
            Query::Filter(x, _, y) | Query::Difference(x, y) => {
                x.visit(f);
                y.visit(f);
            }
            Query::Intersect(cs) | Query::Union(cs) => cs.iter().for_each(|c| c.visit(f)),
        }
    }

    pub fn template(&self) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.matches(self))
    }
}

/// The nine query shapes used for benchmarking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    P1,
    P2,
    P3,
    I2,
    I3,
    Ip,
    Pi,
    U2,
    Up,
}

fn is_chain(q: &Query, hops: usize) -> bool {
    match (q, hops) {
        (Query::Basic(es), 0) => es.len() == 1,
        (Query::Follow(x, rs), h) if h > 0 => rs.len() == 1 && is_chain(x, h - 1),
        _ => false,
    }
}

fn single_follow(q: &Query) -> Option<&Query> {
    match q {
        Query::Follow(x, rs) if rs.len() == 1 => Some(x),
        _ => None,
    }
}

impl Template {
    pub const ALL: [Template; 9] = [
        Template::P1,
        Template::P2,
        Template::P3,
        Template::I2,
        Template::I3,
        Template::Ip,
        Template::Pi,
        Template::U2,
        Template::Up,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::P1 => "1p",
            Template::P2 => "2p",
            Template::P3 => "3p",
            Template::I2 => "2i",
            Template::I3 => "3i",
            Template::Ip => "ip",
            Template::Pi => "pi",
            Template::U2 => "2u",
            Template::Up => "up",
        }
    }

    pub fn from_name(name: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn matches(self, q: &Query) -> bool {
        let all_1p = |cs: &[Query], n: usize| cs.len() == n && cs.iter().all(|c| is_chain(c, 1));
        match self {
            Template::P1 => is_chain(q, 1),
            Template::P2 => is_chain(q, 2),
            Template::P3 => is_chain(q, 3),
            Template::I2 => matches!(q, Query::Intersect(cs) if all_1p(cs, 2)),
            Template::I3 => matches!(q, Query::Intersect(cs) if all_1p(cs, 3)),
            Template::Ip => single_follow(q).is_some_and(|x| Template::I2.matches(x)),
            Template::Pi => {
                matches!(q, Query::Intersect(cs) if cs.len() == 2 && is_chain(&cs[0], 2) && is_chain(&cs[1], 1))
            }
            Template::U2 => matches!(q, Query::Union(cs) if all_1p(cs, 2)),
            Template::Up => single_follow(q).is_some_and(|x| Template::U2.matches(x)),
        }
    }

    /// Number of anchors and relations a template consumes, in the order
    /// `instantiate` reads them.
    pub fn arity(self) -> (usize, usize) {
        match self {
            Template::P1 => (1, 1),
            Template::P2 => (1, 2),
            Template::P3 => (1, 3),
            Template::I2 | Template::U2 => (2, 2),
            Template::I3 => (3, 3),
            Template::Ip | Template::Up => (2, 3),
            Template::Pi => (2, 3),
        }
    }

    /// Build the template from anchors and relations (see `arity`).
    pub fn instantiate(self, anchors: &[usize], rels: &[usize]) -> Result<Query> {
        let (na, nr) = self.arity();
        if anchors.len() != na || rels.len() != nr {
            return Err(KbqError::QueryType(format!(
                "template {} takes {na} anchors and {nr} relations",
                self.name()
            )));
        }
        let p = |a: usize, r: usize| Query::basic(a).follow(r);
        Ok(match self {
            Template::P1 => p(anchors[0], rels[0]),
            Template::P2 => p(anchors[0], rels[0]).follow(rels[1]),
            Template::P3 => p(anchors[0], rels[0]).follow(rels[1]).follow(rels[2]),
            Template::I2 => Query::Intersect(vec![p(anchors[0], rels[0]), p(anchors[1], rels[1])]),
            Template::I3 => Query::Intersect(vec![
                p(anchors[0], rels[0]),
                p(anchors[1], rels[1]),
                p(anchors[2], rels[2]),
            ]),
            Template::Ip => Query::Intersect(vec![p(anchors[0], rels[0]), p(anchors[1], rels[1])]).follow(rels[2]),
            Template::Pi => Query::Intersect(vec![p(anchors[0], rels[0]).follow(rels[1]), p(anchors[1], rels[2])]),
            Template::U2 => Query::Union(vec![p(anchors[0], rels[0]), p(anchors[1], rels[1])]),
            Template::Up => Query::Union(vec![p(anchors[0], rels[0]), p(anchors[1], rels[1])]).follow(rels[2]),
        })
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exact set semantics over the indexed triples.
pub fn symbolic_evaluate(q: &Query, kb: &KbIndex) -> BTreeSet<usize> {
    match q {
        Query::Basic(es) => es.iter().copied().filter(|&e| e < kb.num_entities()).collect(),
        Query::Follow(x, rs) => {
            let rs: BTreeSet<usize> = rs.iter().copied().collect();
            symbolic_evaluate(x, kb)
                .into_iter()
                .flat_map(|s| kb.outgoing(s).iter())
                .filter(|(r, _)| rs.contains(r))
                .map(|&(_, o)| o)
                .collect()
        }
        Query::Filter(x, rs, y) => {
            let rs: BTreeSet<usize> = rs.iter().copied().collect();
            let ys = symbolic_evaluate(y, kb);
            symbolic_evaluate(x, kb)
                .into_iter()
                .filter(|&s| kb.outgoing(s).iter().any(|(r, o)| rs.contains(r) && ys.contains(o)))
                .collect()
        }
        Query::Intersect(cs) => {
            let mut it = cs.iter().map(|c| symbolic_evaluate(c, kb));
            let first = it.next().unwrap_or_default();
            it.fold(first, |acc, s| acc.intersection(&s).copied().collect())
        }
        Query::Union(cs) => cs.iter().flat_map(|c| symbolic_evaluate(c, kb)).collect(),
        Query::Difference(a, b) => {
            let bs = symbolic_evaluate(b, kb);
            symbolic_evaluate(a, kb).into_iter().filter(|e| !bs.contains(e)).collect()
        }
    }
}
