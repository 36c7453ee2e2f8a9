//! S-expression parser for terms and program files.

use std::collections::HashMap;

use thiserror::Error;

use super::{ArrayType, IxFn, Name, Param, Program, ShareId, Term, TermRef};
use crate::tensor::{parse_scalar, ConcreteArray, Kind, PrimOp, Scalar, Shape};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    OpenBr,
    CloseBr,
    Atom(String),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Vec<Spanned> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1, 1);
    while let Some(&c) = chars.peek() {
        let (l, cl) = (line, col);
        let single = match c {
            '(' => Some(Tok::Open),
            ')' => Some(Tok::Close),
            '[' => Some(Tok::OpenBr),
            ']' => Some(Tok::CloseBr),
            _ => None,
        };
        if let Some(tok) = single {
            chars.next();
            col += 1;
            out.push(Spanned { tok, line: l, col: cl });
            continue;
        }
        if c == '\n' {
            chars.next();
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() || c == ',' {
            chars.next();
            col += 1;
            continue;
        }
        if c == ';' {
            while let Some(&c) = chars.peek() {
                if c == '\n' {
                    break;
                }
                chars.next();
            }
            continue;
        }
        let mut s = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() || "()[],;".contains(c) {
                break;
            }
            s.push(c);
            chars.next();
            col += 1;
        }
        out.push(Spanned { tok: Tok::Atom(s), line: l, col: cl });
    }
    out
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    end: (usize, usize),
    shares: HashMap<u64, TermRef>,
}

type PResult<T> = Result<T, ParseError>;

fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && cs.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '\'')
}

fn looks_numeric(s: &str) -> bool {
    let s = s.strip_prefix('-').unwrap_or(s);
    s.chars().next().is_some_and(|c| c.is_ascii_digit())
}

impl Parser {
    fn new(text: &str) -> Self {
        let toks = lex(text);
        let lines: Vec<&str> = text.lines().collect();
        let end = (lines.len().max(1), lines.last().map_or(1, |l| l.len() + 1));
        Parser { toks, pos: 0, end, shares: HashMap::new() }
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let (line, col) = match self.toks.get(self.pos) {
            Some(t) => (t.line, t.col),
            None => self.end,
        };
        Err(ParseError { line, col, msg: msg.into() })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn expect(&mut self, tok: Tok, what: &str) -> PResult<()> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn atom(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Some(Tok::Atom(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> PResult<()> {
        match self.peek() {
            Some(Tok::Atom(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{kw}`")),
        }
    }

    fn ident(&mut self) -> PResult<Name> {
        let s = self.atom("an identifier")?;
        if !is_ident(&s) {
            self.pos -= 1;
            return self.err(format!("`{s}` is not a valid identifier"));
        }
        Ok(Name::new(&s))
    }

    fn usize_atom(&mut self, what: &str) -> PResult<usize> {
        let s = self.atom(what)?;
        s.parse().or_else(|_| {
            self.pos -= 1;
            self.err(format!("expected {what}, found `{s}`"))
        })
    }

    fn nat_list(&mut self, what: &str) -> PResult<Vec<usize>> {
        self.expect(Tok::OpenBr, "`[`")?;
        let mut v = Vec::new();
        while self.peek() != Some(&Tok::CloseBr) {
            v.push(self.usize_atom(what)?);
        }
        self.pos += 1;
        Ok(v)
    }

    fn shape(&mut self) -> PResult<Shape> {
        Ok(Shape::new(self.nat_list("a dimension")?))
    }

    fn term_list(&mut self) -> PResult<Vec<TermRef>> {
        self.expect(Tok::OpenBr, "`[`")?;
        let mut v = Vec::new();
        while self.peek() != Some(&Tok::CloseBr) {
            if self.peek().is_none() {
                return self.err("unterminated list");
            }
            v.push(self.term()?);
        }
        self.pos += 1;
        Ok(v)
    }

    fn terms_until_close(&mut self) -> PResult<Vec<TermRef>> {
        let mut v = Vec::new();
        while self.peek() != Some(&Tok::Close) {
            if self.peek().is_none() {
                return self.err("unterminated form");
            }
            v.push(self.term()?);
        }
        Ok(v)
    }

    fn ixfn(&mut self) -> PResult<IxFn> {
        self.expect(Tok::Open, "`(lam`")?;
        self.keyword("lam")?;
        self.expect(Tok::OpenBr, "`[`")?;
        let mut params = Vec::new();
        while self.peek() != Some(&Tok::CloseBr) {
            params.push(self.ident()?);
        }
        self.pos += 1;
        let body = self.term_list()?;
        self.expect(Tok::Close, "`)`")?;
        Ok(IxFn::new(params, body))
    }

    fn kind(&mut self) -> PResult<Kind> {
        let s = self.atom("an element kind")?;
        s.parse().or_else(|_| {
            self.pos -= 1;
            self.err(format!("unknown element kind `{s}`"))
        })
    }

    fn literal(&mut self, s: &str) -> PResult<TermRef> {
        match parse_scalar(s) {
            Some(Scalar::Int(i)) => Ok(Term::int(i)),
            Some(Scalar::Real(x)) => Ok(Term::real(x)),
            _ => {
                self.pos -= 1;
                self.err(format!("bad number `{s}`"))
            }
        }
    }

    fn term(&mut self) -> PResult<TermRef> {
        match self.peek().cloned() {
            Some(Tok::Atom(s)) => {
                self.pos += 1;
                if s == "true" || s == "false" {
                    return Ok(Term::constant(ConcreteArray::scalar_bool(s == "true")));
                }
                if looks_numeric(&s) {
                    return self.literal(&s);
                }
                if is_ident(&s) {
                    return Ok(Term::var(Name::new(&s)));
                }
                self.pos -= 1;
                self.err(format!("unexpected `{s}`"))
            }
            Some(Tok::Open) => {
                self.pos += 1;
                let head = self.atom("a form name")?;
                let t = self.form(&head)?;
                self.expect(Tok::Close, "`)`")?;
                Ok(t)
            }
            Some(_) => self.err("expected a term"),
            None => self.err("unexpected end of input"),
        }
    }

    fn form(&mut self, head: &str) -> PResult<TermRef> {
        Ok(match head {
            "var" => Term::var(self.ident()?),
            "let" => {
                self.expect(Tok::Open, "`(`")?;
                let x = self.ident()?;
                let u = self.term()?;
                self.expect(Tok::Close, "`)`")?;
                let v = self.term()?;
                Term::let_(x, u, v)
            }
            "cond" => {
                let b = self.term()?;
                let u = self.term()?;
                let v = self.term()?;
                Term::cond(b, u, v)
            }
            "op" => {
                let name = self.atom("an operator")?;
                let Some(op) = PrimOp::from_name(&name) else {
                    self.pos -= 1;
                    return self.err(format!("unknown operator `{name}`"));
                };
                let args = self.terms_until_close()?;
                if args.len() != op.arity() {
                    return self.err(format!("`{op}` takes {} operands", op.arity()));
                }
                Term::op(op, args)
            }
            "index" => {
                let a = self.term()?;
                let ix = self.term_list()?;
                Term::index(a, ix)
            }
            "sumouter" => Term::sum_outer(self.term()?),
            "gather" | "scatter" => {
                let sh = self.shape()?;
                let a = self.term()?;
                let f = self.ixfn()?;
                if head == "gather" {
                    Term::gather(sh, a, f)
                } else {
                    Term::scatter(sh, a, f)
                }
            }
            "ravel" => {
                let ts = self.terms_until_close()?;
                if ts.is_empty() {
                    return self.err("`ravel` needs at least one element");
                }
                Term::ravel(ts)
            }
            "replicate" => {
                let k = self.usize_atom("a replication count")?;
                Term::replicate(k, self.term()?)
            }
            "tr" => {
                let perm = self.nat_list("a permutation entry")?;
                Term::transpose(perm, self.term()?)
            }
            "reshape" => {
                let sh = self.shape()?;
                Term::reshape(sh, self.term()?)
            }
            "build1" => {
                let k = self.usize_atom("a size")?;
                self.expect(Tok::Open, "`(lam`")?;
                self.keyword("lam")?;
                let i = self.ident()?;
                let b = self.term()?;
                self.expect(Tok::Close, "`)`")?;
                Term::build1(k, i, b)
            }
            "array" => {
                let kind = self.kind()?;
                let sh = self.shape()?;
                self.expect(Tok::OpenBr, "`[`")?;
                let mut data = Vec::new();
                while self.peek() != Some(&Tok::CloseBr) {
                    let s = self.atom("an array element")?;
                    match parse_scalar(&s) {
                        Some(x) => data.push(x),
                        None => {
                            self.pos -= 1;
                            return self.err(format!("bad array element `{s}`"));
                        }
                    }
                }
                self.pos += 1;
                match ConcreteArray::from_scalars(kind, sh, &data) {
                    Ok(a) => Term::constant(a),
                    Err(e) => return self.err(e.0),
                }
            }
            "share" => {
                let id = self.usize_atom("a share id")? as u64;
                if self.peek() == Some(&Tok::Close) {
                    match self.shares.get(&id) {
                        Some(t) => t.clone(),
                        None => return self.err(format!("share {id} used before its definition")),
                    }
                } else {
                    let t = Term::share(ShareId(id), self.term()?);
                    self.shares.insert(id, t.clone());
                    t
                }
            }
            "tuple" => Term::tuple(self.terms_until_close()?),
            _ => {
                self.pos -= 1;
                return self.err(format!("unknown form `{head}`"));
            }
        })
    }

    fn params(&mut self) -> PResult<Vec<Param>> {
        let mut ps = Vec::new();
        while self.peek() == Some(&Tok::Open) {
            self.pos += 1;
            let name = self.ident()?;
            let kind = self.kind()?;
            let shape = self.shape()?;
            self.expect(Tok::Close, "`)`")?;
            if ps.iter().any(|p: &Param| p.name == name) {
                return self.err(format!("parameter `{name}` declared twice"));
            }
            ps.push(Param { name, ty: ArrayType::new(shape, kind) });
        }
        Ok(ps)
    }

    fn finish(&self) -> PResult<()> {
        if self.pos < self.toks.len() {
            return self.err("trailing input");
        }
        Ok(())
    }
}

pub fn parse_term(text: &str) -> Result<TermRef, ParseError> {
    let mut p = Parser::new(text);
    let t = p.term()?;
    p.finish()?;
    Ok(t)
}

/// Parses an optional `(params ..)` header followed by one term.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser::new(text);
    let mut params = Vec::new();
    if p.peek() == Some(&Tok::Open)
        && matches!(p.toks.get(p.pos + 1).map(|t| &t.tok), Some(Tok::Atom(s)) if s == "params")
    {
        p.pos += 2;
        params = p.params()?;
        p.expect(Tok::Close, "`)`")?;
    }
    let body = p.term()?;
    p.finish()?;
    Ok(Program { params, body })
}
