//! S-expression printer.
//!
//! Rank-0 finite constants print as bare literals. A shared subterm prints
//! in full at its first occurrence and as `(share N)` afterwards.

use std::collections::HashSet;
use std::fmt::{self, Write};

use super::{IxFn, Program, ShareId, Term};
use crate::tensor::{format_real, Buffer, ConcreteArray};

pub(crate) fn write_term(f: &mut fmt::Formatter<'_>, t: &Term) -> fmt::Result {
    let mut s = String::new();
    Printer::default().term(&mut s, t);
    f.write_str(&s)
}

/// Multi-line rendering: let chains and tuples are broken across lines.
pub fn pretty(t: &Term) -> String {
    let mut s = String::new();
    Printer::default().pretty(&mut s, t, 0);
    s
}

pub fn pretty_program(p: &Program) -> String {
    let mut s = String::from("(params");
    for q in &p.params {
        write!(s, " ({} {} {})", q.name, q.ty.kind, q.ty.shape).unwrap();
    }
    s.push_str(")\n");
    s.push_str(&pretty(&p.body));
    s.push('\n');
    s
}

#[derive(Default)]
struct Printer {
    shares: HashSet<ShareId>,
}

fn write_const(out: &mut String, a: &ConcreteArray) {
    if a.rank() == 0 {
        match a.buffer() {
            Buffer::Int(v) => return write!(out, "{}", v[0]).unwrap(),
            Buffer::Bool(v) => return write!(out, "{}", v[0]).unwrap(),
            Buffer::Real(v) if v[0].is_finite() => {
                return out.push_str(&format_real(v[0]));
            }
            _ => {}
        }
    }
    write!(out, "({a})").unwrap();
}

impl Printer {
    fn list(&mut self, out: &mut String, ts: &[super::TermRef]) {
        out.push('[');
        for (i, t) in ts.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            self.term(out, t);
        }
        out.push(']');
    }

    fn ixfn(&mut self, out: &mut String, f: &IxFn) {
        out.push_str("(lam [");
        for (i, p) in f.params.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(p.as_str());
        }
        out.push_str("] ");
        self.list(out, &f.body);
        out.push(')');
    }

    fn term(&mut self, out: &mut String, t: &Term) {
        match t {
            Term::Const(a) => write_const(out, a),
            Term::Var(x) => write!(out, "(var {x})").unwrap(),
            Term::Let(x, u, v) => {
                write!(out, "(let ({x} ").unwrap();
                self.term(out, u);
                out.push_str(") ");
                self.term(out, v);
                out.push(')');
            }
            Term::Cond(b, u, v) => {
                out.push_str("(cond ");
                self.term(out, b);
                out.push(' ');
                self.term(out, u);
                out.push(' ');
                self.term(out, v);
                out.push(')');
            }
            Term::Op(op, args) => {
                write!(out, "(op {op}").unwrap();
                for a in args {
                    out.push(' ');
                    self.term(out, a);
                }
                out.push(')');
            }
            Term::Index(a, ix) => {
                out.push_str("(index ");
                self.term(out, a);
                out.push(' ');
                self.list(out, ix);
                out.push(')');
            }
            Term::SumOuter(a) => {
                out.push_str("(sumouter ");
                self.term(out, a);
                out.push(')');
            }
            Term::Gather(sh, a, f) | Term::Scatter(sh, a, f) => {
                let head = if matches!(t, Term::Gather(..)) { "gather" } else { "scatter" };
                write!(out, "({head} {sh} ").unwrap();
                self.term(out, a);
                out.push(' ');
                self.ixfn(out, f);
                out.push(')');
            }
            Term::Ravel(ts) => {
                out.push_str("(ravel");
                for a in ts {
                    out.push(' ');
                    self.term(out, a);
                }
                out.push(')');
            }
            Term::Replicate(k, a) => {
                write!(out, "(replicate {k} ").unwrap();
                self.term(out, a);
                out.push(')');
            }
            Term::Transpose(perm, a) => {
                out.push_str("(tr [");
                for (i, p) in perm.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    write!(out, "{p}").unwrap();
                }
                out.push_str("] ");
                self.term(out, a);
                out.push(')');
            }
            Term::Reshape(sh, a) => {
                write!(out, "(reshape {sh} ").unwrap();
                self.term(out, a);
                out.push(')');
            }
            Term::Build1(k, i, b) => {
                write!(out, "(build1 {k} (lam {i} ").unwrap();
                self.term(out, b);
                out.push_str("))");
            }
            Term::Share(id, b) => {
                if self.shares.insert(*id) {
                    write!(out, "(share {} ", id.0).unwrap();
                    self.term(out, b);
                    out.push(')');
                } else {
                    write!(out, "(share {})", id.0).unwrap();
                }
            }
            Term::Tuple(ts) => {
                out.push_str("(tuple");
                for a in ts {
                    out.push(' ');
                    self.term(out, a);
                }
                out.push(')');
            }
        }
    }

    fn pretty(&mut self, out: &mut String, t: &Term, indent: usize) {
        match t {
            Term::Let(x, u, v) => {
                write!(out, "(let ({x} ").unwrap();
                self.term(out, u);
                out.push_str(")\n");
                out.push_str(&" ".repeat(indent));
                self.pretty(out, v, indent);
                out.push(')');
            }
            Term::Tuple(ts) => {
                out.push_str("(tuple");
                for a in ts {
                    out.push('\n');
                    out.push_str(&" ".repeat(indent + 2));
                    self.pretty(out, a, indent + 2);
                }
                out.push(')');
            }
            _ => self.term(out, t),
        }
    }
}
