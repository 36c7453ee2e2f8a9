//! Core language terms, names and structural utilities.

mod check;
mod names;
mod parse;
mod print;
mod share;

pub use check::{check, check_program, infer_array, CheckError, TypeEnv};
pub use names::{
    alpha_eq, alpha_eq_up_to_share_ids, free_vars, occurs_free, renumber_shares, subst, subst1, subst_ixfn,
    uniquify, NameGen,
};
pub use parse::{parse_program, parse_term, ParseError};
pub use print::{pretty, pretty_program};
pub use share::{check_share_scoping, collect_shares, contains_share, strip_share, ShareError};

use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{ConcreteArray, Kind, PrimOp, Shape};

pub type TermRef = Rc<Term>;

/// A variable name. Generated names carry a `.N` suffix.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Name(Rc<str>);

impl Name {
    pub fn new(s: &str) -> Self {
        Name(Rc::from(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The name without its numeric `.N` suffix.
    pub fn base(&self) -> &str {
        match self.0.rsplit_once('.') {
            Some((b, n)) if !b.is_empty() && n.parse::<u64>().is_ok() => b,
            _ => &self.0,
        }
    }

    pub fn suffix(&self) -> Option<u64> {
        self.0.rsplit_once('.').and_then(|(_, n)| n.parse().ok())
    }
}

impl From<&str> for Name {
    fn from(s: &str) -> Self {
        Name::new(s)
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identity of a globally shared subterm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShareId(pub u64);

impl fmt::Display for ShareId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArrayType {
    pub shape: Shape,
    pub kind: Kind,
}

impl ArrayType {
    pub fn new(shape: Shape, kind: Kind) -> Self {
        ArrayType { shape, kind }
    }

    pub fn scalar(kind: Kind) -> Self {
        ArrayType { shape: Shape::scalar(), kind }
    }
}

impl fmt::Display for ArrayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Type {
    Array(ArrayType),
    Tuple(Vec<Type>),
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Array(a) => write!(f, "{a}"),
            Type::Tuple(ts) => {
                write!(f, "(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// `λ[i j]. [e1 e2 ..]`: binds rank-0 Int variables, returns an index.
#[derive(Clone, Debug)]
pub struct IxFn {
    pub params: Vec<Name>,
    pub body: Vec<TermRef>,
}

impl IxFn {
    pub fn new(params: Vec<Name>, body: Vec<TermRef>) -> Self {
        IxFn { params, body }
    }
}

#[derive(Clone, Debug)]
pub enum Term {
    Const(ConcreteArray),
    Var(Name),
    Let(Name, TermRef, TermRef),
    Cond(TermRef, TermRef, TermRef),
    Op(PrimOp, Vec<TermRef>),
    Index(TermRef, Vec<TermRef>),
    SumOuter(TermRef),
    Gather(Shape, TermRef, IxFn),
    Scatter(Shape, TermRef, IxFn),
    Ravel(Vec<TermRef>),
    Replicate(usize, TermRef),
    Transpose(Vec<usize>, TermRef),
    Reshape(Shape, TermRef),
    Build1(usize, Name, TermRef),
    Share(ShareId, TermRef),
    Tuple(Vec<TermRef>),
}

/// Shorthand constructors.
impl Term {
    pub fn constant(a: ConcreteArray) -> TermRef {
        Rc::new(Term::Const(a))
    }

    pub fn real(x: f64) -> TermRef {
        Term::constant(ConcreteArray::scalar_real(x))
    }

    pub fn int(x: i64) -> TermRef {
        Term::constant(ConcreteArray::scalar_int(x))
    }

    pub fn var(x: impl Into<Name>) -> TermRef {
        Rc::new(Term::Var(x.into()))
    }

    pub fn let_(x: Name, u: TermRef, v: TermRef) -> TermRef {
        Rc::new(Term::Let(x, u, v))
    }

    pub fn cond(b: TermRef, u: TermRef, v: TermRef) -> TermRef {
        Rc::new(Term::Cond(b, u, v))
    }

    pub fn op(op: PrimOp, args: Vec<TermRef>) -> TermRef {
        Rc::new(Term::Op(op, args))
    }

    pub fn op2(op: PrimOp, a: TermRef, b: TermRef) -> TermRef {
        Rc::new(Term::Op(op, vec![a, b]))
    }

    pub fn op1(op: PrimOp, a: TermRef) -> TermRef {
        Rc::new(Term::Op(op, vec![a]))
    }

    pub fn index(t: TermRef, ix: Vec<TermRef>) -> TermRef {
        Rc::new(Term::Index(t, ix))
    }

    pub fn sum_outer(t: TermRef) -> TermRef {
        Rc::new(Term::SumOuter(t))
    }

    pub fn gather(sh: Shape, t: TermRef, f: IxFn) -> TermRef {
        Rc::new(Term::Gather(sh, t, f))
    }

    pub fn scatter(sh: Shape, t: TermRef, f: IxFn) -> TermRef {
        Rc::new(Term::Scatter(sh, t, f))
    }

    pub fn ravel(ts: Vec<TermRef>) -> TermRef {
        Rc::new(Term::Ravel(ts))
    }

    pub fn replicate(k: usize, t: TermRef) -> TermRef {
        Rc::new(Term::Replicate(k, t))
    }

    pub fn transpose(perm: Vec<usize>, t: TermRef) -> TermRef {
        Rc::new(Term::Transpose(perm, t))
    }

    pub fn reshape(sh: Shape, t: TermRef) -> TermRef {
        Rc::new(Term::Reshape(sh, t))
    }

    pub fn build1(k: usize, i: Name, t: TermRef) -> TermRef {
        Rc::new(Term::Build1(k, i, t))
    }

    pub fn share(id: ShareId, t: TermRef) -> TermRef {
        Rc::new(Term::Share(id, t))
    }

    pub fn tuple(ts: Vec<TermRef>) -> TermRef {
        Rc::new(Term::Tuple(ts))
    }
}

impl Term {
    /// Direct subterms, including index components and index-function bodies.
    pub fn children(&self) -> Vec<&TermRef> {
        match self {
            Term::Const(_) | Term::Var(_) => vec![],
            Term::Let(_, u, v) => vec![u, v],
            Term::Cond(b, u, v) => vec![b, u, v],
            Term::Op(_, args) | Term::Ravel(args) | Term::Tuple(args) => args.iter().collect(),
            Term::Index(t, ix) => std::iter::once(t).chain(ix.iter()).collect(),
            Term::Gather(_, t, f) | Term::Scatter(_, t, f) => {
                std::iter::once(t).chain(f.body.iter()).collect()
            }
            Term::SumOuter(t)
            | Term::Replicate(_, t)
            | Term::Transpose(_, t)
            | Term::Reshape(_, t)
            | Term::Build1(_, _, t)
            | Term::Share(_, t) => vec![t],
        }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self, Term::Var(_) | Term::Const(_) | Term::Share(..))
    }
}

/// Number of nodes, counting the body of each shared subterm once.
pub fn node_count(t: &Term) -> usize {
    fn go(t: &Term, seen: &mut HashSet<ShareId>) -> usize {
        if let Term::Share(id, _) = t {
            if !seen.insert(*id) {
                return 1;
            }
        }
        1 + t.children().into_iter().map(|c| go(c, seen)).sum::<usize>()
    }
    go(t, &mut HashSet::new())
}

/// Whether any node satisfies `p`. Shared bodies are visited once.
pub fn any_node(t: &Term, p: &mut dyn FnMut(&Term) -> bool) -> bool {
    fn go(t: &Term, p: &mut dyn FnMut(&Term) -> bool, seen: &mut HashSet<ShareId>) -> bool {
        if let Term::Share(id, _) = t {
            if !seen.insert(*id) {
                return false;
            }
        }
        p(t) || t.children().into_iter().any(|c| go(c, p, seen))
    }
    go(t, p, &mut HashSet::new())
}

pub fn contains_build1(t: &Term) -> bool {
    any_node(t, &mut |n| matches!(n, Term::Build1(..)))
}

/// A declared program input.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: Name,
    pub ty: ArrayType,
}

/// A term together with its declared free variables.
#[derive(Clone, Debug)]
pub struct Program {
    pub params: Vec<Param>,
    pub body: TermRef,
}

impl Program {
    pub fn new(params: Vec<Param>, body: TermRef) -> Self {
        Program { params, body }
    }

    pub fn type_env(&self) -> TypeEnv {
        TypeEnv::from_params(&self.params)
    }

    pub fn real_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.ty.kind == Kind::Real)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print::write_term(f, self)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_program(self))
    }
}

impl Term {
    /// Rebuilds this node with `f` applied to every direct subterm. Binders
    /// are kept as they are.
    pub fn map_children(&self, f: &mut dyn FnMut(&TermRef) -> TermRef) -> TermRef {
        let ixfn = |g: &IxFn, f: &mut dyn FnMut(&TermRef) -> TermRef| {
            IxFn::new(g.params.clone(), g.body.iter().map(|e| f(e)).collect())
        };
        Rc::new(match self {
            Term::Const(_) | Term::Var(_) => self.clone(),
            Term::Let(x, u, v) => Term::Let(x.clone(), f(u), f(v)),
            Term::Cond(b, u, v) => Term::Cond(f(b), f(u), f(v)),
            Term::Op(op, args) => Term::Op(*op, args.iter().map(|a| f(a)).collect()),
            Term::Index(t, ix) => {
                let t2 = f(t);
                Term::Index(t2, ix.iter().map(|e| f(e)).collect())
            }
            Term::SumOuter(t) => Term::SumOuter(f(t)),
            Term::Gather(sh, t, g) => {
                let t2 = f(t);
                Term::Gather(sh.clone(), t2, ixfn(g, f))
            }
            Term::Scatter(sh, t, g) => {
                let t2 = f(t);
                Term::Scatter(sh.clone(), t2, ixfn(g, f))
            }
            Term::Ravel(ts) => Term::Ravel(ts.iter().map(|a| f(a)).collect()),
            Term::Replicate(k, t) => Term::Replicate(*k, f(t)),
            Term::Transpose(p, t) => Term::Transpose(p.clone(), f(t)),
            Term::Reshape(sh, t) => Term::Reshape(sh.clone(), f(t)),
            Term::Build1(k, i, t) => Term::Build1(*k, i.clone(), f(t)),
            Term::Share(id, t) => Term::Share(*id, f(t)),
            Term::Tuple(ts) => Term::Tuple(ts.iter().map(|a| f(a)).collect()),
        })
    }
}
