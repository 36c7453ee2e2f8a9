//! Delta terms: defunctionalised forward derivatives, generic over the
//! carrier that represents arrays, index tuples and index functions.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write};
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::Shape;

/// Operations the reverse pass needs on cotangents.
pub trait Carrier {
    type Array: Clone;
    type Index: Clone;
    type IxFun: Clone;

    /// `new ∘+ old`.
    fn add(&self, new: &Self::Array, old: &Self::Array) -> Self::Array;
    /// `arr ∘× c`.
    fn scale(&self, arr: &Self::Array, c: &Self::Array) -> Self::Array;
    /// Protects a cotangent that is about to be used more than once.
    fn share(&self, c: &Self::Array) -> Self::Array;
    fn one_hot(&self, sh: &Shape, ix: &Self::Index, c: &Self::Array) -> Self::Array;
    fn replicate(&self, k: usize, c: &Self::Array) -> Self::Array;
    fn sum_outer(&self, c: &Self::Array) -> Self::Array;
    fn gather(&self, sh: &Shape, c: &Self::Array, f: &Self::IxFun) -> Self::Array;
    fn scatter(&self, sh: &Shape, c: &Self::Array, f: &Self::IxFun) -> Self::Array;
    /// `index c [i]`.
    fn index_at(&self, c: &Self::Array, i: usize) -> Self::Array;
    fn transpose(&self, perm: &[usize], c: &Self::Array) -> Self::Array;
    fn reshape(&self, sh: &Shape, c: &Self::Array) -> Self::Array;

    fn index_len(ix: &Self::Index) -> usize;
    /// Number of parameters of an index function.
    fn ixfun_arity(f: &Self::IxFun) -> usize;
    /// Number of components an index function returns.
    fn ixfun_len(f: &Self::IxFun) -> usize;
    /// Shape of a value, where the carrier can tell cheaply.
    fn shape_of(&self, a: &Self::Array) -> Option<Shape>;

    fn show_array(a: &Self::Array) -> String;
    fn show_index(ix: &Self::Index) -> String;
    fn show_ixfun(f: &Self::IxFun) -> String;
}

/// Identifies one real-kind program input; numbered from 1 in declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DVarName {
    pub index: usize,
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeltaId(pub u64);

impl fmt::Display for DeltaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Monotone counter shared by every id-issuing stage of one pipeline run.
#[derive(Debug)]
pub struct IdGen {
    next: Cell<u64>,
}

impl Default for IdGen {
    fn default() -> Self {
        Self::new()
    }
}

impl IdGen {
    pub fn new() -> Self {
        IdGen { next: Cell::new(1) }
    }

    pub fn fresh(&self) -> u64 {
        let n = self.next.get();
        self.next.set(n + 1);
        n
    }

    pub fn fresh_delta_id(&self) -> DeltaId {
        DeltaId(self.fresh())
    }

    /// The next id that would be issued.
    pub fn peek(&self) -> u64 {
        self.next.get()
    }
}

pub enum DeltaKind<C: Carrier> {
    Zero,
    Input(DVarName),
    Add(Delta<C>, Delta<C>),
    Scale(C::Array, Delta<C>),
    Share(DeltaId, Delta<C>),
    Index(Delta<C>, C::Index),
    SumOuter(Delta<C>),
    Gather(Shape, Delta<C>, C::IxFun),
    Scatter(Shape, Delta<C>, C::IxFun),
    LitArray(Vec<Delta<C>>),
    Replicate(usize, Delta<C>),
    Transpose(Vec<usize>, Delta<C>),
    Reshape(Shape, Delta<C>),
}

pub struct DeltaNode<C: Carrier> {
    pub shape: Shape,
    pub kind: DeltaKind<C>,
}

/// Immutable, reference-counted Delta node with its shape cached.
pub struct Delta<C: Carrier>(Rc<DeltaNode<C>>);

impl<C: Carrier> Clone for Delta<C> {
    fn clone(&self) -> Self {
        Delta(self.0.clone())
    }
}

impl<C: Carrier> Delta<C> {
    fn mk(shape: Shape, kind: DeltaKind<C>) -> Self {
        Delta(Rc::new(DeltaNode { shape, kind }))
    }

    pub fn kind(&self) -> &DeltaKind<C> {
        &self.0.kind
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn addr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn zero(sh: Shape) -> Self {
        Self::mk(sh, DeltaKind::Zero)
    }

    pub fn input(v: DVarName) -> Self {
        Self::mk(v.shape.clone(), DeltaKind::Input(v))
    }

    pub fn add(a: Self, b: Self) -> Self {
        assert_eq!(a.shape(), b.shape(), "Add of differently shaped deltas");
        Self::mk(a.shape().clone(), DeltaKind::Add(a, b))
    }

    pub fn scale(arr: C::Array, d: Self) -> Self {
        Self::mk(d.shape().clone(), DeltaKind::Scale(arr, d))
    }

    pub fn share(id: DeltaId, d: Self) -> Self {
        Self::mk(d.shape().clone(), DeltaKind::Share(id, d))
    }

    pub fn index(d: Self, ix: C::Index) -> Self {
        let m = C::index_len(&ix);
        assert!(m <= d.shape().rank(), "Index deeper than the delta's rank");
        Self::mk(d.shape().suffix(m), DeltaKind::Index(d, ix))
    }

    pub fn sum_outer(d: Self) -> Self {
        assert!(d.shape().rank() > 0, "SumOuter of a rank-0 delta");
        Self::mk(d.shape().suffix(1), DeltaKind::SumOuter(d))
    }

    pub fn gather(sh: Shape, d: Self, f: C::IxFun) -> Self {
        let (m1, m2) = (C::ixfun_arity(&f), C::ixfun_len(&f));
        assert_eq!(sh.suffix(m1), d.shape().suffix(m2), "Gather trailing dimensions");
        Self::mk(sh.clone(), DeltaKind::Gather(sh, d, f))
    }

    pub fn scatter(sh: Shape, d: Self, f: C::IxFun) -> Self {
        let (m1, m2) = (C::ixfun_arity(&f), C::ixfun_len(&f));
        assert_eq!(d.shape().suffix(m1), sh.suffix(m2), "Scatter trailing dimensions");
        Self::mk(sh.clone(), DeltaKind::Scatter(sh, d, f))
    }

    pub fn lit_array(ds: Vec<Self>) -> Self {
        assert!(!ds.is_empty(), "LitArray of no elements");
        let sh = ds[0].shape().clone();
        assert!(ds.iter().all(|d| *d.shape() == sh), "LitArray elements differ in shape");
        Self::mk(sh.cons(ds.len()), DeltaKind::LitArray(ds))
    }

    pub fn replicate(k: usize, d: Self) -> Self {
        Self::mk(d.shape().cons(k), DeltaKind::Replicate(k, d))
    }

    pub fn transpose(perm: Vec<usize>, d: Self) -> Self {
        let dims = d.shape().dims();
        assert!(perm.len() <= dims.len() && crate::tensor::is_permutation(&perm), "bad permutation");
        let mut out: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        out.extend_from_slice(&dims[perm.len()..]);
        Self::mk(Shape::new(out), DeltaKind::Transpose(perm, d))
    }

    pub fn reshape(sh: Shape, d: Self) -> Self {
        assert_eq!(sh.size(), d.shape().size(), "Reshape changes the element count");
        Self::mk(sh.clone(), DeltaKind::Reshape(sh, d))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind(), DeltaKind::Zero)
    }

    pub fn children(&self) -> Vec<&Delta<C>> {
        match self.kind() {
            DeltaKind::Zero | DeltaKind::Input(_) => vec![],
            DeltaKind::Add(a, b) => vec![a, b],
            DeltaKind::LitArray(ds) => ds.iter().collect(),
            DeltaKind::Scale(_, d)
            | DeltaKind::Share(_, d)
            | DeltaKind::Index(d, _)
            | DeltaKind::SumOuter(d)
            | DeltaKind::Gather(_, d, _)
            | DeltaKind::Scatter(_, d, _)
            | DeltaKind::Replicate(_, d)
            | DeltaKind::Transpose(_, d)
            | DeltaKind::Reshape(_, d) => vec![d],
        }
    }
}

/// Shape of a delta; constant time.
pub fn shape_delta<C: Carrier>(d: &Delta<C>) -> &Shape {
    d.shape()
}

/// Visits every distinct node once, parents before children.
pub fn for_each_node<C: Carrier>(d: &Delta<C>, mut f: impl FnMut(&Delta<C>)) {
    let mut seen = HashSet::new();
    let mut stack = vec![d.clone()];
    while let Some(n) = stack.pop() {
        if !seen.insert(n.addr()) {
            continue;
        }
        f(&n);
        for c in n.children().into_iter().rev() {
            stack.push(c.clone());
        }
    }
}

/// Number of distinct nodes in the DAG.
pub fn node_count<C: Carrier>(d: &Delta<C>) -> usize {
    let mut n = 0;
    for_each_node(d, |_| n += 1);
    n
}

/// Shape recomputed from constructor arguments, ignoring the cache of `d`
/// itself.
pub fn recompute_shape<C: Carrier>(d: &Delta<C>) -> Shape {
    match d.kind() {
        DeltaKind::Zero => d.shape().clone(),
        DeltaKind::Input(v) => v.shape.clone(),
        DeltaKind::Add(a, _) | DeltaKind::Scale(_, a) | DeltaKind::Share(_, a) => a.shape().clone(),
        DeltaKind::Index(a, ix) => a.shape().suffix(C::index_len(ix)),
        DeltaKind::SumOuter(a) => a.shape().suffix(1),
        DeltaKind::Gather(sh, ..) | DeltaKind::Scatter(sh, ..) => sh.clone(),
        DeltaKind::LitArray(ds) => ds[0].shape().cons(ds.len()),
        DeltaKind::Replicate(k, a) => a.shape().cons(*k),
        DeltaKind::Transpose(perm, a) => {
            let dims = a.shape().dims();
            let mut out: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
            out.extend_from_slice(&dims[perm.len()..]);
            Shape::new(out)
        }
        DeltaKind::Reshape(sh, _) => sh.clone(),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InvariantError {
    #[error("Share {outer} contains Share {inner}, which is not smaller")]
    NotSmaller { outer: DeltaId, inner: DeltaId },
    #[error("id {0} wraps two different nodes")]
    Inconsistent(DeltaId),
    #[error("cached shape {cached} differs from recomputed {recomputed}")]
    Shape { cached: Shape, recomputed: Shape },
}

/// Checks that ids inside `Share i d` are smaller than `i` and that equal ids
/// wrap the same node. Also checks every cached shape.
pub fn check_invariants<C: Carrier>(d: &Delta<C>) -> Result<(), InvariantError> {
    let mut by_id: HashMap<DeltaId, usize> = HashMap::new();
    let mut err = None;
    for_each_node(d, |n| {
        if err.is_some() {
            return;
        }
        let re = recompute_shape(n);
        if re != *n.shape() {
            err = Some(InvariantError::Shape { cached: n.shape().clone(), recomputed: re });
            return;
        }
        if let DeltaKind::Share(id, body) = n.kind() {
            match by_id.get(id) {
                Some(&p) if p != n.addr() => {
                    err = Some(InvariantError::Inconsistent(*id));
                    return;
                }
                _ => {
                    by_id.insert(*id, n.addr());
                }
            }
            if let Some(inner) = max_direct_share(body) {
                if inner >= *id {
                    err = Some(InvariantError::NotSmaller { outer: *id, inner });
                }
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Largest id among the nearest `Share` nodes below `d` (those not under
/// another `Share`).
fn max_direct_share<C: Carrier>(d: &Delta<C>) -> Option<DeltaId> {
    let mut best = None;
    let mut seen = HashSet::new();
    let mut stack = vec![d.clone()];
    while let Some(n) = stack.pop() {
        if !seen.insert(n.addr()) {
            continue;
        }
        if let DeltaKind::Share(id, _) = n.kind() {
            best = best.max(Some(*id));
            continue;
        }
        stack.extend(n.children().into_iter().cloned());
    }
    best
}

impl<C: Carrier> fmt::Display for Delta<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        show(self, &mut s, &mut HashSet::new());
        f.write_str(&s)
    }
}

impl<C: Carrier> fmt::Debug for Delta<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// S-expression rendering; a repeated `Share` prints as `(Share N)`.
fn show<C: Carrier>(d: &Delta<C>, out: &mut String, seen: &mut HashSet<DeltaId>) {
    fn node<C: Carrier>(
        out: &mut String,
        seen: &mut HashSet<DeltaId>,
        head: &str,
        args: &[String],
        kids: &[&Delta<C>],
    ) {
        out.push('(');
        out.push_str(head);
        for a in args {
            out.push(' ');
            out.push_str(a);
        }
        for k in kids {
            out.push(' ');
            show(k, out, seen);
        }
        out.push(')');
    }
    let mut sub = |out: &mut String, head: &str, args: &[String], kids: &[&Delta<C>]| {
        node(out, seen, head, args, kids)
    };
    match d.kind() {
        DeltaKind::Zero => write!(out, "(Zero {})", d.shape()).unwrap(),
        DeltaKind::Input(v) => write!(out, "(Input {})", v.index).unwrap(),
        DeltaKind::Add(a, b) => sub(out, "Add", &[], &[a, b]),
        DeltaKind::Scale(arr, a) => sub(out, "Scale", &[C::show_array(arr)], &[a]),
        DeltaKind::Share(id, a) => {
            if seen.insert(*id) {
                node(out, seen, "Share", &[id.to_string()], &[a])
            } else {
                write!(out, "(Share {id})").unwrap()
            }
        }
        DeltaKind::Index(a, ix) => sub(out, "Index", &[C::show_index(ix)], &[a]),
        DeltaKind::SumOuter(a) => sub(out, "SumOuter", &[], &[a]),
        DeltaKind::Gather(sh, a, g) => sub(out, "Gather", &[sh.to_string(), C::show_ixfun(g)], &[a]),
        DeltaKind::Scatter(sh, a, g) => sub(out, "Scatter", &[sh.to_string(), C::show_ixfun(g)], &[a]),
        DeltaKind::LitArray(ds) => {
            let kids: Vec<&Delta<C>> = ds.iter().collect();
            sub(out, "LitArray", &[], &kids)
        }
        DeltaKind::Replicate(k, a) => sub(out, "Replicate", &[k.to_string()], &[a]),
        DeltaKind::Transpose(perm, a) => sub(out, "Transpose", &[format!("{perm:?}").replace(',', "")], &[a]),
        DeltaKind::Reshape(sh, a) => sub(out, "Reshape", &[sh.to_string()], &[a]),
    }
}

/// Renumbers `Share` ids by order of first appearance in the printed form,
/// so traces can be compared independently of the id counter.
pub fn canonical_string<C: Carrier>(d: &Delta<C>) -> String {
    let raw = d.to_string();
    let mut map: HashMap<String, usize> = HashMap::new();
    let mut out = String::new();
    let mut rest = raw.as_str();
    while let Some(pos) = rest.find("(Share ") {
        out.push_str(&rest[..pos + 7]);
        rest = &rest[pos + 7..];
        let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        let n = map.len() + 1;
        let k = *map.entry(rest[..end].to_string()).or_insert(n);
        out.push_str(&k.to_string());
        rest = &rest[end..];
    }
    out.push_str(rest);
    out
}
