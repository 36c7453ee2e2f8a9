//! Concrete rectangular arrays and the bulk operations shared by the
//! interpreter and the concrete reverse pass.
//!
//! Every operation is total: out-of-range reads give zeros (or `false`),
//! out-of-range scatter writes are dropped and integer division by zero
//! gives 0.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Array dimensions, outermost first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Self {
        Shape(dims)
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn size(&self) -> usize {
        self.0.iter().product()
    }

    /// `k ::: self`
    pub fn cons(&self, k: usize) -> Shape {
        let mut d = Vec::with_capacity(self.0.len() + 1);
        d.push(k);
        d.extend_from_slice(&self.0);
        Shape(d)
    }

    pub fn prefix(&self, m: usize) -> Shape {
        Shape(self.0[..m].to_vec())
    }

    pub fn suffix(&self, m: usize) -> Shape {
        Shape(self.0[m..].to_vec())
    }

    pub fn concat(&self, other: &Shape) -> Shape {
        let mut d = self.0.clone();
        d.extend_from_slice(&other.0);
        Shape(d)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.0)
    }
}

impl From<Vec<usize>> for Shape {
    fn from(d: Vec<usize>) -> Self {
        Shape(d)
    }
}

impl From<&[usize]> for Shape {
    fn from(d: &[usize]) -> Self {
        Shape(d.to_vec())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for d in (0..dims.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * dims[d + 1];
    }
    s
}

/// Calls `f` on every multi-index of `dims` in row-major order.
pub fn for_each_index(dims: &[usize], mut f: impl FnMut(&[i64])) {
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let mut ix = vec![0i64; dims.len()];
    loop {
        f(&ix);
        let mut d = dims.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            ix[d] += 1;
            if (ix[d] as usize) < dims[d] {
                break;
            }
            ix[d] = 0;
        }
    }
}

/// Flat offset of the subarray addressed by the index prefix `ix`, or `None`
/// when a coordinate is out of range.
fn offset_of(dims: &[usize], st: &[usize], ix: &[i64]) -> Option<usize> {
    let mut off = 0;
    for (d, &i) in ix.iter().enumerate() {
        if i < 0 || i as usize >= dims[d] {
            return None;
        }
        off += i as usize * st[d];
    }
    Some(off)
}

/// Element kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "f64")]
    Real,
    #[serde(rename = "i64")]
    Int,
    #[serde(rename = "bool")]
    Bool,
}

impl Kind {
    pub fn is_numeric(self) -> bool {
        matches!(self, Kind::Real | Kind::Int)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Real => "f64",
            Kind::Int => "i64",
            Kind::Bool => "bool",
        })
    }
}

impl FromStr for Kind {
    type Err = ArrayFormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" => Ok(Kind::Real),
            "i64" => Ok(Kind::Int),
            "bool" => Ok(Kind::Bool),
            _ => Err(ArrayFormatError(format!("unknown kind `{s}`"))),
        }
    }
}

/// Flat row-major element storage.
#[derive(Clone, Debug, PartialEq)]
pub enum Buffer {
    Real(Vec<f64>),
    Int(Vec<i64>),
    Bool(Vec<bool>),
}

macro_rules! on_buffer {
    ($b:expr, $v:ident => $e:expr) => {
        match $b {
            Buffer::Real($v) => $e,
            Buffer::Int($v) => $e,
            Buffer::Bool($v) => $e,
        }
    };
}

impl Buffer {
    fn zeros(kind: Kind, n: usize) -> Buffer {
        match kind {
            Kind::Real => Buffer::Real(vec![0.0; n]),
            Kind::Int => Buffer::Int(vec![0; n]),
            Kind::Bool => Buffer::Bool(vec![false; n]),
        }
    }

    fn with_capacity(kind: Kind, n: usize) -> Buffer {
        match kind {
            Kind::Real => Buffer::Real(Vec::with_capacity(n)),
            Kind::Int => Buffer::Int(Vec::with_capacity(n)),
            Kind::Bool => Buffer::Bool(Vec::with_capacity(n)),
        }
    }

    pub fn kind(&self) -> Kind {
        match self {
            Buffer::Real(_) => Kind::Real,
            Buffer::Int(_) => Kind::Int,
            Buffer::Bool(_) => Kind::Bool,
        }
    }

    pub fn len(&self) -> usize {
        on_buffer!(self, v => v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `len` elements of `src` starting at `start`, or zeros when
    /// `start` is `None`.
    fn push_block(&mut self, src: &Buffer, start: Option<usize>, len: usize) {
        match (self, src) {
            (Buffer::Real(o), Buffer::Real(s)) => match start {
                Some(st) => o.extend_from_slice(&s[st..st + len]),
                None => o.extend(std::iter::repeat(0.0).take(len)),
            },
            (Buffer::Int(o), Buffer::Int(s)) => match start {
                Some(st) => o.extend_from_slice(&s[st..st + len]),
                None => o.extend(std::iter::repeat(0).take(len)),
            },
            (Buffer::Bool(o), Buffer::Bool(s)) => match start {
                Some(st) => o.extend_from_slice(&s[st..st + len]),
                None => o.extend(std::iter::repeat(false).take(len)),
            },
            _ => panic!("buffer kind mismatch"),
        }
    }

    /// Adds `len` elements of `src` at `src_start` into `self` at `dst_start`.
    fn add_block(&mut self, dst_start: usize, src: &Buffer, src_start: usize, len: usize) {
        match (self, src) {
            (Buffer::Real(o), Buffer::Real(s)) => {
                for k in 0..len {
                    o[dst_start + k] += s[src_start + k];
                }
            }
            (Buffer::Int(o), Buffer::Int(s)) => {
                for k in 0..len {
                    o[dst_start + k] = o[dst_start + k].wrapping_add(s[src_start + k]);
                }
            }
            _ => panic!("accumulation needs matching numeric buffers"),
        }
    }
}

/// A rectangular array with a single element kind.
#[derive(Clone, Debug)]
pub struct ConcreteArray {
    shape: Shape,
    data: Arc<Buffer>,
}

impl PartialEq for ConcreteArray {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad array: {0}")]
pub struct ArrayFormatError(pub String);

impl ConcreteArray {
    pub fn new(shape: Shape, data: Buffer) -> Result<Self, ArrayFormatError> {
        if shape.size() != data.len() {
            return Err(ArrayFormatError(format!(
                "shape {shape} needs {} elements, got {}",
                shape.size(),
                data.len()
            )));
        }
        Ok(ConcreteArray { shape, data: Arc::new(data) })
    }

    fn from_buffer(shape: Shape, data: Buffer) -> Self {
        debug_assert_eq!(shape.size(), data.len());
        ConcreteArray { shape, data: Arc::new(data) }
    }

    pub fn real(shape: Shape, data: Vec<f64>) -> Self {
        Self::new(shape, Buffer::Real(data)).expect("element count")
    }

    pub fn int(shape: Shape, data: Vec<i64>) -> Self {
        Self::new(shape, Buffer::Int(data)).expect("element count")
    }

    pub fn bool(shape: Shape, data: Vec<bool>) -> Self {
        Self::new(shape, Buffer::Bool(data)).expect("element count")
    }

    pub fn scalar_real(x: f64) -> Self {
        Self::real(Shape::scalar(), vec![x])
    }

    pub fn scalar_int(x: i64) -> Self {
        Self::int(Shape::scalar(), vec![x])
    }

    pub fn scalar_bool(x: bool) -> Self {
        Self::bool(Shape::scalar(), vec![x])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::real(Shape::new(vec![data.len()]), data)
    }

    pub fn zeros(kind: Kind, shape: Shape) -> Self {
        let n = shape.size();
        Self::from_buffer(shape, Buffer::zeros(kind, n))
    }

    pub fn fill(shape: Shape, x: f64) -> Self {
        let n = shape.size();
        Self::from_buffer(shape, Buffer::Real(vec![x; n]))
    }

    /// `[0, 1, .., k-1]` as an Int vector.
    pub fn iota(k: usize) -> Self {
        Self::int(Shape::new(vec![k]), (0..k as i64).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn kind(&self) -> Kind {
        self.data.kind()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    pub fn as_real(&self) -> &[f64] {
        match &*self.data {
            Buffer::Real(v) => v,
            _ => panic!("expected a real array, got {}", self.kind()),
        }
    }

    pub fn as_int(&self) -> &[i64] {
        match &*self.data {
            Buffer::Int(v) => v,
            _ => panic!("expected an int array, got {}", self.kind()),
        }
    }

    pub fn as_bool(&self) -> &[bool] {
        match &*self.data {
            Buffer::Bool(v) => v,
            _ => panic!("expected a bool array, got {}", self.kind()),
        }
    }

    pub fn scalar_value_int(&self) -> i64 {
        assert_eq!(self.rank(), 0, "expected a rank-0 array");
        self.as_int()[0]
    }

    pub fn scalar_value_bool(&self) -> bool {
        assert_eq!(self.rank(), 0, "expected a rank-0 array");
        self.as_bool()[0]
    }

    pub fn scalar_value_real(&self) -> f64 {
        assert_eq!(self.rank(), 0, "expected a rank-0 array");
        self.as_real()[0]
    }

    /// Bitwise equality, treating NaNs with identical payloads as equal.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&*self.data, &*other.data) {
            (Buffer::Real(a), Buffer::Real(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }

    fn gather_blocks(&self, out_shape: Shape, block: usize, starts: &[Option<usize>]) -> Self {
        let mut out = Buffer::with_capacity(self.kind(), out_shape.size());
        for s in starts {
            out.push_block(&self.data, *s, block);
        }
        Self::from_buffer(out_shape, out)
    }

    /// Subarray at `ix`; zeros of the residual shape when out of range.
    pub fn index(&self, ix: &[i64]) -> Self {
        assert!(ix.len() <= self.rank(), "index longer than rank");
        let dims = self.shape.dims();
        let res = self.shape.suffix(ix.len());
        let start = offset_of(dims, &self.shape.strides(), ix);
        let block = res.size();
        self.gather_blocks(res, block, &[start])
    }

    /// `out[p ++ rest] = index(a, f(p) ++ rest)` for every `p` over the
    /// first `m1` dimensions of `sh`.
    pub fn gather(&self, sh: &Shape, m1: usize, f: &dyn Fn(&[i64]) -> Vec<i64>) -> Self {
        let outer = &sh.dims()[..m1];
        let res = sh.suffix(m1);
        let block = res.size();
        let dims = self.shape.dims();
        let st = self.shape.strides();
        let mut starts = Vec::with_capacity(outer.iter().product());
        for_each_index(outer, |p| {
            let src = f(p);
            assert_eq!(
                self.shape.suffix(src.len()),
                res,
                "gather trailing dimensions disagree"
            );
            starts.push(offset_of(dims, &st, &src));
        });
        self.gather_blocks(sh.clone(), block, &starts)
    }

    /// Adds `self[p ++ rest]` into `out[f(p) ++ rest]` for every `p` over the
    /// first `m1` dimensions of `self`; `out` starts as zeros of shape `sh`.
    pub fn scatter(&self, sh: &Shape, m1: usize, f: &dyn Fn(&[i64]) -> Vec<i64>) -> Self {
        assert!(self.kind().is_numeric(), "scatter needs a numeric array");
        let outer = &self.shape.dims()[..m1];
        let res = self.shape.suffix(m1);
        let block = res.size();
        let mut out = Buffer::zeros(self.kind(), sh.size());
        let dims = sh.dims();
        let st = sh.strides();
        let mut src_start = 0;
        for_each_index(outer, |p| {
            let tgt = f(p);
            assert_eq!(sh.suffix(tgt.len()), res, "scatter trailing dimensions disagree");
            if let Some(dst) = offset_of(dims, &st, &tgt) {
                out.add_block(dst, &self.data, src_start, block);
            }
            src_start += block;
        });
        Self::from_buffer(sh.clone(), out)
    }

    /// Sum over the outermost axis, rows added in index order.
    pub fn sum_outer(&self) -> Self {
        assert!(self.rank() >= 1, "sum_outer of a rank-0 array");
        assert!(self.kind().is_numeric(), "sum_outer needs a numeric array");
        let res = self.shape.suffix(1);
        let block = res.size();
        let mut out = Buffer::zeros(self.kind(), block);
        for k in 0..self.shape.dims()[0] {
            out.add_block(0, &self.data, k * block, block);
        }
        Self::from_buffer(res, out)
    }

    pub fn replicate(&self, k: usize) -> Self {
        let block = self.shape.size();
        let starts = vec![Some(0); k];
        self.gather_blocks(self.shape.cons(k), block, &starts)
    }

    /// Output dimension `d` is input dimension `perm[d]`; dimensions past
    /// `perm.len()` stay in place.
    pub fn transpose(&self, perm: &[usize]) -> Self {
        assert!(is_permutation(perm) && perm.len() <= self.rank(), "bad permutation");
        let dims = self.shape.dims();
        let m = perm.len();
        let mut out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        out_dims.extend_from_slice(&dims[m..]);
        let out_shape = Shape::new(out_dims);
        let st = self.shape.strides();
        let block: usize = dims[m..].iter().product();
        let mut starts = Vec::with_capacity(out_shape.prefix(m).size());
        for_each_index(&out_shape.dims()[..m], |o| {
            let mut off = 0;
            for d in 0..m {
                off += o[d] as usize * st[perm[d]];
            }
            starts.push(Some(off));
        });
        self.gather_blocks(out_shape, block, &starts)
    }

    pub fn reshape(&self, sh: &Shape) -> Self {
        assert_eq!(sh.size(), self.shape.size(), "reshape changes the element count");
        ConcreteArray { shape: sh.clone(), data: self.data.clone() }
    }

    /// Stacks equal-shaped arrays along a new outer dimension.
    pub fn from_subarrays(parts: &[ConcreteArray]) -> Self {
        assert!(!parts.is_empty(), "from_subarrays needs at least one part");
        let sh = parts[0].shape.clone();
        let kind = parts[0].kind();
        let mut out = Buffer::with_capacity(kind, sh.size() * parts.len());
        for p in parts {
            assert_eq!(p.shape, sh, "from_subarrays parts differ in shape");
            out.push_block(&p.data, Some(0), sh.size());
        }
        Self::from_buffer(sh.cons(parts.len()), out)
    }

    /// Zeros of shape `sh` with `v` placed at `ix`.
    pub fn one_hot(sh: &Shape, ix: &[i64], v: &ConcreteArray) -> Self {
        assert_eq!(sh.suffix(ix.len()), *v.shape(), "one_hot residual shape");
        let mut out = Buffer::zeros(v.kind(), sh.size());
        if let Some(dst) = offset_of(sh.dims(), &sh.strides(), ix) {
            out.add_block(dst, &v.data, 0, v.shape.size());
        }
        Self::from_buffer(sh.clone(), out)
    }

    pub fn map_op(op: PrimOp, args: &[&ConcreteArray]) -> Self {
        map_op(op, args)
    }

    /// Sum of elementwise products of two real arrays.
    pub fn dot(&self, other: &ConcreteArray) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.as_real().iter().zip(other.as_real()).map(|(a, b)| a * b).sum()
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

/// Primitive elementwise operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimOp {
    Add,
    Sub,
    Mul,
    Div,
    IDiv,
    Mod,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
    Neg,
    Not,
    Abs,
    Signum,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    ToReal,
    Floor,
}

pub const ALL_OPS: [PrimOp; 26] = [
    PrimOp::Add,
    PrimOp::Sub,
    PrimOp::Mul,
    PrimOp::Div,
    PrimOp::IDiv,
    PrimOp::Mod,
    PrimOp::Lt,
    PrimOp::Le,
    PrimOp::Gt,
    PrimOp::Ge,
    PrimOp::Eq,
    PrimOp::Ne,
    PrimOp::And,
    PrimOp::Or,
    PrimOp::Neg,
    PrimOp::Not,
    PrimOp::Abs,
    PrimOp::Signum,
    PrimOp::Exp,
    PrimOp::Log,
    PrimOp::Sin,
    PrimOp::Cos,
    PrimOp::Tanh,
    PrimOp::Sqrt,
    PrimOp::ToReal,
    PrimOp::Floor,
];

impl PrimOp {
    pub fn name(self) -> &'static str {
        use PrimOp::*;
        match self {
            Add => "+",
            Sub => "-",
            Mul => "*",
            Div => "/",
            IDiv => "div",
            Mod => "mod",
            Lt => "<",
            Le => "<=",
            Gt => ">",
            Ge => ">=",
            Eq => "==",
            Ne => "!=",
            And => "and",
            Or => "or",
            Neg => "neg",
            Not => "not",
            Abs => "abs",
            Signum => "signum",
            Exp => "exp",
            Log => "log",
            Sin => "sin",
            Cos => "cos",
            Tanh => "tanh",
            Sqrt => "sqrt",
            ToReal => "toreal",
            Floor => "floor",
        }
    }

    pub fn from_name(s: &str) -> Option<PrimOp> {
        ALL_OPS.iter().copied().find(|op| op.name() == s)
    }

    pub fn arity(self) -> usize {
        use PrimOp::*;
        match self {
            Add | Sub | Mul | Div | IDiv | Mod | Lt | Le | Gt | Ge | Eq | Ne | And | Or => 2,
            _ => 1,
        }
    }

    /// Result kind for the given argument kinds, or `None` if ill-kinded.
    pub fn result_kind(self, args: &[Kind]) -> Option<Kind> {
        use PrimOp::*;
        if args.len() != self.arity() {
            return None;
        }
        let a = args[0];
        if args.len() == 2 && args[1] != a {
            return None;
        }
        match self {
            Add | Sub | Mul | Neg | Abs | Signum if a.is_numeric() => Some(a),
            Div | Exp | Log | Sin | Cos | Tanh | Sqrt if a == Kind::Real => Some(Kind::Real),
            IDiv | Mod if a == Kind::Int => Some(Kind::Int),
            Lt | Le | Gt | Ge if a.is_numeric() => Some(Kind::Bool),
            Eq | Ne => Some(Kind::Bool),
            And | Or | Not if a == Kind::Bool => Some(Kind::Bool),
            ToReal if a == Kind::Int => Some(Kind::Real),
            Floor if a == Kind::Real => Some(Kind::Int),
            _ => None,
        }
    }
}

impl fmt::Display for PrimOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flooring integer division; 0 when dividing by zero.
pub fn floor_div(a: i64, b: i64) -> i64 {
    if b == 0 {
        return 0;
    }
    let q = a.wrapping_div(b);
    if a.wrapping_rem(b) != 0 && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

/// Remainder matching [`floor_div`]; takes the sign of the divisor.
pub fn floor_mod(a: i64, b: i64) -> i64 {
    if b == 0 {
        return 0;
    }
    a.wrapping_sub(b.wrapping_mul(floor_div(a, b)))
}

fn signum_f(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        x
    }
}

fn map_op(op: PrimOp, args: &[&ConcreteArray]) -> ConcreteArray {
    use PrimOp::*;
    assert_eq!(args.len(), op.arity(), "wrong number of operands for {op}");
    let shape = args[0].shape.clone();
    for a in args {
        assert_eq!(a.shape, shape, "operands of {op} differ in shape");
    }
    let out = if op.arity() == 2 {
        match (&*args[0].data, &*args[1].data) {
            (Buffer::Real(x), Buffer::Real(y)) => {
                let z = x.iter().zip(y);
                match op {
                    Add => Buffer::Real(z.map(|(a, b)| a + b).collect()),
                    Sub => Buffer::Real(z.map(|(a, b)| a - b).collect()),
                    Mul => Buffer::Real(z.map(|(a, b)| a * b).collect()),
                    Div => Buffer::Real(z.map(|(a, b)| a / b).collect()),
                    Lt => Buffer::Bool(z.map(|(a, b)| a < b).collect()),
                    Le => Buffer::Bool(z.map(|(a, b)| a <= b).collect()),
                    Gt => Buffer::Bool(z.map(|(a, b)| a > b).collect()),
                    Ge => Buffer::Bool(z.map(|(a, b)| a >= b).collect()),
                    Eq => Buffer::Bool(z.map(|(a, b)| a == b).collect()),
                    Ne => Buffer::Bool(z.map(|(a, b)| a != b).collect()),
                    _ => panic!("{op} is not defined on reals"),
                }
            }
            (Buffer::Int(x), Buffer::Int(y)) => {
                let z = x.iter().zip(y);
                match op {
                    Add => Buffer::Int(z.map(|(a, b)| a.wrapping_add(*b)).collect()),
                    Sub => Buffer::Int(z.map(|(a, b)| a.wrapping_sub(*b)).collect()),
                    Mul => Buffer::Int(z.map(|(a, b)| a.wrapping_mul(*b)).collect()),
                    IDiv => Buffer::Int(z.map(|(a, b)| floor_div(*a, *b)).collect()),
                    Mod => Buffer::Int(z.map(|(a, b)| floor_mod(*a, *b)).collect()),
                    Lt => Buffer::Bool(z.map(|(a, b)| a < b).collect()),
                    Le => Buffer::Bool(z.map(|(a, b)| a <= b).collect()),
                    Gt => Buffer::Bool(z.map(|(a, b)| a > b).collect()),
                    Ge => Buffer::Bool(z.map(|(a, b)| a >= b).collect()),
                    Eq => Buffer::Bool(z.map(|(a, b)| a == b).collect()),
                    Ne => Buffer::Bool(z.map(|(a, b)| a != b).collect()),
                    _ => panic!("{op} is not defined on ints"),
                }
            }
            (Buffer::Bool(x), Buffer::Bool(y)) => {
                let z = x.iter().zip(y);
                match op {
                    And => Buffer::Bool(z.map(|(a, b)| *a && *b).collect()),
                    Or => Buffer::Bool(z.map(|(a, b)| *a || *b).collect()),
                    Eq => Buffer::Bool(z.map(|(a, b)| a == b).collect()),
                    Ne => Buffer::Bool(z.map(|(a, b)| a != b).collect()),
                    _ => panic!("{op} is not defined on bools"),
                }
            }
            _ => panic!("operands of {op} differ in kind"),
        }
    } else {
        match &*args[0].data {
            Buffer::Real(x) => {
                let f: fn(f64) -> f64 = match op {
                    Neg => |a| -a,
                    Abs => f64::abs,
                    Signum => signum_f,
                    Exp => f64::exp,
                    Log => f64::ln,
                    Sin => f64::sin,
                    Cos => f64::cos,
                    Tanh => f64::tanh,
                    Sqrt => f64::sqrt,
                    Floor => {
                        return ConcreteArray::from_buffer(
                            shape,
                            Buffer::Int(x.iter().map(|a| a.floor() as i64).collect()),
                        )
                    }
                    _ => panic!("{op} is not defined on reals"),
                };
                Buffer::Real(x.iter().map(|&a| f(a)).collect())
            }
            Buffer::Int(x) => match op {
                Neg => Buffer::Int(x.iter().map(|a| a.wrapping_neg()).collect()),
                Abs => Buffer::Int(x.iter().map(|a| a.wrapping_abs()).collect()),
                Signum => Buffer::Int(x.iter().map(|a| a.signum()).collect()),
                ToReal => Buffer::Real(x.iter().map(|&a| a as f64).collect()),
                _ => panic!("{op} is not defined on ints"),
            },
            Buffer::Bool(x) => match op {
                Not => Buffer::Bool(x.iter().map(|a| !a).collect()),
                _ => panic!("{op} is not defined on bools"),
            },
        }
    };
    ConcreteArray::from_buffer(shape, out)
}

/// One element of an array literal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scalar {
    Real(f64),
    Int(i64),
    Bool(bool),
}

impl ConcreteArray {
    /// Builds an array from literal elements, widening integers for reals.
    pub fn from_scalars(kind: Kind, shape: Shape, data: &[Scalar]) -> Result<Self, ArrayFormatError> {
        let bad = |s: &Scalar| ArrayFormatError(format!("element {s:?} does not fit kind {kind}"));
        let buf = match kind {
            Kind::Real => Buffer::Real(
                data.iter()
                    .map(|s| match s {
                        Scalar::Real(x) => Ok(*x),
                        Scalar::Int(x) => Ok(*x as f64),
                        _ => Err(bad(s)),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            Kind::Int => Buffer::Int(
                data.iter()
                    .map(|s| match s {
                        Scalar::Int(x) => Ok(*x),
                        _ => Err(bad(s)),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            Kind::Bool => Buffer::Bool(
                data.iter()
                    .map(|s| match s {
                        Scalar::Bool(x) => Ok(*x),
                        _ => Err(bad(s)),
                    })
                    .collect::<Result<_, _>>()?,
            ),
        };
        Self::new(shape, buf)
    }

    pub fn scalars(&self) -> Vec<Scalar> {
        match &*self.data {
            Buffer::Real(v) => v.iter().map(|&x| Scalar::Real(x)).collect(),
            Buffer::Int(v) => v.iter().map(|&x| Scalar::Int(x)).collect(),
            Buffer::Bool(v) => v.iter().map(|&x| Scalar::Bool(x)).collect(),
        }
    }
}

/// Formats a real so that it parses back to the same bits.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

pub fn parse_scalar(tok: &str) -> Option<Scalar> {
    match tok {
        "true" => return Some(Scalar::Bool(true)),
        "false" => return Some(Scalar::Bool(false)),
        "nan" => return Some(Scalar::Real(f64::NAN)),
        "inf" => return Some(Scalar::Real(f64::INFINITY)),
        "-inf" => return Some(Scalar::Real(f64::NEG_INFINITY)),
        _ => {}
    }
    if let Ok(i) = tok.parse::<i64>() {
        return Some(Scalar::Int(i));
    }
    tok.parse::<f64>().ok().map(Scalar::Real)
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Real(x) => f.write_str(&format_real(*x)),
            Scalar::Int(x) => write!(f, "{x}"),
            Scalar::Bool(x) => write!(f, "{x}"),
        }
    }
}

/// `array f64 [2,3] [1.0,2.0,3.0,4.0,5.0,6.0]`
impl fmt::Display for ConcreteArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "array {} {} [", self.kind(), self.shape)?;
        for (i, s) in self.scalars().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, "]")
    }
}

impl FromStr for ConcreteArray {
    type Err = ArrayFormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |m: &str| ArrayFormatError(m.to_string());
        let rest = s.trim().strip_prefix("array").ok_or_else(|| err("expected `array`"))?;
        let rest = rest.trim_start();
        let (kind, rest) = rest.split_once(char::is_whitespace).ok_or_else(|| err("missing kind"))?;
        let kind: Kind = kind.parse()?;
        let (shape_txt, rest) = bracketed(rest.trim_start()).ok_or_else(|| err("missing shape"))?;
        let (data_txt, rest) = bracketed(rest.trim_start()).ok_or_else(|| err("missing data"))?;
        if !rest.trim().is_empty() {
            return Err(err("trailing text"));
        }
        let dims = split_items(shape_txt)
            .map(|t| t.parse::<usize>().map_err(|_| err("bad dimension")))
            .collect::<Result<Vec<_>, _>>()?;
        let data = split_items(data_txt)
            .map(|t| parse_scalar(t).ok_or_else(|| err("bad element")))
            .collect::<Result<Vec<_>, _>>()?;
        ConcreteArray::from_scalars(kind, Shape::new(dims), &data)
    }
}

fn bracketed(s: &str) -> Option<(&str, &str)> {
    let s = s.strip_prefix('[')?;
    let end = s.find(']')?;
    Some((&s[..end], &s[end + 1..]))
}

fn split_items(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty())
}

#[derive(Serialize, Deserialize)]
struct ArrayRepr {
    kind: Kind,
    shape: Vec<usize>,
    data: Vec<serde_json::Value>,
}

impl Serialize for ConcreteArray {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let data = match &*self.data {
            Buffer::Real(v) => v.iter().map(|&x| serde_json::Value::from(x)).collect(),
            Buffer::Int(v) => v.iter().map(|&x| serde_json::Value::from(x)).collect(),
            Buffer::Bool(v) => v.iter().map(|&x| serde_json::Value::from(x)).collect(),
        };
        ArrayRepr { kind: self.kind(), shape: self.shape.dims().to_vec(), data }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConcreteArray {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = ArrayRepr::deserialize(d)?;
        let data = r
            .data
            .iter()
            .map(|v| match v {
                serde_json::Value::Bool(b) => Ok(Scalar::Bool(*b)),
                serde_json::Value::Number(n) => match n.as_i64() {
                    Some(i) => Ok(Scalar::Int(i)),
                    None => Ok(Scalar::Real(n.as_f64().unwrap_or(f64::NAN))),
                },
                serde_json::Value::Null => Ok(Scalar::Real(f64::NAN)),
                _ => Err(D::Error::custom("array elements must be numbers or booleans")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        ConcreteArray::from_scalars(r.kind, Shape::new(r.shape), &data).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(d: &[usize]) -> Shape {
        Shape::new(d.to_vec())
    }

    #[test]
    fn index_examples() {
        let a = ConcreteArray::real(sh(&[2, 2]), vec![1., 2., 3., 4.]);
        assert_eq!(a.index(&[]), a);
        assert_eq!(a.index(&[1, 0]), ConcreteArray::scalar_real(3.));
        let v = ConcreteArray::vector(vec![1., 2., 3.]);
        assert_eq!(v.index(&[5]), ConcreteArray::scalar_real(0.));
        assert_eq!(v.index(&[-1]), ConcreteArray::scalar_real(0.));
        let b = ConcreteArray::bool(sh(&[2]), vec![true, true]);
        assert_eq!(b.index(&[2]), ConcreteArray::scalar_bool(false));
    }

    #[test]
    fn gather_examples() {
        let a = ConcreteArray::vector(vec![10., 20., 30.]);
        assert_eq!(a.gather(&sh(&[3]), 1, &|p| vec![p[0]]), a);
        let a = ConcreteArray::vector(vec![1., 2., 3.]);
        let r = a.gather(&sh(&[3]), 1, &|p| vec![3 - 1 - p[0]]);
        assert_eq!(r, ConcreteArray::vector(vec![3., 2., 1.]));
        let a = ConcreteArray::vector(vec![5., 6., 7.]);
        let r = a.gather(&sh(&[2]), 1, &|p| vec![p[0] + 9]);
        assert_eq!(r, ConcreteArray::vector(vec![0., 0.]));
    }

    #[test]
    fn gather_with_no_binders_reads_a_subarray() {
        let a = ConcreteArray::real(sh(&[2, 2]), vec![1., 2., 3., 4.]);
        assert_eq!(a.gather(&sh(&[2]), 0, &|_| vec![1]), ConcreteArray::vector(vec![3., 4.]));
    }

    #[test]
    fn scatter_examples() {
        let a = ConcreteArray::vector((1..=9).map(|x| x as f64).collect());
        let r = a.scatter(&sh(&[6]), 1, &|p| vec![floor_div(p[0], 2)]);
        assert_eq!(r, ConcreteArray::vector(vec![3., 7., 11., 15., 9., 0.]));
        let a = ConcreteArray::vector(vec![1., 2., 3.]);
        assert_eq!(a.scatter(&sh(&[3]), 1, &|p| vec![p[0]]), a);
        assert_eq!(a.scatter(&sh(&[2]), 1, &|_| vec![5]), ConcreteArray::vector(vec![0., 0.]));
    }

    #[test]
    fn sum_outer_examples() {
        let a = ConcreteArray::real(sh(&[3, 3]), (1..=9).map(|x| x as f64).collect());
        assert_eq!(a.sum_outer(), ConcreteArray::vector(vec![12., 15., 18.]));
        let x = ConcreteArray::vector(vec![1.5, -2.]);
        assert_eq!(x.replicate(4).sum_outer(), ConcreteArray::vector(vec![6., -8.]));
        let e = ConcreteArray::zeros(Kind::Real, sh(&[0, 3]));
        assert_eq!(e.sum_outer(), ConcreteArray::vector(vec![0., 0., 0.]));
    }

    #[test]
    fn replicate_examples() {
        let a = ConcreteArray::vector(vec![1., 2.]);
        assert_eq!(a.replicate(2), ConcreteArray::real(sh(&[2, 2]), vec![1., 2., 1., 2.]));
        assert_eq!(a.replicate(0).shape(), &sh(&[0, 2]));
        let one = ConcreteArray::vector(vec![1.0]);
        assert_eq!(one.replicate(3).sum_outer(), ConcreteArray::vector(vec![3.0]));
    }

    #[test]
    fn transpose_examples() {
        let a = ConcreteArray::real(sh(&[2, 2]), vec![1., 2., 3., 4.]);
        assert_eq!(a.transpose(&[0]), a);
        assert_eq!(a.transpose(&[1, 0]), ConcreteArray::real(sh(&[2, 2]), vec![1., 3., 2., 4.]));
        let b = ConcreteArray::zeros(Kind::Real, sh(&[5, 3, 6, 9]));
        assert_eq!(b.transpose(&[3, 0, 1, 2]).shape(), &sh(&[9, 5, 3, 6]));
    }

    #[test]
    fn transpose_moves_elements() {
        let data: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let a = ConcreteArray::real(sh(&[2, 3, 4]), data);
        let t = a.transpose(&[2, 0, 1]);
        assert_eq!(t.shape(), &sh(&[4, 2, 3]));
        for_each_index(&[4, 2, 3], |o| {
            let src = [o[1], o[2], o[0]];
            assert_eq!(t.index(o), a.index(&src));
        });
    }

    #[test]
    fn reshape_and_stack() {
        let a = ConcreteArray::real(sh(&[2, 2]), vec![1., 2., 3., 4.]);
        assert_eq!(a.reshape(&sh(&[4])), ConcreteArray::vector(vec![1., 2., 3., 4.]));
        assert_eq!(a.reshape(&sh(&[4])).reshape(&sh(&[2, 2])), a);
        let u = ConcreteArray::vector(vec![1.]);
        let v = ConcreteArray::vector(vec![2.]);
        let s = ConcreteArray::from_subarrays(&[u.clone(), v.clone()]);
        assert_eq!(s, ConcreteArray::real(sh(&[2, 1]), vec![1., 2.]));
        assert_eq!(s.index(&[1]), v);
        assert_eq!(ConcreteArray::from_subarrays(&[u.clone()]), u.replicate(1));
    }

    #[test]
    fn one_hot_examples() {
        let r = ConcreteArray::one_hot(&sh(&[3]), &[1], &ConcreteArray::scalar_real(7.));
        assert_eq!(r, ConcreteArray::vector(vec![0., 7., 0.]));
        let r = ConcreteArray::one_hot(&sh(&[2, 2]), &[0], &ConcreteArray::vector(vec![1., 2.]));
        assert_eq!(r, ConcreteArray::real(sh(&[2, 2]), vec![1., 2., 0., 0.]));
        let r = ConcreteArray::one_hot(&sh(&[2]), &[4], &ConcreteArray::scalar_real(1.));
        assert_eq!(r, ConcreteArray::vector(vec![0., 0.]));
    }

    #[test]
    fn map_op_examples() {
        let a = ConcreteArray::vector(vec![1., 2.]);
        let b = ConcreteArray::vector(vec![3., 4.]);
        assert_eq!(map_op(PrimOp::Add, &[&a, &b]), ConcreteArray::vector(vec![4., 6.]));
        let a = ConcreteArray::vector(vec![2., 3.]);
        let b = ConcreteArray::vector(vec![4., 5.]);
        assert_eq!(map_op(PrimOp::Mul, &[&a, &b]), ConcreteArray::vector(vec![8., 15.]));
        let d = |x, y| {
            map_op(PrimOp::IDiv, &[&ConcreteArray::scalar_int(x), &ConcreteArray::scalar_int(y)])
        };
        assert_eq!(d(8, 2), ConcreteArray::scalar_int(4));
        assert_eq!(d(-7, 2), ConcreteArray::scalar_int(-4));
        assert_eq!(d(5, 0), ConcreteArray::scalar_int(0));
    }

    #[test]
    fn flooring_matches_rationals() {
        for a in -20i64..=20 {
            for b in -6i64..=6 {
                if b == 0 {
                    assert_eq!(floor_div(a, b), 0);
                    assert_eq!(floor_mod(a, b), 0);
                    continue;
                }
                let q = (a as f64 / b as f64).floor() as i64;
                assert_eq!(floor_div(a, b), q, "{a} div {b}");
                assert_eq!(floor_mod(a, b), a - b * q, "{a} mod {b}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let a = ConcreteArray::real(sh(&[2, 3]), vec![1., 2., 3., 4., 5., 0.1]);
        let s = a.to_string();
        assert_eq!(s, "array f64 [2,3] [1.0,2.0,3.0,4.0,5.0,0.1]");
        assert!(s.parse::<ConcreteArray>().unwrap().bit_eq(&a));
        let p: ConcreteArray = "array f64 [2,3] [1,2,3,4,5,6]".parse().unwrap();
        assert_eq!(p.as_real(), &[1., 2., 3., 4., 5., 6.]);
        let b: ConcreteArray = "array bool [] [true]".parse().unwrap();
        assert_eq!(b, ConcreteArray::scalar_bool(true));
        assert!("array i64 [2] [1.5,2]".parse::<ConcreteArray>().is_err());
        assert!("array f64 [3] [1,2]".parse::<ConcreteArray>().is_err());
    }

    #[test]
    fn json_round_trip() {
        let a = ConcreteArray::int(sh(&[2]), vec![3, -4]);
        let j = serde_json::to_string(&a).unwrap();
        assert_eq!(j, r#"{"kind":"i64","shape":[2],"data":[3,-4]}"#);
        let b: ConcreteArray = serde_json::from_str(&j).unwrap();
        assert_eq!(a, b);
        let r: ConcreteArray =
            serde_json::from_str(r#"{"kind":"f64","shape":[2,1],"data":[1,2.5]}"#).unwrap();
        assert_eq!(r.as_real(), &[1.0, 2.5]);
    }
}
