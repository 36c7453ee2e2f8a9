//! Independent checks: central finite differences, a random generator of
//! well-typed programs and inputs, and a fixed suite of test programs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::interp::{eval, Env};
use crate::ir::{check_program, parse_program, ArrayType, IxFn, Name, Param, Program, Term, TermRef, Type};
use crate::tensor::{ConcreteArray, Kind, PrimOp, Shape};

/// Central-difference gradient of a rank-0 real program. The step for
/// component `x` is `h * max(1, |x|)`.
pub fn finite_diff_grad(p: &Program, inputs: &Env, h: f64) -> BTreeMap<Name, ConcreteArray> {
    assert!(h > 0.0);
    let f = |env: &Env| eval(&p.body, env).scalar_value_real();
    let mut out = BTreeMap::new();
    for q in p.real_params() {
        let x = inputs[&q.name].clone();
        let base = x.as_real().to_vec();
        let mut g = vec![0.0; base.len()];
        for i in 0..base.len() {
            let hi = h * base[i].abs().max(1.0);
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut env = inputs.clone();
                env.insert(q.name.clone(), ConcreteArray::real(x.shape().clone(), v));
                f(&env)
            };
            let (up, down) = (probe(hi), probe(-hi));
            g[i] = (up - down) / (2.0 * hi);
        }
        out.insert(q.name.clone(), ConcreteArray::real(x.shape().clone(), g));
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest per-component relative error between two gradient maps with the
/// same keys and shapes.
pub fn max_rel_err(a: &BTreeMap<Name, ConcreteArray>, b: &BTreeMap<Name, ConcreteArray>, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, x) in a {
        let y = &b[k];
        assert_eq!(x.shape(), y.shape(), "gradient shapes differ for {k}");
        for (u, v) in x.as_real().iter().zip(y.as_real()) {
            let e = rel_err(*u, *v, floor);
            worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    worst
}

/// Random inputs for `params`: reals in [-1.5, 1.5] kept at least 0.05 away
/// from zero, integers in [0, 6), booleans uniform.
pub fn gen_input(seed: u64, params: &[Param]) -> Env {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut env = Env::new();
    for p in params {
        let sh = p.ty.shape.clone();
        let n = sh.size();
        let a = match p.ty.kind {
            Kind::Real => ConcreteArray::real(
                sh,
                (0..n)
                    .map(|_| {
                        let v: f64 = rng.gen_range(0.05..1.5);
                        if rng.gen_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect(),
            ),
            Kind::Int => ConcreteArray::int(sh, (0..n).map(|_| rng.gen_range(0..6)).collect()),
            Kind::Bool => ConcreteArray::bool(sh, (0..n).map(|_| rng.gen_bool(0.5)).collect()),
        };
        env.insert(p.name.clone(), a);
    }
    env
}

/// A rank-0 real program; identical for identical arguments.
pub fn gen_program(seed: u64, size_budget: usize) -> Program {
    gen_program_of(seed, size_budget, ArrayType::scalar(Kind::Real))
}

/// A program with result type `ty`, resampled until it checks and its value
/// stays within 1e6 in magnitude on three random inputs.
pub fn gen_program_of(seed: u64, size_budget: usize, ty: ArrayType) -> Program {
    for attempt in 0.. {
        let mut g = Gen::new(seed.wrapping_mul(1_000_003).wrapping_add(attempt), size_budget);
        let p = g.program(&ty);
        match check_program(&p) {
            Ok(Type::Array(t)) if t == ty => {}
            other => panic!("generator produced an ill-typed program ({other:?}):\n{}", p.body),
        }
        let tame = (0..3).all(|k| {
            let v = eval(&p.body, &gen_input(seed.wrapping_add(k), &p.params));
            match v.buffer() {
                crate::tensor::Buffer::Real(xs) => xs.iter().all(|x| x.is_finite() && x.abs() <= 1e6),
                crate::tensor::Buffer::Int(xs) => xs.iter().all(|x| x.abs() <= 1_000_000),
                _ => true,
            }
        });
        if tame {
            return p;
        }
    }
    unreachable!()
}

/// `n` programs with mixed result kinds and shapes: three in five real,
/// then integer, then boolean.
pub fn corpus(n: usize, size_budget: usize) -> Vec<Program> {
    (0..n as u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
            let kind = match seed % 5 {
                3 => Kind::Int,
                4 => Kind::Bool,
                _ => Kind::Real,
            };
            let r = rng.gen_range(0..=2);
            let sh = Shape::new((0..r).map(|_| rng.gen_range(1..=MAX_DIM)).collect());
            gen_program_of(seed, size_budget, ArrayType::new(sh, kind))
        })
        .collect()
}

/// Names of the term productions, in grammar order.
pub const PRODUCTIONS: [&str; 14] = [
    "const", "var", "let", "cond", "op", "index", "sumouter", "gather", "scatter", "ravel", "replicate", "tr",
    "reshape", "build1",
];

pub fn production_name(t: &Term) -> &'static str {
    match t {
        Term::Const(_) => "const",
        Term::Var(_) => "var",
        Term::Let(..) => "let",
        Term::Cond(..) => "cond",
        Term::Op(..) => "op",
        Term::Index(..) => "index",
        Term::SumOuter(_) => "sumouter",
        Term::Gather(..) => "gather",
        Term::Scatter(..) => "scatter",
        Term::Ravel(_) => "ravel",
        Term::Replicate(..) => "replicate",
        Term::Transpose(..) => "tr",
        Term::Reshape(..) => "reshape",
        Term::Build1(..) => "build1",
        Term::Share(..) => "share",
        Term::Tuple(_) => "tuple",
    }
}

/// Counts of each production occurring in `t`.
pub fn production_counts(t: &Term, counts: &mut BTreeMap<&'static str, usize>) {
    *counts.entry(production_name(t)).or_default() += 1;
    for c in t.children() {
        production_counts(c, counts);
    }
}

struct Binding {
    name: Name,
    ty: ArrayType,
    /// For integer scalars known to lie in `[0, k)`.
    range: Option<usize>,
}

struct Gen {
    rng: ChaCha8Rng,
    budget: usize,
    scope: Vec<Binding>,
    next: usize,
}

const MAX_RANK: usize = 3;
const MAX_DIM: usize = 4;

impl Gen {
    fn new(seed: u64, budget: usize) -> Self {
        Gen { rng: ChaCha8Rng::seed_from_u64(seed), budget, scope: Vec::new(), next: 0 }
    }

    fn fresh(&mut self, base: &str) -> Name {
        self.next += 1;
        Name::new(&format!("{base}{}", self.next))
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn dim(&mut self) -> usize {
        self.rng.gen_range(1..=MAX_DIM)
    }

    fn shape(&mut self, max_rank: usize) -> Shape {
        let r = self.rng.gen_range(0..=max_rank);
        Shape::new((0..r).map(|_| self.dim()).collect())
    }

    fn program(&mut self, ty: &ArrayType) -> Program {
        let n_real = self.rng.gen_range(1..=3);
        let mut params = Vec::new();
        for _ in 0..n_real {
            let sh = self.shape(2);
            params.push(Param { name: self.fresh("x"), ty: ArrayType::new(sh, Kind::Real) });
        }
        if self.chance(0.35) {
            let sh = self.shape(1);
            params.push(Param { name: self.fresh("n"), ty: ArrayType::new(sh, Kind::Int) });
        }
        for p in &params {
            self.scope.push(Binding { name: p.name.clone(), ty: p.ty.clone(), range: None });
        }
        let body = self.term(ty.kind, &ty.shape, 6);
        self.scope.clear();
        Program::new(params, body)
    }

    fn with<T>(&mut self, b: Binding, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(b);
        let r = f(self);
        self.scope.pop();
        r
    }

    fn with_all<T>(&mut self, bs: Vec<Binding>, f: impl FnOnce(&mut Self) -> T) -> T {
        let n = self.scope.len();
        self.scope.extend(bs);
        let r = f(self);
        self.scope.truncate(n);
        r
    }

    fn vars_of(&self, kind: Kind, sh: &Shape) -> Vec<Name> {
        self.scope
            .iter()
            .filter(|b| b.ty.kind == kind && b.ty.shape == *sh)
            .map(|b| b.name.clone())
            .collect()
    }

    fn constant(&mut self, kind: Kind, sh: &Shape) -> TermRef {
        let n = sh.size();
        let a = match kind {
            Kind::Real => {
                ConcreteArray::real(sh.clone(), (0..n).map(|_| (self.rng.gen_range(-20..=20) as f64) / 10.0).collect())
            }
            Kind::Int => ConcreteArray::int(sh.clone(), (0..n).map(|_| self.rng.gen_range(0..4)).collect()),
            Kind::Bool => ConcreteArray::bool(sh.clone(), (0..n).map(|_| self.rng.gen_bool(0.5)).collect()),
        };
        Term::constant(a)
    }

    fn leaf(&mut self, kind: Kind, sh: &Shape) -> TermRef {
        let vs = self.vars_of(kind, sh);
        if !vs.is_empty() && self.chance(0.75) {
            return Term::var(vs.choose(&mut self.rng).unwrap().clone());
        }
        if sh.rank() > 0 && self.chance(0.3) {
            let inner = self.leaf(kind, &sh.suffix(1));
            return Term::replicate(sh.dims()[0], inner);
        }
        self.constant(kind, sh)
    }

    fn ones(&self, sh: &Shape) -> TermRef {
        Term::constant(ConcreteArray::fill(sh.clone(), 1.0))
    }

    /// An integer scalar guaranteed to lie in `[0, k)`.
    fn index_expr(&mut self, k: usize, depth: usize) -> TermRef {
        let exact: Vec<Name> = self.scope.iter().filter(|b| b.range == Some(k)).map(|b| b.name.clone()).collect();
        let ints: Vec<Name> = self
            .scope
            .iter()
            .filter(|b| b.ty.kind == Kind::Int && b.ty.shape.rank() == 0)
            .map(|b| b.name.clone())
            .collect();
        let roll: f64 = self.rng.gen();
        let kk = Term::int(k as i64);
        if roll < 0.4 && !exact.is_empty() {
            let v = Term::var(exact.choose(&mut self.rng).unwrap().clone());
            if self.chance(0.3) {
                return Term::op2(PrimOp::Sub, Term::int(k as i64 - 1), v);
            }
            return v;
        }
        if roll < 0.65 && !ints.is_empty() {
            let v = Term::var(ints.choose(&mut self.rng).unwrap().clone());
            let c = Term::int(self.rng.gen_range(0..4));
            return Term::op2(PrimOp::Mod, Term::op2(PrimOp::Add, v, c), kk);
        }
        if roll < 0.8 && depth > 0 && self.budget > 0 {
            let e = self.term(Kind::Int, &Shape::scalar(), depth.min(2));
            return Term::op2(PrimOp::Mod, e, kk);
        }
        Term::int(self.rng.gen_range(0..k as i64))
    }

    fn term(&mut self, kind: Kind, sh: &Shape, depth: usize) -> TermRef {
        if depth == 0 || self.budget == 0 {
            return self.leaf(kind, sh);
        }
        self.budget -= 1;
        let r = sh.rank();
        let mut choices: Vec<(&str, u32)> = vec![("leaf", 2), ("op", 6), ("let", 2), ("cond", 1)];
        if r < MAX_RANK {
            choices.push(("index", 3));
            if kind.is_numeric() {
                choices.push(("sumouter", 3));
            }
            choices.push(("gather", 2));
            if kind.is_numeric() {
                choices.push(("scatter", 2));
            }
        }
        if r >= 1 {
            choices.extend([("replicate", 1), ("build1", 5), ("reshape", 1)]);
            if sh.dims()[0] <= 3 {
                choices.push(("ravel", 1));
            }
        }
        if r >= 2 {
            choices.push(("tr", 2));
        }
        if kind == Kind::Real {
            choices.push(("toreal", 1));
        }
        let pick = choices.choose_weighted(&mut self.rng, |c| c.1).unwrap().0;
        let d = depth - 1;
        match pick {
            "leaf" => self.leaf(kind, sh),
            "op" => self.op(kind, sh, d),
            "toreal" => Term::op1(PrimOp::ToReal, self.term(Kind::Int, sh, d)),
            "let" => {
                let k = if self.chance(0.7) { Kind::Real } else { Kind::Int };
                let s = self.shape(2);
                let u = self.term(k, &s, d);
                let x = self.fresh("v");
                let body = self.with(Binding { name: x.clone(), ty: ArrayType::new(s, k), range: None }, |g| {
                    g.term(kind, sh, d)
                });
                Term::let_(x, u, body)
            }
            "cond" => {
                let a = self.term(Kind::Int, &Shape::scalar(), d.min(2));
                let b = self.term(Kind::Int, &Shape::scalar(), d.min(2));
                let cmp = *[PrimOp::Lt, PrimOp::Le, PrimOp::Eq, PrimOp::Ne].choose(&mut self.rng).unwrap();
                let u = self.term(kind, sh, d);
                let v = self.term(kind, sh, d);
                Term::cond(Term::op2(cmp, a, b), u, v)
            }
            "index" => {
                let m = self.rng.gen_range(1..=(MAX_RANK - r).min(2));
                let outer: Vec<usize> = (0..m).map(|_| self.dim()).collect();
                let a = self.term(kind, &Shape::new(outer.iter().copied().chain(sh.dims().iter().copied()).collect()), d);
                let ix = outer.iter().map(|&k| self.index_expr(k, d)).collect();
                Term::index(a, ix)
            }
            "sumouter" => {
                let k = self.dim();
                Term::sum_outer(self.term(kind, &sh.cons(k), d))
            }
            "gather" => {
                let m1 = self.rng.gen_range(0..=r.min(2));
                let rest = sh.suffix(m1);
                let m2 = self.rng.gen_range(0..=(MAX_RANK - rest.rank()).min(2));
                let outer: Vec<usize> = (0..m2).map(|_| self.dim()).collect();
                let a_sh = Shape::new(outer.iter().copied().chain(rest.dims().iter().copied()).collect());
                let a = self.term(kind, &a_sh, d);
                let params: Vec<Name> = (0..m1).map(|_| self.fresh("p")).collect();
                let bs = params
                    .iter()
                    .zip(sh.dims())
                    .map(|(p, &k)| Binding { name: p.clone(), ty: ArrayType::scalar(Kind::Int), range: Some(k) })
                    .collect();
                let body = self.with_all(bs, |g| outer.iter().map(|&k| g.index_expr(k, d)).collect());
                Term::gather(sh.clone(), a, IxFn::new(params, body))
            }
            "scatter" => {
                let m2 = self.rng.gen_range(0..=r.min(2));
                let rest = sh.suffix(m2);
                let m1 = self.rng.gen_range(0..=(MAX_RANK - rest.rank()).min(2));
                let outer: Vec<usize> = (0..m1).map(|_| self.dim()).collect();
                let a_sh = Shape::new(outer.iter().copied().chain(rest.dims().iter().copied()).collect());
                let a = self.term(kind, &a_sh, d);
                let params: Vec<Name> = (0..m1).map(|_| self.fresh("p")).collect();
                let bs = params
                    .iter()
                    .zip(&outer)
                    .map(|(p, &k)| Binding { name: p.clone(), ty: ArrayType::scalar(Kind::Int), range: Some(k) })
                    .collect();
                let targets = sh.dims()[..m2].to_vec();
                let body = self.with_all(bs, |g| targets.iter().map(|&k| g.index_expr(k, d)).collect());
                Term::scatter(sh.clone(), a, IxFn::new(params, body))
            }
            "ravel" => {
                let inner = sh.suffix(1);
                let parts = (0..sh.dims()[0]).map(|_| self.term(kind, &inner, d)).collect();
                Term::ravel(parts)
            }
            "replicate" => Term::replicate(sh.dims()[0], self.term(kind, &sh.suffix(1), d)),
            "tr" => {
                let k = self.rng.gen_range(2..=r);
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut self.rng);
                let mut src = sh.dims().to_vec();
                for (dd, &p) in perm.iter().enumerate() {
                    src[p] = sh.dims()[dd];
                }
                Term::transpose(perm, self.term(kind, &Shape::new(src), d))
            }
            "reshape" => {
                let size = sh.size();
                let mut cands = vec![Shape::new(vec![size]), Shape::new(sh.dims().iter().rev().copied().collect())];
                if r >= 2 {
                    let mut v = vec![sh.dims()[0] * sh.dims()[1]];
                    v.extend_from_slice(&sh.dims()[2..]);
                    cands.push(Shape::new(v));
                }
                if size <= MAX_DIM {
                    cands.push(Shape::new(vec![1, size]));
                }
                let src = cands.choose(&mut self.rng).unwrap().clone();
                Term::reshape(sh.clone(), self.term(kind, &src, d))
            }
            "build1" => {
                let k = sh.dims()[0];
                let i = self.fresh("i");
                let b = Binding { name: i.clone(), ty: ArrayType::scalar(Kind::Int), range: Some(k) };
                let body = self.with(b, |g| g.term(kind, &sh.suffix(1), d));
                Term::build1(k, i, body)
            }
            _ => unreachable!(),
        }
    }

    fn op(&mut self, kind: Kind, sh: &Shape, d: usize) -> TermRef {
        use PrimOp::*;
        match kind {
            Kind::Real => {
                let a = self.term(Kind::Real, sh, d);
                match self.rng.gen_range(0..11) {
                    0 => Term::op2(Add, a, self.term(Kind::Real, sh, d)),
                    1 => Term::op2(Sub, a, self.term(Kind::Real, sh, d)),
                    2 | 3 => Term::op2(Mul, a, self.term(Kind::Real, sh, d)),
                    4 => {
                        let b = self.term(Kind::Real, sh, d);
                        Term::op2(Div, a, Term::op2(Add, Term::op2(Mul, b.clone(), b), self.ones(sh)))
                    }
                    5 => Term::op1(Sin, a),
                    6 => Term::op1(Cos, a),
                    7 => Term::op1(Tanh, a),
                    8 => Term::op1(Neg, a),
                    9 => Term::op1(Exp, Term::op1(Tanh, a)),
                    _ => {
                        let sq = Term::op2(Add, Term::op2(Mul, a.clone(), a), self.ones(sh));
                        if self.chance(0.5) {
                            Term::op1(Log, sq)
                        } else {
                            Term::op1(Sqrt, sq)
                        }
                    }
                }
            }
            Kind::Int => {
                let a = self.term(Kind::Int, sh, d);
                match self.rng.gen_range(0..5) {
                    0 => Term::op2(Add, a, self.term(Kind::Int, sh, d)),
                    1 => Term::op2(Sub, a, self.term(Kind::Int, sh, d)),
                    2 => {
                        let k = self.rng.gen_range(1..5);
                        Term::op2(Mod, a, Term::constant(ConcreteArray::int(sh.clone(), vec![k; sh.size()])))
                    }
                    3 => {
                        let k = self.rng.gen_range(1..4);
                        Term::op2(IDiv, a, Term::constant(ConcreteArray::int(sh.clone(), vec![k; sh.size()])))
                    }
                    _ => {
                        let k = self.rng.gen_range(-2..3);
                        Term::op2(Mul, a, Term::constant(ConcreteArray::int(sh.clone(), vec![k; sh.size()])))
                    }
                }
            }
            Kind::Bool => {
                if self.chance(0.7) {
                    let a = self.term(Kind::Int, sh, d);
                    let b = self.term(Kind::Int, sh, d);
                    let cmp = *[Lt, Le, Gt, Ge, Eq, Ne].choose(&mut self.rng).unwrap();
                    Term::op2(cmp, a, b)
                } else if self.chance(0.5) {
                    Term::op1(Not, self.term(Kind::Bool, sh, d))
                } else {
                    let op = if self.chance(0.5) { And } else { Or };
                    Term::op2(op, self.term(Kind::Bool, sh, d), self.term(Kind::Bool, sh, d))
                }
            }
        }
    }
}

/// One program of the fixed gradient suite.
pub struct SuiteProgram {
    pub name: &'static str,
    pub source: &'static str,
}

impl SuiteProgram {
    pub fn program(&self) -> Program {
        parse_program(self.source).unwrap_or_else(|e| panic!("{}: {e}", self.name))
    }
}

pub const SUITE: [SuiteProgram; 12] = [
    SuiteProgram { name: "dot", source: include_str!("../programs/dot.adl") },
    SuiteProgram { name: "matmat_sum", source: include_str!("../programs/matmat_sum.adl") },
    SuiteProgram { name: "t_sc", source: include_str!("../programs/t_sc.adl") },
    SuiteProgram { name: "relu", source: include_str!("../programs/relu.adl") },
    SuiteProgram { name: "reshape_transpose", source: include_str!("../programs/reshape_transpose.adl") },
    SuiteProgram { name: "histogram", source: include_str!("../programs/histogram.adl") },
    SuiteProgram { name: "logsumexp", source: include_str!("../programs/logsumexp.adl") },
    SuiteProgram { name: "p1_chain", source: include_str!("../programs/p1_chain.adl") },
    SuiteProgram { name: "division_poly", source: include_str!("../programs/division_poly.adl") },
    SuiteProgram { name: "reverse_replicate", source: include_str!("../programs/reverse_replicate.adl") },
    SuiteProgram { name: "nested_let", source: include_str!("../programs/nested_let.adl") },
    SuiteProgram { name: "mlp_layer", source: include_str!("../programs/mlp_layer.adl") },
];

/// `sum_i a[i] * b[i]` over vectors of length `n`, written with `build1`.
pub fn dot_program(n: usize) -> Program {
    let src = format!(
        "(params (a f64 [{n}]) (b f64 [{n}]))\n(sumouter (build1 {n} (lam i (op * (index a [i]) (index b [i])))))"
    );
    parse_program(&src).expect("dot program")
}

/// `x1 = x + x; x2 = x1 + x1; ...` for `n` steps, returning `x_n`.
pub fn doubling_chain(n: usize) -> Program {
    let mut body = format!("(var x{n})");
    for k in (1..=n).rev() {
        let prev = if k == 1 { "x".to_string() } else { format!("x{}", k - 1) };
        body = format!("(let (x{k} (op + {prev} {prev})) {body})");
    }
    parse_program(&format!("(params (x f64 []))\n{body}")).expect("doubling chain")
}

/// Productions never produced across a corpus.
pub fn missing_productions<'a>(programs: impl IntoIterator<Item = &'a Program>) -> BTreeSet<&'static str> {
    let mut counts = BTreeMap::new();
    for p in programs {
        production_counts(&p.body, &mut counts);
    }
    PRODUCTIONS.iter().copied().filter(|n| !counts.contains_key(n)).collect()
}
