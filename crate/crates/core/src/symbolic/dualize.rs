//! Forward dualization of a BOT-normal term into a primal value and a Delta,
//! generic over the carrier: concrete arrays give the dual-array evaluator,
//! terms give the disentangled symbolic form.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use thiserror::Error;

use super::Symbolic;
use crate::delta::{Carrier, DVarName, Delta, IdGen};
use crate::interp::{check_env, eval, Env, EnvError};
use crate::ir::{
    check, contains_build1, free_vars, infer_array, subst, subst_ixfn, ArrayType, CheckError, IxFn, Name,
    NameGen, Param, Program, Term, TermRef, Type, TypeEnv,
};
use crate::reverse::{Concrete, ConcreteIxFun};
use crate::tensor::{ConcreteArray, Kind, PrimOp, Shape};

pub type PrimalEnv<A> = HashMap<Name, <A as Carrier>::Array>;

/// Primal operations a carrier must offer to be dualized into.
pub trait PrimalAlgebra: Carrier + Sized {
    fn constant(&self, c: &ConcreteArray) -> Self::Array;
    fn fill(&self, sh: &Shape, x: f64) -> Self::Array;
    fn prim(&self, op: PrimOp, args: &[Self::Array]) -> Self::Array;
    fn cond(&self, b: &Self::Array, u: &Self::Array, v: &Self::Array) -> Self::Array;
    fn index(&self, a: &Self::Array, ix: &Self::Index) -> Self::Array;
    fn ravel(&self, parts: &[Self::Array]) -> Self::Array;
    /// Marks a primal value that is used more than once.
    fn share_primal(&self, a: Self::Array) -> Self::Array;
    fn index_from(&self, comps: &[TermRef], env: &PrimalEnv<Self>) -> Self::Index;
    fn ix_fun(&self, f: &IxFn, env: &PrimalEnv<Self>) -> Self::IxFun;
    /// `[cond b 0 1]`: selects a slice of `ravel [u, v]`.
    fn branch_index(&self, b: &Self::Array) -> Self::Index;
}

pub type ConcreteAlgebra = Concrete;

impl PrimalAlgebra for Concrete {
    fn constant(&self, c: &ConcreteArray) -> ConcreteArray {
        c.clone()
    }

    fn fill(&self, sh: &Shape, x: f64) -> ConcreteArray {
        ConcreteArray::fill(sh.clone(), x)
    }

    fn prim(&self, op: PrimOp, args: &[ConcreteArray]) -> ConcreteArray {
        let refs: Vec<&ConcreteArray> = args.iter().collect();
        ConcreteArray::map_op(op, &refs)
    }

    fn cond(&self, b: &ConcreteArray, u: &ConcreteArray, v: &ConcreteArray) -> ConcreteArray {
        if b.scalar_value_bool() {
            u.clone()
        } else {
            v.clone()
        }
    }

    fn index(&self, a: &ConcreteArray, ix: &Vec<i64>) -> ConcreteArray {
        a.index(ix)
    }

    fn ravel(&self, parts: &[ConcreteArray]) -> ConcreteArray {
        ConcreteArray::from_subarrays(parts)
    }

    fn share_primal(&self, a: ConcreteArray) -> ConcreteArray {
        a
    }

    fn index_from(&self, comps: &[TermRef], env: &Env) -> Vec<i64> {
        comps.iter().map(|t| eval(t, env).scalar_value_int()).collect()
    }

    fn ix_fun(&self, f: &IxFn, env: &Env) -> ConcreteIxFun {
        let (params, body, env) = (f.params.clone(), f.body.clone(), env.clone());
        ConcreteIxFun {
            arity: params.len(),
            len: body.len(),
            f: Rc::new(move |is: &[i64]| {
                let mut e = env.clone();
                for (p, &i) in params.iter().zip(is) {
                    e.insert(p.clone(), ConcreteArray::scalar_int(i));
                }
                body.iter().map(|t| eval(t, &e).scalar_value_int()).collect()
            }),
        }
    }

    fn branch_index(&self, b: &ConcreteArray) -> Vec<i64> {
        vec![if b.scalar_value_bool() { 0 } else { 1 }]
    }
}

impl PrimalAlgebra for Symbolic {
    fn constant(&self, c: &ConcreteArray) -> TermRef {
        Term::constant(c.clone())
    }

    fn fill(&self, sh: &Shape, x: f64) -> TermRef {
        sh.dims().iter().rev().fold(Term::real(x), |t, &k| Term::replicate(k, t))
    }

    fn prim(&self, op: PrimOp, args: &[TermRef]) -> TermRef {
        Term::op(op, args.to_vec())
    }

    fn cond(&self, b: &TermRef, u: &TermRef, v: &TermRef) -> TermRef {
        Term::cond(b.clone(), u.clone(), v.clone())
    }

    fn index(&self, a: &TermRef, ix: &Vec<TermRef>) -> TermRef {
        Term::index(a.clone(), ix.clone())
    }

    fn ravel(&self, parts: &[TermRef]) -> TermRef {
        Term::ravel(parts.to_vec())
    }

    fn share_primal(&self, a: TermRef) -> TermRef {
        self.wrap(&a)
    }

    fn index_from(&self, comps: &[TermRef], env: &HashMap<Name, TermRef>) -> Vec<TermRef> {
        comps.iter().map(|t| subst(t, env, &self.names)).collect()
    }

    fn ix_fun(&self, f: &IxFn, env: &HashMap<Name, TermRef>) -> IxFn {
        subst_ixfn(f, env, &self.names)
    }

    fn branch_index(&self, b: &TermRef) -> Vec<TermRef> {
        vec![Term::cond(b.clone(), Term::int(0), Term::int(1))]
    }
}

#[derive(Debug, Error)]
pub enum DualizeError {
    #[error("program output must be a rank-0 f64 array, found {0}")]
    NonScalarOutput(String),
    #[error("term contains build1; vectorise it first")]
    ContainsBuild1,
    #[error("cannot differentiate a term containing {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// A primal value with its derivative; `None` stands for a zero or absent
/// derivative (integer and boolean values never carry one).
pub struct Dual<A: Carrier> {
    pub primal: A::Array,
    pub delta: Option<Delta<A>>,
}

impl<A: Carrier> Clone for Dual<A> {
    fn clone(&self) -> Self {
        Dual { primal: self.primal.clone(), delta: self.delta.clone() }
    }
}

thread_local! {
    static DUALIZE_CALLS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Number of [`dualize`] calls made so far on this thread.
pub fn dualize_count() -> usize {
    DUALIZE_CALLS.with(|c| c.get())
}

/// Dualizes `body` with `params` bound to `args`. Real parameters get
/// `Input 1..n` in declaration order.
pub fn dualize<A: PrimalAlgebra>(
    alg: &A,
    ids: &IdGen,
    params: &[Param],
    args: Vec<A::Array>,
    body: &TermRef,
) -> Result<(A::Array, Delta<A>), DualizeError> {
    DUALIZE_CALLS.with(|c| c.set(c.get() + 1));
    if contains_build1(body) {
        return Err(DualizeError::ContainsBuild1);
    }
    let tenv = TypeEnv::from_params(params);
    match check(body, &tenv)? {
        Type::Array(ty) if ty.shape.rank() == 0 && ty.kind == Kind::Real => {}
        other => return Err(DualizeError::NonScalarOutput(other.to_string())),
    }
    if crate::ir::any_node(body, &mut |n| matches!(n, Term::Share(..))) {
        return Err(DualizeError::Unsupported("share"));
    }
    let mut scope = Vec::new();
    let mut k = 0;
    for (p, a) in params.iter().zip(args) {
        let delta = (p.ty.kind == Kind::Real).then(|| {
            k += 1;
            Delta::input(DVarName { index: k, shape: p.ty.shape.clone() })
        });
        scope.push((p.name.clone(), Dual { primal: a, delta }));
    }
    let mut dz = Dualizer { alg, ids, tenv, scope };
    let r = dz.go(body);
    let d = r.delta.unwrap_or_else(|| Delta::zero(Shape::scalar()));
    Ok((r.primal, d))
}

/// Dual-array evaluation at concrete inputs.
pub fn dualize_concrete(p: &Program, inputs: &Env) -> Result<(ConcreteArray, Delta<Concrete>), DualizeError> {
    check_env(p, inputs)?;
    let args = p.params.iter().map(|q| inputs[&q.name].clone()).collect();
    dualize(&Concrete, &IdGen::new(), &p.params, args, &p.body)
}

/// The result of dualizing a program symbolically.
pub struct SymbolicDual {
    pub carrier: Symbolic,
    pub primal: TermRef,
    pub delta: Delta<Symbolic>,
}

/// Symbolic dualization: parameters stay variables, sharing becomes `Share`.
pub fn dualize_symbolic(p: &Program) -> Result<SymbolicDual, DualizeError> {
    let names = NameGen::above(&p.body);
    for q in &p.params {
        names.reserve_name(&q.name);
    }
    let carrier = Symbolic::new(Rc::new(IdGen::new()), Rc::new(names));
    let args = p.params.iter().map(|q| Term::var(q.name.clone())).collect();
    let ids = carrier.ids.clone();
    let (primal, delta) = dualize(&carrier, &ids, &p.params, args, &p.body)?;
    Ok(SymbolicDual { carrier, primal, delta })
}

struct Dualizer<'a, A: PrimalAlgebra> {
    alg: &'a A,
    ids: &'a IdGen,
    tenv: TypeEnv,
    scope: Vec<(Name, Dual<A>)>,
}

fn scale<A: Carrier>(arr: A::Array, d: Option<Delta<A>>) -> Option<Delta<A>> {
    d.map(|d| Delta::scale(arr, d))
}

fn add<A: Carrier>(a: Option<Delta<A>>, b: Option<Delta<A>>) -> Option<Delta<A>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(Delta::add(a, b)),
        (a, None) => a,
        (None, b) => b,
    }
}

impl<A: PrimalAlgebra> Dualizer<'_, A> {
    fn ty(&self, t: &Term) -> ArrayType {
        infer_array(t, &self.tenv).expect("dualized terms are checked")
    }

    fn lookup(&self, x: &Name) -> Dual<A> {
        self.scope.iter().rev().find(|(n, _)| n == x).map(|(_, d)| d.clone()).expect("bound variable")
    }

    fn env_for(&self, fvs: BTreeSet<Name>) -> PrimalEnv<A> {
        let mut m = HashMap::new();
        for x in fvs {
            if let Some((_, d)) = self.scope.iter().rev().find(|(n, _)| *n == x) {
                m.insert(x, d.primal.clone());
            }
        }
        m
    }

    fn share(&self, d: Option<Delta<A>>) -> Option<Delta<A>> {
        d.map(|d| Delta::share(self.ids.fresh_delta_id(), d))
    }

    fn go(&mut self, t: &TermRef) -> Dual<A> {
        let alg = self.alg;
        match &**t {
            Term::Const(c) => Dual { primal: alg.constant(c), delta: None },
            Term::Var(x) => self.lookup(x),
            Term::Let(x, u, v) => {
                let ty = self.ty(u);
                let du = self.go(u);
                let bound = Dual { primal: alg.share_primal(du.primal), delta: du.delta };
                self.scope.push((x.clone(), bound));
                self.tenv.push(x.clone(), ty);
                let r = self.go(v);
                self.tenv.pop();
                self.scope.pop();
                r
            }
            Term::Cond(b, u, v) => {
                let db = self.go(b);
                let (du, dv) = (self.go(u), self.go(v));
                if du.delta.is_none() && dv.delta.is_none() {
                    return Dual { primal: alg.cond(&db.primal, &du.primal, &dv.primal), delta: None };
                }
                let sh = self.ty(u).shape;
                let bp = alg.share_primal(db.primal);
                let z = || Delta::zero(sh.clone());
                let lit = Delta::lit_array(vec![du.delta.unwrap_or_else(z), dv.delta.unwrap_or_else(z)]);
                let delta = self.share(Some(Delta::index(lit, alg.branch_index(&bp))));
                Dual { primal: alg.cond(&bp, &du.primal, &dv.primal), delta }
            }
            Term::Op(op, args) => {
                let sh = self.ty(t).shape;
                let ds: Vec<Dual<A>> = args.iter().map(|a| self.go(a)).collect();
                self.op(*op, ds, &sh)
            }
            Term::Index(a, ix) => {
                let da = self.go(a);
                let env = self.env_for(ix.iter().flat_map(|e| free_vars(e)).collect());
                let ixv = alg.index_from(ix, &env);
                let delta = self.share(da.delta.map(|d| Delta::index(d, ixv.clone())));
                Dual { primal: alg.index(&da.primal, &ixv), delta }
            }
            Term::SumOuter(a) => {
                let da = self.go(a);
                let delta = self.share(da.delta.map(Delta::sum_outer));
                Dual { primal: alg.sum_outer(&da.primal), delta }
            }
            Term::Gather(sh, a, f) | Term::Scatter(sh, a, f) => {
                let da = self.go(a);
                let fvs: BTreeSet<Name> = f
                    .body
                    .iter()
                    .flat_map(|e| free_vars(e))
                    .filter(|x| !f.params.contains(x))
                    .collect();
                let g = alg.ix_fun(f, &self.env_for(fvs));
                if matches!(&**t, Term::Gather(..)) {
                    let delta = self.share(da.delta.map(|d| Delta::gather(sh.clone(), d, g.clone())));
                    Dual { primal: alg.gather(sh, &da.primal, &g), delta }
                } else {
                    let delta = self.share(da.delta.map(|d| Delta::scatter(sh.clone(), d, g.clone())));
                    Dual { primal: alg.scatter(sh, &da.primal, &g), delta }
                }
            }
            Term::Ravel(ts) => {
                let ds: Vec<Dual<A>> = ts.iter().map(|a| self.go(a)).collect();
                let primals: Vec<A::Array> = ds.iter().map(|d| d.primal.clone()).collect();
                let delta = if ds.iter().all(|d| d.delta.is_none()) {
                    None
                } else {
                    let sh = self.ty(&ts[0]).shape;
                    let parts = ds.into_iter().map(|d| d.delta.unwrap_or_else(|| Delta::zero(sh.clone()))).collect();
                    self.share(Some(Delta::lit_array(parts)))
                };
                Dual { primal: alg.ravel(&primals), delta }
            }
            Term::Replicate(k, a) => {
                let da = self.go(a);
                let delta = self.share(da.delta.map(|d| Delta::replicate(*k, d)));
                Dual { primal: alg.replicate(*k, &da.primal), delta }
            }
            Term::Transpose(perm, a) => {
                let da = self.go(a);
                let delta = self.share(da.delta.map(|d| Delta::transpose(perm.clone(), d)));
                Dual { primal: alg.transpose(perm, &da.primal), delta }
            }
            Term::Reshape(sh, a) => {
                let da = self.go(a);
                let delta = self.share(da.delta.map(|d| Delta::reshape(sh.clone(), d)));
                Dual { primal: alg.reshape(sh, &da.primal), delta }
            }
            Term::Build1(..) | Term::Share(..) | Term::Tuple(_) => {
                unreachable!("rejected before dualization")
            }
        }
    }

    fn op(&mut self, op: PrimOp, ds: Vec<Dual<A>>, sh: &Shape) -> Dual<A> {
        use PrimOp::*;
        let alg = self.alg;
        let primals: Vec<A::Array> = ds.iter().map(|d| d.primal.clone()).collect();
        if ds.iter().all(|d| d.delta.is_none()) {
            return Dual { primal: alg.prim(op, &primals), delta: None };
        }
        let constant = |x: f64| alg.share_primal(alg.fill(sh, x));
        let unary = |me: &Self, deriv: A::Array| me.share(scale(alg.share_primal(deriv), ds[0].delta.clone()));
        match op {
            Add => {
                let delta = self.share(add(ds[0].delta.clone(), ds[1].delta.clone()));
                Dual { primal: alg.prim(Add, &primals), delta }
            }
            Sub => {
                let neg = ds[1].delta.clone().map(|d| Delta::scale(constant(-1.0), d));
                let delta = self.share(add(ds[0].delta.clone(), neg));
                Dual { primal: alg.prim(Sub, &primals), delta }
            }
            Mul => {
                let a = alg.share_primal(primals[0].clone());
                let b = alg.share_primal(primals[1].clone());
                let delta = add(scale(b.clone(), ds[0].delta.clone()), scale(a.clone(), ds[1].delta.clone()));
                Dual { primal: alg.prim(Mul, &[a, b]), delta: self.share(delta) }
            }
            Div => {
                let a = alg.share_primal(primals[0].clone());
                let b = alg.share_primal(primals[1].clone());
                let y = alg.share_primal(alg.prim(Div, &[a, b.clone()]));
                let da = ds[0].delta.clone().map(|d| {
                    let r = alg.share_primal(alg.prim(Div, &[alg.fill(sh, 1.0), b.clone()]));
                    Delta::scale(r, d)
                });
                let db = ds[1].delta.clone().map(|d| {
                    let q = alg.prim(Div, &[y.clone(), b.clone()]);
                    Delta::scale(alg.share_primal(alg.prim(Neg, &[q])), d)
                });
                Dual { primal: y, delta: self.share(add(da, db)) }
            }
            Neg => {
                let delta = self.share(scale(constant(-1.0), ds[0].delta.clone()));
                Dual { primal: alg.prim(Neg, &primals), delta }
            }
            Exp | Tanh | Sqrt => {
                let y = alg.share_primal(alg.prim(op, &primals));
                let deriv = match op {
                    Exp => y.clone(),
                    Tanh => alg.prim(Sub, &[alg.fill(sh, 1.0), alg.prim(Mul, &[y.clone(), y.clone()])]),
                    _ => alg.prim(Div, &[alg.fill(sh, 0.5), y.clone()]),
                };
                let delta = unary(self, deriv);
                Dual { primal: y, delta }
            }
            Log | Sin | Cos | Abs => {
                let x = alg.share_primal(primals[0].clone());
                let deriv = match op {
                    Log => alg.prim(Div, &[alg.fill(sh, 1.0), x.clone()]),
                    Sin => alg.prim(Cos, &[x.clone()]),
                    Cos => alg.prim(Neg, &[alg.prim(Sin, &[x.clone()])]),
                    _ => alg.prim(Signum, &[x.clone()]),
                };
                let delta = unary(self, deriv);
                Dual { primal: alg.prim(op, &[x]), delta }
            }
            _ => Dual { primal: alg.prim(op, &primals), delta: None },
        }
    }
}
