//! The bulk-operation transform: eliminates `build1` and pushes `index`
//! towards the leaves until only bulk array operations remain.

use std::collections::HashMap;

use crate::ir::{
    infer_array, node_count, occurs_free, subst, subst1, ArrayType, IxFn, Name, NameGen,
    Program, Term, TermRef, TypeEnv,
};
use crate::tensor::{ConcreteArray, Kind, PrimOp, Shape};

/// Order in which redexes are contracted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Rewrite at a node before looking at its children.
    #[default]
    OutsideIn,
    /// Normalise children first.
    InsideOut,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    pub strategy: Strategy,
    /// Run the optional clean-up pass (identity gathers become variables).
    pub simplify: bool,
}

/// Normal form of `t` under the default options.
pub fn normalize(t: &TermRef, env: &TypeEnv) -> TermRef {
    let gen = NameGen::above(t);
    normalize_with(t, env, Options::default(), &gen).0
}

pub fn normalize_program(p: &Program, opts: Options) -> Program {
    let gen = NameGen::above(&p.body);
    let (body, _) = normalize_with(&p.body, &p.type_env(), opts, &gen);
    Program::new(p.params.clone(), body)
}

/// Normal form and the number of rewrite steps taken.
pub fn normalize_with(t: &TermRef, env: &TypeEnv, opts: Options, gen: &NameGen) -> (TermRef, usize) {
    gen.reserve(t);
    let budget = step_budget(t, env);
    let mut rw = Rewriter { gen, env: env.clone(), steps: 0, budget };
    let r = match opts.strategy {
        Strategy::OutsideIn => rw.outside_in(t.clone()),
        Strategy::InsideOut => rw.inside_out(t.clone()),
    };
    let r = inline_let_vars(&r, gen);
    let r = if opts.simplify { simplify(&r, env) } else { r };
    (r, rw.steps)
}

fn step_budget(t: &Term, env: &TypeEnv) -> usize {
    let rank = infer_array(t, env).map(|ty| ty.shape.rank()).unwrap_or(0);
    let size = node_count(t);
    10_000 + 2_000 * size * (rank + 4)
}

struct Rewriter<'a> {
    gen: &'a NameGen,
    env: TypeEnv,
    steps: usize,
    budget: usize,
}

fn int(i: i64) -> TermRef {
    Term::int(i)
}

fn vars(ns: &[Name]) -> Vec<TermRef> {
    ns.iter().map(|n| Term::var(n.clone())).collect()
}

impl Rewriter<'_> {
    fn step(&mut self) {
        self.steps += 1;
        assert!(self.steps <= self.budget, "rewriting exceeded its step budget of {}", self.budget);
    }

    fn ty(&self, t: &Term) -> ArrayType {
        infer_array(t, &self.env).expect("rewriting operates on checked terms")
    }

    fn ty_under(&mut self, i: &Name, t: &Term) -> ArrayType {
        self.env.push(i.clone(), ArrayType::scalar(Kind::Int));
        let ty = self.ty(t);
        self.env.pop();
        ty
    }

    fn fresh(&self, base: &str) -> Name {
        self.gen.fresh(base)
    }

    fn outside_in(&mut self, t: TermRef) -> TermRef {
        let mut t = t;
        loop {
            while let Some(r) = self.rewrite_root(&t) {
                self.step();
                t = r;
            }
            let t2 = self.children(&t, Strategy::OutsideIn);
            match self.rewrite_root(&t2) {
                Some(r) => {
                    self.step();
                    t = r;
                }
                None => return t2,
            }
        }
    }

    fn inside_out(&mut self, t: TermRef) -> TermRef {
        let t2 = self.children(&t, Strategy::InsideOut);
        match self.rewrite_root(&t2) {
            Some(r) => {
                self.step();
                self.inside_out(r)
            }
            None => t2,
        }
    }

    fn go(&mut self, t: &TermRef, s: Strategy) -> TermRef {
        match s {
            Strategy::OutsideIn => self.outside_in(t.clone()),
            Strategy::InsideOut => self.inside_out(t.clone()),
        }
    }

    fn under(&mut self, xs: &[Name], ty: Option<ArrayType>, t: &TermRef, s: Strategy) -> TermRef {
        let n = self.env.len();
        for x in xs {
            self.env.push(x.clone(), ty.clone().unwrap_or_else(|| ArrayType::scalar(Kind::Int)));
        }
        let r = self.go(t, s);
        self.env.truncate(n);
        r
    }

    fn ixfn(&mut self, f: &IxFn, s: Strategy) -> IxFn {
        let body = f.body.iter().map(|e| self.under(&f.params, None, e, s)).collect();
        IxFn::new(f.params.clone(), body)
    }

    /// Normalises the direct subterms of `t`.
    fn children(&mut self, t: &TermRef, s: Strategy) -> TermRef {
        match &**t {
            Term::Const(_) | Term::Var(_) => t.clone(),
            Term::Let(x, u, v) => {
                let u2 = self.go(u, s);
                let ty = self.ty(&u2);
                let v2 = self.under(std::slice::from_ref(x), Some(ty), v, s);
                Term::let_(x.clone(), u2, v2)
            }
            Term::Build1(k, i, b) => {
                let b2 = self.under(std::slice::from_ref(i), None, b, s);
                Term::build1(*k, i.clone(), b2)
            }
            Term::Gather(sh, a, f) => {
                let a2 = self.go(a, s);
                Term::gather(sh.clone(), a2, self.ixfn(f, s))
            }
            Term::Scatter(sh, a, f) => {
                let a2 = self.go(a, s);
                Term::scatter(sh.clone(), a2, self.ixfn(f, s))
            }
            _ => t.map_children(&mut |c| self.go(c, s)),
        }
    }

    fn rewrite_root(&mut self, t: &TermRef) -> Option<TermRef> {
        match &**t {
            Term::Build1(k, i, body) => self.build1_rule(*k, i, body),
            Term::Index(h, ix) => self.index_rule(h, ix),
            _ => None,
        }
    }

    /// `e[j/i]` for every component, respecting binders of `f`.
    fn rebind(&self, es: &[TermRef], i: &Name, j: &Name) -> Vec<TermRef> {
        es.iter().map(|e| subst1(e, i, Term::var(j.clone()), self.gen)).collect()
    }

    fn build1_rule(&mut self, k: usize, i: &Name, body: &TermRef) -> Option<TermRef> {
        let b1 = |t: &TermRef| Term::build1(k, i.clone(), t.clone());
        if !occurs_free(body, i) {
            return Some(Term::replicate(k, body.clone()));
        }
        Some(match &**body {
            Term::Var(_) => Term::constant(ConcreteArray::iota(k)),
            Term::Let(x, v, u) => {
                let x2 = self.fresh(x.as_str());
                let ix = Term::index(Term::var(x2.clone()), vec![Term::var(i.clone())]);
                let u2 = subst1(u, x, ix, self.gen);
                Term::let_(x2, b1(v), b1(&u2))
            }
            Term::Cond(b, u, v) => {
                let sel = Term::cond(b.clone(), int(0), int(1));
                b1(&Term::index(Term::ravel(vec![u.clone(), v.clone()]), vec![sel]))
            }
            Term::Op(op, args) => Term::op(*op, args.iter().map(b1).collect()),
            Term::SumOuter(a) => Term::sum_outer(Term::transpose(vec![1, 0], b1(a))),
            Term::Gather(sh, a, f) | Term::Scatter(sh, a, f) => {
                let is_gather = matches!(&**body, Term::Gather(..));
                let j = self.fresh(i.as_str());
                let mut body = vec![Term::var(j.clone())];
                if f.params.contains(i) {
                    body.extend(f.body.iter().cloned());
                } else {
                    body.extend(self.rebind(&f.body, i, &j));
                }
                let mut params = vec![j];
                params.extend(f.params.iter().cloned());
                let g = IxFn::new(params, body);
                if is_gather {
                    Term::gather(sh.cons(k), b1(a), g)
                } else {
                    Term::scatter(sh.cons(k), b1(a), g)
                }
            }
            Term::Ravel(ts) => Term::transpose(vec![1, 0], Term::ravel(ts.iter().map(b1).collect())),
            Term::Replicate(n, a) => Term::transpose(vec![1, 0], Term::replicate(*n, b1(a))),
            Term::Transpose(perm, a) => {
                let mut p = vec![0];
                p.extend(perm.iter().map(|d| d + 1));
                Term::transpose(p, b1(a))
            }
            Term::Reshape(sh, a) => Term::reshape(sh.cons(k), b1(a)),
            Term::Index(h, ix) => return self.build1_index(k, i, h, ix),
            _ => return None,
        })
    }

    fn build1_index(&mut self, k: usize, i: &Name, h: &TermRef, ix: &[TermRef]) -> Option<TermRef> {
        if ix.is_empty() {
            return None;
        }
        let j = self.fresh(i.as_str());
        let m = ix.len();
        let comps = self.rebind(ix, i, &j);
        match &**h {
            Term::Var(x) if x != i => {
                let sh = self.ty(h).shape.suffix(m);
                Some(Term::gather(sh.cons(k), h.clone(), IxFn::new(vec![j], comps)))
            }
            Term::Const(c) => {
                let sh = c.shape().suffix(m);
                Some(Term::gather(sh.cons(k), h.clone(), IxFn::new(vec![j], comps)))
            }
            Term::Ravel(ts) if m == 1 => {
                let sh = self.ty_under(i, &ts[0]).shape;
                let mut body = vec![Term::var(j.clone())];
                body.extend(comps);
                let src = Term::build1(k, i.clone(), h.clone());
                Some(Term::gather(sh.cons(k), src, IxFn::new(vec![j], body)))
            }
            Term::Scatter(sh2, ..) => {
                let sh = sh2.suffix(m);
                let mut body = vec![Term::var(j.clone())];
                body.extend(comps);
                let src = Term::build1(k, i.clone(), h.clone());
                Some(Term::gather(sh.cons(k), src, IxFn::new(vec![j], body)))
            }
            _ => None,
        }
    }

    /// `let is1 = ix1 in .. let isn = ixn in body(is)`
    fn bind_components(&self, ix: &[TermRef], body: impl FnOnce(Vec<TermRef>) -> TermRef) -> TermRef {
        let names: Vec<Name> = ix.iter().map(|_| self.fresh("ix")).collect();
        let mut t = body(vars(&names));
        for (n, e) in names.into_iter().zip(ix).rev() {
            t = Term::let_(n, e.clone(), t);
        }
        t
    }

    fn index_rule(&mut self, h: &TermRef, ix: &[TermRef]) -> Option<TermRef> {
        if ix.is_empty() {
            return Some(h.clone());
        }
        let m = ix.len();
        Some(match &**h {
            Term::Index(a, us) => {
                let mut all = us.clone();
                all.extend(ix.iter().cloned());
                Term::index(a.clone(), all)
            }
            Term::Let(x, u, b) => {
                if ix.iter().any(|e| occurs_free(e, x)) {
                    let x2 = self.fresh(x.as_str());
                    let b2 = subst1(b, x, Term::var(x2.clone()), self.gen);
                    Term::let_(x2, u.clone(), Term::index(b2, ix.to_vec()))
                } else {
                    Term::let_(x.clone(), u.clone(), Term::index(b.clone(), ix.to_vec()))
                }
            }
            Term::Cond(b, u, v) => self.bind_components(ix, |is| {
                Term::cond(b.clone(), Term::index(u.clone(), is.clone()), Term::index(v.clone(), is))
            }),
            Term::Op(op, args) if args.len() == 2 => self.bind_components(ix, |is| {
                Term::op2(*op, Term::index(args[0].clone(), is.clone()), Term::index(args[1].clone(), is))
            }),
            Term::Op(op, args) => Term::op1(*op, Term::index(args[0].clone(), ix.to_vec())),
            Term::SumOuter(a) => {
                let mut perm: Vec<usize> = (1..=m).collect();
                perm.push(0);
                Term::sum_outer(Term::index(Term::transpose(perm, a.clone()), ix.to_vec()))
            }
            Term::Ravel(ts) if m > 1 => self.bind_components(&ix[1..], |is| {
                let parts = ts.iter().map(|t| Term::index(t.clone(), is.clone())).collect();
                Term::index(Term::ravel(parts), vec![ix[0].clone()])
            }),
            Term::Replicate(_, a) => Term::index(a.clone(), ix[1..].to_vec()),
            Term::Transpose(perm, a) => {
                let sh = self.ty(h).shape;
                let is: Vec<Name> = perm.iter().map(|_| self.fresh("t")).collect();
                let params = perm.iter().map(|&p| is[p].clone()).collect();
                let g = Term::gather(sh, a.clone(), IxFn::new(params, vars(&is)));
                Term::index(g, ix.to_vec())
            }
            Term::Reshape(sh, a) => {
                let src = self.ty(a).shape;
                let is: Vec<Name> = sh.dims().iter().map(|_| self.fresh("r")).collect();
                let comps = from_linear(&src, || to_linear(sh, &is));
                let g = Term::gather(sh.clone(), a.clone(), IxFn::new(is, comps));
                Term::index(g, ix.to_vec())
            }
            Term::Gather(sh, a, f) if !f.params.is_empty() => {
                let p2 = self.fresh(f.params[0].as_str());
                let ps2: Vec<Name> = f.params[1..].iter().map(|p| self.fresh(p.as_str())).collect();
                let mut ren: HashMap<Name, TermRef> = HashMap::new();
                for (p, q) in f.params[1..].iter().zip(&ps2) {
                    ren.insert(p.clone(), Term::var(q.clone()));
                }
                ren.insert(f.params[0].clone(), Term::var(p2.clone()));
                let body = f
                    .body
                    .iter()
                    .map(|e| Term::let_(p2.clone(), ix[0].clone(), subst(e, &ren, self.gen)))
                    .collect();
                let g = Term::gather(sh.suffix(1), a.clone(), IxFn::new(ps2, body));
                Term::index(g, ix[1..].to_vec())
            }
            Term::Gather(_, a, f) => Term::index(Term::index(a.clone(), f.body.clone()), ix.to_vec()),
            _ => return None,
        })
    }
}

/// Row-major linear offset of `is` within `sh`, as an Int term.
fn to_linear(sh: &Shape, is: &[Name]) -> TermRef {
    let mut acc: Option<TermRef> = None;
    for (d, x) in sh.dims().iter().zip(is) {
        let v = Term::var(x.clone());
        acc = Some(match acc {
            None => v,
            Some(a) => Term::op2(PrimOp::Add, Term::op2(PrimOp::Mul, a, int(*d as i64)), v),
        });
    }
    acc.unwrap_or_else(|| int(0))
}

/// Index components of linear offset `lin` within `sh`, using flooring
/// `div` and `mod`. The offset term is copied into every component.
fn from_linear(sh: &Shape, lin: impl Fn() -> TermRef) -> Vec<TermRef> {
    let st = sh.strides();
    let r = sh.rank();
    (0..r)
        .map(|d| {
            let mut e = lin();
            if st[d] != 1 {
                e = Term::op2(PrimOp::IDiv, e, int(st[d] as i64));
            }
            if d > 0 {
                e = Term::op2(PrimOp::Mod, e, int(sh.dims()[d] as i64));
            }
            e
        })
        .collect()
}

/// Replaces `let x = y in b` by `b[y/x]` when `y` is a variable.
pub fn inline_let_vars(t: &TermRef, gen: &NameGen) -> TermRef {
    match &**t {
        Term::Let(x, u, b) if matches!(&**u, Term::Var(_)) => {
            let b2 = subst1(b, x, u.clone(), gen);
            inline_let_vars(&b2, gen)
        }
        Term::Const(_) | Term::Var(_) => t.clone(),
        _ => t.map_children(&mut |c| inline_let_vars(c, gen)),
    }
}

/// Optional clean-up: `gather sh a (λis. is)` with `a : sh` becomes `a`.
pub fn simplify(t: &TermRef, env: &TypeEnv) -> TermRef {
    fn go(t: &TermRef, env: &mut TypeEnv) -> TermRef {
        let r = match &**t {
            Term::Let(x, u, b) => {
                let u2 = go(u, env);
                let ty = infer_array(&u2, env).expect("checked");
                env.push(x.clone(), ty);
                let b2 = go(b, env);
                env.pop();
                Term::let_(x.clone(), u2, b2)
            }
            Term::Build1(k, i, b) => {
                env.push(i.clone(), ArrayType::scalar(Kind::Int));
                let b2 = go(b, env);
                env.pop();
                Term::build1(*k, i.clone(), b2)
            }
            Term::Gather(sh, a, f) | Term::Scatter(sh, a, f) => {
                let a2 = go(a, env);
                let n = env.len();
                for p in &f.params {
                    env.push(p.clone(), ArrayType::scalar(Kind::Int));
                }
                let body = f.body.iter().map(|e| go(e, env)).collect();
                env.truncate(n);
                let g = IxFn::new(f.params.clone(), body);
                if matches!(&**t, Term::Gather(..)) {
                    Term::gather(sh.clone(), a2, g)
                } else {
                    Term::scatter(sh.clone(), a2, g)
                }
            }
            Term::Const(_) | Term::Var(_) => t.clone(),
            _ => t.map_children(&mut |c| go(c, env)),
        };
        if let Term::Gather(sh, a, f) = &*r {
            let identity = f.params.len() == f.body.len()
                && f.params.iter().zip(&f.body).all(|(p, e)| matches!(&**e, Term::Var(x) if x == p));
            if identity && infer_array(a, env).map(|ty| ty.shape == *sh).unwrap_or(false) {
                return a.clone();
            }
        }
        r
    }
    go(t, &mut env.clone())
}

/// Classification of an `index` occurrence in a normal form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndexHead {
    Var,
    Const,
    RavelSingleton,
    Scatter,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NormalFormReport {
    pub build1_count: usize,
    pub index_heads: Vec<IndexHead>,
    pub violations: Vec<String>,
}

impl NormalFormReport {
    pub fn is_normal(&self) -> bool {
        self.build1_count == 0 && self.violations.is_empty()
    }
}

/// Reports `build1` occurrences and classifies every `index` by its head.
pub fn check_normal_form(t: &Term) -> NormalFormReport {
    fn go(t: &Term, r: &mut NormalFormReport) {
        match t {
            Term::Build1(..) => {
                r.build1_count += 1;
                r.violations.push(format!("build1 remains: {t}"));
            }
            Term::Index(h, ix) => {
                let head = match (&**h, ix.len()) {
                    (_, 0) => None,
                    (Term::Var(_), _) => Some(IndexHead::Var),
                    (Term::Const(_), _) => Some(IndexHead::Const),
                    (Term::Ravel(_), 1) => Some(IndexHead::RavelSingleton),
                    (Term::Scatter(..), _) => Some(IndexHead::Scatter),
                    _ => None,
                };
                match head {
                    Some(h) => r.index_heads.push(h),
                    None => r.violations.push(format!("index in non-normal position: {t}")),
                }
            }
            _ => {}
        }
        for c in t.children() {
            go(c, r);
        }
    }
    let mut r = NormalFormReport::default();
    go(t, &mut r);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{eval, Env};
    use crate::ir::{alpha_eq, check, parse_program, parse_term, Param};

    fn env_a(n: usize) -> TypeEnv {
        TypeEnv::from_params(&[Param { name: Name::new("a"), ty: ArrayType::new(Shape::new(vec![n]), Kind::Real) }])
    }

    #[test]
    fn build1_of_index_plus_one() {
        let t = parse_term("(build1 4 (lam i (op + (index a [i]) 1.0)))").unwrap();
        let r = normalize(&t, &env_a(4));
        let want = parse_term("(op + (gather [4] a (lam [j] [j])) (replicate 4 1.0))").unwrap();
        assert!(alpha_eq(&r, &want), "{r}");
    }

    #[test]
    fn self_convolution_after_bot() {
        let p = parse_program(include_str!("../programs/t_sc.adl")).unwrap();
        let r = normalize_program(&p, Options::default());
        let want = parse_term(
            "(sumouter (op * (gather [3] a (lam [i] [i])) (gather [3] a (lam [i] [(op - (op - 3 1) i)]))))",
        )
        .unwrap();
        assert!(alpha_eq(&r.body, &want), "{}", r.body);
    }

    #[test]
    fn build1_of_binder_is_iota() {
        let t = parse_term("(build1 3 (lam i i))").unwrap();
        let r = normalize(&t, &TypeEnv::new());
        let Term::Const(c) = &*r else { panic!("{r}") };
        assert_eq!(c.as_int(), &[0, 1, 2]);
    }

    #[test]
    fn scatter_head_is_normal() {
        let t = parse_term("(index (scatter [2] b (lam [i] [i])) [j])").unwrap();
        assert!(check_normal_form(&t).is_normal());
        let t = parse_term("(build1 2 (lam i (index a [i])))").unwrap();
        let rep = check_normal_form(&t);
        assert_eq!(rep.build1_count, 1);
        assert!(!rep.is_normal());
    }

    fn agree(src: &str, env: &Env, tenv: &TypeEnv) {
        let t = parse_term(src).unwrap();
        let want_ty = check(&t, tenv).unwrap();
        for strategy in [Strategy::OutsideIn, Strategy::InsideOut] {
            let gen = NameGen::above(&t);
            let (r, _) = normalize_with(&t, tenv, Options { strategy, simplify: false }, &gen);
            assert!(check_normal_form(&r).is_normal(), "{r}");
            assert_eq!(check(&r, tenv).unwrap(), want_ty);
            let (x, y) = (eval(&t, env), eval(&r, env));
            assert_eq!(x.shape(), y.shape());
            for (u, v) in x.as_real().iter().zip(y.as_real()) {
                assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0), "{src}: {u} vs {v}");
            }
        }
    }

    fn matrix_env() -> (Env, TypeEnv) {
        let m = ConcreteArray::real(Shape::new(vec![2, 3]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = ConcreteArray::vector(vec![0.5, -1.0, 2.0]);
        let mut env = Env::new();
        env.insert(Name::new("m"), m.clone());
        env.insert(Name::new("v"), v.clone());
        let tenv = TypeEnv::from_params(&[
            Param { name: Name::new("m"), ty: ArrayType::new(m.shape().clone(), Kind::Real) },
            Param { name: Name::new("v"), ty: ArrayType::new(v.shape().clone(), Kind::Real) },
        ]);
        (env, tenv)
    }

    #[test]
    fn preserves_semantics_on_mixed_terms() {
        let (env, tenv) = matrix_env();
        for src in [
            "(build1 2 (lam i (sumouter (build1 3 (lam j (op * (index m [i j]) (index v [j])))))))",
            "(build1 3 (lam j (let (x (op sin (index v [j]))) (op * x x))))",
            "(build1 3 (lam j (cond (op < j 1) (index v [j]) (op neg (index v [j])))))",
            "(build1 2 (lam i (index (tr [1 0] m) [(op mod (op + i 1) 3) i])))",
            "(build1 2 (lam i (sumouter (index (reshape [3 2] m) [i]))))",
            "(build1 3 (lam i (index (ravel (index m [0]) (index m [1])) [(op mod i 2) i])))",
            "(build1 2 (lam i (index (gather [3 2] m (lam [p q] [q p])) [(op + i 1) i])))",
            "(build1 2 (lam i (index (replicate 4 (index m [i])) [3 (op - 2 i)])))",
            "(build1 3 (lam i (index (scatter [3] v (lam [p] [(op - 2 p)])) [i])))",
            "(build1 2 (lam i (build1 3 (lam j (op * (index m [i j]) (index v [(op - 2 j)]))))))",
        ] {
            agree(src, &env, &tenv);
        }
    }

    #[test]
    fn let_of_variable_is_inlined() {
        let gen = NameGen::new();
        let t = parse_term("(let (x y) (op + x x))").unwrap();
        let r = inline_let_vars(&t, &gen);
        assert!(alpha_eq(&r, &parse_term("(op + y y)").unwrap()));
    }

    #[test]
    fn simplify_removes_identity_gathers() {
        let t = parse_term("(build1 4 (lam i (op + (index a [i]) 1.0)))").unwrap();
        let gen = NameGen::above(&t);
        let opts = Options { simplify: true, ..Options::default() };
        let (r, _) = normalize_with(&t, &env_a(4), opts, &gen);
        assert!(alpha_eq(&r, &parse_term("(op + a (replicate 4 1.0))").unwrap()), "{r}");
    }
}
