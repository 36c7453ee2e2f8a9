//! Free variables, fresh names, substitution and alpha-equivalence.
//!
//! Shared subterms are closed up to program parameters, so these traversals
//! visit each shared body at most once and substitution leaves them alone.

use std::cell::Cell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::rc::Rc;

use super::{IxFn, Name, ShareId, Term, TermRef};

/// Generator of `base.N` names from a monotone counter.
#[derive(Debug)]
pub struct NameGen {
    next: Cell<u64>,
}

impl Default for NameGen {
    fn default() -> Self {
        NameGen { next: Cell::new(1) }
    }
}

impl NameGen {
    pub fn new() -> Self {
        Self::default()
    }

    /// A generator whose names cannot collide with any name in `t`.
    pub fn above(t: &Term) -> Self {
        let g = NameGen::new();
        g.reserve(t);
        g
    }

    /// Moves the counter past every numeric suffix used in `t`.
    pub fn reserve(&self, t: &Term) {
        let mut max = 0;
        visit_names(t, &mut |n| max = max.max(n.suffix().unwrap_or(0)));
        if max >= self.next.get() {
            self.next.set(max + 1);
        }
    }

    pub fn reserve_name(&self, n: &Name) {
        if let Some(s) = n.suffix() {
            if s >= self.next.get() {
                self.next.set(s + 1);
            }
        }
    }

    pub fn fresh(&self, base: &str) -> Name {
        let n = self.next.get();
        self.next.set(n + 1);
        let base = Name::new(base);
        Name::new(&format!("{}.{}", base.base(), n))
    }
}

fn visit_names(t: &Term, f: &mut dyn FnMut(&Name)) {
    fn go(t: &Term, f: &mut dyn FnMut(&Name), seen: &mut HashSet<ShareId>) {
        match t {
            Term::Var(x) | Term::Let(x, _, _) | Term::Build1(_, x, _) => f(x),
            Term::Gather(_, _, g) | Term::Scatter(_, _, g) => g.params.iter().for_each(&mut *f),
            Term::Share(id, _) if !seen.insert(*id) => return,
            _ => {}
        }
        for c in t.children() {
            go(c, f, seen);
        }
    }
    go(t, f, &mut HashSet::new())
}

pub fn free_vars(t: &Term) -> BTreeSet<Name> {
    fn go(t: &Term, bound: &mut Vec<Name>, out: &mut BTreeSet<Name>, seen: &mut HashSet<ShareId>) {
        match t {
            Term::Var(x) => {
                if !bound.contains(x) {
                    out.insert(x.clone());
                }
            }
            Term::Let(x, u, v) => {
                go(u, bound, out, seen);
                bound.push(x.clone());
                go(v, bound, out, seen);
                bound.pop();
            }
            Term::Build1(_, i, b) => {
                bound.push(i.clone());
                go(b, bound, out, seen);
                bound.pop();
            }
            Term::Gather(_, a, f) | Term::Scatter(_, a, f) => {
                go(a, bound, out, seen);
                let n = bound.len();
                bound.extend(f.params.iter().cloned());
                for e in &f.body {
                    go(e, bound, out, seen);
                }
                bound.truncate(n);
            }
            Term::Share(id, b) => {
                if seen.insert(*id) {
                    go(b, bound, out, seen);
                }
            }
            _ => {
                for c in t.children() {
                    go(c, bound, out, seen);
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    go(t, &mut Vec::new(), &mut out, &mut HashSet::new());
    out
}

pub fn occurs_free(t: &Term, x: &Name) -> bool {
    fn go(t: &Term, x: &Name, seen: &mut HashSet<ShareId>) -> bool {
        match t {
            Term::Var(y) => y == x,
            Term::Let(y, u, v) => go(u, x, seen) || (y != x && go(v, x, seen)),
            Term::Build1(_, i, b) => i != x && go(b, x, seen),
            Term::Gather(_, a, f) | Term::Scatter(_, a, f) => {
                go(a, x, seen) || (!f.params.contains(x) && f.body.iter().any(|e| go(e, x, seen)))
            }
            Term::Share(id, b) => seen.insert(*id) && go(b, x, seen),
            _ => t.children().into_iter().any(|c| go(c, x, seen)),
        }
    }
    go(t, x, &mut HashSet::new())
}

/// Capture-avoiding simultaneous substitution.
pub fn subst(t: &TermRef, sigma: &HashMap<Name, TermRef>, gen: &NameGen) -> TermRef {
    if sigma.is_empty() || !sigma.keys().any(|k| occurs_free(t, k)) {
        return t.clone();
    }
    let mut avoid = BTreeSet::new();
    for v in sigma.values() {
        avoid.extend(free_vars(v));
    }
    Subst { avoid, gen }.go(t, sigma)
}

struct Subst<'a> {
    avoid: BTreeSet<Name>,
    gen: &'a NameGen,
}

impl Subst<'_> {
    fn bind(&self, x: &Name, sigma: &mut HashMap<Name, TermRef>) -> Name {
        sigma.remove(x);
        if self.avoid.contains(x) {
            let y = self.gen.fresh(x.as_str());
            sigma.insert(x.clone(), Term::var(y.clone()));
            y
        } else {
            x.clone()
        }
    }

    fn ixfn(&self, f: &IxFn, sigma: &HashMap<Name, TermRef>) -> IxFn {
        let mut inner = sigma.clone();
        let params = f.params.iter().map(|p| self.bind(p, &mut inner)).collect();
        IxFn::new(params, f.body.iter().map(|e| self.go(e, &inner)).collect())
    }

    fn go(&self, t: &TermRef, sigma: &HashMap<Name, TermRef>) -> TermRef {
        if sigma.is_empty() {
            return t.clone();
        }
        match &**t {
            Term::Var(x) => sigma.get(x).cloned().unwrap_or_else(|| t.clone()),
            Term::Const(_) | Term::Share(..) => t.clone(),
            Term::Let(x, u, v) => {
                let u2 = self.go(u, sigma);
                let mut inner = sigma.clone();
                let y = self.bind(x, &mut inner);
                Term::let_(y, u2, self.go(v, &inner))
            }
            Term::Build1(k, i, b) => {
                let mut inner = sigma.clone();
                let j = self.bind(i, &mut inner);
                Term::build1(*k, j, self.go(b, &inner))
            }
            Term::Gather(sh, a, f) => Term::gather(sh.clone(), self.go(a, sigma), self.ixfn(f, sigma)),
            Term::Scatter(sh, a, f) => {
                Term::scatter(sh.clone(), self.go(a, sigma), self.ixfn(f, sigma))
            }
            _ => t.map_children(&mut |c| self.go(c, sigma)),
        }
    }
}

/// Capture-avoiding substitution into the body of an index function.
pub fn subst_ixfn(f: &IxFn, sigma: &HashMap<Name, TermRef>, gen: &NameGen) -> IxFn {
    let live = sigma.keys().any(|k| !f.params.contains(k) && f.body.iter().any(|e| occurs_free(e, k)));
    if !live {
        return f.clone();
    }
    let mut avoid = BTreeSet::new();
    for v in sigma.values() {
        avoid.extend(free_vars(v));
    }
    Subst { avoid, gen }.ixfn(f, sigma)
}

/// `t[e/x]`
pub fn subst1(t: &TermRef, x: &Name, e: TermRef, gen: &NameGen) -> TermRef {
    let mut m = HashMap::new();
    m.insert(x.clone(), e);
    subst(t, &m, gen)
}

/// Renames every binder in `t` to a fresh name.
pub fn uniquify(t: &TermRef, gen: &NameGen) -> TermRef {
    fn bind(x: &Name, env: &HashMap<Name, Name>, gen: &NameGen) -> (Name, HashMap<Name, Name>) {
        let y = gen.fresh(x.as_str());
        let mut e = env.clone();
        e.insert(x.clone(), y.clone());
        (y, e)
    }
    fn ixfn(f: &IxFn, env: &HashMap<Name, Name>, gen: &NameGen) -> IxFn {
        let mut e = env.clone();
        let mut params = Vec::new();
        for p in &f.params {
            let y = gen.fresh(p.as_str());
            e.insert(p.clone(), y.clone());
            params.push(y);
        }
        IxFn::new(params, f.body.iter().map(|b| go(b, &e, gen)).collect())
    }
    fn go(t: &TermRef, env: &HashMap<Name, Name>, gen: &NameGen) -> TermRef {
        match &**t {
            Term::Var(x) => match env.get(x) {
                Some(y) => Term::var(y.clone()),
                None => t.clone(),
            },
            Term::Const(_) | Term::Share(..) => t.clone(),
            Term::Let(x, u, v) => {
                let u2 = go(u, env, gen);
                let (y, e) = bind(x, env, gen);
                Term::let_(y, u2, go(v, &e, gen))
            }
            Term::Build1(k, i, b) => {
                let (j, e) = bind(i, env, gen);
                Term::build1(*k, j, go(b, &e, gen))
            }
            Term::Gather(sh, a, f) => Term::gather(sh.clone(), go(a, env, gen), ixfn(f, env, gen)),
            Term::Scatter(sh, a, f) => Term::scatter(sh.clone(), go(a, env, gen), ixfn(f, env, gen)),
            _ => t.map_children(&mut |c| go(c, env, gen)),
        }
    }
    gen.reserve(t);
    go(t, &HashMap::new(), gen)
}

/// Structural equality up to consistent renaming of bound variables.
/// Shared subterms must carry equal ids.
pub fn alpha_eq(a: &Term, b: &Term) -> bool {
    AlphaEq::default().eq(a, b)
}

#[derive(Default)]
struct AlphaEq {
    stack: Vec<(Name, Name)>,
    shares: HashSet<ShareId>,
}

impl AlphaEq {
    fn var_eq(&self, x: &Name, y: &Name) -> bool {
        for (l, r) in self.stack.iter().rev() {
            if l == x || r == y {
                return l == x && r == y;
            }
        }
        x == y
    }

    fn all(&mut self, xs: &[TermRef], ys: &[TermRef]) -> bool {
        xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| self.eq(x, y))
    }

    fn ixfn(&mut self, f: &IxFn, g: &IxFn) -> bool {
        if f.params.len() != g.params.len() {
            return false;
        }
        let n = self.stack.len();
        self.stack.extend(f.params.iter().cloned().zip(g.params.iter().cloned()));
        let r = self.all(&f.body, &g.body);
        self.stack.truncate(n);
        r
    }

    fn under(&mut self, x: &Name, y: &Name, a: &Term, b: &Term) -> bool {
        self.stack.push((x.clone(), y.clone()));
        let r = self.eq(a, b);
        self.stack.pop();
        r
    }

    fn eq(&mut self, a: &Term, b: &Term) -> bool {
        use Term::*;
        match (a, b) {
            (Const(x), Const(y)) => x.bit_eq(y),
            (Var(x), Var(y)) => self.var_eq(x, y),
            (Let(x, u1, v1), Let(y, u2, v2)) => self.eq(u1, u2) && self.under(x, y, v1, v2),
            (Cond(b1, u1, v1), Cond(b2, u2, v2)) => {
                self.eq(b1, b2) && self.eq(u1, u2) && self.eq(v1, v2)
            }
            (Op(o1, a1), Op(o2, a2)) => o1 == o2 && self.all(a1, a2),
            (Index(t1, i1), Index(t2, i2)) => self.eq(t1, t2) && self.all(i1, i2),
            (SumOuter(t1), SumOuter(t2)) => self.eq(t1, t2),
            (Gather(s1, t1, f1), Gather(s2, t2, f2)) | (Scatter(s1, t1, f1), Scatter(s2, t2, f2)) => {
                s1 == s2 && self.eq(t1, t2) && self.ixfn(f1, f2)
            }
            (Ravel(x), Ravel(y)) | (Tuple(x), Tuple(y)) => self.all(x, y),
            (Replicate(k1, t1), Replicate(k2, t2)) => k1 == k2 && self.eq(t1, t2),
            (Transpose(p1, t1), Transpose(p2, t2)) => p1 == p2 && self.eq(t1, t2),
            (Reshape(s1, t1), Reshape(s2, t2)) => s1 == s2 && self.eq(t1, t2),
            (Build1(k1, i, t1), Build1(k2, j, t2)) => k1 == k2 && self.under(i, j, t1, t2),
            (Share(i1, t1), Share(i2, t2)) => {
                i1 == i2 && (!self.shares.insert(*i1) || {
                    let saved = std::mem::take(&mut self.stack);
                    let r = self.eq(t1, t2);
                    self.stack = saved;
                    r
                })
            }
            _ => false,
        }
    }
}

/// Structural equality where shared subterms may differ in id, provided
/// the ids correspond one-to-one.
pub fn alpha_eq_up_to_share_ids(a: &Term, b: &Term) -> bool {
    let ra = renumber_shares(&Rc::new(a.clone()));
    let rb = renumber_shares(&Rc::new(b.clone()));
    alpha_eq(&ra, &rb)
}

/// Renumbers share ids 1, 2, .. in order of first occurrence.
pub fn renumber_shares(t: &TermRef) -> TermRef {
    fn go(t: &TermRef, m: &mut HashMap<ShareId, (ShareId, TermRef)>) -> TermRef {
        if let Term::Share(id, b) = &**t {
            if let Some((_, r)) = m.get(id) {
                return r.clone();
            }
            let new_id = ShareId(m.len() as u64 + 1);
            m.insert(*id, (new_id, t.clone()));
            let r = Term::share(new_id, go(b, m));
            m.insert(*id, (new_id, r.clone()));
            return r;
        }
        t.map_children(&mut |c| go(c, m))
    }
    go(t, &mut HashMap::new())
}
