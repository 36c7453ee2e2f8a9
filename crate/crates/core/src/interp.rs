//! Reference evaluator for checked terms.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::ir::{IxFn, Name, Program, ShareId, Term};
use crate::tensor::{for_each_index, ConcreteArray, Shape};

pub type Env = HashMap<Name, ConcreteArray>;

/// Result of evaluating a term; tuples only arise at the top level.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Array(ConcreteArray),
    Tuple(Vec<Value>),
}

impl Value {
    pub fn array(&self) -> &ConcreteArray {
        match self {
            Value::Array(a) => a,
            Value::Tuple(_) => panic!("expected an array, found a tuple"),
        }
    }

    pub fn tuple(&self) -> &[Value] {
        match self {
            Value::Tuple(v) => v,
            Value::Array(_) => panic!("expected a tuple, found an array"),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Array(a) => serde_json::to_value(a).expect("arrays serialize"),
            Value::Tuple(vs) => serde_json::Value::Array(vs.iter().map(Value::to_json).collect()),
        }
    }
}

/// How many times each shared body was evaluated.
pub type ShareCounts = BTreeMap<ShareId, usize>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("no value given for parameter `{0}`")]
    Missing(Name),
    #[error("parameter `{name}` expects {expected}, got {kind} {shape}")]
    Mismatch { name: Name, expected: String, kind: crate::tensor::Kind, shape: Shape },
}

/// Checks that `env` provides a value of the declared type for every parameter.
pub fn check_env(p: &Program, env: &Env) -> Result<(), EnvError> {
    for q in &p.params {
        let a = env.get(&q.name).ok_or_else(|| EnvError::Missing(q.name.clone()))?;
        if a.kind() != q.ty.kind || *a.shape() != q.ty.shape {
            return Err(EnvError::Mismatch {
                name: q.name.clone(),
                expected: q.ty.to_string(),
                kind: a.kind(),
                shape: a.shape().clone(),
            });
        }
    }
    Ok(())
}

/// Call-by-value evaluation. Shared subterms are re-evaluated at every
/// occurrence.
pub fn eval(t: &Term, env: &Env) -> ConcreteArray {
    eval_value(t, env).array().clone()
}

pub fn eval_value(t: &Term, env: &Env) -> Value {
    Evaluator::new(env, false).value(t)
}

/// Evaluation that computes each shared body once.
pub fn eval_memo(t: &Term, env: &Env) -> (Value, ShareCounts) {
    let mut ev = Evaluator::new(env, true);
    let v = ev.value(t);
    (v, ev.counts)
}

struct Evaluator<'a> {
    base: &'a Env,
    locals: Vec<(Name, ConcreteArray)>,
    memo: Option<HashMap<ShareId, ConcreteArray>>,
    counts: ShareCounts,
}

impl<'a> Evaluator<'a> {
    fn new(base: &'a Env, memo: bool) -> Self {
        Evaluator { base, locals: Vec::new(), memo: memo.then(HashMap::new), counts: BTreeMap::new() }
    }

    fn lookup(&self, x: &Name) -> &ConcreteArray {
        self.locals
            .iter()
            .rev()
            .find(|(y, _)| y == x)
            .map(|(_, v)| v)
            .or_else(|| self.base.get(x))
            .unwrap_or_else(|| panic!("unbound variable `{x}` during evaluation"))
    }

    fn value(&mut self, t: &Term) -> Value {
        match t {
            Term::Tuple(ts) => Value::Tuple(ts.iter().map(|c| self.value(c)).collect()),
            Term::Let(x, u, v) => {
                let a = self.eval(u);
                self.locals.push((x.clone(), a));
                let r = self.value(v);
                self.locals.pop();
                r
            }
            _ => Value::Array(self.eval(t)),
        }
    }

    fn index(&mut self, ix: &[crate::ir::TermRef]) -> Vec<i64> {
        ix.iter().map(|e| self.eval(e).scalar_value_int()).collect()
    }

    /// Evaluates `f` at every point of `dims`, in row-major order.
    fn tabulate(&mut self, dims: &[usize], f: &IxFn) -> Vec<Vec<i64>> {
        let mut points = Vec::new();
        for_each_index(dims, |p| points.push(p.to_vec()));
        let n = self.locals.len();
        let mut out = Vec::with_capacity(points.len());
        for p in points {
            for (x, &i) in f.params.iter().zip(&p) {
                self.locals.push((x.clone(), ConcreteArray::scalar_int(i)));
            }
            out.push(self.index(&f.body));
            self.locals.truncate(n);
        }
        out
    }

    fn eval(&mut self, t: &Term) -> ConcreteArray {
        match t {
            Term::Const(a) => a.clone(),
            Term::Var(x) => self.lookup(x).clone(),
            Term::Let(x, u, v) => {
                let a = self.eval(u);
                self.locals.push((x.clone(), a));
                let r = self.eval(v);
                self.locals.pop();
                r
            }
            Term::Cond(b, u, v) => {
                let b = self.eval(b);
                let u = self.eval(u);
                let v = self.eval(v);
                if b.scalar_value_bool() {
                    u
                } else {
                    v
                }
            }
            Term::Op(op, args) => {
                let vs: Vec<ConcreteArray> = args.iter().map(|a| self.eval(a)).collect();
                let refs: Vec<&ConcreteArray> = vs.iter().collect();
                ConcreteArray::map_op(*op, &refs)
            }
            Term::Index(a, ix) => {
                let a = self.eval(a);
                let ix = self.index(ix);
                a.index(&ix)
            }
            Term::SumOuter(a) => self.eval(a).sum_outer(),
            Term::Gather(sh, a, f) => {
                let a = self.eval(a);
                let m1 = f.params.len();
                let table = self.tabulate(&sh.dims()[..m1], f);
                let st = sh.prefix(m1).strides();
                a.gather(sh, m1, &|p| table[linear(&st, p)].clone())
            }
            Term::Scatter(sh, a, f) => {
                let a = self.eval(a);
                let m1 = f.params.len();
                let outer = a.shape().prefix(m1);
                let table = self.tabulate(outer.dims(), f);
                let st = outer.strides();
                a.scatter(sh, m1, &|p| table[linear(&st, p)].clone())
            }
            Term::Ravel(ts) => {
                let parts: Vec<ConcreteArray> = ts.iter().map(|c| self.eval(c)).collect();
                ConcreteArray::from_subarrays(&parts)
            }
            Term::Replicate(k, a) => self.eval(a).replicate(*k),
            Term::Transpose(perm, a) => self.eval(a).transpose(perm),
            Term::Reshape(sh, a) => self.eval(a).reshape(sh),
            Term::Build1(k, i, b) => {
                let mut parts = Vec::with_capacity(*k);
                for j in 0..*k {
                    self.locals.push((i.clone(), ConcreteArray::scalar_int(j as i64)));
                    parts.push(self.eval(b));
                    self.locals.pop();
                }
                if parts.is_empty() {
                    // The element shape of an empty build is only known statically.
                    return empty_build(b, i, self);
                }
                ConcreteArray::from_subarrays(&parts)
            }
            Term::Share(id, b) => {
                if let Some(m) = &self.memo {
                    if let Some(a) = m.get(id) {
                        return a.clone();
                    }
                }
                *self.counts.entry(*id).or_insert(0) += 1;
                let a = self.eval(b);
                if let Some(m) = &mut self.memo {
                    m.insert(*id, a.clone());
                }
                a
            }
            Term::Tuple(_) => panic!("tuple outside the outermost position"),
        }
    }
}

fn linear(st: &[usize], p: &[i64]) -> usize {
    p.iter().zip(st).map(|(&i, &s)| i as usize * s).sum()
}

fn empty_build(b: &Term, i: &Name, ev: &Evaluator) -> ConcreteArray {
    let mut tenv = crate::ir::TypeEnv::new();
    for (x, v) in ev.base.iter() {
        tenv.push(x.clone(), crate::ir::ArrayType::new(v.shape().clone(), v.kind()));
    }
    for (x, v) in &ev.locals {
        tenv.push(x.clone(), crate::ir::ArrayType::new(v.shape().clone(), v.kind()));
    }
    tenv.push(i.clone(), crate::ir::ArrayType::scalar(crate::tensor::Kind::Int));
    let ty = crate::ir::infer_array(b, &tenv).expect("evaluated terms are checked");
    ConcreteArray::zeros(ty.kind, ty.shape.cons(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_term;
    use crate::tensor::PrimOp;

    fn env(bs: &[(&str, ConcreteArray)]) -> Env {
        bs.iter().map(|(n, a)| (Name::new(n), a.clone())).collect()
    }

    #[test]
    fn self_convolution_matches_a_loop() {
        let t = parse_term(
            "(sumouter (build1 3 (lam i (op * (index a [i]) (index a [(op - (op - 3 1) i)])))))",
        )
        .unwrap();
        let a = [1.0, 2.0, 3.0];
        let expected: f64 = (0..3).map(|i| a[i] * a[2 - i]).sum();
        let r = eval(&t, &env(&[("a", ConcreteArray::vector(a.to_vec()))]));
        assert_eq!(r, ConcreteArray::scalar_real(expected));
        assert_eq!(expected, 10.0);
    }

    #[test]
    fn build_of_index_variable() {
        let t = parse_term("(build1 3 (lam i i))").unwrap();
        assert_eq!(eval(&t, &Env::new()), ConcreteArray::iota(3));
    }

    #[test]
    fn matmat_matches_triple_loop() {
        let t = parse_term(
            "(build1 2 (lam i (build1 2 (lam j (sumouter (build1 2 (lam k \
             (op * (index a [i k]) (index b [k j])))))))))",
        )
        .unwrap();
        let sh = Shape::new(vec![2, 2]);
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    c[i * 2 + j] += a[i * 2 + k] * b[k * 2 + j];
                }
            }
        }
        let e = env(&[
            ("a", ConcreteArray::real(sh.clone(), a.to_vec())),
            ("b", ConcreteArray::real(sh.clone(), b.to_vec())),
        ]);
        assert_eq!(eval(&t, &e), ConcreteArray::real(sh, c));
        assert_eq!(eval(&t, &e).as_real(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn memo_evaluates_shared_bodies_once() {
        let u = Term::share(ShareId(1), parse_term("(op * x x)").unwrap());
        let t = Term::op2(PrimOp::Add, u.clone(), u);
        let e = env(&[("x", ConcreteArray::scalar_real(3.0))]);
        let (v, counts) = eval_memo(&t, &e);
        assert_eq!(v.array(), &ConcreteArray::scalar_real(18.0));
        assert_eq!(counts, BTreeMap::from([(ShareId(1), 1)]));
        let (_, plain) = {
            let mut ev = Evaluator::new(&e, false);
            let v = ev.value(&t);
            (v, ev.counts)
        };
        assert_eq!(plain[&ShareId(1)], 2);
    }

    #[test]
    fn memo_agrees_on_share_free_terms() {
        let t = parse_term("(let (y (op * x x)) (op + y (op sin y)))").unwrap();
        let e = env(&[("x", ConcreteArray::scalar_real(0.3))]);
        let (v, counts) = eval_memo(&t, &e);
        assert!(v.array().bit_eq(&eval(&t, &e)));
        assert!(counts.is_empty());
    }

    #[test]
    fn cond_is_strict_and_total() {
        let t = parse_term("(cond (op < i 2) (index a [i]) (index a [(op + i 10)]))").unwrap();
        let e = env(&[("a", ConcreteArray::vector(vec![5.0, 6.0])), ("i", ConcreteArray::scalar_int(3))]);
        assert_eq!(eval(&t, &e), ConcreteArray::scalar_real(0.0));
    }

    #[test]
    fn empty_build_has_static_shape() {
        let t = parse_term("(build1 0 (lam i (ravel x x)))").unwrap();
        let e = env(&[("x", ConcreteArray::vector(vec![1.0]))]);
        assert_eq!(eval(&t, &e).shape(), &Shape::new(vec![0, 2, 1]));
    }
}
