//! The reverse pass: transposes a Delta term against a cotangent.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::delta::{Carrier, DVarName, Delta, DeltaId, DeltaKind};
use crate::bot::{normalize_program, Options};
use crate::interp::Env;
use crate::ir::{contains_build1, Name, Program};
use crate::symbolic::{dualize_concrete, DualizeError};
use crate::tensor::{inverse_permutation, ConcreteArray, Kind, PrimOp, Shape};

/// Index function over concrete integers.
#[derive(Clone)]
pub struct ConcreteIxFun {
    pub arity: usize,
    pub len: usize,
    pub f: Rc<dyn Fn(&[i64]) -> Vec<i64>>,
}

impl fmt::Debug for ConcreteIxFun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<ixfun {} -> {}>", self.arity, self.len)
    }
}

/// Carrier of concrete arrays.
#[derive(Clone, Copy, Debug, Default)]
pub struct Concrete;

impl Carrier for Concrete {
    type Array = ConcreteArray;
    type Index = Vec<i64>;
    type IxFun = ConcreteIxFun;

    fn add(&self, new: &ConcreteArray, old: &ConcreteArray) -> ConcreteArray {
        ConcreteArray::map_op(PrimOp::Add, &[new, old])
    }

    fn scale(&self, arr: &ConcreteArray, c: &ConcreteArray) -> ConcreteArray {
        ConcreteArray::map_op(PrimOp::Mul, &[arr, c])
    }

    fn share(&self, c: &ConcreteArray) -> ConcreteArray {
        c.clone()
    }

    fn one_hot(&self, sh: &Shape, ix: &Vec<i64>, c: &ConcreteArray) -> ConcreteArray {
        ConcreteArray::one_hot(sh, ix, c)
    }

    fn replicate(&self, k: usize, c: &ConcreteArray) -> ConcreteArray {
        c.replicate(k)
    }

    fn sum_outer(&self, c: &ConcreteArray) -> ConcreteArray {
        c.sum_outer()
    }

    fn gather(&self, sh: &Shape, c: &ConcreteArray, f: &ConcreteIxFun) -> ConcreteArray {
        c.gather(sh, f.arity, &*f.f)
    }

    fn scatter(&self, sh: &Shape, c: &ConcreteArray, f: &ConcreteIxFun) -> ConcreteArray {
        c.scatter(sh, f.arity, &*f.f)
    }

    fn index_at(&self, c: &ConcreteArray, i: usize) -> ConcreteArray {
        c.index(&[i as i64])
    }

    fn transpose(&self, perm: &[usize], c: &ConcreteArray) -> ConcreteArray {
        c.transpose(perm)
    }

    fn reshape(&self, sh: &Shape, c: &ConcreteArray) -> ConcreteArray {
        c.reshape(sh)
    }

    fn index_len(ix: &Vec<i64>) -> usize {
        ix.len()
    }

    fn ixfun_arity(f: &ConcreteIxFun) -> usize {
        f.arity
    }

    fn ixfun_len(f: &ConcreteIxFun) -> usize {
        f.len
    }

    fn shape_of(&self, a: &ConcreteArray) -> Option<Shape> {
        Some(a.shape().clone())
    }

    fn show_array(a: &ConcreteArray) -> String {
        a.to_string()
    }

    fn show_index(ix: &Vec<i64>) -> String {
        format!("{ix:?}")
    }

    fn show_ixfun(f: &ConcreteIxFun) -> String {
        format!("{f:?}")
    }
}

/// Evaluation state of the reverse pass, plus instrumentation.
pub struct EState<C: Carrier> {
    pub grad: BTreeMap<DVarName, C::Array>,
    pub dfrag: BTreeMap<DeltaId, Delta<C>>,
    pub accum: BTreeMap<DeltaId, C::Array>,
    /// Number of `eval4` calls.
    pub visits: usize,
    /// Ids in the order `backprop` dequeued them.
    pub processed: Vec<DeltaId>,
}

impl<C: Carrier> Default for EState<C> {
    fn default() -> Self {
        EState {
            grad: BTreeMap::new(),
            dfrag: BTreeMap::new(),
            accum: BTreeMap::new(),
            visits: 0,
            processed: Vec::new(),
        }
    }
}

fn insert_with<K: Ord, C: Carrier>(car: &C, m: &mut BTreeMap<K, C::Array>, k: K, c: C::Array) {
    let v = match m.remove(&k) {
        Some(old) => car.add(&c, &old),
        None => c,
    };
    m.insert(k, v);
}

/// Propagates cotangent `c` into `d`, deferring shared fragments.
pub fn eval4<C: Carrier>(car: &C, c: C::Array, d: &Delta<C>, s: &mut EState<C>) {
    s.visits += 1;
    if let Some(sh) = car.shape_of(&c) {
        assert_eq!(&sh, d.shape(), "cotangent shape differs from delta shape");
    }
    match d.kind() {
        DeltaKind::Zero => {}
        DeltaKind::Input(v) => insert_with(car, &mut s.grad, v.clone(), c),
        DeltaKind::Add(d1, d2) => {
            let c = car.share(&c);
            eval4(car, c.clone(), d1, s);
            eval4(car, c, d2, s);
        }
        DeltaKind::Scale(arr, d1) => eval4(car, car.scale(arr, &c), d1, s),
        DeltaKind::Share(id, d1) => {
            s.dfrag.insert(*id, d1.clone());
            insert_with(car, &mut s.accum, *id, c);
        }
        DeltaKind::Index(d1, ix) => eval4(car, car.one_hot(d1.shape(), ix, &c), d1, s),
        DeltaKind::SumOuter(d1) => eval4(car, car.replicate(d1.shape().dims()[0], &c), d1, s),
        DeltaKind::Gather(_, d1, f) => eval4(car, car.scatter(d1.shape(), &c, f), d1, s),
        DeltaKind::Scatter(_, d1, f) => eval4(car, car.gather(d1.shape(), &c, f), d1, s),
        DeltaKind::LitArray(ds) => {
            let c = car.share(&c);
            for (i, di) in ds.iter().enumerate() {
                eval4(car, car.index_at(&c, i), di, s);
            }
        }
        DeltaKind::Replicate(_, d1) => eval4(car, car.sum_outer(&c), d1, s),
        DeltaKind::Transpose(perm, d1) => eval4(car, car.transpose(&inverse_permutation(perm), &c), d1, s),
        DeltaKind::Reshape(_, d1) => eval4(car, car.reshape(d1.shape(), &c), d1, s),
    }
}

/// Processes pending shared fragments in decreasing id order.
pub fn backprop<C: Carrier>(car: &C, s: &mut EState<C>) {
    while let Some((id, c)) = s.accum.pop_last() {
        let d = s.dfrag.remove(&id).expect("pending id without a fragment");
        s.processed.push(id);
        eval4(car, c, &d, s);
    }
}

/// Sparse gradient: absent inputs have zero gradient.
pub fn reverse_pass<C: Carrier>(car: &C, c: C::Array, d: &Delta<C>) -> BTreeMap<DVarName, C::Array> {
    reverse_pass_traced(car, c, d).grad
}

/// Like [`reverse_pass`] but returns the final state with its counters.
pub fn reverse_pass_traced<C: Carrier>(car: &C, c: C::Array, d: &Delta<C>) -> EState<C> {
    let mut s = EState::default();
    eval4(car, c, d, &mut s);
    backprop(car, &mut s);
    s
}

/// Gradient of a rank-0 real program at `inputs`, scaled by `ctg`. Only
/// real-kind parameters get an entry; missing contributions become zeros.
pub fn grad_concrete(p: &Program, inputs: &Env, ctg: &ConcreteArray) -> Result<BTreeMap<Name, ConcreteArray>, DualizeError> {
    let normal;
    let p = if contains_build1(&p.body) {
        normal = normalize_program(p, Options::default());
        &normal
    } else {
        p
    };
    let (_, d) = dualize_concrete(p, inputs)?;
    let g = reverse_pass(&Concrete, ctg.clone(), &d);
    let mut out = BTreeMap::new();
    for (k, prm) in p.real_params().enumerate() {
        let v = DVarName { index: k + 1, shape: prm.ty.shape.clone() };
        let arr = g.get(&v).cloned().unwrap_or_else(|| ConcreteArray::zeros(Kind::Real, v.shape.clone()));
        out.insert(prm.name.clone(), arr);
    }
    Ok(out)
}
