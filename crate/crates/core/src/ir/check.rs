//! Shape and kind checking.

use std::collections::HashMap;

use thiserror::Error;

use super::{ArrayType, IxFn, Name, Param, Program, ShareId, Term, Type};
use crate::tensor::{is_permutation, Kind, Shape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckError {
    #[error("unbound variable `{0}`")]
    UnboundVar(Name),
    #[error("shape mismatch in {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("kind mismatch in {node}: {detail}")]
    KindMismatch { node: String, detail: String },
    #[error("invalid permutation in {node}")]
    PermutationInvalid { node: String },
    #[error("reshape in {node} changes the element count from {from} to {to}")]
    ReshapeProductMismatch { node: String, from: usize, to: usize },
    #[error("cond scrutinee in {node} must be bool [], found {found}")]
    CondScrutineeNotRank0Bool { node: String, found: ArrayType },
    #[error("scatter in {node} needs a numeric array, found {found}")]
    ScatterNonNumeric { node: String, found: Kind },
    #[error("tuple in {node} is only allowed at the outermost position")]
    MisplacedTuple { node: String },
}

/// Scoped typing environment; later bindings shadow earlier ones.
#[derive(Clone, Debug, Default)]
pub struct TypeEnv {
    stack: Vec<(Name, ArrayType)>,
    shares: HashMap<ShareId, ArrayType>,
}

impl TypeEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(ps: &[Param]) -> Self {
        TypeEnv {
            stack: ps.iter().map(|p| (p.name.clone(), p.ty.clone())).collect(),
            shares: HashMap::new(),
        }
    }

    pub fn lookup(&self, x: &Name) -> Option<&ArrayType> {
        self.stack.iter().rev().find(|(y, _)| y == x).map(|(_, t)| t)
    }

    pub fn push(&mut self, x: Name, ty: ArrayType) {
        self.stack.push((x, ty));
    }

    pub fn pop(&mut self) {
        self.stack.pop();
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.stack.truncate(n);
    }
}

/// Short description of a node for diagnostics.
fn describe(t: &Term) -> String {
    let s = t.to_string();
    if s.chars().count() > 72 {
        let cut: String = s.chars().take(69).collect();
        format!("`{cut}...`")
    } else {
        format!("`{s}`")
    }
}

fn shape_err(t: &Term, detail: String) -> CheckError {
    CheckError::ShapeMismatch { node: describe(t), detail }
}

fn kind_err(t: &Term, detail: String) -> CheckError {
    CheckError::KindMismatch { node: describe(t), detail }
}

fn int_scalar() -> ArrayType {
    ArrayType::scalar(Kind::Int)
}

/// Type of a term; tuples are accepted only in tail position of the root.
pub fn check(t: &Term, env: &TypeEnv) -> Result<Type, CheckError> {
    let mut env = env.clone();
    check_top(t, &mut env)
}

fn check_top(t: &Term, env: &mut TypeEnv) -> Result<Type, CheckError> {
    match t {
        Term::Tuple(ts) => {
            Ok(Type::Tuple(ts.iter().map(|c| check_top(c, env)).collect::<Result<_, _>>()?))
        }
        Term::Let(x, u, v) => {
            let tu = infer(u, env)?;
            env.push(x.clone(), tu);
            let r = check_top(v, env);
            env.pop();
            r
        }
        _ => Ok(Type::Array(infer(t, env)?)),
    }
}

pub fn check_program(p: &Program) -> Result<Type, CheckError> {
    check(&p.body, &p.type_env())
}

/// Array type of a term that must not be a tuple.
pub fn infer_array(t: &Term, env: &TypeEnv) -> Result<ArrayType, CheckError> {
    let mut env = env.clone();
    infer(t, &mut env)
}

fn index_component(e: &Term, env: &mut TypeEnv, node: &Term) -> Result<(), CheckError> {
    let te = infer(e, env)?;
    if te != int_scalar() {
        return Err(kind_err(node, format!("index component {e} has type {te}, expected i64 []")));
    }
    Ok(())
}

fn ixfn_body(f: &IxFn, env: &mut TypeEnv, node: &Term) -> Result<(), CheckError> {
    let n = env.len();
    for p in &f.params {
        env.push(p.clone(), int_scalar());
    }
    let r = f.body.iter().try_for_each(|e| index_component(e, env, node));
    env.truncate(n);
    r
}

pub(crate) fn infer(t: &Term, env: &mut TypeEnv) -> Result<ArrayType, CheckError> {
    match t {
        Term::Const(a) => Ok(ArrayType::new(a.shape().clone(), a.kind())),
        Term::Var(x) => env.lookup(x).cloned().ok_or_else(|| CheckError::UnboundVar(x.clone())),
        Term::Let(x, u, v) => {
            let tu = infer(u, env)?;
            env.push(x.clone(), tu);
            let r = infer(v, env);
            env.pop();
            r
        }
        Term::Cond(b, u, v) => {
            let tb = infer(b, env)?;
            if tb != ArrayType::scalar(Kind::Bool) {
                return Err(CheckError::CondScrutineeNotRank0Bool { node: describe(t), found: tb });
            }
            let tu = infer(u, env)?;
            let tv = infer(v, env)?;
            if tu != tv {
                return Err(shape_err(t, format!("branches have types {tu} and {tv}")));
            }
            Ok(tu)
        }
        Term::Op(op, args) => {
            if args.len() != op.arity() {
                return Err(kind_err(t, format!("`{op}` takes {} operands", op.arity())));
            }
            let tys = args.iter().map(|a| infer(a, env)).collect::<Result<Vec<_>, _>>()?;
            let shape = tys[0].shape.clone();
            if let Some(other) = tys.iter().find(|ty| ty.shape != shape) {
                return Err(shape_err(t, format!("operands have shapes {shape} and {}", other.shape)));
            }
            let kinds: Vec<Kind> = tys.iter().map(|ty| ty.kind).collect();
            match op.result_kind(&kinds) {
                Some(k) => Ok(ArrayType::new(shape, k)),
                None => Err(kind_err(t, format!("`{op}` is not defined on {kinds:?}"))),
            }
        }
        Term::Index(a, ix) => {
            let ta = infer(a, env)?;
            for e in ix {
                index_component(e, env, t)?;
            }
            if ix.len() > ta.shape.rank() {
                return Err(shape_err(
                    t,
                    format!("index of length {} into an array of rank {}", ix.len(), ta.shape.rank()),
                ));
            }
            Ok(ArrayType::new(ta.shape.suffix(ix.len()), ta.kind))
        }
        Term::SumOuter(a) => {
            let ta = infer(a, env)?;
            if ta.shape.rank() == 0 {
                return Err(shape_err(t, "sumouter of a rank-0 array".into()));
            }
            if !ta.kind.is_numeric() {
                return Err(kind_err(t, format!("sumouter of {}", ta.kind)));
            }
            Ok(ArrayType::new(ta.shape.suffix(1), ta.kind))
        }
        Term::Gather(sh, a, f) => {
            let ta = infer(a, env)?;
            ixfn_body(f, env, t)?;
            let (m1, m2) = (f.params.len(), f.body.len());
            if m1 > sh.rank() || m2 > ta.shape.rank() {
                return Err(shape_err(t, "index function arity exceeds a rank".into()));
            }
            if ta.shape.suffix(m2) != sh.suffix(m1) {
                return Err(shape_err(
                    t,
                    format!("trailing dims {} and {} differ", ta.shape.suffix(m2), sh.suffix(m1)),
                ));
            }
            Ok(ArrayType::new(sh.clone(), ta.kind))
        }
        Term::Scatter(sh, a, f) => {
            let ta = infer(a, env)?;
            if !ta.kind.is_numeric() {
                return Err(CheckError::ScatterNonNumeric { node: describe(t), found: ta.kind });
            }
            ixfn_body(f, env, t)?;
            let (m1, m2) = (f.params.len(), f.body.len());
            if m1 > ta.shape.rank() || m2 > sh.rank() {
                return Err(shape_err(t, "index function arity exceeds a rank".into()));
            }
            if ta.shape.suffix(m1) != sh.suffix(m2) {
                return Err(shape_err(
                    t,
                    format!("trailing dims {} and {} differ", ta.shape.suffix(m1), sh.suffix(m2)),
                ));
            }
            Ok(ArrayType::new(sh.clone(), ta.kind))
        }
        Term::Ravel(ts) => {
            if ts.is_empty() {
                return Err(shape_err(t, "ravel of no elements".into()));
            }
            let t0 = infer(&ts[0], env)?;
            for u in &ts[1..] {
                let tu = infer(u, env)?;
                if tu != t0 {
                    return Err(shape_err(t, format!("elements have types {t0} and {tu}")));
                }
            }
            Ok(ArrayType::new(t0.shape.cons(ts.len()), t0.kind))
        }
        Term::Replicate(k, a) => {
            let ta = infer(a, env)?;
            Ok(ArrayType::new(ta.shape.cons(*k), ta.kind))
        }
        Term::Transpose(perm, a) => {
            let ta = infer(a, env)?;
            if !is_permutation(perm) || perm.len() > ta.shape.rank() {
                return Err(CheckError::PermutationInvalid { node: describe(t) });
            }
            let d = ta.shape.dims();
            let mut out: Vec<usize> = perm.iter().map(|&p| d[p]).collect();
            out.extend_from_slice(&d[perm.len()..]);
            Ok(ArrayType::new(Shape::new(out), ta.kind))
        }
        Term::Reshape(sh, a) => {
            let ta = infer(a, env)?;
            if ta.shape.size() != sh.size() {
                return Err(CheckError::ReshapeProductMismatch {
                    node: describe(t),
                    from: ta.shape.size(),
                    to: sh.size(),
                });
            }
            Ok(ArrayType::new(sh.clone(), ta.kind))
        }
        Term::Build1(k, i, b) => {
            env.push(i.clone(), int_scalar());
            let tb = infer(b, env);
            env.pop();
            let tb = tb?;
            Ok(ArrayType::new(tb.shape.cons(*k), tb.kind))
        }
        Term::Share(id, b) => {
            if let Some(ty) = env.shares.get(id) {
                return Ok(ty.clone());
            }
            let ty = infer(b, env)?;
            env.shares.insert(*id, ty.clone());
            Ok(ty)
        }
        Term::Tuple(_) => Err(CheckError::MisplacedTuple { node: describe(t) }),
    }
}
