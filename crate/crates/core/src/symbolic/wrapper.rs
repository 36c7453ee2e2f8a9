//! The full compile-time pipeline: vectorise, dualize, reverse symbolically
//! and emit one program computing the primal and all gradients.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{dualize_symbolic, share_to_let, UnshareError};
use super::dualize::DualizeError;
use crate::bot::{normalize_program, Options};
use crate::delta::{for_each_node, DVarName, Delta, DeltaKind};
use crate::interp::{eval_value, Env, Value};
use crate::ir::{check_program, pretty_program, ArrayType, CheckError, Name, Param, Program, Term, TermRef, Type};
use crate::reverse::reverse_pass;
use crate::tensor::{ConcreteArray, Kind, Shape};

use super::Symbolic;

#[derive(Debug, Error)]
pub enum GradientError {
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Dualize(#[from] DualizeError),
    #[error(transparent)]
    Unshare(#[from] UnshareError),
}

/// A standalone program `(params x1 .. xn c)` returning
/// `(tuple primal (tuple grad1 .. gradk))`, one gradient per real parameter.
#[derive(Clone, Debug)]
pub struct GradientProgram {
    pub program: Program,
    pub cotangent: Name,
    pub real_params: Vec<Name>,
}

impl GradientProgram {
    pub fn source(&self) -> String {
        pretty_program(&self.program)
    }

    /// Runs the program; returns the primal and the gradient of each real
    /// parameter.
    pub fn run(&self, inputs: &Env, ctg: f64) -> (ConcreteArray, BTreeMap<Name, ConcreteArray>) {
        let mut env = inputs.clone();
        env.insert(self.cotangent.clone(), ConcreteArray::scalar_real(ctg));
        let Value::Tuple(parts) = eval_value(&self.program.body, &env) else {
            panic!("gradient program returns a tuple")
        };
        let primal = parts[0].array().clone();
        let Value::Tuple(gs) = &parts[1] else { panic!("gradient tuple") };
        let grads = self.real_params.iter().cloned().zip(gs.iter().map(|g| g.array().clone())).collect();
        (primal, grads)
    }
}

fn zeros_term(sh: &Shape) -> TermRef {
    sh.dims().iter().rev().fold(Term::real(0.0), |t, &k| Term::replicate(k, t))
}

/// Whether every `Scale` payload is a variable, constant or shared reference.
pub fn scale_payloads_are_references(d: &Delta<Symbolic>) -> bool {
    let mut ok = true;
    for_each_node(d, |n| {
        if let DeltaKind::Scale(arr, _) = n.kind() {
            ok &= arr.is_atomic();
        }
    });
    ok
}

/// The gradient term before `share_to_let`: `Share` nodes mark every
/// fragment that the reverse pass would otherwise duplicate.
pub struct SharedGradient {
    pub term: TermRef,
    pub delta: Delta<Symbolic>,
    pub cotangent: Name,
    pub real_params: Vec<Name>,
}

pub fn symbolic_gradient(p: &Program) -> Result<SharedGradient, GradientError> {
    check_program(p)?;
    let normal = normalize_program(p, Options::default());
    let dual = dualize_symbolic(&normal)?;
    let sym = &dual.carrier;
    let c = if p.params.iter().any(|q| q.name.as_str() == "c") {
        sym.names.fresh("c")
    } else {
        Name::new("c")
    };
    let grads = reverse_pass(sym, Term::var(c.clone()), &dual.delta);
    let mut real_params = Vec::new();
    let mut slots = Vec::new();
    for (k, q) in p.real_params().enumerate() {
        let v = DVarName { index: k + 1, shape: q.ty.shape.clone() };
        slots.push(grads.get(&v).cloned().unwrap_or_else(|| zeros_term(&v.shape)));
        real_params.push(q.name.clone());
    }
    let term = Term::tuple(vec![dual.primal.clone(), Term::tuple(slots)]);
    Ok(SharedGradient { term, delta: dual.delta, cotangent: c, real_params })
}

pub fn build_gradient_program(p: &Program) -> Result<GradientProgram, GradientError> {
    let g = symbolic_gradient(p)?;
    let body = share_to_let(&g.term)?;
    let mut params = p.params.clone();
    params.push(Param { name: g.cotangent.clone(), ty: ArrayType::new(Shape::scalar(), Kind::Real) });
    let program = Program::new(params, body);
    debug_assert!(matches!(check_program(&program), Ok(Type::Tuple(_))));
    Ok(GradientProgram { program, cotangent: g.cotangent, real_params: g.real_params })
}
