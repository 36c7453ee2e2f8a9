//! Compile-time differentiation: forward dualization into a primal term and
//! a symbolic Delta, a reverse pass that builds cotangent terms, and the
//! conversion of global sharing back to `let`.

mod dualize;
mod unshare;
mod wrapper;

use std::rc::Rc;

pub use dualize::{
    dualize, dualize_concrete, dualize_count, dualize_symbolic, ConcreteAlgebra, Dual, DualizeError, PrimalAlgebra,
    PrimalEnv, SymbolicDual,
};
pub use unshare::{share_to_let, stack_lets, unshare, ShareMap, UnshareError};
pub use wrapper::{
    build_gradient_program, scale_payloads_are_references, symbolic_gradient, GradientError, GradientProgram,
    SharedGradient,
};

use crate::delta::{Carrier, IdGen};
use crate::ir::{IxFn, NameGen, ShareId, Term, TermRef};
use crate::tensor::Shape;

/// Carrier whose arrays are terms. Cotangent shares draw ids from the same
/// counter as the primal and Delta shares of the run.
#[derive(Clone, Debug)]
pub struct Symbolic {
    pub ids: Rc<IdGen>,
    pub names: Rc<NameGen>,
}

impl Symbolic {
    pub fn new(ids: Rc<IdGen>, names: Rc<NameGen>) -> Self {
        Symbolic { ids, names }
    }

    fn wrap(&self, t: &TermRef) -> TermRef {
        if t.is_atomic() {
            t.clone()
        } else {
            Term::share(ShareId(self.ids.fresh()), t.clone())
        }
    }
}

fn show_list(ts: &[TermRef]) -> String {
    let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
    format!("[{}]", parts.join(" "))
}

impl Carrier for Symbolic {
    type Array = TermRef;
    type Index = Vec<TermRef>;
    type IxFun = IxFn;

    fn add(&self, new: &TermRef, old: &TermRef) -> TermRef {
        Term::op2(crate::tensor::PrimOp::Add, new.clone(), old.clone())
    }

    fn scale(&self, arr: &TermRef, c: &TermRef) -> TermRef {
        Term::op2(crate::tensor::PrimOp::Mul, arr.clone(), c.clone())
    }

    fn share(&self, c: &TermRef) -> TermRef {
        self.wrap(c)
    }

    fn one_hot(&self, sh: &Shape, ix: &Vec<TermRef>, c: &TermRef) -> TermRef {
        Term::scatter(sh.clone(), c.clone(), IxFn::new(vec![], ix.clone()))
    }

    fn replicate(&self, k: usize, c: &TermRef) -> TermRef {
        Term::replicate(k, c.clone())
    }

    fn sum_outer(&self, c: &TermRef) -> TermRef {
        Term::sum_outer(c.clone())
    }

    fn gather(&self, sh: &Shape, c: &TermRef, f: &IxFn) -> TermRef {
        Term::gather(sh.clone(), c.clone(), f.clone())
    }

    fn scatter(&self, sh: &Shape, c: &TermRef, f: &IxFn) -> TermRef {
        Term::scatter(sh.clone(), c.clone(), f.clone())
    }

    fn index_at(&self, c: &TermRef, i: usize) -> TermRef {
        Term::index(c.clone(), vec![Term::int(i as i64)])
    }

    fn transpose(&self, perm: &[usize], c: &TermRef) -> TermRef {
        Term::transpose(perm.to_vec(), c.clone())
    }

    fn reshape(&self, sh: &Shape, c: &TermRef) -> TermRef {
        Term::reshape(sh.clone(), c.clone())
    }

    fn index_len(ix: &Vec<TermRef>) -> usize {
        ix.len()
    }

    fn ixfun_arity(f: &IxFn) -> usize {
        f.params.len()
    }

    fn ixfun_len(f: &IxFn) -> usize {
        f.body.len()
    }

    fn shape_of(&self, _: &TermRef) -> Option<Shape> {
        None
    }

    /// Shared payloads print as `#id`.
    fn show_array(a: &TermRef) -> String {
        match &**a {
            Term::Share(id, _) => format!("#{}", id.0),
            _ => a.to_string(),
        }
    }

    fn show_index(ix: &Vec<TermRef>) -> String {
        show_list(ix)
    }

    fn show_ixfun(f: &IxFn) -> String {
        let ps: Vec<&str> = f.params.iter().map(|p| p.as_str()).collect();
        format!("(lam [{}] {})", ps.join(" "), show_list(&f.body))
    }
}
