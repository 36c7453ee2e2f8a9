//! Conversion of global sharing (`share N t`) into ordinary `let` bindings.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ir::{IxFn, Name, ShareId, Term, TermRef};

/// Shared fragments collected by [`unshare`], with the variable bound to each.
pub type ShareMap = BTreeMap<ShareId, (Name, TermRef)>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UnshareError {
    #[error("unexpected {0} outside an index payload")]
    Malformed(&'static str),
}

fn share_name(id: ShareId) -> Name {
    Name::new(&format!("shared.{}", id.0))
}

/// Replaces every `share` in `t` by a variable, recording each shared body
/// (itself unshared) in `m` on its first visit. `let` may only occur inside
/// index components and index-function bodies.
pub fn unshare(m: &mut ShareMap, t: &TermRef) -> Result<TermRef, UnshareError> {
    go(m, t, false)
}

fn go(m: &mut ShareMap, t: &TermRef, payload: bool) -> Result<TermRef, UnshareError> {
    Ok(match &**t {
        Term::Var(_) | Term::Const(_) => t.clone(),
        Term::Share(id, body) => {
            if let Some((x, _)) = m.get(id) {
                return Ok(Term::var(x.clone()));
            }
            let b = go(m, body, false)?;
            let x = share_name(*id);
            m.insert(*id, (x.clone(), b));
            Term::var(x)
        }
        Term::Build1(..) => return Err(UnshareError::Malformed("build1")),
        Term::Let(..) if !payload => return Err(UnshareError::Malformed("let")),
        Term::Let(x, u, v) => Term::let_(x.clone(), go(m, u, true)?, go(m, v, true)?),
        Term::Index(a, ix) => {
            let a2 = go(m, a, payload)?;
            let ix2 = ix.iter().map(|e| go(m, e, true)).collect::<Result<_, _>>()?;
            Term::index(a2, ix2)
        }
        Term::Gather(sh, a, f) | Term::Scatter(sh, a, f) => {
            let a2 = go(m, a, payload)?;
            let body = f.body.iter().map(|e| go(m, e, true)).collect::<Result<_, _>>()?;
            let g = IxFn::new(f.params.clone(), body);
            if matches!(&**t, Term::Gather(..)) {
                Term::gather(sh.clone(), a2, g)
            } else {
                Term::scatter(sh.clone(), a2, g)
            }
        }
        _ => {
            let mut err = None;
            let r = t.map_children(&mut |c| match go(m, c, payload) {
                Ok(c2) => c2,
                Err(e) => {
                    err = Some(e);
                    c.clone()
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            r
        }
    })
}

/// Binds the collected fragments around `t`, lowest id outermost.
pub fn stack_lets(m: ShareMap, t: TermRef) -> TermRef {
    m.into_iter().rev().fold(t, |acc, (_, (x, body))| Term::let_(x, body, acc))
}

pub fn share_to_let(t: &TermRef) -> Result<TermRef, UnshareError> {
    let mut m = ShareMap::new();
    let t2 = unshare(&mut m, t)?;
    Ok(stack_lets(m, t2))
}
