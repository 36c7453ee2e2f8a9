//! Scans and rewrites for globally shared subterms.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use thiserror::Error;

use super::{Name, ShareId, Term, TermRef};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShareError {
    #[error("share {0} wraps two different terms")]
    Inconsistent(ShareId),
    #[error("share {id} refers to the locally bound variable `{var}`")]
    CapturesLocal { id: ShareId, var: Name },
    #[error("share {outer} contains share {inner} with a larger id")]
    NonMonotone { outer: ShareId, inner: ShareId },
}

/// Every distinct shared subterm, keyed by id.
pub fn collect_shares(t: &TermRef) -> BTreeMap<ShareId, TermRef> {
    fn go(t: &TermRef, out: &mut BTreeMap<ShareId, TermRef>) {
        if let Term::Share(id, _) = &**t {
            if out.contains_key(id) {
                return;
            }
            out.insert(*id, t.clone());
        }
        for c in t.children() {
            go(c, out);
        }
    }
    let mut out = BTreeMap::new();
    go(t, &mut out);
    out
}

pub fn contains_share(t: &Term) -> bool {
    super::any_node(t, &mut |n| matches!(n, Term::Share(..)))
}

/// Checks the sharing discipline of a term:
/// equal ids wrap the same node, shared bodies never mention a variable
/// bound by an enclosing `let`, `build1` or index function, and shares
/// nested inside a share have smaller ids.
pub fn check_share_scoping(t: &TermRef) -> Result<(), ShareError> {
    struct Scan {
        nodes: HashMap<ShareId, TermRef>,
        inner_ids: HashMap<ShareId, Vec<ShareId>>,
    }
    impl Scan {
        // Returns the shares reachable from `t` without passing another share.
        fn go(&mut self, t: &TermRef, local: &mut Vec<Name>, top: &mut Vec<ShareId>) -> Result<(), ShareError> {
            match &**t {
                Term::Share(id, b) => {
                    top.push(*id);
                    if let Some(prev) = self.nodes.get(id) {
                        if !Rc::ptr_eq(prev, t) && !super::alpha_eq(prev, t) {
                            return Err(ShareError::Inconsistent(*id));
                        }
                        return Ok(());
                    }
                    self.nodes.insert(*id, t.clone());
                    for v in super::free_vars(b) {
                        if local.contains(&v) {
                            return Err(ShareError::CapturesLocal { id: *id, var: v });
                        }
                    }
                    let mut inner = Vec::new();
                    self.go(b, &mut Vec::new(), &mut inner)?;
                    if let Some(&big) = inner.iter().find(|&&j| j >= *id) {
                        return Err(ShareError::NonMonotone { outer: *id, inner: big });
                    }
                    self.inner_ids.insert(*id, inner);
                    Ok(())
                }
                Term::Let(x, u, v) => {
                    self.go(u, local, top)?;
                    local.push(x.clone());
                    let r = self.go(v, local, top);
                    local.pop();
                    r
                }
                Term::Build1(_, i, b) => {
                    local.push(i.clone());
                    let r = self.go(b, local, top);
                    local.pop();
                    r
                }
                Term::Gather(_, a, f) | Term::Scatter(_, a, f) => {
                    self.go(a, local, top)?;
                    let n = local.len();
                    local.extend(f.params.iter().cloned());
                    let r = f.body.iter().try_for_each(|e| self.go(e, local, top));
                    local.truncate(n);
                    r
                }
                _ => t.children().into_iter().try_for_each(|c| self.go(c, local, top)),
            }
        }
    }
    let mut s = Scan { nodes: HashMap::new(), inner_ids: HashMap::new() };
    s.go(t, &mut Vec::new(), &mut Vec::new())
}

/// Replaces every `share` node by its body.
pub fn strip_share(t: &TermRef) -> TermRef {
    fn go(t: &TermRef, memo: &mut HashMap<ShareId, TermRef>) -> TermRef {
        if let Term::Share(id, b) = &**t {
            if let Some(r) = memo.get(id) {
                return r.clone();
            }
            let r = go(b, memo);
            memo.insert(*id, r.clone());
            return r;
        }
        if t.children().is_empty() {
            return t.clone();
        }
        t.map_children(&mut |c| go(c, memo))
    }
    go(t, &mut HashMap::new())
}
