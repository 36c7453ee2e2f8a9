//! Vectorising reverse-mode automatic differentiation for a first-order
//! array language.
//!
//! The pipeline: [`bot`] rewrites elementwise `build1`/`index` code into bulk
//! array operations, [`symbolic`] dualizes the result into a primal term and a
//! [`delta`] trace, and the trace is transposed either concretely
//! ([`reverse`]) or symbolically into a standalone gradient program.

pub mod bot;
pub mod delta;
pub mod interp;
pub mod ir;
pub mod oracle;
pub mod reverse;
pub mod symbolic;
pub mod tensor;
