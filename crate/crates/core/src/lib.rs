//! Numerical laboratory for the intermediate asymptotics of the one-dimensional
//! first-order mean field games system
//!
//! ```text
//! -u_t + u_x^2 / 2 = m^theta,      m_t - (m u_x)_x = 0,      m(., 0) = m_0
//! ```
//!
//! closed either by a terminal cost `u(., T) = c_T m^theta(., T)` or by a prescribed
//! terminal density (planning problem).
//!
//! * [`profiles`]: closed-form self-similar solutions.
//! * [`solver`]: forward-backward finite-difference solver on a truncated domain.
//! * [`lagrangian`]: flow of optimal trajectories and free-boundary extraction.
//! * [`rescaling`]: continuous rescaling, Lyapunov functional and convergence metrics.
//! * [`diagnostics`]: power-law rate fits and structural identities.

pub mod diagnostics;
pub mod error;
pub mod lagrangian;
pub mod profiles;
pub mod rescaling;
pub mod solver;

pub use error::{Error, Result};
pub use profiles::{Params, SelfSimilarProfile, Variant};
pub use solver::{Field, FieldKind, Grid, SolveReport};
