//! Koopman-van Hove laboratory: classical wavefunctions on phase space.
//!
//! The crate is organised bottom-up:
//!
//! - [`phase_space`]: rectangular grids over `z = (q, p)`, quadrature and
//!   sixth-order central differences with zero ghost cells.
//! - [`hamiltonians`]: the Hamiltonian catalogue, vector fields, the
//!   canonical bracket, the van Hove phase term and the leapfrog flow.
//! - [`wavefunction`]: grid states, inner products and the KvN/KvH densities.
//! - [`operators`]: position/momentum operators, Liouvillians, angular and
//!   linear momentum, momentum-map generators and group actions.
//! - [`propagation`]: RK4 grid stepper, method-of-characteristics oracle,
//!   density transport, quasi-Monte Carlo expectations, Heisenberg picture.
//! - [`diagnostics`]: conservation monitors, rate identities and the
//!   four-way term decomposition.

// index loops over axes read closer to the formulas than iterator chains
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod error;
pub mod hamiltonians;
pub mod operators;
pub mod phase_space;
pub mod propagation;
pub mod wavefunction;

mod interp;

pub use error::{KvhError, Result};
pub use num_complex::Complex64 as C64;
