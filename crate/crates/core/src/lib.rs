//! Numerical construction and certification of the topological equivalence
//! between a uniformly contractive nonautonomous linear system
//! `x' = A(t)x` and its nonlinear perturbation `y' = A(t)y + f(t,y)`.
//!
//! The crate builds the equivalence maps `H` and `G` by two independent
//! routes (direct initial-value problems and a fixed-point iteration of the
//! defining integral operator), propagates first and second derivatives
//! through variational equations, and certifies the explicit contraction,
//! growth, and modulus-of-continuity bounds that make the equivalence a C²
//! diffeomorphism in the space variable. Everything is evaluated on finite
//! horizons with machine-checkable pass/fail certificates.
//!
//! Module map:
//! - [`ode`]: IVP integration with dense output (fixed RK4, adaptive RK45).
//! - [`quad`]: adaptive Simpson quadrature for vector integrands.
//! - [`dsl`]: the expression language used by configuration files.
//! - [`linear`]: transition matrices and contraction-constant estimation.
//! - [`perturbation`]: the nonlinearity, its derivatives, and the hypothesis
//!   audit.
//! - [`conjugacy`]: the maps `H`, `G`, their fixed-point construction, and
//!   conjugacy / inverse / growth / continuity checks.
//! - [`smoothness`]: variational equations, Jacobians, Hessians, and
//!   finite-difference validation.
//! - [`bounds`]: the explicit constant formulas and inequality certificates.
//! - [`gallery`]: built-in example systems with closed-form oracles.
//! - [`cert`]: the certificate record shared by all checks.

pub mod bounds;
pub mod cert;
pub mod conjugacy;
pub mod dsl;
pub mod gallery;
pub mod linear;
pub mod ode;
pub mod perturbation;
pub mod quad;
pub mod smoothness;
