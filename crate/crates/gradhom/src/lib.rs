//! Two-scale isogeometric solver for second-gradient hyperelastic continua.
//!
//! The crate solves representative-volume-element (RVE) boundary value
//! problems driven by a macroscopic deformation gradient `F` and its gradient
//! `G = Grad F`, homogenizes first and second Piola-type stresses together
//! with algorithmically consistent condensed tangents, and couples the
//! result into a macroscopic Newton solver for second-gradient elasticity.
//! Both scales are discretized with C^1 B-spline patches (degree >= 2), so
//! the second deformation gradient is available pointwise without mixed
//! formulations.
//!
//! Crate layout, roughly bottom-up:
//!
//! * [`scalar`], [`dual`] - generic scalar trait plus forward-mode jets
//!   (first derivatives and packed symmetric second derivatives) used to
//!   differentiate strain energies exactly.
//! * [`tensor`] - small dense tensors of rank 1..=6 over 3D index space.
//! * [`spline`] - B-spline patches, Gauss quadrature, knot refinement and
//!   the prolongation operator between nested meshes.
//! * [`sparse`] - symmetric sparse storage and an LDL^T factorization.
//! * [`material`] - Mooney-Rivlin and fiber-reinforced second-gradient
//!   strain energies with stress and tangent evaluation.
//! * [`rve`] - the micro boundary value problem: constraint construction
//!   (Dirichlet or periodic), assembly and the Newton solve.
//! * [`homog`] - volume averages, homogenized stresses, condensed macro
//!   tangents and consistency checks (Hill-Mandel, boundary stress).
//! * [`macroscale`] - the macroscopic problem (Cook's membrane), with the
//!   constitutive response supplied either directly or by nested RVE solves.
//! * [`multigrid`] - nested-mesh solution schedules over both scales.
//! * [`config`], [`metrics`], [`export`], [`runner`] - run configuration,
//!   error reporting, VTK/CSV output and the command-line entry points.

pub mod config;
pub mod dual;
pub mod export;
pub mod homog;
pub mod macroscale;
pub mod material;
pub mod metrics;
pub mod multigrid;
pub mod runner;
pub mod rve;
pub mod scalar;
pub mod sparse;
pub mod spline;
pub mod tensor;

/// Dense tensor with `f64` components, the concrete type used throughout
/// the solver. Ranks 1..=6 share this one type; the rank is a runtime
/// property checked by the algebra routines.
pub type Tensor = tensor::TensorN<f64>;

/// Forward-mode first-derivative jet over the 9 components of `F`.
pub type Dual9 = dual::Dual<9>;
/// Forward-mode first-derivative jet over the 36 components of `(F, G)`.
pub type Dual36 = dual::Dual<36>;
/// Second-derivative jet over the 9 components of `F`.
pub type HessJet9 = dual::HessJet<9, 45>;
/// Second-derivative jet over the 36 components of `(F, G)`.
pub type HessJet36 = dual::HessJet<36, 666>;
