//! Risk-sensitive model predictive control for switched linear systems whose
//! mode is drawn from a state-dependent softmax gate (a mixture of experts).
//!
//! The nonconvex optimistic and pessimistic entropic-risk problems are solved
//! by majorization-minimization: at every outer iteration a convex surrogate
//! that touches the true loss at the current iterate is minimized over the
//! scenario tree with an internal first-order solver.
//!
//! Module map:
//!
//! - [`tree`]: scenario tree with full branching up to `N_b`, frozen modes after.
//! - [`moe`]: gate, switched dynamics, rollout and scenario log-probabilities.
//! - [`objective`]: tracking and collision costs, scenario losses, risk functionals.
//! - [`surrogate`]: the convex majorizers used by the outer loop.
//! - [`solver`]: condensing, the box/augmented-Lagrangian inner solver and the
//!   optimality error.
//! - [`mm`]: outer loop, receding-horizon controller and closed-loop runs.
//! - [`corridor`]: the robot/human corridor benchmark encoding.
//! - [`oracle`]: brute-force reference computations and the verification suite.

pub mod corridor;
pub mod error;
pub mod mm;
pub mod moe;
pub mod numeric;
pub mod objective;
pub mod oracle;
pub mod par;
pub mod solver;
pub mod surrogate;
pub mod tree;

pub use error::{Error, Result};
pub use mm::{MMConfig, SolverReport};
pub use moe::{MoEModel, TrajectoryBundle};
pub use objective::{CostSpec, Formulation, RiskConfig};
pub use tree::ScenarioTree;
