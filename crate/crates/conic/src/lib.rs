//! Small dense conic programs with nonnegative-orthant and positive
//! semidefinite cones, solved by a homogeneous self-dual interior-point
//! method.
//!
//! ```
//! use oid_conic::{solve, LinExpr, Problem, Settings};
//!
//! // minimize x subject to x - 1 >= 0
//! let mut p = Problem::new(1);
//! p.cost[0] = 1.0;
//! p.add_ineq(LinExpr::var(0).plus(-1.0));
//! let sol = solve(&p, &Settings::default()).unwrap();
//! assert!((sol.x[0] - 1.0).abs() < 1e-7);
//! ```

mod check;
mod cone;
mod ipm;
mod kkt;
mod problem;

pub use check::{check_kkt, KktReport};
pub use ipm::{solve, Settings, Solution, Status};
pub use problem::{LinExpr, Lmi, Problem, SymSparse};

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("malformed problem: {0}")]
    Malformed(String),
}
