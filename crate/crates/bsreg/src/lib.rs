//! Nonlinear regression with sinh-normal (log-Birnbaum-Saunders) errors:
//! maximum likelihood by Fisher scoring, second-order bias correction of
//! the estimates, and a Monte Carlo harness for validating both.

pub mod bias;
pub mod estimate;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod signorm;
