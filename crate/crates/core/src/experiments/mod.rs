//! Experiment harness: the five CLI commands.

pub mod budget_dynamics;
pub mod grad_consistency;
pub mod gradcheck;
pub mod toy_train;
pub mod variance_demo;

pub use budget_dynamics::run_budget_dynamics;
pub use grad_consistency::run_grad_consistency;
pub use gradcheck::{run_gradcheck, CheckResult};
pub use toy_train::run_toy_train;
pub use variance_demo::run_variance_demo;
