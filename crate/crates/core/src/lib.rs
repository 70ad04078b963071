//! Conditional deep Gaussian process regression with moment-matched
//! effective kernels.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditional;
pub mod effective;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod moments;
pub mod regression;
pub mod training;

pub use conditional::{
    conditional_cov, conditional_mean, pair_moments, ConditionedLayer, Hyperdata, HyperdataNet,
};
pub use effective::{
    effective_kernel_grads, gram_vjp, moment_matched_se, propagate_stack, se_of_se_kernel,
    taylor_covariance, taylor_limit_kernel, InnerRule, LayerStack, PairMoment, PairMoments,
};
pub use error::{Error, Result};
pub use kernel::{column, KernelFamily, KernelSpec};
pub use regression::{log_marginal_likelihood, posterior_predict, RegressionProblem};
