//! Stationary covariance functions and their Gram matrices.
//!
//! Every family is a function of the Euclidean distance `r = |x - x'|`.
//! Hyperparameters are stored as logarithms so that unconstrained gradient
//! steps cannot leave the positive orthant; all derivatives returned here are
//! taken with respect to those log-parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_PARAMS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `σ² exp(-r²/2ℓ²)`; params `[σ, ℓ]`.
    SquaredExponential,
    /// `σ² exp(-sin²(r)/θ²)`; params `[σ, θ]`. The period is fixed at π.
    PeriodicSe,
    /// `σ² (1 + r²/ℓ²)^(-α)`; params `[σ, ℓ, α]`.
    RationalQuadratic,
    /// Sum of the three above:
    /// `θ1² exp(-r²/θ2²) + θ3² exp(-sin²(r)/θ4²) + θ5² (1 + r²/θ6²)^(-θ7)`.
    Mixture,
}

impl KernelFamily {
    pub fn n_params(self) -> usize {
        match self {
            KernelFamily::SquaredExponential | KernelFamily::PeriodicSe => 2,
            KernelFamily::RationalQuadratic => 3,
            KernelFamily::Mixture => 7,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            KernelFamily::SquaredExponential => &["sigma", "ell"],
            KernelFamily::PeriodicSe => &["sigma", "theta"],
            KernelFamily::RationalQuadratic => &["sigma", "ell", "alpha"],
            KernelFamily::Mixture => &[
                "theta1", "theta2", "theta3", "theta4", "theta5", "theta6", "theta7",
            ],
        }
    }
}

/// A covariance family together with its (log) hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    log_params: Vec<f64>,
    params: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, params: &[f64]) -> Result<Self> {
        if params.len() != family.n_params() {
            return Err(Error::InvalidParameter(format!(
                "{:?} takes {} parameters, got {}",
                family,
                family.n_params(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "kernel parameters must be finite and positive, got {p}"
            )));
        }
        let log_params: Vec<f64> = params.iter().map(|p| p.ln()).collect();
        Ok(KernelSpec {
            family,
            params: log_params.iter().map(|p| p.exp()).collect(),
            log_params,
        })
    }

    pub fn from_log_params(family: KernelFamily, log_params: &[f64]) -> Result<Self> {
        if log_params.len() != family.n_params() {
            return Err(Error::InvalidParameter(format!(
                "{:?} takes {} parameters, got {}",
                family,
                family.n_params(),
                log_params.len()
            )));
        }
        if log_params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite log-parameter".into()));
        }
        Ok(KernelSpec {
            family,
            log_params: log_params.to_vec(),
            params: log_params.iter().map(|p| p.exp()).collect(),
        })
    }

    /// Squared exponential kernel. Panics on non-positive arguments.
    pub fn se(sigma: f64, ell: f64) -> Self {
        Self::new(KernelFamily::SquaredExponential, &[sigma, ell])
            .expect("SE hyperparameters must be positive")
    }

    /// Mixture kernel from `[θ1, …, θ7]`. Panics on non-positive arguments.
    pub fn mixture(theta: [f64; 7]) -> Self {
        Self::new(KernelFamily::Mixture, &theta).expect("mixture hyperparameters must be positive")
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn n_params(&self) -> usize {
        self.log_params.len()
    }

    pub fn log_params(&self) -> &[f64] {
        &self.log_params
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param(&self, index: usize) -> f64 {
        self.params[index]
    }

    /// Value of the kernel at zero distance.
    pub fn signal_variance(&self) -> f64 {
        let p = &self.params;
        match self.family {
            KernelFamily::SquaredExponential
            | KernelFamily::PeriodicSe
            | KernelFamily::RationalQuadratic => p[0] * p[0],
            KernelFamily::Mixture => p[0] * p[0] + p[2] * p[2] + p[4] * p[4],
        }
    }

    /// `k(x_i, x_j)`.
    pub fn eval(&self, xi: &[f64], xj: &[f64]) -> Result<f64> {
        if xi.len() != xj.len() {
            return Err(Error::DimensionMismatch {
                expected: xi.len(),
                got: xj.len(),
            });
        }
        Ok(self.eval_r2(sq_dist(xi, xj)))
    }

    /// Kernel as a function of the squared distance.
    pub(crate) fn eval_r2(&self, r2: f64) -> f64 {
        let p = &self.params;
        match self.family {
            KernelFamily::SquaredExponential => se_term(p[0], p[1], r2),
            KernelFamily::PeriodicSe => periodic_term(p[0], p[1], r2),
            KernelFamily::RationalQuadratic => rq_term(p[0], p[1], p[2], r2),
            KernelFamily::Mixture => {
                p[0] * p[0] * (-r2 / (p[1] * p[1])).exp()
                    + periodic_term(p[2], p[3], r2)
                    + rq_term(p[4], p[5], p[6], r2)
            }
        }
    }

    /// Derivatives of `k` at squared distance `r2` with respect to every
    /// log-parameter.
    pub(crate) fn log_param_grads_r2(&self, r2: f64) -> [f64; MAX_PARAMS] {
        let p = &self.params;
        let mut g = [0.0; MAX_PARAMS];
        match self.family {
            KernelFamily::SquaredExponential => {
                let k = se_term(p[0], p[1], r2);
                g[0] = 2.0 * k;
                g[1] = k * r2 / (p[1] * p[1]);
            }
            KernelFamily::PeriodicSe => g[..2].copy_from_slice(&periodic_grads(p[0], p[1], r2)),
            KernelFamily::RationalQuadratic => {
                g[..3].copy_from_slice(&rq_grads(p[0], p[1], p[2], r2))
            }
            KernelFamily::Mixture => {
                let k1 = p[0] * p[0] * (-r2 / (p[1] * p[1])).exp();
                let per = periodic_grads(p[2], p[3], r2);
                let rq = rq_grads(p[4], p[5], p[6], r2);
                g = [
                    2.0 * k1,
                    2.0 * k1 * r2 / (p[1] * p[1]),
                    per[0],
                    per[1],
                    rq[0],
                    rq[1],
                    rq[2],
                ];
            }
        }
        g
    }

    /// `K[i, j] = k(x[i], x2[j])` for row-wise inputs.
    pub fn gram(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_cols(x, x2)?;
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
            self.eval_r2(row_sq_dist(x, i, x2, j))
        }))
    }

    /// Symmetric Gram matrix of a single input set.
    pub fn gram_sym(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval_r2(row_sq_dist(x, i, x, j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// `∂K/∂(log θ_index)` for `K = gram(x, x)`.
    pub fn param_grad(&self, x: &DMatrix<f64>, index: usize) -> Result<DMatrix<f64>> {
        self.cross_param_grad(x, x, index)
    }

    /// `∂K/∂(log θ_index)` for `K = gram(x, x2)`.
    pub fn cross_param_grad(
        &self,
        x: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        index: usize,
    ) -> Result<DMatrix<f64>> {
        if index >= self.n_params() {
            return Err(Error::ParamIndex {
                index,
                count: self.n_params(),
            });
        }
        check_cols(x, x2)?;
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
            self.log_param_grads_r2(row_sq_dist(x, i, x2, j))[index]
        }))
    }

    /// `Σ_ij weights[i,j] ∂K[i,j]/∂(log θ)` for every parameter at once.
    pub(crate) fn contract_param_grads(
        &self,
        x: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        weights: &DMatrix<f64>,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.n_params()];
        for j in 0..x2.nrows() {
            for i in 0..x.nrows() {
                let w = weights[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let grads = self.log_param_grads_r2(row_sq_dist(x, i, x2, j));
                for (o, g) in out.iter_mut().zip(grads) {
                    *o += w * g;
                }
            }
        }
        out
    }
}

fn se_term(sigma: f64, ell: f64, r2: f64) -> f64 {
    sigma * sigma * (-0.5 * r2 / (ell * ell)).exp()
}

fn periodic_term(sigma: f64, theta: f64, r2: f64) -> f64 {
    let s = r2.sqrt().sin();
    sigma * sigma * (-s * s / (theta * theta)).exp()
}

fn periodic_grads(sigma: f64, theta: f64, r2: f64) -> [f64; 2] {
    let s = r2.sqrt().sin();
    let s2 = s * s;
    let k = sigma * sigma * (-s2 / (theta * theta)).exp();
    [2.0 * k, 2.0 * k * s2 / (theta * theta)]
}

fn rq_term(sigma: f64, ell: f64, alpha: f64, r2: f64) -> f64 {
    sigma * sigma * (1.0 + r2 / (ell * ell)).powf(-alpha)
}

fn rq_grads(sigma: f64, ell: f64, alpha: f64, r2: f64) -> [f64; 3] {
    let q = r2 / (ell * ell);
    let base = 1.0 + q;
    let k = sigma * sigma * base.powf(-alpha);
    [2.0 * k, 2.0 * alpha * k * q / base, -alpha * k * base.ln()]
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn row_sq_dist(x: &DMatrix<f64>, i: usize, x2: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..x.ncols() {
        let d = x[(i, c)] - x2[(j, c)];
        s += d * d;
    }
    s
}

fn check_cols(x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != x2.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: x2.ncols(),
        });
    }
    Ok(())
}

/// Column of scalar inputs as an `N×1` input matrix.
pub fn column(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(values.len(), 1, values)
}
