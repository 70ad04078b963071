//! Exact GP regression on a precomputed training Gram matrix.

use std::f64::consts::PI;

use std::sync::Arc;

use faer::prelude::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Diagonal jitter levels tried in order before giving up.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// A Cholesky factor of `A + jitter·I`.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    llt: Arc<faer::solvers::Cholesky<f64>>,
    l: DMatrix<f64>,
    pub jitter: f64,
}

fn view(m: &DMatrix<f64>) -> faer::MatRef<'_, f64> {
    faer::mat::from_column_major_slice::<f64>(m.as_slice(), m.nrows(), m.ncols())
}

fn to_nalgebra(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m.read(i, j))
}

impl JitteredCholesky {
    fn new(a: &DMatrix<f64>, jitter: f64) -> Option<Self> {
        let llt = view(a).cholesky(faer::Side::Lower).ok()?;
        let l = to_nalgebra(llt.compute_l().as_ref());
        Some(JitteredCholesky {
            llt: Arc::new(llt),
            l,
            jitter,
        })
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.l.clone()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self
            .llt
            .solve(view(&DMatrix::from_column_slice(b.len(), 1, b.as_slice())));
        DVector::from_fn(b.len(), |i, _| x.read(i, 0))
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        to_nalgebra(self.llt.solve(view(b)).as_ref())
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        to_nalgebra(self.llt.inverse().as_ref())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Factorizes a symmetric matrix, escalating diagonal jitter through
/// [`JITTER_LADDER`].
pub fn chol_jitter(a: &DMatrix<f64>) -> Result<JitteredCholesky> {
    chol_jitter_from(a, 0)
}

/// Like [`chol_jitter`] but starting at the given rung of the ladder.
pub fn chol_jitter_from(a: &DMatrix<f64>, first_rung: usize) -> Result<JitteredCholesky> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "cannot factorize a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
            max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
        });
    }
    for &jitter in &JITTER_LADDER[first_rung.min(JITTER_LADDER.len() - 1)..] {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = JitteredCholesky::new(&m, jitter) {
            return Ok(chol);
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Err(Error::NotPositiveDefinite {
        min_eigenvalue,
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// Training covariance, targets (standardized units) and noise variance.
#[derive(Clone, Debug)]
pub struct RegressionProblem {
    pub k: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise_var: f64,
}

/// Predictive means and variances at `P` test points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// The three additive pieces of the log evidence.
#[derive(Clone, Copy, Debug)]
pub struct LmlTerms {
    /// `-½ yᵀ K_y⁻¹ y`
    pub fit: f64,
    /// `-½ log|K_y|`
    pub complexity: f64,
    /// `-(N/2) log 2π`
    pub constant: f64,
    pub jitter: f64,
}

impl LmlTerms {
    pub fn total(&self) -> f64 {
        self.fit + self.complexity + self.constant
    }
}

impl RegressionProblem {
    pub fn new(k: DMatrix<f64>, y: DVector<f64>, noise_var: f64) -> Result<Self> {
        let prob = RegressionProblem { k, y, noise_var };
        prob.validate()?;
        Ok(prob)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.k.nrows() != n || self.k.ncols() != n {
            return Err(Error::Shape(format!(
                "Gram is {}x{} but there are {} targets",
                self.k.nrows(),
                self.k.ncols(),
                n
            )));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be non-negative, got {}",
                self.noise_var
            )));
        }
        let asym = (&self.k - self.k.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + self.k.abs().max()) {
            return Err(Error::InvalidParameter(format!(
                "training Gram is not symmetric (max deviation {asym:e})"
            )));
        }
        Ok(())
    }

    /// `K + σ_n² I`.
    pub fn noisy_gram(&self) -> DMatrix<f64> {
        let mut ky = self.k.clone();
        for i in 0..ky.nrows() {
            ky[(i, i)] += self.noise_var;
        }
        ky
    }

    pub fn factorize(&self) -> Result<JitteredCholesky> {
        self.validate()?;
        chol_jitter(&self.noisy_gram())
    }

    pub fn lml_terms(&self) -> Result<LmlTerms> {
        let chol = self.factorize()?;
        Ok(terms_from(&chol, &self.y))
    }
}

fn terms_from(chol: &JitteredCholesky, y: &DVector<f64>) -> LmlTerms {
    let alpha = chol.solve_vec(y);
    LmlTerms {
        fit: -0.5 * y.dot(&alpha),
        complexity: -0.5 * chol.log_det(),
        constant: -0.5 * y.len() as f64 * (2.0 * PI).ln(),
        jitter: chol.jitter,
    }
}

/// `log N(y | 0, K + σ_n² I)`.
pub fn log_marginal_likelihood(prob: &RegressionProblem) -> Result<f64> {
    Ok(prob.lml_terms()?.total())
}

/// Log evidence together with its gradient with respect to `K_y = K + σ_n² I`,
/// `½(ααᵀ − K_y⁻¹)`.
pub(crate) fn lml_with_adjoint(prob: &RegressionProblem) -> Result<(LmlTerms, DMatrix<f64>)> {
    let chol = prob.factorize()?;
    let terms = terms_from(&chol, &prob.y);
    let alpha = chol.solve_vec(&prob.y);
    let mut adj = chol.inverse() * -0.5;
    adj.ger(0.5, &alpha, &alpha, 1.0);
    Ok((terms, adj))
}

/// Posterior mean and variance at test points given the cross-covariance
/// `K_*` (P×N) and prior variances `k_**`. When `include_noise` is set the
/// variances are for noisy observations rather than the latent function.
pub fn posterior_predict(
    prob: &RegressionProblem,
    k_star: &DMatrix<f64>,
    k_star_star_diag: &DVector<f64>,
    include_noise: bool,
) -> Result<PredictiveResult> {
    let n = prob.y.len();
    if k_star.ncols() != n {
        return Err(Error::Shape(format!(
            "cross-covariance has {} columns, expected {n}",
            k_star.ncols()
        )));
    }
    if k_star_star_diag.len() != k_star.nrows() {
        return Err(Error::Shape(format!(
            "{} prior variances for {} test points",
            k_star_star_diag.len(),
            k_star.nrows()
        )));
    }
    let chol = prob.factorize()?;
    let alpha = chol.solve_vec(&prob.y);
    let mean = k_star * &alpha;
    // v = L⁻¹ K_*ᵀ, so the quadratic form is the column norm of v.
    let v = chol.solve_lower(&k_star.transpose());
    let var = DVector::from_fn(k_star.nrows(), |p, _| {
        let q = v.column(p).norm_squared();
        let latent = (k_star_star_diag[p] - q).max(0.0);
        if include_noise {
            latent + prob.noise_var
        } else {
            latent
        }
    });
    Ok(PredictiveResult { mean, var })
}
