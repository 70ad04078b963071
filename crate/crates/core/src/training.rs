//! Learning stack parameters by ascent on the log marginal likelihood.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditional::HyperdataNet;
use crate::effective::{gram_and_vjp, propagate_stack, LayerStack};
use crate::error::{Error, Result};
use crate::regression::{lml_with_adjoint, posterior_predict, PredictiveResult, RegressionProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_iters: usize,
    /// Relative logML change below which an iteration counts as stalled.
    pub tolerance: f64,
    /// Consecutive stalled iterations that end a restart.
    pub patience: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_halvings: usize,
    /// Std of the Gaussian perturbation of free log-parameters for restarts
    /// after the first.
    pub restart_perturbation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            max_iters: 2000,
            tolerance: 1e-7,
            patience: 10,
            restarts: 3,
            seed: 0,
            max_halvings: 20,
            restart_perturbation: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tolerance", self.tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.restart_perturbation >= 0.0) {
            return Err(Error::Config(
                "restart_perturbation must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Negative log marginal likelihood and its gradient over all stack
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Jitter the noisy Gram needed; `NaN` when factorization failed.
    pub jitter: f64,
}

impl Objective {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

fn is_numerical_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NotPositiveDefinite { .. } | Error::Hyperdata(_) | Error::Degenerate(_)
    )
}

/// `−log p(y)` under the stack's effective Gram plus noise, with gradient.
/// A failed factorization gives an infinite value and a zero gradient.
pub fn objective(stack: &LayerStack, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Objective> {
    check_data(x, y)?;
    let noise = stack.noise_var();
    let mut lml = f64::NAN;
    let mut jitter = f64::NAN;
    let out = gram_and_vjp(stack, x, |gram| {
        let prob = RegressionProblem::new(gram.clone(), y.clone(), noise)?;
        let (terms, adj) = lml_with_adjoint(&prob)?;
        lml = terms.total();
        jitter = terms.jitter;
        Ok(adj)
    });
    match out {
        Ok((_, grad)) if lml.is_finite() => Ok(Objective {
            value: -lml,
            grad: grad.into_iter().map(|g| -g).collect(),
            jitter,
        }),
        Ok(_) => Ok(failed(stack)),
        Err(e) if is_numerical_failure(&e) => Ok(failed(stack)),
        Err(e) => Err(e),
    }
}

fn failed(stack: &LayerStack) -> Objective {
    Objective {
        value: f64::INFINITY,
        grad: vec![0.0; stack.n_params()],
        jitter: f64::NAN,
    }
}

/// Log marginal likelihood of `y` under the stack.
pub fn stack_log_marginal_likelihood(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    check_data(x, y)?;
    let gram = propagate_stack(stack, x)?.gram;
    let prob = RegressionProblem::new(gram, y.clone(), stack.noise_var())?;
    Ok(prob.lml_terms()?.total())
}

/// Posterior predictive at `x_star` from the effective kernel propagated
/// jointly over training and test inputs.
pub fn predict_stack(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    x_star: &DMatrix<f64>,
    include_noise: bool,
) -> Result<PredictiveResult> {
    check_data(x, y)?;
    if x_star.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: x_star.ncols(),
        });
    }
    let (n, p) = (x.nrows(), x_star.nrows());
    let mut joint = DMatrix::zeros(n + p, x.ncols());
    joint.rows_mut(0, n).copy_from(x);
    joint.rows_mut(n, p).copy_from(x_star);
    let gram = propagate_stack(stack, &joint)?.gram;
    let k = gram.view((0, 0), (n, n)).into_owned();
    let k_star = gram.view((n, 0), (p, n)).into_owned();
    let diag = DVector::from_fn(p, |i, _| gram[(n + i, n + i)]);
    let prob = RegressionProblem::new(k, y.clone(), stack.noise_var())?;
    posterior_predict(&prob, &k_star, &diag, include_noise)
}

/// One restart of [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestartResult {
    pub index: usize,
    /// logML at the initial point and after every accepted step.
    pub trace: Vec<f64>,
    /// Final logML; `-inf` if the restart could not be evaluated.
    pub logml: f64,
    pub iterations: usize,
    pub converged: bool,
    pub jitter_events: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Stack at the best restart's final parameters.
    pub stack: LayerStack,
    pub logml: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartResult>,
    /// Accepted evaluations of the best restart that needed Gram jitter.
    pub jitter_events: usize,
}

impl FitResult {
    pub fn trace(&self) -> &[f64] {
        &self.restarts[self.best_restart].trace
    }
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Restart 0 is the template itself; later restarts redraw free network
/// weights and perturb free log-parameters.
fn initial_stack(template: &LayerStack, restart: usize, cfg: &TrainConfig) -> Result<LayerStack> {
    if restart == 0 {
        return Ok(template.clone());
    }
    let mut rng = restart_rng(cfg.seed, restart);
    let mut stack = template.clone();
    for l in 0..stack.intermediate().len() {
        let mut layer = stack.intermediate()[l].clone();
        if let Some(net) = layer.net() {
            let tag = format!("layer{}.net.w0", l + 1);
            if !stack.is_frozen(&tag) {
                let mut net = net.clone();
                net.reinit(HyperdataNet::DEFAULT_INIT_STD, &mut rng);
                layer.set_net(net)?;
                stack.set_layer(l, layer)?;
            }
        }
    }
    let names = stack.param_names();
    let mut p = stack.params();
    for i in stack.free_indices() {
        if names[i].contains("log_") {
            p[i] += cfg.restart_perturbation * rng.sample::<f64, _>(StandardNormal);
        }
    }
    stack.set_params(&p)?;
    Ok(stack)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn run_restart(
    init: LayerStack,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
    index: usize,
) -> Result<(RestartResult, LayerStack)> {
    let mut stack = init;
    let free = stack.free_indices();
    let mut result = RestartResult {
        index,
        trace: Vec::new(),
        logml: f64::NEG_INFINITY,
        iterations: 0,
        converged: false,
        jitter_events: 0,
        failure: None,
    };
    let mut current = objective(&stack, x, y)?;
    if !current.is_finite() {
        result.failure = Some("initial Gram could not be factorized".into());
        return Ok((result, stack));
    }
    if current.jitter > 0.0 {
        result.jitter_events += 1;
    }
    result.trace.push(-current.value);
    let mut p = stack.free_params();
    let mut adam = Adam {
        m: vec![0.0; p.len()],
        v: vec![0.0; p.len()],
        t: 0,
    };
    let mut stalled = 0;
    for _ in 0..cfg.max_iters {
        if p.is_empty() {
            result.converged = true;
            break;
        }
        let g: Vec<f64> = free.iter().map(|&i| current.grad[i]).collect();
        let dir: Vec<f64> = match cfg.optimizer {
            Optimizer::GradientDescent => g.clone(),
            Optimizer::Adam => {
                adam.t += 1;
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(adam.t);
                let c2 = 1.0 - b2.powi(adam.t);
                (0..p.len())
                    .map(|k| {
                        adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g[k];
                        adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * g[k] * g[k];
                        (adam.m[k] / c1) / ((adam.v[k] / c2).sqrt() + 1e-8)
                    })
                    .collect()
            }
        };
        let search = |dir: &[f64]| -> Result<Option<(Vec<f64>, LayerStack, Objective)>> {
            let mut step = cfg.learning_rate;
            for _ in 0..=cfg.max_halvings {
                let cand: Vec<f64> = p.iter().zip(dir).map(|(a, d)| a - step * d).collect();
                let mut trial = stack.clone();
                if trial.set_free_params(&cand).is_ok() {
                    let obj = objective(&trial, x, y)?;
                    if obj.is_finite() && obj.value <= current.value {
                        return Ok(Some((cand, trial, obj)));
                    }
                }
                step *= 0.5;
            }
            Ok(None)
        };
        let mut accepted = search(&dir)?;
        if accepted.is_none() && cfg.optimizer == Optimizer::Adam && adam.t > 1 {
            // Momentum can point uphill; restart the moments, whose first
            // step is the elementwise sign of the gradient.
            adam = Adam {
                m: g.iter().map(|v| (1.0 - cfg.beta1) * v).collect(),
                v: g.iter().map(|v| (1.0 - cfg.beta2) * v * v).collect(),
                t: 1,
            };
            let sign: Vec<f64> = g.iter().map(|v| v / (v.abs() + 1e-8)).collect();
            accepted = search(&sign)?;
        }
        result.iterations += 1;
        let Some((cand, trial, obj)) = accepted else {
            // No decrease along this direction at any step size.
            result.converged = true;
            break;
        };
        let rel = (current.value - obj.value).abs() / current.value.abs().max(1.0);
        p = cand;
        stack = trial;
        current = obj;
        if current.jitter > 0.0 {
            result.jitter_events += 1;
        }
        result.trace.push(-current.value);
        stalled = if rel < cfg.tolerance { stalled + 1 } else { 0 };
        if stalled >= cfg.patience {
            result.converged = true;
            break;
        }
    }
    result.logml = -current.value;
    Ok((result, stack))
}

/// Maximizes the log marginal likelihood over the free parameters from
/// `cfg.restarts` starting points and keeps the best.
pub fn fit(
    template: &LayerStack,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_data(x, y)?;
    if x.nrows() < 2 {
        return Err(Error::Fit("need at least two training points".into()));
    }
    let mut restarts = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(usize, LayerStack)> = None;
    for r in 0..cfg.restarts {
        let init = match initial_stack(template, r, cfg) {
            Ok(s) => s,
            Err(e) => {
                restarts.push(RestartResult {
                    index: r,
                    trace: Vec::new(),
                    logml: f64::NEG_INFINITY,
                    iterations: 0,
                    converged: false,
                    jitter_events: 0,
                    failure: Some(e.to_string()),
                });
                continue;
            }
        };
        let (res, stack) = run_restart(init, x, y, cfg, r)?;
        let better = match &best {
            None => res.logml.is_finite(),
            Some((b, _)) => res.logml > restarts[*b].logml,
        };
        if better {
            best = Some((r, stack));
        }
        restarts.push(res);
    }
    let Some((best_restart, stack)) = best else {
        let detail: Vec<String> = restarts
            .iter()
            .map(|r| {
                format!(
                    "restart {}: {}",
                    r.index,
                    r.failure.clone().unwrap_or_default()
                )
            })
            .collect();
        return Err(Error::Fit(format!(
            "every restart failed to factorize the Gram; standardize the data or add jitter ({})",
            detail.join("; ")
        )));
    };
    Ok(FitResult {
        logml: restarts[best_restart].logml,
        jitter_events: restarts[best_restart].jitter_events,
        stack,
        best_restart,
        restarts,
    })
}

/// Analytic vs central-difference gradient of one free parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub threshold: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }
}

/// Flag threshold for [`grad_check`].
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic objective gradient with central differences for
/// every free parameter. `step` is clamped to `[1e-7, 1e-3]`.
pub fn grad_check(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    grad_check_with(stack, x, y, step, |_| {})
}

/// [`grad_check`] with a hook applied to the analytic gradient before the
/// comparison (fault injection).
pub fn grad_check_with<F>(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    step: f64,
    corrupt: F,
) -> Result<GradCheckReport>
where
    F: FnOnce(&mut [f64]),
{
    let step = step.clamp(1e-7, 1e-3);
    let base = objective(stack, x, y)?;
    let names = stack.param_names();
    let free = stack.free_indices();
    let mut analytic: Vec<f64> = free.iter().map(|&i| base.grad[i]).collect();
    corrupt(&mut analytic);
    let p = stack.free_params();
    let mut entries = Vec::with_capacity(free.len());
    for (k, &i) in free.iter().enumerate() {
        let eval = |delta: f64| -> Result<f64> {
            let mut q = p.clone();
            q[k] += delta;
            let mut s = stack.clone();
            s.set_free_params(&q)?;
            Ok(objective(&s, x, y)?.value)
        };
        let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
        let rel = relative_error(analytic[k], numeric);
        entries.push(GradCheckEntry {
            name: names[i].clone(),
            analytic: analytic[k],
            numeric,
            rel_error: rel,
            flagged: !(rel <= GRAD_CHECK_THRESHOLD),
        });
    }
    Ok(GradCheckReport {
        step,
        threshold: GRAD_CHECK_THRESHOLD,
        entries,
    })
}
