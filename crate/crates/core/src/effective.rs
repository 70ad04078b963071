//! Moment-matched effective kernels for stacks of conditioned GP layers.
//!
//! For an SE exposed layer fed by Gaussian latent values with means `m` and
//! covariance `C`, the matched covariance of a pair is
//!
//! ```text
//! k(i, j) = σ² (1 + δ²/ℓ²)^(-1/2) exp(-(m_i - m_j)² / 2(ℓ² + δ²))
//! δ² = c_ii + c_jj - 2 c_ij
//! ```
//!
//! Inner layers of deeper stacks are propagated by exact Gaussian moment
//! matching of an SE-conditioned GP evaluated at Gaussian inputs. A second
//! order Taylor rule is available for comparison.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::conditional::{
    conditional_backward, conditional_moments, ConditionalMoments, ConditionedLayer, LayerGrad,
    LayerSolve,
};
use crate::error::{Error, Result};
use crate::kernel::{sq_dist, KernelFamily, KernelSpec};

/// Conditional statistics of one pair of latent values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMoment {
    pub m_i: f64,
    pub m_j: f64,
    pub c_ii: f64,
    pub c_jj: f64,
    pub c_ij: f64,
    /// `c_ii + c_jj − 2c_ij`, clamped at zero.
    pub delta2: f64,
}

impl PairMoment {
    pub fn new(m_i: f64, m_j: f64, c_ii: f64, c_jj: f64, c_ij: f64) -> Self {
        PairMoment {
            m_i,
            m_j,
            c_ii,
            c_jj,
            c_ij,
            delta2: (c_ii + c_jj - 2.0 * c_ij).max(0.0),
        }
    }

    /// A pair with only the mean gap and dispersion specified.
    pub fn from_gap(mean_gap: f64, delta2: f64) -> Self {
        PairMoment {
            m_i: mean_gap,
            m_j: 0.0,
            c_ii: 0.5 * delta2,
            c_jj: 0.5 * delta2,
            c_ij: 0.0,
            delta2: delta2.max(0.0),
        }
    }
}

/// Means and covariance of the latent values at every input.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMoments {
    means: DVector<f64>,
    cov: DMatrix<f64>,
}

impl PairMoments {
    pub fn new(means: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != means.len() || cov.ncols() != means.len() {
            return Err(Error::Shape(format!(
                "{} means with a {}x{} covariance",
                means.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(PairMoments { means, cov })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn pair(&self, i: usize, j: usize) -> PairMoment {
        let mut p = PairMoment::new(
            self.means[i],
            self.means[j],
            self.cov[(i, i)],
            self.cov[(j, j)],
            self.cov[(i, j)],
        );
        if i == j {
            p.delta2 = 0.0;
        }
        p
    }

    pub fn delta2(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        (self.cov[(i, i)] + self.cov[(j, j)] - 2.0 * self.cov[(i, j)]).max(0.0)
    }
}

/// `s² (T/ℓ²)^(-1/2) exp(-Δ²/2T)` and its partials in `Δ` and `T`.
#[inline]
fn smoothed_se(s2: f64, l2: f64, diff: f64, t: f64) -> (f64, f64, f64) {
    let k = smoothed_se_value(s2, l2, diff, t);
    (
        k,
        -k * diff / t,
        k * (diff * diff / (2.0 * t * t) - 0.5 / t),
    )
}

#[inline]
fn smoothed_se_value(s2: f64, l2: f64, diff: f64, t: f64) -> f64 {
    s2 / (t / l2).sqrt() * (-diff * diff / (2.0 * t)).exp()
}

/// Expected SE covariance `E[k(h_i, h_j)]` for Gaussian `(h_i, h_j)`.
pub fn moment_matched_se(pm: &PairMoment, sigma: f64, ell: f64) -> f64 {
    smoothed_se_value(
        sigma * sigma,
        ell * ell,
        pm.m_i - pm.m_j,
        ell * ell + pm.delta2,
    )
}

/// Closed-form kernel of a zero-mean SE layer feeding an SE layer.
pub fn se_of_se_kernel(
    xi: &[f64],
    xj: &[f64],
    sigma1: f64,
    ell1: f64,
    sigma2: f64,
    ell2: f64,
) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::DimensionMismatch {
            expected: xi.len(),
            got: xj.len(),
        });
    }
    let r2 = sq_dist(xi, xj);
    let inner = 1.0 - (-r2 / (2.0 * ell1 * ell1)).exp();
    Ok(sigma2 * sigma2 / (1.0 + 2.0 * sigma1 * sigma1 / (ell2 * ell2) * inner).sqrt())
}

/// Conditional mean of the next layer and its slope at both inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanDerivs {
    pub mu_i: f64,
    pub mu_j: f64,
    pub dmu_i: f64,
    pub dmu_j: f64,
}

/// Next-layer covariance `k(a, b)` with `∂²_a k`, `∂²_b k` and `∂²_ab k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovDerivs {
    pub k: f64,
    pub d2_i: f64,
    pub d2_j: f64,
    pub d2_ij: f64,
}

/// Second-order expansion of `cov(f(h_i), f(h_j))` around the input means.
pub fn taylor_covariance(pm: &PairMoment, mean: &MeanDerivs, cov: &CovDerivs) -> f64 {
    cov.k
        + 0.5 * pm.c_ii * cov.d2_i
        + 0.5 * pm.c_jj * cov.d2_j
        + pm.c_ij * cov.d2_ij
        + pm.c_ij * mean.dmu_i * mean.dmu_j
}

/// First order in `δ²/ℓ²` of [`moment_matched_se`], normalized so that the
/// diagonal is `σ²`.
pub fn taylor_limit_kernel(pm: &PairMoment, sigma: f64, ell: f64) -> f64 {
    let d2 = (pm.m_i - pm.m_j).powi(2);
    let l2 = ell * ell;
    sigma * sigma * (1.0 + (d2 - l2) / (2.0 * l2 * l2) * pm.delta2) * (-d2 / (2.0 * l2)).exp()
}

/// How layers after the first map Gaussian inputs to Gaussian outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRule {
    /// Exact first and second moments (SE layers).
    #[default]
    MomentMatched,
    /// Plug-in means and a second-order Taylor covariance. No gradients.
    Taylor,
}

/// Intermediate conditioned layers, an SE exposed layer and observation noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    intermediate: Vec<ConditionedLayer>,
    exposed: KernelSpec,
    log_noise: f64,
    inner_rule: InnerRule,
    frozen: BTreeSet<String>,
}

impl LayerStack {
    pub fn new(
        intermediate: Vec<ConditionedLayer>,
        exposed: KernelSpec,
        noise_var: f64,
    ) -> Result<Self> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        let stack = LayerStack {
            intermediate,
            exposed,
            log_noise: 0.5 * noise_var.ln(),
            inner_rule: InnerRule::default(),
            frozen: BTreeSet::new(),
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Plain GP regression with `kernel` applied to the inputs.
    pub fn single(kernel: KernelSpec, noise_var: f64) -> Result<Self> {
        Self::new(Vec::new(), kernel, noise_var)
    }

    fn validate(&self) -> Result<()> {
        if self.intermediate.is_empty() {
            return Ok(());
        }
        if self.exposed.family() != KernelFamily::SquaredExponential {
            return Err(Error::InvalidParameter(
                "the exposed kernel of a deep stack must be SE".into(),
            ));
        }
        for (l, layer) in self.intermediate.iter().enumerate().skip(1) {
            if layer.kernel().family() != KernelFamily::SquaredExponential {
                return Err(Error::InvalidParameter(format!(
                    "layer {} must use an SE kernel",
                    l + 1
                )));
            }
            if layer.input_dim() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    got: layer.input_dim(),
                });
            }
        }
        for layer in &self.intermediate {
            if layer.optimize_z() && layer.kernel().family() != KernelFamily::SquaredExponential {
                return Err(Error::InvalidParameter(
                    "hyperdata inputs can only be optimized for SE layers".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn with_inner_rule(mut self, rule: InnerRule) -> Self {
        self.inner_rule = rule;
        self
    }

    pub fn inner_rule(&self) -> InnerRule {
        self.inner_rule
    }

    /// Number of GP layers including the exposed one.
    pub fn depth(&self) -> usize {
        self.intermediate.len() + 1
    }

    pub fn intermediate(&self) -> &[ConditionedLayer] {
        &self.intermediate
    }

    pub fn exposed(&self) -> &KernelSpec {
        &self.exposed
    }

    pub fn noise_var(&self) -> f64 {
        (2.0 * self.log_noise).exp()
    }

    pub fn set_layer(&mut self, index: usize, layer: ConditionedLayer) -> Result<()> {
        let slot = self
            .intermediate
            .get_mut(index)
            .ok_or_else(|| Error::InvalidParameter(format!("no intermediate layer {index}")))?;
        let old = std::mem::replace(slot, layer);
        if let Err(e) = self.validate() {
            self.intermediate[index] = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn set_exposed(&mut self, kernel: KernelSpec) -> Result<()> {
        let old = std::mem::replace(&mut self.exposed, kernel);
        if let Err(e) = self.validate() {
            self.exposed = old;
            return Err(e);
        }
        Ok(())
    }

    /// Names of all parameters in vector order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, layer) in self.intermediate.iter().enumerate() {
            let tag = format!("layer{}", l + 1);
            for p in layer.kernel().family().param_names() {
                names.push(format!("{tag}.log_{p}"));
            }
            match layer.net() {
                Some(net) => names.extend((0..net.n_weights()).map(|k| format!("{tag}.net.w{k}"))),
                None => names.extend((0..layer.hyperdata().len()).map(|m| format!("{tag}.u{m}"))),
            }
            if layer.optimize_z() {
                let d = layer.input_dim();
                for m in 0..layer.hyperdata().len() {
                    if d == 1 {
                        names.push(format!("{tag}.z{m}"));
                    } else {
                        names.extend((0..d).map(|c| format!("{tag}.z{m}.{c}")));
                    }
                }
            }
        }
        for p in self.exposed.family().param_names() {
            names.push(format!("exposed.log_{p}"));
        }
        names.push("log_noise".into());
        names
    }

    /// All parameters: log kernel parameters, `u` or network weights, free
    /// hyperdata inputs, exposed log parameters, `log σ_n`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.intermediate {
            out.extend_from_slice(layer.kernel().log_params());
            match layer.net() {
                Some(net) => out.extend(net.weights()),
                None => out.extend(layer.hyperdata().u().iter()),
            }
            if layer.optimize_z() {
                let z = layer.hyperdata().z();
                for m in 0..z.nrows() {
                    out.extend(z.row(m).iter());
                }
            }
        }
        out.extend_from_slice(self.exposed.log_params());
        out.push(self.log_noise);
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_names().len()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "stack has {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        let mut next = self.clone();
        let mut at = 0;
        let mut take = |k: usize| {
            let s = &p[at..at + k];
            at += k;
            s
        };
        for layer in next.intermediate.iter_mut() {
            let family = layer.kernel().family();
            layer.set_kernel(KernelSpec::from_log_params(
                family,
                take(family.n_params()),
            )?);
            match layer.net() {
                Some(net) => {
                    let k = net.n_weights();
                    layer.set_net_weights(take(k))?;
                }
                None => {
                    let k = layer.hyperdata().len();
                    layer.set_u(DVector::from_column_slice(take(k)))?;
                }
            }
            if layer.optimize_z() {
                let (m, d) = layer.hyperdata().z().shape();
                let z = DMatrix::from_row_slice(m, d, take(m * d));
                layer.set_z(z)?;
            }
        }
        let family = next.exposed.family();
        next.exposed = KernelSpec::from_log_params(family, take(family.n_params()))?;
        next.log_noise = take(1)[0];
        *self = next;
        Ok(())
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.param_names().iter().any(|n| n == name) {
            return Err(Error::InvalidParameter(format!("unknown parameter {name}")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Indices into [`params`](Self::params) of the parameters being trained.
    pub fn free_indices(&self) -> Vec<usize> {
        self.param_names()
            .iter()
            .enumerate()
            .filter(|(_, n)| !self.frozen.contains(*n))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn free_params(&self) -> Vec<f64> {
        let p = self.params();
        self.free_indices().into_iter().map(|i| p[i]).collect()
    }

    pub fn set_free_params(&mut self, free: &[f64]) -> Result<()> {
        let idx = self.free_indices();
        if free.len() != idx.len() {
            return Err(Error::Shape(format!(
                "{} free parameters, got {}",
                idx.len(),
                free.len()
            )));
        }
        let mut p = self.params();
        for (k, i) in idx.into_iter().enumerate() {
            p[i] = free[k];
        }
        self.set_params(&p)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::Shape("no input points".into()));
        }
        if let Some(first) = self.intermediate.first() {
            if x.ncols() != first.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.input_dim(),
                    got: x.ncols(),
                });
            }
        }
        Ok(())
    }
}

/// Effective Gram of a stack with the latent moments of every intermediate
/// layer (outputs of layer 1, 2, …).
#[derive(Clone, Debug)]
pub struct Propagation {
    pub gram: DMatrix<f64>,
    pub moments: Vec<PairMoments>,
}

struct InnerCache {
    in_mean: DVector<f64>,
    in_cov: DMatrix<f64>,
    solve: Option<LayerSolve>,
    /// `q[i, a] = E[k(h_i, z_a)]`
    q: DMatrix<f64>,
    mean: DVector<f64>,
}

struct Trace {
    first: Option<ConditionalMoments>,
    inner: Vec<InnerCache>,
    propagation: Propagation,
}

/// Effective Gram of the stack at inputs `x` (no noise term).
pub fn propagate_stack(stack: &LayerStack, x: &DMatrix<f64>) -> Result<Propagation> {
    Ok(forward(stack, x)?.propagation)
}

fn forward(stack: &LayerStack, x: &DMatrix<f64>) -> Result<Trace> {
    stack.check_input(x)?;
    let exposed = &stack.exposed;
    if stack.intermediate.is_empty() {
        return Ok(Trace {
            first: None,
            inner: Vec::new(),
            propagation: Propagation {
                gram: exposed.gram(x, x)?,
                moments: Vec::new(),
            },
        });
    }
    let first = conditional_moments(&stack.intermediate[0], x)?;
    let mut moments = vec![PairMoments::new(first.mean.clone(), first.cov.clone())?];
    let mut inner = Vec::new();
    for layer in &stack.intermediate[1..] {
        let prev = moments.last().unwrap();
        let next = match stack.inner_rule {
            InnerRule::MomentMatched => {
                let cache = moment_matched_layer(layer, prev.means(), prev.cov())?;
                let pm = PairMoments::new(cache.mean.clone(), cache_cov(layer, &cache)?)?;
                inner.push(cache);
                pm
            }
            InnerRule::Taylor => taylor_layer(layer, prev)?,
        };
        moments.push(next);
    }
    let last = moments.last().unwrap();
    let (sigma, ell) = (exposed.param(0), exposed.param(1));
    let n = x.nrows();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        gram[(i, i)] = sigma * sigma;
        for j in i + 1..n {
            let k = moment_matched_se(&last.pair(i, j), sigma, ell);
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
    }
    Ok(Trace {
        first: Some(first),
        inner,
        propagation: Propagation { gram, moments },
    })
}

fn se_layer_params(layer: &ConditionedLayer) -> (f64, f64) {
    (layer.kernel().param(0), layer.kernel().param(1))
}

fn moment_matched_layer(
    layer: &ConditionedLayer,
    m: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<InnerCache> {
    let (s, ell) = se_layer_params(layer);
    let l2 = ell * ell;
    let n = m.len();
    let solve = if layer.hyperdata().is_empty() {
        None
    } else {
        Some(layer.solve()?)
    };
    let z = layer.hyperdata().z();
    let nz = z.nrows();
    let mut q = DMatrix::zeros(n, nz);
    let mut mean = DVector::zeros(n);
    if let Some(sv) = &solve {
        for i in 0..n {
            let t = l2 + c[(i, i)].max(0.0);
            for a in 0..nz {
                q[(i, a)] = smoothed_se_value(s * s, l2, m[i] - z[(a, 0)], t);
            }
        }
        mean = &q * &sv.beta;
    }
    Ok(InnerCache {
        in_mean: m.clone(),
        in_cov: c.clone(),
        solve,
        q,
        mean,
    })
}

/// Geometry of the joint Gaussian expectation of `k(h_i, z_a) k(h_j, z_b)`.
struct PairQuad {
    a11: f64,
    a22: f64,
    a12: f64,
    det: f64,
    p11: f64,
    p12: f64,
    p22: f64,
    pref: f64,
}

impl PairQuad {
    fn new(s: f64, l2: f64, v_i: f64, v_j: f64, c_ij: f64) -> Result<Self> {
        let (a11, a22, a12) = (l2 + v_i, l2 + v_j, c_ij);
        let det = a11 * a22 - a12 * a12;
        if !(det > 0.0) {
            return Err(Error::Degenerate(format!(
                "pair covariance gives a non-positive determinant {det:e}"
            )));
        }
        Ok(PairQuad {
            a11,
            a22,
            a12,
            det,
            p11: a22 / det,
            p12: -a12 / det,
            p22: a11 / det,
            pref: s.powi(4) * l2 / det.sqrt(),
        })
    }

    /// `Σ_ab w[a,b] E[k(h_i, z_a) k(h_j, z_b)]`.
    fn contract(&self, d1: &[f64], d2: &[f64], w: &DMatrix<f64>) -> f64 {
        let e2: Vec<f64> = d2.iter().map(|d| (-0.5 * self.p22 * d * d).exp()).collect();
        let mut total = 0.0;
        for (a, &da) in d1.iter().enumerate() {
            let e1 = (-0.5 * self.p11 * da * da).exp();
            let mut row = 0.0;
            for (b, &db) in d2.iter().enumerate() {
                row += w[(a, b)] * e2[b] * (-self.p12 * da * db).exp();
            }
            total += e1 * row;
        }
        self.pref * total
    }
}

fn pair_geometry(s: f64, l2: f64, c: &DMatrix<f64>, i: usize, j: usize) -> Result<PairQuad> {
    let v_i = c[(i, i)].max(0.0);
    let v_j = c[(j, j)].max(0.0);
    let c_ij = if i == j { v_i } else { c[(i, j)] };
    PairQuad::new(s, l2, v_i, v_j, c_ij)
}

fn cache_cov(layer: &ConditionedLayer, cache: &InnerCache) -> Result<DMatrix<f64>> {
    let (s, ell) = se_layer_params(layer);
    let l2 = ell * ell;
    let (m, c) = (&cache.in_mean, &cache.in_cov);
    let n = m.len();
    let z = layer.hyperdata().z();
    let w = cache
        .solve
        .as_ref()
        .map(|sv| &sv.beta * sv.beta.transpose() - &sv.kzz_inv);
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let d1: Vec<f64> = z.column(0).iter().map(|za| m[i] - za).collect();
        for j in i..n {
            let mut val = if i == j {
                s * s
            } else {
                let d2 = (c[(i, i)].max(0.0) + c[(j, j)].max(0.0) - 2.0 * c[(i, j)]).max(0.0);
                smoothed_se_value(s * s, l2, m[i] - m[j], l2 + d2)
            };
            if let Some(w) = &w {
                let d2: Vec<f64> = z.column(0).iter().map(|zb| m[j] - zb).collect();
                val += pair_geometry(s, l2, c, i, j)?.contract(&d1, &d2, w);
            }
            val -= cache.mean[i] * cache.mean[j];
            out[(i, j)] = val;
            out[(j, i)] = val;
        }
    }
    Ok(out)
}

fn taylor_layer(layer: &ConditionedLayer, prev: &PairMoments) -> Result<PairMoments> {
    let solve = if layer.hyperdata().is_empty() {
        None
    } else {
        Some(layer.solve()?)
    };
    let n = prev.len();
    let mut mean = DVector::zeros(n);
    let mut slope = DVector::zeros(n);
    for i in 0..n {
        let (mu, dmu) = layer.mean_derivs_with(solve.as_ref(), prev.means()[i])?;
        mean[i] = mu;
        slope[i] = dmu;
    }
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let pm = prev.pair(i, j);
            let d = layer.cov_second_derivs_with(solve.as_ref(), pm.m_i, pm.m_j)?;
            let md = MeanDerivs {
                mu_i: mean[i],
                mu_j: mean[j],
                dmu_i: slope[i],
                dmu_j: slope[j],
            };
            let cd = CovDerivs {
                k: d[0],
                d2_i: d[1],
                d2_j: d[2],
                d2_ij: d[3],
            };
            let v = taylor_covariance(&pm, &md, &cd);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    PairMoments::new(mean, cov)
}

/// Exposed-layer reverse pass: adjoints of the final latent moments and the
/// exposed log-parameter gradients.
fn exposed_backward(
    exposed: &KernelSpec,
    last: &PairMoments,
    gram_adj: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, [f64; 2]) {
    let (sigma, ell) = (exposed.param(0), exposed.param(1));
    let l2 = ell * ell;
    let n = last.len();
    let c = last.cov();
    let m = last.means();
    let mut m_adj = DVector::zeros(n);
    let mut c_adj = DMatrix::zeros(n, n);
    let mut g = [0.0; 2];
    for i in 0..n {
        g[0] += 2.0 * sigma * sigma * gram_adj[(i, i)];
        for j in i + 1..n {
            let w = gram_adj[(i, j)] + gram_adj[(j, i)];
            if w == 0.0 {
                continue;
            }
            let raw = c[(i, i)] + c[(j, j)] - 2.0 * c[(i, j)];
            let (k, dk_diff, dk_t) = smoothed_se(sigma * sigma, l2, m[i] - m[j], l2 + raw.max(0.0));
            m_adj[i] += w * dk_diff;
            m_adj[j] -= w * dk_diff;
            if raw > 0.0 {
                let d = w * dk_t;
                c_adj[(i, i)] += d;
                c_adj[(j, j)] += d;
                c_adj[(i, j)] -= d;
                c_adj[(j, i)] -= d;
            }
            g[0] += 2.0 * k * w;
            g[1] += w * (k + 2.0 * l2 * dk_t);
        }
    }
    (m_adj, c_adj, g)
}

/// Adds the `Z` adjoint through an SE hyperdata Gram.
pub(crate) fn add_se_gram_input_adjoint(
    z: &DMatrix<f64>,
    kzz: &DMatrix<f64>,
    kzz_adj: &DMatrix<f64>,
    l2: f64,
    z_adj: &mut DMatrix<f64>,
) {
    let m = z.nrows();
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let w = (kzz_adj[(a, b)] + kzz_adj[(b, a)]) * kzz[(a, b)] / l2;
            for c in 0..z.ncols() {
                z_adj[(a, c)] -= w * (z[(a, c)] - z[(b, c)]);
            }
        }
    }
}

/// Reverse pass of an exactly moment-matched SE layer.
fn moment_matched_backward(
    layer: &ConditionedLayer,
    cache: &InnerCache,
    mean_adj_in: &DVector<f64>,
    cov_adj: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, LayerGrad)> {
    let (s, ell) = se_layer_params(layer);
    let l2 = ell * ell;
    let (m, c, mu) = (&cache.in_mean, &cache.in_cov, &cache.mean);
    let n = m.len();
    let z = layer.hyperdata().z();
    let nz = z.nrows();
    let mut mean_adj = mean_adj_in.clone();
    let mut m_adj = DVector::zeros(n);
    let mut v_adj = DVector::<f64>::zeros(n);
    let mut c_adj = DMatrix::zeros(n, n);
    let (mut g_s, mut g_l) = (0.0, 0.0);
    let mut w_adj = DMatrix::zeros(nz, nz);
    let mut z_adj = DMatrix::zeros(nz, 1);
    let w = cache
        .solve
        .as_ref()
        .map(|sv| &sv.beta * sv.beta.transpose() - &sv.kzz_inv);
    let mut d1b = vec![0.0; nz];
    let mut d2b = vec![0.0; nz];
    let mut e2 = vec![0.0; nz];

    for i in 0..n {
        for j in i..n {
            let g = if i == j {
                cov_adj[(i, i)]
            } else {
                cov_adj[(i, j)] + cov_adj[(j, i)]
            };
            if g == 0.0 {
                continue;
            }
            mean_adj[i] -= g * mu[j];
            mean_adj[j] -= g * mu[i];
            let mut pair_adj = 0.0;
            if i == j {
                g_s += 2.0 * s * s * g;
            } else {
                let raw = c[(i, i)].max(0.0) + c[(j, j)].max(0.0) - 2.0 * c[(i, j)];
                let (k, dk_diff, dk_t) = smoothed_se(s * s, l2, m[i] - m[j], l2 + raw.max(0.0));
                m_adj[i] += g * dk_diff;
                m_adj[j] -= g * dk_diff;
                if raw > 0.0 {
                    let d = g * dk_t;
                    v_adj[i] += d;
                    v_adj[j] += d;
                    pair_adj -= 2.0 * d;
                }
                g_s += 2.0 * k * g;
                g_l += g * (k + 2.0 * l2 * dk_t);
            }
            if let Some(w) = &w {
                let pq = pair_geometry(s, l2, c, i, j)?;
                for b in 0..nz {
                    let db = m[j] - z[(b, 0)];
                    e2[b] = (-0.5 * pq.p22 * db * db).exp();
                    d2b[b] = 0.0;
                }
                let (mut tot, mut p11b, mut p12b, mut p22b) = (0.0, 0.0, 0.0, 0.0);
                for a in 0..nz {
                    let da = m[i] - z[(a, 0)];
                    let e1 = pq.pref * (-0.5 * pq.p11 * da * da).exp();
                    let mut acc_d1 = 0.0;
                    for b in 0..nz {
                        let db = m[j] - z[(b, 0)];
                        let qab = e1 * e2[b] * (-pq.p12 * da * db).exp();
                        w_adj[(a, b)] += g * qab;
                        let gg = g * w[(a, b)] * qab;
                        tot += gg;
                        p11b -= 0.5 * gg * da * da;
                        p12b -= gg * da * db;
                        p22b -= 0.5 * gg * db * db;
                        acc_d1 -= gg * (pq.p11 * da + pq.p12 * db);
                        d2b[b] -= gg * (pq.p12 * da + pq.p22 * db);
                    }
                    d1b[a] = acc_d1;
                }
                g_s += 4.0 * tot;
                g_l += 2.0 * tot;
                let det_adj = -0.5 * tot / pq.det;
                // Adjoint through P = A⁻¹ with the off-diagonal split evenly.
                let (p11, p12, p22) = (pq.p11, pq.p12, pq.p22);
                let (b11, b12, b22) = (p11b, 0.5 * p12b, p22b);
                let t11 = b11 * p11 + b12 * p12;
                let t12 = b11 * p12 + b12 * p22;
                let t21 = b12 * p11 + b22 * p12;
                let t22 = b12 * p12 + b22 * p22;
                let af11 = -(p11 * t11 + p12 * t21);
                let af12 = -(p11 * t12 + p12 * t22);
                let af22 = -(p12 * t12 + p22 * t22);
                let a11b = af11 + det_adj * pq.a22;
                let a22b = af22 + det_adj * pq.a11;
                let a12b = 2.0 * af12 - 2.0 * det_adj * pq.a12;
                v_adj[i] += a11b;
                v_adj[j] += a22b;
                g_l += 2.0 * l2 * (a11b + a22b);
                if i == j {
                    v_adj[i] += a12b;
                } else {
                    pair_adj += a12b;
                }
                for a in 0..nz {
                    m_adj[i] += d1b[a];
                    z_adj[(a, 0)] -= d1b[a];
                    m_adj[j] += d2b[a];
                    z_adj[(a, 0)] -= d2b[a];
                }
            }
            if i != j {
                c_adj[(i, j)] += 0.5 * pair_adj;
                c_adj[(j, i)] += 0.5 * pair_adj;
            }
        }
    }

    let mut kernel_grad = vec![g_s, g_l];
    let mut u_adj = DVector::zeros(nz);
    if let Some(sv) = &cache.solve {
        let beta = &sv.beta;
        let mut beta_adj = cache.q.transpose() * &mean_adj;
        for i in 0..n {
            let t = l2 + c[(i, i)].max(0.0);
            for a in 0..nz {
                let qb = mean_adj[i] * beta[a];
                if qb == 0.0 {
                    continue;
                }
                let (q, dq_diff, dq_t) = smoothed_se(s * s, l2, m[i] - z[(a, 0)], t);
                m_adj[i] += qb * dq_diff;
                z_adj[(a, 0)] -= qb * dq_diff;
                v_adj[i] += qb * dq_t;
                g_s += 2.0 * qb * q;
                g_l += qb * (q + 2.0 * l2 * dq_t);
            }
        }
        kernel_grad = vec![g_s, g_l];
        beta_adj += (&w_adj + w_adj.transpose()) * beta;
        let ki_adj = beta_adj.clone() * layer.hyperdata().u().transpose() - &w_adj;
        u_adj = &sv.kzz_inv * &beta_adj;
        let kzz_adj = -(&sv.kzz_inv * ki_adj * &sv.kzz_inv);
        for (g, h) in kernel_grad
            .iter_mut()
            .zip(layer.kernel().contract_param_grads(z, z, &kzz_adj))
        {
            *g += h;
        }
        add_se_gram_input_adjoint(z, &sv.kzz, &kzz_adj, l2, &mut z_adj);
    }
    for i in 0..n {
        if c[(i, i)] >= 0.0 {
            c_adj[(i, i)] += v_adj[i];
        }
    }
    Ok((
        m_adj,
        c_adj,
        LayerGrad {
            kernel: kernel_grad,
            u: u_adj,
            z: z_adj,
        },
    ))
}

/// Vector-Jacobian product `Σ_ij w[i,j] ∂(K + σ_n² I)[i,j]/∂θ` over every
/// stack parameter, in [`LayerStack::params`] order.
pub fn gram_vjp(stack: &LayerStack, x: &DMatrix<f64>, weights: &DMatrix<f64>) -> Result<Vec<f64>> {
    let trace = forward(stack, x)?;
    vjp_from_trace(stack, x, &trace, weights)
}

/// Effective Gram together with a vector-Jacobian product of its noisy
/// version.
pub(crate) fn gram_and_vjp<F>(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    adjoint: F,
) -> Result<(DMatrix<f64>, Vec<f64>)>
where
    F: FnOnce(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let trace = forward(stack, x)?;
    let w = adjoint(&trace.propagation.gram)?;
    let grad = vjp_from_trace(stack, x, &trace, &w)?;
    Ok((trace.propagation.gram, grad))
}

fn vjp_from_trace(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    trace: &Trace,
    weights: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    if weights.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "adjoint is {}x{}, Gram is {n}x{n}",
            weights.nrows(),
            weights.ncols()
        )));
    }
    let noise_grad = 2.0 * stack.noise_var() * weights.trace();
    if stack.intermediate.is_empty() {
        let mut out = stack.exposed.contract_param_grads(x, x, weights);
        out.push(noise_grad);
        return Ok(out);
    }
    if stack.inner_rule != InnerRule::MomentMatched {
        return Err(Error::InvalidParameter(
            "gradients require moment-matched inner layers".into(),
        ));
    }
    let moments = &trace.propagation.moments;
    let (mut m_adj, mut c_adj, exposed_grad) =
        exposed_backward(&stack.exposed, moments.last().unwrap(), weights);
    let mut layer_grads = Vec::with_capacity(stack.intermediate.len());
    for (k, cache) in trace.inner.iter().enumerate().rev() {
        let layer = &stack.intermediate[k + 1];
        let (ma, ca, lg) = moment_matched_backward(layer, cache, &m_adj, &c_adj)?;
        m_adj = ma;
        c_adj = ca;
        layer_grads.push(lg);
    }
    let first = trace.first.as_ref().unwrap();
    layer_grads.push(conditional_backward(
        &stack.intermediate[0],
        x,
        first,
        &m_adj,
        &c_adj,
    )?);
    layer_grads.reverse();
    let mut out = Vec::with_capacity(stack.n_params());
    for (layer, lg) in stack.intermediate.iter().zip(&layer_grads) {
        out.extend(lg.flatten(layer)?);
    }
    out.extend_from_slice(&exposed_grad);
    out.push(noise_grad);
    Ok(out)
}

/// Jacobian of the noisy Gram with respect to every stack parameter.
#[derive(Clone, Debug)]
pub struct GramJacobian {
    pub names: Vec<String>,
    /// One symmetric `N×N` matrix per parameter.
    pub grads: Vec<DMatrix<f64>>,
}

/// Entry-wise gradients of `K + σ_n² I`; one reverse pass per unique pair, so
/// meant for small `N`.
pub fn effective_kernel_grads(stack: &LayerStack, x: &DMatrix<f64>) -> Result<GramJacobian> {
    let trace = forward(stack, x)?;
    let n = x.nrows();
    let names = stack.param_names();
    let mut grads = vec![DMatrix::zeros(n, n); names.len()];
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            w[(i, j)] = 1.0;
            let g = vjp_from_trace(stack, x, &trace, &w)?;
            w[(i, j)] = 0.0;
            for (p, v) in g.into_iter().enumerate() {
                grads[p][(i, j)] = v;
                grads[p][(j, i)] = v;
            }
        }
    }
    Ok(GramJacobian { names, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditional::{uniform_grid, Hyperdata, HyperdataNet};
    use crate::kernel::column;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matched_kernel_special_values() {
        let (s, l) = (1.7, 0.9);
        let same = PairMoment::from_gap(0.0, 0.0);
        assert_eq!(moment_matched_se(&same, s, l), s * s);
        let gap = PairMoment::from_gap(0.6, 0.0);
        let se = s * s * (-0.36 / (2.0 * l * l)).exp();
        assert!(close(moment_matched_se(&gap, s, l), se, 1e-15));
        let wide = PairMoment::from_gap(0.0, l * l);
        assert!(close(
            moment_matched_se(&wide, s, l),
            s * s / 2f64.sqrt(),
            1e-14
        ));
    }

    #[test]
    fn matched_kernel_range_and_monotone_in_dispersion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let s = rng.gen_range(0.1..3.0);
            let l = rng.gen_range(0.1..3.0);
            let gap = rng.gen_range(-4.0..4.0);
            let d2 = rng.gen_range(0.0..5.0);
            let k = moment_matched_se(&PairMoment::from_gap(gap, d2), s, l);
            assert!(k > 0.0 && k <= s * s);
            // Decreasing in δ² while the mean gap is inside the smoothed
            // length scale, increasing beyond it.
            let h = 1e-6;
            let up = moment_matched_se(&PairMoment::from_gap(gap, d2 + h), s, l);
            let down = moment_matched_se(&PairMoment::from_gap(gap, d2.max(h) - h), s, l);
            let t = l * l + d2;
            if gap * gap < 0.9 * t {
                assert!(up < down);
            } else if gap * gap > 1.1 * t && k > 1e-200 {
                assert!(up > down);
            }
        }
    }

    #[test]
    fn se_of_se_limits() {
        let (s1, l1, s2, l2) = (0.8, 0.5, 1.3, 0.7);
        assert_eq!(
            se_of_se_kernel(&[0.3], &[0.3], s1, l1, s2, l2).unwrap(),
            s2 * s2
        );
        let far = se_of_se_kernel(&[0.0], &[100.0 * l1], s1, l1, s2, l2).unwrap();
        let limit = s2 * s2 / (1.0 + 2.0 * s1 * s1 / (l2 * l2)).sqrt();
        assert!(close(far, limit, 1e-10));
        assert!(se_of_se_kernel(&[0.0], &[0.0, 1.0], s1, l1, s2, l2).is_err());
    }

    #[test]
    fn se_of_se_equals_matched_kernel_of_prior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..3.0)).collect();
            let (xi, xj) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let k1 = KernelSpec::se(p[0], p[1]);
            let c_ij = k1.eval(&[xi], &[xj]).unwrap();
            let pm = PairMoment::new(0.0, 0.0, p[0] * p[0], p[0] * p[0], c_ij);
            let a = moment_matched_se(&pm, p[2], p[3]);
            let b = se_of_se_kernel(&[xi], &[xj], p[0], p[1], p[2], p[3]).unwrap();
            assert!(close(a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn taylor_covariance_trivial_cases() {
        let mean = MeanDerivs {
            mu_i: 0.2,
            mu_j: -0.1,
            dmu_i: 0.7,
            dmu_j: -0.4,
        };
        let cov = CovDerivs {
            k: 0.9,
            d2_i: -0.3,
            d2_j: -0.2,
            d2_ij: 0.25,
        };
        let zero = PairMoment::new(0.1, 0.5, 0.0, 0.0, 0.0);
        assert_eq!(taylor_covariance(&zero, &mean, &cov), 0.9);

        // Stationary SE with equal (co)variances: curvature terms cancel.
        let k2 = KernelSpec::se(1.1, 0.8);
        let (a, b) = (0.3, -0.4);
        let layer = ConditionedLayer::unconditioned(k2.clone(), 1);
        let d = layer.cov_second_derivs(a, b).unwrap();
        let cd = CovDerivs {
            k: d[0],
            d2_i: d[1],
            d2_j: d[2],
            d2_ij: d[3],
        };
        let flat = MeanDerivs {
            mu_i: 0.0,
            mu_j: 0.0,
            dmu_i: 0.0,
            dmu_j: 0.0,
        };
        let pm = PairMoment::new(a, b, 0.04, 0.04, 0.04);
        assert!(close(
            taylor_covariance(&pm, &flat, &cd),
            k2.eval(&[a], &[b]).unwrap(),
            1e-15
        ));
    }

    #[test]
    fn taylor_covariance_tracks_matched_kernel_for_small_dispersion() {
        let (s, l) = (1.2, 0.9);
        let layer = ConditionedLayer::unconditioned(KernelSpec::se(s, l), 1);
        let flat = MeanDerivs {
            mu_i: 0.0,
            mu_j: 0.0,
            dmu_i: 0.0,
            dmu_j: 0.0,
        };
        let d2 = 1e-3 * l * l;
        for k in 0..21 {
            let gap = -2.0 + 0.2 * k as f64;
            // Independent inputs with equal variance, so δ² = 2v.
            let pm = PairMoment::new(gap, 0.0, d2 / 2.0, d2 / 2.0, 0.0);
            let d = layer.cov_second_derivs(gap, 0.0).unwrap();
            let cd = CovDerivs {
                k: d[0],
                d2_i: d[1],
                d2_j: d[2],
                d2_ij: d[3],
            };
            let t = taylor_covariance(&pm, &flat, &cd);
            assert!((t - moment_matched_se(&pm, s, l)).abs() <= 5e-6 * s * s);
        }
    }

    #[test]
    fn taylor_limit_kernel_cases() {
        let (s, l) = (1.4, 0.6);
        let pm = PairMoment::from_gap(0.5, 0.0);
        assert!(close(
            taylor_limit_kernel(&pm, s, l),
            s * s * (-0.25 / (2.0 * l * l)).exp(),
            1e-15
        ));
        let d2 = 1e-4;
        let pm = PairMoment::from_gap(0.0, d2);
        assert!(close(
            taylor_limit_kernel(&pm, s, l),
            s * s * (1.0 - d2 / (2.0 * l * l)),
            1e-15
        ));
        for k in 1..20 {
            let gap = l * (1.0 + 0.2 * k as f64);
            let pm = PairMoment::from_gap(gap, 0.05);
            let se = s * s * (-gap * gap / (2.0 * l * l)).exp();
            assert!(taylor_limit_kernel(&pm, s, l) > se);
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, m: usize, lo: f64, hi: f64) -> ConditionedLayer {
        let z = uniform_grid(lo, hi, m);
        let u = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let k = KernelSpec::se(rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.2));
        ConditionedLayer::new(k, Hyperdata::new(z, u).unwrap())
    }

    #[test]
    fn single_layer_stack_is_plain_gram() {
        let k = KernelSpec::se(1.3, 0.4);
        let stack = LayerStack::single(k.clone(), 0.1).unwrap();
        let x = column(&[0.0, 0.2, 0.9]);
        assert_eq!(
            propagate_stack(&stack, &x).unwrap().gram,
            k.gram(&x, &x).unwrap()
        );
    }

    #[test]
    fn unconditioned_two_layer_stack_is_se_of_se() {
        let (s1, l1, s2, l2) = (0.9, 0.4, 1.2, 0.8);
        let stack = LayerStack::new(
            vec![ConditionedLayer::unconditioned(KernelSpec::se(s1, l1), 1)],
            KernelSpec::se(s2, l2),
            0.01,
        )
        .unwrap();
        let xs = [-1.0, -0.3, 0.0, 0.4, 1.7];
        let g = propagate_stack(&stack, &column(&xs)).unwrap().gram;
        for i in 0..5 {
            for j in 0..5 {
                let e = se_of_se_kernel(&[xs[i]], &[xs[j]], s1, l1, s2, l2).unwrap();
                assert!(close(g[(i, j)], e, 1e-12));
            }
        }
    }

    #[test]
    fn moment_matched_layer_with_deterministic_input_is_conditional_gp() {
        // Zero input covariance reduces exact matching to the layer's own
        // conditional moments at the means.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = random_layer(&mut rng, 5, -1.0, 1.0);
        let m = DVector::from_vec(vec![-0.7, 0.1, 0.5, 1.3]);
        let cache = moment_matched_layer(&layer, &m, &DMatrix::zeros(4, 4)).unwrap();
        let cov = cache_cov(&layer, &cache).unwrap();
        let x = column(m.as_slice());
        let mean = crate::conditional::conditional_mean(&layer, &x).unwrap();
        let expected = crate::conditional::conditional_cov(&layer, &x).unwrap();
        assert!((cache.mean - mean).abs().max() < 1e-10);
        assert!((cov - expected).abs().max() < 1e-9);
    }

    #[test]
    fn diagonal_is_exposed_signal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l1 = random_layer(&mut rng, 4, -1.0, 1.0);
        let l2 = random_layer(&mut rng, 3, -1.5, 1.5);
        let stack = LayerStack::new(vec![l1, l2], KernelSpec::se(1.6, 0.7), 0.05).unwrap();
        let x = column(&[-0.9, -0.2, 0.3, 0.8]);
        let g = propagate_stack(&stack, &x).unwrap().gram;
        for i in 0..4 {
            assert_eq!(g[(i, i)], 1.6 * 1.6);
        }
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn param_roundtrip_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = uniform_grid(-1.0, 1.0, 4);
        let net = HyperdataNet::random(1, 5, 0.5, &mut rng);
        let l1 = ConditionedLayer::with_net(KernelSpec::se(1.0, 0.5), z, net)
            .unwrap()
            .with_optimize_z(true);
        let l2 = random_layer(&mut rng, 3, -1.0, 1.0);
        let mut stack = LayerStack::new(vec![l1, l2], KernelSpec::se(1.0, 1.0), 0.1).unwrap();
        let names = stack.param_names();
        assert_eq!(names.len(), 2 + 16 + 4 + 2 + 3 + 2 + 1);
        assert_eq!(names[0], "layer1.log_sigma");
        assert_eq!(names[2], "layer1.net.w0");
        assert_eq!(names[18], "layer1.z0");
        assert_eq!(names[24], "layer2.u0");
        assert_eq!(names.last().unwrap(), "log_noise");
        let p = stack.params();
        let q: Vec<f64> = p.iter().map(|v| v + 0.01).collect();
        stack.set_params(&q).unwrap();
        let back = stack.params();
        for (a, b) in back.iter().zip(&q) {
            assert!(close(*a, *b, 1e-12));
        }
        stack.freeze("log_noise").unwrap();
        assert_eq!(stack.free_params().len(), names.len() - 1);
        assert!(stack.freeze("nope").is_err());
    }

    #[test]
    fn deep_stack_requires_se_exposed() {
        let layer = ConditionedLayer::unconditioned(KernelSpec::se(1.0, 1.0), 1);
        let rq = KernelSpec::new(KernelFamily::RationalQuadratic, &[1.0, 1.0, 1.0]).unwrap();
        assert!(LayerStack::new(vec![layer], rq.clone(), 0.1).is_err());
        assert!(LayerStack::single(rq, 0.1).is_ok());
        assert!(LayerStack::single(KernelSpec::se(1.0, 1.0), 0.0).is_err());
    }

    fn fd_check(stack: &LayerStack, x: &DMatrix<f64>, w: &DMatrix<f64>, step: f64, tol: f64) {
        let analytic = gram_vjp(stack, x, w).unwrap();
        let p = stack.params();
        let names = stack.param_names();
        let objective = |q: &[f64]| {
            let mut s = stack.clone();
            s.set_params(q).unwrap();
            let g = propagate_stack(&s, x).unwrap().gram;
            let noisy = g + DMatrix::identity(x.nrows(), x.nrows()) * s.noise_var();
            noisy.component_mul(w).sum()
        };
        for k in 0..p.len() {
            let mut up = p.clone();
            up[k] += step;
            let mut dn = p.clone();
            dn[k] -= step;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * step);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= tol, "{}: analytic {a} vs fd {fd}", names[k]);
        }
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a + a.transpose()
    }

    #[test]
    fn two_layer_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l1 = random_layer(&mut rng, 5, -1.0, 1.0).with_optimize_z(true);
        let stack = LayerStack::new(vec![l1], KernelSpec::se(1.1, 0.9), 0.05).unwrap();
        let x = column(&[-1.2, -0.5, 0.1, 0.4, 0.9, 1.4]);
        let w = random_sym(&mut rng, 6);
        fd_check(&stack, &x, &w, 1e-5, 1e-5);
    }

    #[test]
    fn three_layer_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z = uniform_grid(-1.0, 1.0, 4);
        let (shift, scale) = HyperdataNet::range_normalization(&z);
        let net = HyperdataNet::random(1, 5, 0.5, &mut rng)
            .with_normalization(shift, scale)
            .unwrap();
        let l1 = ConditionedLayer::with_net(KernelSpec::se(0.9, 0.6), z, net).unwrap();
        let l2 = random_layer(&mut rng, 3, -1.5, 1.5).with_optimize_z(true);
        let stack = LayerStack::new(vec![l1, l2], KernelSpec::se(1.3, 0.8), 0.05).unwrap();
        let x = column(&[-1.1, -0.6, 0.0, 0.3, 0.7, 1.2]);
        let w = random_sym(&mut rng, 6);
        fd_check(&stack, &x, &w, 1e-5, 1e-5);
    }

    #[test]
    fn three_layer_unconditioned_inner_vjp() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let l1 = random_layer(&mut rng, 3, -1.0, 1.0);
        let l2 = ConditionedLayer::unconditioned(KernelSpec::se(0.8, 1.1), 1);
        let stack = LayerStack::new(vec![l1, l2], KernelSpec::se(1.0, 0.9), 0.05).unwrap();
        let x = column(&[-0.8, -0.1, 0.5, 1.0]);
        let w = random_sym(&mut rng, 4);
        fd_check(&stack, &x, &w, 1e-5, 1e-5);
    }

    #[test]
    fn periodic_first_layer_vjp() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = uniform_grid(-1.0, 1.0, 4);
        let u = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let k = KernelSpec::new(KernelFamily::PeriodicSe, &[1.0, 0.8]).unwrap();
        let l1 = ConditionedLayer::new(k, Hyperdata::new(z, u).unwrap());
        let stack = LayerStack::new(vec![l1], KernelSpec::se(1.0, 0.9), 0.05).unwrap();
        let x = column(&[-1.3, -0.4, 0.2, 0.6, 1.5]);
        let w = random_sym(&mut rng, 5);
        fd_check(&stack, &x, &w, 1e-5, 1e-5);
    }

    #[test]
    fn jacobian_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let l1 = random_layer(&mut rng, 5, -1.0, 1.0);
        let stack = LayerStack::new(vec![l1], KernelSpec::se(1.2, 0.7), 0.05).unwrap();
        let x = column(&[-1.0, -0.4, 0.0, 0.5, 0.8, 1.3]);
        let jac = effective_kernel_grads(&stack, &x).unwrap();
        let gram = propagate_stack(&stack, &x).unwrap().gram;
        let idx = |name: &str| jac.names.iter().position(|n| n == name).unwrap();
        let ds = &jac.grads[idx("exposed.log_sigma")];
        assert!((ds - gram.clone() * 2.0).abs().max() < 1e-12);
        for name in [
            "layer1.u0",
            "layer1.u3",
            "layer1.log_ell",
            "layer1.log_sigma",
            "exposed.log_ell",
        ] {
            let g = &jac.grads[idx(name)];
            for i in 0..6 {
                assert_eq!(g[(i, i)], 0.0, "{name}");
            }
        }
        let dn = &jac.grads[idx("log_noise")];
        assert!((dn - DMatrix::identity(6, 6) * 0.1).abs().max() < 1e-15);
    }

    #[test]
    fn taylor_rule_has_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let l1 = random_layer(&mut rng, 3, -1.0, 1.0);
        let l2 = random_layer(&mut rng, 3, -1.0, 1.0);
        let stack = LayerStack::new(vec![l1, l2], KernelSpec::se(1.0, 1.0), 0.1)
            .unwrap()
            .with_inner_rule(InnerRule::Taylor);
        let x = column(&[0.0, 0.5]);
        assert!(propagate_stack(&stack, &x).is_ok());
        assert!(gram_vjp(&stack, &x, &DMatrix::identity(2, 2)).is_err());
    }
}
