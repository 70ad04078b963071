//! Intermediate GP layers conditioned on hyperdata `(Z, u)`.
//!
//! The prior mean is zero before conditioning, so the conditional moments
//! at inputs `X` are
//!
//! ```text
//! m(X) = K_XZ K_ZZ⁻¹ u
//! C(X) = K_XX − K_XZ K_ZZ⁻¹ K_ZX
//! ```
//!
//! With no hyperdata (`M = 0`) the layer is the unconditioned zero-mean GP.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::effective::PairMoments;
use crate::error::{Error, Result};
use crate::kernel::{row_sq_dist, KernelFamily, KernelSpec};
use crate::regression::{chol_jitter, JitteredCholesky};

/// Minimum Euclidean separation between hyperdata inputs.
pub const MIN_HYPERDATA_SEPARATION: f64 = 1e-8;

/// Support points of one conditioned layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperdata {
    z: DMatrix<f64>,
    u: DVector<f64>,
}

impl Hyperdata {
    pub fn new(z: DMatrix<f64>, u: DVector<f64>) -> Result<Self> {
        if z.nrows() != u.len() {
            return Err(Error::Shape(format!(
                "{} hyperdata inputs but {} outputs",
                z.nrows(),
                u.len()
            )));
        }
        check_separation(&z)?;
        Ok(Hyperdata { z, u })
    }

    /// No support points: the unconditioned zero-mean layer.
    pub fn empty(dim: usize) -> Self {
        Hyperdata {
            z: DMatrix::zeros(0, dim),
            u: DVector::zeros(0),
        }
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

fn check_separation(z: &DMatrix<f64>) -> Result<()> {
    for a in 0..z.nrows() {
        for b in a + 1..z.nrows() {
            let d = row_sq_dist(z, a, z, b).sqrt();
            if !(d >= MIN_HYPERDATA_SEPARATION) {
                return Err(Error::InvalidParameter(format!(
                    "hyperdata inputs {a} and {b} are {d:e} apart"
                )));
            }
        }
    }
    Ok(())
}

/// Evenly spaced hyperdata inputs on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, m: usize) -> DMatrix<f64> {
    if m == 1 {
        return DMatrix::from_element(1, 1, 0.5 * (lo + hi));
    }
    DMatrix::from_fn(m, 1, |i, _| lo + (hi - lo) * i as f64 / (m - 1) as f64)
}

/// One-hidden-layer tanh network `u = v·tanh(A z̃ + b) + c` with
/// `z̃ = (z − shift) / scale` a fixed input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperdataNet {
    shift: DVector<f64>,
    scale: DVector<f64>,
    hidden_w: DMatrix<f64>,
    hidden_b: DVector<f64>,
    out_w: DVector<f64>,
    out_b: f64,
}

/// Reverse-mode gradient of a network output contraction.
#[derive(Clone, Debug)]
pub struct NetGradient {
    /// Same layout as [`HyperdataNet::weights`].
    pub weights: Vec<f64>,
    /// Gradient with respect to each input row.
    pub inputs: DMatrix<f64>,
}

impl HyperdataNet {
    pub const DEFAULT_WIDTH: usize = 5;
    pub const DEFAULT_INIT_STD: f64 = 0.5;

    /// Weights drawn from `N(0, std²)`; identity input normalization.
    pub fn random<R: Rng>(in_dim: usize, width: usize, std: f64, rng: &mut R) -> Self {
        let mut draw = || std * rng.sample::<f64, _>(StandardNormal);
        let hidden_w = DMatrix::from_fn(width, in_dim, |_, _| draw());
        let hidden_b = DVector::from_fn(width, |_, _| draw());
        let out_w = DVector::from_fn(width, |_, _| draw());
        let out_b = draw();
        HyperdataNet {
            shift: DVector::zeros(in_dim),
            scale: DVector::from_element(in_dim, 1.0),
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        }
    }

    /// Redraws all weights from `N(0, std²)`, keeping the input normalization.
    pub fn reinit<R: Rng>(&mut self, std: f64, rng: &mut R) {
        let fresh = Self::random(self.in_dim(), self.width(), std, rng);
        self.hidden_w = fresh.hidden_w;
        self.hidden_b = fresh.hidden_b;
        self.out_w = fresh.out_w;
        self.out_b = fresh.out_b;
    }

    pub fn from_weights(in_dim: usize, width: usize, weights: &[f64]) -> Result<Self> {
        let mut net = HyperdataNet {
            shift: DVector::zeros(in_dim),
            scale: DVector::from_element(in_dim, 1.0),
            hidden_w: DMatrix::zeros(width, in_dim),
            hidden_b: DVector::zeros(width),
            out_w: DVector::zeros(width),
            out_b: 0.0,
        };
        net.set_weights(weights)?;
        Ok(net)
    }

    /// Sets the fixed input normalization (not trained).
    pub fn with_normalization(mut self, shift: DVector<f64>, scale: DVector<f64>) -> Result<Self> {
        if shift.len() != self.in_dim() || scale.len() != self.in_dim() {
            return Err(Error::Shape(
                "normalization length must equal input dim".into(),
            ));
        }
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter(
                "normalization scale must be positive".into(),
            ));
        }
        self.shift = shift;
        self.scale = scale;
        Ok(self)
    }

    /// Normalization mapping the rows of `z` onto roughly `[-1, 1]` per column.
    pub fn range_normalization(z: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = z.ncols();
        let mut shift = DVector::zeros(d);
        let mut scale = DVector::from_element(d, 1.0);
        for c in 0..d {
            let col = z.column(c);
            if col.is_empty() {
                continue;
            }
            let (lo, hi) = (col.min(), col.max());
            shift[c] = 0.5 * (lo + hi);
            if hi > lo {
                scale[c] = 0.5 * (hi - lo);
            }
        }
        (shift, scale)
    }

    pub fn in_dim(&self) -> usize {
        self.hidden_w.ncols()
    }

    pub fn width(&self) -> usize {
        self.hidden_w.nrows()
    }

    pub fn n_weights(&self) -> usize {
        self.width() * (self.in_dim() + 2) + 1
    }

    /// Flattened `[A (row-major), b, v, c]`.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_weights());
        for h in 0..self.width() {
            w.extend(self.hidden_w.row(h).iter());
        }
        w.extend(self.hidden_b.iter());
        w.extend(self.out_w.iter());
        w.push(self.out_b);
        w
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_weights() {
            return Err(Error::Shape(format!(
                "network takes {} weights, got {}",
                self.n_weights(),
                w.len()
            )));
        }
        let (width, d) = (self.width(), self.in_dim());
        let mut it = w.iter().copied();
        for h in 0..width {
            for c in 0..d {
                self.hidden_w[(h, c)] = it.next().unwrap();
            }
        }
        for h in 0..width {
            self.hidden_b[h] = it.next().unwrap();
        }
        for h in 0..width {
            self.out_w[h] = it.next().unwrap();
        }
        self.out_b = it.next().unwrap();
        Ok(())
    }

    fn hidden(&self, z: &DMatrix<f64>, m: usize) -> DVector<f64> {
        DVector::from_fn(self.width(), |h, _| {
            let mut a = self.hidden_b[h];
            for c in 0..self.in_dim() {
                a += self.hidden_w[(h, c)] * (z[(m, c)] - self.shift[c]) / self.scale[c];
            }
            a.tanh()
        })
    }

    fn check_input(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: z.ncols(),
            });
        }
        Ok(())
    }

    /// Applies the network to every row of `z`.
    pub fn forward(&self, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_input(z)?;
        Ok(DVector::from_fn(z.nrows(), |m, _| {
            self.out_w.dot(&self.hidden(z, m)) + self.out_b
        }))
    }

    /// Gradient of `Σ_m upstream[m] · u_m` with respect to the weights and
    /// the inputs.
    pub fn backward(&self, z: &DMatrix<f64>, upstream: &DVector<f64>) -> Result<NetGradient> {
        self.check_input(z)?;
        if upstream.len() != z.nrows() {
            return Err(Error::Shape(format!(
                "upstream has {} entries for {} rows",
                upstream.len(),
                z.nrows()
            )));
        }
        let (width, d) = (self.width(), self.in_dim());
        let mut g_a = DMatrix::zeros(width, d);
        let mut g_b = DVector::zeros(width);
        let mut g_v = DVector::zeros(width);
        let mut g_c = 0.0;
        let mut g_in = DMatrix::zeros(z.nrows(), d);
        for m in 0..z.nrows() {
            let up = upstream[m];
            if up == 0.0 {
                continue;
            }
            let act = self.hidden(z, m);
            g_c += up;
            for h in 0..width {
                g_v[h] += up * act[h];
                let pre = up * self.out_w[h] * (1.0 - act[h] * act[h]);
                g_b[h] += pre;
                for c in 0..d {
                    let zn = (z[(m, c)] - self.shift[c]) / self.scale[c];
                    g_a[(h, c)] += pre * zn;
                    g_in[(m, c)] += pre * self.hidden_w[(h, c)] / self.scale[c];
                }
            }
        }
        let mut weights = Vec::with_capacity(self.n_weights());
        for h in 0..width {
            weights.extend(g_a.row(h).iter());
        }
        weights.extend(g_b.iter());
        weights.extend(g_v.iter());
        weights.push(g_c);
        Ok(NetGradient {
            weights,
            inputs: g_in,
        })
    }
}

/// An intermediate GP conditioned on hyperdata, optionally with `u`
/// produced by a [`HyperdataNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedLayer {
    kernel: KernelSpec,
    hyperdata: Hyperdata,
    net: Option<HyperdataNet>,
    optimize_z: bool,
}

impl ConditionedLayer {
    /// Layer with free hyperdata outputs `u`.
    pub fn new(kernel: KernelSpec, hyperdata: Hyperdata) -> Self {
        ConditionedLayer {
            kernel,
            hyperdata,
            net: None,
            optimize_z: false,
        }
    }

    /// Unconditioned zero-mean layer on `dim`-dimensional inputs.
    pub fn unconditioned(kernel: KernelSpec, dim: usize) -> Self {
        Self::new(kernel, Hyperdata::empty(dim))
    }

    /// Layer whose hyperdata outputs are `u = net(Z)`.
    pub fn with_net(kernel: KernelSpec, z: DMatrix<f64>, net: HyperdataNet) -> Result<Self> {
        let u = net.forward(&z)?;
        Ok(ConditionedLayer {
            kernel,
            hyperdata: Hyperdata::new(z, u)?,
            net: Some(net),
            optimize_z: false,
        })
    }

    pub fn with_optimize_z(mut self, on: bool) -> Self {
        self.optimize_z = on;
        self
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn hyperdata(&self) -> &Hyperdata {
        &self.hyperdata
    }

    pub fn net(&self) -> Option<&HyperdataNet> {
        self.net.as_ref()
    }

    pub fn optimize_z(&self) -> bool {
        self.optimize_z && !self.hyperdata.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.hyperdata.dim()
    }

    pub fn set_kernel(&mut self, kernel: KernelSpec) {
        self.kernel = kernel;
    }

    /// Replaces free `u`; errors when a network owns `u`.
    pub fn set_u(&mut self, u: DVector<f64>) -> Result<()> {
        if self.net.is_some() {
            return Err(Error::InvalidParameter(
                "u is produced by the hyperdata network".into(),
            ));
        }
        self.hyperdata = Hyperdata::new(self.hyperdata.z.clone(), u)?;
        Ok(())
    }

    pub fn set_net_weights(&mut self, w: &[f64]) -> Result<()> {
        let net = self
            .net
            .as_mut()
            .ok_or_else(|| Error::InvalidParameter("layer has no hyperdata network".into()))?;
        net.set_weights(w)?;
        self.hyperdata.u = net.forward(&self.hyperdata.z)?;
        Ok(())
    }

    pub fn set_net(&mut self, net: HyperdataNet) -> Result<()> {
        self.hyperdata.u = net.forward(&self.hyperdata.z)?;
        self.net = Some(net);
        Ok(())
    }

    pub fn set_z(&mut self, z: DMatrix<f64>) -> Result<()> {
        let u = match &self.net {
            Some(net) => net.forward(&z)?,
            None => self.hyperdata.u.clone(),
        };
        self.hyperdata = Hyperdata::new(z, u)?;
        Ok(())
    }

    /// Number of hyperdata parameters (`u` or network weights).
    pub fn n_hyperdata_params(&self) -> usize {
        match &self.net {
            Some(net) => net.n_weights(),
            None => self.hyperdata.len(),
        }
    }

    pub(crate) fn solve(&self) -> Result<LayerSolve> {
        LayerSolve::new(self)
    }

    fn se_params(&self) -> Result<(f64, f64)> {
        if self.kernel.family() != KernelFamily::SquaredExponential {
            return Err(Error::InvalidParameter(format!(
                "operation requires an SE layer kernel, got {:?}",
                self.kernel.family()
            )));
        }
        Ok((self.kernel.param(0), self.kernel.param(1)))
    }

    /// Conditional mean and its first derivative at a scalar input
    /// (SE layers on one-dimensional inputs).
    pub fn mean_derivs(&self, a: f64) -> Result<(f64, f64)> {
        let solve = self.optional_solve()?;
        self.mean_derivs_with(solve.as_ref(), a)
    }

    fn optional_solve(&self) -> Result<Option<LayerSolve>> {
        if self.hyperdata.is_empty() {
            Ok(None)
        } else {
            self.solve().map(Some)
        }
    }

    pub(crate) fn mean_derivs_with(
        &self,
        solve: Option<&LayerSolve>,
        a: f64,
    ) -> Result<(f64, f64)> {
        let (_, ell) = self.se_params()?;
        let solve = match solve {
            Some(s) => s,
            None => return Ok((0.0, 0.0)),
        };
        let z = &self.hyperdata.z;
        let mut mu = 0.0;
        let mut dmu = 0.0;
        for m in 0..z.nrows() {
            let k = self.kernel.eval_r2((a - z[(m, 0)]).powi(2));
            mu += solve.beta[m] * k;
            dmu += solve.beta[m] * (-k * (a - z[(m, 0)]) / (ell * ell));
        }
        Ok((mu, dmu))
    }

    /// Conditional covariance `k̃(a, b)` with its second derivatives
    /// `(k̃, ∂²_a k̃, ∂²_b k̃, ∂²_ab k̃)` at scalar inputs (SE layers).
    pub fn cov_second_derivs(&self, a: f64, b: f64) -> Result<[f64; 4]> {
        let solve = self.optional_solve()?;
        self.cov_second_derivs_with(solve.as_ref(), a, b)
    }

    pub(crate) fn cov_second_derivs_with(
        &self,
        solve: Option<&LayerSolve>,
        a: f64,
        b: f64,
    ) -> Result<[f64; 4]> {
        let (_, ell) = self.se_params()?;
        let l2 = ell * ell;
        let kab = self.kernel.eval_r2((a - b).powi(2));
        let curv = ((a - b).powi(2) / (l2 * l2) - 1.0 / l2) * kab;
        let mut out = [kab, curv, curv, -curv];
        let solve = match solve {
            Some(s) => s,
            None => return Ok(out),
        };
        let z = &self.hyperdata.z;
        let m = z.nrows();
        let bump = |x: f64| {
            let mut k = DVector::zeros(m);
            let mut dk = DVector::zeros(m);
            let mut d2k = DVector::zeros(m);
            for i in 0..m {
                let d = x - z[(i, 0)];
                let v = self.kernel.eval_r2(d * d);
                k[i] = v;
                dk[i] = -v * d / l2;
                d2k[i] = v * (d * d / (l2 * l2) - 1.0 / l2);
            }
            (k, dk, d2k)
        };
        let (ka, dka, d2ka) = bump(a);
        let (kb, dkb, d2kb) = bump(b);
        let ki_kb = solve.chol.solve_vec(&kb);
        let ki_dkb = solve.chol.solve_vec(&dkb);
        let ki_d2kb = solve.chol.solve_vec(&d2kb);
        out[0] -= ka.dot(&ki_kb);
        out[1] -= d2ka.dot(&ki_kb);
        out[2] -= ka.dot(&ki_d2kb);
        out[3] -= dka.dot(&ki_dkb);
        Ok(out)
    }
}

/// Factorized hyperdata Gram of one layer.
#[derive(Clone, Debug)]
pub(crate) struct LayerSolve {
    pub chol: JitteredCholesky,
    pub kzz: DMatrix<f64>,
    pub kzz_inv: DMatrix<f64>,
    /// `K_ZZ⁻¹ u`
    pub beta: DVector<f64>,
}

impl LayerSolve {
    fn new(layer: &ConditionedLayer) -> Result<Self> {
        let z = &layer.hyperdata.z;
        let kzz = layer.kernel.gram_sym(z);
        let chol = chol_jitter(&kzz).map_err(|e| Error::Hyperdata(Box::new(e)))?;
        let beta = chol.solve_vec(&layer.hyperdata.u);
        let kzz_inv = chol.inverse();
        Ok(LayerSolve {
            chol,
            kzz,
            kzz_inv,
            beta,
        })
    }
}

/// Conditional moments at a set of inputs plus the intermediates needed by
/// the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct ConditionalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub kxz: DMatrix<f64>,
    /// `K_XZ K_ZZ⁻¹`
    pub proj: DMatrix<f64>,
    pub solve: Option<LayerSolve>,
}

pub(crate) fn conditional_moments(
    layer: &ConditionedLayer,
    x: &DMatrix<f64>,
) -> Result<ConditionalMoments> {
    if x.ncols() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: layer.input_dim(),
            got: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite layer input".into()));
    }
    let n = x.nrows();
    let kxx = layer.kernel.gram_sym(x);
    if layer.hyperdata.is_empty() {
        return Ok(ConditionalMoments {
            mean: DVector::zeros(n),
            cov: kxx,
            kxz: DMatrix::zeros(n, 0),
            proj: DMatrix::zeros(n, 0),
            solve: None,
        });
    }
    let solve = layer.solve()?;
    let kxz = layer.kernel.gram(x, &layer.hyperdata.z)?;
    let proj = solve.chol.solve_mat(&kxz.transpose()).transpose();
    let mean = &proj * &layer.hyperdata.u;
    let mut cov = kxx - &proj * kxz.transpose();
    symmetrize(&mut cov);
    Ok(ConditionalMoments {
        mean,
        cov,
        kxz,
        proj,
        solve: Some(solve),
    })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `K_XZ K_ZZ⁻¹ u`; zero when the layer has no hyperdata.
pub fn conditional_mean(layer: &ConditionedLayer, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(conditional_moments(layer, x)?.mean)
}

/// `K_XX − K_XZ K_ZZ⁻¹ K_ZX`; the prior Gram when the layer has no hyperdata.
pub fn conditional_cov(layer: &ConditionedLayer, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(conditional_moments(layer, x)?.cov)
}

/// Per-pair conditional statistics for every pair of rows of `x`.
pub fn pair_moments(layer: &ConditionedLayer, x: &DMatrix<f64>) -> Result<PairMoments> {
    let cm = conditional_moments(layer, x)?;
    PairMoments::new(cm.mean, cm.cov)
}

/// Gradient of a layer's parameters from the adjoints of its outputs.
#[derive(Clone, Debug)]
pub(crate) struct LayerGrad {
    pub kernel: Vec<f64>,
    /// Adjoint of `u` (before any network).
    pub u: DVector<f64>,
    /// Adjoint of `Z` (SE kernels only; zero otherwise).
    pub z: DMatrix<f64>,
}

impl LayerGrad {
    /// Flattens in the layer's parameter order: kernel, hyperdata, Z.
    pub fn flatten(&self, layer: &ConditionedLayer) -> Result<Vec<f64>> {
        let mut out = self.kernel.clone();
        let mut z_adj = self.z.clone();
        match layer.net() {
            Some(net) => {
                let g = net.backward(layer.hyperdata().z(), &self.u)?;
                out.extend(g.weights);
                z_adj += g.inputs;
            }
            None => out.extend(self.u.iter()),
        }
        if layer.optimize_z() {
            for m in 0..z_adj.nrows() {
                out.extend(z_adj.row(m).iter());
            }
        }
        Ok(out)
    }
}

/// Reverse pass of [`conditional_moments`] given the adjoints of the mean
/// and (symmetric) covariance.
pub(crate) fn conditional_backward(
    layer: &ConditionedLayer,
    x: &DMatrix<f64>,
    cm: &ConditionalMoments,
    mean_adj: &DVector<f64>,
    cov_adj: &DMatrix<f64>,
) -> Result<LayerGrad> {
    let kernel = &layer.kernel;
    let z = layer.hyperdata.z();
    let mut grad = kernel.contract_param_grads(x, x, cov_adj);
    let m = layer.hyperdata.len();
    let mut z_adj = DMatrix::zeros(m, layer.input_dim());
    let solve = match &cm.solve {
        None => {
            return Ok(LayerGrad {
                kernel: grad,
                u: DVector::zeros(0),
                z: z_adj,
            })
        }
        Some(s) => s,
    };
    // Adjoints of the cross and hyperdata Grams.
    let mut kxz_adj = mean_adj * solve.beta.transpose();
    kxz_adj -= 2.0 * cov_adj * &cm.proj;
    let u_adj = cm.proj.transpose() * mean_adj;
    let kzz_adj = cm.proj.transpose() * cov_adj * &cm.proj - &u_adj * solve.beta.transpose();
    for (g, h) in grad
        .iter_mut()
        .zip(kernel.contract_param_grads(x, z, &kxz_adj))
    {
        *g += h;
    }
    for (g, h) in grad
        .iter_mut()
        .zip(kernel.contract_param_grads(z, z, &kzz_adj))
    {
        *g += h;
    }
    if kernel.family() == KernelFamily::SquaredExponential {
        let l2 = kernel.param(1).powi(2);
        for a in 0..m {
            for i in 0..x.nrows() {
                let w = kxz_adj[(i, a)] * cm.kxz[(i, a)] / l2;
                for c in 0..x.ncols() {
                    z_adj[(a, c)] += w * (x[(i, c)] - z[(a, c)]);
                }
            }
            for b in 0..m {
                if a == b {
                    continue;
                }
                let w = (kzz_adj[(a, b)] + kzz_adj[(b, a)]) * solve.kzz[(a, b)] / l2;
                for c in 0..z.ncols() {
                    z_adj[(a, c)] -= w * (z[(a, c)] - z[(b, c)]);
                }
            }
        }
    }
    Ok(LayerGrad {
        kernel: grad,
        u: u_adj,
        z: z_adj,
    })
}
