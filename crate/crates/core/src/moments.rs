//! Fourth moments of the two-layer marginal prior, the heavy-tail gap and a
//! Monte-Carlo sampler of the full composite process.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditional::{symmetrize, ConditionedLayer, LayerSolve};
use crate::effective::LayerStack;
use crate::error::{Error, Result};
use crate::kernel::{column, KernelSpec};
use crate::regression::chol_jitter;

/// Batches used for Monte-Carlo standard errors.
pub const DEFAULT_BATCHES: usize = 50;

/// Four point indices with the latent moments feeding an SE exposed layer.
#[derive(Clone, Copy, Debug)]
pub struct FourthMomentInput<'a> {
    pub indices: [usize; 4],
    pub means: &'a DVector<f64>,
    pub cov: &'a DMatrix<f64>,
    pub sigma: f64,
    pub ell: f64,
}

/// `E[f_a f_b f_c f_d]` for the zero-mean SE exposed layer over Gaussian
/// latent inputs: the three pairings of `E[k(h_a,h_b) k(h_c,h_d)]`.
pub fn fourth_moment(input: &FourthMomentInput) -> Result<f64> {
    let n = input.means.len();
    if input.cov.shape() != (n, n) {
        return Err(Error::Shape("covariance does not match the means".into()));
    }
    if let Some(&bad) = input.indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!(
            "index {bad} out of range for {n} points"
        )));
    }
    let [a, b, c, d] = input.indices;
    let mut total = 0.0;
    for (p, q) in [((a, b), (c, d)), ((a, c), (b, d)), ((a, d), (b, c))] {
        total += pair_product_expectation(input, p, q)?;
    }
    Ok(input.sigma.powi(4) * total)
}

/// `E[exp(-(h_a-h_b)²/2ℓ²) exp(-(h_c-h_d)²/2ℓ²)]`.
fn pair_product_expectation(
    input: &FourthMomentInput,
    (a, b): (usize, usize),
    (c, d): (usize, usize),
) -> Result<f64> {
    let k = input.cov;
    let m = input.means;
    let l2 = input.ell * input.ell;
    let v = (k[(a, d)] + k[(b, c)] - k[(a, c)] - k[(b, d)]) / l2;
    let d_ab = 1.0 + (k[(a, a)] + k[(b, b)] - 2.0 * k[(a, b)]) / l2;
    let d_cd = 1.0 + (k[(c, c)] + k[(d, d)] - 2.0 * k[(c, d)]) / l2;
    let det = d_ab * d_cd - v * v;
    if !(det > 0.0) {
        return Err(Error::Degenerate(format!(
            "pairing ({a}{b})({c}{d}) has non-positive determinant {det:e}"
        )));
    }
    let (g1, g2) = (m[a] - m[b], m[c] - m[d]);
    let alpha1 = (-g1 * g1 / (2.0 * l2 * (d_ab - v * v / d_cd))).exp();
    let alpha2 = (-g2 * g2 / (2.0 * l2 * (d_cd - v * v / d_ab))).exp();
    let beta = (-g1 * g2 * v / (l2 * det)).exp();
    Ok(alpha1 * alpha2 * beta / det.sqrt())
}

/// `E_p[(f_i f_j)²] − E_q[(f_i f_j)²]` between the composite prior and its
/// Gaussian match, in units with unit exposed signal and length scale.
pub fn heavy_tail_gap(m_diff: f64, delta2: f64) -> f64 {
    let m2 = m_diff * m_diff;
    let wide = 1.0 + 2.0 * delta2;
    let narrow = 1.0 + delta2;
    (-m2 / wide).exp() / wide.sqrt() - (-m2 / narrow).exp() / narrow
}

/// `(m_diff, δ², gap)` on an `n × n` grid over `m_diff ∈ [−5, 5]`,
/// `δ² ∈ [0, 10]`.
pub fn heavy_tail_grid(n: usize) -> Vec<(f64, f64, f64)> {
    let at = |lo: f64, hi: f64, k: usize| {
        if n < 2 {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let (m, d2) = (at(-5.0, 5.0, a), at(0.0, 10.0, b));
            out.push((m, d2, heavy_tail_gap(m, d2)));
        }
    }
    out
}

/// Monte-Carlo mean with a batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Splits `values` into `n_batches` contiguous batches and uses the spread of
/// the batch means for the standard error.
pub fn batch_estimate(values: &[f64], n_batches: usize) -> Estimate {
    let n_batches = n_batches.clamp(2, values.len().max(2));
    let size = values.len() / n_batches;
    if size == 0 {
        return Estimate {
            mean: f64::NAN,
            std_error: f64::NAN,
        };
    }
    let means: Vec<f64> = (0..n_batches)
        .map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    Estimate {
        mean,
        std_error: (var / n_batches as f64).sqrt(),
    }
}

/// Batched estimates of `E[f_i f_j]` from an `n × N` sample matrix.
pub fn mc_second_moments(samples: &DMatrix<f64>, n_batches: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.ncols();
    let mut mean = DMatrix::zeros(n, n);
    let mut se = DMatrix::zeros(n, n);
    let mut buf = vec![0.0; samples.nrows()];
    for i in 0..n {
        for j in i..n {
            for (s, v) in buf.iter_mut().enumerate() {
                *v = samples[(s, i)] * samples[(s, j)];
            }
            let e = batch_estimate(&buf, n_batches);
            mean[(i, j)] = e.mean;
            mean[(j, i)] = e.mean;
            se[(i, j)] = e.std_error;
            se[(j, i)] = e.std_error;
        }
    }
    (mean, se)
}

/// Matrix `L` with `L Lᵀ ≈ cov`: jittered Cholesky, or a clipped
/// eigen-decomposition when the jitter ladder is exhausted.
pub fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite covariance".into()));
    }
    if let Ok(ch) = chol_jitter(cov) {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// `n` draws from `N(mean, cov)` as the rows of an `n × N` matrix.
pub fn sample_gaussian<R: Rng>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let dim = mean.len();
    if cov.shape() != (dim, dim) {
        return Err(Error::Shape("covariance does not match the mean".into()));
    }
    let factor = sampling_factor(cov)?;
    let mut out = DMatrix::zeros(n, dim);
    let mut z = DVector::zeros(dim);
    for s in 0..n {
        draw_into(&factor, mean, &mut z, rng, &mut out, s);
    }
    Ok(out)
}

fn draw_into<R: Rng>(
    factor: &DMatrix<f64>,
    mean: &DVector<f64>,
    z: &mut DVector<f64>,
    rng: &mut R,
    out: &mut DMatrix<f64>,
    row: usize,
) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for i in 0..mean.len() {
        let mut acc = mean[i];
        for k in 0..factor.ncols() {
            acc += factor[(i, k)] * z[k];
        }
        out[(row, i)] = acc;
    }
}

fn draw_vector<R: Rng>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let factor = sampling_factor(cov)?;
    let dim = mean.len();
    let mut out = mean.clone();
    let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..dim {
        for (k, zk) in z.iter().enumerate() {
            out[i] += factor[(i, k)] * zk;
        }
    }
    Ok(out)
}

/// Conditional moments of `layer` at scalar inputs `h` with a cached solve.
fn layer_moments_at(
    layer: &ConditionedLayer,
    solve: Option<&LayerSolve>,
    h: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kxx = layer.kernel().gram_sym(h);
    match solve {
        None => Ok((DVector::zeros(h.nrows()), kxx)),
        Some(sv) => {
            let kxz = layer.kernel().gram(h, layer.hyperdata().z())?;
            let proj = sv.chol.solve_mat(&kxz.transpose()).transpose();
            let mean = &proj * layer.hyperdata().u();
            let mut cov = kxx - &proj * kxz.transpose();
            symmetrize(&mut cov);
            Ok((mean, cov))
        }
    }
}

/// Two-stage samples of the composite process at `x`: the first layer is
/// drawn from its conditional GP, each later layer from its conditional GP at
/// the previous draw, and the exposed layer from its zero-mean GP. Returns an
/// `n_samples × N` matrix.
pub fn mc_sample_composite(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    if stack.intermediate().is_empty() {
        let gram = stack.exposed().gram(x, x)?;
        return sample_gaussian(&DVector::zeros(n), &gram, n_samples, &mut rng);
    }
    let layers = stack.intermediate();
    let solves: Vec<Option<LayerSolve>> = layers
        .iter()
        .map(|l| {
            if l.hyperdata().is_empty() {
                Ok(None)
            } else {
                l.solve().map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let first = crate::conditional::conditional_moments(&layers[0], x)?;
    let first_factor = sampling_factor(&first.cov)?;
    let exposed: &KernelSpec = stack.exposed();
    let zero = DVector::zeros(n);
    let mut out = DMatrix::zeros(n_samples, n);
    let mut z = DVector::zeros(n);
    let mut h_mat = DMatrix::zeros(1, n);
    for s in 0..n_samples {
        draw_into(&first_factor, &first.mean, &mut z, &mut rng, &mut h_mat, 0);
        let mut h = column(h_mat.row(0).transpose().as_slice());
        for (layer, solve) in layers[1..].iter().zip(&solves[1..]) {
            let (mean, cov) = layer_moments_at(layer, solve.as_ref(), &h)?;
            h = column(draw_vector(&mean, &cov, &mut rng)?.as_slice());
        }
        let f = draw_vector(&zero, &exposed.gram_sym(&h), &mut rng)?;
        for i in 0..n {
            out[(s, i)] = f[i];
        }
    }
    Ok(out)
}
