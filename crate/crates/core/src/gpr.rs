//! Gaussian process regression with a weighted sum of an isotropic Matérn 5/2
//! kernel and a squared-exponential ARD kernel. Hyperparameters are fitted
//! by maximizing the log marginal likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_inverse, cholesky_solve, solve_lower, Matrix};
use crate::scalar::Scalar;

const SQRT5: f64 = 2.236_067_977_499_79;

const WEIGHT_BOUNDS: (f64, f64) = (1e-4, 1e2);
const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-2, 1e2);
const NOISE_BOUNDS: (f64, f64) = (1e-6, 1.0);

const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KernelParams<T> {
    pub w_matern: T,
    pub matern_lengthscale: T,
    pub w_ard: T,
    pub ard_lengthscales: Vec<T>,
    pub noise_variance: T,
}

/// Matérn 5/2 correlation at scaled distance `rho`.
pub fn matern52<T: Scalar>(rho: T) -> T {
    let s5 = T::lit(SQRT5);
    (T::one() + s5 * rho + T::lit(5.0 / 3.0) * rho * rho) * (-s5 * rho).exp()
}

impl<T: Scalar> KernelParams<T> {
    pub fn default_for(dim: usize) -> Self {
        Self {
            w_matern: T::one(),
            matern_lengthscale: T::one(),
            w_ard: T::one(),
            ard_lengthscales: vec![T::one(); dim],
            noise_variance: T::lit(0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.ard_lengthscales.len()
    }

    /// `[ln w_m, ln ℓ_m, ln w_a, ln ℓ_1.., ln σ²]`.
    pub fn to_log(&self) -> Vec<T> {
        let mut v = vec![self.w_matern.ln(), self.matern_lengthscale.ln(), self.w_ard.ln()];
        v.extend(self.ard_lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log(theta: &[T]) -> Self {
        let d = theta.len() - 4;
        Self {
            w_matern: theta[0].exp(),
            matern_lengthscale: theta[1].exp(),
            w_ard: theta[2].exp(),
            ard_lengthscales: theta[3..3 + d].iter().map(|t| t.exp()).collect(),
            noise_variance: theta[3 + d].exp(),
        }
    }

    /// Box constraints on the log-parameters, in [`to_log`](Self::to_log) order.
    pub fn log_bounds(dim: usize) -> Vec<(T, T)> {
        let ln = |(a, b): (f64, f64)| (T::lit(a.ln()), T::lit(b.ln()));
        let mut b = vec![ln(WEIGHT_BOUNDS), ln(LENGTHSCALE_BOUNDS), ln(WEIGHT_BOUNDS)];
        b.extend(std::iter::repeat_n(ln(LENGTHSCALE_BOUNDS), dim));
        b.push(ln(NOISE_BOUNDS));
        b
    }

    /// Prior variance `k(x, x)`.
    pub fn signal_variance(&self) -> T {
        self.w_matern + self.w_ard
    }

    pub fn eval(&self, a: &[T], b: &[T]) -> Result<T> {
        if a.len() != self.dim() || b.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: if a.len() != self.dim() { a.len() } else { b.len() },
            });
        }
        Ok(self.eval_unchecked(a, b))
    }

    fn eval_unchecked(&self, a: &[T], b: &[T]) -> T {
        let mut r2 = T::zero();
        let mut s = T::zero();
        for ((&x, &y), &l) in a.iter().zip(b).zip(&self.ard_lengthscales) {
            let d = x - y;
            r2 += d * d;
            s += (d / l) * (d / l);
        }
        let rho = r2.sqrt() / self.matern_lengthscale;
        self.w_matern * matern52(rho) + self.w_ard * (T::lit(-0.5) * s).exp()
    }
}

/// `w_m · Matérn52(‖a−b‖/ℓ_m) + w_a · exp(−½ Σ ((a_j−b_j)/ℓ_j)²)`.
pub fn kernel<T: Scalar>(a: &[T], b: &[T], p: &KernelParams<T>) -> Result<T> {
    p.eval(a, b)
}

const SCREEN_POINTS: usize = 64;
const SCREEN_STARTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 100,
        }
    }
}

/// Pairwise squared differences per input dimension, upper triangle.
struct Geometry<T> {
    n: usize,
    d: usize,
    diff2: Vec<T>,
}

impl<T: Scalar> Geometry<T> {
    fn new(x: &[Vec<T>]) -> Self {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        let mut diff2 = vec![T::zero(); n * n * d];
        for i in 0..n {
            for j in 0..n {
                for k in 0..d {
                    let t = x[i][k] - x[j][k];
                    diff2[(i * n + j) * d + k] = t * t;
                }
            }
        }
        Self { n, d, diff2 }
    }

    fn pair(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.n + j) * self.d;
        &self.diff2[o..o + self.d]
    }
}

/// Per-pair kernel pieces shared between the Gram matrix and its gradient.
struct PairTerms<T> {
    k_matern: T,
    dk_dlog_lm: T,
    k_ard: T,
}

fn pair_terms<T: Scalar>(p: &KernelParams<T>, diff2: &[T]) -> PairTerms<T> {
    let s5 = T::lit(SQRT5);
    let mut r2 = T::zero();
    let mut s = T::zero();
    for (&d2, &l) in diff2.iter().zip(&p.ard_lengthscales) {
        r2 += d2;
        s += d2 / (l * l);
    }
    let rho = r2.sqrt() / p.matern_lengthscale;
    let e = (-s5 * rho).exp();
    let k_matern = p.w_matern * (T::one() + s5 * rho + T::lit(5.0 / 3.0) * rho * rho) * e;
    let dk_dlog_lm = p.w_matern * T::lit(5.0 / 3.0) * rho * rho * (T::one() + s5 * rho) * e;
    let k_ard = p.w_ard * (T::lit(-0.5) * s).exp();
    PairTerms {
        k_matern,
        dk_dlog_lm,
        k_ard,
    }
}

fn gram<T: Scalar>(g: &Geometry<T>, p: &KernelParams<T>) -> Matrix<T> {
    let n = g.n;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let t = pair_terms(p, g.pair(i, j));
            let v = t.k_matern + t.k_ard;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += p.noise_variance;
    }
    k
}

/// Cholesky of `k`, adding jitter from 1e-9 upward by factors of ten until it
/// succeeds or the jitter would exceed 1e-3.
fn factor_with_jitter<T: Scalar>(k: &Matrix<T>) -> Option<(Matrix<T>, T)> {
    if let Some(l) = cholesky(k) {
        return Some((l, T::zero()));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-12) {
        let mut kj = k.clone();
        for i in 0..k.rows() {
            kj[(i, i)] += T::lit(jitter);
        }
        if let Some(l) = cholesky(&kj) {
            return Some((l, T::lit(jitter)));
        }
        jitter *= 10.0;
    }
    None
}

fn log_det_from_cholesky<T: Scalar>(l: &Matrix<T>) -> T {
    (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<T>() * T::lit(2.0)
}

fn lml_value<T: Scalar>(l: &Matrix<T>, y: &[T], alpha: &[T]) -> T {
    let n = T::from_usize(y.len()).unwrap();
    let fit = crate::scalar::dot(y, alpha);
    T::lit(-0.5) * fit - T::lit(0.5) * log_det_from_cholesky(l) - T::lit(0.5) * n * T::TAU().ln()
}

/// Log marginal likelihood of centered targets `y` and its gradient with
/// respect to the log-parameters. `None` if the Gram matrix cannot be factored.
fn lml_and_gradient<T: Scalar>(g: &Geometry<T>, y: &[T], theta: &[T], want_grad: bool) -> Option<(T, Vec<T>)> {
    let p = KernelParams::from_log(theta);
    let k = gram(g, &p);
    let (l, _) = factor_with_jitter(&k)?;
    let alpha = cholesky_solve(&l, y);
    let value = lml_value(&l, y, &alpha);
    if !value.is_finite() {
        return None;
    }
    if !want_grad {
        return Some((value, Vec::new()));
    }
    let kinv = cholesky_inverse(&l);
    let d = g.d;
    let mut grad = vec![T::zero(); 4 + d];
    let two = T::lit(2.0);
    for i in 0..g.n {
        for j in 0..=i {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let w = if i == j { w } else { w * two };
            let diff2 = g.pair(i, j);
            let t = pair_terms(&p, diff2);
            grad[0] += w * t.k_matern;
            grad[1] += w * t.dk_dlog_lm;
            grad[2] += w * t.k_ard;
            for (k, (&d2, &lk)) in diff2.iter().zip(&p.ard_lengthscales).enumerate() {
                grad[3 + k] += w * t.k_ard * d2 / (lk * lk);
            }
            if i == j {
                grad[3 + d] += w * p.noise_variance;
            }
        }
    }
    grad.iter_mut().for_each(|v| *v *= T::lit(0.5));
    Some((value, grad))
}

fn clamp_box<T: Scalar>(x: &mut [T], bounds: &[(T, T)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.max(lo).min(hi);
    }
}

/// Projected L-BFGS ascent on a box. Returns the best point and value seen.
fn maximize_box<T: Scalar>(
    f: &impl Fn(&[T], bool) -> Option<(T, Vec<T>)>,
    start: &[T],
    bounds: &[(T, T)],
    max_iters: usize,
) -> Option<(Vec<T>, T)> {
    const MEMORY: usize = 8;
    let n = start.len();
    let mut x = start.to_vec();
    clamp_box(&mut x, bounds);
    let (mut fx, mut gx) = f(&x, true)?;
    let mut hist: Vec<(Vec<T>, Vec<T>)> = Vec::new();
    let tol = T::lit(1e-12);

    for _ in 0..max_iters {
        // Work in minimization terms: h = −f, ∇h = −g.
        let mut pg: Vec<T> = gx.iter().map(|&g| -g).collect();
        for i in 0..n {
            let (lo, hi) = bounds[i];
            if (x[i] <= lo && pg[i] > T::zero()) || (x[i] >= hi && pg[i] < T::zero()) {
                pg[i] = T::zero();
            }
        }
        let pg_norm = pg.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if pg_norm < T::lit(1e-7) {
            break;
        }
        // Two-loop recursion.
        let mut q = pg.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv) in hist.iter().rev() {
            let rho = T::one() / crate::scalar::dot(yv, s);
            let a = rho * crate::scalar::dot(s, &q);
            for (qi, &yi) in q.iter_mut().zip(yv) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        if let Some((s, yv)) = hist.last() {
            let gamma = crate::scalar::dot(s, yv) / crate::scalar::dot(yv, yv);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = T::one() / pg_norm.max(T::one());
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, yv), &(a, rho)) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * crate::scalar::dot(yv, &q);
            for (qi, &si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<T> = q.iter().map(|&v| -v).collect();
        for i in 0..n {
            if pg[i] == T::zero() {
                dir[i] = T::zero();
            }
        }
        if crate::scalar::dot(&dir, &pg) >= T::zero() {
            hist.clear();
            let scale = T::one() / pg_norm.max(T::one());
            dir = pg.iter().map(|&v| -v * scale).collect();
        }

        // Backtracking on the projected path.
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..30 {
            let mut xn: Vec<T> = x.iter().zip(&dir).map(|(&a, &d)| a + step * d).collect();
            clamp_box(&mut xn, bounds);
            let moved: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
            let decrease = crate::scalar::dot(&moved, &pg);
            if let Some((fnew, gnew)) = f(&xn, true) {
                // Armijo on h: h(xn) ≤ h(x) + c ∇hᵀ(xn − x).
                if -fnew <= -fx + T::lit(1e-4) * decrease {
                    accepted = Some((xn, fnew, gnew, moved));
                    break;
                }
            }
            step *= T::lit(0.5);
        }
        let Some((xn, fnew, gnew, s)) = accepted else {
            break;
        };
        let yv: Vec<T> = gnew.iter().zip(&gx).map(|(&a, &b)| -(a - b)).collect();
        let sy = crate::scalar::dot(&s, &yv);
        if sy > T::lit(1e-10) {
            hist.push((s, yv));
            if hist.len() > MEMORY {
                hist.remove(0);
            }
        }
        let improvement = fnew - fx;
        x = xn;
        fx = fnew;
        gx = gnew;
        if improvement.abs() <= tol * fx.abs().max(T::one()) {
            break;
        }
    }
    Some((x, fx))
}

/// Fitted GP over standardized targets with a constant mean equal to the
/// targets' sample mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "GprSnapshot<T>", into = "GprSnapshot<T>")]
pub struct GprModel<T: Scalar> {
    x: Vec<Vec<T>>,
    y: Vec<T>,
    mean: T,
    params: KernelParams<T>,
    jitter: T,
    chol: Matrix<T>,
    alpha: Vec<T>,
    log_marginal_likelihood: T,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct GprSnapshot<T> {
    x: Vec<Vec<T>>,
    y: Vec<T>,
    params: KernelParams<T>,
}

impl<T: Scalar> From<GprModel<T>> for GprSnapshot<T> {
    fn from(m: GprModel<T>) -> Self {
        Self {
            x: m.x,
            y: m.y,
            params: m.params,
        }
    }
}

impl<T: Scalar> TryFrom<GprSnapshot<T>> for GprModel<T> {
    type Error = Error;
    fn try_from(s: GprSnapshot<T>) -> Result<Self> {
        GprModel::with_params(s.x, s.y, s.params)
    }
}

fn check_training_set<T: Scalar>(x: &[Vec<T>], y: &[T]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "GP regression needs at least 2 points, got {}",
            x.len()
        )));
    }
    let d = x[0].len();
    if d == 0 {
        return Err(Error::InvalidInput("inputs must have at least one dimension".into()));
    }
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite GP input".into()));
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite GP target".into()));
    }
    Ok(d)
}

fn sample_mean<T: Scalar>(y: &[T]) -> T {
    y.iter().copied().sum::<T>() / T::from_usize(y.len()).unwrap()
}

impl<T: Scalar> GprModel<T> {
    pub fn fit(x: Vec<Vec<T>>, y: Vec<T>, seed: u64) -> Result<Self> {
        Self::fit_with(x, y, seed, &FitOptions::default(), None)
    }

    /// Multi-start maximum-likelihood fit. The first start is `warm_start`
    /// when given, otherwise unit weights and lengthscales with noise 0.1;
    /// the others are drawn from `seed`.
    pub fn fit_with(
        x: Vec<Vec<T>>,
        y: Vec<T>,
        seed: u64,
        opts: &FitOptions,
        warm_start: Option<&KernelParams<T>>,
    ) -> Result<Self> {
        let d = check_training_set(&x, &y)?;
        let mean = sample_mean(&y);
        let yc: Vec<T> = y.iter().map(|&v| v - mean).collect();
        let geom = Geometry::new(&x);
        let bounds = KernelParams::<T>::log_bounds(d);
        let objective = |theta: &[T], grad: bool| lml_and_gradient(&geom, &yc, theta, grad);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut starts = Vec::with_capacity(opts.restarts.max(1));
        let first = match warm_start {
            Some(p) if p.dim() == d => p.to_log(),
            _ => KernelParams::<T>::default_for(d).to_log(),
        };
        starts.push(first);
        while starts.len() < opts.restarts.max(1) {
            let mut theta: Vec<T> = Vec::with_capacity(4 + d);
            let mut draw = |lo: f64, hi: f64| T::lit(rng.random_range(lo.ln()..hi.ln()));
            theta.push(draw(0.1, 10.0));
            theta.push(draw(0.1, 10.0));
            theta.push(draw(0.1, 10.0));
            for _ in 0..d {
                theta.push(draw(0.1, 10.0));
            }
            theta.push(draw(1e-4, 0.5));
            starts.push(theta);
        }
        // Small data sets often have their best mode near the edge of the box,
        // away from the restarts above; seed a few starts from a wide screen.
        let mut screened: Vec<(T, Vec<T>)> = (0..SCREEN_POINTS)
            .filter_map(|_| {
                let theta: Vec<T> = bounds
                    .iter()
                    .map(|&(lo, hi)| lo + (hi - lo) * T::lit(rng.random::<f64>()))
                    .collect();
                objective(&theta, false).map(|(v, _)| (v, theta))
            })
            .collect();
        screened.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        starts.extend(screened.into_iter().take(SCREEN_STARTS).map(|(_, t)| t));

        let mut best: Option<(Vec<T>, T)> = None;
        for s in &starts {
            if let Some((theta, v)) = maximize_box(&objective, s, &bounds, opts.max_iters) {
                if best.as_ref().is_none_or(|(_, b)| v > *b) {
                    best = Some((theta, v));
                }
            }
        }
        let (theta, _) = best.ok_or_else(|| {
            Error::Numerical("kernel matrix not positive definite at any start".into())
        })?;
        Self::with_params(x, y, KernelParams::from_log(&theta))
    }

    /// Conditions on the data with fixed hyperparameters.
    pub fn with_params(x: Vec<Vec<T>>, y: Vec<T>, params: KernelParams<T>) -> Result<Self> {
        let d = check_training_set(&x, &y)?;
        if params.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: params.dim(),
            });
        }
        let mean = sample_mean(&y);
        let yc: Vec<T> = y.iter().map(|&v| v - mean).collect();
        let k = gram(&Geometry::new(&x), &params);
        let (chol, jitter) = factor_with_jitter(&k).ok_or_else(|| {
            Error::Numerical(format!("Cholesky failed with jitter up to {JITTER_MAX}"))
        })?;
        let alpha = cholesky_solve(&chol, &yc);
        let log_marginal_likelihood = lml_value(&chol, &yc, &alpha);
        Ok(Self {
            x,
            y,
            mean,
            params,
            jitter,
            chol,
            alpha,
            log_marginal_likelihood,
        })
    }

    pub fn params(&self) -> &KernelParams<T> {
        &self.params
    }

    pub fn inputs(&self) -> &[Vec<T>] {
        &self.x
    }

    pub fn targets(&self) -> &[T] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> T {
        self.log_marginal_likelihood
    }

    /// Posterior mean and standard deviation.
    pub fn predict(&self, x: &[T]) -> Result<(T, T)> {
        let (mu, var) = self.predict_raw(x)?;
        Ok((mu, var.max(T::zero()).sqrt()))
    }

    /// Posterior mean and unfloored variance.
    pub fn predict_raw(&self, x: &[T]) -> Result<(T, T)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let ks: Vec<T> = self.x.iter().map(|xi| self.params.eval_unchecked(x, xi)).collect();
        let mu = self.mean + crate::scalar::dot(&ks, &self.alpha);
        let v = solve_lower(&self.chol, &ks);
        let var = self.params.signal_variance() - crate::scalar::dot(&v, &v);
        Ok((mu, var))
    }

    /// Gram matrix of the training inputs including noise, without jitter.
    pub fn gram_matrix(&self) -> Matrix<T> {
        gram(&Geometry::new(&self.x), &self.params)
    }
}

/// Log marginal likelihood of `(x, y)` under fixed `params`, with the same
/// constant mean the fit uses. `None` if the Gram matrix is not factorable.
pub fn log_marginal_likelihood<T: Scalar>(x: &[Vec<T>], y: &[T], params: &KernelParams<T>) -> Option<T> {
    check_training_set(x, y).ok()?;
    let mean = sample_mean(y);
    let yc: Vec<T> = y.iter().map(|&v| v - mean).collect();
    lml_and_gradient(&Geometry::new(x), &yc, &params.to_log(), false).map(|(v, _)| v)
}

/// Log marginal likelihood and its gradient in log-parameter space.
pub fn log_marginal_likelihood_gradient<T: Scalar>(
    x: &[Vec<T>],
    y: &[T],
    params: &KernelParams<T>,
) -> Option<(T, Vec<T>)> {
    check_training_set(x, y).ok()?;
    let mean = sample_mean(y);
    let yc: Vec<T> = y.iter().map(|&v| v - mean).collect();
    lml_and_gradient(&Geometry::new(x), &yc, &params.to_log(), true)
}
