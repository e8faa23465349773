//! Gibbs sampler for GP regression with HODLR-accelerated steps.
//!
//! One iteration draws `f`, then `tau`, `sigma_f^2` and the length-scale
//! index `rho`. Every (iteration, step) pair has its own ChaCha20 stream, so
//! two backends fed the same seed consume identical random numbers.

use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hodlr::{AssembleOptions, HodlrFactorization, HodlrMatrix, RootKind, SymmetricFactor};
use crate::kernels::{Dataset, KernelParams, Point, PointSet};
use crate::par::{self, Exec};

pub const GENERATOR: &str = "ChaCha20";

const STEP_F: u64 = 0;
const STEP_TAU: u64 = 1;
const STEP_SIGMA: u64 = 2;
const STEP_RHO: u64 = 3;
const STEP_PREDICT: u64 = 4;

/// RNG for one step of one iteration.
pub fn step_rng(seed: u64, iter: usize, step: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((iter as u64) << 3) | step);
    rng
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gamma priors on `tau` and `1 / sigma_f^2`, and the length-scale grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub rho_grid: Vec<f64>,
}

impl PriorSpec {
    pub fn new(a1: f64, b1: f64, a2: f64, b2: f64, rho_grid: Vec<f64>) -> Result<Self> {
        let p = PriorSpec {
            a1,
            b1,
            a2,
            b2,
            rho_grid,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit hyperparameters and `r` log-spaced grid values over
    /// `[1 / (4 range^2), 100 / range^2]`.
    pub fn default_for_range(range: f64, r: usize) -> Result<Self> {
        if !(range > 0.0) || !range.is_finite() {
            return Err(Error::InvalidParameter(format!("input range must be > 0, got {range}")));
        }
        let r2 = range * range;
        PriorSpec::new(1.0, 1.0, 1.0, 1.0, log_spaced(0.25 / r2, 100.0 / r2, r)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a1", self.a1), ("b1", self.b1), ("a2", self.a2), ("b2", self.b2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.rho_grid.is_empty() {
            return Err(Error::Empty("rho grid"));
        }
        if self.rho_grid.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("rho grid values must be > 0".into()));
        }
        if self.rho_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("rho grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `r` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, r: usize) -> Result<Vec<f64>> {
    if r == 0 || !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::InvalidParameter(format!("bad grid spec [{lo}, {hi}] x {r}")));
    }
    if r == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..r)
        .map(|i| (a + (b - a) * i as f64 / (r - 1) as f64).exp())
        .collect())
}

/// Nugget used by the sampler's correlation grid. Far larger than the
/// kernel default: a HODLR approximation stays positive definite only while
/// its spectral-norm error (up to about `n * eps`) is below the nugget, and
/// grid entries at small `rho` are otherwise singular to working precision.
pub const DEFAULT_SAMPLER_NUGGET: f64 = 1e-6;

/// Sampler settings shared by the fast and dense backends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub eps: f64,
    pub leaf_size: usize,
    /// Nugget on the unit correlation matrix (relative to `sigma_f^2`).
    pub nugget: f64,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub record_f: bool,
    /// Grid correlation matrices are built at `eps * grid_headroom`.
    pub grid_headroom: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            eps: 1e-10,
            leaf_size: crate::hodlr::DEFAULT_LEAF_SIZE,
            nugget: DEFAULT_SAMPLER_NUGGET,
            iters: 1000,
            burn_in: 200,
            thin: 1,
            seed: 0,
            record_f: true,
            grid_headroom: 1e-3,
            exec: Exec::default(),
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.nugget >= 0.0) {
            return Err(Error::InvalidParameter("nugget must be >= 0".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be >= 1".into()));
        }
        if self.burn_in > self.iters {
            return Err(Error::InvalidParameter("burn_in exceeds iters".into()));
        }
        if !(self.grid_headroom > 0.0 && self.grid_headroom <= 1.0) {
            return Err(Error::InvalidParameter("grid_headroom must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iters - self.burn_in) / self.thin
    }
}

/// One grid point: unit correlation `C`, its symmetric-root factorization
/// and cached log-determinant.
#[derive(Debug)]
pub struct GridEntry {
    pub rho: f64,
    corr: HodlrMatrix,
    fact: HodlrFactorization,
}

impl GridEntry {
    pub fn build(points: &PointSet, rho: f64, nugget: f64, eps: f64, leaf_size: usize, exec: Exec) -> Result<Self> {
        let p = KernelParams::new(1.0, rho, nugget)?;
        let corr = HodlrMatrix::assemble(points, &p, AssembleOptions::new(eps, leaf_size).with_exec(exec), None)?;
        let sym = SymmetricFactor::with_exec(&corr, RootKind::Symmetric, exec)?;
        let fact = HodlrFactorization::from_factor(sym)?;
        Ok(GridEntry { rho, corr, fact })
    }

    pub fn corr(&self) -> &HodlrMatrix {
        &self.corr
    }

    pub fn factorization(&self) -> &HodlrFactorization {
        &self.fact
    }

    pub fn symmetric_factor(&self) -> &SymmetricFactor {
        self.fact.factor()
    }

    pub fn logdet(&self) -> f64 {
        self.fact.logdet()
    }

    /// Tolerance the correlation matrix was built at.
    pub fn eps(&self) -> f64 {
        self.corr.eps()
    }
}

/// Per-grid-point correlation factorizations, computed once up front.
#[derive(Debug)]
pub struct GridPrecomp {
    points: PointSet,
    entries: Vec<GridEntry>,
    nugget: f64,
    leaf_size: usize,
    exec: Exec,
}

impl GridPrecomp {
    pub fn build(points: &PointSet, rhos: &[f64], nugget: f64, eps: f64, leaf_size: usize, exec: Exec) -> Result<Self> {
        if rhos.is_empty() {
            return Err(Error::Empty("rho grid"));
        }
        let entries = par::try_map_indexed(exec, rhos.len(), |l| {
            GridEntry::build(points, rhos[l], nugget, eps, leaf_size, exec)
        })?;
        Ok(GridPrecomp {
            points: points.clone(),
            entries,
            nugget,
            leaf_size,
            exec,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, l: usize) -> &GridEntry {
        &self.entries[l]
    }

    pub fn entries(&self) -> &[GridEntry] {
        &self.entries
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.rho).collect()
    }

    pub fn logdets(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.logdet()).collect()
    }

    /// `f^T C_l^{-1} f` for every grid point.
    pub fn quad_forms(&self, f: &[f64]) -> Result<Vec<f64>> {
        par::try_map_indexed(self.exec, self.entries.len(), |l| self.entries[l].fact.quad_form(f))
    }
}

/// Current Gibbs state in scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub f: Vec<f64>,
    pub tau: f64,
    pub sigma_f_sq: f64,
    pub rho_idx: usize,
}

/// Required correlation tolerance for a function draw.
///
/// With noise precisions `d` (all `tau` in the homoskedastic case) the
/// system matrix is `sigma_f^2 C + D^{-1}`; scaling by `max(1, max d)` keeps
/// the homoskedastic rule `eps* = tau eps if tau < 1 else eps` for
/// `M = tau K + I`.
pub fn required_corr_tolerance(eps: f64, sigma_f_sq: f64, max_precision: f64) -> f64 {
    eps / (sigma_f_sq * max_precision.max(1.0))
}

/// A function draw with the system matrix factorized once.
pub struct PreparedDraw<'a> {
    corr: &'a HodlrMatrix,
    sym: &'a SymmetricFactor,
    sigma_f_sq: f64,
    // None: homoskedastic with precision tau
    precisions: Option<Vec<f64>>,
    tau: f64,
    system: HodlrFactorization,
    mean_part: Vec<f64>,
}

impl<'a> PreparedDraw<'a> {
    /// Homoskedastic draw: `M = tau sigma_f^2 C + I`.
    pub fn homoskedastic(entry: &'a GridEntry, y: &[f64], tau: f64, sigma_f_sq: f64, exec: Exec) -> Result<Self> {
        check_positive("tau", tau)?;
        check_positive("sigma_f_sq", sigma_f_sq)?;
        let corr = entry.corr();
        if y.len() != corr.n() {
            return Err(Error::DimensionMismatch {
                expected: corr.n(),
                got: y.len(),
            });
        }
        let m = corr.scale_shift(tau * sigma_f_sq, 1.0);
        let system = HodlrFactorization::with_exec(&m, exec)?;
        let ty: Vec<f64> = y.iter().map(|v| tau * v).collect();
        let r = system.solve(&ty)?;
        let kr = corr.matvec(&r)?;
        Ok(PreparedDraw {
            corr,
            sym: entry.symmetric_factor(),
            sigma_f_sq,
            precisions: None,
            tau,
            system,
            mean_part: kr.iter().map(|v| sigma_f_sq * v).collect(),
        })
    }

    /// Heteroskedastic draw: `P = sigma_f^2 C + D^{-1}`.
    pub fn heteroskedastic(entry: &'a GridEntry, y: &[f64], d: &[f64], sigma_f_sq: f64, exec: Exec) -> Result<Self> {
        check_positive("sigma_f_sq", sigma_f_sq)?;
        let corr = entry.corr();
        let n = corr.n();
        for (len, name) in [(y.len(), "y"), (d.len(), "precisions")] {
            if len != n {
                let _ = name;
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise precisions must be finite and > 0".into(),
            ));
        }
        let inv_d: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        let p = corr.scale_add_diagonal(sigma_f_sq, &inv_d)?;
        let system = HodlrFactorization::with_exec(&p, exec)?;
        let s = system.solve(y)?;
        let ks = corr.matvec(&s)?;
        Ok(PreparedDraw {
            corr,
            sym: entry.symmetric_factor(),
            sigma_f_sq,
            precisions: Some(d.to_vec()),
            tau: f64::NAN,
            system,
            mean_part: ks.iter().map(|v| sigma_f_sq * v).collect(),
        })
    }

    /// Posterior mean of the draw.
    pub fn mean(&self) -> &[f64] {
        &self.mean_part
    }

    /// Draw given standard-normal vectors `a` and `b`.
    pub fn draw(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let n = self.corr.n();
        if a.len() != n || b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.len().min(b.len()),
            });
        }
        let s2 = self.sigma_f_sq;
        let wb = self.sym.apply(b)?;
        match &self.precisions {
            None => {
                // Z = sqrt(tau) K a + W b, w = M^{-1} Z
                let ka = self.corr.matvec(a)?;
                let st = self.tau.sqrt();
                let z: Vec<f64> = ka.iter().zip(&wb).map(|(k, w)| st * s2 * k + s2.sqrt() * w).collect();
                let w = self.system.solve(&z)?;
                Ok(w.iter().zip(&self.mean_part).map(|(w, m)| w + m).collect())
            }
            Some(d) => {
                // K a' + W b with a' ~ N(0, D), then D^{-1} P^{-1}
                let scaled: Vec<f64> = a.iter().zip(d).map(|(v, di)| v * di.sqrt()).collect();
                let ka = self.corr.matvec(&scaled)?;
                let z: Vec<f64> = ka.iter().zip(&wb).map(|(k, w)| s2 * k + s2.sqrt() * w).collect();
                let w = self.system.solve(&z)?;
                Ok(w.iter()
                    .zip(d)
                    .zip(&self.mean_part)
                    .map(|((w, di), m)| w / di + m)
                    .collect())
            }
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{name} must be finite and > 0, got {v}"
        )));
    }
    Ok(())
}

fn check_tolerance(entry: &GridEntry, required: f64) -> Result<()> {
    if entry.eps() > required * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "grid entry built at tolerance {:e}, the draw needs {:e}",
            entry.eps(),
            required
        )));
    }
    Ok(())
}

/// One homoskedastic draw of `f | y, tau, sigma_f^2, rho`.
///
/// The entry's correlation matrix must have been built at
/// [`required_corr_tolerance`] for these parameters or finer.
pub fn sample_f<R: Rng + ?Sized>(
    y: &[f64],
    sigma_f_sq: f64,
    tau: f64,
    entry: &GridEntry,
    eps: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_tolerance(entry, required_corr_tolerance(eps, sigma_f_sq, tau))?;
    let prep = PreparedDraw::homoskedastic(entry, y, tau, sigma_f_sq, Exec::default())?;
    let n = y.len();
    let a = standard_normals(rng, n);
    let b = standard_normals(rng, n);
    prep.draw(&a, &b)
}

/// One heteroskedastic draw with noise precisions `d`.
pub fn sample_f_hetero<R: Rng + ?Sized>(
    y: &[f64],
    sigma_f_sq: f64,
    d: &[f64],
    entry: &GridEntry,
    eps: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    check_tolerance(entry, required_corr_tolerance(eps, sigma_f_sq, dmax))?;
    let prep = PreparedDraw::heteroskedastic(entry, y, d, sigma_f_sq, Exec::default())?;
    let n = y.len();
    let a = standard_normals(rng, n);
    let b = standard_normals(rng, n);
    prep.draw(&a, &b)
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(format!("gamma({shape}, {rate}): {e}")))?;
    let v = g.sample(rng);
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Numerical(format!(
            "gamma draw {v} with shape {shape}, rate {rate}"
        )));
    }
    Ok(v)
}

/// `tau ~ Ga((a1 + n) / 2, (b1 + ss) / 2)` for a residual sum of squares.
pub fn sample_tau_from_ss<R: Rng + ?Sized>(ss: f64, n: usize, a1: f64, b1: f64, rng: &mut R) -> Result<f64> {
    gamma_draw((a1 + n as f64) / 2.0, (b1 + ss) / 2.0, rng)
}

/// `tau | y, f`.
pub fn sample_tau<R: Rng + ?Sized>(y: &[f64], f: &[f64], a1: f64, b1: f64, rng: &mut R) -> Result<f64> {
    if y.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: f.len(),
        });
    }
    let ss = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    sample_tau_from_ss(ss, y.len(), a1, b1, rng)
}

/// `sigma_f^2` from `1 / sigma_f^2 ~ Ga((a2 + n) / 2, (b2 + q) / 2)` where
/// `q = f^T C^{-1} f`.
pub fn sample_sigma_f_from_quad<R: Rng + ?Sized>(q: f64, n: usize, a2: f64, b2: f64, rng: &mut R) -> Result<f64> {
    Ok(1.0 / gamma_draw((a2 + n as f64) / 2.0, (b2 + q) / 2.0, rng)?)
}

pub fn sample_sigma_f<R: Rng + ?Sized>(f: &[f64], entry: &GridEntry, a2: f64, b2: f64, rng: &mut R) -> Result<f64> {
    let q = entry.factorization().quad_form(f)?;
    sample_sigma_f_from_quad(q, f.len(), a2, b2, rng)
}

/// Unnormalised log-probabilities of the length-scale grid.
pub fn rho_log_weights(quads: &[f64], logdets: &[f64], n: usize, sigma_f_sq: f64) -> Vec<f64> {
    let nl = n as f64 * sigma_f_sq.ln();
    quads
        .iter()
        .zip(logdets)
        .map(|(q, ld)| -0.5 * (ld + nl) - q / (2.0 * sigma_f_sq))
        .collect()
}

/// Normalised probabilities via log-sum-exp.
pub fn normalize_log_weights(logw: &[f64]) -> Result<Vec<f64>> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("all length-scale weights are zero or invalid".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical("length-scale weights do not normalise".into()));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Categorical draw by inversion of a single uniform.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draw the length-scale index given `f` and `sigma_f^2`.
pub fn sample_rho<R: Rng + ?Sized>(f: &[f64], sigma_f_sq: f64, grid: &GridPrecomp, rng: &mut R) -> Result<usize> {
    let q = grid.quad_forms(f)?;
    let probs = normalize_log_weights(&rho_log_weights(&q, &grid.logdets(), f.len(), sigma_f_sq))?;
    Ok(categorical(&probs, rng.random::<f64>()))
}

/// Cross-correlations `c(x_i, x*_j)` (unit variance, no nugget).
pub fn cross_correlation(points: &PointSet, x_star: &PointSet, rho: f64) -> Result<DMatrix<f64>> {
    if points.dim() != x_star.dim() {
        return Err(Error::DimensionMismatch {
            expected: points.dim(),
            got: x_star.dim(),
        });
    }
    let p = KernelParams::new(1.0, rho, 0.0)?;
    Ok(DMatrix::from_fn(points.len(), x_star.len(), |i, j| {
        p.eval_slices(points.point(i), x_star.point(j))
    }))
}

/// Predictive mean and variance of `f(x*)` at grid point `l`.
pub fn predict(x_star: &Point, f: &[f64], grid: &GridPrecomp, l: usize, sigma_f_sq: f64) -> Result<(f64, f64)> {
    let xs = PointSet::from_points(std::slice::from_ref(x_star))?;
    let c = cross_correlation(grid.points(), &xs, grid.entry(l).rho)?;
    let col: Vec<f64> = c.column(0).iter().cloned().collect();
    let sol = grid.entry(l).factorization().solve(&col)?;
    if f.len() != sol.len() {
        return Err(Error::DimensionMismatch {
            expected: sol.len(),
            got: f.len(),
        });
    }
    let mu = sol.iter().zip(f).map(|(a, b)| a * b).sum();
    let quad: f64 = sol.iter().zip(&col).map(|(a, b)| a * b).sum();
    Ok((mu, (sigma_f_sq * (1.0 - quad)).clamp(0.0, sigma_f_sq)))
}

/// Operations a Gibbs chain needs from a covariance engine.
pub trait GibbsBackend: Sync {
    fn name(&self) -> &'static str;
    fn n(&self) -> usize;
    fn rho_grid(&self) -> Vec<f64>;
    fn logdets(&self) -> Vec<f64>;
    /// Function draw from standard-normal vectors `a`, `b`. With
    /// `multipliers`, noise precisions are `tau * multipliers`.
    fn draw_f(
        &self,
        l: usize,
        tau: f64,
        sigma_f_sq: f64,
        y: &[f64],
        multipliers: Option<&[f64]>,
        a: &[f64],
        b: &[f64],
    ) -> Result<Vec<f64>>;
    fn quad_forms(&self, f: &[f64]) -> Result<Vec<f64>>;
    /// Predictive means and variances at the backend's prediction inputs.
    fn predict(&self, l: usize, f: &[f64], sigma_f_sq: f64) -> Result<(Vec<f64>, Vec<f64>)>;
    fn n_predict(&self) -> usize;
    /// Correlation matrices built after setup.
    fn corr_rebuilds(&self) -> usize {
        0
    }
    /// System-matrix factorizations performed so far.
    fn system_factorizations(&self) -> usize;
}

/// Cross-covariance to the prediction inputs and predictive variances.
type PredCache = OnceLock<std::result::Result<Arc<(DMatrix<f64>, Vec<f64>)>, String>>;

/// HODLR backend over a precomputed grid.
pub struct HodlrBackend<'g> {
    grid: &'g GridPrecomp,
    eps: f64,
    headroom: f64,
    x_star: Option<PointSet>,
    pred_cache: Vec<PredCache>,
    upgraded: Vec<Mutex<Option<Arc<GridEntry>>>>,
    rebuilds: std::sync::atomic::AtomicUsize,
    factorizations: std::sync::atomic::AtomicUsize,
}

impl<'g> HodlrBackend<'g> {
    pub fn new(grid: &'g GridPrecomp, eps: f64, headroom: f64, x_star: Option<PointSet>) -> Self {
        HodlrBackend {
            grid,
            eps,
            headroom,
            x_star,
            pred_cache: (0..grid.len()).map(|_| OnceLock::new()).collect(),
            upgraded: (0..grid.len()).map(|_| Mutex::new(None)).collect(),
            rebuilds: Default::default(),
            factorizations: Default::default(),
        }
    }

    /// Grid entry `l`, rebuilt at a finer tolerance when `required` demands it.
    fn entry_for(&self, l: usize, required: f64) -> Result<EntryRef<'g>> {
        let base = self.grid.entry(l);
        if base.eps() <= required * (1.0 + 1e-12) {
            return Ok(EntryRef::Base(base));
        }
        let mut slot = self.upgraded[l].lock().unwrap();
        if let Some(e) = slot.as_ref() {
            if e.eps() <= required * (1.0 + 1e-12) {
                return Ok(EntryRef::Owned(e.clone()));
            }
        }
        log::info!(
            "rebuilding correlation for rho = {} at tolerance {:e}",
            base.rho,
            required * self.headroom
        );
        let e = Arc::new(GridEntry::build(
            self.grid.points(),
            base.rho,
            self.grid.nugget,
            required * self.headroom,
            self.grid.leaf_size,
            self.grid.exec,
        )?);
        self.rebuilds.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        *slot = Some(e.clone());
        Ok(EntryRef::Owned(e))
    }

    fn prediction_solves(&self, l: usize) -> Result<Arc<(DMatrix<f64>, Vec<f64>)>> {
        let xs = self.x_star.as_ref().ok_or(Error::Empty("prediction inputs"))?;
        let cell = self.pred_cache[l].get_or_init(|| {
            let run = || -> Result<Arc<(DMatrix<f64>, Vec<f64>)>> {
                let c = cross_correlation(self.grid.points(), xs, self.grid.entry(l).rho)?;
                let sol = self.grid.entry(l).factorization().solve_mat(&c)?;
                let quad = (0..c.ncols()).map(|j| sol.column(j).dot(&c.column(j))).collect();
                Ok(Arc::new((sol, quad)))
            };
            run().map_err(|e| e.to_string())
        });
        cell.clone().map_err(Error::Numerical)
    }
}

enum EntryRef<'g> {
    Base(&'g GridEntry),
    Owned(Arc<GridEntry>),
}

impl EntryRef<'_> {
    fn get(&self) -> &GridEntry {
        match self {
            EntryRef::Base(e) => e,
            EntryRef::Owned(e) => e,
        }
    }
}

impl GibbsBackend for HodlrBackend<'_> {
    fn name(&self) -> &'static str {
        "hodlr"
    }

    fn n(&self) -> usize {
        self.grid.points().len()
    }

    fn rho_grid(&self) -> Vec<f64> {
        self.grid.rhos()
    }

    fn logdets(&self) -> Vec<f64> {
        self.grid.logdets()
    }

    fn draw_f(
        &self,
        l: usize,
        tau: f64,
        sigma_f_sq: f64,
        y: &[f64],
        multipliers: Option<&[f64]>,
        a: &[f64],
        b: &[f64],
    ) -> Result<Vec<f64>> {
        let exec = self.grid.exec;
        self.factorizations.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        match multipliers {
            None => {
                let entry = self.entry_for(l, required_corr_tolerance(self.eps, sigma_f_sq, tau))?;
                PreparedDraw::homoskedastic(entry.get(), y, tau, sigma_f_sq, exec)?.draw(a, b)
            }
            Some(m) => {
                let d: Vec<f64> = m.iter().map(|v| tau * v).collect();
                let dmax = d.iter().cloned().fold(0.0, f64::max);
                let entry = self.entry_for(l, required_corr_tolerance(self.eps, sigma_f_sq, dmax))?;
                PreparedDraw::heteroskedastic(entry.get(), y, &d, sigma_f_sq, exec)?.draw(a, b)
            }
        }
    }

    fn quad_forms(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.grid.quad_forms(f)
    }

    fn predict(&self, l: usize, f: &[f64], sigma_f_sq: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let cached = self.prediction_solves(l)?;
        let (sol, quad) = (&cached.0, &cached.1);
        let fv = nalgebra::DVector::from_column_slice(f);
        let mu: Vec<f64> = sol.tr_mul(&fv).iter().cloned().collect();
        let var = quad
            .iter()
            .map(|q| (sigma_f_sq * (1.0 - q)).clamp(0.0, sigma_f_sq))
            .collect();
        Ok((mu, var))
    }

    fn n_predict(&self) -> usize {
        self.x_star.as_ref().map_or(0, |x| x.len())
    }

    fn corr_rebuilds(&self) -> usize {
        self.rebuilds.load(std::sync::atomic::Ordering::Relaxed)
    }

    fn system_factorizations(&self) -> usize {
        self.factorizations.load(std::sync::atomic::Ordering::Relaxed)
    }
}

/// Responses and noise structure in scaled units.
#[derive(Debug, Clone)]
pub struct ChainData {
    pub y: Vec<f64>,
    pub multipliers: Option<Vec<f64>>,
    pub counts: Vec<f64>,
    pub n_obs: usize,
    pub within_ss: f64,
    pub y_scale: f64,
}

impl ChainData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        ChainData {
            y: ds.y_avg.clone(),
            multipliers: ds.has_duplicates().then(|| ds.precision_multipliers()),
            counts: ds.multiplicities.iter().map(|&m| m as f64).collect(),
            n_obs: ds.n_obs(),
            within_ss: ds.within_ss,
            y_scale: ds.y_scale,
        }
    }

    /// Residual sum of squares over all original observations.
    fn residual_ss(&self, f: &[f64]) -> f64 {
        self.within_ss
            + self
                .y
                .iter()
                .zip(f)
                .zip(&self.counts)
                .map(|((y, f), c)| c * (y - f) * (y - f))
                .sum::<f64>()
    }
}

/// One retained draw in original response units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iter: usize,
    pub tau: f64,
    pub sigma_f_sq: f64,
    pub rho: f64,
    pub rho_idx: usize,
    pub f: Option<Vec<f64>>,
    pub f_star: Option<Vec<f64>>,
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub setup: f64,
    pub sampling: f64,
    pub f_step: f64,
    pub tau_step: f64,
    pub sigma_step: f64,
    pub rho_step: f64,
    pub predict: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GibbsChain {
    pub draws: Vec<Draw>,
    pub seed: u64,
    pub generator: String,
    pub backend: String,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub eps: f64,
    pub leaf_size: usize,
    pub nugget: f64,
    pub priors: PriorSpec,
    pub y_scale: f64,
    pub n_unique: usize,
    pub timings: Timings,
    pub corr_rebuilds: usize,
    pub system_factorizations: usize,
}

impl GibbsChain {
    pub fn mean_tau(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.tau))
    }

    pub fn mean_sigma_f_sq(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.sigma_f_sq))
    }

    pub fn mean_rho(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.rho))
    }

    /// Pointwise posterior mean and 95% interval of the prediction draws.
    pub fn f_star_summary(&self) -> Option<Vec<PointSummary>> {
        summarize(self.draws.iter().map(|d| d.f_star.as_deref()))
    }

    /// Pointwise summary of the training-input function draws.
    pub fn f_summary(&self) -> Option<Vec<PointSummary>> {
        summarize(self.draws.iter().map(|d| d.f.as_deref()))
    }

    /// CSV: `iter,tau,sigma_f_sq,rho` then `f_1..f_U` when recorded.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let nf = self.draws.first().and_then(|d| d.f.as_ref()).map_or(0, |f| f.len());
        let mut header = vec!["iter".to_string(), "tau".into(), "sigma_f_sq".into(), "rho".into()];
        header.extend((1..=nf).map(|i| format!("f_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for d in &self.draws {
            let mut rec = vec![
                d.iter.to_string(),
                d.tau.to_string(),
                d.sigma_f_sq.to_string(),
                d.rho.to_string(),
            ];
            if let Some(f) = &d.f {
                rec.extend(f.iter().map(|v| v.to_string()));
            }
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Metadata sidecar: everything except the draws.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "generator": self.generator,
            "backend": self.backend,
            "iters": self.iters,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "retained": self.draws.len(),
            "eps": self.eps,
            "leaf_size": self.leaf_size,
            "nugget": self.nugget,
            "priors": self.priors,
            "y_scale": self.y_scale,
            "n_unique": self.n_unique,
            "timings": self.timings,
            "corr_rebuilds": self.corr_rebuilds,
            "system_factorizations": self.system_factorizations,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub mean: f64,
    pub lower95: f64,
    pub upper95: f64,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize<'a>(draws: impl Iterator<Item = Option<&'a [f64]>>) -> Option<Vec<PointSummary>> {
    let rows: Vec<&[f64]> = draws.collect::<Option<Vec<_>>>()?;
    let m = rows.first()?.len();
    Some(
        (0..m)
            .map(|j| {
                let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                col.sort_by(f64::total_cmp);
                PointSummary {
                    mean: col.iter().sum::<f64>() / col.len() as f64,
                    lower95: quantile(&col, 0.025),
                    upper95: quantile(&col, 0.975),
                }
            })
            .collect(),
    )
}

/// Run a chain on any backend. Both backends consume random numbers in the
/// same order, so equal seeds give lockstep chains.
pub fn drive<B: GibbsBackend>(
    backend: &B,
    data: &ChainData,
    priors: &PriorSpec,
    cfg: &GibbsConfig,
    setup_seconds: f64,
) -> Result<GibbsChain> {
    cfg.validate()?;
    priors.validate()?;
    let n = backend.n();
    if data.y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: data.y.len(),
        });
    }
    let grid = backend.rho_grid();
    let logdets = backend.logdets();
    let s = data.y_scale;
    let mut state = HyperState {
        f: vec![0.0; n],
        tau: 1.0,
        sigma_f_sq: 1.0,
        rho_idx: grid.len() / 2,
    };
    let mut timings = Timings {
        setup: setup_seconds,
        ..Default::default()
    };
    let mut draws = Vec::with_capacity(cfg.retained());
    let start = Instant::now();

    for t in 0..cfg.iters {
        let step = |e: Error| e.at_iteration(t);

        let t0 = Instant::now();
        let mut rng = step_rng(cfg.seed, t, STEP_F);
        let a = standard_normals(&mut rng, n);
        let b = standard_normals(&mut rng, n);
        state.f = backend
            .draw_f(
                state.rho_idx,
                state.tau,
                state.sigma_f_sq,
                &data.y,
                data.multipliers.as_deref(),
                &a,
                &b,
            )
            .map_err(step)?;
        if state.f.iter().any(|v| !v.is_finite()) {
            return Err(step(Error::NonFinite("function draw")));
        }
        timings.f_step += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut rng = step_rng(cfg.seed, t, STEP_TAU);
        state.tau =
            sample_tau_from_ss(data.residual_ss(&state.f), data.n_obs, priors.a1, priors.b1, &mut rng).map_err(step)?;
        timings.tau_step += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let quads = backend.quad_forms(&state.f).map_err(step)?;
        let mut rng = step_rng(cfg.seed, t, STEP_SIGMA);
        state.sigma_f_sq =
            sample_sigma_f_from_quad(quads[state.rho_idx], n, priors.a2, priors.b2, &mut rng).map_err(step)?;
        timings.sigma_step += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut rng = step_rng(cfg.seed, t, STEP_RHO);
        let probs = normalize_log_weights(&rho_log_weights(&quads, &logdets, n, state.sigma_f_sq)).map_err(step)?;
        state.rho_idx = categorical(&probs, rng.random::<f64>());
        timings.rho_step += t0.elapsed().as_secs_f64();

        if t >= cfg.burn_in && (t - cfg.burn_in + 1).is_multiple_of(cfg.thin) {
            let f_star = if backend.n_predict() > 0 {
                let t0 = Instant::now();
                let (mu, var) = backend
                    .predict(state.rho_idx, &state.f, state.sigma_f_sq)
                    .map_err(step)?;
                let mut rng = step_rng(cfg.seed, t, STEP_PREDICT);
                let z = standard_normals(&mut rng, mu.len());
                let fs = mu
                    .iter()
                    .zip(&var)
                    .zip(&z)
                    .map(|((m, v), z)| (m + v.sqrt() * z) * s)
                    .collect();
                timings.predict += t0.elapsed().as_secs_f64();
                Some(fs)
            } else {
                None
            };
            draws.push(Draw {
                iter: t,
                tau: state.tau / (s * s),
                sigma_f_sq: state.sigma_f_sq * s * s,
                rho: grid[state.rho_idx],
                rho_idx: state.rho_idx,
                f: cfg.record_f.then(|| state.f.iter().map(|v| v * s).collect()),
                f_star,
            });
        }
    }
    timings.sampling = start.elapsed().as_secs_f64();

    Ok(GibbsChain {
        draws,
        seed: cfg.seed,
        generator: GENERATOR.to_string(),
        backend: backend.name().to_string(),
        iters: cfg.iters,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        eps: cfg.eps,
        leaf_size: cfg.leaf_size,
        nugget: cfg.nugget,
        priors: priors.clone(),
        y_scale: s,
        n_unique: n,
        timings,
        corr_rebuilds: backend.corr_rebuilds(),
        system_factorizations: backend.system_factorizations(),
    })
}

/// Build the grid at `eps * grid_headroom` and run the HODLR sampler.
pub fn run_gibbs(ds: &Dataset, priors: &PriorSpec, cfg: &GibbsConfig, x_star: Option<&PointSet>) -> Result<GibbsChain> {
    cfg.validate()?;
    priors.validate()?;
    let t0 = Instant::now();
    let grid = GridPrecomp::build(
        &ds.unique_points,
        &priors.rho_grid,
        cfg.nugget,
        cfg.eps * cfg.grid_headroom,
        cfg.leaf_size,
        cfg.exec,
    )?;
    let setup = t0.elapsed().as_secs_f64();
    run_gibbs_with_grid(ds, &grid, priors, cfg, x_star, setup)
}

/// Run the HODLR sampler on an existing grid.
pub fn run_gibbs_with_grid(
    ds: &Dataset,
    grid: &GridPrecomp,
    priors: &PriorSpec,
    cfg: &GibbsConfig,
    x_star: Option<&PointSet>,
    setup_seconds: f64,
) -> Result<GibbsChain> {
    if grid.rhos() != priors.rho_grid {
        return Err(Error::InvalidParameter(
            "grid does not match the prior's rho grid".into(),
        ));
    }
    let backend = HodlrBackend::new(grid, cfg.eps, cfg.grid_headroom, x_star.cloned());
    drive(&backend, &ChainData::from_dataset(ds), priors, cfg, setup_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_dense_covariance, collapse_duplicates};

    fn uniform_points(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        xs.sort_by(f64::total_cmp);
        PointSet::from_scalars(&xs).unwrap()
    }

    fn grid(points: &PointSet, rhos: &[f64], nugget: f64) -> GridPrecomp {
        GridPrecomp::build(points, rhos, nugget, 1e-13, 32, Exec::default()).unwrap()
    }

    #[test]
    fn log_spaced_endpoints() {
        let g = log_spaced(0.1, 10.0, 3).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[1] - 1.0).abs() < 1e-12 && (g[2] - 10.0).abs() < 1e-12);
        assert_eq!(log_spaced(2.0, 5.0, 1).unwrap(), vec![2.0]);
        let p = PriorSpec::default_for_range(2.0, 100).unwrap();
        assert_eq!(p.rho_grid.len(), 100);
        assert!((p.rho_grid[0] - 1.0 / 16.0).abs() < 1e-15);
        assert!((p.rho_grid[99] - 25.0).abs() < 1e-10);
        assert!(PriorSpec::new(1.0, 1.0, 1.0, 1.0, vec![2.0, 1.0]).is_err());
        assert!(PriorSpec::new(0.0, 1.0, 1.0, 1.0, vec![1.0]).is_err());
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: f64 = step_rng(7, 3, STEP_F).random();
        let b: f64 = step_rng(7, 3, STEP_F).random();
        let c: f64 = step_rng(7, 3, STEP_TAU).random();
        let d: f64 = step_rng(7, 4, STEP_F).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn tau_zero_residual_and_prior() {
        // f = y: Ga((a1 + n)/2, b1/2); n = 0: Ga(a1/2, b1/2)
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let y = vec![1.0; 10];
        let draws: Vec<f64> = (0..200_000)
            .map(|_| sample_tau(&y, &y, 2.0, 3.0, &mut rng).unwrap())
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let (shape, rate) = (6.0, 1.5);
        let se = (shape / (rate * rate) / draws.len() as f64).sqrt();
        assert!((m - shape / rate).abs() < 4.0 * se, "{m}");
        let draws: Vec<f64> = (0..200_000)
            .map(|_| sample_tau(&[], &[], 2.0, 3.0, &mut rng).unwrap())
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let (shape, rate) = (1.0, 1.5);
        let se = (shape / (rate * rate) / draws.len() as f64).sqrt();
        assert!((m - shape / rate).abs() < 4.0 * se, "{m}");
    }

    #[test]
    fn tau_moments_fixed_residual() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let f: Vec<f64> = (0..20).map(|i| (i as f64).sin() * 0.8).collect();
        let ss: f64 = y.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
        let (shape, rate) = ((1.0 + 20.0) / 2.0, (1.0 + ss) / 2.0);
        let n = 1_000_000;
        let m = (0..n)
            .map(|_| sample_tau(&y, &f, 1.0, 1.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let se = (shape / (rate * rate) / n as f64).sqrt();
        assert!((m - shape / rate).abs() < 3.0 * se);
    }

    #[test]
    fn sigma_quad_form_matches_dense() {
        let pts = uniform_points(50, 3);
        let g = grid(&pts, &[3.0], 1e-6);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let f = standard_normals(&mut rng, 50);
        let q = g.quad_forms(&f).unwrap()[0];
        let c = build_dense_covariance(&pts, &KernelParams::new(1.0, 3.0, 1e-6).unwrap(), None).unwrap();
        let fv = nalgebra::DVector::from_column_slice(&f);
        let qd = fv.dot(&c.cholesky().unwrap().solve(&fv));
        assert!((q - qd).abs() <= 1e-6 * qd.abs(), "{q} {qd}");

        // f = 0: 1/sigma^2 ~ Ga((a2 + n)/2, b2/2)
        let n = 200_000;
        let zero = vec![0.0; 50];
        let m = (0..n)
            .map(|_| 1.0 / sample_sigma_f(&zero, g.entry(0), 1.0, 2.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let (shape, rate) = (25.5, 1.0);
        assert!((m - shape / rate).abs() < 3.0 * (shape / (rate * rate) / n as f64).sqrt());
    }

    #[test]
    fn rho_edge_cases() {
        assert_eq!(categorical(&[1.0], 0.999), 0);
        let p = normalize_log_weights(&[-3.0, -3.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let shifted = normalize_log_weights(&[1e3 - 3.0, 1e3 - 1.0]).unwrap();
        let base = normalize_log_weights(&[-3.0, -1.0]).unwrap();
        for (a, b) in shifted.iter().zip(&base) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(normalize_log_weights(&[f64::NEG_INFINITY, f64::NAN]).is_err());

        let pts = uniform_points(60, 5);
        let g = grid(&pts, &[2.0, 2.0], 1e-6);
        let f = vec![0.3; 60];
        let q = g.quad_forms(&f).unwrap();
        let p = normalize_log_weights(&rho_log_weights(&q, &g.logdets(), 60, 1.3)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rho_probabilities_match_dense() {
        let pts = uniform_points(100, 6);
        let rhos = log_spaced(0.5, 50.0, 10).unwrap();
        let nugget = 1e-6;
        let g = grid(&pts, &rhos, nugget);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let f: Vec<f64> = standard_normals(&mut rng, 100).iter().map(|v| v * 0.5).collect();
        let s2 = 0.7;
        let fast = normalize_log_weights(&rho_log_weights(&g.quad_forms(&f).unwrap(), &g.logdets(), 100, s2)).unwrap();
        let fv = nalgebra::DVector::from_column_slice(&f);
        let mut q = Vec::new();
        let mut ld = Vec::new();
        for &rho in &rhos {
            let c = build_dense_covariance(&pts, &KernelParams::new(1.0, rho, nugget).unwrap(), None).unwrap();
            let e = c.symmetric_eigen();
            ld.push(e.eigenvalues.iter().map(|l| l.ln()).sum::<f64>());
            let t = e.eigenvectors.tr_mul(&fv);
            q.push(t.iter().zip(e.eigenvalues.iter()).map(|(t, l)| t * t / l).sum::<f64>());
        }
        let dense = normalize_log_weights(&rho_log_weights(&q, &ld, 100, s2)).unwrap();
        for (a, b) in fast.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn zero_data_gives_zero_mean() {
        let pts = uniform_points(80, 9);
        let g = grid(&pts, &[4.0], 1e-8);
        let prep = PreparedDraw::homoskedastic(g.entry(0), &vec![0.0; 80], 2.0, 1.0, Exec::default()).unwrap();
        assert!(prep.mean().iter().all(|&m| m == 0.0));
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let n = 10_000;
        let mut sum = vec![0.0; 80];
        let mut sq = vec![0.0; 80];
        for _ in 0..n {
            let a = standard_normals(&mut rng, 80);
            let b = standard_normals(&mut rng, 80);
            let f = prep.draw(&a, &b).unwrap();
            for i in 0..80 {
                sum[i] += f[i];
                sq[i] += f[i] * f[i];
            }
        }
        for i in 0..80 {
            let m = sum[i] / n as f64;
            let se = ((sq[i] / n as f64 - m * m) / n as f64).sqrt();
            assert!(m.abs() <= 3.5 * se + 1e-12, "i={i} m={m} se={se}");
        }
        let d = vec![2.0; 80];
        let het = PreparedDraw::heteroskedastic(g.entry(0), &vec![0.0; 80], &d, 1.0, Exec::default()).unwrap();
        assert!(het.mean().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn interpolation_limit() {
        let pts = uniform_points(200, 11);
        let g = GridPrecomp::build(&pts, &[4.0], 1e-10, 1e-16, 64, Exec::default()).unwrap();
        let y: Vec<f64> = (0..200).map(|i| (3.0 * pts.point(i)[0]).sin()).collect();
        let prep = PreparedDraw::homoskedastic(g.entry(0), &y, 1e6, 1.0, Exec::default()).unwrap();
        let err = prep
            .mean()
            .iter()
            .zip(&y)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-2, "{err}");
    }

    #[test]
    fn tolerance_guard() {
        let pts = uniform_points(100, 12);
        let g = GridPrecomp::build(&pts, &[4.0], 1e-4, 1e-8, 32, Exec::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let y = vec![0.1; 100];
        assert!(sample_f(&y, 1.0, 50.0, g.entry(0), 1e-8, &mut rng).is_err());
        assert!(sample_f(&y, 1.0, 0.5, g.entry(0), 1e-8, &mut rng).is_ok());
        assert!(sample_f_hetero(&y, 1.0, &vec![0.0; 100], g.entry(0), 1e-8, &mut rng).is_err());
    }

    #[test]
    fn predict_training_point_and_far_away() {
        let pts = uniform_points(120, 13);
        let nugget = 1e-4;
        let g = grid(&pts, &[5.0], nugget);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let gvec = standard_normals(&mut rng, 120);
        // f = C g makes C^{-1} f exact
        let f = g.entry(0).corr().matvec(&gvec).unwrap();
        let x = pts.to_point(40);
        let (mu, var) = predict(&x, &f, &g, 0, 1.0).unwrap();
        assert!((mu - (f[40] - nugget * gvec[40])).abs() < 1e-8);
        assert!(var <= nugget * (1.0 + 1e-6));
        let (mu, var) = predict(&Point::scalar(1e3), &f, &g, 0, 2.0).unwrap();
        assert!(mu.abs() < 1e-12 && (var - 2.0).abs() < 1e-12);
    }

    #[test]
    fn predict_matches_dense() {
        let pts = uniform_points(500, 15);
        let nugget = 1e-6;
        let g = grid(&pts, &[8.0], nugget);
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        // f in the range of C, as posterior draws are
        let gvec = standard_normals(&mut rng, 500);
        let f = g.entry(0).corr().matvec(&gvec).unwrap();
        let c = build_dense_covariance(&pts, &KernelParams::new(1.0, 8.0, nugget).unwrap(), None).unwrap();
        let ch = c.cholesky().unwrap();
        for _ in 0..5 {
            // just outside the data, where the variance is not a cancellation residue
            let x = Point::scalar(1.3 + 0.4 * rng.random::<f64>());
            let (mu, var) = predict(&x, &f, &g, 0, 1.5).unwrap();
            let cs = nalgebra::DVector::from_fn(500, |i, _| (-8.0 * (pts.point(i)[0] - x.0[0]).powi(2)).exp());
            let sol = ch.solve(&cs);
            let mud = sol.dot(&nalgebra::DVector::from_column_slice(&f));
            let vard = 1.5 * (1.0 - sol.dot(&cs));
            assert!((mu - mud).abs() <= 1e-6 * mud.abs().max(1.0), "{mu} {mud}");
            assert!(vard > 1e-3);
            assert!((var - vard).abs() <= 1e-6 * vard, "{var} {vard}");
        }
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|x| (2.0 * x).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        collapse_duplicates(&PointSet::from_scalars(&xs).unwrap(), &y).unwrap()
    }

    #[test]
    fn chain_shape_reproducibility_and_precompute_contract() {
        let ds = toy_dataset(150, 20);
        let priors = PriorSpec::default_for_range(ds.input_range(), 5).unwrap();
        let cfg = GibbsConfig {
            iters: 30,
            burn_in: 7,
            thin: 4,
            seed: 99,
            nugget: 1e-8,
            ..Default::default()
        };
        let xs = PointSet::from_scalars(&[-1.0, 0.0, 1.5]).unwrap();
        let a = run_gibbs(&ds, &priors, &cfg, Some(&xs)).unwrap();
        let b = run_gibbs(&ds, &priors, &cfg, Some(&xs)).unwrap();
        assert_eq!(a.draws.len(), (30 - 7) / 4);
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.corr_rebuilds, 0);
        assert_eq!(a.system_factorizations, 30);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with("iter,tau,sigma_f_sq,rho,f_1,"));
        assert_eq!(text.lines().count(), 1 + a.draws.len());
        assert_eq!(a.draws[0].f_star.as_ref().unwrap().len(), 3);

        let seq = GibbsConfig {
            exec: Exec::Sequential,
            ..cfg.clone()
        };
        let c = run_gibbs(&ds, &priors, &seq, Some(&xs)).unwrap();
        assert_eq!(a.draws, c.draws);
    }

    #[test]
    fn zero_response_chain() {
        let mut ds = toy_dataset(100, 21);
        ds.y_avg.iter_mut().for_each(|v| *v = 0.0);
        ds.within_ss = 0.0;
        let priors = PriorSpec::default_for_range(ds.input_range(), 3).unwrap();
        let cfg = GibbsConfig {
            iters: 60,
            burn_in: 20,
            seed: 1,
            nugget: 1e-8,
            ..Default::default()
        };
        let chain = run_gibbs(&ds, &priors, &cfg, None).unwrap();
        let fmax = chain
            .draws
            .iter()
            .flat_map(|d| d.f.as_ref().unwrap().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(fmax < 0.5, "{fmax}");
    }

    #[test]
    fn duplicates_use_heteroskedastic_path() {
        let xs: Vec<f64> = (0..120).map(|i| ((i % 60) as f64) / 30.0 - 1.0).collect();
        let y: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| x.sin() + 0.01 * (i as f64).cos())
            .collect();
        let ds = collapse_duplicates(&PointSet::from_scalars(&xs).unwrap(), &y).unwrap();
        assert!(ds.has_duplicates());
        let priors = PriorSpec::default_for_range(ds.input_range(), 3).unwrap();
        let cfg = GibbsConfig {
            iters: 10,
            burn_in: 0,
            nugget: 1e-8,
            ..Default::default()
        };
        let chain = run_gibbs(&ds, &priors, &cfg, None).unwrap();
        assert_eq!(chain.draws.len(), 10);
        assert_eq!(chain.draws[0].f.as_ref().unwrap().len(), 60);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert!((quantile(&v, 0.025) - 1.1).abs() < 1e-12);
    }
}
