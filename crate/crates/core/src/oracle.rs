//! Dense reference implementations: the exact GP posterior, Gaussian KL
//! divergence, the computable KL bound for HODLR-approximated posteriors,
//! and a dense Gibbs backend that runs in lockstep with the fast sampler.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hodlr::{AssembleOptions, HodlrMatrix};
use crate::kernels::{build_dense_covariance, Dataset, KernelParams, PointSet, DEFAULT_DENSE_LIMIT};
use crate::sampler::{self, ChainData, GibbsBackend, GibbsChain, GibbsConfig, PriorSpec};

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_square(a: &DMatrix<f64>, n: usize) -> Result<()> {
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if a.nrows() != n { a.nrows() } else { a.ncols() },
        });
    }
    Ok(())
}

/// PSD square root by eigendecomposition; clamps rounding-level negatives.
fn psd_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let lmax = eig.eigenvalues.amax();
    let lmin = eig.eigenvalues.min();
    if lmin < -1e-10 * lmax.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveDefinite {
            location: format!("{what} (smallest eigenvalue {lmin:e})"),
        });
    }
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Exact GP posterior of `f` given fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct DensePosterior {
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
    sqrt: OnceLock<std::result::Result<DMatrix<f64>, String>>,
}

impl DensePosterior {
    /// `Sigma_f = K (tau K + I)^{-1}`, `mu_f = tau Sigma_f y`.
    pub fn new(y: &[f64], k: &DMatrix<f64>, tau: f64) -> Result<Self> {
        let n = y.len();
        check_square(k, n)?;
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter("tau must be > 0".into()));
        }
        let m = k * tau + DMatrix::identity(n, n);
        let ch = m.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            location: "dense tau K + I".into(),
        })?;
        // K M^{-1} = (M^{-1} K)^T
        let sigma = symmetrize(&ch.solve(k).transpose());
        let mu = &sigma * DVector::from_column_slice(y) * tau;
        Ok(DensePosterior {
            mu_f: mu,
            sigma_f: sigma,
            sqrt: OnceLock::new(),
        })
    }

    /// Heteroskedastic posterior: mean `K (K + D^{-1})^{-1} y`,
    /// covariance `D^{-1} (K + D^{-1})^{-1} K`.
    pub fn heteroskedastic(y: &[f64], k: &DMatrix<f64>, d: &[f64]) -> Result<Self> {
        let n = y.len();
        check_square(k, n)?;
        if d.len() != n || d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(
                "precisions must be positive, one per input".into(),
            ));
        }
        let mut p = k.clone();
        for i in 0..n {
            p[(i, i)] += 1.0 / d[i];
        }
        let ch = p.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            location: "dense K + D^{-1}".into(),
        })?;
        let pk = ch.solve(k);
        let mut sigma = pk;
        for i in 0..n {
            for j in 0..n {
                sigma[(i, j)] /= d[i];
            }
        }
        let mu = k * ch.solve(&DVector::from_column_slice(y));
        Ok(DensePosterior {
            mu_f: mu,
            sigma_f: symmetrize(&sigma),
            sqrt: OnceLock::new(),
        })
    }

    /// Cached symmetric square root of `Sigma_f`.
    pub fn sqrt(&self) -> Result<&DMatrix<f64>> {
        self.sqrt
            .get_or_init(|| psd_sqrt(&self.sigma_f, "posterior covariance").map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::Numerical(e.clone()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let z = DVector::from_vec(sampler::standard_normals(rng, self.mu_f.len()));
        Ok(to_vec(&(&self.mu_f + self.sqrt()? * z)))
    }
}

/// One draw from the exact posterior `N(tau Sigma_f y, Sigma_f)`.
pub fn exact_gp_sample_f<R: Rng + ?Sized>(y: &[f64], k: &DMatrix<f64>, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    if y.len() > DEFAULT_DENSE_LIMIT {
        return Err(Error::DenseLimit {
            n: y.len(),
            limit: DEFAULT_DENSE_LIMIT,
        });
    }
    DensePosterior::new(y, k, tau)?.sample(rng)
}

/// `x - ln(1 + x)` without cancellation near zero.
fn x_minus_log1p(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x * x * (0.5 - x * (1.0 / 3.0 - x * 0.25))
    } else {
        x - x.ln_1p()
    }
}

/// `KL(N(mu0, s0) || N(mu1, s1))`.
///
/// Evaluated through the eigenvalues of `L^{-1} (s0 - s1) L^{-T}`, with
/// `L L^T = s1`, so nearly equal arguments do not lose precision.
pub fn gaussian_kl(mu0: &[f64], s0: &DMatrix<f64>, mu1: &[f64], s1: &DMatrix<f64>) -> Result<f64> {
    let n = mu0.len();
    if mu1.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: mu1.len(),
        });
    }
    check_square(s0, n)?;
    check_square(s1, n)?;
    let ch = symmetrize(s1).cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        location: "second covariance".into(),
    })?;
    let l = ch.l();
    let mut e = symmetrize(&(s0 - s1));
    l.solve_lower_triangular_mut(&mut e);
    let mut e = e.transpose();
    l.solve_lower_triangular_mut(&mut e);
    let e = symmetrize(&e);
    let mut trace_term = 0.0;
    for mu in SymmetricEigen::new(e).eigenvalues.iter() {
        if *mu <= -1.0 {
            return Err(Error::NotPositiveDefinite {
                location: "first covariance".into(),
            });
        }
        trace_term += x_minus_log1p(*mu);
    }
    let mut delta = DVector::from_fn(n, |i, _| mu1[i] - mu0[i]);
    l.solve_lower_triangular_mut(&mut delta);
    Ok(0.5 * trace_term + 0.5 * delta.norm_squared())
}

/// Spectral functionals entering the KL bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub eps: f64,
    pub tau: f64,
    pub y_norm_sq: f64,
    pub sigma_min_k: f64,
    pub norm_k_2: f64,
    pub sigma_max_m: f64,
    pub sigma_min_m: f64,
    pub norm_minv_2: f64,
    pub norm_minv_max: f64,
    pub tr_minv: f64,
}

impl BoundInputs {
    pub fn compute(k: &DMatrix<f64>, m: &DMatrix<f64>, eps: f64, tau: f64, y: &[f64]) -> Result<Self> {
        let n = y.len();
        check_square(k, n)?;
        check_square(m, n)?;
        let ek = SymmetricEigen::new(symmetrize(k));
        let em = SymmetricEigen::new(symmetrize(m));
        let sigma_min_m = em.eigenvalues.min();
        if !(sigma_min_m > 0.0) {
            return Err(Error::NotPositiveDefinite {
                location: "M in the KL bound".into(),
            });
        }
        let inv_l = em.eigenvalues.map(|l| 1.0 / l);
        let minv = &em.eigenvectors * DMatrix::from_diagonal(&inv_l) * em.eigenvectors.transpose();
        Ok(BoundInputs {
            n,
            eps,
            tau,
            y_norm_sq: y.iter().map(|v| v * v).sum(),
            sigma_min_k: ek.eigenvalues.min(),
            norm_k_2: ek.eigenvalues.amax(),
            sigma_max_m: em.eigenvalues.max(),
            sigma_min_m,
            norm_minv_2: 1.0 / sigma_min_m,
            norm_minv_max: minv.amax(),
            tr_minv: inv_l.sum(),
        })
    }

    /// The two conditions under which the bound holds.
    pub fn check_admissible(&self) -> Result<()> {
        let n = self.n as f64;
        if self.eps > 0.0 && !(self.eps < self.sigma_min_k / (n * n)) {
            return Err(Error::Admissibility(format!(
                "ε < σ_min(K)/n² fails: eps = {:e}, σ_min(K)/n² = {:e}",
                self.eps,
                self.sigma_min_k / (n * n)
            )));
        }
        if self.eps > 0.0 && !(self.eps < 1.0 / (n * self.norm_minv_2)) {
            return Err(Error::Admissibility(format!(
                "ε < 1/(n‖M⁻¹‖₂) fails: eps = {:e}, bound = {:e}",
                self.eps,
                1.0 / (n * self.norm_minv_2)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KlBound {
    pub total: f64,
    pub parts: [f64; 3],
}

/// Evaluate the bound from precomputed inputs.
pub fn kl_bound_from(b: &BoundInputs) -> Result<KlBound> {
    b.check_admissible()?;
    let n = b.n as f64;
    let e = b.eps;
    let n2e = n * n * e;
    let part1 = 2.0 * n2e;
    let part2 = b.norm_minv_max * n2e
        + n.powf(2.5) * e / (b.sigma_min_k - n2e).sqrt()
        + n.powi(3) * b.tr_minv.abs() * e * e / (b.sigma_min_k - n2e);
    let bracket = n * e * b.norm_k_2 * b.norm_minv_2 * b.norm_minv_2 / (1.0 - n * e * b.norm_minv_2)
        + n * e / (b.sigma_min_m - n2e).sqrt();
    let part3 =
        b.tau * b.tau * ((b.sigma_max_m + n2e) / (b.sigma_min_k - n2e)).sqrt() * b.y_norm_sq * bracket * bracket;
    let parts = [part1, part2, part3];
    Ok(KlBound {
        total: 0.5 * parts.iter().sum::<f64>(),
        parts,
    })
}

/// Upper bound on `KL(exact || approximate)` for `M = tau K + I`.
pub fn kl_bound(k: &DMatrix<f64>, m: &DMatrix<f64>, eps: f64, tau: f64, y: &[f64]) -> Result<KlBound> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter("eps must be >= 0".into()));
    }
    kl_bound_from(&BoundInputs::compute(k, m, eps, tau, y)?)
}

/// Settings for the KL validation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub ns: Vec<usize>,
    pub eps: Vec<f64>,
    pub rho: f64,
    pub sigma_f_sq: f64,
    pub tau: f64,
    pub nugget: f64,
    pub leaf_size: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            ns: vec![50, 100, 200],
            eps: vec![1e-4, 1e-6, 1e-8, 1e-10, 1e-12],
            rho: 4.0,
            sigma_f_sq: 1.0,
            tau: 4.0,
            nugget: 1e-3,
            leaf_size: 16,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Pass,
    Fail,
    /// eps outside the bound's admissible range
    Skip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRow {
    pub n: usize,
    pub eps: f64,
    pub kl_empirical: f64,
    pub bound: Option<KlBound>,
    pub max_abs_error: f64,
    pub status: CellStatus,
}

/// Problem for one sweep size: sorted uniform inputs, exact `K` and a
/// response drawn from the model.
pub fn validation_problem(
    n: usize,
    cfg: &ValidationConfig,
) -> Result<(PointSet, KernelParams, DMatrix<f64>, Vec<f64>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    xs.sort_by(f64::total_cmp);
    let pts = PointSet::from_scalars(&xs)?;
    let p = KernelParams::new(cfg.sigma_f_sq, cfg.rho, cfg.nugget * cfg.sigma_f_sq)?;
    let k = build_dense_covariance(&pts, &p, None)?;
    let f = psd_sqrt(&k, "validation kernel")? * DVector::from_vec(sampler::standard_normals(&mut rng, n));
    let noise = 1.0 / cfg.tau.sqrt();
    let y = f
        .iter()
        .map(|v| v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok((pts, p, k, y))
}

/// KL between the exact posterior and the one built from HODLR `K~`, `M~`
/// at tolerance `eps`, with the matrices' actual max-norm error.
pub fn empirical_kl(
    pts: &PointSet,
    p: &KernelParams,
    k: &DMatrix<f64>,
    y: &[f64],
    tau: f64,
    eps: f64,
    leaf_size: usize,
) -> Result<(f64, f64)> {
    let n = y.len();
    let eps_star = if tau < 1.0 { tau * eps } else { eps };
    let kt = HodlrMatrix::assemble(pts, p, AssembleOptions::new(eps_star / tau, leaf_size), None)?;
    let mt = kt.scale_shift(tau, 1.0);
    let ktd = kt.to_dense();
    let mtd = mt.to_dense();
    let m = k * tau + DMatrix::identity(n, n);
    let err = (&ktd - k).amax().max((&mtd - &m).amax());

    let exact = DensePosterior::new(y, k, tau)?;
    let ch = mtd.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        location: "approximate M".into(),
    })?;
    let sigma_q = symmetrize(&ch.solve(&ktd).transpose());
    let mu_q = &sigma_q * DVector::from_column_slice(y) * tau;
    let kl = gaussian_kl(&to_vec(&exact.mu_f), &exact.sigma_f, &to_vec(&mu_q), &sigma_q)?;
    Ok((kl, err))
}

/// Run the sweep. Inadmissible cells are reported as skipped.
pub fn validation_sweep(cfg: &ValidationConfig) -> Result<Vec<ValidationRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        if n > DEFAULT_DENSE_LIMIT {
            return Err(Error::DenseLimit {
                n,
                limit: DEFAULT_DENSE_LIMIT,
            });
        }
        let (pts, p, k, y) = validation_problem(n, cfg)?;
        let m = &k * cfg.tau + DMatrix::identity(n, n);
        let base = BoundInputs::compute(&k, &m, 0.0, cfg.tau, &y)?;
        for &eps in &cfg.eps {
            let (kl, err) = empirical_kl(&pts, &p, &k, &y, cfg.tau, eps, cfg.leaf_size)?;
            let inputs = BoundInputs { eps, ..base };
            let (bound, status) = match kl_bound_from(&inputs) {
                Ok(b) => {
                    let ok = kl <= b.total;
                    (Some(b), if ok { CellStatus::Pass } else { CellStatus::Fail })
                }
                Err(Error::Admissibility(_)) => (None, CellStatus::Skip),
                Err(e) => return Err(e),
            };
            rows.push(ValidationRow {
                n,
                eps,
                kl_empirical: kl,
                bound,
                max_abs_error: err,
                status,
            });
        }
    }
    Ok(rows)
}

/// CSV: `n,eps,kl_empirical,bound_i,bound_ii,bound_iii,bound_total,max_abs_error,status`.
pub fn write_validation_csv<W: Write>(rows: &[ValidationRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    wr.write_record([
        "n",
        "eps",
        "kl_empirical",
        "bound_i",
        "bound_ii",
        "bound_iii",
        "bound_total",
        "max_abs_error",
        "status",
    ])
    .map_err(err)?;
    for r in rows {
        let b = |i: usize| r.bound.map_or(String::new(), |b| format!("{:e}", b.parts[i]));
        let status = match r.status {
            CellStatus::Pass => "pass",
            CellStatus::Fail => "fail",
            CellStatus::Skip => "skip",
        };
        wr.write_record([
            r.n.to_string(),
            format!("{:e}", r.eps),
            format!("{:e}", r.kl_empirical),
            b(0),
            b(1),
            b(2),
            r.bound.map_or(String::new(), |b| format!("{:e}", b.total)),
            format!("{:e}", r.max_abs_error),
            status.to_string(),
        ])
        .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Dense Gibbs backend: eigendecomposition of every grid correlation
/// matrix and the same symmetric factor the HODLR engine produces, taken
/// from an exact (uncompressed) hierarchical representation.
pub struct DenseBackend {
    points: PointSet,
    rhos: Vec<f64>,
    eigvecs: Vec<DMatrix<f64>>,
    eigvals: Vec<DVector<f64>>,
    corr: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    x_star: Option<PointSet>,
    pred_cache: Vec<OnceLock<(DMatrix<f64>, Vec<f64>)>>,
    factorizations: std::sync::atomic::AtomicUsize,
}

impl DenseBackend {
    pub fn new(
        points: &PointSet,
        rhos: &[f64],
        nugget: f64,
        leaf_size: usize,
        x_star: Option<PointSet>,
    ) -> Result<Self> {
        let n = points.len();
        if n > DEFAULT_DENSE_LIMIT {
            return Err(Error::DenseLimit {
                n,
                limit: DEFAULT_DENSE_LIMIT,
            });
        }
        let mut eigvecs = Vec::new();
        let mut eigvals = Vec::new();
        let mut corr = Vec::new();
        let mut w = Vec::new();
        for &rho in rhos {
            let c = build_dense_covariance(points, &KernelParams::new(1.0, rho, nugget)?, None)?;
            let eig = SymmetricEigen::new(c.clone());
            if !(eig.eigenvalues.min() > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    location: format!("dense correlation at rho = {rho}"),
                });
            }
            let exact = HodlrMatrix::from_dense_exact(&c, leaf_size)?;
            w.push(exact.symmetric_factorize()?.to_dense());
            eigvecs.push(eig.eigenvectors);
            eigvals.push(eig.eigenvalues);
            corr.push(c);
        }
        Ok(DenseBackend {
            points: points.clone(),
            rhos: rhos.to_vec(),
            eigvecs,
            eigvals,
            corr,
            w,
            pred_cache: (0..rhos.len()).map(|_| OnceLock::new()).collect(),
            x_star,
            factorizations: Default::default(),
        })
    }

    /// `V diag(g(lambda)) V^T x`.
    fn spectral(&self, l: usize, x: &DVector<f64>, g: impl Fn(f64) -> f64) -> DVector<f64> {
        let v = &self.eigvecs[l];
        let mut t = v.tr_mul(x);
        for (ti, li) in t.iter_mut().zip(self.eigvals[l].iter()) {
            *ti *= g(*li);
        }
        v * t
    }
}

impl GibbsBackend for DenseBackend {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn n(&self) -> usize {
        self.points.len()
    }

    fn rho_grid(&self) -> Vec<f64> {
        self.rhos.clone()
    }

    fn logdets(&self) -> Vec<f64> {
        self.eigvals.iter().map(|e| e.iter().map(|l| l.ln()).sum()).collect()
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
        self.factorizations.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let s2 = sigma_f_sq;
        let c = &self.corr[l];
        let wb = &self.w[l] * DVector::from_column_slice(b);
        let yv = DVector::from_column_slice(y);
        match multipliers {
            None => {
                let a = DVector::from_column_slice(a);
                let z = c * a * (tau.sqrt() * s2) + wb * s2.sqrt();
                let alpha = tau * s2;
                let w = self.spectral(l, &z, |lam| 1.0 / (alpha * lam + 1.0));
                let r = self.spectral(l, &(yv * tau), |lam| 1.0 / (alpha * lam + 1.0));
                Ok(to_vec(&(w + c * r * s2)))
            }
            Some(m) => {
                let d: Vec<f64> = m.iter().map(|v| tau * v).collect();
                let mut p = c * s2;
                for i in 0..d.len() {
                    p[(i, i)] += 1.0 / d[i];
                }
                let ch = p.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
                    location: "dense K + D^{-1}".into(),
                })?;
                let a = DVector::from_fn(d.len(), |i, _| a[i] * d[i].sqrt());
                let z = c * a * s2 + wb * s2.sqrt();
                let w = ch.solve(&z);
                let mean = c * ch.solve(&yv) * s2;
                Ok((0..d.len()).map(|i| w[i] / d[i] + mean[i]).collect())
            }
        }
    }

    fn quad_forms(&self, f: &[f64]) -> Result<Vec<f64>> {
        let fv = DVector::from_column_slice(f);
        Ok((0..self.rhos.len())
            .map(|l| {
                let t = self.eigvecs[l].tr_mul(&fv);
                t.iter().zip(self.eigvals[l].iter()).map(|(t, lam)| t * t / lam).sum()
            })
            .collect())
    }

    fn predict(&self, l: usize, f: &[f64], sigma_f_sq: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let xs = self.x_star.as_ref().ok_or(Error::Empty("prediction inputs"))?;
        if self.pred_cache[l].get().is_none() {
            let c = sampler::cross_correlation(&self.points, xs, self.rhos[l])?;
            let v = &self.eigvecs[l];
            let mut t = v.tr_mul(&c);
            for (i, lam) in self.eigvals[l].iter().enumerate() {
                t.row_mut(i).scale_mut(1.0 / lam);
            }
            let sol = v * t;
            let quad = (0..c.ncols()).map(|j| sol.column(j).dot(&c.column(j))).collect();
            let _ = self.pred_cache[l].set((sol, quad));
        }
        let (sol, quad) = self.pred_cache[l].get().unwrap();
        let mu = to_vec(&sol.tr_mul(&DVector::from_column_slice(f)));
        let var = quad
            .iter()
            .map(|q| (sigma_f_sq * (1.0 - q)).clamp(0.0, sigma_f_sq))
            .collect();
        Ok((mu, var))
    }

    fn n_predict(&self) -> usize {
        self.x_star.as_ref().map_or(0, |x| x.len())
    }

    fn system_factorizations(&self) -> usize {
        self.factorizations.load(std::sync::atomic::Ordering::Relaxed)
    }
}

/// Dense-covariance Gibbs chain sharing the fast sampler's random stream.
pub fn exact_gibbs_reference(
    ds: &Dataset,
    priors: &PriorSpec,
    cfg: &GibbsConfig,
    x_star: Option<&PointSet>,
) -> Result<GibbsChain> {
    cfg.validate()?;
    priors.validate()?;
    let t0 = Instant::now();
    let backend = DenseBackend::new(
        &ds.unique_points,
        &priors.rho_grid,
        cfg.nugget,
        cfg.leaf_size,
        x_star.cloned(),
    )?;
    let setup = t0.elapsed().as_secs_f64();
    sampler::drive(&backend, &ChainData::from_dataset(ds), priors, cfg, setup)
}
