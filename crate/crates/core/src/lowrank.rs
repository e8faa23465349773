//! Tolerance-driven low-rank compression of kernel blocks.
//!
//! Large blocks are compressed by adaptive cross approximation with partial
//! pivoting, which only evaluates the rows and columns it pivots on. Small
//! blocks (both sides at most [`DENSE_SVD_MAX`]) are compressed by a truncated
//! SVD of the materialised block.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Blocks with both dimensions at or below this size use a dense SVD.
pub const DENSE_SVD_MAX: usize = 64;

/// Multiplier applied to the last pivot when estimating the residual.
const PIVOT_SAFETY: f64 = 10.0;

/// Random residual probes used to cross-check the pivot estimate.
const CHECK_PROBES: usize = 32;

/// A block represented as `U * V^T`.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Estimated max-norm residual (exact for the dense path).
    pub achieved_tol: f64,
    /// False when compression hit full rank without meeting the tolerance.
    pub converged: bool,
    touched_rows: Vec<usize>,
    touched_cols: Vec<usize>,
    dense: bool,
}

impl LowRankFactor {
    pub fn zero(m: usize, n: usize) -> Self {
        LowRankFactor {
            u: DMatrix::zeros(m, 0),
            v: DMatrix::zeros(n, 0),
            achieved_tol: 0.0,
            converged: true,
            touched_rows: Vec::new(),
            touched_cols: Vec::new(),
            dense: false,
        }
    }

    /// Wrap explicit factors.
    pub fn from_factors(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::DimensionMismatch {
                expected: u.ncols(),
                got: v.ncols(),
            });
        }
        Ok(LowRankFactor {
            u,
            v,
            achieved_tol: 0.0,
            converged: true,
            touched_rows: Vec::new(),
            touched_cols: Vec::new(),
            dense: false,
        })
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Number of stored reals, `(m + n) * r`.
    pub fn storage(&self) -> usize {
        (self.rows() + self.cols()) * self.rank()
    }

    /// Entry `(i, j)` of `U V^T`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        (0..self.rank()).map(|k| self.u[(i, k)] * self.v[(j, k)]).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// The factor of `c * block`: `U` is scaled, `V` is shared.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.u *= c;
        out.achieved_tol *= c.abs();
        out
    }

    pub fn touched_rows(&self) -> &[usize] {
        &self.touched_rows
    }

    pub fn touched_cols(&self) -> &[usize] {
        &self.touched_cols
    }
}

/// Compress the `m x n` block given by `block(i, j)` to max-norm tolerance `eps`.
pub fn factor_block<F>(block: F, m: usize, n: usize, eps: f64) -> Result<LowRankFactor>
where
    F: Fn(usize, usize) -> f64,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {eps}")));
    }
    if m == 0 || n == 0 {
        return Ok(LowRankFactor::zero(m, n));
    }
    if m <= DENSE_SVD_MAX && n <= DENSE_SVD_MAX {
        dense_svd(&block, m, n, eps)
    } else {
        aca(&block, m, n, eps)
    }
}

/// Compress `c * block` at tolerance `c * eps` by compressing `block` at `eps`.
pub fn factor_block_scaled<F>(block: F, m: usize, n: usize, eps: f64, c: f64) -> Result<LowRankFactor>
where
    F: Fn(usize, usize) -> f64,
{
    Ok(factor_block(block, m, n, eps)?.scaled(c))
}

fn dense_svd<F>(block: &F, m: usize, n: usize, eps: f64) -> Result<LowRankFactor>
where
    F: Fn(usize, usize) -> f64,
{
    let a = DMatrix::from_fn(m, n, block);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel block"));
    }
    let mut resid = a.clone();
    let mut err = resid.amax();
    if err <= eps {
        let mut f = LowRankFactor::zero(m, n);
        f.achieved_tol = err;
        f.dense = true;
        return Ok(f);
    }
    let svd = a.svd(true, true);
    let (su, svt) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Singular values from nalgebra are sorted in decreasing order.
    let mut rank = 0;
    let kmax = svd.singular_values.len();
    while rank < kmax && err > eps {
        let s = svd.singular_values[rank];
        for j in 0..n {
            let vj = s * svt[(rank, j)];
            for i in 0..m {
                resid[(i, j)] -= su[(i, rank)] * vj;
            }
        }
        rank += 1;
        err = resid.amax();
    }
    let mut u = DMatrix::zeros(m, rank);
    let mut v = DMatrix::zeros(n, rank);
    for k in 0..rank {
        let s = svd.singular_values[k];
        for i in 0..m {
            u[(i, k)] = su[(i, k)] * s;
        }
        for j in 0..n {
            v[(j, k)] = svt[(k, j)];
        }
    }
    Ok(LowRankFactor {
        u,
        v,
        achieved_tol: err,
        converged: err <= eps,
        touched_rows: Vec::new(),
        touched_cols: Vec::new(),
        dense: true,
    })
}

struct AcaState {
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

impl AcaState {
    fn approx(&self, i: usize, j: usize) -> f64 {
        self.us.iter().zip(&self.vs).map(|(u, v)| u[i] * v[j]).sum()
    }
}

fn aca<F>(block: &F, m: usize, n: usize, eps: f64) -> Result<LowRankFactor>
where
    F: Fn(usize, usize) -> f64,
{
    let max_rank = m.min(n);
    let mut st = AcaState {
        us: Vec::new(),
        vs: Vec::new(),
    };
    let mut used_rows = vec![false; m];
    let mut used_cols = vec![false; n];
    let mut touched_rows = Vec::new();
    let mut touched_cols = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(((m as u64) << 32) ^ n as u64);
    let mut row = 0usize;
    let estimate;

    loop {
        if st.us.len() >= max_rank {
            estimate = probe_residual(block, &st, m, n, &mut rng).0;
            break;
        }
        used_rows[row] = true;
        touched_rows.push(row);
        let mut r = vec![0.0; n];
        let mut pivot_col = usize::MAX;
        let mut pivot_abs = -1.0;
        for j in 0..n {
            let val = block(row, j);
            if !val.is_finite() {
                return Err(Error::NonFinite("kernel block"));
            }
            r[j] = val - st.approx(row, j);
            if !used_cols[j] && r[j].abs() > pivot_abs {
                pivot_abs = r[j].abs();
                pivot_col = j;
            }
        }
        if pivot_col == usize::MAX {
            estimate = 0.0;
            break;
        }
        if PIVOT_SAFETY * pivot_abs <= eps {
            // The pivot row is resolved; look for residual elsewhere.
            let (probe_max, probe_at) = probe_residual(block, &st, m, n, &mut rng);
            match probe_at {
                Some((pi, _)) if PIVOT_SAFETY * probe_max > eps && !used_rows[pi] => {
                    row = pi;
                    continue;
                }
                _ => {
                    estimate = (PIVOT_SAFETY * pivot_abs).max(probe_max);
                    break;
                }
            }
        }
        let delta = r[pivot_col];
        used_cols[pivot_col] = true;
        touched_cols.push(pivot_col);
        let mut c = vec![0.0; m];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = (block(i, pivot_col) - st.approx(i, pivot_col)) / delta;
        }
        st.us.push(c);
        st.vs.push(r);
        let last = st.us.last().unwrap();
        let next = (0..m)
            .filter(|&i| !used_rows[i])
            .max_by(|&a, &b| last[a].abs().total_cmp(&last[b].abs()));
        match next {
            Some(i) => row = i,
            None => {
                estimate = 0.0;
                break;
            }
        }
    }

    let rank = st.us.len();
    let converged = estimate <= eps;
    if !converged {
        log::warn!(
            "low-rank compression of a {m}x{n} block stopped at rank {rank} with estimated error {estimate:.3e} > {eps:.3e}"
        );
    }
    let u = DMatrix::from_fn(m, rank, |i, k| st.us[k][i]);
    let v = DMatrix::from_fn(n, rank, |j, k| st.vs[k][j]);
    Ok(LowRankFactor {
        u,
        v,
        achieved_tol: estimate,
        converged,
        touched_rows,
        touched_cols,
        dense: false,
    })
}

fn probe_residual<F>(
    block: &F,
    st: &AcaState,
    m: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Option<(usize, usize)>)
where
    F: Fn(usize, usize) -> f64,
{
    let mut best = 0.0;
    let mut at = None;
    for _ in 0..CHECK_PROBES {
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..n);
        let r = (block(i, j) - st.approx(i, j)).abs();
        if r > best {
            best = r;
            at = Some((i, j));
        }
    }
    (best, at)
}

/// Max residual over `n_probes` random entries plus every entry touched while
/// the factor was built (all entries for dense-path factors).
pub fn estimate_max_error<F>(factor: &LowRankFactor, block: F, n_probes: usize, seed: u64) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    let (m, n) = (factor.rows(), factor.cols());
    if m == 0 || n == 0 {
        return 0.0;
    }
    let resid = |i: usize, j: usize| (block(i, j) - factor.entry(i, j)).abs();
    let mut worst = 0.0f64;
    if factor.dense {
        for j in 0..n {
            for i in 0..m {
                worst = worst.max(resid(i, j));
            }
        }
    } else {
        for &i in &factor.touched_rows {
            for j in 0..n {
                worst = worst.max(resid(i, j));
            }
        }
        for &j in &factor.touched_cols {
            for i in 0..m {
                worst = worst.max(resid(i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_probes.max(1) {
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..n);
        worst = worst.max(resid(i, j));
    }
    worst
}
