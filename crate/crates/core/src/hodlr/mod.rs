//! Hierarchical off-diagonal low-rank (HODLR) matrices.
//!
//! The index range `0..n` is split into equal halves recursively for
//! `levels = floor(log2(n / leaf_size))` levels. Level `k` holds `2^k` nodes;
//! every node above the leaf level stores the low-rank factor of its upper
//! off-diagonal block (rows in the left child, columns in the right child).
//! The lower block is the transpose. Leaves hold exact dense blocks.

mod dump;
mod factor;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{Dataset, KernelParams, PointSet};
use crate::lowrank::{factor_block, LowRankFactor};
use crate::par::{self, Exec};

pub use dump::{read_dump, write_dump, DUMP_VERSION};
pub use factor::{apply_symmetric_factor, logdet, solve, HodlrFactorization, RootKind, SymmetricFactor};

/// Default leaf size.
pub const DEFAULT_LEAF_SIZE: usize = 64;

/// Assembly settings.
#[derive(Debug, Clone, Copy)]
pub struct AssembleOptions {
    pub eps: f64,
    pub leaf_size: usize,
    pub exec: Exec,
}

impl AssembleOptions {
    pub fn new(eps: f64, leaf_size: usize) -> Self {
        AssembleOptions {
            eps,
            leaf_size,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

/// Number of levels for `n` points and leaf size `leaf_size`.
pub fn level_count(n: usize, leaf_size: usize) -> usize {
    if n <= leaf_size || leaf_size == 0 {
        0
    } else {
        (n as f64 / leaf_size as f64).log2().floor() as usize
    }
}

/// Node ranges `(start, len)` for each level `0..=levels`.
fn partition(n: usize, levels: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![vec![(0, n)]];
    for _ in 0..levels {
        let prev = out.last().unwrap();
        let mut next = Vec::with_capacity(prev.len() * 2);
        for &(s, len) in prev {
            let left = len / 2;
            next.push((s, left));
            next.push((s + left, len - left));
        }
        out.push(next);
    }
    out
}

#[derive(Debug, Clone)]
pub struct HodlrMatrix {
    n: usize,
    eps: f64,
    leaf_size: usize,
    ranges: Vec<Vec<(usize, usize)>>,
    offdiag: Vec<Vec<LowRankFactor>>,
    leaves: Vec<DMatrix<f64>>,
}

impl HodlrMatrix {
    /// Assemble the kernel matrix over `points` (already ordered).
    ///
    /// Diagonal entries get the nugget and, if given, `1 / d_i`.
    pub fn assemble(
        points: &PointSet,
        p: &KernelParams,
        opts: AssembleOptions,
        noise_precisions: Option<&[f64]>,
    ) -> Result<Self> {
        p.validate()?;
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("points"));
        }
        if !(opts.eps > 0.0) || !opts.eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be > 0, got {}", opts.eps)));
        }
        if opts.leaf_size < 8 {
            return Err(Error::InvalidParameter(format!(
                "leaf size must be >= 8, got {}",
                opts.leaf_size
            )));
        }
        if let Some(d) = noise_precisions {
            if d.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: d.len(),
                });
            }
            if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(
                    "noise precisions must be finite and > 0".into(),
                ));
            }
        }
        let levels = level_count(n, opts.leaf_size);
        let ranges = partition(n, levels);

        let mut offdiag = Vec::with_capacity(levels);
        for k in 0..levels {
            let children = &ranges[k + 1];
            let level = par::try_map_indexed(opts.exec, ranges[k].len(), |j| {
                let (ls, lm) = children[2 * j];
                let (rs, rm) = children[2 * j + 1];
                factor_block(
                    |i, c| p.eval_slices(points.point(ls + i), points.point(rs + c)),
                    lm,
                    rm,
                    opts.eps,
                )
            })?;
            offdiag.push(level);
        }

        let leaves = par::try_map_indexed(opts.exec, ranges[levels].len(), |j| {
            let (s, len) = ranges[levels][j];
            let mut b = DMatrix::zeros(len, len);
            for c in 0..len {
                for r in 0..c {
                    let v = p.eval_slices(points.point(s + r), points.point(s + c));
                    b[(r, c)] = v;
                    b[(c, r)] = v;
                }
                let mut d = p.sigma_f_sq + p.nugget;
                if let Some(prec) = noise_precisions {
                    d += 1.0 / prec[s + c];
                }
                b[(c, c)] = d;
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("kernel leaf block"));
            }
            Ok(b)
        })?;

        Ok(HodlrMatrix {
            n,
            eps: opts.eps,
            leaf_size: opts.leaf_size,
            ranges,
            offdiag,
            leaves,
        })
    }

    /// Build from explicit parts (used by the dump reader and tests).
    pub(crate) fn from_parts(
        n: usize,
        eps: f64,
        leaf_size: usize,
        offdiag: Vec<Vec<LowRankFactor>>,
        leaves: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let levels = offdiag.len();
        let ranges = partition(n, levels);
        for (k, level) in offdiag.iter().enumerate() {
            if level.len() != ranges[k].len() {
                return Err(Error::Numerical(format!("level {k} has {} blocks", level.len())));
            }
            for (j, f) in level.iter().enumerate() {
                let (l, r) = (ranges[k + 1][2 * j].1, ranges[k + 1][2 * j + 1].1);
                if f.rows() != l || f.cols() != r {
                    return Err(Error::Numerical(format!("block ({k}, {j}) has wrong shape")));
                }
            }
        }
        if leaves.len() != ranges[levels].len()
            || leaves
                .iter()
                .zip(&ranges[levels])
                .any(|(b, &(_, len))| b.nrows() != len || b.ncols() != len)
        {
            return Err(Error::Numerical("leaf blocks do not match the partition".into()));
        }
        Ok(HodlrMatrix {
            n,
            eps,
            leaf_size,
            ranges,
            offdiag,
            leaves,
        })
    }

    /// An exact HODLR representation of a dense symmetric matrix: every
    /// off-diagonal block is stored at full rank (`U = block`, `V = I`).
    pub fn from_dense_exact(a: &DMatrix<f64>, leaf_size: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.ncols(),
            });
        }
        let levels = level_count(n, leaf_size);
        let ranges = partition(n, levels);
        let mut offdiag = Vec::with_capacity(levels);
        for k in 0..levels {
            let mut level = Vec::with_capacity(ranges[k].len());
            for j in 0..ranges[k].len() {
                let (ls, lm) = ranges[k + 1][2 * j];
                let (rs, rm) = ranges[k + 1][2 * j + 1];
                let u = a.view((ls, rs), (lm, rm)).into_owned();
                level.push(LowRankFactor::from_factors(u, DMatrix::identity(rm, rm))?);
            }
            offdiag.push(level);
        }
        let leaves = ranges[levels]
            .iter()
            .map(|&(s, len)| a.view((s, s), (len, len)).into_owned())
            .collect();
        HodlrMatrix::from_parts(n, 0.0, leaf_size, offdiag, leaves)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn levels(&self) -> usize {
        self.offdiag.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// `(start, len)` of node `j` at level `k` (`k == levels()` are leaves).
    pub fn node_range(&self, k: usize, j: usize) -> (usize, usize) {
        self.ranges[k][j]
    }

    pub fn leaf_ranges(&self) -> &[(usize, usize)] {
        &self.ranges[self.levels()]
    }

    pub fn leaf(&self, j: usize) -> &DMatrix<f64> {
        &self.leaves[j]
    }

    pub fn leaves(&self) -> &[DMatrix<f64>] {
        &self.leaves
    }

    /// Upper off-diagonal factor of node `j` at level `k`.
    pub fn offdiag(&self, k: usize, j: usize) -> &LowRankFactor {
        &self.offdiag[k][j]
    }

    pub(crate) fn offdiag_levels(&self) -> &[Vec<LowRankFactor>] {
        &self.offdiag
    }

    /// Ranks of the off-diagonal blocks, level by level.
    pub fn ranks(&self) -> Vec<Vec<usize>> {
        self.offdiag
            .iter()
            .map(|l| l.iter().map(|f| f.rank()).collect())
            .collect()
    }

    pub fn max_rank(&self) -> usize {
        self.offdiag.iter().flatten().map(|f| f.rank()).max().unwrap_or(0)
    }

    /// Whether every off-diagonal block met its tolerance estimate.
    pub fn all_converged(&self) -> bool {
        self.offdiag.iter().flatten().all(|f| f.converged)
    }

    /// Stored reals: leaves plus `(m + n) r` per off-diagonal factor.
    pub fn storage(&self) -> usize {
        self.leaves.iter().map(|b| b.len()).sum::<usize>()
            + self.offdiag.iter().flatten().map(|f| f.storage()).sum::<usize>()
    }

    /// `alpha * H + shift * I`, sharing the tree topology.
    pub fn scale_shift(&self, alpha: f64, shift: f64) -> HodlrMatrix {
        let mut out = self.scaled(alpha);
        for b in &mut out.leaves {
            for i in 0..b.nrows() {
                b[(i, i)] += shift;
            }
        }
        out
    }

    /// `alpha * H + diag(d)`.
    pub fn scale_add_diagonal(&self, alpha: f64, d: &[f64]) -> Result<HodlrMatrix> {
        if d.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: d.len(),
            });
        }
        let mut out = self.scaled(alpha);
        for (b, &(s, len)) in out.leaves.iter_mut().zip(&self.ranges[self.offdiag.len()]) {
            for i in 0..len {
                b[(i, i)] += d[s + i];
            }
        }
        Ok(out)
    }

    fn scaled(&self, alpha: f64) -> HodlrMatrix {
        HodlrMatrix {
            n: self.n,
            eps: self.eps * alpha.abs(),
            leaf_size: self.leaf_size,
            ranges: self.ranges.clone(),
            offdiag: self
                .offdiag
                .iter()
                .map(|l| l.iter().map(|f| f.scaled(alpha)).collect())
                .collect(),
            leaves: self.leaves.iter().map(|b| b * alpha).collect(),
        }
    }

    /// `H v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        let levels = self.levels();
        for (b, &(s, len)) in self.leaves.iter().zip(&self.ranges[levels]) {
            let x = DVector::from_column_slice(&v[s..s + len]);
            let y = b * x;
            for i in 0..len {
                out[s + i] += y[i];
            }
        }
        for k in 0..levels {
            for (j, f) in self.offdiag[k].iter().enumerate() {
                if f.rank() == 0 {
                    continue;
                }
                let (ls, lm) = self.ranges[k + 1][2 * j];
                let (rs, rm) = self.ranges[k + 1][2 * j + 1];
                let xl = DVector::from_column_slice(&v[ls..ls + lm]);
                let xr = DVector::from_column_slice(&v[rs..rs + rm]);
                let top = &f.u * (f.v.tr_mul(&xr));
                let bottom = &f.v * (f.u.tr_mul(&xl));
                for i in 0..lm {
                    out[ls + i] += top[i];
                }
                for i in 0..rm {
                    out[rs + i] += bottom[i];
                }
            }
        }
        Ok(out)
    }

    /// Dense reconstruction, for testing at small `n`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        let levels = self.levels();
        for (b, &(s, len)) in self.leaves.iter().zip(&self.ranges[levels]) {
            a.view_mut((s, s), (len, len)).copy_from(b);
        }
        for k in 0..levels {
            for (j, f) in self.offdiag[k].iter().enumerate() {
                let (ls, lm) = self.ranges[k + 1][2 * j];
                let (rs, rm) = self.ranges[k + 1][2 * j + 1];
                let block = f.to_dense();
                a.view_mut((ls, rs), (lm, rm)).copy_from(&block);
                a.view_mut((rs, ls), (rm, lm)).copy_from(&block.transpose());
            }
        }
        a
    }

    /// Factorization for solves and log-determinants.
    pub fn factorize(&self) -> Result<HodlrFactorization> {
        HodlrFactorization::new(self)
    }

    /// Symmetric factor `W` with `W W^T = H`.
    pub fn symmetric_factorize(&self) -> Result<SymmetricFactor> {
        SymmetricFactor::new(self, RootKind::Symmetric)
    }
}

/// Assemble the kernel matrix over a dataset's unique points.
pub fn assemble(
    ds: &Dataset,
    p: &KernelParams,
    eps: f64,
    leaf_size: usize,
    noise_precisions: Option<&[f64]>,
) -> Result<HodlrMatrix> {
    HodlrMatrix::assemble(
        &ds.unique_points,
        p,
        AssembleOptions::new(eps, leaf_size),
        noise_precisions,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_dense_covariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    pub(crate) fn sorted_uniform(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        xs.sort_by(f64::total_cmp);
        PointSet::from_scalars(&xs).unwrap()
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn partition_sizes_sum_to_n() {
        for n in [1usize, 7, 64, 65, 200, 1000, 1023, 4097] {
            let levels = level_count(n, 64);
            let parts = partition(n, levels);
            for level in &parts {
                assert_eq!(level.iter().map(|r| r.1).sum::<usize>(), n);
                let mut next = 0;
                for &(s, len) in level {
                    assert_eq!(s, next);
                    next += len;
                }
            }
        }
        assert_eq!(level_count(200, 50), 2);
        assert_eq!(level_count(2000, 64), 4);
        assert_eq!(level_count(64, 64), 0);
    }

    #[test]
    fn single_leaf_is_exact() {
        let pts = sorted_uniform(40, 1);
        let p = KernelParams::new(1.3, 3.0, 1e-6).unwrap();
        let h = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(1e-8, 64), None).unwrap();
        assert_eq!(h.levels(), 0);
        let k = build_dense_covariance(&pts, &p, None).unwrap();
        assert_eq!(h.to_dense(), k);
    }

    #[test]
    fn si_example_within_tolerance_and_ranks() {
        let pts = sorted_uniform(200, 11);
        let p = KernelParams::new(1.0, 4.0, 0.0).unwrap();
        let h = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(1e-8, 50), None).unwrap();
        let k = build_dense_covariance(&pts, &p, None).unwrap();
        assert!(max_abs_diff(&h.to_dense(), &k) <= 1e-8);
        let ranks = h.ranks();
        assert_eq!(ranks.len(), 2);
        assert!((5..=9).contains(&ranks[0][0]), "{ranks:?}");
        assert!(ranks[1].iter().all(|&r| (3..=7).contains(&r)), "{ranks:?}");
    }

    #[test]
    fn leaves_match_dense_bit_for_bit() {
        let pts = sorted_uniform(300, 5);
        let p = KernelParams::new(2.0, 9.0, 1e-4).unwrap();
        let d = vec![3.0; 300];
        let h = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(1e-10, 32), Some(&d)).unwrap();
        let k = build_dense_covariance(&pts, &p, Some(&d)).unwrap();
        for (b, &(s, len)) in h.leaves().iter().zip(h.leaf_ranges()) {
            assert_eq!(b, &k.view((s, s), (len, len)).into_owned());
        }
    }

    #[test]
    fn matvec_against_dense() {
        let pts = sorted_uniform(1000, 3);
        let p = KernelParams::new(1.0, 10.0, 1e-8).unwrap();
        let eps = 1e-10;
        let h = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(eps, 64), None).unwrap();
        let k = build_dense_covariance(&pts, &p, None).unwrap();
        assert_eq!(h.matvec(&vec![0.0; 1000]).unwrap(), vec![0.0; 1000]);

        let mut e = vec![0.0; 1000];
        e[437] = 1.0;
        let col = h.matvec(&e).unwrap();
        for i in 0..1000 {
            assert!((col[i] - k[(i, 437)]).abs() <= eps);
        }

        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let hv = h.matvec(&v).unwrap();
        let kv = &k * DVector::from_column_slice(&v);
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = hv.iter().zip(kv.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1000.0 * eps * vmax, "{err}");
        assert!(h.matvec(&[1.0; 3]).is_err());
    }

    #[test]
    fn identity_additivity_and_scaling() {
        let pts = sorted_uniform(500, 8);
        let p = KernelParams::new(1.0, 6.0, 1e-10).unwrap();
        let eps = 1e-9;
        let h = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(eps, 64), None).unwrap();
        // assemble(K) + I versus assemble(K + I)
        let plus_i = h.scale_shift(1.0, 1.0);
        let direct = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(eps, 64), Some(&vec![1.0; 500])).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..500).map(|_| rng.random::<f64>() - 0.5).collect();
        let a = plus_i.matvec(&v).unwrap();
        let b = direct.matvec(&v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
        }

        // scaling: tau * assemble(K, eps / tau) vs assemble(tau K, eps)
        let tau = 25.0;
        let fine = HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(eps / tau, 64), None).unwrap();
        let scaled = fine.scale_shift(tau, 0.0);
        let ptau = KernelParams::new(tau, 6.0, tau * 1e-10).unwrap();
        let k = build_dense_covariance(&pts, &ptau, None).unwrap();
        assert!(max_abs_diff(&scaled.to_dense(), &k) <= eps);
        let tk = HodlrMatrix::assemble(&pts, &ptau, AssembleOptions::new(eps, 64), None).unwrap();
        let e = vec![1.0; 500];
        let x = scaled.matvec(&e).unwrap();
        let y = tk.matvec(&e).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 2.0 * 500.0 * eps);
        }
    }

    #[test]
    fn sequential_and_parallel_assembly_agree() {
        let pts = sorted_uniform(700, 4);
        let p = KernelParams::new(1.0, 3.0, 1e-10).unwrap();
        let a = HodlrMatrix::assemble(
            &pts,
            &p,
            AssembleOptions::new(1e-9, 64).with_exec(Exec::Sequential),
            None,
        )
        .unwrap();
        let b =
            HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(1e-9, 64).with_exec(Exec::Parallel), None).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
    }

    #[test]
    fn exact_dense_representation_roundtrips() {
        let pts = sorted_uniform(150, 6);
        let p = KernelParams::new(1.0, 2.0, 1e-3).unwrap();
        let k = build_dense_covariance(&pts, &p, None).unwrap();
        let h = HodlrMatrix::from_dense_exact(&k, 32).unwrap();
        assert_eq!(h.to_dense(), k);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pts = sorted_uniform(100, 1);
        let p = KernelParams::new(1.0, 1.0, 0.0).unwrap();
        assert!(HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(0.0, 64), None).is_err());
        assert!(HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(1e-8, 4), None).is_err());
        assert!(HodlrMatrix::assemble(&pts, &p, AssembleOptions::new(1e-8, 64), Some(&[1.0])).is_err());
    }
}
