//! Symmetric factorization `H = W W^T` with `W = A_l ... A_1 A_0`.
//!
//! `A_l` is block diagonal with one dense factor per leaf. Each `A_k`, `k < l`,
//! is block diagonal over the level-`k` nodes, every block being
//! `I + Q Y Q^T` with `Q = diag(Q1, Q2)` orthonormal bases of the node's
//! off-diagonal factors after the finer levels have been divided out.
//!
//! Two root kinds share the engine: lower-triangular Cholesky roots for
//! solves and log-determinants, and principal symmetric square roots, which
//! make `W` independent of how the off-diagonal factors were obtained.

use nalgebra::{DMatrix, DMatrixViewMut};

use super::HodlrMatrix;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

const PIVOT_SLACK: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootKind {
    Cholesky,
    Symmetric,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Apply,
    Transpose,
    Inverse,
    InverseTranspose,
}

#[derive(Debug, Clone)]
struct LeafFactor {
    start: usize,
    len: usize,
    root: DMatrix<f64>,
    // explicit inverse, symmetric roots only
    inv: Option<DMatrix<f64>>,
    logdet: f64,
}

impl LeafFactor {
    fn apply(&self, op: Op, mut x: DMatrixViewMut<'_, f64>) {
        match (&self.inv, op) {
            (None, Op::Apply) => {
                let t = &self.root * &x;
                x.copy_from(&t);
            }
            (None, Op::Transpose) => {
                let t = self.root.tr_mul(&x);
                x.copy_from(&t);
            }
            (None, Op::Inverse) => {
                self.root.solve_lower_triangular_mut(&mut x);
            }
            (None, Op::InverseTranspose) => {
                self.root.tr_solve_lower_triangular_mut(&mut x);
            }
            (Some(_), Op::Apply | Op::Transpose) => {
                let t = &self.root * &x;
                x.copy_from(&t);
            }
            (Some(inv), Op::Inverse | Op::InverseTranspose) => {
                let t = inv * &x;
                x.copy_from(&t);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct NodeFactor {
    start: usize,
    m1: usize,
    m2: usize,
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    // the block is I + Q y Q^T, its inverse I + Q z Q^T
    y: DMatrix<f64>,
    z: DMatrix<f64>,
    logdet: f64,
}

impl NodeFactor {
    fn trivial(start: usize, m1: usize, m2: usize) -> Self {
        NodeFactor {
            start,
            m1,
            m2,
            q1: DMatrix::zeros(m1, 0),
            q2: DMatrix::zeros(m2, 0),
            y: DMatrix::zeros(0, 0),
            z: DMatrix::zeros(0, 0),
            logdet: 0.0,
        }
    }

    fn len(&self) -> usize {
        self.m1 + self.m2
    }

    fn apply(&self, op: Op, mut x: DMatrixViewMut<'_, f64>) {
        let r1 = self.q1.ncols();
        let r2 = self.q2.ncols();
        if r1 + r2 == 0 {
            return;
        }
        let cols = x.ncols();
        let mut t = DMatrix::zeros(r1 + r2, cols);
        t.rows_mut(0, r1).gemm_tr(1.0, &self.q1, &x.rows(0, self.m1), 0.0);
        t.rows_mut(r1, r2)
            .gemm_tr(1.0, &self.q2, &x.rows(self.m1, self.m2), 0.0);
        let s = match op {
            Op::Apply => &self.y * &t,
            Op::Transpose => self.y.tr_mul(&t),
            Op::Inverse => &self.z * &t,
            Op::InverseTranspose => self.z.tr_mul(&t),
        };
        x.rows_mut(0, self.m1).gemm(1.0, &self.q1, &s.rows(0, r1), 1.0);
        x.rows_mut(self.m1, self.m2).gemm(1.0, &self.q2, &s.rows(r1, r2), 1.0);
    }
}

/// Lower Cholesky factor; on failure returns the offending pivot index.
fn cholesky_lower(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_SLACK * a[(j, j)].abs()) || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Principal square root and its inverse, with `log det` of the root.
fn symmetric_root(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let lmin = eig.eigenvalues.min();
    if !(lmin > PIVOT_SLACK * lmax) || !lmin.is_finite() {
        return None;
    }
    let v = &eig.eigenvectors;
    let sq = eig.eigenvalues.map(f64::sqrt);
    let root = v * DMatrix::from_diagonal(&sq) * v.transpose();
    let inv = v * DMatrix::from_diagonal(&sq.map(|s| 1.0 / s)) * v.transpose();
    let logdet = 0.5 * eig.eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
    Some((symmetrize(root), symmetrize(inv), logdet))
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn not_pd(location: String) -> Error {
    Error::NotPositiveDefinite { location }
}

fn leaf_factor(kind: RootKind, j: usize, start: usize, block: &DMatrix<f64>) -> Result<LeafFactor> {
    let len = block.nrows();
    let where_ = || format!("leaf block {j} (rows {start}..{})", start + len);
    match kind {
        RootKind::Cholesky => {
            let l = cholesky_lower(block).map_err(|p| not_pd(format!("{} at pivot {p}", where_())))?;
            let logdet = l.diagonal().iter().map(|d| d.ln()).sum();
            Ok(LeafFactor {
                start,
                len,
                root: l,
                inv: None,
                logdet,
            })
        }
        RootKind::Symmetric => {
            let (root, inv, logdet) = symmetric_root(block).ok_or_else(|| not_pd(where_()))?;
            Ok(LeafFactor {
                start,
                len,
                root,
                inv: Some(inv),
                logdet,
            })
        }
    }
}

fn node_factor(
    kind: RootKind,
    level: usize,
    j: usize,
    start: usize,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<NodeFactor> {
    let (m1, m2) = (u.nrows(), v.nrows());
    if u.ncols() == 0 {
        return Ok(NodeFactor::trivial(start, m1, m2));
    }
    let qr1 = u.clone().qr();
    let qr2 = v.clone().qr();
    let (q1, r1) = (qr1.q(), qr1.r());
    let (q2, r2) = (qr2.q(), qr2.r());
    let (p1, p2) = (q1.ncols(), q2.ncols());
    let b = &r1 * r2.transpose();
    let mut g = DMatrix::identity(p1 + p2, p1 + p2);
    g.view_mut((0, p1), (p1, p2)).copy_from(&b);
    g.view_mut((p1, 0), (p2, p1)).copy_from(&b.transpose());
    let where_ = || format!("level {level} block {j} (rows {start}..{})", start + m1 + m2);
    let eye = DMatrix::<f64>::identity(p1 + p2, p1 + p2);
    let (root, inv, logdet) = match kind {
        RootKind::Cholesky => {
            let l = cholesky_lower(&g).map_err(|p| not_pd(format!("{} at pivot {p}", where_())))?;
            let mut inv = eye.clone();
            if !l.solve_lower_triangular_mut(&mut inv) {
                return Err(not_pd(where_()));
            }
            let logdet = l.diagonal().iter().map(|d| d.ln()).sum();
            (l, inv, logdet)
        }
        RootKind::Symmetric => symmetric_root(&g).ok_or_else(|| not_pd(where_()))?,
    };
    Ok(NodeFactor {
        start,
        m1,
        m2,
        q1,
        q2,
        y: root - &eye,
        z: inv - eye,
        logdet,
    })
}

/// Divide the factors at one level out of every ancestor's off-diagonal
/// factors. `apply(i, view)` applies the inverse of factor `i` at level
/// `level` to a row segment; `ranges` are the node ranges of `h`.
fn transform_ancestors<F>(
    exec: Exec,
    h: &HodlrMatrix,
    level: usize,
    starts: &[(usize, usize)],
    work: &mut [Vec<(DMatrix<f64>, DMatrix<f64>)>],
    apply: F,
) where
    F: Fn(usize, DMatrixViewMut<'_, f64>) + Sync,
{
    for a in 0..level {
        let span = level - a - 1;
        let current = &work[a];
        let updated = par::map_indexed(exec, current.len(), |j| {
            let (u, v) = &current[j];
            let mut u = u.clone();
            let mut v = v.clone();
            if u.ncols() > 0 {
                let (ls, _) = h.node_range(a + 1, 2 * j);
                let (rs, _) = h.node_range(a + 1, 2 * j + 1);
                for i in (2 * j) << span..(2 * j + 1) << span {
                    let (s, len) = starts[i];
                    apply(i, u.rows_mut(s - ls, len));
                }
                for i in (2 * j + 1) << span..(2 * j + 2) << span {
                    let (s, len) = starts[i];
                    apply(i, v.rows_mut(s - rs, len));
                }
            }
            (u, v)
        });
        work[a] = updated;
    }
}

/// Implicit product `W = A_l ... A_0` with `W W^T = H`.
#[derive(Debug, Clone)]
pub struct SymmetricFactor {
    n: usize,
    kind: RootKind,
    leaves: Vec<LeafFactor>,
    // nodes[k]: factors of A_k
    nodes: Vec<Vec<NodeFactor>>,
}

impl SymmetricFactor {
    pub fn new(h: &HodlrMatrix, kind: RootKind) -> Result<Self> {
        Self::with_exec(h, kind, Exec::default())
    }

    pub fn with_exec(h: &HodlrMatrix, kind: RootKind, exec: Exec) -> Result<Self> {
        let levels = h.levels();
        let mut work: Vec<Vec<(DMatrix<f64>, DMatrix<f64>)>> = h
            .offdiag_levels()
            .iter()
            .map(|l| l.iter().map(|f| (f.u.clone(), f.v.clone())).collect())
            .collect();

        let leaf_ranges = h.leaf_ranges();
        let leaves = par::try_map_indexed(exec, leaf_ranges.len(), |j| {
            leaf_factor(kind, j, leaf_ranges[j].0, h.leaf(j))
        })?;
        transform_ancestors(exec, h, levels, leaf_ranges, &mut work, |i, x| {
            leaves[i].apply(Op::Inverse, x)
        });

        let mut nodes: Vec<Vec<NodeFactor>> = vec![Vec::new(); levels];
        for k in (0..levels).rev() {
            let level = par::try_map_indexed(exec, work[k].len(), |j| {
                let (u, v) = &work[k][j];
                node_factor(kind, k, j, h.node_range(k, j).0, u, v)
            })?;
            let starts: Vec<(usize, usize)> = level.iter().map(|f| (f.start, f.len())).collect();
            transform_ancestors(exec, h, k, &starts, &mut work, |i, x| level[i].apply(Op::Inverse, x));
            nodes[k] = level;
        }

        Ok(SymmetricFactor {
            n: h.n(),
            kind,
            leaves,
            nodes,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> RootKind {
        self.kind
    }

    /// `log det W`; `log det H` is twice this.
    pub fn logdet_w(&self) -> f64 {
        self.leaves.iter().map(|f| f.logdet).sum::<f64>() + self.nodes.iter().flatten().map(|f| f.logdet).sum::<f64>()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }

    fn apply_leaves(&self, op: Op, x: &mut DMatrix<f64>) {
        for f in &self.leaves {
            f.apply(op, x.rows_mut(f.start, f.len));
        }
    }

    fn apply_level(&self, k: usize, op: Op, x: &mut DMatrix<f64>) {
        for f in &self.nodes[k] {
            f.apply(op, x.rows_mut(f.start, f.len()));
        }
    }

    /// `W X`: `A_0` first, leaves last.
    pub fn apply_mat(&self, x: &mut DMatrix<f64>) {
        for k in 0..self.nodes.len() {
            self.apply_level(k, Op::Apply, x);
        }
        self.apply_leaves(Op::Apply, x);
    }

    /// `W^T X`.
    pub fn apply_transpose_mat(&self, x: &mut DMatrix<f64>) {
        self.apply_leaves(Op::Transpose, x);
        for k in (0..self.nodes.len()).rev() {
            self.apply_level(k, Op::Transpose, x);
        }
    }

    /// `W^{-1} X`.
    pub fn apply_inverse_mat(&self, x: &mut DMatrix<f64>) {
        self.apply_leaves(Op::Inverse, x);
        for k in (0..self.nodes.len()).rev() {
            self.apply_level(k, Op::Inverse, x);
        }
    }

    /// `W^{-T} X`.
    pub fn apply_inverse_transpose_mat(&self, x: &mut DMatrix<f64>) {
        for k in 0..self.nodes.len() {
            self.apply_level(k, Op::InverseTranspose, x);
        }
        self.apply_leaves(Op::InverseTranspose, x);
    }

    fn with_vec(&self, v: &[f64], f: impl Fn(&Self, &mut DMatrix<f64>)) -> Result<Vec<f64>> {
        self.check(v.len())?;
        let mut x = DMatrix::from_column_slice(v.len(), 1, v);
        f(self, &mut x);
        Ok(x.data.into())
    }

    /// `W v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.with_vec(v, Self::apply_mat)
    }

    /// `W^T v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.with_vec(v, Self::apply_transpose_mat)
    }

    /// `W^{-1} v`.
    pub fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.with_vec(v, Self::apply_inverse_mat)
    }

    /// `H^{-1} v = W^{-T} W^{-1} v`.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.with_vec(v, |s, x| {
            s.apply_inverse_mat(x);
            s.apply_inverse_transpose_mat(x);
        })
    }

    /// `H^{-1} B` for a block of right-hand sides.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(b.nrows())?;
        let mut x = b.clone();
        self.apply_inverse_mat(&mut x);
        self.apply_inverse_transpose_mat(&mut x);
        Ok(x)
    }

    /// Dense `W`, for testing.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::identity(self.n, self.n);
        self.apply_mat(&mut w);
        w
    }
}

/// Solve and log-determinant support for an SPD HODLR matrix.
#[derive(Debug, Clone)]
pub struct HodlrFactorization {
    factor: SymmetricFactor,
    logdet: f64,
}

impl HodlrFactorization {
    pub fn new(h: &HodlrMatrix) -> Result<Self> {
        Self::with_exec(h, Exec::default())
    }

    pub fn with_exec(h: &HodlrMatrix, exec: Exec) -> Result<Self> {
        Self::from_factor(SymmetricFactor::with_exec(h, RootKind::Cholesky, exec)?)
    }

    /// Wrap an existing factor of either root kind.
    pub fn from_factor(factor: SymmetricFactor) -> Result<Self> {
        let logdet = 2.0 * factor.logdet_w();
        if !logdet.is_finite() {
            return Err(Error::NonFinite("log-determinant"));
        }
        Ok(HodlrFactorization { factor, logdet })
    }

    pub fn n(&self) -> usize {
        self.factor.n
    }

    /// Always true: construction fails on any non-positive pivot.
    pub fn spd_validated(&self) -> bool {
        true
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.factor.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.factor.solve_mat(b)
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `b^T H^{-1} b` as `|W^{-1} b|^2`.
    pub fn quad_form(&self, b: &[f64]) -> Result<f64> {
        let w = self.factor.apply_inverse(b)?;
        Ok(w.iter().map(|x| x * x).sum())
    }

    pub fn factor(&self) -> &SymmetricFactor {
        &self.factor
    }
}

/// Convenience wrappers mirroring the free-function API.
pub fn solve(f: &HodlrFactorization, b: &[f64]) -> Result<Vec<f64>> {
    f.solve(b)
}

pub fn logdet(f: &HodlrFactorization) -> f64 {
    f.logdet()
}

pub fn apply_symmetric_factor(w: &SymmetricFactor, v: &[f64]) -> Result<Vec<f64>> {
    w.apply(v)
}
