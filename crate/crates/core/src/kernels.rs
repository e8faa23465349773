//! Squared-exponential covariance kernel, input ordering, duplicate collapse
//! and dense covariance construction.
//!
//! The kernel is `k(a, b) = sigma_f_sq * exp(-rho * |a - b|^2)`. A length
//! scale `l` in the `exp(-|a - b|^2 / (2 l^2))` convention corresponds to
//! `rho = 1 / (2 l^2)`.

use std::cmp::Ordering;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest `n` for which dense `n x n` matrices are built by default.
pub const DEFAULT_DENSE_LIMIT: usize = 8192;

/// Default nugget, relative to the function variance.
pub const DEFAULT_RELATIVE_NUGGET: f64 = 1e-10;

/// A single input location.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(pub Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("point coordinates"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        Ok(Point(coords))
    }

    pub fn scalar(x: f64) -> Self {
        Point(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// Flat storage for `n` points of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("point dimension must be >= 1".into()));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim * (coords.len() / dim + 1),
                got: coords.len(),
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        Ok(PointSet { dim, coords })
    }

    /// One-dimensional points.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        PointSet::new(1, xs.to_vec())
    }

    pub fn from_points(points: &[Point]) -> Result<Self> {
        let first = points.first().ok_or(Error::Empty("point list"))?;
        let dim = first.dim();
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.dim(),
                });
            }
            coords.extend_from_slice(p.coords());
        }
        PointSet::new(dim, coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_point(&self, i: usize) -> Point {
        Point(self.point(i).to_vec())
    }

    /// Coordinates of a 1-D set as a plain slice.
    pub fn as_scalars(&self) -> Option<&[f64]> {
        (self.dim == 1).then_some(&self.coords[..])
    }

    /// Points reordered so that output `k` is input `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> PointSet {
        let mut coords = Vec::with_capacity(perm.len() * self.dim);
        for &i in perm {
            coords.extend_from_slice(self.point(i));
        }
        PointSet { dim: self.dim, coords }
    }

    /// Contiguous sub-range of points.
    pub fn slice(&self, start: usize, len: usize) -> PointSet {
        PointSet {
            dim: self.dim,
            coords: self.coords[start * self.dim..(start + len) * self.dim].to_vec(),
        }
    }

    /// Coordinates along one axis.
    pub fn axis(&self, h: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)[h]).collect()
    }
}

/// Parameters of the squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub sigma_f_sq: f64,
    pub rho: f64,
    pub nugget: f64,
}

impl KernelParams {
    pub fn new(sigma_f_sq: f64, rho: f64, nugget: f64) -> Result<Self> {
        let p = KernelParams {
            sigma_f_sq,
            rho,
            nugget,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit-variance correlation kernel with the default relative nugget.
    pub fn correlation(rho: f64) -> Self {
        KernelParams {
            sigma_f_sq: 1.0,
            rho,
            nugget: DEFAULT_RELATIVE_NUGGET,
        }
    }

    /// Parameters for a length scale `l` in the `exp(-d^2 / (2 l^2))` form.
    pub fn from_length_scale(sigma_f_sq: f64, length_scale: f64, nugget: f64) -> Result<Self> {
        if !(length_scale > 0.0) {
            return Err(Error::InvalidParameter("length scale must be > 0".into()));
        }
        KernelParams::new(sigma_f_sq, 1.0 / (2.0 * length_scale * length_scale), nugget)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma_f_sq.is_finite() || !self.rho.is_finite() || !self.nugget.is_finite() {
            return Err(Error::NonFinite("kernel parameters"));
        }
        if self.sigma_f_sq <= 0.0 {
            return Err(Error::InvalidParameter("sigma_f_sq must be > 0".into()));
        }
        if self.rho <= 0.0 {
            return Err(Error::InvalidParameter("rho must be > 0".into()));
        }
        if self.nugget < 0.0 {
            return Err(Error::InvalidParameter("nugget must be >= 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn eval_slices(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.sigma_f_sq * (-self.rho * d2).exp()
    }
}

/// `sigma_f_sq * exp(-rho * |a - b|^2)`; the nugget is not included.
pub fn eval_kernel(a: &Point, b: &Point, p: &KernelParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.0.iter().chain(&b.0).any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("kernel inputs"));
    }
    p.validate()?;
    Ok(p.eval_slices(a.coords(), b.coords()))
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Ordering permutation: `perm[k]` is the index of the `k`-th point.
///
/// One-dimensional inputs are sorted ascending. Higher-dimensional inputs are
/// placed in kd-tree leaf order: recursive median splits that cycle through
/// the dimensions, stopping once a cell holds at most `leaf_size` points.
pub fn sort_inputs(points: &PointSet, leaf_size: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    let mut perm: Vec<usize> = (0..points.len()).collect();
    if points.dim() == 1 {
        perm.sort_by(|&i, &j| points.point(i)[0].total_cmp(&points.point(j)[0]).then(i.cmp(&j)));
        return Ok(perm);
    }
    kd_order(points, &mut perm, 0, leaf_size.max(1));
    Ok(perm)
}

fn kd_order(points: &PointSet, idx: &mut [usize], depth: usize, leaf_size: usize) {
    if idx.len() <= leaf_size {
        return;
    }
    let axis = depth % points.dim();
    idx.sort_by(|&i, &j| {
        let (a, b) = (points.point(i), points.point(j));
        a[axis].total_cmp(&b[axis]).then_with(|| lex_cmp(a, b)).then(i.cmp(&j))
    });
    let mid = idx.len() / 2;
    let (left, right) = idx.split_at_mut(mid);
    kd_order(points, left, depth + 1, leaf_size);
    kd_order(points, right, depth + 1, leaf_size);
}

/// How collapsed duplicates scale the noise precision of their averaged
/// response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplicateWeighting {
    /// Precision `|Q_i| * tau`: the precision of a mean of `|Q_i|` observations.
    #[default]
    Linear,
    /// Precision `|Q_i|^2 * tau`.
    Squared,
}

/// Observations collapsed onto sorted unique inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub unique_points: PointSet,
    /// `perm[h]` is the unique-point index of original observation `h`.
    pub perm: Vec<usize>,
    /// Group means of the scaled responses.
    pub y_avg: Vec<f64>,
    pub multiplicities: Vec<usize>,
    /// Responses were divided by this before averaging.
    pub y_scale: f64,
    /// Sum of squared within-group deviations of the scaled responses.
    pub within_ss: f64,
    pub weighting: DuplicateWeighting,
}

impl Dataset {
    pub fn n_obs(&self) -> usize {
        self.perm.len()
    }

    pub fn n_unique(&self) -> usize {
        self.y_avg.len()
    }

    pub fn has_duplicates(&self) -> bool {
        self.n_unique() < self.n_obs()
    }

    /// Per-entry multiplier on the noise precision.
    pub fn precision_multipliers(&self) -> Vec<f64> {
        self.multiplicities
            .iter()
            .map(|&m| match self.weighting {
                DuplicateWeighting::Linear => m as f64,
                DuplicateWeighting::Squared => (m * m) as f64,
            })
            .collect()
    }

    /// Scaled responses expanded back to the original observations.
    pub fn expand(&self, per_unique: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&u| per_unique[u]).collect()
    }

    /// Input range (max - min over all coordinates), used for grid heuristics.
    pub fn input_range(&self) -> f64 {
        let mut range = 0.0f64;
        for h in 0..self.unique_points.dim() {
            let axis = self.unique_points.axis(h);
            let lo = axis.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = axis.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            range = range.max(hi - lo);
        }
        range
    }
}

/// Sample standard deviation, or 1 when it is zero or undefined.
pub fn response_scale(y: &[f64]) -> f64 {
    if y.len() < 2 {
        return 1.0;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd.is_finite() && sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Collapse duplicate inputs with default weighting and response scaling.
pub fn collapse_duplicates(x: &PointSet, y: &[f64]) -> Result<Dataset> {
    collapse_duplicates_with(x, y, DuplicateWeighting::default(), Some(response_scale(y)), 64)
}

/// Collapse duplicate inputs.
///
/// `y_scale = None` leaves responses unscaled. `leaf_size` drives the kd-tree
/// ordering of multi-dimensional inputs.
pub fn collapse_duplicates_with(
    x: &PointSet,
    y: &[f64],
    weighting: DuplicateWeighting,
    y_scale: Option<f64>,
    leaf_size: usize,
) -> Result<Dataset> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("observations"));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("responses"));
    }
    let scale = y_scale.unwrap_or(1.0);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter("y_scale must be positive".into()));
    }

    // Group identical points via a lexicographic sort.
    let mut lex: Vec<usize> = (0..x.len()).collect();
    lex.sort_by(|&i, &j| lex_cmp(x.point(i), x.point(j)).then(i.cmp(&j)));
    let mut group_first: Vec<usize> = Vec::new();
    let mut group_of = vec![0usize; x.len()];
    for (k, &i) in lex.iter().enumerate() {
        if k == 0 || lex_cmp(x.point(lex[k - 1]), x.point(i)) != Ordering::Equal {
            group_first.push(i);
        }
        group_of[i] = group_first.len() - 1;
    }
    let groups = PointSet::new(x.dim(), group_first.iter().flat_map(|&i| x.point(i).to_vec()).collect())?;

    // Order the unique points.
    let order = sort_inputs(&groups, leaf_size)?;
    let mut rank = vec![0usize; order.len()];
    for (k, &g) in order.iter().enumerate() {
        rank[g] = k;
    }
    let unique_points = groups.permuted(&order);
    let u = unique_points.len();

    let mut sums = vec![0.0; u];
    let mut counts = vec![0usize; u];
    let perm: Vec<usize> = group_of.iter().map(|&g| rank[g]).collect();
    for (h, &k) in perm.iter().enumerate() {
        sums[k] += y[h] / scale;
        counts[k] += 1;
    }
    let y_avg: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let within_ss = perm
        .iter()
        .enumerate()
        .map(|(h, &k)| {
            let d = y[h] / scale - y_avg[k];
            d * d
        })
        .sum();

    Ok(Dataset {
        unique_points,
        perm,
        y_avg,
        multiplicities: counts,
        y_scale: scale,
        within_ss,
        weighting,
    })
}

/// Dense kernel matrix with the nugget on the diagonal.
///
/// When `noise_precisions` is given, `1 / d_i` is also added to diagonal `i`
/// (the covariance of noisy observations, `K + D^{-1}`).
pub fn build_dense_covariance(
    points: &PointSet,
    p: &KernelParams,
    noise_precisions: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    build_dense_covariance_with_limit(points, p, noise_precisions, DEFAULT_DENSE_LIMIT)
}

pub fn build_dense_covariance_with_limit(
    points: &PointSet,
    p: &KernelParams,
    noise_precisions: Option<&[f64]>,
    limit: usize,
) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n > limit {
        return Err(Error::DenseLimit { n, limit });
    }
    p.validate()?;
    if let Some(d) = noise_precisions {
        if d.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: d.len(),
            });
        }
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("noise precisions must be > 0".into()));
        }
    }
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let v = p.eval_slices(points.point(i), points.point(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        let mut diag = p.sigma_f_sq + p.nugget;
        if let Some(d) = noise_precisions {
            diag += 1.0 / d[j];
        }
        k[(j, j)] = diag;
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix"));
    }
    Ok(k)
}

/// Observations read from a CSV file with header `x1,...,xd,y`.
#[derive(Debug, Clone)]
pub struct Observations {
    pub x: PointSet,
    pub y: Vec<f64>,
}

/// Read observations from a CSV reader.
pub fn read_observations<R: Read>(reader: R) -> Result<Observations> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Csv(format!("header: {e}")))?.clone();
    if headers.len() < 2 {
        return Err(Error::Csv(format!(
            "header must have at least one input column and a response column, found {} column(s)",
            headers.len()
        )));
    }
    let dim = headers.len() - 1;
    let mut coords = Vec::new();
    let mut y = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Csv(format!("row {line}: {e}")))?;
        if rec.len() != dim + 1 {
            return Err(Error::Csv(format!(
                "row {line}: expected {} columns, found {}",
                dim + 1,
                rec.len()
            )));
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Csv(format!(
                    "row {line}, column {} ('{}'): cannot parse '{field}' as a number",
                    col + 1,
                    &headers[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Csv(format!("row {line}, column {}: non-finite value", col + 1)));
            }
            if col < dim {
                coords.push(v);
            } else {
                y.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Csv("no data rows".into()));
    }
    Ok(Observations {
        x: PointSet::new(dim, coords)?,
        y,
    })
}

pub fn read_observations_path(path: &Path) -> Result<Observations> {
    let f = std::fs::File::open(path)?;
    read_observations(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn p(s: f64, r: f64) -> KernelParams {
        KernelParams::new(s, r, 0.0).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let a = Point::scalar(0.5);
        assert_eq!(eval_kernel(&a, &a, &p(2.3, 1.7)).unwrap(), 2.3);
        let v = eval_kernel(&Point::scalar(0.0), &Point::scalar(1.0), &p(1.0, 1.0)).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        let v = eval_kernel(&Point::scalar(0.0), &Point::scalar(10.0), &p(1.0, 1.0)).unwrap();
        assert!((v / (-100.0f64).exp() - 1.0).abs() < 1e-12);
        assert!((v - 3.72e-44).abs() < 1e-46);
    }

    #[test]
    fn kernel_errors() {
        let a = Point(vec![0.0]);
        let b = Point(vec![0.0, 1.0]);
        assert!(matches!(
            eval_kernel(&a, &b, &p(1.0, 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
        let c = Point(vec![f64::NAN]);
        assert!(matches!(eval_kernel(&a, &c, &p(1.0, 1.0)), Err(Error::NonFinite(_))));
        assert!(Point::new(vec![f64::INFINITY]).is_err());
        assert!(KernelParams::new(0.0, 1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 0.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, -1e-3).is_err());
    }

    #[test]
    fn length_scale_conversion() {
        let k = KernelParams::from_length_scale(1.0, 0.5, 0.0).unwrap();
        assert!((k.rho - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sort_examples() {
        let x = PointSet::from_scalars(&[0.3, 0.1, 0.2]).unwrap();
        assert_eq!(sort_inputs(&x, 64).unwrap(), vec![1, 2, 0]);
        let x = PointSet::from_scalars(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(sort_inputs(&x, 64).unwrap(), vec![0, 1, 2, 3]);
        assert!(sort_inputs(&PointSet::from_scalars(&[]).unwrap(), 8).is_err());
    }

    /// Independent recursive median split: returns leaf cells as sets.
    fn reference_cells(pts: &[(f64, f64)], depth: usize, leaf: usize, out: &mut Vec<Vec<(f64, f64)>>) {
        if pts.len() <= leaf {
            out.push(pts.to_vec());
            return;
        }
        let mut v = pts.to_vec();
        if depth.is_multiple_of(2) {
            v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
        } else {
            v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.partial_cmp(&b.0).unwrap()));
        }
        let mid = v.len() / 2;
        reference_cells(&v[..mid], depth + 1, leaf, out);
        reference_cells(&v[mid..], depth + 1, leaf, out);
    }

    #[test]
    fn kd_order_on_grid() {
        let mut coords = Vec::new();
        let mut pts = Vec::new();
        // Scramble the grid so the ordering has real work to do.
        for k in 0..64usize {
            let idx = (k * 37) % 64;
            let (i, j) = ((idx / 8) as f64, (idx % 8) as f64);
            coords.extend([i, j]);
            pts.push((i, j));
        }
        let set = PointSet::new(2, coords).unwrap();
        let perm = sort_inputs(&set, 8).unwrap();
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());

        let mut cells = Vec::new();
        reference_cells(&pts, 0, 8, &mut cells);
        assert_eq!(cells.len(), 8);
        for (c, cell) in cells.iter().enumerate() {
            let mut got: Vec<(f64, f64)> = perm[c * 8..(c + 1) * 8]
                .iter()
                .map(|&i| (set.point(i)[0], set.point(i)[1]))
                .collect();
            let mut want = cell.clone();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want, "cell {c}");
            // every block of 8 lies on one side of the first split (x < 4 or x >= 4)
            let left = got.iter().all(|q| q.0 < 4.0);
            let right = got.iter().all(|q| q.0 >= 4.0);
            assert!(left ^ right);
        }
    }

    #[test]
    fn collapse_examples() {
        let x = PointSet::from_scalars(&[1.0, 1.0, 2.0]).unwrap();
        let ds = collapse_duplicates_with(&x, &[2.0, 4.0, 6.0], DuplicateWeighting::Linear, None, 64).unwrap();
        assert_eq!(ds.unique_points.as_scalars().unwrap(), &[1.0, 2.0]);
        assert_eq!(ds.y_avg, vec![3.0, 6.0]);
        assert_eq!(ds.multiplicities, vec![2, 1]);
        assert_eq!(ds.precision_multipliers(), vec![2.0, 1.0]);
        assert_eq!(ds.within_ss, 2.0);

        let ds = collapse_duplicates_with(&x, &[2.0, 4.0, 6.0], DuplicateWeighting::Squared, None, 64).unwrap();
        assert_eq!(ds.precision_multipliers(), vec![4.0, 1.0]);

        let x = PointSet::from_scalars(&[0.3, 0.1, 0.2]).unwrap();
        let ds = collapse_duplicates_with(&x, &[1.0, 2.0, 3.0], DuplicateWeighting::Linear, None, 64).unwrap();
        assert_eq!(ds.multiplicities, vec![1, 1, 1]);
        assert_eq!(ds.y_avg, vec![2.0, 3.0, 1.0]);
        assert_eq!(ds.perm, vec![2, 0, 1]);

        let x = PointSet::from_scalars(&[0.0, 0.0, 0.0]).unwrap();
        let ds = collapse_duplicates_with(&x, &[1.0, 2.0, 3.0], DuplicateWeighting::Linear, None, 64).unwrap();
        assert_eq!(ds.y_avg, vec![2.0]);
        assert_eq!(ds.multiplicities, vec![3]);

        assert!(collapse_duplicates(&PointSet::from_scalars(&[]).unwrap(), &[]).is_err());
        assert!(collapse_duplicates(&PointSet::from_scalars(&[1.0]).unwrap(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn response_scaling_recorded() {
        let x = PointSet::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
        let y = [1.0, 2.0, 3.0];
        let ds = collapse_duplicates(&x, &y).unwrap();
        assert!((ds.y_scale - 1.0).abs() < 1e-15);
        let y = [2.0, 4.0, 6.0];
        let ds = collapse_duplicates(&x, &y).unwrap();
        assert!((ds.y_scale - 2.0).abs() < 1e-15);
        assert_eq!(ds.y_avg, vec![1.0, 2.0, 3.0]);
        let ds = collapse_duplicates(&x, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ds.y_scale, 1.0);
    }

    #[test]
    fn dense_covariance_examples() {
        let k = KernelParams::new(1.0, 1.0, 0.0).unwrap();
        let m = build_dense_covariance(&PointSet::from_scalars(&[0.4]).unwrap(), &k, None).unwrap();
        assert_eq!(m[(0, 0)], 1.0);

        let k = KernelParams::new(2.0, 3.0, 0.25).unwrap();
        let m = build_dense_covariance(&PointSet::from_scalars(&[0.7, 0.7]).unwrap(), &k, None).unwrap();
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(1, 0)], 2.0);
        assert_eq!(m[(0, 0)], 2.25);
        assert_eq!(m[(1, 1)], 2.25);

        let m = build_dense_covariance(&PointSet::from_scalars(&[0.0, 1.0]).unwrap(), &k, Some(&[4.0, 2.0])).unwrap();
        assert_eq!(m[(0, 0)], 2.5);
        assert_eq!(m[(1, 1)], 2.75);

        let big = PointSet::from_scalars(&[0.0; 20]).unwrap();
        assert!(matches!(
            build_dense_covariance_with_limit(&big, &k, None, 10),
            Err(Error::DenseLimit { n: 20, limit: 10 })
        ));
    }

    #[test]
    fn si_example_matches_closed_form() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let mut xs: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        xs.sort_by(f64::total_cmp);
        let pts = PointSet::from_scalars(&xs).unwrap();
        let k = KernelParams::new(1.0, 4.0, 0.0).unwrap();
        let m = build_dense_covariance(&pts, &k, None).unwrap();
        for i in 0..200 {
            for j in 0..200 {
                let want = (-4.0 * (xs[i] - xs[j]).powi(2)).exp();
                assert_eq!(m[(i, j)], want);
            }
        }
    }

    #[test]
    fn dense_covariance_spectrum_respects_nugget() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64 / 59.0).collect();
        let k = KernelParams::new(1.5, 2.0, 1e-3).unwrap();
        let m = build_dense_covariance(&PointSet::from_scalars(&xs).unwrap(), &k, None).unwrap();
        assert_eq!(m, m.transpose());
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= 1e-3 - 1e-12, "min eigenvalue {min}");
    }

    #[test]
    fn csv_ingestion() {
        let text = "x1,x2,y\n0.5,1.0,2.0\n1.5, 2.0 ,3.0\n";
        let obs = read_observations(text.as_bytes()).unwrap();
        assert_eq!(obs.x.dim(), 2);
        assert_eq!(obs.x.len(), 2);
        assert_eq!(obs.y, vec![2.0, 3.0]);

        let bad = "x1,y\n0.5,abc\n";
        let err = read_observations(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
        let short = "x1,y\n0.5\n";
        assert!(read_observations(short.as_bytes()).is_err());
        assert!(read_observations("x1,y\n".as_bytes()).is_err());
        assert!(read_observations("y\n1.0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(
            a in prop::collection::vec(-10.0f64..10.0, 2),
            b in prop::collection::vec(-10.0f64..10.0, 2),
            s in 0.01f64..10.0,
            r in 0.01f64..10.0,
        ) {
            let k = KernelParams::new(s, r, 0.0).unwrap();
            let (pa, pb) = (Point(a.clone()), Point(b.clone()));
            let ab = eval_kernel(&pa, &pb, &k).unwrap();
            let ba = eval_kernel(&pb, &pa, &k).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= s);
            prop_assert!(ab >= 0.0);
            if a == b { prop_assert_eq!(ab, s); }
        }

        #[test]
        fn sorting_is_idempotent(xs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..120)) {
            let coords: Vec<f64> = xs.iter().flat_map(|&(a, b)| [a, b]).collect();
            let set = PointSet::new(2, coords).unwrap();
            let perm = sort_inputs(&set, 8).unwrap();
            let once = set.permuted(&perm);
            let again = once.permuted(&sort_inputs(&once, 8).unwrap());
            prop_assert_eq!(once, again);

            let xs1: Vec<f64> = xs.iter().map(|p| p.0).collect();
            let s1 = PointSet::from_scalars(&xs1).unwrap();
            let o1 = s1.permuted(&sort_inputs(&s1, 8).unwrap());
            let a1 = o1.permuted(&sort_inputs(&o1, 8).unwrap());
            prop_assert_eq!(o1, a1);
        }

        #[test]
        fn collapse_preserves_counts_and_means(
            raw in prop::collection::vec((0u8..6, -3.0f64..3.0), 1..60)
        ) {
            let xs: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let ys: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let ds = collapse_duplicates_with(
                &PointSet::from_scalars(&xs).unwrap(), &ys, DuplicateWeighting::Linear, None, 64,
            ).unwrap();
            prop_assert_eq!(ds.multiplicities.iter().sum::<usize>(), xs.len());
            let u = ds.unique_points.as_scalars().unwrap();
            prop_assert!(u.windows(2).all(|w| w[0] < w[1]));
            for (k, &ux) in u.iter().enumerate() {
                let group: Vec<f64> = xs.iter().zip(&ys).filter(|(x, _)| **x == ux).map(|(_, y)| *y).collect();
                let mean = group.iter().sum::<f64>() / group.len() as f64;
                prop_assert!((ds.y_avg[k] - mean).abs() < 1e-12);
            }
            for (h, &k) in ds.perm.iter().enumerate() {
                prop_assert_eq!(u[k], xs[h]);
            }
        }
    }
}
