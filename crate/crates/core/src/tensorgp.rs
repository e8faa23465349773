//! Tensor-product surface model `y = sum_b beta_b prod_h f_{b,h}(x_h) + e`.
//!
//! Each factor is a unit-variance 1-D GP on the unique values of its axis.
//! A backfitting sweep turns every factor's conditional into a
//! heteroskedastic 1-D draw on pseudo-observations, so an iteration costs a
//! few HODLR solves on axis-sized systems regardless of the number of
//! observations.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{response_scale, Point, PointSet};
use crate::par;
use crate::sampler::{
    self, categorical, normalize_log_weights, rho_log_weights, sample_tau_from_ss, standard_normals, summarize,
    GibbsBackend, GibbsConfig, GridPrecomp, HodlrBackend, PointSummary, PriorSpec,
};

const KIND_F: u64 = 0;
const KIND_RHO: u64 = 1;
const KIND_BETA: u64 = 2;
const KIND_TAU: u64 = 3;
const KIND_PREDICT: u64 = 4;
const KIND_INIT: u64 = 5;

/// Stream layout: iteration, basis, axis, step kind.
fn tensor_rng(seed: u64, iter: usize, basis: usize, axis: usize, kind: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7465_6e73_6f72_6770);
    rng.set_stream(((iter as u64) << 24) | ((basis as u64) << 14) | ((axis as u64) << 4) | kind);
    rng
}

/// Unique sorted values of one input dimension.
#[derive(Debug, Clone)]
pub struct AxisIndex {
    pub values: Vec<f64>,
    /// `index[i]` is the unique-value index of observation `i`.
    pub index: Vec<usize>,
    pub counts: Vec<usize>,
}

impl AxisIndex {
    pub fn new(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("axis values"));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inputs"));
        }
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]).then(i.cmp(&j)));
        let mut values = Vec::new();
        let mut counts = Vec::new();
        let mut index = vec![0; xs.len()];
        for &i in &order {
            if values.last() != Some(&xs[i]) {
                values.push(xs[i]);
                counts.push(0);
            }
            index[i] = values.len() - 1;
            *counts.last_mut().unwrap() += 1;
        }
        Ok(AxisIndex { values, index, counts })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self) -> f64 {
        self.values[self.values.len() - 1] - self.values[0]
    }

    pub fn points(&self) -> Result<PointSet> {
        PointSet::from_scalars(&self.values)
    }
}

pub fn axis_indices(x: &PointSet) -> Result<Vec<AxisIndex>> {
    (0..x.dim()).map(|h| AxisIndex::new(&x.axis(h))).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorConfig {
    pub n_bases: usize,
    /// Append one basis per axis with every other factor fixed at 1.
    /// Experimental.
    pub main_effects: bool,
    pub gibbs: GibbsConfig,
    /// Gamma prior on tau.
    pub a1: f64,
    pub b1: f64,
    /// Length-scale grid size per axis.
    pub grid_size: usize,
    pub beta_prior_var: f64,
    pub precision_floor: f64,
}

impl Default for TensorConfig {
    fn default() -> Self {
        TensorConfig {
            n_bases: 1,
            main_effects: false,
            gibbs: GibbsConfig::default(),
            a1: 1.0,
            b1: 1.0,
            grid_size: 10,
            beta_prior_var: 100.0,
            precision_floor: 1e-12,
        }
    }
}

impl TensorConfig {
    pub fn validate(&self) -> Result<()> {
        self.gibbs.validate()?;
        if self.n_bases == 0 && !self.main_effects {
            return Err(Error::InvalidParameter("n_bases must be >= 1".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidParameter("grid_size must be >= 2".into()));
        }
        for (v, name) in [
            (self.a1, "a1"),
            (self.b1, "b1"),
            (self.beta_prior_var, "beta_prior_var"),
            (self.precision_floor, "precision_floor"),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// Current values of all factors, in scaled response units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorState {
    /// `factors[b][h]` has one entry per unique value of axis `h`.
    pub factors: Vec<Vec<Vec<f64>>>,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub rho_idx: Vec<Vec<usize>>,
    /// `active[b][h]`: false for factors fixed at 1.
    pub active: Vec<Vec<bool>>,
}

impl TensorState {
    pub fn n_bases(&self) -> usize {
        self.beta.len()
    }

    /// `prod_h f_{b,h}` at every observation.
    fn basis_product(&self, b: usize, axes: &[AxisIndex], skip: Option<usize>) -> Vec<f64> {
        let n = axes[0].index.len();
        let mut out = vec![1.0; n];
        for (h, ax) in axes.iter().enumerate() {
            if Some(h) == skip {
                continue;
            }
            let f = &self.factors[b][h];
            for (o, &u) in out.iter_mut().zip(&ax.index) {
                *o *= f[u];
            }
        }
        out
    }

    /// Fitted surface at every observation.
    pub fn fitted(&self, axes: &[AxisIndex]) -> Vec<f64> {
        let n = axes[0].index.len();
        let mut out = vec![0.0; n];
        for b in 0..self.n_bases() {
            let p = self.basis_product(b, axes, None);
            for (o, v) in out.iter_mut().zip(p) {
                *o += self.beta[b] * v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorDraw {
    pub iter: usize,
    pub tau: f64,
    pub beta: Vec<f64>,
    /// Row-major `[b][h]` length-scales.
    pub rho: Vec<f64>,
    pub surface: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TensorTimings {
    pub setup: f64,
    pub sampling: f64,
}

/// Retained draws in original response units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorChain {
    pub draws: Vec<TensorDraw>,
    pub seed: u64,
    pub generator: String,
    pub dim: usize,
    pub n_bases: usize,
    pub axis_sizes: Vec<usize>,
    pub y_scale: f64,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub eps: f64,
    pub timings: TensorTimings,
    pub corr_rebuilds: usize,
    pub final_state: TensorState,
}

impl TensorChain {
    pub fn mean_tau(&self) -> f64 {
        self.draws.iter().map(|d| d.tau).sum::<f64>() / self.draws.len().max(1) as f64
    }

    /// Pointwise mean and 95% interval of the surface at the prediction inputs.
    pub fn surface_summary(&self) -> Option<Vec<PointSummary>> {
        summarize(self.draws.iter().map(|d| d.surface.as_deref()))
    }

    /// `iter,tau,beta_1..,rho_1_1..,s_1..`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Csv(e.to_string());
        let mut header = vec!["iter".to_string(), "tau".to_string()];
        header.extend((1..=self.n_bases).map(|b| format!("beta_{b}")));
        for b in 1..=self.n_bases {
            header.extend((1..=self.dim).map(|h| format!("rho_{b}_{h}")));
        }
        let ns = self
            .draws
            .first()
            .and_then(|d| d.surface.as_ref())
            .map_or(0, |s| s.len());
        header.extend((1..=ns).map(|j| format!("s_{j}")));
        wr.write_record(&header).map_err(err)?;
        for d in &self.draws {
            let mut row = vec![d.iter.to_string(), format!("{:e}", d.tau)];
            row.extend(d.beta.iter().map(|v| format!("{v:e}")));
            row.extend(d.rho.iter().map(|v| format!("{v:e}")));
            if let Some(s) = &d.surface {
                row.extend(s.iter().map(|v| format!("{v:e}")));
            }
            wr.write_record(&row).map_err(err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// CSV of `x_1..x_d,mean,lower95,upper95` over the evaluation inputs.
pub fn write_surface_csv<W: Write>(x_star: &PointSet, summary: &[PointSummary], w: W) -> Result<()> {
    if summary.len() != x_star.len() {
        return Err(Error::DimensionMismatch {
            expected: x_star.len(),
            got: summary.len(),
        });
    }
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    let mut header: Vec<String> = (1..=x_star.dim()).map(|h| format!("x_{h}")).collect();
    header.extend(["mean", "lower95", "upper95"].map(String::from));
    wr.write_record(&header).map_err(err)?;
    for (j, s) in summary.iter().enumerate() {
        let mut row: Vec<String> = x_star.point(j).iter().map(|v| format!("{v}")).collect();
        row.extend([s.mean, s.lower95, s.upper95].map(|v| format!("{v:e}")));
        wr.write_record(&row).map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-axis grids and prediction lookups.
struct Axis<'g> {
    backend: HodlrBackend<'g>,
    rhos: Vec<f64>,
    logdets: Vec<f64>,
    /// For each prediction input, index into the axis's unique prediction values.
    star_index: Vec<usize>,
}

fn build_grids(axes: &[AxisIndex], cfg: &TensorConfig) -> Result<Vec<GridPrecomp>> {
    let g = &cfg.gibbs;
    // axes are few and each build is internally parallel
    par::try_map_indexed(par::Exec::Sequential, axes.len(), |h| {
        let ax = &axes[h];
        let range = if ax.len() > 1 { ax.range() } else { 1.0 };
        let priors = PriorSpec::default_for_range(range, cfg.grid_size)?;
        GridPrecomp::build(
            &ax.points()?,
            &priors.rho_grid,
            g.nugget,
            g.eps * g.grid_headroom,
            g.leaf_size,
            g.exec,
        )
    })
}

/// Run the backfitting Gibbs sampler.
pub fn run_tensor_gibbs(x: &PointSet, y: &[f64], cfg: &TensorConfig, x_star: Option<&PointSet>) -> Result<TensorChain> {
    cfg.validate()?;
    if x.is_empty() {
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
    if let Some(xs) = x_star {
        if xs.dim() != x.dim() {
            return Err(Error::DimensionMismatch {
                expected: x.dim(),
                got: xs.dim(),
            });
        }
    }
    let t0 = Instant::now();
    let d = x.dim();
    let n = x.len();
    let scale = response_scale(y);
    let ys: Vec<f64> = y.iter().map(|v| v / scale).collect();
    let axes = axis_indices(x)?;
    let grids = build_grids(&axes, cfg)?;
    let g = &cfg.gibbs;

    let mut ax_state = Vec::with_capacity(d);
    for (h, grid) in grids.iter().enumerate() {
        let (pred_points, star_index) = match x_star {
            Some(xs) => {
                let idx = AxisIndex::new(&xs.axis(h))?;
                (Some(idx.points()?), idx.index)
            }
            None => (None, Vec::new()),
        };
        ax_state.push(Axis {
            backend: HodlrBackend::new(grid, g.eps, g.grid_headroom, pred_points),
            rhos: grid.rhos(),
            logdets: grid.logdets(),
            star_index,
        });
    }

    // bases: the regular ones, then optional main effects
    let mut active = vec![vec![true; d]; cfg.n_bases];
    if cfg.main_effects {
        for h in 0..d {
            let mut a = vec![false; d];
            a[h] = true;
            active.push(a);
        }
    }
    let nb = active.len();
    let mut init = tensor_rng(g.seed, 0, 0, 0, KIND_INIT);
    let mut factors = Vec::with_capacity(nb);
    for (b, act) in active.iter().enumerate() {
        let mut fb = Vec::with_capacity(d);
        for (h, ax) in axes.iter().enumerate() {
            if b == 0 || !act[h] || (cfg.main_effects && b >= cfg.n_bases) {
                fb.push(vec![1.0; ax.len()]);
            } else {
                fb.push(
                    standard_normals(&mut init, ax.len())
                        .into_iter()
                        .map(|v| 0.1 * v)
                        .collect(),
                );
            }
        }
        factors.push(fb);
    }
    let mid = cfg.grid_size / 2;
    let mut state = TensorState {
        factors,
        beta: vec![1.0; nb],
        tau: 1.0,
        rho_idx: vec![vec![mid; d]; nb],
        active,
    };
    let setup = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut draws = Vec::with_capacity(g.retained());
    let floor = cfg.precision_floor;
    for t in 0..g.iters {
        let step = |e: Error| e.at_iteration(t);
        for b in 0..nb {
            // residual without basis b
            let mut r = ys.clone();
            for b2 in (0..nb).filter(|&b2| b2 != b) {
                let p = state.basis_product(b2, &axes, None);
                for (ri, pi) in r.iter_mut().zip(p) {
                    *ri -= state.beta[b2] * pi;
                }
            }
            for h in 0..d {
                if !state.active[b][h] {
                    continue;
                }
                let ax = &axes[h];
                let gprod = state.basis_product(b, &axes, Some(h));
                let u = ax.len();
                let mut prec = vec![0.0; u];
                let mut num = vec![0.0; u];
                for i in 0..n {
                    let gi = state.beta[b] * gprod[i];
                    prec[ax.index[i]] += state.tau * gi * gi;
                    num[ax.index[i]] += state.tau * gi * r[i];
                }
                let ybar: Vec<f64> = prec
                    .iter()
                    .zip(&num)
                    .map(|(p, q)| if *p > floor { q / p } else { 0.0 })
                    .collect();
                for p in prec.iter_mut() {
                    *p = p.max(floor);
                }
                let axis = &ax_state[h];
                let mut rng = tensor_rng(g.seed, t, b, h, KIND_F);
                let za = standard_normals(&mut rng, u);
                let zb = standard_normals(&mut rng, u);
                let l = state.rho_idx[b][h];
                let f = axis
                    .backend
                    .draw_f(l, 1.0, 1.0, &ybar, Some(&prec), &za, &zb)
                    .map_err(step)?;
                let quads = axis.backend.quad_forms(&f).map_err(step)?;
                let probs = normalize_log_weights(&rho_log_weights(&quads, &axis.logdets, u, 1.0)).map_err(step)?;
                let mut rng = tensor_rng(g.seed, t, b, h, KIND_RHO);
                state.rho_idx[b][h] = categorical(&probs, rng.random::<f64>());
                state.factors[b][h] = f;
            }
            // beta_b | rest: conjugate normal
            let xcol = state.basis_product(b, &axes, None);
            let xx: f64 = xcol.iter().map(|v| v * v).sum();
            let xr: f64 = xcol.iter().zip(&r).map(|(a, b)| a * b).sum();
            let post_prec = state.tau * xx + 1.0 / cfg.beta_prior_var;
            let mut rng = tensor_rng(g.seed, t, b, 0, KIND_BETA);
            let z: f64 = rng.sample(StandardNormal);
            state.beta[b] = state.tau * xr / post_prec + z / post_prec.sqrt();
        }
        let fit = state.fitted(&axes);
        let ss: f64 = ys.iter().zip(&fit).map(|(a, b)| (a - b) * (a - b)).sum();
        let mut rng = tensor_rng(g.seed, t, 0, 0, KIND_TAU);
        state.tau = sample_tau_from_ss(ss, n, cfg.a1, cfg.b1, &mut rng).map_err(step)?;

        if t >= g.burn_in && (t - g.burn_in + 1).is_multiple_of(g.thin) {
            let surface = match x_star {
                Some(xs) => Some(surface_draw(&state, &ax_state, xs.len(), g.seed, t).map_err(step)?),
                None => None,
            };
            draws.push(TensorDraw {
                iter: t,
                tau: state.tau / (scale * scale),
                beta: state.beta.iter().map(|v| v * scale).collect(),
                rho: (0..nb)
                    .flat_map(|b| (0..d).map(move |h| (b, h)))
                    .map(|(b, h)| ax_state[h].rhos[state.rho_idx[b][h]])
                    .collect(),
                surface: surface.map(|s| s.into_iter().map(|v| v * scale).collect()),
            });
        }
    }
    let sampling = t1.elapsed().as_secs_f64();
    Ok(TensorChain {
        draws,
        seed: g.seed,
        generator: sampler::GENERATOR.to_string(),
        dim: d,
        n_bases: nb,
        axis_sizes: axes.iter().map(|a| a.len()).collect(),
        y_scale: scale,
        iters: g.iters,
        burn_in: g.burn_in,
        thin: g.thin,
        eps: g.eps,
        timings: TensorTimings { setup, sampling },
        corr_rebuilds: ax_state.iter().map(|a| a.backend.corr_rebuilds()).sum(),
        final_state: state,
    })
}

/// Surface draw: every factor drawn from its 1-D predictive distribution.
fn surface_draw(state: &TensorState, axes: &[Axis], m: usize, seed: u64, t: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m];
    for b in 0..state.n_bases() {
        let mut prod = vec![state.beta[b]; m];
        for (h, axis) in axes.iter().enumerate() {
            if !state.active[b][h] {
                continue;
            }
            let (mu, var) = axis.backend.predict(state.rho_idx[b][h], &state.factors[b][h], 1.0)?;
            let mut rng = tensor_rng(seed, t, b, h, KIND_PREDICT);
            let z = standard_normals(&mut rng, mu.len());
            let fstar: Vec<f64> = mu
                .iter()
                .zip(&var)
                .zip(&z)
                .map(|((m, v), z)| m + v.sqrt() * z)
                .collect();
            for (p, &k) in prod.iter_mut().zip(&axis.star_index) {
                *p *= fstar[k];
            }
        }
        for (o, p) in out.iter_mut().zip(prod) {
            *o += p;
        }
    }
    Ok(out)
}

/// Surface value `sum_b beta_b prod_h f*_{b,h}(x*_h)` using 1-D predictive
/// means, in the state's (scaled) units. `grids[h]` must be the grid the
/// state's axis-`h` factors were sampled on.
pub fn tensor_predict(x_star: &Point, state: &TensorState, grids: &[&GridPrecomp]) -> Result<f64> {
    let d = x_star.dim();
    if grids.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: grids.len(),
        });
    }
    let mut total = 0.0;
    for b in 0..state.n_bases() {
        let mut prod = state.beta[b];
        for (h, grid) in grids.iter().enumerate() {
            if !state.active[b][h] {
                continue;
            }
            let (mu, _) = sampler::predict(
                &Point::scalar(x_star.coords()[h]),
                &state.factors[b][h],
                grid,
                state.rho_idx[b][h],
                1.0,
            )?;
            prod *= mu;
        }
        total += prod;
    }
    Ok(total)
}
