use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hodlr_gp::kernels::{collapse_duplicates_with, read_observations_path, response_scale, PointSet};
use hodlr_gp::oracle::{self, BoundInputs, CellStatus};
use hodlr_gp::sampler::{self, GridPrecomp, PointSummary};
use hodlr_gp::tensorgp::{self, axis_indices};
use log::info;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::config::RunConfig;

/// Outcome of a run: `Ok(false)` means a requested check failed.
pub type Status = Result<bool>;

const HOLDOUT_STREAM: u64 = 0x0068_6f6c_646f_7574;

/// Indices of the `ceil(frac * n)` held-out observations, ascending.
pub fn holdout_indices(n: usize, frac: f64, seed: u64) -> Vec<usize> {
    let k = (frac * n as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ HOLDOUT_STREAM));
    let mut h = idx[..k.min(n)].to_vec();
    h.sort_unstable();
    h
}

struct Split {
    train_x: PointSet,
    train_y: Vec<f64>,
    test_x: Option<PointSet>,
    test_y: Vec<f64>,
}

fn split(x: &PointSet, y: &[f64], cfg: &RunConfig) -> Result<Split> {
    let held = holdout_indices(y.len(), cfg.holdout, cfg.seed);
    if held.len() >= y.len() {
        bail!("holdout leaves no training data");
    }
    let mut is_held = vec![false; y.len()];
    for &i in &held {
        is_held[i] = true;
    }
    let pick = |keep: bool| -> Result<(PointSet, Vec<f64>)> {
        let mut c = Vec::new();
        let mut v = Vec::new();
        for i in (0..y.len()).filter(|&i| is_held[i] == keep) {
            c.extend_from_slice(x.point(i));
            v.push(y[i]);
        }
        Ok((PointSet::new(x.dim(), c)?, v))
    };
    let (train_x, train_y) = pick(false)?;
    let (test_x, test_y) = if held.is_empty() {
        (None, Vec::new())
    } else {
        let (a, b) = pick(true)?;
        (Some(a), b)
    };
    Ok(Split {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(
        File::create(&p).with_context(|| format!("creating {}", p.display()))?,
    ))
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn axis_range(x: &PointSet, h: usize) -> f64 {
    let a = x.axis(h);
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// MSPE against held-out responses and CI area (mean width times input volume).
fn scores(summary: &[PointSummary], test_y: &[f64], volume: f64) -> (Option<f64>, f64) {
    let width = summary.iter().map(|s| s.upper95 - s.lower95).sum::<f64>() / summary.len().max(1) as f64;
    let mspe = (!test_y.is_empty()).then(|| {
        summary
            .iter()
            .zip(test_y)
            .map(|(s, y)| (s.mean - y).powi(2))
            .sum::<f64>()
            / test_y.len() as f64
    });
    (mspe, width * volume)
}

fn strip_timings(mut meta: Value) -> Value {
    if let Value::Object(m) = &mut meta {
        m.remove("timings");
    }
    meta
}

/// The run config as recorded in metadata; the output location is not part of it.
fn config_json(cfg: &RunConfig) -> Result<Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Value::Object(m) = &mut v {
        m.remove("out_dir");
    }
    Ok(v)
}

pub fn run_fit(cfg: &RunConfig) -> Status {
    let path = cfg.data.as_deref().expect("validated");
    let obs = read_observations_path(path)?;
    if obs.x.dim() != 1 {
        bail!("fit expects 1-D inputs, found {} columns; use fit-tensor", obs.x.dim());
    }
    let sp = split(&obs.x, &obs.y, cfg)?;
    let ds = collapse_duplicates_with(
        &sp.train_x,
        &sp.train_y,
        cfg.weighting.into(),
        Some(response_scale(&sp.train_y)),
        cfg.leaf_size,
    )?;
    let range = ds.input_range();
    let priors = cfg.priors(range)?;
    let x_star = match &sp.test_x {
        Some(t) => t.clone(),
        None => {
            let xs = sp.train_x.axis(0);
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let m = cfg.predict_points.max(2);
            PointSet::from_scalars(
                &(0..m)
                    .map(|i| lo + range * i as f64 / (m - 1) as f64)
                    .collect::<Vec<_>>(),
            )?
        }
    };
    info!(
        "fit: {} observations, {} unique, holdout {}",
        obs.y.len(),
        ds.n_unique(),
        sp.test_y.len()
    );
    let chain = sampler::run_gibbs(&ds, &priors, &cfg.gibbs(), Some(&x_star))?;
    let summary = chain.f_star_summary().context("no retained draws")?;

    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = create(&cfg.out_dir, "chain.csv")?;
    chain.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out_dir, "predictions.csv")?;
    tensorgp::write_surface_csv(&x_star, &summary, &mut w)?;
    w.flush()?;

    let (mspe, ci_area) = scores(&summary, &sp.test_y, range);
    let mut meta = strip_timings(chain.metadata_json());
    meta["config"] = config_json(cfg)?;
    write_json(&cfg.out_dir, "metadata.json", &meta)?;
    write_json(
        &cfg.out_dir,
        "summary.json",
        &json!({
            "mode": "fit",
            "n_obs": obs.y.len(),
            "n_train": sp.train_y.len(),
            "n_holdout": sp.test_y.len(),
            "n_unique": ds.n_unique(),
            "retained": chain.draws.len(),
            "mspe": mspe,
            "ci_area": ci_area,
            "mean_tau": chain.mean_tau(),
            "mean_sigma_f_sq": chain.mean_sigma_f_sq(),
            "mean_rho": chain.mean_rho(),
            "corr_rebuilds": chain.corr_rebuilds,
        }),
    )?;
    write_json(&cfg.out_dir, "timings.json", &serde_json::to_value(&chain.timings)?)?;
    report_scores(mspe, ci_area);
    Ok(true)
}

pub fn run_fit_tensor(cfg: &RunConfig) -> Status {
    let path = cfg.data.as_deref().expect("validated");
    let obs = read_observations_path(path)?;
    let sp = split(&obs.x, &obs.y, cfg)?;
    let x_star = sp.test_x.clone().unwrap_or_else(|| sp.train_x.clone());
    info!(
        "fit-tensor: {} observations in {} dimensions, {} bases, holdout {}",
        obs.y.len(),
        obs.x.dim(),
        cfg.n_bases,
        sp.test_y.len()
    );
    let chain = tensorgp::run_tensor_gibbs(&sp.train_x, &sp.train_y, &cfg.tensor(), Some(&x_star))?;
    let summary = chain.surface_summary().context("no retained draws")?;

    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = create(&cfg.out_dir, "chain.csv")?;
    chain.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out_dir, "predictions.csv")?;
    tensorgp::write_surface_csv(&x_star, &summary, &mut w)?;
    w.flush()?;

    let volume: f64 = (0..obs.x.dim()).map(|h| axis_range(&sp.train_x, h)).product();
    let (mspe, ci_area) = scores(&summary, &sp.test_y, volume);
    let axes = axis_indices(&sp.train_x)?;
    write_json(
        &cfg.out_dir,
        "metadata.json",
        &json!({
            "seed": chain.seed,
            "generator": chain.generator,
            "dim": chain.dim,
            "n_bases": chain.n_bases,
            "axis_sizes": chain.axis_sizes,
            "iters": chain.iters,
            "burn_in": chain.burn_in,
            "thin": chain.thin,
            "retained": chain.draws.len(),
            "eps": chain.eps,
            "y_scale": chain.y_scale,
            "corr_rebuilds": chain.corr_rebuilds,
            "config": config_json(cfg)?,
        }),
    )?;
    write_json(
        &cfg.out_dir,
        "summary.json",
        &json!({
            "mode": "fit-tensor",
            "n_obs": obs.y.len(),
            "n_train": sp.train_y.len(),
            "n_holdout": sp.test_y.len(),
            "unique_per_axis": axes.iter().map(|a| a.len()).collect::<Vec<_>>(),
            "retained": chain.draws.len(),
            "mspe": mspe,
            "ci_area": ci_area,
            "mean_tau": chain.mean_tau(),
        }),
    )?;
    write_json(&cfg.out_dir, "timings.json", &serde_json::to_value(&chain.timings)?)?;
    report_scores(mspe, ci_area);
    Ok(true)
}

fn report_scores(mspe: Option<f64>, ci_area: f64) {
    match mspe {
        Some(m) => println!("mspe {m:.6e} ci_area {ci_area:.6e}"),
        None => println!("ci_area {ci_area:.6e}"),
    }
}

pub fn run_validate(cfg: &RunConfig) -> Status {
    let vc = cfg.validation();
    if cfg.strict {
        for &n in &vc.ns {
            if n > hodlr_gp::kernels::DEFAULT_DENSE_LIMIT {
                bail!(hodlr_gp::Error::DenseLimit {
                    n,
                    limit: hodlr_gp::kernels::DEFAULT_DENSE_LIMIT
                });
            }
            let (_, _, k, y) = oracle::validation_problem(n, &vc)?;
            let m = &k * vc.tau + DMatrix::identity(n, n);
            let base = BoundInputs::compute(&k, &m, 0.0, vc.tau, &y)?;
            for &eps in &vc.eps {
                BoundInputs { eps, ..base }
                    .check_admissible()
                    .with_context(|| format!("n = {n}, eps = {eps:e}"))?;
            }
        }
    }
    let rows = oracle::validation_sweep(&vc)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = create(&cfg.out_dir, "validation.csv")?;
    oracle::write_validation_csv(&rows, &mut w)?;
    w.flush()?;
    let count = |s: CellStatus| rows.iter().filter(|r| r.status == s).count();
    let (pass, fail, skip) = (
        count(CellStatus::Pass),
        count(CellStatus::Fail),
        count(CellStatus::Skip),
    );
    println!("validation: {pass} pass, {fail} fail, {skip} skipped (inadmissible eps)");
    Ok(fail == 0)
}

/// Least-squares slope of `ln t` on `ln n`; `None` with fewer than two sizes.
pub fn loglog_slope(ns: &[usize], ts: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(ts)
        .filter(|(_, t)| **t > 0.0)
        .map(|(n, t)| ((*n as f64).ln(), t.ln()))
        .collect();
    let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
    distinct.dedup();
    if distinct.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn bench_data(n: usize, seed: u64) -> Result<(PointSet, Vec<f64>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ n as u64);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    xs.sort_by(f64::total_cmp);
    let y = xs
        .iter()
        .map(|x| (2.0 * std::f64::consts::PI * x).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((PointSet::from_scalars(&xs)?, y))
}

pub fn run_bench(cfg: &RunConfig) -> Status {
    let mut gibbs = cfg.gibbs();
    gibbs.iters = cfg.bench_iters;
    gibbs.burn_in = 0;
    gibbs.thin = 1;
    gibbs.record_f = false;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut wr = csv::Writer::from_writer(create(&cfg.out_dir, "bench.csv")?);
    wr.write_record(["n", "setup_seconds", "sampling_seconds", "total_seconds", "iters"])?;
    let mut sampling = Vec::new();
    for &n in &cfg.sizes {
        let (x, y) = bench_data(n, cfg.seed)?;
        let ds = collapse_duplicates_with(&x, &y, cfg.weighting.into(), Some(response_scale(&y)), cfg.leaf_size)?;
        let priors = cfg.priors(ds.input_range())?;
        let t0 = Instant::now();
        let grid = GridPrecomp::build(
            &ds.unique_points,
            &priors.rho_grid,
            gibbs.nugget,
            gibbs.eps * gibbs.grid_headroom,
            gibbs.leaf_size,
            gibbs.exec,
        )?;
        let setup = t0.elapsed().as_secs_f64();
        let chain = sampler::run_gibbs_with_grid(&ds, &grid, &priors, &gibbs, None, setup)?;
        let s = chain.timings.sampling;
        info!("bench n={n}: setup {setup:.3} s, sampling {s:.3} s");
        println!("n {n} setup {setup:.4} s sampling {s:.4} s");
        wr.write_record([
            n.to_string(),
            format!("{setup:.6}"),
            format!("{s:.6}"),
            format!("{:.6}", setup + s),
            cfg.bench_iters.to_string(),
        ])?;
        sampling.push(s);
    }
    wr.flush()?;
    let slope = loglog_slope(&cfg.sizes, &sampling);
    let shown = slope.map_or("n/a".to_string(), |s| format!("{s:.4}"));
    println!("sampling-phase log-log slope: {shown}");
    write_json(
        &cfg.out_dir,
        "bench_summary.json",
        &json!({
            "sizes": cfg.sizes,
            "iters": cfg.bench_iters,
            "sampling_slope": slope.map_or(Value::String("n/a".into()), |s| json!(s)),
        }),
    )?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_size_and_determinism() {
        for n in [1, 7, 100, 101] {
            let h = holdout_indices(n, 0.1, 3);
            assert_eq!(h.len(), (0.1 * n as f64).ceil() as usize);
            assert!(h.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(h, holdout_indices(n, 0.1, 3));
        }
        assert!(holdout_indices(50, 0.0, 1).is_empty());
        assert_ne!(holdout_indices(100, 0.2, 1), holdout_indices(100, 0.2, 2));
    }

    #[test]
    fn slope_recovers_power_law() {
        let ns = [1000, 2000, 4000, 8000];
        let ts: Vec<f64> = ns.iter().map(|&n| 3e-6 * (n as f64).powf(1.15)).collect();
        assert!((loglog_slope(&ns, &ts).unwrap() - 1.15).abs() < 1e-12);
        assert_eq!(loglog_slope(&[1000], &[0.5]), None);
        assert_eq!(loglog_slope(&[1000, 1000], &[0.5, 0.6]), None);
    }

    #[test]
    fn scores_on_known_summary() {
        let s = vec![
            PointSummary {
                mean: 1.0,
                lower95: 0.0,
                upper95: 2.0,
            },
            PointSummary {
                mean: 0.0,
                lower95: -1.0,
                upper95: 0.0,
            },
        ];
        let (m, a) = scores(&s, &[2.0, 0.0], 3.0);
        assert_eq!(m, Some(0.5));
        assert_eq!(a, 4.5);
        assert_eq!(scores(&s, &[], 1.0).0, None);
    }
}
