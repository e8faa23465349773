use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use hodlr_gp::kernels::DuplicateWeighting;
use hodlr_gp::oracle::ValidationConfig;
use hodlr_gp::par::Exec;
use hodlr_gp::sampler::{log_spaced, GibbsConfig, PriorSpec, DEFAULT_SAMPLER_NUGGET};
use hodlr_gp::tensorgp::TensorConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Fit,
    FitTensor,
    Validate,
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Linear,
    Squared,
}

impl From<Weighting> for DuplicateWeighting {
    fn from(w: Weighting) -> Self {
        match w {
            Weighting::Linear => DuplicateWeighting::Linear,
            Weighting::Squared => DuplicateWeighting::Squared,
        }
    }
}

/// Everything a run needs. Loaded from a TOML file, then overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub eps: f64,
    pub leaf_size: usize,
    pub nugget: f64,
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub grid_size: usize,
    /// Explicit length-scale grid bounds; default spans the input range.
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub holdout: f64,
    pub weighting: Weighting,
    pub record_f: bool,
    /// Prediction grid size for 1-D fits without a holdout.
    pub predict_points: usize,
    pub n_bases: usize,
    pub main_effects: bool,
    pub sequential: bool,

    pub sizes: Vec<usize>,
    pub bench_iters: usize,

    pub validate_ns: Vec<usize>,
    pub validate_eps: Vec<f64>,
    pub validate_rho: f64,
    pub validate_tau: f64,
    pub validate_nugget: f64,
    pub validate_leaf_size: usize,
    /// Treat an inadmissible eps as an error instead of a skipped row.
    pub strict: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GibbsConfig::default();
        let v = ValidationConfig::default();
        RunConfig {
            data: None,
            out_dir: PathBuf::from("out"),
            eps: g.eps,
            leaf_size: g.leaf_size,
            nugget: DEFAULT_SAMPLER_NUGGET,
            a1: 1.0,
            b1: 1.0,
            a2: 1.0,
            b2: 1.0,
            grid_size: 10,
            rho_min: None,
            rho_max: None,
            iters: g.iters,
            burn_in: g.burn_in,
            thin: g.thin,
            seed: g.seed,
            holdout: 0.0,
            weighting: Weighting::Linear,
            record_f: false,
            predict_points: 101,
            n_bases: 1,
            main_effects: false,
            sequential: false,
            sizes: vec![1024, 2048, 4096, 8192],
            bench_iters: 100,
            validate_ns: v.ns,
            validate_eps: v.eps,
            validate_rho: v.rho,
            validate_tau: v.tau,
            validate_nugget: v.nugget,
            validate_leaf_size: v.leaf_size,
            strict: false,
        }
    }
}

/// Command-line overrides; each flag mirrors a config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config file; flags take precedence over its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with header x1,...,xd,y
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub leaf_size: Option<usize>,
    #[arg(long)]
    pub nugget: Option<f64>,
    #[arg(long)]
    pub a1: Option<f64>,
    #[arg(long)]
    pub b1: Option<f64>,
    #[arg(long)]
    pub a2: Option<f64>,
    #[arg(long)]
    pub b2: Option<f64>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub rho_min: Option<f64>,
    #[arg(long)]
    pub rho_max: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of observations held out for MSPE, in [0, 1)
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long, value_enum)]
    pub weighting: Option<Weighting>,
    /// Write latent f draws into the chain file
    #[arg(long)]
    pub record_f: bool,
    #[arg(long)]
    pub predict_points: Option<usize>,
    #[arg(long)]
    pub n_bases: Option<usize>,
    #[arg(long)]
    pub main_effects: bool,
    /// Disable data-parallel execution
    #[arg(long)]
    pub sequential: bool,
    /// Bench sizes, comma separated
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub bench_iters: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub validate_ns: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub validate_eps: Option<Vec<f64>>,
    #[arg(long)]
    pub validate_rho: Option<f64>,
    #[arg(long)]
    pub validate_tau: Option<f64>,
    #[arg(long)]
    pub validate_nugget: Option<f64>,
    #[arg(long)]
    pub validate_leaf_size: Option<usize>,
    #[arg(long)]
    pub strict: bool,
}

macro_rules! apply {
    ($cfg:ident, $o:ident; $($f:ident),*) => {
        $(if let Some(v) = $o.$f.clone() { $cfg.$f = v; })*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        apply!(c, o; out_dir, eps, leaf_size, nugget, a1, b1, a2, b2, grid_size, iters, burn_in, thin,
            seed, holdout, weighting, predict_points, n_bases, sizes, bench_iters, validate_ns,
            validate_eps, validate_rho, validate_tau, validate_nugget, validate_leaf_size);
        if o.data.is_some() {
            c.data = o.data.clone();
        }
        if o.rho_min.is_some() {
            c.rho_min = o.rho_min;
        }
        if o.rho_max.is_some() {
            c.rho_max = o.rho_max;
        }
        c.record_f |= o.record_f;
        c.main_effects |= o.main_effects;
        c.sequential |= o.sequential;
        c.strict |= o.strict;
        Ok(c)
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bail!("eps must be > 0, got {}", self.eps);
        }
        if !(0.0..1.0).contains(&self.holdout) {
            bail!("holdout must lie in [0, 1), got {}", self.holdout);
        }
        if self.rho_min.is_some() != self.rho_max.is_some() {
            bail!("rho_min and rho_max must be given together");
        }
        match mode {
            Mode::Fit | Mode::FitTensor if self.data.is_none() => bail!("{mode:?} requires a data path (--data)"),
            Mode::Bench if self.sizes.is_empty() => bail!("bench requires at least one size"),
            Mode::Validate if self.validate_ns.is_empty() || self.validate_eps.is_empty() => {
                bail!("validate requires non-empty validate_ns and validate_eps")
            }
            _ => {}
        }
        if self.validate_eps.iter().any(|e| !(*e >= 0.0)) {
            bail!("validate_eps entries must be >= 0");
        }
        self.gibbs().validate()?;
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn gibbs(&self) -> GibbsConfig {
        GibbsConfig {
            eps: self.eps,
            leaf_size: self.leaf_size,
            nugget: self.nugget,
            iters: self.iters,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            record_f: self.record_f,
            exec: self.exec(),
            ..Default::default()
        }
    }

    pub fn priors(&self, input_range: f64) -> Result<PriorSpec> {
        let grid = match (self.rho_min, self.rho_max) {
            (Some(lo), Some(hi)) => log_spaced(lo, hi, self.grid_size)?,
            _ => PriorSpec::default_for_range(input_range, self.grid_size)?.rho_grid,
        };
        Ok(PriorSpec::new(self.a1, self.b1, self.a2, self.b2, grid)?)
    }

    pub fn tensor(&self) -> TensorConfig {
        TensorConfig {
            n_bases: self.n_bases,
            main_effects: self.main_effects,
            gibbs: self.gibbs(),
            a1: self.a1,
            b1: self.b1,
            grid_size: self.grid_size,
            ..Default::default()
        }
    }

    pub fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            ns: self.validate_ns.clone(),
            eps: self.validate_eps.clone(),
            rho: self.validate_rho,
            tau: self.validate_tau,
            nugget: self.validate_nugget,
            leaf_size: self.validate_leaf_size,
            seed: self.seed,
            ..Default::default()
        }
    }
}
