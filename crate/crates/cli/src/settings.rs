//! Resolution of the run configuration: file, then `U5MR_*` environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};

use u5mr_core::config::{Config, Origin};
use u5mr_core::gmrf::{GammaPrecisionPrior, PcCorrelationPrior, PcRangePrior, PcSigmaPrior, PriorSettings};
use u5mr_core::model::{FitOptions, GridSpec, NewtonOptions, SpecConfig, Variant};
use u5mr_core::simulate::SimConfig;
use u5mr_core::hazard::SurveyId;
use u5mr_core::survey::{Pooling, YearRange};
use u5mr_core::Result;

pub const ENV_PREFIX: &str = "U5MR";

const RUN_KEYS: &[&str] = &[
    "seed",
    "data.clusters",
    "data.births",
    "data.density",
    "data.urban",
    "data.regions",
    "data.bias",
    "data.covariates",
    "holdout.train_fraction",
    "holdout.survey",
    "holdout.seed",
    "direct.periods",
    "direct.pooling",
    "model.variant",
    "model.year_first",
    "model.year_last",
    "model.forecast_to",
    "model.knot_step",
    "model.periods",
    "model.pad",
    "model.fixed_effect_precision",
    "model.coefficient_precision",
    "prior.iid",
    "prior.rw",
    "prior.range",
    "prior.sigma",
    "prior.rho",
    "fit.max_iters",
    "fit.tolerance",
    "fit.initial_step",
    "fit.grid_steps",
    "fit.grid_spacing",
    "fit.samples",
    "fit.require_convergence",
    "fit.newton_max_iter",
    "fit.grad_tol",
    "predict.years",
    "predict.stratum",
    "aggregate.national_id",
    "aggregate.mdg_start",
    "aggregate.mdg_end",
    "aggregate.mdg_target",
    "evaluate.periods",
];

pub fn known_keys() -> Vec<&'static str> {
    RUN_KEYS.iter().chain(SimConfig::KEYS).copied().collect()
}

/// Input file locations, resolved against the output directory when
/// relative.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub clusters: PathBuf,
    pub births: PathBuf,
    pub density: PathBuf,
    pub urban: PathBuf,
    pub regions: PathBuf,
    pub bias: Option<PathBuf>,
    pub covariates: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
pub struct Holdout {
    pub train_fraction: f64,
    /// `None` selects the latest survey.
    pub survey: Option<SurveyId>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    Mask,
    Urban,
    Rural,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub config: Config,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub sim: SimConfig,
    pub data: DataPaths,
    pub holdout: Holdout,
    pub direct_periods: Vec<YearRange>,
    pub pooling: Pooling,
    pub spec: SpecConfig,
    pub pad: usize,
    pub fit: FitOptions,
    pub predict_years: Option<Vec<i32>>,
    pub stratum: Stratum,
    pub national_id: String,
    pub mdg: (i32, i32, f64),
    pub evaluate_periods: Vec<YearRange>,
}

/// Command-line values that override the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
}

fn pair(cfg: &Config, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
    match cfg.get_list::<f64>(key)? {
        None => Ok(default),
        Some(v) if v.len() == 2 => Ok((v[0], v[1])),
        Some(v) => Err(cfg.invalid(key, format!("expected two values, got {}", v.len()))),
    }
}

impl Settings {
    pub fn resolve<I>(config_path: Option<&Path>, env: I, out_dir: &Path, overrides: &Overrides) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = match config_path {
            Some(p) => Config::load(p)?,
            None => Config::new(),
        };
        let known = known_keys();
        cfg.check_known(&known)?;
        cfg.apply_env_keys(ENV_PREFIX, env, &known);
        if let Some(seed) = overrides.seed {
            cfg.set("seed", seed.to_string(), Origin::Flag("seed".into()));
        }
        Self::from_config(cfg, config_path.map(Path::to_path_buf), out_dir)
    }

    fn from_config(cfg: Config, config_path: Option<PathBuf>, out_dir: &Path) -> Result<Self> {
        let seed: u64 = cfg.get_or("seed", 1)?;
        let sim = SimConfig::from_config(&cfg)?;
        let path = |key: &str, default: &str| -> PathBuf {
            let p = PathBuf::from(cfg.get_str(key).unwrap_or(default));
            if p.is_absolute() {
                p
            } else {
                out_dir.join(p)
            }
        };
        let bias = match cfg.get_str("data.bias") {
            Some("none") => None,
            _ => Some(path("data.bias", "bias.csv")),
        };
        let covariates = cfg
            .get_list::<PathBuf>("data.covariates")?
            .unwrap_or_default()
            .into_iter()
            .map(|p| if p.is_absolute() { p } else { out_dir.join(p) })
            .collect();
        let data = DataPaths {
            clusters: path("data.clusters", "clusters.csv"),
            births: path("data.births", "births.csv"),
            density: path("data.density", "density.asc"),
            urban: path("data.urban", "urban.asc"),
            regions: path("data.regions", "regions.geojson"),
            bias,
            covariates,
        };

        let train_fraction: f64 = cfg.get_or("holdout.train_fraction", 0.25)?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(cfg.invalid("holdout.train_fraction", "must lie strictly between 0 and 1"));
        }
        let holdout = Holdout {
            train_fraction,
            survey: cfg.get("holdout.survey")?,
            seed: cfg.get_or("holdout.seed", seed)?,
        };
        let default_periods = YearRange::bins(1990, 2014, 5);
        let direct_periods = cfg.get_list("direct.periods")?.unwrap_or_else(|| default_periods.clone());
        let pooling = cfg.get_or("direct.pooling", Pooling::Pooled)?;

        let d = SpecConfig::default();
        let variant: Variant = cfg.get_or("model.variant", Variant::SpaceTime)?;
        let iid = pair(&cfg, "prior.iid", (d.priors.iid.shape, d.priors.iid.rate))?;
        let rw = pair(&cfg, "prior.rw", (d.priors.rw.shape, d.priors.rw.rate))?;
        for (key, (shape, rate)) in [("prior.iid", iid), ("prior.rw", rw)] {
            if !(shape > 0.0 && rate > 0.0) {
                return Err(cfg.invalid(key, "shape and rate must be positive"));
            }
        }
        let tails = [
            ("prior.range", pair(&cfg, "prior.range", (0.5, 0.05))?),
            ("prior.sigma", pair(&cfg, "prior.sigma", (3.0, 0.05))?),
            ("prior.rho", pair(&cfg, "prior.rho", (0.9, 0.7))?),
        ];
        for (key, tail) in tails {
            let r = match key {
                "prior.range" => PcRangePrior::from_tail(tail.0, tail.1).map(|_| ()),
                "prior.sigma" => PcSigmaPrior::from_tail(tail.0, tail.1).map(|_| ()),
                _ => PcCorrelationPrior::from_tail(tail.0, tail.1).map(|_| ()),
            };
            r.map_err(|e| cfg.invalid(key, e.to_string()))?;
        }
        let mut priors = PriorSettings::new(tails[0].1, tails[1].1, tails[2].1)?;
        priors.iid = GammaPrecisionPrior { shape: iid.0, rate: iid.1 };
        priors.rw = GammaPrecisionPrior { shape: rw.0, rate: rw.1 };
        let spec = SpecConfig {
            variant,
            year_first: cfg.get("model.year_first")?,
            year_last: cfg.get("model.year_last")?,
            forecast_to: cfg.get_or("model.forecast_to", d.forecast_to)?,
            knot_step: cfg.get_or("model.knot_step", d.knot_step)?,
            periods: cfg.get_list("model.periods")?.unwrap_or_else(|| default_periods.clone()),
            priors,
            fixed_effect_precision: cfg.get_or("model.fixed_effect_precision", d.fixed_effect_precision)?,
            coefficient_precision: cfg.get_or("model.coefficient_precision", d.coefficient_precision)?,
            intrinsic_jitter: d.intrinsic_jitter,
        };
        if spec.knot_step <= 0 {
            return Err(cfg.invalid("model.knot_step", "must be positive"));
        }
        if variant.has_covariates() && data.covariates.is_empty() {
            return Err(cfg.invalid("data.covariates", format!("variant {variant} needs covariate rasters")));
        }

        let f = FitOptions::default();
        let grid_steps: usize = cfg.get_or("fit.grid_steps", 0)?;
        let grid = match grid_steps {
            0 => None,
            steps => Some(GridSpec {
                steps,
                spacing: cfg.get_or("fit.grid_spacing", 1.0)?,
            }),
        };
        let fit = FitOptions {
            newton: NewtonOptions {
                max_iter: cfg.get_or("fit.newton_max_iter", f.newton.max_iter)?,
                grad_tol: cfg.get_or("fit.grad_tol", f.newton.grad_tol)?,
            },
            max_iters: cfg.get_or("fit.max_iters", f.max_iters)?,
            tolerance: cfg.get_or("fit.tolerance", f.tolerance)?,
            initial_step: cfg.get_or("fit.initial_step", f.initial_step)?,
            require_convergence: cfg.get_or("fit.require_convergence", f.require_convergence)?,
            grid,
            n_samples: cfg.get_or("fit.samples", f.n_samples)?,
            seed,
            ..f
        };
        if fit.n_samples == 0 {
            return Err(cfg.invalid("fit.samples", "must be positive"));
        }

        let stratum = match cfg.get_str("predict.stratum").unwrap_or("mask") {
            "mask" => Stratum::Mask,
            "urban" => Stratum::Urban,
            "rural" => Stratum::Rural,
            other => {
                return Err(cfg.invalid("predict.stratum", format!("unknown policy `{other}` (mask | urban | rural)")))
            }
        };
        let evaluate_periods = cfg.get_list("evaluate.periods")?.unwrap_or_else(|| direct_periods.clone());

        Ok(Self {
            seed,
            sim,
            data,
            holdout,
            direct_periods,
            pooling,
            spec,
            pad: cfg.get_or("model.pad", 5)?,
            fit,
            predict_years: cfg.get_list("predict.years")?,
            stratum,
            national_id: cfg.get_or("aggregate.national_id", "national".to_string())?,
            mdg: (
                cfg.get_or("aggregate.mdg_start", 1990)?,
                cfg.get_or("aggregate.mdg_end", 2015)?,
                cfg.get_or("aggregate.mdg_target", u5mr_core::aggregate::MDG_TARGET_DROP)?,
            ),
            evaluate_periods,
            config: cfg,
            config_path,
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use u5mr_core::Error;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.cfg");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn precedence_is_flag_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 3\nfit.samples = 50\nsim.ncols = 8\n");
        let env = vec![
            ("U5MR_SEED".to_string(), "4".to_string()),
            ("U5MR_FIT_SAMPLES".into(), "60".into()),
        ];
        let s = Settings::resolve(Some(&p), env.clone(), dir.path(), &Overrides::default()).unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.fit.n_samples, 60);
        assert_eq!(s.sim.truth.ncols, 8);
        let s = Settings::resolve(Some(&p), env, dir.path(), &Overrides { seed: Some(5) }).unwrap();
        assert_eq!(s.seed, 5);
        assert_eq!(s.fit.seed, 5);
    }

    #[test]
    fn errors_point_at_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 1\n\nmodel.variant = m9\n");
        let err = Settings::resolve(Some(&p), vec![], dir.path(), &Overrides::default()).unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let p = write(dir.path(), "bogus.key = 1\n");
        let err = Settings::resolve(Some(&p), vec![], dir.path(), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        let p = write(dir.path(), "prior.range = 0.5, 2\n");
        let err = Settings::resolve(Some(&p), vec![], dir.path(), &Overrides::default()).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
    }

    #[test]
    fn relative_paths_resolve_against_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "data.bias = none\ndata.covariates = a.asc, /abs/b.asc\n");
        let s = Settings::resolve(Some(&p), vec![], Path::new("/work"), &Overrides::default()).unwrap();
        assert_eq!(s.data.clusters, Path::new("/work/clusters.csv"));
        assert!(s.data.bias.is_none());
        assert_eq!(s.data.covariates, vec![PathBuf::from("/work/a.asc"), PathBuf::from("/abs/b.asc")]);
    }

    #[test]
    fn digest_ignores_origin() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 9\n");
        let a = Settings::resolve(Some(&p), vec![], dir.path(), &Overrides::default()).unwrap();
        let b = Settings::resolve(None, vec![("U5MR_SEED".into(), "9".into())], dir.path(), &Overrides::default())
            .unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
