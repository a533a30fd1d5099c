//! Experiment configuration files (TOML) and named presets.

use std::path::{Path, PathBuf};

use rfsurvey::forest::{ForestParams, ResampleMode};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub population: Option<PopulationConfig>,
    pub design: Option<DesignConfig>,
    pub estimate: Option<EstimateConfig>,
    pub mc: Option<McSection>,
    pub calibrate: Option<CalibrateConfig>,
    pub h5: Option<H5Section>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub synthetic: Option<SyntheticConfig>,
    pub file: Option<PathBuf>,
    pub delimiter: Option<char>,
    pub id_column: Option<String>,
    #[serde(default)]
    pub study: Vec<String>,
    pub predictors: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_n_units")]
    pub n_units: usize,
    pub seed: Option<u64>,
    /// `variance` (default) or `sd`: how the noise parameters of the models are read.
    pub noise: Option<String>,
}

fn default_n_units() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// `srswor` or `stratified`.
    #[serde(default = "default_design_kind")]
    pub kind: String,
    pub n: usize,
    /// Predictor column holding stratum codes.
    pub strata: Option<String>,
    /// Per-stratum sample sizes in increasing code order; proportional allocation otherwise.
    pub sizes: Option<Vec<usize>>,
    /// File whose first column lists the ids of a supplied sample.
    pub sample: Option<PathBuf>,
}

fn default_design_kind() -> String {
    "srswor".into()
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn grid<T: Clone>(v: &Option<OneOrMany<T>>) -> Vec<Option<T>> {
    match v {
        None => vec![None],
        Some(v) => v.to_vec().into_iter().map(Some).collect(),
    }
}

/// One estimator entry; list-valued hyper-parameters expand to their cartesian product.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// `ht`, `greg`, `cart`, `rf`, `rf_pop` or `pgd_rf`.
    pub method: String,
    pub n_trees: Option<OneOrMany<usize>>,
    pub min_node_size: Option<OneOrMany<usize>>,
    /// Minimum node size as `⌊n^e⌋` for sample size `n`; excludes `min_node_size`.
    pub min_node_exponent: Option<OneOrMany<f64>>,
    pub mtry: Option<OneOrMany<usize>>,
    /// `none`, `bootstrap` or `subsample`.
    pub mode: Option<String>,
    pub fraction: Option<f64>,
    /// Population column that grows the partitions of `rf_pop`.
    pub proxy: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Planned {
    Ht,
    Greg,
    Cart { min_node_size: usize },
    Rf(ForestParams),
    RfPopulation { params: ForestParams, proxy: String },
    PgdRf(ForestParams),
}

impl EstimatorConfig {
    pub fn simple(method: &str) -> Self {
        Self {
            method: method.into(),
            n_trees: None,
            min_node_size: None,
            min_node_exponent: None,
            mtry: None,
            mode: None,
            fraction: None,
            proxy: None,
        }
    }

    fn mode(&self) -> Result<ResampleMode, CliError> {
        match (self.mode.as_deref(), self.fraction) {
            (None | Some("subsample"), f) => Ok(ResampleMode::Subsample(f.unwrap_or(0.63))),
            (Some("none"), None) => Ok(ResampleMode::None),
            (Some("bootstrap"), None) => Ok(ResampleMode::Bootstrap),
            (Some("none" | "bootstrap"), Some(_)) => {
                Err(CliError::Config("`fraction` applies to mode = \"subsample\" only".into()))
            }
            (Some(other), _) => Err(CliError::Config(format!("unknown resampling mode '{other}'"))),
        }
    }

    fn node_sizes(&self, n: usize) -> Result<Vec<Option<usize>>, CliError> {
        match (&self.min_node_size, &self.min_node_exponent) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "give either `min_node_size` or `min_node_exponent`".into(),
            )),
            (_, Some(e)) => Ok(e
                .to_vec()
                .into_iter()
                .map(|e| Some(((n as f64).powf(e).floor() as usize).max(1)))
                .collect()),
            (m, None) => Ok(grid(m)),
        }
    }

    /// Expands the entry for a sample of size `n`.
    pub fn expand(&self, n: usize) -> Result<Vec<Planned>, CliError> {
        let forest_only = |what: &str, present: bool| {
            if present {
                Err(CliError::Config(format!(
                    "`{what}` does not apply to method '{}'",
                    self.method
                )))
            } else {
                Ok(())
            }
        };
        match self.method.as_str() {
            "ht" | "greg" => {
                forest_only("n_trees", self.n_trees.is_some())?;
                forest_only("min_node_size", self.min_node_size.is_some() || self.min_node_exponent.is_some())?;
                forest_only("mtry", self.mtry.is_some())?;
                forest_only("mode", self.mode.is_some() || self.fraction.is_some())?;
                forest_only("proxy", self.proxy.is_some())?;
                Ok(vec![if self.method == "ht" { Planned::Ht } else { Planned::Greg }])
            }
            "cart" => {
                forest_only("n_trees", self.n_trees.is_some())?;
                forest_only("mtry", self.mtry.is_some())?;
                forest_only("mode", self.mode.is_some() || self.fraction.is_some())?;
                forest_only("proxy", self.proxy.is_some())?;
                Ok(self
                    .node_sizes(n)?
                    .into_iter()
                    .map(|m| Planned::Cart { min_node_size: m.unwrap_or(5) })
                    .collect())
            }
            "rf" | "rf_pop" | "pgd_rf" => {
                let mode = self.mode()?;
                if self.method != "rf_pop" {
                    forest_only("proxy", self.proxy.is_some())?;
                }
                let mut out = Vec::new();
                for b in grid(&self.n_trees) {
                    for n0 in self.node_sizes(n)? {
                        for mtry in grid(&self.mtry) {
                            let params = ForestParams {
                                n_trees: b.unwrap_or(ForestParams::default().n_trees),
                                mtry,
                                min_node_size: n0.unwrap_or(5),
                                mode,
                                seed: 0,
                            };
                            out.push(match self.method.as_str() {
                                "rf" => Planned::Rf(params),
                                "pgd_rf" => Planned::PgdRf(params),
                                _ => Planned::RfPopulation {
                                    params,
                                    proxy: self.proxy.clone().ok_or_else(|| {
                                        CliError::Config("rf_pop needs a `proxy` column".into())
                                    })?,
                                },
                            });
                        }
                    }
                }
                Ok(out)
            }
            other => Err(CliError::Config(format!("unknown estimator method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub study: String,
    pub predictors: Option<Vec<String>>,
    pub estimators: Vec<EstimatorConfig>,
    #[serde(default = "yes")]
    pub variance: bool,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn yes() -> bool {
    true
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    /// Synthetic model numbers; each uses its own working predictors.
    pub models: Option<Vec<usize>>,
    /// Study columns of a file population, used with `predictors`.
    pub study: Option<Vec<String>>,
    pub predictors: Option<Vec<String>>,
    pub n: OneOrMany<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub estimators: Vec<EstimatorConfig>,
    #[serde(default)]
    pub variance: bool,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub traces: bool,
    /// Report wall-clock time; off by default so that outputs are reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_replicates() -> usize {
    500
}

fn default_failure_rate() -> f64 {
    0.01
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    /// CSV with header `id,d,h0,…` and a final `TOTAL` row of targets.
    pub problem: PathBuf,
    #[serde(default = "default_distance")]
    pub distance: String,
    pub max_iter: Option<usize>,
    pub constraint_tol: Option<f64>,
    pub weight_cap: Option<f64>,
}

fn default_distance() -> String {
    "chi_square".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H5Section {
    pub sizes: Option<Vec<usize>>,
    pub sampling_fraction: Option<f64>,
    pub replicates: Option<usize>,
    pub n_trees: Option<usize>,
    pub min_node_size: Option<usize>,
    pub mode: Option<String>,
    pub fraction: Option<f64>,
    pub mtry: Option<usize>,
    pub probes: Option<usize>,
}

impl H5Section {
    pub fn mode(&self) -> Result<ResampleMode, CliError> {
        EstimatorConfig {
            mode: self.mode.clone(),
            fraction: self.fraction,
            ..EstimatorConfig::simple("rf")
        }
        .mode()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(pop) = &mut cfg.population {
            if let Some(f) = &mut pop.file {
                rebase(f);
            }
        }
        if let Some(Some(s)) = cfg.design.as_mut().map(|d| &mut d.sample) {
            rebase(s);
        }
        if let Some(c) = &mut cfg.calibrate {
            rebase(&mut c.problem);
        }
        Ok(cfg)
    }
}

fn forest_entry(mode: &str, fraction: Option<f64>, n_trees: usize, min_node_size: usize) -> EstimatorConfig {
    EstimatorConfig {
        n_trees: Some(OneOrMany::One(n_trees)),
        min_node_size: Some(OneOrMany::One(min_node_size)),
        mode: Some(mode.into()),
        fraction,
        ..EstimatorConfig::simple("rf")
    }
}

/// Named configurations: `table2-Y<model>-n<250|1000>` and `figure2`.
pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let unknown = || {
        CliError::Config(format!(
            "unknown preset '{name}' (expected table2-Y<1..8>-n<250|1000> or figure2)"
        ))
    };
    let synthetic = |n_units, noise: Option<&str>| PopulationConfig {
        synthetic: Some(SyntheticConfig { n_units, seed: None, noise: noise.map(String::from) }),
        ..Default::default()
    };
    if name == "figure2" {
        let exponents = (1..=17).step_by(2).map(|a| a as f64 / 20.0).collect();
        let entry = EstimatorConfig {
            n_trees: Some(OneOrMany::One(1)),
            min_node_exponent: Some(OneOrMany::Many(exponents)),
            mode: Some("subsample".into()),
            ..EstimatorConfig::simple("rf")
        };
        return Ok(ExperimentConfig {
            population: Some(synthetic(100_000, None)),
            mc: Some(McSection {
                models: Some(vec![5]),
                study: None,
                predictors: None,
                n: OneOrMany::Many(vec![500, 1000, 5000, 10_000, 20_000, 50_000]),
                replicates: default_replicates(),
                estimators: vec![EstimatorConfig::simple("ht"), entry],
                variance: true,
                level: default_level(),
                traces: false,
                timing: false,
                max_failure_rate: default_failure_rate(),
            }),
            ..Default::default()
        });
    }
    let rest = name.strip_prefix("table2-Y").ok_or_else(unknown)?;
    let (model, n) = rest.split_once("-n").ok_or_else(unknown)?;
    let model: usize = model.parse().map_err(|_| unknown())?;
    let n: usize = n.parse().map_err(|_| unknown())?;
    if !(1..=8).contains(&model) || !(n == 250 || n == 1000) {
        return Err(unknown());
    }
    let root_n = (n as f64).sqrt().floor() as usize;
    // The reference table was produced with noise parameters read as standard deviations.
    Ok(ExperimentConfig {
        population: Some(synthetic(10_000, Some("sd"))),
        mc: Some(McSection {
            models: Some(vec![model]),
            study: None,
            predictors: None,
            n: OneOrMany::One(n),
            replicates: default_replicates(),
            estimators: vec![
                EstimatorConfig::simple("ht"),
                EstimatorConfig::simple("greg"),
                EstimatorConfig::simple("cart"),
                forest_entry("bootstrap", None, 200, 5),
                forest_entry("subsample", Some(0.63), 200, 5),
                forest_entry("bootstrap", None, 200, root_n),
            ],
            variance: false,
            level: default_level(),
            traces: false,
            timing: false,
            max_failure_rate: default_failure_rate(),
        }),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse("seed = 1\n[mc]\nn = 10\nestimators = []\nreplicate = 3\n")
            .unwrap_err();
        assert!(err.to_string().contains("replicate"), "{err}");
    }

    #[test]
    fn grids_expand_to_cartesian_product() {
        let cfg = ExperimentConfig::parse(
            "[mc]\nn = 100\nestimators = [{ method = \"rf\", n_trees = [2, 3], min_node_size = [5, 10] }]\n",
        )
        .unwrap();
        let planned = cfg.mc.unwrap().estimators[0].expand(100).unwrap();
        assert_eq!(planned.len(), 4);
    }

    #[test]
    fn node_size_exponents_follow_sample_size() {
        let e = EstimatorConfig {
            min_node_exponent: Some(OneOrMany::Many(vec![0.05, 0.65])),
            ..EstimatorConfig::simple("rf")
        };
        let sizes: Vec<usize> = e
            .expand(1000)
            .unwrap()
            .into_iter()
            .map(|p| match p {
                Planned::Rf(p) => p.min_node_size,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(sizes, vec![1, 89]);
    }

    #[test]
    fn misplaced_hyper_parameters_are_rejected() {
        let e = EstimatorConfig {
            n_trees: Some(OneOrMany::One(3)),
            ..EstimatorConfig::simple("greg")
        };
        assert!(e.expand(10).is_err());
        assert!(EstimatorConfig::simple("rf_pop").expand(10).is_err());
        assert!(EstimatorConfig::simple("lasso").expand(10).is_err());
    }

    #[test]
    fn presets() {
        let t = preset("table2-Y2-n250").unwrap().mc.unwrap();
        assert_eq!(t.models, Some(vec![2]));
        assert_eq!(t.n, OneOrMany::One(250));
        let rows: usize = t.estimators.iter().map(|e| e.expand(250).unwrap().len()).sum();
        assert_eq!(rows, 6);
        let f = preset("figure2").unwrap().mc.unwrap();
        assert_eq!(f.estimators[1].expand(1000).unwrap().len(), 9);
        assert!(preset("table2-Y9-n250").is_err());
        assert!(preset("table3").is_err());
    }
}
