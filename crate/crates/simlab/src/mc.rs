//! Repeated SRSWOR sampling from a fixed population with several estimators per sample.

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::ArrayView2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rfsurvey::design::{make_design, DesignKind};
use rfsurvey::estimators::{
    cart_total, greg_total, ht_report, ma_total, rf_total_sample, EstimateReport, Method, SurveySample,
};
use rfsurvey::forest::{fit_forest, ForestParams, ResampleMode, TrainingScope};
use rfsurvey::scalar::compensated_sum;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    Ht,
    /// Linear working model with intercept.
    Greg,
    Cart { min_node_size: usize },
    /// Forest grown on each sample; the seed in `params` is replaced per replicate.
    Rf { params: ForestParams },
    /// Difference estimator with fits from a forest grown once on the whole population's `y`.
    /// Not feasible in practice; a reference for the sample forest.
    PgdRf { params: ForestParams },
}

fn mode_label(mode: ResampleMode) -> String {
    match mode {
        ResampleMode::None => "none".into(),
        ResampleMode::Bootstrap => "boot".into(),
        ResampleMode::Subsample(f) => format!("sub{f}"),
    }
}

fn forest_label(prefix: &str, p: &ForestParams) -> String {
    let mtry = p.mtry.map_or("auto".to_string(), |m| m.to_string());
    format!(
        "{prefix}[B={};n0={};mode={};mtry={mtry}]",
        p.n_trees,
        p.min_node_size,
        mode_label(p.mode)
    )
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Ht => "ht".into(),
            EstimatorSpec::Greg => "greg".into(),
            EstimatorSpec::Cart { min_node_size } => format!("cart[n0={min_node_size}]"),
            EstimatorSpec::Rf { params } => forest_label("rf", params),
            EstimatorSpec::PgdRf { params } => forest_label("pgd_rf", params),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    /// Attach the residual variance estimate and a normal interval to each estimate.
    pub variance: bool,
    pub level: f64,
    /// Share of failed replicates above which an estimator aborts the run.
    pub max_failure_rate: f64,
    pub keep_traces: bool,
}

impl McConfig {
    pub fn new(n: usize, replicates: usize, seed: u64, estimators: Vec<EstimatorSpec>) -> Self {
        Self {
            n,
            replicates,
            seed,
            estimators,
            variance: false,
            level: 0.95,
            max_failure_rate: 0.01,
            keep_traces: false,
        }
    }
}

/// The population seen by the estimators: working-model predictors and the study variable.
#[derive(Debug, Clone, Copy)]
pub struct McData<'a> {
    pub model: &'a str,
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub estimator: String,
    pub successes: usize,
    pub failures: usize,
    /// Percent relative bias.
    pub rb: f64,
    /// Monte Carlo standard error of `rb`.
    pub rb_se: f64,
    /// `100 · MSE / MSE(HT)`.
    pub re: f64,
    pub mse: f64,
    /// Variance of the estimates around their own mean.
    pub mc_variance: f64,
    pub mean_variance_estimate: Option<f64>,
    /// Percent relative bias of the variance estimator against the Monte Carlo MSE.
    pub var_rb: Option<f64>,
    /// Percent of intervals containing the total.
    pub coverage: Option<f64>,
    pub ci_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub replicate: usize,
    pub estimator: usize,
    pub point: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct McSummary {
    pub model: String,
    pub n: usize,
    pub replicates: usize,
    pub total: f64,
    pub rows: Vec<McRow>,
    pub wall_time: Duration,
    pub traces: Vec<Trace>,
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    point: f64,
    variance: Option<f64>,
    ci: Option<(f64, f64)>,
}

/// Generator of replicate `r`: stream `r` of a ChaCha generator keyed by the master seed.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

pub fn run_mc(data: McData<'_>, cfg: &McConfig) -> Result<McSummary> {
    let start = Instant::now();
    let big = data.y.len();
    if data.x.nrows() != big {
        return Err(Error::Config(format!(
            "{} predictor rows for {big} units",
            data.x.nrows()
        )));
    }
    if cfg.replicates == 0 {
        return Err(Error::Config("at least one replicate is needed".into()));
    }
    let design = make_design::<f64>(DesignKind::Srswor { n: cfg.n }, big)?;
    let total = compensated_sum(data.y.iter().copied());
    let x = data.x.as_standard_layout().into_owned();

    // Oracle fits are fixed across replicates.
    let mut oracle_rng = replicate_rng(cfg.seed, usize::MAX >> 1);
    let oracle_fits: Vec<Option<Vec<f64>>> = cfg
        .estimators
        .iter()
        .map(|e| match e {
            EstimatorSpec::PgdRf { params } => {
                let p = ForestParams {
                    seed: oracle_rng.next_u64(),
                    ..*params
                };
                let f = fit_forest(x.view(), data.y, TrainingScope::Population, &p)?;
                Ok(Some(
                    x.outer_iter()
                        .map(|r| f.predict(r.as_slice().expect("standard layout")))
                        .collect(),
                ))
            }
            _ => Ok(None),
        })
        .collect::<rfsurvey::Result<_>>()?;

    let per_rep: Vec<(f64, Vec<std::result::Result<Outcome, String>>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(cfg.seed, r);
            let sample = design.draw_sample_with(&mut rng);
            let ys = sample.gather(data.y);
            let s = SurveySample::new(&design, &sample, &ys).expect("consistent sample");
            let ht = ht_report(&s).expect("positive probabilities").point;
            let outcomes = cfg
                .estimators
                .iter()
                .zip(&oracle_fits)
                .map(|(spec, oracle)| {
                    let seed = rng.next_u64();
                    let report: rfsurvey::Result<EstimateReport<f64>> = match spec {
                        EstimatorSpec::Ht => ht_report(&s),
                        EstimatorSpec::Greg => greg_total(x.view(), &s, true),
                        EstimatorSpec::Cart { min_node_size } => {
                            cart_total(x.view(), &s, *min_node_size, seed)
                        }
                        EstimatorSpec::Rf { params } => {
                            rf_total_sample(x.view(), &s, &ForestParams { seed, ..*params })
                        }
                        EstimatorSpec::PgdRf { .. } => {
                            ma_total(oracle.as_ref().expect("oracle fits"), &s).map(|mut rep| {
                                rep.method = Method::PgdOracle;
                                rep
                            })
                        }
                    };
                    let report = match report {
                        Ok(rep) if cfg.variance => rep.with_variance(&s, cfg.level),
                        other => other,
                    };
                    report
                        .map(|rep| Outcome {
                            point: rep.point,
                            variance: rep.variance,
                            ci: rep.ci.map(|c| (c.lo, c.hi)),
                        })
                        .map_err(|e| e.to_string())
                })
                .collect();
            (ht, outcomes)
        })
        .collect();

    let ht_mse = mean(per_rep.iter().map(|(ht, _)| (ht - total) * (ht - total)));
    let mut rows = Vec::with_capacity(cfg.estimators.len());
    for (j, spec) in cfg.estimators.iter().enumerate() {
        let label = spec.label();
        let mut ok = Vec::new();
        let mut errors = Vec::new();
        for (_, outs) in &per_rep {
            match &outs[j] {
                Ok(o) => ok.push(*o),
                Err(e) => errors.push(e.clone()),
            }
        }
        if !errors.is_empty() {
            let rate = errors.len() as f64 / cfg.replicates as f64;
            if rate > cfg.max_failure_rate || ok.is_empty() {
                return Err(Error::TooManyFailures {
                    estimator: label,
                    failures: errors.len(),
                    replicates: cfg.replicates,
                    first: errors[0].clone(),
                });
            }
            log::warn!("{label}: {} failed replicates ({})", errors.len(), errors[0]);
        }
        rows.push(summarize(label, &ok, errors.len(), total, ht_mse));
    }

    let traces = if cfg.keep_traces {
        per_rep
            .iter()
            .enumerate()
            .flat_map(|(r, (_, outs))| {
                outs.iter().enumerate().filter_map(move |(j, o)| {
                    o.as_ref().ok().map(|o| Trace {
                        replicate: r,
                        estimator: j,
                        point: o.point,
                        variance: o.variance,
                    })
                })
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(McSummary {
        model: data.model.to_string(),
        n: cfg.n,
        replicates: cfg.replicates,
        total,
        rows,
        wall_time: start.elapsed(),
        traces,
    })
}

fn mean<I: Iterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.collect();
    compensated_sum(v.iter().copied()) / v.len() as f64
}

fn summarize(label: String, ok: &[Outcome], failures: usize, total: f64, ht_mse: f64) -> McRow {
    let m = ok.len() as f64;
    let rel: Vec<f64> = ok.iter().map(|o| (o.point - total) / total).collect();
    let rb = 100.0 * mean(rel.iter().copied());
    let rel_mean = rb / 100.0;
    let rel_sd = (compensated_sum(rel.iter().map(|r| (r - rel_mean).powi(2))) / (m - 1.0).max(1.0)).sqrt();
    let mse = mean(ok.iter().map(|o| (o.point - total).powi(2)));
    let point_mean = mean(ok.iter().map(|o| o.point));
    let mc_variance = mean(ok.iter().map(|o| (o.point - point_mean).powi(2)));

    let variances: Vec<f64> = ok.iter().filter_map(|o| o.variance).collect();
    let with_var = variances.len() == ok.len() && !ok.is_empty();
    let mean_variance_estimate = with_var.then(|| mean(variances.iter().copied()));
    let var_rb = mean_variance_estimate.map(|v| 100.0 * (v - mse) / mse);
    let coverage = with_var.then(|| {
        100.0 * mean(ok.iter().map(|o| {
            let (lo, hi) = o.ci.expect("interval");
            f64::from(u8::from(lo <= total && total <= hi))
        }))
    });
    let ci_length = with_var.then(|| mean(ok.iter().map(|o| o.ci.map_or(0.0, |(lo, hi)| hi - lo))));

    McRow {
        estimator: label,
        successes: ok.len(),
        failures,
        rb,
        rb_se: 100.0 * rel_sd / m.sqrt(),
        re: 100.0 * mse / ht_mse,
        mse,
        mc_variance,
        mean_variance_estimate,
        var_rb,
        coverage,
        ci_length,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |v| v.to_string())
}

impl McSummary {
    pub fn row(&self, estimator: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "model", "n", "estimator", "R", "RB", "RE", "MSE", "coverage", "ci_length", "wall_time", "var_rb",
    ];

    /// Summary rows without a header; `wall_time` is `NA` unless `timing` is set.
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>, timing: bool) -> Result<()> {
        let wall = if timing {
            format!("{:.3}", self.wall_time.as_secs_f64())
        } else {
            "NA".into()
        };
        for row in &self.rows {
            w.write_record([
                self.model.clone(),
                self.n.to_string(),
                row.estimator.clone(),
                self.replicates.to_string(),
                row.rb.to_string(),
                row.re.to_string(),
                row.mse.to_string(),
                opt(row.coverage),
                opt(row.ci_length),
                wall.clone(),
                opt(row.var_rb),
            ])?;
        }
        Ok(())
    }

    /// Per-replicate estimates: `model,n,replicate,estimator,point,variance`.
    pub fn write_traces<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for t in &self.traces {
            w.write_record([
                self.model.clone(),
                self.n.to_string(),
                t.replicate.to_string(),
                self.rows[t.estimator].estimator.clone(),
                t.point.to_string(),
                opt(t.variance),
            ])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{gen_population, working_predictors, SyntheticSpec};

    fn small(model: usize) -> (ndarray::Array2<f64>, Vec<f64>) {
        let pop = gen_population(&SyntheticSpec::new(800, 1)).unwrap();
        let x = pop.select_predictors(&working_predictors(model).unwrap()).unwrap();
        (x, pop.study(&format!("y{model}")).unwrap().to_vec())
    }

    fn forest(n_trees: usize) -> ForestParams {
        ForestParams {
            n_trees,
            ..Default::default()
        }
    }

    #[test]
    fn ht_reference_and_determinism() {
        let (x, y) = small(3);
        let data = McData { model: "y3", x: x.view(), y: &y };
        let mut cfg = McConfig::new(
            60,
            40,
            7,
            vec![EstimatorSpec::Ht, EstimatorSpec::Greg, EstimatorSpec::Rf { params: forest(10) }],
        );
        cfg.variance = true;
        let a = run_mc(data, &cfg).unwrap();
        let b = run_mc(data, &cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        let ht = a.row("ht").unwrap();
        assert_eq!(ht.re, 100.0);
        assert!(ht.coverage.is_some() && ht.var_rb.is_some());
        assert!(a.row("greg").unwrap().re < 100.0);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (x, y) = small(2);
        let data = McData { model: "y2", x: x.view(), y: &y };
        let cfg = McConfig::new(50, 12, 3, vec![EstimatorSpec::Rf { params: forest(8) }]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_mc(data, &cfg)).unwrap();
        let b = four.install(|| run_mc(data, &cfg)).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn ht_relative_efficiency_invariant_to_affine_rescaling() {
        let (x, y) = small(1);
        let scaled: Vec<f64> = y.iter().map(|v| 3.0 * v + 10.0).collect();
        let cfg = McConfig::new(40, 30, 1, vec![EstimatorSpec::Ht]);
        let a = run_mc(McData { model: "a", x: x.view(), y: &y }, &cfg).unwrap();
        let b = run_mc(McData { model: "b", x: x.view(), y: &scaled }, &cfg).unwrap();
        assert_eq!(a.rows[0].re, 100.0);
        assert_eq!(b.rows[0].re, 100.0);
    }

    #[test]
    fn failing_estimator_aborts() {
        let (x, y) = small(1);
        let data = McData { model: "y1", x: x.view(), y: &y };
        // Twenty sampled units cannot fill two nodes of fifteen.
        let cfg = McConfig::new(20, 5, 1, vec![EstimatorSpec::Cart { min_node_size: 15 }]);
        assert!(run_mc(data, &cfg).is_ok());
        let bad = ForestParams {
            min_node_size: 50,
            ..forest(2)
        };
        let cfg = McConfig::new(20, 5, 1, vec![EstimatorSpec::Rf { params: bad }]);
        assert!(matches!(run_mc(data, &cfg), Err(Error::TooManyFailures { .. })));
    }

    #[test]
    fn csv_rows_and_traces() {
        let (x, y) = small(1);
        let data = McData { model: "y1", x: x.view(), y: &y };
        let mut cfg = McConfig::new(30, 4, 2, vec![EstimatorSpec::Ht, EstimatorSpec::Greg]);
        cfg.keep_traces = true;
        let s = run_mc(data, &cfg).unwrap();
        assert_eq!(s.traces.len(), 8);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(McSummary::CSV_HEADER).unwrap();
        s.write_rows(&mut w, false).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("y1,30,ht,4,"));
        assert!(lines[1].contains(",NA,NA,NA,NA"));
    }
}
