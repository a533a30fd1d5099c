use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::RngCore;
use rfsurvey::calibration::{calibrate as solve, read_problem, write_weights, Distance};
use rfsurvey::design::{make_design, proportional_allocation, DesignKind, DesignSpec, SampleIndex};
use rfsurvey::estimators::{
    cart_total, greg_total, ht_report, rf_total_population, rf_total_sample, EstimateReport, SurveySample,
};
use rfsurvey::forest::{ForestParams, ResampleMode};
use rfsurvey::population::{CsvSpec, PopulationFrame};
use rfsurvey_simlab::mc::replicate_rng;
use rfsurvey_simlab::{
    gen_population, h5_diagnostic, run_mc, working_predictors, EstimatorSpec, H5Config, McConfig, McData,
    McSummary, NoiseReading, SyntheticSpec,
};

use crate::config::{ExperimentConfig, Planned};
use crate::CliError;

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub out: &'a Path,
}

impl Context<'_> {
    /// Writes CSV bytes followed by the metadata comment line.
    fn write_csv(&self, name: &str, w: csv::Writer<Vec<u8>>) -> Result<(), CliError> {
        let mut bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        bytes.extend(metadata(self.seed).as_bytes());
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

pub fn metadata(seed: u64) -> String {
    format!("# rfsurvey {} seed={seed}\n", env!("CARGO_PKG_VERSION"))
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing [{section}] section"))
}

fn load_population(ctx: &Context<'_>) -> Result<PopulationFrame<f64>, CliError> {
    let pop = ctx.cfg.population.as_ref().ok_or_else(|| missing("population"))?;
    match (&pop.synthetic, &pop.file) {
        (Some(s), None) => {
            let noise = match s.noise.as_deref() {
                None | Some("variance") => NoiseReading::Variance,
                Some("sd") => NoiseReading::StdDev,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "population.synthetic.noise must be \"variance\" or \"sd\", not '{other}'"
                    )))
                }
            };
            let spec = SyntheticSpec { n_units: s.n_units, seed: s.seed.unwrap_or(ctx.seed), noise };
            Ok(gen_population(&spec)?)
        }
        (None, Some(path)) => {
            let delimiter = pop.delimiter.unwrap_or(',');
            if !delimiter.is_ascii() {
                return Err(CliError::Config("population.delimiter must be an ASCII character".into()));
            }
            let spec = CsvSpec {
                delimiter: delimiter as u8,
                predictors: pop.predictors.clone(),
                study: pop.study.clone(),
                id_column: pop.id_column.clone(),
            };
            Ok(PopulationFrame::from_csv_path(path, &spec)?)
        }
        _ => Err(CliError::Config(
            "[population] needs exactly one of `synthetic` or `file`".into(),
        )),
    }
}

/// Predictor columns: explicit list, else the working set of a synthetic model, else all.
fn predictor_names(
    ctx: &Context<'_>,
    frame: &PopulationFrame<f64>,
    explicit: Option<&Vec<String>>,
    study: &str,
) -> Result<Vec<String>, CliError> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let synthetic = ctx.cfg.population.as_ref().is_some_and(|p| p.synthetic.is_some());
    if synthetic {
        let model = study
            .strip_prefix('y')
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| CliError::Config(format!("no working model for study variable '{study}'")))?;
        return Ok(working_predictors(model)?);
    }
    Ok(frame.predictor_names().to_vec())
}

fn study<'a>(frame: &'a PopulationFrame<f64>, name: &str) -> Result<&'a [f64], CliError> {
    frame
        .study(name)
        .ok_or_else(|| CliError::Config(format!("unknown study variable '{name}'")))
}

fn build_design(ctx: &Context<'_>, frame: &PopulationFrame<f64>) -> Result<DesignSpec<f64>, CliError> {
    let d = ctx.cfg.design.as_ref().ok_or_else(|| missing("design"))?;
    let big = frame.n_units();
    let kind = match d.kind.as_str() {
        "srswor" => {
            if d.strata.is_some() || d.sizes.is_some() {
                return Err(CliError::Config("`strata` and `sizes` need kind = \"stratified\"".into()));
            }
            DesignKind::Srswor { n: d.n }
        }
        "stratified" => {
            let column = d
                .strata
                .as_ref()
                .ok_or_else(|| CliError::Config("stratified design needs `strata`".into()))?;
            let codes = frame
                .predictor(column)
                .ok_or_else(|| CliError::Config(format!("unknown strata column '{column}'")))?;
            let mut index = BTreeMap::new();
            for &c in codes.iter() {
                if c.fract() != 0.0 {
                    return Err(CliError::Data(format!("stratum code {c} is not an integer")));
                }
                index.entry(c as i64).or_insert(0usize);
            }
            for (i, v) in index.values_mut().enumerate() {
                *v = i;
            }
            let labels: Vec<usize> = codes.iter().map(|&c| index[&(c as i64)]).collect();
            let mut counts = vec![0usize; index.len()];
            for &h in &labels {
                counts[h] += 1;
            }
            let sizes = match &d.sizes {
                Some(s) => s.clone(),
                None => proportional_allocation(&counts, d.n)?,
            };
            if sizes.iter().sum::<usize>() != d.n {
                return Err(CliError::Config(format!("stratum sizes do not add up to n = {}", d.n)));
            }
            DesignKind::StratifiedSrswor { labels, sizes }
        }
        other => return Err(CliError::Config(format!("unknown design kind '{other}'"))),
    };
    Ok(make_design(kind, big)?)
}

fn supplied_sample(path: &Path, frame: &PopulationFrame<f64>) -> Result<SampleIndex, CliError> {
    let position: BTreeMap<&str, usize> = frame
        .unit_ids()
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut members = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("");
        let k = position
            .get(id)
            .ok_or_else(|| CliError::Data(format!("sample id '{id}' is not in the population")))?;
        members.push(*k);
    }
    Ok(SampleIndex::from_members(members, frame.n_units())?)
}

fn mode_label(mode: ResampleMode) -> String {
    match mode {
        ResampleMode::None => "none".into(),
        ResampleMode::Bootstrap => "boot".into(),
        ResampleMode::Subsample(f) => format!("sub{f}"),
    }
}

fn to_spec(p: &Planned) -> Result<EstimatorSpec, CliError> {
    Ok(match p {
        Planned::Ht => EstimatorSpec::Ht,
        Planned::Greg => EstimatorSpec::Greg,
        Planned::Cart { min_node_size } => EstimatorSpec::Cart { min_node_size: *min_node_size },
        Planned::Rf(params) => EstimatorSpec::Rf { params: *params },
        Planned::PgdRf(params) => EstimatorSpec::PgdRf { params: *params },
        Planned::RfPopulation { .. } => {
            return Err(CliError::Config("rf_pop is available in `estimate` only".into()))
        }
    })
}

fn label(p: &Planned) -> String {
    match p {
        Planned::RfPopulation { params, proxy } => format!(
            "rf_pop[B={};n0={};mode={};mtry={};proxy={proxy}]",
            params.n_trees,
            params.min_node_size,
            mode_label(params.mode),
            params.mtry.map_or("auto".into(), |m| m.to_string())
        ),
        other => to_spec(other).map(|s| s.label()).unwrap_or_default(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| v.to_string())
}

pub fn estimate(ctx: &Context<'_>) -> Result<(), CliError> {
    let est = ctx.cfg.estimate.as_ref().ok_or_else(|| missing("estimate"))?;
    let frame = load_population(ctx)?;
    let y = study(&frame, &est.study)?;
    let names = predictor_names(ctx, &frame, est.predictors.as_ref(), &est.study)?;
    let x: Array2<f64> = frame.select_predictors(&names)?;
    let design = build_design(ctx, &frame)?;
    let mut rng = replicate_rng(ctx.seed, 0);
    let sample = match ctx.cfg.design.as_ref().and_then(|d| d.sample.as_ref()) {
        Some(path) => supplied_sample(path, &frame)?,
        None => design.draw_sample_with(&mut rng),
    };
    if let DesignKind::Srswor { n } = design.kind() {
        if sample.len() != *n {
            return Err(CliError::Data(format!(
                "supplied sample has {} units, design expects {n}",
                sample.len()
            )));
        }
    }
    let ys = sample.gather(y);
    let s = SurveySample::new(&design, &sample, &ys)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "study", "estimator", "n", "point", "variance", "se", "ci_lo", "ci_hi", "level", "weight_sum", "notes",
    ])?;
    for entry in &est.estimators {
        for planned in entry.expand(sample.len())? {
            let seed = rng.next_u64();
            let report: EstimateReport<f64> = match &planned {
                Planned::Ht => ht_report(&s)?,
                Planned::Greg => greg_total(x.view(), &s, true)?,
                Planned::Cart { min_node_size } => cart_total(x.view(), &s, *min_node_size, seed)?,
                Planned::Rf(p) => rf_total_sample(x.view(), &s, &ForestParams { seed, ..*p })?,
                Planned::RfPopulation { params, proxy } => {
                    let values: Vec<f64> = match frame.study(proxy) {
                        Some(v) => v.to_vec(),
                        None => frame
                            .predictor(proxy)
                            .ok_or_else(|| CliError::Config(format!("unknown proxy column '{proxy}'")))?
                            .to_vec(),
                    };
                    rf_total_population(x.view(), &values, &s, &ForestParams { seed, ..*params })?
                }
                Planned::PgdRf(_) => {
                    return Err(CliError::Config(
                        "pgd_rf needs the study variable on every unit and is available in `mc` only".into(),
                    ))
                }
            };
            let report = if est.variance { report.with_variance(&s, est.level)? } else { report };
            let (lo, hi) = report.ci.map_or((None, None), |c| (Some(c.lo), Some(c.hi)));
            w.write_record([
                est.study.clone(),
                label(&planned),
                sample.len().to_string(),
                report.point.to_string(),
                opt(report.variance),
                opt(report.variance.map(f64::sqrt)),
                opt(lo),
                opt(hi),
                if est.variance { est.level.to_string() } else { "NA".into() },
                opt(report.weight_sum()),
                report.notes.join(" | "),
            ])?;
        }
    }
    ctx.write_csv("estimate.csv", w)
}

pub fn mc(ctx: &Context<'_>) -> Result<(), CliError> {
    let sec = ctx.cfg.mc.as_ref().ok_or_else(|| missing("mc"))?;
    let frame = load_population(ctx)?;
    let studies: Vec<String> = match (&sec.models, &sec.study) {
        (Some(models), None) => models
            .iter()
            .map(|&m| rfsurvey_simlab::study_name(m))
            .collect::<Result<_, _>>()?,
        (None, Some(s)) => s.clone(),
        _ => return Err(CliError::Config("[mc] needs exactly one of `models` or `study`".into())),
    };
    if sec.models.is_some() && sec.predictors.is_some() {
        return Err(CliError::Config("`predictors` applies to `study` runs only".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(McSummary::CSV_HEADER)?;
    let mut traces = csv::Writer::from_writer(Vec::new());
    traces.write_record(["model", "n", "replicate", "estimator", "point", "variance"])?;
    for name in &studies {
        let y = study(&frame, name)?;
        let names = predictor_names(ctx, &frame, sec.predictors.as_ref(), name)?;
        let x = frame.select_predictors(&names)?;
        for n in sec.n.to_vec() {
            let mut specs = Vec::new();
            for entry in &sec.estimators {
                for planned in entry.expand(n)? {
                    specs.push(to_spec(&planned)?);
                }
            }
            let mut cfg = McConfig::new(n, sec.replicates, ctx.seed, specs);
            cfg.variance = sec.variance;
            cfg.level = sec.level;
            cfg.max_failure_rate = sec.max_failure_rate;
            cfg.keep_traces = sec.traces;
            let summary = run_mc(McData { model: name, x: x.view(), y }, &cfg)?;
            log::info!("{name} n={n}: {:.1}s", summary.wall_time.as_secs_f64());
            summary.write_rows(&mut w, sec.timing)?;
            if sec.traces {
                summary.write_traces(&mut traces)?;
            }
        }
    }
    ctx.write_csv("mc.csv", w)?;
    if sec.traces {
        ctx.write_csv("mc_traces.csv", traces)?;
    }
    Ok(())
}

pub fn calibrate(ctx: &Context<'_>) -> Result<(), CliError> {
    let sec = ctx.cfg.calibrate.as_ref().ok_or_else(|| missing("calibrate"))?;
    let distance: Distance = sec.distance.parse()?;
    let file = fs::File::open(&sec.problem)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", sec.problem.display())))?;
    let mut problem = read_problem::<f64, _>(file, distance)?;
    if let Some(m) = sec.max_iter {
        problem.options.max_iter = m;
    }
    if let Some(t) = sec.constraint_tol {
        problem.options.constraint_tol = t;
    }
    problem.options.weight_cap = sec.weight_cap;
    problem.validate()?;
    match solve(&problem) {
        Ok(r) => {
            for j in &r.dropped {
                eprintln!("rfsurvey: dropped collinear constraint column {j}");
            }
            let mut bytes = Vec::new();
            write_weights(&problem.ids, &r.weights, &mut bytes)?;
            bytes.extend(metadata(ctx.seed).as_bytes());
            fs::write(ctx.out.join("weights.csv"), bytes)?;
            Ok(())
        }
        Err(e) => {
            if let rfsurvey::Error::Infeasible { residuals, .. } | rfsurvey::Error::NonConvergence { residuals, .. } = &e {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["constraint", "target", "residual"])?;
                for (j, (r, t)) in residuals.iter().zip(&problem.targets).enumerate() {
                    eprintln!("rfsurvey: constraint {j}: target {t}, residual {r:e}");
                    w.write_record([j.to_string(), t.to_string(), r.to_string()])?;
                }
                ctx.write_csv("residuals.csv", w)?;
            }
            Err(e.into())
        }
    }
}

pub fn h5_diag(ctx: &Context<'_>) -> Result<(), CliError> {
    let default = crate::config::H5Section {
        sizes: None,
        sampling_fraction: None,
        replicates: None,
        n_trees: None,
        min_node_size: None,
        mode: None,
        fraction: None,
        mtry: None,
        probes: None,
    };
    let sec = ctx.cfg.h5.as_ref().unwrap_or(&default);
    let base = H5Config::default();
    let cfg = H5Config {
        sizes: sec.sizes.clone().unwrap_or(base.sizes),
        sampling_fraction: sec.sampling_fraction.unwrap_or(base.sampling_fraction),
        replicates: sec.replicates.unwrap_or(base.replicates),
        n_trees: sec.n_trees.unwrap_or(base.n_trees),
        min_node_size: sec.min_node_size.unwrap_or(base.min_node_size),
        mode: if sec.mode.is_some() || sec.fraction.is_some() { sec.mode()? } else { base.mode },
        mtry: sec.mtry.or(base.mtry),
        probes: sec.probes.unwrap_or(base.probes),
        seed: ctx.seed,
    };
    let points = h5_diagnostic(&cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n_units", "n", "population_min_node_size", "gap", "se"])?;
    for p in points {
        w.write_record([
            p.n_units.to_string(),
            p.n.to_string(),
            p.population_min_node_size.to_string(),
            p.gap.to_string(),
            p.se.to_string(),
        ])?;
    }
    ctx.write_csv("h5.csv", w)
}
