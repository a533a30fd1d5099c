//! Model calibration: a single weight system `w_k = d_k F(λᵀh_k)` that reproduces the
//! population size, the population totals of several model predictions, and known
//! auxiliary totals at once.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::{independent_columns, solve};
use crate::scalar::{compensated_sum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    /// `F(u) = 1 + u`; one linear solve.
    ChiSquare,
    /// `F(u) = exp(u)`; Newton iterations, always positive weights.
    Raking,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chi_square" | "chi-square" | "linear" => Ok(Distance::ChiSquare),
            "raking" | "exponential" => Ok(Distance::Raking),
            other => Err(Error::InvalidParameter(format!("unknown distance '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions<T> {
    pub max_iter: usize,
    /// Newton stops once `max |Δλ| ≤ step_tol`.
    pub step_tol: f64,
    /// Constraint `j` holds when `|Σ w h_j − t_j| ≤ constraint_tol·(1 + |t_j|)`.
    pub constraint_tol: f64,
    pub weight_cap: Option<T>,
    /// Relative pivot below which a constraint column counts as collinear.
    pub rank_tol: f64,
}

impl<T> Default for CalibrationOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 50,
            step_tol: 1e-10,
            constraint_tol: 1e-8,
            weight_cap: None,
            rank_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProblem<T> {
    pub ids: Vec<String>,
    /// Base weights `1/π_k`.
    pub d: Vec<T>,
    /// One row per sample unit, one column per constraint.
    pub h: Array2<T>,
    pub targets: Vec<T>,
    pub distance: Distance,
    pub options: CalibrationOptions<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult<T> {
    pub weights: Vec<T>,
    /// Multipliers per original constraint column; zero for dropped columns.
    pub lambda: Vec<T>,
    pub iterations: usize,
    /// `Σ w h_j − t_j` per original constraint column.
    pub residuals: Vec<T>,
    /// Constraint columns removed as collinear.
    pub dropped: Vec<usize>,
    /// Units held at the weight cap.
    pub capped: Vec<usize>,
}

/// Calibration variables and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDesign<T> {
    pub h: Array2<T>,
    pub targets: Vec<T>,
}

/// Builds `h_k = (1, m̂⁽¹⁾_k − m̄̂⁽¹⁾, …, m̂⁽q⁾_k − m̄̂⁽q⁾, v_k)` and the targets
/// `(N, Σ_U (m̂⁽ʲ⁾ − m̄̂⁽ʲ⁾), t_v)`, where `m̄̂⁽ʲ⁾` is the Hájek mean of model `j` on the sample.
///
/// `sample_predictions[j]` and `population_predictions[j]` hold model `j` on S and on U;
/// `aux[i]` holds auxiliary variable `i` on S and `aux_totals[i]` its known total.
pub fn build_h<T: Scalar>(
    d: &[T],
    n_units: usize,
    sample_predictions: &[Vec<T>],
    population_predictions: &[Vec<T>],
    aux: &[Vec<T>],
    aux_totals: &[T],
) -> Result<CalibrationDesign<T>> {
    let n = d.len();
    if sample_predictions.len() != population_predictions.len() {
        return Err(Error::LengthMismatch {
            what: "population prediction columns",
            got: population_predictions.len(),
            expected: sample_predictions.len(),
        });
    }
    if aux.len() != aux_totals.len() {
        return Err(Error::LengthMismatch {
            what: "auxiliary totals",
            got: aux_totals.len(),
            expected: aux.len(),
        });
    }
    for c in sample_predictions.iter().chain(aux) {
        if c.len() != n {
            return Err(Error::LengthMismatch {
                what: "sample column",
                got: c.len(),
                expected: n,
            });
        }
    }
    for c in population_predictions {
        if c.len() != n_units {
            return Err(Error::LengthMismatch {
                what: "population prediction column",
                got: c.len(),
                expected: n_units,
            });
        }
    }
    let q = sample_predictions.len();
    let dim = 1 + q + aux.len();
    let mut h = Array2::from_elem((n, dim), T::one());
    let mut targets = Vec::with_capacity(dim);
    targets.push(T::of_usize(n_units));
    let d_sum = compensated_sum(d.iter().copied());
    for (j, (ms, mu)) in sample_predictions.iter().zip(population_predictions).enumerate() {
        let mean = compensated_sum(ms.iter().zip(d).map(|(&m, &w)| m * w)) / d_sum;
        for (k, &m) in ms.iter().enumerate() {
            h[[k, 1 + j]] = m - mean;
        }
        targets.push(compensated_sum(mu.iter().map(|&m| m - mean)));
    }
    for (i, (v, &t)) in aux.iter().zip(aux_totals).enumerate() {
        for (k, &x) in v.iter().enumerate() {
            h[[k, 1 + q + i]] = x;
        }
        targets.push(t);
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("non-finite calibration target".into()));
    }
    Ok(CalibrationDesign { h, targets })
}

impl<T: Scalar> CalibrationProblem<T> {
    pub fn new(d: Vec<T>, design: CalibrationDesign<T>, distance: Distance) -> Result<Self> {
        let ids = (1..=d.len()).map(|i| i.to_string()).collect();
        let p = Self {
            ids,
            d,
            h: design.h,
            targets: design.targets,
            distance,
            options: CalibrationOptions::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.d.len();
        if self.h.nrows() != n {
            return Err(Error::LengthMismatch {
                what: "calibration variables",
                got: self.h.nrows(),
                expected: n,
            });
        }
        if self.ids.len() != n {
            return Err(Error::LengthMismatch {
                what: "unit ids",
                got: self.ids.len(),
                expected: n,
            });
        }
        if self.targets.len() != self.h.ncols() {
            return Err(Error::LengthMismatch {
                what: "calibration targets",
                got: self.targets.len(),
                expected: self.h.ncols(),
            });
        }
        if self.d.iter().any(|d| !(d.is_finite() && *d > T::zero())) {
            return Err(Error::Data("base weights must be positive and finite".into()));
        }
        if self.h.iter().chain(&self.targets).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite calibration input".into()));
        }
        if let Some(cap) = self.options.weight_cap {
            if !(cap > T::zero()) {
                return Err(Error::InvalidParameter("weight cap must be positive".into()));
            }
        }
        Ok(())
    }

    fn residuals(&self, w: &[T]) -> Vec<T> {
        self.h
            .columns()
            .into_iter()
            .zip(&self.targets)
            .map(|(col, &t)| compensated_sum(col.iter().zip(w).map(|(&h, &w)| h * w)) - t)
            .collect()
    }

    fn scaled_max(&self, residuals: &[T]) -> f64 {
        residuals
            .iter()
            .zip(&self.targets)
            .map(|(r, t)| r.abs().as_f64() / (1.0 + t.abs().as_f64()))
            .fold(0.0, f64::max)
    }
}

fn calibration_fn<T: Scalar>(distance: Distance, u: T) -> (T, T) {
    match distance {
        Distance::ChiSquare => (T::one() + u, T::one()),
        Distance::Raking => {
            let e = u.exp();
            (e, e)
        }
    }
}

/// Solves for `λ` on the active columns with the capped units held fixed.
struct Solver<'a, T> {
    p: &'a CalibrationProblem<T>,
    cols: &'a [usize],
    capped: &'a [bool],
    cap: T,
}

impl<T: Scalar> Solver<'_, T> {
    fn row(&self, k: usize) -> Array1<T> {
        self.cols.iter().map(|&j| self.p.h[[k, j]]).collect()
    }

    fn weights(&self, lambda: &Array1<T>) -> Vec<T> {
        (0..self.p.d.len())
            .map(|k| {
                if self.capped[k] {
                    self.cap
                } else {
                    self.p.d[k] * calibration_fn(self.p.distance, self.row(k).dot(lambda)).0
                }
            })
            .collect()
    }

    /// Constraint residuals on the active columns and their Jacobian in `λ`.
    fn system(&self, lambda: &Array1<T>) -> (Array1<T>, Array2<T>) {
        let m = self.cols.len();
        let mut f: Array1<T> = self.cols.iter().map(|&j| -self.p.targets[j]).collect();
        let mut jac = Array2::zeros((m, m));
        for k in 0..self.p.d.len() {
            let h = self.row(k);
            if self.capped[k] {
                f.scaled_add(self.cap, &h);
                continue;
            }
            let (value, slope) = calibration_fn(self.p.distance, h.dot(lambda));
            f.scaled_add(self.p.d[k] * value, &h);
            let s = self.p.d[k] * slope;
            for a in 0..m {
                for b in 0..m {
                    jac[[a, b]] += s * h[a] * h[b];
                }
            }
        }
        (f, jac)
    }

    fn solve(&self, start: Array1<T>, max_iter: usize, step_tol: f64) -> Result<(Array1<T>, usize)> {
        let mut lambda = start;
        let mut iterations = 0;
        loop {
            let (f, jac) = self.system(&lambda);
            let step = solve(&jac, &f, T::of(1e-13)).ok_or_else(|| {
                let residuals: Vec<f64> = f.iter().map(|v| v.as_f64()).collect();
                Error::Infeasible {
                    max_residual: residuals.iter().fold(0.0, |m, r| f64::max(m, r.abs())),
                    residuals,
                }
            })?;
            lambda = &lambda - &step;
            iterations += 1;
            let size = step.iter().fold(0.0, |m: f64, s| m.max(s.abs().as_f64()));
            if self.p.distance == Distance::ChiSquare || size <= step_tol {
                return Ok((lambda, iterations));
            }
            if iterations >= max_iter {
                let w = self.weights(&lambda);
                let residuals: Vec<f64> = self.p.residuals(&w).iter().map(|r| r.as_f64()).collect();
                return Err(Error::NonConvergence {
                    iterations,
                    max_residual: self.p.scaled_max(&self.p.residuals(&w)),
                    residuals,
                });
            }
        }
    }
}

/// Solves the calibration equations `Σ_S w_k h_k = t`.
///
/// Collinear constraint columns are dropped (with a warning) before solving and verified
/// afterwards. With a weight cap, units whose weight exceeds the cap are fixed at the cap and
/// the remaining units re-solved until no free weight exceeds it.
pub fn calibrate<T: Scalar>(p: &CalibrationProblem<T>) -> Result<CalibrationResult<T>> {
    p.validate()?;
    let n = p.d.len();
    let dim = p.h.ncols();

    let mut gram = Array2::<T>::zeros((dim, dim));
    for (k, row) in p.h.outer_iter().enumerate() {
        for a in 0..dim {
            for b in 0..dim {
                gram[[a, b]] += p.d[k] * row[a] * row[b];
            }
        }
    }
    let cols = independent_columns(&gram, T::of(p.options.rank_tol));
    let dropped: Vec<usize> = (0..dim).filter(|j| !cols.contains(j)).collect();
    if !dropped.is_empty() {
        log::warn!("calibration columns {dropped:?} are collinear and were dropped");
    }

    let mut capped = vec![false; n];
    let cap = p.options.weight_cap.unwrap_or_else(T::infinity);
    let mut lambda = Array1::zeros(cols.len());
    let mut iterations = 0;
    let weights = loop {
        let solver = Solver {
            p,
            cols: &cols,
            capped: &capped,
            cap,
        };
        let (l, it) = solver.solve(lambda.clone(), p.options.max_iter, p.options.step_tol)?;
        lambda = l;
        iterations += it;
        let w = solver.weights(&lambda);
        let over: Vec<usize> = (0..n).filter(|&k| !capped[k] && w[k] > cap).collect();
        if over.is_empty() {
            break w;
        }
        for k in over {
            capped[k] = true;
        }
        if capped.iter().all(|&c| c) {
            break vec![cap; n];
        }
    };

    let residuals = p.residuals(&weights);
    let max_residual = p.scaled_max(&residuals);
    if max_residual > p.options.constraint_tol {
        return Err(Error::Infeasible {
            max_residual,
            residuals: residuals.iter().map(|r| r.as_f64()).collect(),
        });
    }
    let mut full_lambda = vec![T::zero(); dim];
    for (&j, &l) in cols.iter().zip(lambda.iter()) {
        full_lambda[j] = l;
    }
    let capped: Vec<usize> = (0..n).filter(|&k| capped[k]).collect();
    if !capped.is_empty() {
        log::info!("{} calibrated weights held at the cap", capped.len());
    }
    Ok(CalibrationResult {
        weights,
        lambda: full_lambda,
        iterations,
        residuals,
        dropped,
        capped,
    })
}

/// `Σ_S w_k y_k`.
pub fn mc_total<T: Scalar>(weights: &[T], y: &[T]) -> Result<T> {
    if weights.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "study variable",
            got: y.len(),
            expected: weights.len(),
        });
    }
    Ok(compensated_sum(weights.iter().zip(y).map(|(&w, &y)| w * y)))
}

const TOTAL_ROW: &str = "TOTAL";

/// Writes `id,d,h0,…` rows followed by a `TOTAL` row holding the targets.
pub fn write_problem<T: Scalar, W: Write>(p: &CalibrationProblem<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "d".to_string()];
    header.extend((0..p.h.ncols()).map(|j| format!("h{j}")));
    w.write_record(&header)?;
    for (k, row) in p.h.outer_iter().enumerate() {
        let mut rec = vec![p.ids[k].clone(), p.d[k].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let mut rec = vec![TOTAL_ROW.to_string(), String::new()];
    rec.extend(p.targets.iter().map(|v| v.to_string()));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

fn parse<T: Scalar>(field: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(T::of)
        .ok_or_else(|| Error::Data(format!("line {line}: cannot parse '{field}' as a number")))
}

/// Reads the format of [`write_problem`]; lines starting with `#` are ignored.
pub fn read_problem<T: Scalar, R: Read>(input: R, distance: Distance) -> Result<CalibrationProblem<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "d" {
        return Err(Error::Data("calibration problem header must start with id,d".into()));
    }
    let dim = header.len() - 2;
    let mut ids = Vec::new();
    let mut d = Vec::new();
    let mut h = Vec::new();
    let mut targets = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != dim + 2 {
            return Err(Error::Data(format!("line {line}: expected {} fields", dim + 2)));
        }
        let values = (2..dim + 2)
            .map(|j| parse::<T>(&rec[j], line))
            .collect::<Result<Vec<T>>>()?;
        if &rec[0] == TOTAL_ROW {
            targets = Some(values);
        } else {
            if targets.is_some() {
                return Err(Error::Data(format!("line {line}: unit after the TOTAL row")));
            }
            ids.push(rec[0].to_string());
            d.push(parse::<T>(&rec[1], line)?);
            h.extend(values);
        }
    }
    let targets = targets.ok_or_else(|| Error::Data("missing TOTAL row".into()))?;
    let n = ids.len();
    let p = CalibrationProblem {
        ids,
        d,
        h: Array2::from_shape_vec((n, dim), h).expect("row-major calibration matrix"),
        targets,
        distance,
        options: CalibrationOptions::default(),
    };
    p.validate()?;
    Ok(p)
}

/// Writes `id,w` rows.
pub fn write_weights<T: Scalar, W: Write>(ids: &[String], weights: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "w"])?;
    for (id, v) in ids.iter().zip(weights) {
        w.write_record([id.as_str(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `id,w` rows.
pub fn read_weights<T: Scalar, R: Read>(input: R) -> Result<(Vec<String>, Vec<T>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut ids = Vec::new();
    let mut w = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Data(format!("line {}: expected id,w", i + 2)));
        }
        ids.push(rec[0].to_string());
        w.push(parse::<T>(&rec[1], i + 2)?);
    }
    Ok((ids, w))
}

/// `Σ_S w_k h_k` per column.
pub fn weighted_totals<T: Scalar>(h: &Array2<T>, w: &[T]) -> Vec<T> {
    h.columns()
        .into_iter()
        .map(|c: ArrayView1<'_, T>| compensated_sum(c.iter().zip(w).map(|(&h, &w)| h * w)))
        .collect()
}
