//! Point estimators of a population total.
//!
//! Every model-assisted estimator here has the difference form
//! `Σ_U m̂(x_k) + Σ_S (y_k − m̂(x_k))/π_k`; they differ in how `m̂` is obtained.
//! Estimators that are linear in `y` also expose their case weights `w_k`, with
//! `t̂ = Σ_S w_k y_k`.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::design::{DesignSpec, SampleIndex};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestModel, ForestParams, ResampleMode, TrainingScope};
use crate::linalg::solve;
use crate::scalar::{compensated_sum, Scalar};
use crate::variance::{confidence_interval, var_ma, ResidualSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ht,
    Greg,
    Cart,
    RfSample,
    RfPopulation,
    ModelAssisted,
    /// Needs the study variable on the whole population.
    PgdOracle,
    Calibrated,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ht => "ht",
            Method::Greg => "greg",
            Method::Cart => "cart",
            Method::RfSample => "rf",
            Method::RfPopulation => "rf_pop",
            Method::ModelAssisted => "ma",
            Method::PgdOracle => "pgd_oracle",
            Method::Calibrated => "mc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport<T> {
    pub method: Method,
    pub point: T,
    /// Variance of the total.
    pub variance: Option<T>,
    pub ci: Option<Interval<T>>,
    /// `w_k` per sample member, in member order.
    pub case_weights: Option<Vec<T>>,
    /// `y_k − m̂(x_k)` per sample member, in member order.
    pub residuals: Option<Vec<T>>,
    pub notes: Vec<String>,
}

impl<T: Scalar> EstimateReport<T> {
    pub fn new(method: Method, point: T) -> Self {
        Self {
            method,
            point,
            variance: None,
            ci: None,
            case_weights: None,
            residuals: None,
            notes: Vec::new(),
        }
    }

    pub fn weight_sum(&self) -> Option<T> {
        self.case_weights
            .as_ref()
            .map(|w| compensated_sum(w.iter().copied()))
    }

    /// `Σ_S w_k y_k` with the report's case weights.
    pub fn weighted_total(&self, y: &[T]) -> Option<T> {
        let w = self.case_weights.as_ref()?;
        Some(compensated_sum(w.iter().zip(y).map(|(&w, &y)| w * y)))
    }

    /// Attaches the residual-based variance and a normal interval at `level`.
    pub fn with_variance(mut self, s: &SurveySample<'_, T>, level: f64) -> Result<Self> {
        let residuals = self
            .residuals
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("estimate carries no residuals".into()))?;
        let r = ResidualSet::new(residuals, s.sample, s.design)?;
        let v = var_ma(&r)?.total_scale;
        let (lo, hi) = confidence_interval(self.point, v, level)?;
        self.variance = Some(v);
        self.ci = Some(Interval { lo, hi, level });
        Ok(self)
    }
}

/// A drawn sample with its design and the study variable observed on it.
#[derive(Debug, Clone, Copy)]
pub struct SurveySample<'a, T> {
    pub design: &'a DesignSpec<T>,
    pub sample: &'a SampleIndex,
    /// Study variable per member, in member order.
    pub y: &'a [T],
}

impl<'a, T: Scalar> SurveySample<'a, T> {
    pub fn new(design: &'a DesignSpec<T>, sample: &'a SampleIndex, y: &'a [T]) -> Result<Self> {
        if sample.n_units() != design.n_units() {
            return Err(Error::LengthMismatch {
                what: "sample indicator",
                got: sample.n_units(),
                expected: design.n_units(),
            });
        }
        if y.len() != sample.len() {
            return Err(Error::LengthMismatch {
                what: "sample study variable",
                got: y.len(),
                expected: sample.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite study variable".into()));
        }
        Ok(Self { design, sample, y })
    }

    pub fn n_units(&self) -> usize {
        self.design.n_units()
    }

    pub fn pi(&self) -> Vec<T> {
        self.design.sample_pi(self.sample)
    }

    pub fn inv_pi(&self) -> Vec<T> {
        self.pi().into_iter().map(|p| T::one() / p).collect()
    }

    /// Predictor rows of the sample members.
    pub fn rows(&self, x_pop: ArrayView2<'_, T>) -> Array2<T> {
        x_pop.select(Axis(0), self.sample.members())
    }

    fn check_population_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n_units() {
            return Err(Error::LengthMismatch {
                what: "population predictors",
                got: rows,
                expected: self.n_units(),
            });
        }
        Ok(())
    }
}

/// `Σ_S y_k/π_k`.
pub fn ht_total<T: Scalar>(y: &[T], pi: &[T]) -> Result<T> {
    if y.len() != pi.len() {
        return Err(Error::LengthMismatch {
            what: "inclusion probabilities",
            got: pi.len(),
            expected: y.len(),
        });
    }
    if pi.iter().any(|&p| !(p > T::zero())) {
        return Err(Error::InvalidParameter("inclusion probabilities must be positive".into()));
    }
    Ok(compensated_sum(y.iter().zip(pi).map(|(&y, &p)| y / p)))
}

/// Horvitz–Thompson with case weights `1/π_k`; its residuals are `y` itself.
pub fn ht_report<T: Scalar>(s: &SurveySample<'_, T>) -> Result<EstimateReport<T>> {
    let pi = s.pi();
    let mut r = EstimateReport::new(Method::Ht, ht_total(s.y, &pi)?);
    r.case_weights = Some(pi.iter().map(|&p| T::one() / p).collect());
    r.residuals = Some(s.y.to_vec());
    Ok(r)
}

/// Difference estimator with fits that must not depend on the sample. Needs population `y`
/// to build such fits, so it serves as an oracle.
pub fn pgd_total<T: Scalar>(fixed_fits: &[T], s: &SurveySample<'_, T>) -> Result<T> {
    Ok(ma_total(fixed_fits, s)?.point)
}

/// `Σ_U m̂ + Σ_S (y − m̂)/π` for fits `m̂` given on every population unit.
pub fn ma_total<T: Scalar>(fits: &[T], s: &SurveySample<'_, T>) -> Result<EstimateReport<T>> {
    if fits.len() != s.n_units() {
        return Err(Error::LengthMismatch {
            what: "population fits",
            got: fits.len(),
            expected: s.n_units(),
        });
    }
    let residuals: Vec<T> = s
        .sample
        .members()
        .iter()
        .zip(s.y)
        .map(|(&k, &y)| y - fits[k])
        .collect();
    let correction = ht_total(&residuals, &s.pi())?;
    let mut r = EstimateReport::new(
        Method::ModelAssisted,
        compensated_sum(fits.iter().copied()) + correction,
    );
    r.residuals = Some(residuals);
    Ok(r)
}

fn with_intercept<T: Scalar>(x: ArrayView2<'_, T>, intercept: bool) -> Array2<T> {
    if !intercept {
        return x.to_owned();
    }
    let (n, p) = x.dim();
    let mut out = Array2::from_elem((n, p + 1), T::one());
    out.slice_mut(ndarray::s![.., 1..]).assign(&x);
    out
}

/// GREG on the population predictors `x_pop` (an intercept column is prepended when asked).
///
/// If the weighted cross-product is singular a ridge of `1e-8·trace/dim` is added once and
/// noted in the report; if it is still singular the estimate fails.
pub fn greg_total<T: Scalar>(
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
    intercept: bool,
) -> Result<EstimateReport<T>> {
    s.check_population_rows(x_pop.nrows())?;
    let x_all = with_intercept(x_pop, intercept);
    let xs = x_all.select(Axis(0), s.sample.members());
    let d = s.inv_pi();
    let q = xs.ncols();

    let mut cross = Array2::<T>::zeros((q, q));
    let mut xy = Array1::<T>::zeros(q);
    let mut ht_x = Array1::<T>::zeros(q);
    for (i, row) in xs.outer_iter().enumerate() {
        for a in 0..q {
            ht_x[a] += d[i] * row[a];
            xy[a] += d[i] * row[a] * s.y[i];
            for b in 0..q {
                cross[[a, b]] += d[i] * row[a] * row[b];
            }
        }
    }
    let totals: Array1<T> = x_all
        .columns()
        .into_iter()
        .map(|c| compensated_sum(c.iter().copied()))
        .collect();

    let tol = T::of(1e-12);
    let mut notes = Vec::new();
    let beta = match solve(&cross, &xy, tol) {
        Some(b) => b,
        None => {
            let trace = (0..q).map(|a| cross[[a, a]]).fold(T::zero(), |acc, v| acc + v);
            let eps = T::of(1e-8) * trace / T::of_usize(q.max(1));
            for a in 0..q {
                cross[[a, a]] += eps;
            }
            log::warn!("GREG cross-product singular; ridge {eps} added");
            notes.push(format!("ridge {eps} added to a singular cross-product"));
            solve(&cross, &xy, tol).ok_or(Error::RankDeficient)?
        }
    };
    let lambda = solve(&cross, &(&totals - &ht_x), tol).ok_or(Error::RankDeficient)?;

    let fits_s = xs.dot(&beta);
    let residuals: Vec<T> = s.y.iter().zip(fits_s.iter()).map(|(&y, &m)| y - m).collect();
    let projection = totals.dot(&beta);
    let point = projection + ht_total(&residuals, &s.pi())?;
    let weights: Vec<T> = xs
        .outer_iter()
        .zip(&d)
        .map(|(row, &dk)| dk * (T::one() + row.dot(&lambda)))
        .collect();

    let mut r = EstimateReport::new(Method::Greg, point);
    r.case_weights = Some(weights);
    r.residuals = Some(residuals);
    r.notes = notes;
    Ok(r)
}

/// Terminal node reached by every population unit, per tree.
fn route_population<T: Scalar>(forest: &ForestModel<T>, x: &Array2<T>) -> Vec<Vec<u32>> {
    (0..forest.n_trees())
        .into_par_iter()
        .map(|b| {
            let tree = &forest.trees()[b];
            x.outer_iter()
                .map(|row| match row.as_slice() {
                    Some(r) => tree.route(r) as u32,
                    None => tree.route(&row.to_vec()) as u32,
                })
                .collect()
        })
        .collect()
}

/// Per-unit average over trees of a per-(tree, node) value.
fn average_over_trees<T: Scalar, F>(assign: &[Vec<u32>], n_units: usize, value: F) -> Vec<T>
where
    F: Fn(usize, usize) -> T + Sync,
{
    let inv_b = T::one() / T::of_usize(assign.len());
    (0..n_units)
        .into_par_iter()
        .map(|l| {
            let mut acc = T::zero();
            for (b, a) in assign.iter().enumerate() {
                acc += value(b, a[l] as usize);
            }
            acc * inv_b
        })
        .collect()
}

/// `Σ_{ℓ∈U} (1 − I_ℓ/π_ℓ)` over the units of each node of one tree.
fn node_deficits<T: Scalar>(assign: &[u32], n_nodes: usize, deficit: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n_nodes];
    for (l, &node) in assign.iter().enumerate() {
        out[node as usize] += deficit[l];
    }
    out
}

fn deficits<T: Scalar>(s: &SurveySample<'_, T>) -> Vec<T> {
    let pi = s.design.pi();
    s.sample
        .indicator()
        .iter()
        .zip(pi)
        .map(|(&i, &p)| if i { T::one() - T::one() / p } else { T::one() })
        .collect()
}

/// Sums per-tree vectors in tree order.
fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for part in parts {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    out
}

fn standard<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.as_standard_layout().into_owned()
}

/// Random forest grown on the sample (Hájek node means) and its model-assisted estimate.
pub fn rf_total_sample<T: Scalar>(
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
    params: &ForestParams,
) -> Result<EstimateReport<T>> {
    s.check_population_rows(x_pop.nrows())?;
    let forest = fit_sample_forest(x_pop, s, params)?;
    rf_sample_estimate(&forest, x_pop, s)
}

/// Fits the forest on the sample rows with design weights `1/π`.
pub fn fit_sample_forest<T: Scalar>(
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
    params: &ForestParams,
) -> Result<ForestModel<T>> {
    s.check_population_rows(x_pop.nrows())?;
    let xs = s.rows(x_pop);
    fit_forest(
        xs.view(),
        s.y,
        TrainingScope::Sample { inv_pi: s.inv_pi() },
        params,
    )
}

fn check_sample_forest<T: Scalar>(forest: &ForestModel<T>, s: &SurveySample<'_, T>) -> Result<()> {
    if !matches!(forest.scope(), TrainingScope::Sample { .. }) {
        return Err(Error::InvalidParameter("forest was not trained on a sample".into()));
    }
    if forest.n_training_units() != s.sample.len() {
        return Err(Error::LengthMismatch {
            what: "forest training units",
            got: forest.n_training_units(),
            expected: s.sample.len(),
        });
    }
    Ok(())
}

/// Estimate and case weights from a forest already fitted by [`fit_sample_forest`].
pub fn rf_sample_estimate<T: Scalar>(
    forest: &ForestModel<T>,
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
) -> Result<EstimateReport<T>> {
    check_sample_forest(forest, s)?;
    s.check_population_rows(x_pop.nrows())?;
    let x = standard(x_pop);
    let n_units = s.n_units();
    let assign = route_population(forest, &x);
    let fits = average_over_trees(&assign, n_units, |b, node| forest.node_mean(b, node));

    let mut r = ma_total(&fits, s)?;
    r.method = Method::RfSample;

    let inv_pi = s.inv_pi();
    let deficit = deficits(s);
    let parts: Vec<Vec<T>> = (0..forest.n_trees())
        .into_par_iter()
        .map(|b| {
            let tree = &forest.trees()[b];
            let a = node_deficits(&assign[b], tree.nodes().len(), &deficit);
            let mut part = vec![T::zero(); inv_pi.len()];
            for id in tree.terminal_ids() {
                let scale = a[id] / forest.node_denominator(b, id);
                for &(k, c) in tree.terminal_members(id) {
                    part[k] += T::of(c as f64) * inv_pi[k] * scale;
                }
            }
            part
        })
        .collect();
    let inv_b = T::one() / T::of_usize(forest.n_trees());
    let extra = sum_in_order(parts, inv_pi.len());
    r.case_weights = Some(
        inv_pi
            .iter()
            .zip(extra)
            .map(|(&d, e)| d + e * inv_b)
            .collect(),
    );
    Ok(r)
}

/// Single CART tree on the sample: a one-tree forest without resampling using every predictor.
pub fn cart_total<T: Scalar>(
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
    min_node_size: usize,
    seed: u64,
) -> Result<EstimateReport<T>> {
    let params = ForestParams {
        n_trees: 1,
        mtry: Some(x_pop.ncols().max(1)),
        min_node_size,
        mode: ResampleMode::None,
        seed,
    };
    let mut r = rf_total_sample(x_pop, s, &params)?;
    r.method = Method::Cart;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OobDecomposition<T> {
    /// `Σ_U m̂(x_k)`.
    pub projection: T,
    /// Average over trees of the design-weighted out-of-bag residual sum.
    pub correction: T,
}

impl<T: Scalar> OobDecomposition<T> {
    pub fn total(&self) -> T {
        self.projection + self.correction
    }
}

/// Splits the sample-forest estimate into a projection term and an out-of-bag correction.
pub fn oob_decomposition<T: Scalar>(
    forest: &ForestModel<T>,
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
) -> Result<OobDecomposition<T>> {
    check_sample_forest(forest, s)?;
    s.check_population_rows(x_pop.nrows())?;
    let x = standard(x_pop);
    let assign = route_population(forest, &x);
    let fits = average_over_trees(&assign, s.n_units(), |b, node| forest.node_mean(b, node));
    let inv_pi = s.inv_pi();
    let members = s.sample.members();
    let per_tree: Vec<T> = (0..forest.n_trees())
        .into_par_iter()
        .map(|b| {
            let c = forest.membership(b);
            compensated_sum(members.iter().enumerate().map(|(i, &k)| {
                let fit = forest.node_mean(b, assign[b][k] as usize);
                (T::one() - T::of(c[i] as f64)) * (s.y[i] - fit) * inv_pi[i]
            }))
        })
        .collect();
    Ok(OobDecomposition {
        projection: compensated_sum(fits),
        correction: compensated_sum(per_tree) / T::of_usize(forest.n_trees()),
    })
}

/// Forest grown on the whole population with the proxy `y*`; the partition never looks at
/// the sample, and the study variable enters only through node-level HT sums.
pub fn rf_total_population<T: Scalar>(
    x_pop: ArrayView2<'_, T>,
    proxy: &[T],
    s: &SurveySample<'_, T>,
    params: &ForestParams,
) -> Result<EstimateReport<T>> {
    s.check_population_rows(x_pop.nrows())?;
    let forest = fit_forest(x_pop, proxy, TrainingScope::Population, params)?;
    let mut r = rf_population_estimate(&forest, x_pop, s)?;
    if s.sample.gather(proxy) == s.y {
        r.notes
            .push("proxy equals the study variable on the sample; weights depend on y".into());
    }
    Ok(r)
}

/// Estimate and case weights from a population-trained forest.
pub fn rf_population_estimate<T: Scalar>(
    forest: &ForestModel<T>,
    x_pop: ArrayView2<'_, T>,
    s: &SurveySample<'_, T>,
) -> Result<EstimateReport<T>> {
    if !matches!(forest.scope(), TrainingScope::Population) {
        return Err(Error::InvalidParameter("forest was not trained on the population".into()));
    }
    s.check_population_rows(x_pop.nrows())?;
    if forest.n_training_units() != s.n_units() {
        return Err(Error::LengthMismatch {
            what: "forest training units",
            got: forest.n_training_units(),
            expected: s.n_units(),
        });
    }
    let n_units = s.n_units();
    let pi = s.design.pi();
    let indicator = s.sample.indicator();
    let mut y_full = vec![T::zero(); n_units];
    for (&k, &y) in s.sample.members().iter().zip(s.y) {
        y_full[k] = y;
    }
    let x = standard(x_pop);
    let assign = route_population(forest, &x);
    let deficit = deficits(s);

    // Per tree: node HT means over sampled members, and case-weight increments.
    let per_tree: Vec<(Vec<T>, Vec<T>)> = (0..forest.n_trees())
        .into_par_iter()
        .map(|b| {
            let tree = &forest.trees()[b];
            let a = node_deficits(&assign[b], tree.nodes().len(), &deficit);
            let mut ht_mean = vec![T::zero(); tree.nodes().len()];
            let mut part = vec![T::zero(); n_units];
            for id in tree.terminal_ids() {
                let den = forest.node_denominator(b, id);
                let mut acc = T::zero();
                for &(k, c) in tree.terminal_members(id) {
                    if indicator[k] {
                        let w = T::of(c as f64) / pi[k];
                        acc += w * y_full[k];
                        part[k] += w * a[id] / den;
                    }
                }
                ht_mean[id] = acc / den;
            }
            (ht_mean, part)
        })
        .collect();
    let (means, parts): (Vec<_>, Vec<_>) = per_tree.into_iter().unzip();
    let fits = average_over_trees(&assign, n_units, |b, node| means[b][node]);
    let mut r = ma_total(&fits, s)?;
    r.method = Method::RfPopulation;

    let inv_b = T::one() / T::of_usize(forest.n_trees());
    let extra = sum_in_order(parts, n_units);
    r.case_weights = Some(
        s.sample
            .members()
            .iter()
            .map(|&k| (T::one() + extra[k] * inv_b * pi[k]) / pi[k])
            .collect(),
    );
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainEstimate<T> {
    pub report: EstimateReport<T>,
    /// `Σ_{S∩d} 1/π_k`.
    pub size_estimate: T,
    /// Domain total over the estimated domain size.
    pub proportion: T,
}

/// Runs `estimator` on `y·1_d` and relates the result to the HT domain-size estimate.
pub fn domain_total<T, F>(
    s: &SurveySample<'_, T>,
    in_domain: &[bool],
    estimator: F,
) -> Result<DomainEstimate<T>>
where
    T: Scalar,
    F: FnOnce(&SurveySample<'_, T>) -> Result<EstimateReport<T>>,
{
    if in_domain.len() != s.y.len() {
        return Err(Error::LengthMismatch {
            what: "domain indicator",
            got: in_domain.len(),
            expected: s.y.len(),
        });
    }
    let pi = s.pi();
    let size_estimate = compensated_sum(
        in_domain
            .iter()
            .zip(&pi)
            .filter(|(&d, _)| d)
            .map(|(_, &p)| T::one() / p),
    );
    if !(size_estimate > T::zero()) {
        return Err(Error::EmptyDomain);
    }
    let y_d: Vec<T> = s
        .y
        .iter()
        .zip(in_domain)
        .map(|(&y, &d)| if d { y } else { T::zero() })
        .collect();
    let masked = SurveySample { y: &y_d, ..*s };
    let report = estimator(&masked)?;
    Ok(DomainEstimate {
        proportion: report.point / size_estimate,
        size_estimate,
        report,
    })
}
