//! Residual-based variance estimation for model-assisted totals and normal intervals.
//!
//! For residuals `ê_k = y_k − m̂(x_k)` on the sample,
//!
//! `V̂(t̂/N) = N⁻² Σ_{k∈S} Σ_{ℓ∈S} (π_kℓ − π_k π_ℓ)/π_kℓ · (ê_k/π_k)(ê_ℓ/π_ℓ)`.
//!
//! Under SRSWOR and stratified SRSWOR the double sum collapses to the familiar
//! `N_h²(1 − f_h) s²_h / n_h` closed forms, which [`var_ma`] uses automatically.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{DesignKind, DesignSpec, SampleIndex};
use crate::error::{Error, Result};
use crate::scalar::{compensated_sum, Scalar};

/// Sample residuals together with the design that drew the sample.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSet<'a, T> {
    pub residuals: &'a [T],
    pub sample: &'a SampleIndex,
    pub design: &'a DesignSpec<T>,
}

impl<'a, T: Scalar> ResidualSet<'a, T> {
    pub fn new(residuals: &'a [T], sample: &'a SampleIndex, design: &'a DesignSpec<T>) -> Result<Self> {
        if residuals.len() != sample.len() {
            return Err(Error::LengthMismatch {
                what: "residuals",
                got: residuals.len(),
                expected: sample.len(),
            });
        }
        if sample.n_units() != design.n_units() {
            return Err(Error::LengthMismatch {
                what: "sample indicator",
                got: sample.n_units(),
                expected: design.n_units(),
            });
        }
        if residuals.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data("non-finite residual".into()));
        }
        Ok(Self { residuals, sample, design })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate<T> {
    /// Variance of `t̂ / N`.
    pub mean_scale: T,
    /// Variance of `t̂`, i.e. `N²` times `mean_scale`.
    pub total_scale: T,
}

impl<T: Scalar> VarianceEstimate<T> {
    fn from_total(total: T, n_units: usize) -> Self {
        let n2 = T::of_usize(n_units) * T::of_usize(n_units);
        Self {
            mean_scale: total / n2,
            total_scale: total,
        }
    }
}

/// Variance estimate, using a closed form when the design admits one.
pub fn var_ma<T: Scalar>(r: &ResidualSet<'_, T>) -> Result<VarianceEstimate<T>> {
    match var_ma_closed_form(r) {
        Some(v) => v,
        None => var_ma_double_sum(r),
    }
}

/// The general `O(n²)` double sum.
pub fn var_ma_double_sum<T: Scalar>(r: &ResidualSet<'_, T>) -> Result<VarianceEstimate<T>> {
    let members = r.sample.members();
    let pi = r.design.pi();
    let expanded: Vec<T> = members
        .iter()
        .zip(r.residuals)
        .map(|(&k, &e)| e / pi[k])
        .collect();
    let mut terms = Vec::with_capacity(members.len() * members.len());
    for (i, &k) in members.iter().enumerate() {
        for (j, &l) in members.iter().enumerate() {
            let pkl = r.design.pi_joint(k, l);
            if pkl <= T::zero() {
                return Err(Error::VarianceNotEstimable(k, l));
            }
            terms.push((pkl - pi[k] * pi[l]) / pkl * expanded[i] * expanded[j]);
        }
    }
    Ok(VarianceEstimate::from_total(
        compensated_sum(terms),
        r.design.n_units(),
    ))
}

/// `Σ_h N_h² (1 − n_h/N_h) s²_h / n_h` for SRSWOR (one stratum) and stratified SRSWOR.
///
/// Returns `None` for designs without a closed form, or when a stratum is sampled but
/// holds a single unit.
pub fn var_ma_closed_form<T: Scalar>(
    r: &ResidualSet<'_, T>,
) -> Option<Result<VarianceEstimate<T>>> {
    let members = r.sample.members();
    let groups: Vec<(usize, usize, Vec<T>)> = match r.design.kind() {
        DesignKind::Srswor { n } => vec![(r.design.n_units(), *n, r.residuals.to_vec())],
        DesignKind::StratifiedSrswor { .. } => {
            let labels = r.design.stratum_labels()?;
            let sizes = r.design.stratum_sizes()?;
            let mut per: Vec<Vec<T>> = vec![Vec::new(); sizes.len()];
            for (&k, &e) in members.iter().zip(r.residuals) {
                per[labels[k]].push(e);
            }
            sizes
                .into_iter()
                .zip(per)
                .map(|((big, n), e)| (big, n, e))
                .collect()
        }
    };
    let mut parts = Vec::with_capacity(groups.len());
    for (big, n, e) in groups {
        if n == big {
            continue;
        }
        if e.len() < 2 {
            // No within-stratum spread to estimate; the double sum still applies.
            return None;
        }
        let m = T::of_usize(e.len());
        let mean = compensated_sum(e.iter().copied()) / m;
        let s2 = compensated_sum(e.iter().map(|&v| (v - mean) * (v - mean))) / (m - T::one());
        let (bt, nt) = (T::of_usize(big), T::of_usize(n));
        parts.push(bt * bt * (T::one() - nt / bt) * s2 / nt);
    }
    Some(Ok(VarianceEstimate::from_total(
        compensated_sum(parts),
        r.design.n_units(),
    )))
}

/// Exact design variance of `Σ_S e_k/π_k` from population-level residuals, on the total
/// scale. Needs the whole population (census residuals), so it serves as a test oracle.
pub fn design_variance_oracle<T: Scalar>(population_residuals: &[T], design: &DesignSpec<T>) -> T {
    let pi = design.pi();
    let n = design.n_units();
    let mut terms = Vec::with_capacity(n * n);
    for k in 0..n {
        for l in 0..n {
            let e = population_residuals[k] / pi[k] * population_residuals[l] / pi[l];
            terms.push((design.pi_joint(k, l) - pi[k] * pi[l]) * e);
        }
    }
    compensated_sum(terms)
}

/// Standard normal quantile `z` with `P(|Z| ≤ z) = level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence level {level} must lie in (0, 1)"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// `point ± z_level √variance`.
pub fn confidence_interval<T: Scalar>(point: T, variance: T, level: f64) -> Result<(T, T)> {
    if variance < T::zero() || variance.is_nan() {
        return Err(Error::NegativeVariance(variance.as_f64()));
    }
    let half = T::of(normal_quantile(level)?) * variance.sqrt();
    Ok((point - half, point + half))
}
