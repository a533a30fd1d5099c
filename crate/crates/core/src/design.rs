//! Sampling designs: exact first- and second-order inclusion probabilities and samplers.
//!
//! Two designs are supported, simple random sampling without replacement and
//! stratified SRSWOR. Estimators only ever see `π_k` and `π_kℓ` through
//! [`DesignSpec::pi`] and [`DesignSpec::pi_joint`], so other designs can slot in.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DesignKind {
    /// Simple random sampling without replacement of `n` units.
    Srswor { n: usize },
    /// Independent SRSWOR within strata. `labels[k]` is the stratum of unit `k` and
    /// `sizes[h]` the sample size drawn in stratum `h`.
    StratifiedSrswor { labels: Vec<usize>, sizes: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Strata {
    labels: Vec<usize>,
    pop_sizes: Vec<usize>,
    sample_sizes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct DesignSpec<T> {
    n_units: usize,
    kind: DesignKind,
    pi: Vec<T>,
    strata: Option<Strata>,
}

/// Builds a design over a population of `n_units`, validating sample sizes.
pub fn make_design<T: Scalar>(kind: DesignKind, n_units: usize) -> Result<DesignSpec<T>> {
    if n_units == 0 {
        return Err(Error::Design("population is empty".into()));
    }
    match &kind {
        DesignKind::Srswor { n } => {
            let n = *n;
            if n == 0 || n > n_units {
                return Err(Error::Design(format!(
                    "sample size {n} must lie in [1, {n_units}]"
                )));
            }
            let pi = T::of_usize(n) / T::of_usize(n_units);
            Ok(DesignSpec {
                n_units,
                kind,
                pi: vec![pi; n_units],
                strata: None,
            })
        }
        DesignKind::StratifiedSrswor { labels, sizes } => {
            if labels.len() != n_units {
                return Err(Error::LengthMismatch {
                    what: "stratum labels",
                    got: labels.len(),
                    expected: n_units,
                });
            }
            let h_count = sizes.len();
            let mut members = vec![Vec::new(); h_count];
            for (k, &h) in labels.iter().enumerate() {
                if h >= h_count {
                    return Err(Error::Design(format!(
                        "unit {k} has stratum label {h} but only {h_count} sample sizes were given"
                    )));
                }
                members[h].push(k);
            }
            let pop_sizes: Vec<usize> = members.iter().map(Vec::len).collect();
            for (h, (&big, &small)) in pop_sizes.iter().zip(sizes).enumerate() {
                if big == 0 {
                    return Err(Error::Design(format!("stratum {h} is empty")));
                }
                if small == 0 {
                    return Err(Error::Design(format!("stratum {h} has sample size 0")));
                }
                if small > big {
                    return Err(Error::Design(format!(
                        "stratum {h}: sample size {small} exceeds stratum size {big}"
                    )));
                }
            }
            let pi = labels
                .iter()
                .map(|&h| T::of_usize(sizes[h]) / T::of_usize(pop_sizes[h]))
                .collect();
            let strata = Strata {
                labels: labels.clone(),
                pop_sizes,
                sample_sizes: sizes.clone(),
                members,
            };
            Ok(DesignSpec {
                n_units,
                kind,
                pi,
                strata: Some(strata),
            })
        }
    }
}

/// Proportional allocation `n_h = round(n N_h / N)`, repaired to sum to `n` by largest remainder.
pub fn proportional_allocation(stratum_sizes: &[usize], n: usize) -> Result<Vec<usize>> {
    let total: usize = stratum_sizes.iter().sum();
    if total == 0 || n > total {
        return Err(Error::Design(format!(
            "cannot allocate {n} units over a population of {total}"
        )));
    }
    let exact: Vec<f64> = stratum_sizes
        .iter()
        .map(|&nh| n as f64 * nh as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.round() as usize).collect();
    let mut assigned: usize = alloc.iter().sum();
    // Remainder relative to the rounded value; positive means rounding went down.
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    while assigned < n {
        order.sort_by(|&a, &b| {
            let ra = exact[a] - alloc[a] as f64;
            let rb = exact[b] - alloc[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let h = order
            .iter()
            .copied()
            .find(|&h| alloc[h] < stratum_sizes[h])
            .expect("n <= N leaves room in some stratum");
        alloc[h] += 1;
        assigned += 1;
    }
    while assigned > n {
        order.sort_by(|&a, &b| {
            let ra = exact[a] - alloc[a] as f64;
            let rb = exact[b] - alloc[b] as f64;
            ra.total_cmp(&rb).then(a.cmp(&b))
        });
        let h = order
            .iter()
            .copied()
            .find(|&h| alloc[h] > 0)
            .expect("positive allocation exists");
        alloc[h] -= 1;
        assigned -= 1;
    }
    Ok(alloc)
}

impl<T: Scalar> DesignSpec<T> {
    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn kind(&self) -> &DesignKind {
        &self.kind
    }

    /// Expected (and, for these fixed-size designs, actual) sample size.
    pub fn sample_size(&self) -> usize {
        match &self.kind {
            DesignKind::Srswor { n } => *n,
            DesignKind::StratifiedSrswor { sizes, .. } => sizes.iter().sum(),
        }
    }

    /// First-order inclusion probabilities `π_k`, one per population unit.
    pub fn pi(&self) -> &[T] {
        &self.pi
    }

    /// Second-order inclusion probability `π_kℓ`, with `π_kk = π_k`.
    pub fn pi_joint(&self, k: usize, l: usize) -> T {
        if k == l {
            return self.pi[k];
        }
        match &self.strata {
            None => {
                let n = self.sample_size();
                let big = self.n_units;
                T::of_usize(n * (n - 1)) / T::of_usize(big * (big - 1))
            }
            Some(s) => {
                let (hk, hl) = (s.labels[k], s.labels[l]);
                if hk == hl {
                    let (n, big) = (s.sample_sizes[hk], s.pop_sizes[hk]);
                    T::of_usize(n * (n - 1)) / T::of_usize(big * (big - 1))
                } else {
                    self.pi[k] * self.pi[l]
                }
            }
        }
    }

    /// Stratum label of every unit, for stratified designs.
    pub fn stratum_labels(&self) -> Option<&[usize]> {
        self.strata.as_ref().map(|s| s.labels.as_slice())
    }

    /// `(N_h, n_h)` per stratum, for stratified designs.
    pub fn stratum_sizes(&self) -> Option<Vec<(usize, usize)>> {
        self.strata.as_ref().map(|s| {
            s.pop_sizes
                .iter()
                .copied()
                .zip(s.sample_sizes.iter().copied())
                .collect()
        })
    }

    /// `π_k` restricted to the members of a sample, in member order.
    pub fn sample_pi(&self, sample: &SampleIndex) -> Vec<T> {
        sample.members().iter().map(|&k| self.pi[k]).collect()
    }

    pub fn draw_sample(&self, seed: u64) -> SampleIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draw_sample_with(&mut rng)
    }

    /// Draws a sample by partial Fisher–Yates selection within the population (or each stratum).
    pub fn draw_sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> SampleIndex {
        let mut members = match &self.strata {
            None => {
                let mut idx: Vec<usize> = (0..self.n_units).collect();
                let (chosen, _) = idx.partial_shuffle(rng, self.sample_size());
                chosen.to_vec()
            }
            Some(s) => {
                let mut out = Vec::with_capacity(self.sample_size());
                for (h, units) in s.members.iter().enumerate() {
                    let mut idx = units.clone();
                    let (chosen, _) = idx.partial_shuffle(rng, s.sample_sizes[h]);
                    out.extend_from_slice(chosen);
                }
                out
            }
        };
        members.sort_unstable();
        SampleIndex::from_sorted_unchecked(members, self.n_units)
    }
}

/// The drawn sample `S`, as sorted member indices and as the indicator vector `I`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndex {
    members: Vec<usize>,
    indicator: Vec<bool>,
}

impl SampleIndex {
    /// Builds a sample from 0-based unit indices; duplicates and out-of-range indices are rejected.
    pub fn from_members(mut members: Vec<usize>, n_units: usize) -> Result<Self> {
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("sample contains duplicate units".into()));
        }
        if let Some(&last) = members.last() {
            if last >= n_units {
                return Err(Error::Data(format!(
                    "sample unit {last} outside population of {n_units}"
                )));
            }
        }
        Ok(Self::from_sorted_unchecked(members, n_units))
    }

    fn from_sorted_unchecked(members: Vec<usize>, n_units: usize) -> Self {
        let mut indicator = vec![false; n_units];
        for &k in &members {
            indicator[k] = true;
        }
        Self { members, indicator }
    }

    /// The whole population.
    pub fn census(n_units: usize) -> Self {
        Self::from_sorted_unchecked((0..n_units).collect(), n_units)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.indicator.len()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.indicator[k]
    }

    /// Gathers the sample values of a population-length vector.
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.members.iter().map(|&k| values[k]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All size-`n` subsets of `0..big`, in lexicographic order.
    pub(crate) fn subsets(big: usize, n: usize) -> Vec<Vec<usize>> {
        fn rec(start: usize, big: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for k in start..big {
                cur.push(k);
                rec(k + 1, big, n, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, big, n, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn srswor_closed_forms() {
        let d = make_design::<f64>(DesignKind::Srswor { n: 2 }, 4).unwrap();
        assert!(d.pi().iter().all(|&p| p == 0.5));
        assert_eq!(d.pi_joint(0, 3), 2.0 / 12.0);
        assert_eq!(d.pi_joint(2, 2), 0.5);
    }

    #[test]
    fn stratified_closed_forms() {
        let kind = DesignKind::StratifiedSrswor {
            labels: vec![0, 0, 1, 1],
            sizes: vec![1, 2],
        };
        let d = make_design::<f64>(kind, 4).unwrap();
        assert_eq!(d.pi(), &[0.5, 0.5, 1.0, 1.0]);
        assert_eq!(d.pi_joint(0, 2), 0.5);
        assert_eq!(d.pi_joint(0, 1), 0.0);
        assert_eq!(d.pi_joint(2, 3), 1.0);
    }

    #[test]
    fn joint_probability_matches_enumeration() {
        // Every C(8,3) = 56 sample is equally likely under SRSWOR.
        let d = make_design::<f64>(DesignKind::Srswor { n: 3 }, 8).unwrap();
        let samples = subsets(8, 3);
        assert_eq!(samples.len(), 56);
        for k in 0..8 {
            for l in 0..8 {
                let hits = samples
                    .iter()
                    .filter(|s| s.contains(&k) && s.contains(&l))
                    .count();
                let exact = hits as f64 / 56.0;
                assert!((d.pi_joint(k, l) - exact).abs() < 1e-15, "({k},{l})");
                assert_eq!(d.pi_joint(k, l), d.pi_joint(l, k));
            }
        }
        assert_eq!(d.pi_joint(0, 1), 3.0 / 28.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(make_design::<f64>(DesignKind::Srswor { n: 5 }, 4).is_err());
        assert!(make_design::<f64>(DesignKind::Srswor { n: 0 }, 4).is_err());
        let empty = DesignKind::StratifiedSrswor {
            labels: vec![0, 0, 2],
            sizes: vec![1, 1, 1],
        };
        assert!(make_design::<f64>(empty, 3).is_err());
        let zero = DesignKind::StratifiedSrswor {
            labels: vec![0, 1],
            sizes: vec![1, 0],
        };
        assert!(make_design::<f64>(zero, 2).is_err());
    }

    #[test]
    fn census_draws_everyone_and_seed_is_deterministic() {
        let d = make_design::<f64>(DesignKind::Srswor { n: 4 }, 4).unwrap();
        assert_eq!(d.draw_sample(9).members(), &[0, 1, 2, 3]);
        let d = make_design::<f64>(DesignKind::Srswor { n: 30 }, 100).unwrap();
        assert_eq!(d.draw_sample(17), d.draw_sample(17));
        assert_ne!(d.draw_sample(17), d.draw_sample(18));
    }

    #[test]
    fn stratified_draw_respects_allocation() {
        let labels: Vec<usize> = (0..30).map(|k| k % 3).collect();
        let kind = DesignKind::StratifiedSrswor {
            labels: labels.clone(),
            sizes: vec![2, 5, 10],
        };
        let d = make_design::<f64>(kind, 30).unwrap();
        let s = d.draw_sample(3);
        let mut per = [0; 3];
        for &k in s.members() {
            per[labels[k]] += 1;
        }
        assert_eq!(per, [2, 5, 10]);
    }

    #[test]
    fn inclusion_frequency_within_binomial_band() {
        let d = make_design::<f64>(DesignKind::Srswor { n: 3 }, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reps = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..reps {
            for &k in d.draw_sample_with(&mut rng).members() {
                counts[k] += 1;
            }
        }
        let p = 3.0 / 8.0;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        for c in counts {
            let freq = c as f64 / reps as f64;
            assert!((freq - p).abs() < 3.0 * se, "freq {freq}");
        }
    }

    #[test]
    fn proportional_allocation_repairs_total() {
        assert_eq!(proportional_allocation(&[50, 30, 20], 10).unwrap(), vec![5, 3, 2]);
        // 7 * (1/3) = 2.33 each: rounding gives 6, largest remainder adds one.
        let a = proportional_allocation(&[10, 10, 10], 7).unwrap();
        assert_eq!(a.iter().sum::<usize>(), 7);
        assert_eq!(a, vec![3, 2, 2]);
        // 5 * (1/2) rounds up twice: repair removes one.
        let a = proportional_allocation(&[3, 3], 5).unwrap();
        assert_eq!(a.iter().sum::<usize>(), 5);
        assert!(proportional_allocation(&[1, 1], 3).is_err());
    }

    #[test]
    fn sample_index_validation() {
        assert!(SampleIndex::from_members(vec![1, 1], 4).is_err());
        assert!(SampleIndex::from_members(vec![4], 4).is_err());
        let s = SampleIndex::from_members(vec![3, 0], 4).unwrap();
        assert_eq!(s.members(), &[0, 3]);
        assert_eq!(s.indicator().iter().filter(|&&b| b).count(), 2);
    }
}
