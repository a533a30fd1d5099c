//! The eight synthetic survey variables and their auxiliary predictors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Distribution, Exp, Gamma, Normal, StandardNormal};
use rfsurvey::population::PopulationFrame;

use crate::{Error, Result};

pub const N_V: usize = 100;

/// How the second parameter of `N(0, s)` noise terms is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseReading {
    #[default]
    Variance,
    StdDev,
}

impl NoiseReading {
    fn sd(self, s: f64) -> f64 {
        match self {
            NoiseReading::Variance => s.sqrt(),
            NoiseReading::StdDev => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_units: usize,
    pub seed: u64,
    pub noise: NoiseReading,
}

impl SyntheticSpec {
    pub fn new(n_units: usize, seed: u64) -> Self {
        Self {
            n_units,
            seed,
            noise: NoiseReading::default(),
        }
    }
}

/// Name of the study variable of model `id` (1 to 8).
pub fn study_name(id: usize) -> Result<String> {
    if (1..=8).contains(&id) {
        Ok(format!("y{id}"))
    } else {
        Err(Error::UnknownModel(id))
    }
}

/// Predictors seen by the working model of model `id`.
pub fn working_predictors(id: usize) -> Result<Vec<String>> {
    let xs = |r: std::ops::RangeInclusive<usize>| r.map(|j| format!("x{j}")).collect();
    let vs = |last: usize| (1..=last).map(|j| format!("v{j}")).collect();
    Ok(match id {
        1 | 2 => xs(0..=0),
        3..=5 => xs(1..=6),
        6 => vs(10),
        7 => vs(50),
        8 => vs(100),
        other => return Err(Error::UnknownModel(other)),
    })
}

/// Rescales to population mean 0 and population variance 1.
pub fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

fn draw<D: Distribution<f64>>(d: D, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| d.sample(rng)).collect()
}

fn normal_noise(sd: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Predictors `x0…x6`, `v1…v100` and study variables `y1…y8`.
///
/// Columns are drawn in a fixed order from one generator, so the population depends only on
/// `spec`.
pub fn gen_population(spec: &SyntheticSpec) -> Result<PopulationFrame<f64>> {
    let n = spec.n_units;
    if n < 2 {
        return Err(Error::Config("population needs at least two units".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x0: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut x1 = draw(Normal::new(0.0, 1.0).expect("valid"), n, &mut rng);
    let mut x2 = draw(Beta::new(3.0, 1.0).expect("valid"), n, &mut rng);
    let mut x3: Vec<f64> = draw(Gamma::new(3.0, 2.0).expect("valid"), n, &mut rng)
        .into_iter()
        .map(|g| 2.0 * g)
        .collect();
    let bern = Bernoulli::new(0.7).expect("valid");
    let x4: Vec<f64> = (0..n).map(|_| f64::from(u8::from(bern.sample(&mut rng)))).collect();
    let x5: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.4 {
                1.0
            } else if u < 0.7 {
                2.0
            } else {
                3.0
            }
        })
        .collect();
    let mut x6 = draw(Exp::new(1.0).expect("valid"), n, &mut rng);
    for c in [&mut x1, &mut x2, &mut x3, &mut x6] {
        standardize(c);
    }
    let vcols: Vec<Vec<f64>> = (0..N_V)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let sd = |s: f64| spec.noise.sd(s);
    let e1 = normal_noise(sd(0.1), n, &mut rng);
    let e2 = normal_noise(sd(0.1), n, &mut rng);
    let e3 = normal_noise(sd(1.0), n, &mut rng);
    let e4 = normal_noise(sd(1.0), n, &mut rng);
    let mut e5 = draw(Exp::new(1.0).expect("valid"), n, &mut rng);
    standardize(&mut e5);
    let e6 = normal_noise(sd(0.3), n, &mut rng);
    let e7 = normal_noise(sd(0.3), n, &mut rng);
    let e8 = normal_noise(sd(0.5), n, &mut rng);

    let v = |j: usize, k: usize| vcols[j - 1][k];
    let y1 = (0..n).map(|k| 1.0 + 2.0 * (x0[k] - 0.5) + e1[k]).collect();
    let y2 = (0..n).map(|k| 1.0 + 2.0 * (x0[k] - 0.5).powi(2) + e2[k]).collect();
    let y3 = (0..n)
        .map(|k| 2.0 + x6[k] + x2[k] + x3[k] + x4[k] + x5[k] + e3[k])
        .collect();
    let y4 = (0..n)
        .map(|k| 2.0 + (x6[k] + x2[k] + x3[k]).powi(2) + e4[k])
        .collect();
    let y5 = (0..n)
        .map(|k| 0.5 * x5[k] + (-x1[k]).exp() + 3.0 * x4[k] + (-x6[k]).exp() + e5[k])
        .collect();
    let y6 = (0..n)
        .map(|k| v(1, k).powi(2) + (-v(2, k).powi(2)).exp() + e6[k])
        .collect();
    let y7 = (0..n)
        .map(|k| v(1, k).powi(2) + (-v(2, k).powi(2)).exp() + e7[k])
        .collect();
    let y8 = (0..n)
        .map(|k| {
            3.0 + v(1, k) * v(2, k) + v(3, k).powi(2) - v(4, k) * v(7, k) + v(8, k) * v(10, k)
                - v(6, k).powi(2)
                + e8[k]
        })
        .collect();

    let mut names: Vec<String> = (0..=6).map(|j| format!("x{j}")).collect();
    names.extend((1..=N_V).map(|j| format!("v{j}")));
    let columns: Vec<&[f64]> = [&x0, &x1, &x2, &x3, &x4, &x5, &x6]
        .into_iter()
        .chain(vcols.iter())
        .map(|c| c.as_slice())
        .collect();
    let x = Array2::from_shape_fn((n, columns.len()), |(k, j)| columns[j][k]);
    let study = [y1, y2, y3, y4, y5, y6, y7, y8]
        .into_iter()
        .enumerate()
        .map(|(i, y)| (format!("y{}", i + 1), y))
        .collect();
    Ok(PopulationFrame::new(names, x, study, None)?)
}

/// Population for the partition-convergence diagnostic: standardized `x1, x2, x3` as above and
/// `y = 2 + 2·x1 + x2 + x3 + N(0, 1)`.
pub fn gen_h5_population(n_units: usize, seed: u64) -> Result<PopulationFrame<f64>> {
    if n_units < 2 {
        return Err(Error::Config("population needs at least two units".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x1 = draw(Normal::new(0.0, 1.0).expect("valid"), n_units, &mut rng);
    let mut x2 = draw(Beta::new(3.0, 1.0).expect("valid"), n_units, &mut rng);
    let mut x3: Vec<f64> = draw(Gamma::new(3.0, 2.0).expect("valid"), n_units, &mut rng)
        .into_iter()
        .map(|g| 2.0 * g)
        .collect();
    for c in [&mut x1, &mut x2, &mut x3] {
        standardize(c);
    }
    let e = normal_noise(1.0, n_units, &mut rng);
    let y = (0..n_units)
        .map(|k| 2.0 + 2.0 * x1[k] + x2[k] + x3[k] + e[k])
        .collect();
    let cols = [&x1, &x2, &x3];
    let x = Array2::from_shape_fn((n_units, 3), |(k, j)| cols[j][k]);
    let names = vec!["x1".into(), "x2".into(), "x3".into()];
    Ok(PopulationFrame::new(names, x, vec![("y".into(), y)], None)?)
}
