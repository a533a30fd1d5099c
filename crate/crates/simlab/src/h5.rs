//! Convergence of sample-grown partitions to population-grown ones.
//!
//! A forest grown on the sample defines, tree by tree, a partition of the covariate space.
//! Filling those partitions with population units (sample units keep their in-bag
//! multiplicity, out-of-sample units join the resample with the probability that keeps
//! the population subsample fraction) gives a fit `m̂̃(x)`. A forest grown on the whole
//! population with the matching minimum node size gives `m̃(x)`. The diagnostic tracks
//! the mean squared gap between the two at fixed probe points as the population grows
//! with the sampling fraction held fixed.

use ndarray::ArrayView2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rfsurvey::design::{make_design, DesignKind, SampleIndex};
use rfsurvey::forest::{fit_forest, tree_rng, ForestModel, ForestParams, ResampleMode, TrainingScope};
use rfsurvey::scalar::compensated_sum;

use crate::mc::replicate_rng;
use crate::population::gen_h5_population;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct H5Config {
    /// Population sizes to visit, in increasing order.
    pub sizes: Vec<usize>,
    pub sampling_fraction: f64,
    pub replicates: usize,
    pub n_trees: usize,
    /// Minimum node size of the sample forest; the population forest uses this over the
    /// sampling fraction.
    pub min_node_size: usize,
    pub mode: ResampleMode,
    pub mtry: Option<usize>,
    pub probes: usize,
    pub seed: u64,
}

impl Default for H5Config {
    fn default() -> Self {
        Self {
            sizes: vec![1000, 4000, 16000],
            sampling_fraction: 0.1,
            replicates: 50,
            n_trees: 100,
            min_node_size: 5,
            mode: ResampleMode::Subsample(0.63),
            mtry: None,
            probes: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct H5Point {
    pub n_units: usize,
    pub n: usize,
    pub population_min_node_size: usize,
    /// Mean over replicates of the probe-averaged squared gap.
    pub gap: f64,
    /// Monte Carlo standard error of `gap`.
    pub se: f64,
}

fn check_mode(mode: ResampleMode) -> Result<()> {
    match mode {
        ResampleMode::None | ResampleMode::Subsample(_) => Ok(()),
        ResampleMode::Bootstrap => Err(Error::Config(
            "the partition diagnostic supports no resampling or subsampling only".into(),
        )),
    }
}

/// Probability that an out-of-sample unit joins a tree's population resample.
fn out_of_sample_rate(mode: ResampleMode, n_units: usize, n: usize) -> f64 {
    match mode {
        ResampleMode::Subsample(f) if n_units > n => {
            let big = ResampleMode::subsample_size(f, n_units);
            let small = ResampleMode::subsample_size(f, n);
            (big.saturating_sub(small) as f64 / (n_units - n) as f64).clamp(0.0, 1.0)
        }
        _ => 1.0,
    }
}

/// Mean over `probes` of `(m̂̃ − target)²`, where `m̂̃` fills the partitions of
/// `sample_forest` (grown on the rows `sample.members()`) with population units.
pub fn h5_gap_at_probes(
    sample_forest: &ForestModel<f64>,
    x_pop: ArrayView2<'_, f64>,
    y_pop: &[f64],
    sample: &SampleIndex,
    probes: &[usize],
    targets: &[f64],
    seed: u64,
) -> Result<f64> {
    let big = y_pop.len();
    let mode = sample_forest.params().mode;
    check_mode(mode)?;
    if x_pop.nrows() != big || sample.n_units() != big {
        return Err(Error::Config("population and sample sizes disagree".into()));
    }
    if sample_forest.n_training_units() != sample.len() {
        return Err(Error::Config("forest was not grown on this sample".into()));
    }
    if probes.len() != targets.len() || probes.is_empty() {
        return Err(Error::Config("need one target per probe".into()));
    }
    let x = x_pop.as_standard_layout();
    let row = |k: usize| x.row(k).to_slice().expect("standard layout");
    let mut position = vec![usize::MAX; big];
    for (i, &k) in sample.members().iter().enumerate() {
        position[k] = i;
    }
    let rate = out_of_sample_rate(mode, big, sample.len());

    let per_tree: Vec<Vec<f64>> = (0..sample_forest.n_trees())
        .into_par_iter()
        .map(|b| {
            let tree = &sample_forest.trees()[b];
            let membership = sample_forest.membership(b);
            let mut rng = tree_rng(seed, b);
            let mut sums = vec![0.0; tree.nodes().len()];
            let mut counts = vec![0.0; tree.nodes().len()];
            let mut probe_nodes = Vec::with_capacity(probes.len());
            for k in 0..big {
                let psi = if position[k] != usize::MAX {
                    f64::from(membership[position[k]])
                } else if rate >= 1.0 || rng.random_bool(rate) {
                    1.0
                } else {
                    0.0
                };
                if psi > 0.0 {
                    let node = tree.route(row(k));
                    sums[node] += psi * y_pop[k];
                    counts[node] += psi;
                }
            }
            for &k in probes {
                probe_nodes.push(tree.route(row(k)));
            }
            probe_nodes
                .into_iter()
                .map(|node| sums[node] / counts[node])
                .collect()
        })
        .collect();

    let inv_b = 1.0 / per_tree.len() as f64;
    let gaps = targets.iter().enumerate().map(|(j, &t)| {
        let fit = compensated_sum(per_tree.iter().map(|v| v[j])) * inv_b;
        (fit - t) * (fit - t)
    });
    Ok(compensated_sum(gaps) / probes.len() as f64)
}

pub fn h5_diagnostic(cfg: &H5Config) -> Result<Vec<H5Point>> {
    check_mode(cfg.mode)?;
    if !(cfg.sampling_fraction > 0.0 && cfg.sampling_fraction < 1.0) {
        return Err(Error::Config("sampling fraction must lie in (0, 1)".into()));
    }
    if cfg.replicates < 2 {
        return Err(Error::Config("at least two replicates are needed".into()));
    }
    let pop_min_node = (cfg.min_node_size as f64 / cfg.sampling_fraction).round() as usize;
    cfg.sizes
        .iter()
        .enumerate()
        .map(|(i, &big)| {
            let n = (cfg.sampling_fraction * big as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let pop = gen_h5_population(big, rng.random())?;
            let x = pop.predictors().view();
            let y = pop.study("y").expect("study variable");
            let pop_forest = fit_forest(
                x,
                y,
                TrainingScope::Population,
                &ForestParams {
                    n_trees: cfg.n_trees,
                    mtry: cfg.mtry,
                    min_node_size: pop_min_node,
                    mode: cfg.mode,
                    seed: rng.random(),
                },
            )?;
            let probes = sample_indices(&mut rng, big, cfg.probes.min(big)).into_vec();
            let targets: Vec<f64> = probes
                .iter()
                .map(|&k| pop_forest.predict(x.row(k).to_slice().expect("standard layout")))
                .collect();
            let design = make_design::<f64>(DesignKind::Srswor { n }, big)?;
            let rep_seed: u64 = rng.random();

            let gaps: Vec<f64> = (0..cfg.replicates)
                .into_par_iter()
                .map(|r| {
                    let mut rng = replicate_rng(rep_seed, r);
                    let sample = design.draw_sample_with(&mut rng);
                    let xs = x.select(ndarray::Axis(0), sample.members());
                    let ys = sample.gather(y);
                    let inv_pi = design.sample_pi(&sample).iter().map(|p| 1.0 / p).collect();
                    let forest = fit_forest(
                        xs.view(),
                        &ys,
                        TrainingScope::Sample { inv_pi },
                        &ForestParams {
                            n_trees: cfg.n_trees,
                            mtry: cfg.mtry,
                            min_node_size: cfg.min_node_size,
                            mode: cfg.mode,
                            seed: rng.random(),
                        },
                    )?;
                    h5_gap_at_probes(&forest, x, y, &sample, &probes, &targets, rng.random())
                })
                .collect::<Result<_>>()?;

            let m = gaps.len() as f64;
            let gap = compensated_sum(gaps.iter().copied()) / m;
            let var = compensated_sum(gaps.iter().map(|g| (g - gap) * (g - gap))) / (m - 1.0);
            log::info!("partition gap at N={big}: {gap:.5} (se {:.5})", (var / m).sqrt());
            Ok(H5Point {
                n_units: big,
                n,
                population_min_node_size: pop_min_node,
                gap,
                se: (var / m).sqrt(),
            })
        })
        .collect()
}
