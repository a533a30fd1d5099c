//! Random forests of CART trees with explicit donor weights.
//!
//! Every forest fit at `x` is a convex combination of training responses,
//! `m(x) = Σ_ℓ W_ℓ(x) y_ℓ`, with
//!
//! * population scope: `W_ℓ(x) = (1/B) Σ_b c_ℓ^b 1{x_ℓ ∈ A_b(x)} / Ñ_b(x)`,
//!   `Ñ_b(x) = Σ_ℓ c_ℓ^b 1{x_ℓ ∈ A_b(x)}`;
//! * sample scope: `W_ℓ(x) = (1/B) Σ_b c_ℓ^b 1{x_ℓ ∈ A_b(x)} / (π_ℓ N̂_b(x))`,
//!   `N̂_b(x) = Σ_ℓ c_ℓ^b 1{x_ℓ ∈ A_b(x)} / π_ℓ`, so each tree predicts a Hájek node mean.
//!
//! `c_ℓ^b` is the resampling multiplicity of unit `ℓ` in tree `b` (0/1 except for bootstrap).

use std::io::{BufRead, Write};

use ndarray::ArrayView2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cart::{grow_tree, NodeKind, RegressionTree, SplitRule, TreeNode, TreeParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResampleMode {
    /// Every tree sees every unit once.
    None,
    /// `n` draws with replacement; multiplicities are retained.
    Bootstrap,
    /// `⌈f·n⌉` distinct units drawn without replacement.
    Subsample(f64),
}

impl ResampleMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ResampleMode::Subsample(f) if !(f > 0.0 && f <= 1.0) => Err(Error::InvalidParameter(
                format!("subsampling fraction {f} must lie in (0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    /// Number of distinct units a subsample of `n` keeps.
    pub fn subsample_size(f: f64, n: usize) -> usize {
        // Guard against 0.63 * 100 = 63.000000000000007 style round-off.
        ((f * n as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Draws the per-unit multiplicities of one tree's resample.
pub fn draw_membership<R: Rng + ?Sized>(
    mode: ResampleMode,
    n_units: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if n_units == 0 {
        return Err(Error::InvalidParameter("cannot resample zero units".into()));
    }
    mode.validate()?;
    Ok(match mode {
        ResampleMode::None => vec![1; n_units],
        ResampleMode::Bootstrap => {
            let mut counts = vec![0u32; n_units];
            for _ in 0..n_units {
                counts[rng.random_range(0..n_units)] += 1;
            }
            counts
        }
        ResampleMode::Subsample(f) => {
            let m = ResampleMode::subsample_size(f, n_units).min(n_units);
            let mut counts = vec![0u32; n_units];
            for k in rand::seq::index::sample(rng, n_units, m) {
                counts[k] = 1;
            }
            counts
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` means `⌊√p⌋` (at least 1).
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub mode: ResampleMode,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            mtry: None,
            min_node_size: 5,
            mode: ResampleMode::Subsample(0.63),
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| ((p as f64).sqrt().floor() as usize).max(1))
    }
}

/// Which units the forest was trained on and how node denominators are formed.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingScope<T> {
    /// Node counts `Ñ`.
    Population,
    /// Estimated node sizes `N̂` from the design weights `1/π` of the training (sample) units.
    Sample { inv_pi: Vec<T> },
}

/// Seed of tree `b`'s generator: stream `b` of a ChaCha generator keyed by the master seed.
pub fn tree_rng(master_seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(b as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct ForestModel<T> {
    trees: Vec<RegressionTree<T>>,
    memberships: Vec<Vec<u32>>,
    params: ForestParams,
    scope: TrainingScope<T>,
    y: Vec<T>,
    /// Per tree, per node id: the scope denominator (`Ñ` or `N̂`) of terminal nodes.
    denominators: Vec<Vec<T>>,
    /// Per tree, per node id: the scope node mean (plain or Hájek) of terminal nodes.
    node_means: Vec<Vec<T>>,
}

/// Fits `B` trees, each on its own resample of the rows of `x`.
///
/// Tree `b` depends only on `(params.seed, b)`, so the forest is identical whatever the
/// degree of parallelism.
pub fn fit_forest<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[T],
    scope: TrainingScope<T>,
    params: &ForestParams,
) -> Result<ForestModel<T>> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(Error::LengthMismatch {
            what: "response",
            got: y.len(),
            expected: n,
        });
    }
    if params.n_trees == 0 {
        return Err(Error::InvalidParameter("forest needs at least one tree".into()));
    }
    if let TrainingScope::Sample { inv_pi } = &scope {
        if inv_pi.len() != n {
            return Err(Error::LengthMismatch {
                what: "design weights",
                got: inv_pi.len(),
                expected: n,
            });
        }
        if inv_pi.iter().any(|w| !(w.is_finite() && *w > T::zero())) {
            return Err(Error::InvalidParameter("design weights must be positive".into()));
        }
    }
    params.mode.validate()?;
    let mtry = params.resolved_mtry(p);

    let fitted: Vec<(Vec<u32>, RegressionTree<T>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree_rng(params.seed, b);
            let counts = draw_membership(params.mode, n, &mut rng)?;
            let tree_params = TreeParams {
                min_node_size: params.min_node_size,
                mtry,
                seed: rng.next_u64(),
            };
            let tree = grow_tree(x, y, &counts, &tree_params)?;
            Ok((counts, tree))
        })
        .collect::<Result<_>>()?;

    let (memberships, trees): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let mut model = ForestModel {
        trees,
        memberships,
        params: *params,
        scope,
        y: y.to_vec(),
        denominators: Vec::new(),
        node_means: Vec::new(),
    };
    model.compute_node_stats();
    Ok(model)
}

impl<T: Scalar> ForestModel<T> {
    fn unit_weight(&self, k: usize) -> T {
        match &self.scope {
            TrainingScope::Population => T::one(),
            TrainingScope::Sample { inv_pi } => inv_pi[k],
        }
    }

    fn compute_node_stats(&mut self) {
        let mut denominators = Vec::with_capacity(self.trees.len());
        let mut means = Vec::with_capacity(self.trees.len());
        for tree in &self.trees {
            let mut den = vec![T::zero(); tree.nodes().len()];
            let mut mean = vec![T::zero(); tree.nodes().len()];
            for id in tree.terminal_ids() {
                let mut d = T::zero();
                let mut s = T::zero();
                for &(k, c) in tree.terminal_members(id) {
                    let w = T::of(c as f64) * self.unit_weight(k);
                    d += w;
                    s += w * self.y[k];
                }
                assert!(
                    d > T::zero(),
                    "terminal node {id} has an empty estimated size"
                );
                den[id] = d;
                mean[id] = s / d;
            }
            denominators.push(den);
            means.push(mean);
        }
        self.denominators = denominators;
        self.node_means = means;
    }

    pub fn trees(&self) -> &[RegressionTree<T>] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Resampling multiplicities of tree `b`, one per training unit.
    pub fn membership(&self, b: usize) -> &[u32] {
        &self.memberships[b]
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn scope(&self) -> &TrainingScope<T> {
        &self.scope
    }

    pub fn n_training_units(&self) -> usize {
        self.y.len()
    }

    pub fn training_response(&self) -> &[T] {
        &self.y
    }

    /// Scope denominator (`Ñ` or `N̂`) of a terminal node of tree `b`.
    pub fn node_denominator(&self, b: usize, node: usize) -> T {
        self.denominators[b][node]
    }

    /// Scope node mean of a terminal node of tree `b`.
    pub fn node_mean(&self, b: usize, node: usize) -> T {
        self.node_means[b][node]
    }

    /// Tree `b`'s fit at `x`.
    pub fn tree_predict(&self, b: usize, x: &[T]) -> T {
        self.node_means[b][self.trees[b].route(x)]
    }

    /// Forest fit at `x`: the average of per-tree node means.
    pub fn predict(&self, x: &[T]) -> T {
        let s: T = (0..self.trees.len()).map(|b| self.tree_predict(b, x)).sum();
        s / T::of_usize(self.trees.len())
    }

    /// Donor weights `W_ℓ(x)` over the training units.
    pub fn weights(&self, x: &[T]) -> PredictionWeightVector<T> {
        let mut dense = vec![T::zero(); self.y.len()];
        let inv_b = T::one() / T::of_usize(self.trees.len());
        for (b, tree) in self.trees.iter().enumerate() {
            let node = tree.route(x);
            let d = self.denominators[b][node];
            for &(k, c) in tree.terminal_members(node) {
                dense[k] += inv_b * T::of(c as f64) * self.unit_weight(k) / d;
            }
        }
        PredictionWeightVector::from_dense(&dense)
    }

    /// Forest fit through the donor weights, `Σ_ℓ W_ℓ(x) y_ℓ`.
    pub fn predict_by_weights(&self, x: &[T]) -> T {
        self.weights(x).apply(&self.y)
    }

    /// Writes the forest in the line-oriented inspection format (see [`read_forest_text`]).
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mode = match self.params.mode {
            ResampleMode::None => "none".to_string(),
            ResampleMode::Bootstrap => "bootstrap".to_string(),
            ResampleMode::Subsample(f) => format!("subsample:{f}"),
        };
        writeln!(
            out,
            "# forest trees={} mtry={} min_node_size={} mode={} seed={}",
            self.trees.len(),
            self.params
                .mtry
                .map_or_else(|| "auto".to_string(), |m| m.to_string()),
            self.params.min_node_size,
            mode,
            self.params.seed
        )?;
        for (b, tree) in self.trees.iter().enumerate() {
            writeln!(out, "# tree {b} seed={}", tree.seed())?;
            writeln!(out, "id,parent,var,threshold,count,mean")?;
            for (id, node) in tree.nodes().iter().enumerate() {
                let parent = node.parent.map_or_else(|| "-".into(), |p| p.to_string());
                let (var, thr) = match &node.kind {
                    NodeKind::Internal { split, .. } => {
                        (split.var.to_string(), split.threshold.to_string())
                    }
                    NodeKind::Terminal { .. } => ("-".into(), "-".into()),
                };
                writeln!(
                    out,
                    "{id},{parent},{var},{thr},{},{}",
                    node.member_count, node.mean
                )?;
            }
        }
        Ok(())
    }
}

/// Parses the inspection format back into bare trees (node structure, counts and plain
/// means; terminal member lists are not recorded in the text).
///
/// Format: `# forest ...` header, then per tree a `# tree b seed=s` line, a column header
/// `id,parent,var,threshold,count,mean` and one line per node in id order. `-` marks a
/// missing parent (root) or a terminal node's split fields.
pub fn read_forest_text<T: Scalar, R: BufRead>(input: R) -> Result<Vec<RegressionTree<T>>> {
    struct Raw<T> {
        parent: Option<usize>,
        split: Option<SplitRule<T>>,
        count: usize,
        mean: T,
    }
    let mut trees: Vec<(u64, Vec<Raw<T>>)> = Vec::new();
    let bad = |line: usize, msg: &str| Error::Data(format!("forest text line {line}: {msg}"));
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with("# forest") || line.starts_with("id,") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# tree ") {
            let seed = rest
                .split_whitespace()
                .find_map(|t| t.strip_prefix("seed="))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(i + 1, "missing tree seed"))?;
            trees.push((seed, Vec::new()));
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, "expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad index"));
        let (_, nodes) = trees
            .last_mut()
            .ok_or_else(|| bad(i + 1, "node before tree header"))?;
        if idx(f[0])? != nodes.len() {
            return Err(bad(i + 1, "node ids must be consecutive"));
        }
        let parent = if f[1] == "-" { None } else { Some(idx(f[1])?) };
        let split = if f[2] == "-" {
            None
        } else {
            Some(SplitRule {
                var: idx(f[2])?,
                threshold: T::of(num(f[3])?),
            })
        };
        nodes.push(Raw {
            parent,
            split,
            count: idx(f[4])?,
            mean: T::of(num(f[5])?),
        });
    }

    let mut out = Vec::with_capacity(trees.len());
    for (seed, raw) in trees {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); raw.len()];
        for (id, r) in raw.iter().enumerate() {
            if let Some(p) = r.parent {
                if p >= id {
                    return Err(Error::Data("parent must precede child".into()));
                }
                children[p].push(id);
            }
        }
        let nodes = raw
            .iter()
            .enumerate()
            .map(|(id, r)| {
                let kind = match (r.split, children[id].as_slice()) {
                    (Some(split), &[left, right]) => NodeKind::Internal { split, left, right },
                    (None, &[]) => NodeKind::Terminal { members: Vec::new() },
                    _ => return Err(Error::Data(format!("node {id} has inconsistent children"))),
                };
                Ok(TreeNode {
                    parent: r.parent,
                    member_count: r.count,
                    mean: r.mean,
                    kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let min = nodes
            .iter()
            .filter(|n| n.is_terminal())
            .map(|n| n.member_count)
            .min()
            .unwrap_or(1);
        out.push(RegressionTree::from_nodes(nodes, min, seed));
    }
    Ok(out)
}

/// Sparse donor weights of one prediction: `weights[i]` belongs to unit `donors[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWeightVector<T> {
    pub donors: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> PredictionWeightVector<T> {
    pub fn from_dense(dense: &[T]) -> Self {
        let (donors, weights) = dense
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > T::zero())
            .map(|(k, &w)| (k, w))
            .unzip();
        Self { donors, weights }
    }

    pub fn sum(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.weights.iter().copied().fold(T::zero(), T::max)
    }

    pub fn get(&self, unit: usize) -> T {
        self.donors
            .binary_search(&unit)
            .map_or(T::zero(), |i| self.weights[i])
    }

    /// `Σ_ℓ W_ℓ y_ℓ` for a training-length response vector.
    pub fn apply(&self, y: &[T]) -> T {
        self.donors
            .iter()
            .zip(&self.weights)
            .map(|(&k, &w)| w * y[k])
            .sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (&k, &w) in self.donors.iter().zip(&self.weights) {
            out[k] = w;
        }
        out
    }
}
