//! CART regression trees grown by maximizing the per-node variance reduction
//!
//! `L(j, z) = (1/#A) Σ_{k∈A} [(y_k − ȳ_A)² − (y_k − ȳ_{A_L} 1{x_kj < z} − ȳ_{A_R} 1{x_kj ≥ z})²]`
//!
//! over every candidate variable `j` and every midpoint `z` between consecutive distinct
//! values. A unit goes left iff `x_j < z`. Candidate splits leaving fewer than
//! `min_node_size` member units in a child are inadmissible, and a node without an
//! admissible positive-gain split is terminal.
//!
//! Ties among maximal gains (within a relative `1e-12`) go to the lowest variable index,
//! then the smallest threshold.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative tolerance used to decide that two gains are tied.
pub const TIE_REL_TOL: f64 = 1e-12;

/// A split counts as positive only if it removes more than this fraction of the node variance.
pub const GAIN_REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRule<T> {
    pub var: usize,
    pub threshold: T,
}

impl<T: Scalar> SplitRule<T> {
    #[inline]
    pub fn goes_left(&self, x: &[T]) -> bool {
        x[self.var] < self.threshold
    }
}

#[derive(Debug, Clone)]
pub enum NodeKind<T> {
    Internal {
        split: SplitRule<T>,
        left: usize,
        right: usize,
    },
    /// Training units routed here during growth, with their resampling multiplicities.
    Terminal { members: Vec<(usize, u32)> },
}

#[derive(Debug, Clone)]
pub struct TreeNode<T> {
    pub parent: Option<usize>,
    /// Member units in the node, counted with multiplicity.
    pub member_count: usize,
    /// Plain (multiplicity-weighted) mean of the member y-values.
    pub mean: T,
    pub kind: NodeKind<T>,
}

impl<T> TreeNode<T> {
    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, NodeKind::Terminal { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub min_node_size: usize,
    /// Number of predictors drawn, without replacement, before each split.
    pub mtry: usize,
    pub seed: u64,
}

/// A fitted regression tree. Node ids are indices into [`RegressionTree::nodes`], assigned
/// in pre-order (root is 0, left subtree before right).
#[derive(Debug, Clone)]
pub struct RegressionTree<T> {
    nodes: Vec<TreeNode<T>>,
    min_node_size: usize,
    seed: u64,
    /// Compact copy of the splits for routing; terminal steps have `var == u32::MAX`.
    steps: Vec<RouteStep<T>>,
}

#[derive(Debug, Clone, Copy)]
struct RouteStep<T> {
    var: u32,
    left: u32,
    right: u32,
    threshold: T,
}

fn route_steps<T: Scalar>(nodes: &[TreeNode<T>]) -> Vec<RouteStep<T>> {
    nodes
        .iter()
        .map(|n| match &n.kind {
            NodeKind::Internal { split, left, right } => RouteStep {
                var: split.var as u32,
                left: *left as u32,
                right: *right as u32,
                threshold: split.threshold,
            },
            NodeKind::Terminal { .. } => RouteStep {
                var: u32::MAX,
                left: 0,
                right: 0,
                threshold: T::zero(),
            },
        })
        .collect()
}

impl<T: Scalar> RegressionTree<T> {
    fn assemble(nodes: Vec<TreeNode<T>>, min_node_size: usize, seed: u64) -> Self {
        let steps = route_steps(&nodes);
        Self {
            nodes,
            min_node_size,
            seed,
            steps,
        }
    }

    pub fn nodes(&self) -> &[TreeNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode<T> {
        &self.nodes[id]
    }

    pub fn min_node_size(&self) -> usize {
        self.min_node_size
    }

    /// Seed the tree was grown from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn terminal_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_terminal())
            .map(|(i, _)| i)
    }

    pub fn n_terminals(&self) -> usize {
        self.terminal_ids().count()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                depth[i] = depth[p] + 1;
            }
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Terminal node containing `x`.
    #[inline]
    pub fn route(&self, x: &[T]) -> usize {
        let mut id = 0;
        loop {
            let s = &self.steps[id];
            if s.var == u32::MAX {
                return id;
            }
            id = if x[s.var as usize] < s.threshold { s.left } else { s.right } as usize;
        }
    }

    /// Terminal mean at `x`.
    pub fn predict(&self, x: &[T]) -> T {
        self.nodes[self.route(x)].mean
    }

    /// Members of a terminal node (empty for internal nodes).
    pub fn terminal_members(&self, id: usize) -> &[(usize, u32)] {
        match &self.nodes[id].kind {
            NodeKind::Terminal { members } => members,
            NodeKind::Internal { .. } => &[],
        }
    }

    /// Builds a tree from explicit nodes; used by the text reader. Terminal member lists
    /// are not part of the text format and come back empty.
    pub(crate) fn from_nodes(nodes: Vec<TreeNode<T>>, min_node_size: usize, seed: u64) -> Self {
        Self::assemble(nodes, min_node_size, seed)
    }
}

/// Variance-reduction criterion of splitting a node at `x < z`, computed literally.
///
/// Returns `None` when `z` leaves one side empty.
pub fn split_gain<T: Scalar>(y: &[T], x: &[T], z: T) -> Result<Option<T>> {
    if y.len() != x.len() {
        return Err(Error::LengthMismatch {
            what: "node x column",
            got: x.len(),
            expected: y.len(),
        });
    }
    if y.is_empty() {
        return Ok(None);
    }
    let mean = |it: &mut dyn Iterator<Item = T>| {
        let (s, c) = it.fold((T::zero(), 0usize), |(s, c), v| (s + v, c + 1));
        (c > 0).then(|| s / T::of_usize(c))
    };
    let all = mean(&mut y.iter().copied()).expect("nonempty");
    let left = mean(&mut y.iter().zip(x).filter(|(_, &xi)| xi < z).map(|(&v, _)| v));
    let right = mean(&mut y.iter().zip(x).filter(|(_, &xi)| xi >= z).map(|(&v, _)| v));
    let (Some(left), Some(right)) = (left, right) else {
        return Ok(None);
    };
    let total: T = y
        .iter()
        .zip(x)
        .map(|(&v, &xi)| {
            let fitted = if xi < z { left } else { right };
            (v - all) * (v - all) - (v - fitted) * (v - fitted)
        })
        .sum();
    Ok(Some((total / T::of_usize(y.len())).max(T::zero())))
}

/// A split candidate together with the criterion value it attains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSplit<T> {
    pub rule: SplitRule<T>,
    pub gain: T,
}

/// Best admissible split of a node over `candidate_vars`.
///
/// `members` lists `(row, multiplicity)` pairs of the node; multiplicities count as units
/// both in means and in the `min_node_size` check.
pub fn best_split<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[T],
    members: &[(usize, u32)],
    candidate_vars: &[usize],
    min_node_size: usize,
) -> Option<ScoredSplit<T>> {
    let mut buf = Vec::with_capacity(members.len());
    best_split_with(x, y, members, candidate_vars, min_node_size, &mut buf)
}

fn best_split_with<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[T],
    members: &[(usize, u32)],
    candidate_vars: &[usize],
    min_node_size: usize,
    buf: &mut Vec<(T, T, u32)>,
) -> Option<ScoredSplit<T>> {
    let n: u64 = members.iter().map(|&(_, c)| c as u64).sum();
    let min = min_node_size.max(1) as u64;
    if n < 2 * min {
        return None;
    }
    let nt = T::of(n as f64);
    let mean = members
        .iter()
        .map(|&(k, c)| y[k] * T::of(c as f64))
        .sum::<T>()
        / nt;
    // Work with centered responses so the gain formula does not cancel catastrophically.
    let total: T = members
        .iter()
        .map(|&(k, c)| (y[k] - mean) * T::of(c as f64))
        .sum();
    let node_var = members
        .iter()
        .map(|&(k, c)| (y[k] - mean) * (y[k] - mean) * T::of(c as f64))
        .sum::<T>()
        / nt;
    if node_var <= T::zero() {
        return None;
    }
    let floor = T::of(GAIN_REL_FLOOR) * node_var;
    let tie = T::of(TIE_REL_TOL);

    let mut sorted_vars = candidate_vars.to_vec();
    sorted_vars.sort_unstable();
    sorted_vars.dedup();

    let mut best: Option<ScoredSplit<T>> = None;
    for &j in &sorted_vars {
        buf.clear();
        buf.extend(members.iter().map(|&(k, c)| (x[[k, j]], y[k] - mean, c)));
        buf.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite predictors"));
        let mut s_left = T::zero();
        let mut n_left = 0u64;
        for i in 0..buf.len() - 1 {
            let (xi, yc, c) = buf[i];
            s_left += yc * T::of(c as f64);
            n_left += c as u64;
            let next = buf[i + 1].0;
            if next <= xi {
                continue;
            }
            let n_right = n - n_left;
            if n_left < min {
                continue;
            }
            if n_right < min {
                break;
            }
            let s_right = total - s_left;
            let gain = (s_left * s_left / T::of(n_left as f64)
                + s_right * s_right / T::of(n_right as f64)
                - total * total / nt)
                / nt;
            let better = match &best {
                None => true,
                Some(b) => gain > b.gain + tie * b.gain.abs(),
            };
            if better {
                best = Some(ScoredSplit {
                    rule: SplitRule {
                        var: j,
                        threshold: midpoint(xi, next),
                    },
                    gain,
                });
            }
        }
    }
    best.filter(|b| b.gain > floor)
}

/// Midpoint strictly above `lo` and at most `hi`.
fn midpoint<T: Scalar>(lo: T, hi: T) -> T {
    let z = lo + (hi - lo) / T::of(2.0);
    if z > lo {
        z
    } else {
        hi
    }
}

/// Grows a tree on the rows of `x` with `counts[k] > 0`.
///
/// Before each split `mtry` candidate columns are drawn without replacement from the
/// tree's own generator, seeded by `params.seed`.
pub fn grow_tree<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[T],
    counts: &[u32],
    params: &TreeParams,
) -> Result<RegressionTree<T>> {
    let (n_rows, p) = x.dim();
    if y.len() != n_rows {
        return Err(Error::LengthMismatch {
            what: "response",
            got: y.len(),
            expected: n_rows,
        });
    }
    if counts.len() != n_rows {
        return Err(Error::LengthMismatch {
            what: "membership",
            got: counts.len(),
            expected: n_rows,
        });
    }
    if p == 0 {
        return Err(Error::InvalidParameter("no predictors".into()));
    }
    if params.mtry == 0 || params.mtry > p {
        return Err(Error::InvalidParameter(format!(
            "mtry = {} must lie in [1, {p}]",
            params.mtry
        )));
    }
    if params.min_node_size == 0 {
        return Err(Error::InvalidParameter("min_node_size must be positive".into()));
    }
    let root: Vec<(usize, u32)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (k, c))
        .collect();
    let n_members: usize = root.iter().map(|&(_, c)| c as usize).sum();
    if n_members < params.min_node_size {
        return Err(Error::InsufficientData {
            members: n_members,
            min_node_size: params.min_node_size,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let all_vars: Vec<usize> = (0..p).collect();
    let mut buf = Vec::with_capacity(root.len());
    let mut nodes: Vec<TreeNode<T>> = Vec::new();
    // (members, parent, is_left)
    let mut stack: Vec<(Vec<(usize, u32)>, Option<usize>, bool)> = vec![(root, None, false)];

    while let Some((members, parent, is_left)) = stack.pop() {
        let id = nodes.len();
        if let Some(pid) = parent {
            if let NodeKind::Internal { left, right, .. } = &mut nodes[pid].kind {
                if is_left {
                    *left = id;
                } else {
                    *right = id;
                }
            }
        }
        let count: usize = members.iter().map(|&(_, c)| c as usize).sum();
        let mean = members
            .iter()
            .map(|&(k, c)| y[k] * T::of(c as f64))
            .sum::<T>()
            / T::of_usize(count);

        let splittable = count >= 2 * params.min_node_size;
        let found = if splittable {
            let candidates = if params.mtry >= p {
                all_vars.clone()
            } else {
                rand::seq::index::sample(&mut rng, p, params.mtry).into_vec()
            };
            best_split_with(x, y, &members, &candidates, params.min_node_size, &mut buf)
        } else {
            None
        };

        match found {
            None => nodes.push(TreeNode {
                parent,
                member_count: count,
                mean,
                kind: NodeKind::Terminal { members },
            }),
            Some(best) => {
                let (left, right): (Vec<_>, Vec<_>) = members
                    .into_iter()
                    .partition(|&(k, _)| x[[k, best.rule.var]] < best.rule.threshold);
                nodes.push(TreeNode {
                    parent,
                    member_count: count,
                    mean,
                    kind: NodeKind::Internal {
                        split: best.rule,
                        left: usize::MAX,
                        right: usize::MAX,
                    },
                });
                stack.push((right, Some(id), false));
                stack.push((left, Some(id), true));
            }
        }
    }
    Ok(RegressionTree::assemble(nodes, params.min_node_size, params.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn members(n: usize) -> Vec<(usize, u32)> {
        (0..n).map(|k| (k, 1)).collect()
    }

    /// Before-split SSE minus after-split SSE over node size, by two separate passes.
    fn sse_oracle(y: &[f64], x: &[f64], z: f64) -> Option<f64> {
        let sse = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
        };
        let l: Vec<f64> = y.iter().zip(x).filter(|(_, &a)| a < z).map(|(&v, _)| v).collect();
        let r: Vec<f64> = y.iter().zip(x).filter(|(_, &a)| a >= z).map(|(&v, _)| v).collect();
        if l.is_empty() || r.is_empty() {
            return None;
        }
        Some((sse(y) - sse(&l) - sse(&r)) / y.len() as f64)
    }

    #[test]
    fn split_gain_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(split_gain(&[0.0, 0.0, 10.0, 10.0], &x, 2.5).unwrap(), Some(25.0));
        assert_eq!(sse_oracle(&[0.0, 0.0, 10.0, 10.0], &x, 2.5), Some(25.0));
        assert_eq!(split_gain(&[3.0; 4], &x, 1.5).unwrap(), Some(0.0));
        assert_eq!(split_gain(&[0.0, 10.0, 0.0, 10.0], &x, 2.5).unwrap(), Some(0.0));
        assert_eq!(split_gain(&[0.0, 10.0, 0.0, 10.0], &x, 0.5).unwrap(), None);
        assert_eq!(split_gain(&[0.0, 10.0, 0.0, 10.0], &x, 4.5).unwrap(), None);
    }

    #[test]
    fn split_gain_matches_sse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(2..30);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let z = rng.random_range(0.0..1.0);
            let got = split_gain(&y, &x, z).unwrap();
            let want = sse_oracle(&y, &x, z);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "{g} {w}"),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn best_split_examples() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let y = [0.0, 0.0, 10.0, 10.0];
        let s = best_split(x.view(), &y, &members(4), &[0], 1).unwrap();
        assert_eq!(s.rule, SplitRule { var: 0, threshold: 2.5 });
        assert_eq!(s.gain, 25.0);
        assert!(best_split(x.view(), &[1.0; 4], &members(4), &[0], 1).is_none());
        assert!(best_split(x.view(), &y, &members(4), &[0], 3).is_none());
    }

    #[test]
    fn ties_go_to_lowest_var_then_smallest_threshold() {
        // Both columns separate y identically; y symmetric so thresholds 1.5 and 3.5 tie.
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]];
        let y = [0.0, 5.0, 5.0, 10.0];
        let s = best_split(x.view(), &y, &members(4), &[1, 0], 1).unwrap();
        assert_eq!(s.rule.var, 0);
        assert_eq!(s.rule.threshold, 1.5);
        let y = [0.0, 6.0, 6.0, 6.0, 6.0, 12.0];
        let x6 = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
        let s = best_split(x6.view(), &y, &members(6), &[0], 1).unwrap();
        assert_eq!(s.rule.threshold, 0.5);
    }

    #[test]
    fn multiplicities_count_as_units() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = [0.0, 0.0, 9.0];
        // With unit counts, n0 = 2 forbids every split of three units.
        assert!(best_split(x.view(), &y, &members(3), &[0], 2).is_none());
        let weighted = [(0, 1), (1, 1), (2, 2)];
        let s = best_split(x.view(), &y, &weighted, &[0], 2).unwrap();
        assert_eq!(s.rule.threshold, 2.5);
    }

    #[test]
    fn staircase_tree_has_two_terminals() {
        let n = 20;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| (i as f64 + 0.5) / n as f64);
        let y: Vec<f64> = (0..n).map(|i| if x[[i, 0]] > 0.5 { 1.0 } else { 0.0 }).collect();
        let params = TreeParams { min_node_size: 1, mtry: 1, seed: 1 };
        let tree = grow_tree(x.view(), &y, &vec![1; n], &params).unwrap();
        assert_eq!(tree.n_terminals(), 2);
        let means: Vec<f64> = tree.terminal_ids().map(|i| tree.node(i).mean).collect();
        assert_eq!(means, vec![0.0, 1.0]);
        assert_eq!(tree.predict(&[0.1]), 0.0);
        assert_eq!(tree.predict(&[0.9]), 1.0);
    }

    #[test]
    fn stopping_rule_and_insufficient_data() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let y = [1.0, 2.0, 3.0, 4.0];
        let params = TreeParams { min_node_size: 4, mtry: 1, seed: 0 };
        let tree = grow_tree(x.view(), &y, &[1; 4], &params).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.predict(&[100.0]), 2.5);
        let params = TreeParams { min_node_size: 5, mtry: 1, seed: 0 };
        assert!(matches!(
            grow_tree(x.view(), &y, &[1; 4], &params),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn boundary_goes_right() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let y = [0.0, 0.0, 10.0, 10.0];
        let params = TreeParams { min_node_size: 1, mtry: 1, seed: 0 };
        let tree = grow_tree(x.view(), &y, &[1; 4], &params).unwrap();
        assert_eq!(tree.predict(&[2.5]), 10.0);
        assert_eq!(tree.predict(&[2.4999]), 0.0);
    }
}
