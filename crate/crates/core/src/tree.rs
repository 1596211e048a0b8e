//! Regression trees grown by exact greedy least-squares splitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::par;

/// Column-major predictor matrix; `NaN` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    n: usize,
    p: usize,
    cols: Vec<f64>,
}

impl Features {
    pub fn from_columns(n: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        let p = columns.len();
        let mut cols = Vec::with_capacity(n * p);
        for c in &columns {
            check_len("feature column length", n, c.len())?;
            cols.extend_from_slice(c);
        }
        Self::checked(n, p, cols)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut cols = vec![0.0; n * p];
        for (i, r) in rows.iter().enumerate() {
            check_len("feature row length", p, r.len())?;
            for (j, v) in r.iter().enumerate() {
                cols[j * n + i] = *v;
            }
        }
        Self::checked(n, p, cols)
    }

    fn checked(n: usize, p: usize, cols: Vec<f64>) -> Result<Self> {
        if cols.iter().any(|v| v.is_infinite()) {
            return Err(Error::invalid("features must be finite or NaN (missing)"));
        }
        Ok(Self { n, p, cols })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cols[j * self.n + i]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.p).map(|j| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Features {
        let mut cols = Vec::with_capacity(rows.len() * self.p);
        for j in 0..self.p {
            let c = self.column(j);
            cols.extend(rows.iter().map(|&r| c[r]));
        }
        Features {
            n: rows.len(),
            p: self.p,
            cols,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_leaves: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 5,
            min_samples_leaf: 10,
            max_leaves: None,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.min_samples_leaf == 0 || self.max_leaves == Some(0) {
            return Err(Error::invalid(
                "trees need max_depth >= 1, min_samples_leaf >= 1 and max_leaves >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        id: usize,
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Missing values go left (the child that received more training samples).
        missing_left: bool,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Piecewise-constant function `h(x; α)ᵀγ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    num_features: usize,
    num_leaves: usize,
    root: Node,
}

impl RegressionTree {
    pub fn constant(num_features: usize, value: f64) -> Self {
        Self {
            num_features,
            num_leaves: 1,
            root: Node::Leaf { id: 0, value },
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        self.leaf(x).0
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.leaf(x).1
    }

    fn leaf(&self, x: &[f64]) -> (usize, f64) {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { id, value } => return (*id, *value),
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v <= *threshold };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    /// Leaf values ordered by leaf id.
    pub fn leaf_values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_leaves];
        fn walk(n: &Node, out: &mut [f64]) {
            match n {
                Node::Leaf { id, value } => out[*id] = *value,
                Node::Split { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        walk(&self.root, &mut out);
        out
    }

    pub fn set_leaf_values(&mut self, values: &[f64]) -> Result<()> {
        check_len("leaf value count", self.num_leaves, values.len())?;
        fn walk(n: &mut Node, v: &[f64]) {
            match n {
                Node::Leaf { id, value } => *value = v[*id],
                Node::Split { left, right, .. } => {
                    walk(left, v);
                    walk(right, v);
                }
            }
        }
        walk(&mut self.root, values);
        Ok(())
    }

    /// Multiplies every leaf value by `c`.
    pub fn scale(&mut self, c: f64) {
        let v: Vec<f64> = self.leaf_values().iter().map(|x| x * c).collect();
        self.set_leaf_values(&v).expect("same leaf count");
    }
}

/// Evaluates `tree` on every row of `x`.
pub fn predict_tree(tree: &RegressionTree, x: &Features) -> Result<Vec<f64>> {
    check_len("feature count", tree.num_features, x.p())?;
    Ok(par::map_range(x.n(), |i| tree.predict_one(&x.row(i))))
}

/// Leaf index of every row of `x`.
pub fn leaf_indices(tree: &RegressionTree, x: &Features) -> Result<Vec<usize>> {
    check_len("feature count", tree.num_features, x.p())?;
    Ok(par::map_range(x.n(), |i| tree.leaf_index(&x.row(i))))
}

/// A fitted tree and the leaf reached by each training row.
#[derive(Clone, Debug)]
pub struct FittedTree {
    pub tree: RegressionTree,
    pub leaf_of: Vec<usize>,
}

/// Reusable presorted feature orders for fitting many trees on the same rows.
pub struct TreeBuilder<'a> {
    x: &'a Features,
    /// Per feature: rows with a non-missing value, sorted by (value, row).
    sorted: Vec<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Stats {
    sum: f64,
    count: usize,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

/// Scan state of one node while sweeping a sorted feature column.
#[derive(Clone, Copy, Debug)]
struct Sweep {
    left: Stats,
    prev: f64,
    best: Option<Candidate>,
}

struct Pending {
    rows: Vec<usize>,
    stats: Stats,
    sumsq: f64,
    depth: usize,
    /// Path from the root: true for left.
    path: Vec<bool>,
}

impl<'a> TreeBuilder<'a> {
    pub fn new(x: &'a Features) -> Self {
        let sorted = par::map_range(x.p(), |j| {
            let c = x.column(j);
            let mut idx: Vec<u32> = (0..x.n() as u32).filter(|&i| !c[i as usize].is_nan()).collect();
            idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
            idx
        });
        Self { x, sorted }
    }

    pub fn features(&self) -> &Features {
        self.x
    }

    /// Grows a tree depth-wise; each split is the exact best reduction in the
    /// sum of squared errors over all features and midpoint thresholds.
    pub fn fit(&self, targets: &[f64], params: &TreeParams) -> Result<FittedTree> {
        params.validate()?;
        let n = self.x.n();
        check_len("target length", n, targets.len())?;
        if n == 0 {
            return Err(Error::invalid("cannot fit a tree to empty data"));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("tree targets must be finite"));
        }
        let max_leaves = params.max_leaves.unwrap_or(usize::MAX);
        let all: Vec<usize> = (0..n).collect();
        let mut level = vec![self.pending(all, targets, 0, Vec::new())];
        // finished leaves: (path, rows, value)
        let mut leaves: Vec<(Vec<bool>, Vec<usize>, f64)> = Vec::new();
        let mut splits: Vec<(Vec<bool>, Candidate)> = Vec::new();
        let mut num_leaves = 1;
        while !level.is_empty() {
            let splittable: Vec<usize> = (0..level.len())
                .filter(|&k| level[k].depth < params.max_depth && level[k].stats.count >= 2 * params.min_samples_leaf)
                .collect();
            let best = if splittable.is_empty() {
                Vec::new()
            } else {
                self.best_splits(&level, &splittable, targets, params)
            };
            let mut chosen: Vec<Option<Candidate>> = vec![None; level.len()];
            for (&k, c) in splittable.iter().zip(best) {
                chosen[k] = c;
            }
            // respect max_leaves: best gains first, ties by node order
            let mut order: Vec<usize> = (0..level.len()).filter(|&k| chosen[k].is_some()).collect();
            order.sort_by(|&a, &b| {
                let (ga, gb) = (chosen[a].unwrap().gain, chosen[b].unwrap().gain);
                gb.total_cmp(&ga).then(a.cmp(&b))
            });
            for &k in order.iter().skip(max_leaves.saturating_sub(num_leaves)) {
                chosen[k] = None;
            }
            let mut next = Vec::new();
            for (k, node) in level.into_iter().enumerate() {
                match chosen[k] {
                    None => {
                        let value = node.stats.sum / node.stats.count as f64;
                        leaves.push((node.path, node.rows, value));
                    }
                    Some(c) => {
                        num_leaves += 1;
                        let col = self.x.column(c.feature);
                        let (l, r): (Vec<usize>, Vec<usize>) = node.rows.iter().partition(|&&i| {
                            let v = col[i];
                            if v.is_nan() {
                                c.missing_left
                            } else {
                                v <= c.threshold
                            }
                        });
                        let mut lp = node.path.clone();
                        lp.push(true);
                        let mut rp = node.path.clone();
                        rp.push(false);
                        splits.push((node.path, c));
                        next.push(self.pending(l, targets, node.depth + 1, lp));
                        next.push(self.pending(r, targets, node.depth + 1, rp));
                    }
                }
            }
            level = next;
        }
        Ok(assemble(self.x.p(), n, splits, leaves))
    }

    fn pending(&self, rows: Vec<usize>, t: &[f64], depth: usize, path: Vec<bool>) -> Pending {
        let mut s = Stats::default();
        let mut sumsq = 0.0;
        for &i in &rows {
            s.sum += t[i];
            s.count += 1;
            sumsq += t[i] * t[i];
        }
        Pending {
            rows,
            stats: s,
            sumsq,
            depth,
            path,
        }
    }

    /// Best split for each listed node; features scanned in parallel, reduced in
    /// ascending feature order so ties keep the lowest feature index.
    fn best_splits(&self, level: &[Pending], nodes: &[usize], t: &[f64], params: &TreeParams) -> Vec<Option<Candidate>> {
        let n = self.x.n();
        const NONE: u32 = u32::MAX;
        let mut slot = vec![NONE; n];
        for (s, &k) in nodes.iter().enumerate() {
            for &i in &level[k].rows {
                slot[i] = s as u32;
            }
        }
        let min_leaf = params.min_samples_leaf;
        let per_feature = par::map_range(self.x.p(), |j| {
            let col = self.x.column(j);
            // non-missing totals per node
            let mut present = vec![Stats::default(); nodes.len()];
            for &i in &self.sorted[j] {
                let s = slot[i as usize];
                if s != NONE {
                    present[s as usize].sum += t[i as usize];
                    present[s as usize].count += 1;
                }
            }
            let mut sweep = vec![
                Sweep {
                    left: Stats::default(),
                    prev: f64::NAN,
                    best: None,
                };
                nodes.len()
            ];
            for &i in &self.sorted[j] {
                let i = i as usize;
                let s = slot[i];
                if s == NONE {
                    continue;
                }
                let s = s as usize;
                let v = col[i];
                let sw = &mut sweep[s];
                if sw.left.count > 0 && v > sw.prev {
                    let node = &level[nodes[s]];
                    if let Some(c) = score(node.stats, present[s], sw.left, node.sumsq, min_leaf) {
                        if sw.best.is_none_or(|b| c.0 > b.gain) {
                            let mut th = 0.5 * (sw.prev + v);
                            if th >= v {
                                th = sw.prev;
                            }
                            sw.best = Some(Candidate {
                                gain: c.0,
                                feature: j,
                                threshold: th,
                                missing_left: c.1,
                            });
                        }
                    }
                }
                sw.left.sum += t[i];
                sw.left.count += 1;
                sw.prev = v;
            }
            sweep.into_iter().map(|s| s.best).collect::<Vec<_>>()
        });
        (0..nodes.len())
            .map(|s| {
                let mut best: Option<Candidate> = None;
                for f in &per_feature {
                    if let Some(c) = f[s] {
                        if best.is_none_or(|b| c.gain > b.gain) {
                            best = Some(c);
                        }
                    }
                }
                best
            })
            .collect()
    }
}

/// SSE reduction of a split with the node's missing values sent to the child
/// with more non-missing rows. Returns `(gain, missing_left)` when admissible.
fn score(total: Stats, present: Stats, left: Stats, sumsq: f64, min_leaf: usize) -> Option<(f64, bool)> {
    let right = Stats {
        sum: present.sum - left.sum,
        count: present.count - left.count,
    };
    let missing = Stats {
        sum: total.sum - present.sum,
        count: total.count - present.count,
    };
    let missing_left = left.count >= right.count;
    let (l, r) = if missing_left {
        (
            Stats {
                sum: left.sum + missing.sum,
                count: left.count + missing.count,
            },
            right,
        )
    } else {
        (
            left,
            Stats {
                sum: right.sum + missing.sum,
                count: right.count + missing.count,
            },
        )
    };
    if l.count < min_leaf || r.count < min_leaf {
        return None;
    }
    let gain = l.sum * l.sum / l.count as f64 + r.sum * r.sum / r.count as f64
        - total.sum * total.sum / total.count as f64;
    // ignore round-off sized improvements (e.g. constant targets)
    (gain > 1e-12 * sumsq).then_some((gain, missing_left))
}

fn assemble(
    p: usize,
    n: usize,
    splits: Vec<(Vec<bool>, Candidate)>,
    leaves: Vec<(Vec<bool>, Vec<usize>, f64)>,
) -> FittedTree {
    use std::collections::HashMap;
    let split_map: HashMap<Vec<bool>, Candidate> = splits.into_iter().collect();
    let leaf_map: HashMap<Vec<bool>, (Vec<usize>, f64)> = leaves.into_iter().map(|(p, r, v)| (p, (r, v))).collect();
    let mut leaf_of = vec![0; n];
    let mut next_id = 0;
    fn build(
        path: &mut Vec<bool>,
        splits: &HashMap<Vec<bool>, Candidate>,
        leaves: &HashMap<Vec<bool>, (Vec<usize>, f64)>,
        leaf_of: &mut [usize],
        next_id: &mut usize,
    ) -> Node {
        if let Some(c) = splits.get(path) {
            path.push(true);
            let left = build(path, splits, leaves, leaf_of, next_id);
            path.pop();
            path.push(false);
            let right = build(path, splits, leaves, leaf_of, next_id);
            path.pop();
            Node::Split {
                feature: c.feature,
                threshold: c.threshold,
                missing_left: c.missing_left,
                left: Box::new(left),
                right: Box::new(right),
            }
        } else {
            let (rows, value) = &leaves[path];
            let id = *next_id;
            *next_id += 1;
            for &r in rows {
                leaf_of[r] = id;
            }
            Node::Leaf { id, value: *value }
        }
    }
    let root = build(&mut Vec::new(), &split_map, &leaf_map, &mut leaf_of, &mut next_id);
    FittedTree {
        tree: RegressionTree {
            num_features: p,
            num_leaves: next_id,
            root,
        },
        leaf_of,
    }
}

/// Fits one tree (see [`TreeBuilder::fit`]).
pub fn fit_tree(x: &Features, targets: &[f64], params: &TreeParams) -> Result<RegressionTree> {
    Ok(TreeBuilder::new(x).fit(targets, params)?.tree)
}

/// Generalized least-squares leaf values `(hᵀW h)⁻¹ hᵀW r` for a leaf
/// assignment `h` and a symmetric positive definite operator `W`.
///
/// The solution is unchanged when `W` is rescaled, so any positive multiple of
/// the inverse covariance may be passed.
pub fn gls_leaf_values<F>(leaf_of: &[usize], num_leaves: usize, residual: &[f64], apply_w: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let n = leaf_of.len();
    check_len("residual length", n, residual.len())?;
    if num_leaves == 0 || leaf_of.iter().any(|&l| l >= num_leaves) {
        return Err(Error::invalid("leaf assignment out of range"));
    }
    let columns = par::map_range(num_leaves, |k| {
        let h: Vec<f64> = leaf_of.iter().map(|&l| f64::from(u8::from(l == k))).collect();
        apply_w(&h)
    });
    let wr = apply_w(residual);
    let mut a = DMatrix::zeros(num_leaves, num_leaves);
    let mut b = DVector::zeros(num_leaves);
    for i in 0..n {
        let l = leaf_of[i];
        b[l] += wr[i];
        for k in 0..num_leaves {
            a[(l, k)] += columns[k][i];
        }
    }
    let a = (&a + a.transpose()) * 0.5;
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b).as_slice().to_vec());
    }
    let ridge = 1e-10 * a.trace().abs().max(1e-300) / num_leaves as f64;
    let mut reg = a;
    for k in 0..num_leaves {
        reg[(k, k)] += ridge;
    }
    reg.cholesky()
        .map(|ch| ch.solve(&b).as_slice().to_vec())
        .ok_or_else(|| Error::Singular("leaf normal equations".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_targets_give_single_leaf() {
        let x = Features::from_columns(6, vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap();
        let p = TreeParams {
            min_samples_leaf: 1,
            ..TreeParams::default()
        };
        let t = fit_tree(&x, &[2.5; 6], &p).unwrap();
        assert_eq!(t.num_leaves(), 1);
        assert_eq!(t.predict_one(&[0.0]), 2.5);
    }

    #[test]
    fn stump_on_indicator() {
        let xs = vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = xs.iter().map(|v| f64::from(u8::from(*v > 0.0))).collect();
        let x = Features::from_columns(6, vec![xs]).unwrap();
        let p = TreeParams {
            max_depth: 1,
            min_samples_leaf: 1,
            max_leaves: None,
        };
        let t = fit_tree(&x, &y, &p).unwrap();
        match t.root() {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 0.0),
            _ => panic!("expected a split"),
        }
        assert_eq!(t.predict_one(&[-5.0]), 0.0);
        assert_eq!(t.predict_one(&[5.0]), 1.0);
    }

    #[test]
    fn nan_follows_majority() {
        let xs = vec![1.0, 2.0, 3.0, 10.0, 11.0, f64::NAN];
        let y = vec![0.0, 0.0, 0.0, 5.0, 5.0, 0.0];
        let x = Features::from_columns(6, vec![xs]).unwrap();
        let p = TreeParams {
            max_depth: 1,
            min_samples_leaf: 1,
            max_leaves: None,
        };
        let f = TreeBuilder::new(&x).fit(&y, &p).unwrap();
        // three non-missing rows on the left, two on the right
        assert_eq!(f.tree.predict_one(&[f64::NAN]), 0.0);
        assert_eq!(f.leaf_of[5], f.leaf_of[0]);
    }

    #[test]
    fn gls_with_identity_is_leaf_mean() {
        let leaf_of = [0, 0, 1, 1, 1];
        let r = [1.0, 3.0, 2.0, 4.0, 6.0];
        let g = gls_leaf_values(&leaf_of, 2, &r, |v| v.to_vec()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-14 && (g[1] - 4.0).abs() < 1e-14);
    }
}
