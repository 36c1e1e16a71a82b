//! Exact k-nearest-neighbour search over client weight vectors.
//!
//! Splits pick the indexed dimension of largest variance and cut at the
//! median. Queries are branch and bound on the full Euclidean distance, so
//! the tree only ever prunes work, never answers.

use crate::error::{Error, Result};

pub const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<usize>),
    /// Points in `left` have coordinate ≤ `value` at `dim`; points in
    /// `right` have coordinate ≥ `value`.
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    ids: Vec<usize>,
    points: Vec<Vec<f64>>,
    nodes: Vec<Node>,
}

/// Squared Euclidean distance, summed in coordinate order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn variance(points: &[Vec<f64>], items: &[usize], d: usize) -> f64 {
    let n = items.len() as f64;
    let mean = items.iter().map(|&i| points[i][d]).sum::<f64>() / n;
    items.iter().map(|&i| (points[i][d] - mean).powi(2)).sum::<f64>() / n
}

impl KdTree {
    /// Builds a tree over `(id, vector)` pairs, splitting only on `dims`
    /// (every dimension when `None`).
    pub fn build(vectors: &[(usize, &[f64])], dims: Option<&[usize]>) -> Result<Self> {
        let dim = vectors.first().map_or(0, |(_, v)| v.len());
        if vectors.iter().any(|(_, v)| v.len() != dim) {
            return Err(Error::Invariant("k-d tree points differ in dimension".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !vectors.iter().all(|(id, _)| seen.insert(*id)) {
            return Err(Error::Config("duplicate client id in k-d tree".into()));
        }
        let all: Vec<usize> = (0..dim).collect();
        let dims = dims.unwrap_or(&all);
        if let Some(d) = dims.iter().find(|&&d| d >= dim) {
            return Err(Error::Config(format!("split dimension {d} outside 0..{dim}")));
        }
        let mut tree = KdTree {
            ids: vectors.iter().map(|(id, _)| *id).collect(),
            points: vectors.iter().map(|(_, v)| v.to_vec()).collect(),
            nodes: Vec::new(),
        };
        let items: Vec<usize> = (0..vectors.len()).collect();
        tree.grow(items, dims);
        Ok(tree)
    }

    fn grow(&mut self, mut items: Vec<usize>, dims: &[usize]) -> usize {
        if items.len() <= LEAF_SIZE || dims.is_empty() {
            self.nodes.push(Node::Leaf(items));
            return self.nodes.len() - 1;
        }
        // First dimension of maximal variance.
        let mut best = (dims[0], f64::NEG_INFINITY);
        for &d in dims {
            let v = variance(&self.points, &items, d);
            if v > best.1 {
                best = (d, v);
            }
        }
        let dim = best.0;
        let (points, ids) = (&self.points, &self.ids);
        items.sort_by(|&a, &b| points[a][dim].total_cmp(&points[b][dim]).then(ids[a].cmp(&ids[b])));
        let right = items.split_off(items.len().div_ceil(2));
        let value = self.points[*items.last().expect("left half is nonempty")][dim];
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let left = self.grow(items, dims);
        let right = self.grow(right, dims);
        self.nodes[slot] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        slot
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids stored in the leaves, in leaf order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf(items) => Some(items.iter().map(|&i| self.ids[i])),
                Node::Split { .. } => None,
            })
            .flatten()
            .collect()
    }

    pub fn max_leaf_size(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Leaf(items) => items.len(),
                Node::Split { .. } => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// Checks the split invariant on every node; used by tests.
    pub fn splits_are_consistent(&self) -> bool {
        fn collect(tree: &KdTree, node: usize, out: &mut Vec<usize>) {
            match &tree.nodes[node] {
                Node::Leaf(items) => out.extend(items),
                Node::Split { left, right, .. } => {
                    collect(tree, *left, out);
                    collect(tree, *right, out);
                }
            }
        }
        self.nodes.iter().all(|n| match n {
            Node::Leaf(_) => true,
            &Node::Split { dim, value, left, right } => {
                let (mut l, mut r) = (Vec::new(), Vec::new());
                collect(self, left, &mut l);
                collect(self, right, &mut r);
                l.iter().all(|&i| self.points[i][dim] <= value) && r.iter().all(|&i| self.points[i][dim] >= value)
            }
        })
    }

    /// The `k` points nearest to `query` as `(id, distance)`, nearest first,
    /// ties broken by lower id. `exclude` removes one id from consideration.
    pub fn query_knn(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
        let available = self.len() - exclude.map_or(0, |e| self.ids.contains(&e) as usize);
        if k > available {
            return Err(Error::Config(format!("asked for {k} neighbours among {available} points")));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        if let Some(p) = self.points.first() {
            if p.len() != query.len() {
                return Err(Error::Invariant(format!(
                    "query has dimension {}, tree {}",
                    query.len(),
                    p.len()
                )));
            }
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut best);
        Ok(best.into_iter().map(|(d, id)| (id, d.sqrt())).collect())
    }

    fn search(&self, node: usize, q: &[f64], k: usize, exclude: Option<usize>, best: &mut Vec<(f64, usize)>) {
        match &self.nodes[node] {
            Node::Leaf(items) => {
                for &i in items {
                    let id = self.ids[i];
                    if Some(id) == exclude {
                        continue;
                    }
                    let cand = (squared_distance(q, &self.points[i]), id);
                    let pos = best.partition_point(|b| b.0 < cand.0 || (b.0 == cand.0 && b.1 < cand.1));
                    if pos < k {
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            &Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, best);
                // Every point across the cut is at least |diff| away. Equal
                // distances are still visited so lower ids can win ties.
                let bound = diff * diff;
                if best.len() < k || bound <= best[k - 1].0 {
                    self.search(far, q, k, exclude, best);
                }
            }
        }
    }
}
