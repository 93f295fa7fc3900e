//! CART regression trees grown by variance reduction.
//!
//! Leaves keep the (possibly repeated) training indices that reached them, so
//! callers can derive means, Newton steps or full empirical distributions.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Column-major feature matrix: `column(j)[i]` is feature `j` of sample `i`.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_columns(n_rows: usize, columns: Vec<Vec<f64>>) -> Self {
        let n_cols = columns.len();
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for c in columns {
            assert_eq!(c.len(), n_rows);
            data.extend(c);
        }
        FeatureMatrix { n_rows, n_cols, data }
    }

    /// From row-major rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let columns = (0..n_cols).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self::from_columns(n_rows, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.n_rows + row]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeParams {
    /// Features tried per split (clamped to the feature count).
    pub mtry: usize,
    /// Nodes with at most this many samples become leaves.
    pub min_node_size: usize,
    /// Minimum samples on each side of a split.
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub max_leaves: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        samples: Vec<u32>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split(
    x: &FeatureMatrix,
    y: &[f64],
    samples: &[u32],
    features: &[usize],
    min_leaf: usize,
    pairs: &mut Vec<(f64, f64)>,
) -> Option<Candidate> {
    let n = samples.len();
    let total: f64 = samples.iter().map(|&i| y[i as usize]).sum();
    let base = total * total / n as f64;
    let mut best: Option<Candidate> = None;
    for &f in features {
        let col = x.column(f);
        pairs.clear();
        pairs.extend(samples.iter().map(|&i| (col[i as usize], y[i as usize])));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += pairs[k].1;
            let n_left = k + 1;
            if pairs[k].0 == pairs[k + 1].0 || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let gain =
                left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - base;
            if gain > 1e-12 * base.abs().max(1e-300) && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate {
                    feature: f,
                    threshold: 0.5 * (pairs[k].0 + pairs[k + 1].0),
                    gain,
                });
            }
        }
    }
    best
}

impl Tree {
    /// Grows a tree on `samples` (indices into `x`/`y`, repeats allowed).
    pub fn grow(x: &FeatureMatrix, y: &[f64], samples: Vec<u32>, params: &TreeParams, rng: &mut impl Rng) -> Tree {
        let p = x.n_cols();
        let mtry = params.mtry.clamp(1, p.max(1));
        let mut nodes: Vec<Node> = vec![Node::Leaf { samples: Vec::new() }];
        let mut stack = vec![(0usize, samples, 0usize)];
        let mut n_leaves = 1usize;
        let mut pairs = Vec::new();

        while let Some((id, samples, depth)) = stack.pop() {
            let n = samples.len();
            let depth_ok = params.max_depth.is_none_or(|d| depth < d);
            let leaves_ok = params.max_leaves.is_none_or(|m| n_leaves < m);
            let first = samples.first().map(|&i| y[i as usize]);
            let constant = samples.iter().all(|&i| Some(y[i as usize]) == first);
            if n <= params.min_node_size || n < 2 || !depth_ok || !leaves_ok || constant || p == 0 {
                nodes[id] = Node::Leaf { samples };
                continue;
            }
            let mut features: Vec<usize> = if mtry >= p {
                (0..p).collect()
            } else {
                sample(rng, p, mtry).into_vec()
            };
            // ascending order makes equal-gain ties resolve to the lowest column
            features.sort_unstable();
            let Some(split) = best_split(x, y, &samples, &features, params.min_leaf.max(1), &mut pairs) else {
                nodes[id] = Node::Leaf { samples };
                continue;
            };
            let col = x.column(split.feature);
            let (left, right): (Vec<u32>, Vec<u32>) =
                samples.into_iter().partition(|&i| col[i as usize] <= split.threshold);
            let l_id = nodes.len();
            nodes.push(Node::Leaf { samples: Vec::new() });
            let r_id = nodes.len();
            nodes.push(Node::Leaf { samples: Vec::new() });
            nodes[id] = Node::Split {
                feature: split.feature,
                threshold: split.threshold,
                left: l_id,
                right: r_id,
            };
            n_leaves += 1;
            stack.push((r_id, right, depth + 1));
            stack.push((l_id, left, depth + 1));
        }
        Tree { nodes }
    }

    /// Tree with a single leaf holding `samples`.
    pub fn stump(samples: Vec<u32>) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { samples }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Node index of the leaf reached by a query whose feature `j` is `feature(j)`.
    pub fn leaf_index(&self, feature: impl Fn(usize) -> f64) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split {
                    feature: f,
                    threshold,
                    left,
                    right,
                } => id = if feature(*f) <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn leaf_samples(&self, leaf: usize) -> &[u32] {
        match &self.nodes[leaf] {
            Node::Leaf { samples } => samples,
            Node::Split { .. } => &[],
        }
    }

    /// Node indices of all leaves.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], Node::Leaf { .. }))
            .collect()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}
