use serde::{Deserialize, Serialize};

use super::binning::BinnedDataset;

/// Two gains closer than this (relative) are a tie, resolved towards the
/// lower feature index and then the lower bin.
pub const TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowParams {
    pub num_leaves: usize,
    pub min_data_in_leaf: usize,
    pub lambda_l2: f64,
    pub min_sum_hessian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        bin: u16,
        /// Rows with `x <= threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

/// One split made during growth, with the rows of the leaf it divided.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvent {
    pub rows: Vec<usize>,
    pub feature: usize,
    pub bin: u16,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub feature: usize,
    pub bin: u16,
    pub gain: f64,
}

pub fn leaf_score(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d > 0.0 {
        g * g / d
    } else {
        0.0
    }
}

pub fn leaf_value(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d > 0.0 {
        -g / d
    } else {
        0.0
    }
}

/// Smallest gain that counts as an improvement for a leaf with the given
/// score.
pub fn min_gain(parent_score: f64) -> f64 {
    1e-12 * (1.0 + parent_score.abs())
}

/// Pick the winner from candidates listed in (feature, bin) order.
pub fn pick_best(cands: &[Candidate]) -> Option<Candidate> {
    let max = cands.iter().map(|c| c.gain).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let floor = max - TIE_TOLERANCE * max.abs();
    cands.iter().copied().find(|c| c.gain >= floor)
}

struct Histogram {
    g: Vec<f64>,
    h: Vec<f64>,
    n: Vec<u32>,
}

struct Leaf {
    node: usize,
    rows: Vec<usize>,
    g: f64,
    h: f64,
    best: Option<Candidate>,
}

struct Grower<'a> {
    data: &'a BinnedDataset,
    grad: &'a [f64],
    hess: &'a [f64],
    params: GrowParams,
    offsets: Vec<usize>,
}

impl Grower<'_> {
    fn histogram(&self, rows: &[usize]) -> Histogram {
        let total = *self.offsets.last().expect("offsets");
        let mut hist = Histogram {
            g: vec![0.0; total],
            h: vec![0.0; total],
            n: vec![0; total],
        };
        let g: Vec<f64> = rows.iter().map(|&i| self.grad[i]).collect();
        let h: Vec<f64> = rows.iter().map(|&i| self.hess[i]).collect();
        for f in 0..self.data.features() {
            let col = self.data.column(f);
            let off = self.offsets[f];
            for (k, &i) in rows.iter().enumerate() {
                let b = off + col[i] as usize;
                hist.g[b] += g[k];
                hist.h[b] += h[k];
                hist.n[b] += 1;
            }
        }
        hist
    }

    fn best_split(&self, rows: &[usize], g_p: f64, h_p: f64) -> Option<Candidate> {
        let p = self.params;
        if rows.len() < 2 * p.min_data_in_leaf.max(1) {
            return None;
        }
        let hist = self.histogram(rows);
        let parent = leaf_score(g_p, h_p, p.lambda_l2);
        let floor = min_gain(parent);
        let n_p = rows.len();
        let mut cands = Vec::new();
        for f in 0..self.data.features() {
            let (lo, hi) = (self.offsets[f], self.offsets[f + 1]);
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            for b in lo..hi.saturating_sub(1) {
                gl += hist.g[b];
                hl += hist.h[b];
                nl += hist.n[b] as usize;
                let nr = n_p - nl;
                if nl < p.min_data_in_leaf || nr < p.min_data_in_leaf {
                    continue;
                }
                let (gr, hr) = (g_p - gl, h_p - hl);
                if hl < p.min_sum_hessian || hr < p.min_sum_hessian {
                    continue;
                }
                let gain = leaf_score(gl, hl, p.lambda_l2) + leaf_score(gr, hr, p.lambda_l2) - parent;
                if gain > floor {
                    cands.push(Candidate {
                        feature: f,
                        bin: (b - lo) as u16,
                        gain,
                    });
                }
            }
        }
        pick_best(&cands)
    }

    fn leaf(&self, node: usize, rows: Vec<usize>) -> Leaf {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let best = self.best_split(&rows, g, h);
        Leaf { node, rows, g, h, best }
    }
}

/// Leaf-wise growth: keep splitting the leaf whose best split has the
/// largest gain until `num_leaves` is reached or nothing can be split.
pub fn grow_tree(
    data: &BinnedDataset,
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    params: GrowParams,
    mut log: Option<&mut Vec<SplitEvent>>,
) -> Tree {
    let mut offsets = Vec::with_capacity(data.features() + 1);
    offsets.push(0);
    for m in &data.mappers {
        offsets.push(offsets.last().copied().unwrap_or(0) + m.bins());
    }
    let grower = Grower {
        data,
        grad,
        hess,
        params,
        offsets,
    };
    let mut nodes = vec![Node::Leaf { value: 0.0, count: 0 }];
    let mut leaves = vec![grower.leaf(0, rows.to_vec())];

    while leaves.len() < params.num_leaves.max(1) {
        let mut pick: Option<(usize, f64)> = None;
        for (k, l) in leaves.iter().enumerate() {
            if let Some(c) = l.best {
                if pick.is_none_or(|(_, g)| c.gain > g) {
                    pick = Some((k, c.gain));
                }
            }
        }
        let Some((k, _)) = pick else { break };
        let leaf = leaves.swap_remove(k);
        let c = leaf.best.expect("picked leaf has a split");
        let col = data.column(c.feature);
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = leaf.rows.iter().partition(|&&i| col[i] <= c.bin);
        if let Some(log) = log.as_deref_mut() {
            log.push(SplitEvent {
                rows: leaf.rows.clone(),
                feature: c.feature,
                bin: c.bin,
                gain: c.gain,
            });
        }
        let (li, ri) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0, count: 0 });
        nodes.push(Node::Leaf { value: 0.0, count: 0 });
        nodes[leaf.node] = Node::Split {
            feature: c.feature,
            bin: c.bin,
            threshold: data.mappers[c.feature].threshold(c.bin),
            left: li,
            right: ri,
            gain: c.gain,
        };
        leaves.push(grower.leaf(li, l_rows));
        leaves.push(grower.leaf(ri, r_rows));
        leaves.sort_by_key(|l| l.node);
    }

    for l in leaves {
        nodes[l.node] = Node::Leaf {
            value: leaf_value(l.g, l.h, params.lambda_l2),
            count: l.rows.len(),
        };
    }
    Tree { nodes }
}

impl Tree {
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Leaf { value, count } => Some((value, count)),
            Node::Split { .. } => None,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict_binned(&self, data: &BinnedDataset, row: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    bin,
                    left,
                    right,
                    ..
                } => i = if data.column(feature)[row] <= bin { left } else { right },
            }
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}
