//! Random forest of variance-reduction regression trees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::TrainingSet;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestOptions {
    pub trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(p / 3)`.
    pub mtry: Option<usize>,
    pub seed: u64,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            trees: 60,
            min_leaf: 5,
            mtry: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
        n: u32,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        n: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
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
                } => {
                    i = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left as usize).max(go(t, right as usize)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub n_features: usize,
    pub options: ForestOptions,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Mean of the tree predictions, summed in tree order.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

struct Grower<'a> {
    x: &'a [f64],
    y: &'a [f64],
    p: usize,
    min_leaf: usize,
    mtry: usize,
}

impl Grower<'_> {
    fn grow(&self, mut rows: Vec<u32>, rng: &mut impl Rng) -> Tree {
        let mut nodes = vec![Node::Leaf { value: 0.0, n: 0 }];
        let mut stack = vec![(0usize, 0usize, rows.len())];
        let mut feats: Vec<usize> = (0..self.p).collect();
        let mut buf: Vec<(f64, f64)> = Vec::with_capacity(rows.len());
        while let Some((id, lo, hi)) = stack.pop() {
            let part = &mut rows[lo..hi];
            let n = part.len();
            let (sum, sum_sq) = part.iter().fold((0.0, 0.0), |(s, q), &r| {
                let v = self.y[r as usize];
                (s + v, q + v * v)
            });
            let leaf = Node::Leaf {
                value: sum / n as f64,
                n: n as u32,
            };
            let parent_score = sum * sum / n as f64;
            let sse = (sum_sq - parent_score).max(0.0);
            if n < 2 * self.min_leaf || sse <= 1e-12 * sum_sq.max(f64::MIN_POSITIVE) {
                nodes[id] = leaf;
                continue;
            }
            // (score, feature, threshold); score is sum_l^2/n_l + sum_r^2/n_r
            let mut best: Option<(f64, usize, f64)> = None;
            for t in 0..self.p {
                if t >= self.mtry && best.is_some() {
                    break;
                }
                let j = rng.random_range(t..self.p);
                feats.swap(t, j);
                let f = feats[t];
                buf.clear();
                buf.extend(part.iter().map(|&r| (self.x[r as usize * self.p + f], self.y[r as usize])));
                buf.sort_by(|a, b| a.0.total_cmp(&b.0));
                if buf[0].0 == buf[n - 1].0 {
                    continue;
                }
                let mut s_left = 0.0;
                for k in 0..n - 1 {
                    s_left += buf[k].1;
                    let n_left = k + 1;
                    if n - n_left < self.min_leaf {
                        break;
                    }
                    if n_left < self.min_leaf || buf[k].0 == buf[k + 1].0 {
                        continue;
                    }
                    let s_right = sum - s_left;
                    let score = s_left * s_left / n_left as f64 + s_right * s_right / (n - n_left) as f64;
                    if best.is_none_or(|b| score > b.0) {
                        let (a, c) = (buf[k].0, buf[k + 1].0);
                        let mid = a + (c - a) / 2.0;
                        best = Some((score, f, if mid < c { mid } else { a }));
                    }
                }
            }
            match best {
                Some((score, f, thr)) if score - parent_score > 1e-12 * sse => {
                    let mut split = 0;
                    for k in 0..n {
                        if self.x[part[k] as usize * self.p + f] <= thr {
                            part.swap(split, k);
                            split += 1;
                        }
                    }
                    let left = nodes.len();
                    nodes.push(leaf);
                    nodes.push(leaf);
                    nodes[id] = Node::Split {
                        feature: f as u32,
                        threshold: thr,
                        left: left as u32,
                        right: left as u32 + 1,
                        n: n as u32,
                    };
                    stack.push((left + 1, lo + split, hi));
                    stack.push((left, lo, lo + split));
                }
                _ => nodes[id] = leaf,
            }
        }
        Tree { nodes }
    }
}

/// Trains `trees` regression trees, each on a bootstrap resample of size n
/// drawn from its own seeded stream. Leaves hold at least `min_leaf` rows.
pub fn rf_fit(ts: &TrainingSet, opts: ForestOptions) -> Result<Forest> {
    let p = ts.n_features;
    let n = ts.len();
    if opts.trees == 0 || opts.min_leaf == 0 {
        return Err(Error::invalid("forest needs at least one tree and min_leaf >= 1"));
    }
    if n < 2 * opts.min_leaf {
        return Err(Error::invalid(format!(
            "{n} training rows are too few for min_leaf {}",
            opts.min_leaf
        )));
    }
    if n > u32::MAX as usize {
        return Err(Error::invalid("too many training rows for one forest"));
    }
    let mtry = opts.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p);
    let grower = Grower {
        x: &ts.features,
        y: &ts.targets,
        p,
        min_leaf: opts.min_leaf,
        mtry,
    };
    let trees = par::map_range(opts.trees, |t| {
        let mut rng = rng::stream(opts.seed, t as u64);
        let rows: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
        grower.grow(rows, &mut rng)
    });
    Ok(Forest {
        n_features: p,
        options: ForestOptions { mtry: Some(mtry), ..opts },
        trees,
    })
}
