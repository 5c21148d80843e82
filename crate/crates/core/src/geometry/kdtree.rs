//! kd-tree over a subset of points with rank-restricted k-nearest queries.
//!
//! Each node stores its bounding box and the smallest rank below it, so a
//! query for "the k nearest points ranked before r" can drop whole subtrees.
//! Results are ordered by `(squared distance, rank)`, which makes them agree
//! exactly with a brute-force scan.

use super::{sq_dist, Location};

const LEAF_SIZE: usize = 8;

struct Node {
    lo: Vec<f64>,
    hi: Vec<f64>,
    min_rank: usize,
    kind: NodeKind,
}

enum NodeKind {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

pub(crate) struct KdTree {
    dim: usize,
    /// Point coordinates in tree order, flattened.
    coords: Vec<f64>,
    ids: Vec<usize>,
    ranks: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Indexes `subset` of `locs`; `rank[i]` is the ordering rank of point `i`.
    pub(crate) fn new(locs: &[Location], subset: &[usize], rank: &[usize]) -> Self {
        let dim = locs.first().map_or(1, |l| l.dim());
        let mut ids = subset.to_vec();
        let mut tree = KdTree {
            dim,
            coords: Vec::new(),
            ids: Vec::new(),
            ranks: Vec::new(),
            nodes: Vec::new(),
        };
        if !ids.is_empty() {
            let n = ids.len();
            tree.build(locs, rank, &mut ids, 0, n);
        }
        tree.coords = ids.iter().flat_map(|&i| locs[i].coords().iter().copied()).collect();
        tree.ranks = ids.iter().map(|&i| rank[i]).collect();
        tree.ids = ids;
        tree
    }

    fn build(
        &mut self,
        locs: &[Location],
        rank: &[usize],
        ids: &mut [usize],
        start: usize,
        end: usize,
    ) -> usize {
        let slice = &mut ids[start..end];
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        let mut min_rank = usize::MAX;
        for &i in slice.iter() {
            for (k, &c) in locs[i].coords().iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
            min_rank = min_rank.min(rank[i]);
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            lo: lo.clone(),
            hi: hi.clone(),
            min_rank,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= LEAF_SIZE {
            return node;
        }
        let axis = (0..self.dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] <= lo[axis] {
            return node;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            locs[a].coords()[axis].total_cmp(&locs[b].coords()[axis])
        });
        let left = self.build(locs, rank, ids, start, start + mid);
        let right = self.build(locs, rank, ids, start + mid, end);
        self.nodes[node].kind = NodeKind::Split { left, right };
        node
    }

    /// Up to `k` indexed points with rank strictly below `rank_limit`,
    /// nearest first.
    pub(crate) fn nearest(&self, q: &[f64], k: usize, rank_limit: usize) -> Vec<usize> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut best = Best {
            k,
            items: Vec::with_capacity(k + 1),
        };
        self.search(0, q, rank_limit, &mut best);
        best.items.into_iter().map(|(_, _, id)| id).collect()
    }

    fn search(&self, node: usize, q: &[f64], rank_limit: usize, best: &mut Best) {
        let n = &self.nodes[node];
        if n.min_rank >= rank_limit || box_dist(&n.lo, &n.hi, q) > best.worst() {
            return;
        }
        match n.kind {
            NodeKind::Leaf { start, end } => {
                for p in start..end {
                    let r = self.ranks[p];
                    if r >= rank_limit {
                        continue;
                    }
                    let d = sq_dist(&self.coords[p * self.dim..(p + 1) * self.dim], q);
                    best.offer(d, r, self.ids[p]);
                }
            }
            NodeKind::Split { left, right } => {
                let dl = box_dist(&self.nodes[left].lo, &self.nodes[left].hi, q);
                let dr = box_dist(&self.nodes[right].lo, &self.nodes[right].hi, q);
                let (a, b) = if dl <= dr { (left, right) } else { (right, left) };
                self.search(a, q, rank_limit, best);
                self.search(b, q, rank_limit, best);
            }
        }
    }
}

fn box_dist(lo: &[f64], hi: &[f64], q: &[f64]) -> f64 {
    q.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| {
            let d = if x < l {
                l - x
            } else if x > h {
                x - h
            } else {
                0.0
            };
            d * d
        })
        .sum()
}

/// Sorted bounded candidate list keyed by `(dist2, rank)`.
struct Best {
    k: usize,
    items: Vec<(f64, usize, usize)>,
}

impl Best {
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    fn offer(&mut self, d: f64, rank: usize, id: usize) {
        if self.items.len() == self.k {
            let (wd, wr, _) = self.items[self.k - 1];
            if (d, rank) >= (wd, wr) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(bd, br, _)| (bd, br) < (d, rank));
        self.items.insert(pos, (d, rank, id));
        self.items.truncate(self.k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(locs: &[Location], rank: &[usize], q: &[f64], k: usize, limit: usize) -> Vec<usize> {
        let mut c: Vec<(f64, usize, usize)> = (0..locs.len())
            .filter(|&i| rank[i] < limit)
            .map(|i| (sq_dist(locs[i].coords(), q), rank[i], i))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c.into_iter().take(k).map(|t| t.2).collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec((0u8..20, 0u8..20), 1..120),
            k in 1usize..12,
            seed in 0usize..1000,
        ) {
            // Coarse grid coordinates produce many distance ties.
            let locs: Vec<Location> = pts
                .iter()
                .map(|&(a, b)| Location::new(vec![a as f64 / 4.0, b as f64 / 4.0]).unwrap())
                .collect();
            let n = locs.len();
            let rank: Vec<usize> = (0..n).map(|i| (i * 7919 + seed) % n).collect();
            let mut uniq = rank.clone();
            uniq.sort();
            uniq.dedup();
            prop_assume!(uniq.len() == n);
            let all: Vec<usize> = (0..n).collect();
            let tree = KdTree::new(&locs, &all, &rank);
            for i in 0..n {
                let q = locs[i].coords();
                prop_assert_eq!(tree.nearest(q, k, rank[i]), brute(&locs, &rank, q, k, rank[i]));
            }
        }
    }
}
