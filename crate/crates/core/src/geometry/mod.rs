//! Locations, deterministic ordering, nested reference-set augmentation and
//! nearest-neighbor graphs.

mod kdtree;

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub(crate) use kdtree::KdTree;

/// A point in `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Location(Vec<f64>);

impl Location {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("location must have at least one coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCoordinate { index: 0 });
        }
        // -0.0 and 0.0 are the same site.
        Ok(Location(coords.into_iter().map(|c| c + 0.0).collect()))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Exact-equality key used for cross-level membership tests.
    pub(crate) fn key(&self) -> SiteKey {
        SiteKey(self.0.iter().map(|c| c.to_bits()).collect())
    }
}

impl From<Location> for Vec<f64> {
    fn from(l: Location) -> Self {
        l.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) struct SiteKey(Vec<u64>);

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// What to do with repeated locations inside one fidelity level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplicatePolicy {
    #[default]
    Reject,
    /// Move repeated sites by a deterministic offset of magnitude
    /// `1e-9 x` the diameter of the level's bounding box.
    Jitter,
}

/// Observed locations and responses of one fidelity level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FidelityDataset {
    level: usize,
    locations: Vec<Location>,
    values: Vec<f64>,
}

impl FidelityDataset {
    pub fn new(level: usize, locations: Vec<Location>, values: Vec<f64>) -> Result<Self> {
        Self::with_policy(level, locations, values, DuplicatePolicy::Reject)
    }

    pub fn with_policy(
        level: usize,
        mut locations: Vec<Location>,
        values: Vec<f64>,
        policy: DuplicatePolicy,
    ) -> Result<Self> {
        if level == 0 {
            return Err(Error::invalid("fidelity levels are numbered from 1"));
        }
        if locations.is_empty() {
            return Err(Error::EmptyLocations);
        }
        if values.len() != locations.len() {
            return Err(Error::LengthMismatch {
                what: "values",
                expected: locations.len(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("level {level}: value in row {i} is not finite")));
        }
        let dim = check_dims(&locations)?;

        if policy == DuplicatePolicy::Jitter {
            jitter_duplicates(&mut locations, dim);
        }
        let mut seen: HashMap<SiteKey, usize> = HashMap::with_capacity(locations.len());
        for (i, loc) in locations.iter().enumerate() {
            if let Some(&first) = seen.get(&loc.key()) {
                return Err(Error::DuplicateLocation {
                    level,
                    first,
                    second: i,
                });
            }
            seen.insert(loc.key(), i);
        }
        Ok(FidelityDataset {
            level,
            locations,
            values,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations[0].dim()
    }
}

fn check_dims(locs: &[Location]) -> Result<usize> {
    let dim = locs.first().ok_or(Error::EmptyLocations)?.dim();
    for l in locs {
        if l.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: l.dim(),
            });
        }
    }
    Ok(dim)
}

fn jitter_duplicates(locs: &mut [Location], dim: usize) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for l in locs.iter() {
        for (k, c) in l.coords().iter().enumerate() {
            lo[k] = lo[k].min(*c);
            hi[k] = hi[k].max(*c);
        }
    }
    let diameter = sq_dist(&lo, &hi).sqrt();
    let eps = 1e-9 * if diameter > 0.0 { diameter } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a17_7e5d);
    let mut seen: HashMap<SiteKey, usize> = HashMap::with_capacity(locs.len());
    for i in 0..locs.len() {
        while seen.contains_key(&locs[i].key()) {
            let moved = locs[i]
                .coords()
                .iter()
                .map(|c| c + eps * rng.random_range(-1.0..1.0))
                .collect();
            locs[i] = Location(moved);
        }
        seen.insert(locs[i].key(), i);
    }
}

fn order_cmp(a: &[f64], b: &[f64]) -> Ordering {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    sa.total_cmp(&sb).then_with(|| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Deterministic ordering: ascending coordinate sum, then lexicographic
/// coordinates, then input index. Returns `order` with `order[r]` the input
/// index placed at rank `r`.
pub fn order_locations(locs: &[Location]) -> Result<Vec<usize>> {
    if locs.is_empty() {
        return Err(Error::EmptyLocations);
    }
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by(|&i, &j| order_cmp(locs[i].coords(), locs[j].coords()).then(i.cmp(&j)));
    Ok(order)
}

/// Reference set of one level augmented with the sites of all higher levels.
///
/// Combined indices `0..n_own` are the level's own rows in dataset order; the
/// extra sites `S_t*` follow in order of first appearance scanning levels
/// `t+1..T`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentedReferenceSet {
    level: usize,
    n_own: usize,
    locations: Vec<Location>,
    /// `members[i][row]`: combined index of `row` of level `level + i`.
    members: Vec<Vec<usize>>,
    /// Combined index of each site in the reference set one level down.
    parent: Vec<usize>,
    /// Combined index of each site in the reference set one level up.
    up: Vec<Option<usize>>,
}

impl AugmentedReferenceSet {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn n_own(&self) -> usize {
        self.n_own
    }

    pub fn n_extra(&self) -> usize {
        self.locations.len() - self.n_own
    }

    /// Size of the augmented set, `n_t + n_t*`.
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn own_range(&self) -> std::ops::Range<usize> {
        0..self.n_own
    }

    pub fn is_own(&self, index: usize) -> bool {
        index < self.n_own
    }

    pub fn combined(&self) -> &[Location] {
        &self.locations
    }

    pub fn extra(&self) -> &[Location] {
        &self.locations[self.n_own..]
    }

    /// Combined index of `row` of the dataset at `level` (`level >= self.level`).
    pub fn index_of(&self, level: usize, row: usize) -> Option<usize> {
        level
            .checked_sub(self.level)
            .and_then(|i| self.members.get(i))
            .and_then(|m| m.get(row).copied())
    }

    pub fn members(&self, level: usize) -> &[usize] {
        &self.members[level - self.level]
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn up(&self) -> &[Option<usize>] {
        &self.up
    }
}

/// Builds `S~_t = S_t u S_t*` for every level, with
/// `S_t* = (u_{i>t} S_i) \ S_t`.
pub fn augment_reference_sets(datasets: &[FidelityDataset]) -> Result<Vec<AugmentedReferenceSet>> {
    if datasets.is_empty() {
        return Err(Error::invalid("at least one fidelity level is required"));
    }
    let dim = datasets[0].dim();
    for (i, d) in datasets.iter().enumerate() {
        if d.level() != i + 1 {
            return Err(Error::invalid(format!(
                "datasets must be ordered by level 1..T; position {} holds level {}",
                i + 1,
                d.level()
            )));
        }
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: d.dim(),
            });
        }
    }

    let t_max = datasets.len();
    let mut sets = Vec::with_capacity(t_max);
    let mut lookups: Vec<HashMap<SiteKey, usize>> = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let own = &datasets[t];
        let mut locations: Vec<Location> = own.locations().to_vec();
        let mut lookup: HashMap<SiteKey, usize> =
            locations.iter().enumerate().map(|(i, l)| (l.key(), i)).collect();
        let mut members = vec![(0..own.len()).collect::<Vec<_>>()];
        for higher in &datasets[t + 1..] {
            let mut rows = Vec::with_capacity(higher.len());
            for loc in higher.locations() {
                let next = locations.len();
                let idx = *lookup.entry(loc.key()).or_insert(next);
                if idx == next {
                    locations.push(loc.clone());
                }
                rows.push(idx);
            }
            members.push(rows);
        }
        let parent = if t == 0 {
            Vec::new()
        } else {
            let below: &HashMap<SiteKey, usize> = &lookups[t - 1];
            locations.iter().map(|l| below[&l.key()]).collect()
        };
        sets.push(AugmentedReferenceSet {
            level: t + 1,
            n_own: own.len(),
            up: vec![None; locations.len()],
            locations,
            members,
            parent,
        });
        lookups.push(lookup);
    }
    for t in 1..t_max {
        let (lower, upper) = sets.split_at_mut(t);
        let below = &mut lower[t - 1];
        for (k, &p) in upper[0].parent.iter().enumerate() {
            below.up[p] = Some(k);
        }
    }
    Ok(sets)
}

/// Ordered directed nearest-neighbor graph.
///
/// Point indices are those of the location slice the graph was built from.
/// `neighbors(i)` holds at most `m` points that precede `i` in `order`, sorted
/// by increasing distance (ties by rank).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    m: usize,
    order: Vec<usize>,
    rank: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    /// `children[j]`: `(i, k)` such that `neighbors(i)[k] == j`.
    children: Vec<Vec<(usize, usize)>>,
}

impl NeighborGraph {
    /// Graph over a single location set under the default ordering; every
    /// earlier point is a candidate neighbor.
    pub fn build(locs: &[Location], m: usize) -> Result<Self> {
        let order = order_locations(locs)?;
        Self::build_with_order(locs, order, &vec![true; locs.len()], m)
    }

    /// Graph with an explicit order. Only points flagged `eligible` can act as
    /// neighbors.
    pub fn build_with_order(
        locs: &[Location],
        order: Vec<usize>,
        eligible: &[bool],
        m: usize,
    ) -> Result<Self> {
        if m < 1 {
            return Err(Error::invalid("neighbor budget m must be at least 1"));
        }
        let n = locs.len();
        if n == 0 {
            return Err(Error::EmptyLocations);
        }
        if order.len() != n || eligible.len() != n {
            return Err(Error::LengthMismatch {
                what: "graph order",
                expected: n,
                found: order.len().min(eligible.len()),
            });
        }
        check_dims(locs)?;
        let mut rank = vec![usize::MAX; n];
        for (r, &i) in order.iter().enumerate() {
            if i >= n || rank[i] != usize::MAX {
                return Err(Error::invalid("graph order is not a permutation"));
            }
            rank[i] = r;
        }

        let candidates: Vec<usize> = (0..n).filter(|&i| eligible[i]).collect();
        let tree = KdTree::new(locs, &candidates, &rank);
        let neighbors: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| tree.nearest(locs[i].coords(), m, rank[i]))
            .collect();

        let mut children = vec![Vec::new(); n];
        for &i in &order {
            for (k, &j) in neighbors[i].iter().enumerate() {
                children[j].push((i, k));
            }
        }
        Ok(NeighborGraph {
            m,
            order,
            rank,
            neighbors,
            children,
        })
    }

    /// Graph over an augmented reference set: own sites ordered first, extra
    /// sites after them, each block under the default ordering.
    pub fn for_reference_set(refset: &AugmentedReferenceSet, m: usize) -> Result<Self> {
        let locs = refset.combined();
        let n_own = refset.n_own();
        let mut order = order_locations(&locs[..n_own])?;
        if refset.n_extra() > 0 {
            order.extend(order_locations(refset.extra())?.into_iter().map(|i| i + n_own));
        }
        Self::build_with_order(locs, order, &vec![true; locs.len()], m)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rank(&self, i: usize) -> usize {
        self.rank[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn children(&self, j: usize) -> &[(usize, usize)] {
        &self.children[j]
    }
}

/// See [`NeighborGraph::for_reference_set`].
pub fn build_neighbor_graph(refset: &AugmentedReferenceSet, m: usize) -> Result<NeighborGraph> {
    NeighborGraph::for_reference_set(refset, m)
}

/// Unordered `k`-nearest search over a fixed location set, used at
/// prediction time.
pub struct NeighborIndex<'a> {
    locs: &'a [Location],
    tree: KdTree,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(locs: &'a [Location]) -> Self {
        let all: Vec<usize> = (0..locs.len()).collect();
        let tree = KdTree::new(locs, &all, &all);
        NeighborIndex { locs, tree }
    }

    pub fn nearest(&self, target: &[f64], k: usize) -> Vec<usize> {
        self.tree.nearest(target, k, usize::MAX)
    }

    pub fn locations(&self) -> &[Location] {
        self.locs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(c: &[f64]) -> Location {
        Location::new(c.to_vec()).unwrap()
    }

    fn ds(level: usize, pts: &[[f64; 2]]) -> FidelityDataset {
        let locs = pts.iter().map(|p| loc(p)).collect();
        FidelityDataset::new(level, locs, vec![0.0; pts.len()]).unwrap()
    }

    #[test]
    fn single_point_orders_to_identity() {
        assert_eq!(order_locations(&[loc(&[3.0, 4.0])]).unwrap(), vec![0]);
    }

    #[test]
    fn ordering_uses_coordinate_sum() {
        let locs = [loc(&[0.0, 0.0]), loc(&[1.0, 0.0]), loc(&[0.5, 0.0])];
        assert_eq!(order_locations(&locs).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn ordering_tie_breaks_lexicographically() {
        let locs = [loc(&[1.0, 0.0]), loc(&[0.0, 1.0]), loc(&[0.5, 0.5])];
        assert_eq!(order_locations(&locs).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn empty_location_set_is_rejected() {
        let err = order_locations(&[]).unwrap_err();
        assert_eq!(err.to_string(), "empty location set");
    }

    #[test]
    fn duplicates_rejected_or_jittered() {
        let locs = vec![loc(&[0.2, 0.3]), loc(&[0.5, 0.5]), loc(&[0.2, 0.3])];
        let err = FidelityDataset::new(1, locs.clone(), vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::DuplicateLocation { first: 0, second: 2, .. }));

        let d = FidelityDataset::with_policy(1, locs, vec![1.0, 2.0, 3.0], DuplicatePolicy::Jitter)
            .unwrap();
        let moved = d.locations()[2].coords();
        assert_ne!(moved, &[0.2, 0.3]);
        assert!(sq_dist(moved, &[0.2, 0.3]).sqrt() < 1e-8);
    }

    #[test]
    fn negative_zero_is_the_same_site() {
        let locs = vec![loc(&[0.0, 1.0]), loc(&[-0.0, 1.0])];
        assert!(FidelityDataset::new(1, locs, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn two_level_augmentation() {
        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let c = [0.0, 1.0];
        let sets = augment_reference_sets(&[ds(1, &[a, b]), ds(2, &[b, c])]).unwrap();
        assert_eq!(sets[0].extra(), &[loc(&c)]);
        assert_eq!(sets[0].len(), 3);
        assert_eq!(sets[0].members(2), &[1, 2]);
        assert_eq!(sets[1].n_extra(), 0);
        assert_eq!(sets[1].parent(), &[1, 2]);
        assert_eq!(sets[0].up(), &[None, Some(0), Some(1)]);
    }

    #[test]
    fn figure_one_toy_has_two_interpolants() {
        let s1 = [[0.0, 0.0], [0.1, 0.0], [0.3, 0.0], [0.5, 0.0], [0.6, 0.0]];
        let s2 = [[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [0.4, 0.0]];
        let sets = augment_reference_sets(&[ds(1, &s1), ds(2, &s2)]).unwrap();
        assert_eq!(sets[0].n_own(), 5);
        assert_eq!(sets[0].n_extra(), 2);
        assert_eq!(sets[1].n_extra(), 0);
    }

    #[test]
    fn augmentation_rejects_mixed_dimensions() {
        let d1 = ds(1, &[[0.0, 0.0]]);
        let d2 = FidelityDataset::new(2, vec![loc(&[1.0])], vec![0.0]).unwrap();
        assert!(matches!(
            augment_reference_sets(&[d1, d2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn first_point_has_no_neighbors_and_early_points_take_all() {
        let locs: Vec<_> = (0..6).map(|i| loc(&[i as f64, 0.0])).collect();
        let g = NeighborGraph::build(&locs, 5).unwrap();
        assert!(g.neighbors(0).is_empty());
        let mut n2 = g.neighbors(2).to_vec();
        n2.sort();
        assert_eq!(n2, vec![0, 1]);
    }

    #[test]
    fn collinear_neighbors() {
        let locs: Vec<_> = (0..5).map(|i| loc(&[i as f64])).collect();
        let g = NeighborGraph::build(&locs, 2).unwrap();
        // Fourth point (index 3) keeps the two closest predecessors.
        assert_eq!(g.neighbors(3), &[2, 1]);
        assert_eq!(g.neighbors(4), &[3, 2]);
    }

    #[test]
    fn zero_budget_is_an_error() {
        assert!(NeighborGraph::build(&[loc(&[0.0])], 0).is_err());
    }

    #[test]
    fn reference_set_graph_puts_extras_last() {
        let s1 = [[0.0, 0.0], [0.3, 0.1], [0.9, 0.9]];
        let s2 = [[0.1, 0.1], [0.5, 0.5]];
        let sets = augment_reference_sets(&[ds(1, &s1), ds(2, &s2)]).unwrap();
        let g = build_neighbor_graph(&sets[0], 3).unwrap();
        assert_eq!(&g.order()[3..], &[3, 4]);
        for i in 0..g.len() {
            assert_eq!(g.neighbors(i).len(), g.rank(i).min(3));
            for &j in g.neighbors(i) {
                assert!(g.rank(j) < g.rank(i));
            }
            if sets[0].is_own(i) {
                assert!(g.neighbors(i).iter().all(|&j| sets[0].is_own(j)));
            }
        }
        // Extra sites may condition on earlier extras.
        assert!(g.neighbors(4).contains(&3));
    }
}
