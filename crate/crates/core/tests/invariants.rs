mod common;

use proptest::prelude::*;

use nncgp::covariance::KernelParams;
use nncgp::geometry::{augment_reference_sets, Location, NeighborGraph, NeighborIndex};
use nncgp::metrics::{interval_metrics, nsme, rmspe};
use nncgp::nngp::{nngp_log_density, sparse_precision_nnz, NngpFactors};
use nncgp::oracle::{oracle_suite, OracleOptions};
use nncgp::predict::grid_centers;
use nncgp::rng::substream;
use nncgp::synth::{simulate, HoldoutSpec, SynthConfig};

use common::{brute_force_nearest, dataset, dense_cov, dense_logpdf, uniform_locations};

fn sq_dist(a: &Location, b: &Location) -> f64 {
    a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn inside(p: &Location, boxes: &[Vec<[f64; 2]>]) -> bool {
    boxes
        .iter()
        .any(|b| p.coords().iter().zip(b).all(|(x, [lo, hi])| lo <= x && x <= hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn neighbor_sets_are_the_nearest_earlier_points(seed in 0u64..1000, n in 1usize..60, m in 1usize..12) {
        let locs = uniform_locations(&mut substream(seed, 0), n, 2);
        let g = NeighborGraph::build(&locs, m).unwrap();
        let order = g.order();
        for (rank, &i) in order.iter().enumerate() {
            let nb = g.neighbors(i);
            prop_assert_eq!(nb.len(), rank.min(m));
            let earlier = &order[..rank];
            prop_assert!(nb.iter().all(|j| earlier.contains(j)));
            // No earlier point outside the set is strictly closer than the farthest member.
            let worst = nb.iter().map(|&j| sq_dist(&locs[i], &locs[j])).fold(0.0, f64::max);
            for j in earlier.iter().filter(|j| !nb.contains(j)) {
                prop_assert!(sq_dist(&locs[i], &locs[*j]) >= worst);
            }
        }
    }

    #[test]
    fn kd_tree_matches_brute_force(seed in 0u64..1000, n in 1usize..80, k in 1usize..10) {
        let mut rng = substream(seed, 1);
        let locs = uniform_locations(&mut rng, n, 2);
        let q = uniform_locations(&mut rng, 1, 2).remove(0);
        let index = NeighborIndex::new(&locs);
        let got = index.nearest(q.coords(), k);
        let want = brute_force_nearest(&locs, q.coords(), k);
        let d = |v: &[usize]| v.iter().map(|&j| sq_dist(&q, &locs[j])).collect::<Vec<_>>();
        prop_assert_eq!(d(&got), d(&want));
    }

    #[test]
    fn full_conditioning_is_exact(seed in 0u64..1000, n in 2usize..30, sigma2 in 0.1f64..5.0, phi in 0.05f64..2.0) {
        let mut rng = substream(seed, 2);
        let locs = uniform_locations(&mut rng, n, 2);
        let kernel = KernelParams::new(sigma2, vec![phi, phi]).unwrap();
        let g = NeighborGraph::build(&locs, n - 1).unwrap();
        let f = NngpFactors::compute(&g, &locs, &kernel).unwrap();
        let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let sparse = nngp_log_density(&w, &f, &g).unwrap();
        let dense = dense_logpdf(&w, &dense_cov(&locs, sigma2, &[phi, phi]));
        prop_assert!((sparse - dense).abs() <= 1e-8 * dense.abs().max(1.0));
    }

    #[test]
    fn precision_nonzeros_respect_bound(seed in 0u64..1000, n in 1usize..80, m in 1usize..10) {
        let locs = uniform_locations(&mut substream(seed, 3), n, 2);
        let g = NeighborGraph::build(&locs, m).unwrap();
        let f = NngpFactors::compute(&g, &locs, &KernelParams::new(1.0, vec![0.3, 0.3]).unwrap()).unwrap();
        prop_assert!(sparse_precision_nnz(&f, &g) <= n * m * (m + 1) / 2);
    }

    #[test]
    fn augmented_sets_contain_every_higher_site(seed in 0u64..1000, n1 in 1usize..20, n2 in 1usize..15, shared in 0usize..10) {
        let mut rng = substream(seed, 4);
        let l1 = uniform_locations(&mut rng, n1, 2);
        let mut l2 = uniform_locations(&mut rng, n2, 2);
        l2.extend(l1.iter().take(shared).cloned());
        let sets = augment_reference_sets(&[dataset(1, l1.clone()), dataset(2, l2.clone())]).unwrap();
        prop_assert_eq!(sets[0].n_own(), n1);
        prop_assert_eq!(sets[0].n_extra(), n2);
        for p in &l2 {
            prop_assert!(sets[0].combined().contains(p));
        }
        prop_assert_eq!(sets[1].n_extra(), 0);
    }

    #[test]
    fn synthetic_data_respects_holdout(seed in 0u64..200, n1 in 5usize..40, n2 in 5usize..40, shared in 0.0f64..0.5) {
        let mut c = SynthConfig::reference(vec![n1, n2], seed);
        c.shared_fraction = shared;
        let holdout = HoldoutSpec::reference(&c.bbox, 2);
        let out = simulate(&c).unwrap();
        prop_assert_eq!(out.train[0].len(), n1);
        prop_assert_eq!(out.train[1].len() + out.test.values.len(), n2);
        prop_assert!(out.test.locations.iter().all(|p| inside(p, &holdout.boxes)));
        prop_assert!(out.train[1].locations().iter().all(|p| !inside(p, &holdout.boxes)));
        prop_assert!(out.train.iter().flat_map(|d| d.values()).all(|v| v.is_finite()));
    }

    #[test]
    fn metric_identities(obs in prop::collection::vec(-10.0f64..10.0, 2..40), shift in 0.01f64..3.0) {
        prop_assert_eq!(rmspe(&obs, &obs).unwrap(), 0.0);
        let off: Vec<f64> = obs.iter().map(|v| v + shift).collect();
        prop_assert!((rmspe(&off, &obs).unwrap() - shift).abs() < 1e-9);
        if obs.iter().any(|v| (v - obs[0]).abs() > 1e-6) {
            prop_assert!((nsme(&obs, &obs).unwrap() - 1.0).abs() < 1e-12);
        }
        let lo: Vec<f64> = obs.iter().map(|v| v - shift).collect();
        let (cvg, alci) = interval_metrics(&lo, &off, &obs).unwrap();
        prop_assert_eq!(cvg, 1.0);
        prop_assert!((alci - 2.0 * shift).abs() < 1e-9);
    }

    #[test]
    fn grid_cells_tile_the_box(nx in 1usize..12, ny in 1usize..12) {
        let cells = grid_centers(&[(0.0, 1.0), (-1.0, 1.0)], &[1.0 / nx as f64, 2.0 / ny as f64]).unwrap();
        prop_assert_eq!(cells.len(), nx * ny);
        prop_assert!(cells.iter().all(|c| (0.0..1.0).contains(&c.coords()[0]) && (-1.0..1.0).contains(&c.coords()[1])));
    }
}

#[test]
fn oracle_suite_passes_and_flags_a_fault() {
    let opts = OracleOptions {
        sizes: vec![20, 50],
        ..OracleOptions::default()
    };
    let checks = oracle_suite(&opts).unwrap();
    assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    let faulty = oracle_suite(&OracleOptions {
        inject_fault: true,
        ..opts
    })
    .unwrap();
    assert!(faulty.iter().any(|c| !c.passed));
}
