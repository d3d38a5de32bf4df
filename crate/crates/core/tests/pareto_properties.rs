//! Randomized properties of the vector-order toolkit, checked against
//! brute-force oracles.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use pareto_mrmp_core::pareto::{
    dominates, epi_contains, hausdorff, pareto_frontier, profile_distance, quantize,
    sampled_profile_distance, ParetoSet, TimeVec,
};

fn random_vec(rng: &mut StdRng, n: usize) -> TimeVec {
    TimeVec::from_quantized((0..n).map(|_| quantize(rng.gen_range(0.0..=1.0))))
}

/// O(k^2) pairwise-domination filter, the independent frontier oracle.
fn brute_frontier(input: &[TimeVec]) -> Vec<TimeVec> {
    let mut out: Vec<TimeVec> = Vec::new();
    for v in input {
        let dominated = input
            .iter()
            .any(|w| w != v && dominates(w, v).unwrap());
        let duplicate = out.contains(v);
        if !dominated && !duplicate {
            out.push(v.clone());
        }
    }
    out.sort();
    out
}

#[test]
fn frontier_matches_bruteforce_on_random_3vectors() {
    let mut rng = StdRng::seed_from_u64(11);
    for case in 0..50 {
        let n = if case % 2 == 0 { 2 } else { 3 };
        let input: Vec<TimeVec> = (0..200).map(|_| random_vec(&mut rng, n)).collect();
        let got = pareto_frontier(input.clone()).unwrap();
        let want = brute_frontier(&input);
        assert_eq!(got.points(), want.as_slice(), "case {case}");
    }
}

#[test]
fn frontier_idempotent_subset_and_covering() {
    let mut rng = StdRng::seed_from_u64(23);
    for case in 0..200 {
        let n = rng.gen_range(1..=3);
        let input: Vec<TimeVec> = (0..rng.gen_range(1..=60))
            .map(|_| random_vec(&mut rng, n))
            .collect();
        let f = pareto_frontier(input.clone()).unwrap();
        // idempotent
        let ff = pareto_frontier(f.points().to_vec()).unwrap();
        assert_eq!(f, ff, "case {case}");
        // subset of input
        for p in f.points() {
            assert!(input.contains(p));
        }
        // every input element dominated by some frontier element
        for v in &input {
            assert!(f.points().iter().any(|e| dominates(e, v).unwrap()));
        }
        // mutually non-dominated
        for a in f.points() {
            for b in f.points() {
                if a != b {
                    assert!(!dominates(a, b).unwrap());
                }
            }
        }
    }
}

#[test]
fn frontier_reduction_preserves_profile() {
    let mut rng = StdRng::seed_from_u64(37);
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let input: Vec<TimeVec> = (0..rng.gen_range(1..=30))
            .map(|_| random_vec(&mut rng, n))
            .collect();
        let f = pareto_frontier(input.clone()).unwrap();
        for _ in 0..20 {
            let t = random_vec(&mut rng, n);
            let in_frontier_profile = epi_contains(&f, &t);
            let in_raw_profile = input.iter().any(|p| dominates(p, &t).unwrap());
            assert_eq!(in_frontier_profile, in_raw_profile);
        }
    }
}

fn random_points(rng: &mut StdRng, n_pts: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n_pts)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn hausdorff_metric_axioms_on_random_sets() {
    let mut rng = StdRng::seed_from_u64(41);
    for _ in 0..300 {
        let dim = rng.gen_range(1..=3);
        let (na, nb, nc) = (
            rng.gen_range(1..=12),
            rng.gen_range(1..=12),
            rng.gen_range(1..=12),
        );
        let a = random_points(&mut rng, na, dim);
        let b = random_points(&mut rng, nb, dim);
        let c = random_points(&mut rng, nc, dim);
        let dab = hausdorff(&a, &b).unwrap();
        let dba = hausdorff(&b, &a).unwrap();
        let dac = hausdorff(&a, &c).unwrap();
        let dcb = hausdorff(&c, &b).unwrap();
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(dab, dba);
        assert!(dab <= dac + dcb + 1e-12, "triangle inequality violated");
    }
}

#[test]
fn expansion_union_identity_via_membership_sampling() {
    // (A + eta B) u (B + eta B) = (A u B) + eta B, tested by membership of
    // random probe points: distance to the union is the min distance.
    let mut rng = StdRng::seed_from_u64(53);
    for _ in 0..300 {
        let dim = rng.gen_range(1..=3);
        let (na, nb) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = random_points(&mut rng, na, dim);
        let b = random_points(&mut rng, nb, dim);
        let eta = rng.gen_range(0.01..0.5);
        for _ in 0..30 {
            let probe: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let d = |set: &[Vec<f64>]| {
                set.iter()
                    .map(|p| {
                        p.iter()
                            .zip(&probe)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let in_left = d(&a) <= eta || d(&b) <= eta;
            let union: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
            let in_right = d(&union) <= eta;
            assert_eq!(in_left, in_right);
        }
    }
}

#[test]
fn profile_distance_agrees_with_rasterization() {
    let mut rng = StdRng::seed_from_u64(67);
    for case in 0..25 {
        let mut u = ParetoSet::default();
        let mut v = ParetoSet::default();
        for _ in 0..rng.gen_range(1..=5) {
            u.insert(random_vec(&mut rng, 2));
        }
        for _ in 0..rng.gen_range(1..=5) {
            v.insert(random_vec(&mut rng, 2));
        }
        let exact = profile_distance(&u, &v);
        let pitch = 1.0 / 200.0;
        let approx = sampled_profile_distance(&u, &v, 201).unwrap();
        assert!(
            (exact - approx).abs() <= 2.0 * pitch * 2f64.sqrt(),
            "case {case}: exact {exact} approx {approx}"
        );
    }
}
