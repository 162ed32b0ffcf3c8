use quanv_core::featcache::euclidean;
use quanv_core::BallTree;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lowest index among the points at minimum distance.
fn scan(points: &[Vec<f64>], query: &[f64]) -> (usize, f64) {
    let mut best = (0, euclidean(&points[0], query));
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = euclidean(p, query);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn trials(dim: usize, count: usize, lattice: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if lattice {
            f64::from(rng.random_range(0..4u8))
        } else {
            rng.random::<f64>()
        }
    };
    for trial in 0..count {
        let n = rng.random_range(1..=200usize);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| draw(&mut rng)).collect()).collect();
        let query: Vec<f64> = (0..dim).map(|_| draw(&mut rng)).collect();
        let leaf = rng.random_range(1..=20usize);
        let tree = BallTree::with_leaf_size(points.clone(), (0..n).collect(), leaf).unwrap();
        let got = tree.nearest(&query).unwrap();
        let (index, distance) = scan(&points, &query);
        assert_eq!(got.index, index, "dim {dim} trial {trial}");
        assert_eq!(got.distance, distance, "dim {dim} trial {trial}");
        assert_eq!(*got.payload, index);
    }
}

#[test]
fn nearest_equals_exhaustive_scan_in_two_dimensions() {
    trials(2, 2_334, false, 1);
    // Integer lattice points force many exact distance ties.
    trials(2, 1_000, true, 2);
}

#[test]
fn nearest_equals_exhaustive_scan_in_ten_dimensions() {
    trials(10, 3_333, false, 3);
}

#[test]
fn nearest_equals_exhaustive_scan_in_hundred_dimensions() {
    trials(100, 3_333, false, 4);
}
