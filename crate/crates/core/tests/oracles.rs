mod common;

use capsprom_core::metrics::ConfusionMatrix;
use capsprom_core::tensor::Graph;
use common::{brute_force_metrics, naive_conv1d, naive_maxpool, random_tensor, rng};
use rand::Rng;

const CASES: usize = 200;
const TOL: f64 = 1e-10;

#[test]
fn conv1d_matches_naive() {
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let k = r.gen_range(1..10);
        let stride = r.gen_range(1..4);
        let len = k + r.gen_range(0..40);
        let (cin, cout) = (r.gen_range(1..9), r.gen_range(1..12));
        let x = random_tensor(&[len, cin], &mut r);
        let w = random_tensor(&[k, cin, cout], &mut r);
        let b = random_tensor(&[cout], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
        let y = g.conv1d(xv, wv, bv, stride).unwrap();
        let expected = naive_conv1d(&x, &w, &b, stride);
        assert_eq!(g.shape(y), &[(len - k) / stride + 1, cout]);
        for (a, e) in g.value(y).iter().zip(&expected) {
            worst = worst.max((a - e).abs());
        }
    }
    assert!(worst < TOL, "max abs error {worst:e}");
}

#[test]
fn maxpool_matches_naive() {
    let mut r = rng(101);
    for _ in 0..CASES {
        let window = r.gen_range(1..6);
        let len = window + r.gen_range(0..30);
        let ch = r.gen_range(1..8);
        let x = random_tensor(&[len, ch], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = g.max_pool1d(xv, window).unwrap();
        assert_eq!(g.shape(y), &[len / window, ch]);
        let expected = naive_maxpool(&x, window);
        for (a, e) in g.value(y).iter().zip(&expected) {
            assert!((a - e).abs() < TOL);
        }
    }
}

#[test]
fn metrics_match_pair_list_oracle_exactly() {
    let mut r = rng(102);
    for case in 0..100 {
        let n = r.gen_range(1..=1000);
        // Vary class balance and accuracy so degenerate matrices appear too.
        let p_pos = [0.0, 0.05, 0.3, 0.5, 1.0][case % 5];
        let p_correct = r.gen_range(0.0..=1.0);
        let pairs: Vec<(u8, u8)> = (0..n)
            .map(|_| {
                let actual = u8::from(r.gen_bool(p_pos));
                let pred = if r.gen_bool(p_correct) { actual } else { 1 - actual };
                (pred, actual)
            })
            .collect();
        let m = ConfusionMatrix::from_pairs(pairs.iter().copied()).unwrap().compute().unwrap();
        assert_eq!(m.values(), brute_force_metrics(&pairs), "case {case}");
    }
}
