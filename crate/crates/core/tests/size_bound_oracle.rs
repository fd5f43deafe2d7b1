//! The size bound against a brute-force evaluation: trapezoid quadrature and
//! grid minimisation, with the normal law taken from `statrs`.

use rearrange_core::size_bound::{centering_adjustment, oracle_integral, size_bound};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

fn trapezoid_integral(q: u32, w: f64, rho: f64) -> f64 {
    let n = normal();
    let h = 1e-5;
    let steps = 1_000_000;
    let f = |y: f64| n.cdf((1.0 - w) * rho * y).powi(q as i32 - 1) * n.pdf(y);
    let mut sum = 0.5 * (f(0.0) + f(steps as f64 * h));
    for i in 1..steps {
        sum += f(i as f64 * h);
    }
    sum * h
}

fn grid_minimum(q: u32, w: f64) -> f64 {
    let n = normal();
    let f = |t: f64| {
        n.cdf(((q - 1) as f64).sqrt() * w * t).powi(q as i32 - 1) + 2.0 * n.cdf(-(q as f64) * t)
    };
    let (mut best_t, mut best) = (0.0, f64::INFINITY);
    for i in 1..=1_000_000 {
        let t = i as f64 * 1e-5;
        let v = f(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    // Refine around the coarse minimiser.
    for i in -1000..=1000 {
        let t = best_t + i as f64 * 1e-8;
        if t > 0.0 {
            best = best.min(f(t));
        }
    }
    best
}

#[test]
fn matches_brute_force_on_grid() {
    let ws = [0.1, 0.3, 0.5, 0.7, 0.9];
    let rhos = [0.5, 1.0, 2.0, 4.0, 8.0];
    let qs = [3u32, 15, 40];
    for &q in &qs {
        for &w in &ws {
            let centering = grid_minimum(q, w);
            let c = centering_adjustment(q, w).unwrap();
            assert!((c - centering).abs() < 1e-6, "centering q={q} w={w}: {c} vs {centering}");
            assert!(c <= centering + 1e-10, "q={q} w={w}: {c} vs {centering}");
            for &rho in &rhos {
                let integral = trapezoid_integral(q, w, rho);
                let b = size_bound(q, w, rho).unwrap();
                let oracle = 0.5f64.powi(q as i32 + 1) + integral + centering;
                assert!(
                    (b.total - oracle).abs() < 1e-6,
                    "q={q} w={w} rho={rho}: {} vs {oracle}",
                    b.total
                );
                assert!((oracle_integral(q, w, rho).unwrap() - integral).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn reference_point() {
    let oracle = 0.5f64.powi(16) + trapezoid_integral(15, 0.7, 3.0) + grid_minimum(15, 0.7);
    let b = size_bound(15, 0.7, 3.0).unwrap();
    assert!((b.total - oracle).abs() < 1e-7, "{} vs {oracle}", b.total);
}

#[test]
fn grid_minimum_for_q20() {
    let c = centering_adjustment(20, 0.5).unwrap();
    assert!((c - grid_minimum(20, 0.5)).abs() < 1e-9);
}

#[test]
fn monotone_in_rho_and_q() {
    for &w in &[0.2, 0.5, 0.8] {
        for &q in &[5u32, 20, 45] {
            let mut prev = 0.0;
            for i in 1..=40 {
                let t = size_bound(q, w, i as f64 * 0.25).unwrap().total;
                assert!(t >= prev - 1e-14);
                prev = t;
            }
        }
        for &rho in &[1.0, 3.0, 9.0] {
            let mut prev = f64::INFINITY;
            for q in 3..=60 {
                let t = size_bound(q, w, rho).unwrap().total;
                assert!(t <= prev + 1e-14, "q={q} w={w} rho={rho}");
                prev = t;
            }
        }
    }
}

#[test]
fn bound_dips_below_five_percent_for_twenty_controls() {
    for rho in 2..=9 {
        let crosses = (1..1000).any(|i| size_bound(20, i as f64 / 1000.0, rho as f64).unwrap().total < 0.05);
        assert!(crosses, "rho = {rho}");
    }
}

#[test]
fn components_are_positive_and_sum() {
    for &(q, w, rho) in &[(3u32, 0.5, 1.0), (10, 0.1, 9.0), (49, 0.99, 0.2)] {
        let b = size_bound(q, w, rho).unwrap();
        assert!(b.escape_term > 0.0 && b.oracle_integral > 0.0 && b.centering_adjustment > 0.0);
        assert!(b.centering_adjustment < 1.0);
        assert!(b.total > 0.5f64.powi(q as i32 + 1));
        let sum = b.escape_term + b.oracle_integral + b.centering_adjustment;
        assert!((b.total - sum).abs() <= 4.0 * f64::EPSILON * b.total);
    }
}
