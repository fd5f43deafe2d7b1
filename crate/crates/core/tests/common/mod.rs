//! Helpers shared by the integration tests.
#![allow(dead_code)]

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Zero};
use rand::Rng;
use rand_distr::StandardNormal;
use rearrange_core::EstimateVector;

/// `k / 2^bits` as an exact rational.
pub fn dyadic(k: i64, bits: u32) -> BigRational {
    BigRational::new(BigInt::from(k), BigInt::from(1i64 << bits))
}

/// Difference of means: first two entries against the rest.
fn t_exact(s: &[BigRational]) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    let rest = &s[2..];
    let n = BigRational::from_integer(BigInt::from(rest.len()));
    let sum_rest = rest.iter().fold(BigRational::zero(), |a, b| a + b);
    (&s[0] + &s[1]) / two - sum_rest / n
}

/// The recentred weighted vector and the statistic before and after a
/// descending sort, in exact arithmetic. Returns `(equal, tie)` where `tie`
/// flags an exact tie between the smaller weighted treated entry and the
/// largest control entry.
pub fn exact_rearrangement(treated: &BigRational, controls: &[BigRational], w: &BigRational) -> (bool, bool) {
    let q = BigRational::from_integer(BigInt::from(controls.len()));
    let mean = controls.iter().fold(BigRational::zero(), |a, b| a + b) / q;
    let delta = treated - &mean;
    let one = BigRational::one();
    let mut s = vec![(&one + w) * &delta, (&one - w) * &delta];
    s.extend(controls.iter().map(|c| c - &mean));
    let mut sorted = s.clone();
    sorted.sort_by(|a, b| b.cmp(a));
    let equal = t_exact(&s) == t_exact(&sorted);
    let max_control = s[2..].iter().max().cloned().unwrap();
    let min_pair = std::cmp::min(s[0].clone(), s[1].clone());
    (equal, min_pair == max_control)
}

pub fn to_f64(x: &BigRational) -> f64 {
    use num::ToPrimitive;
    x.to_f64().unwrap()
}

/// Estimates with a normal treated entry of scale `treated_sd` shifted by
/// `delta`, and standard normal controls.
pub fn normal_estimates<R: Rng>(rng: &mut R, q: usize, delta: f64, treated_sd: f64) -> EstimateVector {
    let treated = delta + treated_sd * rng.sample::<f64, _>(StandardNormal);
    let controls = (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    EstimateVector::new(treated, controls).unwrap()
}
