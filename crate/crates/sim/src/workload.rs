//! Poisson arrival generation.

use rand::Rng;
use rand_distr::{Distribution, Exp};

/// Arrival times in milliseconds over [0, duration_ms), exponential
/// inter-arrivals with mean 1000 / lambda_pps ms. Empty for a non-positive rate.
pub fn poisson_arrivals<R: Rng + ?Sized>(lambda_pps: f64, duration_ms: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    if !(lambda_pps > 0.0) || !(duration_ms > 0.0) {
        return out;
    }
    let exp = Exp::new(lambda_pps / 1000.0).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= duration_ms {
            return out;
        }
        out.push(t);
    }
}
