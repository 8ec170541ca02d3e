//! Seed derivation and the small set of samplers the simulator needs.
//!
//! Every random stream is a `ChaCha8Rng` seeded from a 64-bit key derived by
//! mixing a tuple of integers, so a stream depends only on *what* it is for
//! (global seed, round, client, tensor) and never on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// Stream labels mixed into derived seeds.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const PLAN: u64 = 0x2;
    pub const CLIENT: u64 = 0x3;
    pub const COMPRESS: u64 = 0x4;
    pub const LATENCY: u64 = 0x5;
    pub const TIERMAP: u64 = 0x6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered tuple of integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng_from(parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(parts))
}

/// `ln` of a Gamma(shape, 1) draw.
///
/// Marsaglia–Tsang squeeze for shape >= 1. For shape < 1 the draw is boosted:
/// `G(a) = G(a + 1) * U^(1/a)`, kept in log space because `U^(1/a)` underflows
/// for tiny shapes (a = 0.005 gives exponents around -200 * ln U).
pub fn ln_gamma_sample<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let u: f64 = open01(rng);
        return ln_gamma_sample(rng, shape + 1.0) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = open01(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

/// One draw from a symmetric Dirichlet(alpha) over `K` categories.
pub fn dirichlet<R: Rng + ?Sized, const K: usize>(rng: &mut R, alpha: f64) -> [f64; K] {
    let mut logs = [0.0; K];
    for l in logs.iter_mut() {
        *l = ln_gamma_sample(rng, alpha);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; K];
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logs) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// Uniform on the open interval (0, 1).
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Normal(mean, std) truncated below at `floor` by resampling.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, floor: f64) -> f64 {
    for _ in 0..64 {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + std * z;
        if x >= floor {
            return x;
        }
    }
    floor
}
