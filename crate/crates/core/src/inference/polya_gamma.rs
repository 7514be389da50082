//! Exact sampler for Pólya-Gamma PG(1, z) variates (Devroye's alternating
//! series method with a truncation point of 0.64).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;

const TRUNC: f64 = 0.64;

/// log Φ(x) for the standard normal CDF.
fn ln_norm_cdf(x: f64) -> f64 {
    if x < -30.0 {
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln()
    } else {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    }
}

/// Coefficient a_n(x) of the alternating series for the J*(1, z) density.
fn series_coef(n: usize, x: f64) -> f64 {
    let k = n as f64 + 0.5;
    if x > TRUNC {
        PI * k * (-0.5 * k * k * PI * PI * x).exp()
    } else {
        (2.0 / PI / x).powf(1.5) * PI * k * (-2.0 * k * k / x).exp()
    }
}

/// Probability of proposing from the exponential tail.
fn tail_mass(z: f64) -> f64 {
    let t = TRUNC;
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let rt = (1.0 / t).sqrt();
    let b = rt * (t * z - 1.0);
    let a = -rt * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + ln_norm_cdf(b);
    let xa = x0 + z + ln_norm_cdf(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse Gaussian with mean 1/z and shape 1, truncated to (0, TRUNC).
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    let mu = 1.0 / z;
    if mu > t {
        loop {
            let (mut e1, mut e2): (f64, f64) = (Exp1.sample(rng), Exp1.sample(rng));
            while e1 * e1 > 2.0 * e2 / t {
                e1 = Exp1.sample(rng);
                e2 = Exp1.sample(rng);
            }
            let r = 1.0 + e1 * t;
            let x = t / (r * r);
            let accept = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= accept {
                return x;
            }
        }
    } else {
        let mut x = t + 1.0;
        while x >= t {
            let n: f64 = StandardNormal.sample(rng);
            let y = n * n;
            let mu_y = mu * y;
            x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
        }
        x
    }
}

/// One draw from PG(1, z).
pub fn sample_pg1<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let z = 0.5 * z.abs();
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let p_tail = tail_mass(z);
    loop {
        let x = if rng.random::<f64>() < p_tail {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Mean of PG(1, z).
pub fn pg1_mean(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        0.25 - z * z / 48.0
    } else {
        (0.5 * z).tanh() / (2.0 * z)
    }
}

/// Variance of PG(1, z).
pub fn pg1_variance(z: f64) -> f64 {
    let z = z.abs();
    if z < 1e-3 {
        1.0 / 24.0 - z * z / 240.0
    } else {
        let sech = 1.0 / (0.5 * z).cosh();
        (z.sinh() - z) * sech * sech / (4.0 * z * z * z)
    }
}
