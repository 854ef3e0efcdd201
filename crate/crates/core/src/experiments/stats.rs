//! Regression and correlation statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{validation, Error, Result};

/// Above this sample size p-values use the normal approximation instead of
/// Student's t.
pub const NORMAL_APPROX_N: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    pub slope_p_value: f64,
    pub r_squared: f64,
    pub pearson_r: f64,
    pub pearson_ci_low: f64,
    pub pearson_ci_high: f64,
    pub pearson_p_value: f64,
    pub spearman_rho: f64,
    pub spearman_p_value: f64,
    pub n: usize,
}

/// Two-sided p-value of a t statistic with `n - 2` degrees of freedom.
pub fn two_sided_p(t: f64, n: usize) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let tail = if n > NORMAL_APPROX_N {
        Normal::standard().sf(t.abs())
    } else {
        StudentsT::new(0.0, 1.0, (n - 2) as f64)
            .expect("at least one degree of freedom")
            .sf(t.abs())
    };
    (2.0 * tail).min(1.0)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

struct Moments {
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    Moments {
        mx,
        my,
        sxx,
        syy,
        sxy,
    }
}

fn pearson(m: &Moments) -> f64 {
    (m.sxy / (m.sxx * m.syy).sqrt()).clamp(-1.0, 1.0)
}

fn correlation_t(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        f64::INFINITY * r.signum()
    } else {
        r * ((n - 2) as f64 / (1.0 - r * r)).sqrt()
    }
}

/// OLS fit of `y` on `x`, Pearson `r` with a Fisher-z 95% interval, and
/// Spearman `rho` on average ranks. All p-values are two-sided.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<CorrelationStats> {
    let n = x.len();
    if n != y.len() {
        return Err(validation("x and y have different lengths"));
    }
    if n < 3 {
        return Err(validation("correlation needs at least three points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(validation("correlation inputs must be finite"));
    }
    let m = moments(x, y);
    if m.sxx == 0.0 || m.syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "x or y has zero variance".into(),
        ));
    }

    let slope = m.sxy / m.sxx;
    let intercept = m.my - slope * m.mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (b - intercept - slope * a).powi(2))
        .sum();
    let slope_std_error = (sse / (n - 2) as f64 / m.sxx).sqrt();
    let r = pearson(&m);
    let slope_p_value = if slope_std_error > 0.0 {
        two_sided_p(slope / slope_std_error, n)
    } else {
        0.0
    };

    let (pearson_ci_low, pearson_ci_high) = if r.abs() >= 1.0 {
        (r, r)
    } else if n <= 3 {
        (-1.0, 1.0)
    } else {
        let z = r.atanh();
        let q = Normal::standard().inverse_cdf(0.975) / ((n - 3) as f64).sqrt();
        ((z - q).tanh().min(r), (z + q).tanh().max(r))
    };

    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&moments(&rx, &ry));

    Ok(CorrelationStats {
        slope,
        intercept,
        slope_std_error,
        slope_p_value,
        r_squared: r * r,
        pearson_r: r,
        pearson_ci_low,
        pearson_ci_high,
        pearson_p_value: two_sided_p(correlation_t(r, n), n),
        spearman_rho: rho,
        spearman_p_value: two_sided_p(correlation_t(rho, n), n),
        n,
    })
}
