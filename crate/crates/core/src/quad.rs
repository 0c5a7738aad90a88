//! Gauss–Hermite quadrature against the standard normal weight.
//!
//! Nodes and weights come from the Golub–Welsch construction: eigenvalues of
//! the Jacobi matrix of the (probabilists') Hermite recurrence, with weights
//! given by the squared first components of the eigenvectors. All paper
//! expectations of the form E[f(mean + sqrt(var) G)], G ~ N(0,1), funnel
//! through [`gaussian_expectation`].

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// One quadrature rule: `expect(f)` approximates E[f(G)] for G ~ N(0,1).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 2, "quadrature order must be at least 2");
        // Jacobi matrix of He_n: zero diagonal, off-diagonal sqrt(j).
        let mut d = vec![0.0; order];
        let mut e: Vec<f64> = (1..order).map(|j| (j as f64).sqrt()).collect();
        e.push(0.0);
        let mut z = vec![0.0; order];
        z[0] = 1.0;
        tridiag_eig_first_row(&mut d, &mut e, &mut z);
        let mut pairs: Vec<(f64, f64)> = d.iter().zip(z.iter()).map(|(&x, &c)| (x, c * c)).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Shared, cached rule for the given order.
    pub fn cached(order: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().unwrap();
        map.entry(order)
            .or_insert_with(|| Arc::new(GaussHermite::new(order)))
            .clone()
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// E[f(G)], G ~ N(0,1).
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// E[f(mean + sqrt(variance) G)] by Gauss–Hermite quadrature.
///
/// Exact for polynomial integrands of degree < 2*order when variance > 0;
/// degenerates to `f(mean)` at variance = 0. Non-finite integrand values at
/// any node are an error.
pub fn gaussian_expectation<F: Fn(f64) -> f64>(
    f: F,
    mean: f64,
    variance: f64,
    order: usize,
) -> Result<f64> {
    if variance < 0.0 {
        return Err(Error::InvalidParam(format!(
            "variance must be nonnegative, got {variance}"
        )));
    }
    if variance == 0.0 {
        let v = f(mean);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "integrand non-finite at mean {mean}"
            )));
        }
        return Ok(v);
    }
    let rule = GaussHermite::cached(order);
    let sd = variance.sqrt();
    let mut acc = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let v = f(mean + sd * x);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "integrand non-finite at node {}",
                mean + sd * x
            )));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// sech^2(x) = 1 - tanh^2(x), computed without cancellation at saturation.
#[inline]
pub fn sech2(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    let d = 1.0 + e;
    4.0 * e / (d * d)
}

/// 16-point Gauss–Legendre rule on [-1, 1], nodes by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre_16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 16usize;
        let mut xs = vec![0.0; n];
        let mut ws = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0f64, x);
                for j in 2..=n {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            xs[i] = x;
            ws[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (xs, ws)
    })
}

/// E[f(mean + sqrt(variance) G)] by composite Gauss–Legendre panels over
/// twelve standard deviations.
///
/// Panels are sized to resolve both the Gaussian scale and unit-width
/// features (the tanh saturation boundary), which Gauss–Hermite misses when
/// the boundary sits far into the Gaussian tail. `order` scales the panel
/// density; the default density (order = 200) already reaches near machine
/// precision for the channel integrands used in this crate.
pub fn channel_expectation<F: Fn(f64) -> f64>(
    f: F,
    mean: f64,
    variance: f64,
    order: usize,
) -> Result<f64> {
    if variance < 0.0 {
        return Err(Error::InvalidParam(format!(
            "variance must be nonnegative, got {variance}"
        )));
    }
    if variance == 0.0 {
        let v = f(mean);
        if !v.is_finite() {
            return Err(Error::Numerical("integrand non-finite".into()));
        }
        return Ok(v);
    }
    let sd = variance.sqrt();
    let width = (sd.min(1.0) / 2.0) * (200.0 / order as f64).min(1.0);
    let half_span = 12.0 * sd;
    let panels = ((2.0 * half_span / width).ceil() as usize).max(8);
    let (xs, ws) = gauss_legendre_16();
    let lo = mean - half_span;
    let step = 2.0 * half_span / panels as f64;
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let mut acc = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * step;
        let c = a + 0.5 * step;
        let h = 0.5 * step;
        for (&x, &w) in xs.iter().zip(ws.iter()) {
            let u = c + h * x;
            let z = (u - mean) / sd;
            let v = f(u);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("integrand non-finite at {u}")));
            }
            acc += w * h * v * norm * (-0.5 * z * z).exp();
        }
    }
    Ok(acc)
}

/// E[tanh^p(gamma + sqrt(gamma) G)] for the scalar Z2 channel at SNR gamma.
pub fn tanh_moment(gamma: f64, p: u32, order: usize) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    channel_expectation(|u| u.tanh().powi(p as i32), gamma, gamma, order)
        .expect("tanh moment integrand is finite")
}

pub(crate) fn tridiag_eig_first_row_pub(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    tridiag_eig_first_row(d, e, z)
}

/// Symmetric tridiagonal eigenvalues by implicit-shift QL, carrying along the
/// first row of the eigenvector matrix (enough to recover quadrature weights).
///
/// `d` holds the diagonal (overwritten with eigenvalues), `e` the
/// off-diagonal in `e[0..n-1]` (`e[n-1]` is scratch), and `z` the first-row
/// accumulator (initialize to the first unit vector).
fn tridiag_eig_first_row(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    let n = d.len();
    if n == 1 {
        return;
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            // Find a negligible off-diagonal element.
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 50, "tridiagonal QL failed to converge");
            // Form implicit shift.
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                // Accumulate the first row of the rotation product.
                f = z[i + 1];
                z[i + 1] = s * z[i] + c * f;
                z[i] = c * z[i] - s * f;
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}
