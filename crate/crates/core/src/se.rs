//! Deterministic state evolution for the Z2 iteration, its fixed point, and
//! samples from the idealized joint law of the iterates.
//!
//! The scalar recursion is
//!   gamma_{s+1} = lambda^2 E[tanh^2(gamma_s + sqrt(gamma_s) G)] + chi gamma0,
//! with overlaps q_s = (gamma_{s+1} - chi gamma0)/lambda^2 and the closed-form
//! field covariance K_{st} = gamma_{s^t} - chi gamma0. The closed form is
//! exact for chi = 1; for chi = 0 the first iterate's side noise is
//! independent of the later fields and the closed form overstates the
//! off-diagonal correlations, which is why [`inductive_covariance`] (the
//! general-recursion covariance) is also provided and cross-checked.

use crate::error::{Error, Result};
use crate::linalg;
use crate::quad::{tanh_moment, GaussHermite};
use crate::rng::sub_rng;
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_QUAD_ORDER: usize = 200;

/// State-evolution outputs for `k` iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeCurve {
    pub lambda: f64,
    pub gamma0: f64,
    /// Side-information indicator, 0 or 1.
    pub chi: f64,
    /// gamma_0 .. gamma_k (length k + 1).
    pub gammas: Vec<f64>,
    /// q_0 .. q_{k-1}, with q_s = (gamma_{s+1} - chi gamma0) / lambda^2.
    pub overlaps: Vec<f64>,
    /// K_{st} = gamma_{s^t} - chi gamma0, 1-based s,t stored at [s-1, t-1].
    pub k_mat: Array2<f64>,
    /// Gamma_{st} = gamma_{s^t}.
    pub gamma_mat: Array2<f64>,
    pub quadrature_order: usize,
}

impl SeCurve {
    pub fn k(&self) -> usize {
        self.gammas.len() - 1
    }

    /// Flat per-iteration report rows (s, gamma_s, q_s).
    pub fn rows(&self) -> Vec<(usize, f64, f64)> {
        (0..self.k())
            .map(|s| (s, self.gammas[s], self.overlaps[s]))
            .collect()
    }
}

/// Constants at the nontrivial fixed point of the recursion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FixedPointConstants {
    pub gamma_inf: f64,
    pub q_inf: f64,
    pub b_inf: f64,
    /// K_inf = gamma_inf - chi gamma0 = lambda^2 q_inf.
    pub k_inf: f64,
    /// |gamma_inf - lambda^2 E[tanh^2] - chi gamma0| after the solve.
    pub residual: f64,
}

/// Run the scalar recursion for `k` steps and assemble the covariance data.
pub fn run_recursion(
    lambda: f64,
    gamma0: f64,
    chi: f64,
    k: usize,
    order: usize,
) -> Result<SeCurve> {
    validate_chi(chi)?;
    if k < 1 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    if !(lambda > 0.0) || gamma0 < 0.0 {
        return Err(Error::InvalidParam(format!(
            "need lambda > 0 and gamma0 >= 0, got ({lambda}, {gamma0})"
        )));
    }
    let mut gammas = Vec::with_capacity(k + 1);
    gammas.push(gamma0);
    for s in 0..k {
        let g = gammas[s];
        let next = lambda * lambda * tanh_moment(g, 2, order) + chi * gamma0;
        if !next.is_finite() {
            return Err(Error::Numerical(format!("gamma_{} non-finite", s + 1)));
        }
        gammas.push(next);
    }
    let overlaps: Vec<f64> = (0..k)
        .map(|s| (gammas[s + 1] - chi * gamma0) / (lambda * lambda))
        .collect();
    let mut k_mat = Array2::zeros((k, k));
    let mut gamma_mat = Array2::zeros((k, k));
    for s in 1..=k {
        for t in 1..=k {
            let g = gammas[s.min(t)];
            gamma_mat[(s - 1, t - 1)] = g;
            k_mat[(s - 1, t - 1)] = g - chi * gamma0;
        }
    }
    Ok(SeCurve {
        lambda,
        gamma0,
        chi,
        gammas,
        overlaps,
        k_mat,
        gamma_mat,
        quadrature_order: order,
    })
}

fn validate_chi(chi: f64) -> Result<()> {
    if chi == 0.0 || chi == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("chi must be 0 or 1, got {chi}")))
    }
}

/// Solve gamma = lambda^2 E[tanh^2(gamma + sqrt(gamma) G)] + chi gamma0 for
/// the nontrivial root.
///
/// Damped iteration (factor 0.5) from the upper bound lambda^2 + gamma0;
/// bisection fallback on the bracketing interval if it has not reached the
/// target residual after 500 steps. The map is increasing and concave, so
/// both routes are globally safe in the admissible regimes.
pub fn solve_fixed_point(
    lambda: f64,
    gamma0: f64,
    chi: f64,
    order: usize,
) -> Result<FixedPointConstants> {
    validate_chi(chi)?;
    if chi == 0.0 && lambda <= 1.0 {
        return Err(Error::Regime(format!(
            "for chi = 0 only the trivial fixed point exists when lambda <= 1 (got lambda = {lambda})"
        )));
    }
    if chi == 1.0 && !(lambda > 0.0 && gamma0 > 0.0) {
        return Err(Error::Regime(format!(
            "for chi = 1 need lambda > 0 and gamma0 > 0 (got lambda = {lambda}, gamma0 = {gamma0})"
        )));
    }
    let rhs = |g: f64| lambda * lambda * tanh_moment(g, 2, order) + chi * gamma0;
    let mut gamma = lambda * lambda + gamma0;
    let tol = 1e-12;
    let mut converged = false;
    for _ in 0..500 {
        let next = 0.5 * gamma + 0.5 * rhs(gamma);
        if (next - gamma).abs() <= 0.25 * tol {
            gamma = next;
            converged = true;
            break;
        }
        gamma = next;
    }
    if !converged || (gamma - rhs(gamma)).abs() > tol {
        // Bisection on g(x) = x - rhs(x); the nontrivial root is the unique
        // sign change on (lower, lambda^2 + gamma0].
        let mut lo = if chi == 1.0 { gamma0 + 1e-12 } else { 1e-10 };
        let mut hi = lambda * lambda + gamma0 + 1e-9;
        let g = |x: f64| x - rhs(x);
        if g(lo) > 0.0 {
            lo = 1e-10;
        }
        if !(g(lo) < 0.0 && g(hi) > 0.0) {
            return Err(Error::Numerical(format!(
                "fixed-point bracket failed: g({lo}) = {}, g({hi}) = {}",
                g(lo),
                g(hi)
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        gamma = 0.5 * (lo + hi);
    }
    let q_inf = tanh_moment(gamma, 2, order);
    let b_inf = tanh_moment(gamma, 4, order);
    let residual = (gamma - lambda * lambda * q_inf - chi * gamma0).abs();
    if residual > 1e-10 {
        return Err(Error::Numerical(format!(
            "fixed-point residual {residual:.3e} exceeds 1e-10"
        )));
    }
    Ok(FixedPointConstants {
        gamma_inf: gamma,
        q_inf,
        b_inf,
        k_inf: gamma - chi * gamma0,
        residual,
    })
}

/// Draws from the idealized joint law of the AMP iterates (state evolution
/// augmented with the independent comparison noise Xi).
///
/// Rows are i.i.d.: Gbreve ~ N(0, K), G0, Xi ~ N(0,1) independent, and
/// M_s = tanh(gamma_s + 1{s>0} G_s + c_s sqrt(gamma0) G0), where c_0 = 1 and
/// c_s = chi for s >= 1: the first iterate always carries the side noise
/// (it is tanh of the side information itself), later iterates only when the
/// side information re-enters the iteration.
#[derive(Debug, Clone)]
pub struct SeSample {
    /// N x k matrix of M_0..M_{k-1} draws.
    pub m: Array2<f64>,
    /// N x k matrix of G_1..G_k draws.
    pub g: Array2<f64>,
    pub g0: Array1<f64>,
    pub xi: Array1<f64>,
}

pub fn sample_se(curve: &SeCurve, count: usize, seed: u64) -> Result<SeSample> {
    let k = curve.k();
    let chol = linalg::cholesky(curve.k_mat.view())
        .map_err(|e| Error::Degenerate(format!("K is not positive definite: {e}")))?;
    let mut rng = sub_rng(seed, "se-sample");
    let mut m = Array2::zeros((count, k));
    let mut g = Array2::zeros((count, k));
    let mut g0 = Array1::zeros(count);
    let mut xi = Array1::zeros(count);
    let sqrt_g0 = curve.gamma0.sqrt();
    let mut z = vec![0.0f64; k];
    for i in 0..count {
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(&mut rng);
        }
        let w0: f64 = StandardNormal.sample(&mut rng);
        let x: f64 = StandardNormal.sample(&mut rng);
        g0[i] = w0;
        xi[i] = x;
        for s in 0..k {
            let mut acc = 0.0;
            for j in 0..=s {
                acc += chol[(s, j)] * z[j];
            }
            g[(i, s)] = acc;
        }
        for s in 0..k {
            let side = if s == 0 { 1.0 } else { curve.chi };
            let field = if s == 0 { 0.0 } else { g[(i, s - 1)] };
            m[(i, s)] = (curve.gammas[s] + field + side * sqrt_g0 * w0).tanh();
        }
    }
    Ok(SeSample { m, g, g0, xi })
}

/// E[tanh^{pa}(a + A) tanh^{pb}(b + B)] with (A, B) centered jointly Gaussian,
/// Var A = va, Var B = vb, Cov = c.
pub fn tanh_pair_expectation(
    a: f64,
    b: f64,
    va: f64,
    vb: f64,
    c: f64,
    pa: u32,
    pb: u32,
    order: usize,
) -> Result<f64> {
    if va <= 0.0 {
        return Err(Error::InvalidParam("need Var(A) > 0".into()));
    }
    let resid = vb - c * c / va;
    if resid < -1e-12 {
        return Err(Error::InvalidParam("covariance not PSD".into()));
    }
    let rule = GaussHermite::cached(order);
    let s1 = va.sqrt();
    let s2 = resid.max(0.0).sqrt();
    let c1 = c / s1;
    let mut acc = 0.0;
    for (&x1, &w1) in rule.nodes.iter().zip(rule.weights.iter()) {
        let ta = (a + s1 * x1).tanh().powi(pa as i32);
        let mut inner = 0.0;
        for (&x2, &w2) in rule.nodes.iter().zip(rule.weights.iter()) {
            let tb = (b + c1 * x1 + s2 * x2).tanh().powi(pb as i32);
            inner += w2 * tb;
        }
        acc += w1 * ta * inner;
    }
    Ok(acc)
}

/// Cross moment lambda^2 E[M_s M_t] under the closed-form law (fields drawn
/// with covariance K). Defined for 1 <= s,t (both iterates past the
/// initialization); equals gamma_{s^t + 1} - chi gamma0 there.
pub fn cross_moment(curve: &SeCurve, s: usize, t: usize, order: usize) -> Result<f64> {
    if s < 1 || t < 1 || s > curve.k() - 1 || t > curve.k() - 1 {
        return Err(Error::InvalidParam(
            "cross_moment needs 1 <= s,t <= k-1".into(),
        ));
    }
    // Arguments A_s = G_s + chi sqrt(gamma0) G0 have Var = gamma_s and
    // Cov(A_s, A_t) = K_{st} + chi^2 gamma0 = gamma_{s^t}.
    let (va, vb) = (curve.gammas[s], curve.gammas[t]);
    let c = curve.gammas[s.min(t)];
    let v = tanh_pair_expectation(curve.gammas[s], curve.gammas[t], va, vb, c, 1, 1, order)?;
    Ok(curve.lambda * curve.lambda * v)
}

/// Field covariance from the general state-evolution recursion
/// K_{s+1,t+1} = lambda^2 E[M_s M_t], carried out by 2-d quadrature with the
/// covariances built inductively instead of taken from the closed form.
///
/// For chi = 1 this reproduces the closed form; for chi = 0 it differs off
/// the diagonal (the initialization noise never re-enters the iteration) and
/// is the covariance the simulated iterates actually exhibit.
pub fn inductive_covariance(
    lambda: f64,
    gamma0: f64,
    chi: f64,
    k: usize,
    order: usize,
) -> Result<Array2<f64>> {
    validate_chi(chi)?;
    if gamma0 <= 0.0 {
        return Err(Error::InvalidParam("inductive covariance needs gamma0 > 0".into()));
    }
    let curve = run_recursion(lambda, gamma0, chi, k, order)?;
    let l2 = lambda * lambda;
    let mut kk = Array2::zeros((k, k));
    for s in 1..=k {
        kk[(s - 1, s - 1)] = curve.gammas[s] - chi * gamma0;
    }
    // Argument variance of iterate s's channel: gamma_s for every s >= 0
    // (the s = 0 argument is the side information itself).
    let arg_var = |s: usize| curve.gammas[s];
    // Cross-covariance of the channel arguments of iterates s < t.
    // For s = 0 the argument noise is sqrt(gamma0) G0, shared with later
    // iterates only through the chi-term; for s >= 1 it is
    // G_s + chi sqrt(gamma0) G0 with Cov(G_s, G_t) = K_{st}.
    for t in 2..=k {
        // row 1: E[G_1 G_t] = lambda^2 E[M_0 M_{t-1}]
        let c0 = chi * gamma0;
        let v = tanh_pair_expectation(
            curve.gammas[0],
            curve.gammas[t - 1],
            arg_var(0),
            arg_var(t - 1),
            c0,
            1,
            1,
            order,
        )?;
        let val = l2 * v;
        kk[(0, t - 1)] = val;
        kk[(t - 1, 0)] = val;
    }
    for s in 2..=k {
        for t in (s + 1)..=k {
            let c = kk[(s - 2, t - 2)] + chi * gamma0;
            let v = tanh_pair_expectation(
                curve.gammas[s - 1],
                curve.gammas[t - 1],
                arg_var(s - 1),
                arg_var(t - 1),
                c,
                1,
                1,
                order,
            )?;
            let val = l2 * v;
            kk[(s - 1, t - 1)] = val;
            kk[(t - 1, s - 1)] = val;
        }
    }
    Ok(kk)
}

/// A scalar denoiser f_s acting on the field history (g_0, ..., g_s).
pub type Denoiser = Box<dyn Fn(&[f64]) -> f64 + Sync + Send>;

/// Monte-Carlo state evolution for a generic denoiser sequence: covariance
/// K_{s+1,t+1} = E[f_s f_t] built inductively over `count` draws, and Onsager
/// coefficients b_{sj} = E[d f_s / d G_j] by central finite differences
/// (step 1e-5) averaged over the draws. Entry [s, j] of the returned matrix
/// holds b_{sj} for 1 <= j <= s.
pub fn generic_se(
    denoisers: &[Denoiser],
    count: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let k = denoisers.len();
    if k < 1 {
        return Err(Error::InvalidParam("need at least one denoiser".into()));
    }
    let mut rng = sub_rng(seed, "generic-se");
    let g0: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    // fields[j][i]: sample i of G_{j+1}
    let mut fields: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut m_cache: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut k_mat = Array2::<f64>::zeros((k, k));
    let mut b_mat = Array2::<f64>::zeros((k, k));
    let h = 1e-5;
    let mut history = vec![0.0f64; k + 1];
    for s in 0..k {
        // Evaluate M_s and Onsager derivatives on the current samples.
        let mut ms = vec![0.0f64; count];
        let mut bs = vec![0.0f64; s];
        for i in 0..count {
            history[0] = g0[i];
            for (j, fj) in fields.iter().enumerate().take(s) {
                history[j + 1] = fj[i];
            }
            let hs = &mut history[..s + 1];
            ms[i] = denoisers[s](hs);
            for j in 1..=s {
                let orig = hs[j];
                hs[j] = orig + h;
                let up = denoisers[s](hs);
                hs[j] = orig - h;
                let dn = denoisers[s](hs);
                hs[j] = orig;
                bs[j - 1] += (up - dn) / (2.0 * h);
            }
        }
        for j in 1..=s {
            b_mat[(s, j)] = bs[j - 1] / count as f64;
        }
        // K row s+1 from sample moments.
        for t in 0..=s {
            let dot: f64 = ms.iter().zip(m_cache.get(t).unwrap_or(&ms)).map(|(a, b)| a * b).sum();
            let v = dot / count as f64;
            k_mat[(s, t)] = v;
            k_mat[(t, s)] = v;
        }
        m_cache.push(ms);
        if s + 1 < k {
            // Extend the joint field sample to G_{s+2}... : draw G_{s+1}
            // conditionally on (G_1..G_s) to match the K block built so far.
            let dim = s + 1;
            let kb = k_mat.slice(ndarray::s![..s, ..s]).to_owned();
            let kv = k_mat.slice(ndarray::s![s, ..s]).to_owned();
            let (coef, resid_var) = if s == 0 {
                (Array1::zeros(0), k_mat[(0, 0)])
            } else {
                let coef = linalg::solve_spd(kb.view(), kv.view()).map_err(|e| {
                    Error::Degenerate(format!(
                        "intermediate K_(<= {dim}) not positive definite: {e}"
                    ))
                })?;
                let rv = k_mat[(s, s)] - kv.dot(&coef);
                (coef, rv)
            };
            if resid_var < -1e-10 {
                return Err(Error::Degenerate(format!(
                    "conditional variance {resid_var:.3e} negative at step {s}"
                )));
            }
            let sd = resid_var.max(0.0).sqrt();
            let mut new_field = vec![0.0f64; count];
            for (i, nf) in new_field.iter_mut().enumerate() {
                let mut mean = 0.0;
                for (j, fj) in fields.iter().enumerate().take(s) {
                    mean += coef[j] * fj[i];
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                *nf = mean + sd * z;
            }
            fields.push(new_field);
        }
    }
    Ok((k_mat, b_mat))
}

/// The Z2 denoiser sequence in general-AMP form: f_s(g_0..g_s) =
/// tanh(gamma_s + 1{s>0} g_s + c_s sqrt(gamma0) g_0), matching the scaling
/// in which the fields carry covariance K.
pub fn z2_denoisers(curve: &SeCurve) -> Vec<Denoiser> {
    let k = curve.k();
    let mut out: Vec<Denoiser> = Vec::with_capacity(k);
    for s in 0..k {
        let gamma_s = curve.gammas[s];
        let side = if s == 0 { 1.0 } else { curve.chi } * curve.gamma0.sqrt();
        let lambda = curve.lambda;
        out.push(Box::new(move |hist: &[f64]| {
            let field = if s == 0 { 0.0 } else { hist[s] };
            lambda * (gamma_s + field + side * hist[0]).tanh()
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    use crate::quad::gaussian_expectation;

    const ORD: usize = DEFAULT_QUAD_ORDER;

    #[test]
    fn zero_side_information_pins_recursion_at_zero() {
        let c = run_recursion(1.7, 0.0, 0.0, 6, ORD).unwrap();
        assert!(c.gammas.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ams_recursion_is_strictly_increasing_and_converges_upward() {
        let c = run_recursion(1.5, 0.2, 1.0, 25, ORD).unwrap();
        for s in 0..c.k() {
            assert!(c.gammas[s + 1] > c.gammas[s], "not increasing at {s}");
        }
        let fp = solve_fixed_point(1.5, 0.2, 1.0, ORD).unwrap();
        assert!(c.gammas[25] <= fp.gamma_inf + 1e-9);
        assert!((c.gammas[25] - fp.gamma_inf).abs() < 1e-3);
        // |gamma_k - gamma_inf| decreasing in k
        for s in 1..25 {
            assert!(
                (c.gammas[s + 1] - fp.gamma_inf).abs() <= (c.gammas[s] - fp.gamma_inf).abs() + 1e-15
            );
        }
    }

    #[test]
    fn first_step_matches_independent_high_order_quadrature() {
        let c = run_recursion(1.5, 0.2, 1.0, 12, ORD).unwrap();
        // independent 400-node quadrature of lambda^2 E[tanh^2(0.2 + sqrt(0.2) G)] + 0.2
        let oracle = 1.5 * 1.5
            * gaussian_expectation(|x| x.tanh() * x.tanh(), 0.2, 0.2, 400).unwrap()
            + 0.2;
        assert_abs_diff_eq!(c.gammas[1], oracle, epsilon = 1e-12);
    }

    #[test]
    fn fixed_point_matches_bisection_oracle() {
        // independent bisection on gamma - lambda^2 E[tanh^2] with 400 nodes
        let lambda = 1.5f64;
        let rhs = |g: f64| {
            lambda * lambda * gaussian_expectation(|x| x.tanh() * x.tanh(), g, g, 400).unwrap()
        };
        let (mut lo, mut hi) = (1e-9, lambda * lambda + 1e-6);
        assert!(lo - rhs(lo) < 0.0 && hi - rhs(hi) > 0.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid - rhs(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let fp = solve_fixed_point(lambda, 0.0, 0.0, 400).unwrap();
        assert_abs_diff_eq!(fp.gamma_inf, oracle, epsilon = 1e-10);
    }

    #[test]
    fn small_lambda_limit_returns_gamma0() {
        let fp = solve_fixed_point(1e-3, 0.3, 1.0, ORD).unwrap();
        assert!((fp.gamma_inf - 0.3).abs() < 2e-6, "gamma_inf = {}", fp.gamma_inf);
    }

    #[test]
    fn trivial_regime_is_rejected() {
        assert!(matches!(
            solve_fixed_point(0.9, 0.0, 0.0, ORD),
            Err(Error::Regime(_))
        ));
        assert!(solve_fixed_point(0.5, 0.0, 1.0, ORD).is_err());
    }

    #[test]
    fn fixed_point_identities_hold_on_the_acceptance_grids() {
        let mut cases = vec![];
        for lam in [1.1, 1.5, 2.0, 3.0] {
            cases.push((lam, 0.1, 0.0));
        }
        for lam in [0.5, 0.9, 1.5] {
            for g0 in [0.1, 0.3] {
                cases.push((lam, g0, 1.0));
            }
        }
        for (lam, g0, chi) in cases {
            let fp = solve_fixed_point(lam, g0, chi, ORD).unwrap();
            assert!(fp.residual <= 1e-10);
            assert!(lam * lam * (1.0 - fp.q_inf) < 1.0, "lambda^2(1-q) >= 1 at {lam}");
            let e1 = tanh_moment(fp.gamma_inf, 1, ORD);
            let e3 = tanh_moment(fp.gamma_inf, 3, ORD);
            assert!((fp.q_inf - e1).abs() <= 1e-8, "q identity at {lam}: {}", (fp.q_inf - e1).abs());
            assert!((fp.b_inf - e3).abs() <= 1e-8, "b identity at {lam}: {}", (fp.b_inf - e3).abs());
            assert!(0.0 < fp.b_inf && fp.b_inf < fp.q_inf && fp.q_inf < 1.0);
            assert_abs_diff_eq!(fp.k_inf, lam * lam * fp.q_inf, epsilon = 1e-9);
        }
    }

    #[test]
    fn covariances_pass_cholesky_up_to_k30() {
        for (chi, g0) in [(0.0, 0.3), (1.0, 0.3)] {
            let c = run_recursion(1.5, g0, chi, 30, ORD).unwrap();
            assert!(linalg::cholesky(c.k_mat.view()).is_ok());
            assert!(linalg::cholesky(c.gamma_mat.view()).is_ok());
        }
    }

    #[test]
    fn cross_moment_identity_both_readings() {
        // lambda^2 E[M_s M_t] = gamma_{s^t+1} - chi gamma0 for 1 <= s < t,
        // and equals both the tanh and tanh^2 one-dimensional readings.
        for (chi, g0) in [(0.0, 0.3), (1.0, 0.3)] {
            let c = run_recursion(1.5, g0, chi, 8, ORD).unwrap();
            for (s, t) in [(1usize, 2usize), (1, 5), (3, 6), (2, 2)] {
                let v = cross_moment(&c, s, t, 160).unwrap();
                let gmin = c.gammas[s.min(t)];
                let want = c.gammas[s.min(t) + 1] - chi * g0;
                assert!((v - want).abs() < 1e-6, "cross moment ({s},{t}) chi={chi}: {v} vs {want}");
                let l2 = c.lambda * c.lambda;
                let r1 = l2 * tanh_moment(gmin, 1, ORD);
                let r2 = l2 * tanh_moment(gmin, 2, ORD);
                assert!((v - r1).abs() < 1e-6 && (v - r2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inductive_covariance_matches_closed_form_for_ams_only() {
        let k = 6;
        let c = run_recursion(1.5, 0.3, 1.0, k, ORD).unwrap();
        let ind = inductive_covariance(1.5, 0.3, 1.0, k, 120).unwrap();
        let dev = (&ind - &c.k_mat).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(dev < 1e-6, "AMS inductive vs closed form: {dev}");

        let c0 = run_recursion(1.5, 0.3, 0.0, k, ORD).unwrap();
        let ind0 = inductive_covariance(1.5, 0.3, 0.0, k, 120).unwrap();
        let dev_diag: f64 = (0..k).map(|i| (ind0[(i, i)] - c0.k_mat[(i, i)]).abs()).fold(0.0, f64::max);
        assert!(dev_diag < 1e-9, "diagonals must agree: {dev_diag}");
        let dev_off = (&ind0 - &c0.k_mat).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(
            dev_off > 0.25,
            "for chi = 0 the closed form overstates off-diagonal correlations; got max dev {dev_off}"
        );
        // and the product structure of the first row
        let q0 = c0.overlaps[0];
        let l2 = 1.5f64 * 1.5;
        for t in 2..=k {
            let qt = tanh_moment(c0.gammas[t - 1], 1, ORD);
            assert!((ind0[(0, t - 1)] - l2 * q0 * qt).abs() < 1e-6);
        }
    }

    #[test]
    fn se_sample_moments_match_curve() {
        let c = run_recursion(1.5, 0.3, 1.0, 5, ORD).unwrap();
        let n = 100_000;
        let s = sample_se(&c, n, 7).unwrap();
        assert!(s.m.iter().all(|&v| v > -1.0 && v < 1.0));
        // empirical covariance of the fields vs K
        let k = c.k();
        let bound = 5.0 * c.k_mat.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
            * (n as f64).powf(-0.5)
            * (2.0 * (k as f64).ln()).sqrt();
        for a in 0..k {
            for b in 0..k {
                let emp: f64 =
                    s.g.column(a).dot(&s.g.column(b)) / n as f64;
                assert!(
                    (emp - c.k_mat[(a, b)]).abs() <= bound,
                    "cov({a},{b}) = {emp} vs {} (bound {bound})",
                    c.k_mat[(a, b)]
                );
            }
        }
        // E[M_s^2] ~ q_s
        for s_idx in 0..k {
            let emp: f64 = s.m.column(s_idx).mapv(|v| v * v).mean().unwrap();
            assert!(
                (emp - c.overlaps[s_idx]).abs() < 0.01,
                "E[M_{s_idx}^2] = {emp} vs q = {}",
                c.overlaps[s_idx]
            );
        }
    }

    #[test]
    fn generic_se_identity_denoiser_propagates() {
        // f_s = last coordinate: K_{s+1,s+1} = K_{s,s} = ... = 1, b_{ss} = 1.
        let k = 4;
        let mut dens: Vec<Denoiser> = Vec::new();
        for s in 0..k {
            dens.push(Box::new(move |h: &[f64]| h[s]));
        }
        let (km, bm) = generic_se(&dens, 40_000, 3).unwrap();
        for s in 0..k {
            assert!((km[(s, s)] - 1.0).abs() < 0.03, "K[{s},{s}] = {}", km[(s, s)]);
        }
        for s in 1..k {
            assert!((bm[(s, s)] - 1.0).abs() < 1e-6);
            for j in 1..s {
                assert!(bm[(s, j)].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn generic_se_z2_denoisers_match_inductive_covariance() {
        for (chi, tol) in [(1.0, 0.05), (0.0, 0.05)] {
            let k = 4;
            let curve = run_recursion(1.5, 0.3, chi, k, ORD).unwrap();
            let dens = z2_denoisers(&curve);
            let (km, bm) = generic_se(&dens, 200_000, 11).unwrap();
            let ind = inductive_covariance(1.5, 0.3, chi, k, 120).unwrap();
            let dev = (&km - &ind).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(dev < tol, "chi={chi}: generic SE vs inductive covariance dev {dev}");
            // Onsager: b_{ss} = lambda E[1 - M_s^2] = lambda (1 - q_s)
            for s in 1..k {
                let want = curve.lambda * (1.0 - curve.overlaps[s]);
                assert!((bm[(s, s)] - want).abs() < 0.02, "b[{s}{s}] = {} vs {want}", bm[(s, s)]);
                for j in 1..s {
                    assert!(bm[(s, j)].abs() < 1e-4, "b[{s}{j}] should vanish");
                }
            }
        }
    }
}
