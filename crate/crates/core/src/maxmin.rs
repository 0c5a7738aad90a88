//! The scalar max–min convexity certificate: the closed-form inner supremum,
//! the five-variable objective L, its block quadratic representation, the
//! Gaussian integration-by-parts identities, the Schur-complement sign
//! certificate (c1, c2), and the search for a dual value with positive
//! margin.
//!
//! All expectations are over (G, G0) with G ~ N(0, lambda^2 q_inf),
//! G0 ~ N(0,1), and M = tanh(gamma_inf + G + chi sqrt(gamma0) G0); the
//! comparison noise Xi is integrated out analytically. Saturation-sensitive
//! moments are evaluated directly through sech^2 so that quantities like
//! E[(1-M^2)^2] never suffer cancellation.

use crate::error::{Error, Result};
use crate::linalg;
use crate::quad::{channel_expectation, sech2, GaussHermite};
use crate::se::FixedPointConstants;
use ndarray::{array, Array2};
use serde::{Deserialize, Serialize};

/// Fixed-point constants plus quadrature configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalarParams {
    pub lambda: f64,
    pub gamma0: f64,
    pub chi: f64,
    pub gamma_inf: f64,
    pub q_inf: f64,
    pub b_inf: f64,
    pub quadrature_order: usize,
}

impl ScalarParams {
    pub fn from_fixed_point(
        lambda: f64,
        gamma0: f64,
        chi: f64,
        fp: &FixedPointConstants,
        order: usize,
    ) -> Result<Self> {
        let p = ScalarParams {
            lambda,
            gamma0,
            chi,
            gamma_inf: fp.gamma_inf,
            q_inf: fp.q_inf,
            b_inf: fp.b_inf,
            quadrature_order: order,
        };
        let e_m = p.expect(|_, m, _| m)?;
        let e_m3 = p.expect(|_, m, _| m * m * m)?;
        if (p.q_inf - e_m).abs() > 1e-8 || (p.b_inf - e_m3).abs() > 1e-8 {
            return Err(Error::Numerical(format!(
                "fixed-point identity residuals too large: |q - E[M]| = {:.2e}, |b - E[M^3]| = {:.2e}",
                (p.q_inf - e_m).abs(),
                (p.b_inf - e_m3).abs()
            )));
        }
        if !(lambda * lambda * (1.0 - p.q_inf) < 1.0) {
            return Err(Error::Numerical(
                "lambda^2 (1 - q_inf) < 1 fails; fixed point invalid".into(),
            ));
        }
        Ok(p)
    }

    /// E[f(G, M, 1 - M^2)].
    pub fn expect<F: Fn(f64, f64, f64) -> f64>(&self, f: F) -> Result<f64> {
        let var_g = self.lambda * self.lambda * self.q_inf;
        if self.chi == 0.0 {
            // one-dimensional: integrate in u = gamma_inf + g
            channel_expectation(
                |u| f(u - self.gamma_inf, u.tanh(), sech2(u)),
                self.gamma_inf,
                var_g,
                self.quadrature_order,
            )
        } else {
            // outer Gauss-Hermite over G0, inner channel integral over u
            let outer = GaussHermite::cached(self.quadrature_order.clamp(64, 160));
            let sg0 = self.gamma0.sqrt();
            let mut acc = 0.0;
            for (&x0, &w0) in outer.nodes.iter().zip(outer.weights.iter()) {
                let shift = self.gamma_inf + sg0 * x0;
                let inner = channel_expectation(
                    |u| f(u - shift, u.tanh(), sech2(u)),
                    shift,
                    var_g,
                    self.quadrature_order,
                )?;
                acc += w0 * inner;
            }
            Ok(acc)
        }
    }

    /// Weighted expectation E[f(G, M) (1/(1-M^2) - alpha_v)^{-1}], evaluated
    /// in the cancellation-free form E[f s2 / (1 - alpha_v s2)].
    pub fn expect_weighted<F: Fn(f64, f64) -> f64>(&self, f: F, alpha_v: f64) -> Result<f64> {
        check_alpha_v(alpha_v)?;
        self.expect(|g, m, s2| f(g, m) * s2 / (1.0 - alpha_v * s2))
    }
}

fn check_alpha_v(alpha_v: f64) -> Result<()> {
    if alpha_v >= 1.0 {
        return Err(Error::InvalidParam(format!(
            "alpha_v must be < 1 for the inner problem to be strictly concave, got {alpha_v}"
        )));
    }
    Ok(())
}

/// Point on the low-dimensional max–min problem.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaxMinQuery {
    pub rho: f64,
    pub u: f64,
    pub alpha_rho: f64,
    pub alpha_u: f64,
    pub alpha_v: f64,
}

/// Closed form of the inner supremum over the scalar coordinate:
/// sup_v { 2 lambda (rho g / (lambda sqrt(q)) + sqrt(1-rho^2) xi) v
///         - v^2/(1-u^2) + alpha_rho m v / sqrt(q) + alpha_u v + alpha_v v^2 }.
pub fn theta_closed_form(
    g: f64,
    m: f64,
    xi: f64,
    u_point: f64,
    query: &MaxMinQuery,
    params: &ScalarParams,
) -> Result<f64> {
    check_alpha_v(query.alpha_v)?;
    if u_point.abs() >= 1.0 {
        return Err(Error::Domain(format!("|u| must be < 1, got {u_point}")));
    }
    if query.rho.abs() > 1.0 {
        return Err(Error::InvalidParam("need |rho| <= 1".into()));
    }
    let sq = params.q_inf.sqrt();
    let lin = 2.0 * params.lambda
        * (query.rho / (params.lambda * sq) * g + (1.0 - query.rho * query.rho).sqrt() * xi)
        + query.alpha_rho * m / sq
        + query.alpha_u;
    let curv = 1.0 / (1.0 - u_point * u_point) - query.alpha_v;
    Ok(lin * lin / (4.0 * curv))
}

/// L evaluated by quadrature, with the comparison noise integrated out.
pub fn l_value(query: &MaxMinQuery, params: &ScalarParams) -> Result<f64> {
    check_alpha_v(query.alpha_v)?;
    let l2 = params.lambda * params.lambda;
    let q = params.q_inf;
    let sq = q.sqrt();
    let rho = query.rho;
    let theta = params.expect(|g, m, s2| {
        let a = 2.0 * rho * g / sq + query.alpha_rho * m / sq + query.alpha_u;
        let num = 4.0 * l2 * (1.0 - rho * rho) + a * a;
        num * s2 / (4.0 * (1.0 - query.alpha_v * s2))
    })?;
    let one_minus_q = params.expect(|_, _, s2| s2)?;
    Ok(l2 * query.u * query.u - l2 * one_minus_q
        + (1.0 - params.chi) * 2.0 * l2 * q * rho * rho
        - query.alpha_rho * rho
        - query.alpha_u * query.u
        - query.alpha_v
        + theta)
}

/// The three distinct blocks of the 4x4 quadratic representation of L in
/// (rho, u, alpha_rho, alpha_u).
pub fn a_matrices(alpha_v: f64, params: &ScalarParams) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_alpha_v(alpha_v)?;
    let l2 = params.lambda * params.lambda;
    let q = params.q_inf;
    let sq = q.sqrt();
    let ed_g2 = params.expect_weighted(|g, _| g * g / q - l2, alpha_v)?;
    let ed_gm = params.expect_weighted(|g, m| g * m, alpha_v)?;
    let ed_g = params.expect_weighted(|g, _| g, alpha_v)?;
    let ed_m2 = params.expect_weighted(|_, m| m * m, alpha_v)?;
    let ed_m = params.expect_weighted(|_, m| m, alpha_v)?;
    let ed_1 = params.expect_weighted(|_, _| 1.0, alpha_v)?;
    let a11 = array![
        [(1.0 - params.chi) * 2.0 * l2 * q + ed_g2, 0.0],
        [0.0, l2]
    ];
    let a12 = array![
        [-0.5 + ed_gm / (2.0 * q), ed_g / (2.0 * sq)],
        [0.0, -0.5]
    ];
    let a22 = array![
        [0.25 * ed_m2 / q, 0.25 * ed_m / sq],
        [0.25 * ed_m / sq, 0.25 * ed_1]
    ];
    Ok((a11, a12, a22))
}

/// L reconstructed from the block representation; used to cross-check
/// [`l_value`].
pub fn l_from_blocks(query: &MaxMinQuery, params: &ScalarParams) -> Result<f64> {
    let (a11, a12, a22) = a_matrices(query.alpha_v, params)?;
    let x1 = array![query.rho, query.u];
    let x2 = array![query.alpha_rho, query.alpha_u];
    let quad = x1.dot(&a11.dot(&x1)) + 2.0 * x1.dot(&a12.dot(&x2)) + x2.dot(&a22.dot(&x2));
    let l2 = params.lambda * params.lambda;
    let one_minus_q = params.expect(|_, _, s2| s2)?;
    let ed_1 = params.expect_weighted(|_, _| 1.0, query.alpha_v)?;
    Ok(quad - l2 * one_minus_q - query.alpha_v + l2 * ed_1)
}

/// Residuals of the four Gaussian integration-by-parts identities, with the
/// right-hand sides in cancellation-free moment form.
pub fn ibp_identities(params: &ScalarParams) -> Result<[f64; 4]> {
    let l2 = params.lambda * params.lambda;
    let l4 = l2 * l2;
    let q = params.q_inf;
    let e_gm = params.expect(|g, m, _| g * m)?;
    let e_gm2 = params.expect(|g, m, _| g * m * m)?;
    let e_gm3 = params.expect(|g, m, _| g * m * m * m)?;
    let e_g2s2 = params.expect(|g, _, s2| g * g * s2)?;
    let e_s2 = params.expect(|_, _, s2| s2)?;
    let e_ms2 = params.expect(|_, m, s2| m * s2)?;
    let e_m2s2 = params.expect(|_, m, s2| m * m * s2)?;
    let e_s4 = params.expect(|_, _, s2| s2 * s2)?;
    let p_combo = e_s4 - 2.0 * e_m2s2; // 1 - 4q + 3b
    Ok([
        (e_gm - l2 * q * e_s2).abs(),
        (e_gm2 - 2.0 * l2 * q * e_ms2).abs(),
        (e_gm3 - 3.0 * l2 * q * e_m2s2).abs(),
        (e_g2s2 - (l2 * q * e_s2 - 2.0 * l4 * q * q * p_combo)).abs(),
    ])
}

/// Sign certificate from the 2x2 Schur complement of the block matrix at
/// alpha_v = 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchurReport {
    pub c1: f64,
    pub c2: f64,
    /// c1 + q_inf c2 (must be negative together with c2 > 0)
    pub schur_value: f64,
    pub verdict: bool,
    /// max entry deviation between the block Schur complement and the
    /// (c1, c2) closed form, relative to the closed form's scale
    pub block_deviation: f64,
    /// the ordering 1 - 2q + b < 1 - q < 1/lambda^2 behind c2 > 0
    pub chain_holds: bool,
    pub a22_positive_definite: bool,
}

pub fn schur_certificate(params: &ScalarParams) -> Result<SchurReport> {
    let l2 = params.lambda * params.lambda;
    let l4 = l2 * l2;
    let q = params.q_inf;
    // stable moments
    let s2m = params.expect(|_, _, s2| s2)?; // 1 - q
    let m2s2 = params.expect(|_, m, s2| m * m * s2)?; // q - b
    let s4 = params.expect(|_, _, s2| s2 * s2)?; // 1 - 2q + b
    let one_minus_3q_plus_2b = s2m - 2.0 * m2s2;
    let c2 = 1.0 / s4 - l2;
    let c1 = (-s2m + 2.0 * l2 * s4 * s4 - l4 * s4 * s4 * one_minus_3q_plus_2b)
        / ((m2s2 / q) * s4)
        - 2.0 * params.chi * l2 * q;
    let schur_value = c1 + q * c2;
    let chain_holds = s4 < s2m && s2m < 1.0 / l2;
    let (a11, a12, a22) = a_matrices(0.0, params)?;
    let ev22 = linalg::sym_eigvals(a22.view())?;
    let a22_pd = ev22.iter().all(|&v| v > 0.0);
    let a22_inv_a21 = linalg::solve_spd_multi(a22.view(), a12.t())?;
    let block = &a11 - &a12.dot(&a22_inv_a21);
    let sq = q.sqrt();
    let closed = array![[c1, sq * c2], [sq * c2, -c2]];
    let scale = closed.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    let block_deviation = (&block - &closed)
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        / scale;
    Ok(SchurReport {
        c1,
        c2,
        schur_value,
        verdict: c2 > 0.0 && schur_value < 0.0,
        block_deviation,
        chain_holds,
        a22_positive_definite: a22_pd,
    })
}

/// One row of the margin table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginRow {
    pub alpha_v: f64,
    /// -L(0,0;0,0,alpha_v)
    pub margin: f64,
    /// the grid-plus-polish supremum over (rho, u) was attained at the origin
    pub origin_is_sup: bool,
    /// the inner box minimizer stayed strictly interior at every grid point
    pub inner_interior: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginReport {
    pub rows: Vec<MarginRow>,
    pub alpha_v_star: f64,
    pub margin_c: f64,
    /// false when no grid value certifies a positive margin
    pub feasible: bool,
}

/// Exact minimum of the dual quadratic over the box [-bound, bound]^2:
/// min_a { a^T A22 a + 2 y^T A12 a } with y = (rho, u).
fn dual_box_min(
    a12: &Array2<f64>,
    a22: &Array2<f64>,
    y: (f64, f64),
    bound: f64,
) -> ((f64, f64), f64, bool) {
    let b = [
        y.0 * a12[(0, 0)] + y.1 * a12[(1, 0)],
        y.0 * a12[(0, 1)] + y.1 * a12[(1, 1)],
    ];
    let eval = |a: (f64, f64)| {
        a.0 * a.0 * a22[(0, 0)]
            + 2.0 * a.0 * a.1 * a22[(0, 1)]
            + a.1 * a.1 * a22[(1, 1)]
            + 2.0 * (b[0] * a.0 + b[1] * a.1)
    };
    // unconstrained minimizer solves A22 a = -b
    let det = a22[(0, 0)] * a22[(1, 1)] - a22[(0, 1)] * a22[(0, 1)];
    let au = (
        (-b[0] * a22[(1, 1)] + b[1] * a22[(0, 1)]) / det,
        (-b[1] * a22[(0, 0)] + b[0] * a22[(0, 1)]) / det,
    );
    if au.0.abs() <= bound && au.1.abs() <= bound {
        return (au, eval(au), true);
    }
    // edge and corner candidates
    let mut best = ((0.0, 0.0), f64::INFINITY);
    let clamp = |v: f64| v.clamp(-bound, bound);
    for &a0 in &[-bound, bound] {
        let a1 = clamp(-(b[1] + a22[(0, 1)] * a0) / a22[(1, 1)]);
        let cand = (a0, a1);
        let v = eval(cand);
        if v < best.1 {
            best = (cand, v);
        }
    }
    for &a1 in &[-bound, bound] {
        let a0 = clamp(-(b[0] + a22[(0, 1)] * a1) / a22[(0, 0)]);
        let cand = (a0, a1);
        let v = eval(cand);
        if v < best.1 {
            best = (cand, v);
        }
    }
    (best.0, best.1, false)
}

/// Search the dual-variable grid for the largest certified margin.
///
/// For each alpha_v the outer supremum over (rho, u) in [-1,1]^2 of the
/// inner box minimum is evaluated on a 201x201 grid; because L is exactly
/// quadratic the interior-minimizer branch is the Schur form and the grid
/// check is a verification, not an assumption. The dual box is
/// [-10,10]^2 enlarged, when necessary, to cover the unconstrained inner
/// minimizer over the whole primal square (near saturation the A22 block is
/// nearly singular and the minimizer is large; the comparison argument is
/// valid for any compact dual set).
pub fn margin_search(params: &ScalarParams, alpha_v_grid: &[f64]) -> Result<MarginReport> {
    let schur = schur_certificate(params)?;
    if !schur.verdict {
        return Err(Error::Regime(
            "Schur certificate fails; the envelope is not strictly concave near the origin".into(),
        ));
    }
    let l2 = params.lambda * params.lambda;
    let grid_n = 201usize;
    let mut rows = Vec::with_capacity(alpha_v_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &av in alpha_v_grid {
        check_alpha_v(av)?;
        let (a11, a12, a22) = a_matrices(av, params)?;
        let ev22 = linalg::sym_eigvals(a22.view())?;
        if ev22.iter().any(|&v| v <= 0.0) {
            rows.push(MarginRow {
                alpha_v: av,
                margin: f64::NAN,
                origin_is_sup: false,
                inner_interior: false,
            });
            continue;
        }
        let dual_bound = {
            let det = a22[(0, 0)] * a22[(1, 1)] - a22[(0, 1)] * a22[(0, 1)];
            let mut worst = 0.0f64;
            for (rho, u) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let b = [
                    rho * a12[(0, 0)] + u * a12[(1, 0)],
                    rho * a12[(0, 1)] + u * a12[(1, 1)],
                ];
                let a0 = (-b[0] * a22[(1, 1)] + b[1] * a22[(0, 1)]) / det;
                let a1 = (-b[1] * a22[(0, 0)] + b[0] * a22[(0, 1)]) / det;
                worst = worst.max(a0.abs()).max(a1.abs());
            }
            (1.5 * worst).max(10.0)
        };
        let one_minus_q = params.expect(|_, _, s2| s2)?;
        let ed_1 = params.expect_weighted(|_, _| 1.0, av)?;
        let constant = -l2 * one_minus_q - av + l2 * ed_1;
        let origin_value = constant;
        let margin = -origin_value;
        let mut sup = f64::NEG_INFINITY;
        let mut sup_at = (0.0, 0.0);
        let mut interior_everywhere = true;
        for i in 0..grid_n {
            let rho = -1.0 + 2.0 * i as f64 / (grid_n - 1) as f64;
            for j in 0..grid_n {
                let u = -1.0 + 2.0 * j as f64 / (grid_n - 1) as f64;
                let primal =
                    rho * rho * a11[(0, 0)] + 2.0 * rho * u * a11[(0, 1)] + u * u * a11[(1, 1)];
                let (_amin, dual_val, interior) = dual_box_min(&a12, &a22, (rho, u), dual_bound);
                interior_everywhere &= interior;
                let val = primal + dual_val + constant;
                if val > sup {
                    sup = val;
                    sup_at = (rho, u);
                }
            }
        }
        // Polish: on the interior branch the envelope is the Schur-form
        // quadratic, whose stationary point is the origin when the form is
        // negative definite; accept the origin when no grid point beats it.
        let origin_is_sup = sup <= origin_value + 1e-12 * origin_value.abs().max(1.0)
            && sup_at.0.abs() < 1e-9 + 2.0 / (grid_n - 1) as f64
            && sup_at.1.abs() < 1e-9 + 2.0 / (grid_n - 1) as f64;
        rows.push(MarginRow {
            alpha_v: av,
            margin,
            origin_is_sup,
            inner_interior: interior_everywhere,
        });
        if origin_is_sup && margin > best.map(|b| b.1).unwrap_or(f64::NEG_INFINITY) {
            best = Some((av, margin));
        }
    }
    let (alpha_v_star, margin_c) = best.unwrap_or((f64::NAN, f64::NEG_INFINITY));
    Ok(MarginReport {
        rows,
        alpha_v_star,
        margin_c,
        feasible: margin_c > 0.0,
    })
}

/// Default grid used by the certificate: alpha_v = 0, 0.01, ..., 0.30.
pub fn default_alpha_v_grid() -> Vec<f64> {
    (0..=30).map(|i| i as f64 / 100.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use crate::se::solve_fixed_point;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn params(lambda: f64, gamma0: f64, chi: f64) -> ScalarParams {
        let fp = solve_fixed_point(lambda, gamma0, chi, 200).unwrap();
        ScalarParams::from_fixed_point(lambda, gamma0, chi, &fp, 200).unwrap()
    }

    fn fmm_grid() -> Vec<ScalarParams> {
        [1.1, 1.25, 1.5, 2.0, 3.0]
            .iter()
            .map(|&l| params(l, 0.1, 0.0))
            .collect()
    }

    fn ams_grid() -> Vec<ScalarParams> {
        [0.3, 0.5, 0.75, 0.9, 1.2]
            .iter()
            .map(|&l| params(l, 0.3, 1.0))
            .collect()
    }

    fn theta_bruteforce(
        g: f64,
        m: f64,
        xi: f64,
        u: f64,
        query: &MaxMinQuery,
        p: &ScalarParams,
    ) -> f64 {
        let sq = p.q_inf.sqrt();
        let mut best = f64::NEG_INFINITY;
        let mut v = -50.0;
        while v <= 50.0 {
            let val = 2.0 * p.lambda
                * (query.rho / (p.lambda * sq) * g + (1.0 - query.rho * query.rho).sqrt() * xi)
                * v
                - v * v / (1.0 - u * u)
                + query.alpha_rho * m * v / sq
                + query.alpha_u * v
                + query.alpha_v * v * v;
            best = best.max(val);
            v += 1e-3;
        }
        best
    }

    #[test]
    fn theta_at_zero_arguments() {
        let p = params(1.5, 0.1, 0.0);
        let q = MaxMinQuery {
            rho: 0.0,
            u: 0.0,
            alpha_rho: 0.0,
            alpha_u: 0.0,
            alpha_v: 0.0,
        };
        for (xi, u) in [(0.7, 0.3), (-1.2, -0.5), (0.0, 0.9)] {
            let got = theta_closed_form(0.0, 0.0, xi, u, &q, &p).unwrap();
            let want = p.lambda * p.lambda * xi * xi * (1.0 - u * u);
            assert_abs_diff_eq!(got, want, epsilon = 1e-13);
        }
    }

    #[test]
    fn theta_matches_grid_maximization_on_random_inputs() {
        let p = params(1.5, 0.1, 0.0);
        let mut rng = sub_rng(5, "theta-brute");
        for _ in 0..100 {
            let g: f64 = StandardNormal.sample(&mut rng);
            let m: f64 = rng.gen_range(-0.99..0.99);
            let xi: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = rng.gen_range(-0.9..0.9);
            let q = MaxMinQuery {
                rho: rng.gen_range(-0.9..0.9),
                u,
                alpha_rho: rng.gen_range(-0.5..0.5),
                alpha_u: rng.gen_range(-0.5..0.5),
                alpha_v: rng.gen_range(-0.5..0.8),
            };
            let closed = theta_closed_form(g, m, xi, u, &q, &p).unwrap();
            let brute = theta_bruteforce(g, m, xi, u, &q, &p);
            // grid resolution: curvature * (step/2)^2
            let curv = 1.0 / (1.0 - u * u) - q.alpha_v;
            let tol = curv * 0.25e-6 + 1e-9;
            assert!(
                (closed - brute).abs() <= tol,
                "closed {closed} vs brute {brute} (tol {tol})"
            );
        }
    }

    #[test]
    fn theta_diverges_as_alpha_v_approaches_one() {
        let p = params(1.5, 0.1, 0.0);
        let mk = |av: f64| MaxMinQuery {
            rho: 0.0,
            u: 0.0,
            alpha_rho: 0.0,
            alpha_u: 0.0,
            alpha_v: av,
        };
        let t1 = theta_closed_form(0.0, 0.0, 1.0, 0.0, &mk(1.0 - 1e-3), &p).unwrap();
        let t2 = theta_closed_form(0.0, 0.0, 1.0, 0.0, &mk(1.0 - 1e-6), &p).unwrap();
        assert!((t2 / t1 - 1e3).abs() / 1e3 < 1e-2, "ratio {}", t2 / t1);
        assert!(theta_closed_form(0.0, 0.0, 1.0, 0.0, &mk(1.0), &p).is_err());
    }

    #[test]
    fn l_vanishes_at_the_origin() {
        for p in fmm_grid().iter().chain(ams_grid().iter()) {
            let q = MaxMinQuery {
                rho: 0.0,
                u: 0.0,
                alpha_rho: 0.0,
                alpha_u: 0.0,
                alpha_v: 0.0,
            };
            let v = l_value(&q, p).unwrap();
            assert!(v.abs() <= 1e-10, "L(0) = {v:.3e} at lambda {}", p.lambda);
        }
    }

    #[test]
    fn l_alpha_v_derivative_at_origin_is_negative() {
        for p in [params(1.5, 0.1, 0.0), params(0.9, 0.3, 1.0)] {
            let h = 1e-5;
            let at = |av: f64| {
                l_value(
                    &MaxMinQuery {
                        rho: 0.0,
                        u: 0.0,
                        alpha_rho: 0.0,
                        alpha_u: 0.0,
                        alpha_v: av,
                    },
                    &p,
                )
                .unwrap()
            };
            let d = (at(h) - at(-h)) / (2.0 * h);
            assert!(d < 0.0);
            let bound = -1.0 + p.lambda * p.lambda * (1.0 - p.q_inf) + 1e-3;
            assert!(d < bound, "derivative {d} vs bound {bound}");
        }
    }

    #[test]
    fn l_matches_monte_carlo_of_the_pre_integration_form() {
        // 10^7 draws of (G, G0, Xi); agree within 3 standard errors.
        let p = params(1.5, 0.1, 0.0);
        let q = MaxMinQuery {
            rho: 0.3,
            u: 0.1,
            alpha_rho: 0.05,
            alpha_u: 0.05,
            alpha_v: 0.2,
        };
        let quadr = l_value(&q, &p).unwrap();
        let mut rng = sub_rng(13, "l-mc");
        let n = 10_000_000usize;
        let sg = p.lambda * p.q_inf.sqrt();
        let (mut acc, mut acc2) = (0.0f64, 0.0f64);
        let l2 = p.lambda * p.lambda;
        let affine = l2 * q.u * q.u - l2 * (1.0 - p.q_inf)
            + (1.0 - p.chi) * 2.0 * l2 * p.q_inf * q.rho * q.rho
            - q.alpha_rho * q.rho
            - q.alpha_u * q.u
            - q.alpha_v;
        for _ in 0..n {
            let g: f64 = sg * <f64 as From<_>>::from(0.0f32) + sg * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            };
            let xi: f64 = StandardNormal.sample(&mut rng);
            let m = (p.gamma_inf + g).tanh();
            let th = theta_closed_form(g, m, xi, m, &q, &p).unwrap();
            acc += th;
            acc2 += th * th;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        let mc = affine + mean;
        assert!(
            (mc - quadr).abs() <= 3.0 * se + 1e-9,
            "MC {mc} vs quadrature {quadr} (3se = {:.2e})",
            3.0 * se
        );
    }

    #[test]
    fn block_representation_matches_l_value() {
        let p = params(1.5, 0.1, 0.0);
        let mut rng = sub_rng(17, "block-pts");
        for _ in 0..50 {
            let q = MaxMinQuery {
                rho: rng.gen_range(-1.0..1.0),
                u: rng.gen_range(-1.0..1.0),
                alpha_rho: rng.gen_range(-2.0..2.0),
                alpha_u: rng.gen_range(-2.0..2.0),
                alpha_v: 0.1,
            };
            let direct = l_value(&q, &p).unwrap();
            let blocks = l_from_blocks(&q, &p).unwrap();
            assert!(
                (direct - blocks).abs() <= 1e-8 * direct.abs().max(1.0),
                "L {direct} vs blocks {blocks}"
            );
        }
    }

    #[test]
    fn a22_at_zero_is_positive_definite_and_a11_matches_closed_form() {
        for p in fmm_grid() {
            let (a11, _, a22) = a_matrices(0.0, &p).unwrap();
            let ev = linalg::sym_eigvals(a22.view()).unwrap();
            assert!(ev[0] > 0.0, "A22 not PD at lambda {}", p.lambda);
            // closed form via the integration-by-parts identities
            let s4 = p.expect(|_, _, s2| s2 * s2).unwrap();
            let m2s2 = p.expect(|_, m, s2| m * m * s2).unwrap();
            let pcombo = s4 - 2.0 * m2s2;
            let l2 = p.lambda * p.lambda;
            let want = (1.0 - p.chi) * 2.0 * l2 * p.q_inf - 2.0 * l2 * l2 * p.q_inf * pcombo;
            assert!(
                (a11[(0, 0)] - want).abs() <= 1e-8 * want.abs().max(1.0),
                "A11[0,0] {} vs {want} at lambda {}",
                a11[(0, 0)],
                p.lambda
            );
        }
    }

    #[test]
    fn ibp_identities_hold_on_both_grids() {
        for p in fmm_grid().iter().chain(ams_grid().iter()) {
            let r = ibp_identities(p).unwrap();
            for (i, v) in r.iter().enumerate() {
                assert!(*v <= 1e-7, "identity {i} residual {v:.2e} at lambda {}", p.lambda);
            }
        }
    }

    #[test]
    fn ibp_rejects_degenerate_channel() {
        // chi = 0 with gamma0 = 0 admits only the trivial fixed point at
        // lambda <= 1; the regime error comes from the fixed-point solve.
        assert!(solve_fixed_point(0.8, 0.0, 0.0, 200).is_err());
    }

    #[test]
    fn schur_certificate_holds_on_both_grids() {
        for p in fmm_grid().iter().chain(ams_grid().iter()) {
            let r = schur_certificate(p).unwrap();
            assert!(r.c2 > 0.0, "c2 at lambda {}", p.lambda);
            assert!(r.schur_value < 0.0, "c1 + q c2 at lambda {}", p.lambda);
            assert!(r.verdict && r.chain_holds && r.a22_positive_definite);
            assert!(
                r.block_deviation <= 1e-8,
                "block vs closed form {:.2e} at lambda {}",
                r.block_deviation,
                p.lambda
            );
            // the two closed forms of the Schur value agree
            let l2 = p.lambda * p.lambda;
            let s4 = p.expect(|_, _, s2| s2 * s2).unwrap();
            let m2s2 = p.expect(|_, m, s2| m * m * s2).unwrap();
            let alt = -p.q_inf * l2 * (1.0 - l2 * s4)
                - (1.0 - l2 * s4) * (1.0 - l2 * s4) / (m2s2 / p.q_inf)
                - 2.0 * p.chi * l2 * p.q_inf;
            assert!(
                (alt - r.schur_value).abs() <= 1e-8 * alt.abs().max(1.0),
                "alt Schur form {alt} vs {}",
                r.schur_value
            );
        }
    }

    #[test]
    fn margin_zero_at_alpha_v_zero_and_positive_inside() {
        let p = params(1.5, 0.1, 0.0);
        let rep = margin_search(&p, &default_alpha_v_grid()).unwrap();
        assert!(rep.rows[0].margin.abs() <= 1e-10, "margin at 0: {}", rep.rows[0].margin);
        assert!(rep.feasible);
        assert!(rep.margin_c > 0.0);
        assert!(rep.alpha_v_star > 0.0);
        for r in &rep.rows {
            assert!(r.inner_interior, "dual minimizer left the box at {}", r.alpha_v);
        }
    }

    #[test]
    fn margin_positive_across_both_grids() {
        for p in fmm_grid().iter().chain(ams_grid().iter()) {
            let rep = margin_search(p, &default_alpha_v_grid()).unwrap();
            assert!(
                rep.feasible && rep.margin_c > 0.0,
                "no positive margin at lambda {} chi {}",
                p.lambda,
                p.chi
            );
        }
    }

    #[test]
    fn perturbed_point_lies_strictly_below_the_origin() {
        let p = params(1.5, 0.1, 0.0);
        let rep = margin_search(&p, &default_alpha_v_grid()).unwrap();
        let av = rep.alpha_v_star;
        let origin = l_value(
            &MaxMinQuery { rho: 0.0, u: 0.0, alpha_rho: 0.0, alpha_u: 0.0, alpha_v: av },
            &p,
        )
        .unwrap();
        // inner minimization at the perturbed point via the exact box rule
        let (_, a12, a22) = a_matrices(av, &p).unwrap();
        let (a_star, dual_val, interior) = dual_box_min(&a12, &a22, (0.05, 0.05), 10.0);
        assert!(interior);
        let q = MaxMinQuery {
            rho: 0.05,
            u: 0.05,
            alpha_rho: a_star.0,
            alpha_u: a_star.1,
            alpha_v: av,
        };
        let perturbed = l_value(&q, &p).unwrap();
        let _ = dual_val;
        assert!(
            perturbed < origin,
            "perturbed {perturbed} not below origin {origin}"
        );
    }
}
