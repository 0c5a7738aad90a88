//! The variational free energy over m in (-1,1)^n, its derivatives, the
//! local-convexity probe around late iterates, and the damped Newton solver
//! for the nearby stationary point.
//!
//! Evaluation refuses inputs outside |m_i| <= 1 - clamp_delta instead of
//! clamping: the entropy term's derivative diverges at the boundary, so a
//! silent clamp would hide real domain escapes. The Newton solver works in
//! the unconstrained parameterization m = tanh(z), which keeps every iterate
//! strictly interior.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelInstance, Variant};
use crate::rng::sub_rng;
use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Binary entropy of a +-1 variable with mean m.
#[inline]
pub fn binary_entropy(m: f64) -> f64 {
    let p = 0.5 * (1.0 + m);
    let q = 0.5 * (1.0 - m);
    -(p * p.ln() + q * q.ln())
}

/// Evaluation context: instance, variant constants, and the domain guard.
pub struct TapContext<'a> {
    pub instance: &'a ModelInstance,
    /// Fixed-point overlap; enters the AMS energy and Hessian, carried for
    /// FMM only for cross-variant comparisons.
    pub q_inf: f64,
    pub clamp_delta: f64,
}

impl<'a> TapContext<'a> {
    pub fn new(instance: &'a ModelInstance, q_inf: f64) -> Result<Self> {
        if instance.params.variant == Variant::Ams && !(q_inf > 0.0 && q_inf < 1.0) {
            return Err(Error::InvalidParam(format!(
                "q_inf must lie in (0,1) for the AMS variant, got {q_inf}"
            )));
        }
        Ok(TapContext {
            instance,
            q_inf,
            clamp_delta: 1e-9,
        })
    }

    fn n(&self) -> usize {
        self.instance.params.n
    }

    fn lambda(&self) -> f64 {
        self.instance.params.lambda
    }

    fn variant(&self) -> Variant {
        self.instance.params.variant
    }

    fn check_domain(&self, m: ArrayView1<f64>) -> Result<()> {
        if m.len() != self.n() {
            return Err(Error::InvalidParam(format!(
                "dimension mismatch: {} vs n = {}",
                m.len(),
                self.n()
            )));
        }
        for (i, &v) in m.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 - self.clamp_delta {
                return Err(Error::Domain(format!(
                    "coordinate {i} = {v} outside |m| <= 1 - {:.0e}",
                    self.clamp_delta
                )));
            }
        }
        Ok(())
    }
}

/// Free energy value at m.
pub fn free_energy(ctx: &TapContext, m: ArrayView1<f64>) -> Result<f64> {
    ctx.check_domain(m)?;
    let n = ctx.n() as f64;
    let lambda = ctx.lambda();
    let ym = ctx.instance.y_mat.dot(&m);
    let quad = -0.5 * lambda / n * m.dot(&ym);
    let ent: f64 = m.iter().map(|&v| binary_entropy(v)).sum::<f64>() / n;
    let q = m.dot(&m) / n;
    let rest = match ctx.variant() {
        Variant::Fmm => {
            let r = 1.0 - q;
            -(lambda * lambda / 4.0) * r * r
        }
        Variant::Ams => {
            let qi = ctx.q_inf;
            -ctx.instance.y_side.dot(&m) / n
                - lambda * lambda * (1.0 - qi) * (1.0 + qi - 2.0 * q) / 4.0
        }
    };
    Ok(quad - ent + rest)
}

/// Analytic gradient of [`free_energy`].
pub fn gradient(ctx: &TapContext, m: ArrayView1<f64>) -> Result<Array1<f64>> {
    ctx.check_domain(m)?;
    Ok(gradient_unchecked(ctx, m))
}

fn gradient_unchecked(ctx: &TapContext, m: ArrayView1<f64>) -> Array1<f64> {
    let n = ctx.n() as f64;
    let lambda = ctx.lambda();
    let mut g = ctx.instance.y_mat.dot(&m) * (-lambda / n);
    for (gi, &mi) in g.iter_mut().zip(m.iter()) {
        *gi += mi.atanh() / n;
    }
    match ctx.variant() {
        Variant::Fmm => {
            let q = m.dot(&m) / n;
            g.scaled_add(lambda * lambda * (1.0 - q) / n, &m);
        }
        Variant::Ams => {
            g.scaled_add(-1.0 / n, &ctx.instance.y_side);
            g.scaled_add(lambda * lambda * (1.0 - ctx.q_inf) / n, &m);
        }
    }
    g
}

/// v^T grad^2 F(u) v, direct second derivative through the observation
/// matrix Y.
pub fn hessian_quadratic_form(ctx: &TapContext, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    ctx.check_domain(u)?;
    let n = ctx.n() as f64;
    let lambda = ctx.lambda();
    let yv = ctx.instance.y_mat.dot(&v);
    let mut acc = -lambda / n * v.dot(&yv);
    for (&vi, &ui) in v.iter().zip(u.iter()) {
        acc += vi * vi / ((1.0 - ui * ui) * n);
    }
    match ctx.variant() {
        Variant::Fmm => {
            let q = u.dot(&u) / n;
            acc += lambda * lambda * (1.0 - q) / n * v.dot(&v);
            let uv = u.dot(&v);
            acc -= 2.0 * lambda * lambda / (n * n) * uv * uv;
        }
        Variant::Ams => {
            acc += lambda * lambda * (1.0 - ctx.q_inf) / n * v.dot(&v);
        }
    }
    Ok(acc)
}

/// The bilinear payload f of the decomposition
/// v^T grad^2 F(u) v = -(1/n) (lambda v^T W v + f(v, u)), with the spike
/// inner product <x, v> in place of <1, v> for general spike orientation.
pub fn hessian_payload(ctx: &TapContext, v: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<f64> {
    ctx.check_domain(u)?;
    let n = ctx.n() as f64;
    let lambda = ctx.lambda();
    let xv = ctx.instance.x.dot(&v);
    let mut f = lambda * lambda * xv * xv / n;
    for (&vi, &ui) in v.iter().zip(u.iter()) {
        f -= vi * vi / (1.0 - ui * ui);
    }
    match ctx.variant() {
        Variant::Fmm => {
            let q = u.dot(&u) / n;
            f -= lambda * lambda * (1.0 - q) * v.dot(&v);
            let uv = u.dot(&v);
            f += 2.0 * lambda * lambda * uv * uv / n;
        }
        Variant::Ams => {
            f -= lambda * lambda * (1.0 - ctx.q_inf) * v.dot(&v);
        }
    }
    Ok(f)
}

/// v^T grad^2 F(u) v through the W-plus-spike decomposition.
pub fn hessian_quadratic_form_decomposed(
    ctx: &TapContext,
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
) -> Result<f64> {
    let n = ctx.n() as f64;
    let lambda = ctx.lambda();
    let wv = ctx.instance.w.dot(&v);
    let f = hessian_payload(ctx, v, u)?;
    Ok(-(lambda * v.dot(&wv) + f) / n)
}

/// n * grad^2 F(u) as a dense symmetric matrix.
pub fn hessian_scaled(ctx: &TapContext, u: ArrayView1<f64>) -> Result<Array2<f64>> {
    ctx.check_domain(u)?;
    let n = ctx.n();
    let nf = n as f64;
    let lambda = ctx.lambda();
    let mut h = ctx.instance.y_mat.mapv(|v| -lambda * v);
    match ctx.variant() {
        Variant::Fmm => {
            let q = u.dot(&u) / nf;
            let c = lambda * lambda * (1.0 - q);
            for i in 0..n {
                h[(i, i)] += 1.0 / (1.0 - u[i] * u[i]) + c;
            }
            let s = 2.0 * lambda * lambda / nf;
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] -= s * u[i] * u[j];
                }
            }
        }
        Variant::Ams => {
            let c = lambda * lambda * (1.0 - ctx.q_inf);
            for i in 0..n {
                h[(i, i)] += 1.0 / (1.0 - u[i] * u[i]) + c;
            }
        }
    }
    Ok(h)
}

/// Which eigensolver backs the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Eigensolver {
    Dense,
    /// Krylov estimate with full reorthogonalization; an upper bound on the
    /// smallest eigenvalue, used above the dense cutoff.
    Lanczos { iters: usize },
    /// Dense below n = 4000, Lanczos above.
    Auto,
}

/// Smallest eigenvalue of n * grad^2 F(u).
pub fn hessian_smallest_eigenvalue(
    ctx: &TapContext,
    u: ArrayView1<f64>,
    solver: Eigensolver,
) -> Result<f64> {
    let n = ctx.n();
    let effective = match solver {
        Eigensolver::Auto => {
            if n < 4000 {
                Eigensolver::Dense
            } else {
                Eigensolver::Lanczos { iters: 200 }
            }
        }
        s => s,
    };
    match effective {
        Eigensolver::Dense => {
            let h = hessian_scaled(ctx, u)?;
            linalg::smallest_eigenvalue(h.view())
        }
        Eigensolver::Lanczos { iters } => {
            let h = hessian_scaled(ctx, u)?;
            linalg::lanczos_smallest(|v| h.dot(&v), n, iters, ctx.instance.seed ^ 0x51a3)
        }
        Eigensolver::Auto => unreachable!(),
    }
}

/// One probed point of the convexity report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    /// ||u - center|| / sqrt(n)
    pub radius: f64,
    /// smallest eigenvalue of n * grad^2 F at the point
    pub lambda_min: f64,
}

/// Sampled lower envelope of the Hessian spectrum on an epsilon-ball.
///
/// This is a probe, not a certificate: it reports the minimum over sampled
/// points of the smallest Hessian eigenvalue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub k: usize,
    pub epsilon: f64,
    pub points: Vec<ProbePoint>,
    pub min_lambda: f64,
    pub center_lambda: f64,
    /// number of probe draws whose radius had to be shrunk to stay interior
    pub shrunk_points: usize,
    pub seed: u64,
}

/// Probe local strong convexity on the ball of scaled radius epsilon around
/// `center` (typically the last iterate m^{k-1}).
///
/// Points are the center, `n_points` draws u = center + r d with d uniform
/// on the sphere and r uniform on [0, epsilon sqrt(n)], and optional points
/// on the segment toward a stationary point. Draws that would leave the
/// domain are shrunk toward the center and counted.
pub fn convexity_probe(
    ctx: &TapContext,
    center: ArrayView1<f64>,
    k: usize,
    epsilon: f64,
    n_points: usize,
    toward: Option<ArrayView1<f64>>,
    solver: Eigensolver,
    seed: u64,
) -> Result<ConvexityReport> {
    if epsilon < 0.0 {
        return Err(Error::InvalidParam("epsilon must be nonnegative".into()));
    }
    ctx.check_domain(center)?;
    let n = ctx.n();
    let nf = n as f64;
    let guard = 1.0 - ctx.clamp_delta;
    let mut rng = sub_rng(seed, "convexity-probe");
    let mut dirs: Vec<(f64, Array1<f64>)> = Vec::new();
    for _ in 0..n_points {
        let mut d = Array1::from_iter((0..n).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        }));
        let norm = d.dot(&d).sqrt();
        d.mapv_inplace(|v| v / norm);
        let r: f64 = rand::Rng::gen::<f64>(&mut rng) * epsilon * nf.sqrt();
        dirs.push((r, d));
    }
    if let Some(target) = toward {
        let delta = &target.to_owned() - &center.to_owned();
        let norm = delta.dot(&delta).sqrt();
        if norm > 0.0 {
            for frac in [0.25, 0.5, 0.75, 1.0] {
                let r = (frac * norm).min(epsilon * nf.sqrt());
                dirs.push((r, delta.mapv(|v| v / norm)));
            }
        }
    }
    let mut points = Vec::with_capacity(dirs.len() + 1);
    let center_lambda = hessian_smallest_eigenvalue(ctx, center, solver)?;
    points.push(ProbePoint {
        radius: 0.0,
        lambda_min: center_lambda,
    });
    let mut shrunk = 0usize;
    for (r0, d) in &dirs {
        let mut r = *r0;
        let mut shrunk_here = false;
        let u = loop {
            let u = &center.to_owned() + &d.mapv(|v| v * r);
            if u.iter().all(|&v| v.abs() <= guard) {
                break u;
            }
            shrunk_here = true;
            r *= 0.5;
            if r < 1e-12 {
                break center.to_owned();
            }
        };
        if shrunk_here {
            shrunk += 1;
        }
        let lam = hessian_smallest_eigenvalue(ctx, u.view(), solver)?;
        points.push(ProbePoint {
            radius: r / nf.sqrt(),
            lambda_min: lam,
        });
    }
    let min_lambda = points
        .iter()
        .map(|p| p.lambda_min)
        .fold(f64::INFINITY, f64::min);
    Ok(ConvexityReport {
        k,
        epsilon,
        points,
        min_lambda,
        center_lambda,
        shrunk_points: shrunk,
        seed,
    })
}

/// Diagnostics of a Newton solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewtonDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    /// ||m* - m_init|| / sqrt(n)
    pub moved: f64,
    /// stayed within the declared epsilon-ball
    pub in_ball: bool,
    pub cg_iterations: usize,
}

/// Damped Newton with backtracking on F(tanh z), started at `m_init`.
///
/// Steps solve the z-space Newton system by Jacobi-preconditioned conjugate
/// gradients; convergence is declared on the m-space gradient norm
/// ||grad F(m)|| <= tol. Leaving the epsilon-ball is reported in the
/// diagnostics, never silently accepted.
pub fn find_stationary_point(
    ctx: &TapContext,
    m_init: ArrayView1<f64>,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(Array1<f64>, NewtonDiagnostics)> {
    ctx.check_domain(m_init)?;
    let n = ctx.n();
    let nf = n as f64;
    let lambda = ctx.lambda();
    let mut z = m_init.mapv(f64::atanh);
    let mut m = z.mapv(f64::tanh);
    let mut cg_total = 0usize;
    let mut iters = 0usize;
    let mut grad = gradient_unchecked(ctx, m.view());
    let mut fval = free_energy(ctx, m.view())?;
    for it in 0..max_iters {
        iters = it;
        let gnorm = grad.dot(&grad).sqrt();
        if gnorm <= tol {
            break;
        }
        // n-scaled z-space Newton system.
        let d1 = m.mapv(|v| 1.0 - v * v);
        let rhs = (&grad * &d1).mapv(|v| -v * nf);
        let diag_extra = {
            let mut d = Array1::zeros(n);
            for i in 0..n {
                d[i] = nf * grad[i] * (-2.0 * m[i] * d1[i]);
            }
            d
        };
        let q = m.dot(&m) / nf;
        let c = match ctx.variant() {
            Variant::Fmm => lambda * lambda * (1.0 - q),
            Variant::Ams => lambda * lambda * (1.0 - ctx.q_inf),
        };
        // apply w -> n H_z w
        let apply = |w: &Array1<f64>| -> Array1<f64> {
            let dw = &d1 * w;
            let mut hv = ctx.instance.y_mat.dot(&dw) * (-lambda);
            for i in 0..n {
                hv[i] += dw[i] / (1.0 - m[i] * m[i]) + c * dw[i];
            }
            if ctx.variant() == Variant::Fmm {
                let mdw = m.dot(&dw);
                hv.scaled_add(-2.0 * lambda * lambda * mdw / nf, &m);
            }
            let mut out = &d1 * &hv;
            for i in 0..n {
                out[i] += diag_extra[i] * w[i];
            }
            out
        };
        let mut precond = Array1::zeros(n);
        for i in 0..n {
            let hd = -lambda * ctx.instance.y_mat[(i, i)] + 1.0 / (1.0 - m[i] * m[i]) + c;
            let p = d1[i] * d1[i] * hd + diag_extra[i];
            precond[i] = p.abs().max(1e-8);
        }
        let (dz, cg_iters) = pcg(&apply, &rhs, &precond, 400, 1e-12);
        cg_total += cg_iters;
        if gnorm <= 1e-6 {
            // Quadratic-convergence basin: the energy decrease per step is
            // below f64 resolution of F, so accept on gradient-norm descent.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let z_try = &z + &dz.mapv(|v| alpha * v);
                let m_try = z_try.mapv(f64::tanh);
                let g_try = gradient_unchecked(ctx, m_try.view());
                let gn_try = g_try.dot(&g_try).sqrt();
                if gn_try < gnorm {
                    z = z_try;
                    m = m_try;
                    grad = g_try;
                    fval = free_energy_interior(ctx, m.view());
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            continue;
        }
        // Backtracking on the free energy.
        let mut alpha = 1.0;
        let gdot = {
            let gz = &grad * &d1;
            gz.dot(&dz) * nf
        };
        let mut accepted = false;
        for _ in 0..60 {
            let z_try = &z + &dz.mapv(|v| alpha * v);
            let m_try = z_try.mapv(f64::tanh);
            if m_try.iter().all(|v| v.abs() < 1.0 && v.is_finite()) {
                let f_try = free_energy_interior(ctx, m_try.view());
                if f_try <= fval + 1e-4 * alpha * gdot / nf || f_try < fval {
                    z = z_try;
                    m = m_try;
                    fval = f_try;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Gradient step fallback in z.
            let gz = (&grad * &d1).mapv(|v| -v * nf);
            let z_try = &z + &gz.mapv(|v| 1e-3 * v);
            let m_try = z_try.mapv(f64::tanh);
            let f_try = free_energy_interior(ctx, m_try.view());
            if f_try < fval {
                z = z_try;
                m = m_try;
                fval = f_try;
            } else {
                break;
            }
        }
        grad = gradient_unchecked(ctx, m.view());
    }
    let gnorm = grad.dot(&grad).sqrt();
    let moved = {
        let d = &m - &m_init.to_owned();
        d.dot(&d).sqrt() / nf.sqrt()
    };
    if gnorm > tol {
        return Err(Error::Numerical(format!(
            "Newton did not reach ||grad|| <= {tol:.1e} in {max_iters} iterations (now {gnorm:.3e})"
        )));
    }
    let diag = NewtonDiagnostics {
        iterations: iters,
        grad_norm: gnorm,
        moved,
        in_ball: moved <= epsilon,
        cg_iterations: cg_total,
    };
    Ok((m, diag))
}

/// Free energy without domain checks, for interior line-search iterates.
fn free_energy_interior(ctx: &TapContext, m: ArrayView1<f64>) -> f64 {
    let n = ctx.n() as f64;
    let lambda = ctx.lambda();
    let ym = ctx.instance.y_mat.dot(&m);
    let quad = -0.5 * lambda / n * m.dot(&ym);
    let ent: f64 = m.iter().map(|&v| binary_entropy(v)).sum::<f64>() / n;
    let q = m.dot(&m) / n;
    let rest = match ctx.variant() {
        Variant::Fmm => {
            let r = 1.0 - q;
            -(lambda * lambda / 4.0) * r * r
        }
        Variant::Ams => {
            let qi = ctx.q_inf;
            -ctx.instance.y_side.dot(&m) / n
                - lambda * lambda * (1.0 - qi) * (1.0 + qi - 2.0 * q) / 4.0
        }
    };
    quad - ent + rest
}

fn pcg<F>(apply: &F, b: &Array1<f64>, precond: &Array1<f64>, max_iters: usize, rel_tol: f64) -> (Array1<f64>, usize)
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let n = b.len();
    let mut x = Array1::zeros(n);
    let mut r = b.clone();
    let bnorm = b.dot(b).sqrt().max(1e-300);
    let mut zv = r.iter().zip(precond.iter()).map(|(&ri, &pi)| ri / pi).collect::<Array1<f64>>();
    let mut p = zv.clone();
    let mut rz = r.dot(&zv);
    let mut iters = 0;
    for it in 0..max_iters {
        iters = it + 1;
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            // Nonpositive curvature: fall back to the preconditioned
            // gradient if no progress has been made yet, otherwise keep the
            // partial solution (Steihaug truncation).
            if it == 0 {
                x = p.clone();
            }
            break;
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        if r.dot(&r).sqrt() <= rel_tol * bnorm {
            break;
        }
        zv = r.iter().zip(precond.iter()).map(|(&ri, &pi)| ri / pi).collect();
        let rz_new = r.dot(&zv);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &zv + &p.mapv(|v| beta * v);
    }
    (x, iters)
}

/// Run the Newton solve from `restarts` perturbed starts inside the ball and
/// report the largest pairwise distance between the solutions (scaled by
/// sqrt(n)).
pub fn stationary_point_restarts(
    ctx: &TapContext,
    center: ArrayView1<f64>,
    epsilon: f64,
    tol: f64,
    restarts: usize,
    seed: u64,
) -> Result<(Vec<Array1<f64>>, f64)> {
    let n = ctx.n();
    let nf = n as f64;
    let guard = 1.0 - 10.0 * ctx.clamp_delta;
    let mut rng = sub_rng(seed, "newton-restarts");
    let mut sols = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let mut d = Array1::from_iter((0..n).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        }));
        let norm = d.dot(&d).sqrt();
        let r: f64 = rand::Rng::gen::<f64>(&mut rng) * epsilon * nf.sqrt();
        d.mapv_inplace(|v| v * r / norm);
        let mut start = &center.to_owned() + &d;
        start.mapv_inplace(|v| v.clamp(-guard, guard));
        let (sol, _) = find_stationary_point(ctx, start.view(), epsilon, tol, 60)?;
        sols.push(sol);
    }
    let mut worst = 0.0f64;
    for i in 0..sols.len() {
        for j in (i + 1)..sols.len() {
            let d = &sols[i] - &sols[j];
            worst = worst.max(d.dot(&d).sqrt() / nf.sqrt());
        }
    }
    Ok((sols, worst))
}

/// Reconstruct grad F(m^{k-1}) from the iteration's z-increment plus the
/// memory-term corrections, and return the maximum absolute deviation from
/// the direct gradient.
pub fn gradient_residual_identity(ctx: &TapContext, trace: &crate::amp::AmpTrace) -> Result<f64> {
    let k = trace.k;
    if k < 1 {
        return Err(Error::InvalidParam("trace must have k >= 1".into()));
    }
    let n = ctx.n();
    let nf = n as f64;
    let lambda = ctx.lambda();
    let mk = trace.m.column(k - 1);
    let direct = gradient(ctx, mk)?;
    let q = crate::amp::overlap_q(mk);
    let m_prev = if k >= 2 {
        trace.m.column(k - 2).to_owned()
    } else {
        Array1::zeros(n)
    };
    let mut recon = (&trace.z.column(k) - &trace.z.column(k - 1)).mapv(|v| -v / nf);
    let corr = (&mk.to_owned() - &m_prev).mapv(|v| v * lambda * lambda * (1.0 - q) / nf);
    recon += &corr;
    if ctx.variant() == Variant::Ams {
        recon.scaled_add(lambda * lambda * (q - ctx.q_inf) / nf, &mk);
    }
    Ok(direct
        .iter()
        .zip(recon.iter())
        .fold(0.0f64, |acc, (&a, &b)| acc.max((a - b).abs())))
}
