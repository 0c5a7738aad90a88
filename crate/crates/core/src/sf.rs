//! Conditional comparison machinery built from an AMP trace: the linear
//! constraint pair (R, S) with W R = S along the trajectory, the corrected
//! coefficient matrix solving the symmetry equation, the conditional-mean
//! map, and the empirical comparison of the noise quadratic form against the
//! post-iteration surrogate field.
//!
//! Orientation: the trajectory identity lambda W m^s = g^{s+1} +
//! lambda bhat_s m^{s-1} makes W (lambda M) = G + lambda M B literally true,
//! so R = lambda M and S = G + lambda M B here, asserted at machine
//! precision on every trace.

use crate::amp::AmpTrace;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelInstance, Variant};
use crate::rng::{standard_normal_vec, sub_rng};
use crate::tap::{hessian_payload, TapContext};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Relative truncation threshold for the pseudoinverse of R^T R.
const PINV_REL_TOL: f64 = 1e-10;

/// The conditioning objects; the n x n maps are kept factored through their
/// n x k components.
#[derive(Debug, Clone)]
pub struct ConditioningData {
    pub r: Array2<f64>,
    pub s: Array2<f64>,
    /// Upper-bidiagonal memory-coefficient matrix (entry [j-1, j] = bhat_j).
    pub b0: Array2<f64>,
    pub b_sf: Array2<f64>,
    pub g_sf: Array2<f64>,
    pub rtr: Array2<f64>,
    pub rtr_pinv: Array2<f64>,
    pub m: Array2<f64>,
    pub g: Array2<f64>,
    pub mtm_inv: Array2<f64>,
    pub lambda: f64,
}

impl ConditioningData {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn k(&self) -> usize {
        self.r.ncols()
    }

    /// T v with T = lambda^{-1} G (M^T M)^{-1} M^T.
    pub fn apply_t(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let c = self.mtm_inv.dot(&self.m.t().dot(&v));
        self.g.dot(&c).mapv(|x| x / self.lambda)
    }

    /// T^T v.
    pub fn apply_t_transpose(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let c = self.mtm_inv.t().dot(&self.g.t().dot(&v));
        self.m.dot(&c).mapv(|x| x / self.lambda)
    }

    /// T_SF v with T_SF = G_SF (R^T R)^+ R^T.
    pub fn apply_t_sf(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let c = self.rtr_pinv.dot(&self.r.t().dot(&v));
        self.g_sf.dot(&c)
    }

    /// Projection of v onto the orthogonal complement of col(M) = col(R).
    pub fn project_out_m(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let c = self.mtm_inv.dot(&self.m.t().dot(&v));
        &v.to_owned() - &self.m.dot(&c)
    }

    /// Projection onto the orthogonal complement of col(R).
    pub fn project_out_r(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let c = self.rtr_pinv.dot(&self.r.t().dot(&v));
        &v.to_owned() - &self.r.dot(&c)
    }

    /// ||T - T_SF||_op through the factored forms.
    pub fn t_deviation_opnorm(&self) -> Result<f64> {
        let k = self.k();
        let n = self.n();
        let mut u = Array2::zeros((n, 2 * k));
        let a1 = self.g.dot(&self.mtm_inv).mapv(|x| x / self.lambda);
        let a2 = self.g_sf.dot(&self.rtr_pinv);
        let mut v = Array2::zeros((n, 2 * k));
        for c in 0..k {
            u.column_mut(c).assign(&a1.column(c));
            u.column_mut(k + c).assign(&a2.column(c).mapv(|x| -x));
            v.column_mut(c).assign(&self.m.column(c));
            v.column_mut(k + c).assign(&self.r.column(c));
        }
        linalg::lowrank_opnorm(u.view(), v.view())
    }

    /// ||B_SF - B0||_op.
    pub fn b_deviation_opnorm(&self) -> Result<f64> {
        let d = &self.b_sf - &self.b0;
        let g = d.t().dot(&d);
        let ev = linalg::sym_eigvals(g.view())?;
        Ok(ev.last().copied().unwrap_or(0.0).max(0.0).sqrt())
    }
}

/// Solve R^T S = (R^T R) B + B^T (R^T R) for B, starting from the candidate
/// `b0` and correcting it by the pseudoinverse formula.
pub fn solve_b_sf(
    r: ArrayView2<f64>,
    s: ArrayView2<f64>,
    b0: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let rts = r.t().dot(&s);
    let scale = rts.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-300);
    let asym = (&rts - &rts.t()).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if asym > 1e-8 * scale {
        return Err(Error::Degenerate(format!(
            "R^T S is not symmetric (relative asymmetry {:.3e}); no symmetric W with WR = S exists",
            asym / scale
        )));
    }
    let rtr = r.t().dot(&r);
    let rtr_pinv = linalg::pinv_sym(rtr.view(), PINV_REL_TOL)?;
    let defect = &rts - &rtr.dot(&b0.to_owned()) - &b0.t().dot(&rtr);
    let b_sf = &b0.to_owned() + &rtr_pinv.dot(&defect).mapv(|x| 0.5 * x);
    let resid = (&rts - &rtr.dot(&b_sf) - &b_sf.t().dot(&rtr))
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    if resid > 1e-8 * scale {
        return Err(Error::Numerical(format!(
            "coefficient equation residual {:.3e} exceeds 1e-8 of scale {:.3e}",
            resid, scale
        )));
    }
    Ok(b_sf)
}

/// Build the conditioning objects from a trace.
pub fn build_conditioning(trace: &AmpTrace) -> Result<ConditioningData> {
    let k = trace.k;
    if k < 2 {
        return Err(Error::InvalidParam("conditioning needs k >= 2".into()));
    }
    let n = trace.m.nrows();
    let mtm = trace.m.t().dot(&trace.m);
    let evs = linalg::sym_eigvals(mtm.view())?;
    let smin = evs.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    if smin <= 1e-8 * (n as f64).sqrt() {
        return Err(Error::Degenerate(format!(
            "iterate matrix is rank deficient: smallest singular value {smin:.3e}"
        )));
    }
    let mut b0 = Array2::zeros((k, k));
    for j in 1..k {
        b0[(j - 1, j)] = trace.onsager[j];
    }
    let r = trace.m.mapv(|x| x * trace.lambda);
    let s = &trace.g + &trace.m.dot(&b0).mapv(|x| x * trace.lambda);
    let b_sf = solve_b_sf(r.view(), s.view(), b0.view())?;
    let g_sf = &s - &r.dot(&b_sf);
    let rtr = r.t().dot(&r);
    let rtr_pinv = linalg::pinv_sym(rtr.view(), PINV_REL_TOL)?;
    let mtm_inv = linalg::pinv_sym(mtm.view(), PINV_REL_TOL)?;
    Ok(ConditioningData {
        r,
        s,
        b0,
        b_sf,
        g_sf,
        rtr,
        rtr_pinv,
        m: trace.m.clone(),
        g: trace.g.clone(),
        mtm_inv,
        lambda: trace.lambda,
    })
}

/// Exact-identity residuals, all relative to their natural scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityResiduals {
    /// max|WR - S| / (max|W| max|R|)
    pub constraint_rel: f64,
    /// max|R^T S - S^T R| / max|R^T S|
    pub symmetry_rel: f64,
    /// coefficient-equation residual / max|R^T S|
    pub coefficient_rel: f64,
    /// ||(W - Pperp W Pperp) - (T_SF + T_SF^T)||_F / ||W||_F
    pub reconstruction_rel: f64,
}

/// Verify W - Pperp W Pperp = T_SF + T_SF^T and the companion identities.
pub fn verify_conditional_identity(
    w: ArrayView2<f64>,
    cond: &ConditioningData,
) -> Result<IdentityResiduals> {
    let n = cond.n();
    let wr = w.dot(&cond.r);
    let wmax = w.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let rmax = cond.r.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let constraint_rel = (&wr - &cond.s)
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        / (wmax * rmax).max(1e-300);

    let rts = cond.r.t().dot(&cond.s);
    let scale = rts.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-300);
    let symmetry_rel = (&rts - &rts.t()).iter().fold(0.0f64, |m, &x| m.max(x.abs())) / scale;
    let coefficient_rel = (&rts - &cond.rtr.dot(&cond.b_sf) - &cond.b_sf.t().dot(&cond.rtr))
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        / scale;

    // W - Pperp W Pperp = P W + W P - P W P with P = R (R^T R)^+ R^T.
    let proj_fac = cond.r.dot(&cond.rtr_pinv); // n x k, P = proj_fac R^T
    let rw = cond.r.t().dot(&w); // k x n
    let pw = proj_fac.dot(&rw); // P W
    let pwp = {
        let rwr = rw.dot(&cond.r); // k x k
        let t = proj_fac.dot(&rwr); // n x k
        t.dot(&proj_fac.t())
    };
    let tsf = cond.g_sf.dot(&cond.rtr_pinv).dot(&cond.r.t());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let lhs = pw[(i, j)] + pw[(j, i)] - pwp[(i, j)];
            let rhs = tsf[(i, j)] + tsf[(j, i)];
            let d = lhs - rhs;
            num += d * d;
            den += w[(i, j)] * w[(i, j)];
        }
    }
    Ok(IdentityResiduals {
        constraint_rel,
        symmetry_rel,
        coefficient_rel,
        reconstruction_rel: (num / den.max(1e-300)).sqrt(),
    })
}

/// Surrogate field sqrt(n) T v + ||Pperp_M v|| xi.
pub fn g_amp(cond: &ConditioningData, v: ArrayView1<f64>, xi: ArrayView1<f64>) -> Array1<f64> {
    let n = cond.n() as f64;
    let pv = cond.project_out_m(v);
    let norm = pv.dot(&pv).sqrt();
    let mut out = cond.apply_t(v).mapv(|x| x * n.sqrt());
    out.scaled_add(norm, &xi);
    out
}

/// Conditional-mean field sqrt(n) T_SF v + ||Pperp_R v|| Pperp_R xi,
/// sharing the same xi draw for coupling.
pub fn g_sf(cond: &ConditioningData, v: ArrayView1<f64>, xi: ArrayView1<f64>) -> Array1<f64> {
    let n = cond.n() as f64;
    let pv = cond.project_out_r(v);
    let norm = pv.dot(&pv).sqrt();
    let pxi = cond.project_out_r(xi);
    let mut out = cond.apply_t_sf(v).mapv(|x| x * n.sqrt());
    out.scaled_add(norm, &pxi);
    out
}

/// One optimizer restart record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartTrace {
    pub init: String,
    pub iterations: usize,
    /// objective value every 25 iterations
    pub values: Vec<f64>,
    pub final_value: f64,
}

/// Report of the two-sided supremum comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub t_deviation_op: f64,
    pub b_deviation_op: f64,
    /// best value of sup_v { lambda v^T W v + f(v, u) } over probe centers
    pub noise_side_sup: f64,
    /// best value of sup_v { (2 lambda/sqrt n) <g_amp(v), v> + f(v, u) }
    pub surrogate_side_sup: f64,
    /// max over probe directions of ||g_amp(v) - g_sf(v)|| / sqrt(n)
    pub coupling_gap: f64,
    pub noise_restarts: Vec<RestartTrace>,
    pub surrogate_restarts: Vec<RestartTrace>,
}

struct Ascent<'a> {
    precond: &'a Array1<f64>,
}

impl<'a> Ascent<'a> {
    /// Preconditioned projected gradient ascent on the unit sphere with
    /// Armijo backtracking; returns (argmax, trace of values).
    fn run<F, G>(&self, obj: &F, grad: &G, v0: &Array1<f64>, max_iters: usize) -> (Array1<f64>, Vec<f64>, f64, usize)
    where
        F: Fn(ArrayView1<f64>) -> f64,
        G: Fn(ArrayView1<f64>) -> Array1<f64>,
    {
        let mut v = v0.clone();
        let nrm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / nrm);
        let mut cur = obj(v.view());
        let mut step = 1.0;
        let mut values = vec![cur];
        let mut it_count = 0;
        for it in 0..max_iters {
            it_count = it + 1;
            let g = grad(v.view());
            let d = &g / self.precond;
            let mut improved = false;
            for _ in 0..40 {
                let mut vn = &v + &d.mapv(|x| step * x);
                let nn = vn.dot(&vn).sqrt();
                vn.mapv_inplace(|x| x / nn);
                let c2 = obj(vn.view());
                if c2 > cur + 1e-14 {
                    v = vn;
                    cur = c2;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if it % 25 == 0 {
                values.push(cur);
            }
            if !improved {
                break;
            }
            step *= 1.3;
        }
        (v, values, cur, it_count)
    }
}

/// Estimate both suprema over the unit sphere at probe center `u` by
/// multi-restart preconditioned projected gradient ascent (both values are
/// lower bounds on the true suprema, estimated symmetrically).
#[allow(clippy::too_many_arguments)]
pub fn compare_objectives(
    instance: &ModelInstance,
    trace: &AmpTrace,
    cond: &ConditioningData,
    q_inf: f64,
    u_center: ArrayView1<f64>,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let n = instance.params.n;
    let nf = n as f64;
    let lambda = instance.params.lambda;
    let ctx = TapContext::new(instance, q_inf)?;
    let u = u_center.to_owned();
    // diagonal preconditioner: the curvature scale of -f in v
    let mut precond = Array1::zeros(n);
    let q_u = u.dot(&u) / nf;
    let cshift = match instance.params.variant {
        Variant::Fmm => lambda * lambda * (1.0 - q_u),
        Variant::Ams => lambda * lambda * (1.0 - q_inf),
    };
    for i in 0..n {
        precond[i] = 1.0 / (1.0 - u[i] * u[i]) + cshift;
    }
    let xi = standard_normal_vec(seed, "sf-compare-xi", n);

    let payload = |v: ArrayView1<f64>| hessian_payload(&ctx, v, u.view()).expect("u interior");
    let payload_grad = |v: ArrayView1<f64>| -> Array1<f64> {
        let xv = instance.x.dot(&v);
        let mut g = instance.x.mapv(|x| 2.0 * lambda * lambda * xv * x / nf);
        for i in 0..n {
            g[i] -= 2.0 * v[i] / (1.0 - u[i] * u[i]);
        }
        match instance.params.variant {
            Variant::Fmm => {
                g.scaled_add(-2.0 * lambda * lambda * (1.0 - q_u), &v);
                let uv = u.dot(&v);
                g.scaled_add(4.0 * lambda * lambda * uv / nf, &u);
            }
            Variant::Ams => {
                g.scaled_add(-2.0 * lambda * lambda * (1.0 - q_inf), &v);
            }
        }
        g
    };

    let noise_obj = |v: ArrayView1<f64>| -> f64 {
        let wv = instance.w.dot(&v);
        lambda * v.dot(&wv) + payload(v)
    };
    let noise_grad = |v: ArrayView1<f64>| -> Array1<f64> {
        let mut g = instance.w.dot(&v).mapv(|x| 2.0 * lambda * x);
        g += &payload_grad(v);
        g
    };
    let surr_obj = |v: ArrayView1<f64>| -> f64 {
        let ga = g_amp(cond, v, xi.view());
        2.0 * lambda / nf.sqrt() * ga.dot(&v) + payload(v)
    };
    let surr_grad = |v: ArrayView1<f64>| -> Array1<f64> {
        let tv = cond.apply_t(v);
        let ttv = cond.apply_t_transpose(v);
        let pv = cond.project_out_m(v);
        let npv = pv.dot(&pv).sqrt().max(1e-300);
        let xiv = xi.dot(&v);
        let mut g = (&tv + &ttv).mapv(|x| 2.0 * lambda * x);
        g += &pv.mapv(|x| 2.0 * lambda / nf.sqrt() * xiv * x / npv);
        g.scaled_add(2.0 * lambda / nf.sqrt() * npv, &xi);
        g += &payload_grad(v);
        g
    };

    let ascent = Ascent { precond: &precond };
    let mut rng = sub_rng(seed, "sf-compare-inits");
    let mut noise_restarts = Vec::new();
    let mut best_noise = f64::NEG_INFINITY;
    let mut best_noise_v = Array1::zeros(n);
    for r in 0..restarts {
        let v0 = Array1::from_iter((0..n).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        }));
        let (v, values, val, iters) = ascent.run(&noise_obj, &noise_grad, &v0, max_iters);
        if val > best_noise {
            best_noise = val;
            best_noise_v = v;
        }
        noise_restarts.push(RestartTrace {
            init: format!("random-{r}"),
            iterations: iters,
            values,
            final_value: val,
        });
    }
    let mut surrogate_restarts = Vec::new();
    let mut best_surr = f64::NEG_INFINITY;
    let mut best_surr_v = Array1::zeros(n);
    let mut inits: Vec<(String, Array1<f64>)> = vec![
        ("noise-argmax".into(), best_noise_v.clone()),
        ("xi".into(), xi.clone()),
        ("minus-xi".into(), xi.mapv(|x| -x)),
    ];
    while inits.len() < restarts {
        let idx = inits.len();
        inits.push((
            format!("random-{idx}"),
            Array1::from_iter((0..n).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })),
        ));
    }
    for (name, v0) in inits.into_iter().take(restarts) {
        let (v, values, val, iters) = ascent.run(&surr_obj, &surr_grad, &v0, max_iters);
        if val > best_surr {
            best_surr = val;
            best_surr_v = v;
        }
        surrogate_restarts.push(RestartTrace {
            init: name,
            iterations: iters,
            values,
            final_value: val,
        });
    }

    // Coupling gap over the two maximizers and a handful of random probes.
    let mut gap = 0.0f64;
    let mut probe_dirs = vec![best_noise_v, best_surr_v];
    for _ in 0..6 {
        probe_dirs.push(Array1::from_iter((0..n).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })));
    }
    for mut v in probe_dirs {
        let nrm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / nrm);
        let a = g_amp(cond, v.view(), xi.view());
        let b = g_sf(cond, v.view(), xi.view());
        let d = &a - &b;
        gap = gap.max(d.dot(&d).sqrt() / nf.sqrt());
    }

    let _ = trace;
    Ok(ComparisonReport {
        t_deviation_op: cond.t_deviation_opnorm()?,
        b_deviation_op: cond.b_deviation_opnorm()?,
        noise_side_sup: best_noise,
        surrogate_side_sup: best_surr,
        coupling_gap: gap,
        noise_restarts,
        surrogate_restarts,
    })
}
