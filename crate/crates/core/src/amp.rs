//! The Z2-specialized iteration with Onsager correction, the generic
//! denoiser-sequence iteration, and comparisons of empirical iterate
//! statistics against state evolution.

use crate::error::{Error, Result};
use crate::model::{ModelInstance, Variant};
use crate::rng::sub_rng;
use crate::se::{Denoiser, SeCurve, SeSample};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Q(m) = ||m||^2 / n.
pub fn overlap_q(m: ArrayView1<f64>) -> f64 {
    m.dot(&m) / m.len() as f64
}

/// Full record of one AMP run.
///
/// Column s of `m` is the iterate m^s (s = 0..k-1); column s of `z` is the
/// pre-threshold field z^s with z^0 = y; column s-1 of `g` is
/// g^s = lambda W m^{s-1} - lambda^2 (1 - Q(m^{s-1})) m^{s-2}, the field with
/// the rank-one and side-information parts removed. m^{-1} is the zero
/// vector, so the first step carries no memory term.
#[derive(Debug, Clone)]
pub struct AmpTrace {
    pub k: usize,
    pub m: Array2<f64>,
    pub z: Array2<f64>,
    pub g: Array2<f64>,
    /// bhat_s = lambda (1 - Q(m^s)) for s = 0..k-1.
    pub onsager: Vec<f64>,
    pub variant: Variant,
    pub lambda: f64,
    pub gamma0: f64,
    pub seed: u64,
}

/// Run the Z2 iteration for k steps on one instance.
pub fn run_amp_z2(instance: &ModelInstance, k: usize) -> Result<AmpTrace> {
    if k < 1 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    let n = instance.params.n;
    let lambda = instance.params.lambda;
    let chi = instance.params.variant.chi();
    let mut m = Array2::zeros((n, k));
    let mut z = Array2::zeros((n, k + 1));
    let mut g = Array2::zeros((n, k));
    let mut onsager = Vec::with_capacity(k);
    z.column_mut(0).assign(&instance.y_side);
    let mut m_prev = Array1::<f64>::zeros(n);
    for s in 0..k {
        let ms = z.column(s).mapv(f64::tanh);
        if !ms.iter().all(|v| v.is_finite() && v.abs() < 1.0) {
            return Err(Error::Numerical(format!(
                "iterate m^{s} left (-1,1); lambda or normalization out of range"
            )));
        }
        let q = overlap_q(ms.view());
        let bhat = lambda * (1.0 - q);
        onsager.push(bhat);
        let wm = instance.w.dot(&ms);
        let gs = &wm * lambda - &m_prev * (lambda * lambda * (1.0 - q));
        let ym = &wm + &(&instance.x * (lambda / n as f64 * instance.x.dot(&ms)));
        let mut znext = &ym * lambda - &m_prev * (lambda * bhat);
        if chi != 0.0 {
            znext += &instance.y_side;
        }
        if !znext.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("z^{} is non-finite", s + 1)));
        }
        m.column_mut(s).assign(&ms);
        g.column_mut(s).assign(&gs);
        z.column_mut(s + 1).assign(&znext);
        m_prev = ms;
    }
    Ok(AmpTrace {
        k,
        m,
        z,
        g,
        onsager,
        variant: instance.params.variant,
        lambda,
        gamma0: instance.params.gamma0,
        seed: instance.seed,
    })
}

/// Trace of the generic iteration g^{s+1} = W m^s - sum_j b_{sj} m^{j-1},
/// m^s = f_s(g^0, ..., g^s) applied row-wise.
#[derive(Debug, Clone)]
pub struct GenericTrace {
    pub k: usize,
    /// n x k, column s = m^s.
    pub m: Array2<f64>,
    /// n x (k+1), column s = g^s including the N(0, I) initialization g^0.
    pub g: Array2<f64>,
}

/// Run the generic AMP with caller-supplied denoisers and Onsager matrix
/// (entry [s, j] = b_{sj}, used for 1 <= j <= s).
pub fn run_amp_generic(
    denoisers: &[Denoiser],
    onsager: ArrayView2<f64>,
    w: ArrayView2<f64>,
    g0: ArrayView1<f64>,
    k: usize,
) -> Result<GenericTrace> {
    if denoisers.len() < k {
        return Err(Error::InvalidParam(format!(
            "need {k} denoisers, got {}",
            denoisers.len()
        )));
    }
    let n = w.nrows();
    if g0.len() != n {
        return Err(Error::InvalidParam("g0 length must match W".into()));
    }
    let mut m = Array2::zeros((n, k));
    let mut g = Array2::zeros((n, k + 1));
    g.column_mut(0).assign(&g0);
    let mut hist = vec![0.0f64; k + 1];
    for s in 0..k {
        for i in 0..n {
            for j in 0..=s {
                hist[j] = g[(i, j)];
            }
            m[(i, s)] = denoisers[s](&hist[..s + 1]);
        }
        let mut gnext = w.dot(&m.column(s));
        for j in 1..=s {
            let b = onsager[(s, j)];
            if b != 0.0 {
                gnext.scaled_add(-b, &m.column(j - 1));
            }
        }
        if !gnext.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("generic g^{} non-finite", s + 1)));
        }
        g.column_mut(s + 1).assign(&gnext);
    }
    Ok(GenericTrace { k, m, g })
}

/// Per-iteration summary row for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub s: usize,
    pub q_emp: f64,
    pub q_pred: f64,
    pub overlap_with_spike: f64,
    pub onsager: f64,
    pub g_norm2_over_n: f64,
}

pub fn summary_rows(trace: &AmpTrace, curve: &SeCurve, x: ArrayView1<f64>) -> Vec<SummaryRow> {
    let n = trace.m.nrows() as f64;
    (0..trace.k)
        .map(|s| SummaryRow {
            s,
            q_emp: overlap_q(trace.m.column(s)),
            q_pred: curve.overlaps[s],
            overlap_with_spike: trace.m.column(s).dot(&x) / n,
            onsager: trace.onsager[s],
            g_norm2_over_n: trace.g.column(s).dot(&trace.g.column(s)) / n,
        })
        .collect()
}

/// Discrepancies between one trace and the state-evolution prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeComparison {
    /// max-entry |(1/n) lambda^2 M^T M - K|
    pub m_gap: f64,
    /// max-entry |(1/n) G^T G - K|
    pub g_gap: f64,
    /// max-entry |(1/n) (lambda^2 M^T M - G^T G)| (self-consistency)
    pub mg_gap: f64,
    /// sliced 2-Wasserstein estimate between empirical rows and SE draws
    pub sliced_w2: f64,
    /// per-column means of g^s (should vanish like 1/sqrt(n))
    pub g_col_means: Vec<f64>,
    /// |bhat_s - lambda (1 - q_s)| per iteration
    pub onsager_gaps: Vec<f64>,
    /// | ||m^s - m^{s-1}||/sqrt(n) - sqrt(q_s - q_{s-1}) | for s >= 1
    pub increment_gaps: Vec<f64>,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// Compare a trace against the curve and an idealized sample.
///
/// The joint rows compared under sliced W2 are (m-row, g-row, side-noise)
/// on the empirical side and (M, G, G0) on the SE side, in R^{2k+1}.
pub fn empirical_vs_se(
    trace: &AmpTrace,
    curve: &SeCurve,
    sample: &SeSample,
    instance: &ModelInstance,
    directions: usize,
    seed: u64,
) -> Result<SeComparison> {
    let k = trace.k;
    if curve.k() < k || sample.m.ncols() < k {
        return Err(Error::InvalidParam("curve/sample shorter than trace".into()));
    }
    let n = trace.m.nrows();
    let nf = n as f64;
    let l2 = trace.lambda * trace.lambda;
    let mtm = trace.m.t().dot(&trace.m).mapv(|v| v * l2 / nf);
    let gtg = trace.g.t().dot(&trace.g).mapv(|v| v / nf);
    let m_gap = max_abs_diff(&mtm, &curve.k_mat);
    let g_gap = max_abs_diff(&gtg, &curve.k_mat);
    let mg_gap = max_abs_diff(&mtm, &gtg);

    let dim = 2 * k + 1;
    let mut emp = Array2::zeros((n, dim));
    for i in 0..n {
        for s in 0..k {
            emp[(i, s)] = trace.m[(i, s)];
            emp[(i, k + s)] = trace.g[(i, s)];
        }
        emp[(i, dim - 1)] = instance.g_side[i];
    }
    let nsamp = sample.m.nrows();
    let mut ideal = Array2::zeros((nsamp, dim));
    for i in 0..nsamp {
        for s in 0..k {
            ideal[(i, s)] = sample.m[(i, s)];
            ideal[(i, k + s)] = sample.g[(i, s)];
        }
        ideal[(i, dim - 1)] = sample.g0[i];
    }
    let sliced_w2 = sliced_w2(emp.view(), ideal.view(), directions, seed);

    let g_col_means = (0..k).map(|s| trace.g.column(s).mean().unwrap()).collect();
    let onsager_gaps = (0..k)
        .map(|s| (trace.onsager[s] - trace.lambda * (1.0 - curve.overlaps[s])).abs())
        .collect();
    let mut increment_gaps = Vec::with_capacity(k.saturating_sub(1));
    for s in 1..k {
        let d = (&trace.m.column(s) - &trace.m.column(s - 1))
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            / nf.sqrt();
        let pred = (curve.overlaps[s] - curve.overlaps[s - 1]).max(0.0).sqrt();
        increment_gaps.push((d - pred).abs());
    }
    Ok(SeComparison {
        m_gap,
        g_gap,
        mg_gap,
        sliced_w2,
        g_col_means,
        onsager_gaps,
        increment_gaps,
    })
}

/// Sliced 2-Wasserstein estimate: average of exact one-dimensional W2
/// distances over random unit projection directions.
pub fn sliced_w2(a: ArrayView2<f64>, b: ArrayView2<f64>, directions: usize, seed: u64) -> f64 {
    let dim = a.ncols();
    assert_eq!(dim, b.ncols(), "point clouds must share dimension");
    let mut rng = sub_rng(seed, "sliced-w2");
    let grid = a.nrows().min(b.nrows());
    let mut acc = 0.0;
    let mut pa = vec![0.0f64; a.nrows()];
    let mut pb = vec![0.0f64; b.nrows()];
    for _ in 0..directions {
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        for (i, row) in a.rows().into_iter().enumerate() {
            pa[i] = row.iter().zip(u.iter()).map(|(x, c)| x * c).sum();
        }
        for (i, row) in b.rows().into_iter().enumerate() {
            pb[i] = row.iter().zip(u.iter()).map(|(x, c)| x * c).sum();
        }
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // quantile coupling on a common grid
        let mut w2 = 0.0;
        for i in 0..grid {
            let q = (i as f64 + 0.5) / grid as f64;
            let xa = pa[((q * pa.len() as f64) as usize).min(pa.len() - 1)];
            let xb = pb[((q * pb.len() as f64) as usize).min(pb.len() - 1)];
            w2 += (xa - xb) * (xa - xb);
        }
        acc += w2 / grid as f64;
    }
    (acc / directions as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_instance, ModelParams};
    use crate::se::{run_recursion, sample_se, z2_denoisers, DEFAULT_QUAD_ORDER};
    use approx::assert_abs_diff_eq;

    fn params(n: usize, variant: Variant) -> ModelParams {
        ModelParams {
            n,
            lambda: 1.5,
            gamma0: 0.3,
            variant,
            fix_spike_to_ones: true,
        }
    }

    #[test]
    fn first_iterate_is_tanh_of_side_information() {
        let inst = make_instance(&params(64, Variant::Ams), 1).unwrap();
        let t = run_amp_z2(&inst, 1).unwrap();
        for i in 0..64 {
            assert_abs_diff_eq!(t.m[(i, 0)], inst.y_side[i].tanh(), epsilon = 1e-15);
        }
    }

    #[test]
    fn onsager_and_field_definitions_hold_exactly() {
        let inst = make_instance(&params(80, Variant::Fmm), 3).unwrap();
        let k = 5;
        let t = run_amp_z2(&inst, k).unwrap();
        let lambda = inst.params.lambda;
        for s in 0..k {
            let q = overlap_q(t.m.column(s));
            assert_abs_diff_eq!(t.onsager[s], lambda * (1.0 - q), epsilon = 1e-14);
            let wm = inst.w.dot(&t.m.column(s).to_owned());
            let prev = if s == 0 {
                Array1::zeros(80)
            } else {
                t.m.column(s - 1).to_owned()
            };
            let want = &wm * lambda - &prev * (lambda * lambda * (1.0 - q));
            for i in 0..80 {
                assert_abs_diff_eq!(t.g[(i, s)], want[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn overlaps_track_state_evolution_at_moderate_size() {
        // Monte-Carlo oracle from the state-evolution module.
        for variant in [Variant::Ams, Variant::Fmm] {
            let chi = variant.chi();
            let k = 8;
            let curve = run_recursion(1.5, 0.3, chi, k, DEFAULT_QUAD_ORDER).unwrap();
            let mut worst = Vec::new();
            for seed in 0..5 {
                let inst = make_instance(&params(1000, variant), seed).unwrap();
                let t = run_amp_z2(&inst, k).unwrap();
                let gap = (0..k)
                    .map(|s| (overlap_q(t.m.column(s)) - curve.overlaps[s]).abs())
                    .fold(0.0f64, f64::max);
                worst.push(gap);
            }
            worst.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = worst[worst.len() / 2];
            assert!(median <= 0.05, "{variant}: median max_s |Q - q| = {median}");
        }
    }

    #[test]
    fn spike_overlap_tracks_q() {
        let k = 8;
        let curve = run_recursion(1.5, 0.3, 1.0, k, DEFAULT_QUAD_ORDER).unwrap();
        let mut gaps = Vec::new();
        for seed in 0..5 {
            let inst = make_instance(&params(1000, Variant::Ams), seed).unwrap();
            let t = run_amp_z2(&inst, k).unwrap();
            let gap = (0..k)
                .map(|s| (t.m.column(s).dot(&inst.x) / 1000.0 - curve.overlaps[s]).abs())
                .fold(0.0f64, f64::max);
            gaps.push(gap);
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(gaps[gaps.len() / 2] <= 0.05, "median {:?}", gaps);
    }

    #[test]
    fn zero_denoiser_gives_zero_fields() {
        let mut dens: Vec<Denoiser> = Vec::new();
        for _ in 0..3 {
            dens.push(Box::new(|_: &[f64]| 0.0));
        }
        let n = 50;
        let w = crate::model::sample_goe(n, 2).unwrap();
        let g0 = crate::rng::standard_normal_vec(2, "g0", n);
        let b = Array2::zeros((3, 3));
        let t = run_amp_generic(&dens, b.view(), w.view(), g0.view(), 3).unwrap();
        for s in 1..=3 {
            assert!(t.g.column(s).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn z2_fields_satisfy_rank_one_absorption_identity() {
        // Using Y = (lambda/n) x x^T + W: the Z2 fields satisfy
        // lambda W m^s = g^{s+1} + lambda^2 (1 - Q(m^s)) m^{s-1} exactly,
        // i.e. the generic-iteration field with the spike term absorbed.
        let n = 400;
        let k = 4;
        let inst = make_instance(&params(n, Variant::Ams), 7).unwrap();
        let z2 = run_amp_z2(&inst, k).unwrap();
        let lambda = inst.params.lambda;
        for s in 0..k {
            let wm = inst.w.dot(&z2.m.column(s).to_owned()) * lambda;
            let prev = if s == 0 {
                Array1::zeros(n)
            } else {
                z2.m.column(s - 1).to_owned()
            };
            let q = overlap_q(z2.m.column(s));
            let rhs = &z2.g.column(s) + &(&prev * (lambda * lambda * (1.0 - q)));
            let dev = (&wm - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dev < 1e-10, "rank-one absorption identity at s={s}: {dev}");
        }
    }

    #[test]
    fn generic_trace_geometry_matches_its_state_evolution() {
        // (1/n) M^T M from the generic run approaches the generic_se K.
        let k = 4;
        let curve = run_recursion(1.5, 0.3, 1.0, k, DEFAULT_QUAD_ORDER).unwrap();
        let dens = z2_denoisers(&curve);
        let (kse, bse) = crate::se::generic_se(&dens, 150_000, 5).unwrap();
        let n = 2000;
        let w = crate::model::sample_goe(n, 31).unwrap();
        // g^0 plays the side-noise role for the Z2 embedding.
        let g0 = crate::rng::standard_normal_vec(31, "side-noise", n);
        let t = run_amp_generic(&dens, bse.view(), w.view(), g0.view(), k).unwrap();
        let mtm = t.m.t().dot(&t.m).mapv(|v| v / n as f64);
        let dev = (&mtm - &kse).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(dev < 0.12, "generic geometry vs generic SE: {dev}");
    }

    #[test]
    fn self_test_sliced_w2_is_at_monte_carlo_floor() {
        let curve = run_recursion(1.5, 0.3, 1.0, 4, DEFAULT_QUAD_ORDER).unwrap();
        let a = sample_se(&curve, 4000, 1).unwrap();
        let b = sample_se(&curve, 4000, 2).unwrap();
        let dim = 2 * 4 + 1;
        let pack = |s: &SeSample| {
            let n = s.m.nrows();
            let mut out = Array2::zeros((n, dim));
            for i in 0..n {
                for c in 0..4 {
                    out[(i, c)] = s.m[(i, c)];
                    out[(i, 4 + c)] = s.g[(i, c)];
                }
                out[(i, dim - 1)] = s.g0[i];
            }
            out
        };
        let w = sliced_w2(pack(&a).view(), pack(&b).view(), 64, 9);
        assert!(w < 0.08, "same-law sliced W2 = {w}");
    }

    #[test]
    fn empirical_joint_close_to_se_sample_for_ams() {
        let k = 6;
        let curve = run_recursion(1.5, 0.3, 1.0, k, DEFAULT_QUAD_ORDER).unwrap();
        let inst = make_instance(&params(2000, Variant::Ams), 3).unwrap();
        let t = run_amp_z2(&inst, k).unwrap();
        let s = sample_se(&curve, 20_000, 5).unwrap();
        let cmp = empirical_vs_se(&t, &curve, &s, &inst, 64, 11).unwrap();
        assert!(cmp.g_gap <= 0.12, "g_gap {}", cmp.g_gap);
        assert!(cmp.m_gap <= 0.12, "m_gap {}", cmp.m_gap);
        assert!(cmp.mg_gap <= 0.08, "mg self-consistency {}", cmp.mg_gap);
        assert!(cmp.sliced_w2 < 0.25, "sliced W2 {}", cmp.sliced_w2);
        let bound = 4.0 / (2000.0f64).sqrt();
        for (s_idx, m) in cmp.g_col_means.iter().enumerate() {
            assert!(m.abs() <= bound, "g^{} mean {}", s_idx + 1, m);
        }
        for g in &cmp.onsager_gaps {
            assert!(*g <= 0.05);
        }
        for g in &cmp.increment_gaps {
            assert!(*g <= 0.05, "increment gap {g}");
        }
    }

    #[test]
    fn fmm_joint_matches_inductive_but_not_closed_form() {
        // The chi = 0 trace agrees with the inductive covariance and
        // disagrees with the closed form by an n-independent margin.
        let k = 5;
        let curve = run_recursion(1.5, 0.3, 0.0, k, DEFAULT_QUAD_ORDER).unwrap();
        let ind = crate::se::inductive_covariance(1.5, 0.3, 0.0, k, 120).unwrap();
        let inst = make_instance(&params(2000, Variant::Fmm), 4).unwrap();
        let t = run_amp_z2(&inst, k).unwrap();
        let gtg = t.g.t().dot(&t.g).mapv(|v| v / 2000.0);
        let dev_ind = (&gtg - &ind).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let dev_closed = (&gtg - &curve.k_mat).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(dev_ind <= 0.12, "vs inductive: {dev_ind}");
        assert!(dev_closed >= 0.25, "vs closed form: {dev_closed}");
    }

    #[test]
    fn summary_rows_are_consistent() {
        let k = 3;
        let curve = run_recursion(1.5, 0.3, 1.0, k, DEFAULT_QUAD_ORDER).unwrap();
        let inst = make_instance(&params(300, Variant::Ams), 12).unwrap();
        let t = run_amp_z2(&inst, k).unwrap();
        let rows = summary_rows(&t, &curve, inst.x.view());
        assert_eq!(rows.len(), k);
        for (s, r) in rows.iter().enumerate() {
            assert_eq!(r.s, s);
            assert_abs_diff_eq!(r.q_emp, overlap_q(t.m.column(s)), epsilon = 1e-15);
            assert_abs_diff_eq!(r.onsager, t.onsager[s], epsilon = 1e-15);
        }
    }
}
