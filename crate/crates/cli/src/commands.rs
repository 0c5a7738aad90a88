//! Subcommand pipelines. Each returns the process exit code: 0 all checks
//! pass, 1 a check failed, 2 parameter-regime error, 3 I/O error (the
//! mapping from error kinds happens in `exit_code_for`).

use crate::config::ExperimentConfig;
use crate::criteria;
use crate::report::{aggregate, timestamp, write_outputs, CriterionOutcome};
use anyhow::Context;
use serde_json::json;
use std::time::Instant;
use tapscope_core::amp::{run_amp_z2, summary_rows};
use tapscope_core::maxmin::{default_alpha_v_grid, ibp_identities, margin_search, schur_certificate, ScalarParams};
use tapscope_core::model::{make_instance, Variant, GOE_CONVENTION};
use tapscope_core::quad::tanh_moment;
use tapscope_core::se::{run_recursion, sample_se, solve_fixed_point};
use tapscope_core::sf::{build_conditioning, compare_objectives, verify_conditional_identity};
use tapscope_core::svg::{line_plot, Series};
use tapscope_core::tap::{convexity_probe, find_stationary_point, stationary_point_restarts, TapContext};

pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<tapscope_core::Error>() {
            return match core {
                tapscope_core::Error::Regime(_) | tapscope_core::Error::InvalidParam(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    // config-level validation failures behave like parameter errors
    let msg = format!("{err:#}");
    if msg.contains("config") || msg.contains("unknown") || msg.contains("must be") {
        2
    } else {
        1
    }
}

fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    json!({
        "config": cfg,
        "goe_convention": GOE_CONVENTION,
        "quadrature_order": cfg.run.quadrature_order,
        "timestamp": timestamp(),
    })
}

fn print_outcomes(outcomes: &[CriterionOutcome]) -> bool {
    let mut all = true;
    for o in outcomes {
        println!("{}", o.line());
        all &= o.pass;
    }
    all
}

/// state evolution: recursion, fixed point, identities.
pub fn cmd_se(cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let (lam, g0, chi) = (cfg.model.lambda, cfg.model.gamma0, variant.chi());
    let order = cfg.run.quadrature_order;
    let curve = run_recursion(lam, g0, chi, cfg.run.k, order)?;
    let fp = solve_fixed_point(lam, g0, chi, order)?;
    let q_gap = (fp.q_inf - tanh_moment(fp.gamma_inf, 1, order)).abs();
    let b_gap = (fp.b_inf - tanh_moment(fp.gamma_inf, 3, order)).abs();
    let ok = fp.residual <= 1e-10 && q_gap <= 1e-8 && b_gap <= 1e-8;
    let mut report = config_echo(cfg);
    report["rows"] = json!(curve
        .rows()
        .iter()
        .map(|&(s, g, q)| json!({"s": s, "gamma": g, "q": q}))
        .collect::<Vec<_>>());
    report["fixed_point"] = json!({
        "gamma_inf": fp.gamma_inf,
        "q_inf": fp.q_inf,
        "b_inf": fp.b_inf,
        "k_inf": fp.k_inf,
        "residual": fp.residual,
        "q_identity_gap": q_gap,
        "b_identity_gap": b_gap,
        "lambda2_one_minus_q": lam * lam * (1.0 - fp.q_inf),
    });
    let mut csv = String::from("s,gamma_s,q_s\n");
    for (s, g, q) in curve.rows() {
        csv.push_str(&format!("{s},{g:.17e},{q:.17e}\n"));
    }
    let pts: Vec<(f64, f64)> = curve
        .gammas
        .iter()
        .enumerate()
        .map(|(s, &g)| (s as f64, g))
        .collect();
    let svg = line_plot(
        &format!("state evolution, lambda={lam} gamma0={g0} {variant}"),
        "s",
        "gamma_s",
        &[Series { name: "gamma", points: &pts }],
    );
    write_outputs(
        &cfg.output.dir,
        "se",
        &report,
        Some(&csv),
        Some(&svg),
        &cfg.output.formats,
    )?;
    println!(
        "gamma_inf {:.12}  q_inf {:.12}  b_inf {:.12}  residual {:.2e}",
        fp.gamma_inf, fp.q_inf, fp.b_inf, fp.residual
    );
    Ok(if ok { 0 } else { 1 })
}

/// AMP runs with per-seed summaries and the state-evolution comparison.
pub fn cmd_amp(cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let order = cfg.run.quadrature_order;
    let curve = run_recursion(cfg.model.lambda, cfg.model.gamma0, variant.chi(), cfg.run.k, order)?;
    let mut csv = String::from("seed,s,q_emp,q_pred,overlap,onsager,g_norm2_over_n\n");
    let mut per_seed = Vec::new();
    let (mut m_gaps, mut g_gaps, mut w2s) = (vec![], vec![], vec![]);
    for seed in cfg.run.seeds.seeds() {
        let inst = make_instance(&cfg.model_params()?, seed)?;
        let trace = run_amp_z2(&inst, cfg.run.k)?;
        let sample = sample_se(&curve, cfg.run.se_samples, seed ^ 0xabcd)?;
        let cmp = tapscope_core::amp::empirical_vs_se(&trace, &curve, &sample, &inst, 64, seed ^ 0x77)?;
        for r in summary_rows(&trace, &curve, inst.x.view()) {
            csv.push_str(&format!(
                "{seed},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                r.s, r.q_emp, r.q_pred, r.overlap_with_spike, r.onsager, r.g_norm2_over_n
            ));
        }
        m_gaps.push(cmp.m_gap);
        g_gaps.push(cmp.g_gap);
        w2s.push(cmp.sliced_w2);
        per_seed.push(json!({"seed": seed, "comparison": cmp}));
    }
    let mut report = config_echo(cfg);
    report["per_seed"] = json!(per_seed);
    report["aggregates"] = json!({
        "m_gap": aggregate(&m_gaps),
        "g_gap": aggregate(&g_gaps),
        "sliced_w2": aggregate(&w2s),
    });
    write_outputs(&cfg.output.dir, "amp", &report, Some(&csv), None, &cfg.output.formats)?;
    println!(
        "median gaps: fields-vs-K {:.4}, iterates-vs-K {:.4}, sliced-W2 {:.4}",
        aggregate(&g_gaps).median,
        aggregate(&m_gaps).median,
        aggregate(&w2s).median
    );
    Ok(0)
}

/// Convexity probe around the late iterate, plus the stationary point.
pub fn cmd_tap_probe(cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let order = cfg.run.quadrature_order;
    let fp = solve_fixed_point(cfg.model.lambda, cfg.model.gamma0, variant.chi(), order)?;
    let solver = cfg.eigensolver()?;
    let mut csv = String::from("seed,point,radius,lambda_min\n");
    let mut per_seed = Vec::new();
    let mut mins = Vec::new();
    for seed in cfg.run.seeds.seeds() {
        let inst = make_instance(&cfg.model_params()?, seed)?;
        let trace = run_amp_z2(&inst, cfg.run.k)?;
        let ctx = TapContext::new(&inst, fp.q_inf)?;
        let center = trace.m.column(cfg.run.k - 1);
        let (mstar, ndiag) = find_stationary_point(&ctx, center, cfg.run.epsilon, 1e-10, 60)?;
        let (_, spread) =
            stationary_point_restarts(&ctx, center, cfg.run.epsilon, 1e-10, 10, seed ^ 0x44)?;
        let rep = convexity_probe(
            &ctx,
            center,
            cfg.run.k,
            cfg.run.epsilon,
            cfg.run.probe_points,
            Some(mstar.view()),
            solver,
            seed ^ 0x99,
        )?;
        for (i, p) in rep.points.iter().enumerate() {
            csv.push_str(&format!("{seed},{i},{:.8e},{:.10e}\n", p.radius, p.lambda_min));
        }
        mins.push(rep.min_lambda);
        per_seed.push(json!({
            "seed": seed,
            "probe": rep,
            "newton": ndiag,
            "restart_spread": spread,
        }));
    }
    let mut report = config_echo(cfg);
    report["per_seed"] = json!(per_seed);
    report["aggregates"] = json!({"min_lambda": aggregate(&mins)});
    write_outputs(&cfg.output.dir, "tap_probe", &report, Some(&csv), None, &cfg.output.formats)?;
    println!("min probed lambda_min: median {:.4}", aggregate(&mins).median);
    Ok(0)
}

/// Conditional-identity verification and the n-sweep of deviation trends.
pub fn cmd_sf_verify(cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let order = cfg.run.quadrature_order;
    let fp = solve_fixed_point(cfg.model.lambda, cfg.model.gamma0, variant.chi(), order)?;
    let mut csv = String::from("n,seed,b_deviation,t_deviation,constraint_rel,reconstruction_rel\n");
    let mut rows = Vec::new();
    let mut worst_exact = 0.0f64;
    for &n in &cfg.run.sf_n_grid {
        let mut bs = vec![];
        let mut ts = vec![];
        for seed in cfg.run.seeds.seeds() {
            let mut p = cfg.model_params()?;
            p.n = n;
            let inst = make_instance(&p, seed)?;
            let trace = run_amp_z2(&inst, cfg.run.sf_k)?;
            let cond = build_conditioning(&trace)?;
            let res = verify_conditional_identity(inst.w.view(), &cond)?;
            worst_exact = worst_exact
                .max(res.constraint_rel)
                .max(res.symmetry_rel)
                .max(res.coefficient_rel)
                .max(res.reconstruction_rel);
            let b = cond.b_deviation_opnorm()?;
            let t = cond.t_deviation_opnorm()?;
            csv.push_str(&format!(
                "{n},{seed},{b:.8e},{t:.8e},{:.3e},{:.3e}\n",
                res.constraint_rel, res.reconstruction_rel
            ));
            bs.push(b);
            ts.push(t);
        }
        rows.push(json!({
            "n": n,
            "b_deviation": aggregate(&bs),
            "t_deviation": aggregate(&ts),
        }));
    }
    // comparison of the two suprema at the configured model size
    let inst = make_instance(&cfg.model_params()?, cfg.run.seeds.seeds()[0])?;
    let trace = run_amp_z2(&inst, cfg.run.k.max(cfg.run.sf_k))?;
    let cond = build_conditioning(&trace)?;
    let comparison = compare_objectives(
        &inst,
        &trace,
        &cond,
        fp.q_inf,
        trace.m.column(trace.k - 1),
        cfg.run.restarts,
        400,
        0x5151,
    )?;
    let mut report = config_echo(cfg);
    report["sweep"] = json!(rows);
    report["worst_exact_identity_rel"] = json!(worst_exact);
    report["comparison"] = json!(comparison);
    write_outputs(&cfg.output.dir, "sf_verify", &report, Some(&csv), None, &cfg.output.formats)?;
    println!(
        "worst exact-identity residual {:.2e}; noise sup {:.4} vs surrogate sup {:.4}",
        worst_exact, comparison.noise_side_sup, comparison.surrogate_side_sup
    );
    Ok(if worst_exact <= 1e-8 { 0 } else { 1 })
}

/// The scalar certificate.
pub fn cmd_maxmin(cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let order = cfg.run.quadrature_order;
    let fp = solve_fixed_point(cfg.model.lambda, cfg.model.gamma0, variant.chi(), order)?;
    let sp = ScalarParams::from_fixed_point(
        cfg.model.lambda,
        cfg.model.gamma0,
        variant.chi(),
        &fp,
        order,
    )?;
    let ibp = ibp_identities(&sp)?;
    let schur = schur_certificate(&sp)?;
    let margin = margin_search(&sp, &default_alpha_v_grid())?;
    let mut csv = String::from("alpha_v,margin,origin_is_sup,inner_interior\n");
    for r in &margin.rows {
        csv.push_str(&format!(
            "{},{:.10e},{},{}\n",
            r.alpha_v, r.margin, r.origin_is_sup, r.inner_interior
        ));
    }
    let pts: Vec<(f64, f64)> = margin
        .rows
        .iter()
        .filter(|r| r.margin.is_finite())
        .map(|r| (r.alpha_v, r.margin))
        .collect();
    let svg = line_plot(
        &format!(
            "certificate margin, lambda={} gamma0={} {variant}",
            cfg.model.lambda, cfg.model.gamma0
        ),
        "alpha_v",
        "margin",
        &[Series { name: "-L(0,0;0,0,a)", points: &pts }],
    );
    let mut report = config_echo(cfg);
    report["fixed_point"] = json!(fp);
    report["ibp_residuals"] = json!(ibp);
    report["schur"] = json!(schur);
    report["margin"] = json!(margin);
    write_outputs(&cfg.output.dir, "maxmin", &report, Some(&csv), Some(&svg), &cfg.output.formats)?;
    println!(
        "c1 {:.4}, c2 {:.4}, c1+q c2 {:.4}, margin {:.4} at alpha_v {:.2}",
        schur.c1, schur.c2, schur.schur_value, margin.margin_c, margin.alpha_v_star
    );
    let ok = ibp.iter().all(|&r| r <= 1e-7) && schur.verdict && margin.feasible;
    Ok(if ok { 0 } else { 1 })
}

/// The full pipeline at the configured scale, with every check evaluated.
pub fn cmd_full(cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let order = cfg.run.quadrature_order;
    let seeds = cfg.run.seeds.seeds();
    let start = Instant::now();
    let mut outcomes: Vec<CriterionOutcome> = Vec::new();
    let mut stage_errors: Vec<String> = Vec::new();

    let mut run_stage = |name: &str,
                         res: anyhow::Result<Vec<CriterionOutcome>>,
                         outcomes: &mut Vec<CriterionOutcome>,
                         stage_errors: &mut Vec<String>| {
        match res {
            Ok(mut o) => outcomes.append(&mut o),
            Err(e) => stage_errors.push(format!("stage {name}: {e:#}")),
        }
    };

    run_stage("fixed-point", criteria::c1_fixed_point(order), &mut outcomes, &mut stage_errors);
    run_stage(
        "amp-se",
        criteria::c2_amp_se(
            cfg.model.n,
            cfg.run.k,
            &seeds,
            cfg.model.lambda,
            cfg.model.gamma0,
            order,
            &[variant],
        ),
        &mut outcomes,
        &mut stage_errors,
    );
    run_stage(
        "exact-identities",
        criteria::c3_exact_identities(
            cfg.model.n,
            cfg.run.k,
            &seeds,
            cfg.model.lambda,
            cfg.model.gamma0,
            &[variant],
        )
        .map(|o| vec![o]),
        &mut outcomes,
        &mut stage_errors,
    );
    run_stage(
        "sf-trends",
        criteria::c4_sf_trends(
            &cfg.run.sf_n_grid,
            cfg.run.sf_k,
            &seeds,
            cfg.model.lambda,
            cfg.model.gamma0,
            variant,
        ),
        &mut outcomes,
        &mut stage_errors,
    );
    run_stage(
        "landscape",
        criteria::c56_landscape(
            cfg.model.n,
            cfg.run.k,
            cfg.run.epsilon,
            cfg.run.probe_points,
            &seeds,
            cfg.model.lambda,
            cfg.model.gamma0,
            order,
            cfg.eigensolver()?,
            &[variant],
        ),
        &mut outcomes,
        &mut stage_errors,
    );
    run_stage(
        "derivatives",
        criteria::c7_gradient_hessian(cfg.model.n.min(500), cfg.model.lambda, cfg.model.gamma0, order),
        &mut outcomes,
        &mut stage_errors,
    );
    run_stage("certificate", criteria::c8_certificate(order), &mut outcomes, &mut stage_errors);
    run_stage(
        "dominance",
        criteria::c9_dominance(
            cfg.model.n,
            cfg.run.k,
            &seeds,
            cfg.model.lambda,
            cfg.model.gamma0,
            order,
            cfg.run.restarts,
            variant,
        ),
        &mut outcomes,
        &mut stage_errors,
    );

    let all_pass = print_outcomes(&outcomes) && stage_errors.is_empty();
    for e in &stage_errors {
        eprintln!("{e}");
    }
    let mut report = config_echo(cfg);
    report["criteria"] = json!(outcomes);
    report["stage_errors"] = json!(stage_errors);
    report["wall_ms"] = json!(start.elapsed().as_millis());
    let mut csv = String::from("criterion,pass,value,threshold,runtime_ms\n");
    for o in &outcomes {
        csv.push_str(&format!(
            "{},{},{:.10e},{:.3e},{}\n",
            o.name, o.pass, o.value, o.threshold, o.runtime_ms
        ));
    }
    write_outputs(&cfg.output.dir, "full", &report, Some(&csv), None, &cfg.output.formats)?;
    Ok(if all_pass { 0 } else { 1 })
}

/// Sweep over lambda (and optionally n): fixed point, certificate, and a
/// one-seed iterate comparison per grid point.
pub fn cmd_sweep(cfg: &ExperimentConfig, lambdas: &[f64], ns: &[usize]) -> anyhow::Result<i32> {
    cfg.validate()?;
    let variant = cfg.variant()?;
    let order = cfg.run.quadrature_order;
    let mut csv = String::from("lambda,n,gamma_inf,q_inf,b_inf,c2,schur_value,margin,q_gap_one_seed\n");
    let mut rows = Vec::new();
    let ns_eff: Vec<Option<usize>> = if ns.is_empty() {
        vec![None]
    } else {
        ns.iter().map(|&n| Some(n)).collect()
    };
    for &lam in lambdas {
        let fp = match solve_fixed_point(lam, cfg.model.gamma0, variant.chi(), order) {
            Ok(fp) => fp,
            Err(tapscope_core::Error::Regime(msg)) => {
                rows.push(json!({"lambda": lam, "regime_error": msg}));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let sp = ScalarParams::from_fixed_point(lam, cfg.model.gamma0, variant.chi(), &fp, order)?;
        let schur = schur_certificate(&sp)?;
        let margin = margin_search(&sp, &default_alpha_v_grid())?;
        for n_opt in &ns_eff {
            let q_gap = if let Some(n) = n_opt {
                let mut p = cfg.model_params()?;
                p.n = *n;
                p.lambda = lam;
                let inst = make_instance(&p, cfg.run.seeds.seeds()[0])?;
                let trace = run_amp_z2(&inst, cfg.run.k)?;
                let curve = run_recursion(lam, cfg.model.gamma0, variant.chi(), cfg.run.k, order)?;
                (0..cfg.run.k)
                    .map(|s| (tapscope_core::amp::overlap_q(trace.m.column(s)) - curve.overlaps[s]).abs())
                    .fold(0.0f64, f64::max)
            } else {
                f64::NAN
            };
            csv.push_str(&format!(
                "{lam},{},{:.8e},{:.8e},{:.8e},{:.6e},{:.6e},{:.6e},{:.4e}\n",
                n_opt.map(|n| n.to_string()).unwrap_or_default(),
                fp.gamma_inf,
                fp.q_inf,
                fp.b_inf,
                schur.c2,
                schur.schur_value,
                margin.margin_c,
                q_gap
            ));
            rows.push(json!({
                "lambda": lam,
                "n": n_opt,
                "fixed_point": fp,
                "c2": schur.c2,
                "schur_value": schur.schur_value,
                "margin": margin.margin_c,
                "q_gap_one_seed": if q_gap.is_nan() { None } else { Some(q_gap) },
            }));
        }
    }
    let mut report = config_echo(cfg);
    report["sweep"] = json!(rows);
    write_outputs(&cfg.output.dir, "sweep", &report, Some(&csv), None, &cfg.output.formats)?;
    println!("sweep complete: {} grid rows", rows.len());
    Ok(0)
}

/// Shared helper for tests: run `cmd_full` against a smoke-sized config.
pub fn smoke_config(n: usize, seeds: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n = n;
    cfg.run.seeds = crate::config::SeedSpec::Range { start: 0, count: seeds };
    cfg.run.probe_points = 4;
    cfg.run.k = 6;
    cfg.run.sf_n_grid = vec![n.min(200), n];
    cfg.run.sf_k = 3;
    cfg.run.restarts = 4;
    cfg.run.se_samples = 2000;
    cfg
}

pub use crate::config::SeedSpec;

/// Byte-stable JSON for determinism comparisons: serialize with the volatile
/// timestamp field removed.
pub fn stable_json(v: &serde_json::Value) -> String {
    let mut v = v.clone();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
    serde_json::to_string_pretty(&v).unwrap()
}

/// Read a report back and strip the timestamp, for determinism tests.
pub fn stable_report(path: &std::path::Path) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(stable_json(&v))
}
