//! Pipeline-level behavior on generated datasets.

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use relmm::{
    apply_mdm, build_completed_design, generate_complete, missing_pattern, partition_by_response,
    run_pipeline, stack_design, Method, PipelineOptions, SimConfig, ZSpec,
};

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let start = std::time::Instant::now();
    let out = f();
    eprintln!("[timing] {label}: {:?}", start.elapsed());
    out
}

/// REML recovers the generating variance components at m = 400 within
/// three (asymptotic) standard errors, across seeds. The truth is
/// Var(alpha) = 0.3^2 and Var(eps) = 0.1^2.
#[test]
fn psi_recovery_at_m400() {
    let (sa2, se2, m, t): (f64, f64, f64, f64) = (0.09, 0.01, 400.0, 5.0);
    // Large-m standard errors for a balanced random-intercept design.
    let se_alpha = (2.0 / m).sqrt() * (sa2 + se2 / t);
    let se_eps = (2.0 / (m * (t - 1.0))).sqrt() * se2;
    for seed in [101u64, 202, 303] {
        let cfg = SimConfig::table1(400, 1, seed);
        let (data, _) = generate_complete(&cfg, 0);
        let rep = run_pipeline(Method::Full, &data, &PipelineOptions::default()).unwrap();
        let psi = &rep.fit.psi_hat;
        assert!(
            (psi.g[(0, 0)] - sa2).abs() <= 3.0 * se_alpha,
            "seed {seed}: sigma_alpha2 {} vs {sa2}",
            psi.g[(0, 0)]
        );
        assert!(
            (psi.sigma_eps2 - se2).abs() <= 3.0 * se_eps,
            "seed {seed}: sigma_eps2 {} vs {se2}",
            psi.sigma_eps2
        );
    }
}

/// Predicted missing responses carry real information: their squared error
/// against the withheld truth stays below the marginal response variance.
#[test]
fn ebp_mspe_beats_marginal_variance() {
    let cfg = SimConfig::table2(100, 1, 77);
    let (full, _) = generate_complete(&cfg, 0);
    let (masked, mask) = apply_mdm(&full, &cfg, 0).unwrap();
    assert!(mask.n_missing_responses() > 0);

    let pattern = missing_pattern(&masked);
    let design = build_completed_design(&masked, &pattern, &ZSpec::default()).unwrap();
    let pred = relmm::ebp(&design, &PipelineOptions::default()).unwrap();

    // Withheld truth for each predicted cell.
    let mut se_sum = 0.0;
    for (loc, value) in pred.locations.iter().zip(pred.y_m_hat.iter()) {
        let subject = &full.subjects()[loc.subject_index];
        let occ = subject.occasions.iter().find(|o| o.t == loc.t).unwrap();
        let truth = occ.response.unwrap();
        se_sum += (value - truth) * (value - truth);
        assert!(value.is_finite());
    }
    let mspe = se_sum / pred.y_m_hat.len() as f64;

    // Variance of y around its conditional mean given the covariates is
    // sd_alpha^2 + sd_eps^2 = 0.1. The EBP must do clearly better.
    let var_y = cfg.sd_alpha * cfg.sd_alpha + cfg.sd_eps * cfg.sd_eps;
    assert!(mspe < var_y, "MSPE {mspe} not below marginal variance {var_y}");
}

/// Appending an all-zero indicator column (a pruned column) changes nothing:
/// the pruned GLS solution equals the minimum-norm solution of the unpruned
/// normal equations on the retained coordinates.
#[test]
fn pruning_soundness_zero_column_is_inert() {
    let cfg = SimConfig::table1(30, 1, 55);
    let (full, _) = generate_complete(&cfg, 0);
    let (masked, _) = apply_mdm(&full, &cfg, 0).unwrap();
    let pattern = missing_pattern(&masked);
    let design = build_completed_design(&masked, &pattern, &ZSpec::default()).unwrap();
    let vc = cfg.completion_vc();

    // Per-block GLS accumulation at fixed psi.
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    let mut ys = Vec::new();
    for (i, s) in design.subjects.iter().enumerate() {
        xs.push(design.x_block(i));
        vs.push(relmm::assemble_v(&vc, &s.z, &s.d_diag).unwrap());
        ys.push(DVector::from_iterator(s.n(), s.y.iter().map(|v| v.unwrap())));
    }
    let (b_pruned, _) = relmm::gls(&xs, &vs, &ys).unwrap();

    // The same normal equations with one extra all-zero column, solved by
    // pseudo-inverse.
    let k = design.k();
    let mut info = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for ((x, v), y) in xs.iter().zip(&vs).zip(&ys) {
        let mut xa = DMatrix::zeros(x.nrows(), k + 1);
        xa.view_mut((0, 0), (x.nrows(), k)).copy_from(x);
        let vinv = v.clone().try_inverse().unwrap();
        info += xa.transpose() * &vinv * &xa;
        rhs += xa.transpose() * &vinv * y;
    }
    let pinv = info.svd(true, true).pseudo_inverse(1e-12).unwrap();
    let b_aug = pinv * rhs;
    for j in 0..k {
        assert_relative_eq!(b_pruned[j], b_aug[j], max_relative = 1e-8);
    }
    assert!(b_aug[k].abs() < 1e-10);
}

/// Stacking matches the generator row count on a study-sized dataset.
#[test]
fn stacked_shape_matches_generator() {
    let cfg = SimConfig::table1(40, 1, 3);
    let (full, _) = generate_complete(&cfg, 0);
    let (masked, _) = apply_mdm(&full, &cfg, 0).unwrap();
    let pattern = missing_pattern(&masked);
    let design = build_completed_design(&masked, &pattern, &ZSpec::default()).unwrap();
    let stacked = stack_design(&design);
    assert_eq!(stacked.x.nrows(), 200);
    assert_eq!(stacked.x.ncols(), design.k());
    // Indicator block caps at one subject-level plus one column per occasion.
    assert!(design.d <= 6);
}

/// The observed/missing split counts agree with the generator's mask.
#[test]
fn partition_counts_match_mask() {
    let cfg = SimConfig::table2(100, 1, 5);
    let (full, _) = generate_complete(&cfg, 0);
    let (masked, mask) = apply_mdm(&full, &cfg, 0).unwrap();
    let pattern = missing_pattern(&masked);
    let design = build_completed_design(&masked, &pattern, &ZSpec::default()).unwrap();
    let part = partition_by_response(&design).unwrap();
    assert_eq!(part.n_missing, mask.n_missing_responses());
    assert_eq!(part.n_observed, 500 - mask.n_missing_responses());
}

#[test]
#[ignore = "manual probe"]
fn probe_fit_costs() {
    for m in [40usize, 100, 400] {
        let cfg = SimConfig::table2(m, 1, 424242);
        let (full, _) = generate_complete(&cfg, 0);
        let (masked, _) = apply_mdm(&full, &cfg, 0).unwrap();
        let opts = PipelineOptions::default();
        timed(&format!("FULL m={m}"), || run_pipeline(Method::Full, &full, &opts).unwrap());
        timed(&format!("CDOE m={m}"), || run_pipeline(Method::Cdoe, &masked, &opts).unwrap());
        timed(&format!("CCE  m={m}"), || run_pipeline(Method::Cce, &masked, &opts).unwrap());
        timed(&format!("CCPE m={m}"), || run_pipeline(Method::Ccpe, &masked, &opts).unwrap());
    }
}

#[test]
#[ignore = "manual probe"]
fn probe_mini_monte_carlo() {
    for (label, cfg) in [
        ("table1-m100", SimConfig::table1(100, 80, 7)),
        ("table2-m100", SimConfig::table2(100, 80, 7)),
    ] {
        let report = timed(label, || relmm::run_monte_carlo(&cfg).unwrap());
        eprintln!("{label}:\n{}", report.to_table());
        eprintln!("failures: {:?}", report.failures);
    }
}
