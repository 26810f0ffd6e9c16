use grf::selfcheck::{logdet_error, run_selfcheck, SelfcheckConfig};

fn small(seed: u64) -> SelfcheckConfig {
    SelfcheckConfig {
        seed,
        product_norm_instances: 500,
        spectrum_instances: 500,
        lipschitz_instances: 500,
        logdet_blocks: 10,
        inversion_instances: 50,
        inject_over_budget: false,
    }
}

#[test]
fn fresh_build_passes_every_suite() {
    let report = run_selfcheck(&small(0));
    assert!(report.passed(), "{}", report.render());
    assert_eq!(report.suites.len(), 5);
}

#[test]
fn over_budget_weight_fails_lipschitz_only() {
    let report = run_selfcheck(&SelfcheckConfig {
        inject_over_budget: true,
        ..small(1)
    });
    assert!(!report.passed());
    for s in &report.suites {
        assert_eq!(s.passed(), s.name != "lipschitz", "{}", report.render());
    }
    let t1 = report
        .suites
        .iter()
        .find(|s| s.name == "lipschitz")
        .unwrap();
    assert_eq!(t1.violations, t1.instances);
    assert!(report.render().contains("FAIL"));
}

#[test]
fn pinned_seed_gives_identical_text() {
    assert_eq!(
        run_selfcheck(&small(7)).render(),
        run_selfcheck(&small(7)).render()
    );
}

#[test]
fn logdet_tolerance_edges() {
    assert!((logdet_error(1.02, 1.0) - 1.0).abs() < 1e-12);
    assert!((logdet_error(0.11, 0.1) - 1.0).abs() < 1e-12);
    assert!(logdet_error(-2.0, -2.02) < 1.0);
}
