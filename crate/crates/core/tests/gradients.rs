mod support;

use support::gradients::{self, MIN_PASS_FRACTION, WORST_TOL};

#[test]
fn finite_differences_agree_with_backward_passes() {
    let checks = gradients::run(3);
    for c in &checks {
        eprintln!("{:<28} {:>5} checked, {:>5} within, worst {:.2e}", c.name, c.checked, c.within, c.worst);
    }
    let (checked, within, worst) = gradients::summarize(&checks);
    assert!(within as f64 >= MIN_PASS_FRACTION * checked as f64, "{within}/{checked} within tolerance");
    assert!(worst < WORST_TOL, "worst relative error {worst:e}");
    assert!(checks.iter().any(|c| c.name == "two-module network" && c.checked > 500));
    assert!(checks.iter().all(|c| c.cancelled_bias_worst < 1e-12));
}

#[test]
fn relative_error_floor() {
    assert_eq!(gradients::rel_error(0.0, 0.0), 0.0);
    assert!((gradients::rel_error(1.0, 1.0 + 1e-7) - 1e-7).abs() < 1e-12);
    assert_eq!(gradients::rel_error(1e-12, -1e-11), 0.0);
    assert!((gradients::rel_error(1e-3, 1.1e-3) - 1e-4 / 1.1e-3).abs() < 1e-12);
}
