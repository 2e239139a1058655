mod common;

use common::*;
use hfm_core::harness::{toy_model_checks, DEFAULT_JITTER};
use hfm_core::numerics::grad_check;

#[test]
fn every_op_passes_finite_differences() {
    for case in op_cases() {
        let report = grad_check(&case.params, &gradcheck_cfg(), &case.loss).unwrap();
        assert!(report.passed, "{}: {report:?}", case.name);
        assert!(report.checked > 0);
    }
}

#[test]
fn whole_model_losses_pass_finite_differences() {
    let checks = toy_model_checks(&gradcheck_cfg(), DEFAULT_JITTER).unwrap();
    assert_eq!(checks.len(), 4);
    for c in checks {
        assert!(c.report.passed, "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn broken_backward_rule_is_reported() {
    fn wrong(x: f64) -> f64 {
        1.05 * (1.0 - x.tanh() * x.tanh())
    }
    let x = uniform(&[6], -1.0, 1.0, &mut rng(3));
    let report = grad_check(&[x], &gradcheck_cfg(), |t, p| {
        let y = t.map(p[0], f64::tanh, wrong);
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.01);
}
