use std::sync::Arc;

use nalgebra::DMatrix;
use slowfast::harness::examples::{family, vdp_branch, vdp_sheet};
use slowfast::harness::{build_system, ExampleId, ExampleParams};
use slowfast::{
    augment_epsilon, eval_r0, localize, CutoffSpec, FastSlowSystem, FastState, GridDomain, GridFunction, Norm, SlowFastError,
    SlowState,
};

#[test]
fn remainder_of_the_scalar_examples() {
    let q1 = build_system(ExampleId::Q1, &ExampleParams::for_example(ExampleId::Q1), 0.1).unwrap();
    let y = SlowState::new(vec![0.5], q1.domain()).unwrap();
    let r = eval_r0(q1.as_ref(), &FastState::new(vec![3.0], Norm::Euclidean), &y).unwrap();
    assert!((r.coords[0] - 0.25).abs() < 1e-15);
    assert!(SlowState::new(vec![1.5], q1.domain()).is_err());
    let l2 = build_system(ExampleId::L2, &ExampleParams::for_example(ExampleId::L2), 0.1).unwrap();
    let y = SlowState::new(vec![-0.2], l2.domain()).unwrap();
    assert_eq!(eval_r0(l2.as_ref(), &FastState::new(vec![0.7], Norm::Euclidean), &y).unwrap().coords, vec![0.0]);
}

#[test]
fn epsilon_as_a_slow_coordinate() {
    let fam = family(ExampleId::L2, &ExampleParams::for_example(ExampleId::L2)).unwrap();
    let aug = augment_epsilon(fam.clone(), (0.0, 0.2)).unwrap();
    assert_eq!((aug.m(), aug.n()), (1, 2));
    assert_eq!(aug.domain().upper, vec![1.0, 0.2]);
    let mut g = [0.0; 2];
    aug.g(&[2.0], &[0.3, 0.15], &mut g);
    assert!((g[0] - 0.3).abs() < 1e-15 && g[1] == 0.0);
    let (mut dx, mut dy) = (DMatrix::zeros(2, 1), DMatrix::zeros(2, 2));
    aug.jac_g(&[2.0], &[0.3, 0.15], &mut dx, &mut dy).unwrap();
    assert!((dx[(0, 0)] - 0.15).abs() < 1e-12 && (dy[(0, 1)] - 2.0).abs() < 1e-6 && dy[(1, 1)] == 0.0);
    assert!(augment_epsilon(fam, (0.2, 0.2)).is_err());
}

#[test]
fn localized_van_der_pol() {
    let params = ExampleParams::for_example(ExampleId::VdpCut);
    let cut = build_system(ExampleId::VdpCut, &params, 0.0).unwrap();
    let mut f = [0.0];
    for y in [0.0, 0.7, 2.0] {
        cut.f(&[0.0], &[y], &mut f);
        assert!(f[0].abs() < 1e-12, "y={y}: {}", f[0]);
    }
    let eps = build_system(ExampleId::VdpCut, &params, 0.1).unwrap();
    let far = |x: f64| {
        let mut out = [0.0];
        eps.f(&[x], &[1.0], &mut out);
        let mut a = DMatrix::zeros(1, 1);
        eps.a0(&[1.0], &mut a);
        out[0] - a[(0, 0)] * x
    };
    let r = params.radius;
    assert!((far(1.5 * r) - far(3.0 * r)).abs() < 1e-14);
    assert!((far(-2.0 * r) - far(1.5 * r)).abs() < 1e-14);
    let h = vdp_branch(1.0);
    assert!((h.powi(3) / 3.0 - h - 1.0).abs() < 1e-12 && h > 1.0);
}

#[test]
fn localize_rejects_a_wrong_sheet() {
    let fam = family(ExampleId::VdpCut, &ExampleParams::for_example(ExampleId::VdpCut)).unwrap();
    let base = Arc::new(slowfast::AtEpsilon::new(fam, 0.0));
    let nodes = GridDomain::interval(0.0, 2.0, 5).unwrap();
    let wrong = Arc::new(GridFunction::from_fn(nodes.clone(), 1, |_, out| out[0] = 1.0));
    let err = localize(base.clone(), wrong, &nodes, 0.05, CutoffSpec::default(), 1e-10);
    assert!(matches!(err, Err(SlowFastError::Precondition(_))));
    assert!(localize(base.clone(), Arc::new(vdp_sheet()), &nodes, 0.0, CutoffSpec::default(), 1e-10).is_err());
    assert!(localize(base, Arc::new(vdp_sheet()), &nodes, 0.05, CutoffSpec::default(), 1e-10).is_ok());
}

#[test]
fn cutoff_profile() {
    let c = CutoffSpec::default();
    assert_eq!(c.value(0.3), 1.0);
    assert_eq!(c.value(1.2), 0.0);
    let mid = c.value(0.75);
    assert!((mid - 0.5).abs() < 1e-12);
    let mut prev = 1.0;
    for i in 0..=100 {
        let v = c.value(0.5 + 0.005 * i as f64);
        assert!(v <= prev + 1e-15);
        prev = v;
    }
}
