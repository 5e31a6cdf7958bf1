use std::collections::BTreeMap;

use fermi_sse::bath::TimeGrid;
use fermi_sse::coeffs::{CoeffTable, SolveDiagnostics};
use fermi_sse::propagator::{
    heun_step, jordan_wigner, master_rhs, propagate, DensityMatrix, MasterEquation, PropagationError, SystemOperators,
    Trajectory,
};
use fermi_sse::C64;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn complex() -> impl Strategy<Value = C64> {
    (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b)| C64::new(a, b))
}

fn hermitian(n: usize) -> impl Strategy<Value = DMatrix<C64>> {
    prop::collection::vec(complex(), n * n).prop_map(move |v| {
        let a = DMatrix::from_vec(n, n, v);
        (&a + a.adjoint()) * C64::from(0.5)
    })
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn constant_table(grid: TimeGrid, values: &[(&str, C64)]) -> CoeffTable {
    CoeffTable {
        grid,
        functions: BTreeMap::new(),
        final_row: BTreeMap::new(),
        coefficients: values.iter().map(|(l, v)| (l.to_string(), vec![*v; grid.len()])).collect(),
        diagnostics: SolveDiagnostics::default(),
    }
}

fn equation_case() -> impl Strategy<Value = (MasterEquation, usize)> {
    prop_oneof![
        Just((MasterEquation::Vacuum, 1)),
        Just((MasterEquation::Vacuum, 2)),
        Just((MasterEquation::Thermal, 1)),
        Just((MasterEquation::Double, 2)),
    ]
}

proptest! {
    #[test]
    fn jordan_wigner_operators_anticommute(h in hermitian(2)) {
        let ops = SystemOperators::from_one_body(&h).unwrap();
        prop_assert!(ops.anticommutation_error() <= 1e-15);
        let number = ops.d.iter().fold(DMatrix::zeros(4, 4), |acc, d| acc + d.adjoint() * d);
        prop_assert!(max_abs(&(&ops.h * &number - &number * &ops.h)) <= 1e-15);
        prop_assert!(max_abs(&(&ops.h - ops.h.adjoint())) <= 1e-15);
    }

    #[test]
    fn generator_is_traceless_and_hermiticity_preserving(
        (eq, n) in equation_case(),
        h in hermitian(2),
        rho in hermitian(4),
        f in prop::collection::vec(complex(), 8),
    ) {
        let h1 = h.view((0, 0), (n, n)).into_owned();
        let ops = SystemOperators::from_one_body(&h1).unwrap();
        let dim = ops.dim();
        let rho = rho.view((0, 0), (dim, dim)).into_owned();
        let f = &f[..eq.labels(n).len()];
        let out = master_rhs(eq, &ops, f, &rho).unwrap();
        prop_assert!(out.trace().norm() <= 1e-14);
        prop_assert!(max_abs(&(&out - out.adjoint())) <= 1e-14);
    }
}

#[test]
fn constant_decay_is_second_order_accurate() {
    let (w, gamma) = (3.0, 0.4);
    let grid = TimeGrid::new(2.0, 100).unwrap();
    let ops = SystemOperators::from_one_body(&DMatrix::from_element(1, 1, C64::from(w))).unwrap();
    let table = constant_table(grid, &[("F1", C64::from(0.5 * gamma)), ("F2", C64::from(0.0))]);
    let psi = DVector::from_vec(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8)]);
    let rho0 = DensityMatrix::pure(&psi, 0.0).unwrap();
    let error = |substeps: usize| {
        let traj = propagate(&rho0, &ops, MasterEquation::Thermal, &table, substeps).unwrap();
        traj.times
            .iter()
            .zip(&traj.states)
            .map(|(t, r)| {
                let p = 0.64 * (-gamma * t).exp();
                let c = C64::new(0.6, 0.0) * C64::new(0.0, -0.8) * C64::from_polar((-0.5 * gamma * t).exp(), w * t);
                (r[(1, 1)].re - p).abs().max((r[(0, 1)] - c).norm())
            })
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (error(1), error(2));
    assert!(e2 < 1e-3, "{e2:e}");
    assert!((3.5..4.5).contains(&(e1 / e2)), "ratio {}", e1 / e2);
}

#[test]
fn trace_and_hermiticity_survive_propagation() {
    let grid = TimeGrid::new(5.0, 200).unwrap();
    let h1 = DMatrix::from_row_slice(2, 2, &[C64::from(1.0), C64::new(0.3, 0.1), C64::new(0.3, -0.1), C64::from(1.5)]);
    let ops = SystemOperators::from_one_body(&h1).unwrap();
    // Equal real coefficients make the dissipator a Lindblad term in L = d_1 + d_2.
    let table = constant_table(grid, &[("F_1", C64::from(0.2)), ("F_2", C64::from(0.2))]);
    let rho0 = DensityMatrix::number_state(&[true, true], 0.0).unwrap();
    let traj = propagate(&rho0, &ops, MasterEquation::Vacuum, &table, 4).unwrap();
    assert!(traj.max_trace_error <= 1e-13);
    assert!(traj.max_hermiticity_error <= 1e-14);
    assert!(traj.min_eigenvalue >= -1e-10);
}

#[test]
fn gain_violates_positivity_and_aborts() {
    let grid = TimeGrid::new(5.0, 50).unwrap();
    let ops = SystemOperators::from_one_body(&DMatrix::from_element(1, 1, C64::from(1.0))).unwrap();
    let table = constant_table(grid, &[("F1", C64::from(-0.5)), ("F2", C64::from(0.0))]);
    let rho0 = DensityMatrix::number_state(&[true], 0.0).unwrap();
    match propagate(&rho0, &ops, MasterEquation::Thermal, &table, 1) {
        Err(PropagationError::PositivityViolation { t, min_eig }) => {
            assert!(t > 0.0 && min_eig < -1e-8);
        }
        other => panic!("expected a positivity violation, got {other:?}"),
    }
}

#[test]
fn step_rejects_bad_coefficients() {
    let ops = SystemOperators::from_one_body(&DMatrix::from_element(1, 1, C64::from(1.0))).unwrap();
    let rho = DensityMatrix::number_state(&[true], 0.0).unwrap();
    let nan = [C64::new(f64::NAN, 0.0), C64::from(0.0)];
    let ok = [C64::from(0.1), C64::from(0.0)];
    assert!(matches!(
        heun_step(MasterEquation::Thermal, &rho, &nan, &ok, &ops, 0.1),
        Err(PropagationError::NonFiniteCoefficient(_))
    ));
    assert!(matches!(
        heun_step(MasterEquation::Thermal, &rho, &ok[..1], &ok[..1], &ops, 0.1),
        Err(PropagationError::CoefficientCount { expected: 2, got: 1 })
    ));
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let missing = constant_table(grid, &[("F1", C64::from(0.1))]);
    assert!(matches!(propagate(&rho, &ops, MasterEquation::Thermal, &missing, 1), Err(PropagationError::Coeff(_))));
}

#[test]
fn shape_validation() {
    assert!(matches!(DensityMatrix::new(DMatrix::identity(3, 3), 0.0), Err(PropagationError::BadDimension(3, 3))));
    assert!(matches!(DensityMatrix::new(DMatrix::zeros(2, 4), 0.0), Err(PropagationError::BadDimension(2, 4))));
    assert!(matches!(SystemOperators::from_one_body(&DMatrix::identity(3, 3)), Err(PropagationError::TooManyModes(3))));
    assert_eq!(jordan_wigner(3).len(), 3);
}

#[test]
fn pure_states_are_normalized() {
    let psi = DVector::from_vec(vec![C64::new(3.0, 0.0), C64::new(0.0, 4.0)]);
    let rho = DensityMatrix::pure(&psi, 0.0).unwrap();
    assert!((rho.trace() - C64::from(1.0)).norm() <= 1e-15);
    assert!((rho.rho[(0, 1)] - C64::new(0.0, -0.48)).norm() <= 1e-15);
    assert!(rho.min_eigenvalue().abs() <= 1e-15);
}

#[test]
fn trajectory_csv_layout() {
    let mk = |dim: usize| Trajectory {
        times: vec![0.0, 1.0],
        states: vec![DMatrix::identity(dim, dim) * C64::from(1.0 / dim as f64); 2],
        max_trace_error: 0.0,
        max_hermiticity_error: 0.0,
        min_eigenvalue: 0.0,
    };
    let text = |t: Trajectory| {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    };
    let single = text(mk(2));
    assert_eq!(single.lines().next().unwrap(), "t,rho_11,trace,min_eig");
    assert_eq!(single.lines().nth(2).unwrap(), "1.00000000000e0,5.00000000000e-1,1.00000000000e0,5.00000000000e-1");
    let double = text(mk(4));
    assert_eq!(
        double.lines().next().unwrap(),
        "t,p_00,p_01,p_10,p_11,abs_rho_01,abs_rho_02,abs_rho_03,abs_rho_12,abs_rho_13,abs_rho_23,trace,min_eig"
    );
    assert_eq!(double.lines().count(), 3);
}
