use fermi_sse::bath::{BathSpec, Mode, OmegaGrid, SpectralDensity, TimeGrid};
use fermi_sse::coeffs::{solve, CoeffError, CoeffTable, FixedPointMethod, ModelSpec, SolverOptions};
use fermi_sse::oracle::{vacuum_f_exact, OneBodyOracle};
use fermi_sse::C64;

const OMEGA0: f64 = 3e-5;

fn opts() -> SolverOptions {
    SolverOptions { keep_tables: false, ..SolverOptions::default() }
}

fn few_modes() -> SpectralDensity {
    SpectralDensity::discrete(vec![Mode::new(2.7e-5, 0.6e-6), Mode::new(3.1e-5, 0.8e-6), Mode::new(3.4e-5, 0.5e-6)])
        .unwrap()
}

fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn max_norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn coefficient<'a>(t: &'a CoeffTable, label: &str) -> &'a [C64] {
    t.coefficient(label).unwrap()
}

#[test]
fn decoupled_bath_gives_vanishing_coefficients() {
    let d = SpectralDensity::discrete(vec![Mode::new(2.9e-5, 0.0), Mode::new(3.2e-5, 0.0)]).unwrap();
    let grid = TimeGrid::new(1e6, 50).unwrap();
    let vac = solve(&ModelSpec::ManyFermionVacuum { omegas: vec![OMEGA0], bath: BathSpec::vacuum(d.clone()) }, &grid, &opts()).unwrap();
    assert_eq!(max_norm(coefficient(&vac, "F_1")), 0.0);
    let th = BathSpec::new(d, 0.1, 3e-5).unwrap();
    let thermal = solve(&ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: th }, &grid, &opts()).unwrap();
    assert_eq!(max_norm(coefficient(&thermal, "F1")), 0.0);
    assert_eq!(max_norm(coefficient(&thermal, "F2")), 0.0);
}

#[test]
fn resonant_single_mode_follows_tangent() {
    let g = 1e-6;
    let d = SpectralDensity::discrete(vec![Mode::new(OMEGA0, g)]).unwrap();
    let grid = TimeGrid::new(1.2 / g, 1200).unwrap();
    let table = solve(&ModelSpec::ManyFermionVacuum { omegas: vec![OMEGA0], bath: BathSpec::vacuum(d) }, &grid, &opts()).unwrap();
    let f = coefficient(&table, "F_1");
    let err = grid
        .times()
        .iter()
        .zip(f)
        .map(|(t, z)| (z - C64::from(g * (g * t).tan())).norm())
        .fold(0.0, f64::max);
    assert!(err <= 1e-5 * g * (1.2f64).tan(), "err = {err:e}");
}

#[test]
fn coefficients_vanish_at_the_origin() {
    let grid = TimeGrid::new(5e5, 100).unwrap();
    let thermal = BathSpec::new(few_modes(), 0.1, 2e-5).unwrap();
    let models = [
        ModelSpec::ManyFermionVacuum { omegas: vec![2.9e-5, 3.2e-5], bath: BathSpec::vacuum(few_modes()) },
        ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: thermal.clone() },
        ModelSpec::DoubleDotTwoBaths { omega1: 2.5e-5, omega2: 3.5e-5, g: C64::new(2e-6, 0.0), bath1: thermal.clone(), bath2: thermal },
    ];
    for m in &models {
        let table = solve(m, &grid, &opts()).unwrap();
        for (label, series) in &table.coefficients {
            assert_eq!(series[0], C64::new(0.0, 0.0), "{label}");
            assert!(max_norm(series) > 0.0, "{label}");
        }
    }
}

#[test]
fn thermal_solver_at_zero_occupation_matches_vacuum_solver() {
    let grid = TimeGrid::new(8e5, 400).unwrap();
    let empty = BathSpec::new(few_modes(), 0.0, 0.0).unwrap();
    let thermal = solve(&ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: empty }, &grid, &opts()).unwrap();
    let vacuum =
        solve(&ModelSpec::ManyFermionVacuum { omegas: vec![OMEGA0], bath: BathSpec::vacuum(few_modes()) }, &grid, &opts())
            .unwrap();
    let scale = max_norm(coefficient(&vacuum, "F_1"));
    assert!(max_diff(coefficient(&thermal, "F1"), coefficient(&vacuum, "F_1")) <= 1e-8 * scale);
    assert!(max_norm(coefficient(&thermal, "F2")) <= 1e-8 * scale);
}

#[test]
fn two_mode_vacuum_matches_exact_propagator() {
    let omegas = vec![2.9e-5, 3.2e-5];
    let model = ModelSpec::ManyFermionVacuum { omegas: omegas.clone(), bath: BathSpec::vacuum(few_modes()) };
    let grid = TimeGrid::new(8e5, 1600).unwrap();
    let table = solve(&model, &grid, &opts()).unwrap();
    let oracle = OneBodyOracle::from_model(&model).unwrap();
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in (0..grid.len()).step_by(80).skip(1) {
        let exact = vacuum_f_exact(&oracle, &omegas, grid.t(i)).unwrap();
        for (j, label) in ["F_1", "F_2"].iter().enumerate() {
            err = err.max((coefficient(&table, label)[i] - exact[j]).norm());
            scale = scale.max(exact[j].norm());
        }
    }
    assert!(err <= 1e-5 * scale, "err = {err:e}, scale = {scale:e}");
}

#[test]
fn rotating_and_lab_frames_converge_together() {
    // Both frames discretize the same equations; their difference is
    // discretization error and must shrink at second order.
    let model = ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: BathSpec::new(few_modes(), 0.1, 2e-5).unwrap() };
    let frame_gap = |n: usize| {
        let grid = TimeGrid::new(8e5, n).unwrap();
        let rot = solve(&model, &grid, &opts()).unwrap();
        let lab = solve(&model, &grid, &SolverOptions { rotating_frame: false, ..opts() }).unwrap();
        let scale = max_norm(coefficient(&rot, "F1"));
        max_diff(coefficient(&rot, "F1"), coefficient(&lab, "F1")) / scale
    };
    let (coarse, fine) = (frame_gap(400), frame_gap(800));
    assert!(fine <= 1e-3, "{fine:e}");
    let ratio = coarse / fine;
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn krylov_and_picard_agree_on_a_weak_bath() {
    let grid = TimeGrid::new(5e5, 200).unwrap();
    let model = ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: BathSpec::new(few_modes(), 0.1, 2e-5).unwrap() };
    let krylov = solve(&model, &grid, &opts()).unwrap();
    let picard = solve(&model, &grid, &SolverOptions { method: FixedPointMethod::Picard { damping: 0.5 }, ..opts() }).unwrap();
    for label in ["F1", "F2"] {
        let scale = max_norm(coefficient(&krylov, label));
        let d = max_diff(coefficient(&krylov, label), coefficient(&picard, label));
        assert!(d <= 1e-8 * scale, "{label}: {:e}", d / scale);
    }
}

#[test]
fn serial_and_chunked_rows_agree_to_solver_tolerance() {
    let grid = TimeGrid::new(5e5, 100).unwrap();
    let model = ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: BathSpec::new(few_modes(), 0.1, 2e-5).unwrap() };
    let a = solve(&model, &grid, &opts()).unwrap();
    let b = solve(&model, &grid, &SolverOptions { parallel: false, ..opts() }).unwrap();
    for label in ["F1", "F2"] {
        let scale = max_norm(coefficient(&a, label));
        assert!(max_diff(coefficient(&a, label), coefficient(&b, label)) <= 1e-9 * scale, "{label}");
    }
    assert_eq!(a.coefficients, solve(&model, &grid, &opts()).unwrap().coefficients);
}

#[test]
fn diagnostics_report_converged_monotone_rows() {
    let grid = TimeGrid::new(8e5, 400).unwrap();
    let lor = SpectralDensity::lorentzian(1e-6, 0.3, 3.3e-5).unwrap();
    let bath = BathSpec::new(lor, 0.1, 2e-5).unwrap().with_omega_grid(OmegaGrid { omega_min: 2e-5, omega_max: 4.6e-5, nodes: 32 });
    let table = solve(&ModelSpec::SingleDotThermal { omega0: OMEGA0, bath }, &grid, &opts()).unwrap();
    let d = &table.diagnostics;
    assert!(d.max_residual <= d.tolerance, "{} > {}", d.max_residual, d.tolerance);
    assert!(d.monotone);
    assert!(!d.last_row_history.is_empty());
}

#[test]
fn uncoupled_double_dot_reduces_to_two_single_dots() {
    // Lab frame throughout, so all three solves share one discretization.
    let opts = SolverOptions { rotating_frame: false, ..opts() };
    let grid = TimeGrid::new(5e5, 200).unwrap();
    let (w1, w2) = (2.5e-5, 3.5e-5);
    let bath1 = BathSpec::new(few_modes(), 0.1, 2e-5).unwrap();
    let bath2 = BathSpec::new(few_modes(), 0.1, 4e-5).unwrap();
    let double = solve(
        &ModelSpec::DoubleDotTwoBaths { omega1: w1, omega2: w2, g: C64::new(0.0, 0.0), bath1: bath1.clone(), bath2: bath2.clone() },
        &grid,
        &opts,
    )
    .unwrap();
    let single1 = solve(&ModelSpec::SingleDotThermal { omega0: w1, bath: bath1 }, &grid, &opts).unwrap();
    let single2 = solve(&ModelSpec::SingleDotThermal { omega0: w2, bath: bath2 }, &grid, &opts).unwrap();
    for (j, single) in [(1, &single1), (2, &single2)] {
        let (own, cross) = if j == 1 { ((1, 3), (2, 4)) } else { ((2, 4), (1, 3)) };
        let scale = max_norm(coefficient(single, "F1"));
        let f = |i: usize| coefficient(&double, &format!("F{j}_{i}"));
        let d = [
            max_diff(f(own.0), coefficient(single, "F1")),
            max_diff(f(own.1), coefficient(single, "F2")),
            max_norm(f(cross.0)),
            max_norm(f(cross.1)),
        ]
        .map(|x| x / scale);
        assert!(d[0] <= 1e-8 && d[1] <= 1e-8 && d[2] <= 1e-12 && d[3] <= 1e-12, "bath {j}: {d:?}");
    }
}

#[test]
fn tables_and_csv() {
    let grid = TimeGrid::new(1e5, 4).unwrap();
    let model = ModelSpec::SingleDotThermal { omega0: OMEGA0, bath: BathSpec::new(few_modes(), 0.1, 2e-5).unwrap() };
    let table = solve(&model, &grid, &SolverOptions::default()).unwrap();
    assert_eq!(table.functions.len(), 4);
    assert_eq!(table.functions["u_b1"].n_rows(), grid.len());
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,re_F1,im_F1,re_F2,im_F2");
    assert_eq!(text.lines().count(), 1 + grid.len());
    assert!(matches!(table.coefficient("F3"), Err(CoeffError::MissingLabel(_))));
}

#[test]
fn vacuum_solver_requires_a_system_mode() {
    let grid = TimeGrid::new(1e5, 4).unwrap();
    let model = ModelSpec::ManyFermionVacuum { omegas: vec![], bath: BathSpec::vacuum(few_modes()) };
    assert!(matches!(solve(&model, &grid, &opts()), Err(CoeffError::Unsupported(_))));
}
