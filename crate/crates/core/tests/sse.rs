use fermi_sse::bath::{BathSpec, Mode, SpectralDensity, TimeGrid};
use fermi_sse::coeffs::{solve, ModelSpec, SolverOptions};
use fermi_sse::grassmann::{verify_novikov, Gen, GrassmannElement};
use fermi_sse::oracle::{one_body_hamiltonian, partial_trace_system, FockSpace, FockState};
use fermi_sse::sse::{
    build_noise, negate, noise_coefficients, projector, propagate_pair, propagate_sse, reconstruct_rho,
    verify_q_ansatz, QAnsatz, SseError, SseOptions, SseTrajectory,
};
use fermi_sse::C64;
use nalgebra::{DMatrix, DVector};

const T_MAX: f64 = 1.5e6;

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn vacuum_model(omegas: Vec<f64>, modes: Vec<Mode>) -> ModelSpec {
    ModelSpec::ManyFermionVacuum { omegas, bath: BathSpec::vacuum(SpectralDensity::discrete(modes).unwrap()) }
}

fn two_modes() -> Vec<Mode> {
    vec![Mode::new(2.8e-5, 1e-6), Mode::new(3.3e-5, 0.7e-6)]
}

fn basis(dim: usize, index: usize) -> DVector<C64> {
    let mut v = DVector::zeros(dim);
    v[index] = C64::new(1.0, 0.0);
    v
}

struct Run {
    model: ModelSpec,
    q: QAnsatz,
    plus: SseTrajectory,
    minus: SseTrajectory,
}

fn run(model: ModelSpec, psi: &DVector<C64>, n: usize, opts: &SseOptions) -> Run {
    let grid = TimeGrid::new(T_MAX, n).unwrap();
    let table = solve(&model, &grid, &SolverOptions { keep_tables: false, ..SolverOptions::default() }).unwrap();
    let q = QAnsatz::from_table(&table, model.n_system_modes()).unwrap();
    let (plus, minus) = propagate_pair(&model, psi, &q, opts).unwrap();
    Run { model, q, plus, minus }
}

fn fock_reference(model: &ModelSpec, psi: &DVector<C64>) -> DMatrix<C64> {
    let (h, _) = one_body_hamiltonian(model).unwrap();
    let n_sys = model.n_system_modes();
    let n_bath = h.nrows() - n_sys;
    let state = FockSpace::new(&h).unwrap().evolve(&FockState::product(psi, n_bath, 0), &[T_MAX]).unwrap();
    partial_trace_system(&state[0], n_sys)
}

#[test]
fn single_mode_reconstruction_matches_fock() {
    let psi = basis(2, 1);
    let r = run(vacuum_model(vec![3e-5], vec![Mode::new(3e-5, 1e-6)]), &psi, 4000, &SseOptions::default());
    let rho = reconstruct_rho(&r.plus, &r.minus).unwrap();
    let err = max_abs(&(&rho.rho - fock_reference(&r.model, &psi)));
    assert!(err <= 1e-7, "{err:e}");
}

#[test]
fn partner_routes_agree_and_track_the_norm() {
    let psi = basis(2, 1);
    let r = run(vacuum_model(vec![3e-5], two_modes()), &psi, 2000, &SseOptions::default());
    let direct = reconstruct_rho(&r.plus, &r.minus).unwrap();
    let negated = reconstruct_rho(&r.plus, &negate(&r.plus)).unwrap();
    assert!(max_abs(&(&direct.rho - &negated.rho)) <= 1e-12);
    assert!(negate(&r.plus).psi.sub(&r.minus.psi).unwrap().max_abs() <= 1e-12);
    let trace = direct.trace();
    let norm = *r.plus.norm_history.last().unwrap();
    assert!((trace.re - norm).abs() <= 1e-12 && trace.im.abs() <= 1e-12, "trace {trace}, norm {norm}");
    assert_eq!(r.plus.norm_history.len(), 2001);
}

#[test]
fn novikov_holds_on_the_sse_projector_and_is_not_trivial() {
    let psi = basis(2, 1);
    let modes = two_modes();
    let r = run(vacuum_model(vec![3e-5], modes.clone()), &psi, 1000, &SseOptions::default());
    let p = projector(&r.plus, &r.minus).unwrap();
    let times = [0.0, 0.3 * T_MAX, T_MAX];
    let (r1, r2) = verify_novikov(&p, &noise_coefficients(&modes, &times)).unwrap();
    assert!(r1 <= 1e-12 && r2 <= 1e-12, "{r1:e} {r2:e}");
    let xs = GrassmannElement::monomial(2, &[Gen::XiStar(0)], DMatrix::identity(2, 2)).unwrap();
    let side = xs.mul(&p).unwrap().gaussian_average().unwrap();
    assert!(max_abs(&side) > 1e-3);
}

#[test]
fn noise_coefficients_match_noise_elements() {
    let modes = two_modes();
    let times = [0.0, 2e5, 7e5];
    for ((c, cp), &t) in noise_coefficients(&modes, &times).iter().zip(&times) {
        let star = build_noise(&modes, t, true).unwrap();
        let plain = build_noise(&modes, t, false).unwrap();
        for k in 0..modes.len() {
            assert_eq!(star.scalar_coefficient(&[Gen::XiStar(k)]), c[k]);
            assert_eq!(plain.scalar_coefficient(&[Gen::Xi(k)]), cp[k]);
        }
    }
}

#[test]
fn q_ansatz_holds_along_the_trajectory() {
    let psi = basis(2, 1);
    let r = run(vacuum_model(vec![3e-5], two_modes()), &psi, 4000, &SseOptions::default());
    let residual = verify_q_ansatz(&r.model, &r.plus, &r.q).unwrap();
    assert!(residual <= 1e-5, "{residual:e}");
}

#[test]
fn reference_frame_only_moves_discretization_error() {
    let psi = basis(2, 1);
    let model = vacuum_model(vec![3e-5], two_modes());
    let a = run(model.clone(), &psi, 2000, &SseOptions::default());
    let b = run(model, &psi, 2000, &SseOptions { frame: Some(2.95e-5), ..SseOptions::default() });
    assert_eq!(b.plus.frame, 2.95e-5);
    let ra = reconstruct_rho(&a.plus, &a.minus).unwrap();
    let rb = reconstruct_rho(&b.plus, &b.minus).unwrap();
    assert!(max_abs(&(&ra.rho - &rb.rho)) <= 1e-7, "{:e}", max_abs(&(&ra.rho - &rb.rho)));
}

#[test]
fn two_dots_odd_and_even_sectors_match_fock() {
    let model = vacuum_model(vec![2.9e-5, 3.1e-5], two_modes());
    for index in [2, 3] {
        let psi = basis(4, index);
        let r = run(model.clone(), &psi, 4000, &SseOptions::default());
        let rho = reconstruct_rho(&r.plus, &r.minus).unwrap();
        let err = max_abs(&(&rho.rho - fock_reference(&model, &psi)));
        assert!(err <= 1e-7, "initial index {index}: {err:e}");
    }
}

#[test]
fn unsupported_inputs_are_rejected() {
    let grid = TimeGrid::new(1e5, 10).unwrap();
    let model = vacuum_model(vec![3e-5], vec![Mode::new(3e-5, 1e-6)]);
    let table = solve(&model, &grid, &SolverOptions::default()).unwrap();
    let q = QAnsatz::from_table(&table, 1).unwrap();
    let opts = SseOptions::default();

    let mixed = DVector::from_vec(vec![C64::new(0.6, 0.0), C64::new(0.8, 0.0)]);
    assert!(matches!(propagate_sse(&model, &mixed, &q, 1.0, &opts), Err(SseError::ParityIndefinite)));
    assert!(matches!(
        propagate_sse(&model, &basis(4, 1), &q, 1.0, &opts),
        Err(SseError::DimensionMismatch { expected: 2, got: 4 })
    ));

    let thermal = ModelSpec::SingleDotThermal {
        omega0: 3e-5,
        bath: BathSpec::new(SpectralDensity::discrete(vec![Mode::new(3e-5, 1e-6)]).unwrap(), 0.1, 2e-5).unwrap(),
    };
    assert!(matches!(propagate_sse(&thermal, &basis(2, 1), &q, 1.0, &opts), Err(SseError::UnsupportedModel(_))));

    let continuum = ModelSpec::ManyFermionVacuum {
        omegas: vec![3e-5],
        bath: BathSpec::vacuum(SpectralDensity::lorentzian(1e-6, 0.3, 3e-5).unwrap()),
    };
    assert!(matches!(propagate_sse(&continuum, &basis(2, 1), &q, 1.0, &opts), Err(SseError::UnsupportedModel(_))));

    let many: Vec<Mode> = (0..7).map(|k| Mode::new(2.5e-5 + 1e-6 * k as f64, 1e-7)).collect();
    assert!(matches!(
        propagate_sse(&vacuum_model(vec![3e-5], many), &basis(2, 1), &q, 1.0, &opts),
        Err(SseError::TooManyModes(7))
    ));

    let plus = propagate_sse(&model, &basis(2, 1), &q, 1.0, &opts).unwrap();
    assert!(matches!(projector(&plus, &plus), Err(SseError::GridMismatch)));
    assert!(matches!(QAnsatz::from_table(&table, 2), Err(SseError::Coeff(_))));
}
