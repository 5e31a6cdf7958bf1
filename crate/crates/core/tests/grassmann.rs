use fermi_sse::grassmann::{verify_completeness, verify_novikov, Gen, GrassmannElement, GrassmannError, MAX_MODES};
use fermi_sse::C64;
use nalgebra::DMatrix;
use proptest::prelude::*;

const K: usize = 3;

fn scalar(z: C64) -> DMatrix<C64> {
    DMatrix::from_element(1, 1, z)
}

fn gens_of(mask: u32, k: usize) -> Vec<Gen> {
    (0..2 * k).filter(|i| mask & (1 << i) != 0).map(Gen::from_index).collect()
}

fn element(k: usize, terms: &[(u32, f64, f64)]) -> GrassmannElement {
    terms.iter().fold(GrassmannElement::zero(k, (1, 1)).unwrap(), |acc, &(m, re, im)| {
        acc.add(&GrassmannElement::monomial(k, &gens_of(m, k), scalar(C64::new(re, im))).unwrap()).unwrap()
    })
}

fn diff(a: &GrassmannElement, b: &GrassmannElement) -> f64 {
    a.sub(b).unwrap().max_abs()
}

/// Even under total parity: payloads of even monomials are diagonal, those of
/// odd monomials off-diagonal.
fn even_operator_element(k: usize, terms: &[(u32, f64, f64)]) -> GrassmannElement {
    let zero = C64::from(0.0);
    terms.iter().fold(GrassmannElement::zero(k, (2, 2)).unwrap(), |acc, &(m, re, im)| {
        let (a, b) = (C64::new(re, im), C64::new(im, -re));
        let x = if m.count_ones() % 2 == 0 {
            DMatrix::from_row_slice(2, 2, &[a, zero, zero, b])
        } else {
            DMatrix::from_row_slice(2, 2, &[zero, a, b, zero])
        };
        acc.add(&GrassmannElement::monomial(k, &gens_of(m, k), x).unwrap()).unwrap()
    })
}

fn terms(k: usize) -> impl Strategy<Value = Vec<(u32, f64, f64)>> {
    prop::collection::vec((0u32..(1 << (2 * k)), -1.0..1.0f64, -1.0..1.0f64), 0..10)
}

fn even_terms(k: usize) -> impl Strategy<Value = Vec<(u32, f64, f64)>> {
    terms(k).prop_map(|v| v.into_iter().filter(|(m, _, _)| m.count_ones() % 2 == 0).collect())
}

fn noise(k: usize) -> impl Strategy<Value = Vec<(Vec<C64>, Vec<C64>)>> {
    let c = prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b)| C64::new(a, b)), k);
    prop::collection::vec((c.clone(), c), 1..4)
}

proptest! {
    #[test]
    fn product_is_associative(a in terms(K), b in terms(K), c in terms(K)) {
        let (a, b, c) = (element(K, &a), element(K, &b), element(K, &c));
        let left = a.mul(&b).unwrap().mul(&c).unwrap();
        let right = a.mul(&b.mul(&c).unwrap()).unwrap();
        prop_assert!(diff(&left, &right) <= 1e-14);
    }

    #[test]
    fn odd_linear_elements_anticommute(a in prop::collection::vec(-1.0..1.0f64, 2 * K), b in prop::collection::vec(-1.0..1.0f64, 2 * K)) {
        let lin = |v: &[f64]| {
            let t: Vec<(Gen, C64)> = v.iter().enumerate().map(|(i, x)| (Gen::from_index(i), C64::from(*x))).collect();
            GrassmannElement::linear(K, &t).unwrap()
        };
        let (x, y) = (lin(&a), lin(&b));
        let sum = x.mul(&y).unwrap().add(&y.mul(&x).unwrap()).unwrap();
        prop_assert!(sum.max_abs() <= 1e-15);
        prop_assert!(x.mul(&x).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn literal_and_monomial_averages_agree(a in terms(K)) {
        let x = element(K, &a);
        let lit = x.gaussian_average().unwrap();
        let fast = x.gaussian_average_fast();
        prop_assert!((lit[(0, 0)] - fast[(0, 0)]).norm() <= 1e-14);
    }

    #[test]
    fn single_integral_is_left_derivative(a in terms(K), g in 0usize..2 * K) {
        let x = element(K, &a);
        let g = Gen::from_index(g);
        prop_assert_eq!(x.berezin_integrate(&[g]).unwrap(), x.left_derivative(g).unwrap());
    }

    #[test]
    fn left_derivative_obeys_graded_leibniz(m in 0u32..(1 << (2 * K)), b in terms(K), g in 0usize..2 * K) {
        let a = element(K, &[(m, 0.7, -0.2)]);
        let b = element(K, &b);
        let g = Gen::from_index(g);
        let sign = if m.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        let lhs = a.mul(&b).unwrap().left_derivative(g).unwrap();
        let rhs = a
            .left_derivative(g).unwrap().mul(&b).unwrap()
            .add(&a.mul(&b.left_derivative(g).unwrap()).unwrap().scale(C64::from(sign))).unwrap();
        prop_assert!(diff(&lhs, &rhs) <= 1e-14);
    }

    #[test]
    fn right_and_left_derivatives_differ_by_degree_sign(m in 0u32..(1 << (2 * K)), g in 0usize..2 * K) {
        let x = element(K, &[(m, 1.0, 0.5)]);
        let g = Gen::from_index(g);
        let degree = m.count_ones() as i32;
        let sign = if (degree - 1).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let left = x.left_derivative(g).unwrap().scale(C64::from(sign));
        prop_assert!(diff(&x.right_derivative(g).unwrap(), &left) <= 0.0);
    }

    #[test]
    fn conjugation_is_an_antiautomorphism(a in terms(K), b in terms(K)) {
        let (x, y) = (element(K, &a), element(K, &b));
        prop_assert!(diff(&x.conjugate().conjugate(), &x) <= 0.0);
        let lhs = x.mul(&y).unwrap().conjugate();
        let rhs = y.conjugate().mul(&x.conjugate()).unwrap();
        prop_assert!(diff(&lhs, &rhs) <= 1e-14);
    }

    #[test]
    fn parity_twist_is_an_involution_fixing_even_elements(a in terms(K), e in even_terms(K)) {
        let x = element(K, &a);
        prop_assert!(diff(&x.parity_twist().parity_twist(), &x) <= 0.0);
        let even = element(K, &e);
        prop_assert!(even.is_even());
        prop_assert!(diff(&even.parity_twist(), &even) <= 0.0);
    }

    #[test]
    fn graded_product_matches_ungraded_for_scalar_payloads(a in terms(K), b in terms(K)) {
        let (x, y) = (element(K, &a), element(K, &b));
        prop_assert!(diff(&x.graded_mul(&y).unwrap(), &x.mul(&y).unwrap()) <= 0.0);
    }

    #[test]
    fn novikov_identities_hold_on_even_elements(e in terms(2), c in noise(2)) {
        let p = even_operator_element(2, &e);
        prop_assert!(p.is_even());
        let (r1, r2) = verify_novikov(&p, &c).unwrap();
        prop_assert!(r1 <= 1e-13, "r1 = {r1}");
        prop_assert!(r2 <= 1e-13, "r2 = {r2}");
    }
}

#[test]
fn novikov_sign_is_not_vacuous() {
    // P = 1 ⊗ I + ξ_0 ⊗ σ is even once the odd payload σ is counted, and
    // ∫ξ*_0 P picks up its ξ_0 term.
    let k = 1;
    let sigma = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0].map(C64::from));
    let p = GrassmannElement::constant(k, DMatrix::identity(2, 2))
        .unwrap()
        .add(&GrassmannElement::monomial(k, &[Gen::Xi(0)], sigma).unwrap())
        .unwrap();
    assert!(p.is_even());
    let xs = GrassmannElement::monomial(k, &[Gen::XiStar(0)], DMatrix::identity(2, 2)).unwrap();
    let lhs = xs.mul(&p).unwrap().gaussian_average().unwrap();
    let deriv = p.right_derivative(Gen::Xi(0)).unwrap().gaussian_average().unwrap();
    let norm = |m: &DMatrix<C64>| m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(norm(&lhs) > 0.5);
    assert!(norm(&(&lhs + &deriv)) <= 1e-15);
    assert!(norm(&(&lhs - &deriv)) > 1.0);
}

#[test]
fn novikov_rejects_odd_elements() {
    let p = element(1, &[(0b01, 1.0, 0.0)]);
    let c = vec![(vec![C64::new(1.0, 0.0)], vec![C64::new(1.0, 0.0)])];
    assert!(matches!(verify_novikov(&p, &c), Err(GrassmannError::OddElement(_))));
}

#[test]
fn low_order_gaussian_moments() {
    let k = 2;
    let avg = |gens: &[Gen]| {
        GrassmannElement::monomial(k, gens, scalar(C64::new(1.0, 0.0))).unwrap().gaussian_average().unwrap()[(0, 0)]
    };
    let one = C64::new(1.0, 0.0);
    assert_eq!(GrassmannElement::one(k).unwrap().gaussian_average().unwrap()[(0, 0)], one);
    assert_eq!(avg(&[Gen::Xi(0), Gen::XiStar(0)]), one);
    assert_eq!(avg(&[Gen::XiStar(0), Gen::Xi(0)]), -one);
    assert_eq!(avg(&[Gen::Xi(0)]), C64::new(0.0, 0.0));
    assert_eq!(avg(&[Gen::Xi(0), Gen::XiStar(1)]), C64::new(0.0, 0.0));
    assert_eq!(avg(&[Gen::Xi(0), Gen::XiStar(0), Gen::Xi(1), Gen::XiStar(1)]), one);
    assert_eq!(avg(&[Gen::Xi(0), Gen::Xi(1), Gen::XiStar(1), Gen::XiStar(0)]), one);
}

#[test]
fn graded_product_picks_up_sign_from_odd_payload() {
    let k = 1;
    let sigma = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0].map(C64::from));
    let a = GrassmannElement::constant(k, sigma).unwrap();
    let xi = GrassmannElement::monomial(k, &[Gen::Xi(0)], DMatrix::identity(2, 2)).unwrap();
    let plain = a.mul(&xi).unwrap();
    let graded = a.graded_mul(&xi).unwrap();
    assert!(diff(&graded, &plain.scale(C64::from(-1.0))) <= 0.0);
    assert!(plain.max_abs() > 0.5);
}

#[test]
fn completeness_up_to_three_modes() {
    for k in 1..=3 {
        assert!(verify_completeness(k).unwrap() <= 1e-13);
    }
}

#[test]
fn construction_errors() {
    assert!(matches!(GrassmannElement::one(MAX_MODES + 1), Err(GrassmannError::TooManyModes(_))));
    assert!(matches!(GrassmannElement::generator(1, Gen::Xi(1)), Err(GrassmannError::UnknownGenerator(_, 1))));
    let square = GrassmannElement::monomial(2, &[Gen::Xi(0), Gen::Xi(0)], scalar(C64::new(1.0, 0.0))).unwrap();
    assert!(square.is_zero());
    let a = GrassmannElement::one(1).unwrap();
    let b = GrassmannElement::one(2).unwrap();
    assert!(matches!(a.mul(&b), Err(GrassmannError::GeneratorMismatch(1, 2))));
    let m = GrassmannElement::constant(1, DMatrix::identity(2, 2)).unwrap();
    assert!(matches!(a.add(&m), Err(GrassmannError::ShapeMismatch(_, _))));
    let x = GrassmannElement::one(1).unwrap();
    assert!(matches!(x.berezin_integrate(&[Gen::Xi(0), Gen::Xi(0)]), Err(GrassmannError::DuplicateGenerator(_))));
}

#[test]
fn monomial_reordering_sign() {
    let k = 2;
    let one = scalar(C64::new(1.0, 0.0));
    let ordered = GrassmannElement::monomial(k, &[Gen::Xi(0), Gen::XiStar(1)], one.clone()).unwrap();
    let swapped = GrassmannElement::monomial(k, &[Gen::XiStar(1), Gen::Xi(0)], one).unwrap();
    assert!(diff(&ordered.add(&swapped).unwrap(), &GrassmannElement::zero(k, (1, 1)).unwrap()) <= 0.0);
}
