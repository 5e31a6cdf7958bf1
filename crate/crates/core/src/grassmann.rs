//! Finite Grassmann algebra over `2K` generators `ξ_1, ξ*_1, …, ξ_K, ξ*_K`
//! with matrix-valued coefficients.
//!
//! Generator `ξ_k` has index `2k` and `ξ*_k` index `2k + 1` (modes counted
//! from 0), and monomials are bitmasks over these indices, always stored in
//! increasing index order. Every term carries a payload matrix of a common
//! shape: `1×1` for scalars, `d×1` for kets, `1×d` for bras and `d×d` for
//! operators on a `d = 2^M` dimensional fermionic space.
//!
//! Two products are provided. [`GrassmannElement::mul`] lets payloads commute
//! with all generators. [`GrassmannElement::graded_mul`] treats odd payloads
//! (odd fermion-number kets, parity-changing operators) as anticommuting with
//! odd monomials, which is what the coherent-state identities require.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::propagator::jordan_wigner;
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Largest number of modes (`2K` generators) supported.
pub const MAX_MODES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrassmannError {
    #[error("at most {MAX_MODES} modes are supported, got {0}")]
    TooManyModes(usize),
    #[error("elements over different generator sets ({0} vs {1} modes)")]
    GeneratorMismatch(usize, usize),
    #[error("generator {0} is outside an algebra of {1} modes")]
    UnknownGenerator(Gen, usize),
    #[error("generator {0} listed twice")]
    DuplicateGenerator(Gen),
    #[error("payload shapes {0:?} and {1:?} cannot be combined")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("element is not even under the parity twist (deviation {0:e})")]
    OddElement(f64),
}

/// One generator: `Xi(k)` is `ξ_k`, `XiStar(k)` is `ξ*_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gen {
    Xi(usize),
    XiStar(usize),
}

impl Gen {
    pub fn index(self) -> usize {
        match self {
            Gen::Xi(k) => 2 * k,
            Gen::XiStar(k) => 2 * k + 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i % 2 == 0 {
            Gen::Xi(i / 2)
        } else {
            Gen::XiStar(i / 2)
        }
    }

    pub fn mode(self) -> usize {
        self.index() / 2
    }

    /// `ξ_k ↔ ξ*_k`.
    pub fn conjugate(self) -> Self {
        match self {
            Gen::Xi(k) => Gen::XiStar(k),
            Gen::XiStar(k) => Gen::Xi(k),
        }
    }
}

impl fmt::Display for Gen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gen::Xi(k) => write!(f, "ξ{}", k + 1),
            Gen::XiStar(k) => write!(f, "ξ*{}", k + 1),
        }
    }
}

/// Sign of reordering the concatenation `a · b` of two canonical monomials,
/// or `None` when they share a generator.
fn product_sign(a: u32, b: u32) -> Option<f64> {
    if a & b != 0 {
        return None;
    }
    let mut swaps = 0;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        swaps += (a >> (j + 1)).count_ones();
        rest &= rest - 1;
    }
    Some(if swaps % 2 == 0 { 1.0 } else { -1.0 })
}

/// Canonical mask and sign of an ordered generator list (`None` if it repeats
/// a generator).
fn canonical(indices: &[usize]) -> Option<(u32, f64)> {
    let mut mask = 0u32;
    let mut sign = 1.0;
    for &i in indices {
        let s = product_sign(mask, 1 << i)?;
        sign *= s;
        mask |= 1 << i;
    }
    Some((mask, sign))
}

fn degree_sign(mask: u32) -> f64 {
    if mask.count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `diag((-1)^{popcount(b)})` for basis index `b`.
fn parity_diagonal(dim: usize) -> Vec<f64> {
    (0..dim).map(|b: usize| if b.count_ones() % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

/// `P X P` restricted to the non-trivial sides of the payload: rows are
/// twisted when the payload has more than one row, columns likewise.
fn twist_payload(x: &DMatrix<C64>) -> DMatrix<C64> {
    let (r, c) = x.shape();
    let pr = parity_diagonal(r);
    let pc = parity_diagonal(c);
    DMatrix::from_fn(r, c, |i, j| {
        let s = if r > 1 { pr[i] } else { 1.0 } * if c > 1 { pc[j] } else { 1.0 };
        x[(i, j)] * s
    })
}

/// Grassmann element `Σ_m ξ^m ⊗ X_m` with matrix payloads `X_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannElement {
    k: usize,
    shape: (usize, usize),
    terms: BTreeMap<u32, DMatrix<C64>>,
}

impl GrassmannElement {
    pub fn zero(k: usize, shape: (usize, usize)) -> Result<Self, GrassmannError> {
        if k > MAX_MODES {
            return Err(GrassmannError::TooManyModes(k));
        }
        Ok(Self { k, shape, terms: BTreeMap::new() })
    }

    /// `1 ⊗ payload`.
    pub fn constant(k: usize, payload: DMatrix<C64>) -> Result<Self, GrassmannError> {
        let mut e = Self::zero(k, payload.shape())?;
        e.terms.insert(0, payload);
        Ok(e)
    }

    pub fn scalar(k: usize, c: C64) -> Result<Self, GrassmannError> {
        Self::constant(k, DMatrix::from_element(1, 1, c))
    }

    pub fn one(k: usize) -> Result<Self, GrassmannError> {
        Self::scalar(k, ONE)
    }

    pub fn generator(k: usize, g: Gen) -> Result<Self, GrassmannError> {
        Self::monomial(k, &[g], DMatrix::from_element(1, 1, ONE))
    }

    /// `g_1 g_2 … g_m ⊗ payload` for generators in the given order.
    pub fn monomial(k: usize, gens: &[Gen], payload: DMatrix<C64>) -> Result<Self, GrassmannError> {
        let mut e = Self::zero(k, payload.shape())?;
        for g in gens {
            e.check_gen(*g)?;
        }
        let idx: Vec<usize> = gens.iter().map(|g| g.index()).collect();
        if let Some((mask, sign)) = canonical(&idx) {
            e.terms.insert(mask, payload * C64::from(sign));
        }
        Ok(e)
    }

    /// `Σ_k c_k g_k` for single generators.
    pub fn linear(k: usize, terms: &[(Gen, C64)]) -> Result<Self, GrassmannError> {
        let mut e = Self::zero(k, (1, 1))?;
        for &(g, c) in terms {
            e.check_gen(g)?;
            *e.terms.entry(1 << g.index()).or_insert_with(|| DMatrix::zeros(1, 1)) +=
                DMatrix::from_element(1, 1, c);
        }
        Ok(e)
    }

    fn check_gen(&self, g: Gen) -> Result<(), GrassmannError> {
        if g.mode() >= self.k {
            Err(GrassmannError::UnknownGenerator(g, self.k))
        } else {
            Ok(())
        }
    }

    fn check_same(&self, other: &Self) -> Result<(), GrassmannError> {
        if self.k != other.k {
            Err(GrassmannError::GeneratorMismatch(self.k, other.k))
        } else {
            Ok(())
        }
    }

    pub fn n_modes(&self) -> usize {
        self.k
    }

    pub fn n_generators(&self) -> usize {
        2 * self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Non-zero terms in canonical order.
    pub fn terms(&self) -> impl Iterator<Item = (u32, &DMatrix<C64>)> {
        self.terms.iter().map(|(m, x)| (*m, x))
    }

    pub fn coefficient(&self, mask: u32) -> Option<&DMatrix<C64>> {
        self.terms.get(&mask)
    }

    /// The scalar coefficient of a monomial of a `1×1` element.
    pub fn scalar_coefficient(&self, gens: &[Gen]) -> C64 {
        let idx: Vec<usize> = gens.iter().map(|g| g.index()).collect();
        match canonical(&idx) {
            Some((mask, sign)) => self.terms.get(&mask).map_or(ZERO, |x| x[(0, 0)] * sign),
            None => ZERO,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.values().all(|x| x.iter().all(|z| *z == ZERO))
    }

    /// Largest payload entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.terms.values().flat_map(|x| x.iter()).map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn insert(&mut self, mask: u32, x: DMatrix<C64>) {
        match self.terms.get_mut(&mask) {
            Some(y) => *y += x,
            None => {
                self.terms.insert(mask, x);
            }
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, GrassmannError> {
        self.check_same(other)?;
        if self.shape != other.shape {
            return Err(GrassmannError::ShapeMismatch(self.shape, other.shape));
        }
        let mut out = self.clone();
        for (m, x) in &other.terms {
            out.insert(*m, x.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, GrassmannError> {
        self.add(&other.scale(-ONE))
    }

    pub fn scale(&self, c: C64) -> Self {
        let terms = self.terms.iter().map(|(m, x)| (*m, x * c)).collect();
        Self { k: self.k, shape: self.shape, terms }
    }

    /// Applies `f` to every payload.
    pub fn map_payload(&self, f: impl Fn(&DMatrix<C64>) -> DMatrix<C64>) -> Self {
        let terms: BTreeMap<u32, DMatrix<C64>> = self.terms.iter().map(|(m, x)| (*m, f(x))).collect();
        let shape = terms.values().next().map_or(self.shape, |x| x.shape());
        Self { k: self.k, shape, terms }
    }

    /// `op · X_m` for every payload, with `op` commuting past all generators.
    pub fn apply(&self, op: &DMatrix<C64>) -> Result<Self, GrassmannError> {
        if op.ncols() != self.shape.0 {
            return Err(GrassmannError::ShapeMismatch(op.shape(), self.shape));
        }
        Ok(self.map_payload(|x| op * x))
    }

    /// `op` acting from the left on a graded element: an odd operator picks up
    /// `(-1)^{deg m}` moving past monomial `m`.
    pub fn graded_apply(&self, op: &DMatrix<C64>, op_odd: bool) -> Result<Self, GrassmannError> {
        if op.ncols() != self.shape.0 {
            return Err(GrassmannError::ShapeMismatch(op.shape(), self.shape));
        }
        let terms = self
            .terms
            .iter()
            .map(|(m, x)| {
                let s = if op_odd { degree_sign(*m) } else { 1.0 };
                (*m, op * x * C64::from(s))
            })
            .collect();
        Ok(Self { k: self.k, shape: (op.nrows(), self.shape.1), terms })
    }

    fn payload_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<DMatrix<C64>, GrassmannError> {
        if a.shape() == (1, 1) {
            Ok(b * a[(0, 0)])
        } else if b.shape() == (1, 1) {
            Ok(a * b[(0, 0)])
        } else if a.ncols() == b.nrows() {
            Ok(a * b)
        } else {
            Err(GrassmannError::ShapeMismatch(a.shape(), b.shape()))
        }
    }

    fn product_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
        if a == (1, 1) {
            b
        } else if b == (1, 1) {
            a
        } else {
            (a.0, b.1)
        }
    }

    fn product(&self, other: &Self, graded: bool) -> Result<Self, GrassmannError> {
        self.check_same(other)?;
        let shape = Self::product_shape(self.shape, other.shape);
        if self.shape != (1, 1) && other.shape != (1, 1) && self.shape.1 != other.shape.0 {
            return Err(GrassmannError::ShapeMismatch(self.shape, other.shape));
        }
        let mut out = Self::zero(self.k, shape)?;
        for (ma, xa) in &self.terms {
            let twisted = if graded { Some(twist_payload(xa)) } else { None };
            for (mb, xb) in &other.terms {
                let Some(sign) = product_sign(*ma, *mb) else { continue };
                let left = match &twisted {
                    Some(t) if mb.count_ones() % 2 == 1 => t,
                    _ => xa,
                };
                let x = Self::payload_product(left, xb)? * C64::from(sign);
                out.insert(ma | mb, x);
            }
        }
        Ok(out)
    }

    /// Product in which payloads commute with every generator.
    pub fn mul(&self, other: &Self) -> Result<Self, GrassmannError> {
        self.product(other, false)
    }

    /// Product in which the left payload's odd part anticommutes with the odd
    /// monomials of the right factor.
    pub fn graded_mul(&self, other: &Self) -> Result<Self, GrassmannError> {
        self.product(other, true)
    }

    /// `∂⃗_g`: removes `g` from the left, with sign `(-1)^{#generators before g}`.
    pub fn left_derivative(&self, g: Gen) -> Result<Self, GrassmannError> {
        self.check_gen(g)?;
        let bit = 1u32 << g.index();
        let mut out = Self::zero(self.k, self.shape)?;
        for (m, x) in &self.terms {
            if m & bit != 0 {
                let before = (m & (bit - 1)).count_ones();
                let s = if before % 2 == 0 { ONE } else { -ONE };
                out.insert(m ^ bit, x * s);
            }
        }
        Ok(out)
    }

    /// `∂⃖_g`: removes `g` from the right, with sign `(-1)^{#generators after g}`.
    pub fn right_derivative(&self, g: Gen) -> Result<Self, GrassmannError> {
        self.check_gen(g)?;
        let bit = 1u32 << g.index();
        let mut out = Self::zero(self.k, self.shape)?;
        for (m, x) in &self.terms {
            if m & bit != 0 {
                let after = (m >> (g.index() + 1)).count_ones();
                let s = if after % 2 == 0 { ONE } else { -ONE };
                out.insert(m ^ bit, x * s);
            }
        }
        Ok(out)
    }

    /// `∫dg_1 … dg_n x`, integrating the innermost (`g_n`) first; each
    /// integral acts as a left derivative.
    pub fn berezin_integrate(&self, over: &[Gen]) -> Result<Self, GrassmannError> {
        for (i, g) in over.iter().enumerate() {
            if over[..i].contains(g) {
                return Err(GrassmannError::DuplicateGenerator(*g));
            }
        }
        let mut x = self.clone();
        for g in over.iter().rev() {
            x = x.left_derivative(*g)?;
        }
        Ok(x)
    }

    /// `Π_k (1 - ξ*_k ξ_k) = exp(-Σ_k ξ*_k ξ_k)`.
    pub fn gaussian_weight(k: usize) -> Result<Self, GrassmannError> {
        let mut w = Self::one(k)?;
        for q in 0..k {
            let f = Self::one(k)?.sub(&Self::monomial(k, &[Gen::XiStar(q), Gen::Xi(q)], DMatrix::from_element(1, 1, ONE))?)?;
            w = w.mul(&f)?;
        }
        Ok(w)
    }

    /// The measure order `dξ*_1 dξ_1 … dξ*_K dξ_K`.
    pub fn measure(k: usize) -> Vec<Gen> {
        (0..k).flat_map(|q| [Gen::XiStar(q), Gen::Xi(q)]).collect()
    }

    /// `∫Π_k dξ*_k dξ_k e^{-ξ*_k ξ_k} x`, evaluated literally.
    pub fn gaussian_average(&self) -> Result<DMatrix<C64>, GrassmannError> {
        let weighted = Self::gaussian_weight(self.k)?.mul(self)?;
        let top = weighted.berezin_integrate(&Self::measure(self.k))?;
        Ok(top.terms.get(&0).cloned().unwrap_or_else(|| DMatrix::zeros(self.shape.0, self.shape.1)))
    }

    /// Same average through the monomial rule: `ξ^m` averages to 1 when `m`
    /// is a union of complete pairs `ξ_k ξ*_k` and to 0 otherwise.
    pub fn gaussian_average_fast(&self) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(self.shape.0, self.shape.1);
        for (m, x) in &self.terms {
            let paired = (m & 0x5555_5555) == ((m >> 1) & 0x5555_5555);
            if paired {
                out += x;
            }
        }
        out
    }

    /// `(-1)^{deg m}` on every monomial.
    pub fn negate_odd(&self) -> Self {
        let terms = self.terms.iter().map(|(m, x)| (*m, x * C64::from(degree_sign(*m)))).collect();
        Self { k: self.k, shape: self.shape, terms }
    }

    /// Total fermionic parity operation: `(-1)^{deg m}` combined with the
    /// system parity `P` on the non-trivial sides of each payload.
    pub fn parity_twist(&self) -> Self {
        let terms =
            self.terms.iter().map(|(m, x)| (*m, twist_payload(x) * C64::from(degree_sign(*m)))).collect();
        Self { k: self.k, shape: self.shape, terms }
    }

    /// Deviation `max |P̃ - P|`.
    pub fn parity_deviation(&self) -> f64 {
        self.sub(&self.parity_twist()).map(|d| d.max_abs()).unwrap_or(f64::INFINITY)
    }

    /// Whether `P̃ = P` (to rounding relative to the element's size).
    pub fn is_even(&self) -> bool {
        self.parity_deviation() <= 1e-14 * self.max_abs().max(1.0)
    }

    /// Conjugation: `(g_1 … g_m ⊗ X)* = g_m* … g_1* ⊗ X†`.
    pub fn conjugate(&self) -> Self {
        let mut out = Self { k: self.k, shape: (self.shape.1, self.shape.0), terms: BTreeMap::new() };
        for (m, x) in &self.terms {
            let idx: Vec<usize> = (0..32)
                .rev()
                .filter(|i| m & (1 << i) != 0)
                .map(|i| Gen::from_index(i).conjugate().index())
                .collect();
            let (mask, sign) = canonical(&idx).expect("distinct generators");
            out.insert(mask, x.adjoint() * C64::from(sign));
        }
        out
    }

    /// Drops terms whose payload vanishes exactly.
    pub fn prune(mut self) -> Self {
        self.terms.retain(|_, x| x.iter().any(|z| *z != ZERO));
        self
    }
}

impl fmt::Display for GrassmannElement {
    /// One line per monomial in canonical order: generators, then payload
    /// entries row-major.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# K={} payload {}x{}", self.k, self.shape.0, self.shape.1)?;
        for (m, x) in &self.terms {
            let gens: Vec<String> =
                (0..2 * self.k).filter(|i| m & (1 << i) != 0).map(|i| Gen::from_index(i).to_string()).collect();
            let name = if gens.is_empty() { "1".to_string() } else { gens.join("") };
            let vals: Vec<String> = (0..x.nrows())
                .flat_map(|i| (0..x.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| format!("{:+.6e}{:+.6e}i", x[(i, j)].re, x[(i, j)].im))
                .collect();
            writeln!(f, "{name}: {}", vals.join(" "))?;
        }
        Ok(())
    }
}

/// Mode operators `b_k` of the bath Fock space (mode 0 most significant).
pub fn bath_annihilators(k: usize) -> Vec<DMatrix<C64>> {
    jordan_wigner(k)
}

/// `|ξ⟩ = Π_k (1 - ξ_k b_k†)|vac⟩` as a graded ket-valued element.
pub fn coherent_ket(k: usize) -> Result<GrassmannElement, GrassmannError> {
    let dim = 1usize << k;
    let b = bath_annihilators(k);
    let mut vac = DMatrix::zeros(dim, 1);
    vac[(0, 0)] = ONE;
    let mut state = GrassmannElement::constant(k, vac)?;
    // Apply factors right to left so that mode 0 ends up outermost.
    for q in (0..k).rev() {
        let id = DMatrix::<C64>::identity(dim, dim);
        let factor = GrassmannElement::constant(k, id)?
            .sub(&GrassmannElement::monomial(k, &[Gen::Xi(q)], b[q].adjoint())?)?;
        state = factor.graded_mul(&state)?;
    }
    Ok(state)
}

/// `⟨ξ| = ⟨vac| Π_k^{reversed} (1 - b_k ξ*_k)` as a graded bra-valued element;
/// `b_k ξ*_k = -ξ*_k b_k` for the odd operator `b_k`.
pub fn coherent_bra(k: usize) -> Result<GrassmannElement, GrassmannError> {
    let dim = 1usize << k;
    let b = bath_annihilators(k);
    let mut vac = DMatrix::zeros(1, dim);
    vac[(0, 0)] = ONE;
    let mut state = GrassmannElement::constant(k, vac)?;
    for q in (0..k).rev() {
        let id = DMatrix::<C64>::identity(dim, dim);
        let factor = GrassmannElement::constant(k, id)?
            .add(&GrassmannElement::monomial(k, &[Gen::XiStar(q)], b[q].clone())?)?;
        state = state.graded_mul(&factor)?;
    }
    Ok(state)
}

/// `max |∫D_g[ξ] |ξ⟩⟨ξ| - I|`.
pub fn verify_completeness(k: usize) -> Result<f64, GrassmannError> {
    let proj = coherent_ket(k)?.graded_mul(&coherent_bra(k)?)?;
    let avg = proj.gaussian_average()?;
    let dim = 1usize << k;
    Ok((avg - DMatrix::<C64>::identity(dim, dim)).iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Residuals of the two Novikov identities on an even element `P`, mode by
/// mode and contracted with the noise coefficients `c_k`:
///
/// ```text
/// ∫D_g ξ*_k P = -∫D_g P ∂⃖_{ξ_k}        ∫D_g P ξ_k = -∫D_g ∂⃗_{ξ*_k} P
/// ```
///
/// The contracted forms use `ξ*_t = Σ_k c_k ξ*_k` and `ξ_t = Σ_k c'_k ξ_k`
/// with `(c, c')` supplied per time sample in `noise`.
pub fn verify_novikov(
    p: &GrassmannElement,
    noise: &[(Vec<C64>, Vec<C64>)],
) -> Result<(f64, f64), GrassmannError> {
    let dev = p.parity_deviation();
    if dev > 1e-14 * p.max_abs().max(1.0) {
        return Err(GrassmannError::OddElement(dev));
    }
    let k = p.n_modes();
    let mut lhs1 = Vec::with_capacity(k);
    let mut rhs1 = Vec::with_capacity(k);
    let mut lhs2 = Vec::with_capacity(k);
    let mut rhs2 = Vec::with_capacity(k);
    for q in 0..k {
        let xs = GrassmannElement::generator(k, Gen::XiStar(q))?;
        let x = GrassmannElement::generator(k, Gen::Xi(q))?;
        lhs1.push(xs.mul(p)?.gaussian_average()?);
        rhs1.push(-p.right_derivative(Gen::Xi(q))?.gaussian_average()?);
        lhs2.push(p.mul(&x)?.gaussian_average()?);
        rhs2.push(-p.left_derivative(Gen::XiStar(q))?.gaussian_average()?);
    }
    let diff = |a: &DMatrix<C64>, b: &DMatrix<C64>| (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut r1: f64 = (0..k).map(|q| diff(&lhs1[q], &rhs1[q])).fold(0.0, f64::max);
    let mut r2: f64 = (0..k).map(|q| diff(&lhs2[q], &rhs2[q])).fold(0.0, f64::max);
    for (cs, c) in noise {
        let zero = DMatrix::zeros(p.shape().0, p.shape().1);
        let contract = |v: &[DMatrix<C64>], w: &[C64]| {
            v.iter().zip(w).fold(zero.clone(), |acc, (m, z)| acc + m * *z)
        };
        r1 = r1.max(diff(&contract(&lhs1, cs), &contract(&rhs1, cs)));
        r2 = r2.max(diff(&contract(&lhs2, c), &contract(&rhs2, c)));
    }
    Ok((r1, r2))
}
