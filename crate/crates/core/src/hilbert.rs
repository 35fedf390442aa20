//! Truncated Fock-space operators and states for the double well, plus the
//! state-analysis tools used throughout: spectra, parity, fidelity, Wigner
//! fields and classical phase-space flows of the feedback generators.
//!
//! Conventions: `x = sqrt(kbar/2) (a + a†)`, `p = i sqrt(kbar/2) (a† - a)`, so
//! `[x, p] = i kbar` away from the truncation edge. Products such as `x²` or
//! the quartic potential are formed from the truncated matrices.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Relative tolerance for the hermitian flag on operators.
pub const OPERATOR_HERMITIAN_RTOL: f64 = 1e-12;
/// Absolute tolerances a [`DensityMatrix`] must satisfy.
pub const STATE_TRACE_TOL: f64 = 1e-9;
pub const STATE_HERMITIAN_TOL: f64 = 1e-9;
pub const STATE_MIN_EIGENVALUE: f64 = -1e-7;
/// Smallest projected weight accepted by parity projection.
pub const PARITY_MIN_WEIGHT: f64 = 1e-12;
/// Lowest levels closer than this (relative to the level scale) are treated
/// as a degenerate doublet when picking the ground state.
pub const DOUBLET_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FockSpace {
    dim: usize,
    kbar: f64,
}

impl FockSpace {
    pub fn new(dim: usize, kbar: f64) -> Result<Self> {
        if dim < 2 {
            return Err(invalid("dim", format!("truncation must be >= 2, got {dim}")));
        }
        if !(kbar > 0.0 && kbar.is_finite()) {
            return Err(invalid("kbar", format!("must be positive, got {kbar}")));
        }
        Ok(Self { dim, kbar })
    }

    /// Space with the default `kbar = 1`.
    pub fn with_dim(dim: usize) -> Result<Self> {
        Self::new(dim, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kbar(&self) -> f64 {
        self.kbar
    }
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

fn hermitian_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in 0..=j {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Dense operator on a truncated Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    entries: CMatrix,
    hermitian: bool,
}

impl Operator {
    /// Wraps a square matrix; the hermitian flag is detected from the entries.
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(invalid(
                "entries",
                format!("operator must be square, got {}x{}", entries.nrows(), entries.ncols()),
            ));
        }
        Ok(Self::from_square(entries))
    }

    fn from_square(entries: CMatrix) -> Self {
        let scale = max_abs(&entries);
        let hermitian = hermitian_defect(&entries) <= OPERATOR_HERMITIAN_RTOL * scale;
        Self { entries, hermitian }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: CMatrix::identity(dim, dim),
            hermitian: true,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: CMatrix::zeros(dim, dim),
            hermitian: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_matrix(self) -> CMatrix {
        self.entries
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn require_hermitian(&self, name: &'static str) -> Result<()> {
        if self.hermitian {
            Ok(())
        } else {
            Err(Error::NotHermitian(name))
        }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            entries: self.entries.adjoint(),
            hermitian: self.hermitian,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: &self.entries * C64::new(factor, 0.0),
            hermitian: self.hermitian,
        }
    }

    pub fn try_add(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_square(&self.entries + &other.entries))
    }

    pub fn try_sub(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_square(&self.entries - &other.entries))
    }

    /// Operator product `self · other`.
    pub fn try_mul(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_square(&self.entries * &other.entries))
    }

    pub fn commutator(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_square(
            &self.entries * &other.entries - &other.entries * &self.entries,
        ))
    }

    pub fn anticommutator(&self, other: &Operator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_square(
            &self.entries * &other.entries + &other.entries * &self.entries,
        ))
    }

    /// `tr(self · rho)`.
    pub fn expectation(&self, rho: &DensityMatrix) -> Result<C64> {
        check_dim(self.dim(), rho.dim())?;
        Ok(trace_of_product(&self.entries, rho.matrix()))
    }

    /// Largest entry-wise modulus, the scale used by the hermitian check.
    pub fn max_abs(&self) -> f64 {
        max_abs(&self.entries)
    }

    /// Restriction to the Fock states of one parity. Exact for parity-even
    /// operators, which are block diagonal.
    pub fn parity_block(&self, parity: Parity) -> Result<Operator> {
        let idx: Vec<usize> = (0..self.dim()).filter(|&n| parity.contains(n)).collect();
        Operator::new(CMatrix::from_fn(idx.len(), idx.len(), |i, j| self.entries[(idx[i], idx[j])]))
    }
}

/// `tr(a · b)` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleWellParams {
    /// Offset of the potential along x.
    pub a_offset: f64,
    /// Position of the well minima.
    pub b: f64,
    /// Barrier height.
    pub h: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        Self {
            a_offset: 0.0,
            b: 3.0,
            h: 5.0,
        }
    }
}

impl DoubleWellParams {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0.0 || !self.b.is_finite() {
            return Err(invalid("b", "well position must be nonzero and finite"));
        }
        if !(self.b > 0.0) {
            return Err(invalid("b", format!("must be positive, got {}", self.b)));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(invalid("h", format!("barrier height must be positive, got {}", self.h)));
        }
        if !self.a_offset.is_finite() {
            return Err(invalid("a_offset", "must be finite"));
        }
        Ok(())
    }

    /// Classical potential `(h/b⁴)((x - a)² - b²)²`.
    pub fn potential(&self, x: f64) -> f64 {
        let s = (x - self.a_offset).powi(2) - self.b * self.b;
        self.h / self.b.powi(4) * s * s
    }

    /// Setpoint for `<x²>` used by the current reward and Bayesian feedback.
    pub fn setpoint(&self) -> f64 {
        self.b * self.b
    }
}

/// Annihilation and creation operators, `a[n-1, n] = sqrt(n)`.
pub fn ladder_operators(space: &FockSpace) -> (Operator, Operator) {
    let n = space.dim();
    let mut a = CMatrix::zeros(n, n);
    for k in 1..n {
        a[(k - 1, k)] = C64::new((k as f64).sqrt(), 0.0);
    }
    let a_dag = a.adjoint();
    (
        Operator {
            entries: a,
            hermitian: false,
        },
        Operator {
            entries: a_dag,
            hermitian: false,
        },
    )
}

pub fn number_operator(space: &FockSpace) -> Operator {
    let n = space.dim();
    let diag = CVector::from_iterator(n, (0..n).map(|k| C64::new(k as f64, 0.0)));
    Operator {
        entries: CMatrix::from_diagonal(&diag),
        hermitian: true,
    }
}

/// Position and momentum quadratures.
pub fn quadratures(space: &FockSpace) -> (Operator, Operator) {
    let (a, a_dag) = ladder_operators(space);
    let s = (space.kbar() / 2.0).sqrt();
    let x = (&a.entries + &a_dag.entries) * C64::new(s, 0.0);
    let p = (&a_dag.entries - &a.entries) * C64::new(0.0, s);
    (
        Operator {
            entries: x,
            hermitian: true,
        },
        Operator {
            entries: p,
            hermitian: true,
        },
    )
}

/// `p²/2 + (h/b⁴)((x - a)² - b²)²` on the truncated space.
pub fn double_well_hamiltonian(space: &FockSpace, params: &DoubleWellParams) -> Result<Operator> {
    params.validate()?;
    let (x, p) = quadratures(space);
    let n = space.dim();
    let id = CMatrix::identity(n, n);
    let shifted = &x.entries - &id * C64::new(params.a_offset, 0.0);
    let inner = &shifted * &shifted - &id * C64::new(params.b * params.b, 0.0);
    let quartic = &inner * &inner * C64::new(params.h / params.b.powi(4), 0.0);
    let kinetic = &p.entries * &p.entries * C64::new(0.5, 0.0);
    Ok(hermitized(kinetic + quartic))
}

fn hermitized(m: CMatrix) -> Operator {
    let sym = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    Operator {
        entries: sym,
        hermitian: true,
    }
}

/// Candidate feedback generators compared in the phase-space analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackKind {
    /// `xp + px`, the squeezing generator.
    XpSym,
    XSquared,
    P2MinusX2,
}

impl FeedbackKind {
    pub const ALL: [FeedbackKind; 3] = [Self::XpSym, Self::XSquared, Self::P2MinusX2];

    pub fn name(self) -> &'static str {
        match self {
            Self::XpSym => "xp-sym",
            Self::XSquared => "x-squared",
            Self::P2MinusX2 => "p2-minus-x2",
        }
    }

    /// Classical phase-space function and its gradient `(f, df/dx, df/dp)`.
    pub fn classical(self, x: f64, p: f64) -> (f64, f64, f64) {
        match self {
            Self::XpSym => (2.0 * x * p, 2.0 * p, 2.0 * x),
            Self::XSquared => (x * x, 2.0 * x, 0.0),
            Self::P2MinusX2 => (p * p - x * x, -2.0 * x, 2.0 * p),
        }
    }
}

impl std::str::FromStr for FeedbackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid("feedback", format!("unknown feedback kind `{s}`")))
    }
}

pub fn feedback_operator(kind: FeedbackKind, space: &FockSpace) -> Operator {
    let (x, p) = quadratures(space);
    let m = match kind {
        FeedbackKind::XpSym => &x.entries * &p.entries + &p.entries * &x.entries,
        FeedbackKind::XSquared => &x.entries * &x.entries,
        FeedbackKind::P2MinusX2 => &p.entries * &p.entries - &x.entries * &x.entries,
    };
    hermitized(m)
}

/// `x²`, the continuously measured observable.
pub fn x_squared(space: &FockSpace) -> Operator {
    feedback_operator(FeedbackKind::XSquared, space)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    fn contains(self, n: usize) -> bool {
        match self {
            Parity::Even => n.is_multiple_of(2),
            Parity::Odd => n % 2 == 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        }
    }
}

/// `diag((-1)^n)`.
pub fn parity_operator(space: &FockSpace) -> Operator {
    let n = space.dim();
    let diag = CVector::from_iterator(
        n,
        (0..n).map(|k| if k % 2 == 0 { ONE } else { -ONE }),
    );
    Operator {
        entries: CMatrix::from_diagonal(&diag),
        hermitian: true,
    }
}

/// Normalized pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: CVector,
}

impl PureState {
    /// Normalizes `amplitudes`; fails on a zero or non-finite vector.
    pub fn new(amplitudes: CVector) -> Result<Self> {
        let norm = amplitudes.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidState(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Self {
            amplitudes: amplitudes / C64::new(norm, 0.0),
        })
    }

    pub fn fock(dim: usize, n: usize) -> Result<Self> {
        if n >= dim {
            return Err(invalid("n", format!("Fock level {n} outside truncation {dim}")));
        }
        let mut v = CVector::zeros(dim);
        v[n] = ONE;
        Ok(Self { amplitudes: v })
    }

    /// Coherent state centered at `(x0, p0)` in phase space, truncated and
    /// renormalized.
    pub fn coherent(space: &FockSpace, x0: f64, p0: f64) -> Result<Self> {
        let beta = C64::new(x0, p0) / (2.0 * space.kbar()).sqrt();
        let mut v = CVector::zeros(space.dim());
        let mut term = C64::new((-beta.norm_sqr() / 2.0).exp(), 0.0);
        v[0] = term;
        for n in 1..space.dim() {
            term = term * beta / (n as f64).sqrt();
            v[n] = term;
        }
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn to_density(&self) -> DensityMatrix {
        let m = &self.amplitudes * self.amplitudes.adjoint();
        DensityMatrix::from_matrix_unchecked(m)
    }

    /// `<self|other>`.
    pub fn overlap(&self, other: &PureState) -> Result<C64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    pub fn expectation(&self, op: &Operator) -> Result<C64> {
        check_dim(self.dim(), op.dim())?;
        Ok(self.amplitudes.dotc(&(op.matrix() * &self.amplitudes)))
    }

    /// Project onto a parity sector and renormalize.
    pub fn parity_project(&self, sector: Parity) -> Result<Self> {
        let mut v = self.amplitudes.clone();
        for (n, z) in v.iter_mut().enumerate() {
            if !sector.contains(n) {
                *z = ZERO;
            }
        }
        let weight = v.norm_squared();
        if weight < PARITY_MIN_WEIGHT {
            return Err(Error::NoParitySupport(sector.label(), weight));
        }
        Ok(Self {
            amplitudes: v / C64::new(weight.sqrt(), 0.0),
        })
    }
}

/// Conditional state: hermitian, unit trace, positive within tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    entries: CMatrix,
}

impl DensityMatrix {
    /// Validates trace, hermiticity and positivity.
    pub fn from_matrix(entries: CMatrix) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::InvalidState("density matrix must be square".into()));
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidState("non-finite entries".into()));
        }
        let rho = Self { entries };
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > STATE_TRACE_TOL || tr.im.abs() > STATE_TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let defect = rho.hermitian_defect();
        if defect > STATE_HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("hermitian defect {defect:e}")));
        }
        let min_eig = rho.min_eigenvalue();
        if min_eig < STATE_MIN_EIGENVALUE {
            return Err(Error::InvalidState(format!("minimum eigenvalue {min_eig:e}")));
        }
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(entries: CMatrix) -> Self {
        Self { entries }
    }

    /// Diagonal state with the given (non-negative) populations, renormalized.
    pub fn from_populations(populations: &[f64]) -> Result<Self> {
        let total: f64 = populations.iter().sum();
        if populations.iter().any(|p| *p < 0.0 || !p.is_finite()) || !(total > 0.0) {
            return Err(Error::InvalidState("populations must be non-negative with positive sum".into()));
        }
        let diag = CVector::from_iterator(
            populations.len(),
            populations.iter().map(|p| C64::new(p / total, 0.0)),
        );
        Ok(Self {
            entries: CMatrix::from_diagonal(&diag),
        })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            entries: CMatrix::identity(dim, dim) / C64::new(dim as f64, 0.0),
        }
    }

    /// Thermal state of the oscillator number operator with mean occupation
    /// `nbar` (truncated and renormalized).
    pub fn thermal(space: &FockSpace, nbar: f64) -> Result<Self> {
        if !(nbar >= 0.0 && nbar.is_finite()) {
            return Err(invalid("nbar", format!("must be >= 0, got {nbar}")));
        }
        if nbar == 0.0 {
            return Ok(PureState::fock(space.dim(), 0)?.to_density());
        }
        let ratio = nbar / (nbar + 1.0);
        let pops: Vec<f64> = (0..space.dim()).map(|n| ratio.powi(n as i32)).collect();
        Self::from_populations(&pops)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut CMatrix {
        &mut self.entries
    }

    pub fn into_matrix(self) -> CMatrix {
        self.entries
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    pub fn purity(&self) -> f64 {
        trace_of_product(&self.entries, &self.entries).re
    }

    pub fn hermitian_defect(&self) -> f64 {
        hermitian_defect(&self.entries)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.entries.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// `tr(op · rho)` for a hermitian observable.
    pub fn expect(&self, op: &Operator) -> Result<f64> {
        Ok(op.expectation(self)?.re)
    }

    /// Total population in one parity sector.
    pub fn sector_population(&self, sector: Parity) -> f64 {
        (0..self.dim())
            .filter(|&n| sector.contains(n))
            .map(|n| self.entries[(n, n)].re)
            .sum()
    }

    /// Apply `P± rho P±` and renormalize.
    pub fn parity_project(&self, sector: Parity) -> Result<Self> {
        let n = self.dim();
        let mut m = self.entries.clone();
        for j in 0..n {
            for i in 0..n {
                if !(sector.contains(i) && sector.contains(j)) {
                    m[(i, j)] = ZERO;
                }
            }
        }
        let weight = m.trace().re;
        if weight < PARITY_MIN_WEIGHT {
            return Err(Error::NoParitySupport(sector.label(), weight));
        }
        Ok(Self {
            entries: m / C64::new(weight, 0.0),
        })
    }

    /// `½ ‖rho - other‖₁`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        let diff = &self.entries - &other.entries;
        let ev = diff.symmetric_eigenvalues();
        Ok(0.5 * ev.iter().map(|e| e.abs()).sum::<f64>())
    }

    /// Mixture `Σ w_k rho_k` with weights summing to one.
    pub fn average<'a>(states: impl IntoIterator<Item = &'a DensityMatrix>) -> Result<Self> {
        let mut acc: Option<CMatrix> = None;
        let mut count = 0usize;
        for s in states {
            match acc.as_mut() {
                None => acc = Some(s.entries.clone()),
                Some(m) => {
                    check_dim(m.nrows(), s.dim())?;
                    *m += &s.entries;
                }
            }
            count += 1;
        }
        let m = acc.ok_or_else(|| invalid("states", "cannot average an empty ensemble"))?;
        Ok(Self {
            entries: m / C64::new(count as f64, 0.0),
        })
    }
}

/// `<target| rho |target>`.
pub fn fidelity(rho: &DensityMatrix, target: &PureState) -> Result<f64> {
    check_dim(rho.dim(), target.dim())?;
    let psi = target.amplitudes();
    let value = psi.dotc(&(rho.matrix() * psi));
    Ok(value.re)
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub energy: f64,
    pub state: PureState,
    /// Set when the operator commutes with parity.
    pub parity: Option<Parity>,
}

fn commutes_with_parity(m: &CMatrix) -> bool {
    let scale = max_abs(m);
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            if (i + j) % 2 == 1 && m[(i, j)].norm() > OPERATOR_HERMITIAN_RTOL * scale {
                return false;
            }
        }
    }
    true
}

fn fix_phase(mut v: CVector) -> CVector {
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(ONE);
    if pivot.norm() > 0.0 {
        let phase = pivot.conj() / pivot.norm();
        v *= phase;
    }
    v
}

fn diagonalize_block(m: &CMatrix, indices: &[usize], dim: usize, parity: Option<Parity>) -> Result<Vec<Eigenpair>> {
    let k = indices.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let block = CMatrix::from_fn(k, k, |i, j| m[(indices[i], indices[j])]);
    let eig = block
        .try_symmetric_eigen(1e-14, 0)
        .ok_or(Error::EigensolverFailed)?;
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut full = CVector::zeros(dim);
        for (r, &idx) in indices.iter().enumerate() {
            full[idx] = eig.eigenvectors[(r, c)];
        }
        out.push(Eigenpair {
            energy: eig.eigenvalues[c],
            state: PureState::new(fix_phase(full))?,
            parity,
        });
    }
    Ok(out)
}

/// Lowest `n_lowest` eigenpairs, ascending.
///
/// Parity-symmetric operators are diagonalized block by block so every
/// eigenvector has definite parity; ties order even before odd.
pub fn spectrum(h: &Operator, n_lowest: usize) -> Result<Vec<Eigenpair>> {
    h.require_hermitian("H")?;
    let dim = h.dim();
    let m = h.matrix();
    let mut pairs = if commutes_with_parity(m) {
        let even: Vec<usize> = (0..dim).step_by(2).collect();
        let odd: Vec<usize> = (1..dim).step_by(2).collect();
        let mut all = diagonalize_block(m, &even, dim, Some(Parity::Even))?;
        all.extend(diagonalize_block(m, &odd, dim, Some(Parity::Odd))?);
        all
    } else {
        let all: Vec<usize> = (0..dim).collect();
        diagonalize_block(m, &all, dim, None)?
    };
    if pairs.iter().any(|p| !p.energy.is_finite()) {
        return Err(Error::EigensolverFailed);
    }
    pairs.sort_by(|a, b| {
        a.energy.total_cmp(&b.energy).then_with(|| {
            let rank = |p: Option<Parity>| matches!(p, Some(Parity::Odd)) as u8;
            rank(a.parity).cmp(&rank(b.parity))
        })
    });
    pairs.truncate(n_lowest.min(dim));
    Ok(pairs)
}

/// Ground state, taking the even member when the lowest two levels form a
/// numerically degenerate doublet.
pub fn ground_state(h: &Operator) -> Result<Eigenpair> {
    let mut low = spectrum(h, 2)?;
    if low.len() == 2 {
        let scale = low[0].energy.abs().max(low[1].energy.abs()).max(1.0);
        let degenerate = (low[1].energy - low[0].energy).abs() <= DOUBLET_RTOL * scale;
        if degenerate && low[1].parity == Some(Parity::Even) {
            return Ok(low.swap_remove(1));
        }
    }
    Ok(low.swap_remove(0))
}

/// Wigner quasi-probability sampled on a rectangular grid.
#[derive(Debug, Clone)]
pub struct WignerField {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    /// `values[(i, j)] = W(x[i], p[j])`.
    pub values: DMatrix<f64>,
}

impl WignerField {
    /// Riemann sum `Σ W Δx Δp` using local cell widths.
    pub fn integral(&self) -> f64 {
        let wx = cell_widths(&self.x);
        let wp = cell_widths(&self.p);
        let mut total = 0.0;
        for (i, dx) in wx.iter().enumerate() {
            for (j, dp) in wp.iter().enumerate() {
                total += self.values[(i, j)] * dx * dp;
            }
        }
        total
    }

    /// `∫ W dp` at every x grid point.
    pub fn position_marginal(&self) -> Vec<f64> {
        let wp = cell_widths(&self.p);
        (0..self.x.len())
            .map(|i| wp.iter().enumerate().map(|(j, dp)| self.values[(i, j)] * dp).sum())
            .collect()
    }
}

fn cell_widths(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let lo = if i == 0 { grid[0] } else { 0.5 * (grid[i - 1] + grid[i]) };
            let hi = if i == n - 1 { grid[n - 1] } else { 0.5 * (grid[i] + grid[i + 1]) };
            hi - lo
        })
        .collect()
}

fn check_grid(name: &'static str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(name, "grid is empty"));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(name, "grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// Evenly spaced grid including both end points.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Wigner function by the Laguerre recursion over Fock matrix elements.
pub fn wigner(rho: &DensityMatrix, kbar: f64, x_grid: &[f64], p_grid: &[f64]) -> Result<WignerField> {
    check_grid("x_grid", x_grid)?;
    check_grid("p_grid", p_grid)?;
    if !(kbar > 0.0) {
        return Err(invalid("kbar", "must be positive"));
    }
    let m = rho.matrix();
    let dim = rho.dim();
    let norm = 1.0 / (std::f64::consts::PI * kbar);
    let scale = 1.0 / (2.0 * kbar).sqrt();
    let sqrt_n: Vec<f64> = (0..dim).map(|n| (n as f64).sqrt()).collect();
    let mut w = vec![ZERO; dim];
    let mut values = DMatrix::zeros(x_grid.len(), p_grid.len());
    for (i, &x) in x_grid.iter().enumerate() {
        for (j, &p) in p_grid.iter().enumerate() {
            let alpha = C64::new(x * scale, p * scale);
            let two_a = alpha * 2.0;
            let two_ac = alpha.conj() * 2.0;
            w[0] = C64::new((-2.0 * alpha.norm_sqr()).exp(), 0.0);
            let mut total = m[(0, 0)].re * w[0].re;
            for n in 1..dim {
                w[n] = two_a * w[n - 1] / sqrt_n[n];
                total += 2.0 * (m[(0, n)] * w[n]).re;
            }
            for k in 1..dim {
                let mut temp = w[k];
                w[k] = (two_ac * temp - w[k - 1] * sqrt_n[k]) / sqrt_n[k];
                total += (m[(k, k)] * w[k]).re;
                for n in k + 1..dim {
                    let next = (two_a * w[n - 1] - temp * sqrt_n[k]) / sqrt_n[n];
                    temp = w[n];
                    w[n] = next;
                    total += 2.0 * (m[(k, n)] * w[n]).re;
                }
            }
            values[(i, j)] = total * norm;
        }
    }
    Ok(WignerField {
        x: x_grid.to_vec(),
        p: p_grid.to_vec(),
        values,
    })
}

/// Oscillator eigenfunctions `<x|n>` for `n < dim`, by the stable
/// three-term recurrence.
pub fn hermite_functions(dim: usize, kbar: f64, x: f64) -> Vec<f64> {
    let xi = x / kbar.sqrt();
    let mut out = vec![0.0; dim];
    out[0] = (std::f64::consts::PI * kbar).powf(-0.25) * (-0.5 * xi * xi).exp();
    if dim > 1 {
        out[1] = std::f64::consts::SQRT_2 * xi * out[0];
    }
    for n in 1..dim.saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = (2.0 / (nf + 1.0)).sqrt() * xi * out[n] - (nf / (nf + 1.0)).sqrt() * out[n - 1];
    }
    out
}

/// Position probability density `<x|rho|x>` on a grid.
pub fn position_density(rho: &DensityMatrix, kbar: f64, x_grid: &[f64]) -> Vec<f64> {
    let m = rho.matrix();
    let dim = rho.dim();
    x_grid
        .iter()
        .map(|&x| {
            let psi = hermite_functions(dim, kbar, x);
            let mut acc = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    acc += (m[(i, j)] * psi[i] * psi[j]).re;
                }
            }
            acc
        })
        .collect()
}

/// Classical Hamiltonian flow `(Vx, Vp) = ({x, f}, {p, f})` of a feedback
/// generator on a phase-space grid.
#[derive(Debug, Clone)]
pub struct PhaseFlow {
    pub kind: FeedbackKind,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    /// `vx[(i, j)]` at `(x[i], p[j])`.
    pub vx: DMatrix<f64>,
    pub vp: DMatrix<f64>,
}

pub fn phase_flow(kind: FeedbackKind, x_grid: &[f64], p_grid: &[f64]) -> PhaseFlow {
    let mut vx = DMatrix::zeros(x_grid.len(), p_grid.len());
    let mut vp = DMatrix::zeros(x_grid.len(), p_grid.len());
    for (i, &x) in x_grid.iter().enumerate() {
        for (j, &p) in p_grid.iter().enumerate() {
            let (_, dfdx, dfdp) = kind.classical(x, p);
            vx[(i, j)] = dfdp;
            vp[(i, j)] = -dfdx;
        }
    }
    PhaseFlow {
        kind,
        x: x_grid.to_vec(),
        p: p_grid.to_vec(),
        vx,
        vp,
    }
}
