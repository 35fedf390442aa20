//! Conditional stochastic master equation under continuous measurement of
//! `x²`, and the deterministic reference equations used to check it.
//!
//! The measured channel is `c = sqrt(Γ) x²`. One control interval integrates
//!
//! ```text
//! dρ = -i[H, ρ] dt + D[c]ρ dt + Σ_k D[L_k]ρ dt + sqrt(η) H[c]ρ dW
//! ```
//!
//! in `n_substeps` pieces, and reports the interval-averaged current
//! `I = gain (<x²>_c + ΔW / (sqrt(4ηΓ) δt))` built from the same increments
//! that drove the state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{Controller, ObservationOptions, ObservationTracker};
use crate::error::{check_dim, invalid, Error, Result};
use crate::hilbert::{
    fidelity, ladder_operators, number_operator, CMatrix, CVector, DensityMatrix, FockSpace, Operator, Parity,
    PureState, C64,
};
use crate::sparse::{BandedLu, SparseOp};
use crate::system::{DoubleWellSystem, SimRng};

/// Below this minimum eigenvalue a trajectory is aborted.
pub const POSITIVITY_ABORT: f64 = -1e-4;

/// Target bound for [`SmeConfig::measurement_stiffness`].
pub const MAX_MEASUREMENT_STIFFNESS: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementConfig {
    /// Measurement rate Γ.
    pub gamma_meas: f64,
    /// Detection efficiency η.
    pub eta: f64,
    /// Record gain γg.
    pub gain: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            gamma_meas: 0.1,
            eta: 1.0,
            gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoherenceKind {
    /// `sqrt(γ) a`
    Damping,
    /// `sqrt(γ) a†a`
    Dephasing,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoherenceChannel {
    pub kind: DecoherenceKind,
    pub rate: f64,
}

impl DecoherenceChannel {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(invalid("rate", format!("decoherence rate must be >= 0, got {}", self.rate)));
        }
        if (self.rate == 0.0) != (self.kind == DecoherenceKind::None) {
            return Err(invalid("rate", "rate is zero exactly when the channel kind is `none`"));
        }
        Ok(())
    }

    /// Collapse operator `L`, or `None` for the empty channel.
    pub fn operator(&self, space: &FockSpace) -> Option<Operator> {
        match self.kind {
            DecoherenceKind::None => None,
            DecoherenceKind::Damping => Some(ladder_operators(space).0.scaled(self.rate.sqrt())),
            DecoherenceKind::Dephasing => Some(number_operator(space).scaled(self.rate.sqrt())),
        }
    }
}

/// Deterministic part of each substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// Plain Euler-Maruyama.
    EulerMaruyama,
    /// Classical RK4 for the drift, Euler-Maruyama for the innovation.
    Rk4Drift,
    /// Cayley propagator for the Hamiltonian, then first-order Kraus maps for
    /// the decoherence channels and the measurement. Every piece is completely
    /// positive.
    SplitKraus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmeConfig {
    pub measurement: MeasurementConfig,
    pub channels: Vec<DecoherenceChannel>,
    /// Controller interval δt.
    pub dt_control: f64,
    pub n_substeps: usize,
    pub renormalize: bool,
    pub integrator: Integrator,
}

impl Default for SmeConfig {
    fn default() -> Self {
        Self {
            measurement: MeasurementConfig::default(),
            channels: Vec::new(),
            dt_control: 0.01,
            n_substeps: 20,
            renormalize: true,
            integrator: Integrator::SplitKraus,
        }
    }
}

impl SmeConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.measurement;
        if !(m.gamma_meas > 0.0 && m.gamma_meas.is_finite()) {
            return Err(invalid("gamma_meas", format!("must be > 0, got {}", m.gamma_meas)));
        }
        if !(m.eta > 0.0 && m.eta <= 1.0) {
            return Err(invalid("eta", format!("must lie in (0, 1], got {}", m.eta)));
        }
        if !(m.gain > 0.0 && m.gain.is_finite()) {
            return Err(invalid("gain", format!("must be > 0, got {}", m.gain)));
        }
        if !(self.dt_control > 0.0 && self.dt_control.is_finite()) {
            return Err(invalid("dt_control", "must be positive"));
        }
        if self.n_substeps == 0 {
            return Err(invalid("n_substeps", "must be >= 1"));
        }
        if m.gamma_meas >= 0.1 && self.dt_substep() > 1e-2 {
            return Err(invalid(
                "n_substeps",
                format!("substep {} exceeds 1e-2 at Γ = {}", self.dt_substep(), m.gamma_meas),
            ));
        }
        for ch in &self.channels {
            ch.validate()?;
        }
        Ok(())
    }

    pub fn dt_substep(&self) -> f64 {
        self.dt_control / self.n_substeps as f64
    }

    /// `Γ λ_max² dt_sub`, with `λ_max` the largest eigenvalue magnitude of the
    /// measured observable. Above about one the measurement update amplifies
    /// the truncation edge.
    pub fn measurement_stiffness(&self, measured: &Operator) -> f64 {
        let lambda = measured
            .matrix()
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.measurement.gamma_meas * lambda * lambda * self.dt_substep()
    }

    /// Raises `n_substeps` until the measurement stiffness is at most
    /// [`MAX_MEASUREMENT_STIFFNESS`].
    pub fn stabilized(mut self, measured: &Operator) -> Self {
        let stiffness = self.measurement_stiffness(measured);
        if stiffness > MAX_MEASUREMENT_STIFFNESS {
            let factor = stiffness / MAX_MEASUREMENT_STIFFNESS;
            self.n_substeps = (self.n_substeps as f64 * factor).ceil() as usize;
        }
        self
    }
}

/// `L ρ L† − ½{L†L, ρ}`.
pub fn dissipator(l: &Operator, rho: &DensityMatrix) -> Result<CMatrix> {
    check_dim(l.dim(), rho.dim())?;
    let lm = l.matrix();
    let r = rho.matrix();
    let ldl = lm.adjoint() * lm;
    Ok(lm * r * lm.adjoint() - (&ldl * r + r * &ldl) * C64::new(0.5, 0.0))
}

/// `L ρ + ρ L − tr(L ρ + ρ L) ρ` for hermitian `L`.
pub fn innovation(l: &Operator, rho: &DensityMatrix) -> Result<CMatrix> {
    l.require_hermitian("L")?;
    check_dim(l.dim(), rho.dim())?;
    let r = rho.matrix();
    let anti = l.matrix() * r + r * l.matrix();
    let tr = anti.trace();
    Ok(&anti - r * tr)
}

/// Lindblad generator `−i[H, ρ] + Σ D[L_k]ρ`.
pub fn lindblad_rhs(rho: &DensityMatrix, h: &Operator, collapse: &[Operator]) -> Result<CMatrix> {
    check_dim(h.dim(), rho.dim())?;
    let r = rho.matrix();
    let hm = h.matrix();
    let mut out = (hm * r - r * hm) * C64::new(0.0, -1.0);
    for l in collapse {
        out += dissipator(l, rho)?;
    }
    Ok(out)
}

/// Unconditional closed-loop generator with Markovian feedback:
/// `−i[H, ρ] + Γ D[A]ρ − i sqrt(Γ) [F, Aρ + ρA] + D[F]ρ`.
pub fn markovian_feedback_rhs(
    rho: &DensityMatrix,
    h: &Operator,
    a_meas: &Operator,
    f: &Operator,
    gamma_meas: f64,
) -> Result<CMatrix> {
    a_meas.require_hermitian("A")?;
    f.require_hermitian("F")?;
    check_dim(h.dim(), rho.dim())?;
    check_dim(a_meas.dim(), rho.dim())?;
    check_dim(f.dim(), rho.dim())?;
    let r = rho.matrix();
    let hm = h.matrix();
    let am = a_meas.matrix();
    let fm = f.matrix();
    let minus_i = C64::new(0.0, -1.0);
    let mut out = (hm * r - r * hm) * minus_i;
    out += dissipator(a_meas, rho)? * C64::new(gamma_meas, 0.0);
    let sym = am * r + r * am;
    out += (fm * &sym - &sym * fm) * (minus_i * gamma_meas.sqrt());
    out += dissipator(f, rho)?;
    Ok(out)
}

/// Stationary state of a linear generator, found by solving `L vec(ρ) = 0`
/// with one row replaced by the trace condition.
pub fn steady_state<G>(dim: usize, generator: G) -> Result<DensityMatrix>
where
    G: Fn(&DensityMatrix) -> Result<CMatrix>,
{
    let n2 = dim * dim;
    let mut liouvillian = CMatrix::zeros(n2, n2);
    let mut basis = CMatrix::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            basis[(i, j)] = C64::new(1.0, 0.0);
            let col = generator(&DensityMatrix::from_matrix_unchecked(basis.clone()))?;
            basis[(i, j)] = C64::new(0.0, 0.0);
            liouvillian.column_mut(i + j * dim).copy_from_slice(col.as_slice());
        }
    }
    let mut rhs = nalgebra::DVector::<C64>::zeros(n2);
    for k in 0..n2 {
        liouvillian[(0, k)] = C64::new(0.0, 0.0);
    }
    for k in 0..dim {
        liouvillian[(0, k + k * dim)] = C64::new(1.0, 0.0);
    }
    rhs[0] = C64::new(1.0, 0.0);
    let v = liouvillian.lu().solve(&rhs).ok_or(Error::EigensolverFailed)?;
    let mut m = CMatrix::from_column_slice(dim, dim, v.as_slice());
    hermitize_in_place(&mut m);
    let tr = m.trace().re;
    m /= C64::new(tr, 0.0);
    Ok(DensityMatrix::from_matrix_unchecked(m))
}

/// Steady state of the Markovian feedback master equation for proportional feedback
/// `H_fb = -gain (I - setpoint) F` driven by the normalized current `I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarkovianSteadyState {
    pub gamma_meas: f64,
    pub purity: f64,
    pub fidelity: f64,
    pub expect_x2: f64,
}

/// Solves in the even-parity block, where the even ground state lives.
///
/// With `I = <x²> + ξ / sqrt(4Γ)` the feedback maps onto the generator with
/// `F_eff = -gain F / (2 sqrt(Γ))` and a static term `gain · setpoint · F`.
pub fn markovian_steady_state(
    system: &DoubleWellSystem,
    gain: f64,
    gamma_meas: f64,
) -> Result<MarkovianSteadyState> {
    if !(gamma_meas > 0.0) {
        return Err(invalid("gamma_meas", "must be > 0"));
    }
    let even = Parity::Even;
    let h = system
        .hamiltonian
        .try_add(&system.feedback.scaled(gain * system.setpoint()))?
        .parity_block(even)?;
    let a = system.x2.parity_block(even)?;
    let f = system.feedback.scaled(-gain / (2.0 * gamma_meas.sqrt())).parity_block(even)?;
    let block = a.dim();
    let ss = steady_state(block, |r| markovian_feedback_rhs(r, &h, &a, &f, gamma_meas))?;
    let amps = system.ground.amplitudes();
    let ground = PureState::new(CVector::from_iterator(block, (0..system.dim()).step_by(2).map(|n| amps[n])))?;
    Ok(MarkovianSteadyState {
        gamma_meas,
        purity: ss.purity(),
        fidelity: fidelity(&ss, &ground)?,
        expect_x2: ss.expect(&a)?,
    })
}

/// One Gaussian weak measurement of `A` with Kraus operator
/// `Υ(z) = (2πσ)^{-1/4} exp[-(z - gA)² / (4σ)]`.
///
/// Returns the outcome and the normalized post-measurement state.
pub fn weak_measure(
    rho: &DensityMatrix,
    a_meas: &Operator,
    g: f64,
    sigma: f64,
    rng: &mut SimRng,
) -> Result<(f64, DensityMatrix)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be > 0, got {sigma}")));
    }
    a_meas.require_hermitian("A")?;
    check_dim(a_meas.dim(), rho.dim())?;
    let eig = a_meas
        .matrix()
        .clone()
        .try_symmetric_eigen(1e-14, 0)
        .ok_or(Error::EigensolverFailed)?;
    let v = &eig.eigenvectors;
    let rotated = v.adjoint() * rho.matrix() * v;
    let n = rho.dim();
    let weights: Vec<f64> = (0..n).map(|k| rotated[(k, k)].re.max(0.0)).collect();
    let total: f64 = weights.iter().sum();

    let mut u: f64 = rng.random::<f64>() * total;
    let mut branch = n - 1;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            branch = k;
            break;
        }
        u -= w;
    }
    let noise: f64 = rng.sample(StandardNormal);
    let z = g * eig.eigenvalues[branch] + sigma.sqrt() * noise;

    let exponents: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&lam| -(z - g * lam).powi(2) / (4.0 * sigma))
        .collect();
    let shift = exponents
        .iter()
        .zip(&weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(e, _)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    let kraus: Vec<f64> = exponents.iter().map(|e| (e - shift).exp()).collect();
    let post_rot = CMatrix::from_fn(n, n, |i, j| rotated[(i, j)] * (kraus[i] * kraus[j]));
    let mut post = v * post_rot * v.adjoint();
    let tr = post.trace().re;
    post /= C64::new(tr, 0.0);
    let post = (&post + post.adjoint()) * C64::new(0.5, 0.0);
    Ok((z, DensityMatrix::from_matrix_unchecked(post)))
}

/// Result of one control interval.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Interval-averaged measurement current.
    pub current: f64,
    /// Sum of the substep Wiener increments.
    pub dw_sum: f64,
    pub rho_after: DensityMatrix,
    /// `<x²>_c` at the start of the interval.
    pub expect_x2: f64,
}

/// [`StepRecord`] without the state copy, for the in-place stepper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub current: f64,
    pub dw_sum: f64,
    pub expect_x2: f64,
}

struct ChannelOps {
    l: SparseOp,
    l_dag: SparseOp,
    ldl: SparseOp,
}

struct Generators {
    h_total: SparseOp,
    meas: SparseOp,
    meas_sq: SparseOp,
    x2: SparseOp,
    channels: Vec<ChannelOps>,
    // factors of I + i H dt/2 for the split integrator
    cayley: Option<BandedLu>,
}

struct Workspace {
    t: CMatrix,
    u: CMatrix,
    k: [CMatrix; 4],
    stage: CMatrix,
    innov: CMatrix,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let z = || CMatrix::zeros(n, n);
        Self {
            t: z(),
            u: z(),
            k: [z(), z(), z(), z()],
            stage: z(),
            innov: z(),
        }
    }
}

/// Adds `scale · (t + t†)` into `out`.
fn add_herm_part(out: &mut CMatrix, t: &CMatrix, scale: f64) {
    let n = t.nrows();
    for j in 0..n {
        for i in 0..n {
            out[(i, j)] += (t[(i, j)] + t[(j, i)].conj()) * scale;
        }
    }
}

impl Generators {
    /// Deterministic drift for hermitian `rho`.
    fn drift(&self, rho: &CMatrix, out: &mut CMatrix, t: &mut CMatrix, u: &mut CMatrix, with_meas: bool) {
        let n = rho.nrows();
        self.h_total.left_mul(rho, t);
        // -i (Hρ - ρH) with ρH = (Hρ)†
        for j in 0..n {
            for i in 0..n {
                let d = t[(i, j)] - t[(j, i)].conj();
                out[(i, j)] = C64::new(d.im, -d.re);
            }
        }
        if with_meas {
            self.meas.left_mul(rho, t);
            self.meas.right_mul(t, u);
            *out += &*u;
            self.meas_sq.left_mul(rho, t);
            add_herm_part(out, t, -0.5);
        }
        for ch in &self.channels {
            ch.l.left_mul(rho, t);
            ch.l_dag.right_mul(t, u);
            *out += &*u;
            ch.ldl.left_mul(rho, t);
            add_herm_part(out, t, -0.5);
        }
    }

    /// `ρ ← M ρ M + (1 − η) c ρ c dt` with
    /// `M = I − c² dt/2 + sqrt(η) c dy + η c² (dy² − dt)/2` and
    /// `dy = dW + 2 sqrt(η) <c> dt`.
    fn kraus_measure(&self, rho: &mut CMatrix, eta: f64, dt: f64, dw: f64, ws: &mut Workspace) {
        let mean_c = self.meas.trace_mul(rho).re;
        let dy = dw + 2.0 * eta.sqrt() * mean_c * dt;
        let alpha = eta.sqrt() * dy;
        let beta = -0.5 * dt + 0.5 * eta * (dy * dy - dt);
        // stage = M ρ
        self.meas.left_mul(rho, &mut ws.t);
        self.meas_sq.left_mul(rho, &mut ws.u);
        ws.stage.copy_from(rho);
        axpy(&mut ws.stage, alpha, &ws.t);
        axpy(&mut ws.stage, beta, &ws.u);
        let unmonitored = (1.0 - eta) * dt;
        if unmonitored > 0.0 {
            self.meas.right_mul(&ws.t, &mut ws.innov);
        }
        // rho = (M ρ) M
        rho.copy_from(&ws.stage);
        self.meas.right_mul(&ws.stage, &mut ws.t);
        axpy(rho, alpha, &ws.t);
        self.meas_sq.right_mul(&ws.stage, &mut ws.t);
        axpy(rho, beta, &ws.t);
        if unmonitored > 0.0 {
            axpy(rho, unmonitored, &ws.innov);
        }
    }

    /// `ρ ← U ρ U†` with the Cayley propagator `U = (I + iH dt/2)⁻¹ (I − iH dt/2)`.
    fn cayley_unitary(&self, lu: &BandedLu, rho: &mut CMatrix, dt: f64, ws: &mut Workspace) {
        let half = C64::new(0.0, -0.5 * dt);
        self.h_total.left_mul(rho, &mut ws.t);
        ws.stage.copy_from(rho);
        ws.stage += &ws.t * half;
        lu.solve_in_place(&mut ws.stage);
        ws.stage.adjoint_to(&mut ws.u);
        self.h_total.left_mul(&ws.u, &mut ws.t);
        rho.copy_from(&ws.u);
        *rho += &ws.t * half;
        lu.solve_in_place(rho);
    }

    /// First-order Kraus form of each decoherence channel:
    /// `ρ ← K ρ K + dt L ρ L†` with `K = I − L†L dt/2`.
    fn kraus_channels(&self, rho: &mut CMatrix, dt: f64, ws: &mut Workspace) {
        for ch in &self.channels {
            ch.l.left_mul(rho, &mut ws.t);
            ch.l_dag.right_mul(&ws.t, &mut ws.innov);
            ch.ldl.left_mul(rho, &mut ws.t);
            ws.stage.copy_from(rho);
            axpy(&mut ws.stage, -0.5 * dt, &ws.t);
            ch.ldl.right_mul(&ws.stage, &mut ws.t);
            rho.copy_from(&ws.stage);
            axpy(rho, -0.5 * dt, &ws.t);
            axpy(rho, dt, &ws.innov);
        }
    }

    /// `c ρ + ρ c − tr(c ρ + ρ c) ρ`.
    fn innovation(&self, rho: &CMatrix, out: &mut CMatrix, t: &mut CMatrix) {
        self.meas.left_mul(rho, t);
        let tr = 2.0 * t.trace().re;
        let n = rho.nrows();
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] = t[(i, j)] + t[(j, i)].conj() - rho[(i, j)] * tr;
            }
        }
    }
}

fn rk4_drift(gens: &Generators, m: &mut CMatrix, dt: f64, ws: &mut Workspace, with_meas: bool) {
    let [k1, k2, k3, k4] = &mut ws.k;
    gens.drift(m, k1, &mut ws.t, &mut ws.u, with_meas);
    ws.stage.copy_from(m);
    axpy(&mut ws.stage, 0.5 * dt, k1);
    gens.drift(&ws.stage, k2, &mut ws.t, &mut ws.u, with_meas);
    ws.stage.copy_from(m);
    axpy(&mut ws.stage, 0.5 * dt, k2);
    gens.drift(&ws.stage, k3, &mut ws.t, &mut ws.u, with_meas);
    ws.stage.copy_from(m);
    axpy(&mut ws.stage, dt, k3);
    gens.drift(&ws.stage, k4, &mut ws.t, &mut ws.u, with_meas);
    let w = dt / 6.0;
    axpy(m, w, k1);
    axpy(m, 2.0 * w, k2);
    axpy(m, 2.0 * w, k3);
    axpy(m, w, k4);
}

fn axpy(y: &mut CMatrix, a: f64, x: &CMatrix) {
    for (yv, xv) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yv += xv * a;
    }
}

fn hermitize_in_place(m: &mut CMatrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        let d = m[(j, j)].re;
        m[(j, j)] = C64::new(d, 0.0);
    }
}

/// Reusable integrator for `H_total = H_base + amplitude · F`.
pub struct SmeStepper {
    cfg: SmeConfig,
    dim: usize,
    base_h: CMatrix,
    feedback: CMatrix,
    amplitude: Option<f64>,
    gens: Generators,
    ws: Workspace,
}

impl SmeStepper {
    pub fn new(
        space: &FockSpace,
        base_h: &Operator,
        feedback: &Operator,
        measured: &Operator,
        cfg: &SmeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        base_h.require_hermitian("H")?;
        feedback.require_hermitian("F")?;
        measured.require_hermitian("A")?;
        let dim = space.dim();
        check_dim(dim, base_h.dim())?;
        check_dim(dim, feedback.dim())?;
        check_dim(dim, measured.dim())?;
        let sqrt_gamma = cfg.measurement.gamma_meas.sqrt();
        let c = measured.matrix() * C64::new(sqrt_gamma, 0.0);
        let channels = cfg
            .channels
            .iter()
            .filter_map(|ch| ch.operator(space))
            .map(|l| {
                let m = l.matrix();
                ChannelOps {
                    l: SparseOp::from_dense(m),
                    l_dag: SparseOp::from_dense(&m.adjoint()),
                    ldl: SparseOp::from_dense(&(m.adjoint() * m)),
                }
            })
            .collect();
        let gens = Generators {
            h_total: SparseOp::from_dense(base_h.matrix()),
            meas_sq: SparseOp::from_dense(&(c.adjoint() * &c)),
            meas: SparseOp::from_dense(&c),
            x2: SparseOp::from_dense(measured.matrix()),
            channels,
            cayley: None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            dim,
            base_h: base_h.matrix().clone(),
            feedback: feedback.matrix().clone(),
            amplitude: None,
            gens,
            ws: Workspace::new(dim),
        })
    }

    /// Stepper for a [`DoubleWellSystem`] with its feedback generator.
    pub fn for_system(system: &DoubleWellSystem, cfg: &SmeConfig) -> Result<Self> {
        Self::new(&system.space, &system.hamiltonian, &system.feedback, &system.x2, cfg)
    }

    pub fn config(&self) -> &SmeConfig {
        &self.cfg
    }

    fn set_amplitude(&mut self, amplitude: f64) {
        if self.amplitude != Some(amplitude) {
            let h = &self.base_h + &self.feedback * C64::new(amplitude, 0.0);
            if self.cfg.integrator == Integrator::SplitKraus {
                let denom = CMatrix::identity(self.dim, self.dim) + &h * C64::new(0.0, 0.5 * self.cfg.dt_substep());
                self.gens.cayley = Some(BandedLu::factor(&denom));
            }
            self.gens.h_total = SparseOp::from_dense(&h);
            self.amplitude = Some(amplitude);
        }
    }

    /// Advances `rho` by one control interval with fresh Wiener increments.
    pub fn step(&mut self, rho: &mut DensityMatrix, amplitude: f64, rng: &mut SimRng) -> Result<StepOutcome> {
        let dt = self.cfg.dt_substep();
        let sd = dt.sqrt();
        let mut increments = [0.0; 64];
        let n_sub = self.cfg.n_substeps;
        if n_sub <= increments.len() {
            for w in increments[..n_sub].iter_mut() {
                *w = sd * rng.sample::<f64, _>(StandardNormal);
            }
            self.step_with_increments(rho, amplitude, &increments[..n_sub])
        } else {
            let incs: Vec<f64> = (0..n_sub).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            self.step_with_increments(rho, amplitude, &incs)
        }
    }

    /// Advances `rho` using caller-supplied substep increments.
    pub fn step_with_increments(
        &mut self,
        rho: &mut DensityMatrix,
        amplitude: f64,
        increments: &[f64],
    ) -> Result<StepOutcome> {
        check_dim(self.dim, rho.dim())?;
        if increments.len() != self.cfg.n_substeps {
            return Err(invalid(
                "increments",
                format!("expected {} substep increments, got {}", self.cfg.n_substeps, increments.len()),
            ));
        }
        if !amplitude.is_finite() {
            return Err(invalid("amplitude", "must be finite"));
        }
        self.set_amplitude(amplitude);
        let dt = self.cfg.dt_substep();
        let eta = self.cfg.measurement.eta;
        let sqrt_eta = eta.sqrt();
        let expect_x2 = self.gens.x2.trace_mul(rho.matrix()).re;

        let gens = &self.gens;
        let ws = &mut self.ws;
        let m = rho.matrix_mut();
        let integrator = self.cfg.integrator;
        for (s, &dw) in increments.iter().enumerate() {
            match integrator {
                Integrator::EulerMaruyama => {
                    gens.innovation(m, &mut ws.innov, &mut ws.t);
                    gens.drift(m, &mut ws.k[0], &mut ws.t, &mut ws.u, true);
                    axpy(m, dt, &ws.k[0]);
                    axpy(m, sqrt_eta * dw, &ws.innov);
                }
                Integrator::Rk4Drift => {
                    gens.innovation(m, &mut ws.innov, &mut ws.t);
                    rk4_drift(gens, m, dt, ws, true);
                    axpy(m, sqrt_eta * dw, &ws.innov);
                }
                Integrator::SplitKraus => {
                    if let Some(lu) = &gens.cayley {
                        gens.cayley_unitary(lu, m, dt, ws);
                    }
                    gens.kraus_channels(m, dt, ws);
                    gens.kraus_measure(m, eta, dt, dw, ws);
                }
            }
            hermitize_in_place(m);
            if self.cfg.renormalize || integrator == Integrator::SplitKraus {
                let tr = m.trace().re;
                *m /= C64::new(tr, 0.0);
            }
            if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::NonFinite { substep: s });
            }
        }
        check_positivity(rho)?;

        let dw_sum: f64 = increments.iter().sum();
        let mc = &self.cfg.measurement;
        let current = mc.gain
            * (expect_x2 + dw_sum / ((4.0 * eta * mc.gamma_meas).sqrt() * self.cfg.dt_control));
        Ok(StepOutcome {
            current,
            dw_sum,
            expect_x2,
        })
    }
}

/// Aborts when the state has an eigenvalue below [`POSITIVITY_ABORT`].
/// In-place Cholesky that reports failure on any non-positive pivot.
fn is_positive_definite(mut m: CMatrix) -> bool {
    let n = m.nrows();
    for j in 0..n {
        let mut d = m[(j, j)].re;
        for k in 0..j {
            d -= m[(j, k)].norm_sqr();
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        m[(j, j)] = C64::new(d, 0.0);
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= m[(i, k)] * m[(j, k)].conj();
            }
            m[(i, j)] = v / d;
        }
    }
    true
}

fn check_positivity(rho: &DensityMatrix) -> Result<()> {
    let n = rho.dim();
    let shifted = rho.matrix() + CMatrix::identity(n, n) * C64::new(-POSITIVITY_ABORT, 0.0);
    if is_positive_definite(shifted) {
        return Ok(());
    }
    let min_eigenvalue = rho.min_eigenvalue();
    if min_eigenvalue < POSITIVITY_ABORT {
        Err(Error::PositivityViolation { min_eigenvalue })
    } else {
        Ok(())
    }
}

/// Single control interval of the conditional master equation under
/// `h_total`, measuring `measured` (normally `x²`).
pub fn sme_step(
    rho: &DensityMatrix,
    h_total: &Operator,
    measured: &Operator,
    space: &FockSpace,
    cfg: &SmeConfig,
    rng: &mut SimRng,
) -> Result<StepRecord> {
    let zero = Operator::zeros(h_total.dim());
    let mut stepper = SmeStepper::new(space, h_total, &zero, measured, cfg)?;
    let mut state = rho.clone();
    let out = stepper.step(&mut state, 0.0, rng)?;
    Ok(StepRecord {
        current: out.current,
        dw_sum: out.dw_sum,
        rho_after: state,
        expect_x2: out.expect_x2,
    })
}

/// Per-step log of a closed-loop trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub currents: Vec<f64>,
    pub actions: Vec<f64>,
    /// Fidelity with the ground state after each step.
    pub fidelities: Vec<f64>,
    /// `<x²>_c` at the start of each step.
    pub expect_x2: Vec<f64>,
    pub final_state: DensityMatrix,
}

impl TrajectoryRecord {
    pub fn mean_fidelity(&self) -> f64 {
        mean(&self.fidelities)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Closed loop: each control interval the controller picks the amplitude of
/// the feedback generator, then the conditional state advances one step.
pub fn evolve_trajectory(
    rho0: &DensityMatrix,
    controller: &mut dyn Controller,
    system: &DoubleWellSystem,
    cfg: &SmeConfig,
    horizon_steps: usize,
    options: &ObservationOptions,
    rng: &mut SimRng,
) -> Result<TrajectoryRecord> {
    if horizon_steps == 0 {
        return Err(invalid("horizon_steps", "must be >= 1"));
    }
    check_dim(system.dim(), rho0.dim())?;
    let mut stepper = SmeStepper::for_system(system, cfg)?;
    let mut rho = rho0.clone();
    let gain = cfg.measurement.gain;
    let mut tracker = ObservationTracker::new(options, gain * rho.expect(&system.x2)?);
    tracker.set_privileged(rho.expect(&system.x2)?, fidelity(&rho, &system.ground)?);

    let mut record = TrajectoryRecord {
        currents: Vec::with_capacity(horizon_steps),
        actions: Vec::with_capacity(horizon_steps),
        fidelities: Vec::with_capacity(horizon_steps),
        expect_x2: Vec::with_capacity(horizon_steps),
        final_state: rho.clone(),
    };
    for step in 0..horizon_steps {
        let obs = tracker.observation();
        let action = controller.act(&obs, rng)?;
        let out = stepper
            .step(&mut rho, action.amplitude(), rng)
            .map_err(|e| Error::TrajectoryAborted {
                step,
                source: Box::new(e),
            })?;
        let fid = fidelity(&rho, &system.ground)?;
        tracker.record(out.current, action.amplitude());
        tracker.set_privileged(rho.expect(&system.x2)?, fid);
        record.currents.push(out.current);
        record.actions.push(action.amplitude());
        record.fidelities.push(fid);
        record.expect_x2.push(out.expect_x2);
    }
    record.final_state = rho;
    Ok(record)
}
