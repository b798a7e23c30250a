//! Half-line channel problems `-u'' + V u = τ² u` with a Dirichlet or
//! Neumann condition at `r = 0` and `V` supported in `[0, R_V]`.

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::cross_section::ModeSpectrum;
use crate::error::{Error, Result};
use crate::mode_decomposition::RadialProfile;
use crate::quadrature::{gregory_weights, GaussLegendre, GREGORY_ORDER};

const I: C = C::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

/// Real, compactly supported, `y`-independent potentials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `V = -depth` on `[0, radius)`.
    SquareWell {
        depth: f64,
        radius: f64,
    },
    /// `V = height` on `[0, radius)`.
    SquareBarrier {
        height: f64,
        radius: f64,
    },
    /// `V = amplitude·exp(1 - 1/(1 - (r/radius)²))` on `[0, radius)`.
    SmoothBump {
        amplitude: f64,
        radius: f64,
    },
    /// `V = values[i]` on `[edges[i-1], edges[i])`, with `edges[-1] = 0`.
    Piecewise {
        edges: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Potential {
    pub fn value(&self, r: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::SquareWell { depth, radius } => {
                if r < *radius {
                    -depth
                } else {
                    0.0
                }
            }
            Potential::SquareBarrier { height, radius } => {
                if r < *radius {
                    *height
                } else {
                    0.0
                }
            }
            Potential::SmoothBump { amplitude, radius } => {
                let x = r / radius;
                if x >= 1.0 {
                    0.0
                } else {
                    amplitude * (1.0 - 1.0 / (1.0 - x * x)).exp()
                }
            }
            Potential::Piecewise { edges, values } => {
                for (e, v) in edges.iter().zip(values) {
                    if r < *e {
                        return *v;
                    }
                }
                0.0
            }
        }
    }

    /// `R_V`: the potential vanishes for `r ≥ R_V`.
    pub fn support(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::SquareWell { radius, .. }
            | Potential::SquareBarrier { radius, .. }
            | Potential::SmoothBump { radius, .. } => *radius,
            Potential::Piecewise { edges, .. } => edges.last().copied().unwrap_or(0.0),
        }
    }

    /// Constant pieces `(a, b, V)` covering `[0, R_V]`, if the potential is piecewise constant.
    pub fn pieces(&self) -> Option<Vec<(f64, f64, f64)>> {
        match self {
            Potential::Zero => Some(vec![]),
            Potential::SquareWell { depth, radius } => Some(vec![(0.0, *radius, -depth)]),
            Potential::SquareBarrier { height, radius } => Some(vec![(0.0, *radius, *height)]),
            Potential::SmoothBump { .. } => None,
            Potential::Piecewise { edges, values } => {
                let mut a = 0.0;
                Some(
                    edges
                        .iter()
                        .zip(values)
                        .map(|(e, v)| {
                            let p = (a, *e, *v);
                            a = *e;
                            p
                        })
                        .collect(),
                )
            }
        }
    }

    /// Points where `V` or one of its derivatives jumps, including `R_V`.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Potential::Zero => vec![],
            Potential::Piecewise { edges, .. } => edges.clone(),
            _ => vec![self.support()],
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::SquareWell { depth, .. } => depth.abs(),
            Potential::SquareBarrier { height, .. } => height.abs(),
            Potential::SmoothBump { amplitude, .. } => amplitude.abs(),
            Potential::Piecewise { values, .. } => values.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    pub fn inf(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::SquareWell { depth, .. } => (-depth).min(0.0),
            Potential::SquareBarrier { height, .. } => height.min(0.0),
            Potential::SmoothBump { amplitude, .. } => amplitude.min(0.0),
            Potential::Piecewise { values, .. } => values.iter().fold(0.0, |m, v| m.min(*v)),
        }
    }

    /// Mean of `V` over `[a, b]`.
    pub fn cell_average(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return self.value(a);
        }
        match self.pieces() {
            Some(pieces) => {
                let mut acc = 0.0;
                for (p, q, v) in pieces {
                    let lo = p.max(a);
                    let hi = q.min(b);
                    if hi > lo {
                        acc += v * (hi - lo);
                    }
                }
                acc / (b - a)
            }
            None => {
                let r = self.support();
                let hi = b.min(r);
                if hi <= a {
                    return 0.0;
                }
                let gl = GaussLegendre::<f64>::new(16);
                let s: f64 = gl.integrate(a, hi, |x| self.value(x));
                s / (b - a)
            }
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("{path}.{field}"), msg));
        match self {
            Potential::Zero => Ok(()),
            Potential::SquareWell { depth: v, radius }
            | Potential::SquareBarrier { height: v, radius }
            | Potential::SmoothBump { amplitude: v, radius } => {
                if !v.is_finite() {
                    return bad("depth", "must be finite");
                }
                if !(*radius > 0.0) {
                    return bad("radius", "must be positive");
                }
                Ok(())
            }
            Potential::Piecewise { edges, values } => {
                if edges.is_empty() || edges.len() != values.len() {
                    return bad("edges", "needs one edge per value");
                }
                let mut prev = 0.0;
                for e in edges {
                    if !(*e > prev) {
                        return bad("edges", "must be positive and strictly increasing");
                    }
                    prev = *e;
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("values", "must be finite");
                }
                Ok(())
            }
        }
    }
}

/// Branch of `τ = (λ² - σ²)^{1/2}` on the physical sheet: `Im τ > 0` off the
/// real axis, `sign(Re λ)·√(λ²-σ²)` on open real channels, `i√(σ²-λ²)` on
/// closed ones.
pub fn tau_branch(lambda: C, sigma: f64) -> C {
    let z = lambda * lambda - sigma * sigma;
    if lambda.im == 0.0 {
        if z.re >= 0.0 {
            let s = if lambda.re < 0.0 { -1.0 } else { 1.0 };
            return C::new(s * z.re.sqrt(), 0.0);
        }
        return C::new(0.0, (-z.re).sqrt());
    }
    let t = z.sqrt();
    if t.im < 0.0 {
        -t
    } else {
        t
    }
}

/// A spectral point with explicit per-mode channel momenta.
#[derive(Clone, Debug, PartialEq)]
pub struct SlitPoint {
    pub lambda: C,
    pub tau: Vec<C>,
    /// Per mode: `true` when `τ_j` lies on the physical branch.
    pub physical: Vec<bool>,
}

impl SlitPoint {
    pub fn physical(lambda: C, sigmas: &[f64]) -> Self {
        let tau: Vec<C> = sigmas.iter().map(|s| tau_branch(lambda, *s)).collect();
        Self {
            lambda,
            physical: vec![true; tau.len()],
            tau,
        }
    }

    /// Takes `τ_j` as given and checks `τ_j² = λ² - σ_j²`.
    pub fn with_taus(lambda: C, sigmas: &[f64], tau: Vec<C>) -> Result<Self> {
        if tau.len() != sigmas.len() {
            return Err(Error::invalid("one τ per mode is required"));
        }
        let mut physical = Vec::with_capacity(tau.len());
        for (t, s) in tau.iter().zip(sigmas) {
            let z = lambda * lambda - s * s;
            if (t * t - z).norm() > 1e-12 * (1.0 + z.norm()) {
                return Err(Error::invalid(format!("τ = {t} does not square to λ² - σ² = {z}")));
            }
            physical.push((tau_branch(lambda, *s) - t).norm() <= 1e-12 * (1.0 + t.norm()));
        }
        Ok(Self { lambda, tau, physical })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OdeSolver {
    /// Exact propagation on constant pieces, RK4 with fine substeps on smooth ones.
    Auto,
    /// Classical RK4 with the given maximal step everywhere inside the support.
    Rk4 { step: f64 },
}

/// Relative size of `|W|` below which a pole is declared.
pub const RESONANCE_TOL: f64 = 1e-8;
/// Relative size of `u₀'(R)` below which a threshold counts as resonant.
pub const THRESHOLD_TOL: f64 = 1e-8;
/// Largest `|k|·step` accepted by a fixed-step RK4 solve.
pub const RK4_STABILITY: f64 = 2.5;
/// `|k|·dt` used by the automatic substepping on smooth pieces.
const AUTO_KDT: f64 = 2e-3;

/// One channel `h_j = -∂_r² + σ_j² + V`.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfLine {
    pub potential: Potential,
    pub bc: BoundaryCondition,
    pub sigma: f64,
    pub solver: OdeSolver,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scattering {
    pub tau: C,
    pub wronskian: C,
    /// `u = A e^{-iτr} + B e^{iτr}` beyond `R_V`.
    pub a: C,
    pub b: C,
    pub s: C,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringData {
    pub mode: usize,
    pub bc: BoundaryCondition,
    pub tau: C,
    pub wronskian: C,
    pub s: C,
    pub nodes: Vec<f64>,
    pub jost: Vec<C>,
    pub regular: Vec<C>,
    pub phi: Vec<C>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundState {
    pub kappa: f64,
    /// Eigenvalue `σ² - κ²` of the channel operator.
    pub energy: f64,
    /// `‖u‖_{L²}` of the regular solution.
    pub norm: f64,
    pub u_r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Threshold {
    pub resonant: bool,
    /// `W(0) = u₀'(R_V)`.
    pub wronskian: f64,
    pub u_r: f64,
    pub du_r: f64,
}

type State = [C; 2];

fn exact_step(k2: C, d: f64, y: State) -> State {
    let z = k2 * d * d;
    let (c, s) = if z.norm() < 1e-6 {
        (
            C::new(1.0, 0.0) - z / 2.0 + z * z / 24.0 - z * z * z / 720.0,
            (C::new(1.0, 0.0) - z / 6.0 + z * z / 120.0 - z * z * z / 5040.0) * d,
        )
    } else {
        let k = k2.sqrt();
        ((k * d).cos(), (k * d).sin() / k)
    };
    [c * y[0] + s * y[1], -k2 * s * y[0] + c * y[1]]
}

impl HalfLine {
    pub fn new(potential: Potential, bc: BoundaryCondition, sigma: f64) -> Self {
        Self {
            potential,
            bc,
            sigma,
            solver: OdeSolver::Auto,
        }
    }

    pub fn with_solver(mut self, solver: OdeSolver) -> Self {
        self.solver = solver;
        self
    }

    pub fn support(&self) -> f64 {
        self.potential.support()
    }

    /// `λ(τ) = (τ² + σ²)^{1/2}`.
    pub fn lambda(&self, tau: C) -> C {
        (tau * tau + self.sigma * self.sigma).sqrt()
    }

    fn initial(&self) -> State {
        match self.bc {
            BoundaryCondition::Dirichlet => [C::new(0.0, 0.0), C::new(1.0, 0.0)],
            BoundaryCondition::Neumann => [C::new(1.0, 0.0), C::new(0.0, 0.0)],
        }
    }

    /// Splits `[a, b]` (either orientation) at breakpoints.
    fn segments(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut cuts: Vec<f64> = vec![lo];
        let mut bps = self.potential.breakpoints();
        if let Some(p) = self.potential.pieces() {
            bps.extend(p.iter().map(|x| x.0));
        }
        bps.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
        for bp in bps {
            if bp > lo && bp < hi && bp > *cuts.last().expect("non-empty") {
                cuts.push(bp);
            }
        }
        cuts.push(hi);
        let mut segs: Vec<(f64, f64)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
        if a > b {
            segs.reverse();
            for s in segs.iter_mut() {
                *s = (s.1, s.0);
            }
        }
        segs
    }

    fn advance(&self, tau2: C, a: f64, b: f64, mut y: State) -> Result<State> {
        if a == b {
            return Ok(y);
        }
        let rv = self.support();
        for (p, q) in self.segments(a, b) {
            let mid = 0.5 * (p + q);
            let constant = mid >= rv || self.potential.pieces().is_some();
            match self.solver {
                OdeSolver::Auto if constant => {
                    y = exact_step(tau2 - self.potential.value(mid), q - p, y);
                }
                OdeSolver::Auto => {
                    let kmax = (tau2.norm() + self.potential.sup_abs()).sqrt() + 1.0;
                    let dt = (AUTO_KDT / kmax).min(1e-3);
                    y = self.rk4(tau2, p, q, ((q - p).abs() / dt).ceil() as usize, y);
                }
                OdeSolver::Rk4 { .. } if mid >= rv => {
                    y = exact_step(tau2, q - p, y);
                }
                OdeSolver::Rk4 { step } => {
                    let kmax = (tau2.norm() + self.potential.sup_abs()).sqrt();
                    if kmax * step > RK4_STABILITY {
                        return Err(Error::StepSize {
                            step,
                            tau_abs: tau2.norm().sqrt(),
                        });
                    }
                    y = self.rk4(tau2, p, q, ((q - p).abs() / step).ceil().max(1.0) as usize, y);
                }
            }
        }
        Ok(y)
    }

    fn rk4(&self, tau2: C, a: f64, b: f64, n: usize, mut y: State) -> State {
        let n = n.max(1);
        let dt = (b - a) / n as f64;
        // V is sampled strictly inside the segment so that a jump at an end
        // point is seen from the correct side.
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let eps = 1e-12 * (hi - lo);
        let f = |r: f64, y: State| -> State {
            let v = self.potential.value(r.clamp(lo + eps, hi - eps));
            [y[1], (v - tau2) * y[0]]
        };
        for k in 0..n {
            let r = a + k as f64 * dt;
            let k1 = f(r, y);
            let k2 = f(r + 0.5 * dt, [y[0] + 0.5 * dt * k1[0], y[1] + 0.5 * dt * k1[1]]);
            let k3 = f(r + 0.5 * dt, [y[0] + 0.5 * dt * k2[0], y[1] + 0.5 * dt * k2[1]]);
            let k4 = f(r + dt, [y[0] + dt * k3[0], y[1] + dt * k3[1]]);
            y = [
                y[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                y[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            ];
        }
        y
    }

    /// `(u, u')` of the regular solution at `R_V`.
    pub fn regular_at_support(&self, tau: C) -> Result<State> {
        self.advance(tau * tau, 0.0, self.support(), self.initial())
    }

    /// `(u, u')` of the regular solution at `r`.
    pub fn regular_at(&self, tau: C, r: f64) -> Result<State> {
        let rv = self.support();
        if r <= rv {
            return self.advance(tau * tau, 0.0, r, self.initial());
        }
        let y = self.regular_at_support(tau)?;
        Ok(exact_step(tau * tau, r - rv, y))
    }

    /// Regular solution at ascending nodes `rs`.
    pub fn regular_on(&self, tau: C, rs: &[f64]) -> Result<Vec<C>> {
        let tau2 = tau * tau;
        let rv = self.support();
        let mut out = Vec::with_capacity(rs.len());
        let mut pos = 0.0;
        let mut y = self.initial();
        let mut at_r: Option<State> = None;
        for &r in rs {
            if r <= rv {
                y = self.advance(tau2, pos, r, y)?;
                pos = r;
                out.push(y[0]);
            } else {
                let yr = match at_r {
                    Some(s) => s,
                    None => {
                        let s = self.advance(tau2, pos, rv, y)?;
                        at_r = Some(s);
                        s
                    }
                };
                out.push(exact_step(tau2, r - rv, yr)[0]);
            }
        }
        Ok(out)
    }

    /// `(f, f')` of the Jost solution at `r`.
    pub fn jost_at(&self, tau: C, r: f64) -> Result<State> {
        let rv = self.support();
        let at = |x: f64| -> State {
            let e = (I * tau * x).exp();
            [e, I * tau * e]
        };
        if r >= rv {
            return Ok(at(r));
        }
        self.advance(tau * tau, rv, r, at(rv))
    }

    /// Jost solution `f(r, τ)`, equal to `e^{iτr}` beyond `R_V`, at ascending nodes.
    pub fn jost_on(&self, tau: C, rs: &[f64]) -> Result<Vec<C>> {
        let rv = self.support();
        let tau2 = tau * tau;
        let mut out = vec![C::new(0.0, 0.0); rs.len()];
        let e = (I * tau * rv).exp();
        let mut y = [e, I * tau * e];
        let mut pos = rv;
        for (k, &r) in rs.iter().enumerate().rev() {
            if r >= rv {
                out[k] = (I * tau * r).exp();
            } else {
                y = self.advance(tau2, pos, r, y)?;
                pos = r;
                out[k] = y[0];
            }
        }
        Ok(out)
    }

    /// `W(τ) = u' f - u f'`, evaluated at `R_V`.
    pub fn wronskian(&self, tau: C) -> Result<C> {
        let [u, du] = self.regular_at_support(tau)?;
        Ok((I * tau * self.support()).exp() * (du - I * tau * u))
    }

    /// Difference between the Wronskian at `R_V` and at `r = 0`.
    pub fn wronskian_drift(&self, tau: C) -> Result<f64> {
        let w = self.wronskian(tau)?;
        let [f0, df0] = self.jost_at(tau, 0.0)?;
        let w0 = match self.bc {
            BoundaryCondition::Dirichlet => f0,
            BoundaryCondition::Neumann => -df0,
        };
        Ok((w - w0).norm())
    }

    fn check_pole(&self, tau: C, w: C) -> Result<()> {
        if w.norm() < RESONANCE_TOL * tau.norm().max(1.0) {
            return Err(Error::Resonance {
                tau_re: tau.re,
                tau_im: tau.im,
                wronskian_abs: w.norm(),
            });
        }
        Ok(())
    }

    pub fn scattering(&self, tau: C) -> Result<Scattering> {
        if tau.norm() == 0.0 {
            return Err(Error::invalid(
                "the scattering coefficient needs τ ≠ 0; use threshold()",
            ));
        }
        let rv = self.support();
        let [u, du] = self.regular_at_support(tau)?;
        let w = (I * tau * rv).exp() * (du - I * tau * u);
        self.check_pole(tau, w)?;
        let a = -w / (2.0 * I * tau);
        let b = (du + I * tau * u) * (-I * tau * rv).exp() / (2.0 * I * tau);
        Ok(Scattering {
            tau,
            wronskian: w,
            a,
            b,
            s: b / a,
        })
    }

    /// `Φ(τ, r) = u(r)/A`, so that `Φ = e^{-iτr} + S e^{iτr}` beyond `R_V`.
    /// At `τ = 0` the threshold value is returned.
    pub fn generalized_eigenfunction(&self, tau: C, rs: &[f64]) -> Result<Vec<C>> {
        if tau.norm() == 0.0 {
            let th = self.threshold()?;
            return Ok(self
                .threshold_phi(&th, rs)?
                .into_iter()
                .map(|v| C::new(v, 0.0))
                .collect());
        }
        let sc = self.scattering(tau)?;
        Ok(self.regular_on(tau, rs)?.into_iter().map(|u| u / sc.a).collect())
    }

    pub fn scattering_data(&self, mode: usize, tau: C, nodes: Vec<f64>) -> Result<ScatteringData> {
        let sc = self.scattering(tau)?;
        let regular = self.regular_on(tau, &nodes)?;
        let jost = self.jost_on(tau, &nodes)?;
        let phi = regular.iter().map(|u| u / sc.a).collect();
        Ok(ScatteringData {
            mode,
            bc: self.bc,
            tau,
            wronskian: sc.wronskian,
            s: sc.s,
            nodes,
            jost,
            regular,
            phi,
        })
    }

    /// `G(r, r'; τ) = u(min) f(max) / W(τ)`, the kernel of `(h - σ² - τ²)^{-1}`
    /// for `Im τ > 0` and its continuation elsewhere.
    pub fn greens_function(&self, tau: C, r: f64, rp: f64) -> Result<C> {
        let w = self.wronskian(tau)?;
        self.check_pole(tau, w)?;
        let (lo, hi) = if r <= rp { (r, rp) } else { (rp, r) };
        let u = self.regular_at(tau, lo)?[0];
        let f = self.jost_at(tau, hi)?[0];
        Ok(u * f / w)
    }

    /// `∫ g(r') u(r', τ) dr'` on the grid of `g`.
    pub fn regular_pairing(&self, tau: C, g: &RadialProfile) -> Result<C> {
        let n = g.active_len();
        let nodes: Vec<f64> = (0..n).map(|i| g.grid.r(i)).collect();
        let u = self.regular_on(tau, &nodes)?;
        let w = gregory_weights::<f64>(n, GREGORY_ORDER);
        Ok(u.iter()
            .zip(&g.values[..n])
            .zip(&w)
            .map(|((u, v), w)| u * (v * w))
            .sum::<C>()
            * g.grid.h)
    }

    /// `∫ G(r, r'; τ) g(r') dr'` at grid nodes `obs`, split at `r` where the kernel has a kink.
    pub fn apply_green(&self, tau: C, g: &RadialProfile, obs: &[usize]) -> Result<Vec<C>> {
        let w = self.wronskian(tau)?;
        self.check_pole(tau, w)?;
        let grid = g.grid;
        let last = obs
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(g.active_len().saturating_sub(1));
        let nodes: Vec<f64> = (0..=last).map(|i| grid.r(i)).collect();
        let u = self.regular_on(tau, &nodes)?;
        let f = self.jost_on(tau, &nodes)?;
        let data = &g.values;
        let n_data = g.active_len();
        obs.iter()
            .map(|&k| {
                let left = partial_integral(grid.h, 0, k, |i| u[i] * data[i]);
                let right = if k + 1 < n_data {
                    partial_integral(grid.h, k, n_data - 1, |i| f[i] * data[i])
                } else {
                    C::new(0.0, 0.0)
                };
                Ok((f[k] * left + u[k] * right) / w)
            })
            .collect()
    }

    /// Bound states: zeros of `κ ↦ W(iκ)` on `(0, κ_max]`, by scanning and bisection.
    /// `κ_max` defaults to `√(-inf V)`.
    pub fn bound_states(&self, kappa_max: Option<f64>) -> Result<Vec<BoundState>> {
        let kmax = kappa_max.unwrap_or_else(|| (-self.potential.inf()).sqrt() * (1.0 + 1e-12));
        if !(kmax > 0.0) {
            return Ok(vec![]);
        }
        // W(iκ) e^{κR} = u'(R) + κ u(R), real for real κ.
        let g = |k: f64| -> Result<f64> {
            let [u, du] = self.regular_at_support(C::new(0.0, k))?;
            Ok(du.re + k * u.re)
        };
        let n_scan = (400.0 * (1.0 + kmax * self.support().max(1.0))).ceil() as usize;
        let mut roots = Vec::new();
        let mut a = kmax * 1e-9;
        let mut ga = g(a)?;
        for s in 1..=n_scan {
            let b = kmax * s as f64 / n_scan as f64;
            let gb = g(b)?;
            if ga == 0.0 {
                roots.push(a);
            } else if ga.signum() != gb.signum() {
                roots.push(bisect(&g, a, b, ga)?);
            }
            a = b;
            ga = gb;
        }
        roots
            .into_iter()
            .map(|kappa| {
                let [u, _] = self.regular_at_support(C::new(0.0, kappa))?;
                let inner = self.inner_norm_sq(-kappa * kappa)?;
                let norm = (inner + u.re * u.re / (2.0 * kappa)).sqrt();
                Ok(BoundState {
                    kappa,
                    energy: self.sigma * self.sigma - kappa * kappa,
                    norm,
                    u_r: u.re,
                })
            })
            .collect()
    }

    /// `∫_0^{R_V} u² dr` for real `τ²`, by Gauss–Legendre on panels between breakpoints.
    fn inner_norm_sq(&self, tau2: f64) -> Result<f64> {
        let rv = self.support();
        if rv == 0.0 {
            return Ok(0.0);
        }
        let gl = GaussLegendre::<f64>::new(20);
        let kscale = (tau2.abs() + self.potential.sup_abs()).sqrt() + 1.0;
        let mut acc = 0.0;
        let mut y = self.initial();
        let mut pos = 0.0;
        let t2 = C::new(tau2, 0.0);
        for (p, q) in self.segments(0.0, rv) {
            let panels = ((q - p) * kscale / 0.5).ceil().max(1.0) as usize;
            let w = (q - p) / panels as f64;
            for m in 0..panels {
                let a = p + m as f64 * w;
                for (x, wt) in gl.mapped(a, a + w) {
                    y = self.advance(t2, pos, x, y)?;
                    pos = x;
                    acc += wt * y[0].re * y[0].re;
                }
            }
        }
        Ok(acc)
    }

    /// Normalized eigenfunction `η` of a bound state at nodes `rs`.
    pub fn bound_state_profile(&self, bs: &BoundState, rs: &[f64]) -> Result<Vec<f64>> {
        let rv = self.support();
        let mut inside: Vec<f64> = rs.iter().copied().filter(|r| *r <= rv).collect();
        inside.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let vals = self.regular_on(C::new(0.0, bs.kappa), &inside)?;
        Ok(rs
            .iter()
            .map(|&r| {
                if r <= rv {
                    let k = inside.iter().position(|x| *x == r).expect("collected above");
                    vals[k].re / bs.norm
                } else {
                    bs.u_r * (-bs.kappa * (r - rv)).exp() / bs.norm
                }
            })
            .collect())
    }

    /// Zero-energy data at `τ = 0`.
    pub fn threshold(&self) -> Result<Threshold> {
        let [u, du] = self.regular_at_support(C::new(0.0, 0.0))?;
        let resonant = du.norm() <= THRESHOLD_TOL * u.norm().max(f64::MIN_POSITIVE);
        Ok(Threshold {
            resonant,
            wronskian: du.re,
            u_r: u.re,
            du_r: du.re,
        })
    }

    /// `Φ(σ)`: `2u₀/u₀(R_V)` at a resonant threshold, zero otherwise.
    pub fn threshold_phi(&self, th: &Threshold, rs: &[f64]) -> Result<Vec<f64>> {
        if !th.resonant {
            return Ok(vec![0.0; rs.len()]);
        }
        let mut sorted: Vec<f64> = rs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let u = self.regular_on(C::new(0.0, 0.0), &sorted)?;
        Ok(rs
            .iter()
            .map(|r| {
                let k = sorted.iter().position(|x| x == r).expect("same set");
                2.0 * u[k].re / th.u_r
            })
            .collect())
    }
}

/// The cylinder problem: one potential and boundary condition shared by the
/// channels of a mode spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveguide {
    pub potential: Potential,
    pub bc: BoundaryCondition,
    pub spectrum: ModeSpectrum<f64>,
    pub solver: OdeSolver,
}

impl Waveguide {
    pub fn new(potential: Potential, bc: BoundaryCondition, spectrum: ModeSpectrum<f64>) -> Self {
        Self {
            potential,
            bc,
            spectrum,
            solver: OdeSolver::Auto,
        }
    }

    pub fn channel(&self, j: usize) -> HalfLine {
        HalfLine::new(self.potential.clone(), self.bc, self.spectrum.sigma[j]).with_solver(self.solver)
    }

    /// Bound states of the radial problem. They do not depend on `σ_j`; the
    /// energy in channel `j` is `σ_j² - κ²`.
    pub fn radial_bound_states(&self) -> Result<Vec<BoundState>> {
        HalfLine::new(self.potential.clone(), self.bc, 0.0)
            .with_solver(self.solver)
            .bound_states(None)
    }
}

fn bisect(g: &impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, mut ga: f64) -> Result<f64> {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let gm = g(m)?;
        if gm == 0.0 {
            return Ok(m);
        }
        if gm.signum() == ga.signum() {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Gregory integral over nodes `lo..=hi`.
fn partial_integral(h: f64, lo: usize, hi: usize, f: impl Fn(usize) -> C) -> C {
    if hi <= lo {
        return C::new(0.0, 0.0);
    }
    let w = gregory_weights::<f64>(hi - lo + 1, GREGORY_ORDER);
    (lo..=hi).zip(&w).map(|(i, w)| f(i) * *w).sum::<C>() * h
}

/// Depth of a square well of the given radius at which the zero-energy
/// regular solution becomes flat outside, found by bisection on `u₀'(R)`
/// inside `[lo, hi]`.
pub fn tune_resonant_depth(bc: BoundaryCondition, radius: f64, lo: f64, hi: f64) -> Result<f64> {
    let slope = |depth: f64| -> Result<f64> {
        let hl = HalfLine::new(Potential::SquareWell { depth, radius }, bc, 0.0);
        let [u, du] = hl.regular_at_support(C::new(0.0, 0.0))?;
        Ok(du.re / u.re.abs().max(1e-300))
    };
    let ga = slope(lo)?;
    let gb = slope(hi)?;
    if ga.signum() == gb.signum() {
        return Err(Error::invalid(format!(
            "no sign change of u₀'(R) between depths {lo} and {hi}"
        )));
    }
    bisect(&slope, lo, hi, ga)
}
