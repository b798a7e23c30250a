//! Long-time expansions of the channel solutions: the eigenvalue part `u_e`,
//! the leading threshold part `u_thr`, its refinement `u_thr,k₀` through the
//! stationary-phase engine, and the explicit half-cylinder coefficients.
//!
//! Every term is real: `profile(r) · t^power · cos(ω t + phase)`, or the
//! hyperbolic analogue for eigenvalues below zero.
//!
//! Channel `j` contributes
//! `(1/2π) ∫_0^∞ [cos(λt) K₁(τ) + sin(λt)/λ K₂(τ)] dτ`, `λ² = σ_j² + τ²`, with
//! `K_i(τ, r) = 4τ² u(τ, r) ⟨u(τ), f_i⟩ / (W(τ) W(-τ))`. `K_i` is even in `τ`,
//! so the threshold endpoint only produces powers `t^{-1/2-k}`.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halfline_scattering::{BoundaryCondition, HalfLine, Waveguide};
use crate::mode_decomposition::{CylinderField, RadialProfile};
use crate::quadrature::integrate_samples;
use crate::series::PowerSeries;
use crate::stationary_phase::{boundary_coefficients, Side, Sign, MAX_K0};
use crate::wave_evolution::EnergyFilter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Eigen,
    ZeroThresholdConstant,
    ThresholdHalfPower,
    HigherOrder,
}

/// Which initial datum a term is linear in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSlot {
    F1,
    F2,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermMeta {
    pub mode: usize,
    pub sigma: f64,
    /// Index of the bound state within its channel.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eigen: Option<usize>,
    /// `k` of `t^{-1/2-k}`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order: Option<usize>,
    pub data: DataSlot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTerm {
    pub kind: TermKind,
    pub omega: f64,
    pub power: f64,
    pub phase: f64,
    /// Use `cos(phase)·cosh(ωt) - sin(phase)·sinh(ωt)` in place of the cosine.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hyperbolic: bool,
    /// Values at the series' observation radii.
    pub profile: Vec<f64>,
    pub meta: TermMeta,
}

impl ExpansionTerm {
    pub fn factor(&self, t: f64) -> f64 {
        let p = if self.power == 0.0 { 1.0 } else { t.powf(self.power) };
        let osc = if self.hyperbolic {
            let x = self.omega * t;
            self.phase.cos() * x.cosh() - self.phase.sin() * x.sinh()
        } else {
            (self.omega * t + self.phase).cos()
        };
        p * osc
    }
}

/// Terms of one or more expansions on shared observation radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSeries {
    pub k0: usize,
    pub radii: Vec<f64>,
    pub terms: Vec<ExpansionTerm>,
    /// Largest imaginary part discarded when the `±` pairs were combined.
    pub imag_residual: f64,
}

impl ExpansionSeries {
    pub fn new(radii: Vec<f64>, k0: usize) -> Self {
        Self {
            k0,
            radii,
            terms: Vec::new(),
            imag_residual: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn modes(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.terms.iter().map(|t| t.meta.mode).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn extend(&mut self, other: ExpansionSeries) -> Result<()> {
        if other.radii != self.radii {
            return Err(Error::invalid("expansions on different observation radii"));
        }
        self.k0 = self.k0.max(other.k0);
        self.imag_residual = self.imag_residual.max(other.imag_residual);
        self.terms.extend(other.terms);
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t <= 0.0 && self.terms.iter().any(|x| x.power < 0.0) {
            return Err(Error::NonPositiveTime(t));
        }
        Ok(())
    }

    /// Mode `j` of the expansion at time `t`.
    pub fn evaluate_mode(&self, j: usize, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let mut out = vec![0.0; self.radii.len()];
        for term in self.terms.iter().filter(|x| x.meta.mode == j) {
            let f = term.factor(t);
            for (o, p) in out.iter_mut().zip(&term.profile) {
                *o += f * p;
            }
        }
        Ok(out)
    }

    /// All modes carrying a term, at time `t`.
    pub fn evaluate(&self, t: f64) -> Result<BTreeMap<usize, Vec<f64>>> {
        self.modes()
            .into_iter()
            .map(|j| Ok((j, self.evaluate_mode(j, t)?)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn data_modes(f1: &CylinderField, f2: &CylinderField) -> Vec<usize> {
    let mut m = f1.active_modes();
    m.extend(f2.active_modes());
    m.sort_unstable();
    m.dedup();
    m
}

/// `∫ f g dr` on the grid of `f`.
fn pair(f: Option<&RadialProfile>, g: &[f64]) -> f64 {
    let Some(f) = f else { return 0.0 };
    let n = f.active_len().min(g.len());
    let prod: Vec<f64> = (0..n).map(|i| f.values[i] * g[i]).collect();
    integrate_samples(f.grid.h, &prod)
}

fn data_nodes(f1: &CylinderField, f2: &CylinderField, j: usize) -> Vec<f64> {
    let n = [f1.mode(j), f2.mode(j)]
        .iter()
        .flatten()
        .map(|p| p.active_len())
        .max()
        .unwrap_or(0);
    (0..n).map(|i| f1.grid.r(i)).collect()
}

fn check_fields(f1: &CylinderField, f2: &CylinderField, radii: &[f64]) -> Result<()> {
    if f1.grid != f2.grid {
        return Err(Error::invalid("f₁ and f₂ must share a grid"));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("observation radii must be strictly ascending"));
    }
    Ok(())
}

/// Pairings below this fraction of the data norm count as orthogonal.
pub const ORTHO_TOL: f64 = 1e-12;

/// `u_e`: `η_ℓ [⟨f₁,η_ℓ⟩ cos(√λ_ℓ t) + ⟨f₂,η_ℓ⟩ sin(√λ_ℓ t)/√λ_ℓ]` per bound
/// state, with `cosh`/`sinh` for `λ_ℓ < 0` and `⟨f₁,η⟩ + t⟨f₂,η⟩` at zero.
pub fn build_u_e(
    wg: &Waveguide,
    f1: &CylinderField,
    f2: &CylinderField,
    radii: &[f64],
    filter: Option<&EnergyFilter>,
) -> Result<ExpansionSeries> {
    check_fields(f1, f2, radii)?;
    let scale = (f1.norm_sq() + f2.norm_sq()).sqrt();
    let per_mode: Vec<Vec<ExpansionTerm>> = data_modes(f1, f2)
        .par_iter()
        .map(|&j| -> Result<Vec<ExpansionTerm>> {
            let hl = wg.channel(j);
            let nodes = data_nodes(f1, f2, j);
            let mut terms = Vec::new();
            for (l, bs) in hl.bound_states(None)?.iter().enumerate() {
                let eta = hl.bound_state_profile(bs, &nodes)?;
                let psi = filter.map_or(1.0, |f| f.value(bs.energy));
                let c1 = pair(f1.mode(j), &eta) * psi;
                let c2 = pair(f2.mode(j), &eta) * psi;
                let obs = hl.bound_state_profile(bs, radii)?;
                let meta = |data| TermMeta {
                    mode: j,
                    sigma: hl.sigma,
                    eigen: Some(l),
                    order: None,
                    data,
                };
                let e = bs.energy;
                let zero = e.abs() <= 1e-14 * hl.sigma.max(1.0).powi(2);
                let omega = e.abs().sqrt();
                let mut push = |c: f64, power: f64, phase: f64, data| {
                    if c.abs() > ORTHO_TOL * scale {
                        terms.push(ExpansionTerm {
                            kind: TermKind::Eigen,
                            omega: if zero { 0.0 } else { omega },
                            power,
                            phase,
                            hyperbolic: !zero && e < 0.0,
                            profile: obs.iter().map(|x| c * x).collect(),
                            meta: meta(data),
                        });
                    }
                };
                if zero {
                    push(c1, 0.0, 0.0, DataSlot::F1);
                    push(c2, 1.0, 0.0, DataSlot::F2);
                } else {
                    push(c1, 0.0, 0.0, DataSlot::F1);
                    push(c2 / omega, 0.0, -FRAC_PI_2, DataSlot::F2);
                }
            }
            Ok(terms)
        })
        .collect::<Result<_>>()?;
    let mut s = ExpansionSeries::new(radii.to_vec(), 0);
    s.terms = per_mode.into_iter().flatten().collect();
    Ok(s)
}

/// Removes the bound-state components of `field`.
pub fn project_off_bound_states(wg: &Waveguide, field: &CylinderField) -> Result<CylinderField> {
    let mut out = field.clone();
    for j in field.active_modes() {
        let hl = wg.channel(j);
        let p = field.mode(j).expect("active");
        let nodes: Vec<f64> = (0..p.grid.n).map(|i| p.grid.r(i)).collect();
        let etas = hl
            .bound_states(None)?
            .iter()
            .map(|bs| hl.bound_state_profile(bs, &nodes))
            .collect::<Result<Vec<_>>>()?;
        let mut q = RadialProfile {
            grid: p.grid,
            values: p.values.clone(),
            support: p.grid.r_max(),
        };
        // the η_ℓ are orthonormal only up to quadrature error, so repeat the
        // sweep until the grid pairings are at rounding level
        for _ in 0..3 {
            for eta in &etas {
                let c = pair(Some(&q), eta)
                    / pair(
                        Some(&RadialProfile {
                            grid: p.grid,
                            values: eta.clone(),
                            support: q.support,
                        }),
                        eta,
                    );
                for (v, e) in q.values.iter_mut().zip(eta) {
                    *v -= c * e;
                }
            }
        }
        out.insert(j, q)?;
    }
    Ok(out)
}

/// `ψ` near `energy`: 1 or 0 if it is constant on `[energy - width, energy + width]`.
fn flat_filter(filter: Option<&EnergyFilter>, energy: f64, width: f64) -> Result<f64> {
    let Some(f) = filter else { return Ok(1.0) };
    let samples: Vec<f64> = (0..=64)
        .map(|k| f.value(energy - width + 2.0 * width * k as f64 / 64.0))
        .collect();
    if samples.iter().all(|v| *v == 1.0) {
        Ok(1.0)
    } else if samples.iter().all(|v| *v == 0.0) {
        Ok(0.0)
    } else {
        Err(Error::Unsupported(format!(
            "energy filter varies within {width:e} of the threshold energy {energy}; move its ramps away"
        )))
    }
}

/// Leading threshold terms: `¼ Φ(0)⟨f₂,Φ(0)⟩` for each resonant zero
/// threshold and, for each resonant `σ_j > 0`,
/// `t^{-1/2} [½√(σ/2π) Φ⟨f₁,Φ⟩ cos(σt + π/4) + Φ⟨f₂,Φ⟩ sin(σt + π/4) / (2√(2πσ))]`.
pub fn build_u_thr(
    wg: &Waveguide,
    f1: &CylinderField,
    f2: &CylinderField,
    radii: &[f64],
    filter: Option<&EnergyFilter>,
) -> Result<ExpansionSeries> {
    check_fields(f1, f2, radii)?;
    let per_mode: Vec<Vec<ExpansionTerm>> = data_modes(f1, f2)
        .par_iter()
        .map(|&j| -> Result<Vec<ExpansionTerm>> {
            let hl = wg.channel(j);
            let th = hl.threshold()?;
            if !th.resonant {
                return Ok(vec![]);
            }
            let sigma = hl.sigma;
            let psi = filter.map_or(1.0, |f| f.value(sigma * sigma));
            let nodes = data_nodes(f1, f2, j);
            let phi_data = hl.threshold_phi(&th, &nodes)?;
            let phi = hl.threshold_phi(&th, radii)?;
            let c1 = pair(f1.mode(j), &phi_data) * psi;
            let c2 = pair(f2.mode(j), &phi_data) * psi;
            let meta = |data, order| TermMeta {
                mode: j,
                sigma,
                eigen: None,
                order,
                data,
            };
            let scaled = |c: f64| phi.iter().map(|p| c * p).collect::<Vec<f64>>();
            if sigma == 0.0 {
                return Ok(vec![ExpansionTerm {
                    kind: TermKind::ZeroThresholdConstant,
                    omega: 0.0,
                    power: 0.0,
                    phase: 0.0,
                    hyperbolic: false,
                    profile: scaled(0.25 * c2),
                    meta: meta(DataSlot::F2, None),
                }]);
            }
            Ok(vec![
                ExpansionTerm {
                    kind: TermKind::ThresholdHalfPower,
                    omega: sigma,
                    power: -0.5,
                    phase: FRAC_PI_4,
                    hyperbolic: false,
                    profile: scaled(0.5 * (sigma / (2.0 * PI)).sqrt() * c1),
                    meta: meta(DataSlot::F1, Some(0)),
                },
                ExpansionTerm {
                    kind: TermKind::ThresholdHalfPower,
                    omega: sigma,
                    power: -0.5,
                    // sin(σt + π/4)
                    phase: -FRAC_PI_4,
                    hyperbolic: false,
                    profile: scaled(c2 / (2.0 * (2.0 * PI * sigma).sqrt())),
                    meta: meta(DataSlot::F2, Some(0)),
                },
            ])
        })
        .collect::<Result<_>>()?;
    let mut s = ExpansionSeries::new(radii.to_vec(), 1);
    s.terms = per_mode.into_iter().flatten().collect();
    Ok(s)
}

/// Taylor coefficients of the channel amplitudes at `τ = 0` by the Cauchy
/// integral on two circles, radius `ρ` and `ρ/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorOptions {
    /// Defaults to a quarter of the distance to the nearest known singularity.
    pub radius: Option<f64>,
    pub points: usize,
    /// Accepted change of the scaled coefficients between the two circles.
    pub tol: f64,
}

impl Default for TaylorOptions {
    fn default() -> Self {
        Self {
            radius: None,
            points: 64,
            tol: 1e-6,
        }
    }
}

/// `[K₁(τ, r_i)..., K₂(τ, r_i)...]` at complex `τ`.
fn amplitudes(
    hl: &HalfLine,
    f1: Option<&RadialProfile>,
    f2: Option<&RadialProfile>,
    radii: &[f64],
    tau: C,
) -> Result<Vec<C>> {
    let w = hl.wronskian(tau)? * hl.wronskian(-tau)?;
    let pre = 4.0 * tau * tau / w;
    let p1 = f1.map_or(Ok(C::new(0.0, 0.0)), |f| hl.regular_pairing(tau, f))?;
    let p2 = f2.map_or(Ok(C::new(0.0, 0.0)), |f| hl.regular_pairing(tau, f))?;
    let u = hl.regular_on(tau, radii)?;
    Ok(u.iter()
        .map(|u| pre * u * p1)
        .chain(u.iter().map(|u| pre * u * p2))
        .collect())
}

/// Taylor coefficients per component and the largest sample modulus.
fn cauchy(
    eval: &(dyn Fn(C) -> Result<Vec<C>> + Sync),
    len: usize,
    radius: f64,
    points: usize,
) -> Result<(Vec<Vec<C>>, f64)> {
    let samples: Vec<(f64, Vec<C>)> = (0..points)
        .into_par_iter()
        .map(|k| {
            let th = 2.0 * PI * (k as f64 + 0.5) / points as f64;
            Ok((th, eval(C::from_polar(radius, th))?))
        })
        .collect::<Result<_>>()?;
    let dim = samples[0].1.len();
    let sup = samples
        .iter()
        .flat_map(|(_, v)| v.iter().map(|x| x.norm()))
        .fold(0.0, f64::max);
    let coeffs = (0..dim)
        .map(|d| {
            (0..len)
                .map(|m| {
                    let s: C = samples
                        .iter()
                        .map(|(th, v)| v[d] * C::from_polar(1.0, -(m as f64) * th))
                        .sum();
                    s / (points as f64 * radius.powi(m as i32))
                })
                .collect()
        })
        .collect();
    Ok((coeffs, sup))
}

/// Taylor coefficients (length `len`) of every amplitude, checked between
/// radius `ρ` and `ρ/2`.
fn amplitude_taylor(
    eval: &(dyn Fn(C) -> Result<Vec<C>> + Sync),
    len: usize,
    radius: f64,
    opts: &TaylorOptions,
) -> Result<Vec<Vec<C>>> {
    let (coarse, sup) = cauchy(eval, len, radius, opts.points)?;
    let (fine, _) = cauchy(eval, len, radius / 2.0, opts.points)?;
    let scale = sup.max(f64::MIN_POSITIVE);
    for n in 0..len {
        let change = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a[n] - b[n]).norm() * radius.powi(n as i32) / scale)
            .fold(0.0, f64::max);
        if change > opts.tol {
            return Err(Error::DerivativeInstability { order: n, change });
        }
    }
    Ok(fine)
}

/// Default Cauchy radius for channel `hl`: a quarter of the distance to the
/// branch point `±iσ`, the bound-state poles `±iκ`, and the scale set by
/// the largest radius involved.
pub fn default_taylor_radius(hl: &HalfLine, r_extent: f64) -> Result<f64> {
    let mut d = hl.sigma.min(1.0 / r_extent.max(1.0));
    for bs in hl.bound_states(None)? {
        d = d.min(bs.kappa);
    }
    Ok(0.25 * d)
}

/// `u_thr,k₀`: the zero-threshold constants plus, for each `σ_j > 0`,
/// `Σ_{k<k₀} t^{-1/2-k} [p_{j,k}(r) cos(σ_j t + π/4) + q_{j,k}(r) sin(σ_j t + π/4)]`.
pub fn build_u_thr_k0(
    wg: &Waveguide,
    f1: &CylinderField,
    f2: &CylinderField,
    radii: &[f64],
    k0: usize,
    filter: Option<&EnergyFilter>,
    opts: TaylorOptions,
) -> Result<ExpansionSeries> {
    check_fields(f1, f2, radii)?;
    if k0 == 0 || k0 > MAX_K0 {
        return Err(Error::invalid(format!("k₀ must be in 1..={MAX_K0}")));
    }
    let len = 2 * k0 - 1;
    let nobs = radii.len();
    let per_mode: Vec<(Vec<ExpansionTerm>, f64)> = data_modes(f1, f2)
        .par_iter()
        .map(|&j| -> Result<(Vec<ExpansionTerm>, f64)> {
            let hl = wg.channel(j);
            let sigma = hl.sigma;
            if sigma == 0.0 {
                // the remainder of a zero threshold decays faster than any power
                let mut single = CylinderField::new(wg.spectrum.clone(), f1.grid);
                if let Some(p) = f2.mode(j) {
                    single.insert(j, p.clone())?;
                }
                let zero = CylinderField::new(wg.spectrum.clone(), f1.grid);
                let s = build_u_thr(wg, &zero, &single, radii, filter)?;
                return Ok((s.terms, 0.0));
            }
            let extent = radii
                .last()
                .copied()
                .unwrap_or(0.0)
                .max(data_nodes(f1, f2, j).last().copied().unwrap_or(0.0));
            let radius = match opts.radius {
                Some(r) => r,
                None => default_taylor_radius(&hl, extent)?,
            };
            let psi = flat_filter(filter, sigma * sigma, radius * radius)?;
            if psi == 0.0 {
                return Ok((vec![], 0.0));
            }
            let eval = |tau: C| amplitudes(&hl, f1.mode(j), f2.mode(j), radii, tau);
            let k = amplitude_taylor(&eval, len, radius, &opts)?;
            // λ(τ) = σ(1 + τ²/σ²)^{1/2}
            let x = PowerSeries::<f64>::variable(len);
            let lambda = PowerSeries::binomial(&x.mul(&x).scale(C::new(1.0 / (sigma * sigma), 0.0)), 0.5)
                .scale(C::new(sigma, 0.0));
            let half_i = C::new(0.0, 0.5);
            let mut p = vec![vec![0.0; nobs]; k0];
            let mut q = vec![vec![0.0; nobs]; k0];
            let mut residual = 0.0f64;
            for o in 0..nobs {
                let k1 = PowerSeries { coeffs: k[o].clone() };
                let k2 = PowerSeries {
                    coeffs: k[nobs + o].clone(),
                };
                let base = lambda.mul(&k1).scale(C::new(0.5 * psi, 0.0));
                let k2h = k2.scale(half_i * psi);
                let minus = base.add(&k2h);
                let plus = base.sub(&k2h);
                let am = boundary_coefficients(&minus.coeffs, sigma, k0, Sign::Minus, Side::Above);
                let ap = boundary_coefficients(&plus.coeffs, sigma, k0, Sign::Plus, Side::Above);
                for kk in 0..k0 {
                    // e^{±iσt} = e^{±i(θ - π/4)} with θ = σt + π/4
                    let cp = ap[2 * kk] * C::from_polar(1.0, -FRAC_PI_4);
                    let cm = am[2 * kk] * C::from_polar(1.0, FRAC_PI_4);
                    let sum = (cp + cm) / (2.0 * PI);
                    let diff = (cp - cm) / (2.0 * PI);
                    p[kk][o] = sum.re;
                    q[kk][o] = -diff.im;
                    residual = residual.max(sum.im.abs()).max(diff.re.abs());
                }
                // odd ladder entries vanish by parity
                for n in (1..len).step_by(2) {
                    residual = residual.max((ap[n] + am[n]).norm() / (2.0 * PI));
                }
            }
            let mut terms = Vec::new();
            for kk in 0..k0 {
                let kind = if kk == 0 {
                    TermKind::ThresholdHalfPower
                } else {
                    TermKind::HigherOrder
                };
                for (profile, phase) in [(p[kk].clone(), FRAC_PI_4), (q[kk].clone(), -FRAC_PI_4)] {
                    terms.push(ExpansionTerm {
                        kind,
                        omega: sigma,
                        power: -0.5 - kk as f64,
                        phase,
                        hyperbolic: false,
                        profile,
                        meta: TermMeta {
                            mode: j,
                            sigma,
                            eigen: None,
                            order: Some(kk),
                            data: DataSlot::Both,
                        },
                    });
                }
            }
            Ok((terms, residual))
        })
        .collect::<Result<_>>()?;
    let mut s = ExpansionSeries::new(radii.to_vec(), k0);
    for (terms, residual) in per_mode {
        s.terms.extend(terms);
        s.imag_residual = s.imag_residual.max(residual);
    }
    Ok(s)
}

/// Coefficients of the leading surviving order on the free half-cylinder:
/// `t^{-1/2-order} [p(r) cos(σt + π/4) + q(r) sin(σt + π/4)]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HalfCylinder {
    pub bc: BoundaryCondition,
    pub sigma: f64,
    pub order: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Closed forms for `V ≡ 0`, `σ > 0`. Neumann: `p = 2√(σ/2π)∫f₁`,
/// `q = 2∫f₂/√(2πσ)`. Dirichlet: `p = 2r√(σ/2π)∫r'f₂`,
/// `q = -2σr√(σ/2π)∫r'f₁`; the sign of `q` follows from `u[f₁] = ∂_t u[f₂ = f₁]`.
pub fn half_cylinder_coefficients(
    bc: BoundaryCondition,
    sigma: f64,
    f1: &RadialProfile,
    f2: &RadialProfile,
    radii: &[f64],
) -> Result<HalfCylinder> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("the half-power coefficients need σ > 0"));
    }
    let c = (sigma / (2.0 * PI)).sqrt();
    let first_moment = |f: &RadialProfile| {
        let n = f.active_len();
        let v: Vec<f64> = (0..n).map(|i| f.grid.r(i) * f.values[i]).collect();
        integrate_samples(f.grid.h, &v)
    };
    Ok(match bc {
        BoundaryCondition::Neumann => HalfCylinder {
            bc,
            sigma,
            order: 0,
            p: vec![2.0 * c * f1.integral(); radii.len()],
            q: vec![2.0 / (2.0 * PI * sigma).sqrt() * f2.integral(); radii.len()],
        },
        BoundaryCondition::Dirichlet => {
            let m1 = first_moment(f1);
            let m2 = first_moment(f2);
            HalfCylinder {
                bc,
                sigma,
                order: 1,
                p: radii.iter().map(|r| 2.0 * r * c * m2).collect(),
                q: radii.iter().map(|r| -2.0 * sigma * r * c * m1).collect(),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_section::{spectrum, CrossSection};
    use crate::halfline_scattering::Potential;
    use crate::mode_decomposition::{RadialGrid, RadialShape};

    fn guide(potential: Potential, bc: BoundaryCondition) -> Waveguide {
        let cs = CrossSection::Circle {
            circumference: 2.0 * PI,
        };
        Waveguide::new(potential, bc, spectrum(&cs, 1.5).unwrap())
    }

    fn bump(grid: RadialGrid, center: f64, half_width: f64) -> RadialProfile {
        let s = RadialShape::SmoothBump { center, half_width };
        RadialProfile::from_fn(grid, s.support(), |r| s.value(r)).unwrap()
    }

    fn fields(
        wg: &Waveguide,
        grid: RadialGrid,
        j: usize,
        a: Option<RadialProfile>,
        b: Option<RadialProfile>,
    ) -> (CylinderField, CylinderField) {
        let mut f1 = CylinderField::new(wg.spectrum.clone(), grid);
        let mut f2 = f1.clone();
        if let Some(a) = a {
            f1.insert(j, a).unwrap();
        }
        if let Some(b) = b {
            f2.insert(j, b).unwrap();
        }
        (f1, f2)
    }

    fn term(kind: TermKind, omega: f64, power: f64, phase: f64, profile: Vec<f64>) -> ExpansionTerm {
        ExpansionTerm {
            kind,
            omega,
            power,
            phase,
            hyperbolic: false,
            profile,
            meta: TermMeta {
                mode: 0,
                sigma: omega,
                eigen: None,
                order: None,
                data: DataSlot::F1,
            },
        }
    }

    #[test]
    fn evaluation_basics() {
        let mut s = ExpansionSeries::new(vec![0.0, 1.0], 1);
        assert!(s.evaluate(3.0).unwrap().is_empty());
        s.terms
            .push(term(TermKind::ZeroThresholdConstant, 0.0, 0.0, 0.0, vec![2.0, 3.0]));
        assert_eq!(s.evaluate_mode(0, 17.0).unwrap(), vec![2.0, 3.0]);
        let mut h = ExpansionSeries::new(vec![0.0], 1);
        h.terms
            .push(term(TermKind::ThresholdHalfPower, 1.0, -0.5, FRAC_PI_4, vec![1.0]));
        let t = 2.0 * PI * 1e3;
        let v = h.evaluate_mode(0, t).unwrap()[0];
        assert!((v - (t + FRAC_PI_4).cos() / t.sqrt()).abs() < 1e-15);
        assert!(matches!(h.evaluate(0.0), Err(Error::NonPositiveTime(_))));
    }

    #[test]
    fn hyperbolic_terms() {
        let mut t = term(TermKind::Eigen, 2.0, 0.0, -FRAC_PI_2, vec![1.0]);
        t.hyperbolic = true;
        assert!((t.factor(0.5) - 1.0f64.sinh()).abs() < 1e-15);
        t.phase = 0.0;
        assert!((t.factor(0.5) - 1.0f64.cosh()).abs() < 1e-15);
    }

    #[test]
    fn free_guide_has_no_eigen_part() {
        let wg = guide(Potential::Zero, BoundaryCondition::Neumann);
        let grid = RadialGrid::new(0.01, 6.0).unwrap();
        let (f1, f2) = fields(&wg, grid, 1, Some(bump(grid, 2.0, 1.0)), None);
        assert!(build_u_e(&wg, &f1, &f2, &[0.5], None).unwrap().is_empty());
    }

    #[test]
    fn projected_data_have_no_eigen_part() {
        let wg = guide(
            Potential::SquareWell {
                depth: 4.0,
                radius: 1.0,
            },
            BoundaryCondition::Dirichlet,
        );
        let grid = RadialGrid::new(0.005, 8.0).unwrap();
        let (f1, f2) = fields(&wg, grid, 0, Some(bump(grid, 1.0, 1.0)), Some(bump(grid, 2.0, 1.0)));
        let before = build_u_e(&wg, &f1, &f2, &[0.5], None).unwrap();
        assert!(!before.is_empty());
        assert!(before.terms.iter().all(|t| t.hyperbolic));
        let g1 = project_off_bound_states(&wg, &f1).unwrap();
        let g2 = project_off_bound_states(&wg, &f2).unwrap();
        assert!(build_u_e(&wg, &g1, &g2, &[0.5], None).unwrap().is_empty());
    }

    #[test]
    fn free_neumann_zero_threshold_constant_is_the_mass() {
        let wg = guide(Potential::Zero, BoundaryCondition::Neumann);
        let grid = RadialGrid::new(0.001, 6.0).unwrap();
        let g = bump(grid, 2.0, 1.0);
        let mass = g.integral();
        let (f1, f2) = fields(&wg, grid, 0, None, Some(g));
        let s = build_u_thr(&wg, &f1, &f2, &[0.5, 3.0], None).unwrap();
        assert_eq!(s.terms.len(), 1);
        assert_eq!(s.terms[0].kind, TermKind::ZeroThresholdConstant);
        for v in &s.terms[0].profile {
            assert!((v - mass).abs() < 1e-12);
        }
    }

    #[test]
    fn free_dirichlet_has_no_threshold_part() {
        let wg = guide(Potential::Zero, BoundaryCondition::Dirichlet);
        let grid = RadialGrid::new(0.01, 6.0).unwrap();
        for j in [0, 1] {
            let (f1, f2) = fields(&wg, grid, j, Some(bump(grid, 2.0, 1.0)), Some(bump(grid, 3.0, 1.0)));
            assert!(build_u_thr(&wg, &f1, &f2, &[0.5], None).unwrap().is_empty());
        }
    }

    #[test]
    fn free_neumann_half_power_matches_closed_form() {
        let wg = guide(Potential::Zero, BoundaryCondition::Neumann);
        let grid = RadialGrid::new(0.001, 6.0).unwrap();
        let a = bump(grid, 2.0, 1.0);
        let b = bump(grid, 3.0, 0.7);
        let radii = [0.0, 0.7, 2.5];
        let (f1, f2) = fields(&wg, grid, 1, Some(a.clone()), Some(b.clone()));
        let s = build_u_thr(&wg, &f1, &f2, &radii, None).unwrap();
        let exact = half_cylinder_coefficients(BoundaryCondition::Neumann, 1.0, &a, &b, &radii).unwrap();
        let cos = s.terms.iter().find(|t| t.phase == FRAC_PI_4).unwrap();
        let sin = s.terms.iter().find(|t| t.phase == -FRAC_PI_4).unwrap();
        for o in 0..radii.len() {
            assert!((cos.profile[o] - exact.p[o]).abs() < 1e-8);
            assert!((sin.profile[o] - exact.q[o]).abs() < 1e-8);
        }
        // the refined expansion reproduces the leading terms
        let k = build_u_thr_k0(&wg, &f1, &f2, &radii, 2, None, TaylorOptions::default()).unwrap();
        assert!(k.imag_residual < 1e-10, "{}", k.imag_residual);
        for t in k.terms.iter().filter(|t| t.meta.order == Some(0)) {
            let reference = if t.phase > 0.0 { &exact.p } else { &exact.q };
            for o in 0..radii.len() {
                assert!(
                    (t.profile[o] - reference[o]).abs() < 1e-6,
                    "{} vs {}",
                    t.profile[o],
                    reference[o]
                );
            }
        }
    }

    #[test]
    fn free_dirichlet_first_order_is_linear_in_r() {
        let wg = guide(Potential::Zero, BoundaryCondition::Dirichlet);
        let grid = RadialGrid::new(0.001, 6.0).unwrap();
        let a = bump(grid, 2.0, 1.0);
        let b = bump(grid, 3.0, 0.7);
        let radii: Vec<f64> = (0..9).map(|i| 0.25 * i as f64).collect();
        let (f1, f2) = fields(&wg, grid, 1, Some(a.clone()), Some(b.clone()));
        let k = build_u_thr_k0(&wg, &f1, &f2, &radii, 2, None, TaylorOptions::default()).unwrap();
        let exact = half_cylinder_coefficients(BoundaryCondition::Dirichlet, 1.0, &a, &b, &radii).unwrap();
        for t in &k.terms {
            let order = t.meta.order.unwrap();
            let reference = match (order, t.phase > 0.0) {
                (0, _) => vec![0.0; radii.len()],
                (_, true) => exact.p.clone(),
                (_, false) => exact.q.clone(),
            };
            let scale = exact.p.iter().chain(&exact.q).fold(0.0f64, |m, x| m.max(x.abs()));
            for o in 0..radii.len() {
                assert!(
                    (t.profile[o] - reference[o]).abs() < 1e-6 * scale,
                    "k={order}: {} vs {}",
                    t.profile[o],
                    reference[o]
                );
            }
        }
    }
}
