//! Time evolution of `(∂_t² + H)u = 0`, `u(0) = f₁`, `∂_t u(0) = f₂`, one
//! channel at a time.
//!
//! Three routes: d'Alembert for the free massless channel, a spectral
//! propagator built from the channel's generalized eigenfunctions (any `V`),
//! and a second-order leapfrog on a uniform grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halfline_scattering::{BoundaryCondition, HalfLine, Potential, Waveguide};
use crate::mode_decomposition::{CylinderField, RadialGrid, RadialProfile};
use crate::quadrature::{integrate_samples, ChebyshevPanel, GaussLegendre};
use crate::Scalar;

/// `C^∞` step: 0 for `x ≤ 0`, 1 for `x ≥ 1`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// Smooth energy window supported in `[lo, hi]`, equal to 1 on
/// `[lo + ramp, hi - ramp]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyFilter {
    pub lo: f64,
    pub hi: f64,
    pub ramp: f64,
}

impl EnergyFilter {
    pub fn value(&self, energy: f64) -> f64 {
        smooth_step((energy - self.lo) / self.ramp) * smooth_step((self.hi - energy) / self.ramp)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.ramp > 0.0) || !(self.hi - self.lo >= 2.0 * self.ramp) {
            return Err(Error::config(path, "need ramp > 0 and hi - lo ≥ 2·ramp"));
        }
        Ok(())
    }
}

/// Free channel, `σ = 0`: d'Alembert's formula with the even (Neumann) or odd
/// (Dirichlet) reflection of the data.
pub fn dalembert(bc: BoundaryCondition, f1: &RadialProfile, f2: &RadialProfile, t: f64, rs: &[f64]) -> Vec<f64> {
    let anti = f2.antiderivative();
    let odd = bc == BoundaryCondition::Dirichlet;
    let f1e = |x: f64| {
        let v = f1.interpolate(x.abs());
        if odd && x < 0.0 {
            -v
        } else {
            v
        }
    };
    // G(x) = ∫_0^x of the extended f₂
    let g = |x: f64| {
        let a = anti.eval(x.abs());
        if !odd && x < 0.0 {
            -a
        } else {
            a
        }
    };
    rs.iter()
        .map(|&r| 0.5 * (f1e(r + t) + f1e(r - t)) + 0.5 * (g(r + t) - g(r - t)))
        .collect()
}

/// Exact evolution of a free channel: d'Alembert for `σ = 0`, the spectral
/// propagator otherwise.
pub fn evolve_exact_free(
    sigma: f64,
    bc: BoundaryCondition,
    f1: &RadialProfile,
    f2: &RadialProfile,
    t: f64,
    rs: &[f64],
) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(dalembert(bc, f1, f2, t, rs));
    }
    let hl = HalfLine::new(Potential::Zero, bc, sigma);
    let opts = PropagatorOptions {
        t_max: t.max(1.0),
        ..Default::default()
    };
    SpectralPropagator::new(&hl, f1, f2, rs, None, opts)?.evaluate(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatorOptions {
    /// Largest time the τ quadrature is resolved for.
    pub t_max: f64,
    /// Width of the Chebyshev panels carrying the amplitudes.
    pub panel: f64,
    pub cheb_nodes: usize,
    pub gl_nodes: usize,
    /// Truncate τ once amplitudes fall below this fraction of their maximum.
    pub amp_tol: f64,
    /// Accepted interpolation error relative to the amplitude maximum.
    pub interp_tol: f64,
    pub tau_cap: f64,
}

impl Default for PropagatorOptions {
    fn default() -> Self {
        Self {
            t_max: 1000.0,
            panel: 0.5,
            cheb_nodes: 24,
            gl_nodes: 20,
            amp_tol: 1e-14,
            interp_tol: 1e-12,
            tau_cap: 400.0,
        }
    }
}

/// An eigenvalue of the channel: `η ⟨f₁,η⟩ cos(√E t) + η ⟨f₂,η⟩ sin(√E t)/√E`,
/// continued to `E ≤ 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenTerm {
    pub energy: f64,
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    /// `η` at the observation radii.
    pub eta: Vec<f64>,
}

impl EigenTerm {
    pub fn evaluate(&self, t: f64) -> f64 {
        let e = self.energy;
        let (c, s) = if e > 0.0 {
            let w = e.sqrt();
            ((w * t).cos(), (w * t).sin() / w)
        } else if e < 0.0 {
            let w = (-e).sqrt();
            ((w * t).cosh(), (w * t).sinh() / w)
        } else {
            (1.0, t)
        };
        self.c1 * c + self.c2 * s
    }
}

struct AmplitudePanel {
    cheb: ChebyshevPanel<f64>,
    /// `[node][obs]` for `f₁` and `f₂`.
    a1: Vec<Vec<f64>>,
    a2: Vec<Vec<f64>>,
}

/// `u(t, r) = (1/2π) ∫_0^∞ ψ(λ²)[cos(λt) K₁ + sin(λt)/λ K₂] dτ + Σ eigen terms`
/// with `K_i(τ, r) = 4τ² u(τ, r) ⟨u(τ), f_i⟩ / |W(τ)|²`, `λ² = σ² + τ²`.
/// The amplitudes are tabulated once on Chebyshev panels in `τ`; each time
/// is then a Gauss–Legendre sum on subpanels short enough for the next power
/// of two above `t`, whose nodes are cached.
pub struct SpectralPropagator {
    pub sigma: f64,
    pub obs: Vec<f64>,
    pub eigen: Vec<EigenTerm>,
    pub tau_max: f64,
    /// The amplitude had not decayed by `tau_cap`.
    pub truncated: bool,
    panels: Vec<AmplitudePanel>,
    filter: Option<EnergyFilter>,
    opts: PropagatorOptions,
    gl: GaussLegendre<f64>,
    tables: Mutex<BTreeMap<i32, Arc<NodeTable>>>,
}

/// Flattened quadrature: `λ` per node and `weight × amplitude` per node and radius.
#[derive(Default)]
struct NodeTable {
    lambda: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

const NODE_CHUNK: usize = 4096;

fn inner(h: f64, a: &[f64], b: &[f64]) -> f64 {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    integrate_samples(h, &prod)
}

impl SpectralPropagator {
    /// `obs` must be ascending.
    pub fn new(
        hl: &HalfLine,
        f1: &RadialProfile,
        f2: &RadialProfile,
        obs: &[f64],
        filter: Option<EnergyFilter>,
        opts: PropagatorOptions,
    ) -> Result<Self> {
        if f1.grid != f2.grid {
            return Err(Error::invalid("f₁ and f₂ must share a grid"));
        }
        if obs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("observation radii must be ascending"));
        }
        let sigma = hl.sigma;
        let psi = |tau: f64| filter.map_or(1.0, |f| f.value(sigma * sigma + tau * tau));
        let amplitude = |tau: f64| -> Result<(Vec<f64>, Vec<f64>)> {
            // W may vanish at τ = 0 while 4τ²/|W|² stays finite
            let tau = tau.max(1e-9);
            let t = C::new(tau, 0.0);
            let w = hl.wronskian(t)?;
            let scale = 4.0 * tau * tau / w.norm_sqr() * psi(tau);
            if scale == 0.0 {
                return Ok((vec![0.0; obs.len()], vec![0.0; obs.len()]));
            }
            let p1 = hl.regular_pairing(t, f1)?.re;
            let p2 = hl.regular_pairing(t, f2)?.re;
            let u = hl.regular_on(t, obs)?;
            Ok((
                u.iter().map(|u| scale * u.re * p1).collect(),
                u.iter().map(|u| scale * u.re * p2).collect(),
            ))
        };
        let build = |a: f64, b: f64| -> Result<AmplitudePanel> {
            let cheb = ChebyshevPanel::new(opts.cheb_nodes, a, b);
            let vals: Vec<(Vec<f64>, Vec<f64>)> =
                cheb.nodes.par_iter().map(|&x| amplitude(x)).collect::<Result<_>>()?;
            let (a1, a2) = vals.into_iter().unzip();
            Ok(AmplitudePanel { cheb, a1, a2 })
        };
        let peak = |p: &AmplitudePanel| {
            p.a1.iter()
                .chain(&p.a2)
                .flat_map(|v| v.iter())
                .fold(0.0f64, |m, x| m.max(x.abs()))
        };
        let mut panels = Vec::new();
        let mut global = 0.0f64;
        let mut quiet = 0;
        let mut a = 0.0;
        let mut truncated = false;
        let mut stack: Vec<(f64, f64, usize)> = Vec::new();
        while quiet < 2 {
            if a >= opts.tau_cap {
                truncated = true;
                break;
            }
            let b = (a + opts.panel).min(opts.tau_cap);
            stack.push((a, b, 0));
            let mut local = 0.0f64;
            while let Some((lo, hi, depth)) = stack.pop() {
                let p = build(lo, hi)?;
                let m = peak(&p);
                global = global.max(m);
                // probe the interpolant between nodes
                let probe = lo + 0.613 * (hi - lo);
                let (e1, e2) = amplitude(probe)?;
                let mut basis = Vec::new();
                p.cheb.basis(probe, &mut basis);
                let err = (0..obs.len())
                    .map(|o| {
                        let i1: f64 = basis.iter().zip(&p.a1).map(|(l, v)| l * v[o]).sum();
                        let i2: f64 = basis.iter().zip(&p.a2).map(|(l, v)| l * v[o]).sum();
                        (i1 - e1[o]).abs().max((i2 - e2[o]).abs())
                    })
                    .fold(0.0, f64::max);
                if err > opts.interp_tol * global.max(f64::MIN_POSITIVE) && depth < 10 {
                    let mid = 0.5 * (lo + hi);
                    stack.push((mid, hi, depth + 1));
                    stack.push((lo, mid, depth + 1));
                    continue;
                }
                local = local.max(m);
                panels.push(p);
            }
            if local <= opts.amp_tol * global {
                quiet += 1;
            } else {
                quiet = 0;
            }
            a = b;
        }
        panels.sort_by(|x, y| x.cheb.a.total_cmp(&y.cheb.a));
        // eigenvalues of the channel
        let grid = f1.grid;
        let n = f1.active_len().max(f2.active_len());
        let data_nodes: Vec<f64> = (0..n).map(|i| grid.r(i)).collect();
        let mut eigen = Vec::new();
        for bs in hl.bound_states(None)? {
            let eta_data = hl.bound_state_profile(&bs, &data_nodes)?;
            let weight = filter.map_or(1.0, |f| f.value(bs.energy));
            let c1 = inner(grid.h, &eta_data, &f1.values[..n]) * weight;
            let c2 = inner(grid.h, &eta_data, &f2.values[..n]) * weight;
            eigen.push(EigenTerm {
                energy: bs.energy,
                kappa: bs.kappa,
                c1,
                c2,
                eta: hl.bound_state_profile(&bs, obs)?,
            });
        }
        Ok(Self {
            sigma,
            obs: obs.to_vec(),
            eigen,
            tau_max: a,
            truncated,
            panels,
            filter,
            opts,
            gl: GaussLegendre::new(opts.gl_nodes),
            tables: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn filter(&self) -> Option<EnergyFilter> {
        self.filter
    }

    /// Quadrature nodes resolving times up to `2^level`, with the amplitudes
    /// interpolated once.
    fn table(&self, level: i32) -> Arc<NodeTable> {
        let mut cache = self.tables.lock().expect("table cache poisoned");
        if let Some(t) = cache.get(&level) {
            return Arc::clone(t);
        }
        let t_res = 2f64.powi(level);
        let n_obs = self.obs.len();
        let sigma2 = self.sigma * self.sigma;
        let per_panel: Vec<NodeTable> = self
            .panels
            .par_iter()
            .map(|p| {
                let width = p.cheb.b - p.cheb.a;
                let m = ((width * t_res / 4.0).ceil() as usize).max(1);
                let mut out = NodeTable::default();
                let mut basis = Vec::with_capacity(p.cheb.nodes.len());
                for s in 0..m {
                    let lo = p.cheb.a + width * s as f64 / m as f64;
                    let hi = p.cheb.a + width * (s + 1) as f64 / m as f64;
                    for (tau, w) in self.gl.mapped(lo, hi) {
                        p.cheb.basis(tau, &mut basis);
                        out.lambda.push((sigma2 + tau * tau).sqrt());
                        let start = out.a1.len();
                        out.a1.resize(start + n_obs, 0.0);
                        out.a2.resize(start + n_obs, 0.0);
                        for (l, (v1, v2)) in basis.iter().zip(p.a1.iter().zip(&p.a2)) {
                            for o in 0..n_obs {
                                out.a1[start + o] += w * l * v1[o];
                                out.a2[start + o] += w * l * v2[o];
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let mut table = NodeTable::default();
        for t in per_panel {
            table.lambda.extend(t.lambda);
            table.a1.extend(t.a1);
            table.a2.extend(t.a2);
        }
        let table = Arc::new(table);
        cache.insert(level, Arc::clone(&table));
        table
    }

    /// Continuous-spectrum part at the observation radii.
    pub fn evaluate_continuous(&self, t: f64) -> Result<Vec<f64>> {
        if t > self.opts.t_max * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "t = {t} beyond the resolved t_max = {}",
                self.opts.t_max
            )));
        }
        let n_obs = self.obs.len();
        let table = self.table(t.abs().max(1.0).log2().ceil() as i32);
        // fixed chunks keep the summation order independent of the thread count
        let parts: Vec<Vec<f64>> = table
            .lambda
            .par_chunks(NODE_CHUNK)
            .enumerate()
            .map(|(c, lambdas)| {
                let mut acc = vec![0.0; n_obs];
                for (k, &lambda) in lambdas.iter().enumerate() {
                    let i = (c * NODE_CHUNK + k) * n_obs;
                    let (s, co) = (lambda * t).sin_cos();
                    let sn = if lambda > 0.0 { s / lambda } else { t };
                    for o in 0..n_obs {
                        acc[o] += co * table.a1[i + o] + sn * table.a2[i + o];
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; n_obs];
        for p in parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out.into_iter().map(|v| v / (2.0 * std::f64::consts::PI)).collect())
    }

    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let mut u = self.evaluate_continuous(t)?;
        for e in &self.eigen {
            let a = e.evaluate(t);
            for (u, eta) in u.iter_mut().zip(&e.eta) {
                *u += a * eta;
            }
        }
        Ok(u)
    }
}

/// Evolves each mode of `data` (displacement `f1`, velocity `f2`) with the
/// spectral propagator and returns `u_j(t, r)` at `obs` for every time.
pub fn evolve_spectral(
    wg: &Waveguide,
    f1: &CylinderField,
    f2: &CylinderField,
    obs: &[f64],
    times: &[f64],
    filter: Option<EnergyFilter>,
    opts: PropagatorOptions,
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let mut modes: Vec<usize> = f1.active_modes();
    modes.extend(f2.active_modes());
    modes.sort_unstable();
    modes.dedup();
    let zero = RadialProfile::zero(f1.grid);
    let mut out = BTreeMap::new();
    for j in modes {
        let hl = wg.channel(j);
        let p = SpectralPropagator::new(
            &hl,
            f1.mode(j).unwrap_or(&zero),
            f2.mode(j).unwrap_or(&zero),
            obs,
            filter,
            opts,
        )?;
        let series = times.iter().map(|&t| p.evaluate(t)).collect::<Result<Vec<_>>>()?;
        out.insert(j, series);
    }
    Ok(out)
}

/// Per-mode displacement and velocity on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeState<T> {
    pub mode: usize,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaveState<T> {
    pub t: T,
    pub h: T,
    pub bc: BoundaryCondition,
    pub modes: Vec<ModeState<T>>,
}

impl<T: Scalar> WaveState<T> {
    /// CSV rows `t,r,mode,u,v`.
    pub fn write_csv(&self, out: &mut impl Write, header: bool) -> Result<()> {
        if header {
            writeln!(out, "t,r,mode,u,v")?;
        }
        for m in &self.modes {
            for (i, (u, v)) in m.u.iter().zip(&m.v).enumerate() {
                let r = self.h * T::from_usize_lossy(i);
                writeln!(
                    out,
                    "{},{},{},{:e},{:e}",
                    self.t.to_f64_lossy(),
                    r.to_f64_lossy(),
                    m.mode,
                    u.to_f64_lossy(),
                    v.to_f64_lossy()
                )?;
            }
        }
        Ok(())
    }

    /// Little-endian records after the header `"CYLW"`, `version: u32 = 1`,
    /// `count: u32`: per mode `t: f64, h: f64, mode: u32, n: u32, u: [f64; n],
    /// v: [f64; n]`.
    pub fn write_binary(states: &[Self], out: &mut impl Write) -> Result<()> {
        let count: usize = states.iter().map(|s| s.modes.len()).sum();
        out.write_all(b"CYLW")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(count as u32).to_le_bytes())?;
        for s in states {
            for m in &s.modes {
                out.write_all(&s.t.to_f64_lossy().to_le_bytes())?;
                out.write_all(&s.h.to_f64_lossy().to_le_bytes())?;
                out.write_all(&(m.mode as u32).to_le_bytes())?;
                out.write_all(&(m.u.len() as u32).to_le_bytes())?;
                for x in m.u.iter().chain(&m.v) {
                    out.write_all(&x.to_f64_lossy().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub h: f64,
    /// Defaults to 0.9 of the CFL limit.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Radii (grid nodes) recorded at every step.
    pub probes: Vec<f64>,
    pub snapshot_times: Vec<f64>,
    /// End of the computational domain.
    pub r_max: f64,
    /// Treat `r_max` as a Dirichlet wall rather than a stand-in for the open
    /// half-line, which skips the contamination check. Filtered data are
    /// spread over the whole box and need this.
    #[serde(default)]
    pub reflecting_wall: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdRun<T> {
    pub dt: T,
    pub times: Vec<T>,
    /// `traces[mode][probe][step]`.
    pub traces: BTreeMap<usize, Vec<Vec<T>>>,
    pub snapshots: Vec<WaveState<T>>,
    /// Largest relative change of the discrete energy, per mode.
    pub energy_drift: BTreeMap<usize, T>,
}

/// One channel on the leapfrog grid: `A u = -D²u + (σ² + V)u` with the
/// boundary row at `r = 0` and `u = 0` past the last node.
struct Channel<T> {
    h: T,
    neumann: bool,
    diag: Vec<T>,
}

impl<T: Scalar> Channel<T> {
    fn new(h: f64, n: usize, bc: BoundaryCondition, sigma: f64, pot: &Potential) -> Self {
        let diag = (0..n)
            .map(|i| {
                let r = i as f64 * h;
                T::lit(sigma * sigma + pot.cell_average((r - 0.5 * h).max(0.0), r + 0.5 * h))
            })
            .collect();
        Self {
            h: T::lit(h),
            neumann: bc == BoundaryCondition::Neumann,
            diag,
        }
    }

    fn apply(&self, u: &[T], out: &mut [T]) {
        let n = u.len();
        let ih2 = T::one() / (self.h * self.h);
        let two = T::lit(2.0);
        for i in 0..n {
            let left = if i == 0 {
                if self.neumann {
                    u[1]
                } else {
                    T::zero()
                }
            } else {
                u[i - 1]
            };
            let right = if i + 1 < n { u[i + 1] } else { T::zero() };
            out[i] = (two * u[i] - left - right) * ih2 + self.diag[i] * u[i];
        }
        if !self.neumann {
            out[0] = T::zero();
        }
    }

    /// Quadrature weights that make `A` symmetric.
    fn weight(&self, i: usize) -> T {
        if i == 0 {
            if self.neumann {
                self.h * T::lit(0.5)
            } else {
                T::zero()
            }
        } else {
            self.h
        }
    }

    fn dot(&self, a: &[T], b: &[T]) -> T {
        a.iter()
            .zip(b)
            .enumerate()
            .fold(T::zero(), |acc, (i, (x, y))| acc + self.weight(i) * *x * *y)
    }
}

/// Largest stable step: `0.9 h / √(1 + h² max(σ² + |V|))`.
pub fn cfl_limit(h: f64, sigma_max: f64, v_sup: f64) -> f64 {
    0.9 * h / (1.0 + h * h * (sigma_max * sigma_max + v_sup)).sqrt()
}

/// Leapfrog for every mode of the data. Modes evolve independently in
/// parallel.
pub fn evolve_fd<T: Scalar>(
    wg: &Waveguide,
    f1: &CylinderField,
    f2: &CylinderField,
    cfg: &FdConfig,
) -> Result<FdRun<T>> {
    if !(cfg.h > 0.0) {
        return Err(Error::config("fd.h", "must be positive"));
    }
    // every inserted mode is evolved, zero data included
    let modes: Vec<usize> = (0..wg.spectrum.sigma.len())
        .filter(|&j| f1.mode(j).is_some() || f2.mode(j).is_some())
        .collect();
    let sigma_max = modes.iter().map(|&j| wg.spectrum.sigma[j]).fold(0.0, f64::max);
    let limit = cfl_limit(cfg.h, sigma_max, wg.potential.sup_abs());
    let dt = cfg.dt.unwrap_or(limit);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit });
    }
    let m1 = modes
        .iter()
        .map(|&j| {
            let a = f1.mode(j).map_or(0.0, |p| p.support);
            let b = f2.mode(j).map_or(0.0, |p| p.support);
            a.max(b)
        })
        .fold(0.0, f64::max);
    let required = m1.max(wg.potential.support()) + cfg.t_end + 2.0 * cfg.h;
    if !cfg.reflecting_wall && cfg.r_max < required {
        return Err(Error::Contamination {
            r_max: cfg.r_max,
            required,
        });
    }
    let grid = RadialGrid::new(cfg.h, cfg.r_max)?;
    let n = grid.n;
    let probes: Vec<usize> = cfg
        .probes
        .iter()
        .map(|&r| grid.node_index(r).ok_or(Error::OffGrid { r }))
        .collect::<Result<_>>()?;
    let steps = (cfg.t_end / dt).ceil() as usize;
    let dt = cfg.t_end / steps as f64;
    let snap_steps: Vec<usize> = cfg.snapshot_times.iter().map(|&t| (t / dt).round() as usize).collect();
    let sample = |field: &CylinderField, j: usize| -> Vec<T> {
        match field.mode(j) {
            Some(p) => (0..n).map(|i| T::lit(p.interpolate(grid.r(i)))).collect(),
            None => vec![T::zero(); n],
        }
    };
    type ModeRun<T> = (usize, Vec<Vec<T>>, Vec<(usize, ModeState<T>)>, T);
    let runs: Vec<ModeRun<T>> = modes
        .par_iter()
        .map(|&j| {
            let ch = Channel::<T>::new(cfg.h, n, wg.bc, wg.spectrum.sigma[j], &wg.potential);
            let dtt = T::lit(dt);
            let half = T::lit(0.5);
            let mut prev = sample(f1, j);
            let v0 = sample(f2, j);
            if wg.bc == BoundaryCondition::Dirichlet {
                prev[0] = T::zero();
            }
            let mut au = vec![T::zero(); n];
            ch.apply(&prev, &mut au);
            let mut cur: Vec<T> = (0..n)
                .map(|i| prev[i] + dtt * v0[i] - half * dtt * dtt * au[i])
                .collect();
            if wg.bc == BoundaryCondition::Dirichlet {
                cur[0] = T::zero();
            }
            let energy = |a: &[T], b: &[T], scratch: &mut Vec<T>| {
                let d: Vec<T> = a.iter().zip(b).map(|(x, y)| (*y - *x) / dtt).collect();
                ch.apply(b, scratch);
                ch.dot(&d, &d) + ch.dot(scratch, a)
            };
            let mut scratch = vec![T::zero(); n];
            let e0 = energy(&prev, &cur, &mut scratch);
            let mut drift = T::zero();
            let mut traces: Vec<Vec<T>> = probes.iter().map(|&p| vec![prev[p], cur[p]]).collect();
            let mut snaps = Vec::new();
            let take = |step: usize, prev: &[T], cur: &[T], next: &[T], snaps: &mut Vec<(usize, ModeState<T>)>| {
                if snap_steps.contains(&step) {
                    let v = (0..n).map(|i| (next[i] - prev[i]) / (T::lit(2.0) * dtt)).collect();
                    snaps.push((
                        step,
                        ModeState {
                            mode: j,
                            u: cur.to_vec(),
                            v,
                        },
                    ));
                }
            };
            if snap_steps.contains(&0) {
                snaps.push((
                    0,
                    ModeState {
                        mode: j,
                        u: prev.clone(),
                        v: v0.clone(),
                    },
                ));
            }
            let mut next = vec![T::zero(); n];
            for step in 1..=steps {
                ch.apply(&cur, &mut au);
                for i in 0..n {
                    next[i] = T::lit(2.0) * cur[i] - prev[i] - dtt * dtt * au[i];
                }
                if wg.bc == BoundaryCondition::Dirichlet {
                    next[0] = T::zero();
                }
                take(step, &prev, &cur, &next, &mut snaps);
                if step < steps {
                    for (tr, &p) in traces.iter_mut().zip(&probes) {
                        tr.push(next[p]);
                    }
                }
                let e = energy(&cur, &next, &mut scratch);
                let rel = ((e - e0) / e0.abs().max(T::min_positive_value())).abs();
                if rel > drift {
                    drift = rel;
                }
                std::mem::swap(&mut prev, &mut cur);
                std::mem::swap(&mut cur, &mut next);
            }
            (j, traces, snaps, drift)
        })
        .collect();
    let times: Vec<T> = (0..=steps).map(|k| T::lit(k as f64 * dt)).collect();
    let mut traces = BTreeMap::new();
    let mut drift = BTreeMap::new();
    let mut by_step: BTreeMap<usize, Vec<ModeState<T>>> = BTreeMap::new();
    for (j, tr, snaps, d) in runs {
        traces.insert(j, tr);
        drift.insert(j, d);
        for (s, m) in snaps {
            by_step.entry(s).or_default().push(m);
        }
    }
    let snapshots = by_step
        .into_iter()
        .map(|(s, modes)| WaveState {
            t: T::lit(s as f64 * dt),
            h: T::lit(cfg.h),
            bc: wg.bc,
            modes,
        })
        .collect();
    Ok(FdRun {
        dt: T::lit(dt),
        times,
        traces,
        snapshots,
        energy_drift: drift,
    })
}

/// Largest grid the dense eigensolve accepts.
pub const MAX_DENSE: usize = 3000;

/// `ψ(h_j)` applied to each mode, with `h_j` discretized on the field's grid
/// up to `r_max` (Dirichlet there) and diagonalized densely.
pub fn apply_spectral_cutoff(
    wg: &Waveguide,
    field: &CylinderField,
    filter: &EnergyFilter,
    r_max: f64,
) -> Result<CylinderField> {
    let grid = field.grid;
    let n = grid.cover(r_max) + 1;
    if n > MAX_DENSE {
        return Err(Error::Unsupported(format!(
            "dense eigensolve on {n} nodes (limit {MAX_DENSE}); coarsen the grid or shorten r_max"
        )));
    }
    let neumann = wg.bc == BoundaryCondition::Neumann;
    let first = if neumann { 0 } else { 1 };
    let m = n - first;
    let mut out = CylinderField::new(field.spectrum.clone(), grid);
    let results: Vec<(usize, RadialProfile)> = field
        .active_modes()
        .par_iter()
        .map(|&j| {
            let ch = Channel::<f64>::new(grid.h, n, wg.bc, wg.spectrum.sigma[j], &wg.potential);
            let ih2 = 1.0 / (grid.h * grid.h);
            // symmetrized: S = W^{1/2} A W^{-1/2}
            let sw: Vec<f64> = (first..n).map(|i| ch.weight(i).sqrt()).collect();
            let a = DMatrix::from_fn(m, m, |r, c| {
                let (i, k) = (r + first, c + first);
                let base = if i == k {
                    2.0 * ih2 + ch.diag[i]
                } else if i.abs_diff(k) == 1 {
                    if neumann && i == 0 {
                        -2.0 * ih2
                    } else {
                        -ih2
                    }
                } else {
                    0.0
                };
                sw[r] * base / sw[c]
            });
            let eig = a.symmetric_eigen();
            let p = field.mode(j).expect("active");
            let x = DVector::from_fn(m, |r, _| sw[r] * p.values[r + first]);
            let coeffs = eig.eigenvectors.transpose() * &x;
            let scaled = DVector::from_fn(m, |k, _| coeffs[k] * filter.value(eig.eigenvalues[k]));
            let y = &eig.eigenvectors * scaled;
            let mut values = vec![0.0; grid.n];
            for r in 0..m {
                values[r + first] = y[r] / sw[r];
            }
            // ψ(h_j) spreads the data over the whole box; the support is where
            // the tail drops below rounding
            let peak = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let last = values.iter().rposition(|v| v.abs() > 1e-15 * peak).unwrap_or(0);
            let support = grid.r(last + 1).min(grid.r_max());
            (j, RadialProfile { grid, values, support })
        })
        .collect();
    for (j, p) in results {
        out.insert(j, p)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_section::{spectrum, CrossSection};
    use crate::mode_decomposition::RadialShape;
    use std::f64::consts::PI;

    fn gaussian(grid: RadialGrid, center: f64, width: f64) -> RadialProfile {
        let shape = RadialShape::Gaussian { center, width };
        RadialProfile::from_fn(grid, shape.support(), |r| shape.value(r)).unwrap()
    }

    #[test]
    fn dalembert_neumann_constant() {
        let grid = RadialGrid::new(0.0025, 8.0).unwrap();
        let g = gaussian(grid, 2.0, 0.3);
        let mass = g.integral();
        let z = RadialProfile::zero(grid);
        let u = dalembert(BoundaryCondition::Neumann, &z, &g, 100.0, &[0.5]);
        assert!((u[0] - mass).abs() < 1e-12);
        let u = dalembert(BoundaryCondition::Dirichlet, &z, &g, 100.0, &[0.5]);
        assert!(u[0].abs() < 1e-12);
    }

    #[test]
    fn free_massless_propagator_matches_dalembert() {
        let grid = RadialGrid::new(0.0025, 8.0).unwrap();
        // centred far enough out that the reflected data stay smooth at r = 0
        let f1 = gaussian(grid, 3.0, 0.3);
        let f2 = gaussian(grid, 2.5, 0.25);
        let obs = [0.0, 0.5, 1.0, 3.0];
        for bc in [BoundaryCondition::Neumann, BoundaryCondition::Dirichlet] {
            let hl = HalfLine::new(Potential::Zero, bc, 0.0);
            let p = SpectralPropagator::new(
                &hl,
                &f1,
                &f2,
                &obs,
                None,
                PropagatorOptions {
                    t_max: 20.0,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(!p.truncated);
            for t in [0.0, 1.0, 2.7, 20.0] {
                let a = p.evaluate(t).unwrap();
                let b = dalembert(bc, &f1, &f2, t, &obs);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-9, "{bc:?} t={t}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn eigen_terms_cover_all_signs_of_energy() {
        let e = |energy| EigenTerm {
            energy,
            kappa: 0.0,
            c1: 1.0,
            c2: 2.0,
            eta: vec![],
        };
        assert!((e(4.0).evaluate(1.0) - (2.0f64.cos() + 2.0 * 2.0f64.sin() / 2.0)).abs() < 1e-15);
        assert!((e(-4.0).evaluate(1.0) - (2.0f64.cosh() + 2.0f64.sinh())).abs() < 1e-12);
        assert_eq!(e(0.0).evaluate(3.0), 7.0);
    }

    fn circle_guide(potential: Potential, bc: BoundaryCondition, sigma_max: f64) -> Waveguide {
        let cs = CrossSection::Circle {
            circumference: 2.0 * PI,
        };
        Waveguide::new(potential, bc, spectrum(&cs, sigma_max).unwrap())
    }

    fn field_with(wg: &Waveguide, grid: RadialGrid, j: usize, p: RadialProfile) -> CylinderField {
        let mut f = CylinderField::new(wg.spectrum.clone(), grid);
        f.insert(j, p).unwrap();
        f
    }

    #[test]
    fn leapfrog_conserves_energy_and_reverses() {
        let wg = circle_guide(
            Potential::SquareWell {
                depth: 0.5,
                radius: 1.0,
            },
            BoundaryCondition::Neumann,
            1.5,
        );
        let grid = RadialGrid::new(0.01, 20.0).unwrap();
        let f1 = field_with(&wg, grid, 1, gaussian(grid, 2.0, 0.4));
        let f2 = CylinderField::new(wg.spectrum.clone(), grid);
        let cfg = FdConfig {
            h: 0.01,
            dt: None,
            t_end: 10.0,
            probes: vec![0.5],
            snapshot_times: vec![10.0],
            r_max: 20.0,
            reflecting_wall: false,
        };
        let run = evolve_fd::<f64>(&wg, &f1, &f2, &cfg).unwrap();
        assert!(run.energy_drift[&1] < 1e-10);
        // reverse the velocity and run back
        let snap = &run.snapshots[0].modes[0];
        let mut g1 = CylinderField::new(wg.spectrum.clone(), grid);
        let mut g2 = CylinderField::new(wg.spectrum.clone(), grid);
        let mk = |v: &[f64]| RadialProfile {
            grid,
            values: v.to_vec(),
            support: 19.0,
        };
        g1.insert(1, mk(&snap.u)).unwrap();
        g2.insert(1, mk(&snap.v.iter().map(|x| -x).collect::<Vec<_>>()))
            .unwrap();
        let back = FdConfig {
            snapshot_times: vec![10.0],
            probes: vec![],
            r_max: 40.0,
            ..cfg.clone()
        };
        let grid2 = RadialGrid::new(0.01, 40.0).unwrap();
        let pad = |f: &CylinderField| {
            let mut out = CylinderField::new(wg.spectrum.clone(), grid2);
            let p = f.mode(1).unwrap();
            let mut values = vec![0.0; grid2.n];
            values[..grid.n].copy_from_slice(&p.values);
            out.insert(
                1,
                RadialProfile {
                    grid: grid2,
                    values,
                    support: 19.0,
                },
            )
            .unwrap();
            out
        };
        let ret = evolve_fd::<f64>(&wg, &pad(&g1), &pad(&g2), &back).unwrap();
        let u = &ret.snapshots[0].modes[0].u;
        let orig = f1.mode(1).unwrap();
        let err = (0..grid.n).map(|i| (u[i] - orig.values[i]).abs()).fold(0.0, f64::max);
        // the centred velocity makes the restart second-order accurate only
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn leapfrog_zero_data_stays_zero_and_checks_preconditions() {
        let wg = circle_guide(Potential::Zero, BoundaryCondition::Dirichlet, 1.5);
        let grid = RadialGrid::new(0.02, 10.0).unwrap();
        let z = CylinderField::new(wg.spectrum.clone(), grid);
        let mut f1 = z.clone();
        f1.insert(0, RadialProfile::zero(grid)).unwrap();
        let cfg = FdConfig {
            h: 0.02,
            dt: None,
            t_end: 2.0,
            probes: vec![1.0],
            snapshot_times: vec![],
            r_max: 10.0,
            reflecting_wall: false,
        };
        let run = evolve_fd::<f32>(&wg, &f1, &z, &cfg).unwrap();
        assert_eq!(run.traces[&0][0].len(), run.times.len());
        assert!(run.traces[&0][0].iter().all(|v| *v == 0.0));
        let bad = FdConfig {
            dt: Some(0.1),
            ..cfg.clone()
        };
        assert!(matches!(evolve_fd::<f64>(&wg, &f1, &z, &bad), Err(Error::Cfl { .. })));
        let short = FdConfig { t_end: 20.0, ..cfg };
        assert!(matches!(
            evolve_fd::<f64>(&wg, &f1, &z, &short),
            Err(Error::Contamination { .. })
        ));
    }

    #[test]
    fn finite_speed_of_propagation() {
        let wg = circle_guide(
            Potential::SquareWell {
                depth: 1.0,
                radius: 1.0,
            },
            BoundaryCondition::Neumann,
            0.5,
        );
        let grid = RadialGrid::new(0.01, 12.0).unwrap();
        let shape = RadialShape::SmoothBump {
            center: 1.0,
            half_width: 0.5,
        };
        let p = RadialProfile::from_fn(grid, shape.support(), |r| shape.value(r)).unwrap();
        let f1 = field_with(&wg, grid, 0, p);
        let f2 = CylinderField::new(wg.spectrum.clone(), grid);
        let cfg = FdConfig {
            h: 0.01,
            dt: None,
            t_end: 3.0,
            probes: vec![],
            snapshot_times: vec![3.0],
            r_max: 12.0,
            reflecting_wall: false,
        };
        let run = evolve_fd::<f64>(&wg, &f1, &f2, &cfg).unwrap();
        let u = &run.snapshots[0].modes[0].u;
        // the leapfrog stencil moves one node per step, faster than the
        // physical cone when dt < h; past its own cone the field is exactly 0
        let steps = run.times.len() - 1;
        let cone = 1.5 + steps as f64 * 0.01;
        assert!((0..grid.n).filter(|&i| grid.r(i) > cone + 1e-9).all(|i| u[i] == 0.0));
        // the exact free route respects the physical cone
        let z = RadialProfile::zero(grid);
        let rs: Vec<f64> = (0..grid.n)
            .map(|i| grid.r(i))
            .filter(|&r| r > 1.5 + 3.0 + 0.01)
            .collect();
        let d = dalembert(BoundaryCondition::Neumann, f1.mode(0).unwrap(), &z, 3.0, &rs);
        assert!(d.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn spectral_cutoff_identity_and_separation() {
        let wg = circle_guide(
            Potential::SquareWell {
                depth: 1.0,
                radius: 1.0,
            },
            BoundaryCondition::Neumann,
            1.5,
        );
        let grid = RadialGrid::new(0.02, 16.0).unwrap();
        let mut f = CylinderField::new(wg.spectrum.clone(), grid);
        f.insert(0, gaussian(grid, 3.0, 0.5)).unwrap();
        f.insert(1, gaussian(grid, 2.0, 0.5)).unwrap();
        let all = EnergyFilter {
            lo: -10.0,
            hi: 1e5,
            ramp: 1.0,
        };
        let g = apply_spectral_cutoff(&wg, &f, &all, 16.0).unwrap();
        for j in [0, 1] {
            let err = g
                .mode(j)
                .unwrap()
                .values
                .iter()
                .zip(&f.mode(j).unwrap().values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
        // below σ₁² - inf V the σ = 1 channel has no spectrum
        let low = EnergyFilter {
            lo: -5.0,
            hi: -0.01,
            ramp: 0.1,
        };
        let g = apply_spectral_cutoff(&wg, &f, &low, 16.0).unwrap();
        assert!(g.mode(1).unwrap().values.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn filter_commutes_with_leapfrog() {
        let wg = circle_guide(
            Potential::SquareWell {
                depth: 1.0,
                radius: 1.0,
            },
            BoundaryCondition::Dirichlet,
            0.5,
        );
        let grid = RadialGrid::new(0.02, 16.0).unwrap();
        let f1 = field_with(&wg, grid, 0, gaussian(grid, 3.0, 0.5));
        let f2 = CylinderField::new(wg.spectrum.clone(), grid);
        let filter = EnergyFilter {
            lo: 0.5,
            hi: 3.5,
            ramp: 0.5,
        };
        let cfg = FdConfig {
            h: 0.02,
            dt: None,
            t_end: 2.0,
            probes: vec![],
            snapshot_times: vec![2.0],
            r_max: 16.0,
            reflecting_wall: true,
        };
        let run = evolve_fd::<f64>(&wg, &f1, &f2, &cfg).unwrap();
        let evolved = {
            let mut c = CylinderField::new(wg.spectrum.clone(), grid);
            let s = &run.snapshots[0].modes[0];
            c.insert(
                0,
                RadialProfile {
                    grid,
                    values: s.u.clone(),
                    support: 10.0,
                },
            )
            .unwrap();
            c
        };
        let a = apply_spectral_cutoff(&wg, &evolved, &filter, 16.0).unwrap();
        let pre = apply_spectral_cutoff(&wg, &f1, &filter, 16.0).unwrap();
        let run2 = evolve_fd::<f64>(&wg, &pre, &f2, &cfg).unwrap();
        let b = &run2.snapshots[0].modes[0].u;
        let err = a
            .mode(0)
            .unwrap()
            .values
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn binary_snapshot_layout() {
        let s = WaveState::<f64> {
            t: 1.5,
            h: 0.1,
            bc: BoundaryCondition::Neumann,
            modes: vec![ModeState {
                mode: 2,
                u: vec![1.0, 2.0],
                v: vec![3.0, 4.0],
            }],
        };
        let mut buf = Vec::new();
        WaveState::write_binary(std::slice::from_ref(&s), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CYLW");
        assert_eq!(buf.len(), 12 + 8 + 8 + 4 + 4 + 4 * 8);
        assert_eq!(f64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap()), 4.0);
        let mut csv = Vec::new();
        s.write_csv(&mut csv, true).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }
}
