//! The jump of the resolvent across the real axis, written through generalized
//! eigenfunctions, and the resolvent's Laurent structure at a threshold.

use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::Serialize;

use crate::cross_section::YPoint;
use crate::error::{Error, Result};
use crate::halfline_scattering::{tau_branch, BoundState, BoundaryCondition, HalfLine, Waveguide};
use crate::mode_decomposition::Cutoff;

const I: C = C::new(0.0, 1.0);

/// A point `(r, y)` of the cylinder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObsPoint {
    pub r: f64,
    pub y: YPoint<f64>,
}

impl ObsPoint {
    pub fn new(r: f64, y: YPoint<f64>) -> Self {
        Self { r, y }
    }
}

/// How the resolvent kernel on the left-hand side is computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Route {
    /// From the channel Green's functions `u f / W`.
    Continuum,
    /// From a second-order finite-difference resolvent on step `h` with an
    /// exact discrete outgoing condition. Observation radii must be nodes.
    FiniteDifference { h: f64 },
}

/// `λ` closer than this to a threshold is rejected.
pub const THRESHOLD_GAP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureSample {
    pub lambda: f64,
    pub route: Route,
    pub points: Vec<ObsPoint>,
    /// `(1/i)χ[R(λ) - R(-λ)](I - P)χ`.
    pub lhs: DMatrix<C>,
    /// `½ Σ_{σ_j < |λ|} τ_j⁻¹ χΦ_j ⊗ Φ̄_j χ`.
    pub rhs: DMatrix<C>,
    /// Largest entry of `lhs - rhs`.
    pub defect: f64,
    pub open_channels: usize,
}

/// Distinct radii in ascending order and the position of each point's radius.
fn radii_of(points: &[ObsPoint]) -> (Vec<f64>, Vec<usize>) {
    let mut radii: Vec<f64> = points.iter().map(|p| p.r).collect();
    radii.sort_by(|a, b| a.total_cmp(b));
    radii.dedup();
    let idx = points
        .iter()
        .map(|p| radii.iter().position(|r| *r == p.r).expect("collected above"))
        .collect();
    (radii, idx)
}

/// Channels grouped by threshold: `(σ, modes)`.
fn groups(wg: &Waveguide) -> Vec<(f64, Vec<usize>)> {
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for (j, &s) in wg.spectrum.sigma.iter().enumerate() {
        match out.last_mut() {
            Some((t, modes)) if *t == s => modes.push(j),
            _ => out.push((s, vec![j])),
        }
    }
    out
}

/// `Σ_{j ∈ modes} φ_j(y_a) φ_j(y_b)`.
fn angular(wg: &Waveguide, modes: &[usize], points: &[ObsPoint]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for &j in modes {
        let phi: Vec<f64> = points
            .iter()
            .map(|p| wg.spectrum.eigenfunction(j, &p.y))
            .collect::<Result<_>>()?;
        for a in 0..n {
            for b in 0..n {
                m[(a, b)] += phi[a] * phi[b];
            }
        }
    }
    Ok(m)
}

/// Radial Green's kernel `u(r<) f(r>) / W` on ascending `radii`, with the
/// bound-state part `-η⊗η/(τ² + κ²)` removed.
fn continuum_kernel(hl: &HalfLine, tau: C, radii: &[f64], bound: &[(BoundState, Vec<f64>)]) -> Result<DMatrix<C>> {
    let u = hl.regular_on(tau, radii)?;
    let f = hl.jost_on(tau, radii)?;
    let w = hl.wronskian(tau)?;
    let n = radii.len();
    let mut g = DMatrix::from_fn(n, n, |a, b| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        u[lo] * f[hi] / w
    });
    for (bs, eta) in bound {
        let d = tau * tau + bs.kappa * bs.kappa;
        for a in 0..n {
            for b in 0..n {
                g[(a, b)] += eta[a] * eta[b] / d;
            }
        }
    }
    Ok(g)
}

/// Finite-difference resolvent kernel on step `h`: columns of
/// `(A_h - τ²)⁻¹ e_k / w_k` at the observation nodes, with the discrete
/// outgoing wave `e^{iθ j}`, `2 - 2cos θ = h²τ²`, imposed past the last node.
pub fn fd_kernel(hl: &HalfLine, tau: C, radii: &[f64], h: f64) -> Result<DMatrix<C>> {
    let r_end = radii.last().copied().unwrap_or(0.0).max(hl.support()) + 1.0;
    let n_end = (r_end / h).ceil() as usize;
    let node = |r: f64| -> Result<usize> {
        let k = (r / h).round();
        if (k * h - r).abs() > 1e-9 * h.max(r) {
            return Err(Error::OffGrid { r });
        }
        Ok(k as usize)
    };
    let ks: Vec<usize> = radii.iter().map(|&r| node(r)).collect::<Result<_>>()?;
    let neumann = hl.bc == BoundaryCondition::Neumann;
    let first = if neumann { 0 } else { 1 };
    let m = n_end + 1 - first;
    let h2 = h * h;
    let pot = &hl.potential;
    let theta = 2.0 * (tau * (0.5 * h)).asin();
    let z = (I * theta).exp();
    // tridiagonal (sub, diag, sup) in unknowns first..=n_end
    let mut sub = vec![C::new(-1.0 / h2, 0.0); m];
    let mut sup = vec![C::new(-1.0 / h2, 0.0); m];
    let diag: Vec<C> = (0..m)
        .map(|row| {
            let i = row + first;
            let r = i as f64 * h;
            let v = pot.cell_average((r - 0.5 * h).max(0.0), r + 0.5 * h);
            let mut d = C::new(2.0 / h2 + v, 0.0) - tau * tau;
            if i == n_end {
                d -= z / h2;
            }
            d
        })
        .collect();
    if neumann {
        // ghost node u_{-1} = u_1
        sup[0] = C::new(-2.0 / h2, 0.0);
    }
    sub[0] = C::new(0.0, 0.0);
    sup[m - 1] = C::new(0.0, 0.0);
    let n = radii.len();
    let cols: Vec<Vec<C>> = ks
        .par_iter()
        .map(|&k| {
            let mut rhs = vec![C::new(0.0, 0.0); m];
            if k >= first {
                let w = if neumann && k == 0 { 0.5 * h } else { h };
                rhs[k - first] = C::new(1.0 / w, 0.0);
            }
            let x = thomas(&sub, &diag, &sup, rhs);
            ks.iter()
                .map(|&i| if i >= first { x[i - first] } else { C::new(0.0, 0.0) })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |a, b| cols[b][a]))
}

fn thomas(sub: &[C], diag: &[C], sup: &[C], mut d: Vec<C>) -> Vec<C> {
    let n = diag.len();
    let mut c = vec![C::new(0.0, 0.0); n];
    let mut beta = diag[0];
    c[0] = sup[0] / beta;
    d[0] /= beta;
    for i in 1..n {
        beta = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / beta;
        d[i] = (d[i] - sub[i] * d[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= c[i] * next;
    }
    d
}

fn check_lambda(wg: &Waveguide, lambda: f64, bound: &[BoundState]) -> Result<()> {
    for &s in &wg.spectrum.sigma {
        let distance = (lambda.abs() - s).abs();
        if distance < THRESHOLD_GAP {
            return Err(Error::ThresholdProximity {
                lambda,
                sigma: s,
                distance,
            });
        }
        for bs in bound {
            if (lambda * lambda - (s * s - bs.kappa * bs.kappa)).abs() < 1e-10 {
                return Err(Error::invalid(format!("λ² = {} is an eigenvalue", lambda * lambda)));
            }
        }
    }
    if lambda == 0.0 {
        return Err(Error::invalid("λ = 0 is excluded"));
    }
    Ok(())
}

fn bound_profiles(hl: &HalfLine, bound: &[BoundState], radii: &[f64]) -> Result<Vec<(BoundState, Vec<f64>)>> {
    bound
        .iter()
        .map(|bs| Ok((*bs, hl.bound_state_profile(bs, radii)?)))
        .collect()
}

/// Both sides of `(1/i)χ[R(λ) - R(-λ)](I-P)χ = ½ Σ τ_j⁻¹ χΦ_j ⊗ Φ̄_j χ`
/// sampled at `points`.
pub fn verify_stone_identity(
    wg: &Waveguide,
    lambda: f64,
    points: &[ObsPoint],
    chi: Cutoff,
    route: Route,
) -> Result<MeasureSample> {
    let bound = wg.radial_bound_states()?;
    check_lambda(wg, lambda, &bound)?;
    let (radii, idx) = radii_of(points);
    let n = points.len();
    let groups = groups(wg);
    let parts: Vec<(DMatrix<C>, DMatrix<C>, usize)> = groups
        .par_iter()
        .map(|(sigma, modes)| -> Result<_> {
            let hl = wg.channel(modes[0]);
            let tp = tau_branch(C::new(lambda, 0.0), *sigma);
            let tm = tau_branch(C::new(-lambda, 0.0), *sigma);
            let bp = bound_profiles(&hl, &bound, &radii)?;
            let (gp, gm) = match route {
                Route::Continuum => (
                    continuum_kernel(&hl, tp, &radii, &bp)?,
                    continuum_kernel(&hl, tm, &radii, &bp)?,
                ),
                // the projector cancels in the difference
                Route::FiniteDifference { h } => (fd_kernel(&hl, tp, &radii, h)?, fd_kernel(&hl, tm, &radii, h)?),
            };
            let jump = (gp - gm) / I;
            let open = *sigma < lambda.abs();
            let radial_rhs = if open {
                let phi = hl.generalized_eigenfunction(tp, &radii)?;
                DMatrix::from_fn(radii.len(), radii.len(), |a, b| 0.5 / tp * phi[a] * phi[b].conj())
            } else {
                DMatrix::zeros(radii.len(), radii.len())
            };
            let ang = angular(wg, modes, points)?;
            let lift = |m: &DMatrix<C>| DMatrix::from_fn(n, n, |a, b| m[(idx[a], idx[b])] * ang[(a, b)]);
            Ok((lift(&jump), lift(&radial_rhs), if open { modes.len() } else { 0 }))
        })
        .collect::<Result<_>>()?;
    let mut lhs = DMatrix::zeros(n, n);
    let mut rhs = DMatrix::zeros(n, n);
    let mut open_channels = 0;
    for (l, r, o) in parts {
        lhs += l;
        rhs += r;
        open_channels += o;
    }
    let cut: Vec<f64> = points.iter().map(|p| chi.value(p.r)).collect();
    for a in 0..n {
        for b in 0..n {
            let c = cut[a] * cut[b];
            lhs[(a, b)] *= c;
            rhs[(a, b)] *= c;
        }
    }
    let defect = (&lhs - &rhs).iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(MeasureSample {
        lambda,
        route,
        points: points.to_vec(),
        lhs,
        rhs,
        defect,
        open_channels,
    })
}

/// The rank-one terms `χΦ_j ⊗ Φ̄_j χ`, one per open channel, in mode order.
pub fn rank_one_terms(wg: &Waveguide, lambda: f64, points: &[ObsPoint], chi: Cutoff) -> Result<Vec<DMatrix<C>>> {
    let n = points.len();
    let mut out = Vec::new();
    for (j, &sigma) in wg.spectrum.sigma.iter().enumerate() {
        if sigma >= lambda.abs() {
            continue;
        }
        let hl = wg.channel(j);
        let tau = tau_branch(C::new(lambda, 0.0), sigma);
        let phi: Vec<C> = points
            .iter()
            .map(|p| {
                let radial = hl.generalized_eigenfunction(tau, &[p.r])?[0];
                Ok(radial * wg.spectrum.eigenfunction(j, &p.y)? * chi.value(p.r))
            })
            .collect::<Result<_>>()?;
        out.push(DMatrix::from_fn(n, n, |a, b| phi[a] * phi[b].conj()));
    }
    Ok(out)
}

/// CSV lines `lambda,defect,open_channels`.
pub fn defect_table(samples: &[MeasureSample]) -> String {
    let mut s = String::from("lambda,defect,open_channels\n");
    for m in samples {
        s.push_str(&format!("{},{:e},{}\n", m.lambda, m.defect, m.open_channels));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdLaurent {
    pub sigma: f64,
    pub taus: Vec<f64>,
    /// Extrapolated `lim τ·χR(λ(τ))χ`.
    pub singular: DMatrix<C>,
    /// `(i/4) Σ_l χΦ_l(σ) ⊗ Φ_l(σ)χ` over the channels at this threshold.
    pub expected: DMatrix<C>,
    /// `max |χR(λ)χ - expected/τ|` at each sampled `τ`.
    pub remainder_norms: Vec<f64>,
    pub coefficient_error: f64,
}

/// Samples `χR(λ)(I-P)χ` for `λ ↓ σ_j` at `τ_j = τ₀ 2^{-n}`, `n < levels`, and
/// extracts the `1/τ_j` coefficient by Richardson extrapolation of `τ_j R`.
pub fn threshold_laurent(
    wg: &Waveguide,
    j: usize,
    points: &[ObsPoint],
    chi: Cutoff,
    tau0: f64,
    levels: usize,
) -> Result<ThresholdLaurent> {
    if levels == 0 || !(tau0 > 0.0) {
        return Err(Error::invalid("need τ₀ > 0 and at least one level"));
    }
    let sigma_j = wg.spectrum.sigma[j];
    let bound = wg.radial_bound_states()?;
    let (radii, idx) = radii_of(points);
    let n = points.len();
    let groups = groups(wg);
    let cut: Vec<f64> = points.iter().map(|p| chi.value(p.r)).collect();
    let taus: Vec<f64> = (0..levels).map(|k| tau0 / 2f64.powi(k as i32)).collect();
    let kernels: Vec<DMatrix<C>> = taus
        .par_iter()
        .map(|&t| -> Result<DMatrix<C>> {
            let lambda = (sigma_j * sigma_j + t * t).sqrt();
            let mut k = DMatrix::zeros(n, n);
            for (sigma, modes) in &groups {
                let hl = wg.channel(modes[0]);
                let tau = if *sigma == sigma_j {
                    C::new(t, 0.0)
                } else {
                    tau_branch(C::new(lambda, 0.0), *sigma)
                };
                let bp = bound_profiles(&hl, &bound, &radii)?;
                let g = continuum_kernel(&hl, tau, &radii, &bp)?;
                let ang = angular(wg, modes, points)?;
                for a in 0..n {
                    for b in 0..n {
                        k[(a, b)] += g[(idx[a], idx[b])] * ang[(a, b)] * (cut[a] * cut[b]);
                    }
                }
            }
            Ok(k)
        })
        .collect::<Result<_>>()?;
    // Richardson table on τ·K(τ) = c₋₁ + c₀τ + c₁τ² + ...
    let mut table: Vec<DMatrix<C>> = kernels.iter().zip(&taus).map(|(k, t)| k * C::new(*t, 0.0)).collect();
    for m in 1..levels {
        let f = 2f64.powi(m as i32);
        for row in (m..levels).rev() {
            table[row] = (&table[row] * C::new(f, 0.0) - &table[row - 1]) / C::new(f - 1.0, 0.0);
        }
    }
    let singular = table[levels - 1].clone();
    let mut expected = DMatrix::zeros(n, n);
    for (sigma, modes) in &groups {
        if *sigma != sigma_j {
            continue;
        }
        let hl = wg.channel(modes[0]);
        let th = hl.threshold()?;
        let phi = hl.threshold_phi(&th, &radii)?;
        let ang = angular(wg, modes, points)?;
        for a in 0..n {
            for b in 0..n {
                expected[(a, b)] += 0.25 * I * phi[idx[a]] * phi[idx[b]] * ang[(a, b)] * (cut[a] * cut[b]);
            }
        }
    }
    let remainder_norms = kernels
        .iter()
        .zip(&taus)
        .map(|(k, t)| {
            (k - &expected / C::new(*t, 0.0))
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max)
        })
        .collect();
    let coefficient_error = (&singular - &expected).iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(ThresholdLaurent {
        sigma: sigma_j,
        taus,
        singular,
        expected,
        remainder_norms,
        coefficient_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_section::{spectrum, CrossSection};
    use crate::halfline_scattering::Potential;

    fn circle_guide(potential: Potential, bc: BoundaryCondition, sigma_max: f64) -> Waveguide {
        let cs = CrossSection::Circle {
            circumference: 2.0 * std::f64::consts::PI,
        };
        Waveguide::new(potential, bc, spectrum(&cs, sigma_max).unwrap())
    }

    fn points() -> Vec<ObsPoint> {
        [(0.25, 0.0), (0.5, 1.0), (1.5, 2.5), (2.0, 0.3), (3.0, 4.0)]
            .iter()
            .map(|&(r, y)| ObsPoint::new(r, YPoint::circle(0, y)))
            .collect()
    }

    #[test]
    fn free_identity_below_and_above_the_first_threshold() {
        let wg = circle_guide(Potential::Zero, BoundaryCondition::Neumann, 3.0);
        let chi = Cutoff::for_support(1.0);
        let s = verify_stone_identity(&wg, 0.5, &points(), chi, Route::Continuum).unwrap();
        assert_eq!(s.open_channels, 1);
        assert!(s.defect <= 1e-10, "{}", s.defect);
        let s = verify_stone_identity(&wg, 1.5, &points(), chi, Route::Continuum).unwrap();
        assert_eq!(s.open_channels, 3);
        assert!(s.defect <= 1e-10, "{}", s.defect);
        // the free Neumann kernel in mode 0 is (2/τ) cos τr cos τr' / (2π)
        let p = points();
        let tau = 1.5;
        let expect = 2.0 / tau * (tau * p[0].r).cos() * (tau * p[1].r).cos() / (2.0 * std::f64::consts::PI);
        let mode0: f64 = s.rhs[(0, 1)].re
            - (1..3)
                .map(|j| {
                    let hl = wg.channel(j);
                    let t = tau_branch(C::new(1.5, 0.0), wg.spectrum.sigma[j]);
                    let phi = hl.generalized_eigenfunction(t, &[p[0].r, p[1].r]).unwrap();
                    (0.5 / t * phi[0] * phi[1].conj()).re
                        * wg.spectrum.eigenfunction(j, &p[0].y).unwrap()
                        * wg.spectrum.eigenfunction(j, &p[1].y).unwrap()
                })
                .sum::<f64>();
        assert!((mode0 - expect).abs() < 1e-12);
    }

    #[test]
    fn square_well_identity() {
        let well = Potential::SquareWell {
            depth: 1.0,
            radius: 1.0,
        };
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let wg = circle_guide(well.clone(), bc, 3.0);
            for lambda in [0.5, 1.5, 2.5] {
                let s =
                    verify_stone_identity(&wg, lambda, &points(), Cutoff::for_support(1.0), Route::Continuum).unwrap();
                assert!(s.defect <= 1e-6, "{bc:?} λ={lambda}: {}", s.defect);
            }
        }
    }

    #[test]
    fn rejects_thresholds() {
        let wg = circle_guide(Potential::Zero, BoundaryCondition::Neumann, 3.0);
        let r = verify_stone_identity(&wg, 1.0 + 1e-9, &points(), Cutoff::for_support(1.0), Route::Continuum);
        assert!(matches!(r, Err(Error::ThresholdProximity { .. })));
    }

    #[test]
    fn rank_one_terms_agree_at_plus_and_minus_lambda() {
        let wg = circle_guide(
            Potential::SquareWell {
                depth: 1.0,
                radius: 1.0,
            },
            BoundaryCondition::Neumann,
            3.0,
        );
        let chi = Cutoff::for_support(1.0);
        let a = rank_one_terms(&wg, 1.5, &points(), chi).unwrap();
        let b = rank_one_terms(&wg, -1.5, &points(), chi).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).iter().all(|z| z.norm() < 1e-8));
        }
    }

    #[test]
    fn fd_kernel_matches_the_free_closed_form() {
        let hl = HalfLine::new(Potential::Zero, BoundaryCondition::Dirichlet, 0.0);
        let radii = [0.5, 1.0, 2.0];
        let tau = C::new(1.2, 0.0);
        let g = fd_kernel(&hl, tau, &radii, 1.0 / 2000.0).unwrap();
        for (a, &r) in radii.iter().enumerate() {
            for (b, &rp) in radii.iter().enumerate() {
                let exact = hl.greens_function(tau, r, rp).unwrap();
                assert!((g[(a, b)] - exact).norm() < 1e-5, "{r} {rp}");
            }
        }
    }

    #[test]
    fn free_threshold_laurent() {
        let chi = Cutoff::for_support(1.0);
        let neu = circle_guide(Potential::Zero, BoundaryCondition::Neumann, 1.5);
        let l = threshold_laurent(&neu, 1, &points(), chi, 0.05, 6).unwrap();
        assert!(l.coefficient_error < 1e-6, "{}", l.coefficient_error);
        // (i/4)·2·2 times the two angular functions at σ = 1
        let p = points();
        let ang: f64 = (1..3)
            .map(|j| neu.spectrum.eigenfunction(j, &p[0].y).unwrap() * neu.spectrum.eigenfunction(j, &p[1].y).unwrap())
            .sum();
        assert!((l.expected[(0, 1)] - I * ang).norm() < 1e-12);
        assert!(l.remainder_norms.iter().all(|r| *r < 10.0));
        let dir = circle_guide(Potential::Zero, BoundaryCondition::Dirichlet, 1.5);
        let l = threshold_laurent(&dir, 1, &points(), chi, 0.05, 6).unwrap();
        assert!(l.expected.iter().all(|z| z.norm() == 0.0));
        assert!(l.coefficient_error < 1e-6);
    }
}
