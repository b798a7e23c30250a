//! Projection of data on the cylinder onto cross-section modes, and the
//! inverse summation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cross_section::{Component, ModeSpectrum, YPoint};
use crate::error::{Error, Result};
use crate::quadrature::{integrate_samples, GaussLegendre};

/// Radial cutoff: 1 on `[0, inner]`, 0 beyond `outer`, `C^∞` in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub inner: f64,
    pub outer: f64,
}

impl Cutoff {
    /// The default observation cutoff for data supported in `[0, m1]`.
    pub fn for_support(m1: f64) -> Self {
        Self {
            inner: m1 + 1.0,
            outer: m1 + 2.0,
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        if r <= self.inner {
            return 1.0;
        }
        if r >= self.outer {
            return 0.0;
        }
        let x = (r - self.inner) / (self.outer - self.inner);
        let a = (-1.0 / (1.0 - x)).exp();
        let b = (-1.0 / x).exp();
        a / (a + b)
    }
}

/// Nodes `r_i = i·h`, `i = 0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub h: f64,
    pub n: usize,
}

impl RadialGrid {
    pub fn new(h: f64, r_max: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::config("grid.h", "must be a positive number"));
        }
        if !(r_max > h) {
            return Err(Error::config("grid.r_max", "must exceed grid.h"));
        }
        Ok(Self {
            h,
            n: (r_max / h).round() as usize + 1,
        })
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn r_max(&self) -> f64 {
        self.r(self.n - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.r(i)).collect()
    }

    /// Index of the node at `r`, if `r` is a node up to rounding.
    pub fn node_index(&self, r: f64) -> Option<usize> {
        let x = r / self.h;
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.n {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Last node index needed to cover `[0, r]`.
    pub fn cover(&self, r: f64) -> usize {
        ((r / self.h).ceil() as usize).min(self.n - 1)
    }
}

/// Samples of one radial function on a grid, vanishing beyond `support`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub grid: RadialGrid,
    pub values: Vec<f64>,
    pub support: f64,
}

/// Stencil width of the local interpolant used off the grid.
const STENCIL: usize = 8;

impl RadialProfile {
    pub fn zero(grid: RadialGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n],
            support: 0.0,
        }
    }

    pub fn from_fn(grid: RadialGrid, support: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        if support > grid.r_max() {
            return Err(Error::SupportExceedsGrid {
                support,
                r_max: grid.r_max(),
            });
        }
        let values = (0..grid.n)
            .map(|i| {
                let r = grid.r(i);
                if r <= support {
                    f(r)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self { grid, values, support })
    }

    /// Largest deviation from zero beyond the declared support.
    pub fn tail(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.r(*i) > self.support)
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Index range that carries the data, padded by one node.
    pub fn active_len(&self) -> usize {
        (self.grid.cover(self.support) + 2).min(self.grid.n)
    }

    pub fn integral(&self) -> f64 {
        integrate_samples(self.grid.h, &self.values[..self.active_len()])
    }

    pub fn norm_sq(&self) -> f64 {
        let sq: Vec<f64> = self.values[..self.active_len()].iter().map(|v| v * v).collect();
        integrate_samples(self.grid.h, &sq)
    }

    /// Degree-7 local Lagrange interpolation; zero beyond the grid.
    pub fn interpolate(&self, r: f64) -> f64 {
        let g = self.grid;
        if r < 0.0 || r > g.r_max() {
            return 0.0;
        }
        if let Some(i) = g.node_index(r) {
            return self.values[i];
        }
        let start = stencil_start(g, r);
        let mut acc = 0.0;
        for a in 0..STENCIL {
            let xa = g.r(start + a);
            let mut w = 1.0;
            for b in 0..STENCIL {
                if a != b {
                    let xb = g.r(start + b);
                    w *= (r - xb) / (xa - xb);
                }
            }
            acc += w * self.values[start + a];
        }
        acc
    }

    /// `x ↦ ∫_0^x` of the local interpolant.
    pub fn antiderivative(&self) -> Antiderivative<'_> {
        let g = self.grid;
        let gl = GaussLegendre::<f64>::new(4);
        let mut cum = Vec::with_capacity(g.n);
        cum.push(0.0);
        let last = self.active_len();
        for i in 0..g.n - 1 {
            let prev = *cum.last().expect("non-empty");
            if i >= last {
                cum.push(prev);
                continue;
            }
            let cell: f64 = gl.integrate(g.r(i), g.r(i + 1), |x| self.interpolate(x));
            cum.push(prev + cell);
        }
        Antiderivative { profile: self, cum, gl }
    }
}

fn stencil_start(g: RadialGrid, r: f64) -> usize {
    let i = (r / g.h).floor() as isize;
    let s = i - (STENCIL as isize / 2 - 1);
    s.clamp(0, g.n as isize - STENCIL as isize) as usize
}

pub struct Antiderivative<'a> {
    profile: &'a RadialProfile,
    cum: Vec<f64>,
    gl: GaussLegendre<f64>,
}

impl Antiderivative<'_> {
    pub fn eval(&self, x: f64) -> f64 {
        let g = self.profile.grid;
        if x <= 0.0 {
            return 0.0;
        }
        if x >= g.r_max() {
            return *self.cum.last().expect("non-empty");
        }
        let i = (x / g.h).floor() as usize;
        let a = g.r(i);
        if x == a {
            return self.cum[i];
        }
        self.cum[i] + self.gl.integrate(a, x, |s| self.profile.interpolate(s))
    }
}

/// A function on the cylinder end `(0, ∞) × Y`.
pub trait CylinderData: Sync {
    fn value(&self, r: f64, y: &YPoint<f64>) -> f64;
    /// `M₁`: the function vanishes for `r > M₁`.
    fn support(&self) -> f64;
}

/// Adapts a closure into [`CylinderData`].
pub struct FnData<F> {
    pub f: F,
    pub support: f64,
}

impl<F: Fn(f64, &YPoint<f64>) -> f64 + Sync> CylinderData for FnData<F> {
    fn value(&self, r: f64, y: &YPoint<f64>) -> f64 {
        (self.f)(r, y)
    }
    fn support(&self) -> f64 {
        self.support
    }
}

/// Compactly supported radial shapes available as presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RadialShape {
    /// `exp(-(r-c)²/(2w²))`, cut at nine widths where it is below 3e-18.
    Gaussian { center: f64, width: f64 },
    /// `exp(1 - 1/(1-x²))` with `x = (r-c)/a`.
    SmoothBump { center: f64, half_width: f64 },
    /// `(1-x²)^p` with `x = (r-c)/a`.
    PolyBump { center: f64, half_width: f64, power: u32 },
}

const GAUSSIAN_CUT: f64 = 9.0;

impl RadialShape {
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            RadialShape::Gaussian { center, width } => {
                let x = (r - center) / width;
                if x.abs() > GAUSSIAN_CUT {
                    0.0
                } else {
                    (-0.5 * x * x).exp()
                }
            }
            RadialShape::SmoothBump { center, half_width } => {
                let x = (r - center) / half_width;
                if x.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - x * x)).exp()
                }
            }
            RadialShape::PolyBump {
                center,
                half_width,
                power,
            } => {
                let x = (r - center) / half_width;
                if x.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - x * x).powi(power as i32)
                }
            }
        }
    }

    pub fn support(&self) -> f64 {
        match *self {
            RadialShape::Gaussian { center, width } => center + GAUSSIAN_CUT * width,
            RadialShape::SmoothBump { center, half_width } | RadialShape::PolyBump { center, half_width, .. } => {
                center + half_width
            }
        }
    }

    /// Lower end of the support, clipped at 0.
    pub fn lower(&self) -> f64 {
        match *self {
            RadialShape::Gaussian { center, width } => (center - GAUSSIAN_CUT * width).max(0.0),
            RadialShape::SmoothBump { center, half_width } | RadialShape::PolyBump { center, half_width, .. } => {
                (center - half_width).max(0.0)
            }
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let (w, name) = match *self {
            RadialShape::Gaussian { width, .. } => (width, "width"),
            RadialShape::SmoothBump { half_width, .. } | RadialShape::PolyBump { half_width, .. } => {
                (half_width, "half_width")
            }
        };
        if !(w > 0.0) {
            return Err(Error::config(format!("{path}.{name}"), "must be positive"));
        }
        if let RadialShape::PolyBump { power: 0, .. } = self {
            return Err(Error::config(format!("{path}.power"), "must be at least 1"));
        }
        Ok(())
    }
}

/// Angular factor of a preset term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Angular {
    /// Constant 1 on every component.
    Uniform,
    /// `Σ_{j ∈ modes} φ_j(y)`.
    Modes { modes: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTerm {
    pub radial: RadialShape,
    pub angular: Angular,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

/// Sum of preset terms, evaluated against a fixed spectrum.
#[derive(Clone, Debug)]
pub struct PresetData<'a> {
    pub terms: &'a [DataTerm],
    pub spectrum: &'a ModeSpectrum<f64>,
}

impl CylinderData for PresetData<'_> {
    fn value(&self, r: f64, y: &YPoint<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let radial = t.radial.value(r);
                if radial == 0.0 {
                    return 0.0;
                }
                let ang = match &t.angular {
                    Angular::Uniform => 1.0,
                    Angular::Modes { modes } => modes
                        .iter()
                        .map(|&j| self.spectrum.eigenfunction(j, y).unwrap_or(0.0))
                        .sum(),
                };
                t.amplitude * radial * ang
            })
            .sum()
    }

    fn support(&self) -> f64 {
        self.terms.iter().map(|t| t.radial.support()).fold(0.0, f64::max)
    }
}

/// Quadrature nodes and weights on `Y`.
#[derive(Clone, Debug)]
pub struct YQuadrature {
    pub points: Vec<YPoint<f64>>,
    pub weights: Vec<f64>,
}

impl YQuadrature {
    /// Trapezoid on circles, Gauss–Legendre in `cos θ` times trapezoid in `φ`
    /// on 2-spheres. `resolution` is the number of circle points.
    pub fn new(ms: &ModeSpectrum<f64>, resolution: usize) -> Result<Self> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (c, comp) in ms.components.iter().enumerate() {
            let circle = match *comp {
                Component::Circle { circumference } => Some(circumference),
                Component::Sphere { dim: 1, beta } => Some(2.0 * std::f64::consts::PI * beta.sqrt()),
                _ => None,
            };
            if let Some(l) = circle {
                for q in 0..resolution {
                    points.push(YPoint::circle(c, l * q as f64 / resolution as f64));
                    weights.push(l / resolution as f64);
                }
                continue;
            }
            match *comp {
                Component::Sphere { dim: 2, beta } => {
                    let n_theta = resolution.div_ceil(2).max(4);
                    let gl = GaussLegendre::<f64>::new(n_theta);
                    let n_phi = resolution.max(8);
                    for (x, w) in gl.nodes.iter().zip(&gl.weights) {
                        for k in 0..n_phi {
                            let phi = 2.0 * std::f64::consts::PI * k as f64 / n_phi as f64;
                            points.push(YPoint {
                                component: c,
                                angles: [x.acos(), phi],
                            });
                            weights.push(w * 2.0 * std::f64::consts::PI / n_phi as f64 * beta);
                        }
                    }
                }
                Component::Sphere { dim, .. } => {
                    return Err(Error::Unsupported(format!("quadrature on S^{dim} is not implemented")))
                }
                Component::Circle { .. } => unreachable!("handled above"),
            }
        }
        Ok(Self { points, weights })
    }
}

/// Per-mode radial profiles on a shared grid.
#[derive(Clone, Debug)]
pub struct CylinderField {
    pub spectrum: ModeSpectrum<f64>,
    pub grid: RadialGrid,
    pub modes: BTreeMap<usize, RadialProfile>,
}

impl CylinderField {
    pub fn new(spectrum: ModeSpectrum<f64>, grid: RadialGrid) -> Self {
        Self {
            spectrum,
            grid,
            modes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, j: usize, profile: RadialProfile) -> Result<()> {
        if profile.grid != self.grid {
            return Err(Error::invalid("all profiles of a field must share one grid"));
        }
        if j >= self.spectrum.len() {
            return Err(Error::invalid(format!("mode {j} is beyond the truncated spectrum")));
        }
        self.modes.insert(j, profile);
        Ok(())
    }

    pub fn mode(&self, j: usize) -> Option<&RadialProfile> {
        self.modes.get(&j)
    }

    /// Modes whose profile is not identically zero.
    pub fn active_modes(&self) -> Vec<usize> {
        self.modes
            .iter()
            .filter(|(_, p)| p.values.iter().any(|v| v.abs() > 1e-14))
            .map(|(j, _)| *j)
            .collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.modes.values().map(RadialProfile::norm_sq).sum()
    }

    pub fn scale_add(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::invalid("fields on different grids"));
        }
        let mut out = Self::new(self.spectrum.clone(), self.grid);
        let keys: std::collections::BTreeSet<usize> = self.modes.keys().chain(other.modes.keys()).copied().collect();
        for j in keys {
            let zero = RadialProfile::zero(self.grid);
            let a = self.modes.get(&j).unwrap_or(&zero);
            let b = other.modes.get(&j).unwrap_or(&zero);
            out.modes.insert(
                j,
                RadialProfile {
                    grid: self.grid,
                    values: a
                        .values
                        .iter()
                        .zip(&b.values)
                        .map(|(x, y)| alpha * x + beta * y)
                        .collect(),
                    support: a.support.max(b.support),
                },
            );
        }
        Ok(out)
    }
}

/// `f_j(r) = ⟨f(r, ·), φ_j⟩_{L²(Y)}` for every mode of `ms`.
pub fn decompose(
    f: &dyn CylinderData,
    ms: &ModeSpectrum<f64>,
    grid: RadialGrid,
    y_resolution: usize,
) -> Result<CylinderField> {
    let support = f.support();
    if support > grid.r_max() {
        return Err(Error::SupportExceedsGrid {
            support,
            r_max: grid.r_max(),
        });
    }
    let quad = YQuadrature::new(ms, y_resolution)?;
    // φ_j(y_q)·w_q, one row per mode
    let basis: Vec<Vec<f64>> = (0..ms.len())
        .map(|j| {
            quad.points
                .iter()
                .zip(&quad.weights)
                .map(|(p, w)| ms.eigenfunction(j, p).map(|v| v * w))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let last = grid.cover(support);
    let rows: Vec<Vec<f64>> = (0..=last)
        .into_par_iter()
        .map(|i| {
            let r = grid.r(i);
            let samples: Vec<f64> = quad.points.iter().map(|p| f.value(r, p)).collect();
            basis
                .iter()
                .map(|b| b.iter().zip(&samples).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let mut field = CylinderField::new(ms.clone(), grid);
    for j in 0..ms.len() {
        let mut values = vec![0.0; grid.n];
        for (i, row) in rows.iter().enumerate() {
            values[i] = row[j];
        }
        field.modes.insert(j, RadialProfile { grid, values, support });
    }
    Ok(field)
}

/// `Σ_j f_j(r) φ_j(y)` at each point.
pub fn reconstruct(cf: &CylinderField, points: &[(f64, YPoint<f64>)]) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|(r, y)| {
            let mut acc = 0.0;
            for (j, p) in &cf.modes {
                let fr = p.interpolate(*r);
                if fr != 0.0 {
                    acc += fr * cf.spectrum.eigenfunction(*j, y)?;
                }
            }
            Ok(acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_section::{spectrum, CrossSection};
    use std::f64::consts::PI;

    fn circle_spectrum(sigma_max: f64) -> ModeSpectrum<f64> {
        spectrum(
            &CrossSection::Circle {
                circumference: 2.0 * PI,
            },
            sigma_max,
        )
        .unwrap()
    }

    fn bump(r: f64) -> f64 {
        RadialShape::SmoothBump {
            center: 3.0,
            half_width: 1.5,
        }
        .value(r)
    }

    #[test]
    fn y_independent_data_lands_in_mode_zero() {
        let ms = circle_spectrum(3.0);
        let grid = RadialGrid::new(0.01, 6.0).unwrap();
        let f = FnData {
            f: |r: f64, _: &YPoint<f64>| bump(r),
            support: 4.5,
        };
        let cf = decompose(&f, &ms, grid, 64).unwrap();
        for (i, v) in cf.modes[&0].values.iter().enumerate() {
            assert!((v - (2.0 * PI).sqrt() * bump(grid.r(i))).abs() < 1e-13);
        }
        for j in 1..ms.len() {
            assert!(cf.modes[&j].values.iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn cos_data_lands_in_cos_mode() {
        let ms = circle_spectrum(3.0);
        let grid = RadialGrid::new(0.01, 6.0).unwrap();
        let f = FnData {
            f: |r: f64, y: &YPoint<f64>| bump(r) * y.angles[0].cos(),
            support: 4.5,
        };
        let cf = decompose(&f, &ms, grid, 64).unwrap();
        let j_cos = ms
            .labels
            .iter()
            .position(|l| l.shape == crate::cross_section::ModeShape::Cos(1))
            .unwrap();
        for (i, v) in cf.modes[&j_cos].values.iter().enumerate() {
            assert!((v - PI.sqrt() * bump(grid.r(i))).abs() < 1e-13);
        }
        assert_eq!(cf.active_modes(), vec![j_cos]);
    }

    #[test]
    fn round_trip_on_grid_points() {
        let ms = circle_spectrum(8.0);
        let grid = RadialGrid::new(0.02, 6.0).unwrap();
        let g = |r: f64, y: f64| bump(r) * ((y.sin()).exp() + 0.3 * (2.0 * y).cos());
        let f = FnData {
            f: |r: f64, y: &YPoint<f64>| g(r, y.angles[0]),
            support: 4.5,
        };
        let cf = decompose(&f, &ms, grid, 128).unwrap();
        let pts: Vec<(f64, YPoint<f64>)> = (0..40)
            .map(|k| (grid.r(50 + 3 * k), YPoint::circle(0, 0.37 * k as f64)))
            .collect();
        let back = reconstruct(&cf, &pts).unwrap();
        for ((r, y), v) in pts.iter().zip(back) {
            assert!((v - g(*r, y.angles[0])).abs() < 1e-8, "{v} vs {}", g(*r, y.angles[0]));
        }
    }

    #[test]
    fn reconstruct_trivial_cases() {
        let ms = circle_spectrum(2.0);
        let grid = RadialGrid::new(0.1, 5.0).unwrap();
        let mut cf = CylinderField::new(ms.clone(), grid);
        let p = YPoint::circle(0, 0.4);
        assert_eq!(reconstruct(&cf, &[(1.0, p)]).unwrap(), vec![0.0]);
        let prof = RadialProfile::from_fn(grid, 4.0, |r| r * r).unwrap();
        cf.insert(2, prof).unwrap();
        let got = reconstruct(&cf, &[(1.0, p)]).unwrap()[0];
        assert_eq!(got, ms.eigenfunction(2, &p).unwrap());
    }

    #[test]
    fn support_beyond_grid_is_rejected() {
        let ms = circle_spectrum(1.0);
        let grid = RadialGrid::new(0.1, 3.0).unwrap();
        let f = FnData {
            f: |r: f64, _: &YPoint<f64>| bump(r),
            support: 4.5,
        };
        assert!(matches!(
            decompose(&f, &ms, grid, 16),
            Err(Error::SupportExceedsGrid { .. })
        ));
    }

    #[test]
    fn interpolation_and_antiderivative_are_high_order() {
        let grid = RadialGrid::new(0.05, 6.0).unwrap();
        let p = RadialProfile::from_fn(grid, 6.0, |r| (-(r - 3.0).powi(2)).exp()).unwrap();
        for x in [0.013, 1.234, 2.999, 5.97] {
            assert!((p.interpolate(x) - (-(x - 3.0f64).powi(2)).exp()).abs() < 1e-9);
        }
        let anti = p.antiderivative();
        let exact =
            PI.sqrt() / 2.0 * (statrs::function::erf::erf(x_shift(2.2)) - statrs::function::erf::erf(x_shift(0.0)));
        assert!((anti.eval(2.2) - exact).abs() < 1e-10);
        assert!((p.integral() - anti.eval(6.0)).abs() < 1e-10);
    }

    fn x_shift(x: f64) -> f64 {
        x - 3.0
    }
}
