//! Spectral data of model cross-sections: circles, round spheres, and
//! disjoint unions of these.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrossSection<T> {
    /// Geodesic circle of the given length.
    Circle {
        circumference: T,
    },
    /// `(S^dim, β·g_round)`.
    Sphere {
        dim: usize,
        beta: T,
    },
    DisjointUnion {
        parts: Vec<CrossSection<T>>,
    },
}

/// A connected piece of the cross-section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Component<T> {
    Circle { circumference: T },
    Sphere { dim: usize, beta: T },
}

/// Which eigenfunction a mode is, within its component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeShape {
    Constant,
    Cos(u32),
    Sin(u32),
    /// Real spherical harmonic of the given degree. `order` runs over
    /// `-degree..=degree` on the 2-sphere; on higher spheres it only counts.
    Harmonic {
        degree: u32,
        order: i32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeLabel {
    pub component: usize,
    pub shape: ModeShape,
}

/// A point of `Y`: the component and up to two angles. On a circle `angles[0]`
/// is arc length; on the 2-sphere the angles are (polar, azimuth).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YPoint<T> {
    pub component: usize,
    pub angles: [T; 2],
}

impl<T: Scalar> YPoint<T> {
    pub fn circle(component: usize, y: T) -> Self {
        Self {
            component,
            angles: [y, T::zero()],
        }
    }
}

/// Eigenvalue data of `-Δ_Y` truncated at `σ ≤ sigma_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSpectrum<T> {
    /// `σ_j`, nondecreasing, repeated with multiplicity.
    pub sigma: Vec<T>,
    /// Distinct values `ν_l`.
    pub nu: Vec<T>,
    pub mult: Vec<usize>,
    pub labels: Vec<ModeLabel>,
    pub components: Vec<Component<T>>,
}

impl<T: Scalar> CrossSection<T> {
    pub fn components(&self) -> Result<Vec<Component<T>>> {
        let mut out = Vec::new();
        self.collect_components(&mut out)?;
        Ok(out)
    }

    fn collect_components(&self, out: &mut Vec<Component<T>>) -> Result<()> {
        match self {
            CrossSection::Circle { circumference } => {
                if !(*circumference > T::zero()) {
                    return Err(Error::invalid("circle circumference must be positive"));
                }
                out.push(Component::Circle {
                    circumference: *circumference,
                });
            }
            CrossSection::Sphere { dim, beta } => {
                if *dim == 0 {
                    return Err(Error::invalid("sphere dimension must be at least 1"));
                }
                if !(*beta > T::zero()) {
                    return Err(Error::invalid("sphere scale β must be positive"));
                }
                out.push(Component::Sphere { dim: *dim, beta: *beta });
            }
            CrossSection::DisjointUnion { parts } => {
                if parts.is_empty() {
                    return Err(Error::invalid("disjoint union must be non-empty"));
                }
                for p in parts {
                    p.collect_components(out)?;
                }
            }
        }
        Ok(())
    }
}

/// All modes with `σ_j ≤ sigma_max`.
pub fn spectrum<T: Scalar>(cs: &CrossSection<T>, sigma_max: T) -> Result<ModeSpectrum<T>> {
    if !(sigma_max > T::zero()) {
        return Err(Error::invalid("sigma_max must be positive"));
    }
    let components = cs.components()?;
    // Slack so that eigenvalues sitting exactly on sigma_max survive rounding.
    let cap = sigma_max * (T::one() + T::lit(1e-12));
    let mut modes: Vec<(T, ModeLabel)> = Vec::new();
    for (c, comp) in components.iter().enumerate() {
        match *comp {
            Component::Circle { circumference } => circle_modes(c, circumference, cap, &mut modes),
            Component::Sphere { dim, beta } => {
                if dim == 1 {
                    // S¹ with metric β·g is a circle of length 2π√β.
                    let l = T::lit(2.0) * T::PI() * beta.sqrt();
                    circle_modes(c, l, cap, &mut modes);
                } else {
                    sphere_modes(c, dim, beta, cap, &mut modes);
                }
            }
        }
    }
    // Stable sort keeps component order within a tie.
    modes.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
    let sigma: Vec<T> = modes.iter().map(|m| m.0).collect();
    let labels = modes.iter().map(|m| m.1).collect();
    let (nu, mult) = group_distinct(&sigma);
    Ok(ModeSpectrum {
        sigma,
        nu,
        mult,
        labels,
        components,
    })
}

fn circle_modes<T: Scalar>(c: usize, l: T, cap: T, out: &mut Vec<(T, ModeLabel)>) {
    out.push((
        T::zero(),
        ModeLabel {
            component: c,
            shape: ModeShape::Constant,
        },
    ));
    let mut k = 1u32;
    loop {
        let s = T::lit(2.0) * T::PI() * T::lit(k as f64) / l;
        if s > cap {
            break;
        }
        for shape in [ModeShape::Cos(k), ModeShape::Sin(k)] {
            out.push((s, ModeLabel { component: c, shape }));
        }
        k += 1;
    }
}

fn sphere_modes<T: Scalar>(c: usize, dim: usize, beta: T, cap: T, out: &mut Vec<(T, ModeLabel)>) {
    let mut k = 0u32;
    loop {
        let kf = T::lit(k as f64);
        let s = (kf * (kf + T::from_usize_lossy(dim) - T::one()) / beta).sqrt();
        if s > cap {
            break;
        }
        let m = sphere_multiplicity(dim, k as usize);
        for i in 0..m {
            let order = if dim == 2 { i as i32 - k as i32 } else { i as i32 };
            out.push((
                s,
                ModeLabel {
                    component: c,
                    shape: if k == 0 {
                        ModeShape::Constant
                    } else {
                        ModeShape::Harmonic { degree: k, order }
                    },
                },
            ));
        }
        k += 1;
    }
}

/// Dimension of degree-`k` spherical harmonics on `S^n`.
pub fn sphere_multiplicity(n: usize, k: usize) -> usize {
    let binom = |a: usize, b: usize| -> usize {
        if b > a {
            return 0;
        }
        let mut r: u128 = 1;
        for i in 0..b {
            r = r * (a - i) as u128 / (i + 1) as u128;
        }
        r as usize
    };
    let lower = if k >= 2 { binom(n + k - 2, n) } else { 0 };
    binom(n + k, n) - lower
}

fn group_distinct<T: Scalar>(sigma: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut nu: Vec<T> = Vec::new();
    let mut mult: Vec<usize> = Vec::new();
    for &s in sigma {
        match nu.last() {
            Some(&last) if (s - last).abs() <= T::lit(1e-12) * (T::one() + s.abs()) => {
                *mult.last_mut().expect("paired with nu") += 1;
            }
            _ => {
                nu.push(s);
                mult.push(1);
            }
        }
    }
    (nu, mult)
}

impl<T: Scalar> ModeSpectrum<T> {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Flattens `(ν, mult)` back into a nondecreasing list.
    pub fn flatten_distinct(&self) -> Vec<T> {
        self.nu
            .iter()
            .zip(&self.mult)
            .flat_map(|(n, m)| std::iter::repeat_n(*n, *m))
            .collect()
    }

    /// Index `l` of the distinct value equal to `σ_j`.
    pub fn distinct_index(&self, j: usize) -> usize {
        let mut acc = 0;
        for (l, m) in self.mult.iter().enumerate() {
            acc += m;
            if j < acc {
                return l;
            }
        }
        self.nu.len() - 1
    }

    /// Evaluates `φ_j` at a point of `Y`. The result is zero on other components.
    pub fn eigenfunction(&self, j: usize, p: &YPoint<T>) -> Result<T> {
        let label = self
            .labels
            .get(j)
            .ok_or_else(|| Error::invalid(format!("mode index {j} out of range")))?;
        if label.component != p.component {
            return Ok(T::zero());
        }
        let comp = self.components[label.component];
        match comp {
            Component::Circle { circumference } => Ok(circle_function(circumference, label.shape, p.angles[0])),
            Component::Sphere { dim: 1, beta } => {
                let l = T::lit(2.0) * T::PI() * beta.sqrt();
                Ok(circle_function(l, label.shape, p.angles[0]))
            }
            Component::Sphere { dim: 2, beta } => {
                Ok(sphere2_function(label.shape, p.angles[0], p.angles[1]) / beta.sqrt())
            }
            Component::Sphere { dim, .. } => Err(Error::Unsupported(format!(
                "eigenfunctions on S^{dim} are not implemented; only eigenvalues are"
            ))),
        }
    }
}

fn circle_function<T: Scalar>(l: T, shape: ModeShape, y: T) -> T {
    let two = T::lit(2.0);
    match shape {
        ModeShape::Constant => T::one() / l.sqrt(),
        ModeShape::Cos(k) => (two / l).sqrt() * (two * T::PI() * T::lit(k as f64) * y / l).cos(),
        ModeShape::Sin(k) => (two / l).sqrt() * (two * T::PI() * T::lit(k as f64) * y / l).sin(),
        ModeShape::Harmonic { .. } => T::zero(),
    }
}

/// Real orthonormal spherical harmonics on the unit 2-sphere.
fn sphere2_function<T: Scalar>(shape: ModeShape, theta: T, phi: T) -> T {
    let four_pi = T::lit(4.0) * T::PI();
    match shape {
        ModeShape::Constant => T::one() / four_pi.sqrt(),
        ModeShape::Harmonic { degree, order } => {
            let m = order.unsigned_abs();
            let p = normalized_legendre(degree, m, theta.cos());
            if order == 0 {
                p
            } else if order > 0 {
                T::lit(2.0).sqrt() * p * (T::lit(m as f64) * phi).cos()
            } else {
                T::lit(2.0).sqrt() * p * (T::lit(m as f64) * phi).sin()
            }
        }
        _ => T::zero(),
    }
}

/// `sqrt((2l+1)/(4π) (l-m)!/(l+m)!) P_l^m(x)` without the Condon–Shortley phase.
fn normalized_legendre<T: Scalar>(l: u32, m: u32, x: T) -> T {
    let four_pi = T::lit(4.0) * T::PI();
    let s = (T::one() - x * x).max(T::zero()).sqrt();
    // P̄_m^m by the stable product formula
    let mut pmm = (T::one() / four_pi).sqrt();
    for i in 1..=m {
        let i = T::lit(i as f64);
        pmm = pmm * s * ((T::lit(2.0) * i + T::one()) / (T::lit(2.0) * i)).sqrt();
    }
    if l == m {
        return pmm;
    }
    let mf = T::lit(m as f64);
    let mut p_prev = pmm;
    let mut p = x * (T::lit(2.0) * mf + T::lit(3.0)).sqrt() * pmm;
    for ll in (m + 2)..=l {
        let lf = T::lit(ll as f64);
        let a = ((T::lit(4.0) * lf * lf - T::one()) / (lf * lf - mf * mf)).sqrt();
        let b = (((lf - T::one()) * (lf - T::one()) - mf * mf)
            / (T::lit(4.0) * (lf - T::one()) * (lf - T::one()) - T::one()))
        .sqrt();
        let next = a * (x * p - b * p_prev);
        p_prev = p;
        p = next;
    }
    p
}

/// Outcome of the gap check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GapCheck {
    pub holds: bool,
    pub first_violation: Option<usize>,
}

/// Checks `ν_{l+1} - ν_l ≥ c_Y ν_l^{-N_Y}` for every `l` with `ν_l ≥ 1`.
pub fn check_gap_condition<T: Scalar>(ms: &ModeSpectrum<T>, c_y: T, n_y: T) -> GapCheck {
    check_gap_sequence(&ms.nu, c_y, n_y)
}

/// Same check on an explicit list of distinct values.
pub fn check_gap_sequence<T: Scalar>(nu: &[T], c_y: T, n_y: T) -> GapCheck {
    for l in 0..nu.len().saturating_sub(1) {
        if nu[l] < T::one() {
            continue;
        }
        // relative slack for eigenvalues computed as 2πk/L
        let bound = c_y * nu[l].powf(-n_y);
        if nu[l + 1] - nu[l] < bound - T::lit(1e-12) * (T::one() + nu[l + 1]) {
            return GapCheck {
                holds: false,
                first_violation: Some(l),
            };
        }
    }
    GapCheck {
        holds: true,
        first_violation: None,
    }
}
