//! Asymptotics of `∫_0^∞ e^{∓iλt} F(τ(λ))/τ(λ) dλ`, `τ(λ) = (λ² - σ²)^{1/2}`,
//! as `t → ∞`: interior stationary-phase coefficients in powers of
//! `(σt)^{-1/2-k}`, one-sided endpoint ladders in powers of `t^{-1/2-k/2}`,
//! and a direct quadrature of the integral to test both against.

use num_complex::Complex;
use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::series::PowerSeries;
use crate::Scalar;

/// Sign of the exponent: `Minus` is `e^{-iλt}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Minus => -1.0,
            Sign::Plus => 1.0,
        }
    }
}

/// Which part of the `λ` axis: `Above` is `λ > σ` (real `τ`), `Below` is
/// `0 < λ < σ` (imaginary `τ`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Side {
    Above,
    Below,
    Full,
}

/// Amplitude `F` known on the real and imaginary `τ` axes near 0.
pub trait SmoothProfile: Sync {
    fn eval(&self, tau: C) -> C;

    /// Beyond `|τ| = reach` on either axis `F` is negligible.
    fn reach(&self) -> f64;

    /// Exact `c_n` with `F(x) = Σ c_n x^n` on the real axis, if known.
    fn taylor_real(&self, _len: usize) -> Option<Vec<C>> {
        None
    }

    /// Exact `d_n` with `F(iy) = Σ d_n y^n`, if known.
    fn taylor_imag(&self, _len: usize) -> Option<Vec<C>> {
        None
    }
}

/// `F(τ) = p(τ)·exp(-(τ/s)⁴)`: entire, decaying on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuarticGaussian {
    pub poly: Vec<C>,
    pub scale: f64,
}

impl QuarticGaussian {
    fn envelope_series(&self, len: usize) -> PowerSeries<f64> {
        let mut s = PowerSeries::zero(len);
        let mut m = 0;
        let mut fact = 1.0;
        while 4 * m < len {
            if m > 0 {
                fact *= m as f64;
            }
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            s.coeffs[4 * m] = C::new(sign / (fact * self.scale.powi(4 * m as i32)), 0.0);
            m += 1;
        }
        s
    }
}

impl SmoothProfile for QuarticGaussian {
    fn eval(&self, tau: C) -> C {
        let p = self.poly.iter().rev().fold(C::new(0.0, 0.0), |acc, c| acc * tau + c);
        p * (-(tau / self.scale).powi(4)).exp()
    }

    fn reach(&self) -> f64 {
        // exp(-x⁴) < 1e-20 beyond x ≈ 2.6, with headroom for the polynomial
        self.scale * 3.2
    }

    fn taylor_real(&self, len: usize) -> Option<Vec<C>> {
        let p = PowerSeries {
            coeffs: (0..len)
                .map(|n| self.poly.get(n).copied().unwrap_or_default())
                .collect(),
        };
        Some(p.mul(&self.envelope_series(len)).coeffs)
    }

    fn taylor_imag(&self, len: usize) -> Option<Vec<C>> {
        let i = C::new(0.0, 1.0);
        let p = PowerSeries {
            coeffs: (0..len)
                .map(|n| self.poly.get(n).copied().unwrap_or_default() * i.powi(n as i32))
                .collect(),
        };
        Some(p.mul(&self.envelope_series(len)).coeffs)
    }
}

/// Adapts a closure into a [`SmoothProfile`].
pub struct FnProfile<F> {
    pub f: F,
    pub reach: f64,
}

impl<F: Fn(C) -> C + Sync> SmoothProfile for FnProfile<F> {
    fn eval(&self, tau: C) -> C {
        (self.f)(tau)
    }
    fn reach(&self) -> f64 {
        self.reach
    }
}

/// How Taylor coefficients at `τ = 0` are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum TaylorMethod {
    /// Use the profile's own coefficients.
    Exact,
    /// Polynomial fit through 17 equispaced samples on each axis within
    /// `radius`, accepted if halving the radius changes the scaled
    /// coefficients by at most `1e-4` relative.
    FiniteDifference { radius: f64 },
    /// Trapezoid rule for the Cauchy integral on a circle; needs `F` analytic
    /// in the disc.
    Cauchy { radius: f64, points: usize },
}

/// Taylor coefficients of `F` along both axes at 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorData {
    pub real: Vec<C>,
    pub imag: Vec<C>,
}

/// Half-width of the finite-difference stencil.
const FD_HALF: usize = 8;
/// Accepted relative change under step halving.
pub const FD_HALVING_TOL: f64 = 1e-4;

pub fn taylor_data(profile: &dyn SmoothProfile, len: usize, method: TaylorMethod) -> Result<TaylorData> {
    match method {
        TaylorMethod::Exact => {
            let real = profile
                .taylor_real(len)
                .ok_or_else(|| Error::invalid("profile has no exact Taylor coefficients"))?;
            let imag = profile
                .taylor_imag(len)
                .ok_or_else(|| Error::invalid("profile has no exact Taylor coefficients"))?;
            Ok(TaylorData { real, imag })
        }
        TaylorMethod::FiniteDifference { radius } => {
            let i = C::new(0.0, 1.0);
            let real = fd_checked(|x| profile.eval(C::new(x, 0.0)), len, radius)?;
            let imag = fd_checked(|y| profile.eval(i * y), len, radius)?;
            Ok(TaylorData { real, imag })
        }
        TaylorMethod::Cauchy { radius, points } => {
            let n = points.max(2 * len + 8);
            let samples: Vec<(f64, C)> = (0..n)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    (th, profile.eval(C::from_polar(radius, th)))
                })
                .collect();
            let real: Vec<C> = (0..len)
                .map(|m| {
                    let s: C = samples
                        .iter()
                        .map(|(th, v)| v * C::from_polar(1.0, -(m as f64) * th))
                        .sum();
                    s / (n as f64 * radius.powi(m as i32))
                })
                .collect();
            let i = C::new(0.0, 1.0);
            let imag = real.iter().enumerate().map(|(m, c)| c * i.powi(m as i32)).collect();
            Ok(TaylorData { real, imag })
        }
    }
}

fn fd_checked(f: impl Fn(f64) -> C, len: usize, radius: f64) -> Result<Vec<C>> {
    let coarse = fd_fit(&f, len, radius)?;
    let fine = fd_fit(&f, len, radius / 2.0)?;
    let scale = coarse
        .iter()
        .enumerate()
        .map(|(n, c)| c.norm() * radius.powi(n as i32))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for n in 0..len {
        let change = (coarse[n] - fine[n]).norm() * radius.powi(n as i32) / scale;
        if change > FD_HALVING_TOL {
            return Err(Error::DerivativeInstability { order: n, change });
        }
    }
    Ok(fine)
}

/// Coefficients of the degree-16 interpolant through `f(kρ/8)`, `k = -8..8`.
fn fd_fit(f: &impl Fn(f64) -> C, len: usize, radius: f64) -> Result<Vec<C>> {
    let m = 2 * FD_HALF + 1;
    if len > m {
        return Err(Error::invalid(format!(
            "at most {m} Taylor coefficients from the stencil"
        )));
    }
    let xs: Vec<f64> = (0..m).map(|k| (k as f64 - FD_HALF as f64) / FD_HALF as f64).collect();
    let vand = nalgebra::DMatrix::from_fn(m, m, |r, c| xs[r].powi(c as i32));
    let lu = vand.lu();
    let vals: Vec<C> = xs.iter().map(|x| f(x * radius)).collect();
    let re = nalgebra::DVector::from_iterator(m, vals.iter().map(|v| v.re));
    let im = nalgebra::DVector::from_iterator(m, vals.iter().map(|v| v.im));
    let a = lu.solve(&re).ok_or_else(|| Error::invalid("singular stencil"))?;
    let b = lu.solve(&im).ok_or_else(|| Error::invalid("singular stencil"))?;
    Ok((0..len).map(|n| C::new(a[n], b[n]) / radius.powi(n as i32)).collect())
}

/// `(σt)^{-1/2} e^{∓iσt} Σ b_k (σt)^{-k}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseExpansion {
    pub sigma: f64,
    pub sign: Sign,
    pub b: Vec<C>,
}

impl PhaseExpansion {
    pub fn evaluate(&self, t: f64) -> C {
        self.evaluate_reduced(t) * C::from_polar(1.0, self.sign.value() * self.sigma * t)
    }

    /// [`evaluate`](Self::evaluate) without the factor `e^{∓iσt}`.
    pub fn evaluate_reduced(&self, t: f64) -> C {
        let w = self.sigma * t;
        let mut acc = C::new(0.0, 0.0);
        for b in self.b.iter().rev() {
            acc = acc / w + b;
        }
        acc * w.powf(-0.5)
    }
}

/// `e^{±iσt} Σ_n a_n t^{-(n+1)/2}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryLadder {
    pub sigma: f64,
    pub sign: Sign,
    pub side: Side,
    pub a: Vec<C>,
}

impl BoundaryLadder {
    pub fn evaluate(&self, t: f64) -> C {
        self.evaluate_reduced(t) * C::from_polar(1.0, self.sign.value() * self.sigma * t)
    }

    pub fn evaluate_reduced(&self, t: f64) -> C {
        let mut acc = C::new(0.0, 0.0);
        let rt = t.sqrt();
        for a in self.a.iter().rev() {
            acc = acc / rt + a;
        }
        acc / rt
    }
}

fn factorial<T: Scalar>(n: usize) -> T {
    (2..=n).fold(T::one(), |acc, k| acc * T::from_usize_lossy(k))
}

fn cplx<T: Scalar>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

/// `L_k a` for the phase `f` with `f''(0) = fpp` and `g = f - f(0) - fpp·x²/2`.
fn hormander_term<T: Scalar>(a: &PowerSeries<T>, g: &PowerSeries<T>, fpp: T, k: usize) -> Complex<T> {
    let mut sum = cplx(T::zero(), T::zero());
    let mut gmu = PowerSeries::constant(cplx(T::one(), T::zero()), a.len());
    for mu in 0..=2 * k {
        if mu > 0 {
            gmu = gmu.mul(g);
        }
        let nu = k + mu;
        let prod = gmu.mul(a);
        if 2 * nu >= prod.len() {
            break;
        }
        let deriv = prod.derivative_at_zero(2 * nu);
        let sign = if nu.is_multiple_of(2) { T::one() } else { -T::one() };
        let w =
            sign * T::lit(2.0).powi(-(nu as i32)) * fpp.powi(-(nu as i32)) / (factorial::<T>(mu) * factorial::<T>(nu));
        sum += deriv * w;
    }
    // i^{-k}
    let ik = match k % 4 {
        0 => cplx(T::one(), T::zero()),
        1 => cplx(T::zero(), -T::one()),
        2 => cplx(-T::one(), T::zero()),
        _ => cplx(T::zero(), T::one()),
    };
    sum * ik
}

/// Real- and imaginary-axis contributions to `b_k` before summation.
/// `real` and `imag` are the Taylor coefficients of `F` along the two axes.
pub fn interior_pieces<T: Scalar>(
    real: &[Complex<T>],
    imag: &[Complex<T>],
    sigma: T,
    k0: usize,
    sign: Sign,
) -> (Vec<Complex<T>>, Vec<Complex<T>>) {
    let len = 6 * k0.saturating_sub(1) + 1;
    let s = if sign == Sign::Minus { -T::one() } else { T::one() };
    let x = PowerSeries::<T>::variable(len);
    let x2 = x.mul(&x);
    // even parts of F(στ) and F(iστ)
    let pick = |c: &[Complex<T>]| -> PowerSeries<T> {
        let mut out = PowerSeries::zero(len);
        let mut p = T::one();
        for n in 0..len {
            if n % 2 == 0 {
                out.coeffs[n] = c.get(n).copied().unwrap_or(cplx(T::zero(), T::zero())) * p;
            }
            p *= sigma;
        }
        out
    };
    let half = T::lit(0.5);
    let one = cplx(T::one(), T::zero());
    // piece 1: phase s·√(1+τ²), amplitude F_e(στ)/√(1+τ²)
    let sq1 = PowerSeries::binomial(&x2, half);
    let a1 = pick(real).mul(&PowerSeries::binomial(&x2, -half));
    let g1 = sq1
        .sub(&PowerSeries::constant(one, len))
        .sub(&x2.scale(cplx(half, T::zero())))
        .scale(cplx(s, T::zero()));
    // piece 2: phase s·√(1-τ²), amplitude F_e(iστ)/√(1-τ²)
    let mx2 = x2.scale(cplx(-T::one(), T::zero()));
    let sq2 = PowerSeries::binomial(&mx2, half);
    let a2 = pick(imag).mul(&PowerSeries::binomial(&mx2, -half));
    let g2 = sq2
        .sub(&PowerSeries::constant(one, len))
        .add(&x2.scale(cplx(half, T::zero())))
        .scale(cplx(s, T::zero()));
    let root = (T::lit(2.0) * T::PI()).sqrt();
    let quarter = T::PI() / T::lit(4.0);
    // f''(0) is s for piece 1 and -s for piece 2
    let pre1 = Complex::from_polar(half * root, s * quarter);
    let pre2 = cplx(T::zero(), -half) * Complex::from_polar(root, -s * quarter);
    let p1 = (0..k0).map(|k| pre1 * hormander_term(&a1, &g1, s, k)).collect();
    let p2 = (0..k0).map(|k| pre2 * hormander_term(&a2, &g2, -s, k)).collect();
    (p1, p2)
}

/// Interior coefficients `b_k`, `k < k₀`. For `Plus` the two pieces cancel
/// and all coefficients are zero.
pub fn interior_coefficients<T: Scalar>(
    real: &[Complex<T>],
    imag: &[Complex<T>],
    sigma: T,
    k0: usize,
    sign: Sign,
) -> Vec<Complex<T>> {
    if sign == Sign::Plus {
        return vec![cplx(T::zero(), T::zero()); k0];
    }
    let (p1, p2) = interior_pieces(real, imag, sigma, k0, sign);
    let mut b: Vec<Complex<T>> = p1.iter().zip(&p2).map(|(x, y)| *x + *y).collect();
    if let Some(b0) = b.first_mut() {
        let f0 = real.first().copied().unwrap_or(cplx(T::zero(), T::zero()));
        *b0 = Complex::from_polar((T::lit(2.0) * T::PI()).sqrt(), -T::PI() / T::lit(4.0)) * f0;
    }
    b
}

/// Largest supported `k₀`.
pub const MAX_K0: usize = 4;

pub fn expand_interior(
    profile: &dyn SmoothProfile,
    sigma: f64,
    k0: usize,
    sign: Sign,
    method: TaylorMethod,
) -> Result<PhaseExpansion> {
    check_order(k0)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid("σ must be positive"));
    }
    let data = taylor_data(profile, 2 * k0 - 1, method)?;
    Ok(PhaseExpansion {
        sigma,
        sign,
        b: interior_coefficients(&data.real, &data.imag, sigma, k0, sign),
    })
}

fn check_order(k0: usize) -> Result<()> {
    if k0 == 0 || k0 > MAX_K0 {
        return Err(Error::invalid(format!("k₀ must be in 1..={MAX_K0}")));
    }
    Ok(())
}

/// One-sided ladder coefficients `a_n`, `n ≤ 2k₀ - 2`, from Taylor data on the
/// relevant axis (`real` for `Above`, `imag` for `Below`).
pub fn boundary_coefficients<T: Scalar>(
    taylor: &[Complex<T>],
    sigma: T,
    k0: usize,
    sign: Sign,
    side: Side,
) -> Vec<Complex<T>> {
    let len = 2 * k0 - 1;
    let two = T::lit(2.0);
    let s = PowerSeries::<T>::variable(len);
    let s2 = s.mul(&s);
    // τ(s) = s√(2σ ± s²), h(s) = 2F(τ(s))/√(2σ ± s²) (times -i below)
    let pm = if side == Side::Below { -T::one() } else { T::one() };
    let u = s2.scale(cplx(pm / (two * sigma), T::zero()));
    let root = (two * sigma).sqrt();
    let tau_s = s
        .mul(&PowerSeries::binomial(&u, T::lit(0.5)))
        .scale(cplx(root, T::zero()));
    let f = PowerSeries {
        coeffs: (0..len)
            .map(|n| taylor.get(n).copied().unwrap_or(cplx(T::zero(), T::zero())))
            .collect(),
    };
    let mut h = f
        .compose(&tau_s)
        .mul(&PowerSeries::binomial(&u, -T::lit(0.5)))
        .scale(cplx(two / root, T::zero()));
    if side == Side::Below {
        h = h.scale(cplx(T::zero(), -T::one()));
    }
    // ∫_0^∞ e^{iεts²} s^n ds = Γ((n+1)/2)/2 · t^{-(n+1)/2} e^{iεπ(n+1)/4}
    let eps = match (side, sign) {
        (Side::Below, Sign::Minus) => T::one(),
        (Side::Below, Sign::Plus) => -T::one(),
        (_, sign) => T::lit(sign.value()),
    };
    (0..len)
        .map(|n| {
            let nf = T::from_usize_lossy(n + 1);
            let gamma = T::lit(statrs::function::gamma::gamma((n + 1) as f64 / 2.0));
            h.coeffs[n] * gamma / two * Complex::from_polar(T::one(), eps * T::PI() * nf / T::lit(4.0))
        })
        .collect()
}

pub fn expand_boundary(
    profile: &dyn SmoothProfile,
    sigma: f64,
    k0: usize,
    sign: Sign,
    side: Side,
    method: TaylorMethod,
) -> Result<BoundaryLadder> {
    check_order(k0)?;
    if side == Side::Full {
        return Err(Error::invalid("a boundary ladder is one-sided: use Above or Below"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("σ must be positive"));
    }
    let data = taylor_data(profile, 2 * k0 - 1, method)?;
    let taylor = if side == Side::Above { &data.real } else { &data.imag };
    Ok(BoundaryLadder {
        sigma,
        sign,
        side,
        a: boundary_coefficients(taylor, sigma, k0, sign, side),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuadratureOptions {
    /// Target `|error| ≤ tol·(1 + |I|)`.
    pub tol: f64,
    pub max_panels: usize,
    /// Gauss–Legendre nodes per panel.
    pub nodes: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_panels: 2_000_000,
            nodes: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuadratureResult {
    pub value: C,
    /// `value·e^{∓iσt}`, free of the rounding in the large common phase.
    pub reduced: C,
    pub estimate: f64,
    pub panels: usize,
}

/// Direct evaluation of the integral for `t > 0`. `Above` covers `λ > σ` in
/// the variable `τ = σ sinh u`, `Below` covers `0 < λ < σ` in `|τ| = σ sin θ`;
/// both remove the `1/τ` endpoint singularity. `Full = Above - i·Below`.
/// Panels are placed so that the phase advances by at most 3 radians on each,
/// then bisected until a panel and its two halves agree.
pub fn oscillatory_quadrature(
    profile: &dyn SmoothProfile,
    sigma: f64,
    t: f64,
    sign: Sign,
    side: Side,
    opts: QuadratureOptions,
) -> Result<QuadratureResult> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveTime(t));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("σ must be positive"));
    }
    let gl = GaussLegendre::<f64>::new(opts.nodes);
    let omega = sigma * t;
    let s = sign.value();
    let i = C::new(0.0, 1.0);
    let mut reduced = C::new(0.0, 0.0);
    let mut estimate = 0.0;
    let mut panels = 0;
    // phases are measured from the stationary value ω so that rounding in
    // the common factor e^{±iω} stays out of the integrand
    if side != Side::Below {
        let u_max = (profile.reach() / sigma).asinh();
        let edges = phase_edges(omega, |k| 2.0 * (0.5 * k).sqrt().asinh(), u_max);
        let integrand = |u: f64| {
            let dev = 2.0 * (0.5 * u).sinh().powi(2);
            C::from_polar(1.0, s * omega * dev) * profile.eval(C::new(sigma * u.sinh(), 0.0))
        };
        let cond = omega * 2.0 * (0.5 * u_max).sinh().powi(2);
        let r = adaptive(&gl, &edges, &integrand, cond, opts)?;
        reduced += r.0;
        estimate += r.1;
        panels += r.2;
    }
    if side != Side::Above {
        let th_max = std::f64::consts::FRAC_PI_2.min((profile.reach() / sigma).min(1.0).asin());
        let edges = phase_edges(omega, |k| 2.0 * (0.5 * k).sqrt().min(1.0).asin(), th_max);
        let integrand = |th: f64| {
            let dev = -2.0 * (0.5 * th).sin().powi(2);
            C::from_polar(1.0, s * omega * dev) * profile.eval(i * (sigma * th.sin()))
        };
        let r = adaptive(&gl, &edges, &integrand, omega, opts)?;
        reduced += -i * r.0;
        estimate += r.1;
        panels += r.2;
    }
    if panels > opts.max_panels {
        return Err(Error::BudgetExceeded { panels, estimate });
    }
    Ok(QuadratureResult {
        value: reduced * C::from_polar(1.0, s * omega),
        reduced,
        estimate,
        panels,
    })
}

/// Panel edges where the phase `ω·φ(x)` advances by 3 radians; `inv(k)`
/// inverts `φ(x) - φ(0) = ±k`.
fn phase_edges(omega: f64, inv: impl Fn(f64) -> f64, end: f64) -> Vec<f64> {
    let mut edges = vec![0.0];
    let mut k = 1;
    loop {
        let x = inv(3.0 * k as f64 / omega);
        if !(x < end) || x.is_nan() {
            break;
        }
        // keep panels from shrinking below a useful width far from the origin
        if x - edges.last().expect("non-empty") > 1e-12 {
            edges.push(x);
        }
        k += 1;
    }
    edges.push(end);
    edges
}

fn adaptive(
    gl: &GaussLegendre<f64>,
    edges: &[f64],
    f: &(impl Fn(f64) -> C + Sync),
    cond: f64,
    opts: QuadratureOptions,
) -> Result<(C, f64, usize)> {
    let total = edges.last().expect("non-empty") - edges[0];
    // first pass fixes the scale of |I|
    let first: Vec<(C, f64)> = edges.par_windows(2).map(|w| panel(gl, w[0], w[1], f)).collect();
    let rough: C = first.iter().map(|p| p.0).sum();
    let budget = opts.tol * (1.0 + rough.norm());
    // relative rounding level of one integrand value
    let eps = 8.0 * f64::EPSILON * (1.0 + cond);
    let parts: Vec<Result<(C, f64, usize)>> = edges
        .par_windows(2)
        .zip(first.par_iter())
        .map(|(w, p)| {
            let share = (w[1] - w[0]) / total;
            refine(gl, w[0], w[1], f, budget * share, eps, p.0, 0)
        })
        .collect();
    let mut value = C::new(0.0, 0.0);
    let mut estimate = 0.0;
    let mut panels = 0;
    for p in parts {
        let (v, e, n) = p?;
        value += v;
        estimate += e;
        panels += n;
    }
    Ok((value, estimate, panels))
}

#[allow(clippy::too_many_arguments)]
fn refine(
    gl: &GaussLegendre<f64>,
    a: f64,
    b: f64,
    f: &impl Fn(f64) -> C,
    tol: f64,
    eps: f64,
    whole: C,
    depth: usize,
) -> Result<(C, f64, usize)> {
    let m = 0.5 * (a + b);
    let (left, abs_l) = panel(gl, a, m, f);
    let (right, abs_r) = panel(gl, m, b, f);
    let err = (whole - left - right).norm();
    // below eps·∫|f| the difference is rounding, not truncation
    if err <= tol.max(eps * (abs_l + abs_r)) {
        return Ok((left + right, err, 2));
    }
    if depth >= MAX_DEPTH {
        return Err(Error::BudgetExceeded {
            panels: 1 << depth,
            estimate: err,
        });
    }
    let (l, el, nl) = refine(gl, a, m, f, tol / 2.0, eps, left, depth + 1)?;
    let (r, er, nr) = refine(gl, m, b, f, tol / 2.0, eps, right, depth + 1)?;
    Ok((l + r, el + er, nl + nr))
}

const MAX_DEPTH: usize = 40;

/// Integral of `f` and of `|f|` over one panel.
fn panel(gl: &GaussLegendre<f64>, a: f64, b: f64, f: &impl Fn(f64) -> C) -> (C, f64) {
    let mut acc = C::new(0.0, 0.0);
    let mut abs = 0.0;
    for (x, w) in gl.mapped(a, b) {
        let v = f(x);
        acc += v * w;
        abs += v.norm() * w;
    }
    (acc, abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn one() -> QuarticGaussian {
        QuarticGaussian {
            poly: vec![C::new(1.0, 0.0)],
            scale: 0.3,
        }
    }

    #[test]
    fn leading_coefficient_is_the_closed_form() {
        let p = QuarticGaussian {
            poly: vec![C::new(0.7, -0.2), C::new(0.3, 0.0)],
            scale: 0.4,
        };
        let e = expand_interior(&p, 1.3, 3, Sign::Minus, TaylorMethod::Exact).unwrap();
        let expect = (2.0 * PI).sqrt() * C::from_polar(1.0, -PI / 4.0) * C::new(0.7, -0.2);
        assert_eq!(e.b[0], expect);
        // the general formula agrees with the pinned value
        let data = taylor_data(&p, 5, TaylorMethod::Exact).unwrap();
        let (p1, p2) = interior_pieces(&data.real, &data.imag, 1.3, 3, Sign::Minus);
        assert!((p1[0] + p2[0] - expect).norm() < 1e-15);
    }

    #[test]
    fn constant_amplitude_matches_hankel_expansion() {
        // For F ≡ 1 near 0 the integral is -iπH₀⁽²⁾(σt); the Hankel series gives
        // b_k = √(2π)e^{-iπ/4}c_k with c = [1, i/8, -9/128, -225i/3072].
        let real = vec![C::new(1.0, 0.0); 1]
            .into_iter()
            .chain(std::iter::repeat_n(C::new(0.0, 0.0), 7))
            .collect::<Vec<_>>();
        let b = interior_coefficients(&real, &real, 1.0, 4, Sign::Minus);
        let c = [
            C::new(1.0, 0.0),
            C::new(0.0, 1.0 / 8.0),
            C::new(-9.0 / 128.0, 0.0),
            C::new(0.0, -225.0 / 3072.0),
        ];
        let pre = (2.0 * PI).sqrt() * C::from_polar(1.0, -PI / 4.0);
        for k in 0..4 {
            assert!((b[k] - pre * c[k]).norm() < 1e-14, "k={k}: {} vs {}", b[k], pre * c[k]);
        }
        let (p1, p2) = interior_pieces(&real, &real, 1.0, 4, Sign::Minus);
        for k in 0..4 {
            assert!((p1[k] - 0.5 * pre * c[k]).norm() < 1e-14);
            assert!((p2[k] - 0.5 * pre * c[k]).norm() < 1e-14);
        }
        let (q1, q2) = interior_pieces(&real, &real, 1.0, 4, Sign::Plus);
        for k in 0..4 {
            assert!((q1[k] + q2[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn plus_sign_pieces_cancel_for_analytic_profiles() {
        let p = QuarticGaussian {
            poly: vec![C::new(1.0, 0.0), C::new(0.5, 0.1), C::new(-0.3, 0.0), C::new(0.0, 0.2)],
            scale: 0.5,
        };
        let d = taylor_data(&p, 7, TaylorMethod::Exact).unwrap();
        let (q1, q2) = interior_pieces(&d.real, &d.imag, 2.0, 4, Sign::Plus);
        for k in 0..4 {
            assert!((q1[k] + q2[k]).norm() < 1e-10 * (1.0 + q1[k].norm()));
        }
        let e = expand_interior(&p, 2.0, 4, Sign::Plus, TaylorMethod::Exact).unwrap();
        assert!(e.b.iter().all(|b| b.norm() == 0.0));
    }

    #[test]
    fn single_precision_coefficients() {
        let real = vec![
            Complex::<f32>::new(1.0, 0.0),
            Complex::new(0.0, 0.0),
            Complex::new(0.0, 0.0),
        ];
        let b = interior_coefficients(&real, &real, 1.0f32, 2, Sign::Minus);
        let pre = (2.0 * std::f32::consts::PI).sqrt() * Complex::from_polar(1.0f32, -std::f32::consts::FRAC_PI_4);
        assert!((b[1] - pre * Complex::new(0.0, 0.125)).norm() < 1e-5);
    }

    #[test]
    fn boundary_leading_terms() {
        let p = one();
        let sigma = 1.7;
        for sign in [Sign::Minus, Sign::Plus] {
            let above = expand_boundary(&p, sigma, 2, sign, Side::Above, TaylorMethod::Exact).unwrap();
            let below = expand_boundary(&p, sigma, 2, sign, Side::Below, TaylorMethod::Exact).unwrap();
            let a0 = (PI / (2.0 * sigma)).sqrt() * C::from_polar(1.0, sign.value() * PI / 4.0);
            assert!((above.a[0] - a0).norm() < 1e-14);
            let expect_below = if sign == Sign::Minus { a0 } else { -a0 };
            assert!((below.a[0] - expect_below).norm() < 1e-14, "{sign:?}");
        }
        let interior = expand_interior(&p, sigma, 1, Sign::Minus, TaylorMethod::Exact).unwrap();
        let above = expand_boundary(&p, sigma, 1, Sign::Minus, Side::Above, TaylorMethod::Exact).unwrap();
        assert!((above.a[0] - 0.5 * interior.b[0] / sigma.sqrt()).norm() < 1e-14);
    }

    #[test]
    fn zero_profile_gives_zero() {
        let z = QuarticGaussian {
            poly: vec![],
            scale: 1.0,
        };
        let l = expand_boundary(&z, 1.0, 3, Sign::Minus, Side::Above, TaylorMethod::Exact).unwrap();
        assert!(l.a.iter().all(|a| a.norm() == 0.0));
        let q = oscillatory_quadrature(&z, 1.0, 50.0, Sign::Minus, Side::Full, QuadratureOptions::default()).unwrap();
        assert_eq!(q.value, C::new(0.0, 0.0));
    }

    #[test]
    fn finite_difference_and_cauchy_agree_with_exact() {
        let p = QuarticGaussian {
            poly: vec![C::new(1.0, 0.0), C::new(0.4, 0.0), C::new(0.0, -0.7)],
            scale: 0.8,
        };
        let exact = taylor_data(&p, 7, TaylorMethod::Exact).unwrap();
        let fd = taylor_data(&p, 7, TaylorMethod::FiniteDifference { radius: 0.2 }).unwrap();
        let cauchy = taylor_data(
            &p,
            7,
            TaylorMethod::Cauchy {
                radius: 0.3,
                points: 64,
            },
        )
        .unwrap();
        for n in 0..7 {
            let tol = 1e-6 * 0.2f64.powi(-(n as i32));
            assert!((fd.real[n] - exact.real[n]).norm() < tol, "fd real {n}");
            assert!((fd.imag[n] - exact.imag[n]).norm() < tol, "fd imag {n}");
            assert!((cauchy.real[n] - exact.real[n]).norm() < 1e-11, "cauchy {n}");
            assert!((cauchy.imag[n] - exact.imag[n]).norm() < 1e-11);
        }
    }

    #[test]
    fn noisy_profile_fails_the_halving_check() {
        let p = FnProfile {
            f: |t: C| C::new(1.0 + 1e-6 * (t.re * 1e7).sin(), 0.0),
            reach: 1.0,
        };
        assert!(matches!(
            taylor_data(&p, 5, TaylorMethod::FiniteDifference { radius: 0.2 }),
            Err(Error::DerivativeInstability { .. })
        ));
    }

    #[test]
    fn quadrature_refines_consistently() {
        let p = QuarticGaussian {
            poly: vec![C::new(1.0, 0.0), C::new(0.2, 0.0)],
            scale: 0.5,
        };
        let a = oscillatory_quadrature(&p, 1.0, 300.0, Sign::Minus, Side::Full, QuadratureOptions::default()).unwrap();
        let b = oscillatory_quadrature(
            &p,
            1.0,
            300.0,
            Sign::Minus,
            Side::Full,
            QuadratureOptions {
                tol: 5e-11,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((a.value - b.value).norm() <= 1e-9);
        assert!(matches!(
            oscillatory_quadrature(&p, 1.0, -1.0, Sign::Minus, Side::Full, QuadratureOptions::default()),
            Err(Error::NonPositiveTime(_))
        ));
    }

    #[test]
    fn sigma_scaling_structure() {
        // b_k(F, σ) equals b_k(F(σ·), 1)
        let p = QuarticGaussian {
            poly: vec![C::new(1.0, 0.0), C::new(0.3, 0.1), C::new(0.2, 0.0)],
            scale: 0.6,
        };
        let sigma = 2.5;
        let scaled = FnProfile {
            f: |t: C| p.eval(t * sigma),
            reach: p.reach() / sigma,
        };
        let a = expand_interior(
            &p,
            sigma,
            3,
            Sign::Minus,
            TaylorMethod::FiniteDifference { radius: 0.1 },
        )
        .unwrap();
        let b = expand_interior(
            &scaled,
            1.0,
            3,
            Sign::Minus,
            TaylorMethod::FiniteDifference { radius: 0.1 / sigma },
        )
        .unwrap();
        for k in 0..3 {
            assert!((a.b[k] - b.b[k]).norm() < 1e-8 * (1.0 + a.b[k].norm()));
        }
    }
}
