//! Truncated power series with complex coefficients.

use num_complex::Complex;

use crate::Scalar;

/// `Σ_{n < len} c_n x^n`, truncated at a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSeries<T> {
    pub coeffs: Vec<Complex<T>>,
}

impl<T: Scalar> PowerSeries<T> {
    pub fn zero(len: usize) -> Self {
        Self {
            coeffs: vec![Complex::new(T::zero(), T::zero()); len],
        }
    }

    pub fn constant(c: Complex<T>, len: usize) -> Self {
        let mut s = Self::zero(len);
        s.coeffs[0] = c;
        s
    }

    /// The identity series `x`.
    pub fn variable(len: usize) -> Self {
        let mut s = Self::zero(len);
        if len > 1 {
            s.coeffs[1] = Complex::new(T::one(), T::zero());
        }
        s
    }

    pub fn from_real(coeffs: &[T], len: usize) -> Self {
        let mut s = Self::zero(len);
        for (dst, src) in s.coeffs.iter_mut().zip(coeffs) {
            *dst = Complex::new(*src, T::zero());
        }
        s
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a += *b;
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a -= *b;
        }
        out
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| *c * s).collect(),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.len().min(other.len());
        let mut out = Self::zero(n);
        for i in 0..n {
            if self.coeffs[i] == Complex::new(T::zero(), T::zero()) {
                continue;
            }
            for j in 0..(n - i) {
                out.coeffs[i + j] += self.coeffs[i] * other.coeffs[j];
            }
        }
        out
    }

    pub fn powi(&self, k: usize) -> Self {
        let mut out = Self::constant(Complex::new(T::one(), T::zero()), self.len());
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// `self(inner(x))`; `inner` must vanish at the origin.
    pub fn compose(&self, inner: &Self) -> Self {
        debug_assert!(inner.coeffs[0].norm() == T::zero());
        let n = self.len().min(inner.len());
        let mut out = Self::zero(n);
        for c in self.coeffs[..n].iter().rev() {
            out = out.mul(inner);
            out.coeffs[0] += *c;
        }
        out
    }

    /// `(1 + u)^alpha` for a series `u` vanishing at the origin.
    pub fn binomial(u: &Self, alpha: T) -> Self {
        let n = u.len();
        let mut coeffs = Vec::with_capacity(n);
        let mut c = T::one();
        for k in 0..n {
            coeffs.push(c);
            let kf = T::from_usize_lossy(k);
            c = c * (alpha - kf) / (kf + T::one());
        }
        PowerSeries::from_real(&coeffs, n).compose(u)
    }

    /// Even part `(f(x) + f(-x)) / 2`.
    pub fn even_part(&self) -> Self {
        let mut out = self.clone();
        for (n, c) in out.coeffs.iter_mut().enumerate() {
            if n % 2 == 1 {
                *c = Complex::new(T::zero(), T::zero());
            }
        }
        out
    }

    /// Rescales the variable: `f(s x)`.
    pub fn rescale(&self, s: Complex<T>) -> Self {
        let mut p = Complex::new(T::one(), T::zero());
        let coeffs = self
            .coeffs
            .iter()
            .map(|c| {
                let v = *c * p;
                p *= s;
                v
            })
            .collect();
        Self { coeffs }
    }

    /// `n!·c_n`, the n-th derivative at the origin.
    pub fn derivative_at_zero(&self, n: usize) -> Complex<T> {
        let mut f = T::one();
        for k in 2..=n {
            f *= T::from_usize_lossy(k);
        }
        self.coeffs[n] * f
    }

    pub fn eval(&self, x: Complex<T>) -> Complex<T> {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex::new(T::zero(), T::zero()), |acc, c| acc * x + *c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type C = Complex<f64>;

    #[test]
    fn binomial_matches_sqrt() {
        // sqrt(1 + x^2) = 1 + x^2/2 - x^4/8 + x^6/16 - 5x^8/128
        let x = PowerSeries::<f64>::variable(10);
        let s = PowerSeries::binomial(&x.mul(&x), 0.5);
        let expect = [1.0, 0.0, 0.5, 0.0, -0.125, 0.0, 0.0625, 0.0, -5.0 / 128.0, 0.0];
        for (c, e) in s.coeffs.iter().zip(expect) {
            assert!((c - C::new(e, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn composition_of_exponential_series() {
        // exp(x) composed with 2x equals exp(2x)
        let n = 12;
        let mut fact = 1.0;
        let mut e = Vec::new();
        for k in 0..n {
            if k > 0 {
                fact *= k as f64;
            }
            e.push(1.0 / fact);
        }
        let exp = PowerSeries::<f64>::from_real(&e, n);
        let two_x = PowerSeries::variable(n).scale(C::new(2.0, 0.0));
        let comp = exp.compose(&two_x);
        for (a, b) in comp.coeffs.iter().zip(&exp.rescale(C::new(2.0, 0.0)).coeffs) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!((comp.eval(C::new(0.1, 0.0)) - C::new(0.2f64.exp(), 0.0)).norm() < 1e-14);
    }
}
