//! Quadrature and interpolation rules shared by the solvers.

use crate::Scalar;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> GaussLegendre<T> {
    /// Nodes by Newton iteration on the three-term recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss–Legendre needs at least one node");
        let mut nodes = vec![T::zero(); n];
        let mut weights = vec![T::zero(); n];
        let nf = T::from_usize_lossy(n);
        let half = T::lit(0.5);
        for i in 0..n.div_ceil(2) {
            let guess = (T::PI() * (T::from_usize_lossy(i) + T::lit(0.75)) / (nf + half)).cos();
            let mut x = guess;
            let mut dp = T::one();
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= T::epsilon() * T::lit(4.0) {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != T::zero() {
                dp = d;
            }
            let w = T::lit(2.0) / ((T::one() - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = T::zero();
        }
        Self { nodes, weights }
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<V, F>(&self, a: T, b: T, mut f: F) -> V
    where
        F: FnMut(T) -> V,
        V: std::ops::Add<Output = V> + std::ops::Mul<T, Output = V> + num_traits::Zero,
    {
        let half = (b - a) * T::lit(0.5);
        let mid = (b + a) * T::lit(0.5);
        let mut acc = V::zero();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc = acc + f(mid + half * *x) * (*w * half);
        }
        acc
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: T, b: T) -> impl Iterator<Item = (T, T)> + '_ {
        let half = (b - a) * T::lit(0.5);
        let mid = (b + a) * T::lit(0.5);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * *x, *w * half))
    }
}

fn legendre_with_derivative<T: Scalar>(n: usize, x: T) -> (T, T) {
    let mut p0 = T::one();
    let mut p1 = x;
    if n == 0 {
        return (p0, T::zero());
    }
    for k in 2..=n {
        let kf = T::from_usize_lossy(k);
        let p2 = ((T::lit(2.0) * kf - T::one()) * x * p1 - (kf - T::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = T::from_usize_lossy(n);
    let d = nf * (x * p1 - p0) / (x * x - T::one());
    (p1, d)
}

/// Magnitudes of the Gregory end-correction coefficients, k = 1, 2, ...
const GREGORY: [(f64, f64); 8] = [
    (1.0, 12.0),
    (1.0, 24.0),
    (19.0, 720.0),
    (3.0, 160.0),
    (863.0, 60480.0),
    (275.0, 24192.0),
    (33953.0, 3628800.0),
    (8183.0, 1036800.0),
];

/// Default number of Gregory correction terms used on sampled data.
pub const GREGORY_ORDER: usize = 6;

/// Weights of the composite Gregory rule on `n` equispaced samples with unit
/// spacing: trapezoid plus `order` end corrections. Falls back to lower
/// orders when `n` is too small.
pub fn gregory_weights<T: Scalar>(n: usize, order: usize) -> Vec<T> {
    assert!(n >= 1);
    if n == 1 {
        return vec![T::zero()];
    }
    let p = order.min(GREGORY.len()).min((n - 1) / 2);
    let mut w = vec![T::one(); n];
    w[0] = T::lit(0.5);
    w[n - 1] = T::lit(0.5);
    for (k, &(num, den)) in GREGORY.iter().enumerate().take(p) {
        let k = k + 1;
        let g = T::lit(num / den);
        let mut binom = T::one();
        for i in 0..=k {
            let sign = if i % 2 == 0 { T::one() } else { -T::one() };
            let c = g * sign * binom;
            w[i] -= c;
            w[n - 1 - i] -= c;
            binom = binom * T::from_usize_lossy(k - i) / T::from_usize_lossy(i + 1);
        }
    }
    w
}

/// Integral of equispaced samples with spacing `h` using the Gregory rule.
pub fn integrate_samples<T: Scalar>(h: T, values: &[T]) -> T {
    if values.len() < 2 {
        return T::zero();
    }
    let w = gregory_weights::<T>(values.len(), GREGORY_ORDER);
    values.iter().zip(&w).fold(T::zero(), |acc, (v, w)| acc + *v * *w) * h
}

/// Chebyshev points of the second kind on `[a, b]`, ordered from `a` to `b`.
pub fn chebyshev_points<T: Scalar>(n: usize, a: T, b: T) -> Vec<T> {
    assert!(n >= 2);
    let half = (b - a) * T::lit(0.5);
    let mid = (b + a) * T::lit(0.5);
    let last = T::from_usize_lossy(n - 1);
    (0..n)
        .map(|k| {
            let theta = T::PI() * T::from_usize_lossy(n - 1 - k) / last;
            if k == 0 {
                a
            } else if k == n - 1 {
                b
            } else {
                mid + half * theta.cos()
            }
        })
        .collect()
}

/// Barycentric interpolation on Chebyshev points of the second kind.
#[derive(Clone, Debug)]
pub struct ChebyshevPanel<T> {
    pub a: T,
    pub b: T,
    pub nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Scalar> ChebyshevPanel<T> {
    pub fn new(n: usize, a: T, b: T) -> Self {
        let nodes = chebyshev_points(n, a, b);
        let weights = (0..n)
            .map(|k| {
                let s = if k % 2 == 0 { T::one() } else { -T::one() };
                if k == 0 || k == n - 1 {
                    s * T::lit(0.5)
                } else {
                    s
                }
            })
            .collect();
        Self { a, b, nodes, weights }
    }

    /// Lagrange basis values `l_k(x)`; the interpolant is `Σ l_k(x) v_k`.
    pub fn basis(&self, x: T, out: &mut Vec<T>) {
        out.clear();
        if let Some(k) = self.nodes.iter().position(|&xk| xk == x) {
            out.extend((0..self.nodes.len()).map(|i| if i == k { T::one() } else { T::zero() }));
            return;
        }
        let mut denom = T::zero();
        for (xk, wk) in self.nodes.iter().zip(&self.weights) {
            let c = *wk / (x - *xk);
            out.push(c);
            denom += c;
        }
        for c in out.iter_mut() {
            *c /= denom;
        }
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.a && x <= self.b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 12, 20] {
            let rule = GaussLegendre::<f64>::new(n);
            for d in 0..(2 * n) {
                let exact = if d % 2 == 0 { 2.0 / (d as f64 + 1.0) } else { 0.0 };
                let got: f64 = rule.integrate(-1.0, 1.0, |x| x.powi(d as i32));
                assert!((got - exact).abs() < 1e-13, "n={n} d={d} got={got}");
            }
        }
    }

    #[test]
    fn gauss_legendre_single_precision() {
        let rule = GaussLegendre::<f32>::new(8);
        let got: f32 = rule.integrate(0.0, std::f32::consts::PI, |x| x.sin());
        assert!((got - 2.0).abs() < 1e-5);
    }

    #[test]
    fn gregory_rule_is_high_order() {
        for d in 0..=6 {
            let n = 40;
            let h = 1.0 / (n as f64 - 1.0);
            let vals: Vec<f64> = (0..n).map(|i| (i as f64 * h).powi(d)).collect();
            let got = integrate_samples(h, &vals);
            assert!((got - 1.0 / (d as f64 + 1.0)).abs() < 1e-13, "degree {d}: {got}");
        }
        // convergence on a transcendental integrand
        let err = |n: usize| {
            let h = 2.0 / (n as f64 - 1.0);
            let vals: Vec<f64> = (0..n).map(|i| (i as f64 * h).exp()).collect();
            (integrate_samples(h, &vals) - (2f64.exp() - 1.0)).abs()
        };
        assert!(err(101) < 1e-12);
        assert!(err(51) / err(101) > 60.0);
    }

    #[test]
    fn chebyshev_interpolation_is_spectral() {
        let panel = ChebyshevPanel::<f64>::new(24, 0.0, 0.5);
        let vals: Vec<f64> = panel.nodes.iter().map(|x| (15.0 * x).cos()).collect();
        let mut basis = Vec::new();
        for i in 0..50 {
            let x = 0.5 * i as f64 / 49.0;
            panel.basis(x, &mut basis);
            let v: f64 = basis.iter().zip(&vals).map(|(b, v)| b * v).sum();
            assert!((v - (15.0 * x).cos()).abs() < 1e-13);
        }
    }
}
