//! Power-law fits, envelopes, demodulation and spectral peaks for time traces.

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Positive samples `values[i]` at strictly increasing `times[i]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecaySeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl DecaySeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::invalid("times and values differ in length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at t = {}", times[i])));
        }
        Ok(Self { times, values })
    }

    pub fn from_fn(times: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `per_decade` log-spaced times per factor of ten, covering `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = ((decades * per_decade as f64).round() as usize).max(1);
    (0..=n).map(|k| lo * (hi / lo).powf(k as f64 / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub slope: f64,
    /// 95% confidence interval of the slope.
    pub slope_ci: (f64, f64),
    pub intercept: f64,
    /// Smallest `C` with `value ≤ C·t^slope` on the window.
    pub constant: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    pub window: (f64, f64),
    pub points: usize,
    /// Residuals alternate in sign more than a smooth misfit would.
    pub oscillation: bool,
}

pub const MIN_FIT_POINTS: usize = 10;

/// Least-squares slope of `log value` against `log t` on `[lo, hi]`.
pub fn fit_power_law(ds: &DecaySeries, window: (f64, f64)) -> Result<FitReport> {
    let (lo, hi) = window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in ds.times.iter().zip(&ds.values) {
        if t < lo || t > hi {
            continue;
        }
        if !(v > 0.0) {
            return Err(Error::NonPositive { t, value: v });
        }
        xs.push(t.ln());
        ys.push(v.ln());
    }
    let n = xs.len();
    if n < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FIT_POINTS,
            found: n,
        });
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let res: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - intercept - slope * x).collect();
    let sse: f64 = res.iter().map(|r| r * r).sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let q = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| Error::invalid(e.to_string()))?
        .inverse_cdf(0.975);
    let constant = res.iter().fold(f64::NEG_INFINITY, |m, r| m.max(*r)).exp() * intercept.exp();
    let sign_changes = res.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    let rms = (sse / nf).sqrt();
    Ok(FitReport {
        slope,
        slope_ci: (slope - q * se, slope + q * se),
        intercept,
        constant,
        residual: rms,
        window,
        points: n,
        oscillation: rms > 1e-3 && sign_changes * 4 > n,
    })
}

/// Sliding maximum of `|values|` over a trailing window of length `period`,
/// sampled at `at`. `times` must be increasing.
pub fn envelope(times: &[f64], values: &[f64], period: f64, at: &[f64]) -> Result<DecaySeries> {
    let mut out = Vec::with_capacity(at.len());
    for &t in at {
        let a = times.partition_point(|&s| s < t - period);
        let b = times.partition_point(|&s| s <= t);
        if b <= a {
            return Err(Error::TooFewPoints { needed: 1, found: 0 });
        }
        out.push(values[a..b].iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    DecaySeries::new(at.to_vec(), out)
}

/// In-phase and quadrature amplitudes relative to `cos(ωt + π/4)` and
/// `sin(ωt + π/4)`, after multiplying the trace by `t^weight`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Demodulation {
    pub omega: f64,
    pub weight: f64,
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Demodulation {
    pub fn amplitude(&self) -> Vec<f64> {
        self.p.iter().zip(&self.q).map(|(p, q)| p.hypot(*q)).collect()
    }

    /// `φ` with trace `≈ amplitude·cos(ωt + φ)·t^{-weight}`.
    pub fn phase(&self) -> Vec<f64> {
        self.p
            .iter()
            .zip(&self.q)
            .map(|(p, q)| std::f64::consts::FRAC_PI_4 + (-q).atan2(*p))
            .collect()
    }
}

/// Kaiser shape parameter placing the first null two bins out.
const KAISER_BETA: f64 = 5.441_398_092_702_653;

fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn kaiser(x: f64) -> f64 {
    // x in [-1, 1]
    bessel_i0(KAISER_BETA * (1.0 - x * x).max(0.0).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Weighted least-squares fit of `p cos(ωt+π/4) + q sin(ωt+π/4)` to
/// `t^weight·trace` on windows of length `window` centred at `centers`. The
/// Kaiser taper keeps leakage from tones more than `4π/window` away below 1%.
pub fn demodulate(
    times: &[f64],
    values: &[f64],
    omega: f64,
    weight: f64,
    window: f64,
    centers: &[f64],
) -> Result<Demodulation> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::invalid("trace needs at least two samples"));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt) {
        return Err(Error::invalid("demodulation needs uniform sampling"));
    }
    if omega * dt >= std::f64::consts::PI {
        return Err(Error::Aliasing { dt, omega });
    }
    let phase0 = std::f64::consts::FRAC_PI_4;
    let mut p = Vec::with_capacity(centers.len());
    let mut q = Vec::with_capacity(centers.len());
    for &tc in centers {
        let a = times.partition_point(|&s| s < tc - 0.5 * window);
        let b = times.partition_point(|&s| s <= tc + 0.5 * window);
        if b < a + 8 {
            return Err(Error::TooFewPoints {
                needed: 8,
                found: b.saturating_sub(a),
            });
        }
        let (mut cc, mut cs, mut ss, mut xc, mut xs) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in a..b {
            let t = times[i];
            let w = kaiser(2.0 * (t - tc) / window);
            let (s, c) = (omega * t + phase0).sin_cos();
            let x = values[i] * t.powf(weight);
            cc += w * c * c;
            cs += w * c * s;
            ss += w * s * s;
            xc += w * x * c;
            xs += w * x * s;
        }
        let det = cc * ss - cs * cs;
        p.push((xc * ss - xs * cs) / det);
        q.push((xs * cc - xc * cs) / det);
    }
    Ok(Demodulation {
        omega,
        weight,
        times: centers.to_vec(),
        p,
        q,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpectralPeak {
    pub omega: f64,
    pub bin_width: f64,
    pub magnitude: f64,
}

/// Largest peak of the Hann-windowed DFT of a uniformly sampled trace with
/// `ω ≥ min_omega`, refined by a parabola through the log magnitudes.
pub fn spectral_peak(values: &[f64], dt: f64, min_omega: f64) -> Result<SpectralPeak> {
    let n = values.len();
    if n < 16 {
        return Err(Error::TooFewPoints { needed: 16, found: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bin_width = 2.0 * std::f64::consts::PI / (n as f64 * dt);
    let first = ((min_omega / bin_width).ceil() as usize).max(1);
    let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let k = (first..n / 2)
        .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
        .ok_or(Error::TooFewPoints {
            needed: first + 1,
            found: n / 2,
        })?;
    let mut offset = 0.0;
    if k > 0 && k + 1 < mags.len() {
        let (a, b, c) = (mags[k - 1].ln(), mags[k].ln(), mags[k + 1].ln());
        let den = a - 2.0 * b + c;
        if den.abs() > 0.0 {
            offset = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
        }
    }
    Ok(SpectralPeak {
        omega: (k as f64 + offset) * bin_width,
        bin_width,
        magnitude: mags[k],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    #[test]
    fn exact_power_law() {
        let ds = DecaySeries::from_fn(log_spaced(1e2, 1e4, 40), |t| 3.0 / t).unwrap();
        let f = fit_power_law(&ds, (1e2, 1e4)).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-6);
        assert!((f.constant - 3.0).abs() < 1e-6);
        assert!(!f.oscillation);
        let scaled = DecaySeries::from_fn(ds.times.clone(), |t| 7.0 * 3.0 / t).unwrap();
        let g = fit_power_law(&scaled, (1e2, 1e4)).unwrap();
        assert!((f.slope - g.slope).abs() < 1e-12);
        assert!((g.intercept - f.intercept - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn oscillating_power_law() {
        let ds = DecaySeries::from_fn(log_spaced(1e2, 1e4, 40), |t| t.powf(-0.5) * (1.0 + 0.1 * t.sin())).unwrap();
        let f = fit_power_law(&ds, (1e2, 1e4)).unwrap();
        assert!((f.slope + 0.5).abs() < 0.02);
        assert!(f.oscillation);
    }

    #[test]
    fn fit_rejects_bad_windows() {
        let ds = DecaySeries::from_fn(log_spaced(1.0, 10.0, 40), |t| 1.0 - t / 5.0).unwrap();
        assert!(matches!(
            fit_power_law(&ds, (1.0, 10.0)),
            Err(Error::NonPositive { .. })
        ));
        assert!(matches!(
            fit_power_law(&ds, (1.0, 1.1)),
            Err(Error::TooFewPoints { .. })
        ));
        assert!(DecaySeries::new(vec![1.0, 1.0], vec![1.0, 2.0]).is_err());
    }

    fn uniform(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
        let n = ((t1 - t0) / dt).round() as usize;
        (0..=n).map(|i| t0 + i as f64 * dt).collect()
    }

    #[test]
    fn demodulates_a_decaying_tone() {
        let ts = uniform(100.0, 2100.0, 0.05);
        let xs: Vec<f64> = ts.iter().map(|t| 0.7 * (t + FRAC_PI_4).cos() / t.sqrt()).collect();
        let centers = [200.0, 500.0, 1000.0, 2000.0];
        let d = demodulate(&ts, &xs, 1.0, 0.5, 40.0 * PI, &centers).unwrap();
        for ((p, q), ph) in d.p.iter().zip(&d.q).zip(d.phase()) {
            assert!((p - 0.7).abs() < 0.7e-3, "{p}");
            assert!(q.abs() < 1e-3);
            assert!((ph - FRAC_PI_4).abs() < 1e-3);
        }
        assert!(matches!(
            demodulate(&ts, &xs, 70.0, 0.5, 40.0 * PI, &centers),
            Err(Error::Aliasing { .. })
        ));
    }

    #[test]
    fn separates_two_tones() {
        let ts = uniform(0.0, 400.0, 0.05);
        let xs: Vec<f64> = ts
            .iter()
            .map(|t| 1.3 * (t + FRAC_PI_4).cos() + 0.6 * (2.0 * t + 0.3).sin())
            .collect();
        let w = 20.0 * 2.0 * PI;
        let a = demodulate(&ts, &xs, 1.0, 0.0, w, &[200.0]).unwrap();
        assert!((a.amplitude()[0] - 1.3).abs() < 0.013);
        let b = demodulate(&ts, &xs, 2.0, 0.0, w, &[200.0]).unwrap();
        assert!((b.amplitude()[0] - 0.6).abs() < 0.006);
    }

    #[test]
    fn off_frequency_leakage_is_small() {
        let ts = uniform(0.0, 300.0, 0.05);
        let w = 40.0;
        for k in 0..40 {
            let off = 1.0 + 4.0 * PI / w * (1.0 + 0.1 * k as f64);
            let xs: Vec<f64> = ts.iter().map(|t| (off * t).cos()).collect();
            let d = demodulate(&ts, &xs, 1.0, 0.0, w, &[150.0]).unwrap();
            assert!(d.amplitude()[0] <= 0.02, "offset {off}: {}", d.amplitude()[0]);
        }
    }

    #[test]
    fn finds_a_spectral_line() {
        let dt = 0.1;
        let xs: Vec<f64> = (0..8192)
            .map(|i| (0.77 * i as f64 * dt).cos() + 0.3 * (2.1 * i as f64 * dt).sin())
            .collect();
        let p = spectral_peak(&xs, dt, 0.05).unwrap();
        assert!((p.omega - 0.77).abs() < p.bin_width);
    }

    #[test]
    fn envelope_tracks_the_maximum() {
        let ts = uniform(1.0, 200.0, 0.01);
        let xs: Vec<f64> = ts.iter().map(|t| t.sin() / t).collect();
        let at = log_spaced(10.0, 200.0, 20);
        let e = envelope(&ts, &xs, 2.0 * PI, &at).unwrap();
        for (t, v) in e.times.iter().zip(&e.values) {
            assert!(*v <= 1.0 / (t - 2.0 * PI) && *v >= 0.99 / t);
        }
    }
}
