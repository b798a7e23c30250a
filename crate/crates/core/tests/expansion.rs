use std::f64::consts::PI;

use cylwave::cross_section::{spectrum, CrossSection};
use cylwave::decay_fit::{fit_power_law, log_spaced, DecaySeries};
use cylwave::expansion_assembly::*;
use cylwave::halfline_scattering::{BoundaryCondition, Potential, Waveguide};
use cylwave::mode_decomposition::{CylinderField, RadialGrid, RadialProfile, RadialShape};
use cylwave::wave_evolution::{PropagatorOptions, SpectralPropagator};

fn bump(grid: RadialGrid, center: f64, half_width: f64) -> RadialProfile {
    let s = RadialShape::SmoothBump { center, half_width };
    RadialProfile::from_fn(grid, s.support(), |r| s.value(r)).unwrap()
}

#[test]
fn square_well_remainder_steepens_with_order() {
    let cs = CrossSection::Circle {
        circumference: 2.0 * PI,
    };
    let wg = Waveguide::new(
        Potential::SquareWell {
            depth: 1.0,
            radius: 1.0,
        },
        BoundaryCondition::Neumann,
        spectrum(&cs, 1.5).unwrap(),
    );
    let grid = RadialGrid::new(0.002, 6.0).unwrap();
    let mut f1 = CylinderField::new(wg.spectrum.clone(), grid);
    let mut f2 = f1.clone();
    f1.insert(1, bump(grid, 2.0, 1.0)).unwrap();
    f2.insert(1, bump(grid, 1.5, 1.0)).unwrap();
    let radii: Vec<f64> = (0..=12).map(|i| 0.25 * i as f64).collect();
    let times = log_spaced(1e2, 1e3, 20);
    let ue = build_u_e(&wg, &f1, &f2, &radii, None).unwrap();
    let hl = wg.channel(1);
    let prop = SpectralPropagator::new(
        &hl,
        f1.mode(1).unwrap(),
        f2.mode(1).unwrap(),
        &radii,
        None,
        PropagatorOptions {
            t_max: 1e3,
            ..Default::default()
        },
    )
    .unwrap();
    let sim: Vec<Vec<f64>> = times.iter().map(|&t| prop.evaluate(t).unwrap()).collect();
    let mut slopes = Vec::new();
    for k0 in 1..=4 {
        let mut series = build_u_thr_k0(&wg, &f1, &f2, &radii, k0, None, TaylorOptions::default()).unwrap();
        series.extend(ue.clone()).unwrap();
        let rem: Vec<f64> = times
            .iter()
            .zip(&sim)
            .map(|(&t, u)| {
                let e = series.evaluate_mode(1, t).unwrap();
                u.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let ds = DecaySeries::new(times.clone(), rem.clone()).unwrap();
        let fit = fit_power_law(&ds, (1e2, 1e3)).unwrap();
        println!(
            "k0={k0}: slope {:.3} rem(1e3)={:.3e} imag {:.1e}",
            fit.slope,
            rem.last().unwrap(),
            series.imag_residual
        );
        slopes.push(fit.slope);
    }
    assert!(slopes[0] <= -1.0 + 0.1);
    assert!(slopes[1] <= -2.0 + 0.15);
    for w in slopes.windows(2) {
        let step = w[0] - w[1];
        assert!((step - 1.0).abs() <= 0.15, "steepening {step}");
    }
}

#[test]
fn dirichlet_displacement_coefficient_sign() {
    // the f₁ part of the t^{-3/2} term, checked against the propagator
    let cs = CrossSection::Circle {
        circumference: 2.0 * PI,
    };
    let wg = Waveguide::new(
        Potential::Zero,
        BoundaryCondition::Dirichlet,
        spectrum(&cs, 1.5).unwrap(),
    );
    let grid = RadialGrid::new(0.002, 6.0).unwrap();
    let a = bump(grid, 2.0, 1.0);
    let zero = RadialProfile::zero(grid);
    let radii = [0.5, 1.0, 1.5];
    let hc = half_cylinder_coefficients(BoundaryCondition::Dirichlet, 1.0, &a, &zero, &radii).unwrap();
    let hl = wg.channel(1);
    let prop = SpectralPropagator::new(
        &hl,
        &a,
        &zero,
        &radii,
        None,
        PropagatorOptions {
            t_max: 1e3,
            ..Default::default()
        },
    )
    .unwrap();
    let times = log_spaced(1e2, 1e3, 20);
    let slope = |flip: f64| {
        let rem: Vec<f64> = times
            .iter()
            .map(|&t| {
                let u = prop.evaluate(t).unwrap();
                let s = (t + PI / 4.0).sin() * t.powf(-1.5);
                u.iter()
                    .zip(&hc.q)
                    .map(|(u, q)| (u - flip * q * s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        fit_power_law(&DecaySeries::new(times.clone(), rem).unwrap(), (1e2, 1e3))
            .unwrap()
            .slope
    };
    let ours = slope(1.0);
    let flipped = slope(-1.0);
    println!("remainder slope {ours:.3}, with the opposite sign {flipped:.3}");
    assert!(ours <= -2.5 + 0.1);
    assert!(flipped > -1.6);
}
