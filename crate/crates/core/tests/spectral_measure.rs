use cylwave::cross_section::{spectrum, CrossSection, YPoint};
use cylwave::halfline_scattering::{tune_resonant_depth, BoundaryCondition, Potential, Waveguide};
use cylwave::mode_decomposition::Cutoff;
use cylwave::spectral_measure::*;

fn guide(potential: Potential, bc: BoundaryCondition) -> Waveguide {
    let cs = CrossSection::Circle {
        circumference: 2.0 * std::f64::consts::PI,
    };
    Waveguide::new(potential, bc, spectrum(&cs, 3.0).unwrap())
}

fn points() -> Vec<ObsPoint> {
    [(0.25, 0.0), (0.5, 1.0), (1.5, 2.5), (2.0, 0.3), (2.75, 4.0)]
        .iter()
        .map(|&(r, y)| ObsPoint::new(r, YPoint::circle(0, y)))
        .collect()
}

#[test]
fn finite_difference_defect_is_second_order() {
    let chi = Cutoff::for_support(1.0);
    for bc in [BoundaryCondition::Neumann, BoundaryCondition::Dirichlet] {
        let wg = guide(
            Potential::SquareWell {
                depth: 1.0,
                radius: 1.0,
            },
            bc,
        );
        for lambda in [0.5, 1.5, 2.5] {
            let coarse =
                verify_stone_identity(&wg, lambda, &points(), chi, Route::FiniteDifference { h: 1.0 / 4000.0 })
                    .unwrap();
            let fine = verify_stone_identity(&wg, lambda, &points(), chi, Route::FiniteDifference { h: 1.0 / 8000.0 })
                .unwrap();
            let ratio = coarse.defect / fine.defect;
            println!(
                "{bc:?} λ={lambda}: defect {:.3e} -> {:.3e}, ratio {ratio:.3}",
                coarse.defect, fine.defect
            );
            assert!((3.5..=4.5).contains(&ratio), "{bc:?} λ={lambda}: ratio {ratio}");
        }
    }
}

#[test]
fn tuned_well_laurent_coefficient() {
    let depth = tune_resonant_depth(BoundaryCondition::Dirichlet, 1.0, 1.0, 4.0).unwrap();
    let wg = guide(
        Potential::SquareWell { depth, radius: 1.0 },
        BoundaryCondition::Dirichlet,
    );
    let l = threshold_laurent(&wg, 1, &points(), Cutoff::for_support(1.0), 0.05, 7).unwrap();
    println!("coefficient error {:.3e}", l.coefficient_error);
    assert!(l.expected.iter().any(|z| z.norm() > 0.1));
    assert!(l.coefficient_error <= 1e-4);
}

#[test]
fn defect_table_has_one_line_per_sample() {
    let wg = guide(Potential::Zero, BoundaryCondition::Neumann);
    let samples: Vec<MeasureSample> = [0.5, 1.5, 2.5]
        .iter()
        .map(|&l| verify_stone_identity(&wg, l, &points(), Cutoff::for_support(1.0), Route::Continuum).unwrap())
        .collect();
    let csv = defect_table(&samples);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(2).unwrap().starts_with("1.5,"));
}
