use clusterhom::closedform::{electric_cm_slope, ElectricPhases};
use clusterhom::cluster::{delta_k, delta_k_forms, ConfigurationSolver, Formula, Setup};
use clusterhom::geometry::BoxSpec;
use clusterhom::media::{GridSpec, Phases};
use clusterhom::process::{attach_marks, PointSample};
use clusterhom::setcalc::k_tuples_within;
use clusterhom::solver::axis_xi;

fn setup(side: f64, t: f64) -> Setup {
    let grid = GridSpec::new(BoxSpec::new(2, side).unwrap(), side as usize).unwrap();
    Setup::new(grid, Phases::new(1.0, 2.0).unwrap(), t, axis_xi(0), 1e-10)
}

fn explicit(side: f64, pts: &[[f64; 2]]) -> PointSample {
    let bx = BoxSpec::new(2, side).unwrap();
    PointSample::explicit(bx, pts.iter().map(|p| [p[0], p[1], 0.0]).collect())
}

#[test]
fn pairs_respect_the_periodic_cutoff() {
    let c = attach_marks(
        explicit(32.0, &[[1.0, 1.0], [31.0, 1.0], [16.0, 16.0]]),
        2.0,
        0.0,
        0,
    )
    .unwrap();
    let pairs = k_tuples_within(&c, 2, 3.0).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].as_slice(), &[0, 1]);
    assert_eq!(k_tuples_within(&c, 2, 100.0).unwrap().len(), 3);
    assert_eq!(k_tuples_within(&c, 1, 1.0).unwrap().len(), 3);
    assert!(k_tuples_within(&c, 3, 1.0).is_err());
    assert!(k_tuples_within(&c, 2, 0.0).is_err());
}

#[test]
fn dilute_inclusion_matches_the_polarization_slope() {
    // one disc on a large torus: Δ¹ divided by the rasterized area fraction
    let side = 128.0;
    let st = setup(side, 1024.0);
    let c = attach_marks(explicit(side, &[[64.0, 64.0]]), 8.0, 0.0, 0).unwrap();
    let mut cells = 0;
    st.grid
        .for_each_cell_in_ball(c.center(0), 8.0, |_| cells += 1);
    let fraction = cells as f64 / st.grid.cells() as f64;
    let d1 = delta_k(&c, 1, Formula::Form0, 0.0, &st, st.default_r_cut()).unwrap();
    let slope = electric_cm_slope(&ElectricPhases::new(1.0, 2.0, 2).unwrap());
    let rel = (d1 / fraction - slope).abs() / slope;
    assert!(rel < 0.05, "Δ¹/f = {}, relative gap {rel}", d1 / fraction);
}

#[test]
fn forms_agree_on_a_touching_pair() {
    let st = setup(48.0, 64.0);
    let c = attach_marks(
        explicit(48.0, &[[20.0, 24.0], [27.0, 24.0], [30.0, 31.0]]),
        4.0,
        0.4,
        3,
    )
    .unwrap();
    let solver = ConfigurationSolver::new(c, &st).unwrap();
    for k in 0..=2 {
        let d = delta_k_forms(&solver, k, 0.4, st.default_r_cut()).unwrap();
        assert!(d.spread() < 1e-6, "k = {k}: {:?}", d.forms);
    }
}

#[test]
fn derivative_scales_the_sum_by_factorial() {
    let st = setup(48.0, 64.0);
    let c = attach_marks(explicit(48.0, &[[20.0, 24.0], [27.0, 24.0]]), 4.0, 0.0, 0).unwrap();
    let solver = ConfigurationSolver::new(c, &st).unwrap();
    let d = delta_k_forms(&solver, 2, 0.0, st.default_r_cut()).unwrap();
    assert_eq!(d.tuples, 1);
    assert!((d.derivative(Formula::Form2) - 2.0 * d.forms[2]).abs() <= 1e-15 * d.forms[2].abs());
}

#[test]
fn out_of_range_arguments_are_rejected() {
    let st = setup(32.0, 16.0);
    let c = attach_marks(explicit(32.0, &[[16.0, 16.0]]), 4.0, 0.0, 0).unwrap();
    assert!(delta_k(&c, 1, Formula::Form2, 0.0, &st, 40.0).is_err());
    assert!(Formula::from_index(3).is_err());
}
