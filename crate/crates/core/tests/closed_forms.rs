use clusterhom::closedform::{
    elastic_cm, electric_cm_slope, polarization_constant, single_inclusion_field, volume_fraction,
    ElasticPhases, ElectricPhases,
};

#[test]
fn elastic_unit_moduli_in_three_dimensions() {
    let cm = elastic_cm(&ElasticPhases::new(1.0, 2.0, 1.0, 3.0, 3).unwrap());
    assert!((cm.alpha - 17.0 / 18.0).abs() <= 1e-14, "{}", cm.alpha);
    assert!((cm.beta - 4.0 / 3.0).abs() <= 1e-14, "{}", cm.beta);
}

#[test]
fn elastic_planar_constants() {
    for (k, g) in [(1.0, 1.0), (2.5, 0.4), (0.3, 7.0)] {
        let cm = elastic_cm(&ElasticPhases::new(k, 2.0 * k, g, 3.0 * g, 2).unwrap());
        assert!((cm.alpha - k * g / (k + 2.0 * g)).abs() <= 1e-14 * k.max(g));
    }
    let cm = elastic_cm(&ElasticPhases::new(1.0, 2.0, 1.0, 3.0, 2).unwrap());
    assert!((cm.beta - 1.0).abs() <= 1e-14);
}

#[test]
fn elastic_rejects_nonpositive_moduli() {
    assert!(ElasticPhases::new(0.0, 1.0, 1.0, 1.0, 3).is_err());
    assert!(ElasticPhases::new(1.0, 1.0, 1.0, 1.0, 1).is_err());
}

#[test]
fn electric_slopes() {
    let p2 = ElectricPhases::new(1.0, 2.0, 2).unwrap();
    assert!((electric_cm_slope(&p2) - 2.0 / 3.0).abs() < 1e-15);
    assert!((polarization_constant(&p2) + 1.0 / 3.0).abs() < 1e-15);
    let p3 = ElectricPhases::new(1.0, 2.0, 3).unwrap();
    assert!((electric_cm_slope(&p3) - 3.0 / 4.0).abs() < 1e-15);
    // no contrast, no slope
    assert_eq!(
        electric_cm_slope(&ElectricPhases::new(2.0, 2.0, 2).unwrap()),
        0.0
    );
}

#[test]
fn single_inclusion_normal_flux_is_continuous() {
    let p = ElectricPhases::new(1.0, 5.0, 2).unwrap();
    let c = [0.0; 3];
    let xi = [1.0, 0.0, 0.0];
    for theta in [0.0f64, 0.3, 1.1, 2.0] {
        let e = [theta.cos(), theta.sin(), 0.0];
        let inner = single_inclusion_field(
            &p,
            1.0,
            &c,
            &xi,
            &[e[0] * (1.0 - 1e-9), e[1] * (1.0 - 1e-9), 0.0],
        );
        let outer = single_inclusion_field(
            &p,
            1.0,
            &c,
            &xi,
            &[e[0] * (1.0 + 1e-9), e[1] * (1.0 + 1e-9), 0.0],
        );
        let flux = |g: &[f64; 3], a: f64| a * ((g[0] + xi[0]) * e[0] + (g[1] + xi[1]) * e[1]);
        assert!(
            (flux(&inner, 5.0) - flux(&outer, 1.0)).abs() < 1e-6,
            "theta {theta}"
        );
    }
}

#[test]
fn volume_fraction_of_dilute_discs() {
    let f = volume_fraction(0.5, 1e-3, 4.0, 2).unwrap();
    assert!((f - 0.5 * 1e-3 * std::f64::consts::PI * 16.0).abs() < 1e-15);
    assert!(volume_fraction(1.5, 1e-3, 4.0, 2).is_err());
}
