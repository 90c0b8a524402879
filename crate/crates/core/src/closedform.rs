//! Closed-form Clausius-Mossotti constants and the single-inclusion field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, unit_ball_volume, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElectricPhases {
    pub alpha: f64,
    pub beta: f64,
    pub dim: usize,
}

impl ElectricPhases {
    pub fn new(alpha: f64, beta: f64, dim: usize) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::invalid("phases", "conductivities must be positive"));
        }
        if dim < 2 {
            return Err(Error::invalid("dimension", "must be at least 2"));
        }
        Ok(ElectricPhases { alpha, beta, dim })
    }
}

/// `C = (α − β) / (β + α(d − 1))`: inside the ball `∇φ = Cξ`.
pub fn polarization_constant(p: &ElectricPhases) -> f64 {
    (p.alpha - p.beta) / (p.beta + p.alpha * (p.dim as f64 - 1.0))
}

/// `αd(β − α) / (β + α(d − 1))`.
pub fn electric_cm_slope(p: &ElectricPhases) -> f64 {
    let d = p.dim as f64;
    p.alpha * d * (p.beta - p.alpha) / (p.beta + p.alpha * (d - 1.0))
}

/// Gradient of the whole-space single-inclusion corrector at `x`.
pub fn single_inclusion_field(
    p: &ElectricPhases,
    radius: f64,
    center: &Point,
    xi: &Point,
    x: &Point,
) -> Point {
    let c = polarization_constant(p);
    let mut y = [0.0; 3];
    for i in 0..p.dim {
        y[i] = x[i] - center[i];
    }
    let r = norm(&y);
    if r < radius {
        return [c * xi[0], c * xi[1], c * xi[2]];
    }
    let d = p.dim as f64;
    let e = [y[0] / r, y[1] / r, y[2] / r];
    let k = c * radius.powf(d) / r.powf(d);
    let xe = dot(xi, &e);
    let mut g = [0.0; 3];
    for i in 0..p.dim {
        g[i] = k * (xi[i] - d * xe * e[i]);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticPhases {
    pub bulk: f64,
    pub bulk_prime: f64,
    pub shear: f64,
    pub shear_prime: f64,
    pub dim: usize,
}

impl ElasticPhases {
    pub fn new(
        bulk: f64,
        bulk_prime: f64,
        shear: f64,
        shear_prime: f64,
        dim: usize,
    ) -> Result<Self> {
        if [bulk, bulk_prime, shear, shear_prime]
            .iter()
            .any(|m| !(*m > 0.0))
        {
            return Err(Error::invalid("moduli", "all moduli must be positive"));
        }
        if dim < 2 {
            return Err(Error::invalid("dimension", "must be at least 2"));
        }
        Ok(ElasticPhases {
            bulk,
            bulk_prime,
            shear,
            shear_prime,
            dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticCm {
    /// `α = G(d²K + 2(d+1)(d−2)G) / (2d(K + 2G))`
    pub alpha: f64,
    /// `β = 2G(d−1)/d`
    pub beta: f64,
    pub k1: f64,
    pub g1: f64,
}

pub fn elastic_cm(p: &ElasticPhases) -> ElasticCm {
    let d = p.dim as f64;
    let (k, g) = (p.bulk, p.shear);
    let alpha = g * (d * d * k + 2.0 * (d + 1.0) * (d - 2.0) * g) / (2.0 * d * (k + 2.0 * g));
    let beta = 2.0 * g * (d - 1.0) / d;
    ElasticCm {
        alpha,
        beta,
        k1: k + (p.bulk_prime - k) * (k + beta) / (p.bulk_prime + beta),
        g1: g + (p.shear_prime - g) * (g + alpha) / (p.shear_prime + alpha),
    }
}

/// `½ ξ:A^(1):ξ` for a symmetric `d×d` matrix `ξ` (row-major, only the
/// leading block is read).
pub fn elastic_first_order_form(p: &ElasticPhases, xi: &[[f64; 3]; 3]) -> f64 {
    let cm = elastic_cm(p);
    let d = p.dim;
    let tr: f64 = (0..d).map(|i| xi[i][i]).sum();
    let sq: f64 = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| xi[i][j] * xi[i][j])
        .sum();
    let (k, g) = (p.bulk, p.shear);
    0.5 * tr * tr * (p.bulk_prime - k) * (k + cm.beta) / (p.bulk_prime + cm.beta)
        + (sq - tr * tr / d as f64) * (p.shear_prime - g) * (g + cm.alpha)
            / (p.shear_prime + cm.alpha)
}

/// `v_p = p σ |B_R|`.
pub fn volume_fraction(p: f64, sigma: f64, radius: f64, dim: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("must lie in [0, 1], got {p}")));
    }
    if sigma < 0.0 {
        return Err(Error::invalid("sigma", "must be nonnegative"));
    }
    Ok(p * sigma * unit_ball_volume(dim) * radius.powi(dim as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(a: f64, b: f64, d: usize) -> ElectricPhases {
        ElectricPhases::new(a, b, d).unwrap()
    }

    #[test]
    fn electric_constants() {
        assert!((electric_cm_slope(&e(1.0, 2.0, 2)) - 2.0 / 3.0).abs() < 1e-15);
        assert!((electric_cm_slope(&e(1.0, 2.0, 3)) - 0.75).abs() < 1e-15);
        assert_eq!(electric_cm_slope(&e(1.5, 1.5, 2)), 0.0);
        assert!((polarization_constant(&e(1.0, 2.0, 2)) + 1.0 / 3.0).abs() < 1e-15);
        assert!((polarization_constant(&e(1.0, 2.0, 3)) + 0.25).abs() < 1e-15);
        for (a, b) in [(1.0, 3.0), (2.0, 0.5), (1.0, 1.0)] {
            let s = electric_cm_slope(&e(a, b, 2));
            assert_eq!(s.partial_cmp(&0.0), (b - a).partial_cmp(&0.0));
        }
        assert!(ElectricPhases::new(0.0, 1.0, 2).is_err());
    }

    #[test]
    fn single_inclusion_interface_conditions() {
        for d in [2usize, 3] {
            let ph = e(1.0, 2.0, d);
            let xi = [0.6, 0.8, 0.0];
            let c = [1.0, -2.0, 0.5];
            let r = 1.5;
            for k in 0..24 {
                let th = k as f64 * 0.27;
                let mut n = [th.cos(), th.sin() * (0.3 * th).cos(), 0.0];
                if d == 3 {
                    n[2] = th.sin() * (0.3 * th).sin();
                }
                let nn = norm(&n);
                let n = [n[0] / nn, n[1] / nn, n[2] / nn];
                let at = |s: f64| [c[0] + s * n[0], c[1] + s * n[1], c[2] + s * n[2]];
                let gin = single_inclusion_field(&ph, r, &c, &xi, &at(r * (1.0 - 1e-12)));
                let gout = single_inclusion_field(&ph, r, &c, &xi, &at(r * (1.0 + 1e-12)));
                let win: Point = [gin[0] + xi[0], gin[1] + xi[1], gin[2] + xi[2]];
                let wout: Point = [gout[0] + xi[0], gout[1] + xi[1], gout[2] + xi[2]];
                // tangential continuity and normal flux continuity
                let tin: Vec<f64> = (0..3).map(|i| win[i] - dot(&win, &n) * n[i]).collect();
                let tout: Vec<f64> = (0..3).map(|i| wout[i] - dot(&wout, &n) * n[i]).collect();
                for i in 0..3 {
                    assert!((tin[i] - tout[i]).abs() < 1e-9);
                }
                assert!((2.0 * dot(&win, &n) - dot(&wout, &n)).abs() < 1e-9);
            }
            // |x|^{-d} decay along a ray
            let g1 = norm(&single_inclusion_field(
                &ph,
                r,
                &c,
                &xi,
                &[c[0] + 10.0, c[1], c[2]],
            ));
            let g2 = norm(&single_inclusion_field(
                &ph,
                r,
                &c,
                &xi,
                &[c[0] + 20.0, c[1], c[2]],
            ));
            assert!(((g1 / g2).log2() - d as f64).abs() < 1e-12);
        }
        let zero = single_inclusion_field(
            &e(1.0, 1.0, 2),
            1.0,
            &[0.0; 3],
            &[1.0, 0.0, 0.0],
            &[3.0, 1.0, 0.0],
        );
        assert_eq!(zero, [0.0; 3]);
    }

    #[test]
    fn volume_fractions() {
        assert_eq!(volume_fraction(0.0, 0.3, 1.0, 2).unwrap(), 0.0);
        assert!((volume_fraction(0.1, 0.05, 1.0, 2).unwrap() - 0.0157080).abs() < 1e-7);
        assert!(volume_fraction(1.5, 0.05, 1.0, 2).is_err());
    }
}
