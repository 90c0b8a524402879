//! Periodic boxes and the minimal-image metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the box. Unused trailing coordinates are zero when `d = 2`.
pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub dim: usize,
    pub side: f64,
}

impl BoxSpec {
    pub fn new(dim: usize, side: f64) -> Result<Self> {
        let b = BoxSpec { dim, side };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.dim == 2 || self.dim == 3) {
            return Err(Error::invalid(
                "dimension",
                format!("must be 2 or 3, got {}", self.dim),
            ));
        }
        if !(self.side.is_finite() && self.side > 0.0) {
            return Err(Error::invalid(
                "side",
                format!("must be positive, got {}", self.side),
            ));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }

    /// Wraps `x` into `[0, L)` coordinate-wise.
    pub fn wrap(&self, mut x: Point) -> Point {
        for c in x.iter_mut().take(self.dim) {
            *c = c.rem_euclid(self.side);
            // rem_euclid can round up to exactly L for tiny negative inputs
            if *c >= self.side {
                *c = 0.0;
            }
        }
        x
    }

    /// Minimal-image displacement `b - a`.
    pub fn displacement(&self, a: &Point, b: &Point) -> Point {
        let mut d = [0.0; 3];
        let l = self.side;
        for i in 0..self.dim {
            let mut t = b[i] - a[i];
            t -= l * (t / l).round();
            d[i] = t;
        }
        d
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        norm(&self.displacement(a, b))
    }

    /// Minimal-image sup-norm distance.
    pub fn distance_inf(&self, a: &Point, b: &Point) -> f64 {
        self.displacement(a, b)
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

pub fn norm(x: &Point) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Volume of the unit ball.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Uniform cell list over the torus, used for neighbour queries at a fixed range.
pub(crate) struct CellList {
    bx: BoxSpec,
    per_side: usize,
    cell: f64,
    buckets: Vec<Vec<usize>>,
}

impl CellList {
    pub fn new(bx: BoxSpec, range: f64) -> Self {
        let per_side = ((bx.side / range).floor() as usize).clamp(1, 1 << 10);
        let count = per_side.pow(bx.dim as u32);
        CellList {
            bx,
            per_side,
            cell: bx.side / per_side as f64,
            buckets: vec![Vec::new(); count],
        }
    }

    fn key(&self, p: &Point) -> [usize; 3] {
        let mut k = [0usize; 3];
        for i in 0..self.bx.dim {
            k[i] = ((p[i] / self.cell) as usize).min(self.per_side - 1);
        }
        k
    }

    fn flat(&self, k: [usize; 3]) -> usize {
        let n = self.per_side;
        k[0] + n * (k[1] + n * k[2])
    }

    pub fn insert(&mut self, id: usize, p: &Point) {
        let f = self.flat(self.key(p));
        self.buckets[f].push(id);
    }

    /// Calls `f` with every stored id in the buckets adjacent to `p`. Each id is
    /// visited at most once.
    pub fn for_each_near(&self, p: &Point, mut f: impl FnMut(usize)) {
        let n = self.per_side as isize;
        let k = self.key(p);
        let span: &[isize] = if n >= 3 {
            &[-1, 0, 1]
        } else if n == 2 {
            &[0, 1]
        } else {
            &[0]
        };
        let zspan: &[isize] = if self.bx.dim == 3 { span } else { &[0] };
        for &dz in zspan {
            for &dy in span {
                for &dx in span {
                    let c = [
                        (k[0] as isize + dx).rem_euclid(n) as usize,
                        (k[1] as isize + dy).rem_euclid(n) as usize,
                        (k[2] as isize + dz).rem_euclid(n) as usize,
                    ];
                    for &id in &self.buckets[self.flat(c)] {
                        f(id);
                    }
                }
            }
        }
    }
}
