//! Stationary point processes on the torus, inclusions and Bernoulli marks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxSpec, CellList, Point};
use crate::setcalc::SubsetSelector;

/// Generator descriptor of a [`PointSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum ProcessKind {
    Poisson { intensity: f64 },
    HardcorePoisson { intensity: f64, min_dist: f64 },
    RandomParking { radius: f64 },
    HardcoreApproximation { theta: f64 },
    Explicit {},
}

impl ProcessKind {
    /// Declared minimal pairwise distance, if the process is hardcore.
    pub fn min_dist(&self) -> Option<f64> {
        match *self {
            ProcessKind::HardcorePoisson { min_dist, .. } => Some(min_dist),
            ProcessKind::RandomParking { radius } => Some(2.0 * radius),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SampleDoc", try_from = "SampleDoc")]
pub struct PointSample {
    pub bx: BoxSpec,
    pub points: Vec<Point>,
    pub kind: ProcessKind,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SampleDoc {
    dimension: usize,
    side: f64,
    points: Vec<Vec<f64>>,
    #[serde(flatten)]
    kind: ProcessKind,
    seed: u64,
}

impl From<PointSample> for SampleDoc {
    fn from(s: PointSample) -> Self {
        SampleDoc {
            dimension: s.bx.dim,
            side: s.bx.side,
            points: s.points.iter().map(|p| p[..s.bx.dim].to_vec()).collect(),
            kind: s.kind,
            seed: s.seed,
        }
    }
}

impl TryFrom<SampleDoc> for PointSample {
    type Error = Error;
    fn try_from(d: SampleDoc) -> Result<Self> {
        let bx = BoxSpec::new(d.dimension, d.side)?;
        let mut points = Vec::with_capacity(d.points.len());
        for p in &d.points {
            if p.len() != bx.dim {
                return Err(Error::invalid(
                    "points",
                    format!("expected {} coordinates", bx.dim),
                ));
            }
            let mut q = [0.0; 3];
            q[..bx.dim].copy_from_slice(p);
            if q.iter().any(|c| !(0.0..bx.side).contains(c) && *c != 0.0) {
                return Err(Error::invalid(
                    "points",
                    format!("{p:?} lies outside the box"),
                ));
            }
            points.push(q);
        }
        Ok(PointSample {
            bx,
            points,
            kind: d.kind,
            seed: d.seed,
        })
    }
}

impl PointSample {
    /// A sample with caller-supplied centres, wrapped into the box.
    pub fn explicit(bx: BoxSpec, points: Vec<Point>) -> Self {
        let points = points.into_iter().map(|p| bx.wrap(p)).collect();
        PointSample {
            bx,
            points,
            kind: ProcessKind::Explicit {},
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nominal intensity: the process parameter for Poisson, the empirical
    /// density otherwise.
    pub fn intensity(&self) -> f64 {
        match self.kind {
            ProcessKind::Poisson { intensity } => intensity,
            _ => self.len() as f64 / self.bx.volume(),
        }
    }

    /// Smallest periodic pairwise distance, `inf` for fewer than two points.
    pub fn min_pair_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.len() {
            for j in 0..i {
                m = m.min(self.bx.distance(&self.points[i], &self.points[j]));
            }
        }
        m
    }
}

fn uniform_point(bx: &BoxSpec, rng: &mut impl Rng) -> Point {
    let mut p = [0.0; 3];
    for c in p.iter_mut().take(bx.dim) {
        *c = rng.random::<f64>() * bx.side;
    }
    p
}

pub fn sample_poisson(intensity: f64, bx: BoxSpec, seed: u64) -> Result<PointSample> {
    bx.check()?;
    if !intensity.is_finite() || intensity < 0.0 {
        return Err(Error::invalid(
            "intensity",
            format!("must be finite and >= 0, got {intensity}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = intensity * bx.volume();
    let count = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::invalid("intensity", e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let points = (0..count).map(|_| uniform_point(&bx, &mut rng)).collect();
    Ok(PointSample {
        bx,
        points,
        kind: ProcessKind::Poisson { intensity },
        seed,
    })
}

/// Matérn type I: every Poisson point with another point closer than
/// `min_dist` is removed.
pub fn sample_hardcore_poisson(
    intensity: f64,
    min_dist: f64,
    bx: BoxSpec,
    seed: u64,
) -> Result<PointSample> {
    if !(min_dist > 0.0 && min_dist.is_finite()) {
        return Err(Error::invalid(
            "min_dist",
            format!("must be positive, got {min_dist}"),
        ));
    }
    let base = sample_poisson(intensity, bx, seed)?;
    let mut cells = CellList::new(bx, min_dist);
    for (i, p) in base.points.iter().enumerate() {
        cells.insert(i, p);
    }
    let mut keep = vec![true; base.len()];
    for (i, p) in base.points.iter().enumerate() {
        cells.for_each_near(p, |j| {
            if j != i && bx.distance(p, &base.points[j]) < min_dist {
                keep[i] = false;
            }
        });
    }
    let points = base
        .points
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect();
    Ok(PointSample {
        bx,
        points,
        kind: ProcessKind::HardcorePoisson {
            intensity,
            min_dist,
        },
        seed,
    })
}

pub const DEFAULT_PARKING_BUDGET: u64 = 50_000_000;

pub fn sample_random_parking(radius: f64, bx: BoxSpec, seed: u64) -> Result<PointSample> {
    sample_random_parking_with_budget(radius, bx, seed, DEFAULT_PARKING_BUDGET)
}

#[derive(Clone, Copy)]
struct ProbeCell {
    corner: Point,
    size: f64,
}

/// Random sequential adsorption to saturation.
///
/// Uniform proposals are used until they mostly fail; after that proposals are
/// drawn from the cells of a probe grid (spacing `radius / 4`) that are not
/// covered by a single exclusion disc, refining the cells when they keep
/// failing. Saturation is declared once no probe cell is left.
pub fn sample_random_parking_with_budget(
    radius: f64,
    bx: BoxSpec,
    seed: u64,
    budget: u64,
) -> Result<PointSample> {
    bx.check()?;
    if !(radius > 0.0 && radius < bx.side) {
        return Err(Error::invalid(
            "radius",
            format!("must lie in (0, L), got {radius}"),
        ));
    }
    let excl = 2.0 * radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = CellList::new(bx, excl);
    let mut points: Vec<Point> = Vec::new();
    let mut proposals: u64 = 0;

    let admissible = |q: &Point, points: &[Point], cells: &CellList| {
        let mut ok = true;
        cells.for_each_near(q, |j| {
            if ok && bx.distance(q, &points[j]) < excl {
                ok = false;
            }
        });
        ok
    };

    let mut misses = 0u64;
    while misses < 2000 + 20 * points.len() as u64 {
        if proposals >= budget {
            return Err(Error::Unsaturated { budget });
        }
        proposals += 1;
        let q = uniform_point(&bx, &mut rng);
        if admissible(&q, &points, &cells) {
            cells.insert(points.len(), &q);
            points.push(q);
            misses = 0;
        } else {
            misses += 1;
        }
    }

    let per_side = (bx.side / (radius / 4.0)).ceil() as usize;
    let size0 = bx.side / per_side as f64;
    let covered_by = |x: &Point, q: &Point| bx.distance(x, q) < excl;
    let corners = |c: &ProbeCell| -> Vec<Point> {
        let n = 1usize << bx.dim;
        (0..n)
            .map(|m| {
                let mut p = c.corner;
                for i in 0..bx.dim {
                    if m >> i & 1 == 1 {
                        p[i] += c.size;
                    }
                }
                bx.wrap(p)
            })
            .collect()
    };
    let single_cover = |c: &ProbeCell, q: &Point| corners(c).iter().all(|x| covered_by(x, q));
    let dead = |c: &ProbeCell, points: &[Point], cells: &CellList, union: bool| {
        let cs = corners(c);
        let mut probe = cs.clone();
        if union {
            let mut mid = c.corner;
            for v in mid.iter_mut().take(bx.dim) {
                *v += c.size / 2.0;
            }
            probe.push(bx.wrap(mid));
        }
        let mut single = false;
        let mut hit = vec![false; probe.len()];
        cells.for_each_near(&cs[0], |j| {
            let q = &points[j];
            if probe[..cs.len()].iter().all(|x| covered_by(x, q)) {
                single = true;
            }
            for (h, x) in hit.iter_mut().zip(&probe) {
                *h |= covered_by(x, q);
            }
        });
        single || (union && hit.iter().all(|h| *h))
    };

    let mut live: Vec<ProbeCell> = Vec::new();
    let total = per_side.pow(bx.dim as u32);
    for f in 0..total {
        let mut corner = [0.0; 3];
        let mut r = f;
        for v in corner.iter_mut().take(bx.dim) {
            *v = (r % per_side) as f64 * size0;
            r /= per_side;
        }
        let c = ProbeCell {
            corner,
            size: size0,
        };
        if !dead(&c, &points, &cells, false) {
            live.push(c);
        }
    }

    let mut level = 0u32;
    while !live.is_empty() {
        let patience = 8 * live.len() as u64 + 64;
        let mut fails = 0u64;
        while fails < patience && !live.is_empty() {
            if proposals >= budget {
                return Err(Error::Unsaturated { budget });
            }
            proposals += 1;
            let c = live[rng.random_range(0..live.len())];
            let mut q = c.corner;
            for v in q.iter_mut().take(bx.dim) {
                *v += rng.random::<f64>() * c.size;
            }
            let q = bx.wrap(q);
            if admissible(&q, &points, &cells) {
                cells.insert(points.len(), &q);
                points.push(q);
                live.retain(|c| !single_cover(c, &q));
                fails = 0;
            } else {
                fails += 1;
            }
        }
        if live.is_empty() {
            break;
        }
        level += 1;
        if level > 16 {
            return Err(Error::Unsaturated { budget: proposals });
        }
        let mut next = Vec::with_capacity(live.len() * 2);
        for c in &live {
            let half = c.size / 2.0;
            for m in 0..(1usize << bx.dim) {
                let mut corner = c.corner;
                for i in 0..bx.dim {
                    if m >> i & 1 == 1 {
                        corner[i] += half;
                    }
                }
                let child = ProbeCell { corner, size: half };
                if !dead(&child, &points, &cells, true) {
                    next.push(child);
                }
            }
        }
        live = next;
    }
    log::debug!(
        "random parking: {} points after {proposals} proposals, refinement level {level}",
        points.len()
    );
    Ok(PointSample {
        bx,
        points,
        kind: ProcessKind::RandomParking { radius },
        seed,
    })
}

/// Whether the probe grid of spacing `radius / 4` still contains a point at
/// distance at least `2 radius` from every centre.
pub fn parking_has_free_probe(sample: &PointSample, radius: f64) -> bool {
    let bx = sample.bx;
    let per_side = (bx.side / (radius / 4.0)).ceil() as usize;
    let s = bx.side / per_side as f64;
    let mut cells = CellList::new(bx, 2.0 * radius);
    for (i, p) in sample.points.iter().enumerate() {
        cells.insert(i, p);
    }
    for f in 0..per_side.pow(bx.dim as u32) {
        let mut x = [0.0; 3];
        let mut r = f;
        for v in x.iter_mut().take(bx.dim) {
            *v = (r % per_side) as f64 * s;
            r /= per_side;
        }
        let mut covered = false;
        cells.for_each_near(&x, |j| {
            covered |= bx.distance(&x, &sample.points[j]) < 2.0 * radius
        });
        if !covered {
            return true;
        }
    }
    false
}

fn precedes(a: (&Point, f64), b: (&Point, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0.partial_cmp(b.0) == Some(std::cmp::Ordering::Less))
}

/// Indices retained by the θ-peeling of the decorated overlap graph.
///
/// Two points are adjacent when their cubes `q + Q/θ` overlap, i.e. when their
/// sup-norm distance on the torus is below `1/θ`. Edges point from the smaller
/// to the larger uniform. Each round keeps the current roots and deletes their
/// offspring.
pub fn hardcore_approximation_indices(
    sample: &PointSample,
    theta: f64,
    uniforms: &[f64],
) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::invalid(
            "theta",
            format!("must be positive, got {theta}"),
        ));
    }
    if uniforms.len() != sample.len() {
        return Err(Error::invalid(
            "shared_uniforms",
            format!("need {} values, got {}", sample.len(), uniforms.len()),
        ));
    }
    let bx = sample.bx;
    let reach = 1.0 / theta;
    let mut cells = CellList::new(bx, reach);
    for (i, p) in sample.points.iter().enumerate() {
        cells.insert(i, p);
    }
    let n = sample.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, p) in sample.points.iter().enumerate() {
        cells.for_each_near(p, |j| {
            if j != i && bx.distance_inf(p, &sample.points[j]) < reach {
                adj[i].push(j);
            }
        });
    }
    let key = |i: usize| (&sample.points[i], uniforms[i]);
    let mut alive = vec![true; n];
    let mut kept = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let roots: Vec<usize> = (0..n)
            .filter(|&i| alive[i] && !adj[i].iter().any(|&j| alive[j] && precedes(key(j), key(i))))
            .collect();
        for &r in &roots {
            alive[r] = false;
            remaining -= 1;
            kept.push(r);
        }
        for &r in &roots {
            for &j in &adj[r] {
                if alive[j] {
                    alive[j] = false;
                    remaining -= 1;
                }
            }
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

pub fn hardcore_approximation(
    sample: &PointSample,
    theta: f64,
    uniforms: &[f64],
) -> Result<PointSample> {
    let kept = hardcore_approximation_indices(sample, theta, uniforms)?;
    Ok(PointSample {
        bx: sample.bx,
        points: kept.iter().map(|&i| sample.points[i]).collect(),
        kind: ProcessKind::HardcoreApproximation { theta },
        seed: sample.seed,
    })
}

/// A point sample dressed with balls of common radius and coupled Bernoulli marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionConfiguration {
    pub sample: PointSample,
    pub radius: f64,
    pub p0: f64,
    pub uniforms: Vec<f64>,
    pub marks: Vec<bool>,
    /// Maximal number of balls covering one probe cell.
    pub gamma: usize,
}

impl InclusionConfiguration {
    pub fn with_uniforms(
        sample: PointSample,
        radius: f64,
        p0: f64,
        uniforms: Vec<f64>,
    ) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(
                "radius",
                format!("must be positive, got {radius}"),
            ));
        }
        check_probability("p0", p0)?;
        if uniforms.len() != sample.len() {
            return Err(Error::invalid("uniforms", "one value per point required"));
        }
        let marks = uniforms.iter().map(|&u| u <= p0).collect();
        let gamma = measure_gamma(&sample, radius);
        Ok(InclusionConfiguration {
            sample,
            radius,
            p0,
            uniforms,
            marks,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn bx(&self) -> BoxSpec {
        self.sample.bx
    }

    pub fn center(&self, n: usize) -> &Point {
        &self.sample.points[n]
    }

    /// Indices with `U_n <= p`.
    pub fn marked_at(&self, p: f64) -> SubsetSelector {
        SubsetSelector::from_sorted_unchecked(
            self.uniforms
                .iter()
                .enumerate()
                .filter(|(_, &u)| u <= p)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn marked(&self) -> SubsetSelector {
        SubsetSelector::from_sorted_unchecked(
            self.marks
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn all(&self) -> SubsetSelector {
        SubsetSelector::from_sorted_unchecked((0..self.len()).collect())
    }

    /// Same centres and uniforms, marks thresholded at `p`.
    pub fn at(&self, p: f64) -> Result<Self> {
        check_probability("p", p)?;
        let mut c = self.clone();
        c.p0 = p;
        c.marks = c.uniforms.iter().map(|&u| u <= p).collect();
        Ok(c)
    }

    pub fn check_gamma(&self, limit: usize) -> Result<()> {
        if self.gamma > limit {
            return Err(Error::GammaExceeded {
                measured: self.gamma,
                limit,
            });
        }
        Ok(())
    }
}

fn check_probability(name: &'static str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(name, format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Overlap degree of the balls, counted at the centres of a probe grid of
/// spacing at most `radius / 4`.
pub fn measure_gamma(sample: &PointSample, radius: f64) -> usize {
    let bx = sample.bx;
    let m = (bx.side / (radius / 4.0)).ceil().max(1.0) as usize;
    let grid = crate::media::GridSpec { bx, n: m };
    let mut count = vec![0u16; grid.cells()];
    for p in &sample.points {
        grid.for_each_cell_in_ball(p, radius, |c| count[c] += 1);
    }
    count.into_iter().max().unwrap_or(0) as usize
}

pub fn attach_marks(
    sample: PointSample,
    radius: f64,
    p0: f64,
    seed: u64,
) -> Result<InclusionConfiguration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniforms = (0..sample.len()).map(|_| rng.random::<f64>()).collect();
    InclusionConfiguration::with_uniforms(sample, radius, p0, uniforms)
}

/// Re-thresholds the same uniforms at `p0 + p`.
pub fn remark_shift(config: &InclusionConfiguration, p: f64) -> Result<InclusionConfiguration> {
    let target = config.p0 + p;
    if !(-1e-15..=1.0 + 1e-15).contains(&target) {
        return Err(Error::invalid(
            "p",
            format!("p0 + p = {target} is outside [0, 1]"),
        ));
    }
    config.at(target.clamp(0.0, 1.0))
}
