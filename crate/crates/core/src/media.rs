//! Rasterized indicator and coefficient fields on the periodic grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxSpec, Point};
use crate::process::InclusionConfiguration;
use crate::setcalc::SubsetSelector;

pub use crate::setcalc::ie_expand;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bx: BoxSpec,
    /// Cells per side.
    pub n: usize,
}

impl GridSpec {
    pub fn new(bx: BoxSpec, n: usize) -> Result<Self> {
        bx.check()?;
        if n < 8 {
            return Err(Error::invalid(
                "cells",
                format!("need at least 8 cells per side, got {n}"),
            ));
        }
        Ok(GridSpec { bx, n })
    }

    pub fn dim(&self) -> usize {
        self.bx.dim
    }

    pub fn h(&self) -> f64 {
        self.bx.side / self.n as f64
    }

    pub fn cells(&self) -> usize {
        self.n.pow(self.bx.dim as u32)
    }

    /// Stride of axis `i` in the flat index (x fastest).
    pub fn stride(&self, i: usize) -> usize {
        self.n.pow(i as u32)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        [
            idx % n,
            (idx / n) % n,
            if self.dim() == 3 { idx / (n * n) } else { 0 },
        ]
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.n * (c[1] + self.n * c[2])
    }

    pub fn center(&self, idx: usize) -> Point {
        let c = self.coords(idx);
        let h = self.h();
        let mut p = [0.0; 3];
        for i in 0..self.dim() {
            p[i] = (c[i] as f64 + 0.5) * h;
        }
        p
    }

    /// Neighbour of `idx` one cell along `+e_axis`.
    pub fn plus(&self, idx: usize, axis: usize) -> usize {
        let c = self.coords(idx)[axis];
        let s = self.stride(axis);
        if c + 1 == self.n {
            idx + s - self.n * s
        } else {
            idx + s
        }
    }

    /// Neighbour of `idx` one cell along `−e_axis`.
    pub fn minus(&self, idx: usize, axis: usize) -> usize {
        let c = self.coords(idx)[axis];
        let s = self.stride(axis);
        if c == 0 {
            idx + self.n * s - s
        } else {
            idx - s
        }
    }

    /// The cell-size guard `h <= R/4`.
    pub fn check_resolution(&self, radius: f64) -> Result<()> {
        let h = self.h();
        if h > radius / 4.0 * (1.0 + 1e-12) {
            return Err(Error::Resolution {
                cell: h,
                limit: radius / 4.0,
            });
        }
        Ok(())
    }

    /// Calls `f` for each cell whose centre lies at periodic distance `< r` from `q`.
    pub fn for_each_cell_in_ball(&self, q: &Point, r: f64, mut f: impl FnMut(usize)) {
        let h = self.h();
        let n = self.n as i64;
        let d = self.dim();
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for i in 0..d {
            lo[i] = ((q[i] - r) / h - 0.5).floor() as i64;
            hi[i] = ((q[i] + r) / h - 0.5).ceil() as i64;
            // never visit a cell twice when the ball wraps around the box
            if hi[i] - lo[i] + 1 > n {
                hi[i] = lo[i] + n - 1;
            }
        }
        let r2 = r * r;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let ijk = [i, j, k];
                    let mut dist2 = 0.0;
                    let mut c = [0usize; 3];
                    for a in 0..d {
                        let x = (ijk[a] as f64 + 0.5) * h;
                        let mut t = x - q[a];
                        t -= self.bx.side * (t / self.bx.side).round();
                        dist2 += t * t;
                        c[a] = ijk[a].rem_euclid(n) as usize;
                    }
                    if dist2 < r2 {
                        f(self.index(c));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub alpha: f64,
    pub beta: f64,
}

impl Phases {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Phases { alpha, beta };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    name,
                    format!("phase values must be positive, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha.max(self.beta)
    }

    /// Ellipticity ratio after normalization.
    pub fn lambda(&self) -> f64 {
        self.alpha.min(self.beta) / self.scale()
    }

    pub fn value(&self, inside: bool) -> f64 {
        if inside {
            self.beta
        } else {
            self.alpha
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    pub grid: GridSpec,
    pub bits: Vec<bool>,
}

impl IndicatorField {
    pub fn zeros(grid: GridSpec) -> Self {
        IndicatorField {
            grid,
            bits: vec![false; grid.cells()],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }
}

/// Isotropic cell coefficients `a(x) Id`, stored in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    /// Cells in the perturbed phase.
    pub labels: Vec<bool>,
    /// Value used for normalization (the largest cell value).
    pub scale: f64,
    pub lambda: f64,
}

impl CoefficientField {
    pub fn from_labels(grid: GridSpec, labels: Vec<bool>, phases: Phases) -> Result<Self> {
        phases.check()?;
        let values: Vec<f64> = labels.iter().map(|&b| phases.value(b)).collect();
        let mut f = Self::from_values(grid, values)?;
        f.labels = labels;
        // normalization always uses both phases, not only those present
        f.scale = phases.scale();
        f.lambda = phases.lambda();
        Ok(f)
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::invalid("values", "one value per cell required"));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("values", "cell values must be positive"));
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(CoefficientField {
            grid,
            labels: vec![false; values.len()],
            values,
            scale: max,
            lambda: min / max,
        })
    }

    pub fn constant(grid: GridSpec, a: f64) -> Result<Self> {
        Self::from_values(grid, vec![a; grid.cells()])
    }

    /// Stripes of width `width` cells, normal to `axis`, alternating between
    /// the two phases.
    pub fn laminate(grid: GridSpec, axis: usize, width: usize, phases: Phases) -> Result<Self> {
        if axis >= grid.dim() || width == 0 {
            return Err(Error::invalid("laminate", "bad axis or stripe width"));
        }
        let labels = (0..grid.cells())
            .map(|c| (grid.coords(c)[axis] / width) % 2 == 1)
            .collect();
        Self::from_labels(grid, labels, phases)
    }

    /// Values divided by the normalization scale; they lie in `[lambda, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.scale).collect()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Face coefficients: `a[i][c]` sits on the face between `c` and `c + e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub grid: GridSpec,
    pub a: Vec<Vec<f64>>,
}

pub fn harmonic(x: f64, y: f64) -> f64 {
    2.0 * x * y / (x + y)
}

impl FaceField {
    pub fn from_cells(field: &CoefficientField) -> Self {
        let g = field.grid;
        let a = (0..g.dim())
            .map(|i| {
                (0..g.cells())
                    .map(|c| harmonic(field.values[c], field.values[g.plus(c, i)]))
                    .collect()
            })
            .collect();
        FaceField { grid: g, a }
    }

    /// Torus average of `ξ·a ξ` over faces.
    pub fn mean_quadratic(&self, xi: &Point) -> f64 {
        let n = self.grid.cells() as f64;
        (0..self.grid.dim())
            .map(|i| xi[i] * xi[i] * self.a[i].iter().sum::<f64>() / n)
            .sum()
    }
}

/// Per-cell lists of the inclusions covering each cell.
#[derive(Debug, Clone)]
pub struct Raster {
    pub grid: GridSpec,
    pub phases: Phases,
    n_incl: usize,
    offsets: Vec<u32>,
    members: Vec<u32>,
    cells_of: Vec<Vec<u32>>,
    /// Largest number of inclusions covering one cell.
    pub gamma: usize,
}

impl Raster {
    pub fn new(config: &InclusionConfiguration, grid: GridSpec, phases: Phases) -> Result<Self> {
        phases.check()?;
        if config.bx() != grid.bx {
            return Err(Error::invalid(
                "grid",
                "grid box differs from the configuration box",
            ));
        }
        grid.check_resolution(config.radius)?;
        let mut cells_of = Vec::with_capacity(config.len());
        let mut count = vec![0u32; grid.cells()];
        for n in 0..config.len() {
            let mut v = Vec::new();
            grid.for_each_cell_in_ball(config.center(n), config.radius, |c| {
                v.push(c as u32);
                count[c] += 1;
            });
            v.sort_unstable();
            cells_of.push(v);
        }
        let mut offsets = Vec::with_capacity(grid.cells() + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for &c in &count {
            acc += c;
            offsets.push(acc);
        }
        let mut fill = offsets.clone();
        let mut members = vec![0u32; acc as usize];
        for (n, cells) in cells_of.iter().enumerate() {
            for &c in cells {
                members[fill[c as usize] as usize] = n as u32;
                fill[c as usize] += 1;
            }
        }
        let gamma = count.iter().copied().max().unwrap_or(0) as usize;
        Ok(Raster {
            grid,
            phases,
            n_incl: config.len(),
            offsets,
            members,
            cells_of,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.n_incl
    }

    pub fn is_empty(&self) -> bool {
        self.n_incl == 0
    }

    pub fn covering(&self, cell: usize) -> &[u32] {
        &self.members[self.offsets[cell] as usize..self.offsets[cell + 1] as usize]
    }

    pub fn cells_of(&self, n: usize) -> &[u32] {
        &self.cells_of[n]
    }

    fn membership(&self, e: &SubsetSelector) -> Result<Vec<bool>> {
        e.check_range(self.n_incl)?;
        let mut m = vec![false; self.n_incl];
        for n in e.iter() {
            m[n] = true;
        }
        Ok(m)
    }

    /// `1_{J^E}`.
    pub fn union(&self, e: &SubsetSelector) -> Result<IndicatorField> {
        e.check_range(self.n_incl)?;
        let mut f = IndicatorField::zeros(self.grid);
        for n in e.iter() {
            for &c in &self.cells_of[n] {
                f.bits[c as usize] = true;
            }
        }
        Ok(f)
    }

    /// `1_{J_{E||F}}`: cells covered by every member of `E` and no member of `F`.
    pub fn intersection_excluding(
        &self,
        e: &SubsetSelector,
        f: &SubsetSelector,
    ) -> Result<IndicatorField> {
        if e.is_empty() {
            return Err(Error::invalid(
                "E",
                "intersection over the empty set; use the zero field",
            ));
        }
        if let Some(n) = e.iter().find(|n| f.contains(*n)) {
            return Err(Error::Overlap(n));
        }
        let in_e = self.membership(e)?;
        let in_f = self.membership(f)?;
        let mut out = IndicatorField::zeros(self.grid);
        let first = e.as_slice()[0];
        for &c in &self.cells_of[first] {
            let cov = self.covering(c as usize);
            let hits = cov.iter().filter(|&&m| in_e[m as usize]).count();
            let excluded = cov.iter().any(|&m| in_f[m as usize]);
            out.bits[c as usize] = hits == e.len() && !excluded;
        }
        Ok(out)
    }

    /// `A^E = A + (A' − A) 1_{J^E}`.
    pub fn assemble(&self, e: &SubsetSelector) -> Result<CoefficientField> {
        let ind = self.union(e)?;
        CoefficientField::from_labels(self.grid, ind.bits, self.phases)
    }

    pub fn faces(&self, e: &SubsetSelector) -> Result<FaceField> {
        Ok(FaceField::from_cells(&self.assemble(e)?))
    }

    /// Face-level perturbation stencil around the members of `cluster`, on top
    /// of the base medium `A^base`.
    pub fn local(
        &self,
        base: &SubsetSelector,
        cluster: &SubsetSelector,
    ) -> Result<LocalPerturbation> {
        if cluster.len() > 31 {
            return Err(Error::invalid("cluster", "at most 31 members"));
        }
        cluster.check_range(self.n_incl)?;
        let in_base = self.membership(base)?;
        let g = self.grid;
        let mut faces: Vec<(usize, usize)> = Vec::new();
        for n in cluster.iter() {
            for &c in &self.cells_of[n] {
                let c = c as usize;
                for i in 0..g.dim() {
                    faces.push((i, c));
                    faces.push((i, g.minus(c, i)));
                }
            }
        }
        faces.sort_unstable();
        faces.dedup();
        let cell_info = |c: usize| {
            let cov = self.covering(c);
            let base_on = cov.iter().any(|&m| in_base[m as usize]);
            let mut mask = 0u32;
            for (b, n) in cluster.iter().enumerate() {
                if cov.contains(&(n as u32)) {
                    mask |= 1 << b;
                }
            }
            (base_on, mask)
        };
        let faces = faces
            .into_iter()
            .map(|(axis, lo)| {
                let hi = g.plus(lo, axis);
                let (base_lo, mask_lo) = cell_info(lo);
                let (base_hi, mask_hi) = cell_info(hi);
                LocalFace {
                    axis,
                    cell: lo,
                    base_lo,
                    mask_lo,
                    base_hi,
                    mask_hi,
                }
            })
            .collect();
        Ok(LocalPerturbation {
            phases: self.phases,
            faces,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFace {
    pub axis: usize,
    /// Lower cell; the face joins `cell` and `cell + e_axis`.
    pub cell: usize,
    base_lo: bool,
    mask_lo: u32,
    base_hi: bool,
    mask_hi: u32,
}

/// Face values of `A^{B∪U}` for all `U` inside a small cluster, restricted to
/// the faces where they can differ from `A^B`.
#[derive(Debug, Clone)]
pub struct LocalPerturbation {
    pub phases: Phases,
    pub faces: Vec<LocalFace>,
}

impl LocalPerturbation {
    /// Face coefficient of `A^{B∪U}`, with `U` a mask over the cluster.
    pub fn value(&self, f: &LocalFace, u: u32) -> f64 {
        let lo = self.phases.value(f.base_lo || f.mask_lo & u != 0);
        let hi = self.phases.value(f.base_hi || f.mask_hi & u != 0);
        harmonic(lo, hi)
    }

    /// `V(U) = a^{B∪U} − a^B` on face `f`.
    pub fn valuation(&self, f: &LocalFace, u: u32) -> f64 {
        self.value(f, u) - self.value(f, 0)
    }
}

#[derive(Serialize)]
struct GridHeader<'a> {
    dimension: usize,
    cells_per_side: usize,
    side: f64,
    cell_size: f64,
    dtype: &'static str,
    order: &'static str,
    layout: &'a str,
    components: usize,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

/// Writes `<stem>.bin` (little-endian f64, x fastest) and `<stem>.json`.
pub fn export_grid(
    stem: &Path,
    grid: &GridSpec,
    layout: &str,
    data: &[&[f64]],
    meta: serde_json::Value,
) -> Result<()> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let mut w =
        std::io::BufWriter::new(std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?);
    for comp in data {
        if comp.len() != grid.cells() {
            return Err(Error::invalid(
                "data",
                "component length differs from the cell count",
            ));
        }
        for v in comp.iter() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&bin, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&bin, e))?;
    let header = GridHeader {
        dimension: grid.dim(),
        cells_per_side: grid.n,
        side: grid.bx.side,
        cell_size: grid.h(),
        dtype: "float64-le",
        order: "row-major, x fastest",
        layout,
        components: data.len(),
        meta,
    };
    std::fs::write(&json, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn export_field(stem: &Path, field: &CoefficientField) -> Result<()> {
    export_grid(
        stem,
        &field.grid,
        "cell",
        &[&field.values],
        serde_json::json!({ "scale": field.scale, "lambda": field.lambda }),
    )
}

pub fn read_grid(stem: &Path) -> Result<(serde_json::Value, Vec<f64>)> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let header: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

pub fn rasterize_union(
    config: &InclusionConfiguration,
    grid: GridSpec,
    e: &SubsetSelector,
) -> Result<IndicatorField> {
    Raster::new(
        config,
        grid,
        Phases {
            alpha: 1.0,
            beta: 1.0,
        },
    )?
    .union(e)
}

pub fn rasterize_intersection_excluding(
    config: &InclusionConfiguration,
    grid: GridSpec,
    e: &SubsetSelector,
    f: &SubsetSelector,
) -> Result<IndicatorField> {
    Raster::new(
        config,
        grid,
        Phases {
            alpha: 1.0,
            beta: 1.0,
        },
    )?
    .intersection_excluding(e, f)
}

pub fn assemble_field(
    config: &InclusionConfiguration,
    grid: GridSpec,
    e: &SubsetSelector,
    phases: Phases,
) -> Result<CoefficientField> {
    Raster::new(config, grid, phases)?.assemble(e)
}
