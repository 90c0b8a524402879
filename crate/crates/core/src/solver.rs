//! Massive corrector equation `φ/T − ∇·A(∇φ + ξ) = 0` on the periodic grid.
//!
//! Cell-centred finite differences with harmonic-mean face coefficients. The
//! assembled system is `M φ = b` with
//! `M = (h²/T) I + Σ_faces a_f (e_c − e_{c'})(e_c − e_{c'})ᵀ` and
//! `b(c) = h Σ_i ξ_i (a_i(c) − a_i(c − e_i))`,
//! i.e. the equation multiplied by `h²`.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::media::{export_grid, FaceField, GridSpec, Raster};
use crate::setcalc::{parity, submasks, SubsetSelector};
use crate::stats::{neumaier_sum, NeumaierSum};

/// Visits the faces normal to `axis` as `(cell, cell + e_axis)` pairs in index order.
#[inline(always)]
fn for_each_face(n: usize, dim: usize, axis: usize, mut f: impl FnMut(usize, usize)) {
    let s = n.pow(axis as u32);
    let block = s * n;
    let total = n.pow(dim as u32);
    let mut b = 0;
    while b < total {
        for k in 0..n {
            let row = b + k * s;
            let next = if k + 1 == n { b } else { row + s };
            for j in 0..s {
                f(row + j, next + j);
            }
        }
        b += block;
    }
}

fn check_xi(xi: &Point, dim: usize) -> Result<()> {
    let norm2: f64 = xi.iter().map(|x| x * x).sum();
    if (norm2 - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(
            "xi",
            format!("must be a unit vector, |xi|^2 = {norm2}"),
        ));
    }
    if xi[dim..].iter().any(|x| *x != 0.0) {
        return Err(Error::invalid(
            "xi",
            "components beyond the dimension must vanish",
        ));
    }
    Ok(())
}

/// Unit vector along `axis`.
pub fn axis_xi(axis: usize) -> Point {
    let mut xi = [0.0; 3];
    xi[axis] = 1.0;
    xi
}

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub faces: Arc<FaceField>,
    pub t: f64,
    pub xi: Point,
    mass: f64,
    diag: Vec<f64>,
    rhs: Vec<f64>,
}

pub fn discretize(faces: Arc<FaceField>, t: f64, xi: Point) -> Result<LinearSystem> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(
            "T",
            format!("must be positive and finite, got {t}"),
        ));
    }
    let g = faces.grid;
    check_xi(&xi, g.dim())?;
    if faces.a.len() != g.dim() || faces.a.iter().any(|a| a.len() != g.cells()) {
        return Err(Error::invalid("faces", "degenerate grid"));
    }
    let h = g.h();
    let mass = h * h / t;
    let mut diag = vec![mass; g.cells()];
    let mut rhs = vec![0.0; g.cells()];
    for i in 0..g.dim() {
        let a = &faces.a[i];
        let xii = xi[i];
        for_each_face(g.n, g.dim(), i, |c, nb| {
            diag[c] += a[c];
            diag[nb] += a[c];
            rhs[c] += h * xii * a[c];
            rhs[nb] -= h * xii * a[c];
        });
    }
    Ok(LinearSystem {
        faces,
        t,
        xi,
        mass,
        diag,
        rhs,
    })
}

impl LinearSystem {
    pub fn grid(&self) -> GridSpec {
        self.faces.grid
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// `out = M u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let g = self.grid();
        for ((o, d), x) in out.iter_mut().zip(&self.diag).zip(u) {
            *o = d * x;
        }
        for i in 0..g.dim() {
            let a = &self.faces.a[i];
            for_each_face(g.n, g.dim(), i, |c, nb| {
                let af = a[c];
                out[c] -= af * u[nb];
                out[nb] -= af * u[c];
            });
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual `|b − Mφ| / |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverOptions {
    pub fn new(tol: f64) -> Self {
        SolverOptions {
            tol,
            max_iter: 100_000,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol <= 1e-4) {
            return Err(Error::invalid(
                "tol",
                format!("must lie in (0, 1e-4], got {}", self.tol),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorrectorSolution {
    pub subset: SubsetSelector,
    pub xi: Point,
    pub t: f64,
    pub phi: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub faces: Arc<FaceField>,
}

pub fn solve(system: &LinearSystem, tol: f64) -> Result<CorrectorSolution> {
    solve_with(system, SolverOptions::new(tol), None)
}

/// Jacobi-preconditioned conjugate gradients, optionally warm-started.
pub fn solve_with(
    system: &LinearSystem,
    opts: SolverOptions,
    initial: Option<&[f64]>,
) -> Result<CorrectorSolution> {
    opts.check()?;
    let n = system.diag.len();
    let b = &system.rhs;
    let bnorm = dot(b, b).sqrt();
    let mut x = match initial {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(_) => {
            return Err(Error::invalid(
                "initial",
                "length differs from the cell count",
            ))
        }
        None => vec![0.0; n],
    };
    let mut sol = CorrectorSolution {
        subset: SubsetSelector::empty(),
        xi: system.xi,
        t: system.t,
        phi: Vec::new(),
        residual: 0.0,
        iterations: 0,
        residual_history: Vec::new(),
        faces: system.faces.clone(),
    };
    if bnorm == 0.0 {
        sol.phi = vec![0.0; n];
        return Ok(sol);
    }
    let inv: Vec<f64> = system.diag.iter().map(|d| 1.0 / d).collect();
    let mut r = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut it = 0usize;
    'restart: loop {
        system.apply(&x, &mut q);
        for k in 0..n {
            r[k] = b[k] - q[k];
            z[k] = r[k] * inv[k];
            p[k] = z[k];
        }
        let mut rz = dot(&r, &z);
        loop {
            let rel = dot(&r, &r).sqrt() / bnorm;
            sol.residual_history.push(rel);
            if rel <= opts.tol {
                // confirm with the true residual, restart if the recursion drifted
                system.apply(&x, &mut q);
                let true_rel = b
                    .iter()
                    .zip(&q)
                    .map(|(b, q)| (b - q) * (b - q))
                    .sum::<f64>()
                    .sqrt()
                    / bnorm;
                if true_rel <= opts.tol {
                    sol.residual = true_rel;
                    break 'restart;
                }
                if it >= opts.max_iter {
                    return Err(Error::NonConvergence {
                        iterations: it,
                        residual: true_rel,
                    });
                }
                continue 'restart;
            }
            if it >= opts.max_iter {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: rel,
                });
            }
            it += 1;
            system.apply(&p, &mut q);
            let alpha = rz / dot(&p, &q);
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * q[k];
                z[k] = r[k] * inv[k];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
    }
    sol.phi = x;
    sol.iterations = it;
    Ok(sol)
}

impl CorrectorSolution {
    pub fn grid(&self) -> GridSpec {
        self.faces.grid
    }

    /// Face gradients `(φ(c + e_i) − φ(c)) / h`, one array per axis.
    pub fn gradient(&self) -> Vec<Vec<f64>> {
        gradient(&self.grid(), &self.phi)
    }

    /// `∇φ + ξ` on faces.
    pub fn shifted_gradient(&self) -> Vec<Vec<f64>> {
        let mut g = self.gradient();
        for (i, gi) in g.iter_mut().enumerate() {
            let xi = self.xi[i];
            gi.iter_mut().for_each(|v| *v += xi);
        }
        g
    }

    /// `(T⁻¹⟨φ²⟩, ⟨|∇φ|²⟩)`.
    pub fn energies(&self) -> (f64, f64) {
        let n = self.phi.len() as f64;
        let mass = neumaier_sum(self.phi.iter().map(|p| p * p)) / n / self.t;
        let grad = neumaier_sum(self.gradient().iter().flatten().map(|g| g * g)) / n;
        (mass, grad)
    }

    /// `⟨ξ·A(∇φ + ξ)⟩` on this solution's own medium.
    pub fn entry(&self) -> f64 {
        entry_unchecked(&self.faces, self, &self.xi)
    }

    pub fn export(&self, stem: &Path) -> Result<()> {
        export_grid(
            stem,
            &self.grid(),
            "cell",
            &[&self.phi],
            serde_json::json!({
                "subset": self.subset,
                "xi": self.xi,
                "T": self.t,
                "residual": self.residual,
                "iterations": self.iterations,
            }),
        )
    }

    /// Relative residual per iteration as CSV.
    pub fn write_residual_history(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{other:?}")),
        })?;
        w.write_record(["iteration", "relative_residual"])?;
        for (k, r) in self.residual_history.iter().enumerate() {
            w.write_record([k.to_string(), format!("{r:e}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn gradient(g: &GridSpec, phi: &[f64]) -> Vec<Vec<f64>> {
    let inv_h = 1.0 / g.h();
    (0..g.dim())
        .map(|i| {
            let mut out = vec![0.0; g.cells()];
            for_each_face(g.n, g.dim(), i, |c, nb| out[c] = (phi[nb] - phi[c]) * inv_h);
            out
        })
        .collect()
}

/// Discrete divergence of a face field, `Σ_i (g_i(c) − g_i(c − e_i)) / h`.
pub fn divergence(grid: &GridSpec, g: &[Vec<f64>]) -> Vec<f64> {
    let inv_h = 1.0 / grid.h();
    let mut out = vec![0.0; grid.cells()];
    for (i, gi) in g.iter().enumerate() {
        for_each_face(grid.n, grid.dim(), i, |c, nb| {
            out[c] += gi[c] * inv_h;
            out[nb] -= gi[c] * inv_h;
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `T⁻¹⟨φ²⟩`
    pub mass_energy: f64,
    /// `⟨|∇φ|²⟩`
    pub gradient_energy: f64,
    /// `T⁻¹⟨φ²⟩ + ⟨∇φ·A(∇φ + ξ)⟩`, zero for an exact solution.
    pub identity_residual: f64,
    /// Identity residual relative to the magnitude of its terms.
    pub relative: f64,
    /// `λ⁻²`, the a-priori bound on `⟨|∇φ|²⟩` for unit `ξ` (normalized media).
    pub gradient_bound: f64,
}

impl EnergyReport {
    pub fn identity_holds(&self, tol: f64) -> bool {
        self.relative <= 10.0 * tol
    }
}

pub fn energy_check(sol: &CorrectorSolution) -> EnergyReport {
    let (mass, grad) = sol.energies();
    let g = sol.gradient();
    let n = sol.phi.len() as f64;
    let mut quad = NeumaierSum::default();
    let mut lin = NeumaierSum::default();
    for (i, gi) in g.iter().enumerate() {
        for (a, v) in sol.faces.a[i].iter().zip(gi) {
            quad.add(a * v * v);
            lin.add(a * v * sol.xi[i]);
        }
    }
    let (quad, lin) = (quad.value() / n, lin.value() / n);
    let identity = mass + quad + lin;
    let scale = mass + quad + lin.abs();
    let max = sol.faces.a.iter().flatten().cloned().fold(0.0, f64::max);
    let min = sol
        .faces
        .a
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    EnergyReport {
        mass_energy: mass,
        gradient_energy: grad,
        identity_residual: identity,
        relative: if scale > 0.0 {
            identity.abs() / scale
        } else {
            0.0
        },
        gradient_bound: (max / min).powi(2),
    }
}

fn entry_unchecked(faces: &FaceField, sol: &CorrectorSolution, xi: &Point) -> f64 {
    let g = sol.gradient();
    let mut s = NeumaierSum::default();
    for (i, gi) in g.iter().enumerate() {
        if xi[i] == 0.0 {
            continue;
        }
        for (a, v) in faces.a[i].iter().zip(gi) {
            s.add(a * xi[i] * (v + xi[i]));
        }
    }
    s.value() / sol.phi.len() as f64
}

/// `⟨ξ·A(∇φ + ξ)⟩` from face fluxes.
pub fn homogenized_entry(faces: &FaceField, sol: &CorrectorSolution, xi: &Point) -> Result<f64> {
    if faces.grid != sol.grid() {
        return Err(Error::Mismatch("grids differ".into()));
    }
    if xi != &sol.xi {
        return Err(Error::Mismatch(format!(
            "solution solved for xi = {:?}",
            sol.xi
        )));
    }
    if !std::ptr::eq(faces, sol.faces.as_ref()) && faces != sol.faces.as_ref() {
        return Err(Error::Mismatch(
            "coefficient field differs from the one solved on".into(),
        ));
    }
    Ok(entry_unchecked(faces, sol, xi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum EvictionPolicy {
    KeepAll,
    /// Oldest insertion is dropped beyond this many entries.
    Fifo {
        capacity: usize,
    },
}

/// Correctors `φ_T^S` of one configuration for many subsets `S`.
pub struct CorrectorFamily {
    raster: Arc<Raster>,
    t: f64,
    xi: Point,
    opts: SolverOptions,
    eviction: EvictionPolicy,
    cache: RwLock<HashMap<SubsetSelector, Arc<CorrectorSolution>>>,
    order: Mutex<VecDeque<SubsetSelector>>,
    solves: AtomicUsize,
    iterations: AtomicUsize,
}

impl CorrectorFamily {
    pub fn new(raster: Arc<Raster>, t: f64, xi: Point, opts: SolverOptions) -> Result<Self> {
        opts.check()?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(
                "T",
                format!("must be positive and finite, got {t}"),
            ));
        }
        check_xi(&xi, raster.grid.dim())?;
        Ok(CorrectorFamily {
            raster,
            t,
            xi,
            opts,
            eviction: EvictionPolicy::KeepAll,
            cache: RwLock::new(HashMap::new()),
            order: Mutex::new(VecDeque::new()),
            solves: AtomicUsize::new(0),
            iterations: AtomicUsize::new(0),
        })
    }

    pub fn with_eviction(mut self, eviction: EvictionPolicy) -> Self {
        self.eviction = eviction;
        self
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn grid(&self) -> GridSpec {
        self.raster.grid
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn xi(&self) -> Point {
        self.xi
    }

    pub fn tol(&self) -> f64 {
        self.opts.tol
    }

    /// Number of linear solves performed so far.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn iteration_count(&self) -> usize {
        self.iterations.load(Ordering::Relaxed)
    }

    pub fn cached(&self, s: &SubsetSelector) -> Option<Arc<CorrectorSolution>> {
        self.cache.read().unwrap().get(s).cloned()
    }

    /// Cached solution, or an error if it was never solved.
    pub fn require(&self, s: &SubsetSelector) -> Result<Arc<CorrectorSolution>> {
        self.cached(s)
            .ok_or_else(|| Error::MissingSolution(s.clone()))
    }

    /// Initial guess for `φ^S`: the largest cached `φ^K` with `K ⊆ S`, plus
    /// `φ^{Y∪m} − φ^Y` for each missing `m`, using the largest cached pair with
    /// `Y ⊆ K`.
    fn warm_start(&self, s: &SubsetSelector) -> Option<(SubsetSelector, Vec<f64>)> {
        let cache = self.cache.read().unwrap();
        let pick =
            |a: &&SubsetSelector, b: &&SubsetSelector| a.len().cmp(&b.len()).then_with(|| b.cmp(a));
        let k = cache
            .keys()
            .filter(|k| k.is_subset(s))
            .max_by(pick)?
            .clone();
        let mut guess = cache[&k].phi.clone();
        for m in s.difference(&k).iter() {
            let pair = cache
                .keys()
                .filter(|y| {
                    y.contains(m) && y.without(m).is_subset(&k) && cache.contains_key(&y.without(m))
                })
                .max_by(pick);
            if let Some(ym) = pair {
                let (with, without) = (&cache[ym].phi, &cache[&ym.without(m)].phi);
                for ((g, a), b) in guess.iter_mut().zip(with).zip(without) {
                    *g += a - b;
                }
            }
        }
        Some((k, guess))
    }

    /// Solves `φ^S` unless cached.
    pub fn get(&self, s: &SubsetSelector) -> Result<Arc<CorrectorSolution>> {
        if let Some(sol) = self.cached(s) {
            return Ok(sol);
        }
        let wrap = |e: Error| Error::SubsetSolve {
            subset: s.clone(),
            source: Box::new(e),
        };
        let faces = Arc::new(self.raster.faces(s).map_err(wrap)?);
        let system = discretize(faces, self.t, self.xi).map_err(wrap)?;
        let warm = self.warm_start(s);
        let mut sol =
            solve_with(&system, self.opts, warm.as_ref().map(|w| w.1.as_slice())).map_err(wrap)?;
        sol.subset = s.clone();
        self.solves.fetch_add(1, Ordering::Relaxed);
        self.iterations.fetch_add(sol.iterations, Ordering::Relaxed);
        log::trace!(
            "solved {s}: {} iterations, warm start {:?}",
            sol.iterations,
            warm.map(|w| w.0)
        );
        let sol = Arc::new(sol);
        self.insert(s.clone(), sol.clone());
        Ok(sol)
    }

    fn insert(&self, s: SubsetSelector, sol: Arc<CorrectorSolution>) {
        let mut cache = self.cache.write().unwrap();
        let mut order = self.order.lock().unwrap();
        if cache.insert(s.clone(), sol).is_none() {
            order.push_back(s);
        }
        if let EvictionPolicy::Fifo { capacity } = self.eviction {
            while cache.len() > capacity.max(1) {
                match order.pop_front() {
                    Some(old) => {
                        cache.remove(&old);
                    }
                    None => break,
                }
            }
        }
    }

    pub fn solve_all(&self, subsets: &[SubsetSelector]) -> Result<()> {
        for s in subsets {
            self.get(s)?;
        }
        Ok(())
    }

    /// Drops every cached solution.
    pub fn clear(&self) {
        self.cache.write().unwrap().clear();
        self.order.lock().unwrap().clear();
    }
}

pub fn family_solve(
    raster: Arc<Raster>,
    subsets: &[SubsetSelector],
    t: f64,
    xi: Point,
    tol: f64,
) -> Result<CorrectorFamily> {
    let fam = CorrectorFamily::new(raster, t, xi, SolverOptions::new(tol))?;
    fam.solve_all(subsets)?;
    Ok(fam)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferenceReport {
    /// `|LHS − RHS|_{D⁻¹}` relative to the right-hand sides of the solves involved.
    pub discrepancy: f64,
    pub lhs_norm: f64,
    pub rhs_norm: f64,
}

/// Evaluates both sides of the equation satisfied by `δ^{F∪G} φ^H`:
///
/// `(1/T) δ^{F∪G}φ^H − ∇·A^{F∪H} ∇δ^{F∪G}φ^H
///   = Σ_{S⊆F} Σ_{U⊆G} (−1)^{|S|+|U|+1} ∇·C_{S∪U||H∪(F∖S)} ∇δ_ξ^{(F∖S)∪(G∖U)} φ^{U∪H}`
///
/// with the C-terms taken relative to the reference medium `A^∅`. The
/// discrepancy is `|LHS − RHS|_{D⁻¹}` over `Σ_X |∇·A^X ξ|_{D⁻¹}`, the sum running
/// over the correctors `φ^X` entering the identity; `D` is the diagonal of the
/// operator on the left.
pub fn verify_difference_equation(
    family: &CorrectorFamily,
    f: &SubsetSelector,
    g: &SubsetSelector,
    h: &SubsetSelector,
) -> Result<DifferenceReport> {
    for (a, b) in [(f, g), (f, h), (g, h)] {
        if let Some(n) = a.iter().find(|n| b.contains(*n)) {
            return Err(Error::Overlap(n));
        }
    }
    let fg = f.union(g);
    if fg.is_empty() {
        return Err(Error::invalid("F ∪ G", "must be nonempty"));
    }
    let cluster = fg.union(h);
    let k = cluster.len();
    if k > 12 {
        return Err(Error::invalid("F ∪ G ∪ H", "too many members"));
    }
    let mask_of = |s: &SubsetSelector| -> u32 {
        cluster
            .iter()
            .enumerate()
            .filter(|(_, n)| s.contains(*n))
            .fold(0, |m, (b, _)| m | 1 << b)
    };
    let (mf, mg, mh) = (mask_of(f), mask_of(g), mask_of(h));
    let grid = family.grid();
    let raster = family.raster();
    let empty = SubsetSelector::empty();
    let local = raster.local(&empty, &cluster)?;
    let sols: HashMap<u32, Arc<CorrectorSolution>> = submasks(mf | mg)
        .map(|x| Ok((x | mh, family.require(&cluster.pick(x | mh))?)))
        .collect::<Result<_>>()?;
    let w = |x: u32| sols[&x].shifted_gradient();
    let sign = |m: u32| parity(m.count_ones() as usize) as f64;

    // δ^{F∪G} φ^H
    let n = grid.cells();
    let mut u = vec![0.0; n];
    for x in submasks(mf | mg) {
        let s = sign((mf | mg) & !x);
        for (uc, p) in u.iter_mut().zip(&sols[&(x | mh)].phi) {
            *uc += s * p;
        }
    }
    let base = raster.faces(&empty)?;
    let mut a_fh = base.a.clone();
    for lf in &local.faces {
        a_fh[lf.axis][lf.cell] += local.valuation(lf, mf | mh);
    }
    let mut flux = gradient(&grid, &u);
    for (fi, ai) in flux.iter_mut().zip(&a_fh) {
        for (v, a) in fi.iter_mut().zip(ai) {
            *v *= a;
        }
    }
    let div_flux = divergence(&grid, &flux);
    let inv_t = 1.0 / family.t();
    let lhs: Vec<f64> = u
        .iter()
        .zip(&div_flux)
        .map(|(v, d)| v * inv_t - d)
        .collect();

    let h2 = grid.h() * grid.h();
    let mut dinv = vec![inv_t; n];
    for (i, ai) in a_fh.iter().enumerate() {
        for c in 0..n {
            let nb = grid.plus(c, i);
            dinv[c] += ai[c] / h2;
            dinv[nb] += ai[c] / h2;
        }
    }
    dinv.iter_mut().for_each(|d| *d = 1.0 / *d);
    let norm = |v: &[f64]| {
        v.iter()
            .zip(&dinv)
            .map(|(x, d)| x * x * d)
            .sum::<f64>()
            .sqrt()
    };

    let v_of = |lf: &crate::media::LocalFace, m: u32| local.valuation(lf, m);
    let c_excl = |lf: &crate::media::LocalFace, e: u32, fx: u32| -> f64 {
        let vf = v_of(lf, fx);
        submasks(e)
            .skip(1)
            .map(|s| -sign(s) * (v_of(lf, s | fx) - vf))
            .sum()
    };
    let mut rhs = vec![0.0; n];
    let mut wcache: HashMap<u32, Vec<Vec<f64>>> = HashMap::new();
    for s in submasks(mf) {
        for uu in submasks(mg) {
            if s | uu == 0 {
                continue;
            }
            let outer = -sign(s | uu);
            let excl = mh | (mf & !s);
            let rest = (mf & !s) | (mg & !uu);
            let mut term = vec![vec![0.0; n]; grid.dim()];
            for lf in &local.faces {
                let c = c_excl(lf, s | uu, excl);
                if c == 0.0 {
                    continue;
                }
                let mut dgrad = 0.0;
                for x in submasks(rest) {
                    let key = x | uu | mh;
                    let wx = wcache.entry(key).or_insert_with(|| w(key));
                    dgrad += sign(rest & !x) * wx[lf.axis][lf.cell];
                }
                term[lf.axis][lf.cell] = outer * c * dgrad;
            }
            let dv = divergence(&grid, &term);
            for (r, d) in rhs.iter_mut().zip(&dv) {
                *r += d;
            }
        }
    }
    // LHS − RHS is a signed sum of the residuals of the constituent solves,
    // so it is measured against the right-hand sides of those solves.
    let mut scale = 0.0;
    for sol in sols.values() {
        let b: Vec<Vec<f64>> = (0..grid.dim())
            .map(|i| sol.faces.a[i].iter().map(|a| a * sol.xi[i]).collect())
            .collect();
        scale += norm(&divergence(&grid, &b));
    }
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    Ok(DifferenceReport {
        discrepancy: if scale > 0.0 {
            norm(&diff) / scale
        } else {
            0.0
        },
        lhs_norm: norm(&lhs),
        rhs_norm: norm(&rhs),
    })
}
