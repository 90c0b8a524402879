//! Cluster-expansion derivatives of `p ↦ ξ·A_T^(p) ξ` and Monte-Carlo probes.
//!
//! For a configuration with frozen marks `E`, the `k`-th Taylor coefficient is
//! `Δ^k = Σ_{|F|=k} δ^F f(E∖F)` with `f(S) = ⟨ξ·A^S(∇φ^S + ξ)⟩`, the sum running
//! over unordered `k`-subsets (no `1/k!`). It is evaluated in three equivalent
//! ways. Writing `B = E∖F`, `w_X = ∇φ^{B∪X} + ξ` and
//! `∇δ_ξ^G φ^{B∪H} = Σ_{S⊆G} (−1)^{|G∖S|} w_{S∪H}`:
//!
//! * form 0: `Σ_{G⊊F} (−1)^{|F∖G|+1} ⟨∇δ_ξ^G φ^B · C_{F∖G||G} w_F⟩`
//! * form 1: `Σ_{∅≠G⊆F} (−1)^{|G|+1} ⟨w_∅ · C_G ∇δ_ξ^{F∖G} φ^{B∪G}⟩`
//! * form 2: `Σ_{G⊆F} (−1)^{|F∖G|} ⟨ξ·A^{B∪G} w_G⟩`
//!
//! The C-terms are face valuations relative to `A^B` (see [`crate::setcalc`]).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::closedform::{electric_cm_slope, volume_fraction, ElectricPhases};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::media::{GridSpec, LocalPerturbation, Phases, Raster};
use crate::process::InclusionConfiguration;
use crate::setcalc::{c_inter, c_inter_excl, k_tuples_within, parity, submasks, SubsetSelector};
use crate::solver::{gradient, CorrectorFamily, CorrectorSolution, SolverOptions};
use crate::stats::{fit_line, fit_log_log, neumaier_sum, Estimate, LineFit, NeumaierSum};

/// Numerical settings shared by all probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub grid: GridSpec,
    pub phases: Phases,
    pub t: f64,
    /// Unit directions; results are averaged over them. Two axes give
    /// `tr(A)/d` in two dimensions.
    pub directions: Vec<Point>,
    pub tol: f64,
    /// Configurations with a larger overlap degree are rejected.
    pub gamma_max: Option<usize>,
    /// Threads working on samples; results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Setup {
    pub fn new(grid: GridSpec, phases: Phases, t: f64, xi: Point, tol: f64) -> Self {
        Setup {
            grid,
            phases,
            t,
            directions: vec![xi],
            tol,
            gamma_max: None,
            workers: 1,
        }
    }

    /// Averages over all coordinate axes.
    pub fn trace(mut self) -> Self {
        self.directions = (0..self.grid.dim()).map(crate::solver::axis_xi).collect();
        self
    }

    pub fn with_t(&self, t: f64) -> Self {
        Setup { t, ..self.clone() }
    }

    /// Default truncation radius `min(L/2, 3√T)`.
    pub fn default_r_cut(&self) -> f64 {
        (self.grid.bx.side / 2.0).min(3.0 * self.t.sqrt())
    }
}

/// Correctors of one configuration, one family per direction.
pub struct ConfigurationSolver {
    pub config: InclusionConfiguration,
    raster: Arc<Raster>,
    families: Vec<CorrectorFamily>,
}

impl ConfigurationSolver {
    pub fn new(config: InclusionConfiguration, setup: &Setup) -> Result<Self> {
        if let Some(limit) = setup.gamma_max {
            config.check_gamma(limit)?;
        }
        let raster = Arc::new(Raster::new(&config, setup.grid, setup.phases)?);
        if let Some(limit) = setup.gamma_max {
            if raster.gamma > limit {
                return Err(Error::GammaExceeded {
                    measured: raster.gamma,
                    limit,
                });
            }
        }
        Self::with_raster(config, raster, setup)
    }

    pub fn with_raster(
        config: InclusionConfiguration,
        raster: Arc<Raster>,
        setup: &Setup,
    ) -> Result<Self> {
        if setup.directions.is_empty() {
            return Err(Error::invalid(
                "directions",
                "at least one direction required",
            ));
        }
        let families = setup
            .directions
            .iter()
            .map(|xi| {
                CorrectorFamily::new(raster.clone(), setup.t, *xi, SolverOptions::new(setup.tol))
            })
            .collect::<Result<_>>()?;
        Ok(ConfigurationSolver {
            config,
            raster,
            families,
        })
    }

    /// Same configuration and raster, another mass parameter.
    pub fn at_t(&self, setup: &Setup) -> Result<Self> {
        Self::with_raster(self.config.clone(), self.raster.clone(), setup)
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn families(&self) -> &[CorrectorFamily] {
        &self.families
    }

    pub fn solve_count(&self) -> usize {
        self.families.iter().map(|f| f.solve_count()).sum()
    }

    fn mean_over_directions(
        &self,
        mut f: impl FnMut(&CorrectorFamily) -> Result<f64>,
    ) -> Result<f64> {
        let mut s = 0.0;
        for fam in &self.families {
            s += f(fam)?;
        }
        Ok(s / self.families.len() as f64)
    }

    /// `f(S) = ⟨ξ·A^S(∇φ^S + ξ)⟩`, averaged over directions.
    pub fn entry(&self, s: &SubsetSelector) -> Result<f64> {
        self.mean_over_directions(|fam| Ok(fam.get(s)?.entry()))
    }

    /// The three forms of `δ^F f(B)` for the cluster `F` on top of `B`.
    pub fn cluster_forms(&self, base: &SubsetSelector, f: &SubsetSelector) -> Result<[f64; 3]> {
        if let Some(n) = base.iter().find(|n| f.contains(*n)) {
            return Err(Error::Overlap(n));
        }
        let local = self.raster.local(base, f)?;
        let mut out = [0.0; 3];
        for fam in &self.families {
            let v = forms_for_family(fam, &local, base, f)?;
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        let m = self.families.len() as f64;
        Ok(out.map(|x| x / m))
    }
}

fn sign(m: u32) -> f64 {
    parity(m.count_ones() as usize) as f64
}

fn forms_for_family(
    fam: &CorrectorFamily,
    local: &LocalPerturbation,
    base: &SubsetSelector,
    f: &SubsetSelector,
) -> Result<[f64; 3]> {
    let k = f.len();
    let full: u32 = (1u32 << k) - 1;
    let sols: Vec<Arc<CorrectorSolution>> = (0..=full)
        .map(|x| fam.get(&base.union(&f.pick(x))))
        .collect::<Result<_>>()?;
    if k == 0 {
        // δ^∅ f(B) = f(B); the form 0 and 1 sums are empty
        let e = sols[0].entry();
        return Ok([e; 3]);
    }
    let grid = fam.grid();
    let xi = fam.xi();
    let inv_h = 1.0 / grid.h();
    let ncell = grid.cells() as f64;
    let inv_n = 1.0 / ncell;

    // w_X on the local faces
    let w: Vec<Vec<f64>> = sols
        .iter()
        .map(|s| {
            local
                .faces
                .iter()
                .map(|lf| {
                    (s.phi[grid.plus(lf.cell, lf.axis)] - s.phi[lf.cell]) * inv_h + xi[lf.axis]
                })
                .collect()
        })
        .collect();
    // ∇δ_ξ^G φ^{B∪H} at local face `j`
    let ddelta = |g: u32, h: u32, j: usize| -> f64 {
        submasks(g)
            .map(|s| sign(g & !s) * w[(s | h) as usize][j])
            .sum()
    };

    let mut form0 = NeumaierSum::default();
    let mut form1 = NeumaierSum::default();
    let mut form2 = NeumaierSum::default();
    for (j, lf) in local.faces.iter().enumerate() {
        let v = |u: u32| local.valuation(lf, u);
        for g in submasks(full) {
            if g != full {
                let c = c_inter_excl(&v, full & !g, g);
                if c != 0.0 {
                    form0.add(-sign(full & !g) * ddelta(g, 0, j) * c * w[full as usize][j]);
                }
            }
            if g != 0 {
                let c = c_inter(&v, g);
                if c != 0.0 {
                    form1.add(-sign(g) * w[0][j] * c * ddelta(full & !g, g, j));
                }
                // local part of form 2: ξ·(A^{B∪G} − A^B) w_G
                form2.add(sign(full & !g) * xi[lf.axis] * v(g) * w[g as usize][j]);
            }
        }
    }
    // global part of form 2: ⟨ξ·A^B ∇δ_ξ^F φ^B⟩
    let mut u = vec![0.0; grid.cells()];
    for x in 0..=full {
        let s = sign(full & !x);
        for (uc, p) in u.iter_mut().zip(&sols[x as usize].phi) {
            *uc += s * p;
        }
    }
    let a_base = &sols[0].faces;
    let du = gradient(&grid, &u);
    for i in 0..grid.dim() {
        if xi[i] == 0.0 {
            continue;
        }
        for (a, d) in a_base.a[i].iter().zip(&du[i]) {
            form2.add(xi[i] * a * d);
        }
    }
    Ok([
        form0.value() * inv_n,
        form1.value() * inv_n,
        form2.value() * inv_n,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formula {
    Form0,
    Form1,
    Form2,
}

impl Formula {
    pub fn index(self) -> usize {
        match self {
            Formula::Form0 => 0,
            Formula::Form1 => 1,
            Formula::Form2 => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Formula::Form0),
            1 => Ok(Formula::Form1),
            2 => Ok(Formula::Form2),
            _ => Err(Error::invalid(
                "formula",
                format!("must be 0, 1 or 2, got {i}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeValue {
    pub k: usize,
    pub p0: f64,
    pub t: f64,
    pub r_cut: f64,
    /// `Δ^k` by forms 0, 1, 2.
    pub forms: [f64; 3],
    pub tuples: usize,
}

impl DerivativeValue {
    /// `k! Δ^k`, the derivative itself.
    pub fn derivative(&self, formula: Formula) -> f64 {
        let fact: f64 = (1..=self.k).map(|i| i as f64).product();
        fact * self.forms[formula.index()]
    }

    /// Largest pairwise relative difference between the forms.
    pub fn spread(&self) -> f64 {
        let scale = self.forms.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut d = 0.0f64;
        for i in 0..3 {
            for j in 0..i {
                d = d.max((self.forms[i] - self.forms[j]).abs());
            }
        }
        d / scale
    }
}

fn check_r_cut(setup: &Setup, r_cut: f64) -> Result<()> {
    if !(r_cut > 0.0) || r_cut > setup.grid.bx.side / 2.0 * (1.0 + 1e-12) {
        return Err(Error::invalid(
            "r_cut",
            format!("must lie in (0, L/2], got {r_cut}"),
        ));
    }
    Ok(())
}

/// All three forms of `Δ^k` at marks frozen at `p0`.
pub fn delta_k_forms(
    solver: &ConfigurationSolver,
    k: usize,
    p0: f64,
    r_cut: f64,
) -> Result<DerivativeValue> {
    let marked = solver.config.marked_at(p0);
    let tuples = k_tuples_within(&solver.config, k, r_cut)?;
    let mut sums = [NeumaierSum::default(); 3];
    for f in &tuples {
        let base = marked.difference(f);
        let v = solver.cluster_forms(&base, f)?;
        for (s, x) in sums.iter_mut().zip(v) {
            s.add(x);
        }
    }
    Ok(DerivativeValue {
        k,
        p0,
        t: solver.families[0].t(),
        r_cut,
        forms: sums.map(|s| s.value()),
        tuples: tuples.len(),
    })
}

/// `Δ_T^{(p0),k}` of one configuration by the chosen formula.
pub fn delta_k(
    config: &InclusionConfiguration,
    k: usize,
    formula: Formula,
    p0: f64,
    setup: &Setup,
    r_cut: f64,
) -> Result<f64> {
    check_r_cut(setup, r_cut)?;
    let solver = ConfigurationSolver::new(config.clone(), setup)?;
    Ok(delta_k_forms(&solver, k, p0, r_cut)?.forms[formula.index()])
}

/// Runs `f` on every sample, spreading samples over `workers` threads.
/// Results come back in sample order.
pub(crate) fn per_sample<T: Send>(
    workers: usize,
    ensemble: &[InclusionConfiguration],
    f: impl Fn(usize, &InclusionConfiguration) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let run = |i: usize| {
        f(i, &ensemble[i]).map_err(|e| Error::Sample {
            sample: i,
            source: Box::new(e),
        })
    };
    let workers = workers.clamp(1, ensemble.len().max(1));
    if workers == 1 {
        return (0..ensemble.len()).map(run).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..ensemble.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= ensemble.len() {
                    break;
                }
                let r = run(i);
                done.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every sample visited"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPEstimate {
    pub p: f64,
    pub estimate: Estimate,
    /// Per-sample `⟨(∇φ + ξ)·C^(p)(∇φ^(p) + ξ)⟩`.
    pub samples: Vec<f64>,
    /// Largest per-sample gap to the direct difference of homogenized entries.
    pub max_gap: f64,
}

/// `⟨(∇φ + ξ)·(A^{E1} − A^{E0})(∇φ^{E1} + ξ)⟩` averaged over directions.
fn bilinear_difference(
    solver: &ConfigurationSolver,
    e0: &SubsetSelector,
    e1: &SubsetSelector,
) -> Result<f64> {
    solver.mean_over_directions(|fam| {
        let s0 = fam.get(e0)?;
        let s1 = fam.get(e1)?;
        let w0 = s0.shifted_gradient();
        let w1 = s1.shifted_gradient();
        let mut acc = NeumaierSum::default();
        for i in 0..w0.len() {
            for c in 0..w0[i].len() {
                let dc = s1.faces.a[i][c] - s0.faces.a[i][c];
                if dc != 0.0 {
                    acc.add(w0[i][c] * dc * w1[i][c]);
                }
            }
        }
        Ok(acc.value() / s0.phi.len() as f64)
    })
}

/// Monte-Carlo `Δ_T^(p)`, marks shifted from each configuration's own `p0`.
pub fn delta_p(
    ensemble: &[InclusionConfiguration],
    p: f64,
    setup: &Setup,
) -> Result<DeltaPEstimate> {
    let per = per_sample(setup.workers, ensemble, |_, c| {
        let solver = ConfigurationSolver::new(c.clone(), setup)?;
        let e0 = c.marked();
        let e1 = crate::process::remark_shift(c, p)?.marked();
        let lemma = bilinear_difference(&solver, &e0, &e1)?;
        let f0 = solver.entry(&e0)?;
        let direct = solver.entry(&e1)? - f0;
        let gap = (lemma - direct).abs();
        if gap > 100.0 * setup.tol * f0.abs().max(1.0) {
            return Err(Error::Mismatch(format!(
                "bilinear form {lemma:e} vs entry difference {direct:e}"
            )));
        }
        Ok((lemma, gap))
    })?;
    let samples: Vec<f64> = per.iter().map(|x| x.0).collect();
    let max_gap = per.iter().fold(0.0f64, |m, x| m.max(x.1));
    Ok(DeltaPEstimate {
        p,
        estimate: Estimate::from_samples(&samples),
        samples,
        max_gap,
    })
}

/// One row of a p-table, as written to CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub p: f64,
    pub value: f64,
    pub stderr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemainderEstimator {
    /// Subtracts the cluster increments of the newly marked inclusions of each
    /// sample, `f(E_p) − f(E) − Σ_{n∈E_p∖E} δ^n f(E)` (and pairs for `k = 2`).
    /// Unbiased for the remainder and far less noisy.
    ControlVariate,
    /// `f(E_p) − f(E) − Σ_j p^j Δ^j` with `Δ^j` of the same sample.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub p: f64,
    pub remainder: Estimate,
    /// The standard error exceeds the magnitude of the mean.
    pub noise_dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderTable {
    pub k: usize,
    pub estimator: RemainderEstimator,
    pub rows: Vec<RemainderRow>,
    /// Log-log fit of `|remainder|` against `p`.
    pub fit: Option<LineFit>,
}

fn check_p_grid(p_grid: &[f64], p0: f64) -> Result<()> {
    if p_grid.is_empty() {
        return Err(Error::invalid("p_grid", "empty"));
    }
    for &p in p_grid {
        if !(p > 0.0 && p <= 0.25) || p0 + p > 1.0 {
            return Err(Error::invalid(
                "p_grid",
                format!("values must lie in (0, 0.25] with p0 + p <= 1, got {p}"),
            ));
        }
    }
    Ok(())
}

/// `Δ_T^(p) − Σ_{j≤k} p^j Δ_T^j` over a grid of `p` with coupled marks.
pub fn expansion_remainder(
    ensemble: &[InclusionConfiguration],
    p_grid: &[f64],
    k: usize,
    setup: &Setup,
    estimator: RemainderEstimator,
    r_cut: f64,
) -> Result<RemainderTable> {
    if k > 2 {
        return Err(Error::invalid("k", "remainders implemented for k <= 2"));
    }
    let p0 = ensemble.first().map(|c| c.p0).unwrap_or(0.0);
    check_p_grid(p_grid, p0)?;
    let bx = setup.grid.bx;
    let values: Vec<Vec<f64>> = per_sample(setup.workers, ensemble, |_, c| {
        let solver = ConfigurationSolver::new(c.clone(), setup)?;
        let e0 = c.marked();
        let f0 = solver.entry(&e0)?;
        let plain_terms: Vec<f64> = if estimator == RemainderEstimator::Plain {
            (1..=k)
                .map(|j| Ok(delta_k_forms(&solver, j, c.p0, r_cut)?.forms[2]))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut row = Vec::with_capacity(p_grid.len());
        for &p in p_grid {
            let e1 = c.marked_at(c.p0 + p);
            let mut r = solver.entry(&e1)? - f0;
            match estimator {
                RemainderEstimator::Plain => {
                    for (j, d) in plain_terms.iter().enumerate() {
                        r -= p.powi(j as i32 + 1) * d;
                    }
                }
                RemainderEstimator::ControlVariate => {
                    let fresh = e1.difference(&e0);
                    let mut single = BTreeMap::new();
                    if k >= 1 {
                        for n in fresh.iter() {
                            let d = solver.entry(&e0.with(n))? - f0;
                            single.insert(n, d);
                            r -= d;
                        }
                    }
                    if k >= 2 {
                        let idx = fresh.as_slice();
                        for a in 0..idx.len() {
                            for b in a + 1..idx.len() {
                                let (n, m) = (idx[a], idx[b]);
                                if bx.distance(c.center(n), c.center(m)) <= r_cut {
                                    let both = solver.entry(&e0.with(n).with(m))? - f0;
                                    r -= both - single[&n] - single[&m];
                                }
                            }
                        }
                    }
                }
            }
            row.push(r);
        }
        Ok(row)
    })?;
    let rows: Vec<RemainderRow> = p_grid
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let xs: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let e = Estimate::from_samples(&xs);
            RemainderRow {
                p,
                remainder: e,
                noise_dominated: e.stderr > e.mean.abs(),
            }
        })
        .collect();
    let fit = log_fit(rows.iter().map(|r| (r.p, r.remainder)));
    Ok(RemainderTable {
        k,
        estimator,
        rows,
        fit,
    })
}

/// Unweighted log-log fit of `|mean|` against `x`, skipping exact zeros.
fn log_fit(points: impl Iterator<Item = (f64, Estimate)>) -> Option<LineFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = points
        .filter(|(_, e)| e.mean != 0.0)
        .map(|(x, e)| (x, e.mean.abs()))
        .unzip();
    (x.len() >= 2).then(|| fit_log_log(&x, &y, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<(f64, Estimate)>,
    pub fit: Option<LineFit>,
}

/// `E⟨|∇(φ^(p) − φ)|²⟩` over a grid of `p`.
pub fn scaling_probe(
    ensemble: &[InclusionConfiguration],
    p_grid: &[f64],
    setup: &Setup,
) -> Result<ScalingTable> {
    let p0 = ensemble.first().map(|c| c.p0).unwrap_or(0.0);
    check_p_grid(p_grid, p0)?;
    let values: Vec<Vec<f64>> = per_sample(setup.workers, ensemble, |_, c| {
        let solver = ConfigurationSolver::new(c.clone(), setup)?;
        let e0 = c.marked();
        p_grid
            .iter()
            .map(|&p| {
                let e1 = c.marked_at(c.p0 + p);
                solver
                    .mean_over_directions(|fam| Ok(gradient_gap(&*fam.get(&e0)?, &*fam.get(&e1)?)))
            })
            .collect()
    })?;
    let rows: Vec<(f64, Estimate)> = p_grid
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            (
                p,
                Estimate::from_samples(&values.iter().map(|v| v[j]).collect::<Vec<_>>()),
            )
        })
        .collect();
    let fit = log_fit(rows.iter().copied());
    Ok(ScalingTable { rows, fit })
}

/// `⟨|∇(φ_a − φ_b)|²⟩` over faces, summed over components.
pub fn gradient_gap(a: &CorrectorSolution, b: &CorrectorSolution) -> f64 {
    let diff: Vec<f64> = a.phi.iter().zip(&b.phi).map(|(x, y)| x - y).collect();
    let g = gradient(&a.grid(), &diff);
    neumaier_sum(g.iter().flatten().map(|v| v * v)) / a.phi.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub t: f64,
    pub value: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProbe {
    pub ladder: Vec<f64>,
    /// `E⟨|∇(φ_T − φ_{2T})|²⟩` per rung.
    pub gradient_differences: Vec<RateRow>,
    /// Decay exponent: minus the slope of `log₂` value against `log₂ T`.
    pub exponent: f64,
    pub exponent_stderr: f64,
    /// `|Δ_T^1 − Δ_{2T}^1|` per rung, when requested.
    pub derivative_differences: Vec<RateRow>,
    pub derivative_exponent: Option<f64>,
}

/// Measures the decay of `φ_T − φ_{2T}` along a doubling ladder on the medium
/// with marks thresholded at `p`.
pub fn rate_probe(
    ensemble: &[InclusionConfiguration],
    ladder: &[f64],
    p: f64,
    setup: &Setup,
    with_derivatives: bool,
) -> Result<RateProbe> {
    if ladder.len() < 3 {
        return Err(Error::invalid("T_ladder", "need at least 3 rungs"));
    }
    if ladder.windows(2).any(|w| (w[1] / w[0] - 2.0).abs() > 1e-12) {
        return Err(Error::invalid("T_ladder", "rungs must double"));
    }
    let mut ts: Vec<f64> = ladder.to_vec();
    ts.push(2.0 * ladder[ladder.len() - 1]);
    let per: Vec<(Vec<f64>, Vec<f64>)> = per_sample(setup.workers, ensemble, |_, c| {
        let c = c.at(p)?;
        let e = c.marked();
        let first = ConfigurationSolver::new(c.clone(), &setup.with_t(ts[0]))?;
        let mut solvers = vec![first];
        for &t in &ts[1..] {
            let s = solvers[0].at_t(&setup.with_t(t))?;
            solvers.push(s);
        }
        let mut grads = Vec::new();
        for j in 0..ladder.len() {
            let (a, b) = (&solvers[j], &solvers[j + 1]);
            let mut s = 0.0;
            for (fa, fb) in a.families.iter().zip(&b.families) {
                s += gradient_gap(&*fa.get(&e)?, &*fb.get(&e)?);
            }
            grads.push(s / a.families.len() as f64);
        }
        let mut derivs = Vec::new();
        if with_derivatives {
            let r_cut = setup.grid.bx.side / 2.0;
            let d: Vec<f64> = solvers
                .iter()
                .map(|s| Ok(delta_k_forms(s, 1, p, r_cut)?.forms[2]))
                .collect::<Result<_>>()?;
            derivs = d.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
        }
        Ok((grads, derivs))
    })?;
    let column = |j: usize, which: usize| -> Estimate {
        let xs: Vec<f64> = per
            .iter()
            .map(|(g, d)| if which == 0 { g[j] } else { d[j] })
            .collect();
        Estimate::from_samples(&xs)
    };
    let gradient_differences: Vec<RateRow> = ladder
        .iter()
        .enumerate()
        .map(|(j, &t)| RateRow {
            t,
            value: column(j, 0),
        })
        .collect();
    let fit_rows = |rows: &[RateRow]| -> Option<LineFit> {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.value.mean > 0.0)
            .map(|r| (r.t.log2(), r.value.mean.log2()))
            .unzip();
        (x.len() >= 2).then(|| fit_line(&x, &y, None))
    };
    let g = fit_rows(&gradient_differences);
    let derivative_differences: Vec<RateRow> = if with_derivatives {
        ladder
            .iter()
            .enumerate()
            .map(|(j, &t)| RateRow {
                t,
                value: column(j, 1),
            })
            .collect()
    } else {
        Vec::new()
    };
    let derivative_exponent = fit_rows(&derivative_differences).map(|f| -f.slope);
    Ok(RateProbe {
        ladder: ladder.to_vec(),
        exponent: g.map(|f| -f.slope).unwrap_or(f64::NAN),
        exponent_stderr: g.map(|f| f.slope_stderr).unwrap_or(f64::NAN),
        gradient_differences,
        derivative_differences,
        derivative_exponent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyFamilyStats {
    pub t: f64,
    /// `S_j^k = Σ_{|G|=k−j} ⟨|Σ_{|F|=j, F∩G=∅} ∇δ^{F∪G} φ|²⟩`, keyed `"S_j^k"`.
    pub values: BTreeMap<String, f64>,
    pub pairs: usize,
}

/// Torus-average estimates of `S_j^k` for `k ≤ 2`. Pairs farther apart than
/// `r_cut` are skipped; `None` keeps all pairs.
pub fn energy_family(
    solver: &ConfigurationSolver,
    k: usize,
    r_cut: Option<f64>,
) -> Result<EnergyFamilyStats> {
    if !(1..=2).contains(&k) {
        return Err(Error::invalid(
            "k",
            "energy family implemented for k in {1, 2}",
        ));
    }
    let config = &solver.config;
    let n = config.len();
    let marked = config.marked();
    let bx = config.bx();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| {
            r_cut.is_none_or(|r| bx.distance(config.center(a), config.center(b)) <= r)
        })
        .collect();
    let grid = solver.raster.grid;
    let cells = grid.cells();
    let energy = |u: &[f64]| -> f64 {
        neumaier_sum(gradient(&grid, u).iter().flatten().map(|v| v * v)) / cells as f64
    };
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for fam in &solver.families {
        let delta = |f: &SubsetSelector| -> Result<Vec<f64>> {
            let base = marked.difference(f);
            let mut u = vec![0.0; cells];
            for g in f.subsets() {
                let s = parity(f.len() - g.len()) as f64;
                for (uc, p) in u.iter_mut().zip(&fam.get(&base.union(&g))?.phi) {
                    *uc += s * p;
                }
            }
            Ok(u)
        };
        let mut vals: Vec<(String, f64)> = Vec::new();
        // k = 1
        let mut sum1 = vec![0.0; cells];
        let mut s01 = 0.0;
        for a in 0..n {
            let d = delta(&SubsetSelector::singleton(a))?;
            s01 += energy(&d);
            sum1.iter_mut().zip(&d).for_each(|(s, x)| *s += x);
        }
        vals.push(("S_0^1".into(), s01));
        vals.push(("S_1^1".into(), energy(&sum1)));
        if k == 2 {
            let mut per_m = vec![vec![0.0; cells]; n];
            let mut sum2 = vec![0.0; cells];
            let mut s02 = 0.0;
            for &(a, b) in &pairs {
                let d = delta(&SubsetSelector::new([a, b])?)?;
                s02 += energy(&d);
                for m in [a, b] {
                    per_m[m].iter_mut().zip(&d).for_each(|(s, x)| *s += x);
                }
                sum2.iter_mut().zip(&d).for_each(|(s, x)| *s += x);
            }
            vals.push(("S_0^2".into(), s02));
            vals.push(("S_1^2".into(), per_m.iter().map(|u| energy(u)).sum()));
            vals.push(("S_2^2".into(), energy(&sum2)));
        }
        for (key, v) in vals {
            *acc.entry(key).or_insert(0.0) += v / solver.families.len() as f64;
        }
    }
    Ok(EnergyFamilyStats {
        t: solver.families[0].t(),
        values: acc,
        pairs: if k == 2 { pairs.len() } else { 0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub p0: f64,
    /// `Δ̃/(1 − p0)` per draw: increments over unmarked inclusions only.
    pub shifted: Estimate,
    /// `Δ^{(p0),1}` by form 2 per draw.
    pub direct: Estimate,
    /// Paired difference of the two routes.
    pub difference: Estimate,
    pub relative_discrepancy: f64,
}

impl ShiftReport {
    /// Paired difference within `z` standard errors (or exactly zero).
    pub fn consistent(&self, z: f64) -> bool {
        self.difference.mean == 0.0 || self.difference.mean.abs() <= z * self.difference.stderr
    }
}

/// Compares `Δ̃^{(p0)} / (1 − p0)` with `Δ^{(p0),1}` over mark draws.
pub fn p0_shift_check(
    draws: &[InclusionConfiguration],
    p0: f64,
    setup: &Setup,
) -> Result<ShiftReport> {
    if !(0.0..1.0).contains(&p0) {
        return Err(Error::invalid(
            "p0",
            format!("must lie in [0, 1), got {p0}"),
        ));
    }
    let pairs: Vec<(f64, f64)> = per_sample(setup.workers, draws, |_, c| {
        let c = c.at(p0)?;
        let solver = ConfigurationSolver::new(c.clone(), setup)?;
        let e = c.marked();
        let mut shifted = NeumaierSum::default();
        let mut direct = NeumaierSum::default();
        for n in 0..c.len() {
            let f = SubsetSelector::singleton(n);
            let v = solver.cluster_forms(&e.without(n), &f)?[2];
            direct.add(v);
            if !e.contains(n) {
                shifted.add(v);
            }
        }
        Ok((shifted.value() / (1.0 - p0), direct.value()))
    })?;
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (shifted, direct, difference) = (
        Estimate::from_samples(&a),
        Estimate::from_samples(&b),
        Estimate::from_samples(&d),
    );
    Ok(ShiftReport {
        p0,
        shifted,
        direct,
        difference,
        relative_discrepancy: if direct.mean != 0.0 {
            difference.mean.abs() / direct.mean.abs()
        } else {
            difference.mean.abs()
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmRow {
    pub p: f64,
    /// `f(E_p) − f(E)`.
    pub increment: Estimate,
    /// Rasterized area fraction of the newly marked inclusions.
    pub covered: Estimate,
    /// `p σ |B_R|` with the empirical intensity.
    pub nominal_fraction: f64,
    /// `increment / covered` (ratio estimator).
    pub ratio: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmReport {
    pub rows: Vec<CmRow>,
    /// Intercept of the weighted fit of `ratio` against the covered fraction:
    /// the first-order coefficient.
    pub slope: f64,
    pub slope_stderr: f64,
    pub predicted: f64,
    pub per_sample: Vec<Vec<f64>>,
}

/// First-order coefficient of `ξ·A_T^(p) ξ` in the volume fraction.
pub fn cm_slope(
    ensemble: &[InclusionConfiguration],
    p_grid: &[f64],
    setup: &Setup,
) -> Result<CmReport> {
    let p0 = ensemble.first().map(|c| c.p0).unwrap_or(0.0);
    check_p_grid(p_grid, p0)?;
    let cells = setup.grid.cells() as f64;
    let per: Vec<Vec<(f64, f64)>> = per_sample(setup.workers, ensemble, |_, c| {
        let solver = ConfigurationSolver::new(c.clone(), setup)?;
        let e0 = c.marked();
        let f0 = solver.entry(&e0)?;
        let cov0 = solver.raster.union(&e0)?.count() as f64;
        p_grid
            .iter()
            .map(|&p| {
                let e1 = c.marked_at(c.p0 + p);
                let inc = solver.entry(&e1)? - f0;
                let cov = (solver.raster.union(&e1)?.count() as f64 - cov0) / cells;
                Ok((inc, cov))
            })
            .collect()
    })?;
    let sigma =
        ensemble.iter().map(|c| c.sample.intensity()).sum::<f64>() / ensemble.len().max(1) as f64;
    let radius = ensemble.first().map(|c| c.radius).unwrap_or(0.0);
    let dim = setup.grid.dim();
    let rows: Vec<CmRow> = p_grid
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let inc: Vec<f64> = per.iter().map(|v| v[j].0).collect();
            let cov: Vec<f64> = per.iter().map(|v| v[j].1).collect();
            Ok(CmRow {
                p,
                increment: Estimate::from_samples(&inc),
                covered: Estimate::from_samples(&cov),
                nominal_fraction: volume_fraction(p, sigma, radius, dim)?,
                ratio: Estimate::ratio(&inc, &cov),
            })
        })
        .collect::<Result<_>>()?;
    let usable: Vec<&CmRow> = rows.iter().filter(|r| r.covered.mean > 0.0).collect();
    let (slope, slope_stderr) = match usable.len() {
        0 => {
            return Err(Error::invalid(
                "p_grid",
                "no inclusion became marked in any sample",
            ))
        }
        1 => (usable[0].ratio.mean, usable[0].ratio.stderr),
        _ => {
            let x: Vec<f64> = usable.iter().map(|r| r.covered.mean).collect();
            let y: Vec<f64> = usable.iter().map(|r| r.ratio.mean).collect();
            if usable.iter().all(|r| r.ratio.stderr == 0.0) {
                let f = fit_line(&x, &y, None);
                (f.intercept, f.intercept_stderr)
            } else {
                let floor = usable
                    .iter()
                    .map(|r| r.ratio.stderr)
                    .filter(|s| *s > 0.0)
                    .fold(f64::INFINITY, f64::min);
                let s: Vec<f64> = usable.iter().map(|r| r.ratio.stderr.max(floor)).collect();
                let f = fit_line(&x, &y, Some(&s));
                (f.intercept, f.intercept_stderr)
            }
        }
    };
    let predicted = electric_cm_slope(&ElectricPhases::new(
        setup.phases.alpha,
        setup.phases.beta,
        dim,
    )?);
    Ok(CmReport {
        rows,
        slope,
        slope_stderr,
        predicted,
        per_sample: per
            .iter()
            .map(|v| v.iter().map(|x| x.0).collect())
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub p0: f64,
    pub t: f64,
    pub k: usize,
    pub r_cut: f64,
    /// Ensemble means of the three forms.
    pub forms: [Estimate; 3],
    /// Monte-Carlo `Δ_T^(p)` over the p-grid.
    pub monte_carlo: Vec<TableRow>,
    pub remainders: Vec<TableRow>,
    pub samples: usize,
    pub seeds: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxSpec;
    use crate::process::{attach_marks, sample_hardcore_poisson, PointSample};
    use crate::solver::axis_xi;

    fn setup(l: f64, t: f64, tol: f64) -> Setup {
        let grid = GridSpec::new(BoxSpec::new(2, l).unwrap(), l as usize).unwrap();
        Setup::new(grid, Phases::new(1.0, 2.0).unwrap(), t, axis_xi(0), tol)
    }

    fn config(seed: u64, l: f64, p0: f64) -> InclusionConfiguration {
        let bx = BoxSpec::new(2, l).unwrap();
        let s = sample_hardcore_poisson(0.01, 6.0, bx, seed).unwrap();
        attach_marks(s, 4.0, p0, seed + 1000).unwrap()
    }

    fn overlapping(p0: f64, seed: u64) -> InclusionConfiguration {
        let bx = BoxSpec::new(2, 48.0).unwrap();
        let pts = vec![
            [10.0, 10.3, 0.0],
            [15.2, 11.1, 0.0],
            [12.4, 16.0, 0.0],
            [30.5, 28.7, 0.0],
            [36.1, 30.2, 0.0],
            [44.0, 45.5, 0.0],
        ];
        attach_marks(PointSample::explicit(bx, pts), 4.0, p0, seed).unwrap()
    }

    #[test]
    fn forms_agree_on_small_configurations() {
        let st = setup(48.0, 100.0, 1e-11);
        for (c, p0) in [
            (overlapping(0.0, 1), 0.0),
            (overlapping(0.5, 2), 0.5),
            (config(2, 48.0, 0.4), 0.4),
        ] {
            let solver = ConfigurationSolver::new(c, &st).unwrap();
            for k in 1..=2 {
                let d = delta_k_forms(&solver, k, p0, 24.0).unwrap();
                assert!(d.tuples > 0);
                assert!(d.spread() < 1e-6, "k={k} p0={p0}: {:?}", d.forms);
            }
        }
    }

    #[test]
    fn first_order_matches_entry_differences() {
        let st = setup(48.0, 100.0, 1e-11);
        let c = config(3, 48.0, 0.0);
        let solver = ConfigurationSolver::new(c.clone(), &st).unwrap();
        let d = delta_k_forms(&solver, 1, 0.0, 24.0).unwrap();
        let e = SubsetSelector::empty();
        let direct: f64 = (0..c.len())
            .map(|n| solver.entry(&e.with(n)).unwrap() - solver.entry(&e).unwrap())
            .sum();
        assert!((d.forms[2] - direct).abs() < 1e-12 * direct.abs());
        assert!(d.forms[1] > 0.0);
        assert_eq!(d.derivative(Formula::Form1), d.forms[1]);
    }

    #[test]
    fn no_contrast_means_no_derivative() {
        let mut st = setup(48.0, 100.0, 1e-10);
        st.phases = Phases::new(1.5, 1.5).unwrap();
        let c = config(4, 48.0, 0.0);
        for k in 1..=2 {
            for f in [Formula::Form0, Formula::Form1, Formula::Form2] {
                assert_eq!(delta_k(&c, k, f, 0.0, &st, 24.0).unwrap(), 0.0);
            }
        }
        let ens = vec![c];
        let dp = delta_p(&ens, 0.2, &st).unwrap();
        assert_eq!(dp.estimate.mean, 0.0);
    }

    #[test]
    fn contrast_sign_sets_derivative_sign() {
        let c = config(5, 48.0, 0.0);
        let mut st = setup(48.0, 100.0, 1e-10);
        assert!(delta_k(&c, 1, Formula::Form1, 0.0, &st, 24.0).unwrap() > 0.0);
        st.phases = Phases::new(2.0, 1.0).unwrap();
        assert!(delta_k(&c, 1, Formula::Form1, 0.0, &st, 24.0).unwrap() < 0.0);
        assert!(delta_k(&c, 1, Formula::Form1, 0.0, &st, 30.0).is_err());
    }

    #[test]
    fn delta_p_lemma_and_zero_shift() {
        let st = setup(48.0, 100.0, 1e-10);
        let ens: Vec<_> = (0..3).map(|s| config(10 + s, 48.0, 0.1)).collect();
        let zero = delta_p(&ens, 0.0, &st).unwrap();
        assert_eq!(zero.estimate.mean, 0.0);
        let d = delta_p(&ens, 0.5, &st).unwrap();
        assert!(d.max_gap <= 100.0 * st.tol);
        assert!(d.estimate.mean > 0.0);
    }

    #[test]
    fn single_inclusion_has_no_pair_energy() {
        let bx = BoxSpec::new(2, 48.0).unwrap();
        let c = attach_marks(
            PointSample::explicit(bx, vec![[20.0, 20.0, 0.0]]),
            4.0,
            0.0,
            1,
        )
        .unwrap();
        let st = setup(48.0, 100.0, 1e-10);
        let solver = ConfigurationSolver::new(c, &st).unwrap();
        let e = energy_family(&solver, 2, None).unwrap();
        assert!(e.values["S_0^1"] > 0.0);
        assert!((e.values["S_0^1"] - e.values["S_1^1"]).abs() < 1e-15);
        for key in ["S_0^2", "S_1^2", "S_2^2"] {
            assert_eq!(e.values[key], 0.0);
        }
    }

    #[test]
    fn shift_check_is_exact_at_zero() {
        let st = setup(48.0, 100.0, 1e-10);
        let draws: Vec<_> = (0..2).map(|s| config(20 + s, 48.0, 0.0)).collect();
        let r = p0_shift_check(&draws, 0.0, &st).unwrap();
        assert!(r.relative_discrepancy <= 1e-12);
        assert!(r.consistent(3.0));
    }

    #[test]
    fn remainder_vanishes_without_contrast_and_k0_is_delta_p() {
        let mut st = setup(48.0, 100.0, 1e-10);
        let ens: Vec<_> = (0..2).map(|s| config(30 + s, 48.0, 0.0)).collect();
        let grid = [0.1, 0.2];
        let k0 = expansion_remainder(
            &ens,
            &grid,
            0,
            &st,
            RemainderEstimator::ControlVariate,
            24.0,
        )
        .unwrap();
        let dp = delta_p(&ens, 0.2, &st).unwrap();
        assert!((k0.rows[1].remainder.mean - dp.estimate.mean).abs() < 1e-9);
        st.phases = Phases::new(1.0, 1.0).unwrap();
        for est in [
            RemainderEstimator::ControlVariate,
            RemainderEstimator::Plain,
        ] {
            let t = expansion_remainder(&ens, &grid, 1, &st, est, 24.0).unwrap();
            assert!(t.rows.iter().all(|r| r.remainder.mean == 0.0));
        }
        assert!(
            expansion_remainder(&ens, &[0.3], 1, &st, RemainderEstimator::Plain, 24.0).is_err()
        );
    }

    #[test]
    fn rate_probe_on_constant_medium() {
        let mut st = setup(32.0, 4.0, 1e-10);
        st.phases = Phases::new(1.0, 1.0).unwrap();
        let ens = vec![config(40, 32.0, 0.5)];
        let r = rate_probe(&ens, &[4.0, 8.0, 16.0], 0.5, &st, true).unwrap();
        assert!(r
            .gradient_differences
            .iter()
            .all(|row| row.value.mean == 0.0));
        assert!(rate_probe(&ens, &[4.0, 8.0], 0.5, &st, false).is_err());
        assert!(rate_probe(&ens, &[4.0, 8.0, 12.0], 0.5, &st, false).is_err());
    }
}
