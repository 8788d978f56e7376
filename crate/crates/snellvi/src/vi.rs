//! Backward solver for the parabolic variational inequality.
//!
//! The value function satisfies, in the weak sense,
//!
//! ```text
//! du/dt + A u - r u <= 0,   u >= f,   (du/dt + A u - r u)(f - u) = 0,
//! u(T, .) = f
//! ```
//!
//! Discretized level by level this is a linear complementarity problem
//! `B u >= g, u >= f, (B u - g)(u - f) = 0` with B = I - theta dt (A - r),
//! solved by projected SOR. The time stepping is Crank-Nicolson with a
//! Rannacher startup (the first interval is integrated by two implicit-Euler
//! half steps) to damp oscillations from the payoff kink.
//!
//! Two region names are used deliberately: the *exercise* region is the
//! contact set {u = f}, the *continuation* region its complement. Neither is
//! ever referred to by a bare symbol.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{GeneratorStencil, SpaceTimeGrid};
use crate::linalg::percentile;
use crate::model::{DiffusionModel, PayoffKind, PayoffSpec};

/// Scheme and iteration knobs for [`solve_backward`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeParams {
    /// Time-averaging weight: 1/2 = Crank-Nicolson, 1 = implicit Euler.
    pub theta: f64,
    /// Number of implicit-Euler half steps replacing the first interval.
    pub rannacher_halfsteps: usize,
    /// PSOR relaxation factor.
    pub psor_omega: f64,
    /// PSOR stopping tolerance on the complementarity residual, scaled by
    /// the payoff magnitude.
    pub psor_tol: f64,
    pub psor_max_iters: usize,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            theta: 0.5,
            rannacher_halfsteps: 2,
            psor_omega: 1.2,
            psor_tol: 1e-8,
            psor_max_iters: 10_000,
        }
    }
}

/// Solver bookkeeping attached to a surface.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolveMeta {
    pub method: String,
    pub psor_total_iterations: usize,
    pub psor_max_level_iterations: usize,
    pub warnings: Vec<String>,
    /// Number of leading backward levels integrated with the startup scheme.
    pub startup_levels: usize,
    pub payoff_scale: f64,
    pub tol: f64,
}

/// u on the space-time grid plus per-node complementarity residuals.
#[derive(Clone, Debug)]
pub struct ValueSurface {
    pub grid: Arc<SpaceTimeGrid>,
    /// (M+1) x n_space_nodes, level-major; level k holds u(t_k, .).
    values: Vec<f64>,
    /// Same layout; audit residuals (NaN where not defined).
    pub residuals: Vec<f64>,
    pub meta: SolveMeta,
}

impl ValueSurface {
    pub fn from_values(grid: Arc<SpaceTimeGrid>, values: Vec<f64>, method: &str) -> Result<Self> {
        let expect = (grid.n_time_steps() + 1) * grid.n_space_nodes();
        if values.len() != expect {
            return Err(Error::Mismatch(format!(
                "surface has {} values, grid wants {expect}",
                values.len()
            )));
        }
        let len = values.len();
        let scale = values.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        Ok(Self {
            grid,
            values,
            residuals: vec![f64::NAN; len],
            meta: SolveMeta {
                method: method.to_string(),
                payoff_scale: scale,
                ..Default::default()
            },
        })
    }

    #[inline]
    pub fn level(&self, k: usize) -> &[f64] {
        let s = self.grid.n_space_nodes();
        &self.values[k * s..(k + 1) * s]
    }

    #[inline]
    pub fn value(&self, k: usize, flat: usize) -> f64 {
        self.values[k * self.grid.n_space_nodes() + flat]
    }

    pub fn values_raw(&self) -> &[f64] {
        &self.values
    }

    /// u at (t_k, x) by multilinear interpolation in space.
    pub fn interp_at(&self, k: usize, x: &[f64]) -> f64 {
        self.grid.interp_linear(self.level(k), x)
    }

    /// Value at t=0 and the given state.
    pub fn price_at(&self, x: &[f64]) -> f64 {
        self.grid.interp_linear(self.level(0), x)
    }
}

// ---------------------------------------------------------------------------
// LCP step
// ---------------------------------------------------------------------------

/// Matrix-free operator for one backward time level:
/// B = I - theta dt (A - r), right-hand side g, and the obstacle f.
pub struct LcpStep<'a> {
    pub stencil: &'a GeneratorStencil,
    pub theta_dt: f64,
    pub rhs: Vec<f64>,
    pub obstacle: &'a [f64],
}

impl LcpStep<'_> {
    #[inline]
    pub fn diag(&self, flat: usize) -> f64 {
        1.0 - self.theta_dt * self.stencil.row(flat).map(|r| r.diag).unwrap_or(0.0)
    }

    /// (B u)_flat for an interior node.
    pub fn apply_row(&self, u: &[f64], flat: usize) -> f64 {
        let row = self.stencil.row(flat).expect("interior node");
        let mut s = (1.0 - self.theta_dt * row.diag) * u[flat];
        for &(nb, c) in &row.neighbors {
            s -= self.theta_dt * c * u[nb];
        }
        s
    }

    /// Smallest diagonal-dominance margin over interior rows; negative
    /// margins can stall PSOR (a CFL-like restriction on dt).
    pub fn dominance_margin(&self, grid: &SpaceTimeGrid) -> f64 {
        let mut worst = f64::INFINITY;
        for flat in grid.interior_nodes() {
            let row = self.stencil.row(flat).expect("interior node");
            let diag = (1.0 - self.theta_dt * row.diag).abs();
            let off: f64 = row
                .neighbors
                .iter()
                .map(|&(_, c)| (self.theta_dt * c).abs())
                .sum();
            worst = worst.min(diag - off);
        }
        worst
    }
}

/// Red-black parity of a node: sum of its multi-index. Updates sweep the red
/// class then the black class in index order, so the result is exactly what
/// concurrent updates within one color class would produce; it is
/// deterministic given the coloring.
fn node_parity(grid: &SpaceTimeGrid, flat: usize) -> usize {
    grid.multi_index(flat).iter().sum::<usize>() % 2
}

struct PsorOutcome {
    iterations: usize,
    residual: f64,
    converged: bool,
}

fn psor_solve(
    step: &LcpStep<'_>,
    grid: &SpaceTimeGrid,
    u: &mut [f64],
    interior: &[usize],
    params: &SchemeParams,
    scale: f64,
) -> PsorOutcome {
    let omega = params.psor_omega;
    let tol = params.psor_tol * scale;
    let mut residual = f64::INFINITY;
    for iter in 1..=params.psor_max_iters {
        for color in 0..2usize {
            for &flat in interior {
                if node_parity(grid, flat) != color {
                    continue;
                }
                let diag = step.diag(flat);
                let bu = step.apply_row(u, flat);
                let gs = u[flat] + (step.rhs[flat] - bu) / diag;
                let relaxed = u[flat] + omega * (gs - u[flat]);
                u[flat] = relaxed.max(step.obstacle[flat]);
            }
        }
        // complementarity residual: max |min(Bu - g, u - f)|
        residual = 0.0;
        for &flat in interior {
            let slack = step.apply_row(u, flat) - step.rhs[flat];
            let gap = u[flat] - step.obstacle[flat];
            residual = residual.max(slack.min(gap).abs());
        }
        if residual <= tol {
            return PsorOutcome {
                iterations: iter,
                residual,
                converged: true,
            };
        }
    }
    PsorOutcome {
        iterations: params.psor_max_iters,
        residual,
        converged: false,
    }
}

fn apply_boundary(
    grid: &SpaceTimeGrid,
    u: &mut [f64],
    obstacle: &[f64],
    boundary: &[usize],
    neighbor_of_boundary: &[usize],
) {
    match grid.boundary_policy {
        crate::grid::BoundaryPolicy::DirichletPayoff => {
            for &flat in boundary {
                u[flat] = obstacle[flat];
            }
        }
        crate::grid::BoundaryPolicy::NeumannZero => {
            for (&flat, &nb) in boundary.iter().zip(neighbor_of_boundary) {
                u[flat] = u[nb];
            }
        }
    }
}

/// For each boundary node, the node one step inward along every clamped
/// axis (used by the zero-gradient policy).
fn boundary_neighbors(grid: &SpaceTimeGrid) -> (Vec<usize>, Vec<usize>) {
    let mut boundary = Vec::new();
    let mut inward = Vec::new();
    for flat in 0..grid.n_space_nodes() {
        if grid.is_interior(flat) {
            continue;
        }
        let mut multi = grid.multi_index(flat);
        for (j, mj) in multi.iter_mut().enumerate() {
            let len = grid.axis(j).len();
            if *mj == 0 {
                *mj = 1;
            } else if *mj + 1 == len {
                *mj = len - 2;
            }
        }
        boundary.push(flat);
        inward.push(grid.flat_index(&multi));
    }
    (boundary, inward)
}

// ---------------------------------------------------------------------------
// Backward solve
// ---------------------------------------------------------------------------

/// Solves the discrete variational inequality backward from u(T,.) = f.
///
/// At every time level the discrete complementarity system holds to the PSOR
/// tolerance; the terminal condition is exact.
pub fn solve_backward(
    model: &DiffusionModel,
    payoff: &PayoffSpec,
    grid: &Arc<SpaceTimeGrid>,
    params: &SchemeParams,
) -> Result<ValueSurface> {
    if grid.space_dim() != model.state_dim() {
        return Err(Error::Mismatch(format!(
            "grid dimension {} != model dimension {}",
            grid.space_dim(),
            model.state_dim()
        )));
    }
    if grid.space_dim() > 3 {
        return Err(Error::Precondition(
            "the tensor-grid solver is limited to d <= 3".into(),
        ));
    }
    if !(0.0..=1.0).contains(&params.theta) {
        return Err(Error::InvalidParameter("theta must lie in [0, 1]".into()));
    }
    payoff.validate_on(grid)?;

    let s = grid.n_space_nodes();
    let m = grid.n_time_steps();
    let times = grid.time_nodes().to_vec();
    let obstacle: Vec<f64> = (0..s).map(|i| payoff.evaluate(&grid.node_coords(i))).collect();
    let scale = obstacle.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let interior: Vec<usize> = grid.interior_nodes().collect();
    let (boundary, inward) = boundary_neighbors(grid);

    let mut values = vec![0.0f64; (m + 1) * s];
    values[m * s..].copy_from_slice(&obstacle);

    let mut meta = SolveMeta {
        method: "variational_inequality_psor".into(),
        startup_levels: if params.rannacher_halfsteps > 0 { 1 } else { 0 },
        payoff_scale: scale,
        tol: params.psor_tol * scale,
        ..Default::default()
    };

    // Homogeneous models reuse one stencil for every level.
    let shared_stencil = if model.is_time_homogeneous() {
        Some(GeneratorStencil::build(model, grid, 0.0)?)
    } else {
        None
    };

    let mut dominance_warned = false;

    // One theta step from `prev` (values at t_hi) to the returned values at
    // t_lo, with dt = t_hi - t_lo.
    let do_step = |prev: &[f64],
                       t_lo: f64,
                       t_hi: f64,
                       theta: f64,
                       level: usize,
                       meta: &mut SolveMeta,
                       dominance_warned: &mut bool|
     -> Result<Vec<f64>> {
        let dt = t_hi - t_lo;
        let local_lo;
        let local_hi;
        let (sten_lo, sten_hi): (&GeneratorStencil, &GeneratorStencil) = match &shared_stencil {
            Some(st) => (st, st),
            None => {
                local_lo = GeneratorStencil::build(model, grid, t_lo)?;
                local_hi = GeneratorStencil::build(model, grid, t_hi)?;
                (&local_lo, &local_hi)
            }
        };
        // g = u^{k+1} + (1 - theta) dt (A - r) u^{k+1}
        let mut rhs = prev.to_vec();
        if theta < 1.0 {
            let explicit = sten_hi.apply(prev);
            for &flat in &interior {
                rhs[flat] += (1.0 - theta) * dt * explicit[flat];
            }
        }
        let step = LcpStep {
            stencil: sten_lo,
            theta_dt: theta * dt,
            rhs,
            obstacle: &obstacle,
        };
        if !*dominance_warned {
            let margin = step.dominance_margin(grid);
            if margin < 0.0 {
                meta.warnings.push(format!(
                    "operator rows lose diagonal dominance (margin {margin:.3e}); dt exceeds the CFL-like bound and PSOR may converge slowly"
                ));
                *dominance_warned = true;
            }
        }
        // warm start from the previous level, projected onto the obstacle
        let mut u: Vec<f64> = prev.iter().zip(&obstacle).map(|(&v, &f)| v.max(f)).collect();
        apply_boundary(grid, &mut u, &obstacle, &boundary, &inward);
        let outcome = psor_solve(&step, grid, &mut u, &interior, params, scale);
        meta.psor_total_iterations += outcome.iterations;
        meta.psor_max_level_iterations = meta.psor_max_level_iterations.max(outcome.iterations);
        if !outcome.converged {
            return Err(Error::PsorNonConvergence {
                level,
                residual: outcome.residual,
                iters: outcome.iterations,
            });
        }
        apply_boundary(grid, &mut u, &obstacle, &boundary, &inward);
        Ok(u)
    };

    for k in (0..m).rev() {
        let (t_lo, t_hi) = (times[k], times[k + 1]);
        let is_first = k + 1 == m;
        let next = if is_first && params.rannacher_halfsteps > 0 {
            // startup: implicit-Euler half steps across [t_{M-1}, T]
            let halves = params.rannacher_halfsteps;
            let mut cur = values[(k + 1) * s..(k + 2) * s].to_vec();
            for h in 0..halves {
                let hi = t_hi - (t_hi - t_lo) * h as f64 / halves as f64;
                let lo = t_hi - (t_hi - t_lo) * (h + 1) as f64 / halves as f64;
                cur = do_step(&cur, lo, hi, 1.0, k, &mut meta, &mut dominance_warned)?;
            }
            cur
        } else {
            let prev = values[(k + 1) * s..(k + 2) * s].to_vec();
            do_step(
                &prev,
                t_lo,
                t_hi,
                params.theta,
                k,
                &mut meta,
                &mut dominance_warned,
            )?
        };
        values[k * s..(k + 1) * s].copy_from_slice(&next);
    }

    let mut surface = ValueSurface {
        grid: Arc::clone(grid),
        values,
        residuals: vec![f64::NAN; (m + 1) * s],
        meta,
    };
    let stats = complementarity_residual(&surface, model)?;
    surface.residuals = stats.per_node;
    Ok(surface)
}

// ---------------------------------------------------------------------------
// Complementarity audit
// ---------------------------------------------------------------------------

/// Complementarity statistics of a solved surface.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualStats {
    /// max over audited nodes of |rho| / scale
    pub max_abs: f64,
    /// 99th percentile of |rho| / scale
    pub p99_abs: f64,
    pub scale: f64,
    pub n_nodes: usize,
    #[serde(skip)]
    pub per_node: Vec<f64>,
}

/// Recomputes the discrete complementarity residual
/// `rho = min(-(du/dt + A u - r u), u - f)` at interior nodes, with the time
/// derivative taken as a forward difference and the generator stencil
/// evaluated at the earlier level. This first-order audit is independent of
/// the solver's theta-averaging, so it shrinks under refinement instead of
/// echoing the solver's own equations back. The terminal slice pins the
/// obstacle values.
pub fn complementarity_residual(
    surface: &ValueSurface,
    model: &DiffusionModel,
) -> Result<ResidualStats> {
    let grid = &surface.grid;
    let s = grid.n_space_nodes();
    let m = grid.n_time_steps();
    let times = grid.time_nodes();
    // u(T, .) = f by construction, so the terminal level serves as the
    // obstacle without re-deriving the payoff.
    let obstacle = surface.level(m).to_vec();
    let scale = surface.meta.payoff_scale.max(1.0);

    let shared = if model.is_time_homogeneous() {
        Some(GeneratorStencil::build(model, grid, 0.0)?)
    } else {
        None
    };

    let mut per_node = vec![f64::NAN; (m + 1) * s];
    let mut sample = Vec::with_capacity(m * grid.n_interior_nodes());
    for k in 0..m {
        let dt = times[k + 1] - times[k];
        let local;
        let stencil = match &shared {
            Some(st) => st,
            None => {
                local = GeneratorStencil::build(model, grid, times[k])?;
                &local
            }
        };
        let lu = stencil.apply(surface.level(k));
        for flat in grid.interior_nodes() {
            let dudt = (surface.value(k + 1, flat) - surface.value(k, flat)) / dt;
            let pde_slack = -(dudt + lu[flat]);
            let gap = surface.value(k, flat) - obstacle[flat];
            let rho = pde_slack.min(gap);
            per_node[k * s + flat] = rho;
            sample.push((rho / scale).abs());
        }
    }
    // terminal level: u = f exactly
    for flat in grid.interior_nodes() {
        per_node[m * s + flat] = 0.0;
    }

    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_abs = sample.last().copied().unwrap_or(0.0);
    let p99_abs = percentile(&sample, 0.99);
    Ok(ResidualStats {
        max_abs,
        p99_abs,
        scale,
        n_nodes: sample.len(),
        per_node,
    })
}

// ---------------------------------------------------------------------------
// Regions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Contact set {u = f}: stop here.
    Exercise,
    /// {u > f}: keep holding.
    Continuation,
}

/// Boolean mask over all grid nodes (level-major, same layout as a surface).
#[derive(Clone, Debug)]
pub struct RegionMask {
    pub kind: RegionKind,
    pub grid: Arc<SpaceTimeGrid>,
    mask: Vec<bool>,
}

impl RegionMask {
    pub fn from_mask(kind: RegionKind, grid: Arc<SpaceTimeGrid>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != (grid.n_time_steps() + 1) * grid.n_space_nodes() {
            return Err(Error::Mismatch("mask length does not match grid".into()));
        }
        Ok(Self { kind, grid, mask })
    }

    #[inline]
    pub fn contains(&self, k: usize, flat: usize) -> bool {
        self.mask[k * self.grid.n_space_nodes() + flat]
    }

    pub fn mask_raw(&self) -> &[bool] {
        &self.mask
    }

    /// Number of flagged interior nodes at levels 0 < k < M.
    pub fn interior_count_strict(&self) -> usize {
        let m = self.grid.n_time_steps();
        (1..m)
            .flat_map(|k| self.grid.interior_nodes().map(move |i| (k, i)))
            .filter(|&(k, i)| self.contains(k, i))
            .count()
    }
}

/// Free boundary of a one-dimensional put: per time node, the largest
/// exercised interior x (None when nothing is exercised).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreeBoundary {
    pub times: Vec<f64>,
    pub boundary: Vec<Option<f64>>,
}

pub struct Regions {
    pub exercise: RegionMask,
    pub continuation: RegionMask,
    pub free_boundary: Option<FreeBoundary>,
}

/// Splits the grid into exercise ({|u - f| <= tol_region * scale}) and
/// continuation nodes.
///
/// At interior times a node only counts as exercise when the payoff there is
/// strictly positive: where f = 0 and u is numerically zero the two labels
/// are indistinguishable at tolerance, and stopping for a zero payoff gains
/// nothing, so the extraction picks continuation. The terminal slice, where
/// u = f holds identically, is all exercise.
pub fn extract_regions(
    surface: &ValueSurface,
    payoff: &PayoffSpec,
    tol_region: f64,
) -> Result<Regions> {
    let grid = Arc::clone(&surface.grid);
    let s = grid.n_space_nodes();
    let m = grid.n_time_steps();
    let obstacle: Vec<f64> = (0..s).map(|i| payoff.evaluate(&grid.node_coords(i))).collect();
    let scale = surface.meta.payoff_scale.max(1.0);
    let tol = tol_region * scale;

    let mut exercise = vec![false; (m + 1) * s];
    for k in 0..=m {
        for flat in 0..s {
            let touching = (surface.value(k, flat) - obstacle[flat]).abs() <= tol;
            let positive = obstacle[flat] > 0.0;
            exercise[k * s + flat] = touching && (positive || k == m);
        }
    }
    let continuation: Vec<bool> = exercise.iter().map(|&e| !e).collect();

    let free_boundary = if grid.space_dim() == 1 && matches!(payoff.kind, PayoffKind::Put { .. })
    {
        let ax = grid.axis(0);
        let boundary = (0..=m)
            .map(|k| {
                (1..ax.len() - 1)
                    .rev()
                    .find(|&i| exercise[k * s + i])
                    .map(|i| ax[i])
            })
            .collect();
        Some(FreeBoundary {
            times: grid.time_nodes().to_vec(),
            boundary,
        })
    } else {
        None
    };

    Ok(Regions {
        exercise: RegionMask {
            kind: RegionKind::Exercise,
            grid: Arc::clone(&grid),
            mask: exercise,
        },
        continuation: RegionMask {
            kind: RegionKind::Continuation,
            grid,
            mask: continuation,
        },
        free_boundary,
    })
}

// ---------------------------------------------------------------------------
// Surface export
// ---------------------------------------------------------------------------

/// CSV rows `(t, x1..xd, u, residual)`.
pub fn write_surface_csv<W: Write>(surface: &ValueSurface, mut w: W) -> Result<()> {
    let grid = &surface.grid;
    let d = grid.space_dim();
    let header: String = (0..d).map(|j| format!("x{},", j + 1)).collect();
    writeln!(w, "t,{header}u,residual")?;
    let s = grid.n_space_nodes();
    for (k, &t) in grid.time_nodes().iter().enumerate() {
        for flat in 0..s {
            let coords: String = grid
                .node_coords(flat)
                .iter()
                .map(|c| format!("{c},"))
                .collect();
            writeln!(
                w,
                "{t},{coords}{},{}",
                surface.value(k, flat),
                surface.residuals[k * s + flat]
            )?;
        }
    }
    Ok(())
}

const SURFACE_MAGIC: &[u8; 4] = b"SNVS";

/// Compact binary grid format: magic, version, M, d, axis lengths, time
/// nodes, axes, then level-major values as little-endian f64.
pub fn write_surface_binary<W: Write>(surface: &ValueSurface, mut w: W) -> Result<()> {
    let grid = &surface.grid;
    w.write_all(SURFACE_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(grid.n_time_steps() as u64).to_le_bytes())?;
    w.write_all(&(grid.space_dim() as u64).to_le_bytes())?;
    for j in 0..grid.space_dim() {
        w.write_all(&(grid.axis(j).len() as u64).to_le_bytes())?;
    }
    for &t in grid.time_nodes() {
        w.write_all(&t.to_le_bytes())?;
    }
    for j in 0..grid.space_dim() {
        for &x in grid.axis(j) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for &v in &surface.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundaryPolicy;
    use crate::model::{build_model, ModelConfig};
    use approx::assert_relative_eq;

    fn bs_model() -> DiffusionModel {
        build_model(&ModelConfig {
            family: "black_scholes_1d".into(),
            params: serde_json::json!({"sigma": 0.2, "r": 0.05}),
            horizon: 1.0,
            d: None,
            n: None,
        })
        .unwrap()
    }

    fn put_grid(time_steps: usize, nodes: usize) -> Arc<SpaceTimeGrid> {
        Arc::new(
            SpaceTimeGrid::uniform(
                1.0,
                time_steps,
                &[0.0],
                &[300.0],
                &[nodes],
                BoundaryPolicy::DirichletPayoff,
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_payoff_gives_zero_surface() {
        let model = bs_model();
        let grid = put_grid(20, 31);
        let surface =
            solve_backward(&model, &PayoffSpec::zero(), &grid, &SchemeParams::default()).unwrap();
        for v in surface.values_raw() {
            assert_eq!(*v, 0.0);
        }
        let stats = complementarity_residual(&surface, &model).unwrap();
        assert_eq!(stats.max_abs, 0.0);
    }

    #[test]
    fn terminal_condition_exact_and_obstacle_respected() {
        let model = bs_model();
        let grid = put_grid(40, 61);
        let payoff = PayoffSpec::put(100.0);
        let surface = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        let m = grid.n_time_steps();
        for flat in 0..grid.n_space_nodes() {
            let f = payoff.evaluate(&grid.node_coords(flat));
            assert_eq!(surface.value(m, flat), f);
            for k in 0..=m {
                assert!(surface.value(k, flat) >= f - 1e-9 * 100.0);
            }
        }
    }

    #[test]
    fn american_put_matches_frozen_binomial_price() {
        // CRR binomial with 50,000 steps gives 6.090355705 for this put.
        let model = bs_model();
        let grid = put_grid(200, 401);
        let payoff = PayoffSpec::put(100.0);
        let surface = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        let price = surface.price_at(&[100.0]);
        assert!(
            (price - 6.090355705428374).abs() <= 1e-2,
            "price {price} vs binomial oracle"
        );
    }

    #[test]
    fn homogeneous_value_nonincreasing_in_time() {
        let model = bs_model();
        let grid = put_grid(50, 101);
        let payoff = PayoffSpec::put(100.0);
        let surface = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        for flat in grid.interior_nodes() {
            for k in 0..grid.n_time_steps() {
                assert!(
                    surface.value(k + 1, flat) <= surface.value(k, flat) + 1e-6 * 100.0,
                    "u should decrease in t at fixed x"
                );
            }
        }
    }

    #[test]
    fn comparison_with_shifted_obstacle() {
        // f -> f + c raises u pointwise by a nonnegative amount <= c.
        let model = bs_model();
        let grid = put_grid(30, 81);
        let payoff = PayoffSpec::put(100.0);
        let c = 5.0;
        let shifted = PayoffSpec::custom(
            "put_plus_const",
            move |x: &[f64]| (100.0 - x[0]).max(0.0) + c,
            Some(0.0),
            Some(105.0),
        );
        let base = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        let up = solve_backward(&model, &shifted, &grid, &SchemeParams::default()).unwrap();
        for k in 0..=grid.n_time_steps() {
            for flat in 0..grid.n_space_nodes() {
                let diff = up.value(k, flat) - base.value(k, flat);
                assert!(diff >= -1e-7, "monotone in the obstacle");
                assert!(diff <= c + 1e-7, "shift bounded by c");
            }
        }
    }

    #[test]
    fn put_regions_and_free_boundary() {
        let model = bs_model();
        let grid = put_grid(100, 201);
        let payoff = PayoffSpec::put(100.0);
        let surface = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        let regions = extract_regions(&surface, &payoff, 1e-7).unwrap();
        let m = grid.n_time_steps();
        let s = grid.n_space_nodes();
        // masks are disjoint and cover everything
        for k in 0..=m {
            for flat in 0..s {
                assert_ne!(
                    regions.exercise.contains(k, flat),
                    regions.continuation.contains(k, flat)
                );
            }
        }
        // terminal slice belongs to the exercise mask everywhere
        for flat in 0..s {
            assert!(regions.exercise.contains(m, flat));
        }
        let fb = regions.free_boundary.unwrap();
        let mut prev = None;
        for (k, b) in fb.boundary.iter().enumerate() {
            let b = b.expect("put has a nonempty exercise region at every level");
            assert!(b < 100.0, "boundary below strike at level {k}");
            if let Some(p) = prev {
                assert!(b + 1e-9 >= p, "boundary nondecreasing in t");
            }
            prev = Some(b);
        }
        // frozen CRR boundary oracle (8000 steps): t=0.25 -> 82.14,
        // t=0.50 -> 84.00, t=0.75 -> 86.67; grid spacing here is 1.5.
        for (t, oracle) in [(0.25f64, 82.1376), (0.5, 83.9950), (0.75, 86.6660)] {
            let k = (t * 100.0).round() as usize;
            let b = fb.boundary[k].unwrap();
            assert!(
                (b - oracle).abs() <= 2.0,
                "boundary at t={t}: {b} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn put_complementarity_stats_small() {
        let model = bs_model();
        let grid = put_grid(200, 401);
        let payoff = PayoffSpec::put(100.0);
        let surface = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        let stats = complementarity_residual(&surface, &model).unwrap();
        assert!(stats.p99_abs <= 1e-3, "p99 {}", stats.p99_abs);
    }

    #[test]
    fn deep_itm_put_near_terminal_is_at_obstacle() {
        let model = bs_model();
        let grid = put_grid(50, 151);
        let payoff = PayoffSpec::put(100.0);
        let surface = solve_backward(&model, &payoff, &grid, &SchemeParams::default()).unwrap();
        let k = 49; // one step before maturity
        let flat = grid.nearest_node(&[20.0]);
        let f = payoff.evaluate(&grid.node_coords(flat));
        assert_relative_eq!(surface.value(k, flat), f, epsilon = 1e-8);
        // the audited residual there is ~0 (obstacle active)
        let s = grid.n_space_nodes();
        assert!(surface.residuals[k * s + flat].abs() <= 1e-6 * 100.0);
    }

    #[test]
    fn psor_nonconvergence_reports_level() {
        let model = bs_model();
        let grid = put_grid(10, 41);
        let params = SchemeParams {
            psor_max_iters: 1,
            psor_tol: 1e-14,
            ..SchemeParams::default()
        };
        match solve_backward(&model, &PayoffSpec::put(100.0), &grid, &params) {
            Err(Error::PsorNonConvergence { level, .. }) => assert!(level < 10),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn surface_csv_shape() {
        let model = bs_model();
        let grid = put_grid(2, 5);
        let surface =
            solve_backward(&model, &PayoffSpec::put(100.0), &grid, &SchemeParams::default())
                .unwrap();
        let mut buf = Vec::new();
        write_surface_csv(&surface, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,u,residual"));
        assert_eq!(text.lines().count(), 1 + 3 * 5);
    }
}
