//! Space-time grids and the finite-difference realization of the generator.
//!
//! The continuous problem lives on [0,T] x R^d; the artifact truncates space
//! to a box (by default +-5 terminal standard deviations, estimated from a
//! pilot simulation — see [`crate::harness`]). Grids are tensor products of
//! per-axis node vectors, possibly nonuniform; stencils use the standard
//! three-point nonuniform formulas, which reproduce any quadratic exactly.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::DiffusionModel;

/// How values on the spatial boundary of the box are pinned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// u = f on the spatial boundary (correct far-field behavior for
    /// puts/calls and consistent with u >= f).
    DirichletPayoff,
    /// Zero normal derivative: boundary nodes copy their interior neighbor.
    NeumannZero,
}

/// Tensor-product grid over [0,T] x box.
///
/// Flattened spatial indexing is row-major with the last axis fastest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    time_nodes: Vec<f64>,
    space_axes: Vec<Vec<f64>>,
    pub boundary_policy: BoundaryPolicy,
    #[serde(skip)]
    strides: Vec<usize>,
}

impl SpaceTimeGrid {
    pub fn new(
        time_nodes: Vec<f64>,
        space_axes: Vec<Vec<f64>>,
        boundary_policy: BoundaryPolicy,
    ) -> Result<Self> {
        if time_nodes.len() < 2 {
            return Err(Error::InvalidGrid("need at least two time nodes".into()));
        }
        if time_nodes[0] != 0.0 {
            return Err(Error::InvalidGrid("time nodes must start at 0".into()));
        }
        if !strictly_increasing(&time_nodes) {
            return Err(Error::InvalidGrid("time nodes must be strictly increasing".into()));
        }
        if space_axes.is_empty() {
            return Err(Error::InvalidGrid("need at least one spatial axis".into()));
        }
        for (j, ax) in space_axes.iter().enumerate() {
            if ax.len() < 2 {
                return Err(Error::InvalidGrid(format!("axis {j} has fewer than 2 nodes")));
            }
            if !strictly_increasing(ax) {
                return Err(Error::InvalidGrid(format!(
                    "axis {j} nodes must be strictly increasing"
                )));
            }
        }
        let strides = compute_strides(&space_axes);
        Ok(Self {
            time_nodes,
            space_axes,
            boundary_policy,
            strides,
        })
    }

    /// Uniform grid: `time_steps` intervals on [0,T] and `nodes_per_axis`
    /// nodes per axis over [mins, maxs].
    pub fn uniform(
        horizon: f64,
        time_steps: usize,
        mins: &[f64],
        maxs: &[f64],
        nodes_per_axis: &[usize],
        boundary_policy: BoundaryPolicy,
    ) -> Result<Self> {
        if mins.len() != maxs.len() || mins.len() != nodes_per_axis.len() {
            return Err(Error::Mismatch("mins/maxs/nodes_per_axis lengths differ".into()));
        }
        let time_nodes = uniform_time_nodes(horizon, time_steps);
        let axes = mins
            .iter()
            .zip(maxs)
            .zip(nodes_per_axis)
            .map(|((&lo, &hi), &n)| {
                if !(hi > lo) {
                    return Err(Error::InvalidGrid(format!("box [{lo}, {hi}] is empty")));
                }
                if n < 2 {
                    return Err(Error::InvalidGrid("need at least 2 nodes per axis".into()));
                }
                Ok((0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::new(time_nodes, axes, boundary_policy)
    }

    pub fn time_nodes(&self) -> &[f64] {
        &self.time_nodes
    }

    pub fn n_time_steps(&self) -> usize {
        self.time_nodes.len() - 1
    }

    pub fn space_dim(&self) -> usize {
        self.space_axes.len()
    }

    pub fn axis(&self, j: usize) -> &[f64] {
        &self.space_axes[j]
    }

    pub fn n_space_nodes(&self) -> usize {
        self.space_axes.iter().map(|a| a.len()).product()
    }

    pub(crate) fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        self.strides
            .iter()
            .map(|&s| {
                let i = rem / s;
                rem %= s;
                i
            })
            .collect()
    }

    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.space_axes)
            .map(|(&i, ax)| ax[i])
            .collect()
    }

    pub fn is_interior(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.space_axes)
            .all(|(&i, ax)| i > 0 && i + 1 < ax.len())
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_space_nodes()).filter(|&i| self.is_interior(i))
    }

    pub fn n_interior_nodes(&self) -> usize {
        self.space_axes.iter().map(|a| a.len() - 2).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.space_axes).all(|(&xi, ax)| {
            xi >= ax[0] - 1e-12 && xi <= ax[ax.len() - 1] + 1e-12
        })
    }

    /// Flat index of the grid node closest to x (per-axis nearest).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let multi: Vec<usize> = x
            .iter()
            .zip(&self.space_axes)
            .map(|(&xi, ax)| nearest_in_axis(ax, xi))
            .collect();
        self.flat_index(&multi)
    }

    /// Multilinear interpolation of nodal `values` at x, clamped to the box.
    pub fn interp_linear(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_space_nodes());
        let d = self.space_dim();
        let mut base = vec![0usize; d];
        let mut w = vec![0.0f64; d];
        for j in 0..d {
            let ax = &self.space_axes[j];
            let (i, t) = locate_cell(ax, x[j]);
            base[j] = i;
            w[j] = t;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut idx = 0;
            let mut weight = 1.0;
            for j in 0..d {
                let up = (corner >> j) & 1 == 1;
                idx += (base[j] + up as usize) * self.strides[j];
                weight *= if up { w[j] } else { 1.0 - w[j] };
            }
            if weight != 0.0 {
                acc += weight * values[idx];
            }
        }
        acc
    }

    /// Tensor-product quadratic (three-point Lagrange) interpolation at x,
    /// clamped to the box. Exact for per-axis quadratics.
    pub fn interp_quadratic(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_space_nodes());
        let d = self.space_dim();
        let mut base = vec![0usize; d];
        let mut wts = vec![[0.0f64; 3]; d];
        for j in 0..d {
            let ax = &self.space_axes[j];
            if ax.len() < 3 {
                // fall back to linear on this axis
                let (i, t) = locate_cell(ax, x[j]);
                base[j] = i;
                wts[j] = [1.0 - t, t, 0.0];
                continue;
            }
            let near = nearest_in_axis(ax, x[j]);
            let i0 = near.clamp(1, ax.len() - 2) - 1;
            base[j] = i0;
            let (x0, x1, x2) = (ax[i0], ax[i0 + 1], ax[i0 + 2]);
            let xv = x[j].clamp(ax[0], ax[ax.len() - 1]);
            wts[j] = [
                (xv - x1) * (xv - x2) / ((x0 - x1) * (x0 - x2)),
                (xv - x0) * (xv - x2) / ((x1 - x0) * (x1 - x2)),
                (xv - x0) * (xv - x1) / ((x2 - x0) * (x2 - x1)),
            ];
        }
        let mut acc = 0.0;
        let mut offsets = vec![0usize; d];
        loop {
            let mut idx = 0;
            let mut weight = 1.0;
            for j in 0..d {
                idx += (base[j] + offsets[j]) * self.strides[j];
                weight *= wts[j][offsets[j]];
            }
            acc += weight * values[idx];
            // odometer over 3^d (with the linear fallback the third weight is 0)
            let mut j = 0;
            loop {
                offsets[j] += 1;
                if offsets[j] < 3 {
                    break;
                }
                offsets[j] = 0;
                j += 1;
                if j == d {
                    return acc;
                }
            }
        }
    }

    /// Gradient of a nodal slice at an interior node by the nonuniform
    /// central three-point formula.
    pub fn gradient_at(&self, values: &[f64], flat: usize) -> Vec<f64> {
        let multi = self.multi_index(flat);
        let d = self.space_dim();
        let mut g = vec![0.0; d];
        for j in 0..d {
            let ax = &self.space_axes[j];
            let i = multi[j];
            if i == 0 {
                g[j] = (values[flat + self.strides[j]] - values[flat]) / (ax[1] - ax[0]);
            } else if i + 1 == ax.len() {
                g[j] = (values[flat] - values[flat - self.strides[j]]) / (ax[i] - ax[i - 1]);
            } else {
                let (hm, hp) = (ax[i] - ax[i - 1], ax[i + 1] - ax[i]);
                let (cm, c0, cp) = first_derivative_coeffs(hm, hp);
                g[j] = cm * values[flat - self.strides[j]]
                    + c0 * values[flat]
                    + cp * values[flat + self.strides[j]];
            }
        }
        g
    }

    /// Trapezoid quadrature weights over the spatial box (tensor product).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let axis_w: Vec<Vec<f64>> = self
            .space_axes
            .iter()
            .map(|ax| {
                let n = ax.len();
                (0..n)
                    .map(|i| {
                        let left = if i > 0 { ax[i] - ax[i - 1] } else { 0.0 };
                        let right = if i + 1 < n { ax[i + 1] - ax[i] } else { 0.0 };
                        0.5 * (left + right)
                    })
                    .collect()
            })
            .collect();
        (0..self.n_space_nodes())
            .map(|flat| {
                self.multi_index(flat)
                    .iter()
                    .zip(&axis_w)
                    .map(|(&i, w)| w[i])
                    .product()
            })
            .collect()
    }
}

pub fn uniform_time_nodes(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| horizon * i as f64 / steps.max(1) as f64)
        .collect()
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0] && w[0].is_finite() && w[1].is_finite())
}

fn compute_strides(axes: &[Vec<f64>]) -> Vec<usize> {
    let d = axes.len();
    let mut strides = vec![1usize; d];
    for j in (0..d.saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * axes[j + 1].len();
    }
    strides
}

fn nearest_in_axis(ax: &[f64], x: f64) -> usize {
    let i = ax.partition_point(|&v| v < x);
    if i == 0 {
        0
    } else if i >= ax.len() {
        ax.len() - 1
    } else if (x - ax[i - 1]) <= (ax[i] - x) {
        i - 1
    } else {
        i
    }
}

/// Cell index i with ax[i] <= x <= ax[i+1] (clamped) and the local weight.
fn locate_cell(ax: &[f64], x: f64) -> (usize, f64) {
    let n = ax.len();
    let x = x.clamp(ax[0], ax[n - 1]);
    let mut i = ax.partition_point(|&v| v <= x);
    i = i.clamp(1, n - 1) - 1;
    let t = (x - ax[i]) / (ax[i + 1] - ax[i]);
    (i, t)
}

/// Nonuniform central first-derivative coefficients (c_minus, c_0, c_plus).
pub(crate) fn first_derivative_coeffs(hm: f64, hp: f64) -> (f64, f64, f64) {
    (
        -hp / (hm * (hm + hp)),
        (hp - hm) / (hm * hp),
        hm / (hp * (hm + hp)),
    )
}

/// Nonuniform central second-derivative coefficients.
pub(crate) fn second_derivative_coeffs(hm: f64, hp: f64) -> (f64, f64, f64) {
    (
        2.0 / (hm * (hm + hp)),
        -2.0 / (hm * hp),
        2.0 / (hp * (hm + hp)),
    )
}

// ---------------------------------------------------------------------------
// Generator stencil
// ---------------------------------------------------------------------------

/// Per-node finite-difference coefficients realizing A_t - r, with
/// A_t = 1/2 a_ij d_ij + b_i d_i and a = sigma sigma'.
///
/// Rows exist for interior nodes only. Cross-derivative terms use the
/// composition of central first differences, so any polynomial of total
/// degree <= 2 is reproduced exactly up to round-off.
pub struct GeneratorStencil {
    pub time: f64,
    n_nodes: usize,
    rows: Vec<Option<StencilRow>>,
}

#[derive(Clone, Debug)]
pub struct StencilRow {
    pub diag: f64,
    /// (flat neighbor index, coefficient), sorted by index.
    pub neighbors: Vec<(usize, f64)>,
}

impl GeneratorStencil {
    pub fn build(model: &DiffusionModel, grid: &SpaceTimeGrid, t: f64) -> Result<Self> {
        let d = grid.space_dim();
        if d != model.state_dim() {
            return Err(Error::Mismatch(format!(
                "grid dimension {d} != model dimension {}",
                model.state_dim()
            )));
        }
        for j in 0..d {
            if grid.axis(j).len() < 3 {
                return Err(Error::GridTooSmall {
                    axis: j,
                    nodes: grid.axis(j).len(),
                });
            }
        }
        let n_nodes = grid.n_space_nodes();
        let mut rows: Vec<Option<StencilRow>> = vec![None; n_nodes];
        let strides = grid.strides().to_vec();
        let mut drift = vec![0.0; d];

        for flat in grid.interior_nodes() {
            let multi = grid.multi_index(flat);
            let x = grid.node_coords(flat);
            let a = model.diffusion_matrix(t, &x)?;
            model.drift_into(t, &x, &mut drift);
            let r = model.rate(t, &x);
            if drift.iter().any(|v| !v.is_finite()) || !r.is_finite() {
                return Err(Error::NonFinite(format!("coefficients at t={t}, x={x:?}")));
            }

            // signed flat offset -> accumulated coefficient
            let mut entries: BTreeMap<isize, f64> = BTreeMap::new();
            let mut add = |off: isize, c: f64| {
                if c != 0.0 {
                    *entries.entry(off).or_insert(0.0) += c;
                }
            };

            let mut d1 = vec![(0.0, 0.0, 0.0); d];
            for j in 0..d {
                let ax = grid.axis(j);
                let i = multi[j];
                let (hm, hp) = (ax[i] - ax[i - 1], ax[i + 1] - ax[i]);
                d1[j] = first_derivative_coeffs(hm, hp);
                let (sm, s0, sp) = second_derivative_coeffs(hm, hp);
                let half_a = 0.5 * a[(j, j)];
                let s = strides[j] as isize;
                add(-s, half_a * sm + drift[j] * d1[j].0);
                add(0, half_a * s0 + drift[j] * d1[j].1);
                add(s, half_a * sp + drift[j] * d1[j].2);
            }
            // cross terms: a_ij d_ij for i < j (the 1/2 cancels against the
            // symmetric pair)
            for i in 0..d {
                for j in (i + 1)..d {
                    let aij = a[(i, j)];
                    if aij == 0.0 {
                        continue;
                    }
                    let (si, sj) = (strides[i] as isize, strides[j] as isize);
                    let ci = [d1[i].0, d1[i].1, d1[i].2];
                    let cj = [d1[j].0, d1[j].1, d1[j].2];
                    for (di, &cwi) in ci.iter().enumerate() {
                        for (dj, &cwj) in cj.iter().enumerate() {
                            let off = (di as isize - 1) * si + (dj as isize - 1) * sj;
                            add(off, aij * cwi * cwj);
                        }
                    }
                }
            }
            add(0, -r);

            let mut diag = 0.0;
            let mut neighbors = Vec::with_capacity(entries.len().saturating_sub(1));
            for (off, c) in entries {
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!("stencil coefficient at x={x:?}")));
                }
                if off == 0 {
                    diag = c;
                } else {
                    let nb = (flat as isize + off) as usize;
                    neighbors.push((nb, c));
                }
            }
            rows[flat] = Some(StencilRow { diag, neighbors });
        }

        Ok(Self {
            time: t,
            n_nodes,
            rows,
        })
    }

    pub fn row(&self, flat: usize) -> Option<&StencilRow> {
        self.rows[flat].as_ref()
    }

    /// Applies (A_t - r) to a nodal slice. Boundary nodes, where no stencil
    /// exists, are reported as NaN.
    pub fn apply(&self, slice: &[f64]) -> Vec<f64> {
        debug_assert_eq!(slice.len(), self.n_nodes);
        let mut out = vec![f64::NAN; self.n_nodes];
        for (flat, row) in self.rows.iter().enumerate() {
            if let Some(row) = row {
                let mut s = row.diag * slice[flat];
                for &(nb, c) in &row.neighbors {
                    s += c * slice[nb];
                }
                out[flat] = s;
            }
        }
        out
    }

    pub fn apply_at(&self, slice: &[f64], flat: usize) -> Option<f64> {
        self.rows[flat].as_ref().map(|row| {
            let mut s = row.diag * slice[flat];
            for &(nb, c) in &row.neighbors {
                s += c * slice[nb];
            }
            s
        })
    }
}

/// Evaluates (A_t u - r u) of a nodal slice at every interior node of the
/// grid; boundary nodes are NaN.
pub fn apply_generator(
    model: &DiffusionModel,
    slice: &[f64],
    t: f64,
    grid: &SpaceTimeGrid,
) -> Result<Vec<f64>> {
    if slice.len() != grid.n_space_nodes() {
        return Err(Error::Mismatch(format!(
            "slice has {} values, grid has {} nodes",
            slice.len(),
            grid.n_space_nodes()
        )));
    }
    let stencil = GeneratorStencil::build(model, grid, t)?;
    Ok(stencil.apply(slice))
}

/// Convenience wrapper: shared immutable grids are used across batches,
/// surfaces and masks.
pub type SharedGrid = Arc<SpaceTimeGrid>;
