//! Snell envelope by simulation, independent of the PDE route.
//!
//! The optimal-stopping value sup over stopping times of E[l_tau f(X_tau)]
//! is computed three ways: backward induction on a Markov-chain
//! approximation with Gaussian quadrature ([`chain_dp`]), least-squares
//! regression Monte Carlo ([`lsm_price`]), and direct evaluation of explicit
//! stopping rules on simulated paths ([`evaluate_stopping_rule`]).
//!
//! Two statistical audits connect a value surface back to the probabilistic
//! picture: discounted values along paths must be supermartingales whose
//! drift vanishes on the continuation region ([`supermartingale_check`]),
//! and the martingale part must load on the Brownian increments with
//! integrand sigma' grad u ([`martingale_integrand_check`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::linalg::{mean_se, ols};
use crate::model::{DiffusionModel, PayoffSpec};
use crate::sim::{DiscountPath, PathBatch};
use crate::vi::{RegionKind, RegionMask, SolveMeta, ValueSurface};

// ---------------------------------------------------------------------------
// Price estimates
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceMethod {
    ChainDp,
    Lsm,
    RuleEval,
}

/// A Monte Carlo (or chain) price with its sampling error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: PriceMethod,
    pub n_paths: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature
// ---------------------------------------------------------------------------

/// Nodes z_i and probabilities p_i with sum p_i = 1 such that
/// E[g(Z)] ~ sum p_i g(z_i) for Z standard normal. Computed by the
/// Golub-Welsch eigendecomposition of the Hermite Jacobi matrix.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let q0 = eig.eigenvectors[(0, i)];
            (node, q0 * q0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let nodes = pairs.iter().map(|&(x, _)| x * std::f64::consts::SQRT_2).collect();
    let probs = pairs.iter().map(|&(_, w)| w).collect();
    (nodes, probs)
}

/// One Bellman step: max(immediate payoff, discount * expected next value).
#[inline]
pub fn bellman_update(immediate: f64, discount: f64, transitions: &[(f64, f64)]) -> f64 {
    let cont: f64 = transitions.iter().map(|&(p, v)| p * v).sum();
    immediate.max(discount * cont)
}

// ---------------------------------------------------------------------------
// Chain dynamic programming
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainDpParams {
    /// Gauss-Hermite points per noise dimension.
    pub quadrature_points: usize,
}

impl Default for ChainDpParams {
    fn default() -> Self {
        Self { quadrature_points: 9 }
    }
}

/// Snell envelope by backward induction on a locally transition-sampled
/// chain: u_M = f and
/// u_k(x) = max(f(x), e^{-r dt} E[u_{k+1}(x + b dt + sigma sqrt(dt) Z)]),
/// with the expectation by tensor Gauss-Hermite quadrature and values off
/// the grid read through quadratic interpolation. Quadrature points that
/// leave the box are valued by the boundary policy and counted in the
/// surface warnings.
pub fn chain_dp(
    model: &DiffusionModel,
    payoff: &PayoffSpec,
    grid: &Arc<SpaceTimeGrid>,
    params: &ChainDpParams,
) -> Result<ValueSurface> {
    let d = model.state_dim();
    let n = model.noise_dim();
    if d > 2 {
        return Err(Error::Precondition(
            "chain dynamic programming is limited to d <= 2".into(),
        ));
    }
    if grid.space_dim() != d {
        return Err(Error::Mismatch("grid and model dimensions differ".into()));
    }
    let (z_nodes, z_probs) = gauss_hermite_normal(params.quadrature_points);
    let q = z_nodes.len();
    let n_quad = q.pow(n as u32);
    // tensor product of 1-d rules
    let quad: Vec<(Vec<f64>, f64)> = (0..n_quad)
        .map(|mut idx| {
            let mut z = vec![0.0; n];
            let mut p = 1.0;
            for zj in z.iter_mut() {
                let i = idx % q;
                idx /= q;
                *zj = z_nodes[i];
                p *= z_probs[i];
            }
            (z, p)
        })
        .collect();

    let s = grid.n_space_nodes();
    let m = grid.n_time_steps();
    let times = grid.time_nodes().to_vec();
    let obstacle: Vec<f64> = (0..s).map(|i| payoff.evaluate(&grid.node_coords(i))).collect();
    let scale = obstacle.iter().fold(1.0f64, |a, &b| a.max(b.abs()));

    let mut values = vec![0.0f64; (m + 1) * s];
    values[m * s..].copy_from_slice(&obstacle);
    let out_of_box = AtomicUsize::new(0);

    for k in (0..m).rev() {
        let t = times[k];
        let dt = times[k + 1] - t;
        let sdt = dt.sqrt();
        let next: Vec<f64> = values[(k + 1) * s..(k + 2) * s].to_vec();
        let level: Vec<f64> = (0..s)
            .into_par_iter()
            .map(|flat| {
                let x = grid.node_coords(flat);
                let mut drift = vec![0.0; d];
                let mut sigma = vec![0.0; d * n];
                model.drift_into(t, &x, &mut drift);
                model.diffusion_into(t, &x, &mut sigma);
                let r = model.rate(t, &x);
                let mut expectation = 0.0;
                let mut point = vec![0.0; d];
                for (z, p) in &quad {
                    for i in 0..d {
                        let mut v = x[i] + drift[i] * dt;
                        for qn in 0..n {
                            v += sigma[i * n + qn] * sdt * z[qn];
                        }
                        point[i] = v;
                    }
                    let value = if grid.contains(&point) {
                        grid.interp_quadratic(&next, &point)
                    } else {
                        out_of_box.fetch_add(1, Ordering::Relaxed);
                        match grid.boundary_policy {
                            crate::grid::BoundaryPolicy::DirichletPayoff => {
                                payoff.evaluate(&point)
                            }
                            crate::grid::BoundaryPolicy::NeumannZero => {
                                grid.interp_quadratic(&next, &point)
                            }
                        }
                    };
                    expectation += p * value;
                }
                obstacle[flat].max((-r * dt).exp() * expectation)
            })
            .collect();
        values[k * s..(k + 1) * s].copy_from_slice(&level);
    }

    let mut meta = SolveMeta {
        method: "chain_dp".into(),
        payoff_scale: scale,
        ..Default::default()
    };
    let escaped = out_of_box.load(Ordering::Relaxed);
    if escaped > 0 {
        meta.warnings.push(format!(
            "{escaped} quadrature points left the box and were valued by the boundary policy"
        ));
    }
    let mut surface = ValueSurface::from_values(Arc::clone(grid), values, "chain_dp")?;
    meta.tol = 0.0;
    surface.meta = meta;
    Ok(surface)
}

// ---------------------------------------------------------------------------
// Stopping rules
// ---------------------------------------------------------------------------

/// Basis used by the regression rule: monomials up to `degree` in each
/// coordinate, optionally appending the payoff itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LsmBasis {
    pub degree: usize,
    pub include_payoff: bool,
}

impl LsmBasis {
    fn width(&self, d: usize) -> usize {
        1 + d * self.degree + usize::from(self.include_payoff)
    }

    fn fill_row(&self, x: &[f64], payoff_value: f64, out: &mut [f64]) {
        let mut idx = 0;
        out[idx] = 1.0;
        idx += 1;
        for &xi in x {
            let mut pow = 1.0;
            for _ in 0..self.degree {
                pow *= xi;
                out[idx] = pow;
                idx += 1;
            }
        }
        if self.include_payoff {
            out[idx] = payoff_value;
        }
    }
}

/// Continuation-value estimate for one exercise date.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelRule {
    pub coeffs: Vec<f64>,
    pub degree: usize,
}

/// An adapted stopping rule: the decision at time t_k reads only (k, X_k).
#[derive(Clone, Debug)]
pub enum StoppingRule {
    /// Stop on first entry into the exercise mask (nearest-node lookup).
    Region(RegionMask),
    /// Stop when the payoff meets the regressed continuation estimate.
    Coefficients {
        basis: LsmBasis,
        /// One entry per time node 1..M-1; None means "no estimate, hold".
        levels: Vec<Option<LevelRule>>,
        /// Decision at t_0 (all paths share the initial state).
        stop_at_start: bool,
    },
}

impl StoppingRule {
    /// First index k at which the rule fires on path `p` (M if never).
    fn stopping_index(&self, batch: &PathBatch, payoff: &PayoffSpec, p: usize) -> usize {
        let m = batch.n_steps();
        match self {
            StoppingRule::Region(mask) => {
                for k in 0..m {
                    let nearest = mask.grid.nearest_node(batch.state(p, k));
                    if mask.contains(k, nearest) {
                        return k;
                    }
                }
                m
            }
            StoppingRule::Coefficients {
                basis,
                levels,
                stop_at_start,
            } => {
                if *stop_at_start {
                    return 0;
                }
                let mut row = vec![0.0; basis.width(batch.d)];
                for k in 1..m {
                    let x = batch.state(p, k);
                    let ex = payoff.evaluate(x);
                    if ex <= 0.0 {
                        continue;
                    }
                    if let Some(Some(rule)) = levels.get(k) {
                        let local = LsmBasis {
                            degree: rule.degree,
                            include_payoff: basis.include_payoff,
                        };
                        local.fill_row(x, ex, &mut row[..local.width(batch.d)]);
                        let cont: f64 = rule
                            .coeffs
                            .iter()
                            .zip(&row)
                            .map(|(c, b)| c * b)
                            .sum();
                        // ties stop: the optimal time is a first entry
                        if ex >= cont {
                            return k;
                        }
                    }
                }
                m
            }
        }
    }
}

/// Evaluates an adapted stopping rule: the mean of l_tau f(X_tau) with tau
/// the first firing time (tau = T when the rule never fires).
pub fn evaluate_stopping_rule(
    batch: &PathBatch,
    discount: &DiscountPath,
    payoff: &PayoffSpec,
    rule: &StoppingRule,
) -> Result<PriceEstimate> {
    if let StoppingRule::Region(mask) = rule {
        if mask.kind != RegionKind::Exercise {
            return Err(Error::Precondition(
                "stopping rules take the exercise mask, not the continuation mask".into(),
            ));
        }
        let rt = mask.grid.time_nodes();
        let bt = &batch.time_nodes;
        if rt.len() != bt.len()
            || rt.iter().zip(bt).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
        {
            return Err(Error::Mismatch(
                "region mask must be defined on the batch's time nodes".into(),
            ));
        }
    }
    let payouts: Vec<f64> = (0..batch.n_paths)
        .into_par_iter()
        .map(|p| {
            let k = rule.stopping_index(batch, payoff, p);
            discount.factor(p, k) * payoff.evaluate(batch.state(p, k))
        })
        .collect();
    let (value, std_error) = mean_se(&payouts);
    Ok(PriceEstimate {
        value,
        std_error,
        method: PriceMethod::RuleEval,
        n_paths: batch.n_paths,
        seed: batch.seed,
    })
}

// ---------------------------------------------------------------------------
// Least-squares Monte Carlo
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExerciseStyle {
    American,
    /// Exercise permitted only at maturity; the estimate reduces to the
    /// discounted Monte Carlo mean of f(X_T).
    EuropeanOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsmParams {
    pub degree: usize,
    pub include_payoff_basis: bool,
    pub exercise: ExerciseStyle,
    /// Minimum in-the-money paths before a regression is attempted.
    pub min_regression_paths: usize,
}

impl Default for LsmParams {
    fn default() -> Self {
        Self {
            degree: 3,
            include_payoff_basis: true,
            exercise: ExerciseStyle::American,
            min_regression_paths: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LsmOutcome {
    /// Out-of-sample estimate: rule fit on even-indexed paths, evaluated on
    /// odd-indexed paths (low-bias side).
    pub estimate: PriceEstimate,
    /// Value of the fitted rule on its own training paths (high-bias side).
    pub in_sample_value: f64,
    pub rule: StoppingRule,
    pub warnings: Vec<String>,
}

/// Standard backward regression on in-the-money paths estimating the
/// continuation value, with an even/odd path split separating fitting from
/// evaluation. Rank-deficient regressions fall back to a lower degree and
/// warn.
pub fn lsm_price(
    batch: &PathBatch,
    discount: &DiscountPath,
    payoff: &PayoffSpec,
    params: &LsmParams,
) -> Result<LsmOutcome> {
    let m = batch.n_steps();
    let d = batch.d;
    if m < 1 {
        return Err(Error::Precondition("need at least one time step".into()));
    }
    let basis = LsmBasis {
        degree: params.degree,
        include_payoff: params.include_payoff_basis,
    };
    let mut warnings = Vec::new();

    if params.exercise == ExerciseStyle::EuropeanOnly {
        let payouts: Vec<f64> = (0..batch.n_paths)
            .map(|p| discount.factor(p, m) * payoff.evaluate(batch.state(p, m)))
            .collect();
        let (value, std_error) = mean_se(&payouts);
        return Ok(LsmOutcome {
            estimate: PriceEstimate {
                value,
                std_error,
                method: PriceMethod::Lsm,
                n_paths: batch.n_paths,
                seed: batch.seed,
            },
            in_sample_value: value,
            rule: StoppingRule::Coefficients {
                basis,
                levels: vec![None; m],
                stop_at_start: false,
            },
            warnings,
        });
    }

    let train: Vec<usize> = (0..batch.n_paths).step_by(2).collect();
    let eval: Vec<usize> = (1..batch.n_paths).step_by(2).collect();
    if train.len() < 2 || eval.is_empty() {
        return Err(Error::Precondition(
            "LSM needs at least four paths for the fit/evaluation split".into(),
        ));
    }

    // Backward pass on the training half, tracking each path's stop index.
    let mut tau: Vec<usize> = vec![m; train.len()];
    let mut levels: Vec<Option<LevelRule>> = vec![None; m];
    for k in (1..m).rev() {
        let itm: Vec<usize> = train
            .iter()
            .enumerate()
            .filter(|(_, &p)| payoff.evaluate(batch.state(p, k)) > 0.0)
            .map(|(ti, _)| ti)
            .collect();
        let min_rows = params.min_regression_paths.max(basis.width(d) + 1);
        if itm.len() < min_rows {
            continue;
        }
        // realized discounted cashflow, seen from t_k
        let y = DVector::from_iterator(
            itm.len(),
            itm.iter().map(|&ti| {
                let p = train[ti];
                let stop = tau[ti];
                payoff.evaluate(batch.state(p, stop)) * discount.factor(p, stop)
                    / discount.factor(p, k)
            }),
        );
        // fit, degrading the degree when the design matrix is rank deficient
        let mut fitted: Option<(LevelRule, LsmBasis)> = None;
        let mut degree = basis.degree;
        loop {
            let local = LsmBasis {
                degree,
                include_payoff: basis.include_payoff,
            };
            let w = local.width(d);
            let mut design = DMatrix::zeros(itm.len(), w);
            for (row, &ti) in itm.iter().enumerate() {
                let p = train[ti];
                let x = batch.state(p, k);
                let f = payoff.evaluate(x);
                let mut buf = vec![0.0; w];
                local.fill_row(x, f, &mut buf);
                for (col, &v) in buf.iter().enumerate() {
                    design[(row, col)] = v;
                }
            }
            match ols(&design, &y) {
                Some(fit) if fit.rank == w => {
                    fitted = Some((
                        LevelRule {
                            coeffs: fit.coeffs,
                            degree,
                        },
                        local,
                    ));
                    break;
                }
                Some(fit) => {
                    if degree == 0 {
                        // intercept-only fit is always usable even when the
                        // payoff column is collinear
                        fitted = Some((
                            LevelRule {
                                coeffs: fit.coeffs,
                                degree,
                            },
                            local,
                        ));
                        break;
                    }
                    warnings.push(format!(
                        "level {k}: design matrix rank {} < {w}; retrying with degree {}",
                        fit.rank,
                        degree - 1
                    ));
                    degree -= 1;
                }
                None => break,
            }
        }
        let Some((rule, local)) = fitted else { continue };
        // exercise decision on training paths (ties stop)
        let mut row = vec![0.0; local.width(d)];
        for &ti in &itm {
            let p = train[ti];
            let x = batch.state(p, k);
            let ex = payoff.evaluate(x);
            local.fill_row(x, ex, &mut row);
            let cont: f64 = rule.coeffs.iter().zip(&row).map(|(c, b)| c * b).sum();
            if ex >= cont {
                tau[ti] = k;
            }
        }
        levels[k] = Some(rule);
    }

    // Decision at t_0: all paths share x0, so the continuation value is the
    // plain training-half mean.
    let cont0: f64 = train
        .iter()
        .zip(&tau)
        .map(|(&p, &stop)| payoff.evaluate(batch.state(p, stop)) * discount.factor(p, stop))
        .sum::<f64>()
        / train.len() as f64;
    let ex0 = payoff.evaluate(&batch.x0);
    let stop_at_start = ex0 >= cont0;
    let in_sample_value = if stop_at_start { ex0 } else { cont0 };

    let rule = StoppingRule::Coefficients {
        basis,
        levels,
        stop_at_start,
    };

    // Out-of-sample evaluation on the held-out half.
    let payouts: Vec<f64> = eval
        .par_iter()
        .map(|&p| {
            let k = rule.stopping_index(batch, payoff, p);
            discount.factor(p, k) * payoff.evaluate(batch.state(p, k))
        })
        .collect();
    let (value, std_error) = mean_se(&payouts);

    Ok(LsmOutcome {
        estimate: PriceEstimate {
            value,
            std_error,
            method: PriceMethod::Lsm,
            n_paths: eval.len(),
            seed: batch.seed,
        },
        in_sample_value,
        rule,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Supermartingale decomposition check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupermartingaleParams {
    /// (s, t) time pairs to test; mapped to the nearest batch nodes.
    pub pairs: Vec<(f64, f64)>,
    pub n_bins: usize,
    pub sigma_level: f64,
    pub min_bin_paths: usize,
}

impl Default for SupermartingaleParams {
    fn default() -> Self {
        Self {
            pairs: vec![(0.1, 0.3), (0.3, 0.5), (0.5, 0.7), (0.7, 0.9)],
            n_bins: 10,
            sigma_level: 3.0,
            min_bin_paths: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinDrift {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsetDrift {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    /// |mean| <= sigma_level * se: the drift is statistically flat.
    pub flat: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairDrift {
    pub s: f64,
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    /// mean <= +sigma_level * se (one-sided supermartingale test).
    pub pass: bool,
    pub bins: Vec<BinDrift>,
    /// Drift over paths that stay in the continuation region on [s, t).
    pub continuation: Option<SubsetDrift>,
    /// Drift over paths that stay in the exercise region on [s, t).
    pub exercise: Option<SubsetDrift>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub pairs: Vec<PairDrift>,
    /// All pairs pass the one-sided test and, when a region mask was given,
    /// the continuation-conditioned drift is flat.
    pub pass: bool,
}

fn nearest_time_index(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (k, &tk) in times.iter().enumerate() {
        let d = (tk - t).abs();
        if d < dist {
            dist = d;
            best = k;
        }
    }
    best
}

fn check_nodes_match(surface: &ValueSurface, batch: &PathBatch) -> Result<()> {
    let st = surface.grid.time_nodes();
    let bt = &batch.time_nodes;
    if st.len() != bt.len()
        || st.iter().zip(bt).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
    {
        return Err(Error::Mismatch(
            "surface and batch must share their time nodes".into(),
        ));
    }
    Ok(())
}

/// Tests that Y_t = l_t u(t, X_t) behaves as a supermartingale whose
/// decreasing part is flat on the continuation region.
pub fn supermartingale_check(
    batch: &PathBatch,
    discount: &DiscountPath,
    surface: &ValueSurface,
    exercise: Option<&RegionMask>,
    params: &SupermartingaleParams,
) -> Result<SupermartingaleReport> {
    check_nodes_match(surface, batch)?;
    let times = &batch.time_nodes;
    let mut pairs_out = Vec::new();
    let mut all_pass = true;

    for &(s_time, t_time) in &params.pairs {
        let ks = nearest_time_index(times, s_time);
        let kt = nearest_time_index(times, t_time);
        if ks >= kt {
            return Err(Error::Precondition(format!(
                "pair ({s_time}, {t_time}) collapses on the grid"
            )));
        }
        let y = |p: usize, k: usize| discount.factor(p, k) * surface.interp_at(k, batch.state(p, k));
        let incs: Vec<f64> = (0..batch.n_paths).map(|p| y(p, kt) - y(p, ks)).collect();
        let (mean, se) = mean_se(&incs);
        let pass = mean <= params.sigma_level * se;
        all_pass &= pass;

        // quantile bins on the first coordinate of X_s
        let mut order: Vec<usize> = (0..batch.n_paths).collect();
        order.sort_by(|&a, &b| {
            batch.state(a, ks)[0]
                .partial_cmp(&batch.state(b, ks)[0])
                .unwrap()
        });
        let mut bins = Vec::new();
        let per = (batch.n_paths / params.n_bins.max(1)).max(1);
        let mut start = 0;
        while start < order.len() {
            let end = (start + per).min(order.len());
            let members = &order[start..end];
            if members.len() >= params.min_bin_paths {
                let vals: Vec<f64> = members.iter().map(|&p| incs[p]).collect();
                let (bm, bse) = mean_se(&vals);
                bins.push(BinDrift {
                    x_lo: batch.state(members[0], ks)[0],
                    x_hi: batch.state(members[members.len() - 1], ks)[0],
                    n: members.len(),
                    mean: bm,
                    se: bse,
                });
            }
            start = end;
        }

        // conditioning on staying in one region across [s, t)
        let (continuation, exercise_subset) = match exercise {
            Some(mask) => {
                let mut cont_vals = Vec::new();
                let mut ex_vals = Vec::new();
                for p in 0..batch.n_paths {
                    let mut in_cont = true;
                    let mut in_ex = true;
                    for k in ks..kt {
                        let nearest = mask.grid.nearest_node(batch.state(p, k));
                        let exercised = mask.contains(k, nearest);
                        in_cont &= !exercised;
                        in_ex &= exercised;
                    }
                    if in_cont {
                        cont_vals.push(incs[p]);
                    }
                    if in_ex {
                        ex_vals.push(incs[p]);
                    }
                }
                let make = |vals: &[f64]| {
                    if vals.len() < 2 {
                        None
                    } else {
                        let (m, e) = mean_se(vals);
                        Some(SubsetDrift {
                            n: vals.len(),
                            mean: m,
                            se: e,
                            flat: m.abs() <= params.sigma_level * e,
                        })
                    }
                };
                (make(&cont_vals), make(&ex_vals))
            }
            None => (None, None),
        };
        if let Some(c) = &continuation {
            all_pass &= c.flat;
        }

        pairs_out.push(PairDrift {
            s: times[ks],
            t: times[kt],
            mean,
            se,
            pass,
            bins,
            continuation,
            exercise: exercise_subset,
        });
    }

    Ok(SupermartingaleReport {
        pairs: pairs_out,
        pass: all_pass,
    })
}

// ---------------------------------------------------------------------------
// Martingale integrand check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrandParams {
    /// Times at which increments are regressed (nearest batch node).
    pub levels: Vec<f64>,
    pub n_bins: usize,
    pub sigma_level: f64,
    pub min_bin_paths: usize,
}

impl Default for IntegrandParams {
    fn default() -> Self {
        Self {
            levels: vec![0.25, 0.5, 0.75],
            n_bins: 5,
            sigma_level: 3.0,
            min_bin_paths: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegrandBin {
    pub t: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub n: usize,
    /// Regression slope on each Brownian increment coordinate.
    pub slope: Vec<f64>,
    pub slope_se: Vec<f64>,
    /// Bin average of l sigma' grad u from the surface stencil.
    pub predicted: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegrandReport {
    pub bins: Vec<IntegrandBin>,
    pub skipped: usize,
    pub pass: bool,
}

/// Regresses pathwise increments of Y = l u(t, X) on the Brownian
/// increments; in the continuation region the loading must match
/// l sigma' grad u computed from the surface by stencil differentiation.
pub fn martingale_integrand_check(
    batch: &PathBatch,
    surface: &ValueSurface,
    model: &DiffusionModel,
    discount: &DiscountPath,
    continuation: Option<&RegionMask>,
    params: &IntegrandParams,
) -> Result<IntegrandReport> {
    check_nodes_match(surface, batch)?;
    let times = &batch.time_nodes;
    let n = batch.n_noise;
    let grid = &surface.grid;
    let mut bins_out = Vec::new();
    let mut skipped = 0usize;
    let mut all_pass = true;
    let abs_floor = 1e-9 * surface.meta.payoff_scale.max(1.0);

    for &level_time in &params.levels {
        let k = nearest_time_index(times, level_time);
        if k + 1 >= times.len() {
            skipped += 1;
            continue;
        }
        // eligible paths: inside the continuation region at t_k (when given)
        let eligible: Vec<usize> = (0..batch.n_paths)
            .filter(|&p| match continuation {
                Some(mask) => {
                    let nearest = mask.grid.nearest_node(batch.state(p, k));
                    mask.contains(k, nearest)
                }
                None => true,
            })
            .collect();
        if eligible.len() < params.min_bin_paths {
            skipped += 1;
            continue;
        }
        let mut order = eligible;
        order.sort_by(|&a, &b| {
            batch.state(a, k)[0]
                .partial_cmp(&batch.state(b, k)[0])
                .unwrap()
        });
        let per = (order.len() / params.n_bins.max(1)).max(1);
        let mut start = 0;
        while start < order.len() {
            let end = (start + per).min(order.len());
            let members = &order[start..end];
            start = end;
            if members.len() < params.min_bin_paths {
                skipped += 1;
                continue;
            }
            // regression of dY on dW with intercept (the estimated drift)
            let rows = members.len();
            let mut design = DMatrix::zeros(rows, 1 + n);
            let mut resp = DVector::zeros(rows);
            let mut predicted = vec![0.0; n];
            let mut sigma = vec![0.0; batch.d * n];
            for (row, &p) in members.iter().enumerate() {
                let x = batch.state(p, k);
                let y0 = discount.factor(p, k) * surface.interp_at(k, x);
                let y1 = discount.factor(p, k + 1) * surface.interp_at(k + 1, batch.state(p, k + 1));
                resp[row] = y1 - y0;
                design[(row, 0)] = 1.0;
                for q in 0..n {
                    design[(row, 1 + q)] = batch.increment(p, k)[q];
                }
                // predicted loading l sigma' grad u at the nearest node
                let flat = grid.nearest_node(x);
                let grad = grid.gradient_at(surface.level(k), flat);
                model.diffusion_into(times[k], x, &mut sigma);
                let l = discount.factor(p, k);
                for q in 0..n {
                    let mut load = 0.0;
                    for i in 0..batch.d {
                        load += sigma[i * n + q] * grad[i];
                    }
                    predicted[q] += l * load / rows as f64;
                }
            }
            let Some(fit) = ols(&design, &resp) else {
                skipped += 1;
                continue;
            };
            let slope: Vec<f64> = fit.coeffs[1..].to_vec();
            let slope_se: Vec<f64> = fit.std_errors[1..].to_vec();
            let pass = slope
                .iter()
                .zip(&slope_se)
                .zip(&predicted)
                .all(|((b, se), pred)| (b - pred).abs() <= params.sigma_level * se + abs_floor);
            all_pass &= pass;
            bins_out.push(IntegrandBin {
                t: times[k],
                x_lo: batch.state(members[0], k)[0],
                x_hi: batch.state(members[members.len() - 1], k)[0],
                n: rows,
                slope,
                slope_se,
                predicted,
                pass,
            });
        }
    }

    Ok(IntegrandReport {
        bins: bins_out,
        skipped,
        pass: all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{uniform_time_nodes, BoundaryPolicy};
    use crate::model::{build_model, ModelConfig};
    use crate::sim::{discount_factors, simulate_paths};
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
    fn gauss_hermite_reproduces_normal_moments() {
        let (z, p) = gauss_hermite_normal(9);
        assert_eq!(z.len(), 9);
        let moment = |k: u32| -> f64 { z.iter().zip(&p).map(|(zi, pi)| pi * zi.powi(k as i32)).sum() };
        assert_relative_eq!(moment(0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(moment(1), 0.0, epsilon = 1e-10);
        assert_relative_eq!(moment(2), 1.0, epsilon = 1e-10);
        assert_relative_eq!(moment(4), 3.0, epsilon = 1e-9);
        assert_relative_eq!(moment(8), 105.0, epsilon = 1e-6);
    }

    #[test]
    fn bellman_update_hand_chain() {
        // X moves +-1 with probability 1/2 from 0, f = |x|, r = 0, one step:
        // u_0(0) = max(0, 1/2 * 1 + 1/2 * 1) = 1.
        let v = bellman_update(0.0, 1.0, &[(0.5, 1.0), (0.5, 1.0)]);
        assert_eq!(v, 1.0);
        // stopping dominates when the immediate payoff is larger
        assert_eq!(bellman_update(2.0, 1.0, &[(1.0, 1.0)]), 2.0);
    }

    #[test]
    fn single_step_martingale_linear_payoff() {
        // martingale dynamics, f(x) = x, r = 0, one step: u_0 = x exactly.
        let model = DiffusionModel::new(
            1,
            1,
            1.0,
            true,
            |_t, _x, out| out[0] = 0.0,
            |_t, _x, out| out[0] = 0.3,
            |_t, _x| 0.0,
        )
        .unwrap();
        let grid = Arc::new(
            SpaceTimeGrid::uniform(1.0, 1, &[-4.0], &[4.0], &[33], BoundaryPolicy::DirichletPayoff)
                .unwrap(),
        );
        let payoff = PayoffSpec::custom("identity", |x: &[f64]| x[0], None, None);
        let surface = chain_dp(&model, &payoff, &grid, &ChainDpParams::default()).unwrap();
        for flat in 0..grid.n_space_nodes() {
            let x = grid.node_coords(flat)[0];
            assert_relative_eq!(surface.value(0, flat), x, epsilon = 1e-10);
        }
    }

    #[test]
    fn chain_dp_put_matches_frozen_binomial() {
        let model = bs_model();
        let grid = put_grid(200, 1601);
        let payoff = PayoffSpec::put(100.0);
        let surface = chain_dp(&model, &payoff, &grid, &ChainDpParams::default()).unwrap();
        let price = surface.price_at(&[100.0]);
        assert!(
            (price - 6.090355705428374).abs() <= 1e-2,
            "chain price {price} vs binomial oracle"
        );
        // dominance: the DP surface dominates the payoff everywhere
        for k in 0..=grid.n_time_steps() {
            for flat in 0..grid.n_space_nodes() {
                let f = payoff.evaluate(&grid.node_coords(flat));
                assert!(surface.value(k, flat) >= f - 1e-12);
            }
        }
    }

    #[test]
    fn lsm_deterministic_itm_put_stops_immediately() {
        // sigma = 0, b = 0, r = 0, x0 far below the strike: immediate
        // exercise dominates and the estimate is exact.
        let model = DiffusionModel::new(
            1,
            1,
            1.0,
            true,
            |_t, _x, out| out[0] = 0.0,
            |_t, _x, out| out[0] = 0.0,
            |_t, _x| 0.0,
        )
        .unwrap();
        let nodes = uniform_time_nodes(1.0, 8);
        let batch = simulate_paths(&model, &nodes, 64, &[50.0], 3).unwrap();
        let discount = discount_factors(&batch, &model).unwrap();
        let payoff = PayoffSpec::put(100.0);
        let out = lsm_price(&batch, &discount, &payoff, &LsmParams::default()).unwrap();
        assert_eq!(out.estimate.value, 50.0);
        assert_eq!(out.estimate.std_error, 0.0);
    }

    #[test]
    fn lsm_european_mode_is_discounted_terminal_mean() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 50);
        let batch = simulate_paths(&model, &nodes, 20_000, &[100.0], 99).unwrap();
        let discount = discount_factors(&batch, &model).unwrap();
        let payoff = PayoffSpec::put(100.0);
        let params = LsmParams {
            exercise: ExerciseStyle::EuropeanOnly,
            ..LsmParams::default()
        };
        let out = lsm_price(&batch, &discount, &payoff, &params).unwrap();
        // Black-Scholes European put at these parameters: 5.573526
        assert!(
            (out.estimate.value - 5.573526022256971).abs() <= 3.0 * out.estimate.std_error,
            "value {} se {}",
            out.estimate.value,
            out.estimate.std_error
        );
    }

    #[test]
    fn trivial_rules_price_as_expected() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 10);
        let batch = simulate_paths(&model, &nodes, 4_000, &[100.0], 5).unwrap();
        let discount = discount_factors(&batch, &model).unwrap();
        let payoff = PayoffSpec::put(100.0);
        let grid = Arc::new(
            SpaceTimeGrid::new(
                nodes.clone(),
                vec![(0..31).map(|i| 10.0 * i as f64).collect()],
                BoundaryPolicy::DirichletPayoff,
            )
            .unwrap(),
        );
        let s = grid.n_space_nodes();
        let m = grid.n_time_steps();
        // stop-at-0 rule: mask true on the whole first level
        let mut stop_now = vec![false; (m + 1) * s];
        stop_now[..s].fill(true);
        let rule = StoppingRule::Region(
            RegionMask::from_mask(RegionKind::Exercise, Arc::clone(&grid), stop_now).unwrap(),
        );
        let est = evaluate_stopping_rule(&batch, &discount, &payoff, &rule).unwrap();
        assert_eq!(est.value, 0.0); // ATM put: f(x0) = 0
        assert_eq!(est.std_error, 0.0);

        // never-stop rule: empty mask gives the discounted European value
        let never = StoppingRule::Region(
            RegionMask::from_mask(RegionKind::Exercise, Arc::clone(&grid), vec![false; (m + 1) * s])
                .unwrap(),
        );
        let est = evaluate_stopping_rule(&batch, &discount, &payoff, &never).unwrap();
        let european: Vec<f64> = (0..batch.n_paths)
            .map(|p| discount.factor(p, m) * payoff.evaluate(batch.state(p, m)))
            .collect();
        let (eu, _) = mean_se(&european);
        assert_relative_eq!(est.value, eu, epsilon = 1e-12);
    }

    #[test]
    fn region_rule_requires_matching_time_nodes() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 10);
        let batch = simulate_paths(&model, &nodes, 16, &[100.0], 5).unwrap();
        let discount = discount_factors(&batch, &model).unwrap();
        let payoff = PayoffSpec::put(100.0);
        let other = Arc::new(
            SpaceTimeGrid::uniform(1.0, 7, &[0.0], &[300.0], &[11], BoundaryPolicy::DirichletPayoff)
                .unwrap(),
        );
        let mask = RegionMask::from_mask(
            RegionKind::Exercise,
            Arc::clone(&other),
            vec![false; 8 * 11],
        )
        .unwrap();
        let err = evaluate_stopping_rule(&batch, &discount, &payoff, &StoppingRule::Region(mask));
        assert!(err.is_err());
    }

    #[test]
    fn constant_surface_zero_rate_has_exact_zero_increments() {
        let model = DiffusionModel::new(
            1,
            1,
            1.0,
            true,
            |_t, _x, out| out[0] = 0.0,
            |_t, _x, out| out[0] = 1.0,
            |_t, _x| 0.0,
        )
        .unwrap();
        let nodes = uniform_time_nodes(1.0, 10);
        let batch = simulate_paths(&model, &nodes, 500, &[0.0], 8).unwrap();
        let discount = discount_factors(&batch, &model).unwrap();
        let grid = Arc::new(
            SpaceTimeGrid::new(
                nodes.clone(),
                vec![(0..41).map(|i| -10.0 + 0.5 * i as f64).collect()],
                BoundaryPolicy::DirichletPayoff,
            )
            .unwrap(),
        );
        let c = 3.5;
        let values = vec![c; 11 * grid.n_space_nodes()];
        let surface = ValueSurface::from_values(Arc::clone(&grid), values, "constant").unwrap();
        let report = supermartingale_check(
            &batch,
            &discount,
            &surface,
            None,
            &SupermartingaleParams::default(),
        )
        .unwrap();
        for pair in &report.pairs {
            assert_eq!(pair.mean, 0.0);
            assert!(pair.pass);
        }
    }

    #[test]
    fn linear_surface_integrand_is_sigma_exactly() {
        // u(t,x) = x, b = 0, r = 0, sigma constant: dY = sigma dW exactly.
        let sigma = 0.7;
        let model = DiffusionModel::new(
            1,
            1,
            1.0,
            true,
            |_t, _x, out| out[0] = 0.0,
            move |_t, _x, out| out[0] = sigma,
            |_t, _x| 0.0,
        )
        .unwrap();
        let nodes = uniform_time_nodes(1.0, 8);
        let batch = simulate_paths(&model, &nodes, 2_000, &[0.0], 17).unwrap();
        let discount = discount_factors(&batch, &model).unwrap();
        let grid = Arc::new(
            SpaceTimeGrid::new(
                nodes.clone(),
                vec![(0..81).map(|i| -20.0 + 0.5 * i as f64).collect()],
                BoundaryPolicy::DirichletPayoff,
            )
            .unwrap(),
        );
        let values: Vec<f64> = (0..9)
            .flat_map(|_| (0..grid.n_space_nodes()).map(|i| grid.node_coords(i)[0]))
            .collect();
        let surface = ValueSurface::from_values(Arc::clone(&grid), values, "linear").unwrap();
        let params = IntegrandParams {
            levels: vec![0.25, 0.5],
            n_bins: 2,
            min_bin_paths: 100,
            ..IntegrandParams::default()
        };
        let report =
            martingale_integrand_check(&batch, &surface, &model, &discount, None, &params)
                .unwrap();
        assert!(report.pass, "{report:?}");
        for bin in &report.bins {
            assert_relative_eq!(bin.slope[0], sigma, epsilon = 1e-9);
            assert_relative_eq!(bin.predicted[0], sigma, epsilon = 1e-9);
        }
    }
}
