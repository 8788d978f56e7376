//! Path simulation with retained Brownian increments, first-variation
//! (Jacobian) flows, and pathwise discount factors.
//!
//! The scheme is Euler-Maruyama throughout; the verification targets are
//! weak quantities, so higher-order schemes are out of scope. Randomness is
//! counter-based: every path draws from its own ChaCha stream derived from
//! (seed, path index), so any partition of paths simulated concurrently
//! yields the same batch as sequential simulation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::DiffusionModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
}

/// Simulated trajectories plus the Brownian increments that generated them.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub n_paths: usize,
    pub time_nodes: Vec<f64>,
    pub d: usize,
    pub n_noise: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub x0: Vec<f64>,
    pub antithetic: bool,
    /// n_paths x (M+1) x d, row-major.
    states: Vec<f64>,
    /// n_paths x M x n, row-major.
    increments: Vec<f64>,
}

impl PathBatch {
    pub fn n_steps(&self) -> usize {
        self.time_nodes.len() - 1
    }

    /// State of path `p` at time node `k` (length d).
    #[inline]
    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        let stride = (self.n_steps() + 1) * self.d;
        let start = p * stride + k * self.d;
        &self.states[start..start + self.d]
    }

    /// Brownian increment of path `p` over [t_k, t_{k+1}] (length n).
    #[inline]
    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        let stride = self.n_steps() * self.n_noise;
        let start = p * stride + k * self.n_noise;
        &self.increments[start..start + self.n_noise]
    }

    /// All increments of one path, row-major M x n.
    pub fn path_increments(&self, p: usize) -> &[f64] {
        let stride = self.n_steps() * self.n_noise;
        &self.increments[p * stride..(p + 1) * stride]
    }

    /// All states of one path, row-major (M+1) x d.
    pub fn path_states(&self, p: usize) -> &[f64] {
        let stride = (self.n_steps() + 1) * self.d;
        &self.states[p * stride..(p + 1) * stride]
    }

    pub fn states_raw(&self) -> &[f64] {
        &self.states
    }

    pub fn increments_raw(&self) -> &[f64] {
        &self.increments
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SimOptions {
    /// Pair path 2i+1 with the sign-flipped increments of path 2i.
    pub antithetic: bool,
}

/// One Euler-Maruyama trajectory from `x0` driven by the given increments.
/// `states` must hold (M+1)*d values; returns Err(step) at the first
/// non-finite state.
pub(crate) fn euler_path(
    model: &DiffusionModel,
    time_nodes: &[f64],
    x0: &[f64],
    increments: &[f64],
    states: &mut [f64],
    drift_buf: &mut [f64],
    sigma_buf: &mut [f64],
) -> std::result::Result<(), usize> {
    let d = model.state_dim();
    let n = model.noise_dim();
    let m = time_nodes.len() - 1;
    states[..d].copy_from_slice(x0);
    for k in 0..m {
        let dt = time_nodes[k + 1] - time_nodes[k];
        let (prev, rest) = states.split_at_mut((k + 1) * d);
        let x = &prev[k * d..(k + 1) * d];
        model.drift_into(time_nodes[k], x, drift_buf);
        model.diffusion_into(time_nodes[k], x, sigma_buf);
        let dw = &increments[k * n..(k + 1) * n];
        let next = &mut rest[..d];
        for i in 0..d {
            let mut v = x[i] + drift_buf[i] * dt;
            for q in 0..n {
                v += sigma_buf[i * n + q] * dw[q];
            }
            if !v.is_finite() {
                return Err(k + 1);
            }
            next[i] = v;
        }
    }
    Ok(())
}

/// RNG stream for one path of a batch.
fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn fill_gaussian_increments(
    rng: &mut ChaCha8Rng,
    time_nodes: &[f64],
    n_noise: usize,
    out: &mut [f64],
) {
    let m = time_nodes.len() - 1;
    for k in 0..m {
        let sdt = (time_nodes[k + 1] - time_nodes[k]).sqrt();
        for q in 0..n_noise {
            let z: f64 = rng.sample(StandardNormal);
            out[k * n_noise + q] = sdt * z;
        }
    }
}

pub fn simulate_paths(
    model: &DiffusionModel,
    time_nodes: &[f64],
    n_paths: usize,
    x0: &[f64],
    seed: u64,
) -> Result<PathBatch> {
    simulate_paths_opts(model, time_nodes, n_paths, x0, seed, SimOptions::default())
}

pub fn simulate_paths_opts(
    model: &DiffusionModel,
    time_nodes: &[f64],
    n_paths: usize,
    x0: &[f64],
    seed: u64,
    opts: SimOptions,
) -> Result<PathBatch> {
    if n_paths == 0 {
        return Err(Error::Precondition("n_paths must be >= 1".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::Mismatch(format!(
            "x0 has {} entries, model has d={}",
            x0.len(),
            model.state_dim()
        )));
    }
    if time_nodes.len() < 2 {
        return Err(Error::Precondition("need at least two time nodes".into()));
    }
    let d = model.state_dim();
    let n = model.noise_dim();
    let m = time_nodes.len() - 1;

    let mut states = vec![0.0f64; n_paths * (m + 1) * d];
    let mut increments = vec![0.0f64; n_paths * m * n];

    let failures: Vec<(usize, usize)> = states
        .par_chunks_mut((m + 1) * d)
        .zip(increments.par_chunks_mut(m * n))
        .enumerate()
        .filter_map(|(p, (st, inc))| {
            if opts.antithetic {
                let mut rng = path_rng(seed, (p / 2) as u64);
                fill_gaussian_increments(&mut rng, time_nodes, n, inc);
                if p % 2 == 1 {
                    for v in inc.iter_mut() {
                        *v = -*v;
                    }
                }
            } else {
                let mut rng = path_rng(seed, p as u64);
                fill_gaussian_increments(&mut rng, time_nodes, n, inc);
            }
            let mut drift = vec![0.0; d];
            let mut sigma = vec![0.0; d * n];
            euler_path(model, time_nodes, x0, inc, st, &mut drift, &mut sigma)
                .err()
                .map(|step| (p, step))
        })
        .collect();

    if let Some(&(p, step)) = failures.iter().min() {
        return Err(Error::NonFinitePath {
            context: "state simulation",
            path: p,
            step,
        });
    }

    Ok(PathBatch {
        n_paths,
        time_nodes: time_nodes.to_vec(),
        d,
        n_noise: n,
        seed,
        scheme: Scheme::EulerMaruyama,
        x0: x0.to_vec(),
        antithetic: opts.antithetic,
        states,
        increments,
    })
}

// ---------------------------------------------------------------------------
// Discount factors
// ---------------------------------------------------------------------------

/// Pathwise discount factors l_t = exp(-int_0^t r(s, X_s) ds), with the
/// exponent accumulated by the trapezoid rule.
#[derive(Clone, Debug)]
pub struct DiscountPath {
    pub n_paths: usize,
    pub n_nodes: usize,
    factors: Vec<f64>,
}

impl DiscountPath {
    #[inline]
    pub fn factor(&self, p: usize, k: usize) -> f64 {
        self.factors[p * self.n_nodes + k]
    }

    pub fn path_factors(&self, p: usize) -> &[f64] {
        &self.factors[p * self.n_nodes..(p + 1) * self.n_nodes]
    }
}

pub fn discount_factors(batch: &PathBatch, model: &DiffusionModel) -> Result<DiscountPath> {
    let m = batch.n_steps();
    let n_nodes = m + 1;
    let mut factors = vec![0.0f64; batch.n_paths * n_nodes];
    factors
        .par_chunks_mut(n_nodes)
        .enumerate()
        .for_each(|(p, out)| {
            let mut integral = 0.0;
            out[0] = 1.0;
            let mut r_prev = model.rate(batch.time_nodes[0], batch.state(p, 0));
            for k in 0..m {
                let r_next = model.rate(batch.time_nodes[k + 1], batch.state(p, k + 1));
                let dt = batch.time_nodes[k + 1] - batch.time_nodes[k];
                integral += 0.5 * (r_prev + r_next) * dt;
                out[k + 1] = (-integral).exp();
                r_prev = r_next;
            }
        });
    if factors.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discount factors".into()));
    }
    Ok(DiscountPath {
        n_paths: batch.n_paths,
        n_nodes,
        factors,
    })
}

// ---------------------------------------------------------------------------
// First-variation flow
// ---------------------------------------------------------------------------

/// Jacobians J_t of the state with respect to the initial condition, driven
/// by the same increments and scheme as the states:
/// dJ = (dx b) J dt + sum_k (dx sigma_k) J dW^k, J_0 = I.
#[derive(Clone, Debug)]
pub struct FirstVariationFlow {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub d: usize,
    jacobians: Vec<f64>,
}

impl FirstVariationFlow {
    /// Row-major d x d Jacobian of path `p` at node `k`.
    #[inline]
    pub fn jacobian(&self, p: usize, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        let start = (p * self.n_nodes + k) * dd;
        &self.jacobians[start..start + dd]
    }
}

/// Central finite-difference step for coefficient Jacobians when no analytic
/// derivative is registered.
#[inline]
fn fd_step(xj: f64) -> f64 {
    (1e-7 * xj.abs()).max(1e-5)
}

pub(crate) fn drift_jacobian_into(
    model: &DiffusionModel,
    t: f64,
    x: &[f64],
    out: &mut [f64],
    xbuf: &mut [f64],
    fplus: &mut [f64],
    fminus: &mut [f64],
) {
    if let Some(jac) = model.drift_jacobian_fn() {
        jac(t, x, out);
        return;
    }
    let d = model.state_dim();
    xbuf.copy_from_slice(x);
    for j in 0..d {
        let h = fd_step(x[j]);
        xbuf[j] = x[j] + h;
        model.drift_into(t, xbuf, fplus);
        xbuf[j] = x[j] - h;
        model.drift_into(t, xbuf, fminus);
        xbuf[j] = x[j];
        for i in 0..d {
            out[i * d + j] = (fplus[i] - fminus[i]) / (2.0 * h);
        }
    }
}

pub(crate) fn diffusion_column_jacobian_into(
    model: &DiffusionModel,
    t: f64,
    x: &[f64],
    col: usize,
    out: &mut [f64],
    xbuf: &mut [f64],
    splus: &mut [f64],
    sminus: &mut [f64],
) {
    if let Some(jac) = model.diffusion_jacobian_fn() {
        jac(t, x, col, out);
        return;
    }
    let d = model.state_dim();
    let n = model.noise_dim();
    xbuf.copy_from_slice(x);
    for j in 0..d {
        let h = fd_step(x[j]);
        xbuf[j] = x[j] + h;
        model.diffusion_into(t, xbuf, splus);
        xbuf[j] = x[j] - h;
        model.diffusion_into(t, xbuf, sminus);
        xbuf[j] = x[j];
        for i in 0..d {
            out[i * d + j] = (splus[i * n + col] - sminus[i * n + col]) / (2.0 * h);
        }
    }
}

pub fn first_variation(batch: &PathBatch, model: &DiffusionModel) -> Result<FirstVariationFlow> {
    let d = model.state_dim();
    let n = model.noise_dim();
    if d != batch.d || n != batch.n_noise {
        return Err(Error::Mismatch("batch and model dimensions differ".into()));
    }
    let m = batch.n_steps();
    let n_nodes = m + 1;
    let dd = d * d;
    let mut jacobians = vec![0.0f64; batch.n_paths * n_nodes * dd];

    let failures: Vec<(usize, usize)> = jacobians
        .par_chunks_mut(n_nodes * dd)
        .enumerate()
        .filter_map(|(p, jpath)| {
            let mut db = vec![0.0; dd];
            let mut dsig = vec![0.0; dd];
            let mut xbuf = vec![0.0; d];
            let mut b_plus = vec![0.0; d];
            let mut b_minus = vec![0.0; d];
            let mut s_plus = vec![0.0; d * n];
            let mut s_minus = vec![0.0; d * n];
            // J_0 = identity
            for i in 0..d {
                jpath[i * d + i] = 1.0;
            }
            for k in 0..m {
                let t = batch.time_nodes[k];
                let dt = batch.time_nodes[k + 1] - t;
                let x = batch.state(p, k);
                let dw = batch.increment(p, k);
                drift_jacobian_into(model, t, x, &mut db, &mut xbuf, &mut b_plus, &mut b_minus);
                let (prev, rest) = jpath.split_at_mut((k + 1) * dd);
                let jk = &prev[k * dd..(k + 1) * dd];
                let jnext = &mut rest[..dd];
                // J_{k+1} = J_k + dt (db) J_k + sum_q dW_q (dsigma_q) J_k
                jnext.copy_from_slice(jk);
                for i in 0..d {
                    for jcol in 0..d {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += db[i * d + l] * jk[l * d + jcol];
                        }
                        jnext[i * d + jcol] += dt * s;
                    }
                }
                for q in 0..n {
                    if dw[q] == 0.0 {
                        continue;
                    }
                    diffusion_column_jacobian_into(
                        model, t, x, q, &mut dsig, &mut xbuf, &mut s_plus, &mut s_minus,
                    );
                    for i in 0..d {
                        for jcol in 0..d {
                            let mut s = 0.0;
                            for l in 0..d {
                                s += dsig[i * d + l] * jk[l * d + jcol];
                            }
                            jnext[i * d + jcol] += dw[q] * s;
                        }
                    }
                }
                if jnext.iter().any(|v| !v.is_finite()) {
                    return Some((p, k + 1));
                }
            }
            None
        })
        .collect();

    if let Some(&(p, step)) = failures.iter().min() {
        return Err(Error::NonFinitePath {
            context: "first-variation flow",
            path: p,
            step,
        });
    }

    Ok(FirstVariationFlow {
        n_paths: batch.n_paths,
        n_nodes,
        d,
        jacobians,
    })
}

// ---------------------------------------------------------------------------
// Batch persistence
// ---------------------------------------------------------------------------

const BATCH_MAGIC: &[u8; 4] = b"SNVB";
const BATCH_VERSION: u32 = 1;

/// Columnar binary dump: header (magic, version, n_paths, M, d, n, seed),
/// then time nodes, states and increments as little-endian f64 arrays.
pub fn write_batch_binary<W: Write>(batch: &PathBatch, mut w: W) -> Result<()> {
    w.write_all(BATCH_MAGIC)?;
    w.write_all(&BATCH_VERSION.to_le_bytes())?;
    for v in [
        batch.n_paths as u64,
        batch.n_steps() as u64,
        batch.d as u64,
        batch.n_noise as u64,
        batch.seed,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &t in &batch.time_nodes {
        w.write_all(&t.to_le_bytes())?;
    }
    for &s in &batch.states {
        w.write_all(&s.to_le_bytes())?;
    }
    for &i in &batch.increments {
        w.write_all(&i.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_batch_binary<R: Read>(mut r: R) -> Result<PathBatch> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BATCH_MAGIC {
        return Err(Error::Config("not a batch file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != BATCH_VERSION {
        return Err(Error::Config("unsupported batch file version".into()));
    }
    let mut b8 = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let n_paths = next_u64(&mut r)? as usize;
    let m = next_u64(&mut r)? as usize;
    let d = next_u64(&mut r)? as usize;
    let n = next_u64(&mut r)? as usize;
    let seed = next_u64(&mut r)?;
    let read_f64s = |r: &mut R, count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let time_nodes = read_f64s(&mut r, m + 1)?;
    let states = read_f64s(&mut r, n_paths * (m + 1) * d)?;
    let increments = read_f64s(&mut r, n_paths * m * n)?;
    let x0 = states[..d].to_vec();
    Ok(PathBatch {
        n_paths,
        time_nodes,
        d,
        n_noise: n,
        seed,
        scheme: Scheme::EulerMaruyama,
        x0,
        antithetic: false,
        states,
        increments,
    })
}

/// CSV export for small batches (path, time, state columns).
pub fn write_batch_csv<W: Write>(batch: &PathBatch, mut w: W, max_paths: usize) -> Result<()> {
    let header: String = (0..batch.d).map(|j| format!(",x{}", j + 1)).collect();
    writeln!(w, "path,t{header}")?;
    for p in 0..batch.n_paths.min(max_paths) {
        for (k, &t) in batch.time_nodes.iter().enumerate() {
            let coords: String = batch
                .state(p, k)
                .iter()
                .map(|v| format!(",{v}"))
                .collect();
            writeln!(w, "{p},{t}{coords}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::uniform_time_nodes;
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

    fn frozen_model(x0_rate: bool) -> DiffusionModel {
        // b = 0, sigma = 0; rate is either 0 or r(s,x) = x.
        DiffusionModel::new(
            1,
            1,
            1.0,
            true,
            |_t, _x, out| out[0] = 0.0,
            |_t, _x, out| out[0] = 0.0,
            move |_t, x| if x0_rate { x[0] } else { 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn degenerate_noise_keeps_paths_constant() {
        let model = frozen_model(false);
        let nodes = uniform_time_nodes(1.0, 16);
        let batch = simulate_paths(&model, &nodes, 8, &[3.0], 7).unwrap();
        for p in 0..8 {
            for k in 0..=16 {
                assert_eq!(batch.state(p, k)[0], 3.0);
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 32);
        let a = simulate_paths(&model, &nodes, 64, &[100.0], 99).unwrap();
        let b = simulate_paths(&model, &nodes, 64, &[100.0], 99).unwrap();
        assert_eq!(a.states_raw(), b.states_raw());
        assert_eq!(a.increments_raw(), b.increments_raw());
    }

    #[test]
    fn gbm_terminal_mean_within_three_standard_errors() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 250);
        let n_paths = 100_000;
        let batch = simulate_paths(&model, &nodes, n_paths, &[100.0], 12345).unwrap();
        let terminal: Vec<f64> = (0..n_paths).map(|p| batch.state(p, 250)[0]).collect();
        let (mean, se) = crate::linalg::mean_se(&terminal);
        // closed-form GBM mean: 100 e^{0.05}
        assert!(
            (mean - 105.12710963760242).abs() < 3.0 * se,
            "mean {mean} se {se}"
        );
        let sq: Vec<f64> = terminal.iter().map(|v| v * v).collect();
        let (mean2, se2) = crate::linalg::mean_se(&sq);
        assert!(
            (mean2 - 11502.737988572273).abs() < 3.0 * se2 + 0.002 * 11502.7,
            "second moment {mean2} se {se2}"
        );
    }

    #[test]
    fn increment_moments_match_brownian_scaling() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 4);
        let n_paths = 200_000;
        let batch = simulate_paths(&model, &nodes, n_paths, &[100.0], 5).unwrap();
        let dt = 0.25;
        for k in 0..4 {
            let incs: Vec<f64> = (0..n_paths).map(|p| batch.increment(p, k)[0]).collect();
            let (mean, se) = crate::linalg::mean_se(&incs);
            assert!(mean.abs() < 3.0 * se, "step {k}: mean {mean} se {se}");
            let sq: Vec<f64> = incs.iter().map(|v| v * v).collect();
            let (var, var_se) = crate::linalg::mean_se(&sq);
            assert!((var - dt).abs() < 3.0 * var_se, "step {k}: var {var}");
        }
    }

    #[test]
    fn antithetic_pairs_mirror_increments() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 8);
        let batch = simulate_paths_opts(
            &model,
            &nodes,
            4,
            &[100.0],
            3,
            SimOptions { antithetic: true },
        )
        .unwrap();
        for k in 0..8 {
            assert_eq!(batch.increment(0, k)[0], -batch.increment(1, k)[0]);
            assert_eq!(batch.increment(2, k)[0], -batch.increment(3, k)[0]);
        }
    }

    #[test]
    fn discount_constant_rate() {
        let model = bs_model(); // r = 0.05
        let nodes = uniform_time_nodes(1.0, 10);
        let batch = simulate_paths(&model, &nodes, 4, &[100.0], 1).unwrap();
        let disc = discount_factors(&batch, &model).unwrap();
        for p in 0..4 {
            assert_relative_eq!(disc.factor(p, 0), 1.0);
            assert_relative_eq!(disc.factor(p, 10), (-0.05f64).exp(), epsilon = 1e-12);
            // monotone nonincreasing
            for k in 0..10 {
                assert!(disc.factor(p, k + 1) <= disc.factor(p, k));
                assert!(disc.factor(p, k + 1) > 0.0);
            }
        }
    }

    #[test]
    fn discount_zero_rate_is_one() {
        let model = frozen_model(false);
        let nodes = uniform_time_nodes(1.0, 5);
        let batch = simulate_paths(&model, &nodes, 2, &[1.0], 1).unwrap();
        let disc = discount_factors(&batch, &model).unwrap();
        for k in 0..=5 {
            assert_eq!(disc.factor(0, k), 1.0);
        }
    }

    #[test]
    fn discount_state_dependent_rate_on_frozen_path() {
        // r(s,x) = x on a frozen path at x0 = 2: l_1 = e^{-2}.
        let model = frozen_model(true);
        let nodes = uniform_time_nodes(1.0, 50);
        let batch = simulate_paths(&model, &nodes, 1, &[2.0], 1).unwrap();
        let disc = discount_factors(&batch, &model).unwrap();
        assert_relative_eq!(disc.factor(0, 50), (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn constant_coefficients_give_identity_flow() {
        // b and sigma constant in x: J stays the identity.
        let cfg = ModelConfig {
            family: "custom_tabulated".into(),
            params: serde_json::json!({
                "drift_const": [0.3],
                "sigma_const": [[0.7]]
            }),
            horizon: 1.0,
            d: Some(1),
            n: Some(1),
        };
        let model = build_model(&cfg).unwrap();
        let nodes = uniform_time_nodes(1.0, 20);
        let batch = simulate_paths(&model, &nodes, 4, &[1.0], 11).unwrap();
        let flow = first_variation(&batch, &model).unwrap();
        for p in 0..4 {
            for k in 0..=20 {
                assert_relative_eq!(flow.jacobian(p, k)[0], 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gbm_flow_equals_state_ratio() {
        // For GBM the Euler recursions of X and J share multiplicative
        // factors, so J_t = X_t / x0 holds step by step.
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 64);
        let batch = simulate_paths(&model, &nodes, 16, &[100.0], 21).unwrap();
        let flow = first_variation(&batch, &model).unwrap();
        for p in 0..16 {
            for k in 0..=64 {
                let expected = batch.state(p, k)[0] / 100.0;
                assert_relative_eq!(flow.jacobian(p, k)[0], expected, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn kolmogorov_flow_is_shear() {
        let model = build_model(&ModelConfig {
            family: "kolmogorov_2d".into(),
            params: serde_json::Value::Null,
            horizon: 1.0,
            d: None,
            n: None,
        })
        .unwrap();
        let nodes = uniform_time_nodes(1.0, 40);
        let batch = simulate_paths(&model, &nodes, 3, &[0.0, 0.0], 2).unwrap();
        let flow = first_variation(&batch, &model).unwrap();
        for p in 0..3 {
            for (k, &t) in nodes.iter().enumerate() {
                let j = flow.jacobian(p, k);
                assert_relative_eq!(j[0], 1.0, epsilon = 1e-12);
                assert_relative_eq!(j[1], t, epsilon = 1e-12);
                assert_relative_eq!(j[2], 0.0, epsilon = 1e-12);
                assert_relative_eq!(j[3], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn finite_difference_jacobian_matches_analytic() {
        // The same GBM dynamics written as a custom model without registered
        // Jacobians exercises the finite-difference fallback.
        let custom = DiffusionModel::new(
            1,
            1,
            1.0,
            true,
            |_t, x, out| out[0] = 0.05 * x[0],
            |_t, x, out| out[0] = 0.2 * x[0],
            |_t, _x| 0.05,
        )
        .unwrap();
        let nodes = uniform_time_nodes(1.0, 32);
        let batch = simulate_paths(&custom, &nodes, 8, &[100.0], 9).unwrap();
        let flow = first_variation(&batch, &custom).unwrap();
        for p in 0..8 {
            let expected = batch.state(p, 32)[0] / 100.0;
            assert_relative_eq!(flow.jacobian(p, 32)[0], expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn flow_refines_consistently_under_step_halving() {
        let model = bs_model();
        let coarse_nodes = uniform_time_nodes(1.0, 32);
        let fine_nodes = uniform_time_nodes(1.0, 64);
        let exact = |batch: &PathBatch, p: usize| {
            // exact flow for GBM given the realized increments:
            // J_T = prod (1 + mu dt + sigma dW)
            let mut j = 1.0;
            for k in 0..batch.n_steps() {
                let dt = batch.time_nodes[k + 1] - batch.time_nodes[k];
                j *= 1.0 + 0.05 * dt + 0.2 * batch.increment(p, k)[0];
            }
            j
        };
        let b1 = simulate_paths(&model, &coarse_nodes, 4, &[100.0], 77).unwrap();
        let b2 = simulate_paths(&model, &fine_nodes, 4, &[100.0], 77).unwrap();
        let f1 = first_variation(&b1, &model).unwrap();
        let f2 = first_variation(&b2, &model).unwrap();
        for p in 0..4 {
            assert_relative_eq!(f1.jacobian(p, 32)[0], exact(&b1, p), epsilon = 1e-10);
            assert_relative_eq!(f2.jacobian(p, 64)[0], exact(&b2, p), epsilon = 1e-10);
            assert!(f1.jacobian(p, 32)[0] > 0.0);
            assert!(f2.jacobian(p, 64)[0] > 0.0);
        }
    }

    #[test]
    fn binary_round_trip() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 6);
        let batch = simulate_paths(&model, &nodes, 5, &[100.0], 13).unwrap();
        let mut buf = Vec::new();
        write_batch_binary(&batch, &mut buf).unwrap();
        let back = read_batch_binary(buf.as_slice()).unwrap();
        assert_eq!(back.n_paths, 5);
        assert_eq!(back.states_raw(), batch.states_raw());
        assert_eq!(back.increments_raw(), batch.increments_raw());
        assert_eq!(back.time_nodes, batch.time_nodes);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let model = bs_model();
        let nodes = uniform_time_nodes(1.0, 2);
        let batch = simulate_paths(&model, &nodes, 2, &[100.0], 13).unwrap();
        let mut buf = Vec::new();
        write_batch_csv(&batch, &mut buf, 10).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,t,x1"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }
}
