//! Diffusion models and payoffs.
//!
//! A [`DiffusionModel`] bundles the drift b(t,x), the d x n diffusion matrix
//! sigma(t,x), the discount rate r(t,x) and the horizon T. Everything
//! downstream (simulation, the generator stencil, the solvers) consumes these
//! types. Models built from a [`ModelConfig`] come from a closed set of
//! families; the library API also accepts arbitrary coefficient closures.
//!
//! Payoffs are plain functions of the state. The optimal-stopping theory
//! behind the verification assumes bounded continuous payoffs; standard calls
//! are unbounded, and the artifact accepts them on the truncated box rather
//! than rejecting them (the boundedness hypothesis is a documentation note,
//! not a runtime check).

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type RateFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
/// Jacobian of the drift: writes the row-major d x d matrix db_i/dx_j.
pub type DriftJacobianFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
/// Jacobian of diffusion column k: writes the row-major d x d matrix
/// d(sigma_{i,k})/dx_j for the requested column.
pub type ColumnJacobianFn = dyn Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync;

/// A diffusion dX = b(t,X) dt + sigma(t,X) dW on [0, T], discounted at
/// r(t,X), with d state components driven by n Wiener components.
#[derive(Clone)]
pub struct DiffusionModel {
    d: usize,
    n: usize,
    horizon: f64,
    time_homogeneous: bool,
    family: String,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    rate: Arc<RateFn>,
    drift_jacobian: Option<Arc<DriftJacobianFn>>,
    diffusion_jacobian: Option<Arc<ColumnJacobianFn>>,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("family", &self.family)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("horizon", &self.horizon)
            .field("time_homogeneous", &self.time_homogeneous)
            .finish()
    }
}

impl DiffusionModel {
    pub fn new(
        d: usize,
        n: usize,
        horizon: f64,
        time_homogeneous: bool,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        rate: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::InvalidParameter(format!(
                "state and noise dimensions must be positive (d={d}, n={n})"
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be a positive finite time (got {horizon})"
            )));
        }
        Ok(Self {
            d,
            n,
            horizon,
            time_homogeneous,
            family: "custom".to_string(),
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            rate: Arc::new(rate),
            drift_jacobian: None,
            diffusion_jacobian: None,
        })
    }

    /// Registers an analytic drift Jacobian; otherwise first-variation code
    /// falls back to central finite differences.
    pub fn with_drift_jacobian(
        mut self,
        jac: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift_jacobian = Some(Arc::new(jac));
        self
    }

    /// Registers analytic Jacobians of the diffusion columns.
    pub fn with_diffusion_jacobian(
        mut self,
        jac: impl Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion_jacobian = Some(Arc::new(jac));
        self
    }

    fn with_family(mut self, name: &str) -> Self {
        self.family = name.to_string();
        self
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    /// Writes b(t,x) into `out` (length d).
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        debug_assert_eq!(out.len(), self.d);
        (self.drift)(t, x, out);
    }

    /// Writes sigma(t,x) into `out` (row-major d x n).
    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d * self.n);
        (self.diffusion)(t, x, out);
    }

    pub fn rate(&self, t: f64, x: &[f64]) -> f64 {
        (self.rate)(t, x)
    }

    pub fn drift_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.drift_into(t, x, &mut out);
        out
    }

    pub fn diffusion_mat(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.n];
        self.diffusion_into(t, x, &mut out);
        out
    }

    pub(crate) fn drift_jacobian_fn(&self) -> Option<&Arc<DriftJacobianFn>> {
        self.drift_jacobian.as_ref()
    }

    pub(crate) fn diffusion_jacobian_fn(&self) -> Option<&Arc<ColumnJacobianFn>> {
        self.diffusion_jacobian.as_ref()
    }

    /// The second-order coefficient a(t,x) = sigma sigma' of the generator.
    ///
    /// Symmetric positive semidefinite by construction; errors when the
    /// coefficient evaluation produced non-finite entries.
    pub fn diffusion_matrix(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let sigma = self.diffusion_mat(t, x);
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "diffusion coefficient at t={t}, x={x:?}"
            )));
        }
        let (d, n) = (self.d, self.n);
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..n {
                    s += sigma[i * n + k] * sigma[j * n + k];
                }
                a[(i, j)] = s;
                a[(j, i)] = s;
            }
        }
        Ok(a)
    }

    /// Checks the model invariants at the given sample points: finite
    /// coefficient evaluations, positive semidefinite a = sigma sigma'
    /// (to tolerance), and, for homogeneous models, identical evaluations
    /// at shifted times.
    pub fn validate_at(&self, points: &[(f64, Vec<f64>)]) -> Result<()> {
        let mut drift = vec![0.0; self.d];
        let mut sigma = vec![0.0; self.d * self.n];
        for (t, x) in points {
            self.drift_into(*t, x, &mut drift);
            self.diffusion_into(*t, x, &mut sigma);
            let r = self.rate(*t, x);
            if drift.iter().any(|v| !v.is_finite())
                || sigma.iter().any(|v| !v.is_finite())
                || !r.is_finite()
            {
                return Err(Error::NonFinite(format!(
                    "coefficient evaluation at t={t}, x={x:?}"
                )));
            }
            let a = self.diffusion_matrix(*t, x)?;
            let scale = a.amax().max(1.0);
            let eig = a.symmetric_eigenvalues();
            if eig.iter().any(|&l| l < -1e-10 * scale) {
                return Err(Error::InvalidParameter(format!(
                    "sigma sigma' not positive semidefinite at t={t}, x={x:?}"
                )));
            }
            if self.time_homogeneous {
                let t2 = t * 0.5 + 0.25 * self.horizon;
                let mut drift2 = vec![0.0; self.d];
                self.drift_into(t2, x, &mut drift2);
                if drift2 != drift || (self.rate)(t2, x) != r {
                    return Err(Error::InvalidParameter(
                        "model declared time-homogeneous but coefficients depend on t".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Built-in families and the on-disk model configuration
// ---------------------------------------------------------------------------

/// On-disk model description: `{family, params{..}, T, d, n}`.
///
/// Unknown keys are rejected, both at the top level and inside `params`.
/// `d` and `n` may be omitted for named families (they are implied) but are
/// required for `custom_tabulated`; when present they are validated against
/// the family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlackScholesParams {
    sigma: f64,
    r: f64,
    /// Drift growth rate; defaults to `r` (risk-neutral dynamics).
    #[serde(default)]
    mu: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GbmBasketParams {
    sigmas: Vec<f64>,
    r: f64,
    #[serde(default)]
    mu: Option<Vec<f64>>,
    /// Instantaneous correlation matrix of the driving noises; identity when
    /// omitted.
    #[serde(default)]
    correlations: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Kolmogorov2dParams {
    #[serde(default)]
    r: f64,
}

/// Coefficients given as explicit affine tables:
/// b(x) = drift_const + drift_linear x, column k of sigma is
/// sigma_const[.,k] + sigma_linear[k] x, and r(x) = rate_const +
/// rate_linear . x.
#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CustomTabulatedParams {
    #[serde(default)]
    drift_const: Option<Vec<f64>>,
    #[serde(default)]
    drift_linear: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    sigma_const: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    sigma_linear: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    rate_const: f64,
    #[serde(default)]
    rate_linear: Option<Vec<f64>>,
}

fn require_finite(name: &'static str, family: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::MissingParameter(name, family.to_string()))
    }
}

fn parse_params<T: serde::de::DeserializeOwned + Default>(
    family: &str,
    value: &serde_json::Value,
) -> Result<T> {
    if value.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(value.clone()).map_err(|e| {
        Error::Config(format!("bad params for family `{family}`: {e}"))
    })
}

fn check_dims(config: &ModelConfig, d: usize, n: usize) -> Result<()> {
    if let Some(cd) = config.d {
        if cd != d {
            return Err(Error::Config(format!(
                "family `{}` implies d={d} but config says d={cd}",
                config.family
            )));
        }
    }
    if let Some(cn) = config.n {
        if cn != n {
            return Err(Error::Config(format!(
                "family `{}` implies n={n} but config says n={cn}",
                config.family
            )));
        }
    }
    Ok(())
}

/// Builds a model from a named family configuration.
pub fn build_model(config: &ModelConfig) -> Result<DiffusionModel> {
    if let Some(d) = config.d {
        if d == 0 {
            return Err(Error::InvalidParameter("d must be >= 1".into()));
        }
    }
    if let Some(n) = config.n {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
    }
    let family = config.family.replace('-', "_");
    match family.as_str() {
        "black_scholes_1d" => {
            let p: BlackScholesParams = match serde_json::from_value(config.params.clone()) {
                Ok(p) => p,
                Err(e) => {
                    return Err(if e.to_string().contains("missing field") {
                        Error::MissingParameter(
                            if e.to_string().contains("sigma") { "sigma" } else { "r" },
                            family.clone(),
                        )
                    } else {
                        Error::Config(format!("bad params for black_scholes_1d: {e}"))
                    })
                }
            };
            let sigma = require_finite("sigma", &family, p.sigma)?;
            let r = require_finite("r", &family, p.r)?;
            let mu = match p.mu {
                Some(m) => require_finite("mu", &family, m)?,
                None => r,
            };
            if sigma < 0.0 {
                return Err(Error::InvalidParameter("sigma must be >= 0".into()));
            }
            check_dims(config, 1, 1)?;
            Ok(DiffusionModel::new(
                1,
                1,
                config.horizon,
                true,
                move |_t, x, out| out[0] = mu * x[0],
                move |_t, x, out| out[0] = sigma * x[0],
                move |_t, _x| r,
            )?
            .with_drift_jacobian(move |_t, _x, j| j[0] = mu)
            .with_diffusion_jacobian(move |_t, _x, _k, j| j[0] = sigma)
            .with_family("black_scholes_1d"))
        }
        "gbm_basket" => {
            let p: GbmBasketParams = serde_json::from_value(config.params.clone())
                .map_err(|e| Error::Config(format!("bad params for gbm_basket: {e}")))?;
            let d = p.sigmas.len();
            if d == 0 {
                return Err(Error::MissingParameter("sigmas", family));
            }
            for &s in &p.sigmas {
                require_finite("sigmas", &family, s)?;
            }
            let r = require_finite("r", &family, p.r)?;
            let mu = match p.mu {
                Some(m) => {
                    if m.len() != d {
                        return Err(Error::Mismatch(format!(
                            "mu has {} entries, expected {d}",
                            m.len()
                        )));
                    }
                    m
                }
                None => vec![r; d],
            };
            // Cholesky factor of the correlation matrix; columns of sigma are
            // diag(sigma_i x_i) L.
            let chol = match p.correlations {
                Some(rows) => {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        return Err(Error::Mismatch("correlations must be d x d".into()));
                    }
                    let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                    let ch = m.cholesky().ok_or_else(|| {
                        Error::InvalidParameter(
                            "correlations must be symmetric positive definite".into(),
                        )
                    })?;
                    ch.l()
                }
                None => DMatrix::identity(d, d),
            };
            check_dims(config, d, d)?;
            let sigmas = p.sigmas.clone();
            let chol_rows: Vec<Vec<f64>> =
                (0..d).map(|i| (0..d).map(|j| chol[(i, j)]).collect()).collect();
            let sig = sigmas.clone();
            let rows = chol_rows.clone();
            let mus = mu.clone();
            Ok(DiffusionModel::new(
                d,
                d,
                config.horizon,
                true,
                move |_t, x, out| {
                    for i in 0..d {
                        out[i] = mus[i] * x[i];
                    }
                },
                move |_t, x, out| {
                    for i in 0..d {
                        for k in 0..d {
                            out[i * d + k] = sig[i] * x[i] * rows[i][k];
                        }
                    }
                },
                move |_t, _x| r,
            )?
            .with_drift_jacobian({
                let mus = mu.clone();
                move |_t, _x, j| {
                    j.fill(0.0);
                    for i in 0..d {
                        j[i * d + i] = mus[i];
                    }
                }
            })
            .with_diffusion_jacobian({
                let sig = sigmas;
                let rows = chol_rows;
                move |_t, _x, k, j| {
                    j.fill(0.0);
                    for i in 0..d {
                        j[i * d + i] = sig[i] * rows[i][k];
                    }
                }
            })
            .with_family("gbm_basket"))
        }
        "kolmogorov_2d" => {
            let p: Kolmogorov2dParams = parse_params(&family, &config.params)?;
            let r = require_finite("r", &family, p.r)?;
            check_dims(config, 2, 1)?;
            Ok(DiffusionModel::new(
                2,
                1,
                config.horizon,
                true,
                |_t, x, out| {
                    out[0] = x[1];
                    out[1] = 0.0;
                },
                |_t, _x, out| {
                    out[0] = 0.0;
                    out[1] = 1.0;
                },
                move |_t, _x| r,
            )?
            .with_drift_jacobian(|_t, _x, j| {
                j.fill(0.0);
                j[1] = 1.0; // db_1/dx_2
            })
            .with_diffusion_jacobian(|_t, _x, _k, j| j.fill(0.0))
            .with_family("kolmogorov_2d"))
        }
        "custom_tabulated" => {
            let p: CustomTabulatedParams = parse_params(&family, &config.params)?;
            let d = config
                .d
                .ok_or(Error::MissingParameter("d", family.clone()))?;
            let n = config
                .n
                .ok_or(Error::MissingParameter("n", family.clone()))?;
            build_tabulated(d, n, config.horizon, p)
        }
        other => Err(Error::UnknownFamily(other.to_string())),
    }
}

fn build_tabulated(
    d: usize,
    n: usize,
    horizon: f64,
    p: CustomTabulatedParams,
) -> Result<DiffusionModel> {
    let check_vec = |name: &'static str, v: &[f64], len: usize| -> Result<()> {
        if v.len() != len {
            return Err(Error::Mismatch(format!("{name} must have {len} entries")));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::MissingParameter(name, "custom_tabulated".into()));
        }
        Ok(())
    };

    let drift_const = p.drift_const.unwrap_or_else(|| vec![0.0; d]);
    check_vec("drift_const", &drift_const, d)?;
    let drift_linear: Vec<f64> = match p.drift_linear {
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Mismatch("drift_linear must be d x d".into()));
            }
            rows.into_iter().flatten().collect()
        }
        None => vec![0.0; d * d],
    };
    check_vec("drift_linear", &drift_linear, d * d)?;

    let sigma_const: Vec<f64> = match p.sigma_const {
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Mismatch("sigma_const must be d x n".into()));
            }
            rows.into_iter().flatten().collect()
        }
        None => vec![0.0; d * n],
    };
    check_vec("sigma_const", &sigma_const, d * n)?;

    let sigma_linear: Vec<f64> = match p.sigma_linear {
        Some(mats) => {
            if mats.len() != n
                || mats
                    .iter()
                    .any(|m| m.len() != d || m.iter().any(|r| r.len() != d))
            {
                return Err(Error::Mismatch(
                    "sigma_linear must be n matrices of size d x d".into(),
                ));
            }
            mats.into_iter().flatten().flatten().collect()
        }
        None => vec![0.0; n * d * d],
    };
    check_vec("sigma_linear", &sigma_linear, n * d * d)?;

    let rate_const = p.rate_const;
    require_finite("rate_const", "custom_tabulated", rate_const)?;
    let rate_linear = p.rate_linear.unwrap_or_else(|| vec![0.0; d]);
    check_vec("rate_linear", &rate_linear, d)?;

    let dc = drift_const.clone();
    let dl = drift_linear.clone();
    let sc = sigma_const.clone();
    let sl = sigma_linear.clone();
    let rl = rate_linear.clone();
    Ok(DiffusionModel::new(
        d,
        n,
        horizon,
        true,
        move |_t, x, out| {
            for i in 0..d {
                let mut s = dc[i];
                for j in 0..d {
                    s += dl[i * d + j] * x[j];
                }
                out[i] = s;
            }
        },
        move |_t, x, out| {
            for i in 0..d {
                for k in 0..n {
                    let mut s = sc[i * n + k];
                    for j in 0..d {
                        s += sl[k * d * d + i * d + j] * x[j];
                    }
                    out[i * n + k] = s;
                }
            }
        },
        move |_t, x| rate_const + rl.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
    )?
    .with_family("custom_tabulated"))
}

// ---------------------------------------------------------------------------
// Payoffs
// ---------------------------------------------------------------------------

/// What kind of payoff this is; used for reporting and for put-specific
/// post-processing such as free-boundary extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffKind {
    Put { strike: f64 },
    Call { strike: f64 },
    BasketPut { strike: f64, weights: Vec<f64> },
    BasketCall { strike: f64, weights: Vec<f64> },
    Zero,
    Custom { label: String },
}

/// The obstacle function f with optional declared bounds.
#[derive(Clone)]
pub struct PayoffSpec {
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub kind: PayoffKind,
}

impl std::fmt::Debug for PayoffSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PayoffSpec").field("kind", &self.kind).finish()
    }
}

impl PayoffSpec {
    pub fn put(strike: f64) -> Self {
        Self {
            f: Arc::new(move |x: &[f64]| (strike - x[0]).max(0.0)),
            lower_bound: Some(0.0),
            upper_bound: Some(strike),
            kind: PayoffKind::Put { strike },
        }
    }

    pub fn call(strike: f64) -> Self {
        Self {
            f: Arc::new(move |x: &[f64]| (x[0] - strike).max(0.0)),
            lower_bound: Some(0.0),
            upper_bound: None,
            kind: PayoffKind::Call { strike },
        }
    }

    pub fn basket_put(strike: f64, weights: Vec<f64>) -> Self {
        let w = weights.clone();
        Self {
            f: Arc::new(move |x: &[f64]| {
                let b: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                (strike - b).max(0.0)
            }),
            lower_bound: Some(0.0),
            upper_bound: Some(strike),
            kind: PayoffKind::BasketPut { strike, weights },
        }
    }

    pub fn basket_call(strike: f64, weights: Vec<f64>) -> Self {
        let w = weights.clone();
        Self {
            f: Arc::new(move |x: &[f64]| {
                let b: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                (b - strike).max(0.0)
            }),
            lower_bound: Some(0.0),
            upper_bound: None,
            kind: PayoffKind::BasketCall { strike, weights },
        }
    }

    pub fn zero() -> Self {
        Self {
            f: Arc::new(|_| 0.0),
            lower_bound: Some(0.0),
            upper_bound: Some(0.0),
            kind: PayoffKind::Zero,
        }
    }

    pub fn custom(
        label: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        lower_bound: Option<f64>,
        upper_bound: Option<f64>,
    ) -> Self {
        Self {
            f: Arc::new(f),
            lower_bound,
            upper_bound,
            kind: PayoffKind::Custom { label: label.into() },
        }
    }

    #[inline]
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// A positive scale for normalizing tolerances: the largest payoff
    /// magnitude over the supplied nodes, floored at 1.
    pub fn scale_on(&self, nodes: impl Iterator<Item = Vec<f64>>) -> f64 {
        let mut scale: f64 = 1.0;
        for x in nodes {
            scale = scale.max(self.evaluate(&x).abs());
        }
        scale
    }

    /// Validates declared bounds at the given nodes and runs a two-level
    /// refinement probe for jumps along each axis segment. A kink halves its
    /// midpoint deviation under refinement; a jump does not.
    pub fn validate_on(&self, grid: &crate::grid::SpaceTimeGrid) -> Result<()> {
        let d = grid.space_dim();
        for flat in 0..grid.n_space_nodes() {
            let x = grid.node_coords(flat);
            let v = self.evaluate(&x);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("payoff at {x:?}")));
            }
            if let Some(lo) = self.lower_bound {
                if v < lo - 1e-12 * (1.0 + lo.abs()) {
                    return Err(Error::InvalidParameter(format!(
                        "payoff {v} below declared lower bound {lo} at {x:?}"
                    )));
                }
            }
            if let Some(hi) = self.upper_bound {
                if v > hi + 1e-12 * (1.0 + hi.abs()) {
                    return Err(Error::InvalidParameter(format!(
                        "payoff {v} above declared upper bound {hi} at {x:?}"
                    )));
                }
            }
        }
        // Continuity probe along each axis through the box center.
        let center: Vec<f64> = (0..d)
            .map(|j| {
                let ax = grid.axis(j);
                0.5 * (ax[0] + ax[ax.len() - 1])
            })
            .collect();
        for j in 0..d {
            let ax = grid.axis(j);
            for w in ax.windows(2) {
                let (a, b) = (w[0], w[1]);
                let dev = |lo: f64, hi: f64| {
                    let mut xa = center.clone();
                    let mut xb = center.clone();
                    let mut xm = center.clone();
                    xa[j] = lo;
                    xb[j] = hi;
                    xm[j] = 0.5 * (lo + hi);
                    (self.evaluate(&xm) - 0.5 * (self.evaluate(&xa) + self.evaluate(&xb))).abs()
                };
                let d1 = dev(a, b);
                let m = 0.5 * (a + b);
                let d2 = dev(a, m).max(dev(m, b));
                let scale = 1.0 + self.evaluate(&center).abs();
                // continuous functions contract; allow generous slack
                if d1 > 1e-9 * scale && d2 > 0.9 * d1 {
                    return Err(Error::InvalidParameter(format!(
                        "payoff appears discontinuous along axis {j} near x_{j}={m}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Serializable payoff description used in job configurations.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    Put { strike: f64 },
    Call { strike: f64 },
    BasketPut { strike: f64, weights: Vec<f64> },
    BasketCall { strike: f64, weights: Vec<f64> },
    Zero,
}

impl PayoffConfig {
    pub fn build(&self, d: usize) -> Result<PayoffSpec> {
        match self {
            PayoffConfig::Put { strike } | PayoffConfig::Call { strike } => {
                if d != 1 {
                    return Err(Error::Config(
                        "put/call payoffs are one-dimensional; use basket_put/basket_call".into(),
                    ));
                }
                if !strike.is_finite() || *strike <= 0.0 {
                    return Err(Error::InvalidParameter("strike must be positive".into()));
                }
                Ok(match self {
                    PayoffConfig::Put { strike } => PayoffSpec::put(*strike),
                    _ => PayoffSpec::call(*strike),
                })
            }
            PayoffConfig::BasketPut { strike, weights }
            | PayoffConfig::BasketCall { strike, weights } => {
                if weights.len() != d {
                    return Err(Error::Mismatch(format!(
                        "basket weights have {} entries, expected {d}",
                        weights.len()
                    )));
                }
                Ok(match self {
                    PayoffConfig::BasketPut { .. } => {
                        PayoffSpec::basket_put(*strike, weights.clone())
                    }
                    _ => PayoffSpec::basket_call(*strike, weights.clone()),
                })
            }
            PayoffConfig::Zero => Ok(PayoffSpec::zero()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bs_config() -> ModelConfig {
        ModelConfig {
            family: "black_scholes_1d".into(),
            params: serde_json::json!({"sigma": 0.2, "r": 0.05}),
            horizon: 1.0,
            d: None,
            n: None,
        }
    }

    #[test]
    fn black_scholes_family() {
        let m = build_model(&bs_config()).unwrap();
        assert_eq!(m.state_dim(), 1);
        assert_eq!(m.noise_dim(), 1);
        assert!(m.is_time_homogeneous());
        let x = [100.0];
        assert_relative_eq!(m.drift_vec(0.3, &x)[0], 5.0);
        assert_relative_eq!(m.diffusion_mat(0.3, &x)[0], 20.0);
        assert_relative_eq!(m.rate(0.3, &x), 0.05);
        // a = (0.2 * 100)^2 = 400
        let a = m.diffusion_matrix(0.0, &x).unwrap();
        assert_relative_eq!(a[(0, 0)], 400.0, epsilon = 1e-12);
    }

    #[test]
    fn black_scholes_mu_overrides_drift_only() {
        let cfg = ModelConfig {
            family: "black_scholes_1d".into(),
            params: serde_json::json!({"sigma": 0.2, "r": 0.0, "mu": 0.05}),
            horizon: 1.0,
            d: None,
            n: None,
        };
        let m = build_model(&cfg).unwrap();
        assert_relative_eq!(m.drift_vec(0.0, &[100.0])[0], 5.0);
        assert_relative_eq!(m.rate(0.0, &[100.0]), 0.0);
    }

    #[test]
    fn kolmogorov_family() {
        let cfg = ModelConfig {
            family: "kolmogorov_2d".into(),
            params: serde_json::Value::Null,
            horizon: 1.0,
            d: Some(2),
            n: Some(1),
        };
        let m = build_model(&cfg).unwrap();
        assert_eq!((m.state_dim(), m.noise_dim()), (2, 1));
        let b = m.drift_vec(0.0, &[3.0, 7.0]);
        assert_eq!(b, vec![7.0, 0.0]);
        let s = m.diffusion_mat(0.0, &[3.0, 7.0]);
        assert_eq!(s, vec![0.0, 1.0]);
        let a = m.diffusion_matrix(0.0, &[3.0, 7.0]).unwrap();
        assert_eq!(
            (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]),
            (0.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn identity_diffusion_matrix() {
        let cfg = ModelConfig {
            family: "custom_tabulated".into(),
            params: serde_json::json!({"sigma_const": [[1.0, 0.0], [0.0, 1.0]]}),
            horizon: 1.0,
            d: Some(2),
            n: Some(2),
        };
        let m = build_model(&cfg).unwrap();
        let a = m.diffusion_matrix(0.2, &[1.0, -2.0]).unwrap();
        assert!(a.is_identity(1e-14));
    }

    #[test]
    fn missing_sigma_is_an_error() {
        let cfg = ModelConfig {
            family: "black_scholes_1d".into(),
            params: serde_json::json!({"r": 0.05}),
            horizon: 1.0,
            d: None,
            n: None,
        };
        match build_model(&cfg) {
            Err(Error::MissingParameter(name, _)) => assert_eq!(name, "sigma"),
            other => panic!("expected missing-parameter error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_family_rejected() {
        let cfg = ModelConfig {
            family: "heston".into(),
            params: serde_json::Value::Null,
            horizon: 1.0,
            d: None,
            n: None,
        };
        assert!(matches!(build_model(&cfg), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn dims_validated_against_family() {
        let mut cfg = bs_config();
        cfg.d = Some(2);
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"family":"black_scholes_1d","params":{"sigma":0.2,"r":0.05},"T":1.0,"frobnicate":3}"#;
        assert!(ModelConfig::from_json(text).is_err());
        let text = r#"{"family":"black_scholes_1d","params":{"sigma":0.2,"r":0.05,"extra":1},"T":1.0}"#;
        let cfg = ModelConfig::from_json(text).unwrap();
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn hyphenated_family_alias() {
        let cfg = ModelConfig {
            family: "custom-tabulated".into(),
            params: serde_json::json!({"sigma_const": [[1.0]]}),
            horizon: 1.0,
            d: Some(1),
            n: Some(1),
        };
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.family(), "custom_tabulated");
    }

    #[test]
    fn validate_detects_time_dependence() {
        let m = DiffusionModel::new(
            1,
            1,
            1.0,
            true, // wrongly declared homogeneous
            |t, _x, out| out[0] = t,
            |_t, _x, out| out[0] = 1.0,
            |_t, _x| 0.0,
        )
        .unwrap();
        assert!(m.validate_at(&[(0.5, vec![1.0])]).is_err());
    }

    #[test]
    fn payoff_bounds_and_kinds() {
        let p = PayoffSpec::put(100.0);
        assert_relative_eq!(p.evaluate(&[90.0]), 10.0);
        assert_relative_eq!(p.evaluate(&[110.0]), 0.0);
        let c = PayoffSpec::call(100.0);
        assert_relative_eq!(c.evaluate(&[110.0]), 10.0);
        let b = PayoffSpec::basket_put(10.0, vec![0.5, 0.5]);
        assert_relative_eq!(b.evaluate(&[4.0, 8.0]), 4.0);
    }
}
