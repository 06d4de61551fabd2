//! Random-intercept linear mixed model
//! `y = X beta + b_group + e`, `b ~ N(0, tau2)`, `e ~ N(0, sigma2)`.
//!
//! With `lambda = tau2 / sigma2`, the per-group covariance is
//! `sigma2 * (I + lambda * 11')`, whose inverse has the closed form
//! `(I - c * 11') / sigma2`, `c = lambda / (1 + lambda * n_g)`. For fixed
//! `lambda`, `beta` is a GLS solve and `sigma2` has a closed form, so the
//! restricted (or full) likelihood reduces to a 1-D function of `lambda`.
//! That function is scanned on a log grid, then the bracketed stationary
//! point is found by bisection on its analytic derivative.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Design name for the constant column.
pub const INTERCEPT: &str = "intercept";

const LOG10_MIN_RATIO: f64 = -8.0;
const LOG10_MAX_RATIO: f64 = 8.0;
const GRID_STEPS_PER_DECADE: usize = 4;
/// Bisection stops once the log-ratio bracket is this narrow.
const LOG_RATIO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongObservation {
    pub query_id: String,
    pub response: f64,
    pub covariates: BTreeMap<String, f64>,
}

impl LongObservation {
    pub fn new(query_id: impl Into<String>, response: f64) -> Self {
        Self {
            query_id: query_id.into(),
            response,
            covariates: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Reml,
    Ml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedModelFit {
    pub coefficients: Vec<Coefficient>,
    pub tau2: f64,
    pub sigma2: f64,
    /// `tau2 / sigma2` at the optimum.
    pub variance_ratio: f64,
    pub loglik: f64,
    pub converged: bool,
    pub n_obs: usize,
    pub n_groups: usize,
    pub criterion: Criterion,
    pub warnings: Vec<String>,
}

impl MixedModelFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.coefficient(name).map(|c| c.estimate)
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.coefficient(name).map(|c| c.se)
    }
}

struct Group {
    x: DMatrix<f64>,
    y: DVector<f64>,
    // column sums of x
    s: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    sum_y: f64,
}

/// Everything the profiled objective needs at one variance ratio.
struct Profile {
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    log_det_a: f64,
    log_det_h: f64,
    q: f64,
    // d/d lambda of Q, ln|H|, ln|A|
    dq: f64,
    dlog_det_h: f64,
    dlog_det_a: f64,
}

pub(crate) struct Problem {
    groups: Vec<Group>,
    n: usize,
    p: usize,
    criterion: Criterion,
}

impl Problem {
    pub(crate) fn new(data: &[LongObservation], design: &[&str], criterion: Criterion) -> Result<Self> {
        let p = design.len();
        let mut by_group: BTreeMap<&str, Vec<&LongObservation>> = BTreeMap::new();
        for o in data {
            if !o.response.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "non-finite response for `{}`",
                    o.query_id
                )));
            }
            by_group.entry(o.query_id.as_str()).or_default().push(o);
        }
        if by_group.len() < 2 {
            return Err(Error::TooFewGroups(by_group.len()));
        }
        if p == 0 || data.len() < p + 2 {
            return Err(Error::TooFewObservations { n: data.len(), p });
        }
        let value = |o: &LongObservation, name: &str| -> Result<f64> {
            if name == INTERCEPT {
                return Ok(1.0);
            }
            o.covariates
                .get(name)
                .copied()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MissingCovariate(name.to_string()))
        };
        let mut groups = Vec::with_capacity(by_group.len());
        let mut total_xtx = DMatrix::zeros(p, p);
        for rows in by_group.values() {
            let mut x = DMatrix::zeros(rows.len(), p);
            for (r, o) in rows.iter().enumerate() {
                for (c, name) in design.iter().enumerate() {
                    x[(r, c)] = value(o, name)?;
                }
            }
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|o| o.response));
            let s = DVector::from_iterator(p, x.column_iter().map(|c| c.sum()));
            let xtx = x.transpose() * &x;
            let xty = x.transpose() * &y;
            total_xtx += &xtx;
            groups.push(Group {
                sum_y: y.sum(),
                x,
                y,
                s,
                xtx,
                xty,
            });
        }
        let eig = total_xtx.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if max.is_nan() || max <= 0.0 || min <= 1e-10 * max {
            return Err(Error::RankDeficientDesign);
        }
        Ok(Self {
            groups,
            n: data.len(),
            p,
            criterion,
        })
    }

    fn residual_dof(&self) -> f64 {
        match self.criterion {
            Criterion::Reml => (self.n - self.p) as f64,
            Criterion::Ml => self.n as f64,
        }
    }

    fn profile(&self, lambda: f64) -> Result<Profile> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        let mut log_det_h = 0.0;
        let mut dlog_det_h = 0.0;
        for g in &self.groups {
            let n = g.y.len() as f64;
            let c = lambda / (1.0 + lambda * n);
            a += &g.xtx - (&g.s * g.s.transpose()) * c;
            b += &g.xty - &g.s * (c * g.sum_y);
            log_det_h += (1.0 + lambda * n).ln();
            dlog_det_h += n / (1.0 + lambda * n);
        }
        let chol = a.clone().cholesky().ok_or(Error::RankDeficientDesign)?;
        let beta = chol.solve(&b);
        let a_inv = chol.inverse();
        let log_det_a = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let mut q = 0.0;
        let mut dq = 0.0;
        let mut dlog_det_a = 0.0;
        for g in &self.groups {
            let n = g.y.len() as f64;
            let c = lambda / (1.0 + lambda * n);
            let dc = 1.0 / ((1.0 + lambda * n) * (1.0 + lambda * n));
            let r = &g.y - &g.x * &beta;
            let rs = r.sum();
            q += r.norm_squared() - c * rs * rs;
            dq -= dc * rs * rs;
            dlog_det_a -= dc * (g.s.transpose() * &a_inv * &g.s)[(0, 0)];
        }
        Ok(Profile {
            beta,
            a_inv,
            log_det_a,
            log_det_h,
            q,
            dq,
            dlog_det_h,
            dlog_det_a,
        })
    }

    /// -2 log-likelihood with sigma2 and beta profiled out.
    fn deviance(&self, pr: &Profile) -> f64 {
        let dof = self.residual_dof();
        let mut d = dof * (pr.q / dof).ln() + pr.log_det_h + dof * (1.0 + (2.0 * std::f64::consts::PI).ln());
        if self.criterion == Criterion::Reml {
            d += pr.log_det_a;
        }
        d
    }

    /// d deviance / d lambda.
    fn slope(&self, pr: &Profile) -> f64 {
        let mut d = self.residual_dof() * pr.dq / pr.q + pr.dlog_det_h;
        if self.criterion == Criterion::Reml {
            d += pr.dlog_det_a;
        }
        d
    }

    pub(crate) fn deviance_at(&self, lambda: f64) -> Result<f64> {
        Ok(self.deviance(&self.profile(lambda)?))
    }

    pub(crate) fn slope_at(&self, lambda: f64) -> Result<f64> {
        Ok(self.slope(&self.profile(lambda)?))
    }

    fn optimize(&self, warnings: &mut Vec<String>) -> Result<f64> {
        if self.groups.iter().all(|g| g.y.len() == 1) {
            warnings.push(
                "every group has a single observation; random-intercept variance is not identifiable, reported as 0"
                    .into(),
            );
            return Ok(0.0);
        }
        let steps = ((LOG10_MAX_RATIO - LOG10_MIN_RATIO) as usize) * GRID_STEPS_PER_DECADE;
        let ln10 = std::f64::consts::LN_10;
        // grid[0] is the boundary lambda = 0; the rest are log-spaced
        let mut thetas = vec![f64::NEG_INFINITY];
        thetas.extend((0..=steps).map(|i| (LOG10_MIN_RATIO + i as f64 / GRID_STEPS_PER_DECADE as f64) * ln10));
        let devs = thetas
            .iter()
            .map(|&t| self.deviance_at(t.exp()))
            .collect::<Result<Vec<_>>>()?;
        let (best, _) = devs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &d)| if d < acc.1 { (i, d) } else { acc });
        let spread = devs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - devs.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread <= 1e-12 * devs[0].abs().max(1.0) {
            warnings.push("likelihood is flat in the variance ratio; random-intercept variance reported as 0".into());
            return Ok(0.0);
        }
        if best == thetas.len() - 1 {
            return Err(Error::NonConvergence(format!(
                "variance ratio exceeds 1e{LOG10_MAX_RATIO}; residual variance collapses"
            )));
        }
        if best <= 1 {
            // optimum in [0, grid[2]]: boundary unless the slope at 0 is negative
            if self.slope_at(0.0)? >= 0.0 {
                return Ok(0.0);
            }
            return self.bisect_linear(0.0, thetas[2].exp());
        }
        self.bisect_log(thetas[best - 1], thetas[best + 1])
    }

    fn bisect_log(&self, mut lo: f64, mut hi: f64) -> Result<f64> {
        let (slo, shi) = (self.slope_at(lo.exp())?, self.slope_at(hi.exp())?);
        if !(slo < 0.0 && shi > 0.0) {
            return self.golden(lo, hi);
        }
        let mut iters = 0;
        while hi - lo > LOG_RATIO_TOL {
            iters += 1;
            if iters > 200 {
                return Err(Error::NonConvergence("bisection budget exhausted".into()));
            }
            let mid = 0.5 * (lo + hi);
            if self.slope_at(mid.exp())? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    fn bisect_linear(&self, mut lo: f64, mut hi: f64) -> Result<f64> {
        if self.slope_at(hi)? <= 0.0 {
            return self.bisect_log(hi.ln(), (hi * 10.0).ln());
        }
        for _ in 0..200 {
            if hi - lo <= LOG_RATIO_TOL * hi.max(f64::MIN_POSITIVE) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.slope_at(mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Golden-section fallback on the deviance over a log-ratio bracket.
    fn golden(&self, mut lo: f64, mut hi: f64) -> Result<f64> {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - inv_phi * (hi - lo);
        let mut d = lo + inv_phi * (hi - lo);
        let mut fc = self.deviance_at(c.exp())?;
        let mut fd = self.deviance_at(d.exp())?;
        for _ in 0..300 {
            if hi - lo <= LOG_RATIO_TOL {
                return Ok((0.5 * (lo + hi)).exp());
            }
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = self.deviance_at(c.exp())?;
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = self.deviance_at(d.exp())?;
            }
        }
        Err(Error::NonConvergence("golden-section budget exhausted".into()))
    }
}

/// REML fit of a random-intercept model grouped by `query_id`.
/// `fixed_design` names covariate columns in order; use [`INTERCEPT`] for
/// the constant column.
pub fn fit_random_intercept(data: &[LongObservation], fixed_design: &[&str]) -> Result<MixedModelFit> {
    fit_random_intercept_with(data, fixed_design, Criterion::Reml)
}

pub fn fit_random_intercept_with(
    data: &[LongObservation],
    fixed_design: &[&str],
    criterion: Criterion,
) -> Result<MixedModelFit> {
    let problem = Problem::new(data, fixed_design, criterion)?;
    let mut warnings = Vec::new();
    let lambda = problem.optimize(&mut warnings)?;
    let pr = problem.profile(lambda)?;
    let sigma2 = pr.q / problem.residual_dof();
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(Error::NonConvergence("residual variance is zero".into()));
    }
    let coefficients = fixed_design
        .iter()
        .enumerate()
        .map(|(i, name)| Coefficient {
            name: name.to_string(),
            estimate: pr.beta[i],
            se: (sigma2 * pr.a_inv[(i, i)]).sqrt(),
        })
        .collect();
    Ok(MixedModelFit {
        coefficients,
        tau2: lambda * sigma2,
        sigma2,
        variance_ratio: lambda,
        loglik: -0.5 * problem.deviance(&pr),
        converged: true,
        n_obs: problem.n,
        n_groups: problem.groups.len(),
        criterion,
        warnings,
    })
}
