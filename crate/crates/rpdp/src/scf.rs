//! Simulation–curve-fitting pipeline for sampling-probability assignment.
//!
//! Stage one sweeps a grid of sampling probabilities and records the
//! optimal DP budget ε*(q) for each. Stage two fits ε* ≈ e^{a·q+b} + c and
//! inverts the model, giving a constant-time estimator from a personalized
//! budget ε to a sampling probability q. A bisection comparator answers the
//! same query with repeated accountant evaluations.

use serde::{Deserialize, Serialize};

use crate::accountant::{fl_epsilon, MechanismParams};
use crate::error::{Error, Result};

/// One simulated grid point: the optimal DP budget at sampling
/// probability `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub q: f64,
    pub eps_star: f64,
}

/// Fitted exponential model ε̂*(q) = e^{a·q+b} + c together with its
/// goodness of fit and the model-free anchors used for inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r_squared: f64,
    /// Simulated (not fitted) ε* at q = 1.
    pub eps_full: f64,
    /// Smallest grid probability used in the fit.
    pub q_floor: f64,
}

/// Result of a budget-to-probability query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QEstimate {
    pub q: f64,
    /// Set when the budget is below the achievable range, so the record
    /// must be excluded from sampling entirely.
    pub never_sampled: bool,
}

/// Default simulation grid: `geometric` points spanning [q_floor, 0.1) and
/// `linear` points spanning [0.1, 1.0], endpoint 1.0 always included.
/// The geometric half concentrates points where the curve bends sharply.
pub fn q_grid(q_floor: f64, geometric: usize, linear: usize) -> Result<Vec<f64>> {
    if !(q_floor > 0.0 && q_floor < 0.1) {
        return Err(Error::Domain(format!("q_floor must lie in (0, 0.1), got {q_floor}")));
    }
    if geometric == 0 || linear < 2 {
        return Err(Error::Domain("grid needs >= 1 geometric and >= 2 linear points".into()));
    }
    let ratio = (0.1 / q_floor).powf(1.0 / geometric as f64);
    let mut grid: Vec<f64> = (0..geometric).map(|i| q_floor * ratio.powi(i as i32)).collect();
    for j in 0..linear {
        grid.push(0.1 + 0.9 * j as f64 / (linear - 1) as f64);
    }
    *grid.last_mut().unwrap() = 1.0;
    Ok(grid)
}

/// 100-point default grid with floor 1e-3.
pub fn default_q_grid() -> Vec<f64> {
    q_grid(1e-3, 50, 50).expect("static grid parameters")
}

/// Evaluate ε*(q) at every grid point. The grid must be strictly
/// increasing, contained in (0, 1], and end at exactly 1.0.
pub fn simulate_observations(params: &MechanismParams, grid: &[f64]) -> Result<Vec<Observation>> {
    params.validate()?;
    if grid.is_empty() {
        return Err(Error::Domain("q grid must be non-empty".into()));
    }
    if grid.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
        return Err(Error::Domain("q grid values must lie in (0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("q grid must be strictly increasing without duplicates".into()));
    }
    if *grid.last().unwrap() != 1.0 {
        return Err(Error::Domain("q grid must include the endpoint 1.0".into()));
    }
    grid.iter()
        .map(|&q| {
            fl_epsilon(q, params).map(|point| Observation {
                q,
                eps_star: point.epsilon,
            })
        })
        .collect()
}

/// Coefficient of determination of the fitted model against observations:
/// 1 − SS_res/SS_tot. Errors when all observed budgets are identical.
pub fn r_squared(obs: &[Observation], fit: &ExpFit) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::Domain("cannot score an empty observation set".into()));
    }
    let mean = obs.iter().map(|o| o.eps_star).sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|o| (o.eps_star - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("R² undefined: observations have zero variance".into()));
    }
    let ss_res: f64 = obs.iter().map(|o| (fit.value(o.q) - o.eps_star).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Sum of squared log-space residuals, Σ (ln f(q) − ln ε*)². Infinite when
/// the model dips to a non-positive value, which the line search rejects.
fn residual_sum(obs: &[Observation], a: f64, b: f64, c: f64) -> f64 {
    let mut sum = 0.0;
    for o in obs {
        let f = (a * o.q + b).exp() + c;
        if f <= 0.0 {
            return f64::INFINITY;
        }
        let r = f.ln() - o.eps_star.ln();
        sum += r * r;
    }
    sum
}

/// Ordinary least squares of y on x. Returns (slope, intercept).
fn linear_regression(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Solve a 3×3 linear system by Gaussian elimination with partial
/// pivoting. Returns None when the system is numerically singular.
#[allow(clippy::needless_range_loop)]
fn solve3(mut m: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Fit ε̂*(q) = e^{a·q+b} + c by least squares on log-space residuals
/// ln ε̂* − ln ε*.
///
/// A coarse stage grids the offset c over [0, min ε*) and estimates (a, b)
/// by linear regression of ln(ε* − c) on q; the best candidate seeds a
/// damped Gauss–Newton refinement that runs until the relative parameter
/// change drops below 1e-9 or 200 iterations. The log-space objective
/// bounds the model's relative error uniformly over the two decades the
/// curve spans; an absolute-residual objective lets the top of the range
/// dominate and leaves the small-budget end, where every budget query
/// lands, off by half its value.
pub fn fit_exponential(obs: &[Observation]) -> Result<ExpFit> {
    if obs.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 observations, got {}", obs.len())));
    }
    if obs.windows(2).any(|w| w[0].q >= w[1].q || w[0].eps_star >= w[1].eps_star) {
        return Err(Error::Fit("observations must be strictly increasing in q and ε*".into()));
    }
    if obs.iter().any(|o| !o.eps_star.is_finite() || o.eps_star <= 0.0) {
        return Err(Error::Fit("observed ε* must be finite and positive".into()));
    }
    if obs.last().unwrap().q != 1.0 {
        return Err(Error::Fit("observations must include the q = 1 endpoint".into()));
    }

    let qs: Vec<f64> = obs.iter().map(|o| o.q).collect();
    let eps_min = obs[0].eps_star;

    // Coarse stage: grid c, log-linear regression for (a, b).
    const C_CANDIDATES: usize = 200;
    let mut seed: Option<(f64, f64, f64, f64)> = None;
    for i in 0..C_CANDIDATES {
        let c = eps_min * i as f64 / C_CANDIDATES as f64;
        let logs: Vec<f64> = obs.iter().map(|o| (o.eps_star - c).ln()).collect();
        if logs.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let (a, b) = linear_regression(&qs, &logs);
        let ssr = residual_sum(obs, a, b, c);
        if ssr.is_finite() && seed.as_ref().is_none_or(|s| ssr < s.3) {
            seed = Some((a, b, c, ssr));
        }
    }
    let (mut a, mut b, mut c, mut ssr) =
        seed.ok_or_else(|| Error::Fit("no valid offset candidate: ln(ε*−c) undefined".into()))?;

    // Damped Gauss–Newton on (a, b, c) with step halving.
    for _ in 0..200 {
        let mut jtj = [[0.0_f64; 4]; 3];
        let mut jtr = [0.0_f64; 3];
        for o in obs {
            let e = (a * o.q + b).exp();
            let f = e + c;
            if f <= 0.0 {
                return Err(Error::Fit("model dipped non-positive during refinement".into()));
            }
            let r = f.ln() - o.eps_star.ln();
            let j = [o.q * e / f, e / f, 1.0 / f];
            for row in 0..3 {
                for col in 0..3 {
                    jtj[row][col] += j[row] * j[col];
                }
                jtr[row] += j[row] * r;
            }
        }
        for row in 0..3 {
            jtj[row][3] = -jtr[row];
        }
        let step = solve3(jtj).ok_or_else(|| Error::Fit("normal equations are singular".into()))?;

        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = (a + t * step[0], b + t * step[1], c + t * step[2]);
            let cand_ssr = residual_sum(obs, cand.0, cand.1, cand.2);
            if cand_ssr.is_finite() && cand_ssr <= ssr {
                let rel_change = step
                    .iter()
                    .zip([a, b, c])
                    .map(|(d, v)| (t * d).abs() / v.abs().max(1e-12))
                    .fold(0.0_f64, f64::max);
                (a, b, c) = cand;
                ssr = cand_ssr;
                moved = rel_change >= 1e-9;
                break;
            }
            t *= 0.5;
        }
        if !ssr.is_finite() {
            return Err(Error::Fit("refinement diverged to a non-finite residual".into()));
        }
        if !moved {
            break;
        }
    }

    if a <= 0.0 || a.is_nan() {
        return Err(Error::Fit(format!("fitted growth rate must be positive, got a = {a}")));
    }

    let mut fit = ExpFit {
        a,
        b,
        c,
        r_squared: 0.0,
        eps_full: obs.last().unwrap().eps_star,
        q_floor: obs[0].q,
    };
    fit.r_squared = r_squared(obs, &fit)?;
    Ok(fit)
}

impl ExpFit {
    /// Model value e^{a·q+b} + c.
    pub fn value(&self, q: f64) -> f64 {
        (self.a * q + self.b).exp() + self.c
    }

    /// Invert the model: map a personalized budget to a sampling
    /// probability. Budgets at or above the simulated full-participation
    /// cost project to 1.0; budgets below the model value at the grid
    /// floor map to 0 with the never-sampled flag, which is the only
    /// assignment that cannot overspend them.
    pub fn estimate_q(&self, eps: f64) -> Result<QEstimate> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::Domain(format!("budget must be positive, got {eps}")));
        }
        if eps >= self.eps_full {
            return Ok(QEstimate {
                q: 1.0,
                never_sampled: false,
            });
        }
        if eps > self.value(self.q_floor) {
            let q = (((eps - self.c).ln() - self.b) / self.a).clamp(self.q_floor, 1.0);
            return Ok(QEstimate {
                q,
                never_sampled: false,
            });
        }
        Ok(QEstimate {
            q: 0.0,
            never_sampled: true,
        })
    }
}

/// Bisection on the accountant itself: the largest grid-resolution q whose
/// full-run cost stays within `eps`. The reference answer the estimator is
/// compared against; each query performs O(log(1/tol)) accountant sweeps.
pub fn binary_search_q(eps: f64, params: &MechanismParams, q_floor: f64, tol: f64) -> Result<f64> {
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::Domain(format!("budget must be positive, got {eps}")));
    }
    if tol <= 0.0 || tol.is_nan() {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if !(q_floor > 0.0 && q_floor < 1.0) {
        return Err(Error::Domain(format!("q_floor must lie in (0, 1), got {q_floor}")));
    }
    if eps >= fl_epsilon(1.0, params)?.epsilon {
        return Ok(1.0);
    }
    if eps < fl_epsilon(q_floor, params)?.epsilon {
        return Err(Error::Domain(format!(
            "budget {eps} below the achievable range at q_floor {q_floor}"
        )));
    }
    let mut lo = q_floor;
    let mut hi = 1.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if fl_epsilon(mid, params)?.epsilon <= eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
