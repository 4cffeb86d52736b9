//! Rényi differential privacy accounting for the two-stage sampled Gaussian
//! mechanism: per-step RDP of the Poisson-subsampled Gaussian, additive
//! composition across steps and rounds, client-sampling amplification, and
//! conversion from RDP to an (ε, δ)-DP guarantee over a finite order grid.
//!
//! All functions here are pure; they are safe to call concurrently.

use crate::error::{Error, Result};
use crate::math::log_add;

/// A discrete RDP budget curve: one nonnegative cost value per integer
/// Rényi order. Orders are strictly increasing and start at 2.
///
/// Composition of mechanisms adds curves pointwise, so composing k copies
/// of a mechanism multiplies every value by k.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    orders: Vec<u32>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Domain("RDP curve must have at least one order".into()));
        }
        if orders.len() != values.len() {
            return Err(Error::Domain(format!(
                "order/value length mismatch: {} vs {}",
                orders.len(),
                values.len()
            )));
        }
        if orders[0] < 2 {
            return Err(Error::Domain("Rényi orders must be integers >= 2".into()));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("Rényi orders must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("RDP values must be finite and nonnegative".into()));
        }
        Ok(Self { orders, values })
    }

    /// All-zero curve over the given grid.
    pub fn zeros(orders: Vec<u32>) -> Result<Self> {
        let n = orders.len();
        Self::new(orders, vec![0.0; n])
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// True when every value is exactly zero (no privacy cost accrued).
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn value_at(&self, alpha: u32) -> Option<f64> {
        let i = self.orders.iter().position(|a| *a == alpha)?;
        Some(self.values[i])
    }

    /// Pointwise sum of two curves over the same order grid.
    pub fn checked_add(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::Domain("cannot add RDP curves over different order grids".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        RdpCurve::new(self.orders.clone(), values)
    }

    /// In-place pointwise accumulation; grids must match.
    pub fn add_assign(&mut self, other: &RdpCurve) -> Result<()> {
        if self.orders != other.orders {
            return Err(Error::Domain("cannot add RDP curves over different order grids".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// Adversary the guarantee is stated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threat {
    /// Honest-but-curious server observing per-client local updates.
    Server,
    /// Untrusted clients or third parties observing global models.
    ClientOrThirdParty,
}

/// Fixed parameters of the private training mechanism for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismParams {
    /// Noise multiplier σ (noise stddev is σ·clip per coordinate).
    pub sigma: f64,
    /// Gradient clipping bound L (ℓ2).
    pub clip: f64,
    /// DP slack δ.
    pub delta: f64,
    /// Local SGD steps per round, τ.
    pub local_steps: u32,
    /// Global communication rounds, T.
    pub rounds: u32,
    /// Uniform client sampling probability λ.
    pub client_prob: f64,
    /// Integer Rényi orders used for accounting.
    pub alpha_grid: Vec<u32>,
    pub threat: Threat,
}

/// Default order grid: integers 2..=64.
pub fn default_alpha_grid() -> Vec<u32> {
    (2..=64).collect()
}

/// Extended order grid: integers 2..=max_alpha.
pub fn alpha_grid_to(max_alpha: u32) -> Vec<u32> {
    (2..=max_alpha).collect()
}

impl MechanismParams {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::Domain(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.clip.is_finite() || self.clip <= 0.0 {
            return Err(Error::Domain(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.local_steps == 0 {
            return Err(Error::Domain("local_steps must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Domain("rounds must be >= 1".into()));
        }
        if !(self.client_prob > 0.0 && self.client_prob <= 1.0) {
            return Err(Error::Domain(format!(
                "client_prob must lie in (0, 1], got {}",
                self.client_prob
            )));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::Domain("alpha_grid must be non-empty".into()));
        }
        if self.alpha_grid[0] < 2 || self.alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "alpha_grid must be strictly increasing integers >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Optimal conversion of an RDP curve to a single (ε, δ) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpPoint {
    /// Smallest ε over the order grid.
    pub epsilon: f64,
    /// The order achieving it (smallest such order on ties).
    pub alpha_star: u32,
}

/// RDP of the Gaussian mechanism at order `alpha`: α·L²/(2σ²).
pub fn gaussian_rdp(alpha: u32, sigma: f64, clip: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Domain(format!("alpha must be >= 2, got {alpha}")));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if !clip.is_finite() || clip <= 0.0 {
        return Err(Error::Domain(format!("clip must be positive, got {clip}")));
    }
    Ok(alpha as f64 * clip * clip / (2.0 * sigma * sigma))
}

/// Upper bound on the RDP of the Poisson-subsampled Gaussian mechanism at
/// integer order `alpha`, sampling probability `q`, and unit sensitivity:
///
/// ρ(α, q) = ln{ Σ_{ℓ=0}^{α} C(α, ℓ) (1−q)^{α−ℓ} q^ℓ e^{ℓ(ℓ−1)/(2σ²)} } / (α−1)
///
/// evaluated in log space (log-binomials combined by log-sum-exp), so it
/// stays finite for large orders. Exactly 0 at q = 0 and exactly the plain
/// Gaussian value α/(2σ²) at q = 1.
pub fn subsampled_gaussian_rdp(alpha: u32, q: f64, sigma: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Domain(format!("alpha must be >= 2, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(Error::Domain(format!("q must lie in [0, 1], got {q}")));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(alpha as f64 / (2.0 * sigma * sigma));
    }

    let a = alpha as f64;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    // ℓ = 0 and ℓ = 1 collapse to (1−q)^{α−1}(αq − q + 1).
    let mut log_sum = (a - 1.0) * log_1mq + (a * q - q + 1.0).ln();

    // Remaining terms with the binomial coefficient built incrementally:
    // ln C(α, ℓ) = ln C(α, ℓ−1) + ln(α−ℓ+1) − ln ℓ.
    let mut log_binom = a.ln(); // ln C(α, 1)
    for l in 2..=alpha {
        let lf = l as f64;
        log_binom += ((alpha - l + 1) as f64).ln() - lf.ln();
        let term = log_binom + lf * log_q + (a - lf) * log_1mq + lf * (lf - 1.0) * inv_two_sigma_sq;
        log_sum = log_add(log_sum, term);
    }
    Ok((log_sum / (a - 1.0)).max(0.0))
}

/// Additive composition: every value multiplied by the number of rounds k.
/// k = 0 yields the all-zero curve.
pub fn compose_rounds(curve: &RdpCurve, k: u32) -> RdpCurve {
    let kf = k as f64;
    RdpCurve {
        orders: curve.orders.clone(),
        values: curve.values.iter().map(|v| v * kf).collect(),
    }
}

/// Amplification of a per-round curve by uniform client sampling with
/// probability λ: per order, ρ' = ln(1−λ + λ·e^{(α−1)ρ}) / (α−1), computed
/// via log-sum-exp so large exponents reduce to ρ + ln(λ)/(α−1) without
/// overflow. Output never exceeds the input; zero values stay exactly zero.
pub fn client_amplify(curve: &RdpCurve, lambda: f64) -> Result<RdpCurve> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Domain(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(curve.clone());
    }
    let log_lambda = lambda.ln();
    let log_1ml = (-lambda).ln_1p();
    let values = curve
        .orders
        .iter()
        .zip(&curve.values)
        .map(|(&alpha, &rho)| {
            if rho == 0.0 {
                0.0
            } else {
                let am1 = (alpha - 1) as f64;
                let v = log_add(log_1ml, log_lambda + am1 * rho) / am1;
                v.clamp(0.0, rho)
            }
        })
        .collect();
    Ok(RdpCurve {
        orders: curve.orders.clone(),
        values,
    })
}

/// Convert an RDP curve to the smallest (ε, δ)-DP point over its order
/// grid: ε* = min_α { ρ(α) + ln(1/δ)/(α−1) }. Ties break toward the
/// smaller order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<DpPoint> {
    if curve.is_empty() {
        return Err(Error::Domain("cannot convert an empty RDP curve".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let log_inv_delta = -delta.ln();
    let mut best_eps = f64::INFINITY;
    let mut best_alpha = curve.orders[0];
    for (&alpha, &rho) in curve.orders.iter().zip(&curve.values) {
        let eps = rho + log_inv_delta / ((alpha - 1) as f64);
        if eps < best_eps {
            best_eps = eps;
            best_alpha = alpha;
        }
    }
    Ok(DpPoint {
        epsilon: best_eps,
        alpha_star: best_alpha,
    })
}

/// Full-run RDP curve of the two-stage mechanism for a record whose
/// sampling probability is `q`.
///
/// The per-round cost is τ subsampled-Gaussian steps composed additively.
/// Against clients or third parties the per-round curve is amplified by
/// client sampling and composed over all T rounds; against the server the
/// unamplified per-round curve is composed over ceil(λT) rounds (the
/// realized-participation ledger charges the exact per-run count).
pub fn fl_rdp_curve(q: f64, params: &MechanismParams) -> Result<RdpCurve> {
    params.validate()?;
    let values = params
        .alpha_grid
        .iter()
        .map(|&alpha| subsampled_gaussian_rdp(alpha, q, params.sigma))
        .collect::<Result<Vec<_>>>()?;
    let per_step = RdpCurve::new(params.alpha_grid.clone(), values)?;
    let per_round = compose_rounds(&per_step, params.local_steps);
    match params.threat {
        Threat::ClientOrThirdParty => {
            let amplified = client_amplify(&per_round, params.client_prob)?;
            Ok(compose_rounds(&amplified, params.rounds))
        }
        Threat::Server => {
            // ceil(λT), guarding against float noise pushing an integer
            // product over the next boundary (e.g. 0.1 * 10).
            let expected = params.client_prob * params.rounds as f64;
            let effective_rounds = if (expected - expected.round()).abs() < 1e-9 {
                expected.round() as u32
            } else {
                expected.ceil() as u32
            };
            Ok(compose_rounds(&per_round, effective_rounds))
        }
    }
}

/// Optimal DP budget ε*(q) of the full run for sampling probability `q`.
pub fn fl_epsilon(q: f64, params: &MechanismParams) -> Result<DpPoint> {
    let curve = fl_rdp_curve(q, params)?;
    rdp_to_dp(&curve, params.delta)
}
