//! Per-record privacy-budget ledger: pre-checks affordability of each
//! round, charges realized RDP cost, and reports spent ε.
//!
//! Accumulation happens in RDP space per order and is converted to ε only
//! for checks and reports; summing per-round ε values would be strictly
//! looser. A record whose accumulated curve is identically zero has spent
//! exactly nothing, so its reported ε is 0 rather than the grid conversion
//! floor ln(1/δ)/(α_max−1).

use crate::accountant::{
    client_amplify, compose_rounds, rdp_to_dp, subsampled_gaussian_rdp, MechanismParams, RdpCurve,
    Threat,
};
use crate::error::{Error, Result};

/// Ledger state of one record.
#[derive(Debug, Clone)]
pub struct RecordState {
    /// Personalized budget ε.
    pub budget_eps: f64,
    /// Assigned sampling probability.
    pub q: f64,
    /// Accumulated RDP cost.
    pub accumulated: RdpCurve,
    /// False once the record has opted out; it then appears in no later
    /// selection.
    pub active: bool,
    /// Converted spend of `accumulated`.
    pub spent_eps: f64,
}

impl RecordState {
    pub fn new(budget_eps: f64, q: f64, alpha_grid: Vec<u32>) -> Result<Self> {
        if !budget_eps.is_finite() || budget_eps <= 0.0 {
            return Err(Error::Domain(format!("budget must be positive, got {budget_eps}")));
        }
        if !(0.0..=1.0).contains(&q) || q.is_nan() {
            return Err(Error::Domain(format!("q must lie in [0, 1], got {q}")));
        }
        Ok(Self {
            budget_eps,
            q,
            accumulated: RdpCurve::zeros(alpha_grid)?,
            active: true,
            spent_eps: 0.0,
        })
    }
}

/// Spend of a curve: 0 for the identically-zero curve, otherwise the
/// optimal conversion.
pub fn converted_spend(curve: &RdpCurve, delta: f64) -> Result<f64> {
    if curve.is_zero() {
        Ok(0.0)
    } else {
        Ok(rdp_to_dp(curve, delta)?.epsilon)
    }
}

/// RDP cost one global round adds for a record with sampling probability
/// `q`: τ subsampled-Gaussian steps, amplified by client sampling for the
/// client/third-party adversary (charged every round — non-selection is
/// already priced in), unamplified for the server adversary (charged only
/// on rounds the record's client actually participates in).
pub fn round_increment(params: &MechanismParams, q: f64) -> Result<RdpCurve> {
    params.validate()?;
    let values = params
        .alpha_grid
        .iter()
        .map(|&alpha| subsampled_gaussian_rdp(alpha, q, params.sigma))
        .collect::<Result<Vec<_>>>()?;
    let per_step = RdpCurve::new(params.alpha_grid.clone(), values)?;
    let per_round = compose_rounds(&per_step, params.local_steps);
    match params.threat {
        Threat::ClientOrThirdParty => client_amplify(&per_round, params.client_prob),
        Threat::Server => Ok(per_round),
    }
}

/// True iff the record can afford `increment` on top of its accumulated
/// cost. A failed check permanently deactivates the record.
pub fn precheck(state: &mut RecordState, increment: &RdpCurve, delta: f64) -> Result<bool> {
    if !state.active {
        return Ok(false);
    }
    let after = state.accumulated.checked_add(increment)?;
    if converted_spend(&after, delta)? <= state.budget_eps {
        Ok(true)
    } else {
        state.active = false;
        Ok(false)
    }
}

/// Apply `increment` and refresh the converted spend. Revalidates the
/// precheck predicate and fails rather than letting a record overspend.
pub fn charge(state: &mut RecordState, increment: &RdpCurve, delta: f64) -> Result<()> {
    if !state.active {
        return Err(Error::Invariant("charge on a deactivated record".into()));
    }
    let after = state.accumulated.checked_add(increment)?;
    let spent = converted_spend(&after, delta)?;
    if spent > state.budget_eps {
        return Err(Error::Invariant(format!(
            "charge without a passing precheck: spend {spent} would exceed budget {}",
            state.budget_eps
        )));
    }
    state.accumulated = after;
    state.spent_eps = spent;
    Ok(())
}

/// One audit row of a ledger snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub client_id: usize,
    pub record_id: usize,
    pub budget_eps: f64,
    pub q: f64,
    pub spent_eps: f64,
    pub active: bool,
}

/// Budget ledger for one client's training records. Parallel clients own
/// disjoint ledgers; updates happen serially at round boundaries.
#[derive(Debug, Clone)]
pub struct ClientLedger {
    delta: f64,
    record_ids: Vec<usize>,
    records: Vec<RecordState>,
}

impl ClientLedger {
    /// `record_ids` are the caller's identifiers (e.g. indices into the
    /// client's shard) carried through to audit snapshots.
    pub fn new(
        record_ids: Vec<usize>,
        budgets: &[f64],
        qs: &[f64],
        alpha_grid: &[u32],
        delta: f64,
    ) -> Result<Self> {
        if record_ids.len() != budgets.len() || budgets.len() != qs.len() {
            return Err(Error::Domain("ledger input lengths differ".into()));
        }
        let records = budgets
            .iter()
            .zip(qs)
            .map(|(&eps, &q)| RecordState::new(eps, q, alpha_grid.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            delta,
            record_ids,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RecordState] {
        &self.records
    }

    /// Sampling probabilities with deactivated records masked to zero.
    pub fn effective_probs(&self) -> Vec<f64> {
        self.records.iter().map(|r| if r.active { r.q } else { 0.0 }).collect()
    }

    pub fn active_count(&self) -> usize {
        self.records.iter().filter(|r| r.active).count()
    }

    /// Run the round-start precheck against per-record increments
    /// (`None` marks a zero increment, i.e. q = 0). Records that cannot
    /// afford their increment opt out before sampling.
    pub fn precheck_round(&mut self, increments: &[Option<RdpCurve>]) -> Result<()> {
        if increments.len() != self.records.len() {
            return Err(Error::Domain("increment count differs from record count".into()));
        }
        for (state, inc) in self.records.iter_mut().zip(increments) {
            if let Some(inc) = inc {
                precheck(state, inc, self.delta)?;
            }
        }
        Ok(())
    }

    /// Charge every still-active record its increment after the round.
    pub fn charge_round(&mut self, increments: &[Option<RdpCurve>]) -> Result<()> {
        if increments.len() != self.records.len() {
            return Err(Error::Domain("increment count differs from record count".into()));
        }
        for (state, inc) in self.records.iter_mut().zip(increments) {
            if let Some(inc) = inc {
                if state.active {
                    charge(state, inc, self.delta)?;
                }
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, client_id: usize) -> Vec<LedgerRow> {
        self.record_ids
            .iter()
            .zip(&self.records)
            .map(|(&record_id, r)| LedgerRow {
                client_id,
                record_id,
                budget_eps: r.budget_eps,
                q: r.q,
                spent_eps: r.spent_eps,
                active: r.active,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::{default_alpha_grid, fl_epsilon};

    fn reference_params(threat: Threat) -> MechanismParams {
        MechanismParams {
            sigma: 1.0,
            clip: 1.0,
            delta: 1e-3,
            local_steps: 5,
            rounds: 20,
            client_prob: 0.5,
            alpha_grid: default_alpha_grid(),
            threat,
        }
    }

    #[test]
    fn increment_zero_probability_is_free() {
        let p = reference_params(Threat::ClientOrThirdParty);
        assert!(round_increment(&p, 0.0).unwrap().is_zero());
    }

    #[test]
    fn increment_threat_models_agree_at_full_client_sampling() {
        let mut p = reference_params(Threat::Server);
        p.client_prob = 1.0;
        let server = round_increment(&p, 0.4).unwrap();
        p.threat = Threat::ClientOrThirdParty;
        let client = round_increment(&p, 0.4).unwrap();
        assert_eq!(server, client);
    }

    #[test]
    fn increment_amplification_is_strict_for_partial_lambda() {
        let server = round_increment(&reference_params(Threat::Server), 0.5).unwrap();
        let client = round_increment(&reference_params(Threat::ClientOrThirdParty), 0.5).unwrap();
        assert!(client.value_at(2).unwrap() < server.value_at(2).unwrap());
    }

    #[test]
    fn precheck_fresh_record_with_fitted_cost_passes() {
        let p = reference_params(Threat::ClientOrThirdParty);
        // Budget equal to the full-run cost at this q, so round 1 is
        // affordable by construction.
        let q = 0.05;
        let budget = fl_epsilon(q, &p).unwrap().epsilon;
        let mut state = RecordState::new(budget, q, p.alpha_grid.clone()).unwrap();
        let inc = round_increment(&p, q).unwrap();
        assert!(precheck(&mut state, &inc, p.delta).unwrap());
        assert!(state.active);
    }

    #[test]
    fn precheck_zero_increment_is_trivially_affordable() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let mut state = RecordState::new(0.01, 0.0, p.alpha_grid.clone()).unwrap();
        let zero = RdpCurve::zeros(p.alpha_grid.clone()).unwrap();
        assert!(precheck(&mut state, &zero, p.delta).unwrap());
        assert_eq!(state.spent_eps, 0.0);
    }

    #[test]
    fn precheck_fails_once_budget_is_exhausted_and_deactivates() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let q = 0.05;
        // Budget calibrated to exactly T rounds (with float headroom);
        // round T+1 must fail.
        let budget = fl_epsilon(q, &p).unwrap().epsilon * (1.0 + 1e-9);
        let mut state = RecordState::new(budget, q, p.alpha_grid.clone()).unwrap();
        let inc = round_increment(&p, q).unwrap();
        let mut completed = 0;
        for _ in 0..p.rounds {
            if !precheck(&mut state, &inc, p.delta).unwrap() {
                break;
            }
            charge(&mut state, &inc, p.delta).unwrap();
            completed += 1;
        }
        assert_eq!(completed, p.rounds, "full-cost budget should afford all rounds");
        assert!(!precheck(&mut state, &inc, p.delta).unwrap());
        assert!(!state.active, "failed precheck must deactivate");
        assert!(!precheck(&mut state, &inc, p.delta).unwrap(), "deactivation is permanent");
        assert!(state.spent_eps <= state.budget_eps);
    }

    #[test]
    fn charging_zero_increment_leaves_spend_unchanged() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let mut state = RecordState::new(1.0, 0.3, p.alpha_grid.clone()).unwrap();
        let zero = RdpCurve::zeros(p.alpha_grid.clone()).unwrap();
        charge(&mut state, &zero, p.delta).unwrap();
        assert_eq!(state.spent_eps, 0.0);
    }

    #[test]
    fn repeated_charges_compose_additively() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let q = 0.02;
        let inc = round_increment(&p, q).unwrap();
        let budget = fl_epsilon(q, &p).unwrap().epsilon;
        let mut state = RecordState::new(budget, q, p.alpha_grid.clone()).unwrap();
        for _ in 0..5 {
            charge(&mut state, &inc, p.delta).unwrap();
        }
        let five = compose_rounds(&inc, 5);
        for (acc, scaled) in state.accumulated.values().iter().zip(five.values()) {
            assert!((acc - scaled).abs() <= 1e-12 * scaled.max(1.0));
        }
    }

    #[test]
    fn full_run_spend_stays_within_five_percent_of_budget() {
        // Round-trip through the accountant: for budgets equal to the
        // full-run cost, T charges land exactly on the budget; precheck
        // prevents any overshoot along the way.
        let p = reference_params(Threat::ClientOrThirdParty);
        for &q in &[0.01, 0.1, 0.4] {
            let eps = fl_epsilon(q, &p).unwrap().epsilon;
            let inc = round_increment(&p, q).unwrap();
            let mut state = RecordState::new(eps * 1.0000001, q, p.alpha_grid.clone()).unwrap();
            for _ in 0..p.rounds {
                assert!(precheck(&mut state, &inc, p.delta).unwrap());
                charge(&mut state, &inc, p.delta).unwrap();
            }
            assert!(state.spent_eps <= 1.05 * eps);
            assert!(state.spent_eps <= state.budget_eps);
        }
    }

    #[test]
    fn charge_without_precheck_room_is_rejected() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let q = 0.3;
        let inc = round_increment(&p, q).unwrap();
        // Budget below even one round's converted cost.
        let one_round = converted_spend(&inc, p.delta).unwrap();
        let mut state = RecordState::new(one_round * 0.5, q, p.alpha_grid.clone()).unwrap();
        assert!(matches!(charge(&mut state, &inc, p.delta), Err(Error::Invariant(_))));
        state.active = false;
        assert!(matches!(charge(&mut state, &inc, p.delta), Err(Error::Invariant(_))));
    }

    #[test]
    fn spend_is_monotone_over_rounds() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let q = 0.05;
        let inc = round_increment(&p, q).unwrap();
        let budget = fl_epsilon(q, &p).unwrap().epsilon;
        let mut state = RecordState::new(budget, q, p.alpha_grid.clone()).unwrap();
        let mut prev = 0.0;
        for _ in 0..p.rounds {
            charge(&mut state, &inc, p.delta).unwrap();
            assert!(state.spent_eps >= prev);
            prev = state.spent_eps;
        }
    }

    #[test]
    fn ledger_snapshot_carries_record_ids() {
        let p = reference_params(Threat::ClientOrThirdParty);
        let ledger = ClientLedger::new(
            vec![7, 9],
            &[1.0, 2.0],
            &[0.1, 0.2],
            &p.alpha_grid,
            p.delta,
        )
        .unwrap();
        let rows = ledger.snapshot(3);
        assert_eq!(rows[0].client_id, 3);
        assert_eq!(rows[0].record_id, 7);
        assert_eq!(rows[1].record_id, 9);
        assert_eq!(rows[1].budget_eps, 2.0);
        assert!(rows.iter().all(|r| r.spent_eps == 0.0 && r.active));
    }
}
