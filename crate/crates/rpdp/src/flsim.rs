//! FedAvg training engine with DP-SGD local updates and two-stage
//! sampling: uniform client-level Poisson sampling followed by non-uniform
//! record-level Poisson sampling, plus the uniform-guarantee baselines.
//!
//! Within a round, selected clients' local updates are independent and run
//! in parallel; determinism comes from per-(client, round) derived streams
//! and a fixed aggregation order, not from serial execution.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;

use crate::accountant::{MechanismParams, RdpCurve, Threat};
use crate::datagen::{ClientShard, FederatedDataset};
use crate::error::{Error, Result};
use crate::ledger::{round_increment, ClientLedger, LedgerRow};
use crate::math::mean;
use crate::sampling::{derive_stream, poisson_select, Label, RngStream};
use crate::scf::ExpFit;

/// Linear softmax classifier (multinomial logistic regression); weights
/// are laid out row-major as n_classes × (n_features + 1) with the bias
/// in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub n_features: usize,
    pub n_classes: usize,
    pub weights: Vec<f64>,
}

impl Model {
    /// Zero-initialized model; the objective is convex, so this removes
    /// one source of run-to-run variance.
    pub fn zeros(n_features: usize, n_classes: usize) -> Self {
        Self {
            n_features,
            n_classes,
            weights: vec![0.0; n_classes * (n_features + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.n_features + 1;
        for (k, logit) in out.iter_mut().enumerate() {
            let row = &self.weights[k * stride..(k + 1) * stride];
            let mut z = row[self.n_features]; // bias
            for (w, xi) in row[..self.n_features].iter().zip(x) {
                z += w * xi;
            }
            *logit = z;
        }
    }

    /// Class probabilities via a max-shifted softmax.
    fn probabilities(&self, x: &[f64], out: &mut [f64]) {
        self.logits(x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for z in out.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for z in out.iter_mut() {
            *z /= sum;
        }
    }

    /// Predicted class: argmax logit, smallest index on ties.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let mut logits = vec![0.0; self.n_classes];
        self.logits(x, &mut logits);
        let mut best = 0;
        for k in 1..self.n_classes {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best as u32
    }

    /// Cross-entropy gradient for one example, written into `grad`.
    fn per_example_grad(&self, x: &[f64], y: u32, probs: &mut [f64], grad: &mut [f64]) {
        self.probabilities(x, probs);
        let stride = self.n_features + 1;
        for k in 0..self.n_classes {
            let coef = probs[k] - f64::from(k as u32 == y);
            let row = &mut grad[k * stride..(k + 1) * stride];
            for (g, xi) in row[..self.n_features].iter_mut().zip(x) {
                *g = coef * xi;
            }
            row[self.n_features] = coef;
        }
    }
}

/// Per-step SGD parameters for one run mode. `clip: None` disables
/// clipping and is only valid together with `sigma == 0`.
#[derive(Debug, Clone, Copy)]
pub struct SgdParams {
    pub local_steps: u32,
    pub learning_rate: f64,
    pub sigma: f64,
    pub clip: Option<f64>,
}

/// One client's local training pass: τ steps of DP-SGD over its train
/// records. Each step Poisson-selects a minibatch from the still-active
/// records, clips every per-example gradient to ℓ2 norm L, sums, adds
/// N(0, σ²L²) noise per coordinate, divides by the realized batch size,
/// and takes one gradient step. An empty batch makes the step a no-op.
/// Returns the weight delta.
pub fn local_update(
    model: &Model,
    shard: &ClientShard,
    probs: &[f64],
    sgd: &SgdParams,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    if probs.len() != shard.train_idx.len() {
        return Err(Error::Domain(format!(
            "got {} probabilities for {} train records",
            probs.len(),
            shard.train_idx.len()
        )));
    }
    if shard.features.first().is_some_and(|row| row.len() != model.n_features) {
        return Err(Error::Domain("model dimension does not match data".into()));
    }
    if sgd.sigma > 0.0 && sgd.clip.is_none() {
        return Err(Error::Domain("noise without a clipping bound is not calibrated".into()));
    }

    let dim = model.dim();
    let mut local = model.clone();
    let mut grad_sum = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut prob_buf = vec![0.0; model.n_classes];

    for _ in 0..sgd.local_steps {
        let batch = poisson_select(probs, stream)?;
        if batch.is_empty() {
            continue;
        }
        grad_sum.fill(0.0);
        for &slot in &batch {
            let i = shard.train_idx[slot];
            local.per_example_grad(&shard.features[i], shard.labels[i], &mut prob_buf, &mut grad);
            let scale = match sgd.clip {
                Some(clip) => {
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > clip {
                        clip / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            for (acc, g) in grad_sum.iter_mut().zip(&grad) {
                *acc += scale * g;
            }
        }
        if sgd.sigma > 0.0 {
            let noise_std = sgd.sigma * sgd.clip.expect("checked above");
            for acc in grad_sum.iter_mut() {
                *acc += noise_std * stream.normal();
            }
        }
        let step = sgd.learning_rate / batch.len() as f64;
        for (w, g) in local.weights.iter_mut().zip(&grad_sum) {
            *w -= step * g;
        }
        if local.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invariant(
                "local update produced non-finite weights; lower the learning rate".into(),
            ));
        }
    }

    Ok(local
        .weights
        .iter()
        .zip(&model.weights)
        .map(|(after, before)| after - before)
        .collect())
}

/// Elementwise mean of the selected clients' deltas; an empty selection
/// yields the zero delta (the global model is unchanged that round).
pub fn aggregate(deltas: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    if deltas.iter().any(|d| d.len() != dim) {
        return Err(Error::Domain("delta dimensions differ".into()));
    }
    let scale = 1.0 / deltas.len() as f64;
    let mut out = vec![0.0; dim];
    for delta in deltas {
        for (o, d) in out.iter_mut().zip(delta) {
            *o += scale * d;
        }
    }
    Ok(out)
}

/// Fraction of correct argmax predictions on the shard's test split.
pub fn evaluate(model: &Model, shard: &ClientShard) -> Result<f64> {
    if shard.test_idx.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let correct = shard
        .test_idx
        .iter()
        .filter(|&&i| model.predict(&shard.features[i]) == shard.labels[i])
        .count();
    Ok(correct as f64 / shard.test_idx.len() as f64)
}

/// Training mode: the personalized scheme or one of its uniform baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Per-record sampling probabilities from each record's own budget.
    Rpdp,
    /// Uniform q from the most stringent budget in the population.
    Minimum,
    /// Records below the mean budget are excluded; the rest share the
    /// uniform q of the mean budget.
    Dropout,
    /// Plain FedAvg: no noise, no clipping, every record in every batch.
    PrivacyFree,
}

impl Mode {
    pub fn all() -> [Mode; 4] {
        [Mode::Rpdp, Mode::Minimum, Mode::Dropout, Mode::PrivacyFree]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Rpdp => "rpdp",
            Mode::Minimum => "minimum",
            Mode::Dropout => "dropout",
            Mode::PrivacyFree => "privacy_free",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "rpdp" => Ok(Mode::Rpdp),
            "minimum" => Ok(Mode::Minimum),
            "dropout" => Ok(Mode::Dropout),
            "privacy_free" => Ok(Mode::PrivacyFree),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected rpdp, minimum, dropout, privacy_free)"
            ))),
        }
    }
}

/// Where per-record sampling probabilities come from.
#[derive(Debug, Clone)]
pub enum QSource {
    /// Budgets mapped through a fitted estimator.
    Fit(ExpFit),
    /// Explicit per-client, per-train-record probabilities.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    pub master_seed: u64,
    pub learning_rate: f64,
    /// Evaluate every this many rounds (the final round is always
    /// evaluated).
    pub eval_every: u32,
}

/// Telemetry for one global round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub selected_clients: Vec<usize>,
    /// Active-record count per client.
    pub active_records: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_accuracy: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    /// Name of the ledger snapshot this run writes.
    pub ledger_csv: String,
}

pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub model: Model,
    pub ledger_rows: Vec<LedgerRow>,
    pub final_mean_accuracy: f64,
}

fn train_budgets(shard: &ClientShard) -> Vec<f64> {
    shard.train_idx.iter().map(|&i| shard.budgets[i]).collect()
}

/// Per-train-record sampling probabilities for every client under `mode`.
fn assign_probs(
    mode: Mode,
    data: &FederatedDataset,
    q_source: &QSource,
) -> Result<Vec<Vec<f64>>> {
    if mode == Mode::PrivacyFree {
        return Ok(data.clients.iter().map(|s| vec![1.0; s.train_idx.len()]).collect());
    }
    if let QSource::Explicit(probs) = q_source {
        if mode != Mode::Rpdp {
            return Err(Error::Config("explicit probabilities only drive the rpdp mode".into()));
        }
        if probs.len() != data.clients.len()
            || probs.iter().zip(&data.clients).any(|(p, s)| p.len() != s.train_idx.len())
        {
            return Err(Error::Config("explicit probability shape does not match dataset".into()));
        }
        return Ok(probs.clone());
    }
    let QSource::Fit(fit) = q_source else { unreachable!() };

    let all_budgets: Vec<f64> = data.clients.iter().flat_map(train_budgets).collect();
    match mode {
        Mode::Rpdp => data
            .clients
            .iter()
            .map(|s| {
                train_budgets(s)
                    .iter()
                    .map(|&eps| fit.estimate_q(eps).map(|e| e.q))
                    .collect()
            })
            .collect(),
        Mode::Minimum => {
            let eps_min = all_budgets.iter().copied().fold(f64::INFINITY, f64::min);
            let q = fit.estimate_q(eps_min)?.q;
            Ok(data.clients.iter().map(|s| vec![q; s.train_idx.len()]).collect())
        }
        Mode::Dropout => {
            let eps_mean = mean(&all_budgets);
            let q = fit.estimate_q(eps_mean)?.q;
            Ok(data
                .clients
                .iter()
                .map(|s| {
                    train_budgets(s)
                        .iter()
                        .map(|&eps| if eps < eps_mean { 0.0 } else { q })
                        .collect()
                })
                .collect())
        }
        _ => unreachable!(),
    }
}

/// Round increments per client and train record; `None` stands for the
/// zero increment of q = 0. Increments are constant across rounds, so they
/// are computed once and deduplicated by probability.
fn build_increments(
    params: &MechanismParams,
    probs: &[Vec<f64>],
) -> Result<Vec<Vec<Option<RdpCurve>>>> {
    let mut unique: Vec<u64> = probs
        .iter()
        .flatten()
        .filter(|q| **q > 0.0)
        .map(|q| q.to_bits())
        .collect();
    unique.sort_unstable();
    unique.dedup();
    let curves: Vec<RdpCurve> = unique
        .par_iter()
        .map(|&bits| round_increment(params, f64::from_bits(bits)))
        .collect::<Result<_>>()?;
    let by_bits: HashMap<u64, RdpCurve> = unique.into_iter().zip(curves).collect();
    Ok(probs
        .iter()
        .map(|client| {
            client
                .iter()
                .map(|&q| if q > 0.0 { Some(by_bits[&q.to_bits()].clone()) } else { None })
                .collect()
        })
        .collect())
}

/// Run T rounds of FedAvg with the two-stage sampling scheme under the
/// given mode, enforcing per-record budgets through the ledger. The
/// privacy-free baseline skips the DP mechanism entirely and reports zero
/// spend.
pub fn run(
    params: &MechanismParams,
    data: &FederatedDataset,
    q_source: &QSource,
    opts: &RunOptions,
) -> Result<RunOutput> {
    params.validate()?;
    if data.clients.is_empty() {
        return Err(Error::Data("dataset has no clients".into()));
    }
    if !opts.learning_rate.is_finite() || opts.learning_rate <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            opts.learning_rate
        )));
    }
    if opts.eval_every == 0 {
        return Err(Error::Config("eval_every must be >= 1".into()));
    }

    let n_clients = data.clients.len();
    let probs = assign_probs(opts.mode, data, q_source)?;
    let dp_engaged = opts.mode != Mode::PrivacyFree;

    let sgd = SgdParams {
        local_steps: params.local_steps,
        learning_rate: opts.learning_rate,
        sigma: if dp_engaged { params.sigma } else { 0.0 },
        clip: if dp_engaged { Some(params.clip) } else { None },
    };

    let increments = if dp_engaged {
        build_increments(params, &probs)?
    } else {
        Vec::new()
    };

    let mut ledgers: Vec<ClientLedger> = data
        .clients
        .iter()
        .zip(&probs)
        .map(|(shard, p)| {
            ClientLedger::new(
                shard.train_idx.clone(),
                &train_budgets(shard),
                p,
                &params.alpha_grid,
                params.delta,
            )
        })
        .collect::<Result<_>>()?;

    let ledger_csv = format!("ledger_{}_{}.csv", opts.mode.name(), opts.master_seed);
    let mut model = Model::zeros(data.n_features, data.n_classes);
    let mut metrics = Vec::with_capacity(params.rounds as usize);
    let mut final_mean_accuracy = 0.0;

    for t in 1..=params.rounds {
        let mut selection_stream = derive_stream(
            opts.master_seed,
            &[Label::Text("client-sampling"), Label::Text("round"), Label::Index(t as u64)],
        );
        let selected = poisson_select(&vec![params.client_prob; n_clients], &mut selection_stream)?;

        // Pre-check at the round start. Against clients/third parties the
        // mechanism runs for every client each round; against the server
        // only selected clients participate.
        if dp_engaged {
            for (i, ledger) in ledgers.iter_mut().enumerate() {
                let charged = match params.threat {
                    Threat::ClientOrThirdParty => true,
                    Threat::Server => selected.binary_search(&i).is_ok(),
                };
                if charged {
                    ledger.precheck_round(&increments[i])?;
                }
            }
        }

        let effective: Vec<Vec<f64>> = if dp_engaged {
            ledgers.iter().map(ClientLedger::effective_probs).collect()
        } else {
            probs.clone()
        };

        let deltas: Vec<Vec<f64>> = selected
            .par_iter()
            .map(|&i| {
                let mut stream = derive_stream(
                    opts.master_seed,
                    &[
                        Label::Text("client"),
                        Label::Index(i as u64),
                        Label::Text("round"),
                        Label::Index(t as u64),
                    ],
                );
                local_update(&model, &data.clients[i], &effective[i], &sgd, &mut stream)
            })
            .collect::<Result<_>>()?;

        let delta = aggregate(&deltas, model.dim())?;
        for (w, d) in model.weights.iter_mut().zip(&delta) {
            *w += d;
        }

        if dp_engaged {
            for (i, ledger) in ledgers.iter_mut().enumerate() {
                let charged = match params.threat {
                    Threat::ClientOrThirdParty => true,
                    Threat::Server => selected.binary_search(&i).is_ok(),
                };
                if charged {
                    ledger.charge_round(&increments[i])?;
                }
            }
        }

        let evaluated = t % opts.eval_every == 0 || t == params.rounds;
        let (client_accuracy, mean_accuracy) = if evaluated {
            let accs = data
                .clients
                .iter()
                .map(|shard| evaluate(&model, shard))
                .collect::<Result<Vec<f64>>>()?;
            let m = mean(&accs);
            final_mean_accuracy = m;
            (Some(accs), Some(m))
        } else {
            (None, None)
        };

        metrics.push(RoundMetrics {
            round: t,
            selected_clients: selected,
            active_records: ledgers.iter().map(ClientLedger::active_count).collect(),
            client_accuracy,
            mean_accuracy,
            ledger_csv: ledger_csv.clone(),
        });
    }

    let mut ledger_rows = Vec::new();
    for (i, ledger) in ledgers.iter().enumerate() {
        ledger_rows.extend(ledger.snapshot(i));
    }
    for row in &ledger_rows {
        if row.spent_eps > row.budget_eps {
            return Err(Error::Invariant(format!(
                "record {}/{} finished above budget: {} > {}",
                row.client_id, row.record_id, row.spent_eps, row.budget_eps
            )));
        }
    }

    Ok(RunOutput {
        metrics,
        model,
        ledger_rows,
        final_mean_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::default_alpha_grid;
    use crate::datagen::{generate_synthetic, FeatureScale};
    use crate::sampling::derive_stream;

    fn fixture_shard(features: Vec<Vec<f64>>, labels: Vec<u32>) -> ClientShard {
        let n = features.len();
        let d = features[0].len();
        ClientShard {
            features,
            labels,
            budgets: vec![1.0; n],
            train_idx: (0..n).collect(),
            test_idx: Vec::new(),
            scaler: vec![FeatureScale { mean: 0.0, std: 1.0 }; d],
        }
    }

    fn plain_sgd() -> SgdParams {
        SgdParams {
            local_steps: 1,
            learning_rate: 0.5,
            sigma: 0.0,
            clip: None,
        }
    }

    #[test]
    fn noiseless_full_participation_matches_plain_gradient_step() {
        let shard = fixture_shard(
            vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.2, -0.3]],
            vec![0, 1, 0],
        );
        let model = Model::zeros(2, 2);
        let mut stream = derive_stream(1, &[Label::Text("t")]);
        let delta =
            local_update(&model, &shard, &[1.0; 3], &plain_sgd(), &mut stream).unwrap();

        // Independent full-batch gradient: zero weights give p = 0.5 per
        // class, so the per-example gradient rows are ±0.5·[x, 1].
        let mut expect = vec![0.0; 6];
        for (x, &y) in shard.features.iter().zip(&shard.labels) {
            for k in 0..2_usize {
                let coef = 0.5 - f64::from(k as u32 == y);
                expect[k * 3] += coef * x[0];
                expect[k * 3 + 1] += coef * x[1];
                expect[k * 3 + 2] += coef;
            }
        }
        for (d, e) in delta.iter().zip(&expect) {
            let reference = -0.5 * e / 3.0; // −η · mean gradient
            assert!((d - reference).abs() < 1e-12, "{d} vs {reference}");
        }
    }

    #[test]
    fn zero_probabilities_make_every_step_a_noop() {
        let shard = fixture_shard(vec![vec![1.0], vec![2.0]], vec![0, 1]);
        let model = Model::zeros(1, 2);
        let mut stream = derive_stream(2, &[Label::Text("t")]);
        let sgd = SgdParams {
            local_steps: 7,
            ..plain_sgd()
        };
        let delta = local_update(&model, &shard, &[0.0, 0.0], &sgd, &mut stream).unwrap();
        assert!(delta.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn clipping_caps_a_single_example_contribution() {
        // One example whose raw gradient norm is 10: with zero weights the
        // gradient norm is √2·0.5·‖[x, 1]‖, so ‖[x, 1]‖ = 10/0.7071...
        let x = (10.0_f64 / (0.5 * 2.0_f64.sqrt())).powi(2) - 1.0;
        let shard = fixture_shard(vec![vec![x.sqrt()]], vec![0]);
        let model = Model::zeros(1, 2);

        let raw = {
            let mut stream = derive_stream(3, &[Label::Text("raw")]);
            let sgd = SgdParams {
                learning_rate: 1.0,
                ..plain_sgd()
            };
            local_update(&model, &shard, &[1.0], &sgd, &mut stream).unwrap()
        };
        let raw_norm = raw.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((raw_norm - 10.0).abs() < 1e-9, "raw norm {raw_norm}");

        let mut stream = derive_stream(3, &[Label::Text("clip")]);
        let sgd = SgdParams {
            learning_rate: 1.0,
            clip: Some(1.0),
            ..plain_sgd()
        };
        let clipped = local_update(&model, &shard, &[1.0], &sgd, &mut stream).unwrap();
        let norm = clipped.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "clipped norm {norm}");
    }

    #[test]
    fn aggregate_identity_symmetry_empty() {
        let d = vec![1.0, -2.0, 3.0];
        assert_eq!(aggregate(std::slice::from_ref(&d), 3).unwrap(), d);
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let pair = [d, neg];
        assert!(aggregate(&pair, 3).unwrap().iter().all(|x| *x == 0.0));
        assert_eq!(aggregate(&[], 3).unwrap(), vec![0.0; 3]);
        assert!(aggregate(&[vec![1.0], vec![1.0, 2.0]], 1).is_err());
    }

    #[test]
    fn evaluate_known_fixtures() {
        // Perfect predictor: weights aligned with the labels.
        let mut shard = fixture_shard(vec![vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]], vec![1, 0, 1, 0]);
        shard.test_idx = vec![0, 1, 2, 3];
        let mut model = Model::zeros(1, 2);
        model.weights = vec![-1.0, 0.0, 1.0, 0.0]; // class 1 scores +x, class 0 scores −x
        assert_eq!(evaluate(&model, &shard).unwrap(), 1.0);

        // Constant predictor on a balanced split: exactly half right.
        let constant = Model::zeros(1, 2); // ties resolve to class 0
        assert_eq!(evaluate(&constant, &shard).unwrap(), 0.5);

        // Hand-scored 5-example fixture: w = [1, 0 | −1, 0] scores class 0
        // as +x and class 1 as −x, so positives predict 0.
        let mut five = fixture_shard(
            vec![vec![0.5], vec![-0.5], vec![1.5], vec![-1.5], vec![2.5]],
            vec![0, 1, 1, 0, 0],
        );
        five.test_idx = vec![0, 1, 2, 3, 4];
        let mut scorer = Model::zeros(1, 2);
        scorer.weights = vec![1.0, 0.0, -1.0, 0.0];
        // Predictions: 0, 1, 0, 1, 0 → correct for examples 0, 1, 4.
        assert!((evaluate(&scorer, &five).unwrap() - 0.6).abs() < 1e-12);

        let mut empty = fixture_shard(vec![vec![1.0], vec![2.0]], vec![0, 1]);
        empty.test_idx.clear();
        assert!(evaluate(&Model::zeros(1, 2), &empty).is_err());
    }

    fn small_params(threat: Threat) -> MechanismParams {
        MechanismParams {
            sigma: 1.0,
            clip: 1.0,
            delta: 1e-3,
            local_steps: 2,
            rounds: 6,
            client_prob: 1.0,
            alpha_grid: default_alpha_grid(),
            threat,
        }
    }

    #[test]
    fn privacy_free_learns_separable_data_and_spends_nothing() {
        let mut stream = derive_stream(40, &[Label::Text("sep")]);
        let data = generate_synthetic(4, 200, 8, 2, 6.0, 0.66, &mut stream).unwrap();
        let mut params = small_params(Threat::ClientOrThirdParty);
        params.rounds = 10;
        let out = run(
            &params,
            &data,
            &QSource::Explicit(vec![]), // ignored by privacy-free
            &RunOptions {
                mode: Mode::PrivacyFree,
                master_seed: 40,
                learning_rate: 0.5,
                eval_every: 1,
            },
        )
        .unwrap();
        assert!(out.final_mean_accuracy >= 0.95, "accuracy {}", out.final_mean_accuracy);
        assert!(out.ledger_rows.iter().all(|r| r.spent_eps == 0.0 && r.active));
    }

    #[test]
    fn explicit_probabilities_shape_is_checked() {
        let mut stream = derive_stream(41, &[Label::Text("shape")]);
        let data = generate_synthetic(2, 20, 3, 2, 3.0, 0.66, &mut stream).unwrap();
        let params = small_params(Threat::ClientOrThirdParty);
        let out = run(
            &params,
            &data,
            &QSource::Explicit(vec![vec![0.5; 3]]),
            &RunOptions {
                mode: Mode::Rpdp,
                master_seed: 41,
                learning_rate: 0.1,
                eval_every: 1,
            },
        );
        assert!(out.is_err());
    }

    #[test]
    fn run_is_bit_identical_across_thread_counts() {
        let mut stream = derive_stream(42, &[Label::Text("threads")]);
        let data = generate_synthetic(4, 60, 4, 2, 3.0, 0.66, &mut stream).unwrap();
        let mut params = small_params(Threat::ClientOrThirdParty);
        params.client_prob = 0.7;
        let probs: Vec<Vec<f64>> = data
            .clients
            .iter()
            .map(|s| s.train_idx.iter().map(|&i| 0.2 + 0.6 * (i % 3) as f64 / 3.0).collect())
            .collect();
        let opts = RunOptions {
            mode: Mode::Rpdp,
            master_seed: 42,
            learning_rate: 0.2,
            eval_every: 2,
        };
        let source = QSource::Explicit(probs);

        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run(&params, &data, &source, &opts))
            .unwrap();
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run(&params, &data, &source, &opts))
            .unwrap();

        assert_eq!(single.model.weights, multi.model.weights);
        assert_eq!(single.final_mean_accuracy, multi.final_mean_accuracy);
        for (a, b) in single.ledger_rows.iter().zip(&multi.ledger_rows) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unselected_rounds_still_charge_against_observers_but_not_the_server() {
        // With a tiny client sampling probability the selection is empty;
        // the client/third-party adversary still observes the round (the
        // amplification priced non-selection), the server does not.
        let mut stream = derive_stream(77, &[Label::Text("empty")]);
        let mut data = generate_synthetic(2, 12, 2, 2, 3.0, 0.66, &mut stream).unwrap();
        let budgets = data.clients.iter().map(|s| vec![50.0; s.len()]).collect();
        data.assign_budgets(budgets).unwrap();
        let probs: Vec<Vec<f64>> = data
            .clients
            .iter()
            .map(|s| vec![0.2; s.train_idx.len()])
            .collect();
        let mut params = small_params(Threat::ClientOrThirdParty);
        params.rounds = 2;
        params.client_prob = 1e-9;
        let opts = RunOptions {
            mode: Mode::Rpdp,
            master_seed: 77,
            learning_rate: 0.1,
            eval_every: 2,
        };

        let observer = run(&params, &data, &QSource::Explicit(probs.clone()), &opts).unwrap();
        assert!(observer.metrics.iter().all(|m| m.selected_clients.is_empty()));
        assert!(observer.model.weights.iter().all(|w| *w == 0.0));
        assert!(observer.ledger_rows.iter().all(|r| r.spent_eps > 0.0 && r.active));

        params.threat = Threat::Server;
        let server = run(&params, &data, &QSource::Explicit(probs), &opts).unwrap();
        assert!(server.ledger_rows.iter().all(|r| r.spent_eps == 0.0));
    }

    #[test]
    fn ledger_budgets_hold_in_dp_runs() {
        let mut stream = derive_stream(43, &[Label::Text("ledger")]);
        let mut data = generate_synthetic(3, 40, 4, 2, 3.0, 0.66, &mut stream).unwrap();
        // Budgets spread over a wide range, including some too small to
        // afford any participation.
        let budgets: Vec<Vec<f64>> = data
            .clients
            .iter()
            .map(|s| (0..s.len()).map(|i| 0.05 + 2.0 * (i % 5) as f64).collect())
            .collect();
        data.assign_budgets(budgets).unwrap();

        let params = small_params(Threat::ClientOrThirdParty);
        let probs: Vec<Vec<f64>> = data
            .clients
            .iter()
            .map(|s| s.train_idx.iter().map(|&i| if i % 5 == 0 { 0.0 } else { 0.05 }).collect())
            .collect();
        let out = run(
            &params,
            &data,
            &QSource::Explicit(probs),
            &RunOptions {
                mode: Mode::Rpdp,
                master_seed: 43,
                learning_rate: 0.2,
                eval_every: 3,
            },
        )
        .unwrap();
        for row in &out.ledger_rows {
            assert!(row.spent_eps <= row.budget_eps);
        }
        // q = 0 records never spend.
        for row in out.ledger_rows.iter().filter(|r| r.q == 0.0) {
            assert_eq!(row.spent_eps, 0.0);
        }
    }
}
