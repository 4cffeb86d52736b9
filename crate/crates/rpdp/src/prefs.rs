//! Generators for personalized privacy-budget assignments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sampling::RngStream;

/// Whether the spread parameters of a Gaussian mixture are variances or
/// standard deviations. Variance is the default reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpreadKind {
    #[default]
    Variance,
    StdDev,
}

/// A privacy-preference distribution over per-record budgets ε.
#[derive(Debug, Clone, PartialEq)]
pub enum DistSpec {
    /// Three predefined privacy categories with selection weights.
    ThreeLevels { levels: [f64; 3], weights: [f64; 3] },
    /// Pareto(shape, scale = lower) resampled into [lower, upper].
    BoundedPareto { shape: f64, lower: f64, upper: f64 },
    /// Mixture of three Gaussians resampled into [lower, upper].
    BoundedMixGauss {
        means: [f64; 3],
        spreads: [f64; 3],
        spread_kind: SpreadKind,
        weights: [f64; 3],
        lower: f64,
        upper: f64,
    },
    /// Budgets keyed by class label; drawn with [`assign_by_label`].
    PerLabel { budgets: BTreeMap<u32, f64> },
}

fn check_weights(weights: &[f64; 3]) -> Result<()> {
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Domain("weights must be nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights must sum to 1, got {sum}")));
    }
    Ok(())
}

fn check_bounds(lower: f64, upper: f64) -> Result<()> {
    if !lower.is_finite() || lower <= 0.0 {
        return Err(Error::Domain(format!("lower bound must be positive, got {lower}")));
    }
    if lower >= upper {
        return Err(Error::Domain(format!("need lower < upper, got [{lower}, {upper}]")));
    }
    Ok(())
}

impl DistSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DistSpec::ThreeLevels { levels, weights } => {
                if levels.iter().any(|l| !l.is_finite() || *l <= 0.0) {
                    return Err(Error::Domain("levels must be positive".into()));
                }
                if levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Domain("levels must be strictly ascending".into()));
                }
                check_weights(weights)
            }
            DistSpec::BoundedPareto { shape, lower, upper } => {
                if !shape.is_finite() || *shape <= 0.0 {
                    return Err(Error::Domain(format!("shape must be positive, got {shape}")));
                }
                check_bounds(*lower, *upper)
            }
            DistSpec::BoundedMixGauss { means, spreads, weights, lower, upper, .. } => {
                if means.iter().chain(spreads).any(|v| !v.is_finite() || *v <= 0.0) {
                    return Err(Error::Domain("means and spreads must be positive".into()));
                }
                check_weights(weights)?;
                check_bounds(*lower, *upper)
            }
            DistSpec::PerLabel { budgets } => {
                if budgets.is_empty() {
                    return Err(Error::Domain("label-budget mapping must be non-empty".into()));
                }
                if budgets.values().any(|v| !v.is_finite() || *v <= 0.0) {
                    return Err(Error::Domain("label budgets must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

fn pick_component(weights: &[f64; 3], stream: &mut RngStream) -> usize {
    let u = stream.uniform();
    if u < weights[0] {
        0
    } else if u < weights[0] + weights[1] {
        1
    } else {
        2
    }
}

const MAX_REJECTIONS: usize = 1_000_000;

/// Draw `n` budgets from `spec`. Bounded variants resample until the draw
/// lands inside [lower, upper]. `PerLabel` specs carry no randomness and
/// must go through [`assign_by_label`] instead.
pub fn sample_budgets(spec: &DistSpec, n: usize, stream: &mut RngStream) -> Result<Vec<f64>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("need n >= 1 budgets".into()));
    }
    let mut out = Vec::with_capacity(n);
    match spec {
        DistSpec::ThreeLevels { levels, weights } => {
            for _ in 0..n {
                out.push(levels[pick_component(weights, stream)]);
            }
        }
        DistSpec::BoundedPareto { shape, lower, upper } => {
            let mut rejections = 0;
            while out.len() < n {
                let u = 1.0 - stream.uniform(); // (0, 1]
                let x = lower * u.powf(-1.0 / shape);
                if x <= *upper {
                    out.push(x);
                } else {
                    rejections += 1;
                    if rejections > MAX_REJECTIONS {
                        return Err(Error::Domain("rejection sampling stalled; bounds too tight".into()));
                    }
                }
            }
        }
        DistSpec::BoundedMixGauss { means, spreads, spread_kind, weights, lower, upper } => {
            let stds = match spread_kind {
                SpreadKind::Variance => spreads.map(f64::sqrt),
                SpreadKind::StdDev => *spreads,
            };
            let mut rejections = 0;
            while out.len() < n {
                // The component is fixed per record; only the normal draw
                // is rejected, so clamping preserves the mixture weights.
                let k = pick_component(weights, stream);
                loop {
                    let x = means[k] + stds[k] * stream.normal();
                    if (*lower..=*upper).contains(&x) {
                        out.push(x);
                        break;
                    }
                    rejections += 1;
                    if rejections > MAX_REJECTIONS {
                        return Err(Error::Domain("rejection sampling stalled; bounds too tight".into()));
                    }
                }
            }
        }
        DistSpec::PerLabel { .. } => {
            return Err(Error::Domain(
                "per-label budgets are deterministic; use assign_by_label".into(),
            ));
        }
    }
    Ok(out)
}

/// Elementwise lookup of per-label budgets.
pub fn assign_by_label(labels: &[u32], mapping: &BTreeMap<u32, f64>) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|label| {
            mapping
                .get(label)
                .copied()
                .ok_or_else(|| Error::Domain(format!("label {label} missing from budget mapping")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{derive_stream, Label};

    fn stream(tag: &'static str) -> RngStream {
        derive_stream(2024, &[Label::Text(tag)])
    }

    fn three_levels() -> DistSpec {
        DistSpec::ThreeLevels {
            levels: [0.1, 1.0, 5.0],
            weights: [0.7, 0.2, 0.1],
        }
    }

    fn mix_gauss_defaults() -> DistSpec {
        DistSpec::BoundedMixGauss {
            means: [0.1, 1.0, 5.0],
            spreads: [0.01, 0.05, 0.5],
            spread_kind: SpreadKind::Variance,
            weights: [0.7, 0.2, 0.1],
            lower: 0.1,
            upper: 10.0,
        }
    }

    #[test]
    fn three_levels_category_counts_in_multinomial_bands() {
        let draws = sample_budgets(&three_levels(), 1000, &mut stream("tl")).unwrap();
        let count = |v: f64| draws.iter().filter(|x| **x == v).count() as f64;
        // 3σ multinomial bands around (700, 200, 100).
        assert!((count(0.1) - 700.0).abs() <= 3.0 * (1000.0_f64 * 0.7 * 0.3).sqrt());
        assert!((count(1.0) - 200.0).abs() <= 3.0 * (1000.0_f64 * 0.2 * 0.8).sqrt());
        assert!((count(5.0) - 100.0).abs() <= 3.0 * (1000.0_f64 * 0.1 * 0.9).sqrt());
        assert_eq!(draws.len(), 1000);
    }

    #[test]
    fn three_levels_degenerate_weights() {
        let spec = DistSpec::ThreeLevels {
            levels: [0.1, 1.0, 5.0],
            weights: [1.0, 0.0, 0.0],
        };
        let draws = sample_budgets(&spec, 64, &mut stream("deg")).unwrap();
        assert!(draws.iter().all(|x| *x == 0.1));
    }

    #[test]
    fn bounded_pareto_respects_bounds() {
        let spec = DistSpec::BoundedPareto {
            shape: 1.0,
            lower: 0.1,
            upper: 10.0,
        };
        let draws = sample_budgets(&spec, 5000, &mut stream("bp")).unwrap();
        assert!(draws.iter().all(|x| (0.1..=10.0).contains(x)));
    }

    #[test]
    fn mix_gauss_defaults_mean_band() {
        // Mixture mean before clamping is 0.77; clamping shifts it up a
        // little. Monte Carlo mean over 10,000 draws lands in [0.55, 0.95].
        let draws = sample_budgets(&mix_gauss_defaults(), 10_000, &mut stream("mg")).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((0.55..=0.95).contains(&mean), "mean = {mean}");
        assert!(draws.iter().all(|x| (0.1..=10.0).contains(x)));
    }

    #[test]
    fn deterministic_under_fixed_stream() {
        let a = sample_budgets(&mix_gauss_defaults(), 256, &mut stream("det")).unwrap();
        let b = sample_budgets(&mix_gauss_defaults(), 256, &mut stream("det")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_specs_are_rejected() {
        let bad_weights = DistSpec::ThreeLevels {
            levels: [0.1, 1.0, 5.0],
            weights: [0.7, 0.2, 0.2],
        };
        assert!(sample_budgets(&bad_weights, 10, &mut stream("bw")).is_err());
        let bad_bounds = DistSpec::BoundedPareto {
            shape: 1.0,
            lower: 5.0,
            upper: 1.0,
        };
        assert!(sample_budgets(&bad_bounds, 10, &mut stream("bb")).is_err());
        let per_label = DistSpec::PerLabel {
            budgets: BTreeMap::from([(0, 0.5)]),
        };
        assert!(sample_budgets(&per_label, 10, &mut stream("pl")).is_err());
    }

    #[test]
    fn per_label_lookup_and_missing_label() {
        let mapping = BTreeMap::from([(0_u32, 0.5), (1, 0.05)]);
        let budgets = assign_by_label(&[0, 1, 1, 0], &mapping).unwrap();
        assert_eq!(budgets, vec![0.5, 0.05, 0.05, 0.5]);

        let uniform = BTreeMap::from([(0_u32, 2.0), (1, 2.0)]);
        assert!(assign_by_label(&[0, 1, 0], &uniform).unwrap().iter().all(|b| *b == 2.0));

        assert!(assign_by_label(&[0, 2], &mapping).is_err());
    }
}
