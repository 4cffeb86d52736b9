//! Experiment configuration: a single TOML file with nested sections,
//! schema-validated before any computation. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::accountant::{alpha_grid_to, MechanismParams, Threat};
use crate::error::{Error, Result};
use crate::flsim::Mode;
use crate::prefs::{DistSpec, SpreadKind};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mechanism: MechanismSection,
    #[serde(default)]
    pub scf: ScfSection,
    #[serde(default)]
    pub curves: CurvesSection,
    pub budgets: Option<BudgetsSection>,
    pub dataset: Option<DatasetSection>,
    pub run: Option<RunSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSection {
    pub sigma: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    pub delta: f64,
    pub local_steps: u32,
    pub rounds: u32,
    pub client_prob: f64,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: u32,
    #[serde(default = "default_threat")]
    pub threat: String,
}

fn default_clip() -> f64 {
    1.0
}

fn default_alpha_max() -> u32 {
    64
}

fn default_threat() -> String {
    "client".into()
}

pub fn parse_threat(s: &str) -> Result<Threat> {
    match s {
        "server" => Ok(Threat::Server),
        "client" => Ok(Threat::ClientOrThirdParty),
        other => Err(Error::Config(format!("unknown threat '{other}' (expected server or client)"))),
    }
}

impl MechanismSection {
    pub fn to_params(&self) -> Result<MechanismParams> {
        if self.alpha_max < 2 {
            return Err(Error::Config("alpha_max must be >= 2".into()));
        }
        let params = MechanismParams {
            sigma: self.sigma,
            clip: self.clip,
            delta: self.delta,
            local_steps: self.local_steps,
            rounds: self.rounds,
            client_prob: self.client_prob,
            alpha_grid: alpha_grid_to(self.alpha_max),
            threat: parse_threat(&self.threat)?,
        };
        params.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScfSection {
    #[serde(default = "default_q_floor")]
    pub q_floor: f64,
    #[serde(default = "default_geometric_points")]
    pub geometric_points: usize,
    #[serde(default = "default_linear_points")]
    pub linear_points: usize,
    #[serde(default = "default_binary_search_tol")]
    pub binary_search_tol: f64,
}

fn default_q_floor() -> f64 {
    1e-3
}

fn default_geometric_points() -> usize {
    50
}

fn default_linear_points() -> usize {
    50
}

fn default_binary_search_tol() -> f64 {
    1e-4
}

impl Default for ScfSection {
    fn default() -> Self {
        Self {
            q_floor: default_q_floor(),
            geometric_points: default_geometric_points(),
            linear_points: default_linear_points(),
            binary_search_tol: default_binary_search_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesSection {
    /// Sampling probabilities for the per-q RDP/DP curve dumps.
    #[serde(default = "default_curve_qs")]
    pub q_list: Vec<f64>,
    /// Noise multipliers for the ε*(q) sweep; defaults to the mechanism σ.
    #[serde(default)]
    pub sigma_sweep: Vec<f64>,
}

fn default_curve_qs() -> Vec<f64> {
    vec![0.01, 0.1, 0.5, 1.0]
}

impl Default for CurvesSection {
    fn default() -> Self {
        Self {
            q_list: default_curve_qs(),
            sigma_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetsSection {
    pub kind: String,
    pub levels: Option<[f64; 3]>,
    pub means: Option<[f64; 3]>,
    pub spreads: Option<[f64; 3]>,
    #[serde(default = "default_spread_kind")]
    pub spread_kind: String,
    pub weights: Option<[f64; 3]>,
    pub shape: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Per-label budgets keyed by class id.
    pub labels: Option<BTreeMap<String, f64>>,
}

fn default_spread_kind() -> String {
    "variance".into()
}

impl BudgetsSection {
    pub fn to_spec(&self) -> Result<DistSpec> {
        let missing = |field: &str| Error::Config(format!("budgets.{field} is required for kind '{}'", self.kind));
        let spec = match self.kind.as_str() {
            "three_levels" => DistSpec::ThreeLevels {
                levels: self.levels.ok_or_else(|| missing("levels"))?,
                weights: self.weights.ok_or_else(|| missing("weights"))?,
            },
            "pareto" => DistSpec::BoundedPareto {
                shape: self.shape.ok_or_else(|| missing("shape"))?,
                lower: self.lower.ok_or_else(|| missing("lower"))?,
                upper: self.upper.ok_or_else(|| missing("upper"))?,
            },
            "mix_gauss" => DistSpec::BoundedMixGauss {
                means: self.means.ok_or_else(|| missing("means"))?,
                spreads: self.spreads.ok_or_else(|| missing("spreads"))?,
                spread_kind: match self.spread_kind.as_str() {
                    "variance" => SpreadKind::Variance,
                    "stddev" => SpreadKind::StdDev,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown spread_kind '{other}' (expected variance or stddev)"
                        )))
                    }
                },
                weights: self.weights.ok_or_else(|| missing("weights"))?,
                lower: self.lower.ok_or_else(|| missing("lower"))?,
                upper: self.upper.ok_or_else(|| missing("upper"))?,
            },
            "per_label" => {
                let labels = self.labels.as_ref().ok_or_else(|| missing("labels"))?;
                let mut budgets = BTreeMap::new();
                for (key, &eps) in labels {
                    let class: u32 = key
                        .parse()
                        .map_err(|_| Error::Config(format!("budgets.labels key '{key}' is not a class id")))?;
                    budgets.insert(class, eps);
                }
                DistSpec::PerLabel { budgets }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown budgets.kind '{other}' (expected three_levels, pareto, mix_gauss, per_label)"
                )))
            }
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: String,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_records_per_client")]
    pub records_per_client: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// CSV mode: one file per client.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// Optional repartitioning of a pooled CSV: "iid" or "non_iid".
    pub partition: Option<String>,
}

fn default_clients() -> usize {
    10
}

fn default_records_per_client() -> usize {
    1000
}

fn default_features() -> usize {
    10
}

fn default_classes() -> usize {
    2
}

fn default_separation() -> f64 {
    4.0
}

fn default_train_fraction() -> f64 {
    0.66
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub learning_rate: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
    /// Worker threads for parallel client updates; 0 picks the default.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_modes() -> Vec<String> {
    vec!["rpdp".into(), "minimum".into(), "dropout".into(), "privacy_free".into()]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_eval_every() -> u32 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunSection {
    pub fn parse_modes(&self) -> Result<Vec<Mode>> {
        if self.modes.is_empty() {
            return Err(Error::Config("run.modes must not be empty".into()));
        }
        self.modes.iter().map(|m| Mode::parse(m)).collect()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        self.mechanism.to_params()?;
        if !(self.scf.q_floor > 0.0 && self.scf.q_floor < 0.1) {
            return Err(Error::Config(format!(
                "scf.q_floor must lie in (0, 0.1), got {}",
                self.scf.q_floor
            )));
        }
        if self.scf.binary_search_tol <= 0.0 || self.scf.binary_search_tol.is_nan() {
            return Err(Error::Config("scf.binary_search_tol must be positive".into()));
        }
        if self.curves.q_list.is_empty()
            || self.curves.q_list.iter().any(|q| *q <= 0.0 || *q > 1.0 || q.is_nan())
        {
            return Err(Error::Config("curves.q_list must be non-empty with values in (0, 1]".into()));
        }
        if self.curves.sigma_sweep.iter().any(|s| *s <= 0.0 || s.is_nan()) {
            return Err(Error::Config("curves.sigma_sweep values must be positive".into()));
        }
        if let Some(budgets) = &self.budgets {
            budgets.to_spec()?;
        }
        if let Some(ds) = &self.dataset {
            match ds.kind.as_str() {
                "synthetic" => {
                    if ds.clients == 0 || ds.records_per_client < 2 || ds.features == 0 || ds.classes < 2 {
                        return Err(Error::Config("dataset counts too small".into()));
                    }
                }
                "csv" => {
                    if ds.paths.is_empty() {
                        return Err(Error::Config("dataset.paths must list at least one CSV".into()));
                    }
                    if let Some(p) = &ds.partition {
                        if p != "iid" && p != "non_iid" {
                            return Err(Error::Config(format!(
                                "unknown partition '{p}' (expected iid or non_iid)"
                            )));
                        }
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown dataset.kind '{other}' (expected synthetic or csv)"
                    )))
                }
            }
            if !(ds.train_fraction > 0.0 && ds.train_fraction < 1.0) {
                return Err(Error::Config("dataset.train_fraction must lie in (0, 1)".into()));
            }
        }
        if let Some(run) = &self.run {
            run.parse_modes()?;
            if run.seeds.is_empty() {
                return Err(Error::Config("run.seeds must not be empty".into()));
            }
            if run.learning_rate <= 0.0 || run.learning_rate.is_nan() {
                return Err(Error::Config("run.learning_rate must be positive".into()));
            }
            if run.eval_every == 0 {
                return Err(Error::Config("run.eval_every must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [mechanism]
        sigma = 1.0
        delta = 1e-3
        local_steps = 5
        rounds = 20
        client_prob = 0.5
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let params = cfg.mechanism.to_params().unwrap();
        assert_eq!(params.alpha_grid.last(), Some(&64));
        assert_eq!(params.threat, Threat::ClientOrThirdParty);
        assert_eq!(cfg.scf.q_floor, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nnot_a_section = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("sigma = 1.0", "sigma = 1.0\nsneaky = true");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_delta_is_a_config_error() {
        let text = MINIMAL.replace("delta = 1e-3", "delta = 2.0");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn budgets_sections_map_to_specs() {
        let text = format!(
            "{MINIMAL}\n[budgets]\nkind = \"mix_gauss\"\nmeans = [0.1, 1.0, 5.0]\nspreads = [0.01, 0.05, 0.5]\nweights = [0.7, 0.2, 0.1]\nlower = 0.1\nupper = 10.0\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let spec = cfg.budgets.unwrap().to_spec().unwrap();
        assert!(matches!(spec, DistSpec::BoundedMixGauss { .. }));

        let text = format!(
            "{MINIMAL}\n[budgets]\nkind = \"per_label\"\n[budgets.labels]\n\"0\" = 0.5\n\"1\" = 0.05\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.budgets.unwrap().to_spec().unwrap(), DistSpec::PerLabel { .. }));
    }

    #[test]
    fn run_modes_parse() {
        let text = format!(
            "{MINIMAL}\n[run]\nlearning_rate = 0.5\nmodes = [\"rpdp\", \"privacy_free\"]\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let modes = cfg.run.unwrap().parse_modes().unwrap();
        assert_eq!(modes, vec![Mode::Rpdp, Mode::PrivacyFree]);

        let text = format!("{MINIMAL}\n[run]\nlearning_rate = 0.5\nmodes = [\"bogus\"]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
