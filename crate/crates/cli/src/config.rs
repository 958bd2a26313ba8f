//! Declarative run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use screening_core::applicant::RoundConfig;
use screening_core::eval::{Normalization, PropensitySource, YieldOptions, DEFAULT_QUANTILES};
use screening_core::glm::{FitOptions, Ridge};
use screening_core::iv::DEFAULT_MIN_CASELOAD;
use screening_core::scenario::Scenario;
use screening_core::sim::{ExperimentConfig, PolicyKind, PolicySpec, UpdateMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every random stream; `--seeds` replaces it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub scenario: Scenario,
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub iv: IvSection,
    #[serde(default)]
    pub replay: ReplaySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub ridge: Ridge,
    #[serde(default)]
    pub update_mode: UpdateMode,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<usize>,
}

fn default_checkpoint_every() -> usize {
    10
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            round: RoundConfig::default(),
            fit: FitOptions::default(),
            ridge: Ridge::default(),
            update_mode: UpdateMode::default(),
            checkpoint_every: default_checkpoint_every(),
            max_rounds: None,
        }
    }
}

impl ExperimentSection {
    pub fn to_config(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            round: self.round.clone(),
            fit: self.fit.clone(),
            ridge: self.ridge,
            update_mode: self.update_mode,
            checkpoint_every: self.checkpoint_every,
            max_rounds: self.max_rounds,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Rounds in the rolling composition window.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub propensity_source: PropensitySource,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
}

fn default_clip() -> f64 {
    YieldOptions::default().clip
}

fn default_window() -> usize {
    YieldOptions::default().window
}

fn default_quantiles() -> Vec<f64> {
    DEFAULT_QUANTILES.to_vec()
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            normalization: Normalization::default(),
            clip: default_clip(),
            window: default_window(),
            propensity_source: PropensitySource::default(),
            quantiles: default_quantiles(),
        }
    }
}

impl EvaluationSection {
    pub fn yield_options(&self) -> YieldOptions {
        YieldOptions { normalization: self.normalization, clip: self.clip, window: self.window }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvSection {
    #[serde(default = "default_min_caseload")]
    pub min_caseload: usize,
    /// Score cut for the complier split; the sample median when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complier_threshold: Option<f64>,
}

fn default_min_caseload() -> usize {
    DEFAULT_MIN_CASELOAD
}

impl Default for IvSection {
    fn default() -> Self {
        Self { min_caseload: default_min_caseload(), complier_threshold: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    /// Trailing rounds of the population held out as the scoring cohort.
    #[serde(default = "default_cohort_rounds")]
    pub cohort_rounds: usize,
    /// Cohort share selected at each checkpoint; the interview rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_fraction: Option<f64>,
    #[serde(default = "one")]
    pub checkpoint_stride: usize,
    /// Share of the target group the replay summary tracks.
    #[serde(default = "default_level")]
    pub target_level: f64,
    #[serde(default)]
    pub write_scores: bool,
}

fn default_cohort_rounds() -> usize {
    20
}

fn one() -> usize {
    1
}

fn default_level() -> f64 {
    0.5
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self {
            cohort_rounds: default_cohort_rounds(),
            k_fraction: None,
            checkpoint_stride: 1,
            target_level: default_level(),
            write_scores: false,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: default_output_dir(),
            scenario: Scenario::reference().with_seed(0),
            experiment: ExperimentSection::default(),
            policies: vec![PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 1.96)],
            evaluation: EvaluationSection::default(),
            iv: IvSection::default(),
            replay: ReplaySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.scenario.population.seed != 0 {
            bail!("scenario.population.seed is not allowed; set the top-level seed");
        }
        self.scenario.validate()?;
        self.experiment.round.validate()?;
        self.experiment.fit.validate()?;
        if self.experiment.round.round_size != self.scenario.round_size {
            bail!(
                "experiment.round.round_size ({}) differs from scenario.round_size ({})",
                self.experiment.round.round_size,
                self.scenario.round_size
            );
        }
        if self.experiment.checkpoint_every == 0 {
            bail!("experiment.checkpoint_every must be positive");
        }
        if self.policies.is_empty() {
            bail!("at least one policy is required");
        }
        let mut names = BTreeSet::new();
        let groups = self.scenario.population.group_names();
        for p in &self.policies {
            if p.name == "human" {
                bail!("policy name \"human\" is reserved for the recorded human decisions");
            }
            if !names.insert(p.name.as_str()) {
                bail!("duplicate policy name {:?}", p.name);
            }
            if p.name.is_empty() || !p.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                bail!("policy name {:?} must be nonempty ASCII letters, digits, '-' or '_'", p.name);
            }
            if let Some(shares) = &p.quota_shares {
                if p.kind != PolicyKind::Quota {
                    bail!("policy {:?} sets quota_shares but is not a quota policy", p.name);
                }
                for g in shares.keys() {
                    if !groups.contains(g) {
                        bail!("policy {:?} references unknown group {g:?}", p.name);
                    }
                }
            }
        }
        let e = &self.evaluation;
        if !(0.0..1.0).contains(&e.clip) {
            bail!("evaluation.clip must lie in [0, 1)");
        }
        if e.window == 0 {
            bail!("evaluation.window must be positive");
        }
        if e.quantiles.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
            bail!("evaluation.quantiles must lie in (0, 1]");
        }
        let r = &self.replay;
        if r.cohort_rounds == 0 || r.checkpoint_stride == 0 {
            bail!("replay.cohort_rounds and replay.checkpoint_stride must be positive");
        }
        if let Some(f) = r.k_fraction {
            if !(f > 0.0 && f <= 1.0) {
                bail!("replay.k_fraction must lie in (0, 1]");
            }
        }
        if self.scenario.population.drift.is_some() && !r.checkpoint_stride.is_multiple_of(self.experiment.checkpoint_every) {
            bail!("replay.checkpoint_stride must be a multiple of experiment.checkpoint_every");
        }
        if !(0.0..=1.0).contains(&r.target_level) {
            bail!("replay.target_level must lie in [0, 1]");
        }
        Ok(())
    }

    /// Canonical serialization; the config hash is taken over this text.
    pub fn canonical(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("cannot serialize config")
    }

    pub fn hash(&self) -> anyhow::Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical()?.as_bytes())))
    }

    pub fn scenario_for(&self, seed: u64) -> Scenario {
        self.scenario.with_seed(seed)
    }
}
