//! Round-by-round selection loop under selective labels.
//!
//! The population is split into an initial training period and an analysis
//! period. Learners start from the interviewed applicants of the training
//! period; each analysis round they score the arrivals, select capacity, see
//! labels for the rows their update mode allows, and refit.

mod drift;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use drift::{apply_drift, score_evaluation_cohort, CohortReplay, CohortRow, DriftDirection, DriftSchedule};

use crate::applicant::{Applicant, OutcomeLabel, Population, Provenance, RoundConfig, TrainingRow, TrainingSet};
use crate::error::{Error, Result};
use crate::glm::{build_precision_state, exploration_bonus, fit_l1_logistic, BonusParams, FitOptions, FittedGLM, PrecisionState, Ridge};
use crate::policy::{
    fit_human_model, human_policy, select_top_k, sl_policy, ucb_policy, FeatureMask, PolicyScore, QuotaWindow,
    ScoringPolicy, SelectionResult,
};
use crate::rng::derive_seed;

/// Which selected rows reveal their label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Only rows the human also interviewed.
    #[default]
    Feasible,
    /// Every selected row.
    Live,
}

impl UpdateMode {
    fn reveals(self, a: &Applicant) -> bool {
        match self {
            UpdateMode::Feasible => a.human_interviewed,
            UpdateMode::Live => true,
        }
    }

    fn provenance(self) -> Provenance {
        match self {
            UpdateMode::Feasible => Provenance::FeasibleUpdate,
            UpdateMode::Live => Provenance::LiveUpdate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Sl,
    Ucb,
    /// Static model of the human interview decision.
    Human,
    /// SL scores with group seats fixed by apportionment.
    Quota,
}

fn default_alpha() -> f64 {
    BonusParams::default().alpha
}

fn default_window() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    pub kind: PolicyKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub blind: bool,
    /// Target share per group name; the pool shares when absent.
    #[serde(default)]
    pub quota_shares: Option<BTreeMap<String, f64>>,
    /// Applicants per quota window.
    #[serde(default = "default_window")]
    pub quota_window: usize,
}

impl PolicySpec {
    pub fn new(name: &str, kind: PolicyKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            alpha: default_alpha(),
            blind: false,
            quota_shares: None,
            quota_window: default_window(),
        }
    }

    pub fn sl(name: &str) -> Self {
        Self::new(name, PolicyKind::Sl)
    }

    pub fn ucb(name: &str, alpha: f64) -> Self {
        Self { alpha, ..Self::new(name, PolicyKind::Ucb) }
    }

    pub fn blinded(mut self) -> Self {
        self.blind = true;
        self
    }

    fn learns(&self) -> bool {
        !matches!(self.kind, PolicyKind::Human)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub round: RoundConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub ridge: Ridge,
    #[serde(default)]
    pub update_mode: UpdateMode,
    /// Keep model checkpoints every this many analysis rounds.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    /// Stop after this many analysis rounds.
    #[serde(default)]
    pub max_rounds: Option<usize>,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            round: RoundConfig::default(),
            fit: FitOptions::default(),
            ridge: Ridge::default(),
            update_mode: UpdateMode::Feasible,
            checkpoint_every: 1,
            max_rounds: None,
            seed,
        }
    }
}

/// Model state in force at the start of an analysis round.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub model: FittedGLM,
    pub precision: Option<PrecisionState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Absolute arrival round.
    pub round: usize,
    pub policy: usize,
    pub capacity: usize,
    pub selection: SelectionResult,
    pub appended: usize,
    pub training_size: usize,
    pub refit: bool,
    pub refit_error: Option<String>,
    pub penalty: f64,
}

impl RoundRecord {
    pub fn mean_bonus(&self) -> f64 {
        let s = &self.selection.scores;
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|p| p.bonus).sum::<f64>() / s.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLog {
    pub spec: PolicySpec,
    pub mask: FeatureMask,
    pub training: TrainingSet,
    /// Keyed by analysis-round index (0 = first analysis round); the entry at
    /// `analysis_rounds` is the final state.
    pub checkpoints: BTreeMap<usize, Checkpoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLog {
    pub feature_names: Vec<String>,
    pub n_groups: usize,
    pub train_rounds: usize,
    pub analysis_rounds: usize,
    pub outcome_label: OutcomeLabel,
    pub human_model: FittedGLM,
    pub policies: Vec<PolicyLog>,
    /// Ordered by round, then policy index.
    pub rounds: Vec<RoundRecord>,
    pub warnings: Vec<String>,
}

impl ExperimentLog {
    pub fn policy_index(&self, name: &str) -> Option<usize> {
        self.policies.iter().position(|p| p.spec.name == name)
    }

    pub fn records_for(&self, policy: usize) -> impl Iterator<Item = &RoundRecord> {
        self.rounds.iter().filter(move |r| r.policy == policy)
    }

    /// Every applicant id `policy` selected, in round order.
    pub fn selected_ids(&self, policy: usize) -> Vec<u64> {
        self.records_for(policy).flat_map(|r| r.selection.selected.iter().copied()).collect()
    }

    /// First arrival round of the analysis period.
    pub fn first_analysis_round(&self) -> usize {
        self.train_rounds
    }

    pub fn checkpoint(&self, policy: usize, analysis_round: usize) -> Result<&Checkpoint> {
        self.policies[policy].checkpoints.get(&analysis_round).ok_or_else(|| Error::MissingCheckpoint {
            policy: self.policies[policy].spec.name.clone(),
            round: analysis_round,
        })
    }
}

struct Learner {
    spec: PolicySpec,
    mask: FeatureMask,
    training: TrainingSet,
    model: FittedGLM,
    precision: Option<PrecisionState>,
    quota: Option<QuotaWindow>,
    checkpoints: BTreeMap<usize, Checkpoint>,
}

impl Learner {
    fn score(&self, applicants: &[Applicant], human: &FittedGLM) -> Result<Vec<PolicyScore>> {
        match self.spec.kind {
            PolicyKind::Sl | PolicyKind::Quota => sl_policy(&self.model, &self.mask).score_all(applicants),
            PolicyKind::Ucb => {
                let state = self.precision.as_ref().expect("UCB learners always carry a precision state");
                ucb_policy(&self.model, state, BonusParams { alpha: self.spec.alpha }, &self.mask).score_all(applicants)
            }
            PolicyKind::Human => human_policy(human).score_all(applicants),
        }
    }

    fn checkpoint(&mut self, analysis_round: usize) {
        self.checkpoints.insert(
            analysis_round,
            Checkpoint { round: analysis_round, model: self.model.clone(), precision: self.precision.clone() },
        );
    }
}

fn fit_model(data: &TrainingSet, mask: &FeatureMask, names: &[String], fit: &FitOptions, seed: u64) -> Result<FittedGLM> {
    let projected = mask.project_set(data);
    Ok(fit_l1_logistic(&projected, fit, seed)?.with_names(mask.project_names(names)))
}

fn fit_precision(data: &TrainingSet, mask: &FeatureMask, ridge: Ridge) -> Result<PrecisionState> {
    let rows: Vec<Vec<f64>> = data.rows().iter().map(|r| mask.project(&r.features)).collect();
    build_precision_state(rows.iter().map(Vec::as_slice), ridge)
}

/// Number of rounds in the initial training period.
pub fn training_rounds(pop: &Population, round: &RoundConfig) -> Result<usize> {
    let n_rounds = pop.n_rounds();
    let t = ((n_rounds as f64) * round.train_fraction).floor() as usize;
    if t == 0 || t >= n_rounds {
        return Err(Error::Config(format!(
            "train_fraction {} leaves no training or analysis rounds out of {n_rounds}",
            round.train_fraction
        )));
    }
    Ok(t)
}

fn resolve_quota(spec: &PolicySpec, pop: &Population) -> Result<QuotaWindow> {
    let shares = match &spec.quota_shares {
        None => pop.group_shares(),
        Some(map) => {
            for name in map.keys() {
                if !pop.groups.contains(name) {
                    return Err(Error::Config(format!("quota share for unknown group {name:?}")));
                }
            }
            pop.groups.iter().map(|g| map.get(g).copied().unwrap_or(0.0)).collect()
        }
    };
    QuotaWindow::new(shares, spec.quota_window)
}

/// Run every policy through the analysis period of `pop`.
pub fn run_experiment(pop: &Population, policies: &[PolicySpec], cfg: &ExperimentConfig) -> Result<ExperimentLog> {
    cfg.round.validate()?;
    cfg.fit.validate()?;
    if pop.round_size != cfg.round.round_size {
        return Err(Error::Config(format!(
            "population rounds hold {} applicants but round_size is {}",
            pop.round_size, cfg.round.round_size
        )));
    }
    if policies.is_empty() {
        return Err(Error::Config("no policies to run".into()));
    }
    let mut names = std::collections::HashSet::new();
    for p in policies {
        if !names.insert(p.name.as_str()) {
            return Err(Error::Config(format!("duplicate policy name {:?}", p.name)));
        }
        BonusParams { alpha: p.alpha }.validate()?;
    }
    if cfg.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint_every must be positive".into()));
    }
    if !pop.applicants.iter().any(|a| a.human_interviewed) {
        return Err(Error::Config("population has no human interview decisions".into()));
    }

    let label = cfg.round.outcome_label;
    let train_rounds = training_rounds(pop, &cfg.round)?;
    let mut analysis_rounds = pop.n_rounds() - train_rounds;
    if let Some(m) = cfg.max_rounds {
        analysis_rounds = analysis_rounds.min(m);
    }
    let split = (train_rounds * pop.round_size).min(pop.applicants.len());
    let prefix = &pop.applicants[..split];
    let feature_names = pop.feature_names();

    let human_model =
        fit_human_model(prefix, &cfg.fit, derive_seed(cfg.seed, "human", 0))?.with_names(feature_names.clone());
    let initial = TrainingSet::initial(prefix, label);

    let mut learners = Vec::with_capacity(policies.len());
    for spec in policies {
        let mask = if spec.blind { FeatureMask::blinded(&pop.layout) } else { FeatureMask::all(pop.dim()) };
        let (model, precision) = if spec.learns() {
            let model = fit_model(&initial, &mask, &feature_names, &cfg.fit, derive_seed(cfg.seed, "refit", 0))?;
            (model, Some(fit_precision(&initial, &mask, cfg.ridge)?))
        } else {
            (human_model.clone(), None)
        };
        let quota = match spec.kind {
            PolicyKind::Quota => Some(resolve_quota(spec, pop)?),
            _ => None,
        };
        learners.push(Learner {
            spec: spec.clone(),
            mask,
            training: initial.clone(),
            model,
            precision,
            quota,
            checkpoints: BTreeMap::new(),
        });
    }

    let mut rounds = Vec::with_capacity(analysis_rounds * policies.len());
    let mut warnings = Vec::new();
    for r in 0..analysis_rounds {
        let t = train_rounds + r;
        let arrivals = pop.round(t);
        let capacity = cfg.round.capacity_for(arrivals);
        let groups: Vec<usize> = arrivals.iter().map(|a| a.group).collect();
        for (pi, learner) in learners.iter_mut().enumerate() {
            if r % cfg.checkpoint_every == 0 {
                learner.checkpoint(r);
            }
            let scores = learner.score(arrivals, &human_model)?;
            let selection = match learner.quota.as_mut() {
                Some(q) => q.select(scores, capacity, &groups)?,
                None => select_top_k(scores, capacity)?,
            };

            let mut appended = 0;
            let mut refit = false;
            let mut refit_error = None;
            if learner.spec.learns() {
                for a in arrivals.iter().filter(|a| selection.is_selected(a.id)) {
                    if cfg.update_mode.reveals(a) {
                        learner.training.push(TrainingRow {
                            applicant_id: a.id,
                            features: a.features.clone(),
                            label: a.outcome(label),
                            provenance: cfg.update_mode.provenance(),
                        });
                        appended += 1;
                    }
                }
                if appended > 0 {
                    let seed = derive_seed(cfg.seed, "refit", (r + 1) as u64);
                    match fit_model(&learner.training, &learner.mask, &feature_names, &cfg.fit, seed) {
                        Ok(m) => {
                            learner.model = m;
                            refit = true;
                        }
                        Err(e @ (Error::SingleClass(_) | Error::TooFewRows { .. } | Error::Folds(_))) => {
                            let msg = format!("round {t}, policy {}: refit skipped: {e}", learner.spec.name);
                            log::warn!("{msg}");
                            warnings.push(msg);
                            refit_error = Some(e.to_string());
                        }
                        Err(e) => return Err(e),
                    }
                    learner.precision = Some(fit_precision(&learner.training, &learner.mask, cfg.ridge)?);
                }
            }
            rounds.push(RoundRecord {
                round: t,
                policy: pi,
                capacity,
                selection,
                appended,
                training_size: learner.training.len(),
                refit,
                refit_error,
                penalty: learner.model.penalty,
            });
        }
    }
    for learner in learners.iter_mut() {
        learner.checkpoint(analysis_rounds);
    }

    Ok(ExperimentLog {
        feature_names,
        n_groups: pop.groups.len(),
        train_rounds,
        analysis_rounds,
        outcome_label: label,
        human_model,
        policies: learners
            .into_iter()
            .map(|l| PolicyLog { spec: l.spec, mask: l.mask, training: l.training, checkpoints: l.checkpoints })
            .collect(),
        rounds,
        warnings,
    })
}

/// Exploration bonus of each applicant under a checkpoint's precision state.
pub fn checkpoint_bonuses(cp: &Checkpoint, mask: &FeatureMask, applicants: &[Applicant]) -> Result<Vec<f64>> {
    let state = cp.precision.as_ref().ok_or_else(|| Error::Config("checkpoint has no precision state".into()))?;
    applicants.iter().map(|a| exploration_bonus(state, &mask.project(&a.features))).collect()
}
