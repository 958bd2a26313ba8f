//! Outcome drift for one group and replay of a frozen cohort under saved
//! model states.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ExperimentLog, PolicyKind};
use crate::applicant::{Applicant, Population, PopulationSpec};
use crate::error::{Error, Result};
use crate::glm::BonusParams;
use crate::policy::{select_top_k, sl_policy, ucb_policy, PolicyScore, ScoringPolicy};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftDirection {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSchedule {
    pub target_group: String,
    pub direction: DriftDirection,
    /// First and last arrival round of the ramp, inclusive.
    pub start_round: usize,
    pub end_round: usize,
    /// Defaults to 1 for an increase and 0 for a decrease.
    #[serde(default)]
    pub terminal_mean: Option<f64>,
}

impl DriftSchedule {
    pub fn terminal(&self) -> f64 {
        self.terminal_mean.unwrap_or(match self.direction {
            DriftDirection::Increase => 1.0,
            DriftDirection::Decrease => 0.0,
        })
    }

    pub fn validate(&self, spec: &PopulationSpec) -> Result<()> {
        self.validate_groups(&spec.group_names())
    }

    fn validate_groups(&self, groups: &[String]) -> Result<()> {
        if self.start_round >= self.end_round {
            return Err(Error::Config(format!(
                "drift start_round {} must precede end_round {}",
                self.start_round, self.end_round
            )));
        }
        if !groups.contains(&self.target_group) {
            return Err(Error::Config(format!("drift target group {:?} does not exist", self.target_group)));
        }
        if !(0.0..=1.0).contains(&self.terminal()) {
            return Err(Error::Config("drift terminal_mean must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Target mean at round `t` given the group's baseline.
    pub fn mean_at(&self, baseline: f64, t: usize) -> f64 {
        let span = (self.end_round - self.start_round) as f64;
        let frac = (t.clamp(self.start_round, self.end_round) - self.start_round) as f64 / span;
        baseline + (self.terminal() - baseline) * frac
    }
}

/// Redraw the outcome of every target-group applicant arriving inside the
/// ramp, interviewed or not. The baseline is the group's realized mean over
/// the ramp before the redraw. Offers keep their non-hire component.
pub fn apply_drift(pop: &mut Population, schedule: &DriftSchedule, seed: u64) -> Result<()> {
    schedule.validate_groups(&pop.groups)?;
    let g = pop.groups.iter().position(|n| *n == schedule.target_group).expect("validated");
    let in_window =
        |a: &Applicant| a.group == g && (schedule.start_round..=schedule.end_round).contains(&a.arrival_round);

    let (sum, count) = pop
        .applicants
        .iter()
        .filter(|a| in_window(a))
        .fold((0usize, 0usize), |(s, c), a| (s + usize::from(a.potential_outcome), c + 1));
    if count == 0 {
        return Ok(());
    }
    let baseline = sum as f64 / count as f64;
    let mut rng = rng_for(seed, "drift", g as u64);
    for a in pop.applicants.iter_mut().filter(|a| in_window(a)) {
        let extra_offer = a.offered && !a.potential_outcome;
        a.potential_outcome = rng.random_bool(schedule.mean_at(baseline, a.arrival_round));
        a.offered = a.potential_outcome || extra_offer;
    }
    Ok(())
}

/// One checkpoint of a cohort replay.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRow {
    /// Analysis-round index of the checkpoint.
    pub checkpoint: usize,
    pub scores: Vec<PolicyScore>,
    /// Group shares of the top-k by full score.
    pub share_by_score: Vec<f64>,
    /// Group shares of the top-k by belief alone.
    pub share_by_belief: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortReplay {
    pub policy: String,
    pub k: usize,
    pub rows: Vec<CohortRow>,
}

impl CohortReplay {
    /// First checkpoint at which the by-score share of `group` reaches `level`.
    pub fn first_reaching(&self, group: usize, level: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.share_by_score[group] >= level).map(|r| r.checkpoint)
    }
}

fn group_shares(selected: &[u64], cohort: &[Applicant], n_groups: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_groups];
    for id in selected {
        let a = cohort.iter().find(|a| a.id == *id).expect("selected ids come from the cohort");
        counts[a.group] += 1;
    }
    let k = selected.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / k).collect()
}

/// Score a fixed cohort under the model state of `policy` at each listed
/// checkpoint and select the top `k` by full score and by belief.
pub fn score_evaluation_cohort(
    log: &ExperimentLog,
    policy: usize,
    cohort: &[Applicant],
    checkpoints: &[usize],
    k: usize,
) -> Result<CohortReplay> {
    let plog = log
        .policies
        .get(policy)
        .ok_or_else(|| Error::Config(format!("policy index {policy} out of range")))?;
    if k == 0 || k > cohort.len() {
        return Err(Error::CapacityExceeded { k, n: cohort.len() });
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &c in checkpoints {
        let cp = log.checkpoint(policy, c)?;
        let scores = match plog.spec.kind {
            PolicyKind::Ucb => {
                let state = cp.precision.as_ref().ok_or_else(|| Error::MissingCheckpoint {
                    policy: plog.spec.name.clone(),
                    round: c,
                })?;
                ucb_policy(&cp.model, state, BonusParams { alpha: plog.spec.alpha }, &plog.mask).score_all(cohort)?
            }
            _ => sl_policy(&cp.model, &plog.mask).score_all(cohort)?,
        };
        let by_score = select_top_k(scores.clone(), k)?;
        let beliefs: Vec<PolicyScore> = scores.iter().map(|s| PolicyScore { score: s.belief, ..*s }).collect();
        let by_belief = select_top_k(beliefs, k)?;
        rows.push(CohortRow {
            checkpoint: c,
            share_by_score: group_shares(&by_score.selected, cohort, log.n_groups),
            share_by_belief: group_shares(&by_belief.selected, cohort, log.n_groups),
            scores,
        });
    }
    Ok(CohortReplay { policy: plog.spec.name.clone(), k, rows })
}
