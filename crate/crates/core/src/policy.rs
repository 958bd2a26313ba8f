//! Scoring policies and capacity-constrained selection.
//!
//! Every policy turns an applicant into a [`PolicyScore`]; selection is a
//! separate top-k (or quota) reduction with ties broken by ascending
//! applicant id.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::applicant::{Applicant, FeatureLayout, OutcomeLabel, TrainingRow, TrainingSet};
use crate::error::{Error, Result};
use crate::glm::{exploration_bonus, fit_l1_logistic, BonusParams, FitOptions, FittedGLM, PrecisionState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub applicant_id: u64,
    pub score: f64,
    /// Predicted outcome probability alone.
    pub belief: f64,
    /// Exploration bonus before the `alpha` weight; zero for non-UCB policies.
    pub bonus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected ids in rank order.
    pub selected: Vec<u64>,
    pub scores: Vec<PolicyScore>,
    /// Candidates sharing the cutoff score when the cutoff splits a tie.
    pub tie_break_events: usize,
}

impl SelectionResult {
    pub fn is_selected(&self, id: u64) -> bool {
        self.selected.contains(&id)
    }
}

fn rank_order(a: &PolicyScore, b: &PolicyScore) -> Ordering {
    match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.applicant_id.cmp(&b.applicant_id),
        o => o,
    }
}

fn cutoff_ties(sorted: &[PolicyScore], k: usize) -> usize {
    if k == 0 || k >= sorted.len() || sorted[k - 1].score != sorted[k].score {
        return 0;
    }
    let cut = sorted[k].score;
    sorted.iter().filter(|s| s.score == cut).count()
}

/// Pick the `k` highest scores; equal scores go to the lower applicant id.
pub fn select_top_k(scores: Vec<PolicyScore>, k: usize) -> Result<SelectionResult> {
    if k > scores.len() {
        return Err(Error::CapacityExceeded { k, n: scores.len() });
    }
    let mut sorted = scores.clone();
    sorted.sort_by(rank_order);
    let tie_break_events = cutoff_ties(&sorted, k);
    Ok(SelectionResult { selected: sorted[..k].iter().map(|s| s.applicant_id).collect(), scores, tie_break_events })
}

/// Anything that can score an applicant.
pub trait ScoringPolicy {
    fn score(&self, applicant: &Applicant) -> Result<PolicyScore>;

    fn score_all(&self, applicants: &[Applicant]) -> Result<Vec<PolicyScore>> {
        applicants.iter().map(|a| self.score(a)).collect()
    }
}

/// Column subset a policy sees. Blinding drops the protected block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMask {
    keep: Vec<usize>,
    full_dim: usize,
}

impl FeatureMask {
    pub fn all(dim: usize) -> Self {
        Self { keep: (0..dim).collect(), full_dim: dim }
    }

    /// Remove the group indicators and the female flag.
    pub fn blinded(layout: &FeatureLayout) -> Self {
        let protected = layout.protected_indices();
        let dim = layout.dim();
        Self { keep: (0..dim).filter(|j| !protected.contains(j)).collect(), full_dim: dim }
    }

    pub fn dim(&self) -> usize {
        self.keep.len()
    }

    pub fn is_identity(&self) -> bool {
        self.keep.len() == self.full_dim
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.keep.iter().map(|&j| x[j]).collect()
    }

    pub fn project_names(&self, names: &[String]) -> Vec<String> {
        self.keep.iter().map(|&j| names[j].clone()).collect()
    }

    /// Same rows with every feature vector projected.
    pub fn project_set(&self, data: &TrainingSet) -> TrainingSet {
        if self.is_identity() {
            return data.clone();
        }
        TrainingSet::from_rows(
            data.rows()
                .iter()
                .map(|r| TrainingRow { features: self.project(&r.features), ..r.clone() })
                .collect(),
        )
    }
}

/// Strip the protected block from a policy's training data and return the mask
/// to apply at scoring time.
pub fn blind(data: &TrainingSet, layout: &FeatureLayout) -> (TrainingSet, FeatureMask) {
    let mask = FeatureMask::blinded(layout);
    (mask.project_set(data), mask)
}

fn projected<'a>(mask: &FeatureMask, x: &'a [f64], buf: &'a mut Vec<f64>) -> &'a [f64] {
    if mask.is_identity() {
        x
    } else {
        *buf = mask.project(x);
        buf
    }
}

/// Exploitation-only score: the predicted probability.
#[derive(Debug, Clone, Copy)]
pub struct SlScorer<'a> {
    pub model: &'a FittedGLM,
    pub mask: &'a FeatureMask,
}

pub fn sl_policy<'a>(model: &'a FittedGLM, mask: &'a FeatureMask) -> SlScorer<'a> {
    SlScorer { model, mask }
}

impl ScoringPolicy for SlScorer<'_> {
    fn score(&self, a: &Applicant) -> Result<PolicyScore> {
        let mut buf = Vec::new();
        let belief = self.model.predict_probability(projected(self.mask, &a.features, &mut buf))?;
        Ok(PolicyScore { applicant_id: a.id, score: belief, belief, bonus: 0.0 })
    }
}

/// Predicted probability plus `alpha` times the exploration bonus.
#[derive(Debug, Clone, Copy)]
pub struct UcbScorer<'a> {
    pub model: &'a FittedGLM,
    pub state: &'a PrecisionState,
    pub params: BonusParams,
    pub mask: &'a FeatureMask,
}

pub fn ucb_policy<'a>(
    model: &'a FittedGLM,
    state: &'a PrecisionState,
    params: BonusParams,
    mask: &'a FeatureMask,
) -> UcbScorer<'a> {
    UcbScorer { model, state, params, mask }
}

impl ScoringPolicy for UcbScorer<'_> {
    fn score(&self, a: &Applicant) -> Result<PolicyScore> {
        let mut buf = Vec::new();
        let x = projected(self.mask, &a.features, &mut buf);
        let belief = self.model.predict_probability(x)?;
        let bonus = exploration_bonus(self.state, x)?;
        let score = if self.params.alpha == 0.0 { belief } else { belief + self.params.alpha * bonus };
        Ok(PolicyScore { applicant_id: a.id, score, belief, bonus })
    }
}

/// Static model of the human interview decision; its predictions double as
/// the propensity `p(I = 1 | X)`.
#[derive(Debug, Clone, Copy)]
pub struct HumanScorer<'a> {
    pub model: &'a FittedGLM,
}

pub fn human_policy(model: &FittedGLM) -> HumanScorer<'_> {
    HumanScorer { model }
}

impl ScoringPolicy for HumanScorer<'_> {
    fn score(&self, a: &Applicant) -> Result<PolicyScore> {
        let belief = self.model.predict_probability(&a.features)?;
        Ok(PolicyScore { applicant_id: a.id, score: belief, belief, bonus: 0.0 })
    }
}

/// Fit the interview-decision model on every applicant in `applicants`
/// (interviewed or not). The balanced fit is shifted back to the observed
/// interview rate so the output is a usable propensity.
pub fn fit_human_model(applicants: &[Applicant], opts: &FitOptions, seed: u64) -> Result<FittedGLM> {
    let data = TrainingSet::from_rows(
        applicants
            .iter()
            .map(|a| TrainingRow {
                applicant_id: a.id,
                features: a.features.clone(),
                label: a.human_interviewed,
                provenance: crate::applicant::Provenance::Initial,
            })
            .collect(),
    );
    let model = fit_l1_logistic(&data, opts, seed)?;
    if !opts.balance {
        return Ok(model);
    }
    let rate = data.positives() as f64 / data.len() as f64;
    Ok(model.prior_corrected(0.5, rate))
}

/// Fit an outcome model on the interviewed applicants only.
pub fn fit_outcome_model(
    applicants: &[Applicant],
    label: OutcomeLabel,
    opts: &FitOptions,
    seed: u64,
) -> Result<FittedGLM> {
    fit_l1_logistic(&TrainingSet::initial(applicants, label), opts, seed)
}

/// Largest-remainder apportionment of `k` seats over `shares`.
pub fn apportion(k: usize, shares: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = shares.iter().map(|s| s * k as f64).collect();
    allocate_seats(k, &targets, &vec![0; shares.len()], &vec![usize::MAX; shares.len()])
}

/// Hand out `k` seats one at a time to the group with the largest remaining
/// deficit `target - given - assigned`, skipping groups without candidates.
/// With nothing given yet this is exactly largest-remainder apportionment.
fn allocate_seats(k: usize, targets: &[f64], given: &[usize], available: &[usize]) -> Vec<usize> {
    let mut assigned = vec![0usize; targets.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for g in 0..targets.len() {
            if assigned[g] >= available[g] {
                continue;
            }
            let deficit = targets[g] - (given[g] + assigned[g]) as f64;
            let better = match best {
                None => true,
                Some(b) => deficit > targets[b] - (given[b] + assigned[b]) as f64,
            };
            if better {
                best = Some(g);
            }
        }
        match best {
            Some(g) => assigned[g] += 1,
            None => break,
        }
    }
    assigned
}

/// Quota bookkeeping over a window of arriving applicants. Seats owed to each
/// group are apportioned cumulatively within the window, so small per-round
/// capacities still honor the target shares window by window.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotaWindow {
    shares: Vec<f64>,
    window: usize,
    seen: usize,
    given: Vec<usize>,
}

impl QuotaWindow {
    pub fn new(shares: Vec<f64>, window: usize) -> Result<Self> {
        let total: f64 = shares.iter().sum();
        if shares.is_empty() || (total - 1.0).abs() > 1e-9 || shares.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(format!("quota shares must form a simplex (sum = {total})")));
        }
        if window == 0 {
            return Err(Error::Config("quota window must be positive".into()));
        }
        let n = shares.len();
        Ok(Self { shares, window, seen: 0, given: vec![0; n] })
    }

    /// Select `k` of `scores`, where `groups[i]` is the group of `scores[i]`.
    pub fn select(&mut self, scores: Vec<PolicyScore>, k: usize, groups: &[usize]) -> Result<SelectionResult> {
        if k > scores.len() {
            return Err(Error::CapacityExceeded { k, n: scores.len() });
        }
        if groups.len() != scores.len() {
            return Err(Error::Dimension { expected: scores.len(), got: groups.len() });
        }
        let n_groups = self.shares.len();
        if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::Config(format!("group index {g} has no quota share")));
        }
        let mut by_group: Vec<Vec<PolicyScore>> = vec![Vec::new(); n_groups];
        for (s, &g) in scores.iter().zip(groups) {
            by_group[g].push(*s);
        }
        for list in by_group.iter_mut() {
            list.sort_by(rank_order);
        }
        let available: Vec<usize> = by_group.iter().map(Vec::len).collect();
        let total_after = self.given.iter().sum::<usize>() + k;
        let targets: Vec<f64> = self.shares.iter().map(|s| s * total_after as f64).collect();
        let seats = allocate_seats(k, &targets, &self.given, &available);

        let mut chosen: Vec<PolicyScore> = Vec::with_capacity(k);
        let mut ties = 0;
        for g in 0..n_groups {
            chosen.extend_from_slice(&by_group[g][..seats[g]]);
            ties += cutoff_ties(&by_group[g], seats[g]);
            self.given[g] += seats[g];
        }
        chosen.sort_by(rank_order);

        self.seen += scores.len();
        if self.seen >= self.window {
            self.seen = 0;
            self.given.iter_mut().for_each(|c| *c = 0);
        }
        Ok(SelectionResult { selected: chosen.iter().map(|s| s.applicant_id).collect(), scores, tie_break_events: ties })
    }
}

/// One-shot quota selection: per-group seats by largest remainder of
/// `k * share`, filled by score within each group.
pub fn quota_select(scores: Vec<PolicyScore>, k: usize, groups: &[usize], shares: &[f64]) -> Result<SelectionResult> {
    QuotaWindow::new(shares.to_vec(), usize::MAX)?.select(scores, k, groups)
}
