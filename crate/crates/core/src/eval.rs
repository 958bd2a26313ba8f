//! Off-policy yield estimates and descriptive reports over experiment logs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::applicant::{Applicant, OutcomeLabel};
use crate::error::{Error, Result};
use crate::glm::{top_k_order, FittedGLM};
use crate::sim::ExperimentLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    HorvitzThompson,
    #[default]
    Hajek,
}

/// One human-interviewed applicant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpwObservation {
    pub outcome: bool,
    pub ml_selected: bool,
    /// Estimated `p(I = 1 | x)`.
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpwEstimate {
    pub point: f64,
    pub normalization: Normalization,
    /// Weights `1 / p` over the interviewed, ML-selected applicants.
    pub weight_min: f64,
    pub weight_max: f64,
    pub ess: f64,
    pub clipped_count: usize,
    /// Interviewed applicants the ML policy also selected.
    pub n_overlap: usize,
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Weighted mean of outcomes; any positive rescaling of the weights leaves it unchanged.
pub fn hajek_mean(weights: &[f64], outcomes: &[bool]) -> Result<f64> {
    if weights.len() != outcomes.len() {
        return Err(Error::Dimension { expected: weights.len(), got: outcomes.len() });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("weights sum to zero".into()));
    }
    let hits: f64 = weights.iter().zip(outcomes).filter(|(_, &y)| y).map(|(w, _)| w).sum();
    Ok(hits / total)
}

/// Yield of an ML policy estimated from the human-interviewed sample.
///
/// Horvitz-Thompson: `(n_int / n_ml) * mean over interviewed of 1{ml} Y / p`.
/// Hajek: `sum 1{ml} Y / p` over `sum 1{ml} / p`. Propensities are clipped
/// below at `clip`.
pub fn ipw_yield(
    interviewed: &[IpwObservation],
    n_interviewed: usize,
    n_ml_selected: usize,
    normalization: Normalization,
    clip: f64,
) -> Result<IpwEstimate> {
    if n_interviewed == 0 || n_ml_selected == 0 {
        return Err(Error::Config("interviewed and ML-selected counts must be positive".into()));
    }
    if !(0.0..1.0).contains(&clip) {
        return Err(Error::Config(format!("clip must lie in [0, 1), got {clip}")));
    }
    if let Some(o) = interviewed.iter().find(|o| !(o.propensity > 0.0 && o.propensity <= 1.0)) {
        return Err(Error::Config(format!("propensity {} outside (0, 1]", o.propensity)));
    }
    let mut clipped_count = 0;
    let mut weights = Vec::new();
    let mut outcomes = Vec::new();
    for o in interviewed.iter().filter(|o| o.ml_selected) {
        let p = if o.propensity < clip {
            clipped_count += 1;
            clip
        } else {
            o.propensity
        };
        weights.push(1.0 / p);
        outcomes.push(o.outcome);
    }
    if weights.is_empty() {
        return Err(Error::Undefined("no interviewed applicant was selected by the policy".into()));
    }
    let point = match normalization {
        Normalization::Hajek => hajek_mean(&weights, &outcomes)?,
        Normalization::HorvitzThompson => {
            let sum: f64 = weights.iter().zip(&outcomes).filter(|(_, &y)| y).map(|(w, _)| w).sum();
            (n_interviewed as f64 / n_ml_selected as f64) * sum / interviewed.len() as f64
        }
    };
    Ok(IpwEstimate {
        point,
        normalization,
        weight_min: weights.iter().copied().fold(f64::INFINITY, f64::min),
        weight_max: weights.iter().copied().fold(0.0, f64::max),
        ess: effective_sample_size(&weights),
        clipped_count,
        n_overlap: weights.len(),
    })
}

pub const SUPPORT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    /// Counts over `[j/20, (j+1)/20)`, the last bin closed.
    pub bins: [usize; SUPPORT_BINS],
    pub below: usize,
    pub above: usize,
}

impl SupportReport {
    pub fn flagged(&self) -> usize {
        self.below + self.above
    }
}

/// Histogram of propensities with counts below 0.01 and above 0.99.
pub fn common_support(propensities: &[f64]) -> SupportReport {
    let mut bins = [0usize; SUPPORT_BINS];
    let (mut below, mut above) = (0, 0);
    for &p in propensities {
        let b = ((p * SUPPORT_BINS as f64).floor().max(0.0) as usize).min(SUPPORT_BINS - 1);
        bins[b] += 1;
        below += usize::from(p < 0.01);
        above += usize::from(p > 0.99);
    }
    SupportReport { bins, below, above }
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementRow {
    pub quantile: f64,
    /// Items selected by each score.
    pub k: usize,
    /// `|A and B| / k`.
    pub agree_share: f64,
    pub n_both: usize,
    pub n_a_only: usize,
    pub n_b_only: usize,
    /// Mean label per cell; absent for an empty cell.
    pub yield_both: Option<f64>,
    pub yield_a_only: Option<f64>,
    pub yield_b_only: Option<f64>,
    /// The cut fell inside a run of equal scores and was resolved by position.
    pub tie_fallback: bool,
}

fn cut_is_tied(scores: &[f64], order: &[usize], k: usize) -> bool {
    k < order.len() && scores[order[k - 1]] == scores[order[k]]
}

fn cell_yield(members: &[usize], labels: &[bool]) -> Option<f64> {
    if members.is_empty() {
        None
    } else {
        Some(members.iter().filter(|&&i| labels[i]).count() as f64 / members.len() as f64)
    }
}

/// Compare the top fraction selected by two scores over the same items.
/// Each quantile `q` selects `round(q * n)` items (at least one).
pub fn agreement_table(scores_a: &[f64], scores_b: &[f64], labels: &[bool], quantiles: &[f64]) -> Result<Vec<AgreementRow>> {
    let n = scores_a.len();
    if scores_b.len() != n || labels.len() != n {
        return Err(Error::Dimension { expected: n, got: scores_b.len().min(labels.len()) });
    }
    if n < 4 {
        return Err(Error::TooFewRows { need: 4, have: n });
    }
    let order_a = top_k_order(scores_a);
    let order_b = top_k_order(scores_b);
    quantiles
        .iter()
        .map(|&q| {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("quantile {q} outside (0, 1]")));
            }
            let k = ((q * n as f64).round() as usize).clamp(1, n);
            let mut in_a = vec![false; n];
            let mut in_b = vec![false; n];
            order_a[..k].iter().for_each(|&i| in_a[i] = true);
            order_b[..k].iter().for_each(|&i| in_b[i] = true);
            let both: Vec<usize> = (0..n).filter(|&i| in_a[i] && in_b[i]).collect();
            let a_only: Vec<usize> = (0..n).filter(|&i| in_a[i] && !in_b[i]).collect();
            let b_only: Vec<usize> = (0..n).filter(|&i| !in_a[i] && in_b[i]).collect();
            Ok(AgreementRow {
                quantile: q,
                k,
                agree_share: both.len() as f64 / k as f64,
                n_both: both.len(),
                n_a_only: a_only.len(),
                n_b_only: b_only.len(),
                yield_both: cell_yield(&both, labels),
                yield_a_only: cell_yield(&a_only, labels),
                yield_b_only: cell_yield(&b_only, labels),
                tie_fallback: cut_is_tied(scores_a, &order_a, k) || cut_is_tied(scores_b, &order_b, k),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionRow {
    pub policy: String,
    pub n_selected: usize,
    pub shares: Vec<f64>,
    /// `shares - pool shares`.
    pub difference: Vec<f64>,
}

fn shares_of(groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_groups];
    for &g in groups {
        counts[g] += 1;
    }
    let n = groups.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Group shares of each policy's selections next to the pool shares.
pub fn composition_report(selected: &[(String, Vec<usize>)], pool: &[usize], n_groups: usize) -> Result<Vec<CompositionRow>> {
    if let Some(&g) = pool.iter().chain(selected.iter().flat_map(|(_, s)| s.iter())).find(|&&g| g >= n_groups) {
        return Err(Error::Config(format!("group index {g} out of range")));
    }
    let pool_shares = shares_of(pool, n_groups);
    Ok(selected
        .iter()
        .map(|(name, groups)| {
            let shares = shares_of(groups, n_groups);
            let difference = shares.iter().zip(&pool_shares).map(|(s, p)| s - p).collect();
            CompositionRow { policy: name.clone(), n_selected: groups.len(), shares, difference }
        })
        .collect())
}

/// Where IPW weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensitySource {
    /// The fitted model of the human interview decision.
    #[default]
    Estimated,
    /// The generator's true interview probability.
    GroundTruth,
}

/// `p(I = 1 | x)` for each applicant.
pub fn propensities(applicants: &[Applicant], human_model: &FittedGLM, source: PropensitySource) -> Result<Vec<f64>> {
    applicants
        .iter()
        .map(|a| match source {
            PropensitySource::Estimated => human_model.predict_probability(&a.features),
            PropensitySource::GroundTruth => a
                .true_propensity
                .ok_or_else(|| Error::Config(format!("applicant {} has no ground-truth propensity", a.id))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct YieldPoint {
    pub round: usize,
    pub policy: String,
    /// IPW yield pooled over the analysis period through this round; absent
    /// while no interviewed applicant has been selected.
    pub cumulative_ipw: Option<f64>,
    /// Mean outcome among human interviewees through this round.
    pub cumulative_human: Option<f64>,
    /// Mean ground-truth outcome of everyone the policy selected so far.
    pub cumulative_oracle: f64,
    /// Group shares of the policy's selections over the trailing window.
    pub rolling_shares: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YieldOptions {
    pub normalization: Normalization,
    pub clip: f64,
    /// Rounds in the rolling share window.
    pub window: usize,
}

impl Default for YieldOptions {
    fn default() -> Self {
        Self { normalization: Normalization::Hajek, clip: 0.01, window: 10 }
    }
}

/// What a policy selected in each analysis round.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHistory {
    pub name: String,
    /// `(arrival round, selected ids)` in round order.
    pub rounds: Vec<(usize, Vec<u64>)>,
}

impl PolicyHistory {
    pub fn selected_ids(&self) -> Vec<u64> {
        self.rounds.iter().flat_map(|(_, ids)| ids.iter().copied()).collect()
    }
}

/// The parts of an experiment the evaluation reports need; rebuilt from a
/// log in memory or from exported selections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionHistory {
    pub outcome_label: OutcomeLabel,
    pub first_round: usize,
    pub analysis_rounds: usize,
    pub n_groups: usize,
    pub policies: Vec<PolicyHistory>,
}

impl SelectionHistory {
    pub fn from_log(log: &ExperimentLog) -> Self {
        Self {
            outcome_label: log.outcome_label,
            first_round: log.first_analysis_round(),
            analysis_rounds: log.analysis_rounds,
            n_groups: log.n_groups,
            policies: log
                .policies
                .iter()
                .enumerate()
                .map(|(pi, p)| PolicyHistory {
                    name: p.spec.name.clone(),
                    rounds: log.records_for(pi).map(|r| (r.round, r.selection.selected.clone())).collect(),
                })
                .collect(),
        }
    }

    fn analysis_range(&self) -> std::ops::Range<usize> {
        self.first_round..self.first_round + self.analysis_rounds
    }
}

/// Index applicants by id.
pub fn id_index(applicants: &[Applicant]) -> HashMap<u64, usize> {
    applicants.iter().enumerate().map(|(i, a)| (a.id, i)).collect()
}

/// Interviewed applicants of the given arrival rounds as IPW observations.
fn observations(
    applicants: &[Applicant],
    props: &[f64],
    selected: &std::collections::HashSet<u64>,
    label: OutcomeLabel,
    rounds: std::ops::Range<usize>,
) -> Vec<IpwObservation> {
    applicants
        .iter()
        .zip(props)
        .filter(|(a, _)| a.human_interviewed && rounds.contains(&a.arrival_round))
        .map(|(a, &p)| IpwObservation { outcome: a.outcome(label), ml_selected: selected.contains(&a.id), propensity: p })
        .collect()
}

/// IPW yield of `policy` pooled over its whole analysis period.
pub fn policy_ipw(
    history: &SelectionHistory,
    policy: usize,
    applicants: &[Applicant],
    props: &[f64],
    opts: &YieldOptions,
) -> Result<IpwEstimate> {
    let selected: std::collections::HashSet<u64> = history.policies[policy].selected_ids().into_iter().collect();
    let obs = observations(applicants, props, &selected, history.outcome_label, history.analysis_range());
    ipw_yield(&obs, obs.len(), selected.len(), opts.normalization, opts.clip)
}

/// Realized yield of the human screen over the analysis period.
pub fn human_realized_yield(history: &SelectionHistory, applicants: &[Applicant]) -> Result<f64> {
    let range = history.analysis_range();
    let (hits, n) = applicants
        .iter()
        .filter(|a| a.human_interviewed && range.contains(&a.arrival_round))
        .fold((0usize, 0usize), |(h, n), a| (h + usize::from(a.outcome(history.outcome_label)), n + 1));
    if n == 0 {
        return Err(Error::Undefined("no human interviews in the analysis period".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Cumulative IPW, human and oracle yields plus rolling group shares, per
/// analysis round and policy. `props` is aligned with `applicants`.
pub fn yield_time_series(
    history: &SelectionHistory,
    applicants: &[Applicant],
    props: &[f64],
    opts: &YieldOptions,
) -> Result<Vec<YieldPoint>> {
    if props.len() != applicants.len() {
        return Err(Error::Dimension { expected: applicants.len(), got: props.len() });
    }
    if opts.window == 0 {
        return Err(Error::Config("rolling window must be positive".into()));
    }
    let label = history.outcome_label;
    let index = id_index(applicants);
    let start = history.first_round;

    let mut human_hits = 0usize;
    let mut human_n = 0usize;
    let mut human_by_round = Vec::with_capacity(history.analysis_rounds);
    for r in 0..history.analysis_rounds {
        for a in applicants.iter().filter(|a| a.arrival_round == start + r && a.human_interviewed) {
            human_n += 1;
            human_hits += usize::from(a.outcome(label));
        }
        human_by_round.push((human_hits, human_n));
    }

    let mut out = Vec::new();
    for ph in &history.policies {
        let mut selected = std::collections::HashSet::new();
        let mut oracle_hits = 0usize;
        let mut window_groups: Vec<Vec<usize>> = Vec::with_capacity(ph.rounds.len());
        for (r, (round, ids)) in ph.rounds.iter().enumerate() {
            let mut groups = Vec::with_capacity(ids.len());
            for id in ids {
                let a = &applicants[*index.get(id).ok_or_else(|| Error::Config(format!("unknown applicant id {id}")))?];
                selected.insert(*id);
                oracle_hits += usize::from(a.outcome(label));
                groups.push(a.group);
            }
            window_groups.push(groups);
            let obs = observations(applicants, props, &selected, label, start..round + 1);
            let cumulative_ipw = match ipw_yield(&obs, obs.len().max(1), selected.len().max(1), opts.normalization, opts.clip) {
                Ok(e) => Some(e.point),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            let from = (r + 1).saturating_sub(opts.window);
            let window: Vec<usize> = window_groups[from..].iter().flatten().copied().collect();
            let (hh, hn) = human_by_round[round - start];
            out.push(YieldPoint {
                round: *round,
                policy: ph.name.clone(),
                cumulative_ipw,
                cumulative_human: (hn > 0).then(|| hh as f64 / hn as f64),
                cumulative_oracle: oracle_hits as f64 / selected.len().max(1) as f64,
                rolling_shares: shares_of(&window, history.n_groups),
            });
        }
    }
    Ok(out)
}
