//! Applicants, synthetic populations, human screening and training sets.
//!
//! Feature layout of every applicant vector, in order:
//!
//! 1. one indicator per non-reference group (group 0 is the reference level),
//! 2. a female indicator,
//! 3. the continuous block, standardized to mean 0 / sd 1 over the population,
//! 4. the binary block.
//!
//! Blocks 1 and 2 form the protected block that blinding removes.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::logistic;
use crate::rng::rng_for;
use crate::sim::DriftSchedule;

/// Which realized outcome the learners are trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLabel {
    #[default]
    Hired,
    Offered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applicant {
    pub id: u64,
    pub features: Vec<f64>,
    /// Index into the population's group list.
    pub group: usize,
    pub female: bool,
    /// Hire-if-interviewed. Ground truth only; never shown to a policy directly.
    pub potential_outcome: bool,
    /// Offer-if-interviewed; every hire implies an offer.
    pub offered: bool,
    pub human_interviewed: bool,
    pub screener_id: u32,
    pub stratum: u32,
    pub arrival_round: usize,
    /// Latent quality term outside the feature vector.
    pub unobservable: f64,
    /// Ground-truth p(I = 1 | applicant), averaged over the screener draw.
    pub true_propensity: Option<f64>,
}

impl Applicant {
    pub fn outcome(&self, label: OutcomeLabel) -> bool {
        match label {
            OutcomeLabel::Hired => self.potential_outcome,
            OutcomeLabel::Offered => self.offered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub share: f64,
    pub female_rate: f64,
    /// Mean of the continuous block, before population-level standardization.
    pub continuous_mean: Vec<f64>,
    /// Covariance of the continuous block; identity when absent.
    #[serde(default)]
    pub continuous_cov: Option<Vec<Vec<f64>>>,
    pub binary_rates: Vec<f64>,
}

/// Block sizes of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_groups: usize,
    pub n_continuous: usize,
    pub n_binary: usize,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.n_groups.saturating_sub(1) + 1 + self.n_continuous + self.n_binary
    }

    /// Column indices of the group indicators plus the female flag.
    pub fn protected_indices(&self) -> Vec<usize> {
        (0..self.n_groups.saturating_sub(1) + 1).collect()
    }

    pub fn female_index(&self) -> usize {
        self.n_groups.saturating_sub(1)
    }

    pub fn continuous_offset(&self) -> usize {
        self.female_index() + 1
    }

    pub fn binary_offset(&self) -> usize {
        self.continuous_offset() + self.n_continuous
    }

    pub fn feature_names(&self, groups: &[String]) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for g in groups.iter().skip(1) {
            names.push(format!("group_{g}"));
        }
        names.push("female".to_string());
        names.extend((0..self.n_continuous).map(|j| format!("c{j}")));
        names.extend((0..self.n_binary).map(|j| format!("b{j}")));
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub groups: Vec<GroupSpec>,
    pub n_continuous: usize,
    pub n_binary: usize,
    /// Intercept first, then one coefficient per feature.
    pub true_theta: Vec<f64>,
    /// Weight of the unobservable term in the outcome index.
    #[serde(default)]
    pub unobservable_weight: f64,
    /// Probability that a non-hire still receives an offer.
    #[serde(default)]
    pub offer_extra_rate: f64,
    #[serde(default)]
    pub drift: Option<DriftSchedule>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub seed: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl PopulationSpec {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            n_groups: self.groups.len(),
            n_continuous: self.n_continuous,
            n_binary: self.n_binary,
        }
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("population needs at least one group".into()));
        }
        let total: f64 = self.groups.iter().map(|g| g.share).sum();
        if (total - 1.0).abs() > 1e-9 || self.groups.iter().any(|g| !(g.share >= 0.0)) {
            return Err(Error::Config(format!("group shares must form a simplex (sum = {total})")));
        }
        let d = self.layout().dim();
        if self.true_theta.len() != d + 1 {
            return Err(Error::Config(format!(
                "true_theta has {} entries, expected {} (intercept + {d} features)",
                self.true_theta.len(),
                d + 1
            )));
        }
        for g in &self.groups {
            if g.continuous_mean.len() != self.n_continuous {
                return Err(Error::Config(format!("group {}: continuous_mean length", g.name)));
            }
            if g.binary_rates.len() != self.n_binary {
                return Err(Error::Config(format!("group {}: binary_rates length", g.name)));
            }
            let rates_ok = g.binary_rates.iter().chain(std::iter::once(&g.female_rate)).all(|r| (0.0..=1.0).contains(r));
            if !rates_ok {
                return Err(Error::Config(format!("group {}: rates must lie in [0, 1]", g.name)));
            }
            if let Some(cov) = &g.continuous_cov {
                covariance_factor(cov, self.n_continuous)
                    .map_err(|e| Error::Config(format!("group {}: {e}", g.name)))?;
            }
        }
        if !(0.0..=1.0).contains(&self.offer_extra_rate) {
            return Err(Error::Config("offer_extra_rate must lie in [0, 1]".into()));
        }
        if let Some(drift) = &self.drift {
            drift.validate(self)?;
        }
        Ok(())
    }
}

/// Square-root factor `L` with `L L' = cov`; rejects non-PSD input.
fn covariance_factor(cov: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(format!("covariance must be {dim}x{dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| cov[i][j]);
    if (&m - m.transpose()).amax() > 1e-9 {
        return Err(Error::Config("covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&l| l < -1e-9) {
        return Err(Error::Config("covariance is not positive semidefinite".into()));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// A generated applicant pool in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub groups: Vec<String>,
    pub layout: FeatureLayout,
    pub round_size: usize,
    pub applicants: Vec<Applicant>,
}

impl Population {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_rounds(&self) -> usize {
        self.applicants.len().div_ceil(self.round_size)
    }

    pub fn round(&self, t: usize) -> &[Applicant] {
        let start = (t * self.round_size).min(self.applicants.len());
        let end = ((t + 1) * self.round_size).min(self.applicants.len());
        &self.applicants[start..end]
    }

    pub fn rounds(&self) -> impl Iterator<Item = &[Applicant]> {
        self.applicants.chunks(self.round_size)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.layout.feature_names(&self.groups)
    }

    pub fn group_shares(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.groups.len()];
        for a in &self.applicants {
            counts[a.group] += 1;
        }
        let n = self.applicants.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// Draw `n` applicants from `spec`, assigning rounds of `round_size` in arrival order.
pub fn generate_population(spec: &PopulationSpec, n: usize, round_size: usize) -> Result<Population> {
    if n == 0 {
        return Err(Error::Config("population size must be positive".into()));
    }
    if round_size == 0 {
        return Err(Error::Config("round_size must be positive".into()));
    }
    spec.validate()?;
    let layout = spec.layout();
    let d = layout.dim();
    let factors = spec
        .groups
        .iter()
        .map(|g| g.continuous_cov.as_ref().map(|c| covariance_factor(c, spec.n_continuous)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let shares = WeightedIndex::new(spec.groups.iter().map(|g| g.share))
        .map_err(|e| Error::Config(format!("group shares: {e}")))?;

    let mut rng = rng_for(spec.seed, "population", 0);
    let mut applicants = Vec::with_capacity(n);
    let mut z = vec![0.0; spec.n_continuous];
    for i in 0..n {
        let group = shares.sample(&mut rng);
        let gs = &spec.groups[group];
        let mut features = vec![0.0; d];
        if group > 0 {
            features[group - 1] = 1.0;
        }
        let female = rng.random_bool(gs.female_rate);
        features[layout.female_index()] = f64::from(u8::from(female));
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let off = layout.continuous_offset();
        for j in 0..spec.n_continuous {
            let noise = match &factors[group] {
                Some(l) => (0..spec.n_continuous).map(|k| l[(j, k)] * z[k]).sum(),
                None => z[j],
            };
            features[off + j] = gs.continuous_mean[j] + noise;
        }
        let off = layout.binary_offset();
        for (j, &rate) in gs.binary_rates.iter().enumerate() {
            features[off + j] = f64::from(u8::from(rng.random_bool(rate)));
        }
        let unobservable: f64 = rng.sample(StandardNormal);
        applicants.push(Applicant {
            id: i as u64,
            features,
            group,
            female,
            potential_outcome: false,
            offered: false,
            human_interviewed: false,
            screener_id: 0,
            stratum: 0,
            arrival_round: i / round_size,
            unobservable,
            true_propensity: None,
        });
    }

    standardize_continuous(&mut applicants, &layout);

    for a in applicants.iter_mut() {
        let index = linear_index(&spec.true_theta, &a.features) + spec.unobservable_weight * a.unobservable;
        a.potential_outcome = rng.random_bool(logistic(index));
        a.offered = a.potential_outcome || rng.random_bool(spec.offer_extra_rate);
    }

    Ok(Population { groups: spec.group_names(), layout, round_size, applicants })
}

fn standardize_continuous(applicants: &mut [Applicant], layout: &FeatureLayout) {
    let n = applicants.len() as f64;
    for j in layout.continuous_offset()..layout.binary_offset() {
        let mean = applicants.iter().map(|a| a.features[j]).sum::<f64>() / n;
        let var = applicants.iter().map(|a| (a.features[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for a in applicants.iter_mut() {
            a.features[j] -= mean;
            if sd > 0.0 {
                a.features[j] /= sd;
            }
        }
    }
}

/// `theta[0] + x' theta[1..]`.
pub fn linear_index(theta: &[f64], x: &[f64]) -> f64 {
    theta[0] + theta[1..].iter().zip(x).map(|(t, v)| t * v).sum::<f64>()
}

/// Parameters of the simulated human resume screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningSpec {
    /// Intercept first; the intercept is absorbed by the rate-matching threshold.
    pub human_theta: Vec<f64>,
    pub screeners: usize,
    pub leniency_sd: f64,
    pub interview_rate: f64,
    /// Weight every screener puts on the unobservable term.
    #[serde(default)]
    pub unobservable_weight: f64,
    /// Extra weight on the unobservable used only by below-median-leniency screeners.
    #[serde(default)]
    pub strict_unobservable_weight: f64,
    /// Screener `k` belongs to stratum `k % n_strata`.
    #[serde(default = "default_strata")]
    pub n_strata: u32,
}

fn default_strata() -> u32 {
    1
}

impl ScreeningSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.screeners < 2 {
            return Err(Error::Config("need at least 2 screeners".into()));
        }
        if !(self.interview_rate > 0.0 && self.interview_rate < 1.0) {
            return Err(Error::Config("interview_rate must lie in (0, 1)".into()));
        }
        if !(self.leniency_sd >= 0.0) {
            return Err(Error::Config("leniency_sd must be nonnegative".into()));
        }
        if self.human_theta.len() != dim + 1 {
            return Err(Error::Config(format!(
                "human_theta has {} entries, expected {}",
                self.human_theta.len(),
                dim + 1
            )));
        }
        if self.n_strata == 0 {
            return Err(Error::Config("n_strata must be positive".into()));
        }
        Ok(())
    }
}

/// Latent screener leniency shifts, plus which screeners count as strict.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenerPanel {
    pub leniency: Vec<f64>,
    pub strict: Vec<bool>,
    pub threshold: f64,
}

/// Assign screeners uniformly at random and fill in interview decisions.
///
/// Screener `k` interviews applicant `i` iff
/// `x_i' h + delta_k + eps_i > c`, with `eps_i` standard logistic and `c` the
/// empirical quantile that produces the target aggregate interview rate.
pub fn simulate_human_screening(pop: &mut Population, spec: &ScreeningSpec, seed: u64) -> Result<ScreenerPanel> {
    spec.validate(pop.dim())?;
    let n = pop.applicants.len();
    let mut rng = rng_for(seed, "screeners", 0);
    let leniency: Vec<f64> = (0..spec.screeners)
        .map(|_| spec.leniency_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut sorted = leniency.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    } else {
        sorted[sorted.len() / 2]
    };
    let strict: Vec<bool> = leniency.iter().map(|&l| l < median).collect();

    let mut rng = rng_for(seed, "screening", 0);
    let mut base = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for a in pop.applicants.iter_mut() {
        let k = rng.random_range(0..spec.screeners);
        a.screener_id = k as u32;
        a.stratum = a.screener_id % spec.n_strata;
        let b = linear_index(&spec.human_theta, &a.features) + spec.unobservable_weight * a.unobservable;
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let eps = (u / (1.0 - u)).ln();
        latent.push(b + screener_shift(spec, &leniency, &strict, k, a.unobservable) + eps);
        base.push(b);
    }

    let target = ((spec.interview_rate * n as f64).round() as usize).min(n);
    let mut order = latent.clone();
    order.sort_by(f64::total_cmp);
    let threshold = if target == 0 { f64::INFINITY } else { order[n - target] - 1e-12 };

    for (i, a) in pop.applicants.iter_mut().enumerate() {
        a.human_interviewed = latent[i] > threshold;
        let p = (0..spec.screeners)
            .map(|k| logistic(base[i] + screener_shift(spec, &leniency, &strict, k, a.unobservable) - threshold))
            .sum::<f64>()
            / spec.screeners as f64;
        a.true_propensity = Some(p);
    }
    Ok(ScreenerPanel { leniency, strict, threshold })
}

fn screener_shift(spec: &ScreeningSpec, leniency: &[f64], strict: &[bool], k: usize, unobservable: f64) -> f64 {
    let extra = if strict[k] { spec.strict_unobservable_weight * unobservable } else { 0.0 };
    leniency[k] + extra
}

/// Where a training row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    FeasibleUpdate,
    LiveUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub applicant_id: u64,
    pub features: Vec<f64>,
    pub label: bool,
    pub provenance: Provenance,
}

/// Append-only labeled data available to a learner.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    rows: Vec<TrainingRow>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<TrainingRow>) -> Self {
        Self { rows }
    }

    /// Initial set: every human-interviewed applicant among `applicants`.
    pub fn initial(applicants: &[Applicant], label: OutcomeLabel) -> Self {
        let rows = applicants
            .iter()
            .filter(|a| a.human_interviewed)
            .map(|a| TrainingRow {
                applicant_id: a.id,
                features: a.features.clone(),
                label: a.outcome(label),
                provenance: Provenance::Initial,
            })
            .collect();
        Self { rows }
    }

    pub fn push(&mut self, row: TrainingRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TrainingRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.rows.iter().filter(|r| r.label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.rows.len()
    }
}

/// Per-round selection capacity and outcome definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub round_size: usize,
    /// Fixed selections per round; when absent, each round uses the realized
    /// human interview count (at least one).
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub outcome_label: OutcomeLabel,
    /// Share of rounds forming the initial training period.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.5
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { round_size: 100, capacity: None, outcome_label: OutcomeLabel::Hired, train_fraction: 0.5 }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.round_size == 0 {
            return Err(Error::Config("round_size must be positive".into()));
        }
        if let Some(c) = self.capacity {
            if c == 0 || c > self.round_size {
                return Err(Error::Config(format!(
                    "capacity must satisfy 0 < capacity <= round_size ({})",
                    self.round_size
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn capacity_for(&self, round: &[Applicant]) -> usize {
        match self.capacity {
            Some(c) => c.min(round.len()),
            None => round.iter().filter(|a| a.human_interviewed).count().max(1).min(round.len()),
        }
    }
}

/// Write the population as delimited text:
/// `id,round,group,gender,I,screener_id,Y,f0..f{d-1}`, where `gender` is 1 for
/// female and `Y` holds the requested outcome label.
pub fn write_population<W: Write>(pop: &Population, label: OutcomeLabel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["id", "round", "group", "gender", "I", "screener_id", "Y"].iter().map(|s| s.to_string()).collect();
    header.extend((0..pop.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for a in &pop.applicants {
        let mut rec = vec![
            a.id.to_string(),
            a.arrival_round.to_string(),
            pop.groups[a.group].clone(),
            u8::from(a.female).to_string(),
            u8::from(a.human_interviewed).to_string(),
            a.screener_id.to_string(),
            u8::from(a.outcome(label)).to_string(),
        ];
        rec.extend(a.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a population written by [`write_population`]. Group names must match
/// `groups`; the `Y` column fills both outcome fields.
pub fn read_population<R: Read>(
    input: R,
    groups: &[String],
    layout: FeatureLayout,
    round_size: usize,
    n_strata: u32,
) -> Result<Population> {
    let mut r = csv::Reader::from_reader(input);
    let d = layout.dim();
    let header = r.headers()?.clone();
    if header.len() != 7 + d {
        return Err(Error::Parse(format!("expected {} columns, found {}", 7 + d, header.len())));
    }
    let mut applicants = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|_| Error::Parse(format!("column {} is not an integer: {:?}", &header[i], field(i))))
        };
        let flag = |i: usize| -> Result<bool> {
            match field(i) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse(format!("column {} must be 0/1, got {other:?}", &header[i]))),
            }
        };
        let group = groups
            .iter()
            .position(|g| g == field(2))
            .ok_or_else(|| Error::Parse(format!("unknown group {:?}", field(2))))?;
        let features = (0..d)
            .map(|j| field(7 + j).parse::<f64>().map_err(|_| Error::Parse(format!("bad feature value {:?}", field(7 + j)))))
            .collect::<Result<Vec<_>>>()?;
        let y = flag(6)?;
        let screener_id = num(5)? as u32;
        applicants.push(Applicant {
            id: num(0)?,
            features,
            group,
            female: flag(3)?,
            potential_outcome: y,
            offered: y,
            human_interviewed: flag(4)?,
            screener_id,
            stratum: screener_id % n_strata.max(1),
            arrival_round: num(1)? as usize,
            unobservable: 0.0,
            true_propensity: None,
        });
    }
    Ok(Population { groups: groups.to_vec(), layout, round_size, applicants })
}
