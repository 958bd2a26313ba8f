//! Screener-leniency instrumental variables: leave-out instrument, OLS and
//! just-identified 2SLS with absorbed fixed effects and cluster-robust
//! standard errors, balance and monotonicity diagnostics, and complier
//! outcome means above and below a score threshold.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::applicant::{Applicant, OutcomeLabel, Provenance, TrainingRow, TrainingSet};
use crate::error::{Error, Result};
use crate::glm::{fit_l1_logistic, FitOptions};
use crate::policy::fit_human_model;
use crate::rng::{derive_seed, rng_for};

/// First-stage F below which a weak-instrument warning is attached.
pub const WEAK_INSTRUMENT_F: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficient {
    pub estimate: f64,
    pub se: f64,
}

impl Coefficient {
    pub fn t(&self) -> f64 {
        self.estimate / self.se
    }
}

/// Controls shared by every regression in this module. Fixed effects are
/// absorbed by within-group demeaning; without them an intercept is
/// absorbed by demeaning over the whole sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegressionSpec<'a> {
    /// Extra control columns.
    pub controls: &'a [Vec<f64>],
    pub fixed_effects: Option<&'a [u32]>,
    /// Cluster ids for cluster-robust errors; heteroskedasticity-robust (HC1) otherwise.
    pub cluster: Option<&'a [u32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsResult {
    /// Regressors first, then controls.
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub n_clusters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvResult {
    pub estimate: Coefficient,
    pub first_stage: Coefficient,
    /// Square of the first-stage t statistic on the instrument.
    pub first_stage_f: f64,
    pub warning: Option<String>,
    pub n: usize,
    pub n_clusters: Option<usize>,
}

fn check_len(n: usize, v: usize) -> Result<()> {
    if n != v {
        return Err(Error::Dimension { expected: n, got: v });
    }
    Ok(())
}

/// Subtract group means from `v` in place.
pub fn demean_within(v: &mut [f64], groups: &[u32]) {
    let mut sums: HashMap<u32, (f64, usize)> = HashMap::new();
    for (x, g) in v.iter().zip(groups) {
        let e = sums.entry(*g).or_insert((0.0, 0));
        e.0 += x;
        e.1 += 1;
    }
    for (x, g) in v.iter_mut().zip(groups) {
        let (s, c) = sums[g];
        *x -= s / c as f64;
    }
}

fn absorb(column: &[f64], fe: Option<&[u32]>) -> Vec<f64> {
    let mut v = column.to_vec();
    match fe {
        Some(g) => demean_within(&mut v, g),
        None => {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= m);
        }
    }
    v
}

fn n_absorbed(n: usize, fe: Option<&[u32]>) -> usize {
    match fe {
        Some(g) => {
            let mut ids: Vec<u32> = g[..n].to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        }
        None => 1,
    }
}

fn matrix(columns: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}

fn invert(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = m.diagonal().amax();
    if !(scale > 0.0) {
        return Err(Error::DegenerateInstrument(format!("{what} has no variation")));
    }
    let lu = m.clone().lu();
    let inv = lu.try_inverse().ok_or_else(|| Error::DegenerateInstrument(format!("{what} is singular")))?;
    // Reject numerically singular systems that LU happens to invert.
    if (inv.amax() * scale) > 1e12 {
        return Err(Error::DegenerateInstrument(format!("{what} is numerically singular")));
    }
    Ok(inv)
}

/// Sandwich covariance `c * B M B` with HC1 or cluster-robust meat built
/// from the score rows `s_i u_i`.
fn sandwich(
    scores: &DMatrix<f64>,
    resid: &DVector<f64>,
    bread: &DMatrix<f64>,
    cluster: Option<&[u32]>,
    k_total: usize,
) -> Result<(DMatrix<f64>, Option<usize>)> {
    let n = scores.nrows();
    let k = scores.ncols();
    if n <= k_total {
        return Err(Error::TooFewRows { need: k_total + 1, have: n });
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    let (scale, n_clusters) = match cluster {
        None => {
            for i in 0..n {
                let s = scores.row(i).transpose() * resid[i];
                meat += &s * s.transpose();
            }
            (n as f64 / (n - k_total) as f64, None)
        }
        Some(ids) => {
            let mut sums: BTreeMap<u32, DVector<f64>> = BTreeMap::new();
            for i in 0..n {
                let s = scores.row(i).transpose() * resid[i];
                *sums.entry(ids[i]).or_insert_with(|| DVector::zeros(k)) += s;
            }
            let g = sums.len();
            if g < 2 {
                return Err(Error::Config("cluster-robust errors need at least 2 clusters".into()));
            }
            for s in sums.values() {
                meat += s * s.transpose();
            }
            let c = (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k_total) as f64);
            (c, Some(g))
        }
    };
    Ok((bread * meat * bread * scale, n_clusters))
}

fn coefficients(beta: &DVector<f64>, v: &DMatrix<f64>) -> Vec<Coefficient> {
    (0..beta.len()).map(|j| Coefficient { estimate: beta[j], se: v[(j, j)].max(0.0).sqrt() }).collect()
}

/// Least squares of `y` on `regressors` plus the controls in `spec`.
pub fn ols(y: &[f64], regressors: &[Vec<f64>], spec: &RegressionSpec) -> Result<OlsResult> {
    let n = y.len();
    for c in regressors.iter().chain(spec.controls) {
        check_len(n, c.len())?;
    }
    if let Some(g) = spec.fixed_effects {
        check_len(n, g.len())?;
    }
    if let Some(g) = spec.cluster {
        check_len(n, g.len())?;
    }
    let cols: Vec<Vec<f64>> = regressors.iter().chain(spec.controls).map(|c| absorb(c, spec.fixed_effects)).collect();
    let x = matrix(&cols, n);
    let yv = DVector::from_vec(absorb(y, spec.fixed_effects));
    let bread = invert(x.tr_mul(&x), "regressor cross-product")?;
    let beta = &bread * x.tr_mul(&yv);
    let resid = &yv - &x * &beta;
    let k_total = cols.len() + n_absorbed(n, spec.fixed_effects);
    let (v, n_clusters) = sandwich(&x, &resid, &bread, spec.cluster, k_total)?;
    Ok(OlsResult { coefficients: coefficients(&beta, &v), n, n_clusters })
}

/// Just-identified IV of `y` on endogenous `x` with instrument `z`: the
/// first stage projects `x` on `z` and the controls, the second regresses
/// `y` on the fitted values and the controls. Residuals use the actual `x`.
pub fn two_stage_least_squares(y: &[f64], x: &[f64], z: &[f64], spec: &RegressionSpec) -> Result<IvResult> {
    let n = y.len();
    check_len(n, x.len())?;
    check_len(n, z.len())?;

    let zt = absorb(z, spec.fixed_effects);
    let ctrl: Vec<Vec<f64>> = spec.controls.iter().map(|c| absorb(c, spec.fixed_effects)).collect();
    // The instrument must move after partialling out the controls.
    let z_resid = if ctrl.is_empty() {
        zt.clone()
    } else {
        let w = matrix(&ctrl, n);
        let zv = DVector::from_vec(zt.clone());
        let coef = invert(w.tr_mul(&w), "control cross-product")? * w.tr_mul(&zv);
        (zv - w * coef).as_slice().to_vec()
    };
    let z_ss: f64 = z_resid.iter().map(|v| v * v).sum();
    let z_scale: f64 = zt.iter().map(|v| v * v).sum::<f64>().max(z.iter().map(|v| v * v).sum());
    if !(z_ss > 1e-12 * z_scale.max(1.0)) {
        return Err(Error::DegenerateInstrument("instrument has no residual variation after controls".into()));
    }

    let first = ols(x, &[z.to_vec()], spec)?;
    let first_stage = first.coefficients[0];
    let first_stage_f = first_stage.t().powi(2);

    let mut zcols = vec![zt];
    zcols.extend(ctrl.iter().cloned());
    let mut xcols = vec![absorb(x, spec.fixed_effects)];
    xcols.extend(ctrl);
    let zm = matrix(&zcols, n);
    let xm = matrix(&xcols, n);
    let yv = DVector::from_vec(absorb(y, spec.fixed_effects));

    let pz = invert(zm.tr_mul(&zm), "instrument cross-product")?;
    let x_hat = &zm * (&pz * zm.tr_mul(&xm));
    let bread = invert(x_hat.tr_mul(&x_hat), "projected regressor cross-product")?;
    let beta = &bread * x_hat.tr_mul(&yv);
    let resid = &yv - &xm * &beta;
    let k_total = xcols.len() + n_absorbed(n, spec.fixed_effects);
    let (v, n_clusters) = sandwich(&x_hat, &resid, &bread, spec.cluster, k_total)?;
    let warning = (first_stage_f < WEAK_INSTRUMENT_F)
        .then(|| format!("weak instrument: first-stage F = {first_stage_f:.3}"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(IvResult {
        estimate: coefficients(&beta, &v)[0],
        first_stage,
        first_stage_f,
        warning,
        n,
        n_clusters,
    })
}

/// Mean of `values` over the other members of each element's cluster;
/// `None` for singleton clusters.
pub fn leave_out_means(values: &[f64], clusters: &[u32]) -> Vec<Option<f64>> {
    let mut sums: HashMap<u32, (f64, usize)> = HashMap::new();
    for (v, c) in values.iter().zip(clusters) {
        let e = sums.entry(*c).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    values
        .iter()
        .zip(clusters)
        .map(|(v, c)| {
            let (s, k) = sums[c];
            (k > 1).then(|| (s - v) / (k - 1) as f64)
        })
        .collect()
}

/// Leave-out screener interview rate per applicant, standardized over the
/// applicants of screeners with at least `min_caseload` decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct LeniencyInstrument {
    /// Standardized value, aligned with the input applicants; `None` when excluded.
    pub values: Vec<Option<f64>>,
    /// Leave-out means before standardization.
    pub raw: Vec<Option<f64>>,
    pub excluded_screeners: Vec<u32>,
    pub mean: f64,
    pub sd: f64,
}

impl LeniencyInstrument {
    /// Positions of applicants retained in the IV sample.
    pub fn retained(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i].is_some()).collect()
    }
}

pub const DEFAULT_MIN_CASELOAD: usize = 50;

pub fn build_instrument(applicants: &[Applicant], min_caseload: usize) -> Result<LeniencyInstrument> {
    let mut caseload: BTreeMap<u32, usize> = BTreeMap::new();
    for a in applicants {
        *caseload.entry(a.screener_id).or_default() += 1;
    }
    let excluded_screeners: Vec<u32> = caseload.iter().filter(|(_, &c)| c < min_caseload.max(2)).map(|(&s, _)| s).collect();
    let retained = caseload.len() - excluded_screeners.len();
    if retained < 2 {
        return Err(Error::DegenerateInstrument(format!("{retained} screeners meet the caseload threshold; need 2")));
    }
    let decisions: Vec<f64> = applicants.iter().map(|a| f64::from(u8::from(a.human_interviewed))).collect();
    let ids: Vec<u32> = applicants.iter().map(|a| a.screener_id).collect();
    let raw: Vec<Option<f64>> = leave_out_means(&decisions, &ids)
        .into_iter()
        .zip(&ids)
        .map(|(v, id)| if excluded_screeners.binary_search(id).is_ok() { None } else { v })
        .collect();
    let kept: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kept.len() as f64;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateInstrument("leave-out interview rates have zero variance".into()));
    }
    let values = raw.iter().map(|v| v.map(|v| (v - mean) / sd)).collect();
    Ok(LeniencyInstrument { values, raw, excluded_screeners, mean, sd })
}

/// Columns restricted to the rows in `idx`.
fn take(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn take_u32(v: &[u32], idx: &[usize]) -> Vec<u32> {
    idx.iter().map(|&i| v[i]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub covariate: String,
    pub coefficient: Coefficient,
}

/// Regress each covariate on the instrument with stratum fixed effects,
/// clustering by screener.
pub fn balance_check(
    applicants: &[Applicant],
    instrument: &LeniencyInstrument,
    covariates: &[(String, Vec<f64>)],
) -> Result<Vec<BalanceRow>> {
    check_len(applicants.len(), instrument.values.len())?;
    let idx = instrument.retained();
    let z: Vec<f64> = idx.iter().map(|&i| instrument.values[i].expect("retained")).collect();
    let strata: Vec<u32> = idx.iter().map(|&i| applicants[i].stratum).collect();
    let screeners: Vec<u32> = idx.iter().map(|&i| applicants[i].screener_id).collect();
    let spec = RegressionSpec { controls: &[], fixed_effects: Some(&strata), cluster: Some(&screeners) };
    covariates
        .iter()
        .map(|(name, col)| {
            check_len(applicants.len(), col.len())?;
            let fit = ols(&take(col, &idx), std::slice::from_ref(&z), &spec)?;
            Ok(BalanceRow { covariate: name.clone(), coefficient: fit.coefficients[0] })
        })
        .collect()
}

/// Every feature as a named balance covariate.
pub fn feature_covariates(applicants: &[Applicant], names: &[String]) -> Vec<(String, Vec<f64>)> {
    names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), applicants.iter().map(|a| a.features[j]).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplierEstimate {
    pub tag: &'static str,
    pub coefficient: Coefficient,
    pub first_stage_f: f64,
    pub warning: Option<String>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplierReport {
    pub threshold: f64,
    pub high: ComplierEstimate,
    pub low: ComplierEstimate,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Mean of `value` among compliers in each half of the score distribution:
/// IV of `value * I` on `I`, instrumented by leniency, within applicants
/// scoring above (high) and at or below (low) the threshold. The threshold
/// defaults to the median score of the IV sample.
pub fn complier_outcomes(
    applicants: &[Applicant],
    instrument: &LeniencyInstrument,
    scores: &[f64],
    value: &[f64],
    threshold: Option<f64>,
) -> Result<ComplierReport> {
    check_len(applicants.len(), instrument.values.len())?;
    check_len(applicants.len(), scores.len())?;
    check_len(applicants.len(), value.len())?;
    let idx = instrument.retained();
    let tau = threshold.unwrap_or_else(|| median(&take(scores, &idx)));
    let estimate = |tag: &'static str, rows: Vec<usize>| -> Result<ComplierEstimate> {
        if rows.is_empty() {
            return Err(Error::Undefined(format!("the {tag}-score half is empty")));
        }
        let i: Vec<f64> = rows.iter().map(|&r| f64::from(u8::from(applicants[r].human_interviewed))).collect();
        let y: Vec<f64> = rows.iter().zip(&i).map(|(&r, d)| value[r] * d).collect();
        let z: Vec<f64> = rows.iter().map(|&r| instrument.values[r].expect("retained")).collect();
        let strata = take_u32(&applicants.iter().map(|a| a.stratum).collect::<Vec<_>>(), &rows);
        let screeners = take_u32(&applicants.iter().map(|a| a.screener_id).collect::<Vec<_>>(), &rows);
        let spec = RegressionSpec { controls: &[], fixed_effects: Some(&strata), cluster: Some(&screeners) };
        let fit = two_stage_least_squares(&y, &i, &z, &spec)?;
        Ok(ComplierEstimate { tag, coefficient: fit.estimate, first_stage_f: fit.first_stage_f, warning: fit.warning, n: rows.len() })
    };
    let high: Vec<usize> = idx.iter().copied().filter(|&r| scores[r] > tau).collect();
    let low: Vec<usize> = idx.iter().copied().filter(|&r| scores[r] <= tau).collect();
    Ok(ComplierReport { threshold: tau, high: estimate("high", high)?, low: estimate("low", low)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub predicted: f64,
    pub observed: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
    /// Mean predicted minus mean observed outcome.
    pub overprediction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub first_stages: Vec<(String, Coefficient)>,
    /// Correlation of strict- and lenient-trained interview propensities, overall then per subgroup.
    pub propensity_correlation: Vec<(String, f64)>,
    pub strict_calibration: CalibrationCurve,
    pub lenient_calibration: CalibrationCurve,
}

impl MonotonicityReport {
    /// Extra overprediction on the strict holdout relative to the lenient one.
    pub fn calibration_gap(&self) -> f64 {
        self.strict_calibration.overprediction - self.lenient_calibration.overprediction
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn calibration(pred: &[f64], obs: &[bool], n_bins: usize) -> CalibrationCurve {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let bins = (0..n_bins)
        .filter_map(|b| {
            let lo = b * order.len() / n_bins;
            let hi = (b + 1) * order.len() / n_bins;
            let chunk = &order[lo..hi];
            (!chunk.is_empty()).then(|| CalibrationBin {
                predicted: chunk.iter().map(|&i| pred[i]).sum::<f64>() / chunk.len() as f64,
                observed: chunk.iter().filter(|&&i| obs[i]).count() as f64 / chunk.len() as f64,
                n: chunk.len(),
            })
        })
        .collect();
    let n = pred.len().max(1) as f64;
    let overprediction = (pred.iter().sum::<f64>() - obs.iter().filter(|&&o| o).count() as f64) / n;
    CalibrationCurve { bins, overprediction }
}

/// Subgroup first stages, strict/lenient propensity agreement and the
/// calibration of a lenient-trained outcome model on strict vs lenient
/// holdouts. Screeners are split at the median leave-out rate of their
/// applicants. `subgroups` are named row masks aligned with `applicants`.
pub fn monotonicity_suite(
    applicants: &[Applicant],
    instrument: &LeniencyInstrument,
    subgroups: &[(String, Vec<bool>)],
    label: OutcomeLabel,
    seed: u64,
) -> Result<MonotonicityReport> {
    check_len(applicants.len(), instrument.values.len())?;
    let idx = instrument.retained();

    let mut first_stages = Vec::new();
    for (name, mask) in subgroups {
        check_len(applicants.len(), mask.len())?;
        let rows: Vec<usize> = idx.iter().copied().filter(|&r| mask[r]).collect();
        let i: Vec<f64> = rows.iter().map(|&r| f64::from(u8::from(applicants[r].human_interviewed))).collect();
        let z: Vec<f64> = rows.iter().map(|&r| instrument.values[r].expect("retained")).collect();
        let strata: Vec<u32> = rows.iter().map(|&r| applicants[r].stratum).collect();
        let screeners: Vec<u32> = rows.iter().map(|&r| applicants[r].screener_id).collect();
        let spec = RegressionSpec { controls: &[], fixed_effects: Some(&strata), cluster: Some(&screeners) };
        first_stages.push((name.clone(), ols(&i, &[z], &spec)?.coefficients[0]));
    }

    // Strict screeners pass fewer than the median screener.
    let mut rate: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for &r in &idx {
        let e = rate.entry(applicants[r].screener_id).or_default();
        e.0 += usize::from(applicants[r].human_interviewed);
        e.1 += 1;
    }
    let rates: Vec<f64> = rate.values().map(|(k, n)| *k as f64 / *n as f64).collect();
    let cut = median(&rates);
    let strict_screener: HashMap<u32, bool> = rate.iter().map(|(&s, (k, n))| (s, (*k as f64 / *n as f64) < cut)).collect();
    let (strict_rows, lenient_rows): (Vec<usize>, Vec<usize>) =
        idx.iter().copied().partition(|&r| strict_screener[&applicants[r].screener_id]);
    if strict_rows.is_empty() || lenient_rows.is_empty() {
        return Err(Error::DegenerateInstrument("no spread in screener pass rates".into()));
    }

    let opts = FitOptions::default();
    let pick = |rows: &[usize]| -> Vec<Applicant> { rows.iter().map(|&r| applicants[r].clone()).collect() };
    let strict_model = fit_human_model(&pick(&strict_rows), &opts, derive_seed(seed, "strict-propensity", 0))?;
    let lenient_model = fit_human_model(&pick(&lenient_rows), &opts, derive_seed(seed, "lenient-propensity", 0))?;
    let ps: Vec<f64> = idx.iter().map(|&r| strict_model.predict_probability(&applicants[r].features)).collect::<Result<_>>()?;
    let pl: Vec<f64> = idx.iter().map(|&r| lenient_model.predict_probability(&applicants[r].features)).collect::<Result<_>>()?;
    let mut propensity_correlation = vec![("all".to_string(), pearson(&ps, &pl))];
    for (name, mask) in subgroups {
        let sel: Vec<usize> = (0..idx.len()).filter(|&k| mask[idx[k]]).collect();
        if sel.len() > 2 {
            propensity_correlation.push((name.clone(), pearson(&take(&ps, &sel), &take(&pl, &sel))));
        }
    }

    // Outcome model on half of the lenient interviewees, calibrated on the
    // other half and on all strict interviewees.
    let mut lenient_int: Vec<usize> = lenient_rows.iter().copied().filter(|&r| applicants[r].human_interviewed).collect();
    lenient_int.shuffle(&mut rng_for(seed, "lenient-holdout", 0));
    let (train, holdout) = lenient_int.split_at(lenient_int.len() / 2);
    let data = TrainingSet::from_rows(
        train
            .iter()
            .map(|&r| TrainingRow {
                applicant_id: applicants[r].id,
                features: applicants[r].features.clone(),
                label: applicants[r].outcome(label),
                provenance: Provenance::Initial,
            })
            .collect(),
    );
    let model = fit_l1_logistic(&data, &FitOptions { balance: false, ..opts }, derive_seed(seed, "lenient-outcome", 0))?;
    let curve = |rows: &[usize]| -> Result<CalibrationCurve> {
        let pred: Vec<f64> = rows.iter().map(|&r| model.predict_probability(&applicants[r].features)).collect::<Result<_>>()?;
        let obs: Vec<bool> = rows.iter().map(|&r| applicants[r].outcome(label)).collect();
        Ok(calibration(&pred, &obs, 10))
    };
    let strict_int: Vec<usize> = strict_rows.iter().copied().filter(|&r| applicants[r].human_interviewed).collect();
    Ok(MonotonicityReport {
        first_stages,
        propensity_correlation,
        strict_calibration: curve(&strict_int)?,
        lenient_calibration: curve(holdout)?,
    })
}
