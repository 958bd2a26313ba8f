//! L1-penalized logistic regression.
//!
//! The objective is the mean log-loss plus `lambda * sum_j |theta_j|` over the
//! slopes; the intercept is never penalized. It is minimized by accelerated
//! proximal gradient (soft-thresholding) with a fixed `1/L` step and adaptive
//! restart. The penalty is picked by k-fold cross-validated log-loss on a
//! class-balanced subsample.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{logistic, logit, roc_auc, softplus};
use crate::applicant::TrainingSet;
use crate::error::{Error, Result};
use crate::rng::rng_for;

const MAX_FOLD_ATTEMPTS: usize = 5;

/// 13 log-spaced penalties over `[1e-4, 1e4]`.
pub fn default_penalty_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 12.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub penalty_grid: Vec<f64>,
    pub folds: usize,
    /// Undersample the majority label before fitting.
    pub balance: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { penalty_grid: default_penalty_grid(), folds: 4, balance: true, max_iter: 10_000, tol: 1e-8 }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.penalty_grid.is_empty() || self.penalty_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("penalty grid must be non-empty, finite and nonnegative".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("need at least 2 folds".into()));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("max_iter and tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub log_loss: f64,
    pub auc: Option<f64>,
    pub n_train: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// A fitted logistic model. `theta[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedGLM {
    pub theta: Vec<f64>,
    pub penalty: f64,
    pub feature_names: Vec<String>,
    pub diagnostics: TrainDiagnostics,
}

impl FittedGLM {
    /// Model with the given coefficients and no training history.
    pub fn from_theta(theta: Vec<f64>) -> Self {
        let d = theta.len().saturating_sub(1);
        Self {
            theta,
            penalty: 0.0,
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
            diagnostics: TrainDiagnostics { log_loss: f64::NAN, auc: None, n_train: 0, iterations: 0, converged: true },
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = names;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(self.theta[0] + self.theta[1..].iter().zip(x).map(|(t, v)| t * v).sum::<f64>())
    }

    /// `logistic(theta_0 + x' theta_1..d)`.
    pub fn predict_probability(&self, x: &[f64]) -> Result<f64> {
        self.linear_predictor(x).map(logistic)
    }

    /// Shift the intercept so a model fit on a sample with positive share
    /// `sample_rate` predicts on the scale of a population with `population_rate`.
    pub fn prior_corrected(mut self, sample_rate: f64, population_rate: f64) -> Self {
        self.theta[0] += logit(population_rate) - logit(sample_rate);
        self
    }
}

/// Dense design matrix with an implicit leading intercept column.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    d: usize,
    /// `n x d`, column-major.
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Design {
    pub fn new(rows: &[Vec<f64>], labels: &[bool]) -> Result<Self> {
        if labels.len() != rows.len() {
            return Err(Error::Dimension { expected: rows.len(), got: labels.len() });
        }
        Self::build(rows.iter().map(Vec::as_slice).zip(labels.iter().copied()))
    }

    pub fn from_training(data: &TrainingSet) -> Result<Self> {
        Self::build(data.rows().iter().map(|r| (r.features.as_slice(), r.label)))
    }

    fn build<'a, I>(rows: I) -> Result<Self>
    where
        I: ExactSizeIterator<Item = (&'a [f64], bool)> + Clone,
    {
        let n = rows.len();
        let Some((first, _)) = rows.clone().next() else {
            return Err(Error::TooFewRows { need: 1, have: 0 });
        };
        let d = first.len();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        for (i, (r, label)) in rows.enumerate() {
            if r.len() != d {
                return Err(Error::Dimension { expected: d, got: r.len() });
            }
            for (j, v) in r.iter().enumerate() {
                x[(i, j)] = *v;
            }
            y[i] = f64::from(u8::from(label));
        }
        Ok(Self { n, d, x, y })
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self { n: idx.len(), d: self.d, x: self.x.select_rows(idx), y: self.y.select_rows(idx) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Linear predictors of every row into `out`.
    fn eta_into(&self, theta: &[f64], out: &mut DVector<f64>) {
        out.fill(theta[0]);
        let slopes = DVectorView::from_slice(&theta[1..], self.d);
        out.gemv(1.0, &self.x, &slopes, 1.0);
    }

    fn etas(&self, theta: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.eta_into(theta, &mut out);
        out
    }

    fn positive_rate(&self) -> f64 {
        self.y.sum() / self.n as f64
    }

    /// Largest eigenvalue of `X'X / n` (intercept column included).
    fn gram_spectral_bound(&self) -> f64 {
        let p = self.d + 1;
        let mut g = DMatrix::<f64>::zeros(p, p);
        g[(0, 0)] = self.n as f64;
        for j in 0..self.d {
            let s = self.x.column(j).sum();
            g[(0, j + 1)] = s;
            g[(j + 1, 0)] = s;
        }
        g.view_mut((1, 1), (self.d, self.d)).gemm_tr(1.0, &self.x, &self.x, 0.0);
        g /= self.n as f64;
        // Power iteration from the all-ones start; 1.01 slack covers the residual.
        let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..100 {
            let w = &g * &v;
            let norm = w.norm();
            if norm == 0.0 {
                return 1.0;
            }
            v = w / norm;
            let done = (norm - lambda).abs() <= 1e-10 * norm;
            lambda = norm;
            if done {
                break;
            }
        }
        lambda * 1.01
    }

    /// Smallest lambda at which every slope is exactly zero.
    fn lambda_max(&self) -> f64 {
        let ybar = self.positive_rate();
        let r = self.y.add_scalar(-ybar);
        let g = self.x.tr_mul(&r);
        g.iter().map(|v| (v / self.n as f64).abs()).fold(0.0, f64::max)
    }
}

/// Mean log-loss `(1/n) sum log(1 + e^eta) - y eta`.
pub fn mean_log_loss(design: &Design, theta: &[f64]) -> f64 {
    let eta = design.etas(theta);
    eta.iter().zip(design.y.iter()).map(|(&e, &y)| softplus(e) - y * e).sum::<f64>() / design.n as f64
}

/// Gradient of [`mean_log_loss`] with respect to `theta` (intercept first).
pub fn log_loss_gradient(design: &Design, theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; design.d + 1];
    gradient_into(design, theta, &mut g, &mut DVector::zeros(design.n));
    g
}

/// `scratch` must hold `n` entries; it is overwritten with the residuals.
fn gradient_into(design: &Design, theta: &[f64], g: &mut [f64], scratch: &mut DVector<f64>) {
    design.eta_into(theta, scratch);
    for (r, &y) in scratch.iter_mut().zip(design.y.iter()) {
        *r = logistic(*r) - y;
    }
    let inv = 1.0 / design.n as f64;
    g[0] = scratch.sum() * inv;
    let mut slopes = DVectorViewMut::from_slice(&mut g[1..], design.d);
    slopes.gemv_tr(inv, &design.x, scratch, 0.0);
}

pub fn penalized_objective(design: &Design, theta: &[f64], lambda: f64) -> f64 {
    mean_log_loss(design, theta) + lambda * theta[1..].iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
struct Solution {
    theta: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn null_solution(design: &Design) -> Vec<f64> {
    let mut theta = vec![0.0; design.d + 1];
    let p = design.positive_rate().clamp(1e-12, 1.0 - 1e-12);
    theta[0] = logit(p);
    theta
}

fn solve(design: &Design, lambda: f64, lipschitz: f64, lambda_max: f64, warm: Option<&[f64]>, opts: &FitOptions) -> Solution {
    if lambda >= lambda_max {
        return Solution { theta: null_solution(design), iterations: 0, converged: true };
    }
    let p = design.d + 1;
    let step = 1.0 / (0.25 * lipschitz);
    let thresh = lambda * step;
    let mut x_prev = warm.map(<[f64]>::to_vec).unwrap_or_else(|| null_solution(design));
    let mut y = x_prev.clone();
    let mut x = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut scratch = DVector::zeros(design.n);
    let mut t = 1.0f64;
    for it in 1..=opts.max_iter {
        gradient_into(design, &y, &mut g, &mut scratch);
        x[0] = y[0] - step * g[0];
        for j in 1..p {
            x[j] = soft_threshold(y[j] - step * g[j], thresh);
        }
        let change = x.iter().zip(&x_prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change < opts.tol {
            return Solution { theta: x, iterations: it, converged: true };
        }
        let restart: f64 = y.iter().zip(&x).zip(&x_prev).map(|((yv, xv), pv)| (yv - xv) * (xv - pv)).sum();
        if restart > 0.0 {
            t = 1.0;
            y.copy_from_slice(&x);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mom = (t - 1.0) / t_next;
            for j in 0..p {
                y[j] = x[j] + mom * (x[j] - x_prev[j]);
            }
            t = t_next;
        }
        std::mem::swap(&mut x_prev, &mut x);
    }
    log::warn!("proximal gradient did not converge in {} iterations (lambda = {lambda:e})", opts.max_iter);
    Solution { theta: x_prev, iterations: opts.max_iter, converged: false }
}

/// Fit at a single penalty on `data` as given (no balancing, no CV).
pub fn fit_fixed_penalty(data: &TrainingSet, lambda: f64, opts: &FitOptions) -> Result<FittedGLM> {
    let design = Design::from_training(data)?;
    let sol = solve(&design, lambda, design.gram_spectral_bound(), design.lambda_max(), None, opts);
    Ok(finish(&design, sol, lambda))
}

fn finish(design: &Design, sol: Solution, lambda: f64) -> FittedGLM {
    let log_loss = mean_log_loss(design, &sol.theta);
    let scores: Vec<f64> = design.etas(&sol.theta).iter().copied().collect();
    let labels: Vec<bool> = design.y.iter().map(|&v| v > 0.5).collect();
    let auc = roc_auc(&scores, &labels).ok();
    let d = design.d;
    FittedGLM {
        theta: sol.theta,
        penalty: lambda,
        feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        diagnostics: TrainDiagnostics {
            log_loss,
            auc,
            n_train: design.n,
            iterations: sol.iterations,
            converged: sol.converged,
        },
    }
}

/// Undersample the majority label to the minority count. Rows keep their
/// original relative order.
pub fn balanced_subsample(data: &TrainingSet, seed: u64) -> Result<TrainingSet> {
    let pos: Vec<usize> = (0..data.len()).filter(|&i| data.rows()[i].label).collect();
    let neg: Vec<usize> = (0..data.len()).filter(|&i| !data.rows()[i].label).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass(data.len()));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = rng_for(seed, "balance", 0);
    let mut keep: Vec<usize> = index::sample(&mut rng, majority.len(), minority.len())
        .into_iter()
        .map(|k| majority[k])
        .collect();
    keep.extend(minority);
    keep.sort_unstable();
    Ok(TrainingSet::from_rows(keep.into_iter().map(|i| data.rows()[i].clone()).collect()))
}

fn assign_folds(design: &Design, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    for attempt in 0..MAX_FOLD_ATTEMPTS {
        let mut order: Vec<usize> = (0..design.n).collect();
        order.shuffle(&mut rng_for(seed, "folds", attempt as u64));
        let mut assignment = vec![Vec::new(); folds];
        for (pos, &i) in order.iter().enumerate() {
            assignment[pos % folds].push(i);
        }
        let ok = (0..folds).all(|f| {
            let train_pos = (0..folds)
                .filter(|&g| g != f)
                .flat_map(|g| assignment[g].iter())
                .filter(|&&i| design.y[i] > 0.5)
                .count();
            let train_n: usize = (0..folds).filter(|&g| g != f).map(|g| assignment[g].len()).sum();
            !assignment[f].is_empty() && train_pos > 0 && train_pos < train_n
        });
        if ok {
            return Ok(assignment);
        }
    }
    Err(Error::Folds(MAX_FOLD_ATTEMPTS))
}

fn validation_loss(design: &Design, theta: &[f64]) -> f64 {
    const CLIP: f64 = 1e-15;
    let eta = design.etas(theta);
    eta.iter()
        .zip(design.y.iter())
        .map(|(&e, &y)| {
            let p = logistic(e).clamp(CLIP, 1.0 - CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / design.n as f64
}

/// Balance (optionally), pick the penalty by cross-validated log-loss, and
/// refit on the whole (balanced) sample at the chosen penalty.
pub fn fit_l1_logistic(data: &TrainingSet, opts: &FitOptions, seed: u64) -> Result<FittedGLM> {
    opts.validate()?;
    if !data.has_both_classes() {
        return Err(Error::SingleClass(data.len()));
    }
    let sample = if opts.balance { balanced_subsample(data, seed)? } else { data.clone() };
    if sample.len() < 2 * opts.folds {
        return Err(Error::TooFewRows { need: 2 * opts.folds, have: sample.len() });
    }
    let design = Design::from_training(&sample)?;

    let mut grid = opts.penalty_grid.clone();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let chosen = if grid.len() == 1 {
        grid[0]
    } else {
        let folds = assign_folds(&design, opts.folds, seed)?;
        let mut cv = vec![0.0; grid.len()];
        for f in 0..opts.folds {
            let train_idx: Vec<usize> =
                (0..opts.folds).filter(|&g| g != f).flat_map(|g| folds[g].iter().copied()).collect();
            let train = design.subset(&train_idx);
            let valid = design.subset(&folds[f]);
            let lip = train.gram_spectral_bound();
            let lmax = train.lambda_max();
            let mut warm: Option<Vec<f64>> = None;
            for (k, &lambda) in grid.iter().enumerate() {
                let sol = solve(&train, lambda, lip, lmax, warm.as_deref(), opts);
                cv[k] += validation_loss(&valid, &sol.theta) / opts.folds as f64;
                warm = Some(sol.theta);
            }
        }
        // Ties resolve toward the larger penalty (earlier in descending order).
        let mut best = 0;
        for k in 1..grid.len() {
            if cv[k] < cv[best] {
                best = k;
            }
        }
        grid[best]
    };

    let lip = design.gram_spectral_bound();
    let lmax = design.lambda_max();
    let mut warm: Option<Vec<f64>> = None;
    let mut last = None;
    for &lambda in grid.iter().filter(|&&l| l >= chosen) {
        let sol = solve(&design, lambda, lip, lmax, warm.as_deref(), opts);
        warm = Some(sol.theta.clone());
        last = Some(sol);
    }
    let sol = last.expect("chosen penalty is on the grid");
    Ok(finish(&design, sol, chosen))
}
