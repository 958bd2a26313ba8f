//! Centered scatter matrix of the training covariates and the exploration
//! bonus `sqrt((x - xbar)' V^-1 (x - xbar))` built on it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::FittedGLM;
use crate::error::{Error, Result};

/// Diagonal stabilizer added to the scatter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Ridge {
    Fixed(f64),
    /// `scale * max(trace(V) / d, 1)`.
    TraceScaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::TraceScaled(1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BonusParams {
    pub alpha: f64,
}

impl Default for BonusParams {
    fn default() -> Self {
        Self { alpha: 1.96 }
    }
}

impl BonusParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrecisionState {
    v: DMatrix<f64>,
    x_bar: DVector<f64>,
    ridge: f64,
    n_obs: usize,
    factor: Cholesky<f64, Dyn>,
}

impl PartialEq for PrecisionState {
    fn eq(&self, other: &Self) -> bool {
        self.v == other.v && self.x_bar == other.x_bar && self.ridge == other.ridge && self.n_obs == other.n_obs
    }
}

impl PrecisionState {
    /// Assemble from an already-ridged `v`; factorizes eagerly.
    pub fn from_parts(v: DMatrix<f64>, x_bar: Vec<f64>, ridge: f64, n_obs: usize) -> Result<Self> {
        let d = x_bar.len();
        if v.nrows() != d || v.ncols() != d {
            return Err(Error::Dimension { expected: d, got: v.nrows() });
        }
        let factor = Cholesky::new(v.clone()).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { v, x_bar: DVector::from_vec(x_bar), ridge, n_obs, factor })
    }

    /// The ridged matrix `V + ridge * I`.
    pub fn v_matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn x_bar(&self) -> &[f64] {
        self.x_bar.as_slice()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.x_bar.len()
    }
}

/// `V = sum_j (x_j - xbar)(x_j - xbar)' + ridge * I` over the given rows.
pub fn build_precision_state<'a, I>(rows: I, ridge: Ridge) -> Result<PrecisionState>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    if rows.len() < 2 {
        return Err(Error::TooFewRows { need: 2, have: rows.len() });
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        if r.len() != d {
            return Err(Error::Dimension { expected: d, got: r.len() });
        }
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);

    let mut v = DMatrix::<f64>::zeros(d, d);
    let mut c = vec![0.0; d];
    for r in &rows {
        for j in 0..d {
            c[j] = r[j] - mean[j];
        }
        for a in 0..d {
            let ca = c[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                v[(a, b)] += ca * c[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            v[(a, b)] = v[(b, a)];
        }
    }
    let eps = match ridge {
        Ridge::Fixed(e) => e,
        Ridge::TraceScaled(s) => s * (v.trace() / d as f64).max(1.0),
    };
    if !(eps > 0.0) {
        return Err(Error::Config(format!("ridge must be positive, got {eps}")));
    }
    for j in 0..d {
        v[(j, j)] += eps;
    }
    PrecisionState::from_parts(v, mean, eps, rows.len())
}

/// `sqrt((x - xbar)' V^-1 (x - xbar))`, solved through the Cholesky factor.
pub fn exploration_bonus(state: &PrecisionState, x: &[f64]) -> Result<f64> {
    if x.len() != state.dim() {
        return Err(Error::Dimension { expected: state.dim(), got: x.len() });
    }
    let diff = DVector::from_iterator(x.len(), x.iter().zip(state.x_bar.iter()).map(|(a, b)| a - b));
    let solved = state.factor.solve(&diff);
    let q = diff.dot(&solved);
    if !q.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(q.max(0.0).sqrt())
}

/// Predicted probability plus `alpha` times the exploration bonus.
pub fn ucb_score(model: &FittedGLM, state: &PrecisionState, params: &BonusParams, x: &[f64]) -> Result<f64> {
    let belief = model.predict_probability(x)?;
    if params.alpha == 0.0 {
        return Ok(belief);
    }
    Ok(belief + params.alpha * exploration_bonus(state, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(rows: &[Vec<f64>], ridge: Ridge) -> PrecisionState {
        build_precision_state(rows.iter().map(Vec::as_slice), ridge).unwrap()
    }

    #[test]
    fn two_rows_give_half_outer_product() {
        let x1 = vec![1.0, 2.0, -0.5];
        let x2 = vec![-1.0, 0.5, 2.5];
        let s = state(&[x1.clone(), x2.clone()], Ridge::Fixed(1e-9));
        for a in 0..3 {
            for b in 0..3 {
                let want = 0.5 * (x1[a] - x2[a]) * (x1[b] - x2[b]) + if a == b { 1e-9 } else { 0.0 };
                assert!((s.v_matrix()[(a, b)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_rows_leave_only_ridge() {
        let s = state(&vec![vec![0.3, -1.0]; 5], Ridge::Fixed(0.25));
        assert_eq!(s.v_matrix(), &DMatrix::from_diagonal_element(2, 2, 0.25));
    }

    #[test]
    fn one_dimensional_scatter() {
        let s = state(&[vec![-1.0], vec![0.0], vec![1.0]], Ridge::Fixed(0.1));
        assert!((s.v_matrix()[(0, 0)] - 2.1).abs() < 1e-15);
        assert_eq!(s.x_bar(), &[0.0]);
    }

    #[test]
    fn diagonal_bonus_example() {
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let s = PrecisionState::from_parts(v, vec![0.0, 0.0], 0.0, 10).unwrap();
        let b = exploration_bonus(&s, &[2.0, 3.0]).unwrap();
        assert!((b - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(exploration_bonus(&s, &[0.0, 0.0]).unwrap(), 0.0);

        let model = FittedGLM::from_theta(vec![0.0, 0.0, 0.0]);
        let score = ucb_score(&model, &s, &BonusParams::default(), &[2.0, 3.0]).unwrap();
        assert!((score - (0.5 + 1.96 * 10f64.sqrt())).abs() < 1e-12);
        assert!((score - 6.698).abs() < 5e-4);
    }

    #[test]
    fn bonus_rejects_wrong_dimension_and_short_data() {
        let s = state(&[vec![0.0, 1.0], vec![1.0, 0.0]], Ridge::default());
        assert!(exploration_bonus(&s, &[1.0]).is_err());
        assert!(build_precision_state([[1.0, 2.0].as_slice()], Ridge::default()).is_err());
    }

    #[test]
    fn trace_scaled_ridge_is_tiny_relative_to_data() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let s = state(&rows, Ridge::default());
        let tr = s.v_matrix().trace() - 2.0 * s.ridge();
        assert!((s.ridge() - 1e-6 * tr / 2.0).abs() < 1e-15);
    }
}
