//! Logistic GLM machinery: L1-penalized fitting, UCB exploration bonuses and
//! ranking metrics.

mod kv;
mod logistic;
mod metrics;
mod precision;

pub use kv::{parse_kv, KvRecord};
pub use logistic::{
    balanced_subsample, default_penalty_grid, fit_fixed_penalty, fit_l1_logistic, log_loss_gradient, mean_log_loss,
    penalized_objective, Design, FitOptions, FittedGLM, TrainDiagnostics,
};
pub use metrics::{confusion_at_k, roc_auc, top_k_order, Confusion};
pub use precision::{build_precision_state, exploration_bonus, ucb_score, BonusParams, PrecisionState, Ridge};

/// Numerically stable logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
