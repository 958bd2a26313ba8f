use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use screening_core::eval::{
    agreement_table, composition_report, effective_sample_size, hajek_mean, human_realized_yield, ipw_yield,
    policy_ipw, propensities, yield_time_series, IpwObservation, Normalization, PropensitySource, SelectionHistory,
    YieldOptions,
};
use screening_core::glm::logistic;
use screening_core::scenario::Scenario;
use screening_core::sim::{run_experiment, ExperimentConfig, PolicySpec};

/// One synthetic pool: the policy takes everyone with `x > 0.5`, the human
/// interviews with known probability `logistic(-1.5 + x)`.
fn ipw_draw(seed: u64, normalization: Normalization) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    let (mut hits, mut n_ml) = (0usize, 0usize);
    for _ in 0..4000 {
        let x: f64 = rng.sample(StandardNormal);
        let y = rng.random_bool(logistic(-1.0 + 0.8 * x));
        let p = logistic(-1.5 + x);
        let ml = x > 0.5;
        if ml {
            n_ml += 1;
            hits += usize::from(y);
        }
        if rng.random_bool(p) {
            obs.push(IpwObservation { outcome: y, ml_selected: ml, propensity: p });
        }
    }
    let est = ipw_yield(&obs, obs.len(), n_ml, normalization, 0.0).unwrap();
    (est.point, hits as f64 / n_ml as f64)
}

#[test]
fn ipw_with_true_propensities_is_unbiased() {
    for normalization in [Normalization::HorvitzThompson, Normalization::Hajek] {
        let errors: Vec<f64> = (0..200).map(|s| ipw_draw(s, normalization)).map(|(e, o)| e - o).collect();
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        assert!(mean.abs() <= 2.0 * se, "{normalization:?}: mean error {mean} vs 2 SE {}", 2.0 * se);
    }
}

proptest! {
    #[test]
    fn hajek_ignores_weight_scale(
        cells in prop::collection::vec((0.01f64..100.0, any::<bool>()), 1..60),
        exponent in -20i32..20,
        c in 1e-3f64..1e3,
    ) {
        let (w, y): (Vec<f64>, Vec<bool>) = cells.into_iter().unzip();
        let base = hajek_mean(&w, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let pow2 = 2f64.powi(exponent);
        let scaled: Vec<f64> = w.iter().map(|v| v * pow2).collect();
        prop_assert_eq!(hajek_mean(&scaled, &y).unwrap(), base);
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        prop_assert!((hajek_mean(&scaled, &y).unwrap() - base).abs() <= 1e-12);
        let ess = effective_sample_size(&w);
        prop_assert!(ess <= w.len() as f64 * (1.0 + 1e-12) && ess >= 1.0 - 1e-12);
    }

    #[test]
    fn agreement_cells_partition_each_selection(
        rows in prop::collection::vec((0u8..10, 0u8..10, any::<bool>()), 4..60),
    ) {
        let a: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
        let b: Vec<f64> = rows.iter().map(|r| f64::from(r.1)).collect();
        let y: Vec<bool> = rows.iter().map(|r| r.2).collect();
        for row in agreement_table(&a, &b, &y, &[0.25, 0.5, 0.75]).unwrap() {
            prop_assert_eq!(row.n_both + row.n_a_only, row.k);
            prop_assert_eq!(row.n_both + row.n_b_only, row.k);
        }
    }

    #[test]
    fn composition_shares_sum_to_one(
        pool in prop::collection::vec(0usize..4, 1..200),
        picks in prop::collection::vec(prop::collection::vec(0usize..4, 1..50), 1..4),
    ) {
        let selected: Vec<(String, Vec<usize>)> = picks.into_iter().enumerate().map(|(i, g)| (format!("p{i}"), g)).collect();
        for row in composition_report(&selected, &pool, 4).unwrap() {
            prop_assert!((row.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.difference.iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}

#[test]
fn agreement_matches_enumeration_on_eight_items() {
    let a = [0.9, 0.2, 0.7, 0.4, 0.1, 0.8, 0.3, 0.6];
    let b = [0.5, 0.9, 0.8, 0.1, 0.7, 0.2, 0.6, 0.3];
    let y = [true, false, true, true, false, false, true, false];
    let rows = agreement_table(&a, &b, &y, &[0.25, 0.5, 0.75]).unwrap();
    for row in rows {
        let top = |s: &[f64]| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..8).collect();
            idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
            idx.truncate(row.k);
            idx
        };
        let (ta, tb) = (top(&a), top(&b));
        let both: Vec<usize> = ta.iter().copied().filter(|i| tb.contains(i)).collect();
        let a_only: Vec<usize> = ta.iter().copied().filter(|i| !tb.contains(i)).collect();
        let b_only: Vec<usize> = tb.iter().copied().filter(|i| !ta.contains(i)).collect();
        let mean = |v: &[usize]| (!v.is_empty()).then(|| v.iter().filter(|&&i| y[i]).count() as f64 / v.len() as f64);
        assert_eq!(row.k, (row.quantile * 8.0) as usize);
        assert_eq!((row.n_both, row.n_a_only, row.n_b_only), (both.len(), a_only.len(), b_only.len()));
        assert_eq!(row.agree_share, both.len() as f64 / row.k as f64);
        assert_eq!((row.yield_both, row.yield_a_only, row.yield_b_only), (mean(&both), mean(&a_only), mean(&b_only)));
        assert!(!row.tie_fallback);
    }

    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let rows = agreement_table(&a[..4], &neg[..4], &y[..4], &[0.5]).unwrap();
    assert_eq!(rows[0].agree_share, 0.0);
    let rows = agreement_table(&a, &a, &y, &[0.5]).unwrap();
    assert_eq!(rows[0].agree_share, 1.0);
    assert_eq!((rows[0].yield_a_only, rows[0].yield_b_only), (None, None));
}

#[test]
fn final_cumulative_yield_equals_the_pooled_estimate() {
    let (pop, _) = Scenario { n_applicants: 6000, ..Scenario::reference() }.with_seed(3).build().unwrap();
    let log = run_experiment(&pop, &[PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 1.96)], &ExperimentConfig::new(3)).unwrap();
    let history = SelectionHistory::from_log(&log);
    let opts = YieldOptions::default();
    for source in [PropensitySource::Estimated, PropensitySource::GroundTruth] {
        let props = propensities(&pop.applicants, &log.human_model, source).unwrap();
        let series = yield_time_series(&history, &pop.applicants, &props, &opts).unwrap();
        for (p, ph) in history.policies.iter().enumerate() {
            let last = series.iter().filter(|pt| pt.policy == ph.name).next_back().unwrap();
            let pooled = policy_ipw(&history, p, &pop.applicants, &props, &opts).unwrap();
            assert_eq!(last.cumulative_ipw, Some(pooled.point));
            assert_eq!(last.cumulative_human, Some(human_realized_yield(&history, &pop.applicants).unwrap()));
            let ids = ph.selected_ids();
            let oracle = ids.iter().filter(|&&id| pop.applicants[id as usize].potential_outcome).count() as f64 / ids.len() as f64;
            assert_eq!(last.cumulative_oracle, oracle);
            assert!((last.rolling_shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
