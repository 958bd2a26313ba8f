use std::collections::HashSet;

use screening_core::applicant::{Applicant, FeatureLayout, Population, Provenance};
use screening_core::scenario::Scenario;
use screening_core::sim::{
    apply_drift, checkpoint_bonuses, run_experiment, score_evaluation_cohort, DriftDirection, DriftSchedule,
    ExperimentConfig, ExperimentLog, PolicySpec, UpdateMode,
};

fn scenario(n: usize, seed: u64) -> Scenario {
    Scenario { n_applicants: n, ..Scenario::reference() }.with_seed(seed)
}

fn config(seed: u64, mode: UpdateMode) -> ExperimentConfig {
    ExperimentConfig { update_mode: mode, ..ExperimentConfig::new(seed) }
}

/// One group, rounds of 1000, exactly 10% positive before any drift.
fn flat_population(rounds: usize) -> Population {
    let applicants = (0..rounds * 1000)
        .map(|i| Applicant {
            id: i as u64,
            features: vec![0.0],
            group: 0,
            female: false,
            potential_outcome: i % 10 == 0,
            offered: i % 10 == 0,
            human_interviewed: i % 2 == 0,
            screener_id: 0,
            stratum: 0,
            arrival_round: i / 1000,
            unobservable: 0.0,
            true_propensity: None,
        })
        .collect();
    Population {
        groups: vec!["only".into()],
        layout: FeatureLayout { n_groups: 1, n_continuous: 0, n_binary: 0 },
        round_size: 1000,
        applicants,
    }
}

#[test]
fn drift_reaches_its_terminal_mean_and_passes_the_midpoint() {
    let mut pop = flat_population(12);
    let schedule = DriftSchedule {
        target_group: "only".into(),
        direction: DriftDirection::Increase,
        start_round: 0,
        end_round: 10,
        terminal_mean: None,
    };
    apply_drift(&mut pop, &schedule, 1).unwrap();
    let mean = |t: usize| pop.round(t).iter().filter(|a| a.potential_outcome).count() as f64 / 1000.0;
    assert!(pop.round(10).iter().all(|a| a.potential_outcome));
    assert!((mean(5) - 0.55).abs() <= 0.05, "midpoint mean {}", mean(5));
    assert!((mean(0) - 0.1).abs() <= 0.05);
    // After the ramp nothing is redrawn.
    assert_eq!(mean(11), 0.1);
    // Uninterviewed applicants are redrawn too.
    assert!(pop.round(10).iter().filter(|a| !a.human_interviewed).all(|a| a.potential_outcome));
}

#[test]
fn drift_leaves_other_groups_alone() {
    let mut s = scenario(8000, 2);
    s.population.drift = Some(DriftSchedule {
        target_group: "black".into(),
        direction: DriftDirection::Decrease,
        start_round: 40,
        end_round: 79,
        terminal_mean: None,
    });
    let (drifted, _) = s.build().unwrap();
    s.population.drift = None;
    let (plain, _) = s.build().unwrap();
    for (a, b) in drifted.applicants.iter().zip(&plain.applicants) {
        if a.group != 1 || a.arrival_round < 40 {
            assert_eq!(a, b);
        }
        if a.group == 1 && a.arrival_round == 79 {
            assert!(!a.potential_outcome);
        }
    }
}

fn check_log_invariants(log: &ExperimentLog, pop: &Population, mode: UpdateMode) {
    let interviewed: HashSet<u64> = pop.applicants.iter().filter(|a| a.human_interviewed).map(|a| a.id).collect();
    for (pi, p) in log.policies.iter().enumerate() {
        let mut size = log.policies[pi].training.rows().iter().filter(|r| r.provenance == Provenance::Initial).count();
        for r in log.records_for(pi) {
            let arrivals = pop.round(r.round);
            let expected_capacity = arrivals.iter().filter(|a| a.human_interviewed).count().max(1);
            assert_eq!(r.capacity, expected_capacity);
            assert_eq!(r.selection.selected.len(), r.capacity);
            let revealed = match mode {
                UpdateMode::Feasible => r.selection.selected.iter().filter(|id| interviewed.contains(id)).count(),
                UpdateMode::Live => r.selection.selected.len(),
            };
            assert_eq!(r.appended, revealed);
            assert!(r.training_size >= size);
            assert_eq!(r.training_size, size + r.appended);
            size = r.training_size;
        }
        let want = match mode {
            UpdateMode::Feasible => Provenance::FeasibleUpdate,
            UpdateMode::Live => Provenance::LiveUpdate,
        };
        for row in p.training.rows().iter().filter(|r| r.provenance != Provenance::Initial) {
            assert_eq!(row.provenance, want);
            if mode == UpdateMode::Feasible {
                assert!(interviewed.contains(&row.applicant_id));
            }
        }
    }
}

#[test]
fn logs_meet_capacity_and_grow_by_the_revealed_rows() {
    let (pop, _) = scenario(6000, 3).build().unwrap();
    let policies = [PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 1.96)];
    for mode in [UpdateMode::Feasible, UpdateMode::Live] {
        let log = run_experiment(&pop, &policies, &config(3, mode)).unwrap();
        check_log_invariants(&log, &pop, mode);
    }
}

#[test]
fn feasible_rows_of_a_shared_first_round_are_contained_in_live_rows() {
    let (pop, _) = scenario(6000, 4).build().unwrap();
    let policies = [PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 1.96)];
    let mut cfg = config(4, UpdateMode::Feasible);
    cfg.max_rounds = Some(1);
    let feasible = run_experiment(&pop, &policies, &cfg).unwrap();
    cfg.update_mode = UpdateMode::Live;
    let live = run_experiment(&pop, &policies, &cfg).unwrap();
    for pi in 0..policies.len() {
        let f: HashSet<u64> = feasible.policies[pi].training.rows().iter().map(|r| r.applicant_id).collect();
        let l: HashSet<u64> = live.policies[pi].training.rows().iter().map(|r| r.applicant_id).collect();
        assert!(f.is_subset(&l));
        assert!(f.len() <= l.len());
    }
}

#[test]
fn zero_alpha_ucb_reproduces_sl() {
    let (pop, _) = scenario(6000, 5).build().unwrap();
    let log = run_experiment(&pop, &[PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 0.0)], &config(5, UpdateMode::Live)).unwrap();
    let sl: Vec<_> = log.records_for(0).collect();
    let ucb: Vec<_> = log.records_for(1).collect();
    assert_eq!(sl.len(), ucb.len());
    for (a, b) in sl.iter().zip(&ucb) {
        assert_eq!(a.selection.selected, b.selection.selected);
        assert_eq!(a.appended, b.appended);
        for (x, y) in a.selection.scores.iter().zip(&b.selection.scores) {
            assert_eq!((x.applicant_id, x.score, x.belief), (y.applicant_id, y.score, y.belief));
        }
    }
    assert_eq!(log.policies[0].training, log.policies[1].training);
    let final_round = log.analysis_rounds;
    assert_eq!(log.checkpoint(0, final_round).unwrap().model, log.checkpoint(1, final_round).unwrap().model);
}

#[test]
fn a_policy_that_never_meets_an_interviewee_never_learns() {
    let (mut pop, _) = scenario(6000, 6).build().unwrap();
    let split = pop.applicants.len() / 2;
    for a in &mut pop.applicants[split..] {
        a.human_interviewed = false;
    }
    let policies = [PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 1.96)];
    let log = run_experiment(&pop, &policies, &config(6, UpdateMode::Feasible)).unwrap();
    for pi in 0..policies.len() {
        let initial = log.policies[pi].training.len();
        assert!(log.records_for(pi).all(|r| r.appended == 0 && r.training_size == initial && !r.refit));
        // With no updates every checkpoint scores a cohort identically.
        let cohort = &pop.applicants[..500];
        let checkpoints: Vec<usize> = (0..=log.analysis_rounds).collect();
        let replay = score_evaluation_cohort(&log, pi, cohort, &checkpoints, 30).unwrap();
        assert!(replay.rows.windows(2).all(|w| w[0].scores == w[1].scores));
    }
}

#[test]
fn bonuses_shrink_as_data_accumulates() {
    let (pop, _) = scenario(8000, 7).build().unwrap();
    let log = run_experiment(&pop, &[PolicySpec::ucb("ucb", 1.96)], &config(7, UpdateMode::Live)).unwrap();
    let cohort = &pop.applicants[pop.applicants.len() - 1000..];
    let median = |round: usize| {
        let mut b = checkpoint_bonuses(log.checkpoint(0, round).unwrap(), &log.policies[0].mask, cohort).unwrap();
        b.sort_by(f64::total_cmp);
        b[b.len() / 2]
    };
    assert!(median(log.analysis_rounds) < median(0));
}

#[test]
fn live_sl_moves_toward_the_true_coefficients() {
    let seeds = 20;
    let mut closer = 0;
    for seed in 0..seeds {
        let mut s = scenario(40_000, 300 + seed);
        // A wider screen gives the large-sample regime within one run.
        s.screening.interview_rate = 0.3;
        let (pop, _) = s.build().unwrap();
        // A fixed small penalty isolates estimation error from the penalty choice.
        let mut cfg = config(seed, UpdateMode::Live);
        cfg.fit.penalty_grid = vec![1e-3];
        let log = run_experiment(&pop, &[PolicySpec::sl("sl")], &cfg).unwrap();
        let truth = &s.population.true_theta;
        let dist = |round: usize| {
            let theta = &log.checkpoint(0, round).unwrap().model.theta;
            theta[1..].iter().zip(&truth[1..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        closer += usize::from(dist(log.analysis_rounds) < dist(0));
    }
    assert!(closer as f64 >= 0.95 * seeds as f64, "{closer}/{seeds}");
}

#[test]
fn runs_are_deterministic() {
    let (pop, _) = scenario(4000, 8).build().unwrap();
    let policies = [PolicySpec::sl("sl"), PolicySpec::ucb("ucb", 1.96)];
    let a = run_experiment(&pop, &policies, &config(8, UpdateMode::Feasible)).unwrap();
    let b = run_experiment(&pop, &policies, &config(8, UpdateMode::Feasible)).unwrap();
    assert_eq!(a, b);
}
