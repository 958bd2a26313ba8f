use screening_cli::RunConfig;
use screening_core::sim::{DriftDirection, DriftSchedule, UpdateMode};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    let mut cfg = RunConfig::default();
    match which.as_str() {
        "drift" => {
            cfg.scenario.n_applicants = 24_000;
            cfg.scenario.population.drift = Some(DriftSchedule {
                target_group: "black".into(),
                direction: DriftDirection::Increase,
                start_round: 120,
                end_round: 219,
                terminal_mean: None,
            });
            cfg.experiment.update_mode = UpdateMode::Live;
            cfg.experiment.checkpoint_every = 1;
            cfg.experiment.max_rounds = Some(100);
            cfg.replay.cohort_rounds = 20;
        }
        "iv" => {
            cfg.scenario.n_applicants = 20_000;
            cfg.scenario.population.unobservable_weight = 2.0;
            cfg.scenario.screening.strict_unobservable_weight = 2.0;
        }
        _ => {}
    }
    print!("{}", cfg.canonical().unwrap());
}
