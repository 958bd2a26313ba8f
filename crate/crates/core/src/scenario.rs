//! A complete synthetic environment: applicant generator, human screen and
//! optional outcome drift, plus the reference parameterization used by the
//! command-line defaults.

use serde::{Deserialize, Serialize};

use crate::applicant::{generate_population, simulate_human_screening, GroupSpec, Population, PopulationSpec, ScreenerPanel, ScreeningSpec};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::apply_drift;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_applicants: usize,
    pub round_size: usize,
    pub population: PopulationSpec,
    pub screening: ScreeningSpec,
}

impl Scenario {
    /// Same scenario with every random stream keyed by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.population.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_applicants == 0 || self.round_size == 0 {
            return Err(Error::Config("n_applicants and round_size must be positive".into()));
        }
        self.population.validate()?;
        self.screening.validate(self.population.layout().dim())
    }

    /// Generate applicants, run the human screen, then apply any drift.
    pub fn build(&self) -> Result<(Population, ScreenerPanel)> {
        self.validate()?;
        let seed = self.population.seed;
        let mut pop = generate_population(&self.population, self.n_applicants, self.round_size)?;
        let panel = simulate_human_screening(&mut pop, &self.screening, derive_seed(seed, "human-screen", 0))?;
        if let Some(drift) = &self.population.drift {
            apply_drift(&mut pop, drift, derive_seed(seed, "drift-apply", 0))?;
        }
        Ok((pop, panel))
    }

    /// Four groups with the applicant-pool shares of a large professional
    /// services recruiter (Asian, Black, Hispanic, White), 16 standardized
    /// continuous and 10 binary covariates.
    ///
    /// Outcomes depend on covariates but not on group. Human screeners weigh
    /// covariates that barely predict hiring (`c8..c11`), on which the Black
    /// and Hispanic groups score lower, and penalize those groups slightly.
    pub fn reference() -> Self {
        const NC: usize = 16;
        const NB: usize = 10;
        let group = |name: &str, share: f64, quality_shift: f64, human_shift: f64| {
            let mut continuous_mean = vec![0.0; NC];
            for m in continuous_mean.iter_mut().take(4) {
                *m = quality_shift;
            }
            for m in continuous_mean.iter_mut().skip(8).take(4) {
                *m = human_shift;
            }
            GroupSpec {
                name: name.into(),
                share,
                female_rate: 0.332,
                continuous_mean,
                continuous_cov: None,
                binary_rates: vec![0.3; NB],
            }
        };
        let groups = vec![
            group("asian", 0.581, 0.0, 0.0),
            group("black", 0.087, -0.2, -0.5),
            group("hispanic", 0.042, -0.2, -0.5),
            group("white", 0.290, 0.0, 0.1),
        ];
        // Layout: 3 group dummies, female, c0..c15, b0..b9.
        let d = 3 + 1 + NC + NB;
        let mut true_theta = vec![0.0; d + 1];
        true_theta[0] = -2.6;
        let c = 1 + 4;
        for (j, w) in [0.5, 0.4, 0.3, 0.25, 0.2, -0.2, 0.15, 0.15].into_iter().enumerate() {
            true_theta[c + j] = w;
        }
        let b = c + NC;
        for (j, w) in [0.3, 0.2, -0.25, 0.15].into_iter().enumerate() {
            true_theta[b + j] = w;
        }

        let mut human_theta = vec![0.0; d + 1];
        human_theta[1] = -0.2;
        human_theta[2] = -0.2;
        for (j, w) in [0.2, 0.2, 0.1, 0.1].into_iter().enumerate() {
            human_theta[c + j] = w;
        }
        for j in 8..12 {
            human_theta[c + j] = 0.3;
        }
        human_theta[b + 4] = 0.3;
        human_theta[b + 5] = 0.2;

        Scenario {
            n_applicants: 40_000,
            round_size: 100,
            population: PopulationSpec {
                groups,
                n_continuous: NC,
                n_binary: NB,
                true_theta,
                unobservable_weight: 0.0,
                offer_extra_rate: 0.05,
                drift: None,
                seed: 1,
            },
            screening: ScreeningSpec {
                human_theta,
                screeners: 60,
                leniency_sd: 0.5,
                interview_rate: 0.054,
                unobservable_weight: 0.0,
                strict_unobservable_weight: 0.0,
                n_strata: 4,
            },
        }
    }
}
