//! Subcommand implementations. Each command writes a fresh directory and
//! returns its path.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rayon::prelude::*;

use screening_core::applicant::{read_population, write_population, Applicant, Population, ScreenerPanel};
use screening_core::eval::{
    agreement_table, common_support, composition_report, human_realized_yield, id_index, policy_ipw, propensities,
    yield_time_series, Normalization, PolicyHistory, PropensitySource, SelectionHistory, YieldOptions, SUPPORT_BINS,
};
use screening_core::glm::{FittedGLM, KvRecord};
use screening_core::iv::{
    balance_check, build_instrument, complier_outcomes, feature_covariates, monotonicity_suite, ols, RegressionSpec,
};
use screening_core::policy::fit_outcome_model;
use screening_core::rng::derive_seed;
use screening_core::sim::{run_experiment, score_evaluation_cohort, training_rounds, ExperimentLog};

use crate::config::RunConfig;
use crate::output::{
    create_fresh, create_run_dir, finish_dir, fmt, fmt_opt, merge_tables, read_table, seed_dir, seed_dirs, write_table,
    CONFIG,
};

fn base_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone())
}

fn for_each_seed<F>(run: &Path, seeds: &[u64], f: F) -> anyhow::Result<()>
where
    F: Fn(u64, &Path) -> anyhow::Result<()> + Sync,
{
    seeds.par_iter().try_for_each(|&seed| {
        let dir = seed_dir(run, seed);
        fs::create_dir_all(&dir)?;
        f(seed, &dir).with_context(|| format!("seed {seed}"))
    })
}

fn simulate(cfg: &RunConfig, seed: u64) -> anyhow::Result<(Population, ScreenerPanel)> {
    Ok(cfg.scenario_for(seed).build()?)
}

fn write_population_files(dir: &Path, cfg: &RunConfig, pop: &Population, panel: &ScreenerPanel) -> anyhow::Result<()> {
    let file = fs::File::create(dir.join("population.csv"))?;
    write_population(pop, cfg.experiment.round.outcome_label, std::io::BufWriter::new(file))?;

    let truth: Vec<Vec<String>> = pop
        .applicants
        .iter()
        .map(|a| vec![a.id.to_string(), fmt_opt(a.true_propensity)])
        .collect();
    write_table(&dir.join("propensity_truth.csv"), &["id", "p_interview"], &truth)?;

    let mut caseload = vec![(0usize, 0usize); panel.leniency.len()];
    for a in &pop.applicants {
        let c = &mut caseload[a.screener_id as usize];
        c.0 += 1;
        c.1 += usize::from(a.human_interviewed);
    }
    let n_strata = cfg.scenario.screening.n_strata;
    let rows: Vec<Vec<String>> = panel
        .leniency
        .iter()
        .enumerate()
        .map(|(k, l)| {
            vec![
                k.to_string(),
                (k as u32 % n_strata).to_string(),
                fmt(*l),
                u8::from(panel.strict[k]).to_string(),
                caseload[k].0.to_string(),
                caseload[k].1.to_string(),
            ]
        })
        .collect();
    write_table(
        &dir.join("screeners.csv"),
        &["screener_id", "stratum", "leniency", "strict", "caseload", "interviews"],
        &rows,
    )
}

pub fn cmd_generate(cfg: &RunConfig, out: Option<&Path>, seeds: &[u64]) -> anyhow::Result<PathBuf> {
    let run = create_run_dir(&base_dir(cfg, out), &cfg.hash()?)?;
    for_each_seed(&run, seeds, |seed, dir| {
        let (pop, panel) = simulate(cfg, seed)?;
        write_population_files(dir, cfg, &pop, &panel)
    })?;
    finish_dir(&run, "generate", cfg, seeds)?;
    Ok(run)
}

fn group_share_header(groups: &[String], prefix: &str) -> Vec<String> {
    groups.iter().map(|g| format!("{prefix}{g}")).collect()
}

fn shares(groups: impl Iterator<Item = usize>, n_groups: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_groups];
    let mut n = 0usize;
    for g in groups {
        counts[g] += 1;
        n += 1;
    }
    counts.into_iter().map(|c| c as f64 / n.max(1) as f64).collect()
}

fn write_log(dir: &Path, pop: &Population, log: &ExperimentLog) -> anyhow::Result<()> {
    let label = log.outcome_label;
    let index = id_index(&pop.applicants);
    let names: Vec<&str> = log.policies.iter().map(|p| p.spec.name.as_str()).collect();

    let mut rounds = Vec::new();
    let mut selections = Vec::new();
    let mut scores = Vec::new();
    for r in &log.rounds {
        let policy = names[r.policy];
        rounds.push(vec![
            r.round.to_string(),
            policy.to_string(),
            r.capacity.to_string(),
            r.appended.to_string(),
            r.training_size.to_string(),
            u8::from(r.refit).to_string(),
            fmt(r.penalty),
            fmt(r.mean_bonus()),
            r.refit_error.clone().unwrap_or_default(),
        ]);
        for (rank, id) in r.selection.selected.iter().enumerate() {
            selections.push(vec![r.round.to_string(), policy.to_string(), rank.to_string(), id.to_string()]);
        }
        for s in &r.selection.scores {
            scores.push(vec![
                r.round.to_string(),
                policy.to_string(),
                s.applicant_id.to_string(),
                fmt(s.score),
                fmt(s.belief),
                fmt(s.bonus),
                u8::from(r.selection.is_selected(s.applicant_id)).to_string(),
            ]);
        }
    }
    write_table(
        &dir.join("rounds.csv"),
        &["round", "policy", "capacity", "appended", "training_size", "refit", "penalty", "mean_bonus", "refit_error"],
        &rounds,
    )?;
    write_table(&dir.join("selections.csv"), &["round", "policy", "rank", "applicant_id"], &selections)?;
    write_table(
        &dir.join("scores.csv"),
        &["round", "policy", "applicant_id", "score", "belief", "bonus", "selected"],
        &scores,
    )?;

    fs::write(dir.join("human_model.kv"), log.human_model.to_kv())?;
    for p in &log.policies {
        let cp_dir = dir.join("checkpoints").join(&p.spec.name);
        fs::create_dir_all(&cp_dir)?;
        for (round, cp) in &p.checkpoints {
            fs::write(cp_dir.join(format!("{round:04}.kv")), cp.model.to_kv())?;
            if let Some(state) = &cp.precision {
                fs::write(cp_dir.join(format!("{round:04}.precision.kv")), state.to_kv())?;
            }
        }
    }

    let start = log.first_analysis_round();
    let end = start + log.analysis_rounds;
    let mut summary = Vec::new();
    let human: Vec<&Applicant> = pop
        .applicants
        .iter()
        .filter(|a| a.human_interviewed && (start..end).contains(&a.arrival_round))
        .collect();
    let mut row = vec!["human".to_string(), human.len().to_string()];
    row.push(fmt(human.iter().filter(|a| a.outcome(label)).count() as f64 / human.len().max(1) as f64));
    row.extend(shares(human.iter().map(|a| a.group), log.n_groups).into_iter().map(fmt));
    summary.push(row);
    for (pi, name) in names.iter().enumerate() {
        let ids = log.selected_ids(pi);
        let picked: Vec<&Applicant> = ids.iter().map(|id| &pop.applicants[index[id]]).collect();
        let mut row = vec![name.to_string(), picked.len().to_string()];
        row.push(fmt(picked.iter().filter(|a| a.outcome(label)).count() as f64 / picked.len().max(1) as f64));
        row.extend(shares(picked.iter().map(|a| a.group), log.n_groups).into_iter().map(fmt));
        summary.push(row);
    }
    let mut header = vec!["policy".to_string(), "n_selected".into(), "oracle_yield".into()];
    header.extend(group_share_header(&pop.groups, "share_"));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&dir.join("summary.csv"), &header, &summary)?;
    for w in &log.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

pub fn cmd_run(cfg: &RunConfig, out: Option<&Path>, seeds: &[u64]) -> anyhow::Result<PathBuf> {
    let run = create_run_dir(&base_dir(cfg, out), &cfg.hash()?)?;
    for_each_seed(&run, seeds, |seed, dir| {
        let (pop, panel) = simulate(cfg, seed)?;
        write_population_files(dir, cfg, &pop, &panel)?;
        let log = run_experiment(&pop, &cfg.policies, &cfg.experiment.to_config(seed))?;
        write_log(dir, &pop, &log)
    })?;
    merge_tables(&run, &seed_dirs(&run)?, "summary.csv", Path::new("summary.csv"))?;
    finish_dir(&run, "run", cfg, seeds)?;
    Ok(run)
}

/// Everything `evaluate` needs from one seed directory of a run.
pub struct LoadedRun {
    pub applicants: Vec<Applicant>,
    pub history: SelectionHistory,
    pub human_model: FittedGLM,
    /// Per policy: applicant id to score at arrival.
    pub scores: Vec<HashMap<u64, f64>>,
}

fn parse<T: std::str::FromStr>(v: &str, what: &str) -> anyhow::Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("cannot parse {what} from {v:?}"))
}

fn column(header: &[String], name: &str, file: &str) -> anyhow::Result<usize> {
    header.iter().position(|h| h == name).with_context(|| format!("{file} has no {name} column"))
}

pub fn load_run(cfg: &RunConfig, dir: &Path) -> anyhow::Result<LoadedRun> {
    let spec = &cfg.scenario.population;
    let file = fs::File::open(dir.join("population.csv")).context("cannot open population.csv")?;
    let pop = read_population(
        std::io::BufReader::new(file),
        &spec.group_names(),
        spec.layout(),
        cfg.scenario.round_size,
        cfg.scenario.screening.n_strata,
    )?;
    let mut applicants = pop.applicants;
    let index = id_index(&applicants);

    let (h, rows) = read_table(&dir.join("propensity_truth.csv"))?;
    let (ci, cp) = (column(&h, "id", "propensity_truth.csv")?, column(&h, "p_interview", "propensity_truth.csv")?);
    for r in rows {
        let id: u64 = parse(&r[ci], "id")?;
        let i = *index.get(&id).with_context(|| format!("propensity_truth.csv: unknown id {id}"))?;
        if !r[cp].is_empty() {
            applicants[i].true_propensity = Some(parse(&r[cp], "p_interview")?);
        }
    }

    let human_model = FittedGLM::from_kv(&fs::read_to_string(dir.join("human_model.kv")).context("cannot read human_model.kv")?)?;

    let names: Vec<&str> = cfg.policies.iter().map(|p| p.name.as_str()).collect();
    let policy_of = |name: &str| -> anyhow::Result<usize> {
        names.iter().position(|n| *n == name).with_context(|| format!("unknown policy {name:?} in run files"))
    };

    let (h, rows) = read_table(&dir.join("rounds.csv"))?;
    let cr = column(&h, "round", "rounds.csv")?;
    let mut all_rounds = std::collections::BTreeSet::new();
    for r in &rows {
        all_rounds.insert(parse::<usize>(&r[cr], "round")?);
    }
    let first_round = *all_rounds.first().context("rounds.csv is empty")?;
    ensure!(
        all_rounds.iter().copied().eq(first_round..first_round + all_rounds.len()),
        "rounds.csv does not cover a contiguous range of rounds"
    );

    let (h, rows) = read_table(&dir.join("selections.csv"))?;
    let (cr, cpol, crank, cid) = (
        column(&h, "round", "selections.csv")?,
        column(&h, "policy", "selections.csv")?,
        column(&h, "rank", "selections.csv")?,
        column(&h, "applicant_id", "selections.csv")?,
    );
    let mut picked: Vec<BTreeMap<usize, Vec<(usize, u64)>>> = vec![BTreeMap::new(); names.len()];
    for r in rows {
        let p = policy_of(&r[cpol])?;
        picked[p]
            .entry(parse(&r[cr], "round")?)
            .or_default()
            .push((parse(&r[crank], "rank")?, parse(&r[cid], "applicant id")?));
    }
    let policies = names
        .iter()
        .zip(picked)
        .map(|(name, by_round)| PolicyHistory {
            name: name.to_string(),
            rounds: by_round
                .into_iter()
                .map(|(round, mut ids)| {
                    ids.sort();
                    (round, ids.into_iter().map(|(_, id)| id).collect())
                })
                .collect(),
        })
        .collect();

    let (h, rows) = read_table(&dir.join("scores.csv"))?;
    let (cpol, cid, cs) = (
        column(&h, "policy", "scores.csv")?,
        column(&h, "applicant_id", "scores.csv")?,
        column(&h, "score", "scores.csv")?,
    );
    let mut scores = vec![HashMap::new(); names.len()];
    for r in rows {
        scores[policy_of(&r[cpol])?].insert(parse(&r[cid], "applicant id")?, parse(&r[cs], "score")?);
    }

    Ok(LoadedRun {
        history: SelectionHistory {
            outcome_label: cfg.experiment.round.outcome_label,
            first_round,
            analysis_rounds: all_rounds.len(),
            n_groups: spec.groups.len(),
            policies,
        },
        applicants,
        human_model,
        scores,
    })
}

fn normalization_name(n: Normalization) -> &'static str {
    match n {
        Normalization::HorvitzThompson => "horvitz-thompson",
        Normalization::Hajek => "hajek",
    }
}

fn source_name(s: PropensitySource) -> &'static str {
    match s {
        PropensitySource::Estimated => "estimated",
        PropensitySource::GroundTruth => "ground-truth",
    }
}

fn evaluate_seed(cfg: &RunConfig, run: &LoadedRun, out: &Path) -> anyhow::Result<()> {
    let ev = &cfg.evaluation;
    let apps = &run.applicants;
    let hist = &run.history;
    let label = hist.outcome_label;
    let groups = cfg.scenario.population.group_names();
    let index = id_index(apps);
    let props = propensities(apps, &run.human_model, ev.propensity_source)?;
    let analysis = hist.first_round..hist.first_round + hist.analysis_rounds;

    let human = human_realized_yield(hist, apps).ok();
    let mut ipw_rows = vec![vec![
        "human".to_string(),
        String::new(),
        source_name(ev.propensity_source).to_string(),
        fmt_opt(human),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        fmt_opt(human),
    ]];
    let mut support_rows = Vec::new();
    let mut flag_rows = Vec::new();
    for (pi, ph) in hist.policies.iter().enumerate() {
        let ids = ph.selected_ids();
        let oracle = ids.iter().filter(|id| apps[index[id]].outcome(label)).count() as f64 / ids.len().max(1) as f64;
        for norm in [ev.normalization, other(ev.normalization)] {
            let opts = YieldOptions { normalization: norm, ..ev.yield_options() };
            let mut row = vec![ph.name.clone(), normalization_name(norm).into(), source_name(ev.propensity_source).into()];
            match policy_ipw(hist, pi, apps, &props, &opts) {
                Ok(e) => row.extend([
                    fmt(e.point),
                    fmt(e.weight_min),
                    fmt(e.weight_max),
                    fmt(e.ess),
                    e.clipped_count.to_string(),
                    e.n_overlap.to_string(),
                ]),
                Err(screening_core::Error::Undefined(_)) => row.extend(std::iter::repeat_n(String::new(), 5).chain(["0".into()])),
                Err(e) => return Err(e.into()),
            }
            row.push(fmt(oracle));
            ipw_rows.push(row);
        }
        let p: Vec<f64> = ids.iter().map(|id| props[index[id]]).collect();
        let rep = common_support(&p);
        for (b, count) in rep.bins.iter().enumerate() {
            support_rows.push(vec![
                ph.name.clone(),
                fmt(b as f64 / SUPPORT_BINS as f64),
                fmt((b + 1) as f64 / SUPPORT_BINS as f64),
                count.to_string(),
            ]);
        }
        flag_rows.push(vec![ph.name.clone(), ids.len().to_string(), rep.below.to_string(), rep.above.to_string()]);
    }
    write_table(
        &out.join("ipw.csv"),
        &[
            "policy",
            "normalization",
            "propensity_source",
            "point",
            "weight_min",
            "weight_max",
            "ess",
            "clipped_count",
            "n_overlap",
            "oracle_yield",
        ],
        &ipw_rows,
    )?;
    write_table(&out.join("support.csv"), &["policy", "lower", "upper", "count"], &support_rows)?;
    write_table(&out.join("support_flags.csv"), &["policy", "n_selected", "below_0_01", "above_0_99"], &flag_rows)?;

    // Scores at arrival among interviewed analysis-period applicants.
    let interviewed: Vec<usize> = (0..apps.len())
        .filter(|&i| apps[i].human_interviewed && analysis.contains(&apps[i].arrival_round))
        .collect();
    let labels: Vec<bool> = interviewed.iter().map(|&i| apps[i].outcome(label)).collect();
    let mut named: Vec<(String, Vec<f64>)> = vec![(
        "human".into(),
        interviewed.iter().map(|&i| run.human_model.predict_probability(&apps[i].features)).collect::<Result<_, _>>()?,
    )];
    for (pi, ph) in hist.policies.iter().enumerate() {
        let s: Option<Vec<f64>> = interviewed.iter().map(|&i| run.scores[pi].get(&apps[i].id).copied()).collect();
        named.push((ph.name.clone(), s.with_context(|| format!("scores.csv lacks scores for policy {}", ph.name))?));
    }
    let mut agreement = Vec::new();
    if interviewed.len() >= 4 {
        for a in 0..named.len() {
            for b in a + 1..named.len() {
                for row in agreement_table(&named[a].1, &named[b].1, &labels, &ev.quantiles)? {
                    agreement.push(vec![
                        named[a].0.clone(),
                        named[b].0.clone(),
                        fmt(row.quantile),
                        row.k.to_string(),
                        fmt(row.agree_share),
                        row.n_both.to_string(),
                        row.n_a_only.to_string(),
                        row.n_b_only.to_string(),
                        fmt_opt(row.yield_both),
                        fmt_opt(row.yield_a_only),
                        fmt_opt(row.yield_b_only),
                        u8::from(row.tie_fallback).to_string(),
                    ]);
                }
            }
        }
    }
    write_table(
        &out.join("agreement.csv"),
        &[
            "score_a",
            "score_b",
            "quantile",
            "k",
            "agree_share",
            "n_both",
            "n_a_only",
            "n_b_only",
            "yield_both",
            "yield_a_only",
            "yield_b_only",
            "tie_fallback",
        ],
        &agreement,
    )?;

    let pool: Vec<usize> = apps.iter().filter(|a| analysis.contains(&a.arrival_round)).map(|a| a.group).collect();
    let mut selected = vec![("human".to_string(), interviewed.iter().map(|&i| apps[i].group).collect::<Vec<_>>())];
    for ph in &hist.policies {
        selected.push((ph.name.clone(), ph.selected_ids().iter().map(|id| apps[index[id]].group).collect()));
    }
    let mut comp = Vec::new();
    for row in composition_report(&selected, &pool, groups.len())? {
        for (g, name) in groups.iter().enumerate() {
            comp.push(vec![
                row.policy.clone(),
                row.n_selected.to_string(),
                name.clone(),
                fmt(row.shares[g]),
                fmt(row.shares[g] - row.difference[g]),
                fmt(row.difference[g]),
            ]);
        }
    }
    write_table(
        &out.join("composition.csv"),
        &["policy", "n_selected", "group", "share", "pool_share", "difference"],
        &comp,
    )?;

    let series = yield_time_series(hist, apps, &props, &ev.yield_options())?;
    let rows: Vec<Vec<String>> = series
        .iter()
        .map(|p| {
            let mut r = vec![
                p.round.to_string(),
                p.policy.clone(),
                fmt_opt(p.cumulative_ipw),
                fmt_opt(p.cumulative_human),
                fmt(p.cumulative_oracle),
            ];
            r.extend(p.rolling_shares.iter().copied().map(fmt));
            r
        })
        .collect();
    let mut header: Vec<String> =
        ["round", "policy", "cumulative_ipw", "cumulative_human", "cumulative_oracle"].map(String::from).to_vec();
    header.extend(group_share_header(&groups, "rolling_share_"));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&out.join("timeseries.csv"), &header, &rows)
}

fn other(n: Normalization) -> Normalization {
    match n {
        Normalization::Hajek => Normalization::HorvitzThompson,
        Normalization::HorvitzThompson => Normalization::Hajek,
    }
}

pub fn load_run_config(run: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(&run.join(CONFIG))
}

pub fn cmd_evaluate(run: &Path) -> anyhow::Result<PathBuf> {
    let cfg = load_run_config(run)?;
    let seeds = seed_dirs(run)?;
    for (_, dir) in &seeds {
        ensure!(dir.join("selections.csv").exists(), "{} holds no experiment log; use the output of `run`", dir.display());
    }
    let out = create_fresh(run, "evaluation")?;
    seeds.par_iter().try_for_each(|(seed, dir)| -> anyhow::Result<()> {
        let loaded = load_run(&cfg, dir).with_context(|| format!("seed {seed}"))?;
        let target = seed_dir(&out, *seed);
        fs::create_dir_all(&target)?;
        evaluate_seed(&cfg, &loaded, &target).with_context(|| format!("seed {seed}"))
    })?;
    let eval_seeds = seed_dirs(&out)?;
    for table in ["ipw.csv", "composition.csv", "agreement.csv"] {
        merge_tables(&out, &eval_seeds, table, Path::new(table))?;
    }
    let ids: Vec<u64> = seeds.iter().map(|(s, _)| *s).collect();
    finish_dir(&out, "evaluate", &cfg, &ids)?;
    Ok(out)
}

fn iv_seed(cfg: &RunConfig, pop: &Population, seed: u64, dir: &Path) -> anyhow::Result<()> {
    let apps = &pop.applicants;
    let label = cfg.experiment.round.outcome_label;
    let inst = build_instrument(apps, cfg.iv.min_caseload)?;
    let rows: Vec<Vec<String>> = apps
        .iter()
        .enumerate()
        .map(|(i, a)| {
            vec![
                a.id.to_string(),
                a.screener_id.to_string(),
                a.stratum.to_string(),
                u8::from(a.human_interviewed).to_string(),
                fmt_opt(inst.raw[i]),
                fmt_opt(inst.values[i]),
            ]
        })
        .collect();
    write_table(
        &dir.join("instrument.csv"),
        &["applicant_id", "screener_id", "stratum", "interviewed", "leave_out_rate", "instrument"],
        &rows,
    )?;

    let idx = inst.retained();
    let i: Vec<f64> = idx.iter().map(|&r| f64::from(u8::from(apps[r].human_interviewed))).collect();
    let z: Vec<f64> = idx.iter().map(|&r| inst.values[r].expect("retained")).collect();
    let strata: Vec<u32> = idx.iter().map(|&r| apps[r].stratum).collect();
    let screeners: Vec<u32> = idx.iter().map(|&r| apps[r].screener_id).collect();
    let spec = RegressionSpec { controls: &[], fixed_effects: Some(&strata), cluster: Some(&screeners) };
    let fs_fit = ols(&i, &[z], &spec)?;
    let c = fs_fit.coefficients[0];
    let excluded: Vec<String> = inst.excluded_screeners.iter().map(u32::to_string).collect();
    write_table(
        &dir.join("first_stage.csv"),
        &["n", "n_clusters", "coefficient", "se", "t", "f_stat", "excluded_screeners"],
        &[vec![
            fs_fit.n.to_string(),
            fs_fit.n_clusters.map(|n| n.to_string()).unwrap_or_default(),
            fmt(c.estimate),
            fmt(c.se),
            fmt(c.t()),
            fmt(c.t() * c.t()),
            excluded.join(" "),
        ]],
    )?;

    let names = pop.feature_names();
    let balance = balance_check(apps, &inst, &feature_covariates(apps, &names))?;
    let rows: Vec<Vec<String>> = balance
        .iter()
        .map(|b| vec![b.covariate.clone(), fmt(b.coefficient.estimate), fmt(b.coefficient.se), fmt(b.coefficient.t())])
        .collect();
    write_table(&dir.join("balance.csv"), &["covariate", "coefficient", "se", "t"], &rows)?;

    // ML score: outcome model fit on the training-period interviewees.
    let train_end = training_rounds(pop, &cfg.experiment.round)?;
    let train: Vec<Applicant> =
        apps.iter().filter(|a| a.human_interviewed && a.arrival_round < train_end).cloned().collect();
    let model = fit_outcome_model(&train, label, &cfg.experiment.fit, derive_seed(seed, "iv-score", 0))?;
    let scores: Vec<f64> = apps.iter().map(|a| model.predict_probability(&a.features)).collect::<Result<_, _>>()?;

    let mut outcomes: Vec<(String, Vec<f64>)> =
        vec![(label_name(label).to_string(), apps.iter().map(|a| f64::from(u8::from(a.outcome(label)))).collect())];
    for (g, name) in pop.groups.iter().enumerate() {
        outcomes.push((format!("group_{name}"), apps.iter().map(|a| f64::from(u8::from(a.group == g))).collect()));
    }
    outcomes.push(("female".into(), apps.iter().map(|a| f64::from(u8::from(a.female))).collect()));
    let mut rows = Vec::new();
    for (name, value) in &outcomes {
        let rep = match complier_outcomes(apps, &inst, &scores, value, cfg.iv.complier_threshold) {
            Ok(rep) => rep,
            // A flat score leaves one half empty; report that instead of failing the run.
            Err(e @ screening_core::Error::Undefined(_)) => {
                log::warn!("seed {seed}: complier split for {name}: {e}");
                let blank = vec![String::new(); 5];
                rows.push([vec![name.clone(), String::new()], blank, vec![e.to_string()]].concat());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for e in [&rep.high, &rep.low] {
            rows.push(vec![
                name.clone(),
                e.tag.to_string(),
                fmt(rep.threshold),
                fmt(e.coefficient.estimate),
                fmt(e.coefficient.se),
                fmt(e.first_stage_f),
                e.n.to_string(),
                e.warning.clone().unwrap_or_default(),
            ]);
        }
    }
    write_table(
        &dir.join("complier.csv"),
        &["outcome", "half", "threshold", "coefficient", "se", "first_stage_f", "n", "warning"],
        &rows,
    )?;

    let mut subgroups: Vec<(String, Vec<bool>)> = vec![("all".into(), vec![true; apps.len()])];
    for (g, name) in pop.groups.iter().enumerate() {
        subgroups.push((format!("group_{name}"), apps.iter().map(|a| a.group == g).collect()));
    }
    subgroups.push(("female".into(), apps.iter().map(|a| a.female).collect()));
    subgroups.push(("male".into(), apps.iter().map(|a| !a.female).collect()));
    let mono = monotonicity_suite(apps, &inst, &subgroups, label, derive_seed(seed, "monotonicity", 0))?;
    let mut rows = Vec::new();
    for (name, c) in &mono.first_stages {
        rows.push(vec!["first_stage".into(), name.clone(), fmt(c.estimate), fmt(c.se)]);
    }
    for (name, r) in &mono.propensity_correlation {
        rows.push(vec!["propensity_correlation".into(), name.clone(), fmt(*r), String::new()]);
    }
    rows.push(vec!["calibration_gap".into(), "all".into(), fmt(mono.calibration_gap()), String::new()]);
    write_table(&dir.join("monotonicity.csv"), &["kind", "subgroup", "value", "se"], &rows)?;
    let mut rows = Vec::new();
    for (sample, curve) in [("strict", &mono.strict_calibration), ("lenient", &mono.lenient_calibration)] {
        for (b, bin) in curve.bins.iter().enumerate() {
            rows.push(vec![sample.to_string(), b.to_string(), fmt(bin.predicted), fmt(bin.observed), bin.n.to_string()]);
        }
    }
    write_table(&dir.join("calibration.csv"), &["sample", "bin", "predicted", "observed", "n"], &rows)
}

fn label_name(label: screening_core::applicant::OutcomeLabel) -> &'static str {
    match label {
        screening_core::applicant::OutcomeLabel::Hired => "hired",
        screening_core::applicant::OutcomeLabel::Offered => "offered",
    }
}

/// IV diagnostics on generated populations, or on one population file.
pub fn cmd_iv(cfg: &RunConfig, population: Option<&Path>, out: Option<&Path>, seeds: &[u64]) -> anyhow::Result<PathBuf> {
    if population.is_some() && seeds.len() != 1 {
        bail!("--population takes a single seed");
    }
    let run = create_run_dir(&base_dir(cfg, out), &cfg.hash()?)?;
    for_each_seed(&run, seeds, |seed, dir| {
        let pop = match population {
            Some(path) => {
                let spec = &cfg.scenario.population;
                let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
                read_population(
                    std::io::BufReader::new(file),
                    &spec.group_names(),
                    spec.layout(),
                    cfg.scenario.round_size,
                    cfg.scenario.screening.n_strata,
                )?
            }
            None => simulate(cfg, seed)?.0,
        };
        iv_seed(cfg, &pop, seed, dir)
    })?;
    let dirs = seed_dirs(&run)?;
    merge_tables(&run, &dirs, "first_stage.csv", Path::new("first_stage.csv"))?;
    merge_tables(&run, &dirs, "complier.csv", Path::new("complier.csv"))?;
    finish_dir(&run, "iv", cfg, seeds)?;
    Ok(run)
}

fn drift_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> anyhow::Result<()> {
    let drift = cfg.scenario.population.drift.as_ref().context("drift needs scenario.population.drift")?;
    let (pop, panel) = simulate(cfg, seed)?;
    let exp = cfg.experiment.to_config(seed);
    let train = training_rounds(&pop, &exp.round)?;
    let rp = &cfg.replay;
    ensure!(rp.cohort_rounds < pop.n_rounds(), "replay.cohort_rounds exceeds the number of rounds");
    let cohort_start = pop.n_rounds() - rp.cohort_rounds;
    let analysis = exp.max_rounds.unwrap_or(usize::MAX).min(pop.n_rounds() - train);
    ensure!(
        train + analysis <= cohort_start,
        "the experiment reaches round {} but the cohort starts at round {cohort_start}; lower experiment.max_rounds",
        train + analysis
    );
    ensure!(
        rp.checkpoint_stride.is_multiple_of(exp.checkpoint_every),
        "replay.checkpoint_stride must be a multiple of experiment.checkpoint_every"
    );
    write_population_files(dir, cfg, &pop, &panel)?;
    let log = run_experiment(&pop, &cfg.policies, &exp)?;
    write_log(dir, &pop, &log)?;

    let cohort: Vec<Applicant> =
        pop.applicants.iter().filter(|a| a.arrival_round >= cohort_start).cloned().collect();
    let frac = rp.k_fraction.unwrap_or(cfg.scenario.screening.interview_rate);
    let k = ((frac * cohort.len() as f64).round() as usize).clamp(1, cohort.len());
    let mut checkpoints: Vec<usize> = (0..=log.analysis_rounds).step_by(rp.checkpoint_stride).collect();
    if checkpoints.last() != Some(&log.analysis_rounds) {
        checkpoints.push(log.analysis_rounds);
    }
    let target = pop.groups.iter().position(|g| *g == drift.target_group).expect("validated drift target");

    let mut replay_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut score_rows = Vec::new();
    for (pi, p) in cfg.policies.iter().enumerate() {
        let rep = score_evaluation_cohort(&log, pi, &cohort, &checkpoints, k)?;
        for row in &rep.rows {
            for (g, name) in pop.groups.iter().enumerate() {
                replay_rows.push(vec![
                    p.name.clone(),
                    row.checkpoint.to_string(),
                    name.clone(),
                    fmt(row.share_by_score[g]),
                    fmt(row.share_by_belief[g]),
                ]);
            }
            if rp.write_scores {
                for s in &row.scores {
                    score_rows.push(vec![
                        p.name.clone(),
                        row.checkpoint.to_string(),
                        s.applicant_id.to_string(),
                        fmt(s.score),
                        fmt(s.belief),
                        fmt(s.bonus),
                    ]);
                }
            }
        }
        summary_rows.push(vec![
            p.name.clone(),
            drift.target_group.clone(),
            fmt(rp.target_level),
            k.to_string(),
            rep.first_reaching(target, rp.target_level).map(|c| c.to_string()).unwrap_or_default(),
        ]);
    }
    write_table(
        &dir.join("replay.csv"),
        &["policy", "checkpoint", "group", "share_by_score", "share_by_belief"],
        &replay_rows,
    )?;
    write_table(
        &dir.join("replay_summary.csv"),
        &["policy", "target_group", "level", "k", "first_checkpoint"],
        &summary_rows,
    )?;
    if rp.write_scores {
        write_table(
            &dir.join("cohort_scores.csv"),
            &["policy", "checkpoint", "applicant_id", "score", "belief", "bonus"],
            &score_rows,
        )?;
    }
    Ok(())
}

/// Run the configured drift, then score the held-out cohort under every
/// saved model state.
pub fn cmd_drift(cfg: &RunConfig, out: Option<&Path>, seeds: &[u64]) -> anyhow::Result<PathBuf> {
    if cfg.scenario.population.drift.is_none() {
        bail!("drift needs scenario.population.drift");
    }
    let run = create_run_dir(&base_dir(cfg, out), &cfg.hash()?)?;
    for_each_seed(&run, seeds, |seed, dir| drift_seed(cfg, seed, dir))?;
    let dirs = seed_dirs(&run)?;
    merge_tables(&run, &dirs, "replay_summary.csv", Path::new("replay_summary.csv"))?;
    merge_tables(&run, &dirs, "summary.csv", Path::new("summary.csv"))?;
    finish_dir(&run, "drift", cfg, seeds)?;
    Ok(run)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Seed-level aggregates of a run directory: mean and sd of every numeric
/// column of `summary.csv`, plus IPW points of the latest evaluation.
pub fn cmd_report(run: &Path) -> anyhow::Result<(PathBuf, String)> {
    let cfg = load_run_config(run)?;
    let seeds = seed_dirs(run)?;
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    let mut push = |policy: &str, metric: &str, v: f64| {
        let key = (policy.to_string(), metric.to_string());
        if !values.contains_key(&key) {
            order.push(key.clone());
        }
        values.entry(key).or_default().push(v);
    };
    for (_, dir) in &seeds {
        let path = dir.join("summary.csv");
        if !path.exists() {
            continue;
        }
        let (h, rows) = read_table(&path)?;
        for r in rows {
            for (j, name) in h.iter().enumerate().skip(1) {
                if let Ok(v) = r[j].parse::<f64>() {
                    push(&r[0], name, v);
                }
            }
        }
    }
    let mut evals: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("evaluation")))
        .collect();
    evals.sort_by_key(|p| {
        let name = p.file_name().expect("named").to_string_lossy().to_string();
        name.strip_prefix("evaluation-").and_then(|s| s.parse::<usize>().ok()).unwrap_or(0)
    });
    if let Some(latest) = evals.last() {
        let path = latest.join("ipw.csv");
        if path.exists() {
            let (h, rows) = read_table(&path)?;
            let (cp, cn, cpt) = (column(&h, "policy", "ipw.csv")?, column(&h, "normalization", "ipw.csv")?, column(&h, "point", "ipw.csv")?);
            for r in rows {
                if let Ok(v) = r[cpt].parse::<f64>() {
                    let metric = if r[cn].is_empty() { "ipw_realized".to_string() } else { format!("ipw_{}", r[cn]) };
                    push(&r[cp], &metric, v);
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    for key in &order {
        let v = &values[key];
        let (m, s) = mean_sd(v);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(vec![key.0.clone(), key.1.clone(), v.len().to_string(), fmt(m), fmt(s), fmt(lo), fmt(hi)]);
        text.push_str(&format!("{:<10} {:<28} n={:<3} mean={:.4} sd={:.4}\n", key.0, key.1, v.len(), m, s));
    }
    let out = create_fresh(run, "report")?;
    write_table(&out.join("report.csv"), &["policy", "metric", "n_seeds", "mean", "sd", "min", "max"], &rows)?;
    let ids: Vec<u64> = seeds.iter().map(|(s, _)| *s).collect();
    finish_dir(&out, "report", &cfg, &ids)?;
    Ok((out, text))
}
