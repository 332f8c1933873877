//! Scenario orchestration: corpus, folds, training, attacks, metrics and
//! significance for one [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use emoguard_core::attack::{membership_attack, privacy_metric, AttackResult};
use emoguard_core::data::{
    generate_corpus, make_folds, make_mi_splits, znorm_by_speaker, FoldRole, MiSplit, SplitPlan, Task,
    UtteranceSample,
};
use emoguard_core::model::{AdversaryTarget, GrlPlacement, Modality, Mode, Model, ModelSpec};
use emoguard_core::rng::derive_seed;
use emoguard_core::stats::{leakage, per_group_uar, uar};
use emoguard_core::train::{grid_search, seed_ensemble, train, Grid, TrainData, TrainHistory};

use crate::config::{ExperimentConfig, Scenario, FOLDS};
use crate::error::{Result, StageExt};
use crate::report::{cell, Metric, MetricsReport, Planned, Row};

/// Worker-pool size override.
pub const WORKERS_ENV: &str = "EMOGUARD_WORKERS";

/// Stream tags below the master seed.
mod tag {
    pub const FOLDS: u64 = 100;
    pub const RUN: u64 = 101;
    pub const MI_SPLIT: u64 = 102;
    pub const PROBE: u64 = 103;
    pub const GRID: u64 = 104;
}

/// One trained configuration of the scenario and what to measure on it.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: ModelSpec,
    pub membership: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FoldMetrics {
    pub values: BTreeMap<Metric, f64>,
}

/// The models and comparisons a scenario asks for, before any grid search.
pub fn plan_scenario(cfg: &ExperimentConfig) -> (Vec<Setup>, Vec<Planned>) {
    let mut setups = Vec::new();
    let mut planned = Vec::new();
    let lambda = cfg.lambda.unwrap_or(0.5);
    let membership = cfg.scenario.needs_membership();
    let push = |setups: &mut Vec<Setup>, spec| {
        setups.push(Setup { spec, membership });
        setups.len() - 1
    };
    let compare = |planned: &mut Vec<Planned>, baseline, treatment, metrics: &[Metric]| {
        for &metric in metrics {
            planned.push(Planned {
                metric,
                baseline,
                treatment,
            });
        }
    };
    for &task in &cfg.tasks {
        for &modality in &cfg.modalities {
            let gen = push(&mut setups, cfg.spec(modality, task, Mode::Gen, 0.0, GrlPlacement::PostConcat));
            let priv_at = |setups: &mut Vec<Setup>, l: f64, placement| {
                push(setups, cfg.spec(modality, task, Mode::Priv, l, placement))
            };
            match cfg.scenario {
                Scenario::Q1Leakage => {}
                Scenario::Q2Privacy => {
                    let p = priv_at(&mut setups, lambda, GrlPlacement::PostConcat);
                    compare(&mut planned, gen, p, &[Metric::P]);
                }
                Scenario::Q3Utility => {
                    let p = priv_at(&mut setups, lambda, GrlPlacement::PostConcat);
                    compare(&mut planned, gen, p, &[Metric::U]);
                }
                Scenario::Q4LambdaSweep => {
                    for &l in &cfg.lambda_sweep {
                        let p = priv_at(&mut setups, l, GrlPlacement::PostConcat);
                        compare(&mut planned, gen, p, &[Metric::U, Metric::P]);
                    }
                }
                Scenario::Q5PerGender => {
                    let p = priv_at(&mut setups, lambda, GrlPlacement::PostConcat);
                    compare(&mut planned, gen, p, &[Metric::UMale, Metric::UFemale]);
                }
                Scenario::Q6Placement => {
                    let post = priv_at(&mut setups, lambda, GrlPlacement::PostConcat);
                    let per = priv_at(&mut setups, lambda, GrlPlacement::PerStream);
                    compare(&mut planned, gen, post, &[Metric::U, Metric::P]);
                    compare(&mut planned, post, per, &[Metric::U, Metric::P]);
                }
                Scenario::Q7Membership => {
                    let p = priv_at(&mut setups, lambda, GrlPlacement::PostConcat);
                    compare(&mut planned, gen, p, &[Metric::U, Metric::MI]);
                }
                Scenario::Q7Multi => {
                    let p = priv_at(&mut setups, lambda, GrlPlacement::PostConcat);
                    compare(&mut planned, gen, p, &[Metric::U, Metric::P, Metric::MI]);
                }
            }
        }
    }
    (setups, planned)
}

/// Generates and z-normalizes the corpus, then splits speakers into folds.
pub fn prepare_corpus(cfg: &ExperimentConfig) -> Result<(Vec<UtteranceSample>, SplitPlan)> {
    let mut corpus = generate_corpus(&cfg.generator)?;
    znorm_by_speaker(&mut corpus)?;
    let plan = fold_plan(cfg, &corpus)?;
    Ok((corpus, plan))
}

/// Speaker-independent folds of `corpus` for this config.
pub fn fold_plan(cfg: &ExperimentConfig, corpus: &[UtteranceSample]) -> Result<SplitPlan> {
    Ok(make_folds(corpus, FOLDS, derive_seed(cfg.master_seed, &[tag::FOLDS]))?)
}

/// Training and validation sets of fold rotation `r` under standard roles.
pub fn standard_split<'a>(
    corpus: &'a [UtteranceSample],
    plan: &SplitPlan,
    rotation: usize,
) -> (TrainData<'a>, Vec<&'a UtteranceSample>) {
    let plan = plan.clone().with_standard_roles(rotation);
    let data = TrainData {
        train: plan.samples_with_role(corpus, FoldRole::Train),
        val: plan.samples_with_role(corpus, FoldRole::Validation),
    };
    (data, plan.samples_with_role(corpus, FoldRole::Attacker))
}

pub fn membership_split(cfg: &ExperimentConfig, corpus: &[UtteranceSample], plan: &SplitPlan, rotation: usize) -> Result<MiSplit> {
    let plan = plan.clone().with_membership_roles(rotation);
    Ok(make_mi_splits(
        &plan,
        corpus,
        cfg.membership.select_fraction,
        cfg.membership.move_fraction,
        derive_seed(cfg.master_seed, &[tag::MI_SPLIT, rotation as u64]),
    )?)
}

/// Seed of every training run in rotation `r`; shared by all setups so that
/// Gen and Priv are paired.
pub fn run_seed(cfg: &ExperimentConfig, rotation: usize) -> u64 {
    derive_seed(cfg.master_seed, &[tag::RUN, rotation as u64])
}

pub fn probe_seed(cfg: &ExperimentConfig, rotation: usize) -> u64 {
    derive_seed(cfg.master_seed, &[tag::PROBE, rotation as u64])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains once under the membership protocol and attacks the result.
pub fn membership_run(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    corpus: &[UtteranceSample],
    mi: &MiSplit,
    seed: u64,
    probe_seed: u64,
) -> Result<(Model, TrainHistory, AttackResult)> {
    let data = TrainData {
        train: mi.training_samples(corpus),
        val: mi.early_stop_samples(corpus),
    };
    let (model, history) = train(spec, &data, &cfg.train, seed)?;
    let result = membership_attack(&model, corpus, mi, &cfg.probe, probe_seed)?;
    Ok((model, history, result))
}

/// All metrics of one setup on fold rotation `rotation`.
pub fn run_fold(
    cfg: &ExperimentConfig,
    setup: &Setup,
    corpus: &[UtteranceSample],
    plan: &SplitPlan,
    rotation: usize,
) -> Result<FoldMetrics> {
    let mut values = BTreeMap::new();
    let (data, test) = standard_split(corpus, plan, rotation);
    let ensemble = seed_ensemble(&setup.spec, &data, &test, &cfg.train, run_seed(cfg, rotation))?;
    let labels: Vec<usize> = test.iter().map(|s| s.emotion(setup.spec.task).index()).collect();
    let genders: Vec<_> = test.iter().map(|s| s.gender).collect();
    values.insert(Metric::U, uar(&ensemble.preds, &labels, 3)?);
    let (um, uf) = per_group_uar(&ensemble.preds, &labels, &genders, 3)?;
    values.insert(Metric::UMale, um);
    values.insert(Metric::UFemale, uf);

    let has_gender_head = setup.spec.adversary_index(AdversaryTarget::Gender).is_some();
    let mut l = Vec::new();
    let mut p = Vec::new();
    for (i, (model, _)) in ensemble.runs.iter().enumerate() {
        if has_gender_head {
            l.push(leakage(model, &data.val)?);
        }
        let seed = derive_seed(probe_seed(cfg, rotation), &[i as u64]);
        p.push(privacy_metric(model, &data.train, &test, &cfg.probe, seed)?.metric);
    }
    if has_gender_head {
        values.insert(Metric::L, mean(&l));
    }
    values.insert(Metric::P, mean(&p));

    if setup.membership {
        let mi = membership_split(cfg, corpus, plan, rotation)?;
        let mut scores = Vec::new();
        for (i, &s) in cfg.train.seeds.iter().enumerate() {
            let seed = derive_seed(run_seed(cfg, rotation), &[s]);
            let (_, _, r) = membership_run(cfg, &setup.spec, corpus, &mi, seed, derive_seed(probe_seed(cfg, rotation), &[i as u64]))?;
            scores.push(r.metric);
        }
        values.insert(Metric::MI, mean(&scores));
    }
    Ok(FoldMetrics { values })
}

/// Runs `jobs` on up to `workers` threads; results keep job order.
pub fn run_pool<T: Send, F>(n_jobs: usize, workers: usize, job: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n_jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n_jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_jobs {
                    break;
                }
                let out = job(i);
                slots.lock().expect("no worker panicked while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("pool finished")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

/// Pool size from the environment, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

fn setup_label(spec: &ModelSpec) -> String {
    let row = Row::new(spec.clone());
    format!("{:?}/{:?}/{:?} {}", spec.modality, spec.task, spec.mode, row.variant())
}

/// Replaces each setup's layers (and open λ) with the best grid point on
/// fold rotation 0.
fn select_architectures(cfg: &ExperimentConfig, setups: &mut [Setup], corpus: &[UtteranceSample], plan: &SplitPlan, hash: &str) -> Result<()> {
    let Some(grid) = &cfg.grid else {
        return Ok(());
    };
    let (data, _) = standard_split(corpus, plan, 0);
    let fixed_sweep = cfg.scenario == Scenario::Q4LambdaSweep;
    let mut cache: BTreeMap<String, ModelSpec> = BTreeMap::new();
    for setup in setups.iter_mut() {
        let mut g: Grid = grid.clone();
        if fixed_sweep || cfg.lambda.is_some() || setup.spec.mode == Mode::Gen {
            g.lambdas = vec![setup.spec.adversaries.first().map_or(0.5, |a| a.lambda)];
        }
        let key = format!("{} {:?}", setup_label(&setup.spec), g);
        if let Some(best) = cache.get(&key) {
            setup.spec = best.clone();
            continue;
        }
        let ranked = grid_search(&g, &setup.spec, &data, &cfg.train, derive_seed(cfg.master_seed, &[tag::GRID]))
            .stage(&format!("grid-search {}", setup_label(&setup.spec)), hash)?;
        let mut best = ranked[0].spec.clone();
        if setup.spec.mode == Mode::Gen {
            best.adversaries = setup.spec.adversaries.clone();
        }
        cache.insert(key, best.clone());
        setup.spec = best;
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let hash = cfg.hash();
    cfg.validate().stage("config", &hash)?;
    let (corpus, plan) = prepare_corpus(cfg).stage("corpus", &hash)?;
    let (mut setups, planned) = plan_scenario(cfg);
    select_architectures(cfg, &mut setups, &corpus, &plan, &hash)?;

    let n_jobs = setups.len() * FOLDS;
    let results = run_pool(n_jobs, worker_count(), |j| {
        let (s, r) = (j / FOLDS, j % FOLDS);
        run_fold(cfg, &setups[s], &corpus, &plan, r)
            .stage(&format!("fold {r} {}", setup_label(&setups[s].spec)), &hash)
    });
    let mut per_setup: Vec<Vec<FoldMetrics>> = vec![Vec::with_capacity(FOLDS); setups.len()];
    for (j, r) in results.into_iter().enumerate() {
        per_setup[j / FOLDS].push(r?);
    }

    let rows = setups
        .iter()
        .zip(&per_setup)
        .map(|(setup, folds)| {
            let mut row = Row::new(setup.spec.clone());
            for m in Metric::ALL {
                let v: Vec<f64> = folds.iter().filter_map(|f| f.values.get(&m).copied()).collect();
                if v.len() == FOLDS {
                    row.metrics.insert(m, cell(v));
                }
            }
            row
        })
        .collect();
    MetricsReport::assemble(cfg.scenario, hash.clone(), cfg.master_seed, cfg.alpha, cfg.bh_family, rows, &planned)
        .stage("significance", &hash)
}

/// Runs the experiment and writes `report.json`, `report.md` and `folds.csv`.
pub fn run_experiment_to(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let report = run_experiment(cfg)?;
    report.write(out).stage("write-report", &cfg.hash())?;
    Ok(report)
}

/// Models of one modality, task and mode as the scenario would train them.
pub fn single_spec(cfg: &ExperimentConfig, modality: Modality, task: Task, mode: Mode) -> ModelSpec {
    cfg.spec(modality, task, mode, cfg.lambda.unwrap_or(0.5), GrlPlacement::PostConcat)
}

