//! Staged experiment driver on the slot game.
//!
//! Every stage reads only files written by earlier stages and writes its own
//! outputs under `<out>/<run id>/seed-<s>/`, so any stage can be rerun alone.
//! A `manifest.json` per seed records the config hash and the SHA-256 of
//! every artifact; [`Pipeline::run_all`] skips stages whose recorded outputs
//! are still intact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actor::{train_actor_sweet, train_multiturn_dpo, train_rejection_ft, TrainReport, ValueHead};
use crate::config::{Algorithm, RunConfig, ScorerKind};
use crate::critic::{train_critic, CriticModel, CriticReport, HiddenInfoMode};
use crate::env::{sample_task, Episode, PolicyAgent, SlotEpisode};
use crate::eval::{eval_success, rollouts, scaling_curve, EpisodeFactory, EvalSummary, ScalingRow, Scorer};
use crate::policy::{freeze_reference, FrozenPolicy, PolicyModel};
use crate::stats::{mean, paired_t_test_greater, stderr};
use crate::trajectory::{load_jsonl, make_trajectory_pairs, save_jsonl, Task, TaskIndex, Trajectory};
use crate::warmstart::train_seed_actor;
use crate::{Error, Result};

const TASKS_TRAIN: &str = "tasks_train.jsonl";
const TASKS_EVAL: &str = "tasks_eval.jsonl";
const SEED_ACTOR: &str = "seed_actor.json";
const OFFLINE: &str = "offline.jsonl";
const VALUE_HEAD: &str = "value_head.json";
const EVAL: &str = "eval.csv";
const SCALING: &str = "scaling_curve.csv";
const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";
pub const COMPARISONS: &str = "comparisons.csv";

/// Per-stage generator salts.
const SALT_WARMSTART: u64 = 0x01;
const SALT_ROLLOUT: u64 = 0x02;
const SALT_PAIRS: u64 = 0x03;
const SALT_CRITIC: u64 = 0x04;
const SALT_ACTOR: u64 = 0x05;
const SALT_VALUE: u64 = 0x06;
const SALT_EVAL: u64 = 0x07;
const SALT_BEST_OF_N: u64 = 0x08;

fn stage_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(seed, salt))
}

fn stage_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Which critic a consumer needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CriticVariant {
    Main,
    NoHiddenInfo,
    Unnormalized,
}

impl CriticVariant {
    pub fn file(self) -> &'static str {
        match self {
            CriticVariant::Main => "critic.json",
            CriticVariant::NoHiddenInfo => "critic_no_hidden_info.json",
            CriticVariant::Unnormalized => "critic_unnormalized.json",
        }
    }

    fn report(self) -> String {
        self.file().replace(".json", "_report.csv")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Artifact file name → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub algorithm: String,
    pub success_rate: f64,
    pub stderr: f64,
    pub mean_reward: f64,
    pub reward_stderr: f64,
    pub mean_action_length: f64,
    pub mean_turns: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub seeds: usize,
    pub success_rate: f64,
    pub success_stderr: f64,
    pub mean_reward: f64,
    pub mean_reward_stderr: f64,
    pub mean_action_length: f64,
    pub mean_turns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub scorer: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub success_rate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub better: String,
    pub worse: String,
    pub seeds: usize,
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    csv::Reader::from_path(path)?
        .into_deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.to_owned(),
            source: Box::new(e),
        },
    })
}

pub struct Pipeline {
    config: RunConfig,
    run_dir: PathBuf,
    config_hash: String,
}

impl Pipeline {
    /// `out` overrides `run.out`.
    pub fn new(config: RunConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let root = out.unwrap_or_else(|| config.run.out.clone());
        let run_dir = root.join(&config.run.id);
        let config_hash = config.hash()?;
        Ok(Self {
            config,
            run_dir,
            config_hash,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir.join(format!("seed-{seed}"))
    }

    fn path(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(name)
    }

    fn require(&self, seed: u64, name: &str) -> Result<PathBuf> {
        let p = self.path(seed, name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    pub fn manifest(&self, seed: u64) -> Result<Manifest> {
        let p = self.path(seed, MANIFEST);
        if !p.exists() {
            return Ok(Manifest {
                config_hash: self.config_hash.clone(),
                seed,
                artifacts: BTreeMap::new(),
            });
        }
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&p)?)?;
        if m.config_hash != self.config_hash {
            // A different config owns these artifacts; start over.
            return Ok(Manifest {
                config_hash: self.config_hash.clone(),
                seed,
                artifacts: BTreeMap::new(),
            });
        }
        Ok(m)
    }

    fn record(&self, seed: u64, names: &[String]) -> Result<()> {
        let mut m = self.manifest(seed)?;
        for n in names {
            m.artifacts.insert(n.clone(), sha256_file(&self.path(seed, n))?);
        }
        fs::write(self.path(seed, MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    /// Whether every named artifact is recorded and unchanged.
    pub fn is_fresh(&self, seed: u64, names: &[String]) -> Result<bool> {
        let m = self.manifest(seed)?;
        for n in names {
            let p = self.path(seed, n);
            match m.artifacts.get(n) {
                Some(h) if p.exists() && *h == sha256_file(&p)? => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    fn load_tasks(&self, seed: u64, name: &str) -> Result<Vec<Task>> {
        load_jsonl(self.require(seed, name)?)
    }

    fn seed_actor(&self, seed: u64) -> Result<PolicyModel> {
        PolicyModel::load(self.require(seed, SEED_ACTOR)?)
    }

    fn factory(&self) -> impl Fn(&Task, u64) -> Result<Box<dyn Episode>> + Sync + '_ {
        let env = self.config.env;
        move |task: &Task, _| Ok(Box::new(SlotEpisode::new(env, task.clone())?) as Box<dyn Episode>)
    }

    /// Training and held-out evaluation tasks.
    pub fn gen_tasks(&self, seed: u64) -> Result<()> {
        staged("gen-tasks", (|| {
            fs::create_dir_all(self.seed_dir(seed))?;
            let env = &self.config.env;
            let d = &self.config.data;
            let base = seed * 10_000_019;
            let train: Vec<Task> = (0..d.train_tasks() as u64).map(|i| sample_task(env, base + i)).collect();
            let eval: Vec<Task> = (0..d.eval_tasks as u64)
                .map(|i| sample_task(env, d.eval_task_offset + base + i))
                .collect();
            save_jsonl(self.path(seed, TASKS_TRAIN), &train)?;
            save_jsonl(self.path(seed, TASKS_EVAL), &eval)?;
            self.record(seed, &[TASKS_TRAIN.into(), TASKS_EVAL.into()])
        })())
    }

    /// Fits the zero-shot actor and collects the offline dataset with it.
    pub fn rollout(&self, seed: u64) -> Result<()> {
        staged("rollout", (|| {
            let train = self.load_tasks(seed, TASKS_TRAIN)?;
            let cfg = &self.config;
            let mut rng = stage_rng(seed, SALT_WARMSTART);
            let (actor, report) =
                train_seed_actor(&cfg.env, cfg.model.mode(), cfg.model.hash_seed, &cfg.warmstart, seed, &mut rng)?;
            actor.save(self.path(seed, SEED_ACTOR))?;
            fs::write(self.path(seed, "warmstart_report.csv"), report.to_csv())?;
            let agent = PolicyAgent {
                model: &actor,
                max_len: cfg.max_action_len(),
            };
            let n = cfg.data.offline_trajectories;
            let rpt = cfg.data.rollouts_per_task.max(1);
            // Trajectory i plays task i / rpt, so smaller datasets are prefixes of larger ones.
            let per_task: Vec<Task> = (0..n).map(|i| train[i / rpt].clone()).collect();
            let trajs = rollouts(&agent, &per_task, &self.factory(), n, stage_seed(seed, SALT_ROLLOUT))?;
            save_jsonl(self.path(seed, OFFLINE), &trajs)?;
            self.record(
                seed,
                &[SEED_ACTOR.into(), "warmstart_report.csv".into(), OFFLINE.into()],
            )
        })())
    }

    pub fn critic_variants(&self) -> Vec<CriticVariant> {
        let mut v = vec![CriticVariant::Main];
        let algos = &self.config.eval.algorithms;
        let bon = &self.config.best_of_n;
        if algos.contains(&Algorithm::SweetNoHiddenInfo)
            || (bon.enabled && bon.scorers.contains(&ScorerKind::CriticNoHiddenInfo))
        {
            v.push(CriticVariant::NoHiddenInfo);
        }
        if algos.contains(&Algorithm::SweetUnnormalized) {
            v.push(CriticVariant::Unnormalized);
        }
        v
    }

    fn critic_settings(&self, variant: CriticVariant) -> (bool, HiddenInfoMode) {
        let c = &self.config.critic;
        match variant {
            CriticVariant::Main => (c.normalize_by_length, c.hidden_info),
            CriticVariant::NoHiddenInfo => (c.normalize_by_length, HiddenInfoMode::Blank),
            CriticVariant::Unnormalized => (false, c.hidden_info),
        }
    }

    /// Trains every critic variant the configured consumers need.
    pub fn train_critic(&self, seed: u64) -> Result<Vec<CriticReport>> {
        staged("train-critic", (|| {
            let offline: Vec<Trajectory> = load_jsonl(self.require(seed, OFFLINE)?)?;
            let tasks = TaskIndex::new(self.load_tasks(seed, TASKS_TRAIN)?)?;
            let seed_actor = self.seed_actor(seed)?;
            let pairs = make_trajectory_pairs(&offline, self.config.data.pairing(), &mut stage_rng(seed, SALT_PAIRS))?;
            let mut reports = Vec::new();
            let mut written = Vec::new();
            for variant in self.critic_variants() {
                let (normalize, mode) = self.critic_settings(variant);
                let mut critic = CriticModel::new(&seed_actor, self.config.critic.beta, normalize, mode)?;
                let report = train_critic(
                    &mut critic,
                    &pairs,
                    &tasks,
                    &self.config.critic.train(),
                    &mut stage_rng(seed, SALT_CRITIC),
                )?;
                critic.save(self.path(seed, variant.file()))?;
                fs::write(self.path(seed, &variant.report()), critic_report_csv(&report))?;
                written.push(variant.file().to_owned());
                written.push(variant.report());
                reports.push(report);
            }
            self.record(seed, &written)?;
            Ok(reports)
        })())
    }

    fn load_critic(&self, seed: u64, variant: CriticVariant, reference: &FrozenPolicy) -> Result<CriticModel> {
        CriticModel::load(self.require(seed, variant.file())?, reference.clone())
    }

    /// Fits the success-predicting value head.
    pub fn train_value(&self, seed: u64) -> Result<TrainReport> {
        staged("train-actor:value", (|| {
            let offline: Vec<Trajectory> = load_jsonl(self.require(seed, OFFLINE)?)?;
            let tasks = TaskIndex::new(self.load_tasks(seed, TASKS_TRAIN)?)?;
            let mut head = ValueHead::new(self.config.model.features, self.config.model.hash_seed);
            let examples = head.examples(&offline, &tasks, self.config.value.success_threshold)?;
            let report = head.train(&examples, &self.config.value, &mut stage_rng(seed, SALT_VALUE))?;
            head.save(self.path(seed, VALUE_HEAD))?;
            fs::write(self.path(seed, "value_report.csv"), report.to_csv())?;
            self.record(seed, &[VALUE_HEAD.into(), "value_report.csv".into()])?;
            Ok(report)
        })())
    }

    pub fn actor_file(algo: Algorithm) -> String {
        format!("actor_{}.json", algo.name())
    }

    /// Trains one actor from the seed actor. The zero-shot "algorithm" just
    /// copies the seed actor.
    pub fn train_actor(&self, seed: u64, algo: Algorithm) -> Result<()> {
        staged(&format!("train-actor:{}", algo.name()), (|| {
            let cfg = &self.config;
            let seed_actor = self.seed_actor(seed)?;
            let reference = freeze_reference(&seed_actor);
            let mut actor = seed_actor.clone();
            let mut rng = stage_rng(seed, SALT_ACTOR);
            let report_name = format!("train_{}.csv", algo.name());
            let report = match algo {
                Algorithm::ZeroShot => None,
                Algorithm::Rft => {
                    let offline: Vec<Trajectory> = load_jsonl(self.require(seed, OFFLINE)?)?;
                    Some(train_rejection_ft(&mut actor, &offline, &cfg.rft, &mut rng)?)
                }
                Algorithm::Mtdpo => {
                    let offline: Vec<Trajectory> = load_jsonl(self.require(seed, OFFLINE)?)?;
                    let pairs = make_trajectory_pairs(&offline, cfg.data.pairing(), &mut stage_rng(seed, SALT_PAIRS))?;
                    Some(train_multiturn_dpo(&mut actor, &reference, &pairs, &cfg.mtdpo, &mut rng)?)
                }
                _ => {
                    let offline: Vec<Trajectory> = load_jsonl(self.require(seed, OFFLINE)?)?;
                    let tasks = TaskIndex::new(self.load_tasks(seed, TASKS_TRAIN)?)?;
                    let critic;
                    let head;
                    let scorer = match algo {
                        Algorithm::Sweet => {
                            critic = self.load_critic(seed, CriticVariant::Main, &reference)?;
                            Scorer::CriticAdvantage(&critic)
                        }
                        Algorithm::SweetUnnormalized => {
                            critic = self.load_critic(seed, CriticVariant::Unnormalized, &reference)?;
                            Scorer::CriticAdvantage(&critic)
                        }
                        Algorithm::SweetNoHiddenInfo => {
                            critic = self.load_critic(seed, CriticVariant::NoHiddenInfo, &reference)?;
                            Scorer::CriticNoHiddenInfo(&critic)
                        }
                        Algorithm::SweetValueHead => {
                            head = ValueHead::load(self.require(seed, VALUE_HEAD)?)?;
                            Scorer::ValueHead(&head)
                        }
                        _ => Scorer::Random,
                    };
                    Some(train_actor_sweet(
                        &mut actor,
                        &reference,
                        &scorer,
                        &offline,
                        &tasks,
                        cfg.max_action_len(),
                        &cfg.actor,
                        &mut rng,
                    )?)
                }
            };
            let file = Self::actor_file(algo);
            actor.save(self.path(seed, &file))?;
            let mut written = vec![file];
            if let Some(r) = report {
                fs::write(self.path(seed, &report_name), r.to_csv())?;
                written.push(report_name);
            }
            self.record(seed, &written)
        })())
    }

    /// Success of every configured algorithm on the held-out tasks, with
    /// common random numbers across algorithms.
    pub fn eval(&self, seed: u64) -> Result<Vec<EvalRow>> {
        staged("eval", (|| {
            let tasks = self.load_tasks(seed, TASKS_EVAL)?;
            let mut rows = Vec::new();
            for &algo in &self.config.eval.algorithms {
                let actor = PolicyModel::load(self.require(seed, &Self::actor_file(algo))?)?;
                let agent = PolicyAgent {
                    model: &actor,
                    max_len: self.config.max_action_len(),
                };
                let s: EvalSummary = eval_success(
                    &agent,
                    &tasks,
                    &self.factory(),
                    self.config.eval.episodes,
                    stage_seed(seed, SALT_EVAL),
                )?;
                rows.push(EvalRow {
                    algorithm: algo.name().to_owned(),
                    success_rate: s.success_rate,
                    stderr: s.stderr,
                    mean_reward: s.mean_reward,
                    reward_stderr: s.reward_stderr,
                    mean_action_length: s.mean_action_length,
                    mean_turns: s.mean_turns,
                    episodes: s.episodes,
                });
            }
            write_csv(&self.path(seed, EVAL), &rows)?;
            self.record(seed, &[EVAL.into()])?;
            Ok(rows)
        })())
    }

    /// Best-of-N over the zero-shot actor's candidates for every configured scorer.
    pub fn best_of_n(&self, seed: u64) -> Result<Vec<ScalingRow>> {
        staged("best-of-n", (|| {
            let cfg = &self.config;
            let tasks = self.load_tasks(seed, TASKS_EVAL)?;
            let actor = self.seed_actor(seed)?;
            let reference = freeze_reference(&actor);
            let agent = PolicyAgent {
                model: &actor,
                max_len: cfg.max_action_len(),
            };
            let factory: &EpisodeFactory<'_> = &self.factory();
            let mut rows = Vec::new();
            for &kind in &cfg.best_of_n.scorers {
                let critic;
                let head;
                let scorer = match kind {
                    ScorerKind::CriticAdvantage => {
                        critic = self.load_critic(seed, CriticVariant::Main, &reference)?;
                        Scorer::CriticAdvantage(&critic)
                    }
                    ScorerKind::CriticNoHiddenInfo => {
                        critic = self.load_critic(seed, CriticVariant::NoHiddenInfo, &reference)?;
                        Scorer::CriticNoHiddenInfo(&critic)
                    }
                    ScorerKind::ValueHead => {
                        head = ValueHead::load(self.require(seed, VALUE_HEAD)?)?;
                        Scorer::ValueHead(&head)
                    }
                    ScorerKind::Random => Scorer::Random,
                };
                rows.extend(scaling_curve(
                    &agent,
                    &scorer,
                    &tasks,
                    factory,
                    &cfg.best_of_n.n_values,
                    cfg.best_of_n.episodes,
                    stage_seed(seed, SALT_BEST_OF_N),
                )?);
            }
            write_csv(&self.path(seed, SCALING), &rows)?;
            self.record(seed, &[SCALING.into()])?;
            Ok(rows)
        })())
    }

    fn needs_value_head(&self) -> bool {
        self.config.eval.algorithms.contains(&Algorithm::SweetValueHead)
            || (self.config.best_of_n.enabled && self.config.best_of_n.scorers.contains(&ScorerKind::ValueHead))
    }

    fn actor_outputs(&self, algo: Algorithm) -> Vec<String> {
        let mut v = vec![Self::actor_file(algo)];
        if algo != Algorithm::ZeroShot {
            v.push(format!("train_{}.csv", algo.name()));
        }
        v
    }

    /// Every stage for one seed, skipping stages whose outputs are intact.
    pub fn run_seed(&self, seed: u64) -> Result<()> {
        let fresh = |names: &[String]| self.is_fresh(seed, names);
        if !fresh(&[TASKS_TRAIN.into(), TASKS_EVAL.into()])? {
            self.gen_tasks(seed)?;
        }
        if !fresh(&[SEED_ACTOR.into(), OFFLINE.into()])? {
            self.rollout(seed)?;
        }
        let critic_files: Vec<String> = self.critic_variants().iter().map(|v| v.file().to_owned()).collect();
        if !fresh(&critic_files)? {
            self.train_critic(seed)?;
        }
        if self.needs_value_head() && !fresh(&[VALUE_HEAD.into()])? {
            self.train_value(seed)?;
        }
        for &algo in &self.config.eval.algorithms {
            if !fresh(&self.actor_outputs(algo))? {
                self.train_actor(seed, algo)?;
            }
        }
        self.eval(seed)?;
        if self.config.best_of_n.enabled {
            self.best_of_n(seed)?;
        }
        Ok(())
    }

    /// All seeds, then the run-level report.
    pub fn run_all(&self) -> Result<Report> {
        for &seed in &self.config.run.seeds {
            self.run_seed(seed)?;
        }
        report(&self.run_dir)
    }
}

fn critic_report_csv(r: &CriticReport) -> String {
    let mut out = String::from("epoch,loss,margin,accuracy\n");
    out.push_str(&format!("0,{},,\n", r.initial_loss));
    for e in &r.epochs {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.margin, e.accuracy));
    }
    out
}

/// Aggregated results of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub curve: Vec<CurveRow>,
    pub comparisons: Vec<ComparisonRow>,
    /// Per-seed evaluation rows, in seed order.
    pub per_seed: Vec<(u64, Vec<EvalRow>)>,
    pub per_seed_curves: Vec<(u64, Vec<ScalingRow>)>,
}

impl Report {
    /// Per-seed success rates of one algorithm, in seed order.
    pub fn success(&self, algorithm: &str) -> Vec<f64> {
        self.metric(algorithm, |r| r.success_rate)
    }

    pub fn metric(&self, algorithm: &str, f: impl Fn(&EvalRow) -> f64) -> Vec<f64> {
        self.per_seed
            .iter()
            .filter_map(|(_, rows)| rows.iter().find(|r| r.algorithm == algorithm).map(&f))
            .collect()
    }

    /// Per-seed Best-of-N success of one scorer at one `N`.
    pub fn curve_point(&self, scorer: &str, n: usize) -> Vec<f64> {
        self.per_seed_curves
            .iter()
            .filter_map(|(_, rows)| rows.iter().find(|r| r.scorer == scorer && r.n == n).map(|r| r.success_rate))
            .collect()
    }
}

fn seed_dirs(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    if !run_dir.is_dir() {
        return Err(Error::MissingArtifact(run_dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(s) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join(EVAL).exists() {
                out.push((s, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregates every `seed-*/eval.csv` and `seed-*/scaling_curve.csv` under
/// `run_dir` into `summary.csv`, `scaling_curve.csv` and `comparisons.csv`.
pub fn report(run_dir: &Path) -> Result<Report> {
    staged("report", (|| {
        let seeds = seed_dirs(run_dir)?;
        if seeds.is_empty() {
            return Err(Error::EmptyInput("run directory has no evaluated seeds"));
        }
        let mut per_seed = Vec::new();
        let mut per_seed_curves = Vec::new();
        for (s, dir) in &seeds {
            per_seed.push((*s, read_csv::<EvalRow>(&dir.join(EVAL))?));
            if dir.join(SCALING).exists() {
                per_seed_curves.push((*s, read_csv::<ScalingRow>(&dir.join(SCALING))?));
            }
        }
        let mut algos: Vec<String> = Vec::new();
        for (_, rows) in &per_seed {
            for r in rows {
                if !algos.contains(&r.algorithm) {
                    algos.push(r.algorithm.clone());
                }
            }
        }
        let mut rep = Report {
            summary: Vec::new(),
            curve: Vec::new(),
            comparisons: Vec::new(),
            per_seed,
            per_seed_curves,
        };
        for a in &algos {
            let success = rep.success(a);
            let reward = rep.metric(a, |r| r.mean_reward);
            let single = rep.per_seed.iter().flat_map(|(_, rows)| rows).find(|r| &r.algorithm == a);
            let (s_err, r_err) = if success.len() == 1 {
                let r = single.expect("one row");
                (r.stderr, r.reward_stderr)
            } else {
                (stderr(&success), stderr(&reward))
            };
            rep.summary.push(SummaryRow {
                algorithm: a.clone(),
                seeds: success.len(),
                success_rate: mean(&success),
                success_stderr: s_err,
                mean_reward: mean(&reward),
                mean_reward_stderr: r_err,
                mean_action_length: mean(&rep.metric(a, |r| r.mean_action_length)),
                mean_turns: mean(&rep.metric(a, |r| r.mean_turns)),
            });
        }
        let mut keys: Vec<(String, usize)> = Vec::new();
        for (_, rows) in &rep.per_seed_curves {
            for r in rows {
                let k = (r.scorer.clone(), r.n);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        for (scorer, n) in keys {
            let pts = rep.curve_point(&scorer, n);
            let err = if pts.len() == 1 {
                rep.per_seed_curves
                    .iter()
                    .flat_map(|(_, rows)| rows)
                    .find(|r| r.scorer == scorer && r.n == n)
                    .map_or(0.0, |r| r.stderr)
            } else {
                stderr(&pts)
            };
            rep.curve.push(CurveRow {
                scorer,
                n,
                success_rate: mean(&pts),
                stderr: err,
            });
        }
        // Each algorithm against the next one in configured order.
        for w in algos.windows(2) {
            let (a, b) = (&w[1], &w[0]);
            let (sa, sb) = (rep.success(a), rep.success(b));
            if sa.len() == sb.len() && sa.len() >= 2 {
                let (t, p) = paired_t_test_greater(&sa, &sb);
                let diff: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x - y).collect();
                rep.comparisons.push(ComparisonRow {
                    better: a.clone(),
                    worse: b.clone(),
                    seeds: sa.len(),
                    mean_difference: mean(&diff),
                    t_statistic: t,
                    p_value: p,
                });
            }
        }
        write_csv(&run_dir.join(SUMMARY), &rep.summary)?;
        write_csv(&run_dir.join(SCALING), &rep.curve)?;
        write_csv(&run_dir.join(COMPARISONS), &rep.comparisons)?;
        Ok(rep)
    })())
}
