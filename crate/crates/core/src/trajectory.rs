//! Episode and trajectory data model, preference pairing, and JSONL persistence.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Token};

const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

thread_local! {
    static HIDDEN_INFO_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of times [`Task::hidden_info`] has been called on this thread.
///
/// Used by tests to assert that actor-side code paths never touch the
/// training-time information.
pub fn hidden_info_reads() -> usize {
    HIDDEN_INFO_READS.with(Cell::get)
}

/// An episode template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskRecord", into = "TaskRecord")]
pub struct Task {
    pub task_id: String,
    pub initial_observation: Vec<Token>,
    hidden_info: Vec<Token>,
    pub horizon: usize,
    pub evaluator_id: String,
}

/// What the actor is allowed to see of a task.
#[derive(Debug, Clone, Copy)]
pub struct ActorView<'a> {
    pub task_id: &'a str,
    pub initial_observation: &'a [Token],
    pub horizon: usize,
}

impl Task {
    pub fn new(
        task_id: impl Into<String>,
        initial_observation: Vec<Token>,
        hidden_info: Vec<Token>,
        horizon: usize,
        evaluator_id: impl Into<String>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Invalid("task horizon must be >= 1".into()));
        }
        Ok(Self {
            task_id: task_id.into(),
            initial_observation,
            hidden_info,
            horizon,
            evaluator_id: evaluator_id.into(),
        })
    }

    /// Training-time information. Only the environment, critics and value
    /// heads may call this; every call is counted.
    pub fn hidden_info(&self) -> &[Token] {
        HIDDEN_INFO_READS.with(|c| c.set(c.get() + 1));
        &self.hidden_info
    }

    /// Uncounted read for the environment simulator, which owns `c`.
    pub(crate) fn simulator_hidden_info(&self) -> &[Token] {
        &self.hidden_info
    }

    pub fn actor_view(&self) -> ActorView<'_> {
        ActorView {
            task_id: &self.task_id,
            initial_observation: &self.initial_observation,
            horizon: self.horizon,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    #[serde(default = "schema_version")]
    v: u32,
    task_id: String,
    initial_observation: Vec<Token>,
    hidden_info: Vec<Token>,
    horizon: usize,
    evaluator_id: String,
}

impl TryFrom<TaskRecord> for Task {
    type Error = Error;

    fn try_from(r: TaskRecord) -> Result<Self> {
        check_version(r.v)?;
        Task::new(
            r.task_id,
            r.initial_observation,
            r.hidden_info,
            r.horizon,
            r.evaluator_id,
        )
    }
}

impl From<Task> for TaskRecord {
    fn from(t: Task) -> Self {
        Self {
            v: SCHEMA_VERSION,
            task_id: t.task_id,
            initial_observation: t.initial_observation,
            hidden_info: t.hidden_info,
            horizon: t.horizon,
            evaluator_id: t.evaluator_id,
        }
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Invalid(format!("unsupported schema version {v}")));
    }
    Ok(())
}

/// Tasks keyed by id, used by the critic-side code paths to look up `c`.
#[derive(Debug, Clone, Default)]
pub struct TaskIndex {
    tasks: IndexMap<String, Task>,
}

impl TaskIndex {
    pub fn new(tasks: impl IntoIterator<Item = Task>) -> Result<Self> {
        let mut map = IndexMap::new();
        for t in tasks {
            let id = t.task_id.clone();
            if map.insert(id.clone(), t).is_some() {
                return Err(Error::Invalid(format!("duplicate task_id `{id}`")));
            }
        }
        Ok(Self { tasks: map })
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks.get(task_id)
    }

    pub fn hidden_info(&self, task_id: &str) -> Result<&[Token]> {
        self.tasks
            .get(task_id)
            .map(Task::hidden_info)
            .ok_or_else(|| Error::Invalid(format!("unknown task_id `{task_id}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    #[serde(rename = "t")]
    pub turn_index: usize,
    #[serde(rename = "obs")]
    pub observation: Vec<Token>,
    #[serde(rename = "act")]
    pub action: Vec<Token>,
    #[serde(rename = "resp")]
    pub simulator_response: Vec<Token>,
    #[serde(rename = "r")]
    pub reward: f64,
}

impl TurnRecord {
    /// The observation the next turn starts from.
    pub fn next_observation(&self) -> Vec<Token> {
        let mut next = self.observation.clone();
        next.extend(self.action.iter().cloned());
        next.extend(self.simulator_response.iter().cloned());
        next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AnswerToken,
    HorizonExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    task_id: String,
    turns: Vec<TurnRecord>,
    terminated_by: Termination,
    cumulative_reward: f64,
}

impl Trajectory {
    /// Validates turn numbering, nonempty actions and the append transition
    /// between consecutive observations.
    pub fn new(
        task_id: impl Into<String>,
        turns: Vec<TurnRecord>,
        terminated_by: Termination,
    ) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        for (i, turn) in turns.iter().enumerate() {
            if turn.turn_index != i + 1 {
                return Err(Error::InvalidTrajectory(format!(
                    "turn {} has index {}",
                    i + 1,
                    turn.turn_index
                )));
            }
            if turn.action.is_empty() {
                return Err(Error::InvalidTrajectory(format!(
                    "turn {} has an empty action",
                    i + 1
                )));
            }
            if !turn.reward.is_finite() {
                return Err(Error::InvalidTrajectory(format!(
                    "turn {} has non-finite reward",
                    i + 1
                )));
            }
        }
        for pair in turns.windows(2) {
            if pair[1].observation != pair[0].next_observation() {
                return Err(Error::InvalidTrajectory(format!(
                    "observation at turn {} is not the append of turn {}",
                    pair[1].turn_index, pair[0].turn_index
                )));
            }
        }
        let rewards: Vec<f64> = turns.iter().map(|t| t.reward).collect();
        let cumulative_reward = cumulative_reward(&rewards)?;
        Ok(Self {
            task_id: task_id.into(),
            turns,
            terminated_by,
            cumulative_reward,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn turns(&self) -> &[TurnRecord] {
        &self.turns
    }

    pub fn terminated_by(&self) -> Termination {
        self.terminated_by
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative_reward
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    #[serde(default = "schema_version")]
    v: u32,
    task_id: String,
    terminated_by: Termination,
    turns: Vec<TurnRecord>,
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        check_version(r.v)?;
        Trajectory::new(r.task_id, r.turns, r.terminated_by)
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        Self {
            v: SCHEMA_VERSION,
            task_id: t.task_id,
            terminated_by: t.terminated_by,
            turns: t.turns,
        }
    }
}

/// Undiscounted return.
pub fn cumulative_reward(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Ok(rewards.iter().fold(0.0, |acc, r| acc + r))
}

/// Two trajectories of the same task where `chosen` has strictly higher return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairRecord", into = "PairRecord")]
pub struct TrajectoryPair {
    task_id: String,
    chosen: Trajectory,
    rejected: Trajectory,
}

impl TrajectoryPair {
    pub fn new(chosen: Trajectory, rejected: Trajectory) -> Result<Self> {
        if chosen.task_id != rejected.task_id {
            return Err(Error::InvalidPair(format!(
                "task ids differ: `{}` vs `{}`",
                chosen.task_id, rejected.task_id
            )));
        }
        if chosen.cumulative_reward <= rejected.cumulative_reward {
            return Err(Error::InvalidPair(format!(
                "chosen return {} does not exceed rejected return {}",
                chosen.cumulative_reward, rejected.cumulative_reward
            )));
        }
        Ok(Self {
            task_id: chosen.task_id.clone(),
            chosen,
            rejected,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn chosen(&self) -> &Trajectory {
        &self.chosen
    }

    pub fn rejected(&self) -> &Trajectory {
        &self.rejected
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    #[serde(default = "schema_version")]
    v: u32,
    task_id: String,
    chosen: Trajectory,
    rejected: Trajectory,
}

impl TryFrom<PairRecord> for TrajectoryPair {
    type Error = Error;

    fn try_from(r: PairRecord) -> Result<Self> {
        check_version(r.v)?;
        if r.task_id != r.chosen.task_id {
            return Err(Error::InvalidPair("pair task_id mismatch".into()));
        }
        TrajectoryPair::new(r.chosen, r.rejected)
    }
}

impl From<TrajectoryPair> for PairRecord {
    fn from(p: TrajectoryPair) -> Self {
        Self {
            v: SCHEMA_VERSION,
            task_id: p.task_id,
            chosen: p.chosen,
            rejected: p.rejected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingConfig {
    /// Pairs need a return gap strictly larger than this.
    pub min_gap: f64,
    /// Per-task cap; `None` keeps every qualifying pair.
    pub max_pairs_per_task: Option<usize>,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            min_gap: 0.0,
            max_pairs_per_task: Some(8),
        }
    }
}

/// Forms cross pairs within each task, in first-appearance order of tasks.
pub fn make_trajectory_pairs<R: Rng>(
    dataset: &[Trajectory],
    config: PairingConfig,
    rng: &mut R,
) -> Result<Vec<TrajectoryPair>> {
    if !(config.min_gap >= 0.0) {
        return Err(Error::Invalid("min_gap must be >= 0".into()));
    }
    let mut by_task: IndexMap<&str, Vec<&Trajectory>> = IndexMap::new();
    for traj in dataset {
        by_task.entry(traj.task_id()).or_default().push(traj);
    }
    let mut pairs = Vec::new();
    for group in by_task.values() {
        let mut candidates = Vec::new();
        for i in 0..group.len() {
            for j in (i + 1)..group.len() {
                let (a, b) = (group[i], group[j]);
                let gap = a.cumulative_reward() - b.cumulative_reward();
                if gap.abs() > config.min_gap {
                    candidates.push(if gap > 0.0 { (a, b) } else { (b, a) });
                }
            }
        }
        let keep: Vec<usize> = match config.max_pairs_per_task {
            Some(cap) if candidates.len() > cap => {
                let mut idx = sample(rng, candidates.len(), cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..candidates.len()).collect(),
        };
        for i in keep {
            let (chosen, rejected) = candidates[i];
            pairs.push(TrajectoryPair::new(chosen.clone(), rejected.clone())?);
        }
    }
    Ok(pairs)
}

/// Writes one JSON object per line.
pub fn save_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL file; blank lines are skipped, errors carry 1-based line numbers.
pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn traj(task: &str, rewards: &[f64]) -> Trajectory {
        let mut obs = toks("TASK color");
        let mut turns = Vec::new();
        for (i, &r) in rewards.iter().enumerate() {
            let turn = TurnRecord {
                turn_index: i + 1,
                observation: obs.clone(),
                action: toks("ASK_color END"),
                simulator_response: toks("color = red"),
                reward: r,
            };
            obs = turn.next_observation();
            turns.push(turn);
        }
        Trajectory::new(task, turns, Termination::HorizonExhausted).unwrap()
    }

    #[test]
    fn cumulative_reward_sums() {
        assert_eq!(cumulative_reward(&[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cumulative_reward(&[0.25, 0.25]).unwrap(), 0.5);
        assert!(matches!(cumulative_reward(&[]), Err(Error::EmptyTrajectory)));
        assert_eq!(traj("a", &[0.0, 0.0, 1.0]).cumulative_reward(), 1.0);
    }

    #[test]
    fn rejects_broken_append_transition() {
        let t = traj("a", &[0.0, 0.0]);
        let mut turns = t.turns().to_vec();
        turns[1].observation.pop();
        assert!(matches!(
            Trajectory::new("a", turns, Termination::AnswerToken),
            Err(Error::InvalidTrajectory(_))
        ));
    }

    #[test]
    fn rejects_empty_action_and_bad_indices() {
        let t = traj("a", &[0.0]);
        let mut turns = t.turns().to_vec();
        turns[0].action.clear();
        assert!(Trajectory::new("a", turns, Termination::AnswerToken).is_err());
        let mut turns = t.turns().to_vec();
        turns[0].turn_index = 2;
        assert!(Trajectory::new("a", turns, Termination::AnswerToken).is_err());
    }

    #[test]
    fn pair_requires_strict_dominance_and_shared_task() {
        assert!(TrajectoryPair::new(traj("a", &[1.0]), traj("a", &[0.0])).is_ok());
        assert!(TrajectoryPair::new(traj("a", &[1.0]), traj("a", &[1.0])).is_err());
        assert!(TrajectoryPair::new(traj("a", &[1.0]), traj("b", &[0.0])).is_err());
    }

    #[test]
    fn pairs_from_two_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = vec![traj("a", &[0.0]), traj("a", &[1.0])];
        let pairs = make_trajectory_pairs(&data, PairingConfig::default(), &mut rng).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].chosen().cumulative_reward(), 1.0);

        let tied = vec![traj("a", &[1.0]), traj("a", &[1.0])];
        let pairs = make_trajectory_pairs(&tied, PairingConfig::default(), &mut rng).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn three_levels_give_three_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = vec![traj("a", &[1.0]), traj("a", &[0.5]), traj("a", &[0.0])];
        let pairs = make_trajectory_pairs(&data, PairingConfig::default(), &mut rng).unwrap();
        let got: Vec<(f64, f64)> = pairs
            .iter()
            .map(|p| (p.chosen().cumulative_reward(), p.rejected().cumulative_reward()))
            .collect();
        assert_eq!(got, vec![(1.0, 0.5), (1.0, 0.0), (0.5, 0.0)]);
    }

    #[test]
    fn pair_cap_and_min_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<_> = (0..6).map(|i| traj("a", &[i as f64])).collect();
        let cfg = PairingConfig {
            min_gap: 0.0,
            max_pairs_per_task: Some(4),
        };
        let pairs = make_trajectory_pairs(&data, cfg, &mut rng).unwrap();
        assert_eq!(pairs.len(), 4);
        let cfg = PairingConfig {
            min_gap: 2.5,
            max_pairs_per_task: None,
        };
        let pairs = make_trajectory_pairs(&data, cfg, &mut rng).unwrap();
        // gaps 3, 4, 5: (0,3) (0,4) (0,5) (1,4) (1,5) (2,5)
        assert_eq!(pairs.len(), 6);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let data = vec![traj("a", &[0.0, 0.0, 1.0])];
        save_jsonl(&path, &data).unwrap();
        let back: Vec<Trajectory> = load_jsonl(&path).unwrap();
        assert_eq!(back, data);

        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl::<Trajectory>(&path).unwrap().is_empty());

        let good = serde_json::to_string(&data[0]).unwrap();
        let bad = r#"{"task_id":"a","turns":[]}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_jsonl::<Trajectory>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wire_format_field_names() {
        let t = traj("a", &[1.0]);
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert_eq!(v["terminated_by"], "horizon_exhausted");
        assert_eq!(v["turns"][0]["t"], 1);
        assert_eq!(v["turns"][0]["act"][0], "ASK_color");
        assert_eq!(v["turns"][0]["r"], 1.0);
        assert!(v.get("cumulative_reward").is_none());
    }

    #[test]
    fn task_hidden_info_reads_are_counted() {
        let task = Task::new("t", toks("TASK"), toks("color = red"), 3, "binary").unwrap();
        let before = hidden_info_reads();
        let _ = task.actor_view();
        assert_eq!(hidden_info_reads(), before);
        assert_eq!(task.hidden_info().len(), 3);
        assert_eq!(hidden_info_reads(), before + 1);
        assert!(Task::new("t", vec![], vec![], 0, "binary").is_err());
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        let tok = prop::sample::select(vec!["a", "b", "c", "END", "="]);
        let turn = (
            prop::collection::vec(tok.clone(), 1..4),
            prop::collection::vec(tok, 0..4),
            -10.0f64..10.0,
        );
        (
            "[a-z]{1,6}",
            prop::collection::vec(turn, 1..6),
            any::<bool>(),
        )
            .prop_map(|(id, raw, answered)| {
                let mut obs = vec!["TASK".to_string()];
                let mut turns = Vec::new();
                for (i, (act, resp, r)) in raw.into_iter().enumerate() {
                    let t = TurnRecord {
                        turn_index: i + 1,
                        observation: obs.clone(),
                        action: act.into_iter().map(String::from).collect(),
                        simulator_response: resp.into_iter().map(String::from).collect(),
                        reward: r,
                    };
                    obs = t.next_observation();
                    turns.push(t);
                }
                let term = if answered {
                    Termination::AnswerToken
                } else {
                    Termination::HorizonExhausted
                };
                Trajectory::new(id, turns, term).unwrap()
            })
    }

    proptest! {
        #[test]
        fn trajectory_json_round_trip(t in arb_trajectory()) {
            let s = serde_json::to_string(&t).unwrap();
            let back: Trajectory = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(&back, &t);
            let folded = t.turns().iter().fold(0.0, |a, x| a + x.reward);
            prop_assert!((t.cumulative_reward() - folded).abs() <= 1e-12);
        }

        #[test]
        fn pair_and_task_json_round_trip(a in arb_trajectory(), b in arb_trajectory()) {
            let b = Trajectory::new(a.task_id(), b.turns().to_vec(), b.terminated_by()).unwrap();
            let task_id = a.task_id().to_owned();
            if a.cumulative_reward() != b.cumulative_reward() {
                let (c, r) = if a.cumulative_reward() > b.cumulative_reward() { (a, b) } else { (b, a) };
                let pair = TrajectoryPair::new(c, r).unwrap();
                let back: TrajectoryPair =
                    serde_json::from_str(&serde_json::to_string(&pair).unwrap()).unwrap();
                prop_assert_eq!(back, pair);
            }
            let task = Task::new(task_id, vec!["TASK".into()], vec!["x".into()], 4, "binary").unwrap();
            let back: Task = serde_json::from_str(&serde_json::to_string(&task).unwrap()).unwrap();
            prop_assert_eq!(back, task);
        }
    }
}
