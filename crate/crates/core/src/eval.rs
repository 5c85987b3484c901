//! Rollout evaluation, normalized scores and the multi-seed protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, DelayOffset};
use crate::env::{play_episode, Controller, EnvConfig, EnvError, Game};
use crate::nn::ModelCheckpoint;
use crate::policy::{PolicyAgent, PolicyError};
use crate::rng::Rng64;
use crate::store::{filter_top_percentile, StoreError};
use crate::train::{build_samples, train_samples, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("human and random means are equal ({0}); normalization undefined")]
    DegenerateBaseline(f64),
    #[error("the protocol needs at least {needed} epochs, got {got}")]
    TooFewEpochs { needed: usize, got: usize },
    #[error("delay {delay} is not shorter than the shortest episode ({min_len} frames)")]
    DelayTooLarge { delay: DelayOffset, min_len: usize },
    #[error("keep fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("no baseline recorded for game `{0}`")]
    NoBaseline(String),
    #[error("bad baseline file: {0}")]
    BaselineFile(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// 100·(score − random)/(human − random).
pub fn human_normalized(score: f64, random_mean: f64, human_mean: f64) -> Result<f64, EvalError> {
    let span = human_mean - random_mean;
    if span == 0.0 || !span.is_finite() {
        return Err(EvalError::DegenerateBaseline(human_mean));
    }
    Ok(100.0 * (score - random_mean) / span)
}

/// Wall-clock length of a delay of `d` frames at `fps`.
pub fn delay_ms(d: DelayOffset, fps: f64) -> f64 {
    1000.0 * d.frames() as f64 / fps
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = Rng64::new(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| values[rng.below(n as u64) as usize]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| {
        let idx = (q * (means.len() - 1) as f64).round() as usize;
        means[idx.min(means.len() - 1)]
    };
    (at(tail), at(1.0 - tail))
}

pub fn intervals_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub seed: u64,
    pub episode: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Ordered by seed list position, then episode.
    pub scores: Vec<EpisodeScore>,
    pub mean: f64,
    pub std: f64,
}

impl EvalSummary {
    fn from_scores(scores: Vec<EpisodeScore>) -> Self {
        let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let (mean, std) = mean_std(&values);
        Self { scores, mean, std }
    }
}

/// Seed used for both the environment and the agent of one episode.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    Rng64::derive(seed, episode as u64)
}

/// Plays `n_episodes` per seed. `make` builds a fresh controller from the
/// episode seed. Scores are collected in order and summed sequentially, so
/// the summary does not depend on scheduling.
pub fn run_evaluation<C, F>(
    env: &EnvConfig,
    n_episodes: usize,
    max_frames: Option<u32>,
    seeds: &[u64],
    make: F,
) -> Result<EvalSummary, EvalError>
where
    C: Controller,
    F: Fn(u64) -> Result<C, EvalError> + Sync,
{
    env.validate()?;
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..n_episodes).map(move |e| (s, e)))
        .collect();
    let play = |&(seed, episode): &(u64, usize)| -> Result<EpisodeScore, EvalError> {
        let es = episode_seed(seed, episode);
        let mut controller = make(es)?;
        let score = play_episode(&env.with_seed(es), &mut controller, max_frames)?;
        Ok(EpisodeScore {
            seed,
            episode,
            score,
        })
    };
    let scores: Result<Vec<_>, _> = if crate::deterministic_mode() {
        jobs.iter().map(play).collect()
    } else {
        jobs.par_iter().map(play).collect()
    };
    Ok(EvalSummary::from_scores(scores?))
}

/// [`run_evaluation`] for a trained checkpoint, sampling actions.
pub fn evaluate_checkpoint(
    checkpoint: &ModelCheckpoint,
    env: &EnvConfig,
    n_episodes: usize,
    max_frames: Option<u32>,
    seeds: &[u64],
    greedy: bool,
) -> Result<EvalSummary, EvalError> {
    let probe = PolicyAgent::from_checkpoint(checkpoint, 0)?;
    probe.check_compatible(&env.action_space(), env.render_dims())?;
    let model = probe.model().clone();
    let pipeline = *probe.pipeline();
    run_evaluation(env, n_episodes, max_frames, seeds, |s| {
        Ok(PolicyAgent::new(model.clone(), pipeline, s).greedy(greedy))
    })
}

/// Reference scores of one game: uniformly random actions (0%) and the
/// delay-free scripted expert (100%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameBaseline {
    pub random_mean: f64,
    pub random_std: f64,
    pub random_episodes: usize,
    pub expert_mean: f64,
    pub expert_episodes: usize,
    pub max_frames: Option<u32>,
}

impl GameBaseline {
    /// Interval expected to hold the mean of `n` random episodes, at about
    /// the 99.9% level.
    pub fn random_interval(&self, n: usize) -> (f64, f64) {
        let half = 3.29 * self.random_std / (n as f64).sqrt();
        (self.random_mean - half, self.random_mean + half)
    }

    pub fn normalize(&self, score: f64) -> Result<f64, EvalError> {
        human_normalized(score, self.random_mean, self.expert_mean)
    }
}

/// Frozen baselines keyed by game id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub games: BTreeMap<String, GameBaseline>,
}

const FROZEN_BASELINES: &str = include_str!("../data/baselines.json");

impl Baselines {
    /// The baselines shipped with the crate.
    pub fn frozen() -> Self {
        Self::from_json(FROZEN_BASELINES).expect("shipped baselines parse")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("baselines serialize") + "\n"
    }

    pub fn get(&self, game: Game) -> Result<&GameBaseline, EvalError> {
        self.games
            .get(&game.to_string())
            .ok_or_else(|| EvalError::NoBaseline(game.to_string()))
    }
}

/// Computes a baseline for `env` (default config of a game) by brute force.
pub fn compute_baseline(
    env: &EnvConfig,
    random_episodes: usize,
    expert_episodes: usize,
    max_frames: Option<u32>,
    seed: u64,
) -> Result<GameBaseline, EvalError> {
    let random = run_evaluation(env, random_episodes, max_frames, &[seed], |s| {
        Ok(crate::env::RandomAgent::new(s))
    })?;
    let expert = run_evaluation(env, expert_episodes, max_frames, &[seed], |_| {
        Ok(crate::env::ScriptedExpert::new(0))
    })?;
    Ok(GameBaseline {
        random_mean: random.mean,
        random_std: random.std,
        random_episodes,
        expert_mean: expert.mean,
        expert_episodes,
        max_frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub seeds: Vec<u64>,
    /// How many trailing epochs are evaluated per seed.
    pub last_epochs: usize,
    /// Evaluate only the final checkpoint of each seed.
    pub final_only: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            last_epochs: 3,
            final_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub seeds: Vec<u64>,
    /// Zero-based epoch index of every matrix column, per seed.
    pub epochs: Vec<Vec<usize>>,
    /// Mean score per (seed, evaluated epoch).
    pub matrix: Vec<Vec<f64>>,
    /// Individual episodes behind every matrix cell.
    pub episodes: Vec<Vec<Vec<EpisodeScore>>>,
    /// Mean of the whole matrix.
    pub reported: f64,
}

impl ProtocolResult {
    pub fn per_seed(&self) -> Vec<f64> {
        self.matrix.iter().map(|row| mean_std(row).0).collect()
    }
}

/// Trains once per protocol seed, evaluates the trailing checkpoints and
/// averages everything into one number.
pub fn protocol_evaluate<C, T, E>(
    mut train_fn: T,
    mut evaluate_fn: E,
    config: &ProtocolConfig,
) -> Result<ProtocolResult, EvalError>
where
    T: FnMut(u64) -> Result<Vec<C>, EvalError>,
    E: FnMut(&C) -> Result<EvalSummary, EvalError>,
{
    let wanted = if config.final_only { 1 } else { config.last_epochs };
    let mut result = ProtocolResult {
        seeds: config.seeds.clone(),
        epochs: Vec::new(),
        matrix: Vec::new(),
        episodes: Vec::new(),
        reported: 0.0,
    };
    for &seed in &config.seeds {
        let checkpoints = train_fn(seed)?;
        if checkpoints.len() < wanted {
            return Err(EvalError::TooFewEpochs {
                needed: wanted,
                got: checkpoints.len(),
            });
        }
        let start = checkpoints.len() - wanted;
        let mut row = Vec::with_capacity(wanted);
        let mut eps = Vec::with_capacity(wanted);
        for c in &checkpoints[start..] {
            let summary = evaluate_fn(c)?;
            row.push(summary.mean);
            eps.push(summary.scores);
        }
        result.epochs.push((start..checkpoints.len()).collect());
        result.matrix.push(row);
        result.episodes.push(eps);
    }
    let all: Vec<f64> = result.matrix.iter().flatten().copied().collect();
    result.reported = mean_std(&all).0;
    Ok(result)
}

/// Shared settings of the two experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub protocol: ProtocolConfig,
    /// Evaluation episodes per checkpoint.
    pub eval_episodes: usize,
    pub max_frames: Option<u32>,
    /// Seed list of the evaluation rollouts.
    pub eval_seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            protocol: ProtocolConfig::default(),
            eval_episodes: 20,
            max_frames: None,
            eval_seed: 1_000_000,
            bootstrap_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub protocol: ProtocolResult,
    /// 95% bootstrap interval of the per-seed means.
    pub ci: (f64, f64),
}

impl ConditionResult {
    pub fn score(&self) -> f64 {
        self.protocol.reported
    }
}

/// Runs the protocol on `dataset` with `config.train` (seed replaced per
/// protocol seed).
pub fn evaluate_training(
    condition: &str,
    dataset: &Dataset,
    train: &TrainConfig,
    config: &ExperimentConfig,
) -> Result<ConditionResult, EvalError> {
    let samples = build_samples(dataset, train)?;
    let protocol = protocol_evaluate(
        |seed| {
            let cfg = TrainConfig {
                seed,
                ..train.clone()
            };
            log::info!("{condition}: training seed {seed}");
            Ok(train_samples(&samples, &cfg)?.checkpoints)
        },
        |ckpt| {
            evaluate_checkpoint(
                ckpt,
                &config.env,
                config.eval_episodes,
                config.max_frames,
                &[config.eval_seed],
                false,
            )
        },
        &config.protocol,
    )?;
    let ci = bootstrap_ci(&protocol.per_seed(), 0.95, config.bootstrap_resamples, 0);
    log::info!("{condition}: {:.2} (95% CI {:.2}..{:.2})", protocol.reported, ci.0, ci.1);
    Ok(ConditionResult {
        condition: condition.to_string(),
        protocol,
        ci,
    })
}

/// Trains and evaluates once per delay on the shifted dataset.
pub fn experiment_delay_sweep(
    dataset: &Dataset,
    delays: &[DelayOffset],
    config: &ExperimentConfig,
) -> Result<Vec<ConditionResult>, EvalError> {
    let min_len = dataset.episodes().iter().map(|e| e.len()).min().unwrap_or(0);
    if let Some(&d) = delays.iter().find(|d| d.magnitude() >= min_len) {
        return Err(EvalError::DelayTooLarge { delay: d, min_len });
    }
    delays
        .iter()
        .map(|&d| {
            let train = TrainConfig {
                delay: d.frames(),
                ..config.train.clone()
            };
            evaluate_training(&format!("delay={d}"), dataset, &train, config)
        })
        .collect()
}

/// Trains and evaluates once per keep fraction on the score-filtered subset.
pub fn experiment_quality_filter(
    dataset: &Dataset,
    fractions: &[f64],
    config: &ExperimentConfig,
) -> Result<Vec<ConditionResult>, EvalError> {
    if let Some(&f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(EvalError::Fraction(f));
    }
    fractions
        .iter()
        .map(|&f| {
            let subset = filter_top_percentile(dataset, f)?;
            evaluate_training(&format!("keep={f}"), &subset, &config.train, config)
        })
        .collect()
}

/// `condition,seed,epoch,episode,score` rows for every evaluated episode.
pub fn results_csv(results: &[ConditionResult]) -> String {
    let mut out = String::from("condition,seed,epoch,episode,score\n");
    for r in results {
        let p = &r.protocol;
        for (si, seed) in p.seeds.iter().enumerate() {
            for (ei, epoch) in p.epochs[si].iter().enumerate() {
                for e in &p.episodes[si][ei] {
                    let _ = writeln!(out, "{},{},{},{},{}", r.condition, seed, epoch, e.episode, e.score);
                }
            }
        }
    }
    out
}

/// Table with random mean, expert ("human") mean, BC score and normalized
/// percentage per condition.
pub fn summary_report(results: &[ConditionResult], baseline: Option<&GameBaseline>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>10} {:>10} {:>9} {:>21}",
        "condition", "random", "human", "bc", "norm%", "95% ci (per seed)"
    );
    for r in results {
        let (random, human, norm) = match baseline {
            Some(b) => (
                format!("{:.1}", b.random_mean),
                format!("{:.1}", b.expert_mean),
                b.normalize(r.score())
                    .map(|n| format!("{n:.1}"))
                    .unwrap_or_else(|_| "-".into()),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let ci = format!("[{:.1}, {:.1}]", r.ci.0, r.ci.1);
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10.1} {:>9} {:>21}",
            r.condition,
            random,
            human,
            r.score(),
            norm,
            ci
        );
    }
    out
}
