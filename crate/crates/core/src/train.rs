//! Behavioural-cloning training loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, ActionSpace, Dataset, DelayOffset, Observation};
use crate::nn::{AdamConfig, AdamState, Architecture, Model, ModelCheckpoint, NnError, PolicyModel};
use crate::preprocess::{write_model_input, FramePipeline, PreprocessError};
use crate::rng::Rng64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("episodes use different action spaces ({0} vs {1})")]
    HeterogeneousSpaces(ActionSpace, ActionSpace),
    #[error("frame size differs between episodes after preprocessing")]
    HeterogeneousFrames,
    #[error("no samples left after shifting actions by {0}")]
    EmptyAfterShift(DelayOffset),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Network family built for the preprocessed input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    #[default]
    Nature,
    Compact,
}

impl ArchitectureKind {
    pub fn build(self, input: [usize; 3], space: &ActionSpace) -> Architecture {
        match self {
            ArchitectureKind::Nature => Architecture::nature_cnn(input, space),
            ArchitectureKind::Compact => Architecture::compact_cnn(input, space),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Frames by which actions are shifted before pairing.
    pub delay: i64,
    pub pipeline: FramePipeline,
    pub architecture: ArchitectureKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_weight: 1e-5,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            delay: 0,
            pipeline: FramePipeline::default(),
            architecture: ArchitectureKind::Nature,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return bad("l2_weight must be non-negative");
        }
        if matches!(self.pipeline.resize, Some((0, _)) | Some((_, 0))) {
            return bad("resize target must be non-zero");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// All (preprocessed frame, shifted action) pairs of a dataset.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub space: ActionSpace,
    pub frames: Vec<Observation>,
    pub actions: Vec<Action>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Model input shape `[channels, height, width]`.
    pub fn input_shape(&self) -> [usize; 3] {
        let (w, h) = self.frames[0].dims();
        [Observation::CHANNELS, h as usize, w as usize]
    }
}

/// Applies the pipeline and delay to every episode. Episodes no longer than
/// the delay contribute nothing.
pub fn build_samples(dataset: &Dataset, config: &TrainConfig) -> Result<SampleSet, TrainError> {
    let first = dataset.episodes().first().ok_or(TrainError::EmptyDataset)?;
    let space = first.meta.action_space.clone();
    let delay = DelayOffset(config.delay);
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    for ep in dataset.episodes() {
        if ep.meta.action_space != space {
            return Err(TrainError::HeterogeneousSpaces(
                space,
                ep.meta.action_space.clone(),
            ));
        }
        if ep.len() <= delay.magnitude() {
            continue;
        }
        let prepared = config.pipeline.prepare_episode(ep, delay)?;
        frames.extend(prepared.frames);
        actions.extend(prepared.actions);
    }
    if frames.is_empty() {
        return Err(TrainError::EmptyAfterShift(delay));
    }
    let dims = frames[0].dims();
    if frames.iter().any(|f| f.dims() != dims) {
        return Err(TrainError::HeterogeneousFrames);
    }
    Ok(SampleSet {
        space,
        frames,
        actions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// One checkpoint per epoch, in order.
    pub checkpoints: Vec<ModelCheckpoint>,
    pub loss_curve: Vec<EpochLoss>,
    pub samples_per_epoch: usize,
    pub optimizer_steps: usize,
}

impl TrainOutput {
    pub fn final_checkpoint(&self) -> &ModelCheckpoint {
        self.checkpoints.last().expect("at least one epoch")
    }
}

/// `epoch,mean_loss` CSV with a header line.
pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for e in curve {
        let _ = writeln!(out, "{},{}", e.epoch, e.mean_loss);
    }
    out
}

/// Trains a fresh model on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let samples = build_samples(dataset, config)?;
    train_samples(&samples, config)
}

/// Trains a fresh model on pre-built samples.
pub fn train_samples(samples: &SampleSet, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let arch = config
        .architecture
        .build(samples.input_shape(), &samples.space);
    let mut model = Model::<f32>::init(arch, config.seed)?;
    let mut state = AdamState::new(model.params().len());
    let adam = config.adam();
    let snapshot = serde_json::to_value(config).expect("config serializes");
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut input = Vec::with_capacity(config.batch_size * model.input_size());
    let mut labels = Vec::with_capacity(config.batch_size);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for epoch in 0..config.epochs {
        let mut rng = Rng64::new(Rng64::derive(config.seed, epoch as u64 + 1));
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            input.clear();
            labels.clear();
            for &i in chunk {
                write_model_input(&samples.frames[i], &mut input);
                labels.push(samples.actions[i].clone());
            }
            let lg = model.loss_and_grad(&input, chunk.len(), &labels, config.l2_weight)?;
            crate::nn::adam_step(model.params_mut(), &lg.grad, &mut state, &adam)?;
            total += lg.loss * chunk.len() as f64;
            steps += 1;
        }
        let mean_loss = total / n as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.5}");
        loss_curve.push(EpochLoss { epoch, mean_loss });
        checkpoints.push(ModelCheckpoint::from_model(
            &model,
            snapshot.clone(),
            config.seed,
            epoch,
        ));
    }
    Ok(TrainOutput {
        checkpoints,
        loss_curve,
        samples_per_epoch: n,
        optimizer_steps: steps,
    })
}

/// Rebuilds the policy model of a checkpoint together with the pipeline it
/// was trained with (default pipeline if the snapshot has none).
pub fn checkpoint_policy(
    checkpoint: &ModelCheckpoint,
) -> Result<(PolicyModel, FramePipeline), crate::nn::CheckpointError> {
    let model = checkpoint.to_model()?;
    let pipeline = checkpoint
        .config
        .get("pipeline")
        .and_then(|p| serde_json::from_value(p.clone()).ok())
        .unwrap_or_default();
    Ok((model, pipeline))
}
