//! Domain types shared across the pipeline.
//!
//! Everything here is immutable once built: transforms return new values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("frame dimensions must be at least 1x1, got {width}x{height}")]
    EmptyFrame { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected} for {width}x{height} RGB24")]
    PixelLength {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("action space needs at least one variable")]
    NoVariables,
    #[error("variable `{name}` has cardinality {cardinality}, need at least 2")]
    Cardinality { name: String, cardinality: u32 },
    #[error("malformed action space descriptor `{0}`")]
    Descriptor(String),
    #[error("action has {actual} indices, space has {expected} variables")]
    ActionArity { expected: usize, actual: usize },
    #[error("index {index} out of range for variable {variable} (cardinality {cardinality})")]
    ActionRange {
        variable: usize,
        index: u32,
        cardinality: u32,
    },
    #[error("invalid episode: {}", join_violations(.0))]
    InvalidEpisode(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// One RGB24 frame, row-major, top-left origin.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Observation {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::EmptyFrame { width, height });
        }
        let expected = width as usize * height as usize * Self::CHANNELS;
        if pixels.len() != expected {
            return Err(DataError::PixelLength {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Frame of a single colour.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, DataError> {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observation")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("bytes", &self.pixels.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteVariable {
    pub name: String,
    pub cardinality: u32,
}

/// Ordered list of discrete variables. Equality is structural.
///
/// A multi-class space is a single variable (Atari: 18 options); a keyboard
/// space is one 2-way variable per button.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActionSpace {
    variables: Vec<DiscreteVariable>,
}

impl ActionSpace {
    pub fn new(variables: Vec<DiscreteVariable>) -> Result<Self, DataError> {
        if variables.is_empty() {
            return Err(DataError::NoVariables);
        }
        for v in &variables {
            if v.cardinality < 2 {
                return Err(DataError::Cardinality {
                    name: v.name.clone(),
                    cardinality: v.cardinality,
                });
            }
            if v.name.is_empty() || v.name.contains([',', ':', '\n', '=']) {
                return Err(DataError::Descriptor(v.name.clone()));
            }
        }
        Ok(Self { variables })
    }

    /// One variable with `options` choices.
    pub fn multi_class(name: &str, options: u32) -> Result<Self, DataError> {
        Self::new(vec![DiscreteVariable {
            name: name.to_string(),
            cardinality: options,
        }])
    }

    /// One binary variable per button.
    pub fn buttons(names: &[&str]) -> Result<Self, DataError> {
        Self::new(
            names
                .iter()
                .map(|n| DiscreteVariable {
                    name: n.to_string(),
                    cardinality: 2,
                })
                .collect(),
        )
    }

    pub fn variables(&self) -> &[DiscreteVariable] {
        &self.variables
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<u32> {
        self.variables.iter().map(|v| v.cardinality).collect()
    }

    /// Σ d_i, the width of the policy's output layer.
    pub fn total_outputs(&self) -> usize {
        self.variables.iter().map(|v| v.cardinality as usize).sum()
    }

    pub fn validate(&self, action: &Action) -> Result<(), DataError> {
        if action.indices.len() != self.variables.len() {
            return Err(DataError::ActionArity {
                expected: self.variables.len(),
                actual: action.indices.len(),
            });
        }
        for (i, (&idx, var)) in action.indices.iter().zip(&self.variables).enumerate() {
            if idx >= var.cardinality {
                return Err(DataError::ActionRange {
                    variable: i,
                    index: idx,
                    cardinality: var.cardinality,
                });
            }
        }
        Ok(())
    }

    /// All-zero action: "stay" / every button released in the shipped games.
    pub fn noop(&self) -> Action {
        Action::new(vec![0; self.variables.len()])
    }
}

impl fmt::Display for ActionSpace {
    /// `name:card,name:card,...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.variables.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", v.name, v.cardinality)?;
        }
        Ok(())
    }
}

impl FromStr for ActionSpace {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::Descriptor(s.to_string());
        let variables = s
            .split(',')
            .map(|part| {
                let (name, card) = part.rsplit_once(':').ok_or_else(bad)?;
                let cardinality = card.trim().parse().map_err(|_| bad())?;
                Ok(DiscreteVariable {
                    name: name.trim().to_string(),
                    cardinality,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Self::new(variables)
    }
}

impl TryFrom<String> for ActionSpace {
    type Error = DataError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ActionSpace> for String {
    fn from(a: ActionSpace) -> Self {
        a.to_string()
    }
}

/// One index per variable of the owning [`ActionSpace`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub indices: Vec<u32>,
}

impl Action {
    pub fn new(indices: Vec<u32>) -> Self {
        Self { indices }
    }

    pub fn single(index: u32) -> Self {
        Self {
            indices: vec![index],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub game_id: String,
    pub player_id: String,
    /// Frames per second; fractional rates such as 17.5 are allowed.
    pub fps: f64,
    pub native_resolution: (u32, u32),
    pub action_space: ActionSpace,
    pub final_score: f64,
    /// Unix seconds.
    pub recorded_at: u64,
    /// Net action delay applied to this episode by `shift_actions`.
    pub delay_applied: i64,
}

/// Aligned frames and actions: frame i is paired with the input state
/// sampled at frame i.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub frames: Vec<Observation>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    Empty,
    LengthMismatch { frames: usize, actions: usize },
    FrameSize { expected: (u32, u32), actual: (u32, u32) },
    ActionArity { expected: usize, actual: usize },
    ActionRange { variable: usize, index: u32, cardinality: u32 },
    InvalidFps(f64),
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Frame the violation was found at, when it is local to one frame.
    pub frame: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(i) = self.frame {
            write!(f, "frame {i}: ")?;
        }
        match &self.kind {
            ViolationKind::Empty => write!(f, "episode has no frames"),
            ViolationKind::LengthMismatch { frames, actions } => {
                write!(f, "{frames} frames but {actions} actions")
            }
            ViolationKind::FrameSize { expected, actual } => write!(
                f,
                "frame is {}x{}, episode frames are {}x{}",
                actual.0, actual.1, expected.0, expected.1
            ),
            ViolationKind::ActionArity { expected, actual } => {
                write!(f, "action has {actual} indices, expected {expected}")
            }
            ViolationKind::ActionRange {
                variable,
                index,
                cardinality,
            } => write!(
                f,
                "index {index} out of range for variable {variable} (cardinality {cardinality})"
            ),
            ViolationKind::InvalidFps(x) => write!(f, "fps must be positive, got {x}"),
            ViolationKind::NonFiniteScore(x) => write!(f, "final score {x} is not finite"),
        }
    }
}

/// Checks every episode invariant; an empty list means the episode is valid.
pub fn validate_episode(episode: &Episode) -> Vec<Violation> {
    let mut out = Vec::new();
    let meta = &episode.meta;
    if !(meta.fps > 0.0 && meta.fps.is_finite()) {
        out.push(Violation {
            frame: None,
            kind: ViolationKind::InvalidFps(meta.fps),
        });
    }
    if !meta.final_score.is_finite() {
        out.push(Violation {
            frame: None,
            kind: ViolationKind::NonFiniteScore(meta.final_score),
        });
    }
    let (nf, na) = (episode.frames.len(), episode.actions.len());
    if nf == 0 && na == 0 {
        out.push(Violation {
            frame: None,
            kind: ViolationKind::Empty,
        });
    } else if nf != na {
        out.push(Violation {
            frame: Some(nf.min(na)),
            kind: ViolationKind::LengthMismatch {
                frames: nf,
                actions: na,
            },
        });
    }
    if let Some(first) = episode.frames.first() {
        for (i, f) in episode.frames.iter().enumerate() {
            if f.dims() != first.dims() {
                out.push(Violation {
                    frame: Some(i),
                    kind: ViolationKind::FrameSize {
                        expected: first.dims(),
                        actual: f.dims(),
                    },
                });
            }
        }
    }
    for (i, a) in episode.actions.iter().enumerate() {
        match meta.action_space.validate(a) {
            Ok(()) => {}
            Err(DataError::ActionArity { expected, actual }) => out.push(Violation {
                frame: Some(i),
                kind: ViolationKind::ActionArity { expected, actual },
            }),
            Err(DataError::ActionRange {
                variable,
                index,
                cardinality,
            }) => out.push(Violation {
                frame: Some(i),
                kind: ViolationKind::ActionRange {
                    variable,
                    index,
                    cardinality,
                },
            }),
            Err(_) => unreachable!("validate only reports arity and range"),
        }
    }
    out
}

impl Episode {
    /// Builds an episode, rejecting it if any invariant is violated.
    pub fn new(
        meta: EpisodeMeta,
        frames: Vec<Observation>,
        actions: Vec<Action>,
    ) -> Result<Self, DataError> {
        let ep = Self {
            meta,
            frames,
            actions,
        };
        let violations = validate_episode(&ep);
        if violations.is_empty() {
            Ok(ep)
        } else {
            Err(DataError::InvalidEpisode(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_dims(&self) -> Option<(u32, u32)> {
        self.frames.first().map(Observation::dims)
    }
}

/// Summary carried alongside a dataset's episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub episode_count: usize,
    pub total_samples: usize,
    pub min_score: f64,
    pub mean_score: f64,
    pub max_score: f64,
}

impl Manifest {
    pub fn compute(episodes: &[Episode]) -> Self {
        let scores: Vec<f64> = episodes.iter().map(|e| e.meta.final_score).collect();
        let (min, max) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            });
        let mean = if scores.is_empty() {
            f64::NAN
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        Self {
            episode_count: episodes.len(),
            total_samples: episodes.iter().map(Episode::len).sum(),
            min_score: if scores.is_empty() { f64::NAN } else { min },
            mean_score: mean,
            max_score: if scores.is_empty() { f64::NAN } else { max },
        }
    }

    fn same_as(&self, other: &Self) -> bool {
        let eq = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        self.episode_count == other.episode_count
            && self.total_samples == other.total_samples
            && eq(self.min_score, other.min_score)
            && eq(self.mean_score, other.mean_score)
            && eq(self.max_score, other.max_score)
    }
}

/// A collection of episodes (the demonstration set D).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    episodes: Vec<Episode>,
    manifest: Manifest,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Self {
        let manifest = Manifest::compute(&episodes);
        Self { episodes, manifest }
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn into_episodes(self) -> Vec<Episode> {
        self.episodes
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.manifest.total_samples
    }

    /// Recomputes the manifest and compares it with the stored one.
    pub fn manifest_consistent(&self) -> bool {
        Manifest::compute(&self.episodes).same_as(&self.manifest)
    }
}

/// Signed frame offset d: frame i is re-paired with action i + d.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct DelayOffset(pub i64);

impl DelayOffset {
    pub fn frames(self) -> i64 {
        self.0
    }

    pub fn magnitude(self) -> usize {
        self.0.unsigned_abs() as usize
    }
}

impl fmt::Display for DelayOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.0)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn meta(space: ActionSpace) -> EpisodeMeta {
        EpisodeMeta {
            game_id: "test".into(),
            player_id: "p0".into(),
            fps: 60.0,
            native_resolution: (2, 2),
            action_space: space,
            final_score: 0.0,
            recorded_at: 0,
            delay_applied: 0,
        }
    }

    /// Episode whose frame i has every byte equal to i (mod 256) and whose
    /// action i has index i mod cardinality.
    pub fn labeled_episode(n: usize, card: u32) -> Episode {
        let space = ActionSpace::multi_class("a", card).unwrap();
        let frames = (0..n)
            .map(|i| Observation::new(2, 2, vec![i as u8; 12]).unwrap())
            .collect();
        let actions = (0..n).map(|i| Action::single(i as u32 % card)).collect();
        Episode::new(meta(space), frames, actions).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn observation_rejects_wrong_length() {
        assert!(matches!(
            Observation::new(2, 2, vec![0; 11]),
            Err(DataError::PixelLength { expected: 12, .. })
        ));
        assert!(Observation::new(0, 2, vec![]).is_err());
        assert!(Observation::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn well_formed_episode_has_no_violations() {
        let ep = labeled_episode(10, 18);
        assert!(validate_episode(&ep).is_empty());
    }

    #[test]
    fn length_mismatch_is_reported() {
        let mut ep = labeled_episode(10, 18);
        ep.actions.pop();
        let v = validate_episode(&ep);
        assert_eq!(v.len(), 1);
        assert_eq!(
            v[0].kind,
            ViolationKind::LengthMismatch {
                frames: 10,
                actions: 9
            }
        );
    }

    #[test]
    fn index_equal_to_cardinality_is_out_of_range() {
        let mut ep = labeled_episode(10, 18);
        ep.actions[4] = Action::single(18);
        let v = validate_episode(&ep);
        assert_eq!(
            v,
            vec![Violation {
                frame: Some(4),
                kind: ViolationKind::ActionRange {
                    variable: 0,
                    index: 18,
                    cardinality: 18
                }
            }]
        );
    }

    #[test]
    fn action_space_descriptor_round_trips() {
        let s = ActionSpace::buttons(&["up", "down", "left", "right"]).unwrap();
        assert_eq!(s.to_string(), "up:2,down:2,left:2,right:2");
        assert_eq!(s.to_string().parse::<ActionSpace>().unwrap(), s);
        assert_eq!(s.total_outputs(), 8);
        assert!(ActionSpace::multi_class("x", 1).is_err());
        assert!(ActionSpace::new(vec![]).is_err());
    }

    #[test]
    fn space_equality_is_structural() {
        let a = ActionSpace::buttons(&["a", "b"]).unwrap();
        let b = ActionSpace::buttons(&["b", "a"]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, ActionSpace::buttons(&["a", "b"]).unwrap());
    }

    #[test]
    fn manifest_matches_recomputed_totals() {
        let d = Dataset::new(vec![labeled_episode(10, 3), labeled_episode(20, 3)]);
        assert_eq!(d.total_samples(), 30);
        assert!(d.manifest_consistent());
    }
}
