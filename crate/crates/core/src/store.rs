//! On-disk demonstration archives, dataset statistics and score filtering.
//!
//! An episode archive is a directory holding three files:
//!
//! - `manifest`: line-oriented `key=value` UTF-8 text with the episode
//!   metadata, frame geometry and the CRC32 (hex) of `frames.bin`;
//! - `frames.bin`: every frame's raw RGB24 bytes, concatenated, no padding;
//! - `actions.log`: one `index<TAB>i0,i1,...` line per frame.
//!
//! A dataset on disk is a directory of episode archives, read in name order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::data::{
    validate_episode, Action, ActionSpace, DataError, Dataset, Episode, EpisodeMeta, Observation,
    Violation,
};

pub const MANIFEST_FILE: &str = "manifest";
pub const FRAMES_FILE: &str = "frames.bin";
pub const ACTIONS_FILE: &str = "actions.log";
const FORMAT_TAG: &str = "clonebench-episode/1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("episode rejected: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidEpisode(Vec<Violation>),
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("frames.bin checksum mismatch: manifest says {expected:08x}, file has {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("frames.bin holds {actual} bytes, expected {expected}")]
    TruncatedFrames { expected: u64, actual: u64 },
    #[error("malformed actions.log line {line}: {message}")]
    ActionsLog { line: usize, message: String },
    #[error("label `{0}` cannot be stored (contains a newline)")]
    Label(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("keep fraction {0} outside (0, 1]")]
    KeepFraction(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parsed `manifest` of an archive, readable without touching the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub meta: EpisodeMeta,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub frames_crc32: u32,
}

impl ArchiveHeader {
    fn frame_bytes(&self) -> usize {
        self.width as usize * self.height as usize * 3
    }
}

/// Handle to an archive written by [`write_episode`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeArchive {
    pub path: PathBuf,
    pub header: ArchiveHeader,
}

fn check_label(s: &str) -> Result<(), StoreError> {
    if s.contains(['\n', '\r']) {
        Err(StoreError::Label(s.to_string()))
    } else {
        Ok(())
    }
}

fn render_manifest(h: &ArchiveHeader) -> String {
    let m = &h.meta;
    let mut s = String::new();
    let _ = writeln!(s, "format={FORMAT_TAG}");
    let _ = writeln!(s, "game_id={}", m.game_id);
    let _ = writeln!(s, "player_id={}", m.player_id);
    let _ = writeln!(s, "fps={}", m.fps);
    let _ = writeln!(s, "native_width={}", m.native_resolution.0);
    let _ = writeln!(s, "native_height={}", m.native_resolution.1);
    let _ = writeln!(s, "action_space={}", m.action_space);
    let _ = writeln!(s, "final_score={}", m.final_score);
    let _ = writeln!(s, "recorded_at={}", m.recorded_at);
    let _ = writeln!(s, "delay_applied={}", m.delay_applied);
    let _ = writeln!(s, "frame_count={}", h.frame_count);
    let _ = writeln!(s, "width={}", h.width);
    let _ = writeln!(s, "height={}", h.height);
    let _ = writeln!(s, "frames_crc32={:08x}", h.frames_crc32);
    s
}

fn parse_manifest(path: &Path, text: &str) -> Result<ArchiveHeader, StoreError> {
    let err = |message: String| StoreError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {} has no `=`", n + 1)))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| err(format!("missing key `{k}`")))
    };
    fn num<T: std::str::FromStr>(
        v: &str,
        key: &str,
        err: &dyn Fn(String) -> StoreError,
    ) -> Result<T, StoreError> {
        v.parse()
            .map_err(|_| err(format!("bad value `{v}` for `{key}`")))
    }
    if get("format")? != FORMAT_TAG {
        return Err(err(format!("unsupported format `{}`", get("format")?)));
    }
    let action_space: ActionSpace = get("action_space")?
        .parse()
        .map_err(|e: DataError| err(e.to_string()))?;
    let meta = EpisodeMeta {
        game_id: get("game_id")?.to_string(),
        player_id: get("player_id")?.to_string(),
        fps: num(get("fps")?, "fps", &err)?,
        native_resolution: (
            num(get("native_width")?, "native_width", &err)?,
            num(get("native_height")?, "native_height", &err)?,
        ),
        action_space,
        final_score: num(get("final_score")?, "final_score", &err)?,
        recorded_at: num(get("recorded_at")?, "recorded_at", &err)?,
        delay_applied: num(get("delay_applied")?, "delay_applied", &err)?,
    };
    let crc_text = get("frames_crc32")?;
    let frames_crc32 = u32::from_str_radix(crc_text, 16)
        .map_err(|_| err(format!("bad checksum `{crc_text}`")))?;
    Ok(ArchiveHeader {
        meta,
        frame_count: num(get("frame_count")?, "frame_count", &err)?,
        width: num(get("width")?, "width", &err)?,
        height: num(get("height")?, "height", &err)?,
        frames_crc32,
    })
}

/// Writes `episode` as an archive directory at `path` (created if missing).
pub fn write_episode(episode: &Episode, path: &Path) -> Result<EpisodeArchive, StoreError> {
    let violations = validate_episode(episode);
    if !violations.is_empty() {
        return Err(StoreError::InvalidEpisode(violations));
    }
    check_label(&episode.meta.game_id)?;
    check_label(&episode.meta.player_id)?;
    fs::create_dir_all(path).map_err(io_err(path))?;

    let frames_path = path.join(FRAMES_FILE);
    let mut hasher = crc32fast::Hasher::new();
    {
        let file = fs::File::create(&frames_path).map_err(io_err(&frames_path))?;
        let mut w = BufWriter::new(file);
        for f in &episode.frames {
            hasher.update(f.pixels());
            w.write_all(f.pixels()).map_err(io_err(&frames_path))?;
        }
        w.flush().map_err(io_err(&frames_path))?;
    }

    let actions_path = path.join(ACTIONS_FILE);
    {
        let file = fs::File::create(&actions_path).map_err(io_err(&actions_path))?;
        let mut w = BufWriter::new(file);
        for (i, a) in episode.actions.iter().enumerate() {
            let idx = a
                .indices
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{i}\t{idx}").map_err(io_err(&actions_path))?;
        }
        w.flush().map_err(io_err(&actions_path))?;
    }

    let (width, height) = episode.frame_dims().expect("validated non-empty");
    let header = ArchiveHeader {
        meta: episode.meta.clone(),
        frame_count: episode.len(),
        width,
        height,
        frames_crc32: hasher.finalize(),
    };
    let manifest_path = path.join(MANIFEST_FILE);
    fs::write(&manifest_path, render_manifest(&header)).map_err(io_err(&manifest_path))?;
    Ok(EpisodeArchive {
        path: path.to_path_buf(),
        header,
    })
}

/// Reads only the manifest of an archive.
pub fn read_header(path: &Path) -> Result<ArchiveHeader, StoreError> {
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    parse_manifest(&manifest_path, &text)
}

fn parse_actions(path: &Path, expected: usize) -> Result<Vec<Action>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut actions = Vec::with_capacity(expected);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let bad = |message: &str| StoreError::ActionsLog {
            line: n + 1,
            message: message.to_string(),
        };
        let (idx, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let idx: usize = idx.parse().map_err(|_| bad("bad frame index"))?;
        if idx != actions.len() {
            return Err(bad("frame indices must ascend from 0 without gaps"));
        }
        let indices = rest
            .split(',')
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad action index"))?;
        actions.push(Action::new(indices));
    }
    if actions.len() != expected {
        return Err(StoreError::ActionsLog {
            line: actions.len() + 1,
            message: format!("{} records, manifest says {expected}", actions.len()),
        });
    }
    Ok(actions)
}

/// Reads an archive back, verifying its size, checksum and action log.
pub fn read_episode(path: &Path) -> Result<Episode, StoreError> {
    let header = read_header(path)?;
    let frame_bytes = header.frame_bytes();
    let expected = (header.frame_count * frame_bytes) as u64;

    let frames_path = path.join(FRAMES_FILE);
    let mut raw = Vec::with_capacity(expected as usize);
    fs::File::open(&frames_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(&frames_path))?;
    if raw.len() as u64 != expected {
        return Err(StoreError::TruncatedFrames {
            expected,
            actual: raw.len() as u64,
        });
    }
    let actual = crc32fast::hash(&raw);
    if actual != header.frames_crc32 {
        return Err(StoreError::Checksum {
            expected: header.frames_crc32,
            actual,
        });
    }
    let frames = if frame_bytes == 0 {
        Vec::new()
    } else {
        raw.chunks_exact(frame_bytes)
            .map(|c| Observation::new(header.width, header.height, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?
    };
    let actions = parse_actions(&path.join(ACTIONS_FILE), header.frame_count)?;
    let episode = Episode {
        meta: header.meta,
        frames,
        actions,
    };
    let violations = validate_episode(&episode);
    if !violations.is_empty() {
        return Err(StoreError::InvalidEpisode(violations));
    }
    Ok(episode)
}

/// Writes each episode to `dir/ep_NNNNN`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<EpisodeArchive>, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    dataset
        .episodes()
        .iter()
        .enumerate()
        .map(|(i, e)| write_episode(e, &dir.join(format!("ep_{i:05}"))))
        .collect()
}

/// Where episodes come from. Format adapters for third-party demonstration
/// archives implement this trait; `meta` must be cheap so that filtering can
/// run without loading frames.
pub trait EpisodeSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn meta(&self, index: usize) -> Result<EpisodeMeta, StoreError>;

    fn load(&self, index: usize) -> Result<Episode, StoreError>;
}

/// A directory of episode archives.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    archives: Vec<PathBuf>,
}

impl DatasetDir {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let mut archives = Vec::new();
        if dir.join(MANIFEST_FILE).is_file() {
            archives.push(dir.to_path_buf());
        } else {
            for entry in fs::read_dir(dir).map_err(io_err(dir))? {
                let p = entry.map_err(io_err(dir))?.path();
                if p.join(MANIFEST_FILE).is_file() {
                    archives.push(p);
                }
            }
            archives.sort();
        }
        Ok(Self { archives })
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.archives
    }
}

impl EpisodeSource for DatasetDir {
    fn len(&self) -> usize {
        self.archives.len()
    }

    fn meta(&self, index: usize) -> Result<EpisodeMeta, StoreError> {
        Ok(read_header(&self.archives[index])?.meta)
    }

    fn load(&self, index: usize) -> Result<Episode, StoreError> {
        read_episode(&self.archives[index])
    }
}

impl EpisodeSource for [Episode] {
    fn len(&self) -> usize {
        <[Episode]>::len(self)
    }

    fn meta(&self, index: usize) -> Result<EpisodeMeta, StoreError> {
        Ok(self[index].meta.clone())
    }

    fn load(&self, index: usize) -> Result<Episode, StoreError> {
        Ok(self[index].clone())
    }
}

/// Loads every episode of a source.
pub fn load_all<S: EpisodeSource + ?Sized>(source: &S) -> Result<Dataset, StoreError> {
    let episodes = (0..source.len())
        .map(|i| source.load(i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(episodes))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, StoreError> {
    load_all(&DatasetDir::open(dir)?)
}

/// Indices of the episodes that survive top-fraction filtering, in input
/// order.
///
/// With n scores and k = ⌈keep_fraction·n⌉, the threshold is the score of
/// ascending nearest rank n − k; episodes scoring strictly above it survive.
/// If ties at the top leave nothing strictly above, scores equal to the
/// threshold are admitted as well.
pub fn top_fraction_indices(scores: &[f64], keep_fraction: f64) -> Result<Vec<usize>, StoreError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(StoreError::KeepFraction(keep_fraction));
    }
    if scores.is_empty() {
        return Err(StoreError::EmptyDataset);
    }
    let n = scores.len();
    let keep = ((keep_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let rank = n - keep.min(n);
    if rank == 0 {
        return Ok((0..n).collect());
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[rank - 1];
    let strict: Vec<usize> = (0..n).filter(|&i| scores[i] > threshold).collect();
    if !strict.is_empty() {
        return Ok(strict);
    }
    Ok((0..n).filter(|&i| scores[i] >= threshold).collect())
}

/// Keeps the episodes whose final score is in the top `keep_fraction`.
pub fn filter_top_percentile(dataset: &Dataset, keep_fraction: f64) -> Result<Dataset, StoreError> {
    let scores: Vec<f64> = dataset
        .episodes()
        .iter()
        .map(|e| e.meta.final_score)
        .collect();
    let keep = top_fraction_indices(&scores, keep_fraction)?;
    Ok(Dataset::new(
        keep.into_iter()
            .map(|i| dataset.episodes()[i].clone())
            .collect(),
    ))
}

/// Filters a source by score using only its metadata, then loads the
/// survivors. Excluded episodes are never loaded.
pub fn load_filtered<S: EpisodeSource + ?Sized>(
    source: &S,
    keep_fraction: f64,
) -> Result<Dataset, StoreError> {
    let scores = (0..source.len())
        .map(|i| source.meta(i).map(|m| m.final_score))
        .collect::<Result<Vec<_>, _>>()?;
    let keep = top_fraction_indices(&scores, keep_fraction)?;
    let episodes = keep
        .into_iter()
        .map(|i| source.load(i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(episodes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlayerStats {
    pub episodes: usize,
    pub samples: usize,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub episode_count: usize,
    pub total_samples: usize,
    pub min_score: f64,
    pub mean_score: f64,
    pub max_score: f64,
    pub median_score: f64,
    pub p95_score: f64,
    pub per_player: BTreeMap<String, PlayerStats>,
}

/// Nearest-rank percentile of an ascending-sorted slice.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let eps = dataset.episodes();
    let mut scores: Vec<f64> = eps.iter().map(|e| e.meta.final_score).collect();
    scores.sort_by(f64::total_cmp);
    let mut per_player: BTreeMap<String, PlayerStats> = BTreeMap::new();
    for e in eps {
        let p = per_player
            .entry(e.meta.player_id.clone())
            .or_insert(PlayerStats {
                episodes: 0,
                samples: 0,
                mean_score: 0.0,
            });
        p.episodes += 1;
        p.samples += e.len();
        p.mean_score += e.meta.final_score;
    }
    for p in per_player.values_mut() {
        p.mean_score /= p.episodes as f64;
    }
    let m = dataset.manifest();
    DatasetStats {
        episode_count: m.episode_count,
        total_samples: m.total_samples,
        min_score: m.min_score,
        mean_score: m.mean_score,
        max_score: m.max_score,
        median_score: nearest_rank(&scores, 50.0),
        p95_score: nearest_rank(&scores, 95.0),
        per_player,
    }
}
