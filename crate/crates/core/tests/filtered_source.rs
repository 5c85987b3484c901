use std::cell::RefCell;

use clonebench::store::{load_filtered, write_dataset, DatasetDir, EpisodeSource, StoreError};
use clonebench::{Action, ActionSpace, Dataset, Episode, EpisodeMeta, Observation};

fn episode(score: f64) -> Episode {
    let meta = EpisodeMeta {
        game_id: "g".into(),
        player_id: "p".into(),
        fps: 60.0,
        native_resolution: (2, 2),
        action_space: ActionSpace::multi_class("a", 3).unwrap(),
        final_score: score,
        recorded_at: 0,
        delay_applied: 0,
    };
    let frames = vec![Observation::filled(2, 2, [score as u8, 0, 0]).unwrap(); 3];
    Episode::new(meta, frames, vec![Action::single(1); 3]).unwrap()
}

/// Counts which episodes had their frames loaded.
struct Instrumented {
    episodes: Vec<Episode>,
    loaded: RefCell<Vec<usize>>,
}

impl EpisodeSource for Instrumented {
    fn len(&self) -> usize {
        self.episodes.len()
    }

    fn meta(&self, index: usize) -> Result<EpisodeMeta, StoreError> {
        Ok(self.episodes[index].meta.clone())
    }

    fn load(&self, index: usize) -> Result<Episode, StoreError> {
        self.loaded.borrow_mut().push(index);
        Ok(self.episodes[index].clone())
    }
}

#[test]
fn excluded_episodes_are_never_loaded() {
    let scores = [5.0, 50.0, 10.0, 40.0, 30.0, 20.0, 1.0, 45.0, 15.0, 25.0];
    let source = Instrumented {
        episodes: scores.iter().map(|&s| episode(s)).collect(),
        loaded: RefCell::new(Vec::new()),
    };
    let kept = load_filtered(&source, 0.2).unwrap();
    assert_eq!(*source.loaded.borrow(), vec![1, 7]);
    let kept_scores: Vec<f64> = kept.episodes().iter().map(|e| e.meta.final_score).collect();
    assert_eq!(kept_scores, vec![50.0, 45.0]);
}

#[test]
fn directory_source_filters_from_headers() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::new((0..5).map(|i| episode(i as f64 * 10.0)).collect());
    write_dataset(&ds, dir.path()).unwrap();
    let source = DatasetDir::open(dir.path()).unwrap();
    assert_eq!(source.len(), 5);
    let kept = load_filtered(&source, 0.4).unwrap();
    let kept_scores: Vec<f64> = kept.episodes().iter().map(|e| e.meta.final_score).collect();
    assert_eq!(kept_scores, vec![30.0, 40.0]);
}

#[test]
fn tiny_fraction_of_tied_scores_keeps_the_tied_top() {
    let source: Vec<Episode> = [7.0, 7.0, 7.0, 3.0].iter().map(|&s| episode(s)).collect();
    let kept = load_filtered(source.as_slice(), 0.01).unwrap();
    assert_eq!(kept.len(), 3);
}
