//! Pipeline property checks shared by the integration tests and the
//! acceptance runner. Each check runs `cases` random cases and returns the
//! first counterexample as an error string.

#![allow(dead_code)]

use std::fs;

use clonebench::preprocess::{flicker_merge, shift_actions};
use clonebench::store::{read_episode, top_fraction_indices, write_episode};
use clonebench::{Action, ActionSpace, DelayOffset, Episode, EpisodeMeta, Observation};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn frame_strategy(w: u32, h: u32) -> impl Strategy<Value = Observation> {
    proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
        .prop_map(move |px| Observation::new(w, h, px).expect("sized"))
}

fn three_frames() -> impl Strategy<Value = (Observation, Observation, Observation)> {
    (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
        (frame_strategy(w, h), frame_strategy(w, h), frame_strategy(w, h))
    })
}

fn meta(space: ActionSpace, score: f64) -> EpisodeMeta {
    EpisodeMeta {
        game_id: "prop".into(),
        player_id: "p".into(),
        fps: 17.5,
        native_resolution: (3, 2),
        action_space: space,
        final_score: score,
        recorded_at: 1_700_000_000,
        delay_applied: 0,
    }
}

/// Random episode with small frames and a random multi-variable space.
pub fn episode_strategy(max_len: usize) -> impl Strategy<Value = Episode> {
    (
        proptest::collection::vec(2u32..6, 1..4),
        1..=max_len,
        any::<u64>(),
        -1e6f64..1e6,
    )
        .prop_map(|(cards, n, seed, score)| {
            let mut rng = clonebench::Rng64::new(seed);
            let space = ActionSpace::new(
                cards
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| clonebench::DiscreteVariable {
                        name: format!("v{i}"),
                        cardinality: c,
                    })
                    .collect(),
            )
            .expect("valid space");
            let frames = (0..n)
                .map(|_| {
                    let px = (0..18).map(|_| rng.next_u64() as u8).collect();
                    Observation::new(3, 2, px).expect("sized")
                })
                .collect();
            let actions = (0..n)
                .map(|_| Action::new(cards.iter().map(|&c| rng.below(c as u64) as u32).collect()))
                .collect();
            Episode::new(meta(space, score), frames, actions).expect("valid episode")
        })
}

pub fn flicker_idempotent(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&three_frames(), |(a, _, _)| {
            prop_assert_eq!(flicker_merge(&a, &a).unwrap(), a);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn flicker_commutative(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&three_frames(), |(a, b, _)| {
            prop_assert_eq!(flicker_merge(&a, &b).unwrap(), flicker_merge(&b, &a).unwrap());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn flicker_associative(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&three_frames(), |(a, b, c)| {
            let left = flicker_merge(&flicker_merge(&a, &b).unwrap(), &c).unwrap();
            let right = flicker_merge(&a, &flicker_merge(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn shift_length(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(episode_strategy(40), -45i64..45), |(ep, d)| {
            let n = ep.len();
            match shift_actions(&ep, DelayOffset(d)) {
                Ok(s) => {
                    prop_assert!((d.unsigned_abs() as usize) < n);
                    prop_assert_eq!(s.len(), n - d.unsigned_abs() as usize);
                    prop_assert_eq!(s.frames.len(), s.actions.len());
                    prop_assert_eq!(s.meta.delay_applied, d);
                }
                Err(_) => prop_assert!(d.unsigned_abs() as usize >= n),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn shift_identity(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&episode_strategy(40), |ep| {
            prop_assert_eq!(shift_actions(&ep, DelayOffset(0)).unwrap(), ep);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Shifts of the same sign compose additively; frame i always ends up with
/// the action originally at i + d.
pub fn shift_composition(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(episode_strategy(40), 0i64..12, 0i64..12, any::<bool>()), |(ep, a, b, neg)| {
            let (a, b) = if neg { (-a, -b) } else { (a, b) };
            prop_assume!(((a + b).unsigned_abs() as usize) < ep.len());
            let twice = shift_actions(&shift_actions(&ep, DelayOffset(a)).unwrap(), DelayOffset(b)).unwrap();
            let once = shift_actions(&ep, DelayOffset(a + b)).unwrap();
            prop_assert_eq!(&twice, &once);
            let d = a + b;
            let start = if d < 0 { d.unsigned_abs() as usize } else { 0 };
            for (i, (f, act)) in once.frames.iter().zip(&once.actions).enumerate() {
                let src = start + i;
                prop_assert_eq!(f, &ep.frames[src]);
                prop_assert_eq!(act, &ep.actions[(src as i64 + d) as usize]);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A smaller keep fraction never keeps an episode that a larger one drops,
/// and every kept score is at least every dropped score.
pub fn filter_monotone(cases: u32) -> Result<(), String> {
    let scores = proptest::collection::vec(prop_oneof![0i32..5, -1000i32..1000], 1..60);
    runner(cases)
        .run(&(scores, 0.001f64..=1.0, 0.001f64..=1.0), |(raw, f1, f2)| {
            let scores: Vec<f64> = raw.iter().map(|&s| s as f64).collect();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let small = top_fraction_indices(&scores, lo).unwrap();
            let large = top_fraction_indices(&scores, hi).unwrap();
            prop_assert!(!small.is_empty());
            prop_assert!(small.iter().all(|i| large.contains(i)), "{:?} not within {:?}", small, large);
            let kept_min = small.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in (0..scores.len()).filter(|i| !small.contains(i)) {
                prop_assert!(scores[i] <= kept_min);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// write → read gives the same episode, and rewriting it gives byte-identical
/// files.
pub fn archive_round_trip(cases: u32) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let counter = std::cell::Cell::new(0usize);
    runner(cases)
        .run(&episode_strategy(30), |ep| {
            let n = counter.get() + 1;
            counter.set(n);
            let a = dir.path().join(format!("a{n}"));
            let b = dir.path().join(format!("b{n}"));
            write_episode(&ep, &a).unwrap();
            let back = read_episode(&a).unwrap();
            prop_assert_eq!(&back, &ep);
            write_episode(&back, &b).unwrap();
            let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
            names.sort();
            for name in names {
                prop_assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every property with its name.
pub fn all() -> Vec<(&'static str, fn(u32) -> Result<(), String>)> {
    vec![
        ("flicker merge idempotent", flicker_idempotent),
        ("flicker merge commutative", flicker_commutative),
        ("flicker merge associative", flicker_associative),
        ("shift length", shift_length),
        ("shift identity", shift_identity),
        ("shift composition", shift_composition),
        ("filter monotone", filter_monotone),
        ("archive round trip", archive_round_trip),
    ]
}
