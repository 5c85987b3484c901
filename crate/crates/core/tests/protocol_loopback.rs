use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use clonebench::env::{
    play_episode, rollout, Controller, EnvConfig, RandomAgent, ScriptedActions, ScriptedExpert,
};
use clonebench::nn::{Architecture, Model};
use clonebench::policy::PolicyAgent;
use clonebench::preprocess::FramePipeline;
use clonebench::protocol::{
    encode, encode_preamble, play_session, read_preamble, record_session, serve_stream,
    AgentActor, ConstantActor, FrameMsg, Hello, Message, RecordOptions, ServeConfig, ServeReport,
    SessionStatus, SyncMode,
};
use clonebench::store::read_episode;
use clonebench::{Action, Observation, Rng64};

/// Serves `config` on a fresh loopback port in a background thread.
fn spawn_server(
    config: ServeConfig,
    driver: Option<Box<dyn Controller + Send>>,
) -> (std::net::SocketAddr, thread::JoinHandle<ServeReport>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut driver = driver;
        let d = driver.as_mut().map(|d| d.as_mut() as &mut dyn Controller);
        serve_stream(stream, &config, d).unwrap()
    });
    (addr, handle)
}

fn record_against(
    config: ServeConfig,
    driver: Option<Box<dyn Controller + Send>>,
) -> (Vec<clonebench::Episode>, ServeReport, Vec<String>) {
    let (addr, server) = spawn_server(config, driver);
    let dir = tempfile::tempdir().unwrap();
    let report = record_session(
        TcpStream::connect(addr).unwrap(),
        dir.path(),
        &RecordOptions {
            player_id: "scripted".into(),
            recorded_at: Some(0),
        },
    )
    .unwrap();
    let episodes = report
        .archives
        .iter()
        .map(|a| read_episode(&a.path).unwrap())
        .collect();
    (episodes, server.join().unwrap(), report.warnings)
}

fn transparency(config: ServeConfig, make: impl Fn() -> Box<dyn Controller + Send>) {
    let (recorded, report, warnings) = record_against(config.clone(), Some(make()));
    assert!(warnings.is_empty(), "{warnings:?}");
    assert_eq!(recorded.len(), config.episodes as usize);
    assert!(!report.client_disconnected);
    for (e, got) in recorded.iter().enumerate() {
        let env = config.env.with_seed(config.env.seed + e as u64);
        let want = rollout(&env, make().as_mut(), None, "scripted").unwrap();
        assert_eq!(got, &want, "episode {e} differs from the direct rollout");
    }
}

#[test]
fn recording_equals_direct_rollout_lockstep() {
    let config = ServeConfig {
        env: EnvConfig {
            max_ticks: 150,
            ..EnvConfig::dodger(11)
        },
        episodes: 2,
        mode: SyncMode::Lockstep,
        ..ServeConfig::default()
    };
    transparency(config, || Box::new(ScriptedExpert::new(0)));
}

#[test]
fn recording_equals_direct_rollout_async() {
    let config = ServeConfig {
        env: EnvConfig {
            max_ticks: 60,
            tick_rate: 250.0,
            ..EnvConfig::collector(3)
        },
        episodes: 1,
        mode: SyncMode::Async,
        ..ServeConfig::default()
    };
    let mut rng = Rng64::new(5);
    let actions: Vec<Action> = (0..60)
        .map(|_| Action::new((0..4).map(|_| rng.below(2) as u32).collect()))
        .collect();
    transparency(config, move || Box::new(ScriptedActions::new(actions.clone())));
}

#[test]
fn no_client_input_means_noop_every_tick() {
    let config = ServeConfig {
        env: EnvConfig {
            max_ticks: 40,
            tick_rate: 200.0,
            ..EnvConfig::collector(1)
        },
        ..ServeConfig::default()
    };
    let (recorded, _, _) = record_against(config, None);
    let ep = &recorded[0];
    assert_eq!(ep.len(), 40);
    let noop = ep.meta.action_space.noop();
    assert!(ep.actions.iter().all(|a| a == &noop));
}

fn random_policy(seed: u64) -> PolicyAgent {
    let env = EnvConfig::dodger(0);
    let model = Model::<f32>::init(
        Architecture::compact_cnn([3, 21, 21], &env.action_space()),
        seed,
    )
    .unwrap();
    let pipeline = FramePipeline {
        resize: Some((21, 21)),
        ..FramePipeline::default()
    };
    PolicyAgent::new(model, pipeline, 0)
}

fn lockstep_play(seed: u64) -> clonebench::protocol::PlayReport {
    let config = ServeConfig {
        env: EnvConfig {
            max_ticks: 200,
            ..EnvConfig::dodger(21)
        },
        episodes: 3,
        mode: SyncMode::Lockstep,
        ..ServeConfig::default()
    };
    let (addr, server) = spawn_server(config, None);
    let mut actor = AgentActor {
        agent: random_policy(4),
        seed,
    };
    let report = play_session(TcpStream::connect(addr).unwrap(), &mut actor).unwrap();
    let served = server.join().unwrap();
    assert_eq!(served.episode_scores, report.episode_scores);
    report
}

#[test]
fn lockstep_play_is_reproducible_and_matches_offline_rollouts() {
    let a = lockstep_play(9);
    let b = lockstep_play(9);
    assert_eq!(a.status, SessionStatus::Completed);
    assert_eq!(a.decisions, b.decisions);
    assert_eq!(a.episode_scores, b.episode_scores);
    assert_eq!(a.frames_dropped, 0);
    assert_eq!(a.episode_scores.len(), 3);
    for (e, &score) in a.episode_scores.iter().enumerate() {
        let env = EnvConfig {
            max_ticks: 200,
            ..EnvConfig::dodger(21 + e as u64)
        };
        let agent = random_policy(4);
        let mut offline = PolicyAgent::new(
            agent.model().clone(),
            *agent.pipeline(),
            Rng64::derive(9, e as u64),
        );
        assert_eq!(play_episode(&env, &mut offline, None).unwrap(), score);
    }
}

#[test]
fn async_client_sends_emulate_only_on_change() {
    let config = ServeConfig {
        env: EnvConfig {
            max_ticks: 30,
            tick_rate: 200.0,
            ..EnvConfig::collector(2)
        },
        episodes: 2,
        ..ServeConfig::default()
    };
    let (addr, server) = spawn_server(config, None);
    let mut actor = ConstantActor(Action::new(vec![0, 1, 0, 1]));
    let report = play_session(TcpStream::connect(addr).unwrap(), &mut actor).unwrap();
    server.join().unwrap();
    assert_eq!(report.status, SessionStatus::Completed);
    // One EMULATE per episode: the action never changes within one.
    assert_eq!(report.emulates_sent, 2);
    assert_eq!(report.episode_scores.len(), 2);
}

/// Accepts one client, handshakes and then runs `script` on the raw stream.
fn fake_server(script: impl FnOnce(&mut TcpStream) + Send + 'static) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        s.write_all(&encode_preamble()).unwrap();
        read_preamble(&mut s).unwrap();
        let hello = Message::Hello(Hello {
            tick_rate_mhz: 17_500,
            mode: SyncMode::Async,
            game_id: "dodger".into(),
            action_space: EnvConfig::dodger(0).action_space(),
        });
        s.write_all(&encode(&hello)).unwrap();
        script(&mut s);
    });
    addr
}

fn frame_msg(index: u32, ts: u64) -> Message {
    Message::Frame(FrameMsg {
        episode: 0,
        index,
        timestamp_us: ts,
        frame: Observation::filled(84, 84, [0, 0, index as u8]).unwrap(),
    })
}

#[test]
fn server_vanishing_mid_episode_reports_disconnect() {
    let addr = fake_server(|s| {
        for i in 0..5 {
            s.write_all(&encode(&frame_msg(i, 1000 * i as u64))).unwrap();
            s.write_all(&encode(&Message::Score { delta: 1.0 })).unwrap();
        }
        thread::sleep(Duration::from_millis(50));
    });
    let mut actor = AgentActor {
        agent: random_policy(1),
        seed: 0,
    };
    let report = play_session(TcpStream::connect(addr).unwrap(), &mut actor).unwrap();
    assert_eq!(report.status, SessionStatus::Disconnected);
    assert_eq!(report.partial_score, 5.0);
    assert!(report.episode_scores.is_empty());
    assert_eq!(report.frames_received, 5);
}

#[test]
fn missing_score_is_archived_with_warning() {
    let addr = fake_server(|s| {
        for i in 0..3u32 {
            let ts = 100 * (i as u64 + 1);
            s.write_all(&encode(&Message::InputState {
                timestamp_us: ts,
                action: Action::single(i % 3),
            }))
            .unwrap();
            s.write_all(&encode(&frame_msg(i, ts))).unwrap();
        }
        s.write_all(&encode(&Message::Reset { final_episode: true })).unwrap();
        s.write_all(&encode(&Message::Bye)).unwrap();
    });
    let dir = tempfile::tempdir().unwrap();
    let report = record_session(
        TcpStream::connect(addr).unwrap(),
        dir.path(),
        &RecordOptions::default(),
    )
    .unwrap();
    assert_eq!(report.archives.len(), 1);
    assert!(report.warnings.iter().any(|w| w.contains("no SCORE")));
    let ep = read_episode(&report.archives[0].path).unwrap();
    assert_eq!(ep.meta.final_score, 0.0);
    assert_eq!(ep.actions, vec![Action::single(0), Action::single(1), Action::single(2)]);
}

#[test]
fn client_hanging_up_ends_the_session() {
    let config = ServeConfig {
        env: EnvConfig {
            tick_rate: 100.0,
            ..EnvConfig::dodger(0)
        },
        episodes: 50,
        ..ServeConfig::default()
    };
    let (addr, server) = spawn_server(config, Some(Box::new(ScriptedExpert::new(0))));
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(&encode_preamble()).unwrap();
    read_preamble(&mut s).unwrap();
    thread::sleep(Duration::from_millis(100));
    drop(s);
    let report = server.join().unwrap();
    assert!(report.client_disconnected);
    assert!(report.episode_scores.len() < 50);
}

#[test]
fn async_ticks_hold_their_rate() {
    let config = ServeConfig {
        env: EnvConfig::dodger(3),
        episodes: 1,
        ..ServeConfig::default()
    };
    let config = ServeConfig {
        env: EnvConfig {
            max_ticks: 40,
            ..config.env
        },
        ..config
    };
    let (recorded, report, _) = record_against(config, Some(Box::new(RandomAgent::new(1))));
    assert!(!recorded.is_empty());
    let jitter = report.max_jitter_fraction(17.5);
    assert!(jitter < 0.2, "jitter {jitter}");
}
