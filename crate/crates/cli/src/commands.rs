use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use clonebench::env::{
    demonstrations, Controller, DemoConfig, EnvConfig, Game, NoisyController, RandomAgent,
    ScriptedExpert,
};
use clonebench::eval::{
    bootstrap_ci, compute_baseline, evaluate_checkpoint, experiment_delay_sweep,
    experiment_quality_filter, results_csv, summary_report, Baselines, ConditionResult,
    ExperimentConfig, ProtocolConfig,
};
use clonebench::nn::{gradcheck_suite, ModelCheckpoint};
use clonebench::policy::PolicyAgent;
use clonebench::preprocess::shift_actions;
use clonebench::protocol::{
    play_session, record_session, serve_env, AgentActor, RecordOptions, ServeConfig, SyncMode,
};
use clonebench::store::{
    dataset_stats, load_filtered, read_dataset, read_episode, write_dataset, write_episode,
    DatasetDir,
};
use clonebench::train::{loss_curve_csv, train, ArchitectureKind, TrainConfig};
use clonebench::{DelayOffset, Rng64};

use crate::config::{echo_config, ConfigFile};
use crate::{
    ArchArg, BaselineArgs, Command, DelaySweepArgs, DriverArg, EnvArgs, EvaluateArgs,
    ExperimentCommand, ExperimentFlags, FilterArgs, GenerateArgs, GradcheckArgs, PlayArgs,
    QualityFilterArgs, RecordArgs, ServeArgs, ShiftArgs, StatsArgs, TrainArgs, TrainFlags,
    EXIT_RUNTIME,
};

pub fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::ServeEnv(a) => serve(a),
        Command::Record(a) => record(a),
        Command::Stats(a) => stats(a),
        Command::Filter(a) => filter(a),
        Command::Shift(a) => shift(a),
        Command::Train(a) => train_cmd(a),
        Command::Play(a) => play(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(ExperimentCommand::DelaySweep(a)) => delay_sweep(a),
        Command::Experiment(ExperimentCommand::QualityFilter(a)) => quality_filter(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Baseline(a) => baseline(a),
        Command::Generate(a) => generate(a),
    }
}

/// Machine-readable result on stdout, one JSON document per command.
fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn ok() -> Result<ExitCode> {
    Ok(ExitCode::SUCCESS)
}

/// Defaults of the chosen game, then the `[env]` section, then flags.
fn resolve_env(file: &ConfigFile, flags: &EnvArgs, seed: Option<u64>) -> Result<EnvConfig> {
    let file_game = file
        .section("env")
        .and_then(|t| t.get("game"))
        .and_then(|g| g.as_str())
        .map(str::to_string);
    let game = match (flags.game, file_game) {
        (Some(g), _) => g.id().to_string(),
        (None, Some(g)) => g,
        (None, None) => "dodger".to_string(),
    };
    let mut env = file.apply("env", &EnvConfig::for_game(&game, 0)?)?;
    env.game = game.parse()?;
    if let Some(s) = seed {
        env.seed = s;
    }
    if let Some(m) = flags.max_ticks {
        env.max_ticks = m;
    }
    if let Some(r) = flags.tick_rate {
        env.tick_rate = r;
    }
    env.validate()?;
    Ok(env)
}

fn parse_resize(s: &str) -> Result<Option<(u32, u32)>> {
    if s.eq_ignore_ascii_case("native") {
        return Ok(None);
    }
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("--resize expects WxH or `native`, got `{s}`"))?;
    Ok(Some((w.trim().parse()?, h.trim().parse()?)))
}

fn resolve_train(file: &ConfigFile, flags: &TrainFlags, delay: Option<i64>) -> Result<TrainConfig> {
    let mut cfg = file.apply("train", &TrainConfig::default())?;
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.l2 {
        cfg.l2_weight = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(d) = delay {
        cfg.delay = d;
    }
    if let Some(a) = flags.arch {
        cfg.architecture = match a {
            ArchArg::Nature => ArchitectureKind::Nature,
            ArchArg::Compact => ArchitectureKind::Compact,
        };
    }
    if let Some(r) = &flags.resize {
        cfg.pipeline.resize = parse_resize(r)?;
    }
    if flags.flicker_merge {
        cfg.pipeline.flicker_merge = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_baselines(path: Option<&Path>) -> Result<Baselines> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Baselines::from_json(&text)?)
        }
        None => Ok(Baselines::frozen()),
    }
}

#[derive(Serialize)]
struct ServeEcho<'a> {
    serve: &'a ServeConfig,
    driver: &'static str,
    expert_delay: usize,
    noise: f64,
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let env = resolve_env(&file, &a.env, a.seed)?;
    let mut cfg = file.apply(
        "serve",
        &ServeConfig {
            env: env.clone(),
            ..ServeConfig::default()
        },
    )?;
    cfg.env = env;
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    if a.lockstep {
        cfg.mode = SyncMode::Lockstep;
    }
    if cfg.episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let listener = TcpListener::bind(a.listen).with_context(|| format!("binding {}", a.listen))?;
    eprintln!("listening on {}", listener.local_addr()?);
    let driver_seed = Rng64::derive(cfg.env.seed, 0xd21e);
    let mut driver: Option<Box<dyn Controller>> = match a.driver {
        DriverArg::None => None,
        DriverArg::Expert => Some(Box::new(NoisyController::new(
            ScriptedExpert::new(a.expert_delay),
            a.noise,
            driver_seed,
        ))),
        DriverArg::Random => Some(Box::new(RandomAgent::new(driver_seed))),
    };
    let driver_ref = driver.as_mut().map(|d| d.as_mut() as &mut dyn Controller);
    let report = serve_env(&listener, &cfg, driver_ref)?;
    let jitter = report.max_jitter_fraction(cfg.env.tick_rate);
    eprintln!(
        "served {} ticks, {} episodes, max tick jitter {:.1}%",
        report.ticks,
        report.episode_scores.len(),
        100.0 * jitter
    );
    emit(&serde_json::json!({
        "ticks": report.ticks,
        "episode_scores": report.episode_scores,
        "max_jitter_fraction": jitter,
        "dropped_messages": report.dropped_messages,
        "client_disconnected": report.client_disconnected,
        "config": ServeEcho { serve: &cfg, driver: match a.driver {
            DriverArg::None => "none",
            DriverArg::Expert => "expert",
            DriverArg::Random => "random",
        }, expert_delay: a.expert_delay, noise: a.noise },
    }))?;
    ok()
}

fn record(a: RecordArgs) -> Result<ExitCode> {
    let stream = TcpStream::connect(a.connect).with_context(|| format!("connecting to {}", a.connect))?;
    let report = record_session(
        stream,
        &a.out,
        &RecordOptions {
            player_id: a.player.clone(),
            recorded_at: None,
        },
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    echo_config(
        &a.out,
        &serde_json::json!({
            "connect": a.connect.to_string(),
            "player": a.player,
            "game": report.hello.game_id,
            "tick_rate": report.hello.tick_rate(),
        }),
    )?;
    eprintln!("recorded {} episodes, {} frames", report.archives.len(), report.frames);
    emit(&serde_json::json!({
        "episodes": report.archives.len(),
        "frames": report.frames,
        "scores": report.archives.iter().map(|a| a.header.meta.final_score).collect::<Vec<_>>(),
        "warnings": report.warnings,
    }))?;
    ok()
}

fn stats(a: StatsArgs) -> Result<ExitCode> {
    let ds = read_dataset(&a.data)?;
    if ds.is_empty() {
        bail!("no episode archives under {}", a.data.display());
    }
    let s = dataset_stats(&ds);
    eprintln!(
        "{} episodes, {} samples; score min {} / median {} / mean {:.2} / p95 {} / max {}",
        s.episode_count, s.total_samples, s.min_score, s.median_score, s.mean_score, s.p95_score, s.max_score
    );
    for (player, p) in &s.per_player {
        eprintln!("  {player}: {} episodes, {} samples, mean score {:.2}", p.episodes, p.samples, p.mean_score);
    }
    emit(&s)?;
    ok()
}

fn filter(a: FilterArgs) -> Result<ExitCode> {
    let source = DatasetDir::open(&a.data)?;
    let kept = load_filtered(&source, a.keep_fraction)?;
    write_dataset(&kept, &a.out)?;
    echo_config(
        &a.out,
        &serde_json::json!({ "data": a.data, "keep_fraction": a.keep_fraction }),
    )?;
    eprintln!("kept {} of {} episodes", kept.len(), source.paths().len());
    emit(&serde_json::json!({ "kept": kept.len(), "total": source.paths().len() }))?;
    ok()
}

fn shift(a: ShiftArgs) -> Result<ExitCode> {
    let source = DatasetDir::open(&a.data)?;
    if source.paths().is_empty() {
        bail!("no episode archives under {}", a.data.display());
    }
    let single = source.paths() == [a.data.clone()];
    let mut checksums = Vec::new();
    for path in source.paths() {
        let shifted = shift_actions(&read_episode(path)?, DelayOffset(a.delay))?;
        let target = if single {
            a.out.clone()
        } else {
            a.out.join(path.file_name().context("archive path has no name")?)
        };
        let archive = write_episode(&shifted, &target)?;
        checksums.push(archive.header.frames_crc32);
    }
    if !single {
        echo_config(&a.out, &serde_json::json!({ "data": a.data, "delay": a.delay }))?;
    }
    eprintln!("shifted {} episodes by {}", checksums.len(), a.delay);
    emit(&serde_json::json!({ "episodes": checksums.len(), "frames_crc32": checksums }))?;
    ok()
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let cfg = resolve_train(&file, &a.train, a.delay)?;
    let ds = read_dataset(&a.data)?;
    echo_config(
        &a.out,
        &TrainEcho {
            data: &a.data,
            train: &cfg,
        },
    )?;
    let out = train(&ds, &cfg)?;
    for ck in &out.checkpoints {
        ck.save(&a.out.join(format!("epoch_{:03}.ckpt", ck.epoch)))?;
    }
    out.final_checkpoint().save(&a.out.join("model.ckpt"))?;
    fs::write(a.out.join("loss.csv"), loss_curve_csv(&out.loss_curve))?;
    for e in &out.loss_curve {
        eprintln!("epoch {:>3}  loss {:.5}", e.epoch, e.mean_loss);
    }
    emit(&serde_json::json!({
        "samples_per_epoch": out.samples_per_epoch,
        "optimizer_steps": out.optimizer_steps,
        "loss_curve": out.loss_curve,
        "model": a.out.join("model.ckpt"),
    }))?;
    ok()
}

fn play(a: PlayArgs) -> Result<ExitCode> {
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let agent = PolicyAgent::from_checkpoint(&ckpt, a.seed)?.greedy(a.greedy);
    let stream = TcpStream::connect(a.connect).with_context(|| format!("connecting to {}", a.connect))?;
    let mut actor = AgentActor { agent, seed: a.seed };
    let report = play_session(stream, &mut actor)?;
    if let Some(l) = &report.latency {
        eprintln!(
            "{:?}: episodes {:?}, decisions {}, dropped frames {}, latency p50 {}us p99 {}us, late {}",
            report.status,
            report.episode_scores,
            report.frames_decided,
            report.frames_dropped,
            l.p50_us,
            l.p99_us,
            report.late_decisions
        );
    }
    emit(&serde_json::json!({
        "status": report.status,
        "episode_scores": report.episode_scores,
        "partial_score": report.partial_score,
        "frames_received": report.frames_received,
        "frames_decided": report.frames_decided,
        "frames_dropped": report.frames_dropped,
        "emulates_sent": report.emulates_sent,
        "late_decisions": report.late_decisions,
        "latency": report.latency,
    }))?;
    ok()
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let env = resolve_env(&file, &a.env, None)?;
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let summary = evaluate_checkpoint(&ckpt, &env, a.episodes, a.max_frames, &a.seeds, a.greedy)?;
    let values: Vec<f64> = summary.scores.iter().map(|s| s.score).collect();
    let ci = bootstrap_ci(&values, 0.95, 10_000, 0);
    let baselines = load_baselines(a.baselines.as_deref())?;
    let normalized = match baselines.get(env.game) {
        Ok(b) => Some((
            b.normalize(summary.mean)?,
            b.normalize(ci.0)?,
            b.normalize(ci.1)?,
        )),
        Err(e) => {
            log::warn!("{e}; reporting raw scores only");
            None
        }
    };
    eprintln!("mean {:.2} ± {:.2} over {} episodes (95% CI {:.2}..{:.2})", summary.mean, summary.std, values.len(), ci.0, ci.1);
    if let Some((n, lo, hi)) = normalized {
        eprintln!("normalized {n:.1}% (95% CI {lo:.1}..{hi:.1})");
    }
    if let Some(out) = &a.out {
        echo_config(
            out,
            &serde_json::json!({
                "model": a.model, "env": env, "episodes": a.episodes,
                "max_frames": a.max_frames, "seeds": a.seeds, "greedy": a.greedy,
            }),
        )?;
        let mut csv = String::from("seed,episode,score\n");
        for s in &summary.scores {
            csv.push_str(&format!("{},{},{}\n", s.seed, s.episode, s.score));
        }
        fs::write(out.join("scores.csv"), csv)?;
    }
    emit(&serde_json::json!({
        "mean": summary.mean,
        "std": summary.std,
        "ci95": ci,
        "normalized": normalized.map(|n| n.0),
        "normalized_ci95": normalized.map(|n| (n.1, n.2)),
        "scores": values,
    }))?;
    ok()
}

fn resolve_experiment(f: &ExperimentFlags) -> Result<(ExperimentConfig, ConfigFile)> {
    let file = ConfigFile::load(f.config.as_deref())?;
    let env = resolve_env(&file, &f.env, None)?;
    let train = resolve_train(&file, &f.train, None)?;
    let mut cfg = file.apply("experiment", &ExperimentConfig::default())?;
    cfg.env = env;
    cfg.train = train;
    if let Some(n) = f.eval_episodes {
        cfg.eval_episodes = n;
    }
    if f.max_frames.is_some() {
        cfg.max_frames = f.max_frames;
    }
    if let Some(s) = &f.protocol_seeds {
        cfg.protocol = ProtocolConfig {
            seeds: s.clone(),
            ..cfg.protocol
        };
    }
    if f.final_only {
        cfg.protocol.final_only = true;
    }
    Ok((cfg, file))
}

fn write_experiment(f: &ExperimentFlags, cfg: &ExperimentConfig, results: &[ConditionResult]) -> Result<()> {
    let baselines = load_baselines(f.baselines.as_deref())?;
    let baseline = baselines.get(cfg.env.game).ok();
    let report = summary_report(results, baseline);
    fs::write(f.out.join("results.csv"), results_csv(results))?;
    fs::write(f.out.join("summary.txt"), &report)?;
    fs::write(f.out.join("results.json"), serde_json::to_string_pretty(results)?)?;
    eprint!("{report}");
    emit(
        &results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "condition": r.condition,
                    "score": r.score(),
                    "ci95": r.ci,
                    "per_seed": r.protocol.per_seed(),
                    "normalized": baseline.and_then(|b| b.normalize(r.score()).ok()),
                })
            })
            .collect::<Vec<_>>(),
    )
}

fn delay_sweep(a: DelaySweepArgs) -> Result<ExitCode> {
    let (cfg, _) = resolve_experiment(&a.common)?;
    let delays: Vec<DelayOffset> = a.delays.iter().map(|&d| DelayOffset(d)).collect();
    echo_config(
        &a.common.out,
        &serde_json::json!({ "data": a.common.data, "delays": a.delays, "experiment": cfg }),
    )?;
    let ds = read_dataset(&a.common.data)?;
    let results = experiment_delay_sweep(&ds, &delays, &cfg)?;
    write_experiment(&a.common, &cfg, &results)?;
    ok()
}

fn quality_filter(a: QualityFilterArgs) -> Result<ExitCode> {
    let (cfg, _) = resolve_experiment(&a.common)?;
    echo_config(
        &a.common.out,
        &serde_json::json!({ "data": a.common.data, "fractions": a.fractions, "experiment": cfg }),
    )?;
    let ds = read_dataset(&a.common.data)?;
    let results = experiment_quality_filter(&ds, &a.fractions, &cfg)?;
    write_experiment(&a.common, &cfg, &results)?;
    ok()
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let entries = gradcheck_suite(a.seed, a.coords)?;
    let mut all_passed = true;
    for e in &entries {
        println!("{} ({} parameters)", e.name, e.params);
        for l in &e.report.layers {
            println!(
                "  {:<12} checked {:>4} excluded {:>3} max rel error {:.3e}",
                l.layer, l.checked, l.excluded, l.max_rel_error
            );
        }
        all_passed &= e.report.passed();
    }
    println!(
        "{}: max relative error {:.3e} (tolerance 1e-4)",
        if all_passed { "PASS" } else { "FAIL" },
        entries.iter().map(|e| e.report.max_rel_error()).fold(0.0, f64::max)
    );
    emit(&entries)?;
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    })
}

fn baseline(a: BaselineArgs) -> Result<ExitCode> {
    let mut baselines = Baselines::default();
    for g in &a.games {
        let env = EnvConfig::for_game(g.id(), 0)?;
        eprintln!("{}: {} random and {} expert episodes", g.id(), a.random_episodes, a.expert_episodes);
        let b = compute_baseline(&env, a.random_episodes, a.expert_episodes, a.max_frames, a.seed)?;
        eprintln!(
            "  random {:.3} ± {:.3}, expert {:.3}",
            b.random_mean, b.random_std, b.expert_mean
        );
        let game: Game = g.id().parse()?;
        baselines.games.insert(game.to_string(), b);
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, baselines.to_json())?;
    emit(&baselines)?;
    ok()
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let env = resolve_env(&file, &a.env, None)?;
    let demo = DemoConfig {
        episodes: a.episodes,
        reaction_delay: a.expert_delay,
        noise: a.noise,
        max_frames: a.max_frames,
        seed: a.seed,
    };
    let ds = demonstrations(&env, &demo)?;
    write_dataset(&ds, &a.out)?;
    echo_config(&a.out, &serde_json::json!({ "env": env, "demo": demo }))?;
    let s = dataset_stats(&ds);
    eprintln!("wrote {} episodes, {} samples, mean score {:.2}", s.episode_count, s.total_samples, s.mean_score);
    emit(&s)?;
    ok()
}
