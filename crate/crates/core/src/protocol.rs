//! Wire protocol for streaming frames and inputs, and the sessions built on
//! it: a fixed-rate game server, a recorder and a model-driven player.
//!
//! Every connection starts with `VCBC` and a big-endian `u16` version from
//! each side. Messages follow as `len:u32 type:u8 payload[len-1]`, all
//! integers big-endian.
//!
//! | type | name        | payload |
//! |------|-------------|---------|
//! | 0x01 | HELLO       | tick_rate u32 (mHz), mode u8, game_id (u8 len + bytes), k u8, k × (cardinality u16, name u8 len + bytes) |
//! | 0x02 | FRAME       | episode u32, index u32, ts_us u64, w u16, h u16, fmt u8 = 0 (RGB24), pixels |
//! | 0x03 | INPUT_STATE | ts_us u64, k u8, indices u8[k] |
//! | 0x04 | EMULATE     | as INPUT_STATE |
//! | 0x05 | RESET       | final u8 (1 on the last episode of the session) |
//! | 0x06 | SCORE       | delta f64 bits |
//! | 0x07 | BYE         | empty |
//!
//! A malformed message is fatal for the connection: there is no attempt to
//! resynchronize the stream.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, ActionSpace, DiscreteVariable, Episode, EpisodeMeta, Observation};
use crate::env::{env_reset, Controller, EnvConfig, EnvError};
use crate::policy::{PolicyAgent, PolicyError};
use crate::rng::Rng64;
use crate::store::{write_episode, EpisodeArchive, StoreError};

pub const MAGIC: &[u8; 4] = b"VCBC";
pub const PROTOCOL_VERSION: u16 = 1;
/// Upper bound on `len`; anything larger is treated as corruption.
pub const MAX_MESSAGE_LEN: u32 = 64 << 20;
/// FRAMEs an async server lets queue up for a slow client before skipping.
pub const MAX_QUEUED_FRAMES: u64 = 32;
/// Bytes of FRAME fields before the pixels.
pub const FRAME_FIELDS_LEN: usize = 21;

const T_HELLO: u8 = 0x01;
const T_FRAME: u8 = 0x02;
const T_INPUT_STATE: u8 = 0x03;
const T_EMULATE: u8 = 0x04;
const T_RESET: u8 = 0x05;
const T_SCORE: u8 = 0x06;
const T_BYE: u8 = 0x07;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("message type 0x{kind:02x}: length field says {declared} bytes, layout needs {expected}")]
    LengthMismatch {
        kind: u8,
        declared: usize,
        expected: usize,
    },
    #[error("message length {0} out of range")]
    BadLength(u32),
    #[error("stream ended inside a message")]
    Truncated,
    #[error("malformed {kind} message: {message}")]
    Malformed { kind: &'static str, message: String },
    #[error("peer closed the connection")]
    Closed,
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
    #[error("peer did not answer within {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Whether the server runs on the clock or waits for the client each tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    #[default]
    Async,
    Lockstep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub tick_rate_mhz: u32,
    pub mode: SyncMode,
    pub game_id: String,
    pub action_space: ActionSpace,
}

impl Hello {
    pub fn tick_rate(&self) -> f64 {
        self.tick_rate_mhz as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMsg {
    pub episode: u32,
    pub index: u32,
    pub timestamp_us: u64,
    pub frame: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Frame(FrameMsg),
    InputState { timestamp_us: u64, action: Action },
    Emulate { timestamp_us: u64, action: Action },
    Reset { final_episode: bool },
    Score { delta: f64 },
    Bye,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello(_) => "HELLO",
            Message::Frame(_) => "FRAME",
            Message::InputState { .. } => "INPUT_STATE",
            Message::Emulate { .. } => "EMULATE",
            Message::Reset { .. } => "RESET",
            Message::Score { .. } => "SCORE",
            Message::Bye => "BYE",
        }
    }
}

pub fn encode_preamble() -> [u8; 6] {
    let mut out = [0u8; 6];
    out[..4].copy_from_slice(MAGIC);
    out[4..].copy_from_slice(&PROTOCOL_VERSION.to_be_bytes());
    out
}

pub fn read_preamble<R: Read>(r: &mut R) -> Result<u16, ProtocolError> {
    let mut buf = [0u8; 6];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => e.into(),
    })?;
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let version = u16::from_be_bytes([buf[4], buf[5]]);
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(version));
    }
    Ok(version)
}

fn put_short_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let n = bytes.len().min(u8::MAX as usize);
    out.push(n as u8);
    out.extend_from_slice(&bytes[..n]);
}

fn put_action(out: &mut Vec<u8>, ts: u64, action: &Action) {
    out.extend_from_slice(&ts.to_be_bytes());
    out.push(action.indices.len() as u8);
    out.extend(action.indices.iter().map(|&i| i as u8));
}

/// Serializes one message including its length prefix.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    let kind = match msg {
        Message::Hello(h) => {
            p.extend_from_slice(&h.tick_rate_mhz.to_be_bytes());
            p.push(match h.mode {
                SyncMode::Async => 0,
                SyncMode::Lockstep => 1,
            });
            put_short_str(&mut p, &h.game_id);
            p.push(h.action_space.len() as u8);
            for v in h.action_space.variables() {
                p.extend_from_slice(&(v.cardinality as u16).to_be_bytes());
                put_short_str(&mut p, &v.name);
            }
            T_HELLO
        }
        Message::Frame(f) => {
            p.reserve(FRAME_FIELDS_LEN + f.frame.pixels().len());
            p.extend_from_slice(&f.episode.to_be_bytes());
            p.extend_from_slice(&f.index.to_be_bytes());
            p.extend_from_slice(&f.timestamp_us.to_be_bytes());
            p.extend_from_slice(&(f.frame.width() as u16).to_be_bytes());
            p.extend_from_slice(&(f.frame.height() as u16).to_be_bytes());
            p.push(0);
            p.extend_from_slice(f.frame.pixels());
            T_FRAME
        }
        Message::InputState {
            timestamp_us,
            action,
        } => {
            put_action(&mut p, *timestamp_us, action);
            T_INPUT_STATE
        }
        Message::Emulate {
            timestamp_us,
            action,
        } => {
            put_action(&mut p, *timestamp_us, action);
            T_EMULATE
        }
        Message::Reset { final_episode } => {
            p.push(*final_episode as u8);
            T_RESET
        }
        Message::Score { delta } => {
            p.extend_from_slice(&delta.to_bits().to_be_bytes());
            T_SCORE
        }
        Message::Bye => T_BYE,
    };
    let mut out = Vec::with_capacity(5 + p.len());
    out.extend_from_slice(&((p.len() + 1) as u32).to_be_bytes());
    out.push(kind);
    out.extend_from_slice(&p);
    out
}

struct Cursor<'a> {
    kind: &'static str,
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn malformed(&self, message: &str) -> ProtocolError {
        ProtocolError::Malformed {
            kind: self.kind,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let s = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| self.malformed("payload shorter than its fields"))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn short_str(&mut self) -> Result<String, ProtocolError> {
        let n = self.u8()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.malformed("string is not UTF-8"))
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.at != self.buf.len() {
            return Err(self.malformed("trailing bytes after the last field"));
        }
        Ok(())
    }
}

fn expect_len(kind: u8, declared: usize, expected: usize) -> Result<(), ProtocolError> {
    if declared != expected {
        return Err(ProtocolError::LengthMismatch {
            kind,
            declared,
            expected,
        });
    }
    Ok(())
}

fn decode_payload(kind: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
    let declared = payload.len() + 1;
    let action_len = |payload: &[u8]| -> Result<(), ProtocolError> {
        let k = *payload.get(8).ok_or(ProtocolError::LengthMismatch {
            kind,
            declared,
            expected: 10,
        })? as usize;
        expect_len(kind, declared, 1 + 9 + k)
    };
    let name = match kind {
        T_HELLO => "HELLO",
        T_FRAME => "FRAME",
        T_INPUT_STATE => "INPUT_STATE",
        T_EMULATE => "EMULATE",
        T_RESET => "RESET",
        T_SCORE => "SCORE",
        T_BYE => "BYE",
        other => return Err(ProtocolError::UnknownType(other)),
    };
    let mut c = Cursor {
        kind: name,
        buf: payload,
        at: 0,
    };
    let msg = match kind {
        T_HELLO => {
            let tick_rate_mhz = c.u32()?;
            let mode = match c.u8()? {
                0 => SyncMode::Async,
                1 => SyncMode::Lockstep,
                _ => return Err(c.malformed("unknown sync mode")),
            };
            let game_id = c.short_str()?;
            let k = c.u8()?;
            let mut vars = Vec::with_capacity(k as usize);
            for _ in 0..k {
                let cardinality = c.u16()? as u32;
                let name = c.short_str()?;
                vars.push(DiscreteVariable { name, cardinality });
            }
            let action_space =
                ActionSpace::new(vars).map_err(|e| c.malformed(&e.to_string()))?;
            Message::Hello(Hello {
                tick_rate_mhz,
                mode,
                game_id,
                action_space,
            })
        }
        T_FRAME => {
            if payload.len() < FRAME_FIELDS_LEN {
                return Err(ProtocolError::LengthMismatch {
                    kind,
                    declared,
                    expected: 1 + FRAME_FIELDS_LEN,
                });
            }
            let episode = c.u32()?;
            let index = c.u32()?;
            let timestamp_us = c.u64()?;
            let w = c.u16()? as u32;
            let h = c.u16()? as u32;
            if c.u8()? != 0 {
                return Err(c.malformed("unsupported pixel format"));
            }
            let n = (w * h) as usize * Observation::CHANNELS;
            expect_len(kind, declared, 1 + FRAME_FIELDS_LEN + n)?;
            let frame = Observation::new(w, h, c.take(n)?.to_vec())
                .map_err(|e| c.malformed(&e.to_string()))?;
            Message::Frame(FrameMsg {
                episode,
                index,
                timestamp_us,
                frame,
            })
        }
        T_INPUT_STATE | T_EMULATE => {
            action_len(payload)?;
            let timestamp_us = c.u64()?;
            let k = c.u8()? as usize;
            let action = Action::new(c.take(k)?.iter().map(|&b| b as u32).collect());
            if kind == T_INPUT_STATE {
                Message::InputState {
                    timestamp_us,
                    action,
                }
            } else {
                Message::Emulate {
                    timestamp_us,
                    action,
                }
            }
        }
        T_RESET => {
            expect_len(kind, declared, 2)?;
            Message::Reset {
                final_episode: c.u8()? != 0,
            }
        }
        T_SCORE => {
            expect_len(kind, declared, 9)?;
            Message::Score {
                delta: f64::from_bits(c.u64()?),
            }
        }
        _ => {
            expect_len(kind, declared, 1)?;
            Message::Bye
        }
    };
    c.finish()?;
    Ok(msg)
}

/// Decodes the first message in `buf`. Returns `None` when more bytes are
/// needed, otherwise the message and the number of bytes consumed.
pub fn decode_prefix(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap());
    if len == 0 || len > MAX_MESSAGE_LEN {
        return Err(ProtocolError::BadLength(len));
    }
    let total = 4 + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let msg = decode_payload(buf[4], &buf[5..total])?;
    Ok(Some((msg, total)))
}

/// Decodes exactly one complete message.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    match decode_prefix(bytes)? {
        None => Err(ProtocolError::Truncated),
        Some((msg, used)) if used == bytes.len() => Ok(msg),
        Some((msg, used)) => Err(ProtocolError::LengthMismatch {
            kind: encode(&msg)[4],
            declared: used - 4,
            expected: bytes.len() - 4,
        }),
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode(msg))?;
    Ok(())
}

/// Incremental message reader that tolerates read timeouts between (and
/// inside) messages.
pub struct MessageReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::with_capacity(64 * 1024),
        }
    }

    /// Next message; `Ok(None)` if the underlying read timed out first.
    /// A clean end of stream between messages is [`ProtocolError::Closed`].
    pub fn poll(&mut self) -> Result<Option<Message>, ProtocolError> {
        loop {
            if let Some((msg, used)) = decode_prefix(&self.buf)? {
                self.buf.drain(..used);
                return Ok(Some(msg));
            }
            let mut chunk = [0u8; 64 * 1024];
            match self.inner.read(&mut chunk) {
                Ok(0) if self.buf.is_empty() => return Err(ProtocolError::Closed),
                Ok(0) => return Err(ProtocolError::Truncated),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) if e.kind() == ErrorKind::ConnectionReset => return Err(ProtocolError::Closed),
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Blocks until a whole message is available.
    pub fn next(&mut self) -> Result<Message, ProtocolError> {
        loop {
            if let Some(m) = self.poll()? {
                return Ok(m);
            }
        }
    }
}

/// Single-slot "latest value" mailbox. A new value replaces an unread one;
/// the number of replaced values is counted.
#[derive(Debug)]
pub struct Mailbox<T> {
    state: Mutex<MailboxState<T>>,
    ready: Condvar,
}

#[derive(Debug)]
struct MailboxState<T> {
    value: Option<T>,
    closed: bool,
    replaced: u64,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self {
            state: Mutex::new(MailboxState {
                value: None,
                closed: false,
                replaced: 0,
            }),
            ready: Condvar::new(),
        }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `value`; returns true if it replaced an unread one.
    pub fn put(&self, value: T) -> bool {
        let mut s = self.state.lock().expect("mailbox lock");
        let replaced = s.value.replace(value).is_some();
        if replaced {
            s.replaced += 1;
        }
        self.ready.notify_one();
        replaced
    }

    /// Waits for a value. Returns `None` once closed and empty.
    pub fn take(&self) -> Option<T> {
        let mut s = self.state.lock().expect("mailbox lock");
        loop {
            if let Some(v) = s.value.take() {
                return Some(v);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).expect("mailbox lock");
        }
    }

    pub fn try_take(&self) -> Option<T> {
        self.state.lock().expect("mailbox lock").value.take()
    }

    pub fn close(&self) {
        self.state.lock().expect("mailbox lock").closed = true;
        self.ready.notify_all();
    }

    pub fn replaced(&self) -> u64 {
        self.state.lock().expect("mailbox lock").replaced
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub env: EnvConfig,
    /// Episodes per session; episode e uses seed `env.seed + e`.
    pub episodes: u32,
    pub mode: SyncMode,
    /// How long a lockstep server waits for EMULATE before giving up.
    pub client_timeout_ms: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            episodes: 1,
            mode: SyncMode::Async,
            client_timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeReport {
    pub ticks: u64,
    pub episode_scores: Vec<f64>,
    /// Start time of every tick, microseconds since session start.
    pub tick_times_us: Vec<u64>,
    /// FRAMEs skipped because the client fell behind.
    pub dropped_messages: u64,
    /// EMULATE messages that did not fit the action space.
    pub invalid_emulates: u64,
    pub client_disconnected: bool,
}

impl ServeReport {
    /// Largest |interval − nominal| / nominal over consecutive ticks.
    pub fn max_jitter_fraction(&self, tick_rate: f64) -> f64 {
        let nominal = 1e6 / tick_rate;
        self.tick_times_us
            .windows(2)
            .map(|w| ((w[1] - w[0]) as f64 - nominal).abs() / nominal)
            .fold(0.0, f64::max)
    }
}

fn sleep_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > Duration::from_millis(2) {
            thread::sleep(left - Duration::from_millis(1));
        } else {
            thread::yield_now();
        }
    }
}

/// Accepts one client on `listener` and serves it; see [`serve_stream`].
pub fn serve_env(
    listener: &TcpListener,
    config: &ServeConfig,
    driver: Option<&mut dyn Controller>,
) -> Result<ServeReport, ProtocolError> {
    config.env.validate()?;
    let (stream, peer) = listener.accept()?;
    log::info!("serving {} to {peer}", config.env.game);
    serve_stream(stream, config, driver)
}

/// Runs `config.episodes` episodes over `stream`.
///
/// Each tick the server picks the action: from `driver` if given (a local
/// player whose inputs are broadcast), otherwise the latest EMULATE
/// received (the no-op until one arrives). In async mode it sends
/// INPUT_STATE and FRAME on a fixed clock; in lockstep mode it sends the
/// FRAME first and waits for the client's EMULATE. Then it steps the game,
/// sends SCORE for non-zero deltas and RESET at episode end.
pub fn serve_stream(
    stream: TcpStream,
    config: &ServeConfig,
    mut driver: Option<&mut dyn Controller>,
) -> Result<ServeReport, ProtocolError> {
    config.env.validate()?;
    let env = &config.env;
    let space = env.action_space();
    stream.set_nodelay(true)?;
    let mut write_half = stream.try_clone()?;
    write_half.write_all(&encode_preamble())?;
    stream.set_read_timeout(Some(Duration::from_millis(config.client_timeout_ms.max(1))))?;
    read_preamble(&mut &stream)?;
    write_message(
        &mut write_half,
        &Message::Hello(Hello {
            tick_rate_mhz: (env.tick_rate * 1000.0).round() as u32,
            mode: config.mode,
            game_id: env.game.to_string(),
            action_space: space.clone(),
        }),
    )?;

    let disconnected = Arc::new(AtomicBool::new(false));
    let stop = Arc::new(AtomicBool::new(false));
    let latched: Arc<Mutex<Option<Action>>> = Arc::new(Mutex::new(None));
    let invalid = Arc::new(AtomicU64::new(0));
    let (emulate_tx, emulate_rx) = mpsc::channel::<Action>();

    // Writer thread, so a slow client never stalls the clock. In async mode
    // FRAMEs are skipped while too many are still queued; control messages
    // are always delivered.
    let (out_tx, out_rx) = mpsc::channel::<(Vec<u8>, bool)>();
    let queued_frames = Arc::new(AtomicU64::new(0));
    let writer = {
        let disconnected = disconnected.clone();
        let queued_frames = queued_frames.clone();
        thread::spawn(move || {
            for (bytes, is_frame) in out_rx {
                if is_frame {
                    queued_frames.fetch_sub(1, Ordering::SeqCst);
                }
                if write_half.write_all(&bytes).is_err() {
                    disconnected.store(true, Ordering::SeqCst);
                    break;
                }
            }
            let _ = write_half.flush();
            write_half
        })
    };

    let reader = {
        let read_half = stream.try_clone()?;
        read_half.set_read_timeout(Some(Duration::from_millis(50)))?;
        let (disconnected, stop, latched, invalid) =
            (disconnected.clone(), stop.clone(), latched.clone(), invalid.clone());
        let space = space.clone();
        thread::spawn(move || {
            let mut reader = MessageReader::new(read_half);
            while !stop.load(Ordering::SeqCst) {
                match reader.poll() {
                    Ok(None) => {}
                    Ok(Some(Message::Emulate { action, .. })) => {
                        if space.validate(&action).is_err() {
                            invalid.fetch_add(1, Ordering::SeqCst);
                            continue;
                        }
                        *latched.lock().expect("latch") = Some(action.clone());
                        let _ = emulate_tx.send(action);
                    }
                    Ok(Some(Message::Bye)) | Err(_) => {
                        disconnected.store(true, Ordering::SeqCst);
                        break;
                    }
                    Ok(Some(other)) => log::warn!("ignoring {} from client", other.kind()),
                }
            }
        })
    };

    let mut dropped = 0u64;
    let send = |msg: &Message, dropped: &mut u64| {
        let is_frame = matches!(msg, Message::Frame(_));
        if is_frame {
            if config.mode == SyncMode::Async
                && queued_frames.load(Ordering::SeqCst) >= MAX_QUEUED_FRAMES
            {
                *dropped += 1;
                return;
            }
            queued_frames.fetch_add(1, Ordering::SeqCst);
        }
        if out_tx.send((encode(msg), is_frame)).is_err() {
            *dropped += 1;
        }
    };

    let interval = Duration::from_secs_f64(1.0 / env.tick_rate);
    let timeout = Duration::from_millis(config.client_timeout_ms);
    let start = Instant::now();
    let mut tick: u64 = 0;
    let mut last_ts = 0u64;
    let mut report = ServeReport {
        ticks: 0,
        episode_scores: Vec::new(),
        tick_times_us: Vec::new(),
        dropped_messages: 0,
        invalid_emulates: 0,
        client_disconnected: false,
    };

    'session: for episode in 0..config.episodes {
        let ep_env = env.with_seed(env.seed + episode as u64);
        let (mut state, mut obs) = env_reset(&ep_env)?;
        if let Some(d) = driver.as_deref_mut() {
            d.reset();
        }
        *latched.lock().expect("latch") = None;
        let mut index = 0u32;
        loop {
            if disconnected.load(Ordering::SeqCst) {
                break 'session;
            }
            if config.mode == SyncMode::Async {
                sleep_until(start + interval.mul_f64(tick as f64));
            }
            let now_us = start.elapsed().as_micros() as u64;
            report.tick_times_us.push(now_us);
            // Strictly increasing so that pairing by timestamp is exact.
            let ts = now_us.max(last_ts + 1);
            last_ts = ts;
            let frame = Message::Frame(FrameMsg {
                episode,
                index,
                timestamp_us: ts,
                frame: obs.clone(),
            });
            let action = match (config.mode, driver.as_deref_mut()) {
                (_, Some(d)) => {
                    let a = d.act(&state, &obs);
                    send(&Message::InputState { timestamp_us: ts, action: a.clone() }, &mut dropped);
                    send(&frame, &mut dropped);
                    a
                }
                (SyncMode::Async, None) => {
                    let a = latched.lock().expect("latch").clone().unwrap_or_else(|| space.noop());
                    send(&Message::InputState { timestamp_us: ts, action: a.clone() }, &mut dropped);
                    send(&frame, &mut dropped);
                    a
                }
                (SyncMode::Lockstep, None) => {
                    send(&frame, &mut dropped);
                    let a = loop {
                        match emulate_rx.recv_timeout(Duration::from_millis(20)) {
                            Ok(a) => break Some(a),
                            Err(RecvTimeoutError::Timeout)
                                if !disconnected.load(Ordering::SeqCst)
                                    && start.elapsed().as_micros() as u64 - now_us
                                        < timeout.as_micros() as u64 => {}
                            Err(_) => break None,
                        }
                    };
                    let Some(a) = a else {
                        disconnected.store(true, Ordering::SeqCst);
                        break 'session;
                    };
                    send(&Message::InputState { timestamp_us: ts, action: a.clone() }, &mut dropped);
                    a
                }
            };
            let out = state.step_mut(&action)?;
            tick += 1;
            index += 1;
            if out.score_delta != 0.0 {
                send(&Message::Score { delta: out.score_delta }, &mut dropped);
            }
            if out.done {
                send(
                    &Message::Reset {
                        final_episode: episode + 1 == config.episodes,
                    },
                    &mut dropped,
                );
                report.episode_scores.push(state.score());
                break;
            }
            obs = state.render();
        }
    }
    send(&Message::Bye, &mut dropped);
    drop(out_tx);
    let _write_half = writer.join().expect("writer thread");
    // Give the client a moment to read everything and hang up.
    let drain_until = Instant::now() + Duration::from_secs(2);
    while !disconnected.load(Ordering::SeqCst) && Instant::now() < drain_until {
        thread::sleep(Duration::from_millis(5));
    }
    stop.store(true, Ordering::SeqCst);
    reader.join().expect("reader thread");
    let _ = stream.shutdown(Shutdown::Both);

    report.ticks = tick;
    report.dropped_messages = dropped;
    report.invalid_emulates = invalid.load(Ordering::SeqCst);
    report.client_disconnected = report.episode_scores.len() < config.episodes as usize;
    Ok(report)
}

/// Client handshake: exchange preambles and read HELLO. The returned
/// reader may already hold messages that followed HELLO.
pub fn client_handshake(
    stream: &mut TcpStream,
) -> Result<(Hello, MessageReader<TcpStream>), ProtocolError> {
    stream.set_nodelay(true)?;
    stream.write_all(&encode_preamble())?;
    read_preamble(stream)?;
    let mut reader = MessageReader::new(stream.try_clone()?);
    match reader.next()? {
        Message::Hello(h) => Ok((h, reader)),
        other => Err(ProtocolError::Unexpected(other.kind())),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RecordOptions {
    pub player_id: String,
    /// Fixed `recorded_at`; `None` uses the current Unix time.
    pub recorded_at: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RecordReport {
    pub hello: Hello,
    pub archives: Vec<EpisodeArchive>,
    pub frames: usize,
    pub warnings: Vec<String>,
}

struct PendingEpisode {
    frames: Vec<(u64, Observation)>,
    inputs: Vec<(u64, Action)>,
    score: f64,
    saw_score: bool,
}

impl PendingEpisode {
    fn new() -> Self {
        Self {
            frames: Vec::new(),
            inputs: Vec::new(),
            score: 0.0,
            saw_score: false,
        }
    }
}

/// Pairs every frame with the latest input whose timestamp is at or before
/// the frame's. Frames with no such input get `fallback`.
pub fn pair_inputs(
    frame_ts: &[u64],
    inputs: &[(u64, Action)],
    fallback: &Action,
) -> Vec<Action> {
    let mut sorted: Vec<&(u64, Action)> = inputs.iter().collect();
    sorted.sort_by_key(|(ts, _)| *ts);
    frame_ts
        .iter()
        .map(|&ft| {
            let k = sorted.partition_point(|(ts, _)| *ts <= ft);
            if k == 0 {
                fallback.clone()
            } else {
                sorted[k - 1].1.clone()
            }
        })
        .collect()
}

/// Receives a session and writes one archive per episode into `out_dir`
/// (`ep_00000`, `ep_00001`, ...).
pub fn record_session(
    mut stream: TcpStream,
    out_dir: &Path,
    options: &RecordOptions,
) -> Result<RecordReport, ProtocolError> {
    let (hello, mut reader) = client_handshake(&mut stream)?;
    std::fs::create_dir_all(out_dir).map_err(|source| StoreError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let space = hello.action_space.clone();
    let mut report = RecordReport {
        hello: hello.clone(),
        archives: Vec::new(),
        frames: 0,
        warnings: Vec::new(),
    };
    let recorded_at = options.recorded_at.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    let mut pending = PendingEpisode::new();

    let finish = |pending: &mut PendingEpisode, report: &mut RecordReport| -> Result<(), ProtocolError> {
        let ep = std::mem::replace(pending, PendingEpisode::new());
        let n = report.archives.len();
        if ep.frames.is_empty() {
            report.warnings.push(format!("episode {n}: no frames, not archived"));
            return Ok(());
        }
        if !ep.saw_score {
            let w = format!("episode {n}: no SCORE received; final score {}", ep.score);
            log::warn!("{w}");
            report.warnings.push(w);
        }
        let ts: Vec<u64> = ep.frames.iter().map(|(t, _)| *t).collect();
        if ep.inputs.iter().all(|(t, _)| *t > ts[0]) {
            report
                .warnings
                .push(format!("episode {n}: first frame precedes every input; paired with no-op"));
        }
        let actions = pair_inputs(&ts, &ep.inputs, &space.noop());
        let frames: Vec<Observation> = ep.frames.into_iter().map(|(_, f)| f).collect();
        let meta = EpisodeMeta {
            game_id: hello.game_id.clone(),
            player_id: options.player_id.clone(),
            fps: hello.tick_rate(),
            native_resolution: frames[0].dims(),
            action_space: space.clone(),
            final_score: ep.score,
            recorded_at,
            delay_applied: 0,
        };
        report.frames += frames.len();
        let episode = Episode::new(meta, frames, actions).map_err(StoreError::from)?;
        let path: PathBuf = out_dir.join(format!("ep_{n:05}"));
        report.archives.push(write_episode(&episode, &path)?);
        Ok(())
    };

    loop {
        match reader.next() {
            Ok(Message::Frame(f)) => pending.frames.push((f.timestamp_us, f.frame)),
            Ok(Message::InputState {
                timestamp_us,
                action,
            }) => pending.inputs.push((timestamp_us, action)),
            Ok(Message::Score { delta }) => {
                pending.score += delta;
                pending.saw_score = true;
            }
            Ok(Message::Reset { .. }) => finish(&mut pending, &mut report)?,
            Ok(Message::Bye) => break,
            Ok(other) => return Err(ProtocolError::Unexpected(other.kind())),
            Err(ProtocolError::Closed) => {
                report.warnings.push("connection closed without BYE".into());
                if !pending.frames.is_empty() {
                    finish(&mut pending, &mut report)?;
                }
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let _ = write_message(&mut stream, &Message::Bye);
    Ok(report)
}

/// Something that turns raw frames into actions during a live session.
pub trait Actor {
    fn begin_episode(&mut self, episode: u32);
    fn act(&mut self, frame: &Observation) -> Result<Action, ProtocolError>;
}

/// Runs a [`PolicyAgent`], reseeding its sampler per episode.
pub struct AgentActor {
    pub agent: PolicyAgent,
    pub seed: u64,
}

impl Actor for AgentActor {
    fn begin_episode(&mut self, episode: u32) {
        self.agent
            .reset_with_seed(Rng64::derive(self.seed, episode as u64));
    }

    fn act(&mut self, frame: &Observation) -> Result<Action, ProtocolError> {
        Ok(self.agent.act_on(frame)?)
    }
}

/// Always the same action.
pub struct ConstantActor(pub Action);

impl Actor for ConstantActor {
    fn begin_episode(&mut self, _episode: u32) {}

    fn act(&mut self, _frame: &Observation) -> Result<Action, ProtocolError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Completed,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

/// Nearest-rank percentiles.
pub fn latency_summary(samples_us: &[u64]) -> Option<LatencySummary> {
    if samples_us.is_empty() {
        return None;
    }
    let mut s = samples_us.to_vec();
    s.sort_unstable();
    let rank = |p: f64| s[((p / 100.0 * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    Some(LatencySummary {
        p50_us: rank(50.0),
        p90_us: rank(90.0),
        p99_us: rank(99.0),
        max_us: *s.last().unwrap(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayReport {
    pub status: SessionStatus,
    pub episode_scores: Vec<f64>,
    /// Score accumulated in an episode that never finished.
    pub partial_score: f64,
    pub frames_received: u64,
    pub frames_decided: u64,
    /// Frames overwritten in the mailbox before the decider saw them.
    pub frames_dropped: u64,
    pub emulates_sent: u64,
    /// Decisions slower than one tick interval.
    pub late_decisions: u64,
    pub latency: Option<LatencySummary>,
    /// (episode, frame index, action) for every decision, in order.
    pub decisions: Vec<(u32, u32, Action)>,
}

impl PlayReport {
    pub fn on_time_fraction(&self) -> f64 {
        if self.frames_decided == 0 {
            return 1.0;
        }
        1.0 - self.late_decisions as f64 / self.frames_decided as f64
    }
}

#[derive(Debug, Default)]
struct ScoreBoard {
    episode_scores: Vec<f64>,
    current: f64,
    status: Option<SessionStatus>,
    frames: u64,
}

/// Plays a served game: a reader thread keeps only the newest frame in a
/// [`Mailbox`]; the caller's thread decides and sends EMULATE. In async mode
/// EMULATE is sent only when the action changes; in lockstep mode the
/// server waits for it, so it is sent for every frame.
pub fn play_session<A: Actor>(mut stream: TcpStream, actor: &mut A) -> Result<PlayReport, ProtocolError> {
    let (hello, mut reader) = client_handshake(&mut stream)?;
    let interval_us = (1e9 / hello.tick_rate_mhz.max(1) as f64) as u64;
    let mailbox: Arc<Mailbox<(FrameMsg, Instant)>> = Arc::new(Mailbox::new());
    let board = Arc::new(Mutex::new(ScoreBoard::default()));

    let reader = {
        let mailbox = mailbox.clone();
        let board = board.clone();
        thread::spawn(move || {
            let status = loop {
                match reader.next() {
                    Ok(Message::Frame(f)) => {
                        board.lock().expect("board").frames += 1;
                        mailbox.put((f, Instant::now()));
                    }
                    Ok(Message::Score { delta }) => board.lock().expect("board").current += delta,
                    Ok(Message::Reset { .. }) => {
                        let mut b = board.lock().expect("board");
                        let s = std::mem::take(&mut b.current);
                        b.episode_scores.push(s);
                    }
                    Ok(Message::Bye) => break SessionStatus::Completed,
                    Ok(_) => {}
                    Err(e) => {
                        log::warn!("play session ended: {e}");
                        break SessionStatus::Disconnected;
                    }
                }
            };
            board.lock().expect("board").status = Some(status);
            mailbox.close();
        })
    };

    let mut report = PlayReport {
        status: SessionStatus::Completed,
        episode_scores: Vec::new(),
        partial_score: 0.0,
        frames_received: 0,
        frames_decided: 0,
        frames_dropped: 0,
        emulates_sent: 0,
        late_decisions: 0,
        latency: None,
        decisions: Vec::new(),
    };
    let mut latencies = Vec::new();
    let mut last_sent: Option<Action> = None;
    let mut episode: Option<u32> = None;
    let mut send_failed = false;
    while let Some((f, received)) = mailbox.take() {
        if episode != Some(f.episode) {
            episode = Some(f.episode);
            actor.begin_episode(f.episode);
            last_sent = None;
        }
        let action = actor.act(&f.frame)?;
        let needs_send = hello.mode == SyncMode::Lockstep || last_sent.as_ref() != Some(&action);
        if needs_send && !send_failed {
            let msg = Message::Emulate {
                timestamp_us: f.timestamp_us,
                action: action.clone(),
            };
            if write_message(&mut stream, &msg).is_err() {
                send_failed = true;
            } else {
                report.emulates_sent += 1;
                last_sent = Some(action.clone());
            }
        }
        let latency = received.elapsed().as_micros() as u64;
        if latency > interval_us {
            report.late_decisions += 1;
        }
        latencies.push(latency);
        report.frames_decided += 1;
        report.decisions.push((f.episode, f.index, action));
    }
    reader.join().expect("reader thread");
    let _ = write_message(&mut stream, &Message::Bye);
    let _ = stream.shutdown(Shutdown::Write);

    let b = board.lock().expect("board");
    report.status = b.status.unwrap_or(SessionStatus::Disconnected);
    report.episode_scores = b.episode_scores.clone();
    report.partial_score = b.current;
    report.frames_received = b.frames;
    report.frames_dropped = mailbox.replaced();
    report.latency = latency_summary(&latencies);
    Ok(report)
}
