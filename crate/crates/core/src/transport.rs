//! TCP transport for federated rounds.
//!
//! Frames are `u32` little-endian length, then a version byte, a type byte
//! and the payload. All numbers are little-endian; vectors are a `u64`
//! count followed by raw `f64` bits, so parameters cross the wire exactly.
//!
//! Session: participant sends HELLO; server answers GLOBAL(0) with the
//! initial model once all `n_p` participants have joined, or REJECT. Each
//! round the participant uploads PARAMS, the server replies GLOBAL(r + 1)
//! after the barrier, and the participant reports its post-broadcast
//! evaluation with EVAL. DONE ends the session.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use crate::config::{ConfigError, MmgConfig};
use crate::federation::{
    aggregate_uploads, initial_global, make_participants, FedError, FedSchedule, Participant, RoundReport, TrainingOutcome,
    Upload, WeightMode,
};
use crate::nn::ParamVector;
use crate::scenario::ScenarioDay;

pub const PROTOCOL_VERSION: u8 = 1;
const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { agent: u32, spec_hash: u64 },
    Params { round: u32, agent: u32, n_samples: u64, epochs_completed: u64, pre_eval: f64, params: ParamVector },
    Global { round: u32, params: ParamVector },
    Eval { round: u32, agent: u32, post_eval: f64 },
    Done,
    Reject { reason: String },
}

impl Message {
    fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 1,
            Message::Params { .. } => 2,
            Message::Global { .. } => 3,
            Message::Eval { .. } => 4,
            Message::Done => 5,
            Message::Reject { .. } => 6,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![PROTOCOL_VERSION, self.tag()];
        let vector = |body: &mut Vec<u8>, v: &ParamVector| {
            body.extend(v.spec_hash.to_le_bytes());
            body.extend((v.values.len() as u64).to_le_bytes());
            for x in &v.values {
                body.extend(x.to_le_bytes());
            }
        };
        match self {
            Message::Hello { agent, spec_hash } => {
                body.extend(agent.to_le_bytes());
                body.extend(spec_hash.to_le_bytes());
            }
            Message::Params { round, agent, n_samples, epochs_completed, pre_eval, params } => {
                body.extend(round.to_le_bytes());
                body.extend(agent.to_le_bytes());
                body.extend(n_samples.to_le_bytes());
                body.extend(epochs_completed.to_le_bytes());
                body.extend(pre_eval.to_le_bytes());
                vector(&mut body, params);
            }
            Message::Global { round, params } => {
                body.extend(round.to_le_bytes());
                vector(&mut body, params);
            }
            Message::Eval { round, agent, post_eval } => {
                body.extend(round.to_le_bytes());
                body.extend(agent.to_le_bytes());
                body.extend(post_eval.to_le_bytes());
            }
            Message::Done => {}
            Message::Reject { reason } => body.extend(reason.as_bytes()),
        }
        let mut frame = (body.len() as u32).to_le_bytes().to_vec();
        frame.extend(body);
        frame
    }

    /// Decodes a frame body (everything after the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self, FedError> {
        let bad = |m: &str| FedError::Protocol(m.to_string());
        let [version, tag, rest @ ..] = body else { return Err(bad("frame shorter than header")) };
        if *version != PROTOCOL_VERSION {
            return Err(FedError::Protocol(format!("unsupported protocol version {version}")));
        }
        let mut cur = Cursor(rest);
        let msg = match tag {
            1 => Message::Hello { agent: cur.u32()?, spec_hash: cur.u64()? },
            2 => Message::Params {
                round: cur.u32()?,
                agent: cur.u32()?,
                n_samples: cur.u64()?,
                epochs_completed: cur.u64()?,
                pre_eval: cur.f64()?,
                params: cur.vector()?,
            },
            3 => Message::Global { round: cur.u32()?, params: cur.vector()? },
            4 => Message::Eval { round: cur.u32()?, agent: cur.u32()?, post_eval: cur.f64()? },
            5 => Message::Done,
            6 => Message::Reject { reason: String::from_utf8_lossy(std::mem::take(&mut cur.0)).into_owned() },
            t => return Err(FedError::Protocol(format!("unknown message type {t}"))),
        };
        if !cur.0.is_empty() {
            return Err(bad("trailing bytes in frame"));
        }
        Ok(msg)
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], FedError> {
        if self.0.len() < N {
            return Err(FedError::Protocol("truncated frame".into()));
        }
        let (head, tail) = self.0.split_at(N);
        self.0 = tail;
        Ok(head.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32, FedError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64, FedError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, FedError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn vector(&mut self) -> Result<ParamVector, FedError> {
        let spec_hash = self.u64()?;
        let n = self.u64()? as usize;
        if self.0.len() / 8 < n {
            return Err(FedError::Protocol("vector longer than frame".into()));
        }
        let values = (0..n).map(|_| self.f64()).collect::<Result<_, _>>()?;
        Ok(ParamVector { values, spec_hash })
    }
}

fn io_err(e: std::io::Error, what: &str) -> FedError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => FedError::Timeout(what.to_string()),
        _ => FedError::Io(e),
    }
}

pub fn send(stream: &mut TcpStream, msg: &Message) -> Result<(), FedError> {
    stream.write_all(&msg.encode()).map_err(|e| io_err(e, "sending frame"))
}

pub fn recv(stream: &mut TcpStream, what: &str) -> Result<Message, FedError> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len).map_err(|e| io_err(e, what))?;
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(FedError::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact(&mut body).map_err(|e| io_err(e, what))?;
    Message::decode(&body)
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub n_participants: usize,
    pub rounds: usize,
    pub weights: WeightMode,
    pub initial: ParamVector,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub reports: Vec<RoundReport>,
    pub globals: Vec<ParamVector>,
}

fn accept_all(listener: &TcpListener, cfg: &ServerConfig) -> Result<Vec<TcpStream>, FedError> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + cfg.timeout;
    let mut slots: Vec<Option<TcpStream>> = (0..cfg.n_participants).map(|_| None).collect();
    while slots.iter().any(Option::is_none) {
        let mut stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let joined = slots.iter().filter(|s| s.is_some()).count();
                    return Err(FedError::Timeout(format!("{joined} of {} participants joined", cfg.n_participants)));
                }
                std::thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(cfg.timeout))?;
        stream.set_nodelay(true)?;
        let reject = |stream: &mut TcpStream, reason: String| send(stream, &Message::Reject { reason });
        match recv(&mut stream, "waiting for HELLO")? {
            Message::Hello { agent, spec_hash } => {
                let agent = agent as usize;
                if spec_hash != cfg.initial.spec_hash {
                    reject(&mut stream, format!("spec hash {spec_hash:#x} does not match {:#x}", cfg.initial.spec_hash))?;
                } else if agent >= cfg.n_participants || slots[agent].is_some() {
                    reject(&mut stream, format!("agent id {agent} invalid or already joined"))?;
                } else {
                    slots[agent] = Some(stream);
                }
            }
            other => reject(&mut stream, format!("expected HELLO, got type {}", other.tag()))?,
        }
    }
    Ok(slots.into_iter().flatten().collect())
}

/// Runs the aggregation server until all rounds finish.
pub fn serve(listener: &TcpListener, cfg: &ServerConfig) -> Result<ServerOutcome, FedError> {
    let mut peers = accept_all(listener, cfg)?;
    for s in peers.iter_mut() {
        send(s, &Message::Global { round: 0, params: cfg.initial.clone() })?;
    }
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut globals = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let start = Instant::now();
        let mut uploads = Vec::with_capacity(peers.len());
        for (j, s) in peers.iter_mut().enumerate() {
            match recv(s, &format!("waiting for agent {j} upload in round {}", r + 1))? {
                Message::Params { round, agent, n_samples, epochs_completed, pre_eval, params }
                    if round as usize == r && agent as usize == j =>
                {
                    uploads.push(Upload { agent: j, round: r, n_samples, epochs_completed, pre_eval, params });
                }
                other => return Err(FedError::Protocol(format!("agent {j}: unexpected {other:?} in round {}", r + 1))),
            }
        }
        let global = aggregate_uploads(&uploads, cfg.weights)?;
        for s in peers.iter_mut() {
            send(s, &Message::Global { round: r as u32 + 1, params: global.clone() })?;
        }
        let mut post_eval = Vec::with_capacity(peers.len());
        for (j, s) in peers.iter_mut().enumerate() {
            match recv(s, &format!("waiting for agent {j} evaluation"))? {
                Message::Eval { round, post_eval: v, .. } if round as usize == r + 1 => post_eval.push(v),
                other => return Err(FedError::Protocol(format!("agent {j}: expected EVAL, got {other:?}"))),
            }
        }
        reports.push(RoundReport {
            round: r + 1,
            pre_eval: uploads.iter().map(|u| u.pre_eval).collect(),
            post_eval,
            agent_norms: uploads.iter().map(|u| u.params.norm()).collect(),
            global_norm: Some(global.norm()),
            epochs_completed: uploads.iter().map(|u| u.epochs_completed).collect(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        globals.push(global);
    }
    for s in peers.iter_mut() {
        send(s, &Message::Done)?;
    }
    Ok(ServerOutcome { reports, globals })
}

fn connect(addr: SocketAddr, timeout: Duration) -> Result<TcpStream, FedError> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline && e.kind() == ErrorKind::ConnectionRefused => {
                std::thread::sleep(Duration::from_millis(20))
            }
            Err(e) => return Err(io_err(e, "connecting to server")),
        }
    }
}

/// Runs one participant against a server. Returns the globals received
/// after each round.
pub fn join(
    addr: SocketAddr,
    participant: &mut Participant,
    schedule: &FedSchedule,
    timeout: Duration,
) -> Result<Vec<ParamVector>, FedError> {
    let mut stream = connect(addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let id = participant.id as u32;
    send(&mut stream, &Message::Hello { agent: id, spec_hash: participant.agent.spec.hash() })?;
    match recv(&mut stream, "waiting for initial model")? {
        Message::Global { round: 0, params } => {
            participant.agent.load_param_vector(&params)?;
        }
        Message::Reject { reason } => return Err(FedError::Rejected(reason)),
        other => return Err(FedError::Protocol(format!("expected initial GLOBAL, got {other:?}"))),
    }
    let mut globals = Vec::with_capacity(schedule.rounds());
    for r in 0..schedule.rounds() {
        let up = participant.local_round(r, schedule.epochs_in_round(r))?;
        send(
            &mut stream,
            &Message::Params {
                round: r as u32,
                agent: id,
                n_samples: up.n_samples,
                epochs_completed: up.epochs_completed,
                pre_eval: up.pre_eval,
                params: up.params,
            },
        )?;
        let global = match recv(&mut stream, "waiting for global model")? {
            Message::Global { round, params } if round as usize == r + 1 => params,
            other => return Err(FedError::Protocol(format!("expected GLOBAL {}, got {other:?}", r + 1))),
        };
        let post_eval = participant.receive_global(&global)?;
        send(&mut stream, &Message::Eval { round: r as u32 + 1, agent: id, post_eval })?;
        globals.push(global);
    }
    match recv(&mut stream, "waiting for DONE")? {
        Message::Done => Ok(globals),
        other => Err(FedError::Protocol(format!("expected DONE, got {other:?}"))),
    }
}

/// Full run of `cfg.schedule` with the server and every participant on
/// loopback TCP, each in its own thread.
pub fn run_training_loopback(cfg: &MmgConfig, day: &ScenarioDay, seed: u64) -> Result<TrainingOutcome, FedError> {
    if cfg.local_only {
        return Err(FedError::Config(ConfigError::Invalid("local-only runs have no server; use the in-process transport".into())));
    }
    let mut participants = make_participants(cfg, day, seed)?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let timeout = Duration::from_secs(cfg.timeout_secs);
    let server_cfg = ServerConfig {
        n_participants: participants.len(),
        rounds: cfg.schedule.rounds(),
        weights: cfg.schedule.weights,
        initial: initial_global(cfg, day, seed)?,
        timeout,
    };
    let (server, clients) = std::thread::scope(|s| {
        let server = s.spawn(|| serve(&listener, &server_cfg));
        let clients: Vec<_> =
            participants.iter_mut().map(|p| s.spawn(move || join(addr, p, &cfg.schedule, timeout))).collect();
        let clients: Vec<_> = clients.into_iter().map(|h| h.join().expect("participant thread panicked")).collect();
        (server.join().expect("server thread panicked"), clients)
    });
    let outcome = server?;
    for c in clients {
        c?;
    }
    Ok(TrainingOutcome { reports: outcome.reports, globals: outcome.globals, participants })
}
