//! Fixed-tick control loop that queries a remote policy server.
//!
//! Tick `t` spans `[start + t·Δt, start + (t+1)·Δt)`. At a cycle start the
//! client sends `o_t`, then keeps polling for the pending reply until a short
//! margin before the tick ends, and executes step `t` with whatever chunk is
//! current at that point. A reply that arrives `δ` after the send is therefore
//! adopted at tick `t + ⌊δ/Δt⌋`, the same step the in-process simulator uses.

use std::io::Write;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::protocol::{encode, read_message, Message, Payload};
use crate::asyncexec::{execute_step, EpisodeTrace, Schedule};
use crate::envsim::{self, EnvConfig};
use crate::policies::{ActionChunk, CorrectionHead, Prediction};
use crate::{Error, Result};

/// Fraction of each tick reserved for the local step after the poll window.
const STEP_MARGIN: f64 = 0.2;
/// Upper bound on any single wait for the server.
const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub addr: String,
    /// Control period `Δt` in seconds.
    pub dt: f64,
    /// Schedule validated against the expected delay.
    pub schedule: Schedule,
    pub env: EnvConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub trace: EpisodeTrace,
    /// Adoption tick minus request tick, one entry per cycle request.
    pub measured_delays: Vec<usize>,
    /// Send-to-arrival wall time per cycle request.
    pub latencies: Vec<Duration>,
    /// Ticks whose local work ran past the tick end.
    pub overruns: usize,
    /// Cycle starts that had to wait for a reply still in flight.
    pub late_replies: usize,
    /// Longest single call to the correction head.
    pub max_head_time: Duration,
}

/// Dimensions advertised by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerInfo {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub latent_dim: usize,
}

/// A session with a reader thread that timestamps every arriving frame.
pub struct Connection {
    stream: TcpStream,
    rx: Receiver<Result<(Message, Instant)>>,
    reader: Option<JoinHandle<()>>,
    next_id: u64,
}

impl Connection {
    pub fn connect(addr: &str) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| Error::io(addr, e))?
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("address {addr} did not resolve")))?;
        let stream = TcpStream::connect_timeout(&sock, Duration::from_secs(5))
            .map_err(|e| Error::io(format!("server {addr} unreachable"), e))?;
        stream.set_nodelay(true)?;
        let mut read_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        let reader = thread::spawn(move || loop {
            match read_message(&mut read_half) {
                Ok(Some(m)) => {
                    if tx.send(Ok((m, Instant::now()))).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        });
        Ok(Connection {
            stream,
            rx,
            reader: Some(reader),
            next_id: 1,
        })
    }

    /// Sends a payload with the next request id and returns that id.
    pub fn send(&mut self, payload: Payload) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        self.send_raw(&Message { request_id: id, payload })?;
        Ok(id)
    }

    /// Sends a message exactly as given, request id included.
    pub fn send_raw(&mut self, msg: &Message) -> Result<()> {
        self.stream.write_all(&encode(msg))?;
        self.stream.flush()?;
        Ok(())
    }

    pub fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    /// Waits up to `timeout` for the next frame; `None` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<(Message, Instant)>> {
        match self.rx.recv_timeout(timeout) {
            Ok(r) => r.map(Some),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Stream(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            ))),
        }
    }

    pub fn recv(&self) -> Result<(Message, Instant)> {
        self.recv_timeout(REPLY_TIMEOUT)?.ok_or_else(|| {
            Error::Stream(std::io::Error::new(std::io::ErrorKind::TimedOut, "no reply from server"))
        })
    }

    pub fn hello(&mut self) -> Result<ServerInfo> {
        let id = self.send(Payload::Hello {
            obs_dim: 0,
            act_dim: 0,
            horizon: 0,
            latent_dim: 0,
        })?;
        let (msg, _) = self.recv()?;
        match msg.payload {
            Payload::Hello {
                obs_dim,
                act_dim,
                horizon,
                latent_dim,
            } if msg.request_id == id => Ok(ServerInfo {
                obs_dim: obs_dim as usize,
                act_dim: act_dim as usize,
                horizon: horizon as usize,
                latent_dim: latent_dim as usize,
            }),
            other => Err(unexpected(other)),
        }
    }

    /// Sends one observation and blocks for its chunk.
    pub fn request_chunk(&mut self, obs: &[f32], source_step: usize) -> Result<(Prediction, Instant)> {
        let id = self.send(Payload::Obs(obs.to_vec()))?;
        let (msg, at) = self.recv()?;
        if msg.request_id != id {
            return Err(Error::Protocol {
                offset: 7,
                message: format!("reply id {} for request {id}", msg.request_id),
            });
        }
        Ok((to_prediction(msg.payload, source_step)?, at))
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(h) = self.reader.take() {
            let _ = self.send(Payload::Bye);
            let _ = self.stream.shutdown(Shutdown::Both);
            let _ = h.join();
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn unexpected(payload: Payload) -> Error {
    match payload {
        Payload::Err { code, message } => Error::Remote { code, message },
        other => Error::Protocol {
            offset: 6,
            message: format!("unexpected message type {}", other.type_code()),
        },
    }
}

fn to_prediction(payload: Payload, source_step: usize) -> Result<Prediction> {
    match payload {
        Payload::Chunk {
            horizon,
            act_dim,
            actions,
            latent,
        } => Ok(Prediction {
            chunk: ActionChunk {
                source_step,
                horizon: horizon as usize,
                act_dim: act_dim as usize,
                actions,
            },
            latent,
        }),
        other => Err(unexpected(other)),
    }
}

fn sleep_until(deadline: Instant) {
    if let Some(d) = deadline.checked_duration_since(Instant::now()) {
        thread::sleep(d);
    }
}

struct Pending {
    id: u64,
    tick: usize,
    sent: Instant,
}

/// Runs one episode against the server at `cfg.addr`.
pub fn client_run(cfg: &ClientConfig, head: Option<&CorrectionHead>) -> Result<ClientReport> {
    if !(cfg.dt.is_finite() && cfg.dt > 0.0) {
        return Err(Error::InvalidArgument(format!("control period must be positive, got {}", cfg.dt)));
    }
    let schedule = Schedule::new(cfg.schedule.horizon, cfg.schedule.exec, cfg.schedule.delay)?;
    let mut conn = Connection::connect(&cfg.addr)?;
    let info = conn.hello()?;
    let want = (cfg.env.obs_dim(), cfg.env.act_dim(), schedule.horizon);
    if (info.obs_dim, info.act_dim, info.horizon) != want {
        return Err(Error::shape(
            "server policy",
            format!("obs {} act {} H {}", want.0, want.1, want.2),
            format!("obs {} act {} H {}", info.obs_dim, info.act_dim, info.horizon),
        ));
    }
    if let Some(h) = head {
        if (h.obs_dim, h.act_dim, h.horizon) != want {
            return Err(Error::shape("correction head", format!("{want:?}"), format!("({}, {}, {})", h.obs_dim, h.act_dim, h.horizon)));
        }
        if h.latent_dim > 0 && h.latent_dim != info.latent_dim {
            return Err(Error::shape("correction head latent", info.latent_dim, h.latent_dim));
        }
    }

    let (e, d) = (schedule.exec, schedule.delay);
    let dt = Duration::from_secs_f64(cfg.dt);
    let poll_window = Duration::from_secs_f64(cfg.dt * (1.0 - STEP_MARGIN));
    let mut state = envsim::reset(&cfg.env, cfg.seed);
    let (mut active, _) = conn.request_chunk(&state.observation(), 0)?;
    let start = Instant::now();

    let mut steps = Vec::new();
    let mut pending: Option<Pending> = None;
    let (mut measured_delays, mut latencies) = (Vec::new(), Vec::new());
    let (mut overruns, mut late_replies) = (0usize, 0usize);
    let mut max_head_time = Duration::ZERO;
    let mut t = 0usize;

    // Adopts the pending reply if one is queued before `deadline`.
    let mut await_reply = |conn: &Connection,
                           pending: &mut Option<Pending>,
                           active: &mut Prediction,
                           t: usize,
                           deadline: Option<Instant>|
     -> Result<()> {
        while let Some(p) = pending.as_ref() {
            let wait = match deadline {
                Some(dl) => dl.saturating_duration_since(Instant::now()),
                None => REPLY_TIMEOUT,
            };
            let Some((msg, at)) = conn.recv_timeout(wait)? else {
                if deadline.is_none() {
                    return Err(Error::Stream(std::io::Error::new(std::io::ErrorKind::TimedOut, "no reply from server")));
                }
                return Ok(());
            };
            if msg.request_id != p.id {
                return Err(unexpected(msg.payload));
            }
            *active = to_prediction(msg.payload, p.tick)?;
            measured_delays.push(t - p.tick);
            latencies.push(at.duration_since(p.sent));
            *pending = None;
        }
        Ok(())
    };

    while !state.done {
        let tick_start = start + dt * t as u32;
        sleep_until(tick_start);
        if t > 0 && t % e == 0 {
            if pending.is_some() {
                late_replies += 1;
                log::warn!("tick {t}: previous reply still in flight at cycle start");
                await_reply(&conn, &mut pending, &mut active, t, None)?;
            }
            let id = conn.send(Payload::Obs(state.observation()))?;
            pending = Some(Pending {
                id,
                tick: t,
                sent: Instant::now(),
            });
        }
        if pending.is_some() {
            await_reply(&conn, &mut pending, &mut active, t, Some(tick_start + poll_window))?;
        }
        let before = Instant::now();
        steps.push(execute_step(&mut state, head, &active, t, d)?);
        if head.is_some() {
            max_head_time = max_head_time.max(before.elapsed());
        }
        if Instant::now() > tick_start + dt {
            overruns += 1;
            log::warn!("tick {t}: overran the control period");
        }
        t += 1;
    }
    conn.close();
    Ok(ClientReport {
        trace: EpisodeTrace {
            seed: cfg.seed,
            schedule,
            corrected: head.is_some(),
            steps,
            success: state.success,
            exogenous_hash: state.exogenous_hash(),
        },
        measured_delays,
        latencies,
        overruns,
        late_replies,
        max_head_time,
    })
}
