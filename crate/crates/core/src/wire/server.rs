//! Single-flight policy server with injected response latency.

use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::Rng as _;

use super::protocol::{code, encode, read_message, Message, Payload};
use crate::policies::ChunkPolicy;
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// Address to bind, e.g. `127.0.0.1:0` for an ephemeral port.
    pub bind: String,
    /// Injected latency `δ`, measured from request receipt.
    pub delay: Duration,
    /// Half-width of the uniform jitter added to `δ`.
    pub jitter: Duration,
    pub seed: u64,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.jitter.is_zero() && self.jitter >= self.delay {
            return Err(Error::InvalidArgument(format!(
                "jitter {:?} must be smaller than the delay {:?}",
                self.jitter, self.delay
            )));
        }
        Ok(())
    }
}

pub type SharedPolicy = Arc<dyn ChunkPolicy + Send + Sync>;

/// Handle to a running server; dropping it stops the accept loop.
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    concurrent_max: Arc<AtomicUsize>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Largest number of chunks ever computed at once within one session.
    pub fn max_concurrent_inferences(&self) -> usize {
        self.concurrent_max.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Blocks until the accept loop ends (it only ends on shutdown).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_now();
        }
    }
}

/// Binds and starts accepting sessions on a background thread.
pub fn serve(cfg: ServerConfig, policy: SharedPolicy) -> Result<ServerHandle> {
    cfg.validate()?;
    let listener = TcpListener::bind(&cfg.bind).map_err(|e| Error::io(&cfg.bind, e))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let concurrent_max = Arc::new(AtomicUsize::new(0));
    let (stop2, max2) = (stop.clone(), concurrent_max.clone());
    let accept = thread::spawn(move || {
        let mut session = 0u64;
        for conn in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            session += 1;
            let (p, c, m) = (policy.clone(), cfg.clone(), max2.clone());
            thread::spawn(move || {
                if let Err(e) = run_session(stream, p, c, session, m) {
                    log::debug!("session {session} ended: {e}");
                }
            });
        }
    });
    log::info!("serving on {addr}");
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
        concurrent_max,
    })
}

fn send(writer: &Mutex<TcpStream>, msg: &Message) -> Result<()> {
    let bytes = encode(msg);
    let mut w = writer.lock().expect("writer lock");
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn send_err(writer: &Mutex<TcpStream>, request_id: u64, code: u16, message: impl Into<String>) -> Result<()> {
    send(
        writer,
        &Message {
            request_id,
            payload: Payload::Err {
                code,
                message: message.into(),
            },
        },
    )
}

fn run_session(stream: TcpStream, policy: SharedPolicy, cfg: ServerConfig, session: u64, max: Arc<AtomicUsize>) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let writer = Arc::new(Mutex::new(stream));
    let in_flight = Arc::new(AtomicBool::new(false));
    let computing = Arc::new(AtomicUsize::new(0));
    let jitter_rng = Arc::new(Mutex::new(rng::stream(rng::mix(&[cfg.seed, session]), Stream::Jitter)));
    let mut last_id: Option<u64> = None;
    let mut workers = Vec::new();
    loop {
        let msg = match read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e @ Error::Protocol { .. }) => {
                let _ = send_err(&writer, 0, code::MALFORMED, e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let received = Instant::now();
        if last_id.is_some_and(|prev| msg.request_id <= prev) {
            let _ = send_err(&writer, msg.request_id, code::ORDER, "request ids must strictly increase");
            break;
        }
        last_id = Some(msg.request_id);
        match msg.payload {
            Payload::Hello { .. } => send(
                &writer,
                &Message {
                    request_id: msg.request_id,
                    payload: Payload::Hello {
                        obs_dim: policy.obs_dim() as u32,
                        act_dim: policy.act_dim() as u32,
                        horizon: policy.horizon() as u32,
                        latent_dim: policy.latent_dim() as u32,
                    },
                },
            )?,
            Payload::Obs(obs) => {
                if in_flight.swap(true, Ordering::SeqCst) {
                    send_err(&writer, msg.request_id, code::BUSY, "an inference is already in flight")?;
                    continue;
                }
                if obs.len() != policy.obs_dim() {
                    in_flight.store(false, Ordering::SeqCst);
                    send_err(&writer, msg.request_id, code::SHAPE, format!("expected {} observation values", policy.obs_dim()))?;
                    continue;
                }
                let hold = {
                    let j = cfg.jitter.as_secs_f64();
                    let offset = if j > 0.0 { jitter_rng.lock().unwrap().gen_range(-j..=j) } else { 0.0 };
                    Duration::from_secs_f64((cfg.delay.as_secs_f64() + offset).max(0.0))
                };
                let (p, w, f, c, m) = (policy.clone(), writer.clone(), in_flight.clone(), computing.clone(), max.clone());
                let id = msg.request_id;
                workers.push(thread::spawn(move || {
                    let now = c.fetch_add(1, Ordering::SeqCst) + 1;
                    m.fetch_max(now, Ordering::SeqCst);
                    assert_eq!(now, 1, "two inferences in one session");
                    let result = p.predict_chunk(&obs);
                    c.fetch_sub(1, Ordering::SeqCst);
                    let reply = match result {
                        Ok(pred) => Payload::Chunk {
                            horizon: pred.chunk.horizon as u32,
                            act_dim: pred.chunk.act_dim as u32,
                            actions: pred.chunk.actions,
                            latent: pred.latent,
                        },
                        Err(e) => Payload::Err {
                            code: code::INTERNAL,
                            message: e.to_string(),
                        },
                    };
                    if let Some(rest) = (received + hold).checked_duration_since(Instant::now()) {
                        thread::sleep(rest);
                    }
                    // Clear the flag before replying so a client that sends
                    // right after receiving is never told BUSY.
                    f.store(false, Ordering::SeqCst);
                    let _ = send(&w, &Message { request_id: id, payload: reply });
                }));
            }
            Payload::Bye => break,
            Payload::Chunk { .. } | Payload::Err { .. } => {
                let _ = send_err(&writer, msg.request_id, code::MALFORMED, "unexpected message type from client");
                break;
            }
        }
        workers.retain(|h| !h.is_finished());
    }
    for h in workers {
        let _ = h.join();
    }
    let _ = writer.lock().unwrap().shutdown(Shutdown::Both);
    Ok(())
}
