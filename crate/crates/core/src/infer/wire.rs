//! Length-prefixed binary transport for running the batching server in a
//! separate process.
//!
//! Every frame is `len: u32 LE` followed by `len` bytes: a one-byte message
//! type and its body. All scalars are little-endian.
//!
//! ```text
//! REQ  (1): version u16 | env_id u32 | step_idx u64 | payload_len u32 | payload
//! RESP (2): env_id u32 | step_idx u64 | mask u8 | service_time f64 | flags u8
//!           [flags & 1: longitudinal f64 | steer f64]
//!           [flags & 2: n u16 | n x f64 scores]
//! PING (3): version u16 | nonce u64   (echoed back by the server)
//! ```

use std::collections::BTreeSet;
use std::io::{self, BufReader, BufWriter, Cursor, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{
    BatchModel, BatcherConfig, BatcherStats, Feedback, InferenceClient, InferenceRequest, InferenceResponse,
    InferenceService, SubmitOutcome,
};
use crate::env::Action2D;
use crate::replay::TransitionKey;

pub const WIRE_VERSION: u16 = 1;
pub const MAX_FRAME: usize = 1 << 20;

const REQ: u8 = 1;
const RESP: u8 = 2;
const PING: u8 = 3;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Request { env_id: u32, step_idx: u64, payload: Vec<u8> },
    Response(InferenceResponse),
    Ping { nonce: u64 },
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut body = Vec::with_capacity(64);
    match frame {
        Frame::Request { env_id, step_idx, payload } => {
            body.push(REQ);
            body.write_u16::<LittleEndian>(WIRE_VERSION).unwrap();
            body.write_u32::<LittleEndian>(*env_id).unwrap();
            body.write_u64::<LittleEndian>(*step_idx).unwrap();
            body.write_u32::<LittleEndian>(payload.len() as u32).unwrap();
            body.extend_from_slice(payload);
        }
        Frame::Response(r) => {
            body.push(RESP);
            body.write_u32::<LittleEndian>(r.key.env_id).unwrap();
            body.write_u64::<LittleEndian>(r.key.step_idx).unwrap();
            body.push(r.mask() as u8);
            body.write_f64::<LittleEndian>(r.service_time).unwrap();
            let fb = r.feedback.as_ref();
            let action = fb.and_then(|f| f.action);
            let scores = fb.and_then(|f| f.scores.as_ref());
            body.push(action.is_some() as u8 | (scores.is_some() as u8) << 1);
            if let Some(a) = action {
                body.write_f64::<LittleEndian>(a.longitudinal).unwrap();
                body.write_f64::<LittleEndian>(a.steer).unwrap();
            }
            if let Some(s) = scores {
                body.write_u16::<LittleEndian>(s.len() as u16).unwrap();
                for v in s {
                    body.write_f64::<LittleEndian>(*v).unwrap();
                }
            }
        }
        Frame::Ping { nonce } => {
            body.push(PING);
            body.write_u16::<LittleEndian>(WIRE_VERSION).unwrap();
            body.write_u64::<LittleEndian>(*nonce).unwrap();
        }
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.write_u32::<LittleEndian>(body.len() as u32).unwrap();
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame body (without the length prefix).
pub fn decode(body: &[u8]) -> Result<Frame, WireError> {
    let mut c = Cursor::new(body);
    let short = |_| WireError::Malformed("truncated");
    let ty = c.read_u8().map_err(short)?;
    let frame = match ty {
        REQ => {
            let v = c.read_u16::<LittleEndian>().map_err(short)?;
            if v != WIRE_VERSION {
                return Err(WireError::Version(v));
            }
            let env_id = c.read_u32::<LittleEndian>().map_err(short)?;
            let step_idx = c.read_u64::<LittleEndian>().map_err(short)?;
            let n = c.read_u32::<LittleEndian>().map_err(short)? as usize;
            let start = c.position() as usize;
            let payload = body.get(start..start + n).ok_or(WireError::Malformed("payload length"))?.to_vec();
            c.set_position((start + n) as u64);
            Frame::Request { env_id, step_idx, payload }
        }
        RESP => {
            let env_id = c.read_u32::<LittleEndian>().map_err(short)?;
            let step_idx = c.read_u64::<LittleEndian>().map_err(short)?;
            let mask = c.read_u8().map_err(short)? != 0;
            let service_time = c.read_f64::<LittleEndian>().map_err(short)?;
            let flags = c.read_u8().map_err(short)?;
            let action = if flags & 1 != 0 {
                Some(Action2D::new(
                    c.read_f64::<LittleEndian>().map_err(short)?,
                    c.read_f64::<LittleEndian>().map_err(short)?,
                ))
            } else {
                None
            };
            let scores = if flags & 2 != 0 {
                let n = c.read_u16::<LittleEndian>().map_err(short)? as usize;
                let mut s = Vec::with_capacity(n);
                for _ in 0..n {
                    s.push(c.read_f64::<LittleEndian>().map_err(short)?);
                }
                Some(s)
            } else {
                None
            };
            if mask != (action.is_some() || scores.is_some()) {
                return Err(WireError::Malformed("mask disagrees with feedback"));
            }
            let feedback = mask.then_some(Feedback { action, scores });
            Frame::Response(InferenceResponse { key: TransitionKey::new(env_id, step_idx), feedback, service_time })
        }
        PING => {
            let v = c.read_u16::<LittleEndian>().map_err(short)?;
            if v != WIRE_VERSION {
                return Err(WireError::Version(v));
            }
            Frame::Ping { nonce: c.read_u64::<LittleEndian>().map_err(short)? }
        }
        other => return Err(WireError::UnknownType(other)),
    };
    if c.position() as usize != body.len() {
        return Err(WireError::Malformed("trailing bytes"));
    }
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&encode(frame))
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, WireError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode(&body)
}

/// Serves the batching protocol on `listener` until `stop` is raised.
pub fn serve(
    listener: TcpListener,
    cfg: BatcherConfig,
    model: Arc<dyn BatchModel>,
    stop: Arc<AtomicBool>,
) -> Result<BatcherStats, WireError> {
    let service = Arc::new(
        InferenceService::start(cfg, model).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?,
    );
    listener.set_nonblocking(true)?;
    let mut handles = Vec::new();
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client connected from {peer}");
                stream.set_nonblocking(false)?;
                let svc = Arc::clone(&service);
                let stop = Arc::clone(&stop);
                handles.push(std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, svc, stop) {
                        log::warn!("connection closed: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e.into()),
        }
    }
    for h in handles {
        let _ = h.join();
    }
    let stats = service.stop();
    Ok(stats)
}

fn handle_connection(stream: TcpStream, svc: Arc<InferenceService>, stop: Arc<AtomicBool>) -> Result<(), WireError> {
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let envs: Arc<Mutex<BTreeSet<u32>>> = Arc::default();
    let closed = Arc::new(AtomicBool::new(false));

    let pump = {
        let (writer, envs, closed, svc, stop) =
            (Arc::clone(&writer), Arc::clone(&envs), Arc::clone(&closed), Arc::clone(&svc), Arc::clone(&stop));
        std::thread::spawn(move || -> io::Result<()> {
            while !closed.load(Ordering::Acquire) && !stop.load(Ordering::Acquire) {
                let ids: Vec<u32> = envs.lock().unwrap().iter().copied().collect();
                let mut out = Vec::new();
                for id in ids {
                    out.extend(svc.poll(id));
                }
                if out.is_empty() {
                    std::thread::sleep(Duration::from_micros(500));
                    continue;
                }
                let mut w = writer.lock().unwrap();
                for r in out {
                    write_frame(&mut *w, &Frame::Response(r))?;
                }
                w.flush()?;
            }
            Ok(())
        })
    };

    let mut reader = BufReader::new(stream);
    let result = loop {
        if stop.load(Ordering::Acquire) {
            break Ok(());
        }
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => break Ok(()),
            Err(e) => break Err(e),
        };
        match frame {
            Frame::Request { env_id, step_idx, payload } => {
                envs.lock().unwrap().insert(env_id);
                let outcome = svc.submit(InferenceRequest::new(env_id, step_idx, payload));
                if outcome == SubmitOutcome::Rejected {
                    let r = InferenceResponse { key: TransitionKey::new(env_id, step_idx), feedback: None, service_time: 0.0 };
                    let mut w = writer.lock().unwrap();
                    write_frame(&mut *w, &Frame::Response(r))?;
                    w.flush()?;
                }
            }
            Frame::Ping { nonce } => {
                let mut w = writer.lock().unwrap();
                write_frame(&mut *w, &Frame::Ping { nonce })?;
                w.flush()?;
            }
            Frame::Response(_) => break Err(WireError::Malformed("client sent a response")),
        }
    };
    // Let in-flight responses drain before closing.
    let deadline = Instant::now() + Duration::from_millis(200);
    while Instant::now() < deadline && svc.depth() > 0 {
        std::thread::sleep(Duration::from_millis(2));
    }
    closed.store(true, Ordering::Release);
    let _ = pump.join();
    result
}

/// Client side of the socket transport.
pub struct SocketClient {
    writer: BufWriter<TcpStream>,
    inbox: Arc<Mutex<Vec<InferenceResponse>>>,
    pongs: Arc<Mutex<Vec<u64>>>,
    start: Instant,
    stats: BatcherStats,
    reader: Option<std::thread::JoinHandle<()>>,
}

impl SocketClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let inbox: Arc<Mutex<Vec<InferenceResponse>>> = Arc::default();
        let pongs: Arc<Mutex<Vec<u64>>> = Arc::default();
        let mut rs = BufReader::new(stream.try_clone()?);
        let (ib, pg) = (Arc::clone(&inbox), Arc::clone(&pongs));
        let reader = std::thread::spawn(move || loop {
            match read_frame(&mut rs) {
                Ok(Frame::Response(r)) => ib.lock().unwrap().push(r),
                Ok(Frame::Ping { nonce }) => pg.lock().unwrap().push(nonce),
                Ok(Frame::Request { .. }) | Err(_) => break,
            }
        });
        Ok(Self {
            writer: BufWriter::new(stream),
            inbox,
            pongs,
            start: Instant::now(),
            stats: BatcherStats::default(),
            reader: Some(reader),
        })
    }

    /// Round-trip check; returns the elapsed time.
    pub fn ping(&mut self, nonce: u64, timeout: Duration) -> io::Result<Duration> {
        let t0 = Instant::now();
        write_frame(&mut self.writer, &Frame::Ping { nonce })?;
        self.writer.flush()?;
        while t0.elapsed() < timeout {
            let mut p = self.pongs.lock().unwrap();
            if let Some(i) = p.iter().position(|n| *n == nonce) {
                p.remove(i);
                return Ok(t0.elapsed());
            }
            drop(p);
            std::thread::sleep(Duration::from_micros(200));
        }
        Err(io::Error::new(io::ErrorKind::TimedOut, "no pong"))
    }
}

impl InferenceClient for SocketClient {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn submit(&mut self, req: InferenceRequest) -> SubmitOutcome {
        self.stats.submitted += 1;
        let frame = Frame::Request { env_id: req.key.env_id, step_idx: req.key.step_idx, payload: req.payload.to_vec() };
        match write_frame(&mut self.writer, &frame).and_then(|_| self.writer.flush()) {
            Ok(()) => {
                self.stats.accepted += 1;
                SubmitOutcome::Accepted
            }
            Err(_) => {
                self.stats.rejected += 1;
                self.stats.dropped_policy += 1;
                SubmitOutcome::Rejected
            }
        }
    }

    fn poll_all(&mut self) -> Vec<InferenceResponse> {
        let out: Vec<_> = std::mem::take(&mut *self.inbox.lock().unwrap());
        for r in &out {
            self.stats.delivered += 1;
            if r.mask() {
                self.stats.delivered_with_feedback += 1;
            }
        }
        out
    }

    fn stats(&self) -> BatcherStats {
        self.stats.clone()
    }

    fn shutdown(&mut self) -> BatcherStats {
        let _ = self.writer.flush();
        let _ = self.writer.get_ref().shutdown(std::net::Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
        self.stats.clone()
    }
}

impl Drop for SocketClient {
    fn drop(&mut self) {
        self.shutdown();
    }
}
