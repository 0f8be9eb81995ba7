//! Serving ε-predictions of frozen models over TCP, and the matching
//! client that plugs a remote model into the samplers as a [`ScoreSource`].
//!
//! Every message is a frame: a big-endian `u32` body length, then the body.
//!
//! Request body:
//!
//! ```text
//! "VSRQ"  version:u32be  id_len:u8  id:[u8]  step:u32be  flags:u8  label:u32be
//! ndims:u8  dims:[u32be]
//! if flags & FIRST_FRAME: rows:u32be cols:u32be
//! if flags & EDGE:        rows:u32be cols:u32be
//! payload: f32le × (prod(dims) + aux sizes)   (sample, then first frame, then edges)
//! ```
//!
//! `dims[0]` is the batch size; the rest must multiply to the model's sample
//! dimension. Flags: `1` null condition, `2` label present, `4` first frame,
//! `8` edge video.
//!
//! Response body:
//!
//! ```text
//! "VSRS"  version:u32be  status:u8
//! status 0: count:u32be  f32le × count
//! else:     msg_len:u32be  msg:[u8] (UTF-8)
//! ```
//!
//! A malformed body gets a `bad-shape` reply and the connection stays open.
//! A length prefix above the frame limit gets a `bad-shape` reply and the
//! connection is closed, since the stream cannot be resynchronized.
//! There is no authentication or encryption; serve on trusted networks only.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ndarray::Array2;
use thiserror::Error;

use crate::adapter::ScoreSource;
use crate::denoiser::ConditionSpec;
use crate::diffusion::NoisySample;
use crate::error::{Error, Result};

pub const REQUEST_MAGIC: &[u8; 4] = b"VSRQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"VSRS";
pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 64 << 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const FLAG_NULL: u8 = 1;
const FLAG_LABEL: u8 = 2;
const FLAG_FIRST_FRAME: u8 = 4;
const FLAG_EDGE: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    UnknownModel = 1,
    BadShape = 2,
    BadStep = 3,
    Internal = 4,
}

impl Status {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Status::Ok,
            1 => Status::UnknownModel,
            2 => Status::BadShape,
            3 => Status::BadStep,
            4 => Status::Internal,
            _ => return None,
        })
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::UnknownModel => "unknown-model",
            Status::BadShape => "bad-shape",
            Status::BadStep => "bad-step",
            Status::Internal => "internal",
        })
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("server replied {status}: {message}")]
    Status { status: Status, message: String },
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::Malformed(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub model: String,
    pub step: u32,
    pub cond: ConditionSpec,
    /// Full tensor dims; `dims[0]` is the batch size.
    pub dims: Vec<u32>,
    pub x: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreResponse {
    Ok(Vec<f32>),
    Err { status: Status, message: String },
}

fn put_floats(out: &mut Vec<u8>, v: impl IntoIterator<Item = f32>) {
    for f in v {
        out.extend_from_slice(&f.to_le_bytes());
    }
}

pub fn encode_request(req: &ScoreRequest) -> std::result::Result<Vec<u8>, WireError> {
    let id = req.model.as_bytes();
    if id.len() > u8::MAX as usize {
        return Err(malformed("model id longer than 255 bytes"));
    }
    if req.dims.is_empty() || req.dims.len() > u8::MAX as usize {
        return Err(malformed("dims must have 1..=255 entries"));
    }
    let mut out = Vec::with_capacity(64 + req.x.len() * 4);
    out.extend_from_slice(REQUEST_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_be_bytes());
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.extend_from_slice(&req.step.to_be_bytes());
    let c = &req.cond;
    let mut flags = 0;
    if c.is_null {
        flags |= FLAG_NULL;
    }
    if c.label.is_some() {
        flags |= FLAG_LABEL;
    }
    if c.first_frame.is_some() {
        flags |= FLAG_FIRST_FRAME;
    }
    if c.edge_video.is_some() {
        flags |= FLAG_EDGE;
    }
    out.push(flags);
    out.extend_from_slice(&c.label.unwrap_or(0).to_be_bytes());
    out.push(req.dims.len() as u8);
    for d in &req.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    for aux in [&c.first_frame, &c.edge_video].into_iter().flatten() {
        out.extend_from_slice(&(aux.nrows() as u32).to_be_bytes());
        out.extend_from_slice(&(aux.ncols() as u32).to_be_bytes());
    }
    put_floats(&mut out, req.x.iter().copied());
    for aux in [&c.first_frame, &c.edge_video].into_iter().flatten() {
        put_floats(&mut out, aux.iter().copied());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f32>, WireError> {
        let bytes = n.checked_mul(4).ok_or_else(|| malformed("payload size overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> std::result::Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn checked_product(dims: impl IntoIterator<Item = u64>) -> std::result::Result<usize, WireError> {
    let mut p: u64 = 1;
    for d in dims {
        p = p.checked_mul(d).ok_or_else(|| malformed("tensor size overflows"))?;
    }
    usize::try_from(p).map_err(|_| malformed("tensor size overflows"))
}

fn expect_header(c: &mut Cursor, magic: &[u8; 4]) -> std::result::Result<(), WireError> {
    if c.take(4)? != magic {
        return Err(malformed("bad magic"));
    }
    let v = c.u32()?;
    if v != PROTOCOL_VERSION {
        return Err(malformed(format!("unsupported protocol version {v}")));
    }
    Ok(())
}

pub fn decode_request(body: &[u8]) -> std::result::Result<ScoreRequest, WireError> {
    let mut c = Cursor { buf: body, pos: 0 };
    expect_header(&mut c, REQUEST_MAGIC)?;
    let id_len = c.u8()? as usize;
    let model = std::str::from_utf8(c.take(id_len)?)
        .map_err(|_| malformed("model id is not UTF-8"))?
        .to_string();
    let step = c.u32()?;
    let flags = c.u8()?;
    if flags & !(FLAG_NULL | FLAG_LABEL | FLAG_FIRST_FRAME | FLAG_EDGE) != 0 {
        return Err(malformed(format!("unknown flags {flags:#x}")));
    }
    let label = c.u32()?;
    let ndims = c.u8()? as usize;
    if ndims == 0 {
        return Err(malformed("no dims"));
    }
    let dims: Vec<u32> = (0..ndims).map(|_| c.u32()).collect::<std::result::Result<_, _>>()?;
    let mut aux_dims = Vec::new();
    for flag in [FLAG_FIRST_FRAME, FLAG_EDGE] {
        if flags & flag != 0 {
            aux_dims.push((c.u32()? as usize, c.u32()? as usize));
        }
    }
    let n = checked_product(dims.iter().map(|&d| d as u64))?;
    let remaining = body.len() - c.pos;
    if n > remaining / 4 {
        return Err(malformed("payload shorter than dims"));
    }
    let x = c.floats(n)?;
    let mut aux = Vec::new();
    for (r, k) in aux_dims {
        let m = checked_product([r as u64, k as u64])?;
        let data = c.floats(m)?;
        aux.push(Array2::from_shape_vec((r, k), data).map_err(|e| malformed(e.to_string()))?);
    }
    c.done()?;
    let mut aux = aux.into_iter();
    let cond = ConditionSpec {
        label: (flags & FLAG_LABEL != 0).then_some(label),
        is_null: flags & FLAG_NULL != 0,
        first_frame: if flags & FLAG_FIRST_FRAME != 0 {
            aux.next()
        } else {
            None
        },
        edge_video: if flags & FLAG_EDGE != 0 { aux.next() } else { None },
    };
    Ok(ScoreRequest {
        model,
        step,
        cond,
        dims,
        x,
    })
}

pub fn encode_response(resp: &ScoreResponse) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RESPONSE_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_be_bytes());
    match resp {
        ScoreResponse::Ok(v) => {
            out.push(Status::Ok as u8);
            out.extend_from_slice(&(v.len() as u32).to_be_bytes());
            put_floats(&mut out, v.iter().copied());
        }
        ScoreResponse::Err { status, message } => {
            out.push(*status as u8);
            let m = message.as_bytes();
            out.extend_from_slice(&(m.len() as u32).to_be_bytes());
            out.extend_from_slice(m);
        }
    }
    out
}

pub fn decode_response(body: &[u8]) -> std::result::Result<ScoreResponse, WireError> {
    let mut c = Cursor { buf: body, pos: 0 };
    expect_header(&mut c, RESPONSE_MAGIC)?;
    let status = Status::from_u8(c.u8()?).ok_or_else(|| malformed("unknown status"))?;
    let resp = if status == Status::Ok {
        let n = c.u32()? as usize;
        ScoreResponse::Ok(c.floats(n)?)
    } else {
        let n = c.u32()? as usize;
        let message = String::from_utf8_lossy(c.take(n)?).into_owned();
        ScoreResponse::Err { status, message }
    };
    c.done()?;
    Ok(resp)
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Reads one frame body from a blocking stream.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> std::result::Result<Vec<u8>, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| {
        if is_timeout(&e) {
            WireError::Timeout
        } else {
            WireError::Transport(e)
        }
    })?;
    let n = u32::from_be_bytes(len) as usize;
    if n > max {
        return Err(WireError::FrameTooLarge(n));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body).map_err(|e| {
        if is_timeout(&e) {
            WireError::Timeout
        } else {
            WireError::Transport(e)
        }
    })?;
    Ok(body)
}

/// Models served by id. Parameters are never mutated after load.
pub type ModelMap = HashMap<String, Arc<dyn ScoreSource>>;

fn error_status(e: &Error) -> Status {
    match e {
        Error::StepOutOfRange { .. } => Status::BadStep,
        Error::ShapeMismatch { .. } | Error::InvalidArgument(_) => Status::BadShape,
        _ => Status::Internal,
    }
}

/// Evaluates one request body against the served models.
pub fn handle_request(models: &ModelMap, body: &[u8]) -> ScoreResponse {
    let req = match decode_request(body) {
        Ok(r) => r,
        Err(e) => {
            return ScoreResponse::Err {
                status: Status::BadShape,
                message: e.to_string(),
            }
        }
    };
    let Some(model) = models.get(&req.model) else {
        return ScoreResponse::Err {
            status: Status::UnknownModel,
            message: format!("no model '{}'", req.model),
        };
    };
    let rows = req.dims[0] as usize;
    let per_row: usize = req.dims[1..].iter().map(|&d| d as usize).product();
    if per_row != model.dim() || rows == 0 {
        return ScoreResponse::Err {
            status: Status::BadShape,
            message: format!("dims {:?} do not fit model dimension {}", req.dims, model.dim()),
        };
    }
    let x = Array2::from_shape_vec((rows, per_row), req.x).unwrap();
    let sample = NoisySample::new(x, req.step as usize);
    let out = catch_unwind(AssertUnwindSafe(|| model.predict_eps(&sample, &req.cond)));
    match out {
        Ok(Ok(eps)) => ScoreResponse::Ok(eps.iter().copied().collect()),
        Ok(Err(e)) => ScoreResponse::Err {
            status: error_status(&e),
            message: e.to_string(),
        },
        Err(_) => ScoreResponse::Err {
            status: Status::Internal,
            message: "model evaluation panicked".into(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub max_frame: usize,
    /// How often blocked reads wake up to check for shutdown.
    pub poll: Duration,
    /// How long a half-received frame may stall once shutdown is requested.
    pub drain_grace: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_frame: MAX_FRAME,
            poll: Duration::from_millis(20),
            drain_grace: Duration::from_secs(2),
        }
    }
}

/// A running server. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets in-flight requests finish, and joins every
    /// connection thread.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the server stops (for foreground serving).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Flag that stops the server when set; for signal handlers.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

pub fn serve(
    models: ModelMap,
    addr: impl ToSocketAddrs,
    cfg: ServerConfig,
) -> std::result::Result<ServerHandle, WireError> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let models = Arc::new(models);
    let flag = stop.clone();
    let accept = thread::spawn(move || {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let (m, f) = (models.clone(), flag.clone());
                    workers.push(thread::spawn(move || {
                        let _ = serve_connection(stream, &m, &f, cfg);
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if is_timeout(&e) => thread::sleep(cfg.poll),
                Err(_) => thread::sleep(cfg.poll),
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });
    Ok(ServerHandle {
        addr: local,
        stop,
        accept: Some(accept),
    })
}

enum ReadOutcome {
    Frame(Vec<u8>),
    TooLarge(usize),
    Closed,
}

/// Fills `buf`, waking every poll interval. Gives up if shutdown was
/// requested and either nothing of this frame has arrived yet or the frame
/// has stalled past the drain grace period.
fn fill(
    stream: &mut TcpStream,
    buf: &mut [u8],
    stop: &AtomicBool,
    frame_started: bool,
    cfg: &ServerConfig,
) -> io::Result<bool> {
    let mut got = 0;
    let mut stalled_since: Option<Instant> = None;
    while got < buf.len() {
        match stream.read(&mut buf[got..]) {
            Ok(0) => return Ok(false),
            Ok(n) => {
                got += n;
                stalled_since = None;
            }
            Err(e) if is_timeout(&e) || e.kind() == io::ErrorKind::Interrupted => {
                if stop.load(Ordering::SeqCst) {
                    if !frame_started && got == 0 {
                        return Ok(false);
                    }
                    let since = *stalled_since.get_or_insert_with(Instant::now);
                    if since.elapsed() > cfg.drain_grace {
                        return Ok(false);
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn next_frame(stream: &mut TcpStream, stop: &AtomicBool, cfg: &ServerConfig) -> io::Result<ReadOutcome> {
    let mut len = [0u8; 4];
    if !fill(stream, &mut len, stop, false, cfg)? {
        return Ok(ReadOutcome::Closed);
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > cfg.max_frame {
        return Ok(ReadOutcome::TooLarge(n));
    }
    let mut body = vec![0u8; n];
    if !fill(stream, &mut body, stop, true, cfg)? {
        return Ok(ReadOutcome::Closed);
    }
    Ok(ReadOutcome::Frame(body))
}

fn serve_connection(mut stream: TcpStream, models: &ModelMap, stop: &AtomicBool, cfg: ServerConfig) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(cfg.poll))?;
    stream.set_nodelay(true)?;
    loop {
        match next_frame(&mut stream, stop, &cfg)? {
            ReadOutcome::Closed => return Ok(()),
            ReadOutcome::TooLarge(n) => {
                let resp = ScoreResponse::Err {
                    status: Status::BadShape,
                    message: format!("frame of {n} bytes exceeds the {} byte limit", cfg.max_frame),
                };
                let _ = write_frame(&mut stream, &encode_response(&resp));
                return Ok(());
            }
            ReadOutcome::Frame(body) => {
                let resp = handle_request(models, &body);
                write_frame(&mut stream, &encode_response(&resp))?;
            }
        }
    }
}

/// A served model used as a local [`ScoreSource`]. Calls are synchronous;
/// the connection is reopened after any transport failure.
pub struct RemoteScoreSource {
    addr: SocketAddr,
    model: String,
    dim: usize,
    unconditional: bool,
    timeout: Duration,
    conn: Mutex<Option<TcpStream>>,
}

impl RemoteScoreSource {
    pub fn new(addr: SocketAddr, model: impl Into<String>, dim: usize) -> Self {
        Self {
            addr,
            model: model.into(),
            dim,
            unconditional: true,
            timeout: DEFAULT_TIMEOUT,
            conn: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_unconditional(mut self, available: bool) -> Self {
        self.unconditional = available;
        self
    }

    fn connect(&self) -> std::result::Result<TcpStream, WireError> {
        let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        s.set_read_timeout(Some(self.timeout))?;
        s.set_write_timeout(Some(self.timeout))?;
        s.set_nodelay(true)?;
        Ok(s)
    }

    /// Sends one request and waits for its response.
    pub fn call(&self, req: &ScoreRequest) -> std::result::Result<Vec<f32>, WireError> {
        let body = encode_request(req)?;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let stream = guard.as_mut().unwrap();
        let result = write_frame(stream, &body)
            .map_err(|e| {
                if is_timeout(&e) {
                    WireError::Timeout
                } else {
                    WireError::Transport(e)
                }
            })
            .and_then(|_| read_frame(stream, MAX_FRAME))
            .and_then(|b| decode_response(&b));
        match result {
            Ok(ScoreResponse::Ok(v)) => Ok(v),
            Ok(ScoreResponse::Err { status, message }) => Err(WireError::Status { status, message }),
            Err(e) => {
                *guard = None;
                Err(e)
            }
        }
    }
}

impl ScoreSource for RemoteScoreSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn has_unconditional(&self) -> bool {
        self.unconditional
    }

    fn predict_eps(&self, sample: &NoisySample, cond: &ConditionSpec) -> Result<Array2<f32>> {
        let (rows, cols) = sample.x.dim();
        let req = ScoreRequest {
            model: self.model.clone(),
            step: u32::try_from(sample.t).map_err(|_| Error::invalid("step does not fit in u32"))?,
            cond: cond.clone(),
            dims: vec![rows as u32, cols as u32],
            x: sample.x.iter().copied().collect(),
        };
        let v = self.call(&req)?;
        if v.len() != rows * cols {
            return Err(WireError::Malformed(format!("expected {} floats, got {}", rows * cols, v.len())).into());
        }
        Ok(Array2::from_shape_vec((rows, cols), v).unwrap())
    }
}
