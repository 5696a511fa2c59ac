//! Wire format and client/server roles for delegated and multi-party training.
//!
//! A global state travels as a self-contained QGS1 frame (little-endian):
//!
//! ```text
//! "QGS1" | version u16 | n_qubits u8 | reserved u8 | label u8 | pad [u8; 3]
//! | batch_size u32 | weight f64 | dim² × (re f64, im f64), row-major | crc32 u32
//! ```
//!
//! Basis index bits are q0..q(n-1) with q0 most significant. Over TCP every
//! message is a big-endian u32 length followed by a one-byte message type and
//! its body. No message type carries an individual record: clients can only
//! send HELLO, GLOBAL_STATE, TRAIN_REQUEST and DONE.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ansatz::AnsatzParams;
use crate::batching::GlobalState;
use crate::classifier::{train, GlobalObjective, TrainConfig};
use crate::qcore::{CMatrix, DensityMatrix, Tolerances, C64};

pub const QGS_MAGIC: &[u8; 4] = b"QGS1";
pub const QGS_VERSION: u16 = 1;
pub const PROTOCOL_VERSION: u16 = 1;
const QGS_HEADER_LEN: usize = 24;
const MAX_FRAME_QUBITS: u8 = 12;
const MAX_MESSAGE_LEN: u32 = 1 << 30;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: frame says {expected:#010x}, contents hash to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("state invariant violated: {0}")]
    StateInvariantViolation(String),
    #[error("truncated frame: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("protocol version mismatch: local {local}, peer {peer}")]
    VersionMismatch { local: u16, peer: u16 },
    #[error("peer reported an error: {0}")]
    Remote(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("could not reach {addr} after {attempts} attempts: {source}")]
    Unreachable {
        addr: String,
        attempts: usize,
        source: std::io::Error,
    },
    #[error("timed out waiting for clients: {got} of {expected} completed")]
    ClientTimeout { got: usize, expected: usize },
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error("training failed: {0}")]
    Training(#[from] crate::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ProtocolError {
    /// True for failures of the network itself rather than of content or configuration.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            ProtocolError::Transport(_) | ProtocolError::Unreachable { .. } | ProtocolError::ClientTimeout { .. }
        )
    }
}

pub type ProtoResult<T> = std::result::Result<T, ProtocolError>;

/// Appends complex entries as (re, im) little-endian f64 pairs.
pub fn encode_complex_entries<'a, I: IntoIterator<Item = &'a C64>>(buf: &mut Vec<u8>, entries: I) {
    for c in entries {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
}

/// Reads `count` complex entries; returns them with the unread remainder.
pub fn decode_complex_entries(bytes: &[u8], count: usize) -> Option<(Vec<C64>, &[u8])> {
    let need = count.checked_mul(16)?;
    if bytes.len() < need {
        return None;
    }
    let (head, tail) = bytes.split_at(need);
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    let entries = head.chunks_exact(16).map(|c| C64::new(f(&c[..8]), f(&c[8..]))).collect();
    Some((entries, tail))
}

pub fn frame_len(n_qubits: usize) -> usize {
    let dim = 1usize << n_qubits;
    QGS_HEADER_LEN + 16 * dim * dim + 4
}

pub fn serialize_global_state(g: &GlobalState) -> Vec<u8> {
    let n = g.state.n_qubits();
    let mut buf = Vec::with_capacity(frame_len(n));
    buf.extend_from_slice(QGS_MAGIC);
    buf.extend_from_slice(&QGS_VERSION.to_le_bytes());
    buf.push(n as u8);
    buf.push(0);
    buf.push(g.label);
    buf.extend_from_slice(&[0; 3]);
    buf.extend_from_slice(&(g.size as u32).to_le_bytes());
    buf.extend_from_slice(&g.weight.to_le_bytes());
    encode_complex_entries(&mut buf, g.state.matrix().transpose().iter());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn deserialize_global_state(bytes: &[u8]) -> ProtoResult<GlobalState> {
    let truncated = |needed| ProtocolError::Truncated { needed, got: bytes.len() };
    if bytes.len() < 4 {
        return Err(truncated(QGS_HEADER_LEN + 4));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != QGS_MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if bytes.len() < QGS_HEADER_LEN + 4 {
        return Err(truncated(QGS_HEADER_LEN + 4));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != QGS_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let n_qubits = bytes[6];
    if n_qubits == 0 || n_qubits > MAX_FRAME_QUBITS {
        return Err(ProtocolError::Malformed(format!("frame declares {n_qubits} qubits")));
    }
    let total = frame_len(n_qubits.into());
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(ProtocolError::Malformed(format!("{} trailing bytes", bytes.len() - total)));
    }
    let (body, crc) = bytes.split_at(total - 4);
    let expected = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if expected != actual {
        return Err(ProtocolError::ChecksumMismatch { expected, actual });
    }
    let invalid = |m: String| ProtocolError::StateInvariantViolation(m);
    let label = bytes[8];
    if label > 1 {
        return Err(invalid(format!("label {label}")));
    }
    let size = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let weight = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    if size == 0 || !(weight > 0.0 && weight.is_finite()) {
        return Err(invalid(format!("batch size {size}, weight {weight}")));
    }
    let dim = 1usize << n_qubits;
    let (entries, _) = decode_complex_entries(&body[QGS_HEADER_LEN..], dim * dim).expect("length checked");
    let state = DensityMatrix::from_matrix_with(CMatrix::from_row_slice(dim, dim, &entries), Tolerances::TRANSPORT)
        .map_err(|e| invalid(e.to_string()))?;
    Ok(GlobalState {
        state,
        label,
        size,
        weight,
    })
}

pub fn write_qgs_file(path: &Path, g: &GlobalState) -> ProtoResult<()> {
    std::fs::write(path, serialize_global_state(g))?;
    Ok(())
}

pub fn read_qgs_file(path: &Path) -> ProtoResult<GlobalState> {
    deserialize_global_state(&std::fs::read(path)?)
}

/// What the server trains: the ansatz shape and the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub n_qubits: usize,
    pub config: TrainConfig,
}

impl TrainRequest {
    fn validate(&self) -> ProtoResult<()> {
        if self.config.observable.n_qubits() != self.n_qubits {
            return Err(ProtocolError::Config(format!(
                "observable acts on {} qubits, ansatz has {}",
                self.config.observable.n_qubits(),
                self.n_qubits
            )));
        }
        self.config.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub params: AnsatzParams,
    pub loss: f64,
    pub eval_count: u64,
}

/// Trains on an already ordered aggregate exactly as the server does.
pub fn train_on_globals(globals: &[GlobalState], request: &TrainRequest) -> ProtoResult<ModelResult> {
    request.validate()?;
    if let Some(g) = globals.iter().find(|g| g.state.n_qubits() != request.n_qubits) {
        return Err(ProtocolError::Config(format!(
            "global state on {} qubits, request expects {}",
            g.state.n_qubits(),
            request.n_qubits
        )));
    }
    let init = request.config.initial_params();
    let mut objective = GlobalObjective::new(globals, init.clone(), request.config.loss, request.config.observable);
    let model = train(&mut objective, &init, &request.config)?;
    Ok(ModelResult {
        params: model.params,
        loss: model.loss,
        eval_count: model.eval_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    GlobalStateMsg = 2,
    Done = 3,
    TrainRequestMsg = 4,
    ModelResultMsg = 5,
    Error = 6,
}

impl MessageType {
    fn from_byte(b: u8) -> ProtoResult<Self> {
        Ok(match b {
            1 => MessageType::Hello,
            2 => MessageType::GlobalStateMsg,
            3 => MessageType::Done,
            4 => MessageType::TrainRequestMsg,
            5 => MessageType::ModelResultMsg,
            6 => MessageType::Error,
            other => return Err(ProtocolError::Malformed(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u16, client_id: u32 },
    GlobalState { batch_index: u32, frame: Vec<u8> },
    Done { n_states: u32 },
    TrainRequest(TrainRequest),
    ModelResult(ModelResult),
    Error(String),
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::GlobalState { .. } => MessageType::GlobalStateMsg,
            Message::Done { .. } => MessageType::Done,
            Message::TrainRequest(_) => MessageType::TrainRequestMsg,
            Message::ModelResult(_) => MessageType::ModelResultMsg,
            Message::Error(_) => MessageType::Error,
        }
    }

    pub fn encode(&self) -> ProtoResult<Vec<u8>> {
        let mut body = vec![self.kind() as u8];
        match self {
            Message::Hello { version, client_id } => {
                body.extend_from_slice(&version.to_le_bytes());
                body.extend_from_slice(&client_id.to_le_bytes());
            }
            Message::GlobalState { batch_index, frame } => {
                body.extend_from_slice(&batch_index.to_le_bytes());
                body.extend_from_slice(frame);
            }
            Message::Done { n_states } => body.extend_from_slice(&n_states.to_le_bytes()),
            Message::TrainRequest(r) => body.extend(serde_json::to_vec(r)?),
            Message::ModelResult(r) => body.extend(serde_json::to_vec(r)?),
            Message::Error(m) => body.extend_from_slice(m.as_bytes()),
        }
        let mut out = (body.len() as u32).to_be_bytes().to_vec();
        out.extend(body);
        Ok(out)
    }

    /// Decodes one message body (type byte onwards).
    pub fn decode(body: &[u8]) -> ProtoResult<Self> {
        let (&t, rest) = body.split_first().ok_or_else(|| ProtocolError::Malformed("empty message".into()))?;
        let fixed = |n: usize| -> ProtoResult<&[u8]> {
            if rest.len() == n {
                Ok(rest)
            } else {
                Err(ProtocolError::Malformed(format!("expected {n} body bytes, got {}", rest.len())))
            }
        };
        Ok(match MessageType::from_byte(t)? {
            MessageType::Hello => {
                let b = fixed(6)?;
                Message::Hello {
                    version: u16::from_le_bytes([b[0], b[1]]),
                    client_id: u32::from_le_bytes(b[2..6].try_into().expect("4 bytes")),
                }
            }
            MessageType::GlobalStateMsg => {
                if rest.len() < 4 {
                    return Err(ProtocolError::Truncated {
                        needed: 4,
                        got: rest.len(),
                    });
                }
                Message::GlobalState {
                    batch_index: u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")),
                    frame: rest[4..].to_vec(),
                }
            }
            MessageType::Done => Message::Done {
                n_states: u32::from_le_bytes(fixed(4)?.try_into().expect("4 bytes")),
            },
            MessageType::TrainRequestMsg => Message::TrainRequest(serde_json::from_slice(rest)?),
            MessageType::ModelResultMsg => Message::ModelResult(serde_json::from_slice(rest)?),
            MessageType::Error => Message::Error(String::from_utf8_lossy(rest).into_owned()),
        })
    }
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> ProtoResult<()> {
    w.write_all(&m.encode()?)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(r: &mut R) -> ProtoResult<Message> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len == 0 || len > MAX_MESSAGE_LEN {
        return Err(ProtocolError::Malformed(format!("message length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Message::decode(&body)
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: u32,
    pub server: String,
    pub retries: usize,
    pub backoff: Duration,
    /// how long to wait for the model once all states are sent
    pub result_timeout: Duration,
    pub request: Option<TrainRequest>,
}

impl ClientConfig {
    pub fn new(client_id: u32, server: impl Into<String>) -> Self {
        ClientConfig {
            client_id,
            server: server.into(),
            retries: 3,
            backoff: Duration::from_millis(100),
            result_timeout: Duration::from_secs(3600),
            request: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTranscript {
    pub client_id: u32,
    pub sent: Vec<String>,
    pub global_states_sent: usize,
    pub bytes_sent: usize,
    pub result: Option<ModelResult>,
    pub files: Vec<PathBuf>,
}

fn connect_with_retries(cfg: &ClientConfig) -> ProtoResult<TcpStream> {
    let mut delay = cfg.backoff;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let err = match cfg.server.to_socket_addrs() {
            Ok(addrs) => {
                let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "no address resolved");
                let mut stream = None;
                for a in addrs {
                    match TcpStream::connect_timeout(&a, Duration::from_secs(5)) {
                        Ok(s) => {
                            stream = Some(s);
                            break;
                        }
                        Err(e) => last = e,
                    }
                }
                match stream {
                    Some(s) => return Ok(s),
                    None => last,
                }
            }
            Err(e) => e,
        };
        if attempt > cfg.retries {
            return Err(ProtocolError::Unreachable {
                addr: cfg.server.clone(),
                attempts: attempt,
                source: err,
            });
        }
        log::info!("connect to {} failed ({err}), retrying in {delay:?}", cfg.server);
        thread::sleep(delay);
        delay *= 2;
    }
}

/// Ships global states to the server in a single round and waits for the model.
pub fn client_send(cfg: &ClientConfig, globals: &[GlobalState]) -> ProtoResult<ClientTranscript> {
    let mut stream = connect_with_retries(cfg)?;
    stream.set_read_timeout(Some(cfg.result_timeout))?;
    let mut transcript = ClientTranscript {
        client_id: cfg.client_id,
        sent: Vec::new(),
        global_states_sent: 0,
        bytes_sent: 0,
        result: None,
        files: Vec::new(),
    };
    let send = |stream: &mut TcpStream, m: Message, t: &mut ClientTranscript| -> ProtoResult<()> {
        let bytes = m.encode()?;
        stream.write_all(&bytes)?;
        t.bytes_sent += bytes.len();
        t.sent.push(format!("{:?}", m.kind()));
        Ok(())
    };
    send(
        &mut stream,
        Message::Hello {
            version: PROTOCOL_VERSION,
            client_id: cfg.client_id,
        },
        &mut transcript,
    )?;
    match read_message(&mut stream)? {
        Message::Hello { version, .. } if version == PROTOCOL_VERSION => {}
        Message::Hello { version, .. } => {
            return Err(ProtocolError::VersionMismatch {
                local: PROTOCOL_VERSION,
                peer: version,
            })
        }
        Message::Error(e) => return Err(ProtocolError::Remote(e)),
        other => return Err(ProtocolError::Malformed(format!("expected HELLO, got {:?}", other.kind()))),
    }
    if let Some(r) = &cfg.request {
        send(&mut stream, Message::TrainRequest(r.clone()), &mut transcript)?;
    }
    for (i, g) in globals.iter().enumerate() {
        send(
            &mut stream,
            Message::GlobalState {
                batch_index: i as u32,
                frame: serialize_global_state(g),
            },
            &mut transcript,
        )?;
        transcript.global_states_sent += 1;
    }
    send(
        &mut stream,
        Message::Done {
            n_states: globals.len() as u32,
        },
        &mut transcript,
    )?;
    stream.flush()?;
    match read_message(&mut stream)? {
        Message::ModelResult(r) => transcript.result = Some(r),
        Message::Error(e) => return Err(ProtocolError::Remote(e)),
        other => return Err(ProtocolError::Malformed(format!("expected MODEL_RESULT, got {:?}", other.kind()))),
    }
    Ok(transcript)
}

/// Offline mode: one `.qgs` frame file per global state.
pub fn client_write_offline(client_id: u32, dir: &Path, globals: &[GlobalState]) -> ProtoResult<ClientTranscript> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(globals.len());
    let mut bytes = 0;
    for (i, g) in globals.iter().enumerate() {
        let path = dir.join(format!("client{client_id}_batch{i:04}.qgs"));
        let frame = serialize_global_state(g);
        bytes += frame.len();
        std::fs::write(&path, frame)?;
        files.push(path);
    }
    Ok(ClientTranscript {
        client_id,
        sent: vec!["GlobalState".into(); globals.len()],
        global_states_sent: globals.len(),
        bytes_sent: bytes,
        result: None,
        files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutPolicy {
    Abort,
    Proceed,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub expected_clients: usize,
    pub request: Option<TrainRequest>,
    pub client_timeout: Duration,
    pub on_timeout: TimeoutPolicy,
}

impl ServerConfig {
    pub fn new(expected_clients: usize, request: Option<TrainRequest>) -> Self {
        ServerConfig {
            expected_clients,
            request,
            client_timeout: Duration::from_secs(600),
            on_timeout: TimeoutPolicy::Abort,
        }
    }

    pub fn validate(&self) -> ProtoResult<()> {
        if self.expected_clients == 0 {
            return Err(ProtocolError::Config("expected client count must be positive".into()));
        }
        if let Some(r) = &self.request {
            r.validate()?;
        }
        Ok(())
    }
}

struct Session {
    client_id: u32,
    request: Option<TrainRequest>,
    states: Vec<(u32, GlobalState)>,
    stream: TcpStream,
}

fn reject(mut stream: TcpStream, e: &ProtocolError) {
    let _ = write_message(&mut stream, &Message::Error(e.to_string()));
}

fn read_session(mut stream: TcpStream, timeout: Duration) -> ProtoResult<Session> {
    stream.set_read_timeout(Some(timeout))?;
    let client_id = match read_message(&mut stream)? {
        Message::Hello { version, client_id } => {
            if version != PROTOCOL_VERSION {
                let e = ProtocolError::VersionMismatch {
                    local: PROTOCOL_VERSION,
                    peer: version,
                };
                reject(stream, &e);
                return Err(e);
            }
            client_id
        }
        other => return Err(ProtocolError::Malformed(format!("expected HELLO, got {:?}", other.kind()))),
    };
    write_message(
        &mut stream,
        &Message::Hello {
            version: PROTOCOL_VERSION,
            client_id,
        },
    )?;
    let mut request = None;
    let mut states = Vec::new();
    loop {
        let outcome = match read_message(&mut stream)? {
            Message::TrainRequest(r) => {
                request = Some(r);
                Ok(())
            }
            Message::GlobalState { batch_index, frame } => deserialize_global_state(&frame).map(|g| states.push((batch_index, g))),
            Message::Done { n_states } if n_states as usize == states.len() => break,
            Message::Done { n_states } => Err(ProtocolError::Malformed(format!(
                "DONE announces {n_states} states, received {}",
                states.len()
            ))),
            other => Err(ProtocolError::Malformed(format!("unexpected {:?} from client", other.kind()))),
        };
        if let Err(e) = outcome {
            reject(stream, &e);
            return Err(e);
        }
    }
    Ok(Session {
        client_id,
        request,
        states,
        stream,
    })
}

/// Binds `addr` and serves one training round.
pub fn server_run(addr: &str, cfg: &ServerConfig) -> ProtoResult<ModelResult> {
    cfg.validate()?;
    let listener = TcpListener::bind(addr)?;
    serve(listener, cfg)
}

/// Collects sessions from `expected_clients` clients, trains once and returns the model to each.
pub fn serve(listener: TcpListener, cfg: &ServerConfig) -> ProtoResult<ModelResult> {
    cfg.validate()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<ProtoResult<Session>>();
    let acceptor = {
        let stop = Arc::clone(&stop);
        let timeout = cfg.client_timeout;
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::info!("connection from {peer}");
                        let tx = tx.clone();
                        thread::spawn(move || {
                            let session = stream
                                .set_nonblocking(false)
                                .map_err(ProtocolError::from)
                                .and_then(|_| read_session(stream, timeout));
                            let _ = tx.send(session);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(5));
                    }
                }
            }
        })
    };

    let mut sessions: BTreeMap<u32, Session> = BTreeMap::new();
    let result = loop {
        if sessions.len() == cfg.expected_clients {
            break Ok(());
        }
        match rx.recv_timeout(cfg.client_timeout) {
            Ok(Ok(s)) => {
                if let std::collections::btree_map::Entry::Vacant(e) = sessions.entry(s.client_id) {
                    log::info!("client {} delivered {} global states", s.client_id, s.states.len());
                    e.insert(s);
                } else {
                    let e = ProtocolError::Malformed(format!("duplicate client id {}", s.client_id));
                    log::warn!("{e}");
                    reject(s.stream, &e);
                }
            }
            Ok(Err(e)) => log::warn!("rejected client session: {e}"),
            Err(_) => {
                let got = sessions.len();
                if cfg.on_timeout == TimeoutPolicy::Proceed && got > 0 {
                    log::warn!("proceeding with {got} of {} clients", cfg.expected_clients);
                    break Ok(());
                }
                break Err(ProtocolError::ClientTimeout {
                    got,
                    expected: cfg.expected_clients,
                });
            }
        }
    };
    stop.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    if let Err(e) = result {
        for s in sessions.into_values() {
            reject(s.stream, &e);
        }
        return Err(e);
    }

    let request = match &cfg.request {
        Some(r) => Ok(r.clone()),
        None => sessions
            .values()
            .find_map(|s| s.request.clone())
            .ok_or_else(|| ProtocolError::Config("no training request configured or received".into())),
    };
    let trained = request.and_then(|request| {
        let globals = aggregate(sessions.values_mut().map(|s| (s.client_id, std::mem::take(&mut s.states))));
        train_on_globals(&globals, &request)
    });
    match trained {
        Ok(model) => {
            for mut s in sessions.into_values() {
                if let Err(e) = write_message(&mut s.stream, &Message::ModelResult(model.clone())) {
                    log::warn!("could not deliver result to client {}: {e}", s.client_id);
                }
            }
            Ok(model)
        }
        Err(e) => {
            for s in sessions.into_values() {
                reject(s.stream, &e);
            }
            Err(e)
        }
    }
}

/// Orders contributions by (client id, batch index).
pub fn aggregate<I>(contributions: I) -> Vec<GlobalState>
where
    I: IntoIterator<Item = (u32, Vec<(u32, GlobalState)>)>,
{
    let mut all: Vec<((u32, u32), GlobalState)> = contributions
        .into_iter()
        .flat_map(|(c, states)| states.into_iter().map(move |(b, g)| ((c, b), g)))
        .collect();
    all.sort_by_key(|(k, _)| *k);
    all.into_iter().map(|(_, g)| g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::random_density_hs;
    use crate::rng_from_seed;

    fn sample(n: usize, seed: u64) -> GlobalState {
        GlobalState {
            state: random_density_hs(1 << n, &mut rng_from_seed(seed)).unwrap(),
            label: 1,
            size: 7,
            weight: 7.0,
        }
    }

    #[test]
    fn two_qubit_frame_length() {
        assert_eq!(serialize_global_state(&sample(2, 1)).len(), 284);
        assert_eq!(frame_len(2), 284);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = sample(3, 2);
        let bytes = serialize_global_state(&g);
        let back = deserialize_global_state(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize_global_state(&back), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = serialize_global_state(&sample(2, 3));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(deserialize_global_state(&b), Err(ProtocolError::BadMagic(_))));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(deserialize_global_state(&b), Err(ProtocolError::UnsupportedVersion(9))));
        let mut b = bytes.clone();
        b[100] ^= 0x40;
        assert!(matches!(deserialize_global_state(&b), Err(ProtocolError::ChecksumMismatch { .. })));
        assert!(matches!(
            deserialize_global_state(&bytes[..200]),
            Err(ProtocolError::Truncated { .. })
        ));
    }

    #[test]
    fn message_round_trip() {
        let msgs = vec![
            Message::Hello { version: 1, client_id: 42 },
            Message::GlobalState {
                batch_index: 3,
                frame: vec![1, 2, 3],
            },
            Message::Done { n_states: 5 },
            Message::Error("nope".into()),
        ];
        for m in msgs {
            let bytes = m.encode().unwrap();
            assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
            assert_eq!(read_message(&mut bytes.as_slice()).unwrap(), m);
        }
    }

    #[test]
    fn zero_clients_is_config_error() {
        let cfg = ServerConfig::new(0, None);
        assert!(matches!(server_run("127.0.0.1:0", &cfg), Err(ProtocolError::Config(_))));
    }
}
