//! Client/server session logic over the binary wire protocol.
//!
//! A connection starts with a HELLO exchange that pins the arithmetic mode.
//! The client then fetches the kernel matrix once (MODEL_REQUEST /
//! MODEL_REPLY, cached with a staleness hash) and runs any number of
//! inference sessions, each a single COMPUTE_REQUEST / COMPUTE_REPLY pair.
//! Anything out of order, malformed, or of the wrong mode is answered with
//! an ERROR frame and the connection is closed.
//!
//! Only three payloads ever cross the wire: the kernel matrix (server to
//! client), the blinded patch matrix, and the returned product. Keys, masks,
//! and the plaintext input stay on the client; the server neither logs nor
//! stores what it receives.

use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::cost::{self, OpCounts};
use crate::keymask::{
    blind, keygen, precompute_masks, recover, MaskSet, ParamError, SecurityParams,
};
use crate::server::{adversary_compute, ServerBehavior};
use crate::tensor::{
    im2col, reshape_output, ConvShape, InputTensor, KernelSet, Matrix, OutputTensor, Scalar,
    TensorError,
};
use crate::verify::{make_verification_tag, verify};
use crate::wire::{
    self, encode_matrix, fnv1a64, read_message, read_message_opt, write_message, MsgType,
    WireError, WireMessage,
};

/// ERROR frame codes.
pub mod error_code {
    /// Message arrived in the wrong phase or with a client-bound type.
    pub const OUT_OF_ORDER: u8 = 1;
    /// Frame or payload failed to parse.
    pub const MALFORMED: u8 = 2;
    /// Arithmetic mode disagreement between the peers.
    pub const MODE_MISMATCH: u8 = 4;
    /// Request dimensions do not match the served model.
    pub const SHAPE_MISMATCH: u8 = 5;
    /// The compute step itself failed (e.g. overflow).
    pub const COMPUTE_FAILED: u8 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("failed to connect to {endpoint}: {source}")]
    ConnectFailed {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("verification failed; server result discarded")]
    VerificationFailed(Box<SessionStats>),
    #[error("shape mismatch: client expects {client}, server provides {server}")]
    ShapeMismatch { client: ConvShape, server: ConvShape },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Params(#[from] ParamError),
}

impl From<WireError> for SessionError {
    fn from(e: WireError) -> Self {
        SessionError::Protocol(e.to_string())
    }
}

fn io_protocol(e: io::Error) -> SessionError {
    SessionError::Protocol(format!("i/o failure: {e}"))
}

/// Client-side session phases; transitions are strictly linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    ModelFetched,
    AwaitingReply,
    Done,
}

impl Phase {
    fn rank(self) -> u8 {
        match self {
            Phase::Idle => 0,
            Phase::ModelFetched => 1,
            Phase::AwaitingReply => 2,
            Phase::Done => 3,
        }
    }
}

#[derive(Debug)]
pub(crate) struct SessionState {
    phase: Phase,
}

impl SessionState {
    pub(crate) fn new() -> Self {
        SessionState { phase: Phase::Idle }
    }

    pub(crate) fn phase(&self) -> Phase {
        self.phase
    }

    pub(crate) fn advance(&mut self, next: Phase) -> Result<(), SessionError> {
        if next.rank() != self.phase.rank() + 1 {
            return Err(SessionError::Protocol(format!(
                "illegal session transition {:?} -> {:?}",
                self.phase, next
            )));
        }
        self.phase = next;
        Ok(())
    }
}

/// Per-session wall-clock and operation accounting, phase by phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStats {
    pub shape: ConvShape,
    /// `|I|`, the number of masks the session's key selected.
    pub index_len: usize,
    pub im2col_ms: f64,
    pub blind_ms: f64,
    pub roundtrip_ms: f64,
    pub verify_ms: f64,
    pub recover_ms: f64,
    pub reshape_ms: f64,
    pub total_ms: f64,
    pub blind_counts: OpCounts,
    pub verify_counts: OpCounts,
    pub recover_counts: OpCounts,
    pub verified: bool,
}

impl SessionStats {
    /// Wall-clock of the client's three protocol phases.
    pub fn client_phase_ms(&self) -> f64 {
        self.blind_ms + self.verify_ms + self.recover_ms
    }
}

// ---------------------------------------------------------------------------
// Payload codecs
// ---------------------------------------------------------------------------

fn encode_shape(shape: &ConvShape, out: &mut Vec<u8>) {
    for dim in [shape.m, shape.n, shape.k, shape.c_in, shape.c_out] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
}

fn decode_shape(bytes: &[u8]) -> Result<ConvShape, WireError> {
    if bytes.len() < 20 {
        return Err(WireError::Truncated);
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    ConvShape::new(dim(0), dim(1), dim(2), dim(3), dim(4))
        .map_err(|e| WireError::MalformedFrame(e.to_string()))
}

pub(crate) fn encode_model_reply<T: Scalar>(shape: &ConvShape, wbar: &Matrix<T>) -> Vec<u8> {
    let matrix_bytes = encode_matrix(wbar);
    let mut out = Vec::with_capacity(20 + 8 + matrix_bytes.len());
    encode_shape(shape, &mut out);
    out.extend_from_slice(&fnv1a64(&matrix_bytes).to_le_bytes());
    out.extend_from_slice(&matrix_bytes);
    out
}

pub(crate) fn decode_model_reply<T: Scalar>(
    bytes: &[u8],
) -> Result<(ConvShape, u64, Matrix<T>), WireError> {
    let shape = decode_shape(bytes)?;
    if bytes.len() < 28 {
        return Err(WireError::Truncated);
    }
    let hash = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let (wbar, consumed) = wire::decode_matrix::<T>(&bytes[28..])?;
    if 28 + consumed != bytes.len() {
        return Err(WireError::MalformedFrame("trailing bytes in model reply".into()));
    }
    if fnv1a64(&bytes[28..]) != hash {
        return Err(WireError::MalformedFrame("model hash mismatch".into()));
    }
    Ok((shape, hash, wbar))
}

fn encode_error(code: u8, msg: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + msg.len());
    out.push(code);
    out.extend_from_slice(msg.as_bytes());
    out
}

fn decode_error(bytes: &[u8]) -> (u8, String) {
    match bytes.split_first() {
        Some((&code, rest)) => (code, String::from_utf8_lossy(rest).into_owned()),
        None => (0, String::new()),
    }
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

/// Server runtime configuration; the model itself is passed separately.
#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub behavior: ServerBehavior,
    /// Sample-set width for tamper offsets.
    pub lambda1: u32,
    /// Base seed for per-session adversary randomness; OS entropy when unset.
    pub seed: Option<u64>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            behavior: ServerBehavior::Honest,
            lambda1: 16,
            seed: None,
        }
    }
}

/// Timing and operation counts of one served compute request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeRecord {
    pub ms: f64,
    pub counts: OpCounts,
}

struct ServerState<T> {
    shape: ConvShape,
    wbar: Matrix<T>,
    model_payload: Vec<u8>,
    config: ServerConfig,
    sessions: AtomicU64,
    records: Mutex<Vec<ComputeRecord>>,
}

/// A running server; shuts down when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
    records: Arc<dyn Fn() -> Vec<ComputeRecord> + Send + Sync>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Drains the compute records accumulated since the last call.
    pub fn take_compute_records(&self) -> Vec<ComputeRecord> {
        (self.records)()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop();
        }
    }
}

/// Binds `listen` and serves the model on a background thread.
pub fn spawn_server<T: Scalar>(
    listen: &str,
    kernels: KernelSet<T>,
    config: ServerConfig,
) -> io::Result<ServerHandle> {
    config
        .behavior
        .validate()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    let state = Arc::new(build_state(kernels, config));
    let shutdown = Arc::new(AtomicBool::new(false));

    let loop_state = state.clone();
    let loop_shutdown = shutdown.clone();
    let join = thread::spawn(move || accept_loop(listener, loop_state, loop_shutdown));

    log::info!("serving {} model on {addr}", state.shape);
    let records_state = state;
    Ok(ServerHandle {
        addr,
        shutdown,
        join: Some(join),
        records: Arc::new(move || {
            std::mem::take(&mut *records_state.records.lock().unwrap())
        }),
    })
}

/// Binds `listen` and serves on the calling thread until the process exits.
pub fn serve<T: Scalar>(
    listen: &str,
    kernels: KernelSet<T>,
    config: ServerConfig,
) -> io::Result<()> {
    config
        .behavior
        .validate()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    let state = Arc::new(build_state(kernels, config));
    log::info!("serving {} model on {addr}, behavior {}", state.shape, config.behavior);
    accept_loop(listener, state, Arc::new(AtomicBool::new(false)));
    Ok(())
}

fn build_state<T: Scalar>(kernels: KernelSet<T>, config: ServerConfig) -> ServerState<T> {
    let shape = *kernels.shape();
    let wbar = crate::tensor::flatten_kernels(&kernels);
    let model_payload = encode_model_reply(&shape, &wbar);
    ServerState {
        shape,
        wbar,
        model_payload,
        config,
        sessions: AtomicU64::new(0),
        records: Mutex::new(Vec::new()),
    }
}

fn accept_loop<T: Scalar>(
    listener: TcpListener,
    state: Arc<ServerState<T>>,
    shutdown: Arc<AtomicBool>,
) {
    for conn in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(stream) => {
                let state = state.clone();
                thread::spawn(move || handle_connection(stream, state));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ServerPhase {
    AwaitHello,
    Ready,
}

fn handle_connection<T: Scalar>(mut stream: TcpStream, state: Arc<ServerState<T>>) {
    let _ = stream.set_nodelay(true);
    let session_id = state.sessions.fetch_add(1, Ordering::Relaxed);
    let mut rng = match state.config.seed {
        Some(seed) => {
            ChaCha12Rng::seed_from_u64(seed ^ session_id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        }
        None => ChaCha12Rng::from_os_rng(),
    };
    let mut phase = ServerPhase::AwaitHello;

    let send_error = |stream: &mut TcpStream, code: u8, msg: &str| {
        log::debug!("connection {session_id}: error {code}: {msg}");
        let frame = WireMessage::new(MsgType::Error, encode_error(code, msg));
        let _ = write_message(stream, &frame);
    };

    loop {
        let msg = match read_message_opt(&mut stream) {
            Ok(None) => break,
            Ok(Some(msg)) => msg,
            Err(e) => {
                send_error(&mut stream, error_code::MALFORMED, &e.to_string());
                break;
            }
        };
        match (phase, msg.msg_type) {
            (ServerPhase::AwaitHello, MsgType::Hello) => {
                if msg.payload.len() != 1 {
                    send_error(&mut stream, error_code::MALFORMED, "hello payload must be one dtype byte");
                    break;
                }
                if msg.payload[0] != T::DTYPE {
                    send_error(&mut stream, error_code::MODE_MISMATCH, "arithmetic mode mismatch");
                    break;
                }
                let reply = WireMessage::new(MsgType::Hello, vec![T::DTYPE]);
                if write_message(&mut stream, &reply).is_err() {
                    break;
                }
                phase = ServerPhase::Ready;
            }
            (ServerPhase::Ready, MsgType::ModelRequest) => {
                if !msg.payload.is_empty() {
                    send_error(&mut stream, error_code::MALFORMED, "model request carries no payload");
                    break;
                }
                let reply = WireMessage::new(MsgType::ModelReply, state.model_payload.clone());
                if write_message(&mut stream, &reply).is_err() {
                    break;
                }
            }
            (ServerPhase::Ready, MsgType::ComputeRequest) => {
                let xbar_prime = match wire::decode_matrix::<T>(&msg.payload) {
                    Ok((m, consumed)) if consumed == msg.payload.len() => m,
                    Ok(_) => {
                        send_error(&mut stream, error_code::MALFORMED, "trailing bytes in compute request");
                        break;
                    }
                    Err(e) => {
                        send_error(&mut stream, error_code::MALFORMED, &e.to_string());
                        break;
                    }
                };
                // Log dimensions only; the payload itself is never recorded.
                log::debug!(
                    "connection {session_id}: compute request {}x{}",
                    xbar_prime.rows(),
                    xbar_prime.cols()
                );
                if xbar_prime.rows() != state.shape.patch_len()
                    || xbar_prime.cols() != state.shape.window_count()
                {
                    send_error(&mut stream, error_code::SHAPE_MISMATCH, "request does not match the served model shape");
                    break;
                }
                let start = Instant::now();
                let (result, counts) = cost::tally(|| {
                    adversary_compute(
                        &state.wbar,
                        &xbar_prime,
                        state.config.behavior,
                        state.config.lambda1,
                        &mut rng,
                    )
                });
                let ms = start.elapsed().as_secs_f64() * 1e3;
                let ybar_prime = match result {
                    Ok(m) => m,
                    Err(e) => {
                        send_error(&mut stream, error_code::COMPUTE_FAILED, &e.to_string());
                        break;
                    }
                };
                state.records.lock().unwrap().push(ComputeRecord { ms, counts });
                let reply = WireMessage::new(MsgType::ComputeReply, encode_matrix(&ybar_prime));
                if write_message(&mut stream, &reply).is_err() {
                    break;
                }
            }
            (ServerPhase::AwaitHello, _) => {
                send_error(&mut stream, error_code::OUT_OF_ORDER, "expected HELLO first");
                break;
            }
            (ServerPhase::Ready, MsgType::Hello) => {
                send_error(&mut stream, error_code::OUT_OF_ORDER, "duplicate HELLO");
                break;
            }
            (ServerPhase::Ready, other) => {
                send_error(
                    &mut stream,
                    error_code::OUT_OF_ORDER,
                    &format!("unexpected message type {:?}", other),
                );
                break;
            }
        }
    }
    let _ = stream.flush();
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// The kernel matrix as fetched from the server, with its staleness hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCache<T> {
    pub shape: ConvShape,
    pub hash: u64,
    pub wbar: Matrix<T>,
}

/// An inference client. Fetches the model once, builds the mask pool on
/// first use (unless one is supplied), and runs one protocol session per
/// [`Client::infer`] call with a fresh key each time.
pub struct Client<T: Scalar> {
    endpoint: String,
    params: SecurityParams,
    rng: ChaCha12Rng,
    conn: Option<TcpStream>,
    model: Option<ModelCache<T>>,
    masks: Option<MaskSet<T>>,
}

impl<T: Scalar> Client<T> {
    pub fn new(endpoint: impl Into<String>, params: SecurityParams) -> Result<Self, SessionError> {
        params.check_mode::<T>()?;
        Ok(Client {
            endpoint: endpoint.into(),
            params,
            rng: ChaCha12Rng::from_os_rng(),
            conn: None,
            model: None,
            masks: None,
        })
    }

    /// Like [`Client::new`] with deterministic key/mask randomness.
    pub fn with_seed(
        endpoint: impl Into<String>,
        params: SecurityParams,
        seed: u64,
    ) -> Result<Self, SessionError> {
        let mut client = Client::new(endpoint, params)?;
        client.rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(client)
    }

    /// Supplies a precomputed mask pool (for example one loaded from the
    /// on-disk cache). The pool must have been built against the kernel
    /// matrix this client will fetch; only shape and width are validated.
    pub fn with_masks(mut self, masks: MaskSet<T>) -> Result<Self, SessionError> {
        if masks.lambda1() != self.params.lambda1() {
            return Err(SessionError::Tensor(TensorError::InvalidShape(format!(
                "mask pool was built with lambda1 {}, client uses {}",
                masks.lambda1(),
                self.params.lambda1()
            ))));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn params(&self) -> &SecurityParams {
        &self.params
    }

    pub fn model(&self) -> Option<&ModelCache<T>> {
        self.model.as_ref()
    }

    pub fn masks(&self) -> Option<&MaskSet<T>> {
        self.masks.as_ref()
    }

    fn stream(&mut self) -> Result<&mut TcpStream, SessionError> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.endpoint).map_err(|source| {
                SessionError::ConnectFailed {
                    endpoint: self.endpoint.clone(),
                    source,
                }
            })?;
            stream.set_nodelay(true).map_err(io_protocol)?;
            let mut stream = stream;
            let hello = WireMessage::new(MsgType::Hello, vec![T::DTYPE]);
            write_message(&mut stream, &hello).map_err(io_protocol)?;
            let reply = Self::expect(&mut stream, MsgType::Hello)?;
            if reply.payload != [T::DTYPE] {
                return Err(SessionError::Protocol("server runs a different arithmetic mode".into()));
            }
            self.conn = Some(stream);
        }
        Ok(self.conn.as_mut().unwrap())
    }

    fn expect(stream: &mut TcpStream, wanted: MsgType) -> Result<WireMessage, SessionError> {
        let msg = read_message(stream)?;
        match msg.msg_type {
            t if t == wanted => Ok(msg),
            MsgType::Error => {
                let (code, text) = decode_error(&msg.payload);
                Err(SessionError::Protocol(format!("server error {code}: {text}")))
            }
            other => Err(SessionError::Protocol(format!(
                "expected {wanted:?}, got {other:?}"
            ))),
        }
    }

    fn request(
        &mut self,
        msg: &WireMessage,
        reply_type: MsgType,
    ) -> Result<WireMessage, SessionError> {
        let stream = self.stream()?;
        let result = write_message(stream, msg)
            .map_err(io_protocol)
            .and_then(|()| Self::expect(stream, reply_type));
        if result.is_err() {
            // The server closes the connection after an ERROR frame.
            self.conn = None;
        }
        result
    }

    fn ensure_model(&mut self) -> Result<(), SessionError> {
        if self.model.is_some() {
            return Ok(());
        }
        let reply = self.request(
            &WireMessage::new(MsgType::ModelRequest, Vec::new()),
            MsgType::ModelReply,
        )?;
        let (shape, hash, wbar) = decode_model_reply::<T>(&reply.payload)?;
        self.model = Some(ModelCache { shape, hash, wbar });
        Ok(())
    }

    /// Fetches the model if it is not cached yet and returns it.
    pub fn fetch_model(&mut self) -> Result<&ModelCache<T>, SessionError> {
        self.ensure_model()?;
        Ok(self.model.as_ref().unwrap())
    }

    /// Re-fetches the model and reports whether it changed. A changed model
    /// invalidates any cached mask pool.
    pub fn refresh_model(&mut self) -> Result<bool, SessionError> {
        let old_hash = self.model.as_ref().map(|m| m.hash);
        self.model = None;
        self.ensure_model()?;
        let changed = old_hash.is_some_and(|h| h != self.model.as_ref().unwrap().hash);
        if changed {
            self.masks = None;
        }
        Ok(changed)
    }

    /// Runs one full inference session: lower, key, blind, offload, verify,
    /// recover, reshape. On verification failure the result is discarded and
    /// the error carries the session stats.
    pub fn infer(
        &mut self,
        x: &InputTensor<T>,
    ) -> Result<(OutputTensor<T>, SessionStats), SessionError> {
        let session_start = Instant::now();
        let shape = *x.shape();
        let mut state = SessionState::new();

        self.ensure_model()?;
        let model_shape = self.model.as_ref().unwrap().shape;
        if model_shape != shape {
            return Err(SessionError::ShapeMismatch {
                client: shape,
                server: model_shape,
            });
        }
        state.advance(Phase::ModelFetched)?;

        if self.masks.is_none() {
            let wbar = &self.model.as_ref().unwrap().wbar;
            self.masks = Some(precompute_masks(wbar, &shape, &self.params, &mut self.rng)?);
        }
        let masks = self.masks.as_ref().unwrap();
        if masks.shape() != &shape {
            return Err(SessionError::Tensor(TensorError::DimMismatch {
                context: "client masks",
                detail: format!("pool built for {}, input is {}", masks.shape(), shape),
            }));
        }

        let lower_start = Instant::now();
        let xbar = im2col(x);
        let im2col_ms = ms_since(lower_start);

        let sk = keygen::<T, _>(&self.params, &shape, &mut self.rng);

        // Blind phase: mask the input and derive the verification tag.
        let masks = self.masks.as_ref().unwrap();
        let wbar = &self.model.as_ref().unwrap().wbar;
        let blind_start = Instant::now();
        let (blind_result, blind_counts) = cost::tally(|| {
            let blinded = blind(&xbar, &sk, masks)?;
            let tag = make_verification_tag(sk.r(), wbar)?;
            Ok::<_, TensorError>((blinded, tag))
        });
        let blind_ms = ms_since(blind_start);
        let (blinded, tag) = blind_result?;

        state.advance(Phase::AwaitingReply)?;
        let roundtrip_start = Instant::now();
        let request = WireMessage::new(MsgType::ComputeRequest, encode_matrix(blinded.matrix()));
        let reply = self.request(&request, MsgType::ComputeReply)?;
        let roundtrip_ms = ms_since(roundtrip_start);
        let (ybar_prime, consumed) = wire::decode_matrix::<T>(&reply.payload)?;
        if consumed != reply.payload.len() {
            return Err(SessionError::Protocol("trailing bytes in compute reply".into()));
        }
        if ybar_prime.rows() != shape.c_out || ybar_prime.cols() != shape.window_count() {
            return Err(SessionError::Protocol(format!(
                "server returned a {}x{} product, expected {}x{}",
                ybar_prime.rows(),
                ybar_prime.cols(),
                shape.c_out,
                shape.window_count()
            )));
        }

        let masks = self.masks.as_ref().unwrap();
        let tol = self.params.tolerance();
        let verify_start = Instant::now();
        let (verdict, verify_counts) =
            cost::tally(|| verify(&ybar_prime, blinded.matrix(), sk.r(), &tag, &tol));
        let verify_ms = ms_since(verify_start);
        // An overflow while checking means the reply is wildly outside the
        // budget an honest product satisfies: treat it as a failed check.
        let accepted = match verdict {
            Ok(ok) => ok,
            Err(TensorError::Overflow(_)) => false,
            Err(e) => return Err(e.into()),
        };

        let mut stats = SessionStats {
            shape,
            index_len: sk.index_len(),
            im2col_ms,
            blind_ms,
            roundtrip_ms,
            verify_ms,
            recover_ms: 0.0,
            reshape_ms: 0.0,
            total_ms: 0.0,
            blind_counts,
            verify_counts,
            recover_counts: OpCounts::ZERO,
            verified: accepted,
        };
        if !accepted {
            stats.total_ms = ms_since(session_start);
            return Err(SessionError::VerificationFailed(Box::new(stats)));
        }

        let recover_start = Instant::now();
        let (recovered, recover_counts) = cost::tally(|| recover(&ybar_prime, &sk, masks));
        stats.recover_ms = ms_since(recover_start);
        stats.recover_counts = recover_counts;
        let ybar = recovered?;

        let reshape_start = Instant::now();
        let output = reshape_output(&ybar, &shape)?;
        stats.reshape_ms = ms_since(reshape_start);

        state.advance(Phase::Done)?;
        debug_assert_eq!(state.phase(), Phase::Done);
        stats.total_ms = ms_since(session_start);
        Ok((output, stats))
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// One-shot convenience: a throwaway [`Client`] running a single session.
pub fn client_infer<T: Scalar>(
    endpoint: &str,
    x: &InputTensor<T>,
    params: &SecurityParams,
    seed: Option<u64>,
) -> Result<(OutputTensor<T>, SessionStats), SessionError> {
    let mut client = match seed {
        Some(s) => Client::with_seed(endpoint, *params, s)?,
        None => Client::new(endpoint, *params)?,
    };
    client.infer(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn model_reply_codec_round_trips() {
        let shape = ConvShape::new(4, 5, 2, 2, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let wbar = Matrix::<i64>::random(shape.c_out, shape.patch_len(), 100, &mut rng);
        let payload = encode_model_reply(&shape, &wbar);
        let (got_shape, hash, got_wbar) = decode_model_reply::<i64>(&payload).unwrap();
        assert_eq!(got_shape, shape);
        assert_eq!(got_wbar, wbar);
        assert_eq!(hash, fnv1a64(&encode_matrix(&wbar)));
    }

    #[test]
    fn model_reply_rejects_a_corrupted_matrix() {
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let wbar = Matrix::new(1, 4, vec![1i64, 2, 3, 4]).unwrap();
        let mut payload = encode_model_reply(&shape, &wbar);
        let last = payload.len() - 1;
        payload[last] ^= 0xff;
        assert!(decode_model_reply::<i64>(&payload).is_err());
    }

    #[test]
    fn error_codec_round_trips() {
        let payload = encode_error(error_code::SHAPE_MISMATCH, "nope");
        assert_eq!(decode_error(&payload), (error_code::SHAPE_MISMATCH, "nope".into()));
    }

    #[test]
    fn session_state_enforces_the_linear_order() {
        let mut state = SessionState::new();
        assert!(state.advance(Phase::AwaitingReply).is_err());
        state.advance(Phase::ModelFetched).unwrap();
        assert!(state.advance(Phase::Done).is_err());
        state.advance(Phase::AwaitingReply).unwrap();
        state.advance(Phase::Done).unwrap();
        assert!(state.advance(Phase::Done).is_err());
    }

    #[test]
    fn client_rejects_mode_mismatched_params() {
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let params = SecurityParams::new::<i64>(8, 2, &shape).unwrap();
        assert!(matches!(
            Client::<f64>::new("127.0.0.1:1", params),
            Err(SessionError::Params(ParamError::ModeMismatch { .. }))
        ));
    }

    #[test]
    fn connect_failure_is_reported_as_such() {
        let shape = ConvShape::new(3, 3, 2, 1, 1).unwrap();
        let params = SecurityParams::new::<i64>(8, 2, &shape).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = InputTensor::<i64>::random(shape, 16, &mut rng);
        // Port 1 is never listening in the sandbox.
        let err = client_infer("127.0.0.1:1", &x, &params, Some(0)).unwrap_err();
        assert!(matches!(err, SessionError::ConnectFailed { .. }));
    }
}
