//! Source-model oracle: serves forward logits and, when enabled, input VJPs over TCP,
//! without ever putting parameters on the wire.

mod wire;

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Network;
use crate::netcore::{Module, NetError, ParamSet, Tensor};

pub use wire::{
    parse_frame, read_frame, read_message, write_message, Capabilities, Header, Op, OracleMessage,
    MAX_FRAME_BYTES,
};

pub const BACKWARD_DISABLED: &str = "BACKWARD_DISABLED";
pub const NON_FINITE_INPUT: &str = "NON_FINITE_INPUT";
pub const MALFORMED_FRAME: &str = "MALFORMED_FRAME";
pub const SHAPE_REJECTED: &str = "SHAPE_REJECTED";
pub const BAD_REQUEST: &str = "BAD_REQUEST";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("oracle protocol: {0}")]
    Protocol(String),
    #[error("oracle replied {code}: {message}")]
    Remote { code: String, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

impl OracleError {
    pub fn code(&self) -> Option<&str> {
        match self {
            OracleError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }

    pub fn is_backward_disabled(&self) -> bool {
        self.code() == Some(BACKWARD_DISABLED)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    ForwardOnly,
    ForwardBackward,
}

impl OracleMode {
    pub fn allows_backward(self) -> bool {
        self == OracleMode::ForwardBackward
    }
}

impl std::str::FromStr for OracleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward_only" => Ok(OracleMode::ForwardOnly),
            "forward_backward" => Ok(OracleMode::ForwardBackward),
            other => Err(format!("unknown oracle mode {other:?} (forward_only|forward_backward)")),
        }
    }
}

/// Served-request counters. Only successful requests count.
#[derive(Debug, Default)]
pub struct OracleStats {
    forward_calls: AtomicU64,
    backward_calls: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub forward_calls: u64,
    pub backward_calls: u64,
}

impl CallCounts {
    pub fn since(self, earlier: CallCounts) -> CallCounts {
        CallCounts {
            forward_calls: self.forward_calls - earlier.forward_calls,
            backward_calls: self.backward_calls - earlier.backward_calls,
        }
    }
}

impl OracleStats {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            forward_calls: self.forward_calls.load(Ordering::SeqCst),
            backward_calls: self.backward_calls.load(Ordering::SeqCst),
        }
    }
}

/// Client-side view of a source model: forward logits and optionally input VJPs.
pub trait SourceOracle {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor, OracleError>;

    /// `(∂S/∂x)ᵀ·g` at `x`.
    fn backward(&mut self, x: &Tensor, g: &Tensor) -> Result<Tensor, OracleError>;

    fn supports_backward(&self) -> bool;

    /// Requests this client has completed so far.
    fn calls(&self) -> CallCounts;
}

fn check_request(model: &Network, x: &Tensor, id: u64) -> Result<(), OracleMessage> {
    if !x.is_finite() {
        return Err(OracleMessage::error(id, NON_FINITE_INPUT, "input contains NaN or infinity"));
    }
    match x.dims4() {
        Ok([_, c, _, _]) if c == model.arch().in_channels() => Ok(()),
        _ => Err(OracleMessage::error(
            id,
            SHAPE_REJECTED,
            format!("expected [N,{},H,W], got {:?}", model.arch().in_channels(), x.shape()),
        )),
    }
}

fn tensor_reply(op: Op, id: u64, t: &Tensor) -> OracleMessage {
    let mut h = Header::new(op, id);
    h.shape = t.shape().to_vec();
    OracleMessage::new(h, &[t])
}

/// Answers one request. Pure apart from the stats counters.
fn handle(model: &Network, mode: OracleMode, stats: &OracleStats, msg: &OracleMessage) -> OracleMessage {
    let id = msg.header.id;
    match msg.header.op {
        Op::Hello => {
            let mut h = Header::new(Op::Hello, id);
            h.capabilities = Some(Capabilities { backward: mode.allows_backward() });
            OracleMessage { header: h, payload: Vec::new() }
        }
        Op::Forward => {
            let (x, g) = match msg.tensors() {
                Ok(t) => t,
                Err(e) => return OracleMessage::error(id, MALFORMED_FRAME, e.to_string()),
            };
            if g.is_some() {
                return OracleMessage::error(id, BAD_REQUEST, "forward takes a single tensor");
            }
            if let Err(reply) = check_request(model, &x, id) {
                return reply;
            }
            match model.predict(&x) {
                Ok(y) => {
                    stats.forward_calls.fetch_add(1, Ordering::SeqCst);
                    tensor_reply(Op::Forward, id, &y)
                }
                Err(e) => OracleMessage::error(id, SHAPE_REJECTED, e.to_string()),
            }
        }
        Op::Backward => {
            if !mode.allows_backward() {
                return OracleMessage::error(id, BACKWARD_DISABLED, "this oracle serves forward requests only");
            }
            let (x, g) = match msg.tensors() {
                Ok((x, Some(g))) => (x, g),
                Ok((_, None)) => return OracleMessage::error(id, BAD_REQUEST, "backward needs grad_shape"),
                Err(e) => return OracleMessage::error(id, MALFORMED_FRAME, e.to_string()),
            };
            if let Err(reply) = check_request(model, &x, id) {
                return reply;
            }
            if !g.is_finite() {
                return OracleMessage::error(id, NON_FINITE_INPUT, "upstream gradient contains NaN or infinity");
            }
            match model.vjp(&x, &g) {
                Ok(gx) => {
                    stats.backward_calls.fetch_add(1, Ordering::SeqCst);
                    tensor_reply(Op::Backward, id, &gx)
                }
                Err(e) => OracleMessage::error(id, SHAPE_REJECTED, e.to_string()),
            }
        }
        Op::Error => OracleMessage::error(id, BAD_REQUEST, "clients may not send error frames"),
    }
}

struct Shared {
    model: Network,
    mode: OracleMode,
    stats: Arc<OracleStats>,
    capture: Option<Mutex<Vec<u8>>>,
    stop: AtomicBool,
}

fn serve_connection(shared: &Shared, stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(body) = wire::read_frame(&mut reader)? {
        let reply = match wire::parse_frame(&body) {
            Ok(msg) => handle(&shared.model, shared.mode, &shared.stats, &msg),
            Err(e) => OracleMessage::error(0, MALFORMED_FRAME, e.to_string()),
        };
        let bytes = reply.encode();
        if let Some(cap) = &shared.capture {
            cap.lock().expect("capture lock").extend_from_slice(&bytes);
        }
        writer.write_all(&bytes)?;
        writer.flush()?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ServeOptions {
    /// Keep a copy of every byte sent to clients (for privacy audits).
    pub capture_traffic: bool,
}

/// A running oracle server. Dropping it stops accepting new connections.
pub struct OracleServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

/// Starts serving `model` on `bind` (use port 0 for an ephemeral port).
pub fn serve(model: Network, mode: OracleMode, bind: impl ToSocketAddrs) -> Result<OracleServer, OracleError> {
    serve_with(model, mode, bind, ServeOptions::default())
}

pub fn serve_with(
    model: Network,
    mode: OracleMode,
    bind: impl ToSocketAddrs,
    opts: ServeOptions,
) -> Result<OracleServer, OracleError> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        model,
        mode,
        stats: Arc::new(OracleStats::default()),
        capture: opts.capture_traffic.then(|| Mutex::new(Vec::new())),
        stop: AtomicBool::new(false),
    });
    let s = Arc::clone(&shared);
    let accept = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if s.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let s = Arc::clone(&s);
            std::thread::spawn(move || {
                if let Err(e) = serve_connection(&s, stream) {
                    log::debug!("oracle connection ended: {e}");
                }
            });
        }
    });
    log::info!("oracle serving on {addr} ({mode:?})");
    Ok(OracleServer { addr, shared, accept: Some(accept) })
}

impl OracleServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn mode(&self) -> OracleMode {
        self.shared.mode
    }

    pub fn stats(&self) -> CallCounts {
        self.shared.stats.snapshot()
    }

    /// Server-to-client bytes sent so far; empty unless capture was enabled.
    pub fn captured_traffic(&self) -> Vec<u8> {
        self.shared.capture.as_ref().map(|c| c.lock().expect("capture lock").clone()).unwrap_or_default()
    }

    /// Blocks the calling thread until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// TCP client for a remote oracle. One in-flight request at a time.
pub struct OracleClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
    capabilities: Capabilities,
    calls: CallCounts,
}

impl OracleClient {
    /// Connects and performs the hello exchange.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, OracleError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut client = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            next_id: 0,
            capabilities: Capabilities { backward: false },
            calls: CallCounts::default(),
        };
        let reply = client.request(Header::new(Op::Hello, 0), &[])?;
        client.capabilities = reply
            .header
            .capabilities
            .ok_or_else(|| OracleError::Protocol("hello reply without capabilities".into()))?;
        Ok(client)
    }

    pub fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    /// Sends a request and returns the matching reply, turning error frames into [`OracleError::Remote`].
    pub fn request(&mut self, mut header: Header, tensors: &[&Tensor]) -> Result<OracleMessage, OracleError> {
        self.next_id += 1;
        header.id = self.next_id;
        let op = header.op;
        write_message(&mut self.writer, &OracleMessage::new(header, tensors))?;
        let reply = read_message(&mut self.reader)?;
        if reply.header.op == Op::Error {
            return Err(OracleError::Remote {
                code: reply.header.code.unwrap_or_default(),
                message: reply.header.message.unwrap_or_default(),
            });
        }
        if reply.header.op != op || reply.header.id != self.next_id {
            return Err(OracleError::Protocol(format!(
                "reply {:?}#{} does not match request {op:?}#{}",
                reply.header.op, reply.header.id, self.next_id
            )));
        }
        Ok(reply)
    }

    /// Writes raw bytes to the connection (for protocol tests).
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<OracleMessage, OracleError> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        read_message(&mut self.reader)
    }

    pub fn shutdown(&mut self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

impl SourceOracle for OracleClient {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor, OracleError> {
        let mut h = Header::new(Op::Forward, 0);
        h.shape = x.shape().to_vec();
        let reply = self.request(h, &[x])?;
        let (y, _) = reply.tensors()?;
        self.calls.forward_calls += 1;
        Ok(y)
    }

    fn backward(&mut self, x: &Tensor, g: &Tensor) -> Result<Tensor, OracleError> {
        let mut h = Header::new(Op::Backward, 0);
        h.shape = x.shape().to_vec();
        h.grad_shape = Some(g.shape().to_vec());
        let reply = self.request(h, &[x, g])?;
        let (gx, _) = reply.tensors()?;
        if gx.shape() != x.shape() {
            return Err(OracleError::Protocol(format!("VJP shape {:?} != input {:?}", gx.shape(), x.shape())));
        }
        self.calls.backward_calls += 1;
        Ok(gx)
    }

    fn supports_backward(&self) -> bool {
        self.capabilities.backward
    }

    fn calls(&self) -> CallCounts {
        self.calls
    }
}

/// In-process oracle over a local network with the same request semantics as the server.
pub struct LocalOracle<'a> {
    model: &'a Network,
    mode: OracleMode,
    stats: OracleStats,
}

impl<'a> LocalOracle<'a> {
    pub fn new(model: &'a Network, mode: OracleMode) -> Self {
        Self { model, mode, stats: OracleStats::default() }
    }

    fn call(&self, msg: OracleMessage) -> Result<Tensor, OracleError> {
        let reply = handle(self.model, self.mode, &self.stats, &msg);
        if reply.header.op == Op::Error {
            return Err(OracleError::Remote {
                code: reply.header.code.unwrap_or_default(),
                message: reply.header.message.unwrap_or_default(),
            });
        }
        Ok(reply.tensors()?.0)
    }
}

impl SourceOracle for LocalOracle<'_> {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor, OracleError> {
        let mut h = Header::new(Op::Forward, 0);
        h.shape = x.shape().to_vec();
        self.call(OracleMessage::new(h, &[x]))
    }

    fn backward(&mut self, x: &Tensor, g: &Tensor) -> Result<Tensor, OracleError> {
        let mut h = Header::new(Op::Backward, 0);
        h.shape = x.shape().to_vec();
        h.grad_shape = Some(g.shape().to_vec());
        self.call(OracleMessage::new(h, &[x, g]))
    }

    fn supports_backward(&self) -> bool {
        self.mode.allows_backward()
    }

    fn calls(&self) -> CallCounts {
        self.stats.snapshot()
    }
}

/// Consecutive parameter values that form one search pattern in [`scan_for_params`].
pub const SCAN_WINDOW: usize = 8;

/// Names of parameters whose bytes appear in `traffic`: either a whole tensor or any run of
/// [`SCAN_WINDOW`] consecutive values that are not all equal (constant runs such as zero
/// biases also occur in honest outputs).
pub fn scan_for_params(traffic: &[u8], params: &ParamSet) -> Vec<String> {
    let mut hits = Vec::new();
    let wlen = SCAN_WINDOW * 4;
    let mut windows: HashSet<&[u8]> = HashSet::new();
    let mut owners: Vec<(String, Vec<u8>)> = Vec::new();
    for (name, p) in params.iter() {
        owners.push((name.to_string(), p.value.to_le_bytes()));
    }
    for (name, bytes) in &owners {
        let varied = |w: &[u8]| w.chunks(4).any(|c| c != &w[..4]);
        if bytes.len() < wlen {
            if bytes.chunks(4).count() > 1 && varied(bytes) && contains(traffic, bytes) {
                hits.push(name.clone());
            }
            continue;
        }
        for w in bytes.windows(wlen).step_by(4) {
            if varied(w) {
                windows.insert(w);
            }
        }
    }
    if traffic.len() >= wlen && !windows.is_empty() {
        let mut found: HashSet<&[u8]> = HashSet::new();
        for w in traffic.windows(wlen) {
            if let Some(&hit) = windows.get(w) {
                found.insert(hit);
            }
        }
        for (name, bytes) in &owners {
            if bytes.len() >= wlen && bytes.windows(wlen).step_by(4).any(|w| found.contains(w)) {
                hits.push(name.clone());
            }
        }
    }
    hits.sort();
    hits.dedup();
    hits
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_adapter, AdapterSpec, ArchSpec, LinearSpec};
    use crate::netcore::SplitMix64;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
    }

    #[test]
    fn hello_advertises_mode() {
        let net = build_adapter(AdapterSpec::default(), 1).unwrap();
        for (mode, backward) in [(OracleMode::ForwardOnly, false), (OracleMode::ForwardBackward, true)] {
            let server = serve(net.clone(), mode, "127.0.0.1:0").unwrap();
            let client = OracleClient::connect(server.addr()).unwrap();
            assert_eq!(client.capabilities().backward, backward);
        }
    }

    #[test]
    fn forward_only_refuses_backward() {
        let net = build_adapter(AdapterSpec::default(), 1).unwrap();
        let server = serve(net, OracleMode::ForwardOnly, "127.0.0.1:0").unwrap();
        let mut c = OracleClient::connect(server.addr()).unwrap();
        let x = random(&[1, 1, 4, 4], 3);
        let err = c.backward(&x, &x).unwrap_err();
        assert!(err.is_backward_disabled(), "{err}");
        assert_eq!(server.stats().backward_calls, 0);
        // Connection remains usable.
        c.forward(&x).unwrap();
        assert_eq!(server.stats(), CallCounts { forward_calls: 1, backward_calls: 0 });
    }

    #[test]
    fn identity_adapter_vjp_passes_gradient_through() {
        let net = build_adapter(AdapterSpec::default(), 1).unwrap();
        let server = serve(net, OracleMode::ForwardBackward, "127.0.0.1:0").unwrap();
        let mut c = OracleClient::connect(server.addr()).unwrap();
        let x = random(&[2, 1, 5, 5], 4);
        let g = random(&[2, 1, 5, 5], 5);
        assert!(c.forward(&x).unwrap().bits_eq(&x));
        assert!(c.backward(&x, &g).unwrap().bits_eq(&g));
    }

    #[test]
    fn linear_vjp_is_weight_transpose() {
        let mut net = Network::build(ArchSpec::Linear(LinearSpec { in_channels: 2, out_channels: 3 }), 9).unwrap();
        let w = random(&[3, 2, 1, 1], 11);
        net.params_mut().get_mut("linear.weight").unwrap().value = w.clone();
        let server = serve(net, OracleMode::ForwardBackward, "127.0.0.1:0").unwrap();
        let mut c = OracleClient::connect(server.addr()).unwrap();
        let x = random(&[1, 2, 3, 3], 12);
        let g = random(&[1, 3, 3, 3], 13);
        let gx = c.backward(&x, &g).unwrap();
        for ci in 0..2 {
            for p in 0..9 {
                let want: f64 =
                    (0..3).map(|co| f64::from(w.data()[co * 2 + ci]) * f64::from(g.data()[co * 9 + p])).sum();
                assert!((f64::from(gx.data()[ci * 9 + p]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn error_codes_keep_connection_alive() {
        let net = build_adapter(AdapterSpec::default(), 1).unwrap();
        let server = serve(net, OracleMode::ForwardBackward, "127.0.0.1:0").unwrap();
        let mut c = OracleClient::connect(server.addr()).unwrap();
        let mut x = random(&[1, 1, 4, 4], 3);
        x.data_mut()[5] = f32::NAN;
        assert_eq!(c.forward(&x).unwrap_err().code(), Some(NON_FINITE_INPUT));
        let wrong = random(&[1, 2, 4, 4], 3);
        assert_eq!(c.forward(&wrong).unwrap_err().code(), Some(SHAPE_REJECTED));
        let mut garbage = 5u32.to_le_bytes().to_vec();
        garbage.extend_from_slice(b"nope\n");
        let reply = c.send_raw(&garbage).unwrap();
        assert_eq!(reply.header.code.as_deref(), Some(MALFORMED_FRAME));
        let ok = random(&[1, 1, 4, 4], 3);
        c.forward(&ok).unwrap();
        assert_eq!(server.stats().forward_calls, 1);
    }

    #[test]
    fn local_oracle_matches_server_semantics() {
        let net = build_adapter(AdapterSpec::default(), 1).unwrap();
        let mut local = LocalOracle::new(&net, OracleMode::ForwardOnly);
        let x = random(&[1, 1, 4, 4], 3);
        assert!(local.backward(&x, &x).unwrap_err().is_backward_disabled());
        local.forward(&x).unwrap();
        assert_eq!(local.calls(), CallCounts { forward_calls: 1, backward_calls: 0 });
    }

    #[test]
    fn scan_finds_leaked_weights_only() {
        let mut net = Network::build(ArchSpec::Linear(LinearSpec { in_channels: 4, out_channels: 4 }), 2).unwrap();
        net.params_mut().get_mut("linear.bias").unwrap().value = random(&[4], 1);
        let mut traffic = vec![0u8; 100];
        assert!(scan_for_params(&traffic, net.params()).is_empty());
        let w = net.params().get("linear.weight").unwrap().value.to_le_bytes();
        traffic.extend_from_slice(&w[4..4 + SCAN_WINDOW * 4]);
        assert_eq!(scan_for_params(&traffic, net.params()), vec!["linear.weight".to_string()]);
        traffic.extend_from_slice(&net.params().get("linear.bias").unwrap().value.to_le_bytes());
        assert_eq!(scan_for_params(&traffic, net.params()).len(), 2);
    }
}
