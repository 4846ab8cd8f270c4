//! Protocol clients for oracles hosted in a child process or behind HTTP.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::protocol::{encode_line, Op, Outcome, Payload, Request, Response};
use super::{DistanceBackend, GeneratorBackend, ImageRef, OracleError};
use crate::latent::LatentVector;

pub trait Transport: Send + Sync {
    fn call(&self, request: &Request) -> Result<Response, OracleError>;
}

/// Line-delimited JSON over a reader/writer pair. Requests on one connection
/// are serialized.
pub struct LineTransport<R, W> {
    io: Mutex<(W, R)>,
}

impl<R: BufRead + Send, W: Write + Send> LineTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { io: Mutex::new((writer, reader)) }
    }
}

impl<R: BufRead + Send, W: Write + Send> Transport for LineTransport<R, W> {
    fn call(&self, request: &Request) -> Result<Response, OracleError> {
        let mut guard = self.io.lock().map_err(|_| OracleError::Transport("connection poisoned".into()))?;
        let (writer, reader) = &mut *guard;
        let t = |e: std::io::Error| OracleError::Transport(e.to_string());
        writer.write_all(encode_line(request).as_bytes()).map_err(t)?;
        writer.flush().map_err(t)?;
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(t)? == 0 {
            return Err(OracleError::Transport("oracle closed the connection".into()));
        }
        serde_json::from_str(line.trim_end())
            .map_err(|e| OracleError::Transport(format!("undecodable response {:?}: {e}", line.trim_end())))
    }
}

/// An oracle running as a child process speaking the protocol on stdio.
pub struct ProcessTransport {
    child: Mutex<Child>,
    lines: LineTransport<BufReader<ChildStdout>, ChildStdin>,
}

impl ProcessTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, OracleError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::Transport(format!("cannot start oracle `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        Ok(Self { child: Mutex::new(child), lines: LineTransport::new(BufReader::new(stdout), stdin) })
    }
}

impl Transport for ProcessTransport {
    fn call(&self, request: &Request) -> Result<Response, OracleError> {
        self.lines.call(request)
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// `POST <base>/v1/oracle` with the same JSON bodies as the line protocol.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().new_agent();
        Self { url: format!("{}/v1/oracle", base_url.trim_end_matches('/')), agent }
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &Request) -> Result<Response, OracleError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| OracleError::Transport(format!("POST {}: {e}", self.url)))?;
        let status = resp.status();
        let body = resp.body_mut().read_to_string().map_err(|e| OracleError::Transport(e.to_string()))?;
        serde_json::from_str(&body)
            .map_err(|e| OracleError::Transport(format!("HTTP {status}, undecodable body {body:?}: {e}")))
    }
}

/// Generator and distance backend that forwards every call over a transport.
pub struct OracleClient {
    transport: Box<dyn Transport>,
    next_id: AtomicU64,
}

impl OracleClient {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self { transport, next_id: AtomicU64::new(1) }
    }

    pub fn request(&self, op: Op) -> Result<Payload, OracleError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let resp = self.transport.call(&Request { id, op })?;
        if resp.id != id {
            return Err(OracleError::Transport(format!("response id {} does not match request id {id}", resp.id)));
        }
        match resp.outcome {
            Outcome::Ok(p) => Ok(p),
            Outcome::Err(e) => Err(OracleError::Protocol { code: e.code, message: e.message }),
        }
    }
}

impl GeneratorBackend for OracleClient {
    fn generate(&self, latent: &LatentVector) -> Result<ImageRef, OracleError> {
        match self.request(Op::Generate { latent: latent.as_slice().to_vec() })? {
            Payload::Image { image } => ImageRef::new(image),
            other => Err(OracleError::Transport(format!("expected an image, got {other:?}"))),
        }
    }
}

impl DistanceBackend for OracleClient {
    fn distance(&self, model: &str, a: &ImageRef, b: &ImageRef) -> Result<f64, OracleError> {
        let op = Op::Distance { model: model.to_string(), a: a.to_string(), b: b.to_string() };
        match self.request(op)? {
            Payload::Distance { distance } => Ok(distance),
            other => Err(OracleError::Transport(format!("expected a distance, got {other:?}"))),
        }
    }
}
