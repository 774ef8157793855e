//! Newline-delimited JSON protocol for out-of-process models.
//!
//! The server greets once with `{"hello": {"vocab_size", "eos_id"}}`, then
//! answers each `{"id", "role", "tokens"}` request with `{"id", "logits"}` or
//! `{"id", "error"}`. One request is in flight per connection.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendPair, ModelBackend, PromptSource, Role};
use crate::error::{BackendError, Error, Result};
use crate::math::{LogitVector, TokenId, TokenSequence, Vocabulary};

pub const DEFAULT_TIMEOUT_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalBackendConfig {
    /// Program and arguments of a child process speaking the protocol on
    /// stdin/stdout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// `host:port` of a TCP server.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    pub timeout_s: f64,
    pub prompt: Vec<u32>,
}

impl Default for ExternalBackendConfig {
    fn default() -> Self {
        Self { command: None, address: None, timeout_s: DEFAULT_TIMEOUT_S, prompt: vec![1] }
    }
}

impl ExternalBackendConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.command, &self.address) {
            (Some(c), None) if !c.is_empty() => {}
            (None, Some(_)) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "external backend needs exactly one of a non-empty command or an address".into(),
                ))
            }
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::InvalidConfig(format!("timeout_s {} must be > 0", self.timeout_s)));
        }
        if self.prompt.is_empty() {
            return Err(Error::InvalidConfig("external backend prompt must not be empty".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Hello {
    hello: HelloBody,
}

#[derive(Debug, Serialize, Deserialize)]
struct HelloBody {
    vocab_size: usize,
    eos_id: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    id: u64,
    role: Role,
    tokens: Vec<u32>,
}

#[derive(Debug, Serialize)]
struct Response<'a> {
    id: u64,
    logits: &'a [f64],
}

#[derive(Debug, Serialize)]
struct ErrorFrame<'a> {
    id: Option<u64>,
    error: &'a str,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    /// Set once the stream can no longer be trusted to stay in sync.
    broken: Option<String>,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(sock) = &self.socket {
            let _ = sock.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Connection {
    fn next_line(&mut self, timeout: Duration) -> Result<String, BackendError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(self.poison(BackendError::Disconnected(e.to_string()))),
            Err(RecvTimeoutError::Timeout) => Err(self.poison(BackendError::Timeout(timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(self.poison(BackendError::Disconnected("reader closed".into()))),
        }
    }

    fn poison(&mut self, err: BackendError) -> BackendError {
        self.broken = Some(err.to_string());
        err
    }
}

/// Client side of one protocol connection.
pub struct ExternalClient {
    conn: Mutex<Connection>,
    vocab: Vocabulary,
    timeout: Duration,
}

impl std::fmt::Debug for ExternalClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalClient").field("vocab", &self.vocab).field("timeout", &self.timeout).finish()
    }
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            let msg = match reader.read_line(&mut line) {
                Ok(0) => Err(io::Error::new(io::ErrorKind::UnexpectedEof, "backend closed its output")),
                Ok(_) => Ok(line),
                Err(e) => Err(e),
            };
            let done = msg.is_err();
            if tx.send(msg).is_err() || done {
                break;
            }
        }
    });
    rx
}

impl ExternalClient {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::InvalidConfig("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(BackendError::Io)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Connection {
            writer: Box::new(stdin),
            lines: spawn_reader(stdout),
            next_id: 0,
            broken: None,
            child: Some(child),
            socket: None,
        }, timeout)
    }

    pub fn connect(address: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(address).map_err(BackendError::Io)?;
        stream.set_nodelay(true).map_err(BackendError::Io)?;
        let reader = stream.try_clone().map_err(BackendError::Io)?;
        let socket = stream.try_clone().map_err(BackendError::Io)?;
        Self::handshake(Connection {
            writer: Box::new(stream),
            lines: spawn_reader(reader),
            next_id: 0,
            broken: None,
            child: None,
            socket: Some(socket),
        }, timeout)
    }

    /// Wraps an already-open byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(Connection {
            writer: Box::new(writer),
            lines: spawn_reader(reader),
            next_id: 0,
            broken: None,
            child: None,
            socket: None,
        }, timeout)
    }

    fn handshake(mut conn: Connection, timeout: Duration) -> Result<Self> {
        let line = conn.next_line(timeout)?;
        let hello: Hello = serde_json::from_str(line.trim())
            .map_err(|e| BackendError::Protocol(format!("bad handshake {:?}: {e}", line.trim())))?;
        let vocab = Vocabulary::new(hello.hello.vocab_size, hello.hello.eos_id)
            .map_err(|e| BackendError::Protocol(format!("handshake: {e}")))?;
        Ok(Self { conn: Mutex::new(conn), vocab, timeout })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn next_logits(&self, role: Role, tokens: &[TokenId]) -> Result<LogitVector> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(why) = &conn.broken {
            return Err(BackendError::Disconnected(format!("connection unusable after: {why}")).into());
        }
        let id = conn.next_id;
        conn.next_id += 1;
        let req = Request { id, role, tokens: tokens.iter().map(|t| t.0).collect() };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        if let Err(e) = conn.writer.write_all(line.as_bytes()).and_then(|_| conn.writer.flush()) {
            return Err(conn.poison(BackendError::Disconnected(e.to_string())).into());
        }
        let reply = conn.next_line(self.timeout)?;
        let value: serde_json::Value = serde_json::from_str(reply.trim())
            .map_err(|e| conn.poison(BackendError::Protocol(format!("unparseable reply: {e}"))))?;
        if value.get("id").and_then(|v| v.as_u64()) != Some(id) {
            return Err(conn.poison(BackendError::Protocol(format!("reply id {} for request {id}", value["id"]))).into());
        }
        if let Some(msg) = value.get("error") {
            let msg = msg.as_str().map(str::to_owned).unwrap_or_else(|| msg.to_string());
            return Err(BackendError::Remote(msg).into());
        }
        let logits: Vec<f64> = value
            .get("logits")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| BackendError::Protocol("reply has neither logits nor error".into()))?;
        if logits.len() != self.vocab.size() {
            return Err(BackendError::LogitLengthMismatch { expected: self.vocab.size(), got: logits.len() }.into());
        }
        LogitVector::new(logits)
    }
}

pub struct ExternalBackend {
    role: Role,
    client: Arc<ExternalClient>,
}

impl ExternalBackend {
    pub fn new(role: Role, client: Arc<ExternalClient>) -> Self {
        Self { role, client }
    }
}

impl ModelBackend for ExternalBackend {
    fn role(&self) -> Role {
        self.role
    }

    fn vocab(&self) -> Vocabulary {
        self.client.vocab
    }

    fn next_logits(&self, sequence: &[TokenId]) -> Result<LogitVector> {
        super::check_sequence(&self.client.vocab, sequence)?;
        self.client.next_logits(self.role, sequence)
    }
}

/// Opens one connection and hands out both role views of it.
pub fn connect_pair(cfg: &ExternalBackendConfig) -> Result<BackendPair> {
    cfg.validate()?;
    let client = match (&cfg.command, &cfg.address) {
        (Some(cmd), _) => ExternalClient::spawn(cmd, cfg.timeout())?,
        (None, Some(addr)) => ExternalClient::connect(addr, cfg.timeout())?,
        (None, None) => unreachable!("validated"),
    };
    let prompt: TokenSequence = cfg.prompt.iter().map(|t| TokenId(*t)).collect();
    super::check_sequence(&client.vocab(), &prompt)?;
    let client = Arc::new(client);
    Ok(BackendPair {
        slm: Arc::new(ExternalBackend::new(Role::Slm, client.clone())),
        llm: Arc::new(ExternalBackend::new(Role::Llm, client)),
        prompts: PromptSource::Fixed(prompt),
    })
}

/// What a server handler does with one request.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Logits(Vec<f64>),
    Error(String),
    /// Send nothing; the client will eventually time out.
    Silent,
}

/// Runs the server side of the protocol until the client closes its end.
/// Malformed requests get an error frame and the connection stays up.
pub fn serve<R, W, F>(reader: R, mut writer: W, vocab: Vocabulary, mut handler: F) -> io::Result<()>
where
    R: BufRead,
    W: Write,
    F: FnMut(Role, &[u32]) -> Reply,
{
    let hello = Hello { hello: HelloBody { vocab_size: vocab.size(), eos_id: vocab.eos_id().0 } };
    writeln!(writer, "{}", serde_json::to_string(&hello)?)?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = match serde_json::from_str::<Request>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line).ok().and_then(|v| v["id"].as_u64());
                serde_json::to_string(&ErrorFrame { id, error: &format!("malformed request: {e}") })?
            }
            Ok(req) => match handler(req.role, &req.tokens) {
                Reply::Logits(logits) => serde_json::to_string(&Response { id: req.id, logits: &logits })?,
                Reply::Error(msg) => serde_json::to_string(&ErrorFrame { id: Some(req.id), error: &msg })?,
                Reply::Silent => continue,
            },
        };
        writeln!(writer, "{frame}")?;
        writer.flush()?;
    }
    Ok(())
}

/// Failure injection knobs for the protocol stub.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StubOptions {
    /// Stop answering after this many replies.
    pub hang_after: Option<usize>,
    /// Reply with one logit too few.
    pub wrong_length: bool,
}

/// Stub server returning uniform (all-zero) logits for every request.
pub fn serve_stub<R: BufRead, W: Write>(reader: R, writer: W, vocab: Vocabulary, opts: StubOptions) -> io::Result<()> {
    let mut answered = 0usize;
    serve(reader, writer, vocab, |_, tokens| {
        if opts.hang_after.is_some_and(|n| answered >= n) {
            return Reply::Silent;
        }
        answered += 1;
        if tokens.is_empty() {
            return Reply::Error("empty sequence".into());
        }
        let len = if opts.wrong_length { vocab.size() - 1 } else { vocab.size() };
        Reply::Logits(vec![0.0; len])
    })
}
