use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::{ProviderError, Result};
use crate::numeric::LogitVector;
use crate::provider::wire::{encode, Request, Response, PROTOCOL_VERSION};
use crate::provider::{CallCounter, Context, LogitProvider, ModalityConfig};
use crate::vocab::{SpecialTokens, Vocabulary};

#[derive(Clone, Debug)]
pub struct RemoteOptions {
    /// Per-request deadline, handshake included.
    pub timeout: Duration,
    /// Extra connection attempts before giving up (TCP only).
    pub connect_retries: u32,
    pub retry_delay: Duration,
    /// When set, the handshake fails unless the server reports this size.
    pub expected_vocab: Option<usize>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(10),
            connect_retries: 3,
            retry_delay: Duration::from_millis(200),
            expected_vocab: None,
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    broken: Option<String>,
}

impl Connection {
    fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    return;
                }
            }
            let _ = tx.send(Err(std::io::ErrorKind::UnexpectedEof.into()));
        });
        Self {
            writer: Box::new(writer),
            lines: rx,
            broken: None,
        }
    }

    fn round_trip(&mut self, req: &Request, timeout: Duration) -> Result<Response, ProviderError> {
        if let Some(why) = &self.broken {
            return Err(ProviderError::Transport {
                retries: 0,
                message: format!("connection unusable: {why}"),
            });
        }
        let result = self.exchange(req, timeout);
        if let Err(e) = &result {
            // After a timeout or a bad frame the stream position is unknown.
            if !matches!(e, ProviderError::Remote { .. }) {
                self.broken = Some(e.to_string());
            }
        }
        result
    }

    fn exchange(&mut self, req: &Request, timeout: Duration) -> Result<Response, ProviderError> {
        let transport = |e: std::io::Error| ProviderError::Transport {
            retries: 0,
            message: e.to_string(),
        };
        self.writer.write_all(encode(req).as_bytes()).map_err(transport)?;
        self.writer.flush().map_err(transport)?;
        let line = match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(transport(e)),
            Err(RecvTimeoutError::Timeout) => return Err(ProviderError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(transport(std::io::ErrorKind::UnexpectedEof.into()))
            }
        };
        match serde_json::from_str::<Response>(&line) {
            Ok(Response::Error { code, message }) => Err(ProviderError::Remote { code, message }),
            Ok(r) => Ok(r),
            Err(e) => Err(ProviderError::Malformed(format!("{e}: {}", truncate(&line)))),
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(120) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Client side of the wire protocol. Requests on one connection are
/// serialized; pool several providers for parallel throughput.
pub struct RemoteProvider {
    vocab: Vocabulary,
    perturbation: Option<String>,
    conn: Mutex<Connection>,
    child: Mutex<Option<Child>>,
    calls: CallCounter,
    timeout: Duration,
}

impl RemoteProvider {
    /// Runs `command` and speaks the protocol over its stdin/stdout.
    pub fn spawn(command: &[String], options: RemoteOptions) -> Result<Self> {
        let (program, args) = command.split_first().ok_or_else(|| ProviderError::Transport {
            retries: 0,
            message: "empty bridge command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Transport {
                retries: 0,
                message: format!("cannot start {program:?}: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut provider = Self::handshake(Connection::new(stdout, stdin), &options);
        if let Ok(p) = &mut provider {
            *p.child.get_mut().unwrap() = Some(child);
        } else {
            let _ = child.kill();
            let _ = child.wait();
        }
        provider
    }

    /// Connects to a TCP server, retrying `connect_retries` times.
    pub fn connect_tcp(addr: &str, options: RemoteOptions) -> Result<Self> {
        let mut attempt = 0;
        let stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if attempt >= options.connect_retries => {
                    return Err(ProviderError::Transport {
                        retries: attempt,
                        message: format!("cannot connect to {addr}: {e}"),
                    }
                    .into())
                }
                Err(_) => {
                    attempt += 1;
                    thread::sleep(options.retry_delay);
                }
            }
        };
        let reader = stream.try_clone()?;
        Self::handshake(Connection::new(reader, stream), &options)
    }

    /// Speaks the protocol over an arbitrary pair of streams.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        options: RemoteOptions,
    ) -> Result<Self> {
        Self::handshake(Connection::new(reader, writer), &options)
    }

    fn handshake(mut conn: Connection, options: &RemoteOptions) -> Result<Self> {
        let hello = Request::Hello { proto: PROTOCOL_VERSION };
        let reply = conn.round_trip(&hello, options.timeout).map_err(|e| match e {
            ProviderError::Remote { code, message } => {
                ProviderError::Handshake(format!("server error {code}: {message}"))
            }
            ProviderError::Malformed(m) => ProviderError::Handshake(format!("bad vocab frame: {m}")),
            other => other,
        })?;
        let Response::Vocab {
            size,
            eos,
            meta,
            perturbation,
        } = reply
        else {
            return Err(ProviderError::Handshake("expected a vocab frame".into()).into());
        };
        if let Some(expected) = options.expected_vocab {
            if expected != size {
                return Err(ProviderError::VocabMismatch { expected, actual: size }.into());
            }
        }
        let special = SpecialTokens {
            eos,
            both: meta.both,
            video: meta.video,
            audio: meta.audio,
        };
        let vocab = Vocabulary::placeholder(size, special)
            .map_err(|e| ProviderError::Handshake(e.to_string()))?;
        Ok(Self {
            vocab,
            perturbation,
            conn: Mutex::new(conn),
            child: Mutex::new(None),
            calls: CallCounter::default(),
            timeout: options.timeout,
        })
    }

    /// The server's declared realization of a perturbed modality.
    pub fn perturbation(&self) -> Option<&str> {
        self.perturbation.as_deref()
    }

    /// One forward pass over the wire; same contract as
    /// [`LogitProvider::logits`].
    pub fn remote_eval(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        self.calls.bump();
        let req = Request::logits(cfg, ctx);
        let reply = self
            .conn
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .round_trip(&req, self.timeout)?;
        let Response::Logits { values } = reply else {
            return Err(ProviderError::Malformed("expected a logits frame".into()).into());
        };
        if values.len() != self.vocab.len() {
            return Err(ProviderError::Malformed(format!(
                "expected {} logits, got {}",
                self.vocab.len(),
                values.len()
            ))
            .into());
        }
        LogitVector::new(values).map_err(|e| ProviderError::Malformed(e.to_string()).into())
    }
}

impl LogitProvider for RemoteProvider {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        self.remote_eval(cfg, ctx)
    }

    fn calls(&self) -> u64 {
        self.calls.get()
    }
}

impl Drop for RemoteProvider {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.get_mut().ok().and_then(Option::take) {
            // Closing stdin lets a well-behaved bridge exit on EOF.
            drop(std::mem::replace(
                &mut self.conn.get_mut().unwrap_or_else(|p| p.into_inner()).writer,
                Box::new(std::io::sink()),
            ));
            for _ in 0..20 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
