//! Client side of the wire protocol.
//!
//! Requests may be issued concurrently from several threads; a reader
//! thread routes each response to its caller by request id. The global
//! sequence cap is enforced here, before anything reaches the backend.

use super::wire::{
    DiscriminativePayload, HiddenStatesPayload, Request, RequestBody, Response, TopKPayload,
};
use super::{BackendError, GreedyOutput, LvlmBackend, ModelInfo, SequenceContext, StepResult};
use crate::text::{TokenId, MAX_SEQUENCE_LEN};
use serde::de::DeserializeOwned;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, OnceLock};

type Pending = Arc<Mutex<HashMap<u64, mpsc::Sender<Response>>>>;

pub struct RemoteBackend {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    next_id: AtomicU64,
    child: Mutex<Option<Child>>,
    info: OnceLock<ModelInfo>,
}

impl RemoteBackend {
    /// Connects to `unix:<path>`, `tcp:<host:port>` or spawns
    /// `exec:<program> [args...]` and talks to its stdio.
    pub fn connect(target: &str) -> Result<Self, BackendError> {
        let transport = |e: std::io::Error| BackendError::Transport(format!("{target}: {e}"));
        if let Some(path) = target.strip_prefix("unix:") {
            #[cfg(unix)]
            {
                let s = std::os::unix::net::UnixStream::connect(path).map_err(transport)?;
                let r = s.try_clone().map_err(transport)?;
                return Ok(Self::from_streams(r, s));
            }
            #[cfg(not(unix))]
            {
                let _ = path;
                return Err(BackendError::Transport("unix sockets unsupported".into()));
            }
        }
        if let Some(addr) = target.strip_prefix("tcp:") {
            let s = std::net::TcpStream::connect(addr).map_err(transport)?;
            let r = s.try_clone().map_err(transport)?;
            return Ok(Self::from_streams(r, s));
        }
        if let Some(cmd) = target.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| BackendError::Transport("empty exec target".into()))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(transport)?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let me = Self::from_streams(stdout, stdin);
            *me.child.lock().unwrap() = Some(child);
            return Ok(me);
        }
        Err(BackendError::Transport(format!(
            "unrecognized backend target {target:?} (expected unix:, tcp: or exec:)"
        )))
    }

    pub fn from_streams<R, W>(reader: R, writer: W) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let closed = Arc::new(AtomicBool::new(false));
        {
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            std::thread::spawn(move || {
                let reader = BufReader::new(reader);
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<Response>(&line) {
                        Ok(resp) => {
                            if let Some(tx) = pending.lock().unwrap().remove(&resp.id) {
                                let _ = tx.send(resp);
                            } else {
                                tracing::warn!(id = resp.id, "response for unknown request id");
                            }
                        }
                        Err(e) => tracing::warn!("undecodable response line: {e}"),
                    }
                }
                closed.store(true, Ordering::SeqCst);
                // Dropping the senders wakes every waiter with an error.
                pending.lock().unwrap().clear();
            });
        }
        Self {
            writer: Mutex::new(Box::new(writer)),
            pending,
            closed,
            next_id: AtomicU64::new(1),
            child: Mutex::new(None),
            info: OnceLock::new(),
        }
    }

    fn call<T: DeserializeOwned>(&self, body: RequestBody) -> Result<T, BackendError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(BackendError::Transport("backend connection closed".into()));
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap().insert(id, tx);
        let line = serde_json::to_string(&Request { id, body })
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let written = {
            let mut w = self.writer.lock().unwrap();
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
        };
        if let Err(e) = written {
            self.pending.lock().unwrap().remove(&id);
            return Err(BackendError::Transport(e.to_string()));
        }
        let resp = rx
            .recv()
            .map_err(|_| BackendError::Transport("backend closed before responding".into()))?;
        let value = resp.into_result()?;
        serde_json::from_value(value).map_err(|e| BackendError::Protocol(format!("bad payload: {e}")))
    }

    fn info(&self) -> Result<&ModelInfo, BackendError> {
        if let Some(i) = self.info.get() {
            return Ok(i);
        }
        let info: ModelInfo = self.call(RequestBody::Describe)?;
        Ok(self.info.get_or_init(|| info))
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.lock().unwrap().take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl LvlmBackend for RemoteBackend {
    fn model_info(&self) -> Result<ModelInfo, BackendError> {
        self.info().cloned()
    }

    fn top_k_next(&self, ctx: &SequenceContext, k: usize, with_image: bool) -> Result<StepResult, BackendError> {
        ctx.validate()?;
        let info = self.info()?;
        if k == 0 || k > info.vocab_size() {
            return Err(BackendError::Input(format!(
                "k={k} outside 1..={}",
                info.vocab_size()
            )));
        }
        let payload: TopKPayload = self.call(RequestBody::TopKNext {
            ctx: ctx.clone(),
            k,
            with_image,
        })?;
        let step = payload.into_step()?;
        step.validate(k, info.hidden_dim)?;
        Ok(step)
    }

    fn greedy_extend(
        &self,
        ctx: &SequenceContext,
        stop_tokens: &[TokenId],
        with_image: bool,
    ) -> Result<GreedyOutput, BackendError> {
        ctx.validate()?;
        let room = MAX_SEQUENCE_LEN - ctx.prefix_tokens.len();
        if room == 0 {
            return Ok(GreedyOutput {
                tokens: Vec::new(),
                truncated: true,
            });
        }
        let mut out: GreedyOutput = self.call(RequestBody::GreedyExtend {
            ctx: ctx.clone(),
            stop_tokens: stop_tokens.to_vec(),
            with_image,
        })?;
        if out.tokens.len() > room {
            out.tokens.truncate(room);
            out.truncated = !out.tokens.last().is_some_and(|t| stop_tokens.contains(t));
        }
        Ok(out)
    }

    fn final_hidden_states(
        &self,
        ctx: &SequenceContext,
        tokens: &[TokenId],
        with_image: bool,
    ) -> Result<Vec<Vec<f32>>, BackendError> {
        ctx.validate()?;
        if tokens.is_empty() {
            return Err(BackendError::Input("hidden_states needs at least one token".into()));
        }
        let dim = self.info()?.hidden_dim;
        let payload: HiddenStatesPayload = self.call(RequestBody::HiddenStates {
            ctx: ctx.clone(),
            tokens: tokens.to_vec(),
            with_image,
        })?;
        let vectors = payload.into_vectors()?;
        if vectors.len() != tokens.len() {
            return Err(BackendError::Protocol(format!(
                "{} tokens in, {} vectors out",
                tokens.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(BackendError::Protocol(format!(
                "hidden vector of dim {} (model reports {dim})",
                v.len()
            )));
        }
        Ok(vectors)
    }

    fn discriminative_reply(&self, image_ref: &str, object_name: &str, question: &str) -> Result<String, BackendError> {
        let p: DiscriminativePayload = self.call(RequestBody::Discriminative {
            image_ref: image_ref.to_string(),
            object_name: object_name.to_string(),
            question: question.to_string(),
        })?;
        Ok(p.reply)
    }
}
