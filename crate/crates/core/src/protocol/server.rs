//! Serves any [`LvlmBackend`] over newline-delimited JSON.

use super::wire::{
    DiscriminativePayload, HiddenStatesPayload, Request, RequestBody, Response, TopKPayload,
};
use super::{BackendError, LvlmBackend};
use std::io::{self, BufRead, BufReader, Write};
use std::sync::Arc;

/// Executes one decoded request against `backend`.
pub fn handle_request<B: LvlmBackend + ?Sized>(backend: &B, req: Request) -> Response {
    let id = req.id;
    let result = match req.body {
        RequestBody::Describe => backend
            .model_info()
            .and_then(|info| to_value(&info)),
        RequestBody::TopKNext { ctx, k, with_image } => backend
            .top_k_next(&ctx, k, with_image)
            .and_then(|step| to_value(&TopKPayload::from_step(&step))),
        RequestBody::GreedyExtend {
            ctx,
            stop_tokens,
            with_image,
        } => backend
            .greedy_extend(&ctx, &stop_tokens, with_image)
            .and_then(|out| to_value(&out)),
        RequestBody::HiddenStates {
            ctx,
            tokens,
            with_image,
        } => backend
            .final_hidden_states(&ctx, &tokens, with_image)
            .and_then(|v| to_value(&HiddenStatesPayload::from_vectors(&v))),
        RequestBody::Discriminative {
            image_ref,
            object_name,
            question,
        } => backend
            .discriminative_reply(&image_ref, &object_name, &question)
            .and_then(|reply| to_value(&DiscriminativePayload { reply })),
    };
    match result {
        Ok(v) => Response::success(id, v),
        Err(e) => Response::failure(id, &e),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, BackendError> {
    serde_json::to_value(v).map_err(|e| BackendError::Protocol(e.to_string()))
}

/// Decodes one request line and produces the response line (without the
/// trailing newline). Undecodable lines get an error response with id 0,
/// or the id if one can be recovered.
pub fn handle_line<B: LvlmBackend + ?Sized>(backend: &B, line: &str) -> String {
    let resp = match serde_json::from_str::<Request>(line) {
        Ok(req) => handle_request(backend, req),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                .unwrap_or(0);
            Response::failure(id, &BackendError::Protocol(format!("bad request: {e}")))
        }
    };
    serde_json::to_string(&resp).expect("response serializes")
}

/// Reads requests line by line until EOF, answering each in order.
pub fn serve_lines<B, R, W>(backend: &B, input: R, mut output: W) -> io::Result<()>
where
    B: LvlmBackend + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let out = handle_line(backend, &line);
        output.write_all(out.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Serves stdin/stdout until stdin closes.
pub fn serve_stdio<B: LvlmBackend + ?Sized>(backend: &B) -> io::Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve_lines(backend, stdin.lock(), stdout.lock())
}

/// Accepts Unix-socket connections forever, one thread per connection.
#[cfg(unix)]
pub fn serve_unix(path: &std::path::Path, backend: Arc<dyn LvlmBackend>) -> io::Result<()> {
    use std::os::unix::net::UnixListener;
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let listener = UnixListener::bind(path)?;
    tracing::info!(path = %path.display(), "serving backend protocol");
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    tracing::warn!("connection setup failed: {e}");
                    return;
                }
            };
            if let Err(e) = serve_lines(backend.as_ref(), reader, stream) {
                tracing::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

/// Accepts TCP connections forever, one thread per connection.
pub fn serve_tcp(addr: &str, backend: Arc<dyn LvlmBackend>) -> io::Result<()> {
    let listener = std::net::TcpListener::bind(addr)?;
    tracing::info!(addr, "serving backend protocol");
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    tracing::warn!("connection setup failed: {e}");
                    return;
                }
            };
            if let Err(e) = serve_lines(backend.as_ref(), reader, stream) {
                tracing::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}
