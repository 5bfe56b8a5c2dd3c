//! Mock server wrapping a tabular model.
//!
//! Handlers are stateless: every request is answered from the immutable
//! table, so concurrent calls cannot observe partial state. The server runs
//! on its own runtime thread and shuts down when the handle drops.

use std::net::SocketAddr;
use std::sync::Arc;
use std::sync::mpsc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use sharpen_core::backend::BackendError;
use sharpen_core::model::{Context, TabularModel};
use sharpen_core::seq::{TokenId, TokenSeq};

use crate::protocol::{ErrorBody, Meta, TopLRequest, TopLResponse, to_wire};

type Reply<T> = Result<Json<T>, (StatusCode, Json<ErrorBody>)>;

fn fail<T>(status: StatusCode, code: &str, message: String) -> Reply<T> {
    Err((status, Json(ErrorBody { code: code.to_string(), message })))
}

async fn meta(State(model): State<Arc<TabularModel>>) -> Json<Meta> {
    Json(Meta { vocab: model.vocab().names().to_vec(), max_len: model.max_len() })
}

async fn logprobs(State(model): State<Arc<TabularModel>>, body: Bytes) -> Reply<TopLResponse> {
    let req: TopLRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return fail(StatusCode::BAD_REQUEST, "bad_request", format!("malformed body: {e}")),
    };
    let vocab_size = model.vocab().size() as u32;
    let mut results = Vec::with_capacity(req.prefixes.len());
    for ids in &req.prefixes {
        if let Some(bad) = ids.iter().find(|&&t| t >= vocab_size) {
            return fail(
                StatusCode::BAD_REQUEST,
                "bad_token_id",
                format!("token id {bad} outside vocabulary of size {vocab_size}"),
            );
        }
        let prefix = TokenSeq::from_ids(ids.iter().copied().map(TokenId).collect());
        let ctx = Context::new(req.prompt_id.clone(), prefix);
        match model.next_token_logprobs(&ctx) {
            Ok(lp) => results.push(to_wire(&lp, req.top_l)),
            Err(e) => {
                let (status, code) = match &e {
                    BackendError::UnknownPrompt(_) => (StatusCode::NOT_FOUND, "unknown_prompt"),
                    BackendError::UnreachablePrefix { .. } => {
                        (StatusCode::UNPROCESSABLE_ENTITY, "unreachable_prefix")
                    }
                    BackendError::LengthOverflow { .. } => {
                        (StatusCode::PAYLOAD_TOO_LARGE, "length_overflow")
                    }
                    _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
                };
                return fail(status, code, e.to_string());
            }
        }
    }
    Ok(Json(TopLResponse { results }))
}

fn router(model: Arc<TabularModel>) -> Router {
    Router::new()
        .route("/v1/logprobs", post(logprobs))
        .route("/v1/meta", get(meta))
        .with_state(model)
}

/// A running mock server. Dropping the handle (or calling [`shutdown`]) stops
/// accepting, finishes in-flight requests, and joins the runtime thread.
///
/// [`shutdown`]: MockServerHandle::shutdown
pub struct MockServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    join: Option<JoinHandle<()>>,
}

impl MockServerHandle {
    /// The bound address; the port is concrete even when bound with port 0.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {}
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Binds `addr` and serves the model until the returned handle drops. Binding
/// `127.0.0.1:0` picks a free port, reported by [`MockServerHandle::addr`].
pub fn serve_mock(
    model: impl Into<Arc<TabularModel>>,
    addr: SocketAddr,
) -> std::io::Result<MockServerHandle> {
    let model = model.into();
    let (addr_tx, addr_rx) = mpsc::channel::<std::io::Result<SocketAddr>>();
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let join = std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = addr_tx.send(Err(e));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err(e));
                    return;
                }
            };
            match listener.local_addr() {
                Ok(local) => {
                    let _ = addr_tx.send(Ok(local));
                }
                Err(e) => {
                    let _ = addr_tx.send(Err(e));
                    return;
                }
            }
            let _ = axum::serve(listener, router(model))
                .with_graceful_shutdown(async move {
                    let _ = stop_rx.await;
                })
                .await;
        });
    });
    match addr_rx.recv() {
        Ok(Ok(addr)) => Ok(MockServerHandle { addr, stop: Some(stop_tx), join: Some(join) }),
        Ok(Err(e)) => {
            let _ = join.join();
            Err(e)
        }
        Err(_) => {
            let _ = join.join();
            Err(std::io::Error::other("server thread exited before reporting its address"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sharpen_core::toy;

    fn local() -> SocketAddr {
        "127.0.0.1:0".parse().unwrap()
    }

    #[test]
    fn serves_meta_on_an_ephemeral_port() {
        let server = serve_mock(toy::t1(), local()).unwrap();
        assert_ne!(server.addr().port(), 0);
        let body = reqwest::blocking::get(format!("{}/v1/meta", server.url()))
            .unwrap()
            .json::<Meta>()
            .unwrap();
        assert_eq!(body.vocab, toy::t1().vocab().names());
        assert_eq!(body.max_len, toy::t1().max_len());
        server.shutdown();
    }

    #[test]
    fn unknown_prompt_maps_to_not_found_with_code() {
        let server = serve_mock(toy::t1(), local()).unwrap();
        let client = reqwest::blocking::Client::new();
        let resp = client
            .post(format!("{}/v1/logprobs", server.url()))
            .json(&TopLRequest { prompt_id: "nope".into(), prefixes: vec![vec![]], top_l: 0 })
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 404);
        let err: ErrorBody = resp.json().unwrap();
        assert_eq!(err.code, "unknown_prompt");
    }

    #[test]
    fn malformed_body_and_bad_ids_are_client_errors() {
        let server = serve_mock(toy::t1(), local()).unwrap();
        let client = reqwest::blocking::Client::new();
        let base = server.url();

        let resp = client
            .post(format!("{base}/v1/logprobs"))
            .header("content-type", "application/json")
            .body("{not json")
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 400);
        assert_eq!(resp.json::<ErrorBody>().unwrap().code, "bad_request");

        let resp = client
            .post(format!("{base}/v1/logprobs"))
            .json(&TopLRequest { prompt_id: "q0".into(), prefixes: vec![vec![999]], top_l: 0 })
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 400);
        assert_eq!(resp.json::<ErrorBody>().unwrap().code, "bad_token_id");
    }

    #[test]
    fn rebinding_after_shutdown_succeeds() {
        let first = serve_mock(toy::t1(), local()).unwrap();
        let addr = first.addr();
        first.shutdown();
        let second = serve_mock(toy::t1(), addr).unwrap();
        assert_eq!(second.addr(), addr);
    }
}
