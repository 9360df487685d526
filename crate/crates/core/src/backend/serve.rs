//! Serves any [`Backend`] over the HTTP protocol. Used for local runs
//! against the stub and for exercising the HTTP client in tests.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{
    FinetuneRequest, FinetuneResponse, GenerateRequest, HealthResponse, LabelRequest, LabelResponse,
};
use super::{Backend, BackendError};

pub struct BackendServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl BackendServer {
    /// Binds `addr` (port 0 picks a free port) and starts `workers` threads.
    pub fn start(
        backend: Arc<dyn Backend>,
        addr: &str,
        workers: usize,
    ) -> std::io::Result<BackendServer> {
        let server = Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = server.clone();
                let backend = backend.clone();
                thread::spawn(move || {
                    for request in server.incoming_requests() {
                        handle(backend.as_ref(), request);
                    }
                })
            })
            .collect();
        Ok(BackendServer {
            server,
            workers,
            addr,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is shut down from another thread.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for BackendServer {
    fn drop(&mut self) {
        self.server.unblock();
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn json<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).unwrap_or_default();
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("content-type", "application/json").expect("static header"))
}

fn error_status(e: &BackendError) -> u16 {
    match e {
        BackendError::Rejected(_) | BackendError::Protocol(_) => 422,
        BackendError::Status { code, .. } => *code,
        _ => 503,
    }
}

fn decode<T: DeserializeOwned>(body: &str) -> Result<T, (u16, String)> {
    serde_json::from_str(body).map_err(|e| (400, format!("bad request body: {e}")))
}

fn dispatch(backend: &dyn Backend, method: &Method, path: &str, body: &str) -> Result<Vec<u8>, (u16, String)> {
    let fail = |e: BackendError| (error_status(&e), e.to_string());
    let out = match (method, path) {
        (Method::Post, "/v1/generate") => {
            let req: GenerateRequest = decode(body)?;
            serde_json::to_vec(&backend.generate(&req).map_err(fail)?)
        }
        (Method::Post, "/v1/finetune") => {
            let req: FinetuneRequest = decode(body)?;
            let model_id = backend.finetune(&req).map_err(fail)?;
            serde_json::to_vec(&FinetuneResponse { model_id })
        }
        (Method::Post, "/v1/label") => {
            let req: LabelRequest = decode(body)?;
            let label = backend.label(&req).map_err(fail)?;
            serde_json::to_vec(&LabelResponse { label })
        }
        (Method::Get, "/v1/health") => {
            let ok = backend.health().is_ok();
            serde_json::to_vec(&HealthResponse { ok })
        }
        _ => return Err((404, format!("no route for {method} {path}"))),
    };
    out.map_err(|e| (500, e.to_string()))
}

fn handle(backend: &dyn Backend, mut request: Request) {
    let mut body = String::new();
    let result = match request.as_reader().read_to_string(&mut body) {
        Ok(_) => dispatch(backend, request.method(), request.url(), &body),
        Err(e) => Err((400, e.to_string())),
    };
    let response = match result {
        Ok(bytes) => Response::from_data(bytes)
            .with_header(Header::from_bytes("content-type", "application/json").expect("static header")),
        Err((status, msg)) => json(status, &serde_json::json!({ "error": msg })),
    };
    let _ = request.respond(response);
}
