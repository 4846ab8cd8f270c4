//! Server side of the oracle protocol, for hosting any backend (in practice the
//! synthetic world) over stdio or HTTP.

use std::io::{BufRead, Write};
use std::sync::Arc;

use axum::routing::post;
use axum::{Json, Router};

use super::protocol::{codes, encode_line, Op, Request, Response};
use super::{DistanceBackend, GeneratorBackend, ImageRef, OracleError};
use crate::latent::LatentVector;

pub trait OracleBackend: GeneratorBackend + DistanceBackend {}
impl<T: GeneratorBackend + DistanceBackend> OracleBackend for T {}

pub fn handle(backend: &dyn OracleBackend, request: Request) -> Response {
    let id = request.id;
    let result = match request.op {
        Op::Generate { latent } => LatentVector::new(latent)
            .map_err(|e| OracleError::Protocol { code: codes::BAD_REQUEST.into(), message: e.to_string() })
            .and_then(|v| backend.generate(&v))
            .map(|image| Response::image(id, image.as_str())),
        Op::Distance { model, a, b } => ImageRef::new(a)
            .and_then(|a| Ok((a, ImageRef::new(b)?)))
            .and_then(|(a, b)| backend.distance(&model, &a, &b))
            .map(|d| Response::distance(id, d)),
    };
    result.unwrap_or_else(|e| match e {
        OracleError::Protocol { code, message } => Response::error(id, code, message),
        OracleError::BadImageRef(r) => Response::error(id, codes::BAD_REQUEST, format!("invalid image reference {r:?}")),
        other => Response::error(id, codes::FAILED, other.to_string()),
    })
}

/// Answers requests line by line until `input` reaches EOF.
pub fn serve_lines(backend: &dyn OracleBackend, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(backend, req),
            Err(e) => {
                // Recover the id when the body is JSON but not a valid request.
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                Response::error(id, codes::BAD_REQUEST, e.to_string())
            }
        };
        output.write_all(encode_line(&response).as_bytes())?;
        output.flush()?;
    }
    Ok(())
}

/// Router exposing `POST /v1/oracle`.
pub fn http_router(backend: Arc<dyn OracleBackend>) -> Router {
    Router::new().route(
        "/v1/oracle",
        post(move |Json(req): Json<Request>| {
            let backend = backend.clone();
            async move {
                let resp = tokio::task::spawn_blocking(move || handle(backend.as_ref(), req))
                    .await
                    .unwrap_or_else(|e| Response::error(0, codes::FAILED, e.to_string()));
                Json(resp)
            }
        }),
    )
}
