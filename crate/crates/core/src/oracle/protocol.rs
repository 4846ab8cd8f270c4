//! Newline-delimited JSON messages exchanged with oracle processes.
//!
//! ```text
//! {"id": 1, "op": "generate", "latent": [0.1, ...]}
//! {"id": 2, "op": "distance", "model": "dlib", "a": "images/x.png", "b": "images/y.png"}
//! {"id": 1, "ok": {"image": "images/x.png"}}
//! {"id": 2, "ok": {"distance": 0.42}}
//! {"id": 2, "err": {"code": "no_face", "message": "..."}}
//! ```

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Generate { latent: Vec<f64> },
    Distance { model: String, a: String, b: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok(Payload),
    Err(ErrorBody),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Image { image: String },
    Distance { distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Error codes used by the built-in oracle servers.
pub mod codes {
    pub const BAD_REQUEST: &str = "bad_request";
    pub const DIM_MISMATCH: &str = "dim_mismatch";
    pub const NOT_FOUND: &str = "not_found";
    pub const UNSUPPORTED: &str = "unsupported";
    pub const FAILED: &str = "failed";
}

impl Response {
    pub fn image(id: u64, image: impl Into<String>) -> Self {
        Self { id, outcome: Outcome::Ok(Payload::Image { image: image.into() }) }
    }

    pub fn distance(id: u64, distance: f64) -> Self {
        Self { id, outcome: Outcome::Ok(Payload::Distance { distance }) }
    }

    pub fn error(id: u64, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { id, outcome: Outcome::Err(ErrorBody { code: code.into(), message: message.into() }) }
    }
}

pub fn encode_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol messages always serialize");
    s.push('\n');
    s
}
