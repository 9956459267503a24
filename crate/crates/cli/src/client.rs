// SPDX-License-Identifier: Apache-2.0

//! Blocking client for a running instance's HTTP API.

use std::fmt;
use std::io::Read;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug)]
pub enum ClientError {
    /// The server answered with a non-success status.
    Http { status: u16, message: String },
    /// The server could not be reached or the reply was unreadable.
    Transport(String),
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientError::Http { status, message } => write!(f, "server returned {status}: {message}"),
            ClientError::Transport(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ClientError {}

pub struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(host: &str, port: u16, token: Option<String>) -> Self {
        Client {
            base: format!("http://{host}:{port}/api/v1"),
            token,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        let req = self.agent.request(method, &format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.set("Authorization", &format!("Bearer {t}")),
            None => req,
        }
    }

    fn finish(res: Result<ureq::Response, ureq::Error>) -> Result<ureq::Response, ClientError> {
        match res {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(status, r)) => {
                let body: Value = r.into_json().unwrap_or(Value::Null);
                let message = body["message"].as_str().unwrap_or("no details").to_string();
                Err(ClientError::Http { status, message })
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }

    fn json(res: Result<ureq::Response, ureq::Error>) -> Result<Value, ClientError> {
        Self::finish(res)?
            .into_json()
            .map_err(|e| ClientError::Transport(format!("unreadable reply: {e}")))
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        Self::json(self.request("GET", path).call())
    }

    pub fn post(&self, path: &str, body: &str) -> Result<Value, ClientError> {
        Self::json(self.request("POST", path).send_string(body))
    }

    pub fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        let mut out = Vec::new();
        Self::finish(self.request("GET", path).call())?
            .into_reader()
            .read_to_end(&mut out)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(out)
    }
}
