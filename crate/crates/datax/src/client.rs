//! Blocking HTTP client for the API server.

use std::time::Duration;

use reqwest::Url;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    Transport(String),
    /// The server answered with an error status.
    #[error("{message}")]
    Api { status: u16, code: String, message: String },
}

impl ClientError {
    /// Whether the failure is the caller's fault (4xx) rather than the
    /// server's or the network's.
    pub fn is_user_error(&self) -> bool {
        matches!(self, ClientError::Api { status, .. } if (400..500).contains(status))
    }
}

pub struct ApiClient {
    base: Url,
    http: reqwest::blocking::Client,
}

impl ApiClient {
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let base = Url::parse(base).map_err(|e| ClientError::Transport(format!("bad server URL `{base}`: {e}")))?;
        Ok(ApiClient { base, http })
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<String, ClientError> {
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if (200..300).contains(&status) {
            return Ok(text);
        }
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        let field = |k: &str| body["error"][k].as_str().map(str::to_string);
        Err(ClientError::Api {
            status,
            code: field("code").unwrap_or_else(|| "Http".into()),
            message: field("message").unwrap_or_else(|| format!("HTTP {status}: {text}")),
        })
    }

    fn json(text: String) -> Result<Value, ClientError> {
        serde_json::from_str(&text).map_err(|e| ClientError::Transport(format!("invalid response: {e}")))
    }

    /// The base URL extended by `segments`, each percent-encoded.
    fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut()
            .expect("http URLs have paths")
            .pop_if_empty()
            .extend(segments);
        url
    }

    pub fn get(&self, path: &[&str]) -> Result<Value, ClientError> {
        Self::json(self.send(self.http.get(self.url(path)))?)
    }

    pub fn get_text(&self, path: &[&str]) -> Result<String, ClientError> {
        self.send(self.http.get(self.url(path)))
    }

    pub fn post_text(&self, path: &[&str], body: String) -> Result<Value, ClientError> {
        Self::json(self.send(self.http.post(self.url(path)).header("content-type", "application/yaml").body(body))?)
    }

    pub fn delete(&self, path: &[&str]) -> Result<Value, ClientError> {
        Self::json(self.send(self.http.delete(self.url(path)))?)
    }
}
