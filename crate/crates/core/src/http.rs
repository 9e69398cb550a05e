use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct ErrorPayload {
    error: String,
}

/// POSTs `body` as JSON and decodes the reply. An `{error}` payload maps to
/// [`Error::Backend`]; anything else that does not decode is malformed.
pub(crate) async fn post_json<B, R>(
    client: &reqwest::Client,
    url: &str,
    body: &B,
    timeout_ms: u64,
    bearer: Option<&str>,
) -> Result<R>
where
    B: Serialize + ?Sized,
    R: DeserializeOwned,
{
    let timeout = Duration::from_millis(timeout_ms);
    let mut req = client.post(url).json(body).timeout(timeout);
    if let Some(token) = bearer {
        req = req.bearer_auth(token);
    }
    let exchange = async {
        let resp = req.send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        Ok::<_, reqwest::Error>((status, bytes))
    };
    let (status, bytes) = match tokio::time::timeout(timeout, exchange).await {
        Err(_) => return Err(Error::BackendTimeout(timeout_ms)),
        Ok(Err(e)) if e.is_timeout() => return Err(Error::BackendTimeout(timeout_ms)),
        Ok(Err(e)) => return Err(Error::Transport(e.to_string())),
        Ok(Ok(pair)) => pair,
    };
    if let Ok(payload) = serde_json::from_slice::<ErrorPayload>(&bytes) {
        return Err(Error::Backend(payload.error));
    }
    if status.is_server_error() {
        return Err(Error::Transport(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(Error::Backend(format!(
            "HTTP {status}: {}",
            String::from_utf8_lossy(&bytes)
        )));
    }
    serde_json::from_slice(&bytes).map_err(|e| Error::MalformedResponse(e.to_string()))
}

pub(crate) fn client() -> reqwest::Client {
    reqwest::Client::new()
}

pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path)
}
