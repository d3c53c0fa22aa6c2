use std::time::Duration;

use bpo_core::endpoint::{GenerateRequest, GenerateResponse, ImageEndpoint};
use bpo_core::{BpoError, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// Blocking client for one provider.
#[derive(Clone, Debug)]
pub struct HttpEndpoint {
    url: String,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    /// `url` is either the provider base (`.../providers/{name}`) or the full
    /// generate URL.
    pub fn new(url: &str) -> Self {
        Self::with_timeout(url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: &str, timeout: Duration) -> Self {
        let url = url.trim_end_matches('/');
        let url = if url.ends_with("/v1/generate") { url.to_string() } else { format!("{url}/v1/generate") };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEndpoint { url, agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Raw exchange: status and body text.
    pub fn post_raw(&self, body: &str) -> Result<(u16, String)> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| BpoError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| BpoError::Transport(e.to_string()))?;
        Ok((status, text))
    }
}

impl ImageEndpoint for HttpEndpoint {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        let (status, text) = self.post_raw(&serde_json::to_string(req)?)?;
        if status != 200 {
            return Err(BpoError::Protocol(format!("status {status}: {text}")));
        }
        let resp: GenerateResponse =
            serde_json::from_str(&text).map_err(|e| BpoError::Protocol(format!("bad response body: {e}")))?;
        resp.validate(req)?;
        Ok(resp)
    }
}
