//! Blocking client for the flintlet HTTP service.

use std::time::Duration;

use reqwest::blocking::{Client as Http, RequestBuilder};
use serde::de::DeserializeOwned;

use flintlet_core::api::{
    BenchRequest, ErrorBody, ExplainRequest, GenRequest, Health, RunRequest, RunResponse,
};
use flintlet_core::harness::{BenchReport, FlintConfig, GenSummary};
use flintlet_core::plan::PhysicalPlan;

/// Environment variable naming the service base URL.
pub const URL_ENV: &str = "FLINTLET_URL";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport { url: String, source: reqwest::Error },
    #[error("server returned {status}: {message} ({error})")]
    Api {
        status: u16,
        error: String,
        message: String,
    },
    #[error("unreadable response from {url}: {source}")]
    Decode { url: String, source: reqwest::Error },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        // Bench runs can take a while; the server does not stream progress.
        let http = Http::builder()
            .timeout(Duration::from_secs(3600))
            .build()
            .expect("http client");
        Client {
            base: base_url.into().trim_end_matches('/').to_string(),
            http,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, path: &str, req: RequestBuilder) -> Result<T, ClientError> {
        let url = self.url(path);
        let resp = req.send().map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        let status = resp.status();
        if !status.is_success() {
            let (error, message) = match resp.json::<ErrorBody>() {
                Ok(b) => (b.error, b.message),
                Err(_) => (
                    "http".to_string(),
                    status.canonical_reason().unwrap_or("").to_string(),
                ),
            };
            return Err(ClientError::Api {
                status: status.as_u16(),
                error,
                message,
            });
        }
        resp.json()
            .map_err(|source| ClientError::Decode { url, source })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.send(path, self.http.get(self.url(path)))
    }

    fn post<B: serde::Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ClientError> {
        self.send(path, self.http.post(self.url(path)).json(body))
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.get("/health")
    }

    pub fn config(&self) -> Result<FlintConfig, ClientError> {
        self.get("/v1/config")
    }

    pub fn generate(&self, req: &GenRequest) -> Result<GenSummary, ClientError> {
        self.post("/v1/datasets", req)
    }

    pub fn run(&self, req: &RunRequest) -> Result<RunResponse, ClientError> {
        self.post("/v1/runs", req)
    }

    pub fn bench(&self, req: &BenchRequest) -> Result<BenchReport, ClientError> {
        self.post("/v1/bench", req)
    }

    pub fn explain(&self, req: &ExplainRequest) -> Result<PhysicalPlan, ClientError> {
        self.post("/v1/explain", req)
    }
}
