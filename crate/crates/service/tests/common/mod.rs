#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use triage_service::config::{Config, Inputs};
use triage_service::http::app;
use triage_service::Service;

pub fn core_fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

/// Service config over the core fixture set, storing state under `data`.
pub fn fixture_config(data: &Path) -> Config {
    Config {
        data_dir: data.to_path_buf(),
        inputs: Inputs {
            corpus: core_fixture("train.csv"),
            mapping: core_fixture("mapping.csv"),
            senders: core_fixture("senders.csv"),
            roster: Some(core_fixture("roster.csv")),
            rules: Some(core_fixture("rules.txt")),
            intents: Some(core_fixture("intents.toml")),
        },
        ..Config::default()
    }
}

pub fn golden_emails() -> Vec<Value> {
    std::fs::read_to_string(core_fixture("golden_emails.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub struct Api {
    pub svc: Arc<Service>,
    pub app: Router,
}

impl Api {
    pub fn open(cfg: Config) -> Self {
        let svc = Arc::new(Service::open(cfg).unwrap());
        let app = app(svc.clone());
        Self { svc, app }
    }

    pub async fn send(
        &self,
        method: &str,
        uri: &str,
        body: Option<&[u8]>,
        headers: &[(&str, &str)],
    ) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_vec())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, v)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send("GET", uri, None, &[]).await
    }

    pub async fn post(&self, uri: &str, body: &Value) -> (StatusCode, Value) {
        self.send("POST", uri, Some(body.to_string().as_bytes()), &[]).await
    }
}
