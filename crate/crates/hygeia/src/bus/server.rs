//! HTTP ingress for the bus: the submit/scatter endpoints plus the
//! registry admin surface, and the HTTP transport adapter used to reach
//! providers.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::Router;

use crate::envelope::{Envelope, Fault, FaultCode, MEDIA_TYPE};
use crate::registry::{decode_contract, encode_entry, validate_contract, Version};
use crate::serve::{spawn, ServerHandle};
use crate::xml;

use super::{encode_gather_result, Adapter, Bus, BusError, FailurePolicy, ScatterOutcome, TransportError};

/// Sends envelopes to `http://` endpoints via POST {endpoint}/service/invoke.
#[derive(Debug, Clone, Default)]
pub struct HttpAdapter {
    client: reqwest::Client,
}

impl HttpAdapter {
    pub fn new() -> HttpAdapter {
        HttpAdapter::default()
    }
}

#[async_trait]
impl Adapter for HttpAdapter {
    async fn send(
        &self,
        endpoint: &str,
        request: &Envelope,
        timeout: Duration,
    ) -> Result<Envelope, TransportError> {
        let url = format!("{}/service/invoke", endpoint.trim_end_matches('/'));
        let body = request
            .serialize()
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let response = self
            .client
            .post(url)
            .header(header::CONTENT_TYPE, MEDIA_TYPE)
            .timeout(timeout)
            .body(body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Unreachable(e.to_string())
                }
            })?;
        if response.status() != reqwest::StatusCode::OK {
            return Err(TransportError::Protocol(format!(
                "provider answered HTTP {}",
                response.status()
            )));
        }
        let bytes = response.bytes().await.map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Unreachable(e.to_string())
            }
        })?;
        Envelope::parse(&bytes).map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

/// Binds the bus HTTP surface and starts serving. Adapters are frozen
/// from this point on.
pub async fn serve(bus: Arc<Bus>, bind: &str) -> Result<ServerHandle, BusError> {
    let app = Router::new()
        .route("/bus/submit", post(handle_submit))
        .route("/bus/scatter", post(handle_scatter))
        .route("/registry/register", post(handle_register))
        .route("/registry/registrations/:id", delete(handle_deregister))
        .route("/registry/services", get(handle_services))
        .with_state(bus.clone());
    let handle = spawn(app, bind).await.map_err(BusError::Bind)?;
    bus.mark_running();
    Ok(handle)
}

fn xml_ok(body: String) -> axum::response::Response {
    (StatusCode::OK, [(header::CONTENT_TYPE, MEDIA_TYPE)], body).into_response()
}

fn bad_request(message: String) -> axum::response::Response {
    (StatusCode::BAD_REQUEST, message).into_response()
}

fn parse_min_version(params: &HashMap<String, String>) -> Result<Option<Version>, String> {
    match params.get("min_version") {
        Some(v) => v.parse().map(Some),
        None => Ok(None),
    }
}

fn parse_timeout(params: &HashMap<String, String>) -> Result<u64, String> {
    match params.get("timeout_ms") {
        Some(t) => match t.parse::<u64>() {
            Ok(ms) if ms >= 1 => Ok(ms),
            _ => Err(format!("bad timeout_ms {t:?}")),
        },
        None => Ok(2000),
    }
}

async fn handle_submit(
    State(bus): State<Arc<Bus>>,
    Query(params): Query<HashMap<String, String>>,
    body: axum::body::Bytes,
) -> axum::response::Response {
    let request = match Envelope::parse(&body) {
        Ok(e) => e,
        Err(e) => return bad_request(format!("unparseable envelope: {e}")),
    };
    let min_version = match parse_min_version(&params) {
        Ok(v) => v,
        Err(e) => return bad_request(e),
    };
    let timeout_ms = match parse_timeout(&params) {
        Ok(t) => t,
        Err(e) => return bad_request(e),
    };
    let reply = bus.submit(&request, min_version.as_ref(), timeout_ms).await;
    match reply.serialize() {
        Ok(bytes) => xml_ok(String::from_utf8(bytes).expect("canonical xml is utf-8")),
        Err(e) => bad_request(format!("unserializable reply: {e}")),
    }
}

async fn handle_scatter(
    State(bus): State<Arc<Bus>>,
    Query(params): Query<HashMap<String, String>>,
    body: axum::body::Bytes,
) -> axum::response::Response {
    let request = match Envelope::parse(&body) {
        Ok(e) => e,
        Err(e) => return bad_request(format!("unparseable envelope: {e}")),
    };
    let fragment = match &request.body {
        crate::envelope::Payload::Content(f) => f.clone(),
        crate::envelope::Payload::Fault(_) => {
            return bad_request("scatter request body must be content".into())
        }
    };
    let min_version = match parse_min_version(&params) {
        Ok(v) => v,
        Err(e) => return bad_request(e),
    };
    let timeout_ms = match parse_timeout(&params) {
        Ok(t) => t,
        Err(e) => return bad_request(e),
    };
    let policy = match params.get("policy") {
        Some(p) => match FailurePolicy::parse(p) {
            Some(policy) => policy,
            None => return bad_request(format!("bad policy {p:?}")),
        },
        None => FailurePolicy::default(),
    };
    let outcome = bus
        .scatter_with_correlation(
            &request.message_id,
            &request.service,
            min_version.as_ref(),
            &request.operation,
            &fragment,
            timeout_ms,
            policy,
        )
        .await;
    let in_band_fault = |fault: Fault| {
        let reply = Envelope::fault_reply(&request, fault);
        xml_ok(String::from_utf8(reply.serialize().expect("fault reply is valid")).unwrap())
    };
    match outcome {
        Ok(ScatterOutcome::Gathered(result)) => match encode_gather_result(&result) {
            Ok(doc) => xml_ok(doc),
            Err(e) => bad_request(format!("unserializable result: {e}")),
        },
        Ok(ScatterOutcome::OverallFault(fault)) => in_band_fault(fault),
        Err(BusError::NoProvider(service)) => in_band_fault(Fault::new(
            FaultCode::ServiceUnavailable,
            format!("no provider for service {service:?}"),
        )),
        Err(e) => bad_request(e.to_string()),
    }
}

fn persist(bus: &Bus) {
    if let Some(path) = bus.store_path() {
        if let Err(e) = bus.registry().save(path) {
            eprintln!("warning: failed to persist registry to {}: {e}", path.display());
        }
    }
}

async fn handle_register(
    State(bus): State<Arc<Bus>>,
    body: axum::body::Bytes,
) -> axum::response::Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return bad_request("body is not UTF-8".into()),
    };
    let root = match xml::parse_document(text) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed register document: {e}")),
    };
    if root.name != "Register" {
        return bad_request(format!("expected Register, found {}", root.name));
    }
    let contract_el = match root.child("Contract") {
        Some(el) => el,
        None => return bad_request("missing Contract".into()),
    };
    let contract = match decode_contract(contract_el) {
        Ok(c) => c,
        Err(e) => return bad_request(format!("bad contract: {e}")),
    };
    let violations = validate_contract(&contract);
    if !violations.is_empty() {
        return bad_request(format!("invalid contract: {}", violations.join("; ")));
    }
    let endpoint = match root.child_text("Endpoint") {
        Some(e) => e.to_string(),
        None => return bad_request("missing Endpoint".into()),
    };
    match bus.registry().register(contract, &endpoint) {
        Ok(entry) => {
            persist(&bus);
            xml_ok(format!(
                r#"<?xml version="1.0" encoding="UTF-8"?><Registered id="{}" sequence="{}"/>"#,
                entry.registration_id, entry.sequence
            ))
        }
        Err(e) => bad_request(e.to_string()),
    }
}

async fn handle_deregister(
    State(bus): State<Arc<Bus>>,
    Path(id): Path<String>,
) -> axum::response::Response {
    let removed = bus.registry().deregister(&id);
    if removed {
        persist(&bus);
    }
    xml_ok(format!(
        r#"<?xml version="1.0" encoding="UTF-8"?><Removed>{removed}</Removed>"#
    ))
}

async fn handle_services(
    State(bus): State<Arc<Bus>>,
    Query(params): Query<HashMap<String, String>>,
) -> axum::response::Response {
    let min_version = match parse_min_version(&params) {
        Ok(v) => v,
        Err(e) => return bad_request(e),
    };
    let entries = match params.get("name") {
        Some(name) => bus.registry().discover(name, min_version.as_ref()),
        None => bus.registry().entries(),
    };
    let mut out = String::from(r#"<?xml version="1.0" encoding="UTF-8"?><Services>"#);
    for entry in &entries {
        out.push_str(&encode_entry(entry));
    }
    out.push_str("</Services>");
    xml_ok(out)
}
