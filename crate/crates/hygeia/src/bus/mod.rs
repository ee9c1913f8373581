//! Enterprise service bus core: transport adapters, round-robin routing,
//! sequential and scatter-gather orchestration, timeout and failure
//! policy enforcement. Every outcome is expressible as an in-band fault,
//! so the one wire format covers the error paths too.

mod server;

pub use server::{serve, HttpAdapter};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use thiserror::Error;
use uuid::Uuid;

use crate::envelope::{
    fault_from_element, fault_to_xml, now_timestamp, Envelope, Fault, FaultCode, Payload,
    BUS_NS,
};
use crate::registry::{Registry, RegistryEntry, Version};
use crate::xml::{self, escape_attr, Element};

#[derive(Debug, Error)]
pub enum BusError {
    #[error("no provider registered for {0:?}")]
    NoProvider(String),
    #[error("bus is already serving; adapters are fixed")]
    BusAlreadyRunning,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("bind error: {0}")]
    Bind(std::io::Error),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport deadline exceeded")]
    Timeout,
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// One transport, keyed by endpoint URL scheme.
#[async_trait]
pub trait Adapter: Send + Sync {
    async fn send(
        &self,
        endpoint: &str,
        request: &Envelope,
        timeout: Duration,
    ) -> Result<Envelope, TransportError>;
}

/// What to do when some providers fault during a scatter-gather.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    AllOrFault,
    /// Collect successes, attach faults. The default: partial research
    /// answers beat total failure.
    #[default]
    Partial,
}

impl FailurePolicy {
    pub fn parse(s: &str) -> Option<FailurePolicy> {
        match s {
            "all" => Some(FailurePolicy::AllOrFault),
            "partial" => Some(FailurePolicy::Partial),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FailurePolicy::AllOrFault => "all",
            FailurePolicy::Partial => "partial",
        }
    }
}

/// One step of an orchestration plan.
#[derive(Debug, Clone)]
pub enum Step {
    Invoke {
        service: String,
        min_version: Option<Version>,
        operation: String,
        body: String,
        timeout_ms: u64,
    },
    ScatterGather {
        service: String,
        min_version: Option<Version>,
        operation: String,
        body: String,
        timeout_ms: u64,
        policy: FailurePolicy,
    },
}

/// Ordered, non-empty step list; steps execute strictly in order.
#[derive(Debug, Clone)]
pub struct OrchestrationPlan {
    pub steps: Vec<Step>,
}

/// Accumulated scatter-gather outcome. Replies are ordered by the
/// provider's registration sequence regardless of arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrchestrationResult {
    pub replies: Vec<(String, Envelope)>,
    pub faults: Vec<(String, Fault)>,
    pub elapsed_ms: u64,
}

/// A scatter-gather either gathers, or collapses into one overall fault
/// under the all-or-fault policy.
#[derive(Debug, Clone, PartialEq)]
pub enum ScatterOutcome {
    Gathered(OrchestrationResult),
    OverallFault(Fault),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Reply(Envelope),
    Gathered(OrchestrationResult),
    Fault(Fault),
}

type RouteKey = (String, Option<Version>);

/// The bus. Per-request state is confined to each call; the round-robin
/// counters are the only shared mutable state.
pub struct Bus {
    registry: Arc<Registry>,
    adapters: RwLock<HashMap<String, Arc<dyn Adapter>>>,
    round_robin: Mutex<HashMap<RouteKey, usize>>,
    running: AtomicBool,
    store_path: Option<PathBuf>,
}

impl Bus {
    pub fn new(registry: Arc<Registry>) -> Bus {
        Bus {
            registry,
            adapters: RwLock::new(HashMap::new()),
            round_robin: Mutex::new(HashMap::new()),
            running: AtomicBool::new(false),
            store_path: None,
        }
    }

    /// Persist the registry to `path` after every admin mutation.
    pub fn with_store_path(mut self, path: PathBuf) -> Bus {
        self.store_path = Some(path);
        self
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub(crate) fn store_path(&self) -> Option<&PathBuf> {
        self.store_path.as_ref()
    }

    pub(crate) fn mark_running(&self) {
        self.running.store(true, Ordering::SeqCst);
    }

    /// Binds `adapter` to endpoints of `scheme`. Replacement is allowed
    /// until the bus starts serving.
    pub fn register_adapter(&self, scheme: &str, adapter: Arc<dyn Adapter>) -> Result<(), BusError> {
        if self.running.load(Ordering::SeqCst) {
            return Err(BusError::BusAlreadyRunning);
        }
        if scheme.is_empty() || !scheme.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(BusError::InvalidRequest(format!("bad scheme {scheme:?}")));
        }
        self.adapters.write().unwrap().insert(scheme.to_string(), adapter);
        Ok(())
    }

    fn adapter_for(&self, endpoint: &str) -> Option<Arc<dyn Adapter>> {
        let scheme = endpoint.split(':').next().unwrap_or("");
        self.adapters.read().unwrap().get(scheme).cloned()
    }

    /// Round-robin provider selection per (service, version filter): the
    /// k-th call returns the (k mod n)-th entry of the current discover
    /// list.
    pub fn route(
        &self,
        request: &Envelope,
        min_version: Option<&Version>,
    ) -> Result<RegistryEntry, BusError> {
        let entries = self.registry.discover(&request.service, min_version);
        if entries.is_empty() {
            return Err(BusError::NoProvider(request.service.clone()));
        }
        let key = (request.service.clone(), min_version.copied());
        let mut counters = self.round_robin.lock().unwrap();
        let counter = counters.entry(key).or_insert(0);
        let entry = entries[*counter % entries.len()].clone();
        *counter += 1;
        Ok(entry)
    }

    async fn send_to_entry(
        &self,
        entry: &RegistryEntry,
        request: &Envelope,
        timeout: Duration,
    ) -> Result<Envelope, Fault> {
        let op = entry.contract.operation(&request.operation).ok_or_else(|| {
            Fault::new(
                FaultCode::ContractMismatch,
                format!(
                    "operation {:?} is not part of contract {} v{}",
                    request.operation, entry.contract.name, entry.contract.version
                ),
            )
        })?;
        if let Payload::Content(fragment) = &request.body {
            let root = xml::parse_fragment(fragment)
                .map_err(|e| Fault::new(FaultCode::SenderError, format!("malformed body: {e}")))?;
            if root.name != op.input_root {
                return Err(Fault::new(
                    FaultCode::ContractMismatch,
                    format!(
                        "request body root {:?} does not match contract input root {:?}",
                        root.name, op.input_root
                    ),
                ));
            }
        }
        let adapter = self.adapter_for(&entry.endpoint).ok_or_else(|| {
            Fault::new(
                FaultCode::ServiceUnavailable,
                format!("no adapter for endpoint {}", entry.endpoint),
            )
        })?;
        let sent = tokio::time::timeout(timeout, adapter.send(&entry.endpoint, request, timeout));
        let mut reply = match sent.await {
            Err(_) => {
                return Err(Fault::new(
                    FaultCode::Timeout,
                    format!("provider {} missed the {}ms deadline", entry.endpoint, timeout.as_millis()),
                ))
            }
            Ok(Err(TransportError::Timeout)) => {
                return Err(Fault::new(
                    FaultCode::Timeout,
                    format!("provider {} missed the {}ms deadline", entry.endpoint, timeout.as_millis()),
                ))
            }
            Ok(Err(TransportError::Unreachable(m) | TransportError::Protocol(m))) => {
                return Err(Fault::new(FaultCode::ServiceUnavailable, m))
            }
            Ok(Ok(reply)) => reply,
        };
        if let Payload::Content(fragment) = &reply.body {
            let root = xml::parse_fragment(fragment).map_err(|e| {
                Fault::new(FaultCode::ContractMismatch, format!("unparseable reply body: {e}"))
            })?;
            if root.name != op.output_root {
                return Err(Fault::new(
                    FaultCode::ContractMismatch,
                    format!(
                        "reply body root {:?} does not match contract output root {:?}",
                        root.name, op.output_root
                    ),
                ));
            }
        }
        // the bus guarantees correlation even against misbehaving providers
        reply.correlation_id = request.message_id.clone();
        Ok(reply)
    }

    /// Routes the request to one provider and returns its reply; faults
    /// (timeout, unavailable, contract mismatch) come back as fault-bodied
    /// envelopes correlated to the request.
    pub async fn submit(
        &self,
        request: &Envelope,
        min_version: Option<&Version>,
        timeout_ms: u64,
    ) -> Envelope {
        let entry = match self.route(request, min_version) {
            Ok(entry) => entry,
            Err(_) => {
                return Envelope::fault_reply(
                    request,
                    Fault::new(
                        FaultCode::ServiceUnavailable,
                        format!("no provider for service {:?}", request.service),
                    ),
                )
            }
        };
        match self
            .send_to_entry(&entry, request, Duration::from_millis(timeout_ms.max(1)))
            .await
        {
            Ok(reply) => reply,
            Err(fault) => Envelope::fault_reply(request, fault),
        }
    }

    /// Dispatches one logical request to every discovered provider
    /// concurrently and accumulates replies under the deadline.
    pub async fn scatter_gather(
        &self,
        service: &str,
        min_version: Option<&Version>,
        operation: &str,
        body: &str,
        timeout_ms: u64,
        policy: FailurePolicy,
    ) -> Result<ScatterOutcome, BusError> {
        let root_id = Uuid::new_v4().hyphenated().to_string();
        self.scatter_with_correlation(&root_id, service, min_version, operation, body, timeout_ms, policy)
            .await
    }

    /// Scatter with an explicit correlation root: every per-provider hop
    /// gets a fresh message id, while the gathered replies carry the
    /// caller-visible correlation id.
    pub async fn scatter_with_correlation(
        &self,
        correlation_id: &str,
        service: &str,
        min_version: Option<&Version>,
        operation: &str,
        body: &str,
        timeout_ms: u64,
        policy: FailurePolicy,
    ) -> Result<ScatterOutcome, BusError> {
        let payload = Payload::content(body)
            .map_err(|e| BusError::InvalidRequest(e.to_string()))?;
        let entries = self.registry.discover(service, min_version);
        if entries.is_empty() {
            return Err(BusError::NoProvider(service.to_string()));
        }
        let timeout = Duration::from_millis(timeout_ms.max(1));
        let start = Instant::now();
        let sends = entries.iter().map(|entry| {
            let hop = Envelope {
                message_id: Uuid::new_v4().hyphenated().to_string(),
                correlation_id: correlation_id.to_string(),
                service: service.to_string(),
                operation: operation.to_string(),
                timestamp: now_timestamp(),
                reply_to: None,
                body: payload.clone(),
            };
            async move {
                let outcome = self.send_to_entry(entry, &hop, timeout).await;
                (entry.sequence, entry.endpoint.clone(), outcome)
            }
        });
        let mut settled: Vec<(u64, String, Result<Envelope, Fault>)> =
            futures::future::join_all(sends).await;
        settled.sort_by_key(|(sequence, _, _)| *sequence);
        let mut replies = Vec::new();
        let mut faults = Vec::new();
        for (_, endpoint, outcome) in settled {
            match outcome {
                Ok(mut reply) => {
                    reply.correlation_id = correlation_id.to_string();
                    replies.push((endpoint, reply));
                }
                Err(fault) => faults.push((endpoint, fault)),
            }
        }
        let result = OrchestrationResult {
            replies,
            faults,
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        if policy == FailurePolicy::AllOrFault && !result.faults.is_empty() {
            let detail = result
                .faults
                .iter()
                .map(|(endpoint, f)| format!("{endpoint}: {} ({})", f.code.as_str(), f.reason))
                .collect::<Vec<_>>()
                .join("; ");
            return Ok(ScatterOutcome::OverallFault(
                Fault::new(
                    FaultCode::ServiceUnavailable,
                    format!(
                        "{} of {} providers faulted under all-or-fault policy",
                        result.faults.len(),
                        result.faults.len() + result.replies.len()
                    ),
                )
                .with_detail(detail),
            ));
        }
        Ok(ScatterOutcome::Gathered(result))
    }

    /// Executes plan steps strictly in order, halting at the first step
    /// that yields an overall fault.
    pub async fn orchestrate(&self, plan: &OrchestrationPlan) -> Result<Vec<StepResult>, BusError> {
        if plan.steps.is_empty() {
            return Err(BusError::InvalidRequest("plan has no steps".into()));
        }
        let mut results = Vec::new();
        for step in &plan.steps {
            match step {
                Step::Invoke {
                    service,
                    min_version,
                    operation,
                    body,
                    timeout_ms,
                } => {
                    let request = Envelope::new_request(service, operation, body, None)
                        .map_err(|e| BusError::InvalidRequest(e.to_string()))?;
                    let reply = self.submit(&request, min_version.as_ref(), *timeout_ms).await;
                    match reply.body.clone() {
                        Payload::Fault(fault) => {
                            results.push(StepResult::Fault(fault));
                            return Ok(results);
                        }
                        Payload::Content(_) => results.push(StepResult::Reply(reply)),
                    }
                }
                Step::ScatterGather {
                    service,
                    min_version,
                    operation,
                    body,
                    timeout_ms,
                    policy,
                } => {
                    match self
                        .scatter_gather(service, min_version.as_ref(), operation, body, *timeout_ms, *policy)
                        .await
                    {
                        Ok(ScatterOutcome::Gathered(result)) => {
                            results.push(StepResult::Gathered(result))
                        }
                        Ok(ScatterOutcome::OverallFault(fault)) => {
                            results.push(StepResult::Fault(fault));
                            return Ok(results);
                        }
                        Err(BusError::NoProvider(service)) => {
                            results.push(StepResult::Fault(Fault::new(
                                FaultCode::ServiceUnavailable,
                                format!("no provider for service {service:?}"),
                            )));
                            return Ok(results);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(results)
    }
}

/// `<GatherResult>` document: sequence-ordered replies, then provider
/// faults, then elapsed time.
pub fn encode_gather_result(result: &OrchestrationResult) -> Result<String, crate::envelope::EnvelopeError> {
    let mut out = format!(r#"<?xml version="1.0" encoding="UTF-8"?><GatherResult xmlns="{BUS_NS}">"#);
    for (endpoint, reply) in &result.replies {
        out.push_str(&format!(r#"<Reply endpoint="{}">"#, escape_attr(endpoint)));
        out.push_str(&reply.to_element_string()?);
        out.push_str("</Reply>");
    }
    for (endpoint, fault) in &result.faults {
        out.push_str(&format!(r#"<ProviderFault endpoint="{}">"#, escape_attr(endpoint)));
        out.push_str(&fault_to_xml(fault));
        out.push_str("</ProviderFault>");
    }
    out.push_str(&format!("<ElapsedMs>{}</ElapsedMs></GatherResult>", result.elapsed_ms));
    Ok(out)
}

/// Inverse of [`encode_gather_result`]; `source` is the document text the
/// element came from.
pub fn decode_gather_result(root: &Element, source: &str) -> Result<OrchestrationResult, String> {
    if root.name != "GatherResult" || root.attr("xmlns") != Some(BUS_NS) {
        return Err("not a GatherResult document".into());
    }
    let mut replies = Vec::new();
    let mut faults = Vec::new();
    for reply_el in root.children_named("Reply") {
        let endpoint = reply_el.attr("endpoint").ok_or("Reply missing endpoint")?;
        let envelope_el = reply_el
            .children
            .first()
            .filter(|_| reply_el.children.len() == 1)
            .ok_or("Reply must wrap one Envelope")?;
        let envelope =
            Envelope::from_element(envelope_el, source).map_err(|e| e.to_string())?;
        replies.push((endpoint.to_string(), envelope));
    }
    for fault_el in root.children_named("ProviderFault") {
        let endpoint = fault_el.attr("endpoint").ok_or("ProviderFault missing endpoint")?;
        let inner = fault_el
            .children
            .first()
            .filter(|_| fault_el.children.len() == 1)
            .ok_or("ProviderFault must wrap one Fault")?;
        faults.push((
            endpoint.to_string(),
            fault_from_element(inner).map_err(|e| e.to_string())?,
        ));
    }
    let elapsed_ms = root
        .child_text("ElapsedMs")
        .ok_or("missing ElapsedMs")?
        .parse()
        .map_err(|_| "bad ElapsedMs")?;
    Ok(OrchestrationResult {
        replies,
        faults,
        elapsed_ms,
    })
}
