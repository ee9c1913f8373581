//! Canonical bus message envelope and its bit-exact XML wire form.
//!
//! Every party on the bus speaks exactly one interchange format: a fixed
//! element order, one namespace, no insignificant whitespace. Envelopes are
//! immutable values; all operations here are pure and safe to share across
//! tasks.

use chrono::{NaiveDateTime, Utc};
use thiserror::Error;
use uuid::Uuid;

use crate::xml::{self, escape_text, XmlError};

/// Namespace of the canonical envelope, v1.
pub const BUS_NS: &str = "urn:hygeia:bus:1";

/// Media type envelopes travel under.
pub const MEDIA_TYPE: &str = "application/xml; charset=utf-8";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("invalid {field} name: {value:?}")]
    InvalidName { field: &'static str, value: String },
    #[error("malformed body: {0}")]
    MalformedBody(XmlError),
    #[error("envelope invariant violated: {0}")]
    InvariantViolation(String),
    #[error("malformed xml: {0}")]
    MalformedXml(String),
    #[error("missing header field {0}")]
    MissingHeaderField(String),
    #[error("unknown namespace {0:?}")]
    UnknownNamespace(String),
    #[error("bad syntax in field {0}")]
    BadFieldSyntax(String),
}

/// In-band structured error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultCode {
    SenderError,
    ServiceUnavailable,
    Timeout,
    ContractMismatch,
    InternalError,
}

impl FaultCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultCode::SenderError => "SenderError",
            FaultCode::ServiceUnavailable => "ServiceUnavailable",
            FaultCode::Timeout => "Timeout",
            FaultCode::ContractMismatch => "ContractMismatch",
            FaultCode::InternalError => "InternalError",
        }
    }

    pub fn from_str(s: &str) -> Option<FaultCode> {
        Some(match s {
            "SenderError" => FaultCode::SenderError,
            "ServiceUnavailable" => FaultCode::ServiceUnavailable,
            "Timeout" => FaultCode::Timeout,
            "ContractMismatch" => FaultCode::ContractMismatch,
            "InternalError" => FaultCode::InternalError,
            _ => return None,
        })
    }
}

/// Structured error payload replacing a normal result body.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub code: FaultCode,
    pub reason: String,
    pub detail: Option<String>,
}

impl Fault {
    pub fn new(code: FaultCode, reason: impl Into<String>) -> Fault {
        Fault {
            code,
            reason: reason.into(),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Fault {
        self.detail = Some(detail.into());
        self
    }
}

/// Body of an envelope: a payload element or a fault, never both.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Exactly one well-formed XML element, stored as text.
    Content(String),
    Fault(Fault),
}

impl Payload {
    /// Validated content constructor. The root element name `Fault` is
    /// reserved for the fault form so the wire grammar stays unambiguous.
    pub fn content(fragment: impl Into<String>) -> Result<Payload, EnvelopeError> {
        let fragment = fragment.into();
        let root = xml::parse_fragment(&fragment).map_err(EnvelopeError::MalformedBody)?;
        if root.name == "Fault" {
            return Err(EnvelopeError::InvariantViolation(
                "content root element name Fault is reserved".into(),
            ));
        }
        Ok(Payload::Content(fragment))
    }

    pub fn is_fault(&self) -> bool {
        matches!(self, Payload::Fault(_))
    }

    /// Root element name of a content payload. Content fragments are
    /// validated at construction, so this cannot fail on a valid payload.
    pub fn content_root(&self) -> Option<String> {
        match self {
            Payload::Content(f) => xml::parse_fragment(f).ok().map(|e| e.name),
            Payload::Fault(_) => None,
        }
    }
}

/// Canonical `<Fault>` element text, reused wherever faults appear
/// outside an envelope body.
pub fn fault_to_xml(f: &Fault) -> String {
    let mut out = String::from("<Fault><Code>");
    out.push_str(f.code.as_str());
    out.push_str("</Code><Reason>");
    out.push_str(&escape_text(&f.reason));
    out.push_str("</Reason>");
    if let Some(detail) = &f.detail {
        out.push_str("<Detail>");
        out.push_str(&escape_text(detail));
        out.push_str("</Detail>");
    }
    out.push_str("</Fault>");
    out
}

/// Decodes a `<Fault>` element.
pub fn fault_from_element(el: &xml::Element) -> Result<Fault, EnvelopeError> {
    if el.name != "Fault" || !el.text.is_empty() {
        return Err(EnvelopeError::MalformedXml("expected Fault element".into()));
    }
    let mut kids = el.children.iter();
    let code_el = kids
        .next()
        .filter(|e| e.name == "Code")
        .ok_or_else(|| EnvelopeError::MissingHeaderField("Code".into()))?;
    let reason_el = kids
        .next()
        .filter(|e| e.name == "Reason")
        .ok_or_else(|| EnvelopeError::MissingHeaderField("Reason".into()))?;
    let detail = match kids.next() {
        Some(e) if e.name == "Detail" => Some(e.text.clone()),
        Some(e) => {
            return Err(EnvelopeError::MalformedXml(format!(
                "unexpected element {} in Fault",
                e.name
            )))
        }
        None => None,
    };
    if kids.next().is_some() {
        return Err(EnvelopeError::MalformedXml("trailing elements in Fault".into()));
    }
    let code = FaultCode::from_str(&code_el.text)
        .ok_or_else(|| EnvelopeError::BadFieldSyntax("Code".into()))?;
    Ok(Fault {
        code,
        reason: reason_el.text.clone(),
        detail,
    })
}

/// The canonical bus message.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub message_id: String,
    pub correlation_id: String,
    pub service: String,
    pub operation: String,
    pub timestamp: String,
    pub reply_to: Option<String>,
    pub body: Payload,
}

/// Lowercase contract/service name: `[a-z][a-z0-9._-]{0,63}`.
pub fn is_valid_service_name(s: &str) -> bool {
    let bytes = s.as_bytes();
    if bytes.is_empty() || bytes.len() > 64 {
        return false;
    }
    bytes[0].is_ascii_lowercase()
        && bytes[1..]
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'))
}

/// Operation / element name: `[A-Za-z][A-Za-z0-9_]{0,63}`.
pub fn is_valid_operation_name(s: &str) -> bool {
    let bytes = s.as_bytes();
    if bytes.is_empty() || bytes.len() > 64 {
        return false;
    }
    bytes[0].is_ascii_alphabetic()
        && bytes[1..]
            .iter()
            .all(|b| b.is_ascii_alphanumeric() || *b == b'_')
}

/// Canonical lowercase hyphenated UUID.
fn is_canonical_uuid(s: &str) -> bool {
    match Uuid::parse_str(s) {
        Ok(u) => u.hyphenated().to_string() == s,
        Err(_) => false,
    }
}

/// RFC 3339 UTC with seconds precision and a trailing `Z`.
fn is_canonical_timestamp(s: &str) -> bool {
    s.len() == 20
        && s.ends_with('Z')
        && NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ").is_ok()
}

pub fn now_timestamp() -> String {
    Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn fresh_id() -> String {
    Uuid::new_v4().hyphenated().to_string()
}

impl Envelope {
    /// Builds a fresh request: new message id, correlation id equal to it,
    /// timestamp set to the current UTC second.
    pub fn new_request(
        service: &str,
        operation: &str,
        body: &str,
        reply_to: Option<&str>,
    ) -> Result<Envelope, EnvelopeError> {
        if !is_valid_service_name(service) {
            return Err(EnvelopeError::InvalidName {
                field: "service",
                value: service.to_string(),
            });
        }
        if !is_valid_operation_name(operation) {
            return Err(EnvelopeError::InvalidName {
                field: "operation",
                value: operation.to_string(),
            });
        }
        let body = Payload::content(body)?;
        let id = fresh_id();
        Ok(Envelope {
            message_id: id.clone(),
            correlation_id: id,
            service: service.to_string(),
            operation: operation.to_string(),
            timestamp: now_timestamp(),
            reply_to: reply_to.map(str::to_string),
            body,
        })
    }

    /// Builds the reply to `request`: fresh message id, correlation id set
    /// to the request's message id, service/operation copied over.
    pub fn new_reply(request: &Envelope, body: Payload) -> Envelope {
        Envelope {
            message_id: fresh_id(),
            correlation_id: request.message_id.clone(),
            service: request.service.clone(),
            operation: request.operation.clone(),
            timestamp: now_timestamp(),
            reply_to: None,
            body,
        }
    }

    /// Reply carrying a fault.
    pub fn fault_reply(request: &Envelope, fault: Fault) -> Envelope {
        Envelope::new_reply(request, Payload::Fault(fault))
    }

    fn check_invariants(&self) -> Result<(), EnvelopeError> {
        if !is_canonical_uuid(&self.message_id) {
            return Err(EnvelopeError::InvariantViolation("message_id".into()));
        }
        if !is_canonical_uuid(&self.correlation_id) {
            return Err(EnvelopeError::InvariantViolation("correlation_id".into()));
        }
        if !is_valid_service_name(&self.service) {
            return Err(EnvelopeError::InvariantViolation("service".into()));
        }
        if !is_valid_operation_name(&self.operation) {
            return Err(EnvelopeError::InvariantViolation("operation".into()));
        }
        if !is_canonical_timestamp(&self.timestamp) {
            return Err(EnvelopeError::InvariantViolation("timestamp".into()));
        }
        match &self.body {
            Payload::Content(f) => {
                let root = xml::parse_fragment(f).map_err(EnvelopeError::MalformedBody)?;
                if root.name == "Fault" {
                    return Err(EnvelopeError::InvariantViolation(
                        "content root element name Fault is reserved".into(),
                    ));
                }
            }
            Payload::Fault(f) => {
                if f.reason.is_empty() {
                    return Err(EnvelopeError::InvariantViolation("fault reason empty".into()));
                }
            }
        }
        Ok(())
    }

    /// Root `<Envelope>` element only, without the XML declaration; used
    /// when embedding envelopes inside other documents.
    pub fn to_element_string(&self) -> Result<String, EnvelopeError> {
        self.check_invariants()?;
        let mut out = String::with_capacity(512);
        out.push_str(r#"<Envelope xmlns="urn:hygeia:bus:1"><Header>"#);
        out.push_str("<MessageId>");
        out.push_str(&self.message_id);
        out.push_str("</MessageId><CorrelationId>");
        out.push_str(&self.correlation_id);
        out.push_str("</CorrelationId><Service>");
        out.push_str(&self.service);
        out.push_str("</Service><Operation>");
        out.push_str(&self.operation);
        out.push_str("</Operation><Timestamp>");
        out.push_str(&self.timestamp);
        out.push_str("</Timestamp>");
        if let Some(reply_to) = &self.reply_to {
            out.push_str("<ReplyTo>");
            out.push_str(&escape_text(reply_to));
            out.push_str("</ReplyTo>");
        }
        out.push_str("</Header><Body>");
        match &self.body {
            Payload::Content(fragment) => out.push_str(fragment),
            Payload::Fault(f) => out.push_str(&fault_to_xml(f)),
        }
        out.push_str("</Body></Envelope>");
        Ok(out)
    }

    /// Canonical wire bytes. Deterministic: equal envelopes produce
    /// identical bytes.
    pub fn serialize(&self) -> Result<Vec<u8>, EnvelopeError> {
        let mut out = String::from(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        out.push_str(&self.to_element_string()?);
        Ok(out.into_bytes())
    }

    /// Parses canonical wire bytes back into an envelope;
    /// `parse(serialize(e)) == e` for every valid envelope.
    pub fn parse(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| EnvelopeError::MalformedXml("input is not UTF-8".into()))?;
        let root = xml::parse_document(text)
            .map_err(|e| EnvelopeError::MalformedXml(e.to_string()))?;
        Envelope::from_element(&root, text)
    }

    /// Decodes a parsed `<Envelope>` element; `source` is the text the
    /// element was parsed from (for byte-exact body recovery).
    pub fn from_element(root: &xml::Element, source: &str) -> Result<Envelope, EnvelopeError> {
        if root.name != "Envelope" {
            return Err(EnvelopeError::MalformedXml(format!(
                "expected root Envelope, found {}",
                root.name
            )));
        }
        match root.attr("xmlns") {
            Some(ns) if ns == BUS_NS => {}
            Some(ns) => return Err(EnvelopeError::UnknownNamespace(ns.to_string())),
            None => return Err(EnvelopeError::UnknownNamespace(String::new())),
        }
        if root.attrs.len() != 1 {
            return Err(EnvelopeError::MalformedXml(
                "unexpected attributes on Envelope".into(),
            ));
        }
        if root.children.len() != 2
            || root.children[0].name != "Header"
            || root.children[1].name != "Body"
            || !root.text.is_empty()
        {
            return Err(EnvelopeError::MalformedXml(
                "Envelope must contain exactly Header then Body".into(),
            ));
        }
        let header = &root.children[0];
        if !header.text.is_empty() {
            return Err(EnvelopeError::MalformedXml("stray text in Header".into()));
        }
        fn take_field(
            fields: &[xml::Element],
            idx: &mut usize,
            name: &str,
        ) -> Result<String, EnvelopeError> {
            match fields.get(*idx) {
                Some(e) if e.name == name => {
                    *idx += 1;
                    if !e.children.is_empty() || !e.attrs.is_empty() {
                        return Err(EnvelopeError::BadFieldSyntax(name.to_string()));
                    }
                    Ok(e.text.clone())
                }
                _ => Err(EnvelopeError::MissingHeaderField(name.to_string())),
            }
        }
        let fields = &header.children;
        let mut idx = 0;
        let message_id = take_field(fields, &mut idx, "MessageId")?;
        let correlation_id = take_field(fields, &mut idx, "CorrelationId")?;
        let service = take_field(fields, &mut idx, "Service")?;
        let operation = take_field(fields, &mut idx, "Operation")?;
        let timestamp = take_field(fields, &mut idx, "Timestamp")?;
        let reply_to = match fields.get(idx) {
            Some(e) if e.name == "ReplyTo" => Some(take_field(fields, &mut idx, "ReplyTo")?),
            _ => None,
        };
        if let Some(extra) = fields.get(idx) {
            return Err(EnvelopeError::MalformedXml(format!(
                "unexpected element {} in Header",
                extra.name
            )));
        }
        if !is_canonical_uuid(&message_id) {
            return Err(EnvelopeError::BadFieldSyntax("MessageId".into()));
        }
        if !is_canonical_uuid(&correlation_id) {
            return Err(EnvelopeError::BadFieldSyntax("CorrelationId".into()));
        }
        if !is_valid_service_name(&service) {
            return Err(EnvelopeError::BadFieldSyntax("Service".into()));
        }
        if !is_valid_operation_name(&operation) {
            return Err(EnvelopeError::BadFieldSyntax("Operation".into()));
        }
        if !is_canonical_timestamp(&timestamp) {
            return Err(EnvelopeError::BadFieldSyntax("Timestamp".into()));
        }
        if let Some(r) = &reply_to {
            if url::Url::parse(r).is_err() {
                return Err(EnvelopeError::BadFieldSyntax("ReplyTo".into()));
            }
        }

        let body_el = &root.children[1];
        if !body_el.text.is_empty() || body_el.children.len() != 1 {
            return Err(EnvelopeError::MalformedXml(
                "Body must contain exactly one element".into(),
            ));
        }
        let payload_el = &body_el.children[0];
        let body = if payload_el.name == "Fault" {
            Payload::Fault(fault_from_element(payload_el)?)
        } else {
            let (s, t) = body_el.inner_span;
            Payload::Content(source[s..t].to_string())
        };

        Ok(Envelope {
            message_id,
            correlation_id,
            service,
            operation,
            timestamp,
            reply_to,
            body,
        })
    }
}
