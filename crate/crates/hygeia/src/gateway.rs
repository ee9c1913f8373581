//! Consumer-facing tier: accepts one-shot searches, drives the bus's
//! scatter endpoint, merges per-hospital results into federation-wide
//! answers, and formats them as XML or JSON. Request handling is
//! stateless; everything shared lives behind the bus.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use chrono::NaiveDate;
use serde_json::json;
use thiserror::Error;

use crate::bus::decode_gather_result;
use crate::envelope::{fault_to_xml, Envelope, Fault, Payload, MEDIA_TYPE};
use crate::provider::{
    decode_case_list, decode_region_counts, decode_treatment_list, encode_case_list,
    encode_query, encode_region_counts, encode_treatment_list, CaseQuery, HealthRecord,
};
use crate::serve::{spawn, ServerHandle};
use crate::xml::{self, escape_attr};

pub const GATEWAY_NS: &str = "urn:hygeia:gateway:1";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("bus unreachable: {0}")]
    BusUnreachable(String),
    #[error("unsupported format {0:?}")]
    UnsupportedFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchKind {
    Cases,
    RegionCounts,
    Treatments,
}

impl SearchKind {
    pub fn parse(s: &str) -> Option<SearchKind> {
        match s {
            "cases" => Some(SearchKind::Cases),
            "region_counts" => Some(SearchKind::RegionCounts),
            "treatments" => Some(SearchKind::Treatments),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SearchKind::Cases => "cases",
            SearchKind::RegionCounts => "region_counts",
            SearchKind::Treatments => "treatments",
        }
    }

    pub fn operation(self) -> &'static str {
        match self {
            SearchKind::Cases => "FindCases",
            SearchKind::RegionCounts => "CountCasesByRegion",
            SearchKind::Treatments => "ListTreatments",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Xml,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format, GatewayError> {
        match s {
            "xml" => Ok(Format::Xml),
            "json" => Ok(Format::Json),
            other => Err(GatewayError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// Transport-neutral form of the consumer's search input.
#[derive(Debug, Clone)]
pub struct SearchRequest {
    pub kind: SearchKind,
    pub diagnosis_code: String,
    pub region_code: Option<String>,
    pub date_from: Option<NaiveDate>,
    pub date_to: Option<NaiveDate>,
    pub timeout_ms: u64,
    pub policy: crate::bus::FailurePolicy,
}

impl SearchRequest {
    pub fn new(kind: SearchKind, diagnosis_code: impl Into<String>) -> SearchRequest {
        SearchRequest {
            kind,
            diagnosis_code: diagnosis_code.into(),
            region_code: None,
            date_from: None,
            date_to: None,
            timeout_ms: 2000,
            policy: crate::bus::FailurePolicy::Partial,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.diagnosis_code.is_empty() {
            return Err(GatewayError::BadRequest("diagnosis is required".into()));
        }
        if let (Some(from), Some(to)) = (self.date_from, self.date_to) {
            if from > to {
                return Err(GatewayError::BadRequest(format!(
                    "date_from {from} is after date_to {to}"
                )));
            }
        }
        // kind-appropriate fields only
        match self.kind {
            SearchKind::Cases => {}
            SearchKind::RegionCounts => {
                if self.region_code.is_some() {
                    return Err(GatewayError::BadRequest(
                        "region filter does not apply to region_counts".into(),
                    ));
                }
            }
            SearchKind::Treatments => {
                if self.region_code.is_some() || self.date_from.is_some() || self.date_to.is_some()
                {
                    return Err(GatewayError::BadRequest(
                        "treatments accepts only a diagnosis".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn to_query(&self) -> CaseQuery {
        CaseQuery {
            diagnosis_code: self.diagnosis_code.clone(),
            region_code: self.region_code.clone(),
            date_from: self.date_from,
            date_to: self.date_to,
        }
    }
}

/// Decoded body of one provider's reply.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryResult {
    Cases(Vec<HealthRecord>),
    RegionCounts(BTreeMap<String, u64>),
    Treatments(Vec<(String, String, u64)>),
}

/// Merged federation-wide answer plus the per-provider breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedAnswer {
    pub per_provider: Vec<(String, QueryResult)>,
    pub merged: QueryResult,
    pub faults: Vec<(String, Fault)>,
    pub providers_total: usize,
    pub providers_answered: usize,
}

/// Pointwise sum; the key set is the union.
pub fn merge_region_counts(results: &[BTreeMap<String, u64>]) -> BTreeMap<String, u64> {
    let mut merged = BTreeMap::new();
    for counts in results {
        for (region, count) in counts {
            *merged.entry(region.clone()).or_insert(0) += count;
        }
    }
    merged
}

/// Concatenation re-sorted by (report_date, facility_id, record_id).
/// Duplicates are kept: record ids are facility-scoped.
pub fn merge_cases(results: &[Vec<HealthRecord>]) -> Vec<HealthRecord> {
    let mut merged: Vec<HealthRecord> = results.iter().flatten().cloned().collect();
    merged.sort_by(|a, b| {
        (a.report_date, &a.facility_id, &a.record_id).cmp(&(b.report_date, &b.facility_id, &b.record_id))
    });
    merged
}

/// Pairwise count summation, ordered by count descending then treatment
/// code ascending.
pub fn merge_treatments(results: &[Vec<(String, String, u64)>]) -> Vec<(String, String, u64)> {
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    for list in results {
        for (treatment, drug, count) in list {
            *counts.entry((treatment.clone(), drug.clone())).or_insert(0) += count;
        }
    }
    let mut out: Vec<(String, String, u64)> = counts.into_iter().map(|((t, d), c)| (t, d, c)).collect();
    out.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    out
}

fn merge(kind: SearchKind, results: &[(String, QueryResult)]) -> QueryResult {
    match kind {
        SearchKind::Cases => {
            let lists: Vec<Vec<HealthRecord>> = results
                .iter()
                .filter_map(|(_, r)| match r {
                    QueryResult::Cases(v) => Some(v.clone()),
                    _ => None,
                })
                .collect();
            QueryResult::Cases(merge_cases(&lists))
        }
        SearchKind::RegionCounts => {
            let maps: Vec<BTreeMap<String, u64>> = results
                .iter()
                .filter_map(|(_, r)| match r {
                    QueryResult::RegionCounts(m) => Some(m.clone()),
                    _ => None,
                })
                .collect();
            QueryResult::RegionCounts(merge_region_counts(&maps))
        }
        SearchKind::Treatments => {
            let lists: Vec<Vec<(String, String, u64)>> = results
                .iter()
                .filter_map(|(_, r)| match r {
                    QueryResult::Treatments(v) => Some(v.clone()),
                    _ => None,
                })
                .collect();
            QueryResult::Treatments(merge_treatments(&lists))
        }
    }
}

fn encode_result_fragment(result: &QueryResult) -> String {
    match result {
        QueryResult::Cases(records) => encode_case_list(records),
        QueryResult::RegionCounts(counts) => encode_region_counts(counts),
        QueryResult::Treatments(pairs) => encode_treatment_list(pairs),
    }
}

fn result_to_json(result: &QueryResult) -> serde_json::Value {
    match result {
        QueryResult::Cases(records) => json!({
            "kind": "cases",
            "records": records.iter().map(|r| json!({
                "record_id": r.record_id,
                "facility_id": r.facility_id,
                "region_code": r.region_code,
                "diagnosis_code": r.diagnosis_code,
                "treatment_code": r.treatment_code,
                "drug_code": r.drug_code,
                "onset_date": r.onset_date.format("%Y-%m-%d").to_string(),
                "report_date": r.report_date.format("%Y-%m-%d").to_string(),
            })).collect::<Vec<_>>(),
        }),
        QueryResult::RegionCounts(counts) => json!({
            "kind": "region_counts",
            "counts": counts,
        }),
        QueryResult::Treatments(pairs) => json!({
            "kind": "treatments",
            "treatments": pairs.iter().map(|(t, d, c)| json!({
                "treatment": t, "drug": d, "count": c,
            })).collect::<Vec<_>>(),
        }),
    }
}

/// Deterministic encoding of an answer; a pure function of the value.
pub fn format_answer(answer: &FederatedAnswer, format: Format) -> Vec<u8> {
    match format {
        Format::Xml => {
            let mut out = format!(
                r#"<?xml version="1.0" encoding="UTF-8"?><Answer xmlns="{GATEWAY_NS}">"#
            );
            out.push_str(&format!(
                "<ProvidersTotal>{}</ProvidersTotal><ProvidersAnswered>{}</ProvidersAnswered>",
                answer.providers_total, answer.providers_answered
            ));
            out.push_str("<PerProvider>");
            for (endpoint, result) in &answer.per_provider {
                out.push_str(&format!(r#"<Provider endpoint="{}">"#, escape_attr(endpoint)));
                out.push_str(&encode_result_fragment(result));
                out.push_str("</Provider>");
            }
            out.push_str("</PerProvider><Merged>");
            out.push_str(&encode_result_fragment(&answer.merged));
            out.push_str("</Merged><Faults>");
            for (endpoint, fault) in &answer.faults {
                out.push_str(&format!(r#"<ProviderFault endpoint="{}">"#, escape_attr(endpoint)));
                out.push_str(&fault_to_xml(fault));
                out.push_str("</ProviderFault>");
            }
            out.push_str("</Faults></Answer>");
            out.into_bytes()
        }
        Format::Json => {
            let value = json!({
                "providers_total": answer.providers_total,
                "providers_answered": answer.providers_answered,
                "per_provider": answer.per_provider.iter().map(|(endpoint, result)| json!({
                    "endpoint": endpoint,
                    "result": result_to_json(result),
                })).collect::<Vec<_>>(),
                "merged": result_to_json(&answer.merged),
                "faults": answer.faults.iter().map(|(endpoint, f)| json!({
                    "endpoint": endpoint,
                    "code": f.code.as_str(),
                    "reason": f.reason,
                    "detail": f.detail,
                })).collect::<Vec<_>>(),
            });
            serde_json::to_vec(&value).expect("json encoding cannot fail")
        }
    }
}

fn decode_reply(kind: SearchKind, reply: &Envelope) -> Result<QueryResult, String> {
    let fragment = match &reply.body {
        Payload::Content(f) => f,
        Payload::Fault(f) => return Err(format!("fault reply: {}", f.reason)),
    };
    let root = xml::parse_fragment(fragment).map_err(|e| e.to_string())?;
    match kind {
        SearchKind::Cases => decode_case_list(&root).map(QueryResult::Cases),
        SearchKind::RegionCounts => decode_region_counts(&root).map(QueryResult::RegionCounts),
        SearchKind::Treatments => decode_treatment_list(&root).map(QueryResult::Treatments),
    }
}

/// Issues the search against the bus scatter endpoint and merges the
/// gathered replies.
pub async fn search(
    client: &reqwest::Client,
    bus_url: &str,
    request: &SearchRequest,
) -> Result<FederatedAnswer, GatewayError> {
    request.validate()?;
    let envelope = Envelope::new_request(
        "hospital.records",
        request.kind.operation(),
        &encode_query(&request.to_query()),
        None,
    )
    .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
    let url = format!(
        "{}/bus/scatter?timeout_ms={}&policy={}",
        bus_url.trim_end_matches('/'),
        request.timeout_ms,
        request.policy.as_str()
    );
    let body = envelope.serialize().expect("fresh request is valid");
    let response = client
        .post(url)
        .header(header::CONTENT_TYPE, MEDIA_TYPE)
        .body(body)
        .send()
        .await
        .map_err(|e| GatewayError::BusUnreachable(e.to_string()))?;
    let status = response.status();
    let text = response
        .text()
        .await
        .map_err(|e| GatewayError::BusUnreachable(e.to_string()))?;
    if status != reqwest::StatusCode::OK {
        return Err(GatewayError::BadRequest(format!("bus answered HTTP {status}: {text}")));
    }
    let root = xml::parse_document(&text)
        .map_err(|e| GatewayError::BusUnreachable(format!("unparseable bus response: {e}")))?;
    if root.name == "Envelope" {
        // overall fault (all-or-fault collapse or no provider)
        let reply = Envelope::from_element(&root, &text)
            .map_err(|e| GatewayError::BusUnreachable(format!("bad bus reply: {e}")))?;
        let fault = match reply.body {
            Payload::Fault(f) => f,
            Payload::Content(_) => {
                return Err(GatewayError::BusUnreachable(
                    "bus returned a bare envelope for a scatter request".into(),
                ))
            }
        };
        return Ok(FederatedAnswer {
            per_provider: Vec::new(),
            merged: merge(request.kind, &[]),
            faults: vec![(bus_url.to_string(), fault)],
            providers_total: 1,
            providers_answered: 0,
        });
    }
    let gathered = decode_gather_result(&root, &text)
        .map_err(|e| GatewayError::BusUnreachable(format!("bad gather result: {e}")))?;
    let mut per_provider = Vec::new();
    let mut faults = gathered.faults;
    for (endpoint, reply) in &gathered.replies {
        match decode_reply(request.kind, reply) {
            Ok(result) => per_provider.push((endpoint.clone(), result)),
            Err(message) => faults.push((
                endpoint.clone(),
                Fault::new(crate::envelope::FaultCode::InternalError, message),
            )),
        }
    }
    let merged = merge(request.kind, &per_provider);
    Ok(FederatedAnswer {
        providers_total: per_provider.len() + faults.len(),
        providers_answered: per_provider.len(),
        per_provider,
        merged,
        faults,
    })
}

// --- HTTP surface -------------------------------------------------------

struct GatewayState {
    bus_url: String,
    client: reqwest::Client,
}

/// Serves GET/POST /search against the given bus.
pub async fn serve_gateway(bind: &str, bus_url: &str) -> std::io::Result<ServerHandle> {
    let state = Arc::new(GatewayState {
        bus_url: bus_url.trim_end_matches('/').to_string(),
        client: reqwest::Client::new(),
    });
    let app = Router::new()
        .route("/search", get(handle_search_get).post(handle_search_post))
        .with_state(state);
    spawn(app, bind).await
}

fn request_from_fields(fields: &HashMap<String, String>) -> Result<(SearchRequest, Format), GatewayError> {
    let kind = fields
        .get("kind")
        .ok_or_else(|| GatewayError::BadRequest("missing kind".into()))
        .and_then(|k| {
            SearchKind::parse(k).ok_or_else(|| GatewayError::BadRequest(format!("bad kind {k:?}")))
        })?;
    let diagnosis = fields
        .get("diagnosis")
        .ok_or_else(|| GatewayError::BadRequest("missing diagnosis".into()))?;
    let date = |name: &str| -> Result<Option<NaiveDate>, GatewayError> {
        match fields.get(name) {
            Some(t) => NaiveDate::parse_from_str(t, "%Y-%m-%d")
                .map(Some)
                .map_err(|_| GatewayError::BadRequest(format!("bad {name} date {t:?}"))),
            None => Ok(None),
        }
    };
    let mut request = SearchRequest::new(kind, diagnosis.clone());
    request.region_code = fields.get("region").cloned();
    request.date_from = date("from")?;
    request.date_to = date("to")?;
    if let Some(t) = fields.get("timeout_ms") {
        request.timeout_ms = t
            .parse()
            .ok()
            .filter(|ms| *ms >= 1)
            .ok_or_else(|| GatewayError::BadRequest(format!("bad timeout_ms {t:?}")))?;
    }
    if let Some(p) = fields.get("policy") {
        request.policy = crate::bus::FailurePolicy::parse(p)
            .ok_or_else(|| GatewayError::BadRequest(format!("bad policy {p:?}")))?;
    }
    let format = match fields.get("format") {
        Some(f) => Format::parse(f)?,
        None => Format::Xml,
    };
    request.validate()?;
    Ok((request, format))
}

fn search_fields_from_xml(body: &[u8]) -> Result<HashMap<String, String>, GatewayError> {
    let text = std::str::from_utf8(body)
        .map_err(|_| GatewayError::BadRequest("body is not UTF-8".into()))?;
    let root = xml::parse_document(text)
        .map_err(|e| GatewayError::BadRequest(format!("malformed search body: {e}")))?;
    if root.name != "Search" {
        return Err(GatewayError::BadRequest(format!(
            "expected Search, found {}",
            root.name
        )));
    }
    let mut fields = HashMap::new();
    for (element, field) in [
        ("Kind", "kind"),
        ("Diagnosis", "diagnosis"),
        ("Region", "region"),
        ("From", "from"),
        ("To", "to"),
        ("TimeoutMs", "timeout_ms"),
        ("Policy", "policy"),
        ("Format", "format"),
    ] {
        if let Some(value) = root.child_text(element) {
            fields.insert(field.to_string(), value.to_string());
        }
    }
    Ok(fields)
}

async fn run_search(
    state: &GatewayState,
    fields: HashMap<String, String>,
) -> axum::response::Response {
    let (request, format) = match request_from_fields(&fields) {
        Ok(pair) => pair,
        Err(GatewayError::UnsupportedFormat(f)) => {
            return (StatusCode::BAD_REQUEST, format!("unsupported format {f:?}")).into_response()
        }
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    match search(&state.client, &state.bus_url, &request).await {
        Ok(answer) => {
            let content_type = match format {
                Format::Xml => MEDIA_TYPE,
                Format::Json => "application/json",
            };
            (
                StatusCode::OK,
                [(header::CONTENT_TYPE, content_type)],
                format_answer(&answer, format),
            )
                .into_response()
        }
        Err(GatewayError::BusUnreachable(m)) => (StatusCode::BAD_GATEWAY, m).into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    }
}

async fn handle_search_get(
    State(state): State<Arc<GatewayState>>,
    Query(params): Query<HashMap<String, String>>,
) -> axum::response::Response {
    run_search(&state, params).await
}

async fn handle_search_post(
    State(state): State<Arc<GatewayState>>,
    body: axum::body::Bytes,
) -> axum::response::Response {
    match search_fields_from_xml(&body) {
        Ok(fields) => run_search(&state, fields).await,
        Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn region_count_merge_is_pointwise_sum() {
        let merged = merge_region_counts(&[counts(&[("GA", 3), ("AS", 2)]), counts(&[("GA", 1)])]);
        assert_eq!(merged, counts(&[("GA", 4), ("AS", 2)]));
        assert!(merge_region_counts(&[]).is_empty());
        assert_eq!(merge_region_counts(&[counts(&[("GA", 0)])]), counts(&[("GA", 0)]));
    }

    #[test]
    fn treatment_merge_sums_and_breaks_ties_by_treatment() {
        let a = vec![("T1".to_string(), "D1".to_string(), 2)];
        let b = vec![("T1".to_string(), "D1".to_string(), 3)];
        assert_eq!(merge_treatments(&[a, b]), vec![("T1".to_string(), "D1".to_string(), 5)]);
        let a = vec![("T2".to_string(), "D2".to_string(), 1)];
        let b = vec![("T1".to_string(), "D1".to_string(), 1)];
        assert_eq!(
            merge_treatments(&[a, b]),
            vec![
                ("T1".to_string(), "D1".to_string(), 1),
                ("T2".to_string(), "D2".to_string(), 1)
            ]
        );
    }

    #[test]
    fn case_merge_sorts_across_facilities() {
        use crate::provider::generate_synthetic;
        let codes = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let a = generate_synthetic(1, 20, "H1", &codes(&["GA"]), &codes(&["A00"]), &codes(&["T1"]), &codes(&["D1"])).unwrap();
        let b = generate_synthetic(2, 20, "H2", &codes(&["GA"]), &codes(&["A00"]), &codes(&["T1"]), &codes(&["D1"])).unwrap();
        let merged = merge_cases(&[a.clone(), b.clone()]);
        assert_eq!(merged.len(), 40);
        for w in merged.windows(2) {
            assert!(
                (w[0].report_date, &w[0].facility_id, &w[0].record_id)
                    <= (w[1].report_date, &w[1].facility_id, &w[1].record_id)
            );
        }
        assert!(merge_cases(&[]).is_empty());
    }

    #[test]
    fn format_answer_is_deterministic() {
        let answer = FederatedAnswer {
            per_provider: vec![(
                "http://127.0.0.1:7101".to_string(),
                QueryResult::RegionCounts(counts(&[("GA", 3)])),
            )],
            merged: QueryResult::RegionCounts(counts(&[("GA", 3)])),
            faults: vec![],
            providers_total: 1,
            providers_answered: 1,
        };
        assert_eq!(format_answer(&answer, Format::Xml), format_answer(&answer, Format::Xml));
        assert_eq!(format_answer(&answer, Format::Json), format_answer(&answer, Format::Json));
        let xml_bytes = format_answer(&answer, Format::Xml);
        let doc = String::from_utf8(xml_bytes).unwrap();
        assert!(doc.contains("<ProvidersAnswered>1</ProvidersAnswered>"));
        assert!(doc.contains(r#"<Region code="GA">3</Region>"#));
    }

    #[test]
    fn unsupported_format_is_rejected() {
        assert!(matches!(Format::parse("csv"), Err(GatewayError::UnsupportedFormat(_))));
    }

    #[test]
    fn inverted_dates_fail_validation() {
        let mut r = SearchRequest::new(SearchKind::Cases, "A00");
        r.date_from = NaiveDate::from_ymd_opt(2024, 3, 1);
        r.date_to = NaiveDate::from_ymd_opt(2024, 2, 1);
        assert!(matches!(r.validate(), Err(GatewayError::BadRequest(_))));
    }

    #[test]
    fn empty_answer_formats_with_zero_counts() {
        let answer = FederatedAnswer {
            per_provider: vec![],
            merged: QueryResult::RegionCounts(BTreeMap::new()),
            faults: vec![],
            providers_total: 0,
            providers_answered: 0,
        };
        let doc = String::from_utf8(format_answer(&answer, Format::Xml)).unwrap();
        assert!(doc.contains("<ProvidersAnswered>0</ProvidersAnswered>"));
        assert!(doc.contains("<Merged><RegionCounts></RegionCounts></Merged>"));
    }
}
