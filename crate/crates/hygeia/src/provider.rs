//! Provider kit: a hospital information service hosting a record store
//! behind the `hospital.records` contract. The storage backend stays
//! invisible behind the service boundary; both backends answer every
//! query identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Router;
use chrono::NaiveDate;
use thiserror::Error;

use crate::envelope::{Envelope, Fault, FaultCode, Payload, MEDIA_TYPE};
use crate::registry::{OperationSpec, ServiceContract, Version};
use crate::serve::{spawn, ServerHandle};
use crate::xml::{self, escape_attr, escape_text, Element};

pub const RECORDS_NS: &str = "urn:hygeia:records:1";

/// The normative contract every hospital provider serves.
pub fn hospital_records_contract() -> ServiceContract {
    ServiceContract {
        name: "hospital.records".into(),
        version: Version::new(1, 0, 0),
        operations: vec![
            OperationSpec {
                name: "FindCases".into(),
                input_root: "Query".into(),
                output_root: "CaseList".into(),
            },
            OperationSpec {
                name: "CountCasesByRegion".into(),
                input_root: "Query".into(),
                output_root: "RegionCounts".into(),
            },
            OperationSpec {
                name: "ListTreatments".into(),
                input_root: "Query".into(),
                output_root: "TreatmentList".into(),
            },
        ],
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("code list {0} is empty")]
    EmptyCodeList(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store at byte {offset}: {message}")]
    CorruptStore { offset: usize, message: String },
}

/// One pseudonymized case record; the provider-side data atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthRecord {
    pub record_id: String,
    pub facility_id: String,
    pub region_code: String,
    pub diagnosis_code: String,
    pub treatment_code: String,
    pub drug_code: String,
    pub onset_date: NaiveDate,
    pub report_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    InMemory,
    FileBacked(PathBuf),
}

/// Immutable record collection. Queries are read-only and identical for
/// both backends over equal record sets.
#[derive(Debug, Clone)]
pub struct RecordStore {
    pub facility_id: String,
    pub records: Vec<HealthRecord>,
    pub backend: Backend,
}

impl RecordStore {
    pub fn in_memory(facility_id: impl Into<String>, records: Vec<HealthRecord>) -> RecordStore {
        RecordStore {
            facility_id: facility_id.into(),
            records,
            backend: Backend::InMemory,
        }
    }
}

/// Case search predicate; date bounds are inclusive on `report_date`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaseQuery {
    pub diagnosis_code: String,
    pub region_code: Option<String>,
    pub date_from: Option<NaiveDate>,
    pub date_to: Option<NaiveDate>,
}

impl CaseQuery {
    pub fn for_diagnosis(diagnosis_code: impl Into<String>) -> CaseQuery {
        CaseQuery {
            diagnosis_code: diagnosis_code.into(),
            ..CaseQuery::default()
        }
    }

    fn validate(&self) -> Result<(), ProviderError> {
        if let (Some(from), Some(to)) = (self.date_from, self.date_to) {
            if from > to {
                return Err(ProviderError::InvalidQuery(format!(
                    "date_from {from} is after date_to {to}"
                )));
            }
        }
        Ok(())
    }

    fn matches(&self, r: &HealthRecord) -> bool {
        r.diagnosis_code == self.diagnosis_code
            && self.region_code.as_ref().map_or(true, |rc| &r.region_code == rc)
            && self.date_from.map_or(true, |d| r.report_date >= d)
            && self.date_to.map_or(true, |d| r.report_date <= d)
    }
}

/// Records matching all present predicates, ordered by
/// (report_date, record_id).
pub fn find_cases(store: &RecordStore, q: &CaseQuery) -> Result<Vec<HealthRecord>, ProviderError> {
    q.validate()?;
    let mut out: Vec<HealthRecord> = store.records.iter().filter(|r| q.matches(r)).cloned().collect();
    out.sort_by(|a, b| (a.report_date, &a.record_id).cmp(&(b.report_date, &b.record_id)));
    Ok(out)
}

/// Per-region case counts; regions without matches are absent.
pub fn count_cases_by_region(
    store: &RecordStore,
    diagnosis_code: &str,
    date_from: Option<NaiveDate>,
    date_to: Option<NaiveDate>,
) -> Result<BTreeMap<String, u64>, ProviderError> {
    let q = CaseQuery {
        diagnosis_code: diagnosis_code.to_string(),
        region_code: None,
        date_from,
        date_to,
    };
    q.validate()?;
    let mut counts = BTreeMap::new();
    for r in store.records.iter().filter(|r| q.matches(r)) {
        *counts.entry(r.region_code.clone()).or_insert(0u64) += 1;
    }
    Ok(counts)
}

/// Distinct (treatment, drug) pairs among matching records with their
/// multiplicities, ordered by count descending then treatment ascending.
pub fn list_treatments(store: &RecordStore, diagnosis_code: &str) -> Vec<(String, String, u64)> {
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    for r in store.records.iter().filter(|r| r.diagnosis_code == diagnosis_code) {
        *counts
            .entry((r.treatment_code.clone(), r.drug_code.clone()))
            .or_insert(0) += 1;
    }
    let mut out: Vec<(String, String, u64)> = counts
        .into_iter()
        .map(|((t, d), c)| (t, d, c))
        .collect();
    out.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    out
}

/// Numerical Recipes LCG; fixed so generated data is identical across
/// platforms and languages.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u32,
}

impl Lcg {
    pub fn new(seed: u32) -> Lcg {
        Lcg { state: seed }
    }

    pub fn next(&mut self) -> u32 {
        self.state = self
            .state
            .wrapping_mul(1_664_525)
            .wrapping_add(1_013_904_223);
        self.state
    }
}

/// Deterministic synthetic record set; the desk-scale stand-in for a
/// hospital database. Treatment and drug share one index draw so the
/// pairs stay correlated.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    seed: u32,
    n: usize,
    facility_id: &str,
    regions: &[String],
    diagnoses: &[String],
    treatments: &[String],
    drugs: &[String],
) -> Result<Vec<HealthRecord>, ProviderError> {
    if regions.is_empty() {
        return Err(ProviderError::EmptyCodeList("regions"));
    }
    if diagnoses.is_empty() {
        return Err(ProviderError::EmptyCodeList("diagnoses"));
    }
    if treatments.is_empty() {
        return Err(ProviderError::EmptyCodeList("treatments"));
    }
    if drugs.is_empty() {
        return Err(ProviderError::EmptyCodeList("drugs"));
    }
    let epoch = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    let mut rng = Lcg::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r1 = rng.next() as usize;
        let r2 = rng.next() as usize;
        let r3 = rng.next() as usize;
        let r4 = rng.next() as u64;
        let onset_date = epoch + chrono::Days::new(r4 % 90);
        let report_date = onset_date + chrono::Days::new(r4 % 7);
        out.push(HealthRecord {
            record_id: format!("F{facility_id}-R{i:06}"),
            facility_id: facility_id.to_string(),
            region_code: regions[r1 % regions.len()].clone(),
            diagnosis_code: diagnoses[r2 % diagnoses.len()].clone(),
            treatment_code: treatments[r3 % treatments.len()].clone(),
            drug_code: drugs[r3 % drugs.len()].clone(),
            onset_date,
            report_date,
        });
    }
    Ok(out)
}

// --- store persistence ------------------------------------------------

fn encode_record(r: &HealthRecord) -> String {
    format!(
        "<Record><RecordId>{}</RecordId><FacilityId>{}</FacilityId><RegionCode>{}</RegionCode><DiagnosisCode>{}</DiagnosisCode><TreatmentCode>{}</TreatmentCode><DrugCode>{}</DrugCode><OnsetDate>{}</OnsetDate><ReportDate>{}</ReportDate></Record>",
        escape_text(&r.record_id),
        escape_text(&r.facility_id),
        escape_text(&r.region_code),
        escape_text(&r.diagnosis_code),
        escape_text(&r.treatment_code),
        escape_text(&r.drug_code),
        r.onset_date.format("%Y-%m-%d"),
        r.report_date.format("%Y-%m-%d"),
    )
}

fn decode_record(el: &Element) -> Result<HealthRecord, String> {
    let text = |name: &str| -> Result<String, String> {
        let value = el.child_text(name).ok_or_else(|| format!("missing {name}"))?;
        if value.is_empty() {
            return Err(format!("empty {name}"));
        }
        Ok(value.to_string())
    };
    let date = |name: &str| -> Result<NaiveDate, String> {
        NaiveDate::parse_from_str(&text(name)?, "%Y-%m-%d").map_err(|_| format!("bad {name}"))
    };
    let r = HealthRecord {
        record_id: text("RecordId")?,
        facility_id: text("FacilityId")?,
        region_code: text("RegionCode")?,
        diagnosis_code: text("DiagnosisCode")?,
        treatment_code: text("TreatmentCode")?,
        drug_code: text("DrugCode")?,
        onset_date: date("OnsetDate")?,
        report_date: date("ReportDate")?,
    };
    if r.report_date < r.onset_date {
        return Err(format!("record {}: report date precedes onset date", r.record_id));
    }
    Ok(r)
}

pub fn save_store(store: &RecordStore, path: &Path) -> Result<(), ProviderError> {
    let mut out = String::from(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    out.push_str(&format!(
        r#"<Records xmlns="{RECORDS_NS}" facility="{}">"#,
        escape_attr(&store.facility_id)
    ));
    for r in &store.records {
        out.push_str(&encode_record(r));
    }
    out.push_str("</Records>");
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<RecordStore, ProviderError> {
    let text = std::fs::read_to_string(path)?;
    let corrupt = |offset: usize, message: String| ProviderError::CorruptStore { offset, message };
    let root = xml::parse_document(&text).map_err(|e| corrupt(e.offset, e.message))?;
    if root.name != "Records" || root.attr("xmlns") != Some(RECORDS_NS) {
        return Err(corrupt(0, "not a record store document".into()));
    }
    let facility_id = root.attr("facility").unwrap_or("").to_string();
    let mut records = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for el in &root.children {
        if el.name != "Record" {
            return Err(corrupt(el.inner_span.0, format!("unexpected element {}", el.name)));
        }
        let r = decode_record(el).map_err(|m| corrupt(el.inner_span.0, m))?;
        if !ids.insert(r.record_id.clone()) {
            return Err(corrupt(el.inner_span.0, format!("duplicate record id {}", r.record_id)));
        }
        records.push(r);
    }
    Ok(RecordStore {
        facility_id,
        records,
        backend: Backend::FileBacked(path.to_path_buf()),
    })
}

// --- body codecs (shared with the gateway) ----------------------------

pub fn encode_query(q: &CaseQuery) -> String {
    let mut out = String::from("<Query><Diagnosis>");
    out.push_str(&escape_text(&q.diagnosis_code));
    out.push_str("</Diagnosis>");
    if let Some(region) = &q.region_code {
        out.push_str("<Region>");
        out.push_str(&escape_text(region));
        out.push_str("</Region>");
    }
    if let Some(from) = q.date_from {
        out.push_str(&format!("<From>{}</From>", from.format("%Y-%m-%d")));
    }
    if let Some(to) = q.date_to {
        out.push_str(&format!("<To>{}</To>", to.format("%Y-%m-%d")));
    }
    out.push_str("</Query>");
    out
}

pub fn decode_query(el: &Element) -> Result<CaseQuery, String> {
    if el.name != "Query" {
        return Err(format!("expected Query, found {}", el.name));
    }
    let diagnosis_code = el
        .child_text("Diagnosis")
        .ok_or("missing Diagnosis")?
        .to_string();
    if diagnosis_code.is_empty() {
        return Err("empty Diagnosis".into());
    }
    let date = |name: &str| -> Result<Option<NaiveDate>, String> {
        match el.child_text(name) {
            Some(t) => NaiveDate::parse_from_str(t, "%Y-%m-%d")
                .map(Some)
                .map_err(|_| format!("bad {name}")),
            None => Ok(None),
        }
    };
    Ok(CaseQuery {
        diagnosis_code,
        region_code: el.child_text("Region").map(str::to_string),
        date_from: date("From")?,
        date_to: date("To")?,
    })
}

pub fn encode_case_list(records: &[HealthRecord]) -> String {
    let mut out = String::from("<CaseList>");
    for r in records {
        out.push_str(&encode_record(r));
    }
    out.push_str("</CaseList>");
    out
}

pub fn decode_case_list(el: &Element) -> Result<Vec<HealthRecord>, String> {
    if el.name != "CaseList" {
        return Err(format!("expected CaseList, found {}", el.name));
    }
    el.children_named("Record").map(decode_record).collect()
}

pub fn encode_region_counts(counts: &BTreeMap<String, u64>) -> String {
    let mut out = String::from("<RegionCounts>");
    for (region, count) in counts {
        out.push_str(&format!(r#"<Region code="{}">{count}</Region>"#, escape_attr(region)));
    }
    out.push_str("</RegionCounts>");
    out
}

pub fn decode_region_counts(el: &Element) -> Result<BTreeMap<String, u64>, String> {
    if el.name != "RegionCounts" {
        return Err(format!("expected RegionCounts, found {}", el.name));
    }
    let mut out = BTreeMap::new();
    for region in el.children_named("Region") {
        let code = region.attr("code").ok_or("Region missing code")?;
        let count: u64 = region.text.parse().map_err(|_| "bad region count")?;
        out.insert(code.to_string(), count);
    }
    Ok(out)
}

pub fn encode_treatment_list(pairs: &[(String, String, u64)]) -> String {
    let mut out = String::from("<TreatmentList>");
    for (treatment, drug, count) in pairs {
        out.push_str(&format!(
            r#"<Treatment code="{}" drug="{}">{count}</Treatment>"#,
            escape_attr(treatment),
            escape_attr(drug)
        ));
    }
    out.push_str("</TreatmentList>");
    out
}

pub fn decode_treatment_list(el: &Element) -> Result<Vec<(String, String, u64)>, String> {
    if el.name != "TreatmentList" {
        return Err(format!("expected TreatmentList, found {}", el.name));
    }
    let mut out = Vec::new();
    for t in el.children_named("Treatment") {
        out.push((
            t.attr("code").ok_or("Treatment missing code")?.to_string(),
            t.attr("drug").ok_or("Treatment missing drug")?.to_string(),
            t.text.parse().map_err(|_| "bad treatment count")?,
        ));
    }
    Ok(out)
}

// --- HTTP service -----------------------------------------------------

/// Harness knobs for a served provider.
#[derive(Debug, Clone, Default)]
pub struct ProviderOptions {
    /// Artificial delay applied before answering each invoke; used by the
    /// scenario harness to exercise timeout and ordering paths.
    pub response_delay: Option<Duration>,
}

struct ProviderState {
    store: RecordStore,
    options: ProviderOptions,
    stats: std::sync::Mutex<BTreeMap<String, u64>>,
    invocations: AtomicU64,
}

/// Serves the store behind POST /service/invoke and GET /service/stats.
pub async fn serve_provider(
    bind: &str,
    store: RecordStore,
    options: ProviderOptions,
) -> std::io::Result<ServerHandle> {
    let state = Arc::new(ProviderState {
        store,
        options,
        stats: std::sync::Mutex::new(BTreeMap::new()),
        invocations: AtomicU64::new(0),
    });
    let app = Router::new()
        .route("/service/invoke", post(invoke))
        .route("/service/stats", get(stats))
        .with_state(state);
    spawn(app, bind).await
}

fn xml_response(status: StatusCode, body: Vec<u8>) -> axum::response::Response {
    (status, [(header::CONTENT_TYPE, MEDIA_TYPE)], body).into_response()
}

async fn invoke(State(state): State<Arc<ProviderState>>, body: axum::body::Bytes) -> axum::response::Response {
    let request = match Envelope::parse(&body) {
        Ok(e) => e,
        Err(err) => {
            return (StatusCode::BAD_REQUEST, format!("unparseable envelope: {err}")).into_response()
        }
    };
    if let Some(delay) = state.options.response_delay {
        tokio::time::sleep(delay).await;
    }
    state.invocations.fetch_add(1, Ordering::Relaxed);
    {
        let mut stats = state.stats.lock().unwrap();
        *stats.entry(request.operation.clone()).or_insert(0) += 1;
    }
    let reply = dispatch(&state.store, &request);
    xml_response(StatusCode::OK, reply.serialize().expect("reply envelope is valid"))
}

/// Maps an invoke envelope onto the query operations; every outcome is an
/// in-band reply envelope.
pub fn dispatch(store: &RecordStore, request: &Envelope) -> Envelope {
    let sender_fault = |reason: String| {
        Envelope::fault_reply(request, Fault::new(FaultCode::SenderError, reason))
    };
    let fragment = match &request.body {
        Payload::Content(f) => f.clone(),
        Payload::Fault(_) => return sender_fault("request body is a fault".into()),
    };
    let root = match xml::parse_fragment(&fragment) {
        Ok(el) => el,
        Err(e) => return sender_fault(format!("malformed body: {e}")),
    };
    let query = match decode_query(&root) {
        Ok(q) => q,
        Err(e) => return sender_fault(format!("bad query: {e}")),
    };
    let result = match request.operation.as_str() {
        "FindCases" => find_cases(store, &query).map(|records| encode_case_list(&records)),
        "CountCasesByRegion" => {
            count_cases_by_region(store, &query.diagnosis_code, query.date_from, query.date_to)
                .map(|counts| encode_region_counts(&counts))
        }
        "ListTreatments" => Ok(encode_treatment_list(&list_treatments(
            store,
            &query.diagnosis_code,
        ))),
        other => return sender_fault(format!("unknown operation {other:?}")),
    };
    match result {
        Ok(fragment) => Envelope::new_reply(request, Payload::Content(fragment)),
        Err(e) => sender_fault(e.to_string()),
    }
}

async fn stats(State(state): State<Arc<ProviderState>>) -> axum::response::Response {
    let stats = state.stats.lock().unwrap();
    let mut out = String::from(r#"<?xml version="1.0" encoding="UTF-8"?><Stats>"#);
    for (op, count) in stats.iter() {
        out.push_str(&format!(r#"<Operation name="{}">{count}</Operation>"#, escape_attr(op)));
    }
    out.push_str(&format!(
        "<Total>{}</Total></Stats>",
        state.invocations.load(Ordering::Relaxed)
    ));
    xml_response(StatusCode::OK, out.into_bytes())
}
