//! Federation harness: boots bus + N providers + gateway as in-process
//! tasks on loopback, drives registration over the wire, and runs the
//! outbreak-tracing scenario against an in-process oracle.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use std::sync::Arc;

use thiserror::Error;

use crate::bus::{serve as serve_bus, Bus, HttpAdapter};
use crate::envelope::MEDIA_TYPE;
use crate::provider::{
    generate_synthetic, hospital_records_contract, load_store, save_store, serve_provider,
    HealthRecord, ProviderError, ProviderOptions, RecordStore,
};
use crate::registry::{encode_contract, Registry, RegistryError};
use crate::serve::ServerHandle;
use crate::xml;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bind error: {0}")]
    Bind(std::io::Error),
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Shape of a simulated federation. Hospital `i` gets facility id
/// `H<i+1>`, seed `seed + i`, and port `base_port + 1 + i`; the gateway
/// sits at `base_port + n_hospitals + 1`. A base port of 0 asks the OS
/// for ephemeral ports everywhere.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub n_hospitals: usize,
    pub seed: u32,
    pub records_per_hospital: usize,
    pub base_port: u16,
    pub regions: Vec<String>,
    pub diagnoses: Vec<String>,
    pub treatments: Vec<String>,
    pub drugs: Vec<String>,
}

fn codes(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for FederationConfig {
    fn default() -> FederationConfig {
        FederationConfig {
            n_hospitals: 3,
            seed: 42,
            records_per_hospital: 200,
            base_port: 7000,
            regions: codes(&["GA", "AS", "WR", "NR"]),
            diagnoses: codes(&["A00", "J10", "U07"]),
            treatments: codes(&["T1", "T2", "T3"]),
            drugs: codes(&["D1", "D2"]),
        }
    }
}

impl FederationConfig {
    pub fn facility_id(&self, i: usize) -> String {
        format!("H{}", i + 1)
    }

    pub fn hospital_seed(&self, i: usize) -> u32 {
        self.seed.wrapping_add(i as u32)
    }

    pub fn generate_records(&self, i: usize) -> Result<Vec<HealthRecord>, ProviderError> {
        generate_synthetic(
            self.hospital_seed(i),
            self.records_per_hospital,
            &self.facility_id(i),
            &self.regions,
            &self.diagnoses,
            &self.treatments,
            &self.drugs,
        )
    }

    /// Union of all hospitals' generated records; the substrate for the
    /// in-process oracle.
    pub fn union_records(&self) -> Result<Vec<HealthRecord>, ProviderError> {
        let mut all = Vec::new();
        for i in 0..self.n_hospitals {
            all.extend(self.generate_records(i)?);
        }
        Ok(all)
    }

    fn bind(&self, offset: u16) -> String {
        if self.base_port == 0 {
            "127.0.0.1:0".to_string()
        } else {
            format!("127.0.0.1:{}", self.base_port + offset)
        }
    }
}

/// Harness knobs beyond the config shape.
#[derive(Debug, Clone, Default)]
pub struct BootOptions {
    /// Per-hospital artificial response delay.
    pub provider_delays: Vec<Option<Duration>>,
    /// Round-trip each store through this directory so the providers run
    /// file-backed instead of in-memory.
    pub file_backed_dir: Option<PathBuf>,
    /// Persist the bus registry to this path.
    pub registry_store: Option<PathBuf>,
}

/// A running federation. Shut it down explicitly; dropping aborts the
/// component tasks.
pub struct Federation {
    pub bus_url: String,
    pub gateway_url: String,
    pub provider_urls: Vec<String>,
    pub registration_ids: Vec<String>,
    bus_handle: ServerHandle,
    gateway_handle: ServerHandle,
    provider_handles: Vec<Option<ServerHandle>>,
}

impl Federation {
    pub async fn shutdown(self) {
        self.gateway_handle.shutdown().await;
        for handle in self.provider_handles.into_iter().flatten() {
            handle.shutdown().await;
        }
        self.bus_handle.shutdown().await;
    }

    /// Stops hospital `i`'s server without deregistering it; subsequent
    /// scatters see it as a faulting provider.
    pub async fn stop_provider(&mut self, i: usize) {
        if let Some(handle) = self.provider_handles[i].take() {
            handle.shutdown().await;
        }
    }
}

async fn register_provider(
    client: &reqwest::Client,
    bus_url: &str,
    endpoint: &str,
) -> Result<String, SimError> {
    let contract = hospital_records_contract();
    let body = format!(
        "<Register>{}<Endpoint>{}</Endpoint></Register>",
        encode_contract(&contract),
        endpoint
    );
    let response = client
        .post(format!("{bus_url}/registry/register"))
        .header("content-type", MEDIA_TYPE)
        .body(body)
        .send()
        .await
        .map_err(|e| SimError::RegistrationFailed(e.to_string()))?;
    let status = response.status();
    let text = response
        .text()
        .await
        .map_err(|e| SimError::RegistrationFailed(e.to_string()))?;
    if status != reqwest::StatusCode::OK {
        return Err(SimError::RegistrationFailed(format!("HTTP {status}: {text}")));
    }
    let root = xml::parse_document(&text)
        .map_err(|e| SimError::RegistrationFailed(format!("bad registration response: {e}")))?;
    root.attr("id")
        .map(str::to_string)
        .ok_or_else(|| SimError::RegistrationFailed("response missing registration id".into()))
}

/// Boots the full federation and blocks until every provider is
/// registered and discoverable. On any failure everything already
/// started is torn down before returning.
pub async fn boot(config: &FederationConfig, options: &BootOptions) -> Result<Federation, SimError> {
    let registry = Arc::new(match &options.registry_store {
        Some(path) => Registry::load(path)?,
        None => Registry::new(),
    });
    let mut bus = Bus::new(registry);
    if let Some(path) = &options.registry_store {
        bus = bus.with_store_path(path.clone());
    }
    let bus = Arc::new(bus);
    bus.register_adapter("http", Arc::new(HttpAdapter::new()))
        .expect("bus not started yet");
    let bus_handle = serve_bus(bus, &config.bind(0)).await.map_err(|e| match e {
        crate::bus::BusError::Bind(io) => SimError::Bind(io),
        other => SimError::RegistrationFailed(other.to_string()),
    })?;
    let bus_url = bus_handle.url();

    let client = reqwest::Client::new();
    let mut provider_handles: Vec<Option<ServerHandle>> = Vec::new();
    let mut provider_urls = Vec::new();
    let mut registration_ids = Vec::new();
    let mut boot_error: Option<SimError> = None;
    for i in 0..config.n_hospitals {
        let outcome: Result<(), SimError> = async {
            let records = config.generate_records(i)?;
            let store = match &options.file_backed_dir {
                None => RecordStore::in_memory(config.facility_id(i), records),
                Some(dir) => {
                    let path = dir.join(format!("{}.xml", config.facility_id(i)));
                    save_store(&RecordStore::in_memory(config.facility_id(i), records), &path)?;
                    load_store(&path)?
                }
            };
            let provider_options = ProviderOptions {
                response_delay: options.provider_delays.get(i).copied().flatten(),
            };
            let handle = serve_provider(&config.bind(1 + i as u16), store, provider_options)
                .await
                .map_err(SimError::Bind)?;
            let endpoint = handle.url();
            let registration_id = register_provider(&client, &bus_url, &endpoint).await?;
            provider_handles.push(Some(handle));
            provider_urls.push(endpoint);
            registration_ids.push(registration_id);
            Ok(())
        }
        .await;
        if let Err(e) = outcome {
            boot_error = Some(e);
            break;
        }
    }
    if let Some(e) = boot_error {
        for handle in provider_handles.into_iter().flatten() {
            handle.shutdown().await;
        }
        bus_handle.shutdown().await;
        return Err(e);
    }

    let gateway_handle =
        match crate::gateway::serve_gateway(&config.bind(config.n_hospitals as u16 + 1), &bus_url)
            .await
        {
            Ok(handle) => handle,
            Err(e) => {
                for handle in provider_handles.into_iter().flatten() {
                    handle.shutdown().await;
                }
                bus_handle.shutdown().await;
                return Err(SimError::Bind(e));
            }
        };
    Ok(Federation {
        bus_url,
        gateway_url: gateway_handle.url(),
        provider_urls,
        registration_ids,
        bus_handle,
        gateway_handle,
        provider_handles,
    })
}

/// In-process oracle: direct group-by over a record set, bypassing bus,
/// HTTP and XML entirely.
pub fn oracle_region_counts(records: &[HealthRecord], diagnosis: &str) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for r in records.iter().filter(|r| r.diagnosis_code == diagnosis) {
        *counts.entry(r.region_code.clone()).or_insert(0u64) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(Vec<String>),
}

/// Outcome of one outbreak-tracing scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub config: FederationConfig,
    /// Per diagnosis: the merged region counts observed via the gateway.
    pub merged: Vec<(String, BTreeMap<String, u64>)>,
    /// Per diagnosis: each provider's own counts, in sequence order.
    pub per_hospital: Vec<(String, Vec<(String, BTreeMap<String, u64>)>)>,
    pub providers_total: usize,
    pub providers_answered: usize,
    pub elapsed_ms: u64,
    pub verdict: Verdict,
}

impl ScenarioReport {
    /// Deterministic rendering; only the elapsed line varies across runs
    /// with equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("scenario: outbreak tracing\n");
        out.push_str(&format!(
            "federation: hospitals={} seed={} records={}\n",
            self.config.n_hospitals, self.config.seed, self.config.records_per_hospital
        ));
        for (diagnosis, counts) in &self.merged {
            out.push_str(&format!("query: region_counts diagnosis={diagnosis}\n"));
            out.push_str(&format!("  merged: {}\n", render_counts(counts)));
            if let Some((_, providers)) = self.per_hospital.iter().find(|(d, _)| d == diagnosis) {
                for (endpoint, counts) in providers {
                    out.push_str(&format!("  {endpoint}: {}\n", render_counts(counts)));
                }
            }
        }
        out.push_str(&format!(
            "providers: {}/{} answered\n",
            self.providers_answered, self.providers_total
        ));
        out.push_str(&format!("elapsed_ms: {}\n", self.elapsed_ms));
        match &self.verdict {
            Verdict::Pass => out.push_str("verdict: pass\n"),
            Verdict::Fail(mismatches) => {
                out.push_str("verdict: fail\n");
                for m in mismatches {
                    out.push_str(&format!("  mismatch: {m}\n"));
                }
            }
        }
        out
    }
}

fn render_counts(counts: &BTreeMap<String, u64>) -> String {
    if counts.is_empty() {
        return "(none)".to_string();
    }
    counts
        .iter()
        .map(|(region, count)| format!("{region}={count}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn json_counts(value: &serde_json::Value) -> Option<BTreeMap<String, u64>> {
    value
        .get("counts")?
        .as_object()
        .map(|m| {
            m.iter()
                .filter_map(|(k, v)| v.as_u64().map(|n| (k.clone(), n)))
                .collect()
        })
}

/// Boots the federation, runs a region_counts search per diagnosis,
/// compares every merged mapping against the in-process oracle, tears
/// everything down, and reports.
pub async fn scenario_outbreak(config: &FederationConfig) -> ScenarioReport {
    let start = Instant::now();
    let mut report = ScenarioReport {
        config: config.clone(),
        merged: Vec::new(),
        per_hospital: Vec::new(),
        providers_total: config.n_hospitals,
        providers_answered: 0,
        elapsed_ms: 0,
        verdict: Verdict::Pass,
    };
    let mut mismatches = Vec::new();

    let union = match config.union_records() {
        Ok(records) => records,
        Err(e) => {
            report.verdict = Verdict::Fail(vec![format!("generation failed: {e}")]);
            return report;
        }
    };
    let federation = match boot(config, &BootOptions::default()).await {
        Ok(f) => f,
        Err(e) => {
            report.verdict = Verdict::Fail(vec![format!("boot failed: {e}")]);
            report.elapsed_ms = start.elapsed().as_millis() as u64;
            return report;
        }
    };

    let client = reqwest::Client::new();
    let mut answered = usize::MAX;
    for diagnosis in &config.diagnoses {
        let url = format!(
            "{}/search?kind=region_counts&diagnosis={diagnosis}&format=json",
            federation.gateway_url
        );
        let answer: Result<serde_json::Value, String> = async {
            let response = client.get(&url).send().await.map_err(|e| e.to_string())?;
            if response.status() != reqwest::StatusCode::OK {
                return Err(format!("gateway answered HTTP {}", response.status()));
            }
            response.json().await.map_err(|e| e.to_string())
        }
        .await;
        let answer = match answer {
            Ok(v) => v,
            Err(e) => {
                mismatches.push(format!("{diagnosis}: query failed: {e}"));
                continue;
            }
        };
        let merged = answer
            .get("merged")
            .and_then(json_counts)
            .unwrap_or_default();
        let expected = oracle_region_counts(&union, diagnosis);
        if merged != expected {
            mismatches.push(format!(
                "{diagnosis}: merged {merged:?} != oracle {expected:?}"
            ));
        }
        answered = answered.min(
            answer
                .get("providers_answered")
                .and_then(|v| v.as_u64())
                .unwrap_or(0) as usize,
        );
        let providers: Vec<(String, BTreeMap<String, u64>)> = answer
            .get("per_provider")
            .and_then(|v| v.as_array())
            .map(|entries| {
                entries
                    .iter()
                    .filter_map(|e| {
                        Some((
                            e.get("endpoint")?.as_str()?.to_string(),
                            e.get("result").and_then(json_counts)?,
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();
        report.per_hospital.push((diagnosis.clone(), providers));
        report.merged.push((diagnosis.clone(), merged));
    }
    federation.shutdown().await;

    report.providers_answered = if answered == usize::MAX { 0 } else { answered };
    report.elapsed_ms = start.elapsed().as_millis() as u64;
    report.verdict = if mismatches.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail(mismatches)
    };
    report
}
