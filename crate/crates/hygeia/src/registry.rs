//! Service repository: versioned contracts bound to endpoints, discovery,
//! and XML persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::RwLock;

use thiserror::Error;
use uuid::Uuid;

use crate::envelope::{is_valid_operation_name, is_valid_service_name, now_timestamp};
use crate::xml::{self, escape_text, Element};

pub const REGISTRY_NS: &str = "urn:hygeia:registry:1";

/// Semantic version, `major.minor.patch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl Version {
    pub fn new(major: u64, minor: u64, patch: u64) -> Version {
        Version { major, minor, patch }
    }

    /// Compatibility rule used by discovery: same major, at least the
    /// requested version.
    pub fn satisfies(&self, min: &Version) -> bool {
        self.major == min.major && self >= min
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl FromStr for Version {
    type Err = String;

    fn from_str(s: &str) -> Result<Version, String> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 3 {
            return Err(format!("version {s:?} must have three components"));
        }
        let num = |p: &str| -> Result<u64, String> {
            if p.is_empty() || (p.len() > 1 && p.starts_with('0')) || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(format!("bad version component {p:?}"));
            }
            p.parse().map_err(|_| format!("bad version component {p:?}"))
        };
        Ok(Version {
            major: num(parts[0])?,
            minor: num(parts[1])?,
            patch: num(parts[2])?,
        })
    }
}

/// One operation a contract offers, with the expected request/reply body
/// root element names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationSpec {
    pub name: String,
    pub input_root: String,
    pub output_root: String,
}

/// Versioned description of a service; the decoupling boundary between
/// providers and everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceContract {
    pub name: String,
    pub version: Version,
    pub operations: Vec<OperationSpec>,
}

impl ServiceContract {
    pub fn operation(&self, name: &str) -> Option<&OperationSpec> {
        self.operations.iter().find(|o| o.name == name)
    }
}

/// A contract bound to a network endpoint; the unit of discovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub registration_id: String,
    pub contract: ServiceContract,
    pub endpoint: String,
    pub registered_at: String,
    pub sequence: u64,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid contract: {0:?}")]
    InvalidContract(Vec<String>),
    #[error("invalid endpoint {0:?}")]
    InvalidEndpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store at byte {offset}: {message}")]
    CorruptStore { offset: usize, message: String },
}

/// Checks every ServiceContract/OperationSpec invariant; violations name
/// the offending field.
pub fn validate_contract(c: &ServiceContract) -> Vec<String> {
    let mut violations = Vec::new();
    if !is_valid_service_name(&c.name) {
        violations.push(format!("name: {:?} violates the contract name grammar", c.name));
    }
    if c.operations.is_empty() {
        violations.push("operations: must be non-empty".to_string());
    }
    let mut seen = std::collections::HashSet::new();
    for op in &c.operations {
        if !is_valid_operation_name(&op.name) {
            violations.push(format!("operation name: {:?}", op.name));
        }
        if !is_valid_operation_name(&op.input_root) {
            violations.push(format!("input_root: {:?} for operation {}", op.input_root, op.name));
        }
        if !is_valid_operation_name(&op.output_root) {
            violations.push(format!("output_root: {:?} for operation {}", op.output_root, op.name));
        }
        if !seen.insert(op.name.clone()) {
            violations.push(format!("duplicate operation name {:?}", op.name));
        }
    }
    violations
}

fn validate_endpoint(endpoint: &str) -> Result<(), RegistryError> {
    let url = url::Url::parse(endpoint)
        .map_err(|_| RegistryError::InvalidEndpoint(endpoint.to_string()))?;
    if url.scheme().is_empty() || url.host_str().is_none() || url.port().is_none() {
        return Err(RegistryError::InvalidEndpoint(endpoint.to_string()));
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<RegistryEntry>,
    next_sequence: u64,
}

/// The repository. Discover runs under a shared lock; mutations and save
/// serialize against each other, so readers never see a torn state.
#[derive(Debug, Default)]
pub struct Registry {
    inner: RwLock<Inner>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    /// Stores the contract at the endpoint and makes it immediately
    /// discoverable. Re-registering the same (name, version, endpoint)
    /// replaces the prior entry.
    pub fn register(
        &self,
        contract: ServiceContract,
        endpoint: &str,
    ) -> Result<RegistryEntry, RegistryError> {
        let violations = validate_contract(&contract);
        if !violations.is_empty() {
            return Err(RegistryError::InvalidContract(violations));
        }
        validate_endpoint(endpoint)?;
        let mut inner = self.inner.write().unwrap();
        inner.entries.retain(|e| {
            !(e.contract.name == contract.name
                && e.contract.version == contract.version
                && e.endpoint == endpoint)
        });
        inner.next_sequence += 1;
        let entry = RegistryEntry {
            registration_id: Uuid::new_v4().hyphenated().to_string(),
            contract,
            endpoint: endpoint.to_string(),
            registered_at: now_timestamp(),
            sequence: inner.next_sequence,
        };
        inner.entries.push(entry.clone());
        Ok(entry)
    }

    /// Removes the entry; unknown ids are not an error.
    pub fn deregister(&self, registration_id: &str) -> bool {
        let mut inner = self.inner.write().unwrap();
        let before = inner.entries.len();
        inner.entries.retain(|e| e.registration_id != registration_id);
        inner.entries.len() < before
    }

    /// All entries matching the name and, when given, a same-major version
    /// at least `min_version`; ordered by ascending registration sequence.
    pub fn discover(&self, name: &str, min_version: Option<&Version>) -> Vec<RegistryEntry> {
        let inner = self.inner.read().unwrap();
        let mut out: Vec<RegistryEntry> = inner
            .entries
            .iter()
            .filter(|e| {
                e.contract.name == name
                    && min_version.map_or(true, |mv| e.contract.version.satisfies(mv))
            })
            .cloned()
            .collect();
        out.sort_by_key(|e| e.sequence);
        out
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        let inner = self.inner.read().unwrap();
        let mut out = inner.entries.clone();
        out.sort_by_key(|e| e.sequence);
        out
    }

    /// Writes the full state (including the sequence counter) as one XML
    /// document.
    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        let inner = self.inner.read().unwrap();
        let mut out = String::from(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        out.push_str(&format!(
            r#"<Registry xmlns="{REGISTRY_NS}"><NextSequence>{}</NextSequence>"#,
            inner.next_sequence
        ));
        let mut entries = inner.entries.clone();
        entries.sort_by_key(|e| e.sequence);
        for e in &entries {
            out.push_str(&encode_entry(e));
        }
        out.push_str("</Registry>");
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reconstructs a registry from `save` output. An absent file yields
    /// an empty registry; anything unreadable is a CorruptStore.
    pub fn load(path: &Path) -> Result<Registry, RegistryError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Registry::new());
            }
            Err(e) => return Err(RegistryError::Io(e)),
        };
        let corrupt = |offset: usize, message: String| RegistryError::CorruptStore { offset, message };
        let root = xml::parse_document(&text)
            .map_err(|e| corrupt(e.offset, e.message))?;
        if root.name != "Registry" || root.attr("xmlns") != Some(REGISTRY_NS) {
            return Err(corrupt(0, "not a registry store document".into()));
        }
        let next_sequence: u64 = root
            .child_text("NextSequence")
            .ok_or_else(|| corrupt(0, "missing NextSequence".into()))?
            .parse()
            .map_err(|_| corrupt(0, "bad NextSequence".into()))?;
        let mut entries = Vec::new();
        for el in root.children_named("Entry") {
            entries.push(decode_entry(el).map_err(|m| corrupt(el.inner_span.0, m))?);
        }
        if entries.iter().any(|e: &RegistryEntry| e.sequence > next_sequence) {
            return Err(corrupt(0, "sequence beyond NextSequence".into()));
        }
        Ok(Registry {
            inner: RwLock::new(Inner { entries, next_sequence }),
        })
    }
}

pub fn encode_contract(c: &ServiceContract) -> String {
    let mut out = String::new();
    out.push_str("<Contract><Name>");
    out.push_str(&c.name);
    out.push_str("</Name><Version>");
    out.push_str(&c.version.to_string());
    out.push_str("</Version><Operations>");
    for op in &c.operations {
        out.push_str(&format!(
            "<Operation><Name>{}</Name><InputRoot>{}</InputRoot><OutputRoot>{}</OutputRoot></Operation>",
            op.name, op.input_root, op.output_root
        ));
    }
    out.push_str("</Operations></Contract>");
    out
}

pub fn decode_contract(el: &Element) -> Result<ServiceContract, String> {
    if el.name != "Contract" {
        return Err(format!("expected Contract element, found {}", el.name));
    }
    let name = el.child_text("Name").ok_or("missing Name")?.to_string();
    let version: Version = el
        .child_text("Version")
        .ok_or("missing Version")?
        .parse()?;
    let ops_el = el.child("Operations").ok_or("missing Operations")?;
    let mut operations = Vec::new();
    for op in ops_el.children_named("Operation") {
        operations.push(OperationSpec {
            name: op.child_text("Name").ok_or("missing operation Name")?.to_string(),
            input_root: op.child_text("InputRoot").ok_or("missing InputRoot")?.to_string(),
            output_root: op.child_text("OutputRoot").ok_or("missing OutputRoot")?.to_string(),
        });
    }
    Ok(ServiceContract { name, version, operations })
}

pub fn encode_entry(e: &RegistryEntry) -> String {
    format!(
        "<Entry><RegistrationId>{}</RegistrationId>{}<Endpoint>{}</Endpoint><RegisteredAt>{}</RegisteredAt><Sequence>{}</Sequence></Entry>",
        e.registration_id,
        encode_contract(&e.contract),
        escape_text(&e.endpoint),
        e.registered_at,
        e.sequence
    )
}

pub fn decode_entry(el: &Element) -> Result<RegistryEntry, String> {
    let contract = decode_contract(el.child("Contract").ok_or("missing Contract")?)?;
    let violations = validate_contract(&contract);
    if !violations.is_empty() {
        return Err(format!("invalid contract in store: {violations:?}"));
    }
    let entry = RegistryEntry {
        registration_id: el.child_text("RegistrationId").ok_or("missing RegistrationId")?.to_string(),
        contract,
        endpoint: el.child_text("Endpoint").ok_or("missing Endpoint")?.to_string(),
        registered_at: el.child_text("RegisteredAt").ok_or("missing RegisteredAt")?.to_string(),
        sequence: el
            .child_text("Sequence")
            .ok_or("missing Sequence")?
            .parse()
            .map_err(|_| "bad Sequence")?,
    };
    validate_endpoint(&entry.endpoint).map_err(|e| e.to_string())?;
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn contract(name: &str, version: &str) -> ServiceContract {
        ServiceContract {
            name: name.into(),
            version: version.parse().unwrap(),
            operations: vec![OperationSpec {
                name: "FindCases".into(),
                input_root: "Query".into(),
                output_root: "CaseList".into(),
            }],
        }
    }

    #[test]
    fn register_makes_entry_discoverable() {
        let r = Registry::new();
        let e = r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        let found = r.discover("hospital.records", None);
        assert_eq!(found, vec![e]);
    }

    #[test]
    fn reregistration_replaces() {
        let r = Registry::new();
        let first = r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        let second = r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        let found = r.discover("hospital.records", None);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].registration_id, second.registration_id);
        assert_ne!(first.registration_id, second.registration_id);
    }

    #[test]
    fn zero_operation_contract_rejected() {
        let r = Registry::new();
        let mut c = contract("hospital.records", "1.0.0");
        c.operations.clear();
        assert!(matches!(
            r.register(c, "http://127.0.0.1:7101"),
            Err(RegistryError::InvalidContract(_))
        ));
    }

    #[test]
    fn endpoint_without_port_rejected() {
        let r = Registry::new();
        assert!(matches!(
            r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1"),
            Err(RegistryError::InvalidEndpoint(_))
        ));
    }

    #[test]
    fn deregister_semantics() {
        let r = Registry::new();
        let e = r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        assert!(r.deregister(&e.registration_id));
        assert!(r.discover("hospital.records", None).is_empty());
        assert!(!r.deregister(&e.registration_id));
        assert!(!r.deregister("no-such-id"));
    }

    #[test]
    fn version_filter_same_major_at_least() {
        let r = Registry::new();
        r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        r.register(contract("hospital.records", "1.2.0"), "http://127.0.0.1:7102").unwrap();
        r.register(contract("hospital.records", "2.0.0"), "http://127.0.0.1:7103").unwrap();
        let found = r.discover("hospital.records", Some(&"1.1.0".parse().unwrap()));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].contract.version, Version::new(1, 2, 0));
    }

    #[test]
    fn discover_orders_by_sequence() {
        let r = Registry::new();
        let e1 = r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        let e2 = r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7102").unwrap();
        let found = r.discover("hospital.records", None);
        assert_eq!(
            found.iter().map(|e| e.endpoint.as_str()).collect::<Vec<_>>(),
            vec![e1.endpoint.as_str(), e2.endpoint.as_str()]
        );
        assert!(found[0].sequence < found[1].sequence);
    }

    #[test]
    fn discover_absent_service_is_empty() {
        assert!(Registry::new().discover("absent.service", None).is_empty());
    }

    #[test]
    fn validate_reports_duplicate_operations_and_bad_versions() {
        let mut c = contract("hospital.records", "1.0.0");
        c.operations.push(c.operations[0].clone());
        let v = validate_contract(&c);
        assert!(v.iter().any(|m| m.contains("duplicate") && m.contains("FindCases")));
        assert!("1.0".parse::<Version>().is_err());
        assert!("1.0.0.0".parse::<Version>().is_err());
        assert!("01.0.0".parse::<Version>().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("registry.xml");
        let r = Registry::new();
        r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        let e2 = r.register(contract("lab.results", "2.1.3"), "http://127.0.0.1:7102").unwrap();
        r.deregister(&e2.registration_id);
        r.save(&path).unwrap();
        let loaded = Registry::load(&path).unwrap();
        assert_eq!(loaded.entries(), r.entries());
        // sequence counter survives: next registration continues the series
        let e3 = loaded.register(contract("x.y", "1.0.0"), "http://127.0.0.1:7103").unwrap();
        assert_eq!(e3.sequence, 3);
    }

    #[test]
    fn load_absent_file_is_empty() {
        let dir = tempdir().unwrap();
        let r = Registry::load(&dir.path().join("nope.xml")).unwrap();
        assert!(r.entries().is_empty());
    }

    #[test]
    fn truncated_store_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("registry.xml");
        let r = Registry::new();
        r.register(contract("hospital.records", "1.0.0"), "http://127.0.0.1:7101").unwrap();
        r.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Registry::load(&path),
            Err(RegistryError::CorruptStore { .. })
        ));
    }
}
