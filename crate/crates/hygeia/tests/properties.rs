//! Randomized properties over the wire format, the registry, and the
//! provider query operations.

use std::collections::BTreeMap;

use proptest::prelude::*;

use hygeia::envelope::{Envelope, Fault, FaultCode, Payload};
use hygeia::provider::{
    count_cases_by_region, find_cases, generate_synthetic, list_treatments, load_store,
    save_store, CaseQuery, RecordStore,
};
use hygeia::registry::{OperationSpec, Registry, ServiceContract, Version};
use hygeia::xml::{escape_attr, escape_text};

fn service_name() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-z][a-z0-9._-]{0,63}").unwrap()
}

fn operation_name() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[A-Za-z][A-Za-z0-9_]{0,63}").unwrap()
}

/// Free text biased toward the characters the escaper must handle.
fn hostile_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just('<'),
            Just('>'),
            Just('&'),
            Just('"'),
            Just('\''),
            proptest::char::range('a', 'z'),
            proptest::char::range('0', '9'),
            Just(' '),
        ],
        0..40,
    )
    .prop_map(|chars| chars.into_iter().collect())
}

fn content_body() -> impl Strategy<Value = String> {
    (operation_name(), hostile_text(), hostile_text()).prop_map(|(root, attr, text)| {
        format!(
            r#"<{root} note="{}">{}</{root}>"#,
            escape_attr(&attr),
            escape_text(&text)
        )
    })
}

/// Like `hostile_text` but never empty; fault reasons require content.
fn hostile_text_nonempty() -> impl Strategy<Value = String> {
    (proptest::char::range('a', 'z'), hostile_text()).prop_map(|(c, rest)| format!("{c}{rest}"))
}

fn fault_body() -> impl Strategy<Value = Payload> {
    (
        prop_oneof![
            Just(FaultCode::SenderError),
            Just(FaultCode::ServiceUnavailable),
            Just(FaultCode::Timeout),
            Just(FaultCode::ContractMismatch),
            Just(FaultCode::InternalError),
        ],
        hostile_text_nonempty(),
        proptest::option::of(hostile_text()),
    )
        .prop_map(|(code, reason, detail)| {
            let mut fault = Fault::new(code, reason);
            if let Some(d) = detail {
                fault = fault.with_detail(d);
            }
            Payload::Fault(fault)
        })
}

fn envelope() -> impl Strategy<Value = Envelope> {
    (
        service_name(),
        operation_name(),
        content_body(),
        proptest::option::of(
            (1u16..9999).prop_map(|port| format!("http://127.0.0.1:{port}/reply")),
        ),
        proptest::option::of(fault_body()),
    )
        .prop_map(|(service, operation, body, reply_to, fault)| {
            let request =
                Envelope::new_request(&service, &operation, &body, reply_to.as_deref()).unwrap();
            match fault {
                None => request,
                Some(payload) => Envelope::new_reply(&request, payload),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn envelope_round_trips(e in envelope()) {
        let wire = e.serialize().unwrap();
        let back = Envelope::parse(&wire).unwrap();
        prop_assert_eq!(&back, &e);
        // serialization is a function of the value: stable bytes
        prop_assert_eq!(back.serialize().unwrap(), wire);
    }

    #[test]
    fn envelope_wire_form_has_no_insignificant_whitespace(e in envelope()) {
        let wire = String::from_utf8(e.serialize().unwrap()).unwrap();
        prop_assert!(wire.starts_with(r#"<?xml version="1.0" encoding="UTF-8"?>"#));
        prop_assert!(!wire.contains('\n'));
    }
}

fn contract(name: &str, version: Version) -> ServiceContract {
    ServiceContract {
        name: name.to_string(),
        version,
        operations: vec![OperationSpec {
            name: "Ping".to_string(),
            input_root: "Ping".to_string(),
            output_root: "Pong".to_string(),
        }],
    }
}

#[derive(Debug, Clone)]
enum RegistryOp {
    Register { name_idx: usize, version: Version, port: u16 },
    DeregisterNth(usize),
}

fn registry_op() -> impl Strategy<Value = RegistryOp> {
    prop_oneof![
        (0usize..3, 1u64..4, 0u64..3, 0u64..3, 1u16..9999).prop_map(
            |(name_idx, major, minor, patch, port)| RegistryOp::Register {
                name_idx,
                version: Version::new(major, minor, patch),
                port,
            }
        ),
        (0usize..8).prop_map(RegistryOp::DeregisterNth),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any register/deregister history survives save + load: the reloaded
    /// registry discovers exactly the same entries and keeps allocating
    /// fresh sequence numbers.
    #[test]
    fn registry_persistence_is_faithful(ops in proptest::collection::vec(registry_op(), 0..24)) {
        let names = ["hospital.records", "lab.results", "imaging.store"];
        let registry = Registry::new();
        for op in &ops {
            match op {
                RegistryOp::Register { name_idx, version, port } => {
                    registry
                        .register(contract(names[*name_idx], *version), &format!("http://127.0.0.1:{port}"))
                        .unwrap();
                }
                RegistryOp::DeregisterNth(n) => {
                    let entries = registry.entries();
                    if let Some(entry) = entries.get(n % entries.len().max(1)) {
                        registry.deregister(&entry.registration_id);
                    }
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.xml");
        registry.save(&path).unwrap();
        let reloaded = Registry::load(&path).unwrap();
        prop_assert_eq!(reloaded.entries(), registry.entries());
        for name in names {
            for min in [None, Some(Version::new(1, 0, 0)), Some(Version::new(2, 1, 0))] {
                prop_assert_eq!(
                    reloaded.discover(name, min.as_ref()),
                    registry.discover(name, min.as_ref())
                );
            }
        }
    }
}

fn code_list(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The three query operations agree with each other: region counts
    /// and treatment counts both total to the unfiltered case count.
    #[test]
    fn provider_counts_are_consistent(seed in 0u32..10_000, n in 1usize..120, diag_idx in 0usize..3) {
        let diagnoses = code_list("A0", 3);
        let records = generate_synthetic(
            seed, n, "H1",
            &code_list("R", 4), &diagnoses, &code_list("T", 3), &code_list("D", 2),
        ).unwrap();
        let store = RecordStore::in_memory("H1", records);
        let diagnosis = &diagnoses[diag_idx];
        let cases = find_cases(&store, &CaseQuery::for_diagnosis(diagnosis)).unwrap();
        let by_region: BTreeMap<String, u64> =
            count_cases_by_region(&store, diagnosis, None, None).unwrap();
        prop_assert_eq!(by_region.values().sum::<u64>(), cases.len() as u64);
        let treatments = list_treatments(&store, diagnosis);
        prop_assert_eq!(treatments.iter().map(|(_, _, c)| *c).sum::<u64>(), cases.len() as u64);
    }

    /// Switching a store between backends never changes a query answer.
    #[test]
    fn backends_answer_identically(seed in 0u32..10_000, n in 1usize..80, region in proptest::option::of(0usize..4)) {
        let regions = code_list("R", 4);
        let records = generate_synthetic(
            seed, n, "H1",
            &regions, &code_list("A0", 3), &code_list("T", 3), &code_list("D", 2),
        ).unwrap();
        let in_memory = RecordStore::in_memory("H1", records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("H1.xml");
        save_store(&in_memory, &path).unwrap();
        let file_backed = load_store(&path).unwrap();

        let mut query = CaseQuery::for_diagnosis("A01");
        query.region_code = region.map(|i| regions[i].clone());
        prop_assert_eq!(
            find_cases(&in_memory, &query).unwrap(),
            find_cases(&file_backed, &query).unwrap()
        );
        prop_assert_eq!(
            count_cases_by_region(&in_memory, "A02", None, None).unwrap(),
            count_cases_by_region(&file_backed, "A02", None, None).unwrap()
        );
        prop_assert_eq!(
            list_treatments(&in_memory, "A03"),
            list_treatments(&file_backed, "A03")
        );
    }
}
