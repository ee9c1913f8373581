//! The three HTTP surfaces exercised over real sockets: provider invoke
//! + stats, bus submit/scatter/admin, gateway search.

use std::sync::Arc;

use hygeia::bus::{serve as serve_bus, Bus, HttpAdapter};
use hygeia::envelope::{Envelope, FaultCode, Payload, MEDIA_TYPE};
use hygeia::provider::{
    decode_case_list, encode_query, hospital_records_contract, serve_provider, CaseQuery,
    ProviderOptions, RecordStore,
};
use hygeia::registry::{encode_contract, Registry};
use hygeia::sim::{boot, BootOptions, FederationConfig};
use hygeia::xml;

fn ephemeral_config(n: usize) -> FederationConfig {
    FederationConfig {
        n_hospitals: n,
        base_port: 0,
        ..FederationConfig::default()
    }
}

fn find_cases_request() -> Envelope {
    Envelope::new_request(
        "hospital.records",
        "FindCases",
        &encode_query(&CaseQuery::for_diagnosis("A00")),
        None,
    )
    .unwrap()
}

async fn post_envelope(client: &reqwest::Client, url: &str, envelope: &Envelope) -> (reqwest::StatusCode, String) {
    let response = client
        .post(url)
        .header("content-type", MEDIA_TYPE)
        .body(envelope.serialize().unwrap())
        .send()
        .await
        .unwrap();
    let status = response.status();
    (status, response.text().await.unwrap())
}

async fn start_provider(seed: u32, facility: &str) -> hygeia::serve::ServerHandle {
    let config = FederationConfig {
        seed,
        ..FederationConfig::default()
    };
    let records = hygeia::provider::generate_synthetic(
        seed,
        config.records_per_hospital,
        facility,
        &config.regions,
        &config.diagnoses,
        &config.treatments,
        &config.drugs,
    )
    .unwrap();
    serve_provider(
        "127.0.0.1:0",
        RecordStore::in_memory(facility, records),
        ProviderOptions::default(),
    )
    .await
    .unwrap()
}

#[tokio::test]
async fn provider_invoke_correlates_and_counts() {
    let provider = start_provider(42, "H1").await;
    let client = reqwest::Client::new();
    let invoke_url = format!("{}/service/invoke", provider.url());

    let request = find_cases_request();
    let (status, text) = post_envelope(&client, &invoke_url, &request).await;
    assert_eq!(status, reqwest::StatusCode::OK);
    let reply = Envelope::parse(text.as_bytes()).unwrap();
    assert_eq!(reply.correlation_id, request.message_id);
    let fragment = match &reply.body {
        Payload::Content(f) => f,
        Payload::Fault(f) => panic!("unexpected fault: {}", f.reason),
    };
    let cases = decode_case_list(&xml::parse_fragment(fragment).unwrap()).unwrap();
    assert!(!cases.is_empty());
    assert!(cases.iter().all(|c| c.diagnosis_code == "A00"));

    let stats = client
        .get(format!("{}/service/stats", provider.url()))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let root = xml::parse_document(&stats).unwrap();
    let find_cases_count = root
        .children
        .iter()
        .find(|c| c.attr("name") == Some("FindCases"))
        .and_then(|c| c.text.trim().parse::<u64>().ok());
    assert_eq!(find_cases_count, Some(1));

    provider.shutdown().await;
}

#[tokio::test]
async fn provider_unknown_operation_faults_in_band() {
    let provider = start_provider(7, "H1").await;
    let client = reqwest::Client::new();
    let request =
        Envelope::new_request("hospital.records", "DropTables", "<Query></Query>", None).unwrap();
    let (status, text) =
        post_envelope(&client, &format!("{}/service/invoke", provider.url()), &request).await;
    assert_eq!(status, reqwest::StatusCode::OK);
    let reply = Envelope::parse(text.as_bytes()).unwrap();
    match reply.body {
        Payload::Fault(f) => assert_eq!(f.code, FaultCode::SenderError),
        Payload::Content(_) => panic!("expected a fault"),
    }
    provider.shutdown().await;
}

async fn register_over_http(client: &reqwest::Client, bus_url: &str, endpoint: &str) -> String {
    let body = format!(
        "<Register>{}<Endpoint>{endpoint}</Endpoint></Register>",
        encode_contract(&hospital_records_contract())
    );
    let response = client
        .post(format!("{bus_url}/registry/register"))
        .header("content-type", MEDIA_TYPE)
        .body(body)
        .send()
        .await
        .unwrap();
    assert_eq!(response.status(), reqwest::StatusCode::OK);
    let text = response.text().await.unwrap();
    xml::parse_document(&text).unwrap().attr("id").unwrap().to_string()
}

#[tokio::test]
async fn bus_http_surface_round_trip() {
    let bus = Arc::new(Bus::new(Arc::new(Registry::new())));
    bus.register_adapter("http", Arc::new(HttpAdapter::new())).unwrap();
    let bus_handle = serve_bus(bus, "127.0.0.1:0").await.unwrap();
    let bus_url = bus_handle.url();
    let client = reqwest::Client::new();

    // garbage body is the caller's fault: HTTP 400, not an in-band fault
    let response = client
        .post(format!("{bus_url}/bus/submit"))
        .body("not xml at all")
        .send()
        .await
        .unwrap();
    assert_eq!(response.status(), reqwest::StatusCode::BAD_REQUEST);

    // no provider yet: valid request, in-band ServiceUnavailable
    let (status, text) =
        post_envelope(&client, &format!("{bus_url}/bus/submit"), &find_cases_request()).await;
    assert_eq!(status, reqwest::StatusCode::OK);
    let reply = Envelope::parse(text.as_bytes()).unwrap();
    match &reply.body {
        Payload::Fault(f) => assert_eq!(f.code, FaultCode::ServiceUnavailable),
        Payload::Content(_) => panic!("expected ServiceUnavailable"),
    }

    let p1 = start_provider(1, "H1").await;
    let p2 = start_provider(2, "H2").await;
    let id1 = register_over_http(&client, &bus_url, &p1.url()).await;
    let _id2 = register_over_http(&client, &bus_url, &p2.url()).await;

    let services = client
        .get(format!("{bus_url}/registry/services"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let root = xml::parse_document(&services).unwrap();
    assert_eq!(root.children_named("Entry").count(), 2);

    // submit routes to exactly one provider
    let request = find_cases_request();
    let (status, text) = post_envelope(&client, &format!("{bus_url}/bus/submit"), &request).await;
    assert_eq!(status, reqwest::StatusCode::OK);
    let reply = Envelope::parse(text.as_bytes()).unwrap();
    assert_eq!(reply.correlation_id, request.message_id);
    assert!(matches!(reply.body, Payload::Content(_)));

    // scatter gathers both, in registration-sequence order
    let (status, text) = post_envelope(&client, &format!("{bus_url}/bus/scatter"), &find_cases_request()).await;
    assert_eq!(status, reqwest::StatusCode::OK);
    let root = xml::parse_document(&text).unwrap();
    assert_eq!(root.name, "GatherResult");
    let endpoints: Vec<&str> = root
        .children_named("Reply")
        .filter_map(|r| r.attr("endpoint"))
        .collect();
    assert_eq!(endpoints, vec![p1.url(), p2.url()]);

    // deregister shrinks the scatter set
    let removed = client
        .delete(format!("{bus_url}/registry/registrations/{id1}"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert!(removed.contains("<Removed>true</Removed>"));
    let (_, text) = post_envelope(&client, &format!("{bus_url}/bus/scatter"), &find_cases_request()).await;
    let root = xml::parse_document(&text).unwrap();
    assert_eq!(root.children_named("Reply").count(), 1);

    p1.shutdown().await;
    p2.shutdown().await;
    bus_handle.shutdown().await;
}

#[tokio::test]
async fn gateway_get_and_post_agree() {
    let federation = boot(&ephemeral_config(2), &BootOptions::default()).await.unwrap();
    let client = reqwest::Client::new();

    let via_get = client
        .get(format!(
            "{}/search?kind=region_counts&diagnosis=A00",
            federation.gateway_url
        ))
        .send()
        .await
        .unwrap();
    assert_eq!(via_get.status(), reqwest::StatusCode::OK);
    let get_body = via_get.text().await.unwrap();

    let via_post = client
        .post(format!("{}/search", federation.gateway_url))
        .header("content-type", MEDIA_TYPE)
        .body("<Search><Kind>region_counts</Kind><Diagnosis>A00</Diagnosis></Search>")
        .send()
        .await
        .unwrap();
    assert_eq!(via_post.status(), reqwest::StatusCode::OK);
    let post_body = via_post.text().await.unwrap();

    assert_eq!(get_body, post_body);
    let root = xml::parse_document(&get_body).unwrap();
    assert_eq!(root.name, "Answer");
    assert_eq!(root.child_text("ProvidersAnswered"), Some("2"));

    federation.shutdown().await;
}

#[tokio::test]
async fn gateway_rejects_bad_input_and_reports_dead_bus() {
    let federation = boot(&ephemeral_config(1), &BootOptions::default()).await.unwrap();
    let client = reqwest::Client::new();
    let gateway_url = federation.gateway_url.clone();

    for query in [
        "kind=bogus&diagnosis=A00",
        "kind=cases",
        "kind=region_counts&diagnosis=A00&format=csv",
        "kind=region_counts&diagnosis=A00&region=GA",
        "kind=cases&diagnosis=A00&from=2024-02-01&to=2024-01-01",
    ] {
        let response = client
            .get(format!("{gateway_url}/search?{query}"))
            .send()
            .await
            .unwrap();
        assert_eq!(
            response.status(),
            reqwest::StatusCode::BAD_REQUEST,
            "query {query:?} should be rejected"
        );
    }

    // a gateway whose bus is gone answers 502, not 500 or a hang
    let dead_bus = "http://127.0.0.1:1".to_string();
    let orphan = hygeia::gateway::serve_gateway("127.0.0.1:0", &dead_bus).await.unwrap();
    let response = client
        .get(format!("{}/search?kind=cases&diagnosis=A00", orphan.url()))
        .send()
        .await
        .unwrap();
    assert_eq!(response.status(), reqwest::StatusCode::BAD_GATEWAY);
    orphan.shutdown().await;

    federation.shutdown().await;
}
