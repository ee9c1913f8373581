//! `hygeia` — CLI and scenario harness for the federation: boots
//! bus + providers + gateway on loopback, drives registration, runs
//! queries, and executes the outbreak-tracing scenario.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hygeia::registry::{decode_contract, encode_contract, validate_contract};
use hygeia::sim::{scenario_outbreak, boot, BootOptions, FederationConfig, Verdict};
use hygeia::xml;

#[derive(Parser)]
#[command(name = "hygeia", version, about = "Federated hospital records over a lightweight service bus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FederationArgs {
    /// Number of hospital providers to boot.
    #[arg(long, default_value_t = 3)]
    hospitals: usize,
    /// Base seed; hospital i uses seed + i.
    #[arg(long, default_value_t = 42)]
    seed: u32,
    /// Synthetic records per hospital.
    #[arg(long, default_value_t = 200)]
    records: usize,
    /// Bus port; providers take base_port+1.., gateway base_port+hospitals+1.
    #[arg(long, default_value_t = 7000)]
    base_port: u16,
}

impl FederationArgs {
    fn to_config(&self) -> FederationConfig {
        FederationConfig {
            n_hospitals: self.hospitals,
            seed: self.seed,
            records_per_hospital: self.records,
            base_port: self.base_port,
            ..FederationConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Boot the federation and serve until interrupted.
    Up(FederationArgs),
    /// Run one federated search through the gateway.
    Query {
        /// cases | region_counts | treatments
        kind: String,
        /// Diagnosis code, e.g. A00.
        diagnosis: String,
        #[arg(long)]
        region: Option<String>,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
        #[arg(long, default_value_t = 2000)]
        timeout_ms: u64,
        /// partial | all
        #[arg(long, default_value = "partial")]
        policy: String,
        /// xml | json
        #[arg(long, default_value = "xml")]
        format: String,
        #[arg(long, env = "HYGEIA_GATEWAY_URL", default_value = "http://127.0.0.1:7004")]
        gateway_url: String,
    },
    /// Inspect or mutate the bus registry.
    Registry {
        #[command(subcommand)]
        command: RegistryCommand,
    },
    /// Boot, run the outbreak-tracing scenario against the oracle, tear down.
    Scenario(FederationArgs),
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// One line per registration: sequence, name, version, endpoint.
    List {
        #[arg(long, env = "HYGEIA_BUS_URL", default_value = "http://127.0.0.1:7000")]
        bus_url: String,
    },
    /// Register a contract document file at an endpoint.
    Register {
        contract_file: PathBuf,
        endpoint: String,
        #[arg(long, env = "HYGEIA_BUS_URL", default_value = "http://127.0.0.1:7000")]
        bus_url: String,
    },
    /// Remove a registration by id.
    Deregister {
        id: String,
        #[arg(long, env = "HYGEIA_BUS_URL", default_value = "http://127.0.0.1:7000")]
        bus_url: String,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Up(args) => cmd_up(args).await,
        Command::Query {
            kind,
            diagnosis,
            region,
            from,
            to,
            timeout_ms,
            policy,
            format,
            gateway_url,
        } => {
            cmd_query(
                &gateway_url,
                &kind,
                &diagnosis,
                region.as_deref(),
                from.as_deref(),
                to.as_deref(),
                timeout_ms,
                &policy,
                &format,
            )
            .await
        }
        Command::Registry { command } => match command {
            RegistryCommand::List { bus_url } => cmd_registry_list(&bus_url).await,
            RegistryCommand::Register {
                contract_file,
                endpoint,
                bus_url,
            } => cmd_registry_register(&bus_url, &contract_file, &endpoint).await,
            RegistryCommand::Deregister { id, bus_url } => {
                cmd_registry_deregister(&bus_url, &id).await
            }
        },
        Command::Scenario(args) => cmd_scenario(args).await,
    }
}

async fn cmd_up(args: FederationArgs) -> ExitCode {
    let config = args.to_config();
    let store = std::env::var("HYGEIA_REGISTRY_STORE").unwrap_or_else(|_| "./registry.xml".into());
    let options = BootOptions {
        registry_store: Some(PathBuf::from(store)),
        ..BootOptions::default()
    };
    let federation = match boot(&config, &options).await {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("bus {}", federation.bus_url);
    for (i, url) in federation.provider_urls.iter().enumerate() {
        println!("provider {} {}", config.facility_id(i), url);
    }
    println!("gateway {}", federation.gateway_url);
    println!("federation up; press Ctrl-C to stop");
    let _ = tokio::signal::ctrl_c().await;
    federation.shutdown().await;
    ExitCode::SUCCESS
}

#[allow(clippy::too_many_arguments)]
async fn cmd_query(
    gateway_url: &str,
    kind: &str,
    diagnosis: &str,
    region: Option<&str>,
    from: Option<&str>,
    to: Option<&str>,
    timeout_ms: u64,
    policy: &str,
    format: &str,
) -> ExitCode {
    let mut url = format!(
        "{}/search?kind={kind}&diagnosis={diagnosis}&timeout_ms={timeout_ms}&policy={policy}&format={format}",
        gateway_url.trim_end_matches('/')
    );
    for (name, value) in [("region", region), ("from", from), ("to", to)] {
        if let Some(v) = value {
            url.push_str(&format!("&{name}={v}"));
        }
    }
    let response = match reqwest::get(&url).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: gateway unreachable: {e}");
            return ExitCode::from(2);
        }
    };
    let status = response.status();
    let text = match response.text().await {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: gateway unreachable: {e}");
            return ExitCode::from(2);
        }
    };
    if status != reqwest::StatusCode::OK {
        eprintln!("error: gateway answered HTTP {status}: {text}");
        return ExitCode::FAILURE;
    }
    println!("{text}");
    match count_faults(&text, format) {
        Some(0) => ExitCode::SUCCESS,
        Some(_) => ExitCode::from(3),
        None => {
            eprintln!("error: unrecognized answer document");
            ExitCode::FAILURE
        }
    }
}

fn count_faults(answer: &str, format: &str) -> Option<usize> {
    match format {
        "json" => {
            let value: serde_json::Value = serde_json::from_str(answer).ok()?;
            Some(value.get("faults")?.as_array()?.len())
        }
        _ => {
            let root = xml::parse_document(answer).ok()?;
            Some(root.child("Faults")?.children.len())
        }
    }
}

async fn cmd_registry_list(bus_url: &str) -> ExitCode {
    let url = format!("{}/registry/services", bus_url.trim_end_matches('/'));
    let text = match fetch(&url).await {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: bus unreachable: {e}");
            return ExitCode::from(2);
        }
    };
    let root = match xml::parse_document(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: bad services document: {e}");
            return ExitCode::FAILURE;
        }
    };
    for entry in root.children_named("Entry") {
        match hygeia::registry::decode_entry(entry) {
            Ok(e) => println!(
                "{} {} {} {} {}",
                e.sequence, e.contract.name, e.contract.version, e.endpoint, e.registration_id
            ),
            Err(m) => eprintln!("warning: undecodable entry: {m}"),
        }
    }
    ExitCode::SUCCESS
}

async fn cmd_registry_register(bus_url: &str, contract_file: &PathBuf, endpoint: &str) -> ExitCode {
    let text = match std::fs::read_to_string(contract_file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", contract_file.display());
            return ExitCode::FAILURE;
        }
    };
    let contract = match xml::parse_document(&text).map_err(|e| e.to_string()).and_then(|root| decode_contract(&root)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: malformed contract file: {e}");
            return ExitCode::FAILURE;
        }
    };
    let violations = validate_contract(&contract);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return ExitCode::FAILURE;
    }
    let body = format!(
        "<Register>{}<Endpoint>{endpoint}</Endpoint></Register>",
        encode_contract(&contract)
    );
    let client = reqwest::Client::new();
    let response = match client
        .post(format!("{}/registry/register", bus_url.trim_end_matches('/')))
        .header("content-type", "application/xml; charset=utf-8")
        .body(body)
        .send()
        .await
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: bus unreachable: {e}");
            return ExitCode::from(2);
        }
    };
    let status = response.status();
    let text = response.text().await.unwrap_or_default();
    if status != reqwest::StatusCode::OK {
        eprintln!("error: registration rejected: {text}");
        return ExitCode::FAILURE;
    }
    println!("{text}");
    ExitCode::SUCCESS
}

async fn cmd_registry_deregister(bus_url: &str, id: &str) -> ExitCode {
    let client = reqwest::Client::new();
    let url = format!("{}/registry/registrations/{id}", bus_url.trim_end_matches('/'));
    match client.delete(&url).send().await {
        Ok(r) => {
            let text = r.text().await.unwrap_or_default();
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: bus unreachable: {e}");
            ExitCode::from(2)
        }
    }
}

async fn cmd_scenario(args: FederationArgs) -> ExitCode {
    let report = scenario_outbreak(&args.to_config()).await;
    print!("{}", report.render());
    match report.verdict {
        Verdict::Pass => ExitCode::SUCCESS,
        Verdict::Fail(_) => ExitCode::FAILURE,
    }
}

async fn fetch(url: &str) -> Result<String, reqwest::Error> {
    reqwest::get(url).await?.text().await
}
