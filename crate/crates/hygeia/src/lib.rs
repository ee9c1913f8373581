//! Hygeia: a lightweight enterprise service bus plus a simulated
//! federation of hospital information services.
//!
//! Providers expose record stores behind versioned contracts, a central
//! bus discovers, orchestrates, and aggregates them, and consumers query
//! the federation through a single gateway. One canonical XML envelope is
//! the interchange format everywhere; faults travel in-band.

pub mod bus;
pub mod envelope;
pub mod gateway;
pub mod provider;
pub mod registry;
pub mod serve;
pub mod sim;
pub mod xml;

pub use bus::{Bus, FailurePolicy, OrchestrationPlan, OrchestrationResult, ScatterOutcome};
pub use envelope::{Envelope, EnvelopeError, Fault, FaultCode, Payload};
pub use gateway::{FederatedAnswer, Format, QueryResult, SearchKind, SearchRequest};
pub use provider::{CaseQuery, HealthRecord, RecordStore};
pub use registry::{Registry, RegistryEntry, ServiceContract, Version};
pub use sim::{FederationConfig, ScenarioReport, Verdict};
