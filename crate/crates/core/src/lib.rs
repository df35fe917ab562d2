//! Service invocation layer for dataspace connectors.
//!
//! A consumer connector invokes a remote service under a negotiated usage
//! contract; the provider connector validates the contract, loads the
//! arguments, runs the service on a bounded worker pool and reports back.
//! Both sides track the invocation independently and communicate through
//! one-way [`signal::Signal`]s. Signals that would move an invocation
//! backwards through its state graph are discarded.

pub mod connector;
pub mod consumer;
pub mod executor;
pub mod model;
pub mod provider;
pub mod registry;
pub mod sdk;
pub mod signal;
pub mod sim;
pub mod store;

pub use connector::Connector;
pub use consumer::{CallbackNotification, CallbackNotifier, ConsumerRuntime, ContractBook, ResultError};
pub use model::{
    ContractId, Endpoint, Invocation, InvocationId, InvocationState, Role, ServiceResult, SignalKind,
    TransitionCause,
};
pub use provider::ProviderRuntime;
pub use registry::Registry;
pub use sdk::{Service, ServiceError, ServiceMetadata, ServiceRegistration};
pub use signal::{DispatchOutcome, Signal, SignalBody, Transport};
pub use store::{InvocationStore, TransitionLog};
