//! Provider side of the protocol: validation, argument loading, execution
//! on the worker pool and result signaling.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::executor::Executor;
use crate::model::{
    ContractId, DiscardReason, Endpoint, Invocation, InvocationId, InvocationState, Role, ServiceResult, SignalKind,
    TransitionCause, TransitionOutcome,
};
use crate::registry::{ContractValidation, Registry};
use crate::sdk::{Service, ServiceMetadata, ServiceRegistration};
use crate::signal::{DispatchOutcome, Signal, SignalBody, Transport};
use crate::store::InvocationStore;

pub const RECOVERY_MESSAGE: &str =
    "provider connector restarted; the invocation's arguments and execution state were lost";
const GENERIC_FAILURE: &str = "service execution failed without an error message";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("service '{0}' is already registered")]
    DuplicateService(String),
}

#[derive(Clone)]
pub struct ProviderRuntime {
    inner: Arc<Inner>,
}

struct Inner {
    address: Endpoint,
    store: Arc<InvocationStore>,
    registry: Arc<Registry>,
    services: RwLock<BTreeMap<String, ServiceRegistration>>,
    /// Live service instances, one per invocation, from validation until execution starts.
    instances: Mutex<HashMap<InvocationId, Box<dyn Service>>>,
    transport: Arc<dyn Transport>,
    executor: Arc<dyn Executor>,
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "service panicked".to_string())
}

impl ProviderRuntime {
    pub fn new(
        address: Endpoint,
        store: Arc<InvocationStore>,
        registry: Arc<Registry>,
        transport: Arc<dyn Transport>,
        executor: Arc<dyn Executor>,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                address,
                store,
                registry,
                services: RwLock::new(BTreeMap::new()),
                instances: Mutex::new(HashMap::new()),
                transport,
                executor,
            }),
        }
    }

    pub fn address(&self) -> &Endpoint {
        &self.inner.address
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.inner.registry
    }

    pub fn store(&self) -> &Arc<InvocationStore> {
        &self.inner.store
    }

    pub fn register_service(&self, registration: ServiceRegistration) -> Result<(), ProviderError> {
        let mut services = self.inner.services.write();
        let id = registration.metadata.service_id.clone();
        if services.contains_key(&id) {
            return Err(ProviderError::DuplicateService(id));
        }
        services.insert(id, registration);
        Ok(())
    }

    pub fn unregister_service(&self, service_id: &str) -> bool {
        self.inner.services.write().remove(service_id).is_some()
    }

    pub fn service_metadata(&self, service_id: &str) -> Option<ServiceMetadata> {
        self.inner.services.read().get(service_id).map(|r| r.metadata.clone())
    }

    pub fn services(&self) -> Vec<ServiceMetadata> {
        self.inner.services.read().values().map(|r| r.metadata.clone()).collect()
    }

    pub fn validate_contract(&self, contract_id: &ContractId) -> ContractValidation {
        let services = self.inner.services.read();
        self.inner.registry.validate_contract(contract_id, |id| services.contains_key(id))
    }

    fn send(&self, to: &Endpoint, id: InvocationId, body: SignalBody) {
        self.inner.transport.send(to, Signal::new(id, self.inner.address.clone(), body));
    }

    pub fn handle(&self, signal: Signal) -> DispatchOutcome {
        match signal.body {
            SignalBody::Invocation { contract_id } => {
                self.on_invocation_signal(signal.invocation_id, contract_id, signal.sender)
            }
            SignalBody::Execution { args } => self.on_execution_signal(signal.invocation_id, args),
            _ => DispatchOutcome::NoHandler,
        }
    }

    pub fn on_invocation_signal(
        &self,
        id: InvocationId,
        contract_id: ContractId,
        consumer: Endpoint,
    ) -> DispatchOutcome {
        let cause = TransitionCause::signal(SignalKind::ServiceInvocationSignal);
        let store = &self.inner.store;
        if store.get(id, Role::Provider).is_some() {
            store.record_discard(id, Role::Provider, InvocationState::Initialized, DiscardReason::Duplicate, cause);
            return DispatchOutcome::Discarded(DiscardReason::Duplicate);
        }
        let now = store.now_ms();
        let mut record =
            Invocation::new(id, Role::Provider, InvocationState::Initialized, contract_id.clone(), consumer.clone(), now);
        let reply = match self.validate_contract(&contract_id) {
            ContractValidation::Valid(service_id) => {
                let registration = self.inner.services.read().get(&service_id).cloned();
                match registration {
                    Some(registration) => {
                        record.service_id = Some(service_id);
                        // the instance must exist before the record becomes visible
                        self.inner.instances.lock().insert(id, registration.instantiate());
                        SignalBody::Initialized
                    }
                    None => {
                        tracing::warn!(invocation = %id, service = %service_id, "service unloaded during validation");
                        record.state = InvocationState::Invalid;
                        let message = crate::registry::INVALID_CONTRACT_MESSAGE.to_string();
                        record.error_message = Some(message.clone());
                        SignalBody::Invalid { error_message: message }
                    }
                }
            }
            ContractValidation::Invalid(reason) => {
                record.state = InvocationState::Invalid;
                record.error_message = Some(reason.clone());
                SignalBody::Invalid { error_message: reason }
            }
        };
        if store.create(record, cause).is_err() {
            // lost a race against a replay of the same signal
            self.inner.instances.lock().remove(&id);
            store.record_discard(id, Role::Provider, InvocationState::Initialized, DiscardReason::Duplicate, cause);
            return DispatchOutcome::Discarded(DiscardReason::Duplicate);
        }
        self.send(&consumer, id, reply);
        DispatchOutcome::Applied
    }

    pub fn on_execution_signal(&self, id: InvocationId, args: Vec<String>) -> DispatchOutcome {
        let cause = TransitionCause::signal(SignalKind::ServiceExecutionSignal);
        let store = &self.inner.store;
        let Some(record) = store.get(id, Role::Provider) else {
            tracing::debug!(invocation = %id, "execution signal for unknown invocation dropped");
            return DispatchOutcome::UnknownInvocation;
        };
        // Taking the instance is what admits exactly one execution signal.
        let instance = self.inner.instances.lock().remove(&id);
        let Some(mut service) = instance else {
            let reason = if record.state == InvocationState::Initialized || record.state == InvocationState::Running {
                DiscardReason::Duplicate
            } else {
                crate::model::apply_transition(&record, InvocationState::Running, cause, 0)
                    .discard_reason()
                    .unwrap_or(DiscardReason::NoSuchEdge)
            };
            store.record_discard(id, Role::Provider, InvocationState::Running, reason, cause);
            return DispatchOutcome::Discarded(reason);
        };
        let metadata = record.service_id.as_deref().and_then(|sid| self.service_metadata(sid));
        let Some(metadata) = metadata else {
            return self.fail(id, cause, "service is no longer loaded on this connector".to_string());
        };
        if args.len() != metadata.arity() {
            // the service id is a private asset property and stays out of the message
            let message =
                format!("service expects {} argument(s) but received {}", metadata.arity(), args.len());
            return self.fail(id, cause, message);
        }
        let loaded = catch_unwind(AssertUnwindSafe(|| service.load_args(args)));
        match loaded {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return self.fail(id, cause, e.0),
            Err(payload) => return self.fail(id, cause, panic_message(payload)),
        }
        let outcome = store.transition(id, Role::Provider, InvocationState::Running, cause);
        if let Some(TransitionOutcome::Applied(record)) = &outcome {
            self.send(&record.counterparty, id, SignalBody::Running);
            let runtime = self.clone();
            let return_type = metadata.return_type.clone();
            self.inner.executor.submit(Box::new(move || {
                match catch_unwind(AssertUnwindSafe(|| service.execute())) {
                    Ok(Ok(mut result)) => {
                        if result.data_type.is_none() {
                            result.data_type = Some(return_type);
                        }
                        runtime.complete_execution(id, result);
                    }
                    Ok(Err(e)) => {
                        runtime.fail_execution(id, e.0);
                    }
                    Err(payload) => {
                        runtime.fail_execution(id, panic_message(payload));
                    }
                }
            }));
        }
        DispatchOutcome::from_transition(outcome)
    }

    fn fail(&self, id: InvocationId, cause: TransitionCause, message: String) -> DispatchOutcome {
        let message = if message.trim().is_empty() { GENERIC_FAILURE.to_string() } else { message };
        let outcome = self.inner.store.transition_with(id, Role::Provider, InvocationState::Failed, cause, |r| {
            r.error_message = Some(message.clone())
        });
        if let Some(TransitionOutcome::Applied(record)) = &outcome {
            self.send(&record.counterparty, id, SignalBody::Failed { error_message: message });
        }
        DispatchOutcome::from_transition(outcome)
    }

    /// Reports a finished execution; closes the record and signals the result.
    pub fn complete_execution(&self, id: InvocationId, mut result: ServiceResult) -> DispatchOutcome {
        if !result.success && result.error_message.as_deref().is_none_or(|m| m.trim().is_empty()) {
            result.error_message = Some("service finished with an error".to_string());
        }
        if result.success && result.data.is_none() {
            result.data = Some(String::new());
        }
        let outcome = self.inner.store.transition(id, Role::Provider, InvocationState::Closed, TransitionCause::execution());
        if let Some(TransitionOutcome::Applied(record)) = &outcome {
            self.send(&record.counterparty, id, SignalBody::Finished { result });
        }
        DispatchOutcome::from_transition(outcome)
    }

    /// Reports an execution that raised an error.
    pub fn fail_execution(&self, id: InvocationId, error: String) -> DispatchOutcome {
        self.fail(id, TransitionCause::execution(), error)
    }

    /// Invalidates every provider record left non-terminal by a previous run
    /// and tells the consumers. Call once at startup, before accepting signals.
    pub fn recover_on_start(&self) -> usize {
        let store = &self.inner.store;
        let mut count = 0;
        for record in store.list(Role::Provider).into_iter().filter(|r| !r.is_terminal()) {
            let outcome =
                store.transition_with(record.id, Role::Provider, InvocationState::Invalid, TransitionCause::recovery(), |r| {
                    r.error_message = Some(RECOVERY_MESSAGE.to_string())
                });
            if let Some(TransitionOutcome::Applied(record)) = outcome {
                self.inner.instances.lock().remove(&record.id);
                self.send(
                    &record.counterparty,
                    record.id,
                    SignalBody::Invalid { error_message: RECOVERY_MESSAGE.to_string() },
                );
                count += 1;
            }
        }
        if count > 0 {
            tracing::info!(count, "invalidated provider invocations interrupted by restart");
        }
        count
    }
}
