//! Consumer side of the protocol: invoke, status and result, plus the
//! handlers for provider signals.
//!
//! Arguments wait in an in-memory cache from `invoke` until the provider
//! confirms initialization; results wait in a second cache from `FINISHED`
//! until they are read once. Neither cache survives a restart.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ContractId, Endpoint, Invocation, InvocationId, InvocationState, Role, ServiceResult, SignalKind,
    TransitionCause, TransitionOutcome,
};
use crate::signal::{DispatchOutcome, Signal, SignalBody, Transport};
use crate::store::InvocationStore;

/// Body of the notification posted to an invocation's callback URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CallbackNotification {
    pub invocation_id: InvocationId,
    pub state: InvocationState,
}

/// Delivers completion notifications. Fire-and-forget: failures are the
/// notifier's to log and never affect invocation state.
pub trait CallbackNotifier: Send + Sync {
    fn notify(&self, url: &str, notification: CallbackNotification);
}

#[derive(Debug, Default)]
pub struct NoCallbacks;

impl CallbackNotifier for NoCallbacks {
    fn notify(&self, url: &str, notification: CallbackNotification) {
        tracing::warn!(url, invocation = %notification.invocation_id, "no callback notifier configured");
    }
}

/// Source of fresh invocation ids.
pub type IdSource = Arc<dyn Fn() -> InvocationId + Send + Sync>;

/// Contracts this connector negotiated as a consumer, with the provider to call.
#[derive(Debug, Default)]
pub struct ContractBook {
    entries: RwLock<BTreeMap<ContractId, Endpoint>>,
    path: Option<PathBuf>,
}

impl ContractBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn persistent(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let entries = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        Ok(Self { entries: RwLock::new(entries), path: Some(path) })
    }

    pub fn add(&self, contract_id: ContractId, provider: Endpoint) {
        let mut entries = self.entries.write();
        entries.insert(contract_id, provider);
        if let Some(path) = &self.path {
            let written = serde_json::to_vec_pretty(&*entries)
                .map_err(std::io::Error::other)
                .and_then(|bytes| std::fs::write(path, bytes));
            if let Err(e) = written {
                tracing::error!(path = %path.display(), error = %e, "failed to persist contract book");
            }
        }
    }

    pub fn provider_for(&self, contract_id: &ContractId) -> Option<Endpoint> {
        self.entries.read().get(contract_id).cloned()
    }

    pub fn list(&self) -> Vec<(ContractId, Endpoint)> {
        self.entries.read().iter().map(|(c, e)| (c.clone(), e.clone())).collect()
    }
}

/// Monotonic timestamps of the consumer-visible phases of one invocation.
#[derive(Debug, Clone, Copy)]
pub struct PhaseMarks {
    pub invoked: Instant,
    pub finished: Option<Instant>,
    pub result_requested: Option<Instant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatusView {
    pub state: InvocationState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvokeError {
    #[error("no negotiated contract '{0}' is known to this connector")]
    UnknownContract(ContractId),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ResultError {
    #[error("unknown invocation {0}")]
    NotFound(InvocationId),
    #[error("invocation is {0}, no result available yet")]
    NotFinished(InvocationState),
    #[error("result was already retrieved; invocation is CLOSED")]
    AlreadyRetrieved,
    #[error("invocation ended {state}: {message}")]
    Failed { state: InvocationState, message: String },
    #[error("result cache was lost in a connector restart")]
    CacheLost,
}

#[derive(Clone)]
pub struct ConsumerRuntime {
    inner: Arc<Inner>,
}

struct Inner {
    address: Endpoint,
    store: Arc<InvocationStore>,
    contracts: Arc<ContractBook>,
    transport: Arc<dyn Transport>,
    callbacks: Arc<dyn CallbackNotifier>,
    ids: IdSource,
    args: Mutex<HashMap<InvocationId, Vec<String>>>,
    results: Mutex<HashMap<InvocationId, ServiceResult>>,
    marks: Mutex<HashMap<InvocationId, PhaseMarks>>,
}

impl ConsumerRuntime {
    pub fn new(
        address: Endpoint,
        store: Arc<InvocationStore>,
        contracts: Arc<ContractBook>,
        transport: Arc<dyn Transport>,
        callbacks: Arc<dyn CallbackNotifier>,
    ) -> Self {
        Self::with_ids(address, store, contracts, transport, callbacks, Arc::new(InvocationId::random))
    }

    pub fn with_ids(
        address: Endpoint,
        store: Arc<InvocationStore>,
        contracts: Arc<ContractBook>,
        transport: Arc<dyn Transport>,
        callbacks: Arc<dyn CallbackNotifier>,
        ids: IdSource,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                address,
                store,
                contracts,
                transport,
                callbacks,
                ids,
                args: Mutex::new(HashMap::new()),
                results: Mutex::new(HashMap::new()),
                marks: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn contracts(&self) -> &Arc<ContractBook> {
        &self.inner.contracts
    }

    pub fn store(&self) -> &Arc<InvocationStore> {
        &self.inner.store
    }

    fn send(&self, to: &Endpoint, id: InvocationId, body: SignalBody) {
        self.inner.transport.send(to, Signal::new(id, self.inner.address.clone(), body));
    }

    /// Starts an invocation and returns without waiting for the provider.
    pub fn invoke(
        &self,
        contract_id: &ContractId,
        args: Vec<String>,
        callback_url: Option<String>,
    ) -> Result<InvocationId, InvokeError> {
        let provider = self
            .inner
            .contracts
            .provider_for(contract_id)
            .ok_or_else(|| InvokeError::UnknownContract(contract_id.clone()))?;
        let id = (self.inner.ids)();
        let mut record = Invocation::new(
            id,
            Role::Consumer,
            InvocationState::Initializing,
            contract_id.clone(),
            provider.clone(),
            self.inner.store.now_ms(),
        );
        record.callback_url = callback_url;
        self.inner.args.lock().insert(id, args);
        self.inner
            .marks
            .lock()
            .insert(id, PhaseMarks { invoked: Instant::now(), finished: None, result_requested: None });
        if let Err(e) = self.inner.store.create(record, TransitionCause::local_api()) {
            // random ids do not collide; a collision means a broken id source
            panic!("invocation id reuse: {e}");
        }
        self.send(&provider, id, SignalBody::Invocation { contract_id: contract_id.clone() });
        Ok(id)
    }

    pub fn status(&self, id: InvocationId) -> Option<StatusView> {
        self.inner
            .store
            .get(id, Role::Consumer)
            .map(|r| StatusView { state: r.state, error_message: r.error_message })
    }

    /// Hands out a finished invocation's result exactly once and closes it.
    /// Failed and invalid invocations report their error message instead.
    pub fn result(&self, id: InvocationId) -> Result<ServiceResult, ResultError> {
        let requested = Instant::now();
        if let Some(marks) = self.inner.marks.lock().get_mut(&id) {
            marks.result_requested.get_or_insert(requested);
        }
        let mut results = self.inner.results.lock();
        let record = self.inner.store.get(id, Role::Consumer).ok_or(ResultError::NotFound(id))?;
        match record.state {
            InvocationState::Finished => {
                if !results.contains_key(&id) {
                    return Err(ResultError::CacheLost);
                }
                match self.inner.store.transition(id, Role::Consumer, InvocationState::Closed, TransitionCause::local_api())
                {
                    Some(TransitionOutcome::Applied(_)) => Ok(results.remove(&id).expect("checked under lock")),
                    _ => Err(ResultError::AlreadyRetrieved),
                }
            }
            InvocationState::Closed => Err(ResultError::AlreadyRetrieved),
            state @ (InvocationState::Failed | InvocationState::Invalid) => Err(ResultError::Failed {
                state,
                message: record.error_message.unwrap_or_else(|| format!("invocation is {state}")),
            }),
            state => Err(ResultError::NotFinished(state)),
        }
    }

    pub fn phase_marks(&self, id: InvocationId) -> Option<PhaseMarks> {
        self.inner.marks.lock().get(&id).copied()
    }

    pub fn forget_phase_marks(&self, id: InvocationId) {
        self.inner.marks.lock().remove(&id);
    }

    pub fn cached_args(&self) -> usize {
        self.inner.args.lock().len()
    }

    pub fn cached_results(&self) -> usize {
        self.inner.results.lock().len()
    }

    pub fn handle(&self, signal: Signal) -> DispatchOutcome {
        let id = signal.invocation_id;
        match signal.body {
            SignalBody::Initialized => self.on_initialized_signal(id),
            SignalBody::Invalid { error_message } => self.on_invalid_signal(id, error_message),
            SignalBody::Running => self.on_running_signal(id),
            SignalBody::Failed { error_message } => self.on_failed_signal(id, error_message),
            SignalBody::Finished { result } => self.on_finished_signal(id, result),
            SignalBody::Invocation { .. } | SignalBody::Execution { .. } => DispatchOutcome::NoHandler,
        }
    }

    pub fn on_initialized_signal(&self, id: InvocationId) -> DispatchOutcome {
        let kind = SignalKind::ServiceInitializedSignal;
        let store = &self.inner.store;
        let outcome = store.transition(id, Role::Consumer, InvocationState::Initialized, TransitionCause::signal(kind));
        if !matches!(outcome, Some(TransitionOutcome::Applied(_))) {
            return DispatchOutcome::from_transition(outcome);
        }
        let started = store.transition(id, Role::Consumer, InvocationState::Starting, TransitionCause::signal(kind));
        if let Some(TransitionOutcome::Applied(record)) = started {
            let args = self.inner.args.lock().remove(&id).unwrap_or_else(|| {
                tracing::warn!(invocation = %id, "argument cache lost; sending execution signal without arguments");
                Vec::new()
            });
            self.send(&record.counterparty, id, SignalBody::Execution { args });
        }
        DispatchOutcome::Applied
    }

    pub fn on_invalid_signal(&self, id: InvocationId, error_message: String) -> DispatchOutcome {
        let kind = SignalKind::ServiceInvalidSignal;
        let Some(record) = self.inner.store.get(id, Role::Consumer) else {
            return DispatchOutcome::UnknownInvocation;
        };
        // Past initialization, an invalid signal can only come from a provider restart.
        let cause = if record.state == InvocationState::Initializing {
            TransitionCause::signal(kind)
        } else {
            TransitionCause::remote_recovery(kind)
        };
        let outcome = self.inner.store.transition_with(id, Role::Consumer, InvocationState::Invalid, cause, |r| {
            r.error_message = Some(error_message)
        });
        if matches!(outcome, Some(TransitionOutcome::Applied(_))) {
            self.inner.args.lock().remove(&id);
        }
        DispatchOutcome::from_transition(outcome)
    }

    pub fn on_running_signal(&self, id: InvocationId) -> DispatchOutcome {
        DispatchOutcome::from_transition(self.inner.store.transition(
            id,
            Role::Consumer,
            InvocationState::Running,
            TransitionCause::signal(SignalKind::ServiceRunningSignal),
        ))
    }

    pub fn on_failed_signal(&self, id: InvocationId, error_message: String) -> DispatchOutcome {
        let cause = TransitionCause::signal(SignalKind::ServiceFailedSignal);
        let outcome = self.inner.store.transition_with(id, Role::Consumer, InvocationState::Failed, cause, |r| {
            r.error_message = Some(error_message)
        });
        if matches!(outcome, Some(TransitionOutcome::Applied(_))) {
            self.inner.args.lock().remove(&id);
        }
        DispatchOutcome::from_transition(outcome)
    }

    pub fn on_finished_signal(&self, id: InvocationId, result: ServiceResult) -> DispatchOutcome {
        let cause = TransitionCause::signal(SignalKind::ServiceFinishedSignal);
        let error = if result.success { None } else { result.error_message.clone() };
        let outcome = {
            let mut results = self.inner.results.lock();
            let outcome = self.inner.store.transition_with(id, Role::Consumer, InvocationState::Finished, cause, |r| {
                r.error_message = error
            });
            if matches!(outcome, Some(TransitionOutcome::Applied(_))) {
                results.insert(id, result);
            }
            outcome
        };
        if let Some(TransitionOutcome::Applied(record)) = &outcome {
            if let Some(marks) = self.inner.marks.lock().get_mut(&id) {
                marks.finished = Some(Instant::now());
            }
            if let Some(url) = &record.callback_url {
                self.inner
                    .callbacks
                    .notify(url, CallbackNotification { invocation_id: id, state: InvocationState::Finished });
            }
        }
        DispatchOutcome::from_transition(outcome)
    }
}
