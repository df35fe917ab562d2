//! Inter-connector signals and their wire encoding.
//!
//! A signal is a one-way message. Each kind travels in a fixed direction:
//! invocation and execution signals go from consumer to provider, all others
//! from provider to consumer. On the wire a signal is a single JSON object
//! posted to the peer's `/signals` endpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ContractId, DiscardReason, Endpoint, InvocationId, ServiceResult, SignalKind, TransitionOutcome,
};

/// Kind-specific signal payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignalBody {
    Invocation { contract_id: ContractId },
    Initialized,
    Invalid { error_message: String },
    Execution { args: Vec<String> },
    Running,
    Failed { error_message: String },
    Finished { result: ServiceResult },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signal {
    pub invocation_id: InvocationId,
    pub sender: Endpoint,
    pub body: SignalBody,
}

impl Signal {
    pub fn new(invocation_id: InvocationId, sender: Endpoint, body: SignalBody) -> Self {
        Self { invocation_id, sender, body }
    }

    pub fn kind(&self) -> SignalKind {
        match self.body {
            SignalBody::Invocation { .. } => SignalKind::ServiceInvocationSignal,
            SignalBody::Initialized => SignalKind::ServiceInitializedSignal,
            SignalBody::Invalid { .. } => SignalKind::ServiceInvalidSignal,
            SignalBody::Execution { .. } => SignalKind::ServiceExecutionSignal,
            SignalBody::Running => SignalKind::ServiceRunningSignal,
            SignalBody::Failed { .. } => SignalKind::ServiceFailedSignal,
            SignalBody::Finished { .. } => SignalKind::ServiceFinishedSignal,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match &self.body {
            SignalBody::Invalid { error_message } | SignalBody::Failed { error_message }
                if error_message.trim().is_empty() =>
            {
                Err(ProtocolError::Invariant(format!("{} requires a non-empty errorMessage", self.kind())))
            }
            SignalBody::Finished { result } if !result.is_well_formed() => Err(ProtocolError::Invariant(
                "ServiceFinishedSignal result must carry data on success and an error message otherwise"
                    .to_string(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed signal payload: {0}")]
    Malformed(String),
    #[error("unknown signal kind '{0}'")]
    UnknownKind(String),
    #[error("signal violates its kind's invariants: {0}")]
    Invariant(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct WireSignal {
    kind: String,
    invocation_id: InvocationId,
    sender_address: Endpoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contract_id: Option<ContractId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    args: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<ServiceResult>,
}

pub fn encode_signal(signal: &Signal) -> Result<Vec<u8>, ProtocolError> {
    signal.validate()?;
    let mut wire = WireSignal {
        kind: signal.kind().as_str().to_string(),
        invocation_id: signal.invocation_id,
        sender_address: signal.sender.clone(),
        contract_id: None,
        args: None,
        error_message: None,
        result: None,
    };
    match &signal.body {
        SignalBody::Invocation { contract_id } => wire.contract_id = Some(contract_id.clone()),
        SignalBody::Execution { args } => wire.args = Some(args.clone()),
        SignalBody::Invalid { error_message } | SignalBody::Failed { error_message } => {
            wire.error_message = Some(error_message.clone())
        }
        SignalBody::Finished { result } => wire.result = Some(result.clone()),
        SignalBody::Initialized | SignalBody::Running => {}
    }
    serde_json::to_vec(&wire).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn decode_signal(raw: &[u8]) -> Result<Signal, ProtocolError> {
    let wire: WireSignal = serde_json::from_slice(raw).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let kind: SignalKind = wire.kind.parse().map_err(|_| ProtocolError::UnknownKind(wire.kind.clone()))?;
    let missing = |field: &str| ProtocolError::Malformed(format!("{kind} is missing '{field}'"));
    let body = match kind {
        SignalKind::ServiceInvocationSignal => {
            SignalBody::Invocation { contract_id: wire.contract_id.ok_or_else(|| missing("contractId"))? }
        }
        SignalKind::ServiceInitializedSignal => SignalBody::Initialized,
        SignalKind::ServiceInvalidSignal => {
            SignalBody::Invalid { error_message: wire.error_message.ok_or_else(|| missing("errorMessage"))? }
        }
        SignalKind::ServiceExecutionSignal => {
            SignalBody::Execution { args: wire.args.ok_or_else(|| missing("args"))? }
        }
        SignalKind::ServiceRunningSignal => SignalBody::Running,
        SignalKind::ServiceFailedSignal => {
            SignalBody::Failed { error_message: wire.error_message.ok_or_else(|| missing("errorMessage"))? }
        }
        SignalKind::ServiceFinishedSignal => {
            SignalBody::Finished { result: wire.result.ok_or_else(|| missing("result"))? }
        }
    };
    let signal = Signal { invocation_id: wire.invocation_id, sender: wire.sender_address, body };
    signal.validate()?;
    Ok(signal)
}

/// What a runtime did with a delivered signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchOutcome {
    Applied,
    Discarded(DiscardReason),
    /// No record exists for the invocation on the receiving side.
    UnknownInvocation,
    /// The receiving connector does not run the role this signal is addressed to.
    NoHandler,
}

impl DispatchOutcome {
    pub fn from_transition(outcome: Option<TransitionOutcome>) -> Self {
        match outcome {
            None => DispatchOutcome::UnknownInvocation,
            Some(TransitionOutcome::Applied(_)) => DispatchOutcome::Applied,
            Some(TransitionOutcome::Discarded(reason)) => DispatchOutcome::Discarded(reason),
        }
    }
}

/// Delivery of signals to a peer connector.
///
/// Implementations deliver at most once and must not wait for the remote
/// handler to finish.
pub trait Transport: Send + Sync {
    fn send(&self, destination: &Endpoint, signal: Signal);
}
