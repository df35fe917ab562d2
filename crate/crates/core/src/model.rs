//! Invocation domain types and the role-specific state machines.
//!
//! Both connectors track every invocation independently. Consumer and
//! provider follow different transition graphs; incoming requests that do
//! not match an outgoing edge of the current state are discarded rather
//! than treated as failures, which absorbs reordered or duplicated signals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// Which side of an invocation a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Consumer,
    Provider,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Consumer, Role::Provider];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Consumer => f.write_str("CONSUMER"),
            Role::Provider => f.write_str("PROVIDER"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InvocationState {
    Initializing,
    Initialized,
    Invalid,
    Starting,
    Running,
    Failed,
    Finished,
    Closed,
}

impl InvocationState {
    pub const ALL: [InvocationState; 8] = [
        InvocationState::Initializing,
        InvocationState::Initialized,
        InvocationState::Invalid,
        InvocationState::Starting,
        InvocationState::Running,
        InvocationState::Failed,
        InvocationState::Finished,
        InvocationState::Closed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InvocationState::Initializing => "INITIALIZING",
            InvocationState::Initialized => "INITIALIZED",
            InvocationState::Invalid => "INVALID",
            InvocationState::Starting => "STARTING",
            InvocationState::Running => "RUNNING",
            InvocationState::Failed => "FAILED",
            InvocationState::Finished => "FINISHED",
            InvocationState::Closed => "CLOSED",
        }
    }

    /// True once a consumer can read a result or an error: FINISHED, FAILED,
    /// INVALID or CLOSED.
    pub fn is_settled(&self) -> bool {
        matches!(self, Self::Finished | Self::Failed | Self::Invalid | Self::Closed)
    }

    /// Whether the state exists at all for `role`.
    pub fn occurs_for(&self, role: Role) -> bool {
        match role {
            Role::Consumer => true,
            Role::Provider => !matches!(
                self,
                InvocationState::Initializing | InvocationState::Starting | InvocationState::Finished
            ),
        }
    }

    /// Position in the role's transition graph; sinks sit deepest.
    fn depth(&self) -> u8 {
        match self {
            InvocationState::Initializing => 0,
            InvocationState::Initialized | InvocationState::Invalid => 1,
            InvocationState::Starting => 2,
            InvocationState::Running => 3,
            InvocationState::Failed | InvocationState::Finished => 4,
            InvocationState::Closed => 5,
        }
    }
}

impl fmt::Display for InvocationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InvocationState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InvocationState::ALL
            .iter()
            .copied()
            .find(|state| state.as_str() == s)
            .ok_or_else(|| format!("unknown invocation state '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InvocationId(Uuid);

impl InvocationId {
    pub fn random() -> Self {
        Self(Uuid::new_v4())
    }

    pub fn from_uuid(uuid: Uuid) -> Self {
        Self(uuid)
    }

    pub fn as_uuid(&self) -> &Uuid {
        &self.0
    }
}

impl fmt::Display for InvocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.hyphenated().fmt(f)
    }
}

impl FromStr for InvocationId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(Self)
    }
}

/// Alphanumeric reference to a negotiated usage contract.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContractId(String);

impl ContractId {
    pub fn new(value: impl Into<String>) -> Result<Self, String> {
        let value = value.into();
        if value.is_empty() || !value.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(format!("contract id '{value}' is not an alphanumeric token"));
        }
        Ok(Self(value))
    }

    pub fn generate() -> Self {
        Self(Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ContractId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ContractId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContractId::new(s)
    }
}

/// Network address of a connector, e.g. `http://127.0.0.1:8181`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Endpoint(String);

impl Endpoint {
    pub fn new(address: impl Into<String>) -> Self {
        Self(address.into().trim_end_matches('/').to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The seven inter-connector signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalKind {
    ServiceInvocationSignal,
    ServiceInitializedSignal,
    ServiceInvalidSignal,
    ServiceExecutionSignal,
    ServiceRunningSignal,
    ServiceFailedSignal,
    ServiceFinishedSignal,
}

impl SignalKind {
    pub const ALL: [SignalKind; 7] = [
        SignalKind::ServiceInvocationSignal,
        SignalKind::ServiceInitializedSignal,
        SignalKind::ServiceInvalidSignal,
        SignalKind::ServiceExecutionSignal,
        SignalKind::ServiceRunningSignal,
        SignalKind::ServiceFailedSignal,
        SignalKind::ServiceFinishedSignal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SignalKind::ServiceInvocationSignal => "ServiceInvocationSignal",
            SignalKind::ServiceInitializedSignal => "ServiceInitializedSignal",
            SignalKind::ServiceInvalidSignal => "ServiceInvalidSignal",
            SignalKind::ServiceExecutionSignal => "ServiceExecutionSignal",
            SignalKind::ServiceRunningSignal => "ServiceRunningSignal",
            SignalKind::ServiceFailedSignal => "ServiceFailedSignal",
            SignalKind::ServiceFinishedSignal => "ServiceFinishedSignal",
        }
    }

    /// The role that handles this signal on arrival.
    pub fn receiver(&self) -> Role {
        match self {
            SignalKind::ServiceInvocationSignal | SignalKind::ServiceExecutionSignal => Role::Provider,
            _ => Role::Consumer,
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SignalKind::ALL
            .iter()
            .copied()
            .find(|kind| kind.as_str() == s)
            .ok_or_else(|| format!("unknown signal kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CauseKind {
    LocalApi,
    IncomingSignal,
    ExecutionEvent,
    Recovery,
}

impl CauseKind {
    pub const ALL: [CauseKind; 4] = [
        CauseKind::LocalApi,
        CauseKind::IncomingSignal,
        CauseKind::ExecutionEvent,
        CauseKind::Recovery,
    ];
}

/// What triggered a state change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionCause {
    pub kind: CauseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalKind>,
}

impl TransitionCause {
    pub fn local_api() -> Self {
        Self { kind: CauseKind::LocalApi, signal: None }
    }

    pub fn signal(kind: SignalKind) -> Self {
        Self { kind: CauseKind::IncomingSignal, signal: Some(kind) }
    }

    pub fn execution() -> Self {
        Self { kind: CauseKind::ExecutionEvent, signal: None }
    }

    pub fn recovery() -> Self {
        Self { kind: CauseKind::Recovery, signal: None }
    }

    /// Recovery triggered remotely, i.e. a consumer learning of a provider restart.
    pub fn remote_recovery(kind: SignalKind) -> Self {
        Self { kind: CauseKind::Recovery, signal: Some(kind) }
    }
}

/// Outcome of a service execution as seen by the consumer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceResult {
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl ServiceResult {
    pub fn ok(data: impl Into<String>) -> Self {
        Self { success: true, data: Some(data.into()), data_type: None, error_message: None }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self { success: false, data: None, data_type: None, error_message: Some(message.into()) }
    }

    pub fn with_type(mut self, data_type: impl Into<String>) -> Self {
        self.data_type = Some(data_type.into());
        self
    }

    pub fn is_well_formed(&self) -> bool {
        if self.success {
            self.data.is_some()
        } else {
            self.error_message.as_deref().is_some_and(|m| !m.is_empty())
        }
    }
}

/// One side's record of a single service invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Invocation {
    pub id: InvocationId,
    pub role: Role,
    pub state: InvocationState,
    pub contract_id: ContractId,
    pub counterparty: Endpoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_id: Option<String>,
    /// Milliseconds since the Unix epoch (simulated time under the harness).
    pub created_at: u64,
    pub updated_at: u64,
}

impl Invocation {
    pub fn new(
        id: InvocationId,
        role: Role,
        state: InvocationState,
        contract_id: ContractId,
        counterparty: Endpoint,
        now_ms: u64,
    ) -> Self {
        Self {
            id,
            role,
            state,
            contract_id,
            counterparty,
            error_message: None,
            callback_url: None,
            service_id: None,
            created_at: now_ms,
            updated_at: now_ms,
        }
    }

    pub fn is_terminal(&self) -> bool {
        is_terminal(self.role, self.state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// The current state has no outgoing edges.
    Terminal,
    /// The target lies earlier in the transition graph.
    Backward,
    /// The target equals the current state.
    Duplicate,
    /// Forward in the graph but not a direct edge, or not valid for the cause.
    NoSuchEdge,
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscardReason::Terminal => f.write_str("terminal"),
            DiscardReason::Backward => f.write_str("backward transition"),
            DiscardReason::Duplicate => f.write_str("duplicate"),
            DiscardReason::NoSuchEdge => f.write_str("no such edge"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionOutcome {
    Applied(Invocation),
    Discarded(DiscardReason),
}

impl TransitionOutcome {
    pub fn is_applied(&self) -> bool {
        matches!(self, TransitionOutcome::Applied(_))
    }

    pub fn discard_reason(&self) -> Option<DiscardReason> {
        match self {
            TransitionOutcome::Applied(_) => None,
            TransitionOutcome::Discarded(reason) => Some(*reason),
        }
    }
}

use InvocationState::*;

/// Outgoing edges of the protocol's transition graph, excluding recovery edges.
pub fn allowed_transitions(role: Role, state: InvocationState) -> &'static [InvocationState] {
    match (role, state) {
        (Role::Consumer, Initializing) => &[Initialized, Invalid],
        (Role::Consumer, Initialized) => &[Starting],
        (Role::Consumer, Starting) => &[Running, Failed],
        (Role::Consumer, Running) => &[Finished, Failed],
        (Role::Consumer, Finished) => &[Closed],
        (Role::Provider, Initialized) => &[Running, Failed],
        (Role::Provider, Running) => &[Failed, Closed],
        _ => &[],
    }
}

/// Edges available for a specific cause. Recovery only ever leads to
/// `INVALID`, from any state that still awaits protocol progress.
pub fn allowed_transitions_for(
    role: Role,
    state: InvocationState,
    cause: CauseKind,
) -> &'static [InvocationState] {
    match cause {
        CauseKind::Recovery => match (role, state) {
            (Role::Provider, Initialized | Running) => &[Invalid],
            (Role::Consumer, Initialized | Starting | Running) => &[Invalid],
            _ => &[],
        },
        _ => allowed_transitions(role, state),
    }
}

pub fn is_terminal(role: Role, state: InvocationState) -> bool {
    CauseKind::ALL
        .iter()
        .all(|cause| allowed_transitions_for(role, state, *cause).is_empty())
}

/// States a fresh record may be created in.
pub fn entry_states(role: Role) -> &'static [InvocationState] {
    match role {
        Role::Consumer => &[Initializing],
        Role::Provider => &[Initialized, Invalid],
    }
}

/// Applies `target` to `inv` if the role graph permits it for `cause`.
/// Never fails: anything else comes back as `Discarded`.
pub fn apply_transition(
    inv: &Invocation,
    target: InvocationState,
    cause: TransitionCause,
    now_ms: u64,
) -> TransitionOutcome {
    if allowed_transitions_for(inv.role, inv.state, cause.kind).contains(&target) {
        let mut next = inv.clone();
        next.state = target;
        next.updated_at = now_ms.max(inv.updated_at);
        return TransitionOutcome::Applied(next);
    }
    let reason = if is_terminal(inv.role, inv.state) {
        DiscardReason::Terminal
    } else if target == inv.state {
        DiscardReason::Duplicate
    } else if target.depth() < inv.state.depth() {
        DiscardReason::Backward
    } else {
        DiscardReason::NoSuchEdge
    };
    TransitionOutcome::Discarded(reason)
}
