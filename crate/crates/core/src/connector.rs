//! One connector node: a consumer runtime, an optional provider runtime and
//! the routing of incoming signals between them.

use std::sync::Arc;

use crate::consumer::ConsumerRuntime;
use crate::model::Role;
use crate::provider::ProviderRuntime;
use crate::signal::{decode_signal, DispatchOutcome, ProtocolError, Signal};

#[derive(Clone)]
pub struct Connector {
    pub consumer: ConsumerRuntime,
    pub provider: Option<ProviderRuntime>,
}

impl Connector {
    pub fn new(consumer: ConsumerRuntime, provider: Option<ProviderRuntime>) -> Self {
        Self { consumer, provider }
    }

    /// Routes a decoded signal to the runtime its kind is addressed to.
    pub fn dispatch(&self, signal: Signal) -> DispatchOutcome {
        let kind = signal.kind();
        let id = signal.invocation_id;
        let outcome = match kind.receiver() {
            Role::Consumer => self.consumer.handle(signal),
            Role::Provider => match &self.provider {
                Some(provider) => provider.handle(signal),
                None => DispatchOutcome::NoHandler,
            },
        };
        match outcome {
            DispatchOutcome::UnknownInvocation => {
                tracing::debug!(invocation = %id, %kind, "signal for unknown invocation dropped")
            }
            DispatchOutcome::NoHandler => {
                tracing::warn!(invocation = %id, %kind, "no runtime for this signal's direction; dropped")
            }
            _ => {}
        }
        outcome
    }

    /// Decodes and dispatches raw bytes; malformed payloads change no state.
    pub fn receive(&self, raw: &[u8]) -> Result<DispatchOutcome, ProtocolError> {
        let signal = decode_signal(raw)?;
        Ok(self.dispatch(signal))
    }

    pub fn store(&self) -> &Arc<crate::store::InvocationStore> {
        self.consumer.store()
    }
}
