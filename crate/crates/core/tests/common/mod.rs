#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use servicespace_core::consumer::{CallbackNotification, CallbackNotifier, ContractBook};
use servicespace_core::executor::ThreadPool;
use servicespace_core::registry::{Policy, PolicyKind};
use servicespace_core::signal::encode_signal;
use servicespace_core::store::{Journal, SystemClock};
use servicespace_core::{
    Connector, ConsumerRuntime, ContractId, Endpoint, InvocationId, InvocationState, InvocationStore, ProviderRuntime,
    Registry, ServiceRegistration, Signal, TransitionLog, Transport,
};

pub const CONSUMER: &str = "local://consumer";
pub const PROVIDER: &str = "local://provider";

/// In-process network: one delivery thread, FIFO, bytes on the wire.
#[derive(Clone)]
pub struct LocalNet {
    nodes: Arc<RwLock<HashMap<String, Connector>>>,
    tx: Sender<(Endpoint, Vec<u8>)>,
    pub sent: Arc<Mutex<Vec<Signal>>>,
}

impl LocalNet {
    pub fn new() -> Self {
        let nodes: Arc<RwLock<HashMap<String, Connector>>> = Arc::default();
        let (tx, rx) = channel::<(Endpoint, Vec<u8>)>();
        let routes = nodes.clone();
        std::thread::spawn(move || {
            for (to, bytes) in rx {
                let node = routes.read().get(to.as_str()).cloned();
                if let Some(node) = node {
                    node.receive(&bytes).expect("well-formed signal");
                }
            }
        });
        Self { nodes, tx, sent: Arc::default() }
    }

    pub fn attach(&self, address: &str, connector: Connector) {
        self.nodes.write().insert(address.to_string(), connector);
    }
}

impl Transport for LocalNet {
    fn send(&self, destination: &Endpoint, signal: Signal) {
        let bytes = encode_signal(&signal).expect("encodable");
        self.sent.lock().push(signal);
        let _ = self.tx.send((destination.clone(), bytes));
    }
}

#[derive(Default, Clone)]
pub struct Callbacks(pub Arc<Mutex<Vec<CallbackNotification>>>);

impl CallbackNotifier for Callbacks {
    fn notify(&self, _url: &str, notification: CallbackNotification) {
        self.0.lock().push(notification);
    }
}

pub struct Pair {
    pub net: LocalNet,
    pub log: TransitionLog,
    pub consumer: ConsumerRuntime,
    pub provider: ProviderRuntime,
    pub callbacks: Callbacks,
}

pub fn provider_over(
    net: &LocalNet,
    store: InvocationStore,
    registry: Arc<Registry>,
    pool: usize,
    services: &[ServiceRegistration],
) -> ProviderRuntime {
    let provider = ProviderRuntime::new(
        Endpoint::new(PROVIDER),
        Arc::new(store),
        registry,
        Arc::new(net.clone()),
        Arc::new(ThreadPool::new(pool)),
    );
    for s in services {
        provider.register_service(s.clone()).unwrap();
    }
    net.attach(PROVIDER, Connector::new(consumer_stub(net), Some(provider.clone())));
    provider
}

fn consumer_stub(net: &LocalNet) -> ConsumerRuntime {
    ConsumerRuntime::new(
        Endpoint::new(PROVIDER),
        Arc::new(InvocationStore::in_memory(Arc::new(SystemClock), TransitionLog::new())),
        Arc::new(ContractBook::new()),
        Arc::new(net.clone()),
        Arc::new(Callbacks::default()),
    )
}

impl Pair {
    pub fn new(pool: usize, services: &[ServiceRegistration]) -> Self {
        Self::with_journal(pool, services, None)
    }

    pub fn with_journal(pool: usize, services: &[ServiceRegistration], journal: Option<Arc<dyn Journal>>) -> Self {
        let net = LocalNet::new();
        let log = TransitionLog::new();
        let callbacks = Callbacks::default();
        let consumer = ConsumerRuntime::new(
            Endpoint::new(CONSUMER),
            Arc::new(InvocationStore::in_memory(Arc::new(SystemClock), log.clone())),
            Arc::new(ContractBook::new()),
            Arc::new(net.clone()),
            Arc::new(callbacks.clone()),
        );
        net.attach(CONSUMER, Connector::new(consumer.clone(), None));
        let store = match journal {
            Some(j) => InvocationStore::open(j, Arc::new(SystemClock), log.clone()).unwrap(),
            None => InvocationStore::in_memory(Arc::new(SystemClock), log.clone()),
        };
        let provider = provider_over(&net, store, Arc::new(Registry::new()), pool, services);
        Self { net, log, consumer, provider, callbacks }
    }

    /// Publishes `service_id`, negotiates a contract and records it on the consumer.
    pub fn contract_for(&self, service_id: &str) -> ContractId {
        let registry = self.provider.registry();
        let metadata = self.provider.service_metadata(service_id).expect("registered");
        let asset = registry.create_service_asset(None, &metadata, Default::default()).unwrap();
        let offer = registry
            .create_offer(&asset, Policy::allow_all(PolicyKind::Access), Policy::allow_all(PolicyKind::Usage))
            .unwrap();
        let contract = registry.negotiate_contract(CONSUMER, &offer, 0).unwrap();
        self.consumer.contracts().add(contract.clone(), Endpoint::new(PROVIDER));
        contract
    }

    pub fn wait_for(&self, id: InvocationId, pred: impl Fn(InvocationState) -> bool) -> InvocationState {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let state = self.consumer.status(id).expect("known invocation").state;
            if pred(state) {
                return state;
            }
            assert!(Instant::now() < deadline, "invocation {id} stuck in {state}");
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn wait_settled(&self, id: InvocationId) -> InvocationState {
        self.wait_for(id, |s| {
            matches!(s, InvocationState::Finished | InvocationState::Failed | InvocationState::Invalid | InvocationState::Closed)
        })
    }
}
