//! Deterministic two-node simulation.
//!
//! The production consumer and provider runtimes run on one thread over a
//! virtual network. Every signal is encoded to bytes on send and decoded on
//! delivery. A [`Schedule`] decides per emitted signal whether it is
//! delivered (after a virtual delay), dropped or duplicated. Service bodies
//! run as deferred jobs on the same event loop, so a fixed schedule and seed
//! always reproduce the same transition log.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::connector::Connector;
use crate::consumer::{CallbackNotification, CallbackNotifier, ConsumerRuntime, ContractBook, IdSource, ResultError};
use crate::executor::{Executor, Job};
use crate::model::{
    allowed_transitions, CauseKind, ContractId, Endpoint, Invocation, InvocationId, InvocationState, Role,
    ServiceResult, SignalKind,
};
use crate::provider::ProviderRuntime;
use crate::registry::{Policy, PolicyKind, Registry};
use crate::sdk::ServiceRegistration;
use crate::signal::{decode_signal, encode_signal, DispatchOutcome, Signal, Transport};
use crate::store::{Clock, InvocationStore, LogEntry, LogOutcome, MemoryJournal, TransitionLog};

pub const CONSUMER_ADDRESS: &str = "sim://consumer";
pub const PROVIDER_ADDRESS: &str = "sim://provider";

/// What happens to one emitted signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Action {
    Deliver { delay: u64 },
    Drop,
    /// Delivers two copies, after `delay` and `again` ticks.
    Duplicate { delay: u64, again: u64 },
}

impl Default for Action {
    fn default() -> Self {
        Action::Deliver { delay: 0 }
    }
}

#[derive(Debug, Clone)]
struct Generator {
    seed: u64,
    max_delay: u64,
    drop_rate: f64,
    duplicate_rate: f64,
}

/// Delivery actions by emission index. Signals without an explicit action
/// are delivered immediately, or drawn from a seeded generator.
#[derive(Debug, Clone, Default)]
pub struct Schedule {
    actions: BTreeMap<usize, Action>,
    generator: Option<Generator>,
}

impl Schedule {
    /// FIFO delivery with no loss.
    pub fn in_order() -> Self {
        Self::default()
    }

    /// Random delays in `0..=max_delay` with the given drop and duplicate
    /// probabilities, drawn in emission order from `seed`.
    pub fn generated(seed: u64, max_delay: u64, drop_rate: f64, duplicate_rate: f64) -> Self {
        Self { actions: BTreeMap::new(), generator: Some(Generator { seed, max_delay, drop_rate, duplicate_rate }) }
    }

    pub fn with(mut self, index: usize, action: Action) -> Self {
        self.actions.insert(index, action);
        self
    }

    pub fn seed(&self) -> Option<u64> {
        self.generator.as_ref().map(|g| g.seed)
    }

    fn resolve(&self, upto: usize) -> Vec<Action> {
        let mut out = Vec::with_capacity(upto);
        let mut rng = self.generator.as_ref().map(|g| ChaCha8Rng::seed_from_u64(g.seed));
        for i in 0..upto {
            // draw for every index so explicit overrides do not shift later draws
            let drawn = match (&mut rng, &self.generator) {
                (Some(rng), Some(g)) => {
                    let delay = rng.random_range(0..=g.max_delay);
                    let roll: f64 = rng.random();
                    let again = rng.random_range(0..=g.max_delay);
                    if roll < g.drop_rate {
                        Action::Drop
                    } else if roll < g.drop_rate + g.duplicate_rate {
                        Action::Duplicate { delay, again }
                    } else {
                        Action::Deliver { delay }
                    }
                }
                _ => Action::default(),
            };
            out.push(self.actions.get(&i).copied().unwrap_or(drawn));
        }
        out
    }

    fn action(&self, index: usize) -> Action {
        self.resolve(index + 1)[index]
    }
}

/// How a scripted call refers to its contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractChoice {
    /// A contract negotiated for the named service during setup.
    Negotiated(String),
    /// An id the provider has never issued.
    Unknown(String),
}

#[derive(Debug, Clone)]
pub struct ScriptedCall {
    pub contract: ContractChoice,
    pub args: Vec<String>,
    /// Virtual time at which `invoke` is called.
    pub at: u64,
    /// Fetch the result once the invocation is FINISHED.
    pub fetch_result: bool,
}

impl ScriptedCall {
    pub fn new(service_id: &str, args: &[&str]) -> Self {
        Self {
            contract: ContractChoice::Negotiated(service_id.to_string()),
            args: args.iter().map(|a| a.to_string()).collect(),
            at: 0,
            fetch_result: true,
        }
    }

    pub fn unknown_contract(contract_id: &str, args: &[&str]) -> Self {
        Self { contract: ContractChoice::Unknown(contract_id.to_string()), ..Self::new("", args) }
    }

    pub fn at(mut self, at: u64) -> Self {
        self.at = at;
        self
    }

    pub fn keep_result(mut self) -> Self {
        self.fetch_result = false;
        self
    }
}

#[derive(Clone)]
pub struct Workload {
    pub services: Vec<ServiceRegistration>,
    pub calls: Vec<ScriptedCall>,
    /// Seed for invocation ids.
    pub seed: u64,
    /// Virtual ticks a service body takes.
    pub execution_ticks: u64,
}

impl Workload {
    pub fn new(services: Vec<ServiceRegistration>, calls: Vec<ScriptedCall>) -> Self {
        Self { services, calls, seed: 0, execution_ticks: 1 }
    }

    /// One echo invocation.
    pub fn echo() -> Self {
        Self::new(vec![crate::sdk::Echo::registration()], vec![ScriptedCall::new("builtin.echo", &["hello"])])
    }
}

/// One signal as it crossed the simulated network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SignalRecord {
    pub index: usize,
    pub invocation_id: InvocationId,
    pub kind: SignalKind,
    pub sent_at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub log: TransitionLog,
    pub signals: Vec<SignalRecord>,
    pub invocations: Vec<InvocationId>,
    pub consumer: BTreeMap<InvocationId, Invocation>,
    pub provider: BTreeMap<InvocationId, Invocation>,
    pub results: BTreeMap<InvocationId, Result<ServiceResult, ResultError>>,
    /// Records left in a non-terminal state once the network drained.
    pub stuck: Vec<(InvocationId, Role, InvocationState)>,
    pub callbacks: Vec<CallbackNotification>,
    pub steps: usize,
    pub finished_at: u64,
}

impl SimReport {
    pub fn discarded(&self) -> Vec<LogEntry> {
        self.log.discarded()
    }

    pub fn consumer_state(&self, id: InvocationId) -> Option<InvocationState> {
        self.consumer.get(&id).map(|r| r.state)
    }

    pub fn provider_state(&self, id: InvocationId) -> Option<InvocationState> {
        self.provider.get(&id).map(|r| r.state)
    }

    /// Applied transitions that are not state graph edges, recovery excluded.
    pub fn violations(&self) -> Vec<LogEntry> {
        graph_violations(&self.log.entries())
    }

    /// Transition log, then signal records, one JSON object per line.
    pub fn to_json_lines(&self) -> String {
        let mut out = self.log.to_json_lines();
        for record in &self.signals {
            out.push_str(&serde_json::to_string(record).expect("signal records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Applied non-recovery transitions in `entries` that are not edges of
/// the role's state graph.
pub fn graph_violations(entries: &[LogEntry]) -> Vec<LogEntry> {
    entries
        .iter()
        .filter(|e| e.cause.kind != CauseKind::Recovery)
        .filter(|e| match (&e.outcome, e.from) {
            (LogOutcome::Applied { to }, Some(from)) => !allowed_transitions(e.role, from).contains(to),
            (LogOutcome::Applied { .. }, None) => true,
            _ => false,
        })
        .cloned()
        .collect()
}

#[derive(Debug, Default, Clone)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    fn set(&self, now: u64) {
        self.0.store(now, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

enum Event {
    Deliver { to: Endpoint, bytes: Vec<u8> },
    Job { generation: u64, job: Job },
    Invoke { call: usize },
}

#[derive(Default)]
struct Queue {
    events: BTreeMap<(u64, u64), Event>,
    seq: u64,
    generation: u64,
}

impl Queue {
    fn push(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.events.insert((at, self.seq), event);
    }
}

struct Network {
    clock: SimClock,
    schedule: Schedule,
    queue: Mutex<Queue>,
    records: Mutex<Vec<SignalRecord>>,
    wire: Mutex<Vec<Vec<u8>>>,
}

struct SimTransport(Arc<Network>);

impl Transport for SimTransport {
    fn send(&self, destination: &Endpoint, signal: Signal) {
        let net = &self.0;
        let bytes = match encode_signal(&signal) {
            Ok(bytes) => bytes,
            Err(e) => {
                tracing::error!(error = %e, "unencodable signal dropped");
                return;
            }
        };
        let now = net.clock.now_ms();
        let mut records = net.records.lock();
        let index = records.len();
        let action = net.schedule.action(index);
        records.push(SignalRecord { index, invocation_id: signal.invocation_id, kind: signal.kind(), sent_at: now, action });
        net.wire.lock().push(bytes.clone());
        let mut queue = net.queue.lock();
        match action {
            Action::Deliver { delay } => queue.push(now + delay, Event::Deliver { to: destination.clone(), bytes }),
            Action::Drop => {}
            Action::Duplicate { delay, again } => {
                queue.push(now + delay, Event::Deliver { to: destination.clone(), bytes: bytes.clone() });
                queue.push(now + again, Event::Deliver { to: destination.clone(), bytes });
            }
        }
    }
}

/// Runs service jobs as events on the simulation queue. Jobs submitted by a
/// provider that has since been torn down never run.
struct DeferredExecutor {
    net: Arc<Network>,
    generation: u64,
    ticks: u64,
}

impl Executor for DeferredExecutor {
    fn submit(&self, job: Job) {
        let at = self.net.clock.now_ms() + self.ticks;
        self.net.queue.lock().push(at, Event::Job { generation: self.generation, job });
    }
}

#[derive(Default, Clone)]
struct RecordingCallbacks(Arc<Mutex<Vec<CallbackNotification>>>);

impl CallbackNotifier for RecordingCallbacks {
    fn notify(&self, _url: &str, notification: CallbackNotification) {
        self.0.lock().push(notification);
    }
}

fn seeded_ids(seed: u64) -> IdSource {
    let rng = Mutex::new(ChaCha8Rng::seed_from_u64(seed));
    Arc::new(move || {
        let mut bytes = [0u8; 16];
        rng.lock().fill_bytes(&mut bytes);
        InvocationId::from_uuid(uuid::Builder::from_random_bytes(bytes).into_uuid())
    })
}

/// Two connected nodes and the event loop driving them.
struct World {
    net: Arc<Network>,
    log: TransitionLog,
    workload: Workload,
    consumer: ConsumerRuntime,
    provider: ProviderRuntime,
    provider_journal: MemoryJournal,
    registry: Arc<Registry>,
    callbacks: RecordingCallbacks,
    contracts: Vec<ContractId>,
    invocations: Vec<InvocationId>,
    fetched: BTreeMap<InvocationId, Result<ServiceResult, ResultError>>,
    steps: usize,
}

impl World {
    fn new(schedule: Schedule, workload: Workload) -> Self {
        let clock = SimClock::default();
        let net = Arc::new(Network { clock: clock.clone(), schedule, queue: Mutex::default(), records: Mutex::default(), wire: Mutex::default() });
        let log = TransitionLog::new();
        let transport: Arc<dyn Transport> = Arc::new(SimTransport(net.clone()));
        let callbacks = RecordingCallbacks::default();
        let book = Arc::new(ContractBook::new());
        let consumer = ConsumerRuntime::with_ids(
            Endpoint::new(CONSUMER_ADDRESS),
            Arc::new(InvocationStore::in_memory(Arc::new(clock.clone()), log.clone())),
            book.clone(),
            transport,
            Arc::new(callbacks.clone()),
            seeded_ids(workload.seed),
        );
        let registry = Arc::new(Registry::new());
        let provider_journal = MemoryJournal::default();
        let provider = build_provider(&net, &log, &provider_journal, &registry, &workload, 0);

        let mut contracts = Vec::new();
        for call in &workload.calls {
            let contract_id = match &call.contract {
                ContractChoice::Negotiated(service_id) => {
                    let metadata = provider
                        .service_metadata(service_id)
                        .unwrap_or_else(|| panic!("workload calls unregistered service '{service_id}'"));
                    let asset = registry
                        .create_service_asset(None, &metadata, Default::default())
                        .expect("service asset");
                    let offer = registry
                        .create_offer(&asset, Policy::allow_all(PolicyKind::Access), Policy::allow_all(PolicyKind::Usage))
                        .expect("offer");
                    registry.negotiate_contract(CONSUMER_ADDRESS, &offer, 0).expect("contract")
                }
                ContractChoice::Unknown(raw) => ContractId::new(raw.clone()).expect("alphanumeric contract id"),
            };
            book.add(contract_id.clone(), Endpoint::new(PROVIDER_ADDRESS));
            contracts.push(contract_id);
        }
        {
            let mut queue = net.queue.lock();
            for (i, call) in workload.calls.iter().enumerate() {
                queue.push(call.at, Event::Invoke { call: i });
            }
        }
        Self {
            net,
            log,
            workload,
            consumer,
            provider,
            provider_journal,
            registry,
            callbacks,
            contracts,
            invocations: Vec::new(),
            fetched: BTreeMap::new(),
            steps: 0,
        }
    }

    fn connector(&self) -> Connector {
        Connector::new(self.consumer.clone(), None)
    }

    /// Processes one event; false once the queue is empty.
    fn step(&mut self) -> bool {
        let next = {
            let mut queue = self.net.queue.lock();
            let generation = queue.generation;
            queue.events.pop_first().map(|((at, _), event)| (at, event, generation))
        };
        let Some((at, event, generation)) = next else {
            return false;
        };
        self.net.clock.set(at);
        self.steps += 1;
        match event {
            Event::Invoke { call } => {
                let call = &self.workload.calls[call];
                let contract = &self.contracts[self.invocations.len()];
                let id = self.consumer.invoke(contract, call.args.clone(), Some("sim://callback".into()));
                self.invocations.push(id.expect("contract is in the book"));
            }
            Event::Deliver { to, bytes } => match decode_signal(&bytes) {
                Ok(signal) => {
                    let outcome = match to.as_str() {
                        CONSUMER_ADDRESS => self.connector().dispatch(signal),
                        PROVIDER_ADDRESS => self.provider.handle(signal),
                        other => {
                            tracing::debug!(destination = other, "no node at destination");
                            DispatchOutcome::NoHandler
                        }
                    };
                    tracing::trace!(?outcome, "delivered");
                }
                Err(e) => tracing::error!(error = %e, "undecodable bytes on the wire"),
            },
            Event::Job { generation: job_generation, job } => {
                if job_generation == generation {
                    job();
                }
            }
        }
        self.fetch_finished();
        true
    }

    fn fetch_finished(&mut self) {
        for (i, id) in self.invocations.iter().enumerate() {
            if !self.workload.calls[i].fetch_result || self.fetched.contains_key(id) {
                continue;
            }
            if let Some(status) = self.consumer.status(*id) {
                if matches!(status.state, InvocationState::Finished) {
                    self.fetched.insert(*id, self.consumer.result(*id));
                }
            }
        }
    }

    /// Tears the provider down and starts a fresh one over the same journal
    /// and registry. Returns the recovery count.
    fn restart_provider(&mut self) -> usize {
        let generation = {
            let mut queue = self.net.queue.lock();
            queue.generation += 1;
            queue.generation
        };
        self.provider =
            build_provider(&self.net, &self.log, &self.provider_journal, &self.registry, &self.workload, generation);
        self.provider.recover_on_start()
    }

    fn run(&mut self, until: impl Fn(&World) -> bool) {
        while !until(self) && self.step() {}
    }

    fn report(self) -> SimReport {
        let map = |runtime_store: &InvocationStore, role| {
            runtime_store.list(role).into_iter().map(|r| (r.id, r)).collect::<BTreeMap<_, _>>()
        };
        let consumer = map(self.consumer.store(), Role::Consumer);
        let provider = map(self.provider.store(), Role::Provider);
        let mut stuck: Vec<_> = consumer
            .values()
            .chain(provider.values())
            .filter(|r| !r.is_terminal())
            .map(|r| (r.id, r.role, r.state))
            .collect();
        stuck.sort_by_key(|(id, role, _)| (self.invocations.iter().position(|i| i == id), *role));
        let callbacks = self.callbacks.0.lock().clone();
        let signals = self.net.records.lock().clone();
        SimReport {
            log: self.log,
            signals,
            invocations: self.invocations,
            consumer,
            provider,
            results: self.fetched,
            stuck,
            callbacks,
            steps: self.steps,
            finished_at: self.net.clock.now_ms(),
        }
    }
}

fn build_provider(
    net: &Arc<Network>,
    log: &TransitionLog,
    journal: &MemoryJournal,
    registry: &Arc<Registry>,
    workload: &Workload,
    generation: u64,
) -> ProviderRuntime {
    let store = InvocationStore::open(Arc::new(journal.clone()), Arc::new(net.clock.clone()), log.clone())
        .expect("memory journal loads");
    let provider = ProviderRuntime::new(
        Endpoint::new(PROVIDER_ADDRESS),
        Arc::new(store),
        registry.clone(),
        Arc::new(SimTransport(net.clone())),
        Arc::new(DeferredExecutor { net: net.clone(), generation, ticks: workload.execution_ticks }),
    );
    for registration in &workload.services {
        provider.register_service(registration.clone()).expect("workload service ids are distinct");
    }
    provider
}

/// Runs `workload` under `schedule` until the network drains.
pub fn run_scenario(schedule: Schedule, workload: Workload) -> SimReport {
    let mut world = World::new(schedule, workload);
    world.run(|_| false);
    world.report()
}

#[derive(Debug, Clone)]
pub struct RestartReport {
    pub phase: InvocationState,
    /// Whether the provider reached `phase` and was restarted.
    pub restarted: bool,
    pub recovered: usize,
    pub report: SimReport,
}

/// Runs one echo invocation, restarts the provider the moment its record
/// reaches `phase`, then lets the network drain.
pub fn run_restart_scenario(phase: InvocationState) -> RestartReport {
    let mut world = World::new(Schedule::in_order(), Workload::echo());
    let reached = |w: &World| {
        w.invocations
            .first()
            .and_then(|id| w.provider.store().get(*id, Role::Provider))
            .is_some_and(|r| r.state == phase)
    };
    world.run(reached);
    let restarted = reached(&world);
    let recovered = if restarted { world.restart_provider() } else { 0 };
    world.run(|_| false);
    RestartReport { phase, restarted, recovered, report: world.report() }
}

/// One delivery order tried by [`enumerate_orderings`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingRun {
    pub deliveries: Vec<SignalKind>,
    pub path: Vec<InvocationState>,
    pub final_state: InvocationState,
}

#[derive(Debug, Clone)]
pub struct OrderingVerdict {
    /// Provider-to-consumer signals of the in-order run, in send order.
    pub signals: Vec<SignalKind>,
    pub orderings: Vec<OrderingRun>,
    pub duplicated: Vec<OrderingRun>,
    /// Orderings where an applied transition was not a graph edge.
    pub regressions: Vec<OrderingRun>,
    /// Orderings where every signal arrived yet the consumer ended short of
    /// FINISHED, FAILED or INVALID.
    pub stuck: Vec<OrderingRun>,
    /// Duplicated orderings whose final state differs from the same order without copies.
    pub duplicate_mismatches: Vec<OrderingRun>,
    pub in_order_final: InvocationState,
}

impl OrderingVerdict {
    pub fn schedules(&self) -> usize {
        self.orderings.len() + self.duplicated.len()
    }
}

struct Sink;

impl Transport for Sink {
    fn send(&self, _destination: &Endpoint, _signal: Signal) {}
}

/// Distinct permutations of `items`, in lexicographic order of indices.
fn distinct_permutations<T: Clone + Ord>(items: &[T]) -> Vec<Vec<T>> {
    let mut sorted = items.to_vec();
    sorted.sort();
    let mut out = vec![sorted.clone()];
    // next_permutation over the sorted multiset
    loop {
        let Some(i) = (1..sorted.len()).rev().find(|&i| sorted[i - 1] < sorted[i]) else {
            return out;
        };
        let j = (i..sorted.len()).rev().find(|&j| sorted[j] > sorted[i - 1]).expect("pivot exists");
        sorted.swap(i - 1, j);
        sorted[i..].reverse();
        out.push(sorted.clone());
    }
}

/// Replays `signals` in the given order into a fresh consumer for one invocation.
fn replay(workload: &Workload, contract: &ContractId, signals: &[Signal]) -> (Vec<LogEntry>, InvocationState) {
    let log = TransitionLog::new();
    let store = Arc::new(InvocationStore::in_memory(Arc::new(SimClock::default()), log.clone()));
    let book = Arc::new(ContractBook::new());
    book.add(contract.clone(), Endpoint::new(PROVIDER_ADDRESS));
    let consumer = ConsumerRuntime::with_ids(
        Endpoint::new(CONSUMER_ADDRESS),
        store.clone(),
        book,
        Arc::new(Sink),
        Arc::new(RecordingCallbacks::default()),
        seeded_ids(workload.seed),
    );
    let id = consumer
        .invoke(contract, workload.calls[0].args.clone(), None)
        .expect("contract is in the book");
    for signal in signals {
        debug_assert_eq!(signal.invocation_id, id);
        consumer.handle(signal.clone());
    }
    let state = store.get(id, Role::Consumer).expect("record exists").state;
    (log.entries(), state)
}

/// Delivers the provider-to-consumer signals of a single-invocation
/// workload in every order, then in every order with each signal sent
/// twice, and checks the consumer against its state graph. The
/// consumer-to-provider direction is fixed by causality and not permuted.
pub fn enumerate_orderings(workload: &Workload) -> OrderingVerdict {
    assert_eq!(workload.calls.len(), 1, "ordering enumeration covers one invocation");
    let mut world = World::new(Schedule::in_order(), workload.clone());
    let contract = world.contracts[0].clone();
    world.run(|_| false);
    let signals: Vec<Signal> = world
        .net
        .wire
        .lock()
        .iter()
        .map(|bytes| decode_signal(bytes).expect("own encoding decodes"))
        .filter(|s| s.kind().receiver() == Role::Consumer)
        .collect();
    assert!(signals.len() <= 7, "at most 7 signals can be enumerated");
    let kinds: Vec<SignalKind> = signals.iter().map(Signal::kind).collect();

    let run = |order: &[usize]| {
        let ordered: Vec<Signal> = order.iter().map(|&i| signals[i].clone()).collect();
        let (entries, final_state) = replay(workload, &contract, &ordered);
        let path = entries
            .iter()
            .filter_map(|e| match e.outcome {
                LogOutcome::Created { state } => Some(state),
                LogOutcome::Applied { to } => Some(to),
                LogOutcome::Discarded { .. } => None,
            })
            .collect();
        let ordering = OrderingRun { deliveries: ordered.iter().map(Signal::kind).collect(), path, final_state };
        (ordering, graph_violations(&entries).is_empty())
    };

    let indices: Vec<usize> = (0..signals.len()).collect();
    let mut verdict = OrderingVerdict {
        signals: kinds,
        orderings: Vec::new(),
        duplicated: Vec::new(),
        regressions: Vec::new(),
        stuck: Vec::new(),
        duplicate_mismatches: Vec::new(),
        in_order_final: run(&indices).0.final_state,
    };
    let mut finals: HashMap<Vec<usize>, InvocationState> = HashMap::new();
    for order in distinct_permutations(&indices) {
        let (ordering, sound) = run(&order);
        if !sound {
            verdict.regressions.push(ordering.clone());
        }
        if !ordering.final_state.is_settled() {
            verdict.stuck.push(ordering.clone());
        }
        finals.insert(order, ordering.final_state);
        verdict.orderings.push(ordering);
    }
    let doubled: Vec<usize> = indices.iter().flat_map(|&i| [i, i]).collect();
    for order in distinct_permutations(&doubled) {
        let (ordering, sound) = run(&order);
        if !sound {
            verdict.regressions.push(ordering.clone());
        }
        let adjacent_pairs = order.chunks(2).all(|pair| pair[0] == pair[1]);
        if adjacent_pairs {
            let base: Vec<usize> = order.iter().step_by(2).copied().collect();
            if finals.get(&base) != Some(&ordering.final_state) {
                verdict.duplicate_mismatches.push(ordering.clone());
            }
        }
        verdict.duplicated.push(ordering);
    }
    verdict
}
