//! The contract every provider-side service implements, plus reference services.
//!
//! A service is instantiated once per invocation. The runtime hands it the
//! invocation arguments through [`Service::load_args`], one JSON-encoded
//! value per string, and then calls [`Service::execute`] exactly once on a
//! worker thread. Argument types are declared but never checked by the
//! runtime; only the count is.

use std::fmt;
use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::ServiceResult;

/// Self-description of a service. The argument list length is the
/// argument count the runtime enforces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceMetadata {
    pub service_id: String,
    /// Name of the type the factory instantiates.
    pub entry_point: String,
    pub argument_types: Vec<String>,
    pub return_type: String,
}

impl ServiceMetadata {
    pub fn new(
        service_id: impl Into<String>,
        entry_point: impl Into<String>,
        argument_types: &[&str],
        return_type: impl Into<String>,
    ) -> Self {
        Self {
            service_id: service_id.into(),
            entry_point: entry_point.into(),
            argument_types: argument_types.iter().map(|t| t.to_string()).collect(),
            return_type: return_type.into(),
        }
    }

    pub fn arity(&self) -> usize {
        self.argument_types.len()
    }
}

/// Failure raised by a service; its message is forwarded to the consumer verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError(pub String);

impl ServiceError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ServiceError {}

pub trait Service: Send {
    /// Parses the arguments into the instance. An error fails the invocation.
    fn load_args(&mut self, args: Vec<String>) -> Result<(), ServiceError>;

    /// Runs the service body. `Ok` with `success = false` is a domain-level
    /// error that still finishes the invocation; `Err` fails it.
    fn execute(&mut self) -> Result<ServiceResult, ServiceError>;
}

pub type ServiceFactory = Arc<dyn Fn() -> Box<dyn Service> + Send + Sync>;

/// A service type known to a connector: metadata plus a way to instantiate it.
#[derive(Clone)]
pub struct ServiceRegistration {
    pub metadata: ServiceMetadata,
    pub factory: ServiceFactory,
}

impl ServiceRegistration {
    pub fn new<F, S>(metadata: ServiceMetadata, factory: F) -> Self
    where
        F: Fn() -> S + Send + Sync + 'static,
        S: Service + 'static,
    {
        Self { metadata, factory: Arc::new(move || Box::new(factory()) as Box<dyn Service>) }
    }

    pub fn instantiate(&self) -> Box<dyn Service> {
        (self.factory)()
    }
}

impl fmt::Debug for ServiceRegistration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceRegistration").field("metadata", &self.metadata).finish_non_exhaustive()
    }
}

pub const ECHO_SERVICE_ID: &str = "builtin.echo";
pub const SUM_SERVICE_ID: &str = "builtin.sum";
pub const DELAY_SERVICE_ID: &str = "builtin.delay";

/// Returns its single argument unchanged.
#[derive(Debug, Default)]
pub struct Echo {
    value: Option<String>,
}

impl Echo {
    pub fn metadata() -> ServiceMetadata {
        ServiceMetadata::new(ECHO_SERVICE_ID, "Echo", &["application/json"], "application/json")
    }

    pub fn registration() -> ServiceRegistration {
        ServiceRegistration::new(Self::metadata(), Echo::default)
    }
}

impl Service for Echo {
    fn load_args(&mut self, mut args: Vec<String>) -> Result<(), ServiceError> {
        self.value = args.pop();
        Ok(())
    }

    fn execute(&mut self) -> Result<ServiceResult, ServiceError> {
        let value = self.value.take().ok_or_else(|| ServiceError::new("echo executed without arguments"))?;
        Ok(ServiceResult::ok(value).with_type(Self::metadata().argument_types[0].clone()))
    }
}

/// Adds up a JSON array of numbers.
#[derive(Debug, Default)]
pub struct Sum {
    numbers: Vec<serde_json::Number>,
}

impl Sum {
    pub fn metadata() -> ServiceMetadata {
        ServiceMetadata::new(SUM_SERVICE_ID, "Sum", &["application/json"], "application/json")
    }

    pub fn registration() -> ServiceRegistration {
        ServiceRegistration::new(Self::metadata(), Sum::default)
    }
}

impl Service for Sum {
    fn load_args(&mut self, args: Vec<String>) -> Result<(), ServiceError> {
        let raw = args.first().ok_or_else(|| ServiceError::new("sum expects one argument"))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| ServiceError::new(format!("argument is not valid JSON: {e}")))?;
        let items = value
            .as_array()
            .ok_or_else(|| ServiceError::new(format!("expected a JSON array of numbers, got {value}")))?;
        self.numbers = items
            .iter()
            .enumerate()
            .map(|(i, item)| match item {
                serde_json::Value::Number(n) => Ok(n.clone()),
                other => Err(ServiceError::new(format!("element {i} is not a number: {other}"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(())
    }

    fn execute(&mut self) -> Result<ServiceResult, ServiceError> {
        // Integers are summed exactly; any float switches to f64.
        let integers: Option<Vec<i128>> = self
            .numbers
            .iter()
            .map(|n| n.as_i64().map(i128::from).or_else(|| n.as_u64().map(i128::from)))
            .collect();
        let rendered = match integers {
            Some(values) => values
                .into_iter()
                .try_fold(0i128, |acc, v| acc.checked_add(v))
                .ok_or_else(|| ServiceError::new("sum overflows"))?
                .to_string(),
            None => {
                let total: f64 = self.numbers.iter().filter_map(|n| n.as_f64()).sum();
                let number = serde_json::Number::from_f64(total)
                    .ok_or_else(|| ServiceError::new("sum is not a finite number"))?;
                number.to_string()
            }
        };
        Ok(ServiceResult::ok(rendered).with_type("application/json"))
    }
}

/// Sleeps for the given number of milliseconds, then returns its second argument.
#[derive(Debug, Default)]
pub struct Delay {
    millis: u64,
    payload: String,
}

impl Delay {
    pub fn metadata() -> ServiceMetadata {
        ServiceMetadata::new(DELAY_SERVICE_ID, "Delay", &["application/json", "application/json"], "application/json")
    }

    pub fn registration() -> ServiceRegistration {
        ServiceRegistration::new(Self::metadata(), Delay::default)
    }
}

impl Service for Delay {
    fn load_args(&mut self, args: Vec<String>) -> Result<(), ServiceError> {
        let [millis, payload]: [String; 2] =
            args.try_into().map_err(|_| ServiceError::new("delay expects two arguments"))?;
        self.millis = millis
            .trim()
            .parse()
            .map_err(|_| ServiceError::new(format!("delay must be a non-negative integer, got {millis}")))?;
        self.payload = payload;
        Ok(())
    }

    fn execute(&mut self) -> Result<ServiceResult, ServiceError> {
        std::thread::sleep(Duration::from_millis(self.millis));
        Ok(ServiceResult::ok(std::mem::take(&mut self.payload)).with_type("application/json"))
    }
}

pub fn builtin(service_id: &str) -> Option<ServiceRegistration> {
    match service_id {
        ECHO_SERVICE_ID => Some(Echo::registration()),
        SUM_SERVICE_ID => Some(Sum::registration()),
        DELAY_SERVICE_ID => Some(Delay::registration()),
        _ => None,
    }
}

pub const DEFAULT_WRAPPER_TIMEOUT: Duration = Duration::from_secs(30);

/// Header identifying the connector on whose behalf a wrapper calls out.
pub const WRAPPER_CALLER_HEADER: &str = "x-servicespace-caller";

#[derive(Debug, Clone)]
pub struct ExternalEndpoint {
    pub url: String,
    pub timeout: Duration,
    /// Connector identity sent in [`WRAPPER_CALLER_HEADER`].
    pub caller: String,
}

/// Wraps a remote HTTP service as a [`Service`].
///
/// `execute` posts `{"args": [...]}` to the endpoint and blocks until the
/// request concludes. A 2xx body becomes the result data; transport
/// failures and non-2xx responses finish the invocation with
/// `success = false`. Redirects are never followed, so the wrapper talks
/// to exactly one address.
pub fn wrap_external(endpoint: ExternalEndpoint, metadata: ServiceMetadata) -> ServiceRegistration {
    let return_type = metadata.return_type.clone();
    let endpoint = Arc::new(endpoint);
    ServiceRegistration::new(metadata, move || ExternalService {
        endpoint: endpoint.clone(),
        return_type: return_type.clone(),
        args: Vec::new(),
    })
}

/// Blocking clients by timeout, built on first use and kept for the life of
/// the process. A blocking client must not be dropped inside an async
/// runtime, which a per-registration client would be when a node shuts down.
fn shared_client(timeout: Duration) -> reqwest::blocking::Client {
    static CLIENTS: OnceLock<Mutex<HashMap<Duration, reqwest::blocking::Client>>> = OnceLock::new();
    CLIENTS
        .get_or_init(Default::default)
        .lock()
        .entry(timeout)
        .or_insert_with(|| {
            reqwest::blocking::Client::builder()
                .timeout(timeout)
                .redirect(reqwest::redirect::Policy::none())
                .build()
                .expect("http client builds without tls")
        })
        .clone()
}

struct ExternalService {
    endpoint: Arc<ExternalEndpoint>,
    return_type: String,
    args: Vec<String>,
}

impl Service for ExternalService {
    fn load_args(&mut self, args: Vec<String>) -> Result<(), ServiceError> {
        self.args = args;
        Ok(())
    }

    fn execute(&mut self) -> Result<ServiceResult, ServiceError> {
        let body = serde_json::json!({ "args": self.args });
        let response = shared_client(self.endpoint.timeout)
            .post(&self.endpoint.url)
            .header(WRAPPER_CALLER_HEADER, &self.endpoint.caller)
            .json(&body)
            .send();
        let response = match response {
            Ok(response) => response,
            // The endpoint stays in the provider's log; consumers only learn what went wrong.
            Err(e) => {
                tracing::warn!(url = %self.endpoint.url, error = %e, "wrapped service call failed");
                let message = if e.is_timeout() {
                    "remote service timed out".to_string()
                } else if e.is_connect() {
                    "could not connect to the remote service".to_string()
                } else {
                    format!("request to the remote service failed: {}", e.without_url())
                };
                return Ok(ServiceResult::error(message));
            }
        };
        let status = response.status();
        let text = response.text().unwrap_or_default();
        if status.is_success() {
            Ok(ServiceResult::ok(text).with_type(self.return_type.clone()))
        } else {
            Ok(ServiceResult::error(format!("remote service responded with status {}: {}", status.as_u16(), text.trim())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(reg: &ServiceRegistration, args: &[&str]) -> Result<ServiceResult, ServiceError> {
        let mut service = reg.instantiate();
        service.load_args(args.iter().map(|a| a.to_string()).collect())?;
        service.execute()
    }

    #[test]
    fn echo_is_identity() {
        for arg in ["\"hello\"", "42", "{\"a\":1}"] {
            let result = run(&Echo::registration(), &[arg]).unwrap();
            assert!(result.success);
            assert_eq!(result.data.as_deref(), Some(arg));
            assert_eq!(result.data_type.as_deref(), Some("application/json"));
        }
    }

    #[test]
    fn sum_examples() {
        assert_eq!(run(&Sum::registration(), &["[1,2,3]"]).unwrap().data.as_deref(), Some("6"));
        assert_eq!(run(&Sum::registration(), &["[]"]).unwrap().data.as_deref(), Some("0"));
        assert_eq!(run(&Sum::registration(), &["[1.5,2]"]).unwrap().data.as_deref(), Some("3.5"));
        assert_eq!(
            run(&Sum::registration(), &["[-9223372036854775808,-1]"]).unwrap().data.as_deref(),
            Some("-9223372036854775809")
        );
        let err = run(&Sum::registration(), &["[1,\"x\"]"]).unwrap_err();
        assert!(err.0.contains("element 1 is not a number"), "{err}");
        assert!(run(&Sum::registration(), &["{"]).is_err());
    }

    #[test]
    fn delay_returns_payload() {
        let result = run(&Delay::registration(), &["5", "\"late\""]).unwrap();
        assert_eq!(result.data.as_deref(), Some("\"late\""));
        assert!(run(&Delay::registration(), &["-1", "0"]).is_err());
        assert!(run(&Delay::registration(), &["1"]).is_err());
    }

    #[test]
    fn builtin_arity_matches_accepted_arguments() {
        let cases: [(&str, &[&str]); 3] =
            [(ECHO_SERVICE_ID, &["1"]), (SUM_SERVICE_ID, &["[1]"]), (DELAY_SERVICE_ID, &["0", "1"])];
        for (id, args) in cases {
            let reg = builtin(id).unwrap();
            assert_eq!(reg.metadata.service_id, id);
            assert_eq!(reg.metadata.arity(), args.len());
            assert!(run(&reg, args).unwrap().success);
        }
        assert!(builtin("builtin.nope").is_none());
    }

    #[test]
    fn unreachable_wrapper_reports_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let reg = wrap_external(
            ExternalEndpoint {
                url: format!("http://{addr}/classify"),
                timeout: Duration::from_secs(2),
                caller: "p".into(),
            },
            ServiceMetadata::new("ext", "External", &["text/plain"], "text/plain"),
        );
        let result = run(&reg, &["\"x\""]).unwrap();
        assert!(!result.success);
        assert_eq!(result.error_message.as_deref(), Some("could not connect to the remote service"));
    }
}
