//! Node configuration: a TOML file plus environment overrides.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use servicespace_core::sdk::{self, ExternalEndpoint, ServiceMetadata, ServiceRegistration};

pub const ENV_LISTEN: &str = "SERVICESPACE_LISTEN";
pub const ENV_PUBLIC_URL: &str = "SERVICESPACE_PUBLIC_URL";
pub const ENV_SHARED_SECRET: &str = "SERVICESPACE_SHARED_SECRET";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    /// Identity presented to other connectors.
    pub name: String,
    pub listen: SocketAddr,
    /// Address peers use to reach this node; defaults to `http://{listen}`.
    #[serde(default)]
    pub public_url: Option<String>,
    /// Directory for invocation journals, registry and contracts. In-memory when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Sent on and required for inter-connector requests when set.
    #[serde(default)]
    pub shared_secret: Option<String>,
    /// Whether this node serves services. Every node can act as consumer.
    #[serde(default = "default_true")]
    pub provider: bool,
    /// Built-in services to load, by service id.
    #[serde(default)]
    pub services: Vec<String>,
    #[serde(default)]
    pub wrappers: Vec<WrapperConfig>,
    #[serde(default)]
    pub peers: Vec<PeerConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrapperConfig {
    pub service_id: String,
    pub url: String,
    pub argument_types: Vec<String>,
    pub return_type: String,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConfig {
    pub name: String,
    pub url: String,
}

fn default_pool_size() -> usize {
    servicespace_core::executor::ThreadPool::DEFAULT_SIZE
}

fn default_true() -> bool {
    true
}

impl NodeConfig {
    /// A provider-and-consumer node with no services, for programmatic setups.
    pub fn new(name: impl Into<String>, listen: SocketAddr) -> Self {
        Self {
            name: name.into(),
            listen,
            public_url: None,
            data_dir: None,
            pool_size: default_pool_size(),
            shared_secret: None,
            provider: true,
            services: Vec::new(),
            wrappers: Vec::new(),
            peers: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid node config: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        config.apply_env(|key| std::env::var(key).ok())?;
        Ok(config)
    }

    /// Overrides addresses and secret from the environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(listen) = get(ENV_LISTEN) {
            self.listen = listen.parse().with_context(|| format!("{ENV_LISTEN}: not a socket address: {listen}"))?;
        }
        if let Some(url) = get(ENV_PUBLIC_URL) {
            self.public_url = Some(url);
        }
        if let Some(secret) = get(ENV_SHARED_SECRET) {
            self.shared_secret = Some(secret);
        }
        self.validate()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.name.trim().is_empty() {
            bail!("field `name` must not be empty");
        }
        if self.pool_size == 0 {
            bail!("field `pool_size` must be at least 1");
        }
        if let Some(url) = &self.public_url {
            check_url("public_url", url)?;
        }
        let mut ids = BTreeSet::new();
        for (i, id) in self.services.iter().enumerate() {
            if sdk::builtin(id).is_none() {
                bail!("field `services[{i}]`: unknown built-in service '{id}'");
            }
            if !ids.insert(id.as_str()) {
                bail!("field `services[{i}]`: service '{id}' listed twice");
            }
        }
        for (i, w) in self.wrappers.iter().enumerate() {
            if w.service_id.trim().is_empty() {
                bail!("field `wrappers[{i}].service_id` must not be empty");
            }
            if !ids.insert(w.service_id.as_str()) {
                bail!("field `wrappers[{i}].service_id`: service '{}' is already defined", w.service_id);
            }
            check_url(&format!("wrappers[{i}].url"), &w.url)?;
            if w.timeout_ms == Some(0) {
                bail!("field `wrappers[{i}].timeout_ms` must be positive");
            }
        }
        for (i, p) in self.peers.iter().enumerate() {
            check_url(&format!("peers[{i}].url"), &p.url)?;
        }
        Ok(())
    }

    pub fn public_url(&self) -> String {
        self.public_url.clone().unwrap_or_else(|| format!("http://{}", self.listen)).trim_end_matches('/').to_string()
    }

    pub fn peer_url(&self, name: &str) -> Option<&str> {
        self.peers.iter().find(|p| p.name == name).map(|p| p.url.as_str())
    }

    /// Built-ins and wrappers this node serves, in configuration order.
    pub fn registrations(&self) -> Vec<ServiceRegistration> {
        let builtins = self.services.iter().filter_map(|id| sdk::builtin(id));
        let wrappers = self.wrappers.iter().map(|w| {
            let metadata = ServiceMetadata {
                service_id: w.service_id.clone(),
                entry_point: "ExternalService".into(),
                argument_types: w.argument_types.clone(),
                return_type: w.return_type.clone(),
            };
            let endpoint = ExternalEndpoint {
                url: w.url.clone(),
                timeout: w.timeout_ms.map(Duration::from_millis).unwrap_or(sdk::DEFAULT_WRAPPER_TIMEOUT),
                caller: self.name.clone(),
            };
            sdk::wrap_external(endpoint, metadata)
        });
        builtins.chain(wrappers).collect()
    }
}

fn check_url(field: &str, url: &str) -> anyhow::Result<()> {
    match reqwest::Url::parse(url) {
        Ok(u) if u.scheme() == "http" || u.scheme() == "https" => Ok(()),
        Ok(u) => bail!("field `{field}`: unsupported scheme '{}'", u.scheme()),
        Err(e) => bail!("field `{field}`: {e}"),
    }
}
