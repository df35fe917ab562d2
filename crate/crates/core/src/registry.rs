//! Assets, offers and usage contracts.
//!
//! A service is published as an asset whose public properties declare the
//! argument and return types and whose private properties name the local
//! service id. Private properties never leave this module through a
//! consumer-facing view.

use std::collections::BTreeMap;
use std::path::PathBuf;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::ContractId;
use crate::sdk::ServiceMetadata;

pub const PROP_ARGUMENT_TYPES: &str = "urn:servicespace:argumentTypes";
pub const PROP_RETURN_TYPE: &str = "urn:servicespace:returnType";
pub const PROP_ASSET_TYPE: &str = "urn:servicespace:assetType";
pub const PROP_SERVICE_ID: &str = "urn:servicespace:serviceId";
pub const ASSET_TYPE_SERVICE: &str = "service";

pub const INVALID_CONTRACT_MESSAGE: &str = "service does not exist or the contractId is invalid";

pub type Properties = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Asset {
    pub asset_id: String,
    pub public_properties: Properties,
    pub private_properties: Properties,
}

impl Asset {
    pub fn is_service(&self) -> bool {
        self.public_properties.get(PROP_ASSET_TYPE).and_then(Value::as_str) == Some(ASSET_TYPE_SERVICE)
    }

    pub fn service_id(&self) -> Option<&str> {
        self.private_properties.get(PROP_SERVICE_ID).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyKind {
    Access,
    Usage,
}

/// Decision rule standing in for full policy evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "type", content = "parties")]
pub enum PolicyRule {
    AllowAll,
    DenyAll,
    AllowOnly(Vec<String>),
    DenyOnly(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Policy {
    pub kind: PolicyKind,
    /// Stored and echoed verbatim; never interpreted.
    #[serde(default)]
    pub document: Value,
    pub rule: PolicyRule,
}

impl Policy {
    pub fn allow_all(kind: PolicyKind) -> Self {
        Self { kind, document: Value::Null, rule: PolicyRule::AllowAll }
    }

    pub fn with_rule(kind: PolicyKind, rule: PolicyRule) -> Self {
        Self { kind, document: Value::Null, rule }
    }

    pub fn permits(&self, counterparty: &str) -> bool {
        match &self.rule {
            PolicyRule::AllowAll => true,
            PolicyRule::DenyAll => false,
            PolicyRule::AllowOnly(parties) => parties.iter().any(|p| p == counterparty),
            PolicyRule::DenyOnly(parties) => !parties.iter().any(|p| p == counterparty),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Offer {
    pub offer_id: String,
    pub asset_id: String,
    pub access_policy: Policy,
    pub usage_policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Contract {
    pub contract_id: ContractId,
    pub offer_id: String,
    pub consumer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_id: Option<String>,
    pub negotiated_at: u64,
}

/// An offer as a counterparty sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CatalogEntry {
    pub offer_id: String,
    pub asset_id: String,
    pub properties: Properties,
    pub access_policy: Policy,
    pub usage_policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractValidation {
    Valid(String),
    Invalid(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("asset '{0}' already exists")]
    DuplicateAsset(String),
    #[error("property key '{0}' is not a URI")]
    NotAUri(String),
    #[error("service asset is missing required property '{0}'")]
    MissingServiceProperty(&'static str),
    #[error("service asset property '{0}' has the wrong shape: {1}")]
    BadServiceProperty(&'static str, String),
    #[error("unknown asset '{0}'")]
    UnknownAsset(String),
    #[error("policy '{0:?}' supplied where the other kind was expected")]
    WrongPolicyKind(PolicyKind),
    #[error("unknown offer '{0}'")]
    UnknownOffer(String),
    #[error("counterparty '{0}' is not permitted by the offer's policies")]
    AccessDenied(String),
    #[error("registry persistence: {0}")]
    Persistence(String),
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct RegistryState {
    assets: BTreeMap<String, Asset>,
    offers: BTreeMap<String, Offer>,
    contracts: BTreeMap<ContractId, Contract>,
    next_offer: u64,
}

#[derive(Debug, Default)]
pub struct Registry {
    state: RwLock<RegistryState>,
    snapshot: Option<PathBuf>,
}

fn check_uri_keys(props: &Properties) -> Result<(), RegistryError> {
    for key in props.keys() {
        if url::Url::parse(key).is_err() {
            return Err(RegistryError::NotAUri(key.clone()));
        }
    }
    Ok(())
}

fn check_service_asset(public: &Properties, private: &Properties) -> Result<(), RegistryError> {
    let arg_types = public
        .get(PROP_ARGUMENT_TYPES)
        .ok_or(RegistryError::MissingServiceProperty(PROP_ARGUMENT_TYPES))?;
    let ok = arg_types.as_array().is_some_and(|items| items.iter().all(Value::is_string));
    if !ok {
        return Err(RegistryError::BadServiceProperty(
            PROP_ARGUMENT_TYPES,
            format!("expected an array of MIME type strings, got {arg_types}"),
        ));
    }
    match public.get(PROP_RETURN_TYPE) {
        None => return Err(RegistryError::MissingServiceProperty(PROP_RETURN_TYPE)),
        Some(Value::String(_)) => {}
        Some(other) => {
            return Err(RegistryError::BadServiceProperty(PROP_RETURN_TYPE, format!("expected a string, got {other}")))
        }
    }
    match private.get(PROP_SERVICE_ID) {
        None => Err(RegistryError::MissingServiceProperty(PROP_SERVICE_ID)),
        Some(Value::String(s)) if !s.is_empty() => Ok(()),
        Some(other) => {
            Err(RegistryError::BadServiceProperty(PROP_SERVICE_ID, format!("expected a non-empty string, got {other}")))
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry that rewrites a JSON snapshot at `path` after every change.
    pub fn persistent(path: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let path = path.into();
        let state = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| RegistryError::Persistence(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RegistryState::default(),
            Err(e) => return Err(RegistryError::Persistence(e.to_string())),
        };
        Ok(Self { state: RwLock::new(state), snapshot: Some(path) })
    }

    fn save(&self, state: &RegistryState) {
        let Some(path) = &self.snapshot else { return };
        let result = serde_json::to_vec_pretty(state)
            .map_err(|e| e.to_string())
            .and_then(|bytes| {
                let tmp = path.with_extension("tmp");
                std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| e.to_string())
            });
        if let Err(e) = result {
            tracing::error!(path = %path.display(), error = %e, "failed to write registry snapshot");
        }
    }

    /// Creates an asset. When `asset_id` is `None` a fresh id is generated.
    pub fn create_asset(
        &self,
        asset_id: Option<String>,
        public_properties: Properties,
        private_properties: Properties,
    ) -> Result<String, RegistryError> {
        check_uri_keys(&public_properties)?;
        check_uri_keys(&private_properties)?;
        let asset = Asset {
            asset_id: asset_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            public_properties,
            private_properties,
        };
        if asset.is_service() {
            check_service_asset(&asset.public_properties, &asset.private_properties)?;
        }
        let mut state = self.state.write();
        if state.assets.contains_key(&asset.asset_id) {
            return Err(RegistryError::DuplicateAsset(asset.asset_id));
        }
        let id = asset.asset_id.clone();
        state.assets.insert(id.clone(), asset);
        self.save(&state);
        Ok(id)
    }

    /// Creates a service asset whose type properties come from the service's metadata.
    pub fn create_service_asset(
        &self,
        asset_id: Option<String>,
        metadata: &ServiceMetadata,
        mut public_properties: Properties,
    ) -> Result<String, RegistryError> {
        public_properties.insert(PROP_ASSET_TYPE.into(), Value::from(ASSET_TYPE_SERVICE));
        public_properties.insert(PROP_ARGUMENT_TYPES.into(), Value::from(metadata.argument_types.clone()));
        public_properties.insert(PROP_RETURN_TYPE.into(), Value::from(metadata.return_type.clone()));
        let private = Properties::from([(PROP_SERVICE_ID.to_string(), Value::from(metadata.service_id.clone()))]);
        self.create_asset(asset_id, public_properties, private)
    }

    pub fn create_offer(
        &self,
        asset_id: &str,
        access_policy: Policy,
        usage_policy: Policy,
    ) -> Result<String, RegistryError> {
        if access_policy.kind != PolicyKind::Access {
            return Err(RegistryError::WrongPolicyKind(access_policy.kind));
        }
        if usage_policy.kind != PolicyKind::Usage {
            return Err(RegistryError::WrongPolicyKind(usage_policy.kind));
        }
        let mut state = self.state.write();
        if !state.assets.contains_key(asset_id) {
            return Err(RegistryError::UnknownAsset(asset_id.to_string()));
        }
        state.next_offer += 1;
        let offer_id = format!("offer-{}", state.next_offer);
        state.offers.insert(
            offer_id.clone(),
            Offer { offer_id: offer_id.clone(), asset_id: asset_id.to_string(), access_policy, usage_policy },
        );
        self.save(&state);
        Ok(offer_id)
    }

    /// Offers visible to `counterparty`, with public properties only.
    pub fn catalog(&self, counterparty: &str) -> Vec<CatalogEntry> {
        let state = self.state.read();
        state
            .offers
            .values()
            .filter(|offer| offer.access_policy.permits(counterparty))
            .filter_map(|offer| {
                let asset = state.assets.get(&offer.asset_id)?;
                Some(CatalogEntry {
                    offer_id: offer.offer_id.clone(),
                    asset_id: asset.asset_id.clone(),
                    properties: asset.public_properties.clone(),
                    access_policy: offer.access_policy.clone(),
                    usage_policy: offer.usage_policy.clone(),
                })
            })
            .collect()
    }

    pub fn negotiate_contract(&self, consumer_id: &str, offer_id: &str, now_ms: u64) -> Result<ContractId, RegistryError> {
        let mut state = self.state.write();
        let offer = state.offers.get(offer_id).ok_or_else(|| RegistryError::UnknownOffer(offer_id.to_string()))?;
        if !offer.access_policy.permits(consumer_id) || !offer.usage_policy.permits(consumer_id) {
            return Err(RegistryError::AccessDenied(consumer_id.to_string()));
        }
        let service_id = state
            .assets
            .get(&offer.asset_id)
            .filter(|asset| asset.is_service())
            .and_then(|asset| asset.service_id())
            .map(str::to_string);
        let contract = Contract {
            contract_id: ContractId::generate(),
            offer_id: offer_id.to_string(),
            consumer_id: consumer_id.to_string(),
            service_id,
            negotiated_at: now_ms,
        };
        let id = contract.contract_id.clone();
        state.contracts.insert(id.clone(), contract);
        self.save(&state);
        Ok(id)
    }

    /// Valid iff the contract exists and its service is currently loaded.
    pub fn validate_contract(&self, contract_id: &ContractId, is_loaded: impl Fn(&str) -> bool) -> ContractValidation {
        let state = self.state.read();
        let Some(contract) = state.contracts.get(contract_id) else {
            return ContractValidation::Invalid(INVALID_CONTRACT_MESSAGE.to_string());
        };
        match &contract.service_id {
            None => ContractValidation::Invalid(format!("contract {contract_id} does not cover a service")),
            Some(service_id) if !is_loaded(service_id) => ContractValidation::Invalid(format!(
                "{INVALID_CONTRACT_MESSAGE}: service '{service_id}' is not loaded on this connector"
            )),
            Some(service_id) => ContractValidation::Valid(service_id.clone()),
        }
    }

    pub fn asset(&self, asset_id: &str) -> Option<Asset> {
        self.state.read().assets.get(asset_id).cloned()
    }

    pub fn contract(&self, contract_id: &ContractId) -> Option<Contract> {
        self.state.read().contracts.get(contract_id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdk::Echo;

    fn echo_asset(registry: &Registry) -> String {
        registry.create_service_asset(Some("echo".into()), &Echo::metadata(), Properties::new()).unwrap()
    }

    fn allow_all_offer(registry: &Registry, asset: &str) -> String {
        registry
            .create_offer(asset, Policy::allow_all(PolicyKind::Access), Policy::allow_all(PolicyKind::Usage))
            .unwrap()
    }

    #[test]
    fn service_asset_requires_properties() {
        let registry = Registry::new();
        let public = Properties::from([
            (PROP_ASSET_TYPE.to_string(), Value::from("service")),
            (PROP_ARGUMENT_TYPES.to_string(), serde_json::json!(["text/plain"])),
            (PROP_RETURN_TYPE.to_string(), Value::from("application/json")),
        ]);
        assert_eq!(
            registry.create_asset(None, public.clone(), Properties::new()),
            Err(RegistryError::MissingServiceProperty(PROP_SERVICE_ID))
        );
        let private = Properties::from([(PROP_SERVICE_ID.to_string(), Value::from("builtin.echo"))]);
        let id = registry.create_asset(Some("a1".into()), public.clone(), private.clone()).unwrap();
        assert_eq!(id, "a1");
        assert_eq!(
            registry.create_asset(Some("a1".into()), public.clone(), private.clone()),
            Err(RegistryError::DuplicateAsset("a1".into()))
        );
        let mut bad = public.clone();
        bad.insert("not a uri".into(), Value::from(1));
        assert_eq!(registry.create_asset(None, bad, private.clone()), Err(RegistryError::NotAUri("not a uri".into())));
        let mut bad = public;
        bad.insert(PROP_ARGUMENT_TYPES.into(), Value::from("text/plain"));
        assert!(matches!(registry.create_asset(None, bad, private), Err(RegistryError::BadServiceProperty(..))));
    }

    #[test]
    fn data_assets_need_no_service_properties() {
        let registry = Registry::new();
        let public = Properties::from([("https://example.org/title".to_string(), Value::from("weather"))]);
        assert!(registry.create_asset(None, public, Properties::new()).is_ok());
    }

    #[test]
    fn auto_populated_types_match_metadata() {
        let registry = Registry::new();
        let id = echo_asset(&registry);
        let asset = registry.asset(&id).unwrap();
        assert_eq!(asset.public_properties[PROP_ARGUMENT_TYPES], serde_json::json!(Echo::metadata().argument_types));
        assert_eq!(asset.public_properties[PROP_RETURN_TYPE], Value::from(Echo::metadata().return_type));
        assert_eq!(asset.service_id(), Some("builtin.echo"));
    }

    #[test]
    fn offers_require_existing_asset_and_matching_kinds() {
        let registry = Registry::new();
        assert_eq!(
            registry.create_offer("ghost", Policy::allow_all(PolicyKind::Access), Policy::allow_all(PolicyKind::Usage)),
            Err(RegistryError::UnknownAsset("ghost".into()))
        );
        let asset = echo_asset(&registry);
        assert_eq!(
            registry.create_offer(&asset, Policy::allow_all(PolicyKind::Usage), Policy::allow_all(PolicyKind::Usage)),
            Err(RegistryError::WrongPolicyKind(PolicyKind::Usage))
        );
    }

    #[test]
    fn catalog_filtering_and_negotiation_agree() {
        let registry = Registry::new();
        let asset = echo_asset(&registry);
        let open = allow_all_offer(&registry, &asset);
        let closed = registry
            .create_offer(
                &asset,
                Policy::with_rule(PolicyKind::Access, PolicyRule::DenyOnly(vec!["mallory".into()])),
                Policy::allow_all(PolicyKind::Usage),
            )
            .unwrap();
        let for_mallory: Vec<_> = registry.catalog("mallory").into_iter().map(|e| e.offer_id).collect();
        assert_eq!(for_mallory, vec![open.clone()]);
        assert_eq!(registry.catalog("alice").len(), 2);
        for party in ["alice", "mallory"] {
            let visible: Vec<_> = registry.catalog(party).into_iter().map(|e| e.offer_id).collect();
            for offer in [&open, &closed] {
                assert_eq!(visible.contains(offer), registry.negotiate_contract(party, offer, 0).is_ok());
            }
        }
        assert_eq!(
            registry.negotiate_contract("mallory", &closed, 0),
            Err(RegistryError::AccessDenied("mallory".into()))
        );
        assert_eq!(registry.negotiate_contract("alice", "offer-99", 0), Err(RegistryError::UnknownOffer("offer-99".into())));
    }

    #[test]
    fn repeat_negotiation_yields_distinct_contracts() {
        let registry = Registry::new();
        let asset = echo_asset(&registry);
        let offer = allow_all_offer(&registry, &asset);
        let a = registry.negotiate_contract("alice", &offer, 1).unwrap();
        let b = registry.negotiate_contract("alice", &offer, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn validation_examples() {
        let registry = Registry::new();
        let unknown = ContractId::new("nope").unwrap();
        assert_eq!(
            registry.validate_contract(&unknown, |_| true),
            ContractValidation::Invalid(INVALID_CONTRACT_MESSAGE.into())
        );
        let asset = echo_asset(&registry);
        let offer = allow_all_offer(&registry, &asset);
        let contract = registry.negotiate_contract("alice", &offer, 0).unwrap();
        assert_eq!(registry.validate_contract(&contract, |id| id == "builtin.echo"), ContractValidation::Valid("builtin.echo".into()));
        assert!(matches!(registry.validate_contract(&contract, |_| false), ContractValidation::Invalid(_)));
    }

    #[test]
    fn catalog_never_exposes_private_properties() {
        let registry = Registry::new();
        let meta = ServiceMetadata::new("secret.model.v7", "Model", &["text/plain"], "text/plain");
        let asset = registry.create_service_asset(None, &meta, Properties::new()).unwrap();
        allow_all_offer(&registry, &asset);
        let text = serde_json::to_string(&registry.catalog("anyone")).unwrap();
        assert!(!text.contains("secret.model.v7"));
        assert!(!text.contains(PROP_SERVICE_ID));
    }

    #[test]
    fn snapshot_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let contract = {
            let registry = Registry::persistent(&path).unwrap();
            let asset = echo_asset(&registry);
            let offer = allow_all_offer(&registry, &asset);
            registry.negotiate_contract("alice", &offer, 0).unwrap()
        };
        let registry = Registry::persistent(&path).unwrap();
        assert!(registry.contract(&contract).is_some());
        // offer ids keep counting after reopen
        assert_eq!(allow_all_offer(&registry, "echo"), "offer-2");
    }
}
