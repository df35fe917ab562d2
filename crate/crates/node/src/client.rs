//! Client for a node's management API.

use std::collections::BTreeMap;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use reqwest::StatusCode;
use serde_json::{json, Value};
use servicespace_core::consumer::StatusView;
use servicespace_core::registry::{CatalogEntry, Policy};
use servicespace_core::{ContractId, InvocationId};

#[derive(Debug, Clone)]
pub struct NodeClient {
    base: String,
    http: reqwest::Client,
}

/// Raw response of one management call.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: StatusCode,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> anyhow::Result<Value> {
        serde_json::from_str(&self.body).with_context(|| format!("response is not JSON: {}", self.body))
    }

    /// The JSON body of a 2xx reply, or the server's error message.
    pub fn ok_json(&self) -> anyhow::Result<Value> {
        if !self.status.is_success() {
            let message = serde_json::from_str::<Value>(&self.body)
                .ok()
                .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_string))
                .unwrap_or_else(|| self.body.clone());
            bail!("{}: {message}", self.status);
        }
        self.json()
    }
}

fn field(value: &Value, name: &str) -> anyhow::Result<String> {
    value.get(name).and_then(Value::as_str).map(str::to_string).ok_or_else(|| anyhow!("response lacks `{name}`: {value}"))
}

impl NodeClient {
    pub fn new(base: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client builds without tls");
        Self { base: base.into().trim_end_matches('/').to_string(), http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn reply(&self, request: reqwest::RequestBuilder) -> anyhow::Result<Reply> {
        let response = request.send().await.with_context(|| format!("node at {} unreachable", self.base))?;
        let status = response.status();
        let body = response.text().await?;
        Ok(Reply { status, body })
    }

    pub async fn get(&self, path: &str, query: &[(&str, &str)]) -> anyhow::Result<Reply> {
        self.reply(self.http.get(format!("{}{path}", self.base)).query(query)).await
    }

    pub async fn post(&self, path: &str, query: &[(&str, &str)], body: &Value) -> anyhow::Result<Reply> {
        self.reply(self.http.post(format!("{}{path}", self.base)).query(query).json(body)).await
    }

    pub async fn create_asset(&self, body: &Value) -> anyhow::Result<String> {
        field(&self.post("/management/assets", &[], body).await?.ok_json()?, "assetId")
    }

    /// Publishes a loaded service as an asset; types come from its metadata.
    pub async fn create_service_asset(&self, service_id: &str, asset_id: Option<&str>) -> anyhow::Result<String> {
        let mut body = json!({ "serviceId": service_id });
        if let Some(id) = asset_id {
            body["assetId"] = json!(id);
        }
        self.create_asset(&body).await
    }

    pub async fn create_offer_reply(
        &self,
        asset_id: &str,
        access: Option<&Policy>,
        usage: Option<&Policy>,
    ) -> anyhow::Result<Reply> {
        let mut body = json!({ "assetId": asset_id });
        if let Some(p) = access {
            body["accessPolicy"] = serde_json::to_value(p)?;
        }
        if let Some(p) = usage {
            body["usagePolicy"] = serde_json::to_value(p)?;
        }
        self.post("/management/offers", &[], &body).await
    }

    pub async fn create_offer(&self, asset_id: &str, access: Option<&Policy>, usage: Option<&Policy>) -> anyhow::Result<String> {
        field(&self.create_offer_reply(asset_id, access, usage).await?.ok_json()?, "offerId")
    }

    /// This node's catalog as `counterparty` sees it.
    pub async fn catalog(&self, counterparty: &str) -> anyhow::Result<Vec<CatalogEntry>> {
        Ok(serde_json::from_value(self.get("/management/catalog", &[("counterparty", counterparty)]).await?.ok_json()?)?)
    }

    /// A provider's catalog as this node sees it.
    pub async fn remote_catalog(&self, provider: &str) -> anyhow::Result<Vec<CatalogEntry>> {
        Ok(serde_json::from_value(self.get("/management/remote-catalog", &[("provider", provider)]).await?.ok_json()?)?)
    }

    /// Negotiates a contract with `provider` (URL or peer name) on behalf of this node.
    pub async fn negotiate(&self, provider: &str, offer_id: &str) -> anyhow::Result<ContractId> {
        let reply = self.post("/management/negotiations", &[], &json!({ "provider": provider, "offerId": offer_id })).await?;
        ContractId::new(field(&reply.ok_json()?, "contractId")?).map_err(|e| anyhow!(e))
    }

    pub async fn invoke(&self, contract: &ContractId, args: Vec<Value>, callback_url: Option<&str>) -> anyhow::Result<InvocationId> {
        let mut query = vec![("contractId", contract.as_str())];
        if let Some(url) = callback_url {
            query.push(("callbackUrl", url));
        }
        let reply = self.post("/serviceinvocation/invoke", &query, &Value::Array(args)).await?;
        field(&reply.ok_json()?, "invocationId")?.parse().map_err(|e| anyhow!("bad invocation id: {e}"))
    }

    pub async fn status(&self, id: InvocationId) -> anyhow::Result<StatusView> {
        let reply = self.get("/serviceinvocation/status", &[("invocationId", &id.to_string())]).await?;
        Ok(serde_json::from_value(reply.ok_json()?)?)
    }

    pub async fn result(&self, id: InvocationId) -> anyhow::Result<Reply> {
        self.get("/serviceinvocation/result", &[("invocationId", &id.to_string())]).await
    }

    pub async fn requests(&self) -> anyhow::Result<BTreeMap<String, u64>> {
        Ok(serde_json::from_value(self.get("/management/requests", &[]).await?.ok_json()?)?)
    }
}
