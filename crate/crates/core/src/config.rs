//! Engine configuration: one JSON file, environment overrides for API keys,
//! and a per-field record of where each value came from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agents::{RetrievalParams, RuleBasedChat};
use crate::decision::GateThresholds;
use crate::ftdata::FtParams;
use crate::ingest::BalanceTargets;
use crate::kg::KgParams;
use crate::providers::offline::DEFAULT_EMBEDDING_DIM;
use crate::providers::{
    Bounded, ChatProvider, ConcurrencyLimit, Embedder, HashEmbedder, HttpConfig, HttpNer,
    HttpReranker, LexiconNer, NerProvider, OpenAiChat, OpenAiEmbedder, OverlapReranker,
    ProviderError, Providers, Reranker, DEFAULT_CONCURRENCY,
};
use crate::retrieval::Bm25Params;

/// Environment variable applied to every endpoint without its own key.
pub const API_KEY_ENV: &str = "QAROUTE_API_KEY";

const ENDPOINTS: [&str; 4] = ["chat", "embeddings", "reranker", "ner"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub chat: Option<HttpConfig>,
    pub embeddings: Option<HttpConfig>,
    pub reranker: Option<HttpConfig>,
    pub ner: Option<HttpConfig>,
    pub embedding_dim: usize,
    /// Pass raw reranker logits through a sigmoid.
    pub rerank_sigmoid: bool,
    /// Upper bound on in-flight provider calls across all endpoints.
    pub concurrency: usize,
    /// `surface<TAB>category` lexicon for the offline recognizer.
    pub lexicon: Option<PathBuf>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        ProviderSettings {
            chat: None,
            embeddings: None,
            reranker: None,
            ner: None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            rerank_sigmoid: true,
            concurrency: DEFAULT_CONCURRENCY,
            lexicon: None,
        }
    }
}

impl ProviderSettings {
    fn endpoint_mut(&mut self, name: &str) -> &mut Option<HttpConfig> {
        match name {
            "chat" => &mut self.chat,
            "embeddings" => &mut self.embeddings,
            "reranker" => &mut self.reranker,
            _ => &mut self.ner,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathSettings {
    pub index: Option<PathBuf>,
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    pub providers: ProviderSettings,
    pub gate: GateThresholds,
    pub retrieval: RetrievalParams,
    pub bm25: Bm25Params,
    pub kg: KgParams,
    pub ftdata: FtParams,
    /// Train / validation / test shares of dialogues.
    pub split: [f64; 3],
    pub balance: BalanceTargets,
    pub paths: PathSettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 42,
            providers: ProviderSettings::default(),
            gate: GateThresholds::default(),
            retrieval: RetrievalParams::default(),
            bm25: Bm25Params::default(),
            kg: KgParams::default(),
            ftdata: FtParams::default(),
            split: [0.8, 0.1, 0.1],
            balance: BalanceTargets::default(),
            paths: PathSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Default,
    File,
    Env,
    Flag,
}

/// A configuration plus the origin of every leaf value, keyed by dotted
/// path such as `gate.tau_amb`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: EngineConfig,
    pub provenance: BTreeMap<String, Provenance>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Rejects keys absent from the defaults. Subtrees whose default is null
/// (optional endpoints) are checked against a template instead.
fn check_keys(prefix: &str, file: &Value, reference: &Value) -> Result<(), ConfigError> {
    let Value::Object(fm) = file else {
        return Ok(());
    };
    let template;
    let reference =
        if reference.is_null() && ENDPOINTS.iter().any(|e| prefix == format!("providers.{e}")) {
            template = serde_json::to_value(HttpConfig::new("", "")).expect("serializable");
            &template
        } else {
            reference
        };
    let Value::Object(rm) = reference else {
        return if reference.is_null() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKey(prefix.to_string()))
        };
    };
    for (k, v) in fm {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match rm.get(k) {
            Some(r) => check_keys(&key, v, r)?,
            None if key.ends_with(".api_key") => {}
            None => return Err(ConfigError::UnknownKey(key)),
        }
    }
    Ok(())
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.gate.validate().map_err(ConfigError::Invalid)?;
        self.balance
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.retrieval.alpha) {
            return bad(format!(
                "retrieval.alpha = {} is outside [0, 1]",
                self.retrieval.alpha
            ));
        }
        if self.retrieval.k == 0 || self.retrieval.top_m == 0 {
            return bad("retrieval.k and retrieval.top_m must be positive".into());
        }
        if self.split.iter().any(|f| *f < 0.0)
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split {:?} must be non-negative and sum to 1",
                self.split
            ));
        }
        let k = &self.kg;
        for (name, v) in [
            ("kg.alpha", k.alpha),
            ("kg.tau_phase2", k.tau_phase2),
            ("kg.requires_weight", k.requires_weight),
            ("kg.reanchor_threshold", k.reanchor_threshold),
            ("kg.weight_cap", k.weight_cap),
            ("kg.act_init", k.act_init),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        let f = &self.ftdata;
        for (name, v) in [
            ("ftdata.node_match_threshold", f.node_match_threshold),
            ("ftdata.relevance_threshold", f.relevance_threshold),
            ("ftdata.generic_threshold", f.generic_threshold),
            ("ftdata.anchor_threshold", f.anchor_threshold),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [-1, 1]"));
            }
        }
        if self.providers.embedding_dim == 0 || self.providers.concurrency == 0 {
            return bad(
                "providers.embedding_dim and providers.concurrency must be positive".into(),
            );
        }
        Ok(())
    }

    /// Parses a config document, applies key overrides from `env`, and
    /// validates the result.
    pub fn from_json_with_env(
        content: &str,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<LoadedConfig, ConfigError> {
        let defaults = serde_json::to_value(EngineConfig::default()).expect("serializable");
        let file: Value = if content.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(content).map_err(|e| ConfigError::Json(e.to_string()))?
        };
        if !file.is_object() {
            return Err(ConfigError::Json("top level must be an object".into()));
        }
        check_keys("", &file, &defaults)?;
        let mut config: EngineConfig = serde_path_to_error::deserialize(&file)
            .map_err(|e| ConfigError::Invalid(format!("{}: {}", e.path(), e.inner())))?;

        let mut from_file = BTreeMap::new();
        flatten("", &file, &mut from_file);
        let mut provenance = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(&config).expect("serializable"),
            &mut leaves,
        );
        for key in leaves.keys() {
            let p = if from_file.contains_key(key) {
                Provenance::File
            } else {
                Provenance::Default
            };
            provenance.insert(key.clone(), p);
        }
        let shared = env(API_KEY_ENV);
        for name in ENDPOINTS {
            let own = env(&format!("QAROUTE_{}_API_KEY", name.to_uppercase()));
            if let (Some(ep), Some(key)) = (
                config.providers.endpoint_mut(name).as_mut(),
                own.or_else(|| shared.clone()),
            ) {
                ep.api_key = Some(key);
                provenance.insert(format!("providers.{name}.api_key"), Provenance::Env);
            }
        }
        config.validate()?;
        Ok(LoadedConfig { config, provenance })
    }

    pub fn load(path: Option<&Path>) -> Result<LoadedConfig, ConfigError> {
        let content = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_json_with_env(&content, &|k| std::env::var(k).ok())
    }
}

impl LoadedConfig {
    pub fn defaults() -> Self {
        EngineConfig::from_json_with_env("", &|_| None).expect("defaults are valid")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.provenance.insert("seed".into(), Provenance::Flag);
    }

    /// Serialized config without keys that came from the environment.
    pub fn to_json(&self) -> String {
        let mut c = self.config.clone();
        for name in ENDPOINTS {
            if self.provenance.get(&format!("providers.{name}.api_key")) == Some(&Provenance::Env) {
                if let Some(ep) = c.providers.endpoint_mut(name).as_mut() {
                    ep.api_key = None;
                }
            }
        }
        serde_json::to_string_pretty(&c).expect("serializable")
    }

    /// Every leaf value with its origin. API keys are redacted.
    pub fn echo(&self) -> Value {
        let mut leaves = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(&self.config).expect("serializable"),
            &mut leaves,
        );
        let mut out = Map::new();
        for (key, mut value) in leaves {
            if key.ends_with(".api_key") && !value.is_null() {
                value = Value::String("***".into());
            }
            let source = self
                .provenance
                .get(&key)
                .copied()
                .unwrap_or(Provenance::Default);
            out.insert(key, serde_json::json!({ "value": value, "source": source }));
        }
        Value::Object(out)
    }

    /// Offline stand-ins, or HTTP clients for every configured endpoint.
    /// Without `offline`, each endpoint must be configured.
    pub fn providers(&self, offline: bool) -> Result<Providers, ProviderError> {
        let p = &self.config.providers;
        let lexicon = match &p.lexicon {
            Some(path) => LexiconNer::from_tsv_file(path)?,
            None => LexiconNer::default(),
        };
        if offline {
            let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(p.embedding_dim));
            return Ok(Providers {
                chat: Arc::new(RuleBasedChat::new(
                    embedder.clone(),
                    self.config.ftdata.clone(),
                )),
                embedder,
                ner: Arc::new(lexicon),
                reranker: Arc::new(OverlapReranker::default()),
            });
        }
        let need = |ep: &Option<HttpConfig>, name: &str| {
            ep.clone().ok_or_else(|| {
                ProviderError::Config(format!(
                    "no endpoint configured for providers.{name}; set it or pass --offline"
                ))
            })
        };
        let limit = ConcurrencyLimit::new(p.concurrency);
        let chat: Arc<dyn ChatProvider> = Arc::new(Bounded::new(
            OpenAiChat::new(need(&p.chat, "chat")?)?,
            limit.clone(),
        ));
        let embedder: Arc<dyn Embedder> = Arc::new(Bounded::new(
            OpenAiEmbedder::new(need(&p.embeddings, "embeddings")?, p.embedding_dim)?,
            limit.clone(),
        ));
        let reranker: Arc<dyn Reranker> = Arc::new(Bounded::new(
            HttpReranker::new(need(&p.reranker, "reranker")?, p.rerank_sigmoid)?,
            limit.clone(),
        ));
        let ner: Arc<dyn NerProvider> =
            Arc::new(Bounded::new(HttpNer::new(need(&p.ner, "ner")?)?, limit));
        Ok(Providers {
            chat,
            embedder,
            ner,
            reranker,
        })
    }
}
