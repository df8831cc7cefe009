//! Flat key-value configuration read from TOML. Nested tables are addressed
//! with dotted keys, so `[mds]\nm = 8` and `"mds.m" = 8` are the same key.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use synergies_core::embedding::{SmacofOptions, DEFAULT_DIMENSION};
use synergies_core::facilities::DEFAULT_GEOCODE_CONCURRENCY;
use synergies_core::ioanalysis::{RelationMeasure, DEFAULT_MIN_INTENSITY, DEFAULT_TOP_K};
use synergies_core::recommender::{
    Locality, RecommendConfig, DEFAULT_K_PER_ACTIVITY, DEFAULT_MAX_SCORE, DEFAULT_RADIUS_KM,
};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub rca_threshold: f64,
    /// Country whose exports weight products within an activity.
    pub country: String,
    pub radius_km: f64,
    pub max_score: f64,
    pub k_per_activity: usize,
    pub locality: Locality,
    /// Territory the synergy graph is restricted to; all facilities when unset.
    pub territory: Option<String>,
    pub min_intensity: f64,
    pub top_k: usize,
    pub relation_measure: RelationMeasure,
    pub mds_m: usize,
    pub mds_max_iters: usize,
    pub mds_rel_tol: f64,
    pub seed: u64,
    pub geocoder_url: Option<String>,
    pub geocoder_concurrency: usize,
    pub api_listen: String,
    /// Allowed browser origin; any origin when unset.
    pub api_cors_origin: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        let smacof = SmacofOptions::default();
        Config {
            rca_threshold: 1.0,
            country: "FRA".into(),
            radius_km: DEFAULT_RADIUS_KM,
            max_score: DEFAULT_MAX_SCORE,
            k_per_activity: DEFAULT_K_PER_ACTIVITY,
            locality: Locality::default(),
            territory: None,
            min_intensity: DEFAULT_MIN_INTENSITY,
            top_k: DEFAULT_TOP_K,
            relation_measure: RelationMeasure::default(),
            mds_m: DEFAULT_DIMENSION,
            mds_max_iters: smacof.max_iters,
            mds_rel_tol: smacof.rel_tol,
            seed: smacof.seed,
            geocoder_url: None,
            geocoder_concurrency: DEFAULT_GEOCODE_CONCURRENCY,
            api_listen: "127.0.0.1:8080".into(),
            api_cors_origin: None,
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => {
                if out.insert(key.clone(), other.clone()).is_some() {
                    return Err(PipelineError::Config(format!("key {key} given twice")));
                }
            }
        }
    }
    Ok(())
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(PipelineError::Config(format!("{key} must be a number"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| PipelineError::Config(format!("{key} must be a non-negative integer")))
}

fn as_string(key: &str, v: &toml::Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| PipelineError::Config(format!("{key} must be a string")))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat)?;

        let mut c = Config::default();
        for (key, v) in &flat {
            let k = key.as_str();
            match k {
                "rca_threshold" => c.rca_threshold = as_f64(k, v)?,
                "country" => c.country = as_string(k, v)?,
                "radius_km" => c.radius_km = as_f64(k, v)?,
                "max_score" => c.max_score = as_f64(k, v)?,
                "k_per_activity" => c.k_per_activity = as_usize(k, v)?,
                "locality" => c.locality = as_string(k, v)?.parse()?,
                "territory" => c.territory = Some(as_string(k, v)?),
                "min_intensity" => c.min_intensity = as_f64(k, v)?,
                "top_k" => c.top_k = as_usize(k, v)?,
                "relation_measure" => c.relation_measure = as_string(k, v)?.parse()?,
                "mds.m" => c.mds_m = as_usize(k, v)?,
                "mds.max_iters" => c.mds_max_iters = as_usize(k, v)?,
                "mds.rel_tol" => c.mds_rel_tol = as_f64(k, v)?,
                "seed" => {
                    c.seed = v
                        .as_integer()
                        .and_then(|i| u64::try_from(i).ok())
                        .ok_or_else(|| PipelineError::Config("seed must be a non-negative integer".into()))?
                }
                "geocoder.url" => c.geocoder_url = Some(as_string(k, v)?),
                "geocoder.concurrency" => c.geocoder_concurrency = as_usize(k, v)?,
                "api.listen" => c.api_listen = as_string(k, v)?,
                "api.cors_origin" => c.api_cors_origin = Some(as_string(k, v)?),
                other => return Err(PipelineError::Config(format!("unknown key {other}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.radius_km >= 0.0) {
            return bad("radius_km must be non-negative");
        }
        if !(self.max_score >= 1.0) {
            return bad("max_score must be at least 1");
        }
        if !(self.rca_threshold > 0.0) {
            return bad("rca_threshold must be positive");
        }
        if !(self.min_intensity >= 0.0) {
            return bad("min_intensity must be non-negative");
        }
        if self.mds_m == 0 {
            return bad("mds.m must be positive");
        }
        if !(self.mds_rel_tol > 0.0) {
            return bad("mds.rel_tol must be positive");
        }
        if self.geocoder_concurrency == 0 {
            return bad("geocoder.concurrency must be positive");
        }
        Ok(())
    }

    pub fn recommend_config(&self) -> RecommendConfig {
        RecommendConfig {
            radius_km: self.radius_km,
            max_score: self.max_score,
            k_per_activity: self.k_per_activity,
            locality: self.locality,
        }
    }

    pub fn smacof_options(&self) -> SmacofOptions {
        SmacofOptions {
            max_iters: self.mds_max_iters,
            rel_tol: self.mds_rel_tol,
            seed: self.seed,
        }
    }
}
