//! The static stage graph and the runner that caches stage outputs by
//! fingerprint (stage name, parameters and input hashes).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde_json::json;
use synergies_core::complexity::{binarize, compute_rca, product_proximity, ExportMatrix, ProductProximityMatrix};
use synergies_core::embedding::{activity_vectors, mds_embed, to_dissimilarity, Embedding};
use synergies_core::facilities::{
    geocode_registry, ingest_facilities, GeocodeCache, HttpGeocoder, Registry, RetryPolicy,
};
use synergies_core::ioanalysis::{
    leontief_output, project_to_nace, supplier_relations, technical_coefficients, IOTable, IndustryMatrix,
    RelationMeasure,
};
use synergies_core::nomenclature::{
    build_weighted_chain, parse_correspondence, product_weights, write_unmapped_csv, ProductWeightTable, UnmappedEntry,
    WeightedMapping,
};

use crate::config::Config;
use crate::error::{PipelineError, Result};
use crate::store::{hash_file, sha256_hex, ArtifactStore, Manifest, StageRecord, StoreLock};

pub const EXPORTS: &str = "exports.csv";
pub const BEA_NAICS: &str = "bea_naics.csv";
pub const NAICS_NACE: &str = "naics_nace.csv";
pub const ACTIVITY_PRODUCTS: &str = "activity_products.csv";
pub const IO_FLOWS: &str = "io_flows.csv";
pub const IO_INDUSTRIES: &str = "io_industries.csv";
pub const FACILITIES: &str = "facilities.csv";

pub const GEOCODE_CACHE: &str = "geocode_cache.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Proximity,
    Embed,
    Weights,
    ActivityProximity,
    IoProject,
    Ingest,
    Graph,
}

impl Stage {
    /// Topological order.
    pub const ALL: [Stage; 7] = [
        Stage::Proximity,
        Stage::Embed,
        Stage::Weights,
        Stage::ActivityProximity,
        Stage::IoProject,
        Stage::Ingest,
        Stage::Graph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Proximity => "proximity",
            Stage::Embed => "embed",
            Stage::Weights => "weights",
            Stage::ActivityProximity => "activity-proximity",
            Stage::IoProject => "io-project",
            Stage::Ingest => "ingest",
            Stage::Graph => "graph",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Proximity | Stage::Weights | Stage::IoProject | Stage::Ingest => &[],
            Stage::Embed => &[Stage::Proximity],
            Stage::ActivityProximity => &[Stage::Embed, Stage::Weights],
            Stage::Graph => &[Stage::ActivityProximity, Stage::IoProject, Stage::Ingest],
        }
    }

    pub fn input_files(self) -> &'static [&'static str] {
        match self {
            Stage::Proximity => &[EXPORTS],
            Stage::Weights => &[EXPORTS, ACTIVITY_PRODUCTS],
            Stage::IoProject => &[IO_FLOWS, IO_INDUSTRIES, BEA_NAICS, NAICS_NACE],
            Stage::Ingest => &[FACILITIES],
            Stage::Embed | Stage::ActivityProximity | Stage::Graph => &[],
        }
    }

    /// Parameters that change this stage's output.
    pub fn params(self, c: &Config) -> BTreeMap<String, String> {
        let pairs: Vec<(&str, String)> = match self {
            Stage::Proximity => vec![("rca_threshold", c.rca_threshold.to_string())],
            Stage::Embed => vec![
                ("mds.m", c.mds_m.to_string()),
                ("mds.max_iters", c.mds_max_iters.to_string()),
                ("mds.rel_tol", c.mds_rel_tol.to_string()),
                ("seed", c.seed.to_string()),
            ],
            Stage::Weights => vec![("country", c.country.clone())],
            Stage::ActivityProximity => vec![],
            Stage::IoProject => vec![
                ("min_intensity", c.min_intensity.to_string()),
                ("top_k", c.top_k.to_string()),
                ("relation_measure", c.relation_measure.to_string()),
            ],
            Stage::Ingest => vec![("geocoder.url", c.geocoder_url.clone().unwrap_or_default())],
            Stage::Graph => vec![
                ("radius_km", c.radius_km.to_string()),
                ("max_score", c.max_score.to_string()),
                ("k_per_activity", c.k_per_activity.to_string()),
                ("locality", c.locality.to_string()),
                ("territory", c.territory.clone().unwrap_or_default()),
            ],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    pub cache_hit: bool,
    pub outputs: BTreeMap<String, String>,
}

type Outputs = Vec<(&'static str, Vec<u8>)>;

fn json_bytes(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> synergies_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

/// Exclusive owner of an artifact store for one run.
pub struct Pipeline {
    store: ArtifactStore,
    config: Config,
    manifest: Manifest,
    _lock: StoreLock,
}

impl Pipeline {
    pub fn open(data_dir: impl Into<PathBuf>, config: Config) -> Result<Self> {
        config.validate()?;
        let store = ArtifactStore::new(data_dir);
        let lock = store.lock()?;
        let manifest = store.manifest()?;
        Ok(Pipeline {
            store,
            config,
            manifest,
            _lock: lock,
        })
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn run_all(&mut self, force: bool) -> Result<Vec<StageReport>> {
        Stage::ALL.into_iter().map(|s| self.run(s, force)).collect()
    }

    /// Runs `stage` unless its fingerprint matches the last run and the
    /// recorded outputs are intact.
    pub fn run(&mut self, stage: Stage, force: bool) -> Result<StageReport> {
        let mut inputs = BTreeMap::new();
        for name in stage.input_files() {
            let path = self.store.input_path(name);
            if !path.is_file() {
                return Err(PipelineError::MissingInput(path));
            }
            inputs.insert(format!("inputs/{name}"), hash_file(&path)?);
        }
        for up in stage.upstream() {
            let record = self
                .manifest
                .stages
                .get(up.name())
                .ok_or_else(|| PipelineError::MissingUpstream {
                    stage: stage.name().into(),
                    requires: up.name().into(),
                })?;
            for name in record.outputs.keys() {
                let bytes = self.store.read_verified(&self.manifest, name)?;
                inputs.insert(format!("artifacts/{name}"), sha256_hex(&bytes));
            }
        }
        let params = stage.params(&self.config);
        let fingerprint = sha256_hex(serde_json::to_string(&(stage.name(), &params, &inputs))?.as_bytes());

        if !force {
            if let Some(record) = self.manifest.stages.get(stage.name()) {
                if record.fingerprint == fingerprint {
                    for name in record.outputs.keys() {
                        self.store.read_verified(&self.manifest, name)?;
                    }
                    log::info!("{stage}: up to date");
                    return Ok(StageReport {
                        stage,
                        cache_hit: true,
                        outputs: record.outputs.clone(),
                    });
                }
            }
        }

        log::info!("{stage}: running");
        let produced = self.compute(stage)?;
        let mut outputs = BTreeMap::new();
        for (name, bytes) in produced {
            outputs.insert(name.to_string(), self.store.write_artifact(name, &bytes)?);
        }
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                fingerprint,
                params,
                inputs,
                outputs: outputs.clone(),
            },
        );
        self.store.save_manifest(&self.manifest)?;
        Ok(StageReport {
            stage,
            cache_hit: false,
            outputs,
        })
    }

    fn open_input(&self, name: &str) -> Result<File> {
        let path = self.store.input_path(name);
        File::open(&path).map_err(|e| PipelineError::io(path, e))
    }

    fn artifact(&self, name: &str) -> Result<Vec<u8>> {
        self.store.read_verified(&self.manifest, name)
    }

    fn compute(&self, stage: Stage) -> Result<Outputs> {
        match stage {
            Stage::Proximity => self.proximity(),
            Stage::Embed => self.embed(),
            Stage::Weights => self.weights(),
            Stage::ActivityProximity => self.activity_proximity(),
            Stage::IoProject => self.io_project(),
            Stage::Ingest => self.ingest(),
            Stage::Graph => self.graph(),
        }
    }

    fn proximity(&self) -> Result<Outputs> {
        let exports = ExportMatrix::read_csv(self.open_input(EXPORTS)?)?;
        let binary = binarize(&compute_rca(&exports)?, self.config.rca_threshold);
        let phi = product_proximity(&binary);
        Ok(vec![("proximity.csv", csv_bytes(|b| phi.write_csv(b))?)])
    }

    fn embed(&self) -> Result<Outputs> {
        let phi = ProductProximityMatrix::read_csv(self.artifact("proximity.csv")?.as_slice())?;
        let d = to_dissimilarity(&phi);
        let opts = self.config.smacof_options();
        let full = mds_embed(&d, self.config.mds_m, &opts)?;
        let plane = mds_embed(&d, 2, &opts)?;
        if !full.converged {
            log::warn!(
                "embedding stopped after {} iterations without converging",
                full.iterations
            );
        }
        let report = json!({
            "dimension": self.config.mds_m,
            "products": d.len(),
            "stress": full.stress,
            "iterations": full.iterations,
            "converged": full.converged,
            "stress_2d": plane.stress,
        });
        Ok(vec![
            ("embedding.csv", csv_bytes(|b| full.embedding.write_csv(b))?),
            ("embedding_2d.csv", csv_bytes(|b| plane.embedding.write_csv(b))?),
            ("mds_report.json", json_bytes(&report)),
        ])
    }

    fn weights(&self) -> Result<Outputs> {
        let exports = ExportMatrix::read_csv(self.open_input(EXPORTS)?)?;
        let raw = parse_correspondence(self.open_input(ACTIVITY_PRODUCTS)?, "NACE2", "HS2017")?;
        let mapping = WeightedMapping::from_occurrences(&raw);
        let outcome = product_weights(&exports, &mapping, &self.config.country)?;
        let report = json!({
            "country": outcome.table.country,
            "activities": mapping.len(),
            "uniform_fallback": outcome.uniform_fallback,
        });
        Ok(vec![
            ("product_weights.csv", csv_bytes(|b| outcome.table.write_csv(b))?),
            ("weights_report.json", json_bytes(&report)),
        ])
    }

    fn activity_proximity(&self) -> Result<Outputs> {
        let embedding = Embedding::read_csv(self.artifact("embedding.csv")?.as_slice())?;
        let weights =
            ProductWeightTable::read_csv(self.artifact("product_weights.csv")?.as_slice(), &self.config.country)?;
        let outcome = activity_vectors(&embedding, &weights);
        let matrix = outcome.vectors.proximity_matrix()?;
        let mut omitted = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut omitted);
            w.write_record(["activity", "reason"])
                .map_err(synergies_core::Error::from)?;
            for o in &outcome.omitted {
                w.write_record([&o.activity, &o.reason])
                    .map_err(synergies_core::Error::from)?;
            }
            w.flush().map_err(synergies_core::Error::from)?;
        }
        Ok(vec![
            ("activity_vectors.csv", csv_bytes(|b| outcome.vectors.write_csv(b))?),
            ("activity_proximity.csv", csv_bytes(|b| matrix.write_csv(b))?),
            ("omitted_activities.csv", omitted),
        ])
    }

    fn io_project(&self) -> Result<Outputs> {
        let chain = build_weighted_chain(
            &parse_correspondence(self.open_input(BEA_NAICS)?, "BEA", "NAICS")?,
            &parse_correspondence(self.open_input(NAICS_NACE)?, "NAICS", "NACE2")?,
        )?;
        let load = IOTable::read_csv(self.open_input(IO_FLOWS)?, self.open_input(IO_INDUSTRIES)?)?;
        for line in &load.report {
            log::warn!("io table: {line}");
        }
        let table = load.table;
        let a = technical_coefficients(&table)?;

        let solved = leontief_output(&a, table.final_demand.as_slice())?;
        let max_output_gap = solved
            .iter()
            .zip(&table.total_output)
            .map(|(x, t)| (x - t).abs() / t.abs().max(1.0))
            .fold(0.0, f64::max);
        if max_output_gap > 1e-6 {
            log::warn!("io table is not balanced: Leontief output differs from recorded output by {max_output_gap:e}");
        }

        let mut unmapped = chain.unmapped.clone();
        for code in &table.industries {
            if chain.mapping.targets(code).is_none() && !unmapped.iter().any(|u| &u.source == code) {
                unmapped.push(UnmappedEntry {
                    source: code.clone(),
                    reason: "industry has no NACE correspondence; its flows are dropped".into(),
                });
            }
        }
        unmapped.sort_by(|x, y| x.source.cmp(&y.source));

        let nace_a = project_to_nace(&a, &chain.mapping)?;
        let ranked = match self.config.relation_measure {
            RelationMeasure::Coefficient => nace_a.clone(),
            RelationMeasure::Flow => project_to_nace(
                &IndustryMatrix::new(table.industries.clone(), table.flows.clone())?,
                &chain.mapping,
            )?,
        };
        let relations = supplier_relations(&ranked, self.config.min_intensity, self.config.top_k);

        let cases: BTreeMap<&str, _> = chain.cases.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let report = json!({
            "industries": table.industries.len(),
            "activities": nace_a.len(),
            "load_issues": load.report,
            "invertibility_violations": a.invertibility_violations(),
            "leontief_max_relative_output_gap": max_output_gap,
            "chain_cases": cases,
            "relation_measure": self.config.relation_measure.to_string(),
        });
        let mut unmapped_csv = Vec::new();
        write_unmapped_csv(&unmapped, &mut unmapped_csv)?;
        Ok(vec![
            ("bea_nace.csv", csv_bytes(|b| chain.mapping.write_csv(b))?),
            ("unmapped.csv", unmapped_csv),
            ("tech_coefficients.csv", csv_bytes(|b| a.write_csv(b))?),
            ("nace_coefficients.csv", csv_bytes(|b| nace_a.write_csv(b))?),
            ("relations.json", relations.to_json().into_bytes()),
            ("io_report.json", json_bytes(&report)),
        ])
    }

    fn ingest(&self) -> Result<Outputs> {
        let mut ingest = ingest_facilities(self.open_input(FACILITIES)?)?;
        let mut summary = serde_json::Value::Null;
        if let Some(url) = &self.config.geocoder_url {
            let cache = GeocodeCache::open(self.store.data_dir().join(GEOCODE_CACHE))?;
            let client = HttpGeocoder::new(url.clone(), Duration::from_secs(10));
            let s = geocode_registry(
                &mut ingest.registry,
                &client,
                Some(&cache),
                self.config.geocoder_concurrency,
                &RetryPolicy::default(),
            );
            cache.save()?;
            summary = json!({
                "attempted": s.attempted,
                "cache_hits": s.cache_hits,
                "exact": s.exact,
                "simplified": s.simplified,
                "failed": s.failed,
            });
        }
        let located = ingest.registry.iter().filter(|f| f.is_located()).count();
        let report = json!({
            "facilities": ingest.registry.len(),
            "located": located,
            "unlocated": ingest.registry.len() - located,
            "rejected_rows": ingest.report.len(),
            "geocoding": summary,
        });
        let mut issues = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut issues);
            w.write_record(["line", "id", "reason"])
                .map_err(synergies_core::Error::from)?;
            for i in &ingest.report {
                w.write_record([&i.line.to_string(), &i.id, &i.reason])
                    .map_err(synergies_core::Error::from)?;
            }
            w.flush().map_err(synergies_core::Error::from)?;
        }
        Ok(vec![
            ("registry.csv", csv_bytes(|b| ingest.registry.write_csv(b))?),
            ("ingest_report.csv", issues),
            ("ingest_summary.json", json_bytes(&report)),
        ])
    }

    fn graph(&self) -> Result<Outputs> {
        let recommender = crate::load::recommender_from(&self.store, &self.manifest)?;
        let graph =
            recommender.build_synergy_graph(self.config.territory.as_deref(), &self.config.recommend_config())?;
        Ok(vec![
            ("graph.json", graph.to_json().into_bytes()),
            ("graph_edges.csv", csv_bytes(|b| graph.write_edges_csv(b))?),
        ])
    }
}

/// Registry loaded from the `ingest` artifact.
pub fn registry_from(store: &ArtifactStore, manifest: &Manifest) -> Result<Registry> {
    Ok(Registry::read_csv(
        store.read_verified(manifest, "registry.csv")?.as_slice(),
    )?)
}
