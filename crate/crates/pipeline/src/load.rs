//! Read-only access to built artifacts for the CLI and the HTTP service.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use synergies_core::embedding::ActivityVectorSet;
use synergies_core::ioanalysis::SupplierRelationTable;
use synergies_core::recommender::{EdgeKind, RecommendConfig, Recommender, SynergyGraph};

use crate::error::{PipelineError, Result};
use crate::stages::{registry_from, Stage};
use crate::store::{ArtifactStore, Manifest};

fn require(manifest: &Manifest, needed_by: &str, stage: Stage) -> Result<()> {
    if manifest.stages.contains_key(stage.name()) {
        Ok(())
    } else {
        Err(PipelineError::MissingUpstream {
            stage: needed_by.into(),
            requires: stage.name().into(),
        })
    }
}

pub(crate) fn recommender_from(store: &ArtifactStore, manifest: &Manifest) -> Result<Recommender> {
    for stage in [Stage::ActivityProximity, Stage::IoProject, Stage::Ingest] {
        require(manifest, "recommend", stage)?;
    }
    let registry = registry_from(store, manifest)?;
    let relations = SupplierRelationTable::from_json(&store.read_verified_string(manifest, "relations.json")?)?;
    let vectors = ActivityVectorSet::read_csv(store.read_verified(manifest, "activity_vectors.csv")?.as_slice())?;
    Ok(Recommender::new(registry, relations, vectors))
}

/// Artifacts verified against the manifest and ready to query.
pub struct LoadedArtifacts {
    pub recommender: Recommender,
    pub manifest: Manifest,
    /// Present once the `graph` stage has run.
    pub graph: Option<SynergyGraph>,
}

impl LoadedArtifacts {
    pub fn load(data_dir: impl Into<PathBuf>) -> Result<Self> {
        let store = ArtifactStore::new(data_dir);
        let manifest = store.manifest()?;
        let recommender = recommender_from(&store, &manifest)?;
        let graph = if manifest.stages.contains_key(Stage::Graph.name()) {
            Some(SynergyGraph::from_json(
                &store.read_verified_string(&manifest, "graph.json")?,
            )?)
        } else {
            None
        };
        Ok(LoadedArtifacts {
            recommender,
            manifest,
            graph,
        })
    }

    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.manifest.artifact_hashes()
    }

    pub fn graph(&self) -> Result<&SynergyGraph> {
        self.graph.as_ref().ok_or_else(|| PipelineError::MissingUpstream {
            stage: "export-graph".into(),
            requires: Stage::Graph.name().into(),
        })
    }

    /// The JSON document both the CLI and the HTTP service emit for a
    /// facility's recommendations.
    pub fn recommendation_json(&self, facility_id: &str, config: &RecommendConfig) -> Result<String> {
        Ok(self.recommender.recommend(facility_id, config)?.to_json())
    }

    /// The built graph restricted to buyers in `territory` and to edges of
    /// `kind`. An unknown territory yields an empty graph.
    pub fn graph_view(&self, territory: Option<&str>, kind: Option<EdgeKind>) -> Result<SynergyGraph> {
        let full = self.graph()?;
        let mut g = match territory {
            Some(t) => {
                let buyers: BTreeSet<String> = self
                    .recommender
                    .registry()
                    .iter()
                    .filter(|f| f.territory == t)
                    .map(|f| f.id.clone())
                    .collect();
                full.restricted_to_buyers(&buyers)
            }
            None => full.clone(),
        };
        if let Some(kind) = kind {
            g = g.with_kind(kind);
        }
        Ok(g)
    }
}
