//! Local supplier recommendation.
//!
//! Direct suppliers are nearby facilities whose activity supplies the buyer's
//! activity. Alternative suppliers are nearby facilities whose activity is
//! close, in the activity embedding, to one of those supplier activities.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::ActivityVectorSet;
use crate::error::{Error, Result};
use crate::facilities::{haversine_km, Facility, Registry, SpatialIndex};
use crate::ioanalysis::SupplierRelationTable;

pub const DEFAULT_RADIUS_KM: f64 = 100.0;
pub const DEFAULT_MAX_SCORE: f64 = 1.25;
pub const DEFAULT_K_PER_ACTIVITY: usize = 5;

/// Which facilities count as local to a buyer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    /// Within `radius_km` of the buyer. Buyers without coordinates fall back
    /// to their territory.
    #[default]
    Radius,
    /// Same territory code as the buyer.
    Territory,
    /// Both conditions.
    RadiusAndTerritory,
}

impl FromStr for Locality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(Locality::Radius),
            "territory" => Ok(Locality::Territory),
            "radius_and_territory" => Ok(Locality::RadiusAndTerritory),
            other => Err(Error::Config(format!("unknown locality {other:?}"))),
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Locality::Radius => "radius",
            Locality::Territory => "territory",
            Locality::RadiusAndTerritory => "radius_and_territory",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecommendConfig {
    pub radius_km: f64,
    pub max_score: f64,
    pub k_per_activity: usize,
    pub locality: Locality,
}

impl RecommendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_km >= 0.0) {
            return Err(Error::Config(format!(
                "radius_km must be non-negative, got {}",
                self.radius_km
            )));
        }
        if !(self.max_score >= 1.0) {
            return Err(Error::Config(format!(
                "max_score must be at least 1, got {}",
                self.max_score
            )));
        }
        Ok(())
    }
}

impl Default for RecommendConfig {
    fn default() -> Self {
        RecommendConfig {
            radius_km: DEFAULT_RADIUS_KM,
            max_score: DEFAULT_MAX_SCORE,
            k_per_activity: DEFAULT_K_PER_ACTIVITY,
            locality: Locality::Radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectSupplier {
    pub facility_id: String,
    pub supplier_activity: String,
    pub intensity: f64,
    /// `None` when either end has no coordinates.
    pub distance_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternativeSupplier {
    pub facility_id: String,
    pub own_activity: String,
    pub substituted_supplier_activity: String,
    pub proximity_score: f64,
    /// Intensity of the substituted supplier activity.
    pub intensity: f64,
    pub distance_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationSet {
    pub buyer: String,
    pub direct: Vec<DirectSupplier>,
    pub alternative: Vec<AlternativeSupplier>,
}

impl RecommendationSet {
    /// Pretty JSON followed by a newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("recommendations serialize");
        s.push('\n');
        s
    }
}

fn distance_key(d: Option<f64>) -> f64 {
    d.unwrap_or(f64::INFINITY)
}

/// Everything a recommendation needs, with facilities grouped by activity.
#[derive(Debug, Clone)]
pub struct Recommender {
    registry: Registry,
    relations: SupplierRelationTable,
    activities: ActivityVectorSet,
    index: SpatialIndex,
    by_activity: HashMap<String, Vec<String>>,
}

impl Recommender {
    pub fn new(registry: Registry, relations: SupplierRelationTable, activities: ActivityVectorSet) -> Self {
        let index = SpatialIndex::build(&registry);
        let mut by_activity: HashMap<String, Vec<String>> = HashMap::new();
        for f in registry.iter() {
            by_activity
                .entry(f.activity_code.clone())
                .or_default()
                .push(f.id.clone());
        }
        Recommender {
            registry,
            relations,
            activities,
            index,
            by_activity,
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn relations(&self) -> &SupplierRelationTable {
        &self.relations
    }

    pub fn activities(&self) -> &ActivityVectorSet {
        &self.activities
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    /// Local facilities around `buyer` with their distance, buyer excluded.
    fn local_candidates(&self, buyer: &Facility, config: &RecommendConfig) -> HashMap<String, Option<f64>> {
        let same_territory = |f: &Facility| f.territory == buyer.territory;
        let mut out = HashMap::new();
        match (config.locality, buyer.coordinates) {
            (Locality::Radius | Locality::RadiusAndTerritory, Some(center)) => {
                for (id, d) in self.index.radius_query(center, config.radius_km) {
                    if id == buyer.id {
                        continue;
                    }
                    if config.locality == Locality::RadiusAndTerritory && !same_territory(self.facility(&id)) {
                        continue;
                    }
                    out.insert(id, Some(d));
                }
            }
            _ => {
                for f in self.registry.iter() {
                    if f.id != buyer.id && same_territory(f) {
                        let d = buyer.coordinates.zip(f.coordinates).map(|(a, b)| haversine_km(a, b));
                        out.insert(f.id.clone(), d);
                    }
                }
            }
        }
        out
    }

    fn facility(&self, id: &str) -> &Facility {
        self.registry.get(id).expect("indexed facility is registered")
    }

    fn local_with_activity<'a>(
        &'a self,
        activity: &str,
        local: &'a HashMap<String, Option<f64>>,
    ) -> impl Iterator<Item = (&'a str, Option<f64>)> + 'a {
        self.by_activity
            .get(activity)
            .into_iter()
            .flatten()
            .filter_map(move |id| local.get(id).map(|d| (id.as_str(), *d)))
    }

    pub fn recommend(&self, buyer_id: &str, config: &RecommendConfig) -> Result<RecommendationSet> {
        config.validate()?;
        let buyer = self
            .registry
            .get(buyer_id)
            .ok_or_else(|| Error::Lookup(format!("unknown facility {buyer_id}")))?;
        let empty = RecommendationSet {
            buyer: buyer.id.clone(),
            direct: Vec::new(),
            alternative: Vec::new(),
        };
        let Some(links) = self.relations.suppliers(&buyer.activity_code) else {
            log::debug!(
                "activity {} of {} has no supplier relations",
                buyer.activity_code,
                buyer.id
            );
            return Ok(empty);
        };
        let local = self.local_candidates(buyer, config);

        let mut direct = Vec::new();
        for link in links {
            for (id, d) in self.local_with_activity(&link.supplier, &local) {
                direct.push(DirectSupplier {
                    facility_id: id.to_string(),
                    supplier_activity: link.supplier.clone(),
                    intensity: link.intensity,
                    distance_km: d,
                });
            }
        }
        direct.sort_by(|a, b| {
            b.intensity
                .total_cmp(&a.intensity)
                .then_with(|| distance_key(a.distance_km).total_cmp(&distance_key(b.distance_km)))
                .then_with(|| a.facility_id.cmp(&b.facility_id))
        });
        direct.dedup_by(|b, a| a.facility_id == b.facility_id);
        let direct_ids: BTreeSet<&str> = direct.iter().map(|d| d.facility_id.as_str()).collect();

        let mut alternative = Vec::new();
        for link in links {
            if !self.activities.contains(&link.supplier) {
                continue;
            }
            let neighbours =
                self.activities
                    .nearest_activities(&link.supplier, config.k_per_activity, config.max_score)?;
            for (activity, score) in neighbours {
                for (id, d) in self.local_with_activity(&activity, &local) {
                    if direct_ids.contains(id) {
                        continue;
                    }
                    alternative.push(AlternativeSupplier {
                        facility_id: id.to_string(),
                        own_activity: activity.clone(),
                        substituted_supplier_activity: link.supplier.clone(),
                        proximity_score: score,
                        intensity: link.intensity,
                        distance_km: d,
                    });
                }
            }
        }
        alternative.sort_by(compare_alternatives);
        let mut seen = BTreeSet::new();
        alternative.retain(|a| seen.insert(a.facility_id.clone()));

        Ok(RecommendationSet {
            direct,
            alternative,
            ..empty
        })
    }

    /// Recommendations for every facility in `territory` (all facilities when
    /// `None`), merged into one network.
    pub fn build_synergy_graph(&self, territory: Option<&str>, config: &RecommendConfig) -> Result<SynergyGraph> {
        config.validate()?;
        let buyers: Vec<&Facility> = self
            .registry
            .iter()
            .filter(|f| territory.is_none_or(|t| f.territory == t))
            .collect();
        let sets: Vec<RecommendationSet> = buyers
            .par_iter()
            .map(|f| self.recommend(&f.id, config))
            .collect::<Result<_>>()?;

        let mut node_ids: BTreeSet<&str> = buyers.iter().map(|f| f.id.as_str()).collect();
        let mut edges = Vec::new();
        for set in &sets {
            for d in &set.direct {
                node_ids.insert(&d.facility_id);
                edges.push(GraphEdge {
                    source: set.buyer.clone(),
                    target: d.facility_id.clone(),
                    kind: EdgeKind::Direct,
                    weight: d.intensity,
                    score: None,
                });
            }
            for a in &set.alternative {
                node_ids.insert(&a.facility_id);
                edges.push(GraphEdge {
                    source: set.buyer.clone(),
                    target: a.facility_id.clone(),
                    kind: EdgeKind::Alternative,
                    weight: a.intensity,
                    score: Some(a.proximity_score),
                });
            }
        }
        edges.sort_by(|a, b| (&a.source, &a.target, a.kind).cmp(&(&b.source, &b.target, b.kind)));

        let nodes = node_ids
            .into_iter()
            .map(|id| {
                let f = self.facility(id);
                GraphNode {
                    id: f.id.clone(),
                    activity: f.activity_code.clone(),
                    lat: f.coordinates.map(|c| c.lat),
                    lon: f.coordinates.map(|c| c.lon),
                }
            })
            .collect();
        Ok(SynergyGraph { nodes, edges })
    }
}

fn compare_alternatives(a: &AlternativeSupplier, b: &AlternativeSupplier) -> Ordering {
    a.proximity_score
        .total_cmp(&b.proximity_score)
        .then_with(|| b.intensity.total_cmp(&a.intensity))
        .then_with(|| distance_key(a.distance_km).total_cmp(&distance_key(b.distance_km)))
        .then_with(|| a.facility_id.cmp(&b.facility_id))
        .then_with(|| a.substituted_supplier_activity.cmp(&b.substituted_supplier_activity))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Direct,
    Alternative,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Direct => "direct",
            EdgeKind::Alternative => "alternative",
        })
    }
}

impl FromStr for EdgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(EdgeKind::Direct),
            "alternative" => Ok(EdgeKind::Alternative),
            other => Err(Error::Domain(format!("unknown edge kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub activity: String,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
}

/// Points from buyer to supplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: String,
    pub target: String,
    pub kind: EdgeKind,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynergyGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl SynergyGraph {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line() as u64, e.to_string()))
    }

    /// Keeps the nodes and only edges of `kind`.
    pub fn with_kind(&self, kind: EdgeKind) -> SynergyGraph {
        SynergyGraph {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().filter(|e| e.kind == kind).cloned().collect(),
        }
    }

    /// Restricts to buyers in the given node set, keeping referenced suppliers.
    pub fn restricted_to_buyers(&self, buyers: &BTreeSet<String>) -> SynergyGraph {
        let edges: Vec<GraphEdge> = self
            .edges
            .iter()
            .filter(|e| buyers.contains(&e.source))
            .cloned()
            .collect();
        let mut keep: BTreeSet<&str> = buyers.iter().map(String::as_str).collect();
        keep.extend(edges.iter().map(|e| e.target.as_str()));
        SynergyGraph {
            nodes: self
                .nodes
                .iter()
                .filter(|n| keep.contains(n.id.as_str()))
                .cloned()
                .collect(),
            edges,
        }
    }

    /// `source,target,kind,weight,score` with an empty score on direct edges.
    pub fn write_edges_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "target", "kind", "weight", "score"])?;
        for e in &self.edges {
            w.write_record([
                e.source.as_str(),
                &e.target,
                &e.kind.to_string(),
                &e.weight.to_string(),
                &e.score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn node_index(&self) -> BTreeMap<&str, &GraphNode> {
        self.nodes.iter().map(|n| (n.id.as_str(), n)).collect()
    }
}
