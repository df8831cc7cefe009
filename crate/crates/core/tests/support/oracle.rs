//! Nested-loop reference recommender: joins relations × activity scores ×
//! distance over the full facility list, with no index and no grouping.

use synergies_core::embedding::ActivityVectorSet;
use synergies_core::facilities::{Facility, Registry};
use synergies_core::ioanalysis::SupplierRelationTable;
use synergies_core::recommender::{AlternativeSupplier, DirectSupplier, Locality, RecommendConfig, RecommendationSet};

pub fn haversine(a_lat: f64, a_lon: f64, b_lat: f64, b_lon: f64) -> f64 {
    let p1 = a_lat.to_radians();
    let p2 = b_lat.to_radians();
    let dp = (b_lat - a_lat).to_radians();
    let dl = (b_lon - a_lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0088 * h.sqrt().min(1.0).asin()
}

fn score(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    let cos = dot / (uu * vv).sqrt();
    1.0 / cos.clamp(1e-6, 1.0)
}

fn distance(b: &Facility, f: &Facility) -> Option<f64> {
    match (b.coordinates, f.coordinates) {
        (Some(x), Some(y)) => Some(haversine(x.lat, x.lon, y.lat, y.lon)),
        _ => None,
    }
}

fn is_local(b: &Facility, f: &Facility, config: &RecommendConfig) -> bool {
    if f.id == b.id {
        return false;
    }
    let by_radius = config.locality != Locality::Territory && b.coordinates.is_some();
    if !by_radius {
        return f.territory == b.territory;
    }
    let within = match distance(b, f) {
        Some(d) => d <= config.radius_km,
        None => false,
    };
    within && (config.locality == Locality::Radius || f.territory == b.territory)
}

fn dist_key(d: Option<f64>) -> f64 {
    d.unwrap_or(f64::INFINITY)
}

pub fn recommend(
    registry: &Registry,
    relations: &SupplierRelationTable,
    vectors: &ActivityVectorSet,
    buyer: &str,
    config: &RecommendConfig,
) -> RecommendationSet {
    let b = registry.get(buyer).expect("known buyer");
    let mut direct: Vec<DirectSupplier> = Vec::new();
    let mut alternative: Vec<AlternativeSupplier> = Vec::new();
    let links = relations.suppliers(&b.activity_code).unwrap_or(&[]);

    for link in links {
        for f in registry.iter() {
            if f.activity_code == link.supplier && is_local(b, f, config) {
                direct.push(DirectSupplier {
                    facility_id: f.id.clone(),
                    supplier_activity: link.supplier.clone(),
                    intensity: link.intensity,
                    distance_km: distance(b, f),
                });
            }
        }
    }
    direct.sort_by(|x, y| {
        y.intensity
            .total_cmp(&x.intensity)
            .then(dist_key(x.distance_km).total_cmp(&dist_key(y.distance_km)))
            .then(x.facility_id.cmp(&y.facility_id))
    });

    for link in links {
        let Some(sv) = vectors.vector(&link.supplier) else {
            continue;
        };
        let mut near: Vec<(String, f64)> = Vec::new();
        for (code, v) in vectors.iter() {
            if code != link.supplier {
                let s = score(sv, v);
                if s <= config.max_score {
                    near.push((code.to_string(), s));
                }
            }
        }
        near.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        near.truncate(config.k_per_activity);
        for (code, s) in near {
            for f in registry.iter() {
                if f.activity_code == code && is_local(b, f, config) && !direct.iter().any(|d| d.facility_id == f.id) {
                    alternative.push(AlternativeSupplier {
                        facility_id: f.id.clone(),
                        own_activity: code.clone(),
                        substituted_supplier_activity: link.supplier.clone(),
                        proximity_score: s,
                        intensity: link.intensity,
                        distance_km: distance(b, f),
                    });
                }
            }
        }
    }
    alternative.sort_by(|x, y| {
        x.proximity_score
            .total_cmp(&y.proximity_score)
            .then(y.intensity.total_cmp(&x.intensity))
            .then(dist_key(x.distance_km).total_cmp(&dist_key(y.distance_km)))
            .then(x.facility_id.cmp(&y.facility_id))
            .then(x.substituted_supplier_activity.cmp(&y.substituted_supplier_activity))
    });
    let mut kept: Vec<AlternativeSupplier> = Vec::new();
    for a in alternative {
        if !kept.iter().any(|k| k.facility_id == a.facility_id) {
            kept.push(a);
        }
    }

    RecommendationSet {
        buyer: b.id.clone(),
        direct,
        alternative: kept,
    }
}
