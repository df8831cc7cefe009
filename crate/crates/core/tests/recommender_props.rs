mod support {
    pub mod oracle;
}

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use support::oracle;
use synergies_core::embedding::ActivityVectorSet;
use synergies_core::facilities::{Coordinates, Facility, GeocodeQuality, Registry};
use synergies_core::ioanalysis::{SupplierLink, SupplierRelationTable};
use synergies_core::recommender::{EdgeKind, Locality, RecommendConfig, RecommendationSet, Recommender};

const ACTIVITIES: [&str; 6] = ["15.20", "22.29", "24.10", "25.94", "28.14", "29.32"];
const TERRITORIES: [&str; 3] = ["38", "73", "74"];

#[derive(Debug, Clone)]
struct Fixture {
    registry: Registry,
    relations: SupplierRelationTable,
    vectors: ActivityVectorSet,
}

fn fixture() -> impl Strategy<Value = Fixture> {
    let facility = (
        0usize..ACTIVITIES.len(),
        0usize..TERRITORIES.len(),
        prop::option::weighted(0.85, (45.0f64..46.5, 5.0f64..7.0)),
    );
    let relations = prop::collection::btree_map(
        0usize..ACTIVITIES.len(),
        prop::collection::btree_map(0usize..ACTIVITIES.len(), 0.01f64..0.5, 0..4),
        0..ACTIVITIES.len(),
    );
    let vectors = prop::collection::vec(
        prop::option::weighted(0.9, prop::collection::vec(-1.0f64..1.0, 3)),
        ACTIVITIES.len(),
    );
    (prop::collection::vec(facility, 1..40), relations, vectors).prop_filter_map(
        "needs a vector",
        |(facilities, relations, vectors)| {
            let mut registry = Registry::default();
            for (i, (a, t, at)) in facilities.into_iter().enumerate() {
                let coordinates = at.map(|(lat, lon)| Coordinates::new(lat, lon).unwrap());
                registry
                    .insert(Facility {
                        id: format!("F{i:02}"),
                        activity_code: ACTIVITIES[a].into(),
                        address: String::new(),
                        territory: TERRITORIES[t].into(),
                        geocode_quality: if coordinates.is_some() {
                            GeocodeQuality::Exact
                        } else {
                            GeocodeQuality::Failed
                        },
                        coordinates,
                    })
                    .unwrap();
            }
            let relations = SupplierRelationTable::from_entries(
                relations
                    .into_iter()
                    .map(|(buyer, links)| {
                        let mut links: Vec<SupplierLink> = links
                            .into_iter()
                            .map(|(s, intensity)| SupplierLink {
                                supplier: ACTIVITIES[s].into(),
                                intensity,
                            })
                            .collect();
                        links.sort_by(|a, b| b.intensity.total_cmp(&a.intensity).then(a.supplier.cmp(&b.supplier)));
                        (ACTIVITIES[buyer].to_string(), links)
                    })
                    .collect(),
            );
            let vectors: BTreeMap<String, Vec<f64>> = vectors
                .into_iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    v.filter(|v| v.iter().any(|x| x.abs() > 1e-3))
                        .map(|v| (ACTIVITIES[i].to_string(), v))
                })
                .collect();
            if vectors.is_empty() {
                return None;
            }
            Some(Fixture {
                registry,
                relations,
                vectors: ActivityVectorSet::new(3, vectors).unwrap(),
            })
        },
    )
}

fn config() -> impl Strategy<Value = RecommendConfig> {
    (
        0.0f64..150.0,
        1.0f64..3.0,
        0usize..6,
        prop_oneof![
            Just(Locality::Radius),
            Just(Locality::Territory),
            Just(Locality::RadiusAndTerritory)
        ],
    )
        .prop_map(|(radius_km, max_score, k_per_activity, locality)| RecommendConfig {
            radius_km,
            max_score,
            k_per_activity,
            locality,
        })
}

fn recommender(f: &Fixture) -> Recommender {
    Recommender::new(f.registry.clone(), f.relations.clone(), f.vectors.clone())
}

fn all_ids(set: &RecommendationSet) -> BTreeSet<String> {
    set.direct
        .iter()
        .map(|d| d.facility_id.clone())
        .chain(set.alternative.iter().map(|a| a.facility_id.clone()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_nested_loop_oracle(f in fixture(), c in config()) {
        let r = recommender(&f);
        for buyer in f.registry.iter() {
            let got = r.recommend(&buyer.id, &c).unwrap();
            let expected = oracle::recommend(&f.registry, &f.relations, &f.vectors, &buyer.id, &c);
            prop_assert_eq!(got.to_json(), expected.to_json());
        }
    }

    #[test]
    fn lists_are_disjoint_and_exclude_buyer(f in fixture(), c in config()) {
        let r = recommender(&f);
        for buyer in f.registry.iter() {
            let set = r.recommend(&buyer.id, &c).unwrap();
            let ids = all_ids(&set);
            prop_assert_eq!(ids.len(), set.direct.len() + set.alternative.len());
            prop_assert!(!ids.contains(&buyer.id));
        }
    }

    #[test]
    fn growing_radius_keeps_recommendations(f in fixture(), c in config(), extra in 0.0f64..100.0) {
        let r = recommender(&f);
        let wider = RecommendConfig { radius_km: c.radius_km + extra, ..c };
        for buyer in f.registry.iter() {
            let small = r.recommend(&buyer.id, &c).unwrap();
            let large = r.recommend(&buyer.id, &wider).unwrap();
            prop_assert!(all_ids(&small).is_subset(&all_ids(&large)));
        }
    }

    #[test]
    fn growing_max_score_keeps_alternatives(f in fixture(), c in config(), extra in 0.0f64..2.0) {
        let r = recommender(&f);
        let looser = RecommendConfig { max_score: c.max_score + extra, ..c };
        for buyer in f.registry.iter() {
            let strict: BTreeSet<String> =
                r.recommend(&buyer.id, &c).unwrap().alternative.into_iter().map(|a| a.facility_id).collect();
            let loose: BTreeSet<String> =
                r.recommend(&buyer.id, &looser).unwrap().alternative.into_iter().map(|a| a.facility_id).collect();
            prop_assert!(strict.is_subset(&loose), "{:?} ⊄ {:?}", strict, loose);
        }
    }

    #[test]
    fn graph_is_union_of_recommendations(f in fixture(), c in config(), t in prop::option::of(0usize..3)) {
        let r = recommender(&f);
        let territory = t.map(|i| TERRITORIES[i]);
        let g = r.build_synergy_graph(territory, &c).unwrap();

        let mut expected = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        for buyer in f.registry.iter().filter(|b| territory.is_none_or(|t| b.territory == t)) {
            nodes.insert(buyer.id.clone());
            let set = r.recommend(&buyer.id, &c).unwrap();
            for d in set.direct {
                nodes.insert(d.facility_id.clone());
                expected.insert((buyer.id.clone(), d.facility_id, EdgeKind::Direct));
            }
            for a in set.alternative {
                nodes.insert(a.facility_id.clone());
                expected.insert((buyer.id.clone(), a.facility_id, EdgeKind::Alternative));
            }
        }
        let edges: Vec<_> = g.edges.iter().map(|e| (e.source.clone(), e.target.clone(), e.kind)).collect();
        prop_assert_eq!(edges.len(), expected.len());
        prop_assert_eq!(edges.into_iter().collect::<BTreeSet<_>>(), expected);
        let node_ids: Vec<String> = g.nodes.iter().map(|n| n.id.clone()).collect();
        prop_assert_eq!(node_ids, nodes.into_iter().collect::<Vec<_>>());
        prop_assert!(g.nodes.len() <= f.registry.len());
        for e in &g.edges {
            prop_assert!(e.source != e.target);
            prop_assert_eq!(e.score.is_some(), e.kind == EdgeKind::Alternative);
        }
        prop_assert_eq!(r.build_synergy_graph(territory, &c).unwrap(), g);
    }
}
