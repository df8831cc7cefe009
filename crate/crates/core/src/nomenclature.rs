//! Correspondence tables between classification systems and the weighted
//! many-to-many mappings derived from them.
//!
//! Three mapping constructions live here:
//!
//! * [`build_weighted_chain`] turns a BEA→NAICS and a NAICS→NACE
//!   correspondence into a weighted BEA→NACE mapping. Each NAICS branch of a
//!   BEA code receives `1 / n_naics` of the mass, and within a branch each NACE
//!   code receives `o_k / n_nace`, where `o_k` counts the occurrences of that
//!   NACE code among the detailed rows of the branch.
//! * [`compose_mappings`] chains two weighted mappings (A→B, B→C) by matrix
//!   product, renormalizing whatever mass survives unmapped intermediates.
//! * [`product_weights`] weights the products of an activity by their share of
//!   a country's exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;

use crate::complexity::ExportMatrix;
use crate::error::{Error, Result};

/// Tolerance on per-source weight sums.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Classification systems the engine knows how to name.
pub const KNOWN_SYSTEMS: &[&str] = &["BEA", "NAICS", "NACE2", "CPA21", "HS1992", "HS2017"];

/// Strips all whitespace and uppercases letters. Leading zeros are kept.
pub fn normalize_code(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect()
}

fn check_system(name: &str) -> Result<String> {
    let name = normalize_code(name);
    if KNOWN_SYSTEMS.contains(&name.as_str()) {
        Ok(name)
    } else {
        Err(Error::Config(format!(
            "unknown classification system {name:?} (expected one of {})",
            KNOWN_SYSTEMS.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSystem {
    pub name: String,
    pub codes: BTreeSet<String>,
}

impl CodeSystem {
    pub fn new<I, S>(name: &str, codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let name = check_system(name)?;
        let mut set = BTreeSet::new();
        for code in codes {
            let code = normalize_code(code.as_ref());
            if code.is_empty() {
                return Err(Error::Domain(format!("empty code in system {name}")));
            }
            set.insert(code);
        }
        Ok(CodeSystem { name, codes: set })
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.contains(code)
    }
}

/// Correspondence rows as tabulated, one entry per occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCorrespondence {
    pub source_system: String,
    pub target_system: String,
    pub pairs: Vec<(String, String)>,
}

impl RawCorrespondence {
    pub fn new(source_system: &str, target_system: &str, pairs: Vec<(String, String)>) -> Result<Self> {
        let pairs = pairs
            .into_iter()
            .map(|(s, t)| (normalize_code(&s), normalize_code(&t)))
            .collect::<Vec<_>>();
        if pairs.iter().any(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Domain("correspondence pair with an empty code".into()));
        }
        Ok(RawCorrespondence {
            source_system: check_system(source_system)?,
            target_system: check_system(target_system)?,
            pairs,
        })
    }

    pub fn source_codes(&self) -> CodeSystem {
        CodeSystem {
            name: self.source_system.clone(),
            codes: self.pairs.iter().map(|(s, _)| s.clone()).collect(),
        }
    }

    pub fn target_codes(&self) -> CodeSystem {
        CodeSystem {
            name: self.target_system.clone(),
            codes: self.pairs.iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    /// Occurrence counts grouped by source, targets in code order.
    fn occurrences(&self) -> BTreeMap<&str, BTreeMap<&str, usize>> {
        let mut out: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
        for (s, t) in &self.pairs {
            *out.entry(s.as_str()).or_default().entry(t.as_str()).or_default() += 1;
        }
        out
    }
}

/// Parses a headered `source,target` correspondence CSV.
pub fn parse_correspondence<R: Read>(stream: R, source_system: &str, target_system: &str) -> Result<RawCorrespondence> {
    let source_system = check_system(source_system)?;
    let target_system = check_system(target_system)?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(stream);

    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "source" || &headers[1] != "target" {
        return Err(Error::parse(
            1,
            format!(
                "expected header `source,target`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::parse(
                line,
                format!("expected 2 columns, found {}", record.len()),
            ));
        }
        let source = normalize_code(&record[0]);
        let target = normalize_code(&record[1]);
        if source.is_empty() || target.is_empty() {
            return Err(Error::parse(line, "empty code"));
        }
        pairs.push((source, target));
    }

    Ok(RawCorrespondence {
        source_system,
        target_system,
        pairs,
    })
}

/// Many-to-many concordance with per-source weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMapping {
    pub source_system: String,
    pub target_system: String,
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl WeightedMapping {
    /// Builds a mapping from raw (possibly unnormalized) weights. Non-positive
    /// weights are dropped and each source is rescaled to sum to one; sources
    /// left with no positive weight are omitted.
    pub fn from_weights(
        source_system: &str,
        target_system: &str,
        weights: BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Result<Self> {
        let source_system = check_system(source_system)?;
        let target_system = check_system(target_system)?;
        let mut entries = BTreeMap::new();
        let mut merged: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (source, targets) in weights {
            let row = merged.entry(normalize_code(&source)).or_default();
            for (target, w) in targets {
                *row.entry(normalize_code(&target)).or_default() += w;
            }
        }
        for (source, targets) in merged {
            let mut kept: Vec<(String, f64)> = targets.into_iter().filter(|(_, w)| *w > 0.0 || w.is_nan()).collect();
            for (_, w) in &kept {
                if !w.is_finite() {
                    return Err(Error::Domain(format!("non-finite weight for source {source}")));
                }
            }
            let total: f64 = kept.iter().map(|(_, w)| w).sum();
            if kept.is_empty() || total <= 0.0 {
                continue;
            }
            for (_, w) in &mut kept {
                *w /= total;
            }
            entries.insert(source, kept);
        }
        Ok(WeightedMapping {
            source_system,
            target_system,
            entries,
        })
    }

    /// Every code maps to itself with weight one.
    pub fn identity<I, S>(system: &str, codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let system = check_system(system)?;
        let entries = codes
            .into_iter()
            .map(|c| {
                let c = normalize_code(c.as_ref());
                (c.clone(), vec![(c, 1.0)])
            })
            .collect();
        Ok(WeightedMapping {
            source_system: system.clone(),
            target_system: system,
            entries,
        })
    }

    /// Single-hop mapping where each target receives its occurrence share
    /// `o_k / n` of the source.
    pub fn from_occurrences(raw: &RawCorrespondence) -> Self {
        let entries = raw
            .occurrences()
            .into_iter()
            .map(|(source, targets)| {
                let n: usize = targets.values().sum();
                let list = targets
                    .into_iter()
                    .map(|(t, o)| (t.to_string(), o as f64 / n as f64))
                    .collect();
                (source.to_string(), list)
            })
            .collect();
        WeightedMapping {
            source_system: raw.source_system.clone(),
            target_system: raw.target_system.clone(),
            entries,
        }
    }

    pub fn targets(&self, source: &str) -> Option<&[(String, f64)]> {
        self.entries.get(source).map(Vec::as_slice)
    }

    pub fn weight(&self, source: &str, target: &str) -> f64 {
        self.targets(source)
            .and_then(|ts| ts.iter().find(|(t, _)| t == target))
            .map_or(0.0, |(_, w)| *w)
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.entries.iter().map(|(s, ts)| (s.as_str(), ts.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All distinct target codes, sorted.
    pub fn target_set(&self) -> BTreeSet<&str> {
        self.entries
            .values()
            .flat_map(|ts| ts.iter().map(|(t, _)| t.as_str()))
            .collect()
    }

    /// Largest deviation of a per-source weight sum from one.
    pub fn max_sum_deviation(&self) -> f64 {
        self.entries
            .values()
            .map(|ts| (ts.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `source,target,weight` with nine decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "target", "weight"])?;
        for (source, targets) in &self.entries {
            for (target, weight) in targets {
                w.write_record([source.as_str(), target.as_str(), &format!("{weight:.9}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(stream: R, source_system: &str, target_system: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(stream);
        let mut weights: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(Error::parse(
                    line,
                    format!("expected 3 columns, found {}", record.len()),
                ));
            }
            let weight: f64 = record[2]
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid weight {:?}", &record[2])))?;
            weights
                .entry(normalize_code(&record[0]))
                .or_default()
                .insert(normalize_code(&record[1]), weight);
        }
        Self::from_weights(source_system, target_system, weights)
    }
}

/// A source code that could not be (fully) carried through a mapping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnmappedEntry {
    pub source: String,
    pub reason: String,
}

pub fn write_unmapped_csv<W: Write>(entries: &[UnmappedEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "reason"])?;
    for e in entries {
        w.write_record([&e.source, &e.reason])?;
    }
    w.flush()?;
    Ok(())
}

/// Structural shape of a BEA code's chain through NAICS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainCase {
    /// One NAICS code, which itself maps to one NACE occurrence.
    Unique,
    /// Exactly one of the two hops fans out.
    SingleFanOut,
    /// Both hops fan out.
    DoubleFanOut,
}

impl fmt::Display for ChainCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ChainCase::Unique => "unique",
            ChainCase::SingleFanOut => "single_fan_out",
            ChainCase::DoubleFanOut => "double_fan_out",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub mapping: WeightedMapping,
    pub cases: BTreeMap<String, ChainCase>,
    pub unmapped: Vec<UnmappedEntry>,
}

/// Weighted BEA→NACE conversion through NAICS.
///
/// For a BEA code linked to `n_naics` distinct NAICS codes, NAICS branch `x`
/// with `n_nace(x)` detailed NACE occurrences contributes
/// `(1 / n_naics) * (1 / n_nace(x)) * o_k(x)` to NACE code `k`. Branches with
/// no NACE target lose their share; survivors are renormalized and the loss is
/// reported.
pub fn build_weighted_chain(
    bea_to_naics: &RawCorrespondence,
    naics_to_nace: &RawCorrespondence,
) -> Result<ChainOutcome> {
    if bea_to_naics.target_system != naics_to_nace.source_system {
        return Err(Error::Config(format!(
            "cannot chain {}→{} with {}→{}",
            bea_to_naics.source_system,
            bea_to_naics.target_system,
            naics_to_nace.source_system,
            naics_to_nace.target_system
        )));
    }

    let first_hop: BTreeMap<&str, BTreeSet<&str>> =
        bea_to_naics.pairs.iter().fold(BTreeMap::new(), |mut acc, (b, x)| {
            acc.entry(b.as_str()).or_default().insert(x.as_str());
            acc
        });
    let second_hop = naics_to_nace.occurrences();

    let mut weights = BTreeMap::new();
    let mut cases = BTreeMap::new();
    let mut unmapped = Vec::new();

    for (bea, naics_codes) in first_hop {
        let n_naics = naics_codes.len() as f64;
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        let mut dead_branches = Vec::new();
        let mut second_fans_out = false;

        for naics in &naics_codes {
            let Some(nace_occurrences) = second_hop.get(naics) else {
                dead_branches.push(*naics);
                continue;
            };
            let n_nace: usize = nace_occurrences.values().sum();
            second_fans_out |= n_nace > 1;
            for (nace, occurrences) in nace_occurrences {
                *acc.entry(nace.to_string()).or_default() +=
                    (1.0 / n_naics) * (1.0 / n_nace as f64) * *occurrences as f64;
            }
        }

        if acc.is_empty() {
            unmapped.push(UnmappedEntry {
                source: bea.to_string(),
                reason: format!("no {} code reachable", naics_to_nace.target_system),
            });
            continue;
        }
        if !dead_branches.is_empty() {
            let lost = dead_branches.len() as f64 / n_naics;
            unmapped.push(UnmappedEntry {
                source: bea.to_string(),
                reason: format!(
                    "partial: {} {} without {} target, lost weight {lost:.9}",
                    dead_branches.len(),
                    naics_to_nace.source_system,
                    naics_to_nace.target_system
                ),
            });
        }

        let first_fans_out = naics_codes.len() > 1;
        let case = match (first_fans_out, second_fans_out) {
            (false, false) => ChainCase::Unique,
            (true, true) => ChainCase::DoubleFanOut,
            _ => ChainCase::SingleFanOut,
        };
        cases.insert(bea.to_string(), case);
        weights.insert(bea.to_string(), acc);
    }

    let mapping = WeightedMapping::from_weights(&bea_to_naics.source_system, &naics_to_nace.target_system, weights)?;
    Ok(ChainOutcome {
        mapping,
        cases,
        unmapped,
    })
}

#[derive(Debug, Clone)]
pub struct Composition {
    pub mapping: WeightedMapping,
    pub unmapped: Vec<UnmappedEntry>,
    /// Weight mass per source that passed through unmapped intermediates.
    pub lost_mass: BTreeMap<String, f64>,
}

/// Chains `A→B` with `B→C`: `w(a→c) = Σ_b w(a→b)·w(b→c)`.
pub fn compose_mappings(first: &WeightedMapping, second: &WeightedMapping) -> Result<Composition> {
    if first.target_system != second.source_system {
        return Err(Error::Config(format!(
            "cannot compose {}→{} with {}→{}",
            first.source_system, first.target_system, second.source_system, second.target_system
        )));
    }

    let mut weights = BTreeMap::new();
    let mut unmapped = Vec::new();
    let mut lost_mass = BTreeMap::new();

    for (a, mids) in first.iter() {
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        let mut lost = 0.0;
        for (b, w_ab) in mids {
            match second.targets(b) {
                Some(targets) => {
                    for (c, w_bc) in targets {
                        *acc.entry(c.clone()).or_default() += w_ab * w_bc;
                    }
                }
                None => lost += w_ab,
            }
        }
        if acc.is_empty() {
            unmapped.push(UnmappedEntry {
                source: a.to_string(),
                reason: format!("no {} code reachable via {}", second.target_system, first.target_system),
            });
            lost_mass.insert(a.to_string(), lost);
            continue;
        }
        if lost > 0.0 {
            unmapped.push(UnmappedEntry {
                source: a.to_string(),
                reason: format!(
                    "partial: lost weight {lost:.9} via unmapped {} codes",
                    first.target_system
                ),
            });
            lost_mass.insert(a.to_string(), lost);
        }
        weights.insert(a.to_string(), acc);
    }

    Ok(Composition {
        mapping: WeightedMapping::from_weights(&first.source_system, &second.target_system, weights)?,
        unmapped,
        lost_mass,
    })
}

/// Per-activity product shares λ for one country.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductWeightTable {
    pub country: String,
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl ProductWeightTable {
    pub fn new(country: &str, entries: BTreeMap<String, Vec<(String, f64)>>) -> Result<Self> {
        for (activity, products) in &entries {
            let sum: f64 = products.iter().map(|(_, l)| l).sum();
            if products.iter().any(|(_, l)| !(*l >= 0.0)) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::Domain(format!(
                    "product weights of activity {activity} must be non-negative and sum to 1 (sum {sum})"
                )));
            }
        }
        Ok(ProductWeightTable {
            country: normalize_code(country),
            entries,
        })
    }

    pub fn products(&self, activity: &str) -> Option<&[(String, f64)]> {
        self.entries.get(activity).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.entries.iter().map(|(a, ps)| (a.as_str(), ps.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `activity,product,lambda`, nine decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["activity", "product", "lambda"])?;
        for (activity, products) in &self.entries {
            for (product, lambda) in products {
                w.write_record([activity.as_str(), product.as_str(), &format!("{lambda:.9}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). Values printed
    /// at nine decimals are renormalized per activity on the way in.
    pub fn read_csv<R: Read>(stream: R, country: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(stream);
        let mut raw: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(Error::parse(
                    line,
                    format!("expected 3 columns, found {}", record.len()),
                ));
            }
            let lambda: f64 = record[2]
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid lambda {:?}", &record[2])))?;
            raw.entry(normalize_code(&record[0]))
                .or_default()
                .push((normalize_code(&record[1]), lambda));
        }
        for products in raw.values_mut() {
            let sum: f64 = products.iter().map(|(_, l)| l).sum();
            if sum > 0.0 {
                for (_, l) in products.iter_mut() {
                    *l /= sum;
                }
            }
        }
        Self::new(country, raw)
    }
}

#[derive(Debug, Clone)]
pub struct ProductWeightOutcome {
    pub table: ProductWeightTable,
    /// Activities that fell back to uniform weights.
    pub uniform_fallback: Vec<String>,
}

/// Export-share weights `λ = X_cp / Σ_{p∈a} X_cp` of each activity's products.
///
/// Only membership in `activity_to_products` matters; its weights are
/// ignored. Products missing from the export matrix count as zero exports.
/// When every product of an activity has zero exports the activity falls back
/// to uniform weights.
pub fn product_weights(
    exports: &ExportMatrix,
    activity_to_products: &WeightedMapping,
    country: &str,
) -> Result<ProductWeightOutcome> {
    let country = normalize_code(country);
    if exports.country_index(&country).is_none() {
        return Err(Error::Lookup(format!("country {country} not present in export matrix")));
    }

    let mut entries = BTreeMap::new();
    let mut uniform_fallback = Vec::new();
    for (activity, products) in activity_to_products.iter() {
        let values: Vec<f64> = products.iter().map(|(p, _)| exports.get(&country, p)).collect();
        let total: f64 = values.iter().sum();
        let lambdas: Vec<(String, f64)> = if total > 0.0 {
            products
                .iter()
                .zip(&values)
                .map(|((p, _), x)| (p.clone(), x / total))
                .collect()
        } else {
            log::warn!(
                "activity {activity}: no exports of its {} product(s) in {country}, using uniform weights",
                products.len()
            );
            uniform_fallback.push(activity.to_string());
            let n = products.len() as f64;
            products.iter().map(|(p, _)| (p.clone(), 1.0 / n)).collect()
        };
        entries.insert(activity.to_string(), lambdas);
    }

    Ok(ProductWeightOutcome {
        table: ProductWeightTable::new(&country, entries)?,
        uniform_fallback,
    })
}
