//! Facility registry, geocoding and spatial lookup.

mod geocode;
mod spatial;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use geocode::{
    geocode, geocode_registry, normalize_address, simplification_steps, GeocodeCache, GeocodeOutcome, GeocodeSummary,
    Geocoder, GeocoderError, HttpGeocoder, RetryPolicy, DEFAULT_GEOCODE_CONCURRENCY,
};
pub use spatial::{haversine_km, SpatialIndex, EARTH_RADIUS_KM};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    pub lat: f64,
    pub lon: f64,
}

impl Coordinates {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Domain(format!("coordinates ({lat}, {lon}) out of range")));
        }
        Ok(Coordinates { lat, lon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeocodeQuality {
    Exact,
    Simplified,
    Failed,
}

impl fmt::Display for GeocodeQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeocodeQuality::Exact => "exact",
            GeocodeQuality::Simplified => "simplified",
            GeocodeQuality::Failed => "failed",
        })
    }
}

impl FromStr for GeocodeQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(GeocodeQuality::Exact),
            "simplified" => Ok(GeocodeQuality::Simplified),
            "failed" => Ok(GeocodeQuality::Failed),
            other => Err(Error::Domain(format!("unknown geocode quality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Facility {
    pub id: String,
    pub activity_code: String,
    pub address: String,
    pub territory: String,
    pub coordinates: Option<Coordinates>,
    pub geocode_quality: GeocodeQuality,
}

impl Facility {
    pub fn is_located(&self) -> bool {
        self.coordinates.is_some()
    }
}

fn activity_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d{2})(?:\.?(\d{1,2}))?([A-Z])?$").unwrap())
}

/// Normalizes a NACE or NAF activity code to the dotted NACE form: "3230Z",
/// "32.30Z" and "32.30" all become "32.30". Returns `None` for anything else.
pub fn normalize_activity_code(raw: &str) -> Option<String> {
    let code: String = raw
        .chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect();
    let caps = activity_pattern().captures(&code)?;
    Some(match caps.get(2) {
        Some(rest) => format!("{}.{}", &caps[1], rest.as_str()),
        None => caps[1].to_string(),
    })
}

/// Facilities keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    facilities: BTreeMap<String, Facility>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestIssue {
    pub line: u64,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingest {
    pub registry: Registry,
    pub report: Vec<IngestIssue>,
}

const FACILITY_HEADER: [&str; 6] = ["id", "activity_code", "address", "territory", "lat", "lon"];

impl Registry {
    pub fn get(&self, id: &str) -> Option<&Facility> {
        self.facilities.get(id)
    }

    /// Facilities in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Facility> {
        self.facilities.values()
    }

    pub fn len(&self) -> usize {
        self.facilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facilities.is_empty()
    }

    pub fn insert(&mut self, facility: Facility) -> Result<()> {
        if facility.coordinates.is_some() == (facility.geocode_quality == GeocodeQuality::Failed) {
            return Err(Error::Domain(format!(
                "facility {}: coordinates must be present iff geocoding succeeded",
                facility.id
            )));
        }
        if self.facilities.contains_key(&facility.id) {
            return Err(Error::Domain(format!("duplicate facility id {}", facility.id)));
        }
        self.facilities.insert(facility.id.clone(), facility);
        Ok(())
    }

    pub(crate) fn facilities_mut(&mut self) -> impl Iterator<Item = &mut Facility> {
        self.facilities.values_mut()
    }

    /// Writes the registry with its geocode outcome:
    /// `id,activity_code,address,territory,lat,lon,geocode_quality`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = FACILITY_HEADER.to_vec();
        header.push("geocode_quality");
        w.write_record(&header)?;
        for f in self.iter() {
            let (lat, lon) = f.coordinates.map_or((String::new(), String::new()), |c| {
                (c.lat.to_string(), c.lon.to_string())
            });
            w.write_record([
                f.id.as_str(),
                f.activity_code.as_str(),
                f.address.as_str(),
                f.territory.as_str(),
                &lat,
                &lon,
                &f.geocode_quality.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a registry written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(stream: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(stream);
        let mut registry = Registry::default();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 7 {
                return Err(Error::parse(
                    line,
                    format!("expected 7 columns, found {}", record.len()),
                ));
            }
            let coordinates = parse_coordinates(&record[4], &record[5]).map_err(|e| Error::parse(line, e))?;
            let facility = Facility {
                id: record[0].to_string(),
                activity_code: record[1].to_string(),
                address: record[2].to_string(),
                territory: record[3].to_string(),
                coordinates,
                geocode_quality: record[6]
                    .parse()
                    .map_err(|e: Error| Error::parse(line, e.to_string()))?,
            };
            registry
                .insert(facility)
                .map_err(|e| Error::parse(line, e.to_string()))?;
        }
        Ok(registry)
    }
}

fn parse_coordinates(lat: &str, lon: &str) -> std::result::Result<Option<Coordinates>, String> {
    match (lat.is_empty(), lon.is_empty()) {
        (true, true) => Ok(None),
        (false, false) => {
            let lat: f64 = lat.parse().map_err(|_| format!("invalid latitude {lat:?}"))?;
            let lon: f64 = lon.parse().map_err(|_| format!("invalid longitude {lon:?}"))?;
            Coordinates::new(lat, lon).map(Some).map_err(|e| e.to_string())
        }
        _ => Err("latitude and longitude must both be filled or both blank".into()),
    }
}

/// Reads the facility CSV (`id,activity_code,address,territory,lat,lon`).
///
/// Rows with coordinates are marked exact; rows without stay unlocated
/// (`failed`) until geocoded. Bad rows are skipped and reported.
pub fn ingest_facilities<R: Read>(stream: R) -> Result<Ingest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(stream);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != FACILITY_HEADER {
        return Err(Error::parse(
            1,
            format!("expected header `{}`", FACILITY_HEADER.join(",")),
        ));
    }

    let mut registry = Registry::default();
    let mut report = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(0).unwrap_or_default().to_string();
        let mut issue = |reason: String| {
            report.push(IngestIssue {
                line,
                id: id.clone(),
                reason,
            })
        };
        if record.len() != FACILITY_HEADER.len() {
            issue(format!(
                "expected {} columns, found {}",
                FACILITY_HEADER.len(),
                record.len()
            ));
            continue;
        }
        if id.is_empty() {
            issue("missing id".into());
            continue;
        }
        let Some(activity_code) = normalize_activity_code(&record[1]) else {
            issue(format!("invalid activity code {:?}", &record[1]));
            continue;
        };
        let coordinates = match parse_coordinates(&record[4], &record[5]) {
            Ok(c) => c,
            Err(e) => {
                issue(e);
                continue;
            }
        };
        if registry.get(&id).is_some() {
            issue("duplicate id".into());
            continue;
        }
        let facility = Facility {
            id: id.clone(),
            activity_code,
            address: record[2].to_string(),
            territory: record[3].to_string(),
            geocode_quality: if coordinates.is_some() {
                GeocodeQuality::Exact
            } else {
                GeocodeQuality::Failed
            },
            coordinates,
        };
        registry.insert(facility)?;
    }
    Ok(Ingest { registry, report })
}
