//! Geocoding with progressive address simplification.
//!
//! An address is split into comma-separated groups (whitespace tokens when it
//! has no comma). The full address is tried first; leading groups are then
//! dropped one at a time down to "street, city", the house number is stripped
//! from the street, and finally the city is tried alone. The first hit wins.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Deserialize;

use super::{Coordinates, GeocodeQuality, Registry};
use crate::error::{Error, Result};

pub const DEFAULT_GEOCODE_CONCURRENCY: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum GeocoderError {
    #[error("geocoder transport failure: {0}")]
    Transport(String),
}

/// Resolves a free-form query to coordinates. `Ok(None)` is a miss.
pub trait Geocoder: Send + Sync {
    fn lookup(&self, query: &str) -> std::result::Result<Option<Coordinates>, GeocoderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay: Duration::ZERO,
        }
    }
}

fn has_digit(s: &str) -> bool {
    s.chars().any(|c| c.is_ascii_digit())
}

/// The ordered list of queries tried for an address, full address first.
pub fn simplification_steps(address: &str) -> Vec<String> {
    let address = address.trim();
    let mut steps: Vec<String> = Vec::new();

    if address.contains(',') {
        let parts: Vec<&str> = address.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        let n = parts.len();
        for k in 0..n {
            if n >= 2 && k == n - 1 {
                let street: Vec<&str> = parts[n - 2].split_whitespace().collect();
                let name_start = street.iter().position(|t| !has_digit(t)).unwrap_or(street.len());
                if name_start > 0 && name_start < street.len() {
                    steps.push(format!("{}, {}", street[name_start..].join(" "), parts[n - 1]));
                }
            }
            steps.push(parts[k..].join(", "));
        }
    } else {
        let tokens: Vec<&str> = address.split_whitespace().collect();
        for k in 0..tokens.len() {
            steps.push(tokens[k..].join(" "));
        }
    }

    steps.dedup();
    steps
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeocodeOutcome {
    pub coordinates: Option<Coordinates>,
    pub quality: GeocodeQuality,
}

fn lookup_with_retry(client: &dyn Geocoder, query: &str, retry: &RetryPolicy) -> Option<Coordinates> {
    let mut delay = retry.base_delay;
    for attempt in 1..=retry.attempts.max(1) {
        match client.lookup(query) {
            Ok(hit) => return hit,
            Err(e) => {
                log::debug!("geocode {query:?} attempt {attempt} failed: {e}");
                if attempt < retry.attempts {
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    delay *= 2;
                }
            }
        }
    }
    log::warn!("geocode {query:?}: giving up after {} attempts", retry.attempts);
    None
}

/// Walks the simplification descent until the client resolves a query.
pub fn geocode(address: &str, client: &dyn Geocoder, retry: &RetryPolicy) -> GeocodeOutcome {
    for (i, query) in simplification_steps(address).iter().enumerate() {
        if let Some(c) = lookup_with_retry(client, query, retry) {
            return GeocodeOutcome {
                coordinates: Some(c),
                quality: if i == 0 {
                    GeocodeQuality::Exact
                } else {
                    GeocodeQuality::Simplified
                },
            };
        }
    }
    GeocodeOutcome {
        coordinates: None,
        quality: GeocodeQuality::Failed,
    }
}

/// Cache key: lowercase, single spaces, no space around commas.
pub fn normalize_address(address: &str) -> String {
    address
        .split(',')
        .map(|part| part.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(",")
}

/// On-disk geocode results keyed by normalized address, stored as
/// `normalized_address,lat,lon,quality`.
#[derive(Debug)]
pub struct GeocodeCache {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, GeocodeOutcome>>,
}

impl GeocodeCache {
    /// Opens the cache file, starting empty when it does not exist.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        if path.exists() {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path)?;
            for record in reader.records() {
                let record = record?;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                if record.len() != 4 {
                    return Err(Error::parse(line, "geocode cache rows need 4 columns"));
                }
                let quality: GeocodeQuality = record[3].parse()?;
                let coordinates = if quality == GeocodeQuality::Failed {
                    None
                } else {
                    let lat = record[1].parse().map_err(|_| Error::parse(line, "invalid latitude"))?;
                    let lon = record[2].parse().map_err(|_| Error::parse(line, "invalid longitude"))?;
                    Some(Coordinates::new(lat, lon)?)
                };
                entries.insert(record[0].to_string(), GeocodeOutcome { coordinates, quality });
            }
        }
        Ok(GeocodeCache {
            path,
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, address: &str) -> Option<GeocodeOutcome> {
        self.entries.lock().unwrap().get(&normalize_address(address)).cloned()
    }

    pub fn insert(&self, address: &str, outcome: GeocodeOutcome) {
        self.entries.lock().unwrap().insert(normalize_address(address), outcome);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewrites the cache file.
    pub fn save(&self) -> Result<()> {
        let entries = self.entries.lock().unwrap();
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["normalized_address", "lat", "lon", "quality"])?;
            for (key, outcome) in entries.iter() {
                let (lat, lon) = outcome.coordinates.map_or((String::new(), String::new()), |c| {
                    (c.lat.to_string(), c.lon.to_string())
                });
                w.write_record([key.as_str(), &lat, &lon, &outcome.quality.to_string()])?;
            }
            w.flush()?;
        }
        let tmp = self.path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(tmp, &self.path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeocodeSummary {
    pub attempted: usize,
    pub cache_hits: usize,
    pub exact: usize,
    pub simplified: usize,
    pub failed: usize,
}

/// Geocodes every unlocated facility with up to `concurrency` parallel
/// requests. Results are applied in id order regardless of completion order.
pub fn geocode_registry(
    registry: &mut Registry,
    client: &dyn Geocoder,
    cache: Option<&GeocodeCache>,
    concurrency: usize,
    retry: &RetryPolicy,
) -> GeocodeSummary {
    let pending: Vec<(String, String)> = registry
        .iter()
        .filter(|f| f.coordinates.is_none() && !f.address.trim().is_empty())
        .map(|f| (f.id.clone(), f.address.clone()))
        .collect();

    let next = AtomicUsize::new(0);
    let cache_hits = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<GeocodeOutcome>>> = pending.iter().map(|_| Mutex::new(None)).collect();
    let workers = concurrency.max(1).min(pending.len().max(1));

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, address)) = pending.get(i) else {
                    break;
                };
                let outcome = match cache.and_then(|c| c.get(address)) {
                    Some(hit) => {
                        cache_hits.fetch_add(1, Ordering::Relaxed);
                        hit
                    }
                    None => {
                        let outcome = geocode(address, client, retry);
                        if let Some(c) = cache {
                            c.insert(address, outcome.clone());
                        }
                        outcome
                    }
                };
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let outcomes: BTreeMap<&str, GeocodeOutcome> = pending
        .iter()
        .zip(results)
        .filter_map(|((id, _), r)| r.into_inner().unwrap().map(|o| (id.as_str(), o)))
        .collect();

    let mut summary = GeocodeSummary {
        attempted: pending.len(),
        cache_hits: cache_hits.into_inner(),
        ..Default::default()
    };
    for facility in registry.facilities_mut() {
        let Some(outcome) = outcomes.get(facility.id.as_str()) else {
            continue;
        };
        facility.coordinates = outcome.coordinates;
        facility.geocode_quality = outcome.quality;
        match outcome.quality {
            GeocodeQuality::Exact => summary.exact += 1,
            GeocodeQuality::Simplified => summary.simplified += 1,
            GeocodeQuality::Failed => summary.failed += 1,
        }
    }
    summary
}

#[derive(Deserialize)]
struct FeatureCollection {
    #[serde(default)]
    features: Vec<Feature>,
}

#[derive(Deserialize)]
struct Feature {
    geometry: Geometry,
}

#[derive(Deserialize)]
struct Geometry {
    /// GeoJSON order: longitude, latitude.
    coordinates: Vec<f64>,
}

/// Address-search HTTP adapter: `GET <endpoint>?q=<address>` answering a
/// GeoJSON feature collection ranked by relevance. Only the top feature is
/// used.
pub struct HttpGeocoder {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpGeocoder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpGeocoder {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Geocoder for HttpGeocoder {
    fn lookup(&self, query: &str) -> std::result::Result<Option<Coordinates>, GeocoderError> {
        let mut response = self
            .agent
            .get(&self.endpoint)
            .query("q", query)
            .call()
            .map_err(|e| GeocoderError::Transport(e.to_string()))?;
        let body: FeatureCollection = response
            .body_mut()
            .read_json()
            .map_err(|e| GeocoderError::Transport(e.to_string()))?;
        let Some(top) = body.features.first() else {
            return Ok(None);
        };
        match top.geometry.coordinates.as_slice() {
            [lon, lat, ..] => Coordinates::new(*lat, *lon)
                .map(Some)
                .map_err(|e| GeocoderError::Transport(e.to_string())),
            _ => Err(GeocoderError::Transport("feature without coordinate pair".into())),
        }
    }
}
