use super::{Coordinates, Registry};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: Coordinates, b: Coordinates) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

// Slack added to the latitude band so the band never rejects a point the
// haversine filter would keep.
const BAND_SLACK_DEG: f64 = 1e-6;

/// Located facilities sorted by latitude. A radius query scans the latitude
/// band that can contain matches and filters it by haversine distance.
#[derive(Debug, Clone, Default)]
pub struct SpatialIndex {
    // (lat, id, coordinates), sorted by lat then id.
    entries: Vec<(f64, String, Coordinates)>,
}

impl SpatialIndex {
    pub fn build(registry: &Registry) -> Self {
        Self::from_points(registry.iter().filter_map(|f| f.coordinates.map(|c| (f.id.clone(), c))))
    }

    pub fn from_points(points: impl IntoIterator<Item = (String, Coordinates)>) -> Self {
        let mut entries: Vec<_> = points.into_iter().map(|(id, c)| (c.lat, id, c)).collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        SpatialIndex { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|(_, e, _)| e == id)
    }

    /// Facilities within `radius_km` of `center` as `(id, distance_km)`,
    /// ascending by distance then id.
    pub fn radius_query(&self, center: Coordinates, radius_km: f64) -> Vec<(String, f64)> {
        if !(radius_km >= 0.0) {
            return Vec::new();
        }
        let band = (radius_km / EARTH_RADIUS_KM).to_degrees() + BAND_SLACK_DEG;
        let lo = center.lat - band;
        let hi = center.lat + band;
        let start = self.entries.partition_point(|e| e.0 < lo);
        let end = self.entries.partition_point(|e| e.0 <= hi);

        let mut hits: Vec<(String, f64)> = self.entries[start..end]
            .iter()
            .filter_map(|(_, id, c)| {
                let d = haversine_km(center, *c);
                (d <= radius_km).then(|| (id.clone(), d))
            })
            .collect();
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        hits
    }
}
