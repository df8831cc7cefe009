//! Product-space embedding and activity-level proximity.
//!
//! Products are placed in `R^m` by metric MDS on `δ = 1 − φ`. An activity's
//! vector is the λ-weighted sum of its products' vectors, and two activities
//! are compared by the inverse of their cosine similarity: 1 for parallel
//! vectors, growing as they diverge.

mod smacof;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::Serialize;

pub use smacof::{initial_configuration, raw_stress, smacof, smacof_from, stress, SmacofOptions, SmacofRun};

use crate::complexity::ProductProximityMatrix;
use crate::error::{Error, Result};
use crate::nomenclature::{normalize_code, ProductWeightTable};

/// Default embedding dimension.
pub const DEFAULT_DIMENSION: usize = 8;

/// Lower clamp on cosine similarity in [`activity_proximity`].
pub const COSINE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
}

impl DissimilarityMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let n = labels.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::Domain(
                "dissimilarity matrix must be square over its labels".into(),
            ));
        }
        for i in 0..n {
            if values[(i, i)] != 0.0 {
                return Err(Error::Domain(format!("dissimilarity diagonal ({i},{i}) must be zero")));
            }
            for j in 0..n {
                let v = values[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Domain(format!(
                        "dissimilarity ({i},{j}) = {v} must be finite and non-negative"
                    )));
                }
                if v != values[(j, i)] {
                    return Err(Error::Domain(format!("dissimilarity not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(DissimilarityMatrix { labels, values })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// `δ_ij = 1 − φ_ij` off the diagonal, zero on it.
pub fn to_dissimilarity(p: &ProductProximityMatrix) -> DissimilarityMatrix {
    let n = p.products().len();
    let values = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 - p.get(i, j) });
    DissimilarityMatrix {
        labels: p.products().to_vec(),
        values,
    }
}

/// Product vectors `v_p ∈ R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    dimension: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl Embedding {
    pub fn new(dimension: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Domain("embedding dimension must be positive".into()));
        }
        for (code, v) in &vectors {
            if v.len() != dimension || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!(
                    "vector of {code} must have {dimension} finite coordinates"
                )));
            }
        }
        Ok(Embedding { dimension, vectors })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn vector(&self, code: &str) -> Option<&[f64]> {
        self.vectors.get(code).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `product,dim0,...,dim{m-1}` with nine decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_vectors(out, "product", self.dimension, self.iter())
    }

    pub fn read_csv<R: Read>(stream: R) -> Result<Self> {
        let (dimension, vectors) = read_vectors(stream)?;
        Self::new(dimension, vectors)
    }
}

fn write_vectors<'a, W: Write>(
    out: W,
    key: &str,
    dimension: usize,
    rows: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![key.to_string()];
    header.extend((0..dimension).map(|k| format!("dim{k}")));
    w.write_record(&header)?;
    for (code, v) in rows {
        let mut record = vec![code.to_string()];
        // 9 decimals; -0.000000000 normalized to 0.000000000.
        record.extend(v.iter().map(|x| {
            let s = format!("{x:.9}");
            if s == "-0.000000000" {
                "0.000000000".to_string()
            } else {
                s
            }
        }));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn read_vectors<R: Read>(stream: R) -> Result<(usize, BTreeMap<String, Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(stream);
    let dimension = reader.headers()?.len().saturating_sub(1);
    let mut vectors = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != dimension + 1 {
            return Err(Error::parse(
                line,
                format!("expected {} columns, found {}", dimension + 1, record.len()),
            ));
        }
        let v = record
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("invalid coordinate {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        vectors.insert(normalize_code(&record[0]), v);
    }
    Ok((dimension, vectors))
}

#[derive(Debug, Clone)]
pub struct MdsOutcome {
    pub embedding: Embedding,
    /// Final `σ(X)`.
    pub stress: f64,
    pub raw_stress_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Embeds the labels of `d` into `R^m` with SMACOF.
pub fn mds_embed(d: &DissimilarityMatrix, m: usize, opts: &SmacofOptions) -> Result<MdsOutcome> {
    let run = smacof(d, m, opts)?;
    let stress = run.stress();
    let vectors = d.labels.iter().cloned().zip(run.points).collect();
    Ok(MdsOutcome {
        embedding: Embedding::new(m, vectors)?,
        stress,
        raw_stress_history: run.raw_stress_history,
        iterations: run.iterations,
        converged: run.converged,
    })
}

/// Activity vectors `v_a = Σ λ_{a,p} v_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityVectorSet {
    dimension: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmittedActivity {
    pub activity: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ActivityVectorOutcome {
    pub vectors: ActivityVectorSet,
    pub omitted: Vec<OmittedActivity>,
}

impl ActivityVectorSet {
    /// Zero vectors are rejected: they have no direction to compare.
    pub fn new(dimension: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (code, v) in &vectors {
            if v.len() != dimension || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!(
                    "vector of {code} must have {dimension} finite coordinates"
                )));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::Domain(format!("activity {code} has a zero vector")));
            }
        }
        Ok(ActivityVectorSet { dimension, vectors })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn vector(&self, code: &str) -> Option<&[f64]> {
        self.vectors.get(code).map(Vec::as_slice)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.vectors.contains_key(code)
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Up to `k` other activities with score ≤ `max_score`, ascending score,
    /// ties by code.
    pub fn nearest_activities(&self, code: &str, k: usize, max_score: f64) -> Result<Vec<(String, f64)>> {
        let origin = self
            .vector(code)
            .ok_or_else(|| Error::Lookup(format!("activity {code} has no vector")))?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut scored = Vec::new();
        for (other, v) in self.iter() {
            if other == code {
                continue;
            }
            let score = activity_proximity(origin, v)?;
            if score <= max_score {
                scored.push((other.to_string(), score));
            }
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Pairwise score table over all activities.
    pub fn proximity_matrix(&self) -> Result<ActivityProximityMatrix> {
        let labels: Vec<String> = self.vectors.keys().cloned().collect();
        let vs: Vec<&Vec<f64>> = self.vectors.values().collect();
        let n = labels.len();
        let mut values = DMatrix::from_element(n, n, 1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let s = activity_proximity(vs[i], vs[j])?;
                values[(i, j)] = s;
                values[(j, i)] = s;
            }
        }
        Ok(ActivityProximityMatrix { labels, values })
    }

    /// `activity,dim0,...` with nine decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_vectors(out, "activity", self.dimension, self.iter())
    }

    pub fn read_csv<R: Read>(stream: R) -> Result<Self> {
        let (dimension, vectors) = read_vectors(stream)?;
        Self::new(dimension, vectors)
    }
}

/// Builds activity vectors from product vectors and export weights. Products
/// missing from the embedding are dropped and the remaining weights
/// renormalized; activities left without any embedded product are omitted.
pub fn activity_vectors(e: &Embedding, w: &ProductWeightTable) -> ActivityVectorOutcome {
    let m = e.dimension();
    let mut vectors = BTreeMap::new();
    let mut omitted = Vec::new();

    for (activity, products) in w.iter() {
        let present: Vec<(&[f64], f64)> = products
            .iter()
            .filter_map(|(p, lambda)| e.vector(p).map(|v| (v, *lambda)))
            .collect();
        let mass: f64 = present.iter().map(|(_, l)| l).sum();
        if present.is_empty() || mass <= 0.0 {
            omitted.push(OmittedActivity {
                activity: activity.to_string(),
                reason: "no embedded product".into(),
            });
            continue;
        }
        let mut v = vec![0.0; m];
        for (pv, lambda) in present {
            let share = lambda / mass;
            for (acc, x) in v.iter_mut().zip(pv) {
                *acc += share * x;
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            omitted.push(OmittedActivity {
                activity: activity.to_string(),
                reason: "zero vector".into(),
            });
            continue;
        }
        vectors.insert(activity.to_string(), v);
    }

    ActivityVectorOutcome {
        vectors: ActivityVectorSet { dimension: m, vectors },
        omitted,
    }
}

/// `1 / cos(v_a, v_b)` with the cosine clamped to `[COSINE_FLOOR, 1]`.
/// Smaller is closer; the range is `[1, 1/COSINE_FLOOR]`.
pub fn activity_proximity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain("activity vectors differ in dimension".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Domain("cosine similarity undefined for a zero vector".into()));
    }
    let cos = (dot / (aa * bb).sqrt()).clamp(COSINE_FLOOR, 1.0);
    Ok(1.0 / cos)
}

/// Symmetric activity score table, ones on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityProximityMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
}

impl ActivityProximityMatrix {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// `activity_a,activity_b,score` over the upper triangle.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["activity_a", "activity_b", "score"])?;
        let n = self.labels.len();
        for i in 0..n {
            for j in (i + 1)..n {
                w.write_record([
                    self.labels[i].as_str(),
                    self.labels[j].as_str(),
                    &format!("{:.9}", self.values[(i, j)]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i}")).collect()
    }

    fn weights(rows: &[(&str, &[(&str, f64)])]) -> ProductWeightTable {
        let entries = rows
            .iter()
            .map(|(a, ps)| (a.to_string(), ps.iter().map(|(p, l)| (p.to_string(), *l)).collect()))
            .collect();
        ProductWeightTable::new("FRA", entries).unwrap()
    }

    fn embedding(rows: &[(&str, &[f64])]) -> Embedding {
        let m = rows[0].1.len();
        Embedding::new(m, rows.iter().map(|(p, v)| (p.to_string(), v.to_vec())).collect()).unwrap()
    }

    #[test]
    fn dissimilarity_rule() {
        let phi = ProductProximityMatrix::new(
            labels(3),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 1.0, 0.5, 1.0, 0.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        let d = to_dissimilarity(&phi);
        assert_eq!(d.get(0, 1), 0.5);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(1, 2), 1.0);
        assert_eq!(d.get(2, 2), 0.0);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(1.0 - d.get(i, j), phi.get(i, j));
                }
            }
        }
    }

    #[test]
    fn rejects_asymmetric_or_negative() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(DissimilarityMatrix::new(labels(2), asym).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(DissimilarityMatrix::new(labels(2), neg).is_err());
    }

    #[test]
    fn equilateral_triangle() {
        let d =
            DissimilarityMatrix::new(labels(3), DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        let out = mds_embed(
            &d,
            2,
            &SmacofOptions {
                max_iters: 2000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.stress < 1e-6, "stress {}", out.stress);
    }

    #[test]
    fn one_dimensional_misfit_is_monotone() {
        // Unit square distances cannot be realized on a line.
        let s = 2f64.sqrt();
        let vals = [0.0, 1.0, s, 1.0, 1.0, 0.0, 1.0, s, s, 1.0, 0.0, 1.0, 1.0, s, 1.0, 0.0];
        let d = DissimilarityMatrix::new(labels(4), DMatrix::from_row_slice(4, 4, &vals)).unwrap();
        let out = mds_embed(&d, 1, &SmacofOptions::default()).unwrap();
        assert!(out.stress > 0.0);
        for w in out.raw_stress_history.windows(2) {
            assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn too_few_points() {
        let d = DissimilarityMatrix::new(labels(1), DMatrix::zeros(1, 1)).unwrap();
        assert!(mds_embed(&d, 2, &SmacofOptions::default()).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let d = DissimilarityMatrix::new(
            labels(5),
            DMatrix::from_fn(5, 5, |i, j| (i as f64 - j as f64).abs() * 0.2),
        )
        .unwrap();
        let a = mds_embed(&d, 3, &SmacofOptions::default()).unwrap();
        let b = mds_embed(&d, 3, &SmacofOptions::default()).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.raw_stress_history, b.raw_stress_history);
    }

    #[test]
    fn activity_single_product() {
        let e = embedding(&[("P1", &[1.0, 2.0])]);
        let out = activity_vectors(&e, &weights(&[("A", &[("P1", 1.0)])]));
        assert_eq!(out.vectors.vector("A").unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn activity_midpoint() {
        let e = embedding(&[("P1", &[0.0, 0.0]), ("P2", &[2.0, 2.0])]);
        let out = activity_vectors(&e, &weights(&[("A", &[("P1", 0.5), ("P2", 0.5)])]));
        assert_eq!(out.vectors.vector("A").unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn activity_weighted_average() {
        let e = embedding(&[("P1", &[4.0, 0.0]), ("P2", &[0.0, 4.0])]);
        let out = activity_vectors(&e, &weights(&[("A", &[("P1", 0.75), ("P2", 0.25)])]));
        assert_eq!(out.vectors.vector("A").unwrap(), &[3.0, 1.0]);
    }

    #[test]
    fn activity_missing_products_renormalized() {
        let e = embedding(&[("P1", &[4.0, 0.0])]);
        let out = activity_vectors(
            &e,
            &weights(&[("A", &[("P1", 0.25), ("P9", 0.75)]), ("B", &[("P9", 1.0)])]),
        );
        assert_eq!(out.vectors.vector("A").unwrap(), &[4.0, 0.0]);
        assert!(!out.vectors.contains("B"));
        assert_eq!(out.omitted.len(), 1);
        assert_eq!(out.omitted[0].activity, "B");
    }

    #[test]
    fn proximity_identical() {
        assert_eq!(activity_proximity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn proximity_45_degrees() {
        assert_abs_diff_eq!(
            activity_proximity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-5
        );
    }

    #[test]
    fn proximity_orthogonal_clamps() {
        assert_abs_diff_eq!(
            activity_proximity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            1e6,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            activity_proximity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(),
            1e6,
            epsilon = 1e-6
        );
    }

    #[test]
    fn proximity_zero_vector_errors() {
        assert!(activity_proximity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    fn angled(angles_deg: &[(&str, f64)]) -> ActivityVectorSet {
        let vectors = angles_deg
            .iter()
            .map(|(c, a)| {
                let r = a.to_radians();
                (c.to_string(), vec![r.cos(), r.sin()])
            })
            .collect();
        ActivityVectorSet::new(2, vectors).unwrap()
    }

    #[test]
    fn nearest_k_zero_is_empty() {
        let set = angled(&[("A", 0.0), ("B", 10.0)]);
        assert!(set.nearest_activities("A", 0, 10.0).unwrap().is_empty());
    }

    #[test]
    fn nearest_duplicate_first() {
        let mut vectors = BTreeMap::new();
        vectors.insert("A".to_string(), vec![1.0, 2.0]);
        vectors.insert("B".to_string(), vec![5.0, 1.0]);
        vectors.insert("C".to_string(), vec![1.0, 2.0]);
        let set = ActivityVectorSet::new(2, vectors).unwrap();
        let near = set.nearest_activities("A", 5, 100.0).unwrap();
        assert_eq!(near[0], ("C".to_string(), 1.0));
    }

    #[test]
    fn nearest_matches_brute_force() {
        let set = angled(&[("A", 0.0), ("B", 30.0), ("C", 50.0), ("D", 80.0), ("E", -20.0)]);
        let near = set.nearest_activities("A", 3, 2.0).unwrap();
        let codes: Vec<_> = near.iter().map(|(c, _)| c.as_str()).collect();
        // 1/cos: E 1.064, B 1.155, C 1.556, D 5.76 (> 2)
        assert_eq!(codes, vec!["E", "B", "C"]);
        let near = set.nearest_activities("A", 10, 2.0).unwrap();
        assert_eq!(near.len(), 3);
    }

    #[test]
    fn nearest_unknown_activity() {
        let set = angled(&[("A", 0.0)]);
        assert!(matches!(set.nearest_activities("Z", 1, 2.0), Err(Error::Lookup(_))));
    }

    #[test]
    fn embedding_csv_round_trip() {
        let e = embedding(&[("P1", &[0.25, -1.5]), ("P2", &[-0.0000000001, 3.0])]);
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "product,dim0,dim1\nP1,0.250000000,-1.500000000\nP2,0.000000000,3.000000000\n"
        );
        let back = Embedding::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.vector("P1").unwrap(), &[0.25, -1.5]);
    }
}
