//! Input-output tables: technical coefficients, Leontief output, and the
//! projection of a source-classification coefficient matrix onto NACE
//! activities to obtain supplier relations.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nomenclature::{normalize_code, WeightedMapping};

/// Condition number of `I − A` above which the Leontief solve is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative residual the Leontief solve must reach.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_MIN_INTENSITY: f64 = 0.01;
pub const DEFAULT_TOP_K: usize = 20;

/// Inter-industry flows `z_ij` (row supplies column), final demand and total
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct IOTable {
    pub industries: Vec<String>,
    pub flows: DMatrix<f64>,
    pub final_demand: DVector<f64>,
    pub total_output: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct IOLoad {
    pub table: IOTable,
    pub report: Vec<String>,
}

impl IOTable {
    pub fn new(
        industries: Vec<String>,
        flows: DMatrix<f64>,
        final_demand: DVector<f64>,
        total_output: DVector<f64>,
    ) -> Result<Self> {
        let n = industries.len();
        if flows.nrows() != n || flows.ncols() != n || final_demand.len() != n || total_output.len() != n {
            return Err(Error::Domain(format!("IO table dimensions must all be {n}")));
        }
        Ok(IOTable {
            industries,
            flows,
            final_demand,
            total_output,
        })
    }

    /// Loads the long-format flow CSV (`supplier_industry,buyer_industry,value`)
    /// and its `industry,total_output,final_demand` sidecar. Negative flows are
    /// clamped to zero, industries with non-positive output are dropped, and
    /// flows naming industries absent from the sidecar are skipped; each is
    /// reported.
    pub fn read_csv<R1: Read, R2: Read>(flows: R1, sidecar: R2) -> Result<IOLoad> {
        let mut report = Vec::new();

        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(sidecar);
        expect_header(&mut reader, &["industry", "total_output", "final_demand"])?;
        let mut totals: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let line = line_of(&record);
            if record.len() != 3 {
                return Err(Error::parse(
                    line,
                    format!("expected 3 columns, found {}", record.len()),
                ));
            }
            let code = normalize_code(&record[0]);
            let output = parse_number(&record[1], line)?;
            let demand = parse_number(&record[2], line)?;
            if totals.insert(code.clone(), (output, demand)).is_some() {
                return Err(Error::parse(line, format!("duplicate industry {code}")));
            }
        }
        totals.retain(|code, (output, _)| {
            let keep = *output > 0.0;
            if !keep {
                report.push(format!("industry {code} dropped: non-positive total output {output}"));
            }
            keep
        });

        let industries: Vec<String> = totals.keys().cloned().collect();
        let index: HashMap<&str, usize> = industries.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let n = industries.len();
        let mut z = DMatrix::zeros(n, n);

        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(flows);
        expect_header(&mut reader, &["supplier_industry", "buyer_industry", "value"])?;
        for record in reader.records() {
            let record = record?;
            let line = line_of(&record);
            if record.len() != 3 {
                return Err(Error::parse(
                    line,
                    format!("expected 3 columns, found {}", record.len()),
                ));
            }
            let supplier = normalize_code(&record[0]);
            let buyer = normalize_code(&record[1]);
            let mut value = parse_number(&record[2], line)?;
            let (Some(&i), Some(&j)) = (index.get(supplier.as_str()), index.get(buyer.as_str())) else {
                report.push(format!(
                    "line {line}: flow {supplier}→{buyer} skipped, industry not retained"
                ));
                continue;
            };
            if value < 0.0 {
                report.push(format!(
                    "line {line}: negative flow {supplier}→{buyer} ({value}) clamped to 0"
                ));
                value = 0.0;
            }
            z[(i, j)] += value;
        }

        let output = DVector::from_iterator(n, totals.values().map(|(x, _)| *x));
        let demand = DVector::from_iterator(n, totals.values().map(|(_, f)| *f));
        Ok(IOLoad {
            table: IOTable::new(industries, z, demand, output)?,
            report,
        })
    }
}

fn expect_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers()?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(1, format!("expected header `{}`", expected.join(","))));
    }
    Ok(())
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_number(s: &str, line: u64) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::parse(line, format!("invalid number {s:?}")))
}

/// Square matrix indexed by industry (or activity) codes on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct IndustryMatrix {
    pub industries: Vec<String>,
    pub values: DMatrix<f64>,
}

/// Technical coefficients `a_ij`.
pub type TechCoefMatrix = IndustryMatrix;

impl IndustryMatrix {
    pub fn new(industries: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let n = industries.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::Domain(format!("matrix must be {n} × {n}")));
        }
        Ok(IndustryMatrix { industries, values })
    }

    pub fn len(&self) -> usize {
        self.industries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.industries.is_empty()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.values.column_iter().map(|c| c.sum()).collect()
    }

    /// Industries whose coefficient column sums to 1 or more.
    pub fn invertibility_violations(&self) -> Vec<String> {
        self.column_sums()
            .iter()
            .zip(&self.industries)
            .filter(|(s, _)| **s >= 1.0)
            .map(|(s, code)| format!("column {code} sums to {s}"))
            .collect()
    }

    /// `supplier,buyer,value` for the non-zero cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["supplier", "buyer", "value"])?;
        for (i, s) in self.industries.iter().enumerate() {
            for (j, b) in self.industries.iter().enumerate() {
                let v = self.values[(i, j)];
                if v != 0.0 {
                    w.write_record([s.as_str(), b.as_str(), &v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `a_ij = z_ij / X_j`.
pub fn technical_coefficients(t: &IOTable) -> Result<TechCoefMatrix> {
    let mut a = t.flows.clone();
    for (j, code) in t.industries.iter().enumerate() {
        let x = t.total_output[j];
        if !(x > 0.0) {
            return Err(Error::Domain(format!(
                "industry {code} has non-positive total output {x}"
            )));
        }
        a.column_mut(j).unscale_mut(x);
    }
    IndustryMatrix::new(t.industries.clone(), a)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `(I − A) X = F` by LU factorization.
///
/// The system is refused when `I − A` is singular or its 2-norm condition
/// number exceeds [`MAX_CONDITION`]. One step of iterative refinement is
/// applied when the first solve misses the residual tolerance.
pub fn leontief_output(a: &TechCoefMatrix, f: &[f64]) -> Result<Vec<f64>> {
    let n = a.len();
    if f.len() != n {
        return Err(Error::Domain(format!(
            "final demand has {} entries, expected {n}",
            f.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let violations = a.invertibility_violations();
    if !violations.is_empty() {
        log::warn!(
            "Leontief solve with non-substochastic columns: {}",
            violations.join("; ")
        );
    }

    let system = DMatrix::identity(n, n) - &a.values;
    let singular_values = system.clone().singular_values();
    let smax = singular_values.max();
    let smin = singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::Numerical(format!(
            "I − A is singular or ill-conditioned (condition estimate {:e})",
            smax / smin
        )));
    }

    let f = DVector::from_column_slice(f);
    let lu = system.clone().lu();
    let mut x = lu
        .solve(&f)
        .ok_or_else(|| Error::Numerical("LU solve failed: I − A is singular".into()))?;

    let f_norm = inf_norm(&f);
    if f_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let relative_residual = |x: &DVector<f64>| inf_norm(&(&system * x - &f)) / f_norm;
    if relative_residual(&x) >= RESIDUAL_TOLERANCE {
        let r = &f - &system * &x;
        if let Some(dx) = lu.solve(&r) {
            x += dx;
        }
    }
    let residual = relative_residual(&x);
    if residual >= RESIDUAL_TOLERANCE {
        return Err(Error::Numerical(format!(
            "Leontief residual {residual:e} above tolerance"
        )));
    }
    Ok(x.iter().copied().collect())
}

/// `a'_kl = Σ_i Σ_j w_ik · a_ij · w_jl` with `w_ik` the weight of NACE `k`
/// within source industry `i`. Output axes are the target codes reachable
/// from the industries of `a`, sorted.
pub fn project_to_nace(a: &IndustryMatrix, w: &WeightedMapping) -> Result<IndustryMatrix> {
    if w.is_empty() {
        return Err(Error::Config("empty mapping".into()));
    }
    let mut targets: BTreeMap<&str, usize> = BTreeMap::new();
    for code in &a.industries {
        for (t, _) in w.targets(code).unwrap_or_default() {
            targets.insert(t.as_str(), 0);
        }
    }
    for (k, slot) in targets.values_mut().enumerate() {
        *slot = k;
    }

    let mut weights = DMatrix::zeros(a.len(), targets.len());
    for (i, code) in a.industries.iter().enumerate() {
        for (t, wt) in w.targets(code).unwrap_or_default() {
            weights[(i, targets[t.as_str()])] = *wt;
        }
    }

    let projected = weights.transpose() * &a.values * &weights;
    IndustryMatrix::new(targets.keys().map(|s| s.to_string()).collect(), projected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplierLink {
    pub supplier: String,
    pub intensity: f64,
}

/// Ranked potential suppliers per buyer activity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupplierRelationTable {
    entries: BTreeMap<String, Vec<SupplierLink>>,
}

impl SupplierRelationTable {
    pub fn suppliers(&self, buyer: &str) -> Option<&[SupplierLink]> {
        self.entries.get(buyer).map(Vec::as_slice)
    }

    pub fn buyers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[SupplierLink])> {
        self.entries.iter().map(|(b, s)| (b.as_str(), s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_entries(entries: BTreeMap<String, Vec<SupplierLink>>) -> Self {
        SupplierRelationTable { entries }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("relation table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line() as u64, e.to_string()))
    }
}

/// For each buyer column `j`, suppliers `i` with `a_ij ≥ min_intensity`,
/// descending by intensity then ascending code, truncated to `top_k`.
pub fn supplier_relations(a: &IndustryMatrix, min_intensity: f64, top_k: usize) -> SupplierRelationTable {
    let mut entries = BTreeMap::new();
    for (j, buyer) in a.industries.iter().enumerate() {
        let mut links: Vec<SupplierLink> = a
            .industries
            .iter()
            .enumerate()
            .filter(|&(i, _)| a.values[(i, j)] >= min_intensity && a.values[(i, j)] > 0.0)
            .map(|(i, s)| SupplierLink {
                supplier: s.clone(),
                intensity: a.values[(i, j)],
            })
            .collect();
        links.sort_by(|x, y| {
            y.intensity
                .total_cmp(&x.intensity)
                .then_with(|| x.supplier.cmp(&y.supplier))
        });
        links.truncate(top_k);
        entries.insert(buyer.clone(), links);
    }
    SupplierRelationTable { entries }
}

/// How supplier relations are ranked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMeasure {
    /// Technical coefficients `a_ij`.
    #[default]
    Coefficient,
    /// Raw inter-industry flows `z_ij`.
    Flow,
}

impl std::str::FromStr for RelationMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coefficient" => Ok(RelationMeasure::Coefficient),
            "flow" => Ok(RelationMeasure::Flow),
            other => Err(Error::Config(format!("unknown relation measure {other:?}"))),
        }
    }
}

impl std::fmt::Display for RelationMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RelationMeasure::Coefficient => "coefficient",
            RelationMeasure::Flow => "flow",
        })
    }
}
