//! Revealed comparative advantage, specialization matrix and co-export
//! product proximity.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nomenclature::normalize_code;

/// Product count at which country × product matrices switch to sparse rows.
pub const SPARSE_PRODUCT_THRESHOLD: usize = 5_000;

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    /// Row-major, one row per country.
    Dense(Vec<f64>),
    /// Per-country list of `(product index, value)` for non-zero cells,
    /// sorted by product index.
    Sparse(Vec<Vec<(usize, f64)>>),
}

/// Country × product grid shared by export and RCA matrices.
#[derive(Debug, Clone, PartialEq)]
struct Grid {
    countries: Vec<String>,
    products: Vec<String>,
    country_index: HashMap<String, usize>,
    product_index: HashMap<String, usize>,
    storage: Storage,
}

fn index_of(codes: &[String]) -> HashMap<String, usize> {
    codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect()
}

impl Grid {
    fn from_rows(countries: Vec<String>, products: Vec<String>, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let storage = if products.len() < SPARSE_PRODUCT_THRESHOLD {
            let mut dense = vec![0.0; countries.len() * products.len()];
            for (c, row) in rows.iter().enumerate() {
                for &(p, x) in row {
                    dense[c * products.len() + p] = x;
                }
            }
            Storage::Dense(dense)
        } else {
            Storage::Sparse(rows)
        };
        Grid {
            country_index: index_of(&countries),
            product_index: index_of(&products),
            countries,
            products,
            storage,
        }
    }

    fn value(&self, c: usize, p: usize) -> f64 {
        match &self.storage {
            Storage::Dense(v) => v[c * self.products.len() + p],
            Storage::Sparse(rows) => rows[c]
                .binary_search_by_key(&p, |&(q, _)| q)
                .map_or(0.0, |i| rows[c][i].1),
        }
    }

    fn row(&self, c: usize) -> Box<dyn Iterator<Item = (usize, f64)> + '_> {
        match &self.storage {
            Storage::Dense(v) => {
                let n = self.products.len();
                Box::new(
                    v[c * n..(c + 1) * n]
                        .iter()
                        .copied()
                        .enumerate()
                        .filter(|&(_, x)| x != 0.0),
                )
            }
            Storage::Sparse(rows) => Box::new(rows[c].iter().copied()),
        }
    }

    fn get(&self, country: &str, product: &str) -> f64 {
        let (country, product) = (normalize_code(country), normalize_code(product));
        match (self.country_index.get(&country), self.product_index.get(&product)) {
            (Some(&c), Some(&p)) => self.value(c, p),
            _ => 0.0,
        }
    }

    fn map_rows(&self, f: impl Fn(usize, usize, f64) -> f64) -> Grid {
        let rows = (0..self.countries.len())
            .map(|c| {
                self.row(c)
                    .map(|(p, x)| (p, f(c, p, x)))
                    .filter(|&(_, y)| y != 0.0)
                    .collect()
            })
            .collect();
        Grid::from_rows(self.countries.clone(), self.products.clone(), rows)
    }
}

macro_rules! grid_accessors {
    () => {
        pub fn countries(&self) -> &[String] {
            &self.grid.countries
        }

        pub fn products(&self) -> &[String] {
            &self.grid.products
        }

        pub fn country_index(&self, code: &str) -> Option<usize> {
            self.grid.country_index.get(code).copied()
        }

        pub fn product_index(&self, code: &str) -> Option<usize> {
            self.grid.product_index.get(code).copied()
        }

        pub fn value(&self, country: usize, product: usize) -> f64 {
            self.grid.value(country, product)
        }

        /// Value by code, matched after normalization; unknown codes read as zero.
        pub fn get(&self, country: &str, product: &str) -> f64 {
            self.grid.get(country, product)
        }

        /// Non-zero cells of one country's row.
        pub fn row(&self, country: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
            self.grid.row(country)
        }

        pub fn is_sparse(&self) -> bool {
            matches!(self.grid.storage, Storage::Sparse(_))
        }
    };
}

/// Exports `X_cp` of product `p` by country `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportMatrix {
    grid: Grid,
}

impl ExportMatrix {
    grid_accessors!();

    /// Builds from a dense `countries × products` table.
    pub fn from_dense(countries: Vec<String>, products: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != countries.len() || values.iter().any(|r| r.len() != products.len()) {
            return Err(Error::Domain(format!(
                "export values must be {} × {}",
                countries.len(),
                products.len()
            )));
        }
        let countries: Vec<String> = countries.iter().map(|c| normalize_code(c)).collect();
        let products: Vec<String> = products.iter().map(|p| normalize_code(p)).collect();
        check_unique(&countries, "country")?;
        check_unique(&products, "product")?;
        let mut rows = Vec::with_capacity(values.len());
        for (c, row) in values.iter().enumerate() {
            let mut entries = Vec::new();
            for (p, &x) in row.iter().enumerate() {
                check_value(x, &countries[c], &products[p])?;
                if x != 0.0 {
                    entries.push((p, x));
                }
            }
            rows.push(entries);
        }
        Ok(ExportMatrix {
            grid: Grid::from_rows(countries, products, rows),
        })
    }

    /// Builds from long-format `(country, product, value)` records. Duplicate
    /// cells are summed; axes are sorted by code.
    pub fn from_records<I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, f64)>,
    {
        let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut countries = BTreeMap::new();
        let mut products = BTreeMap::new();
        for (c, p, x) in records {
            let c = normalize_code(&c);
            let p = normalize_code(&p);
            check_value(x, &c, &p)?;
            countries.insert(c.clone(), ());
            products.insert(p.clone(), ());
            *cells.entry((c, p)).or_default() += x;
        }
        let countries: Vec<String> = countries.into_keys().collect();
        let products: Vec<String> = products.into_keys().collect();
        let cidx = index_of(&countries);
        let pidx = index_of(&products);
        let mut rows = vec![Vec::new(); countries.len()];
        for ((c, p), x) in cells {
            if x != 0.0 {
                rows[cidx[&c]].push((pidx[&p], x));
            }
        }
        for row in &mut rows {
            row.sort_by_key(|&(p, _)| p);
        }
        Ok(ExportMatrix {
            grid: Grid::from_rows(countries, products, rows),
        })
    }

    /// Reads the long-format `country,product,value` CSV.
    pub fn read_csv<R: Read>(stream: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(stream);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["country", "product", "value"] {
            return Err(Error::parse(1, "expected header `country,product,value`"));
        }
        let mut records = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(Error::parse(
                    line,
                    format!("expected 3 columns, found {}", record.len()),
                ));
            }
            let value: f64 = record[2]
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid value {:?}", &record[2])))?;
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::parse(
                    line,
                    format!("export value must be finite and non-negative, got {value}"),
                ));
            }
            records.push((record[0].to_string(), record[1].to_string(), value));
        }
        Self::from_records(records)
    }

    /// Same matrix with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ExportMatrix {
            grid: self.grid.map_rows(|_, _, x| x * factor),
        }
    }
}

fn check_value(x: f64, country: &str, product: &str) -> Result<()> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "export value for ({country}, {product}) must be finite and non-negative, got {x}"
        )))
    }
}

fn check_unique(codes: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for c in codes {
        if c.is_empty() {
            return Err(Error::Domain(format!("empty {what} code")));
        }
        if !seen.insert(c) {
            return Err(Error::Domain(format!("duplicate {what} code {c}")));
        }
    }
    Ok(())
}

/// Balassa index `RCA_cp`, zero wherever a denominator vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct RcaMatrix {
    grid: Grid,
}

impl RcaMatrix {
    grid_accessors!();
}

impl From<&BinaryExportMatrix> for RcaMatrix {
    /// Reads each 0/1 entry as an RCA value.
    fn from(m: &BinaryExportMatrix) -> Self {
        let rows = m.rows.iter().map(|ps| ps.iter().map(|&p| (p, 1.0)).collect()).collect();
        RcaMatrix {
            grid: Grid::from_rows(m.countries.clone(), m.products.clone(), rows),
        }
    }
}

/// `RCA_cp = (X_cp / Σ_c X_cp) / (Σ_p X_cp / Σ_{c,p} X_cp)`.
pub fn compute_rca(x: &ExportMatrix) -> Result<RcaMatrix> {
    let n_countries = x.countries().len();
    let n_products = x.products().len();
    if n_countries == 0 || n_products == 0 {
        return Err(Error::Domain("empty export matrix".into()));
    }

    let mut product_totals = vec![0.0; n_products];
    let mut country_totals = vec![0.0; n_countries];
    for (c, country_total) in country_totals.iter_mut().enumerate() {
        for (p, v) in x.row(c) {
            product_totals[p] += v;
            *country_total += v;
        }
    }
    let grand_total: f64 = country_totals.iter().sum();
    if !(grand_total > 0.0) {
        return Err(Error::Domain("export matrix has zero grand total".into()));
    }

    let grid = x.grid.map_rows(|c, p, v| {
        let product_total = product_totals[p];
        let country_total = country_totals[c];
        if product_total > 0.0 && country_total > 0.0 {
            (v / product_total) / (country_total / grand_total)
        } else {
            0.0
        }
    });
    Ok(RcaMatrix { grid })
}

/// `M_cp ∈ {0, 1}`, stored as the sorted list of product indices per country
/// where `M_cp = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryExportMatrix {
    countries: Vec<String>,
    products: Vec<String>,
    rows: Vec<Vec<usize>>,
}

impl BinaryExportMatrix {
    /// Builds from a dense 0/1 table; any non-zero entry counts as 1.
    pub fn from_dense(countries: Vec<String>, products: Vec<String>, values: &[Vec<u8>]) -> Result<Self> {
        if values.len() != countries.len() || values.iter().any(|r| r.len() != products.len()) {
            return Err(Error::Domain("binary matrix dimensions do not match axes".into()));
        }
        let rows = values
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &b)| b != 0).map(|(p, _)| p).collect())
            .collect();
        Ok(BinaryExportMatrix {
            countries,
            products,
            rows,
        })
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn get(&self, country: usize, product: usize) -> u8 {
        u8::from(self.rows[country].binary_search(&product).is_ok())
    }

    /// Products with `M = 1` for a country.
    pub fn exported(&self, country: usize) -> &[usize] {
        &self.rows[country]
    }

    /// Ubiquity: number of countries with `M = 1` per product.
    pub fn column_sums(&self) -> Vec<u32> {
        let mut sums = vec![0u32; self.products.len()];
        for row in &self.rows {
            for &p in row {
                sums[p] += 1;
            }
        }
        sums
    }
}

/// `M_cp = 1` iff `RCA_cp ≥ threshold`.
pub fn binarize(r: &RcaMatrix, threshold: f64) -> BinaryExportMatrix {
    let n_products = r.products().len();
    let rows = (0..r.countries().len())
        .map(|c| {
            if threshold > 0.0 {
                r.row(c).filter(|&(_, v)| v >= threshold).map(|(p, _)| p).collect()
            } else {
                (0..n_products).filter(|&p| r.value(c, p) >= threshold).collect()
            }
        })
        .collect();
    BinaryExportMatrix {
        countries: r.countries().to_vec(),
        products: r.products().to_vec(),
        rows,
    }
}

/// Symmetric co-export proximity `φ` between products.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductProximityMatrix {
    products: Vec<String>,
    values: DMatrix<f64>,
}

impl ProductProximityMatrix {
    /// Validates symmetry, range and the diagonal rule.
    pub fn new(products: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let n = products.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::Domain(
                "proximity matrix must be square over the product axis".into(),
            ));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!("proximity ({i},{j}) = {v} outside [0,1]")));
                }
                if v != values[(j, i)] {
                    return Err(Error::Domain(format!("proximity not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(ProductProximityMatrix { products, values })
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// `product_a,product_b,phi` over the upper triangle including the diagonal.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["product_a", "product_b", "phi"])?;
        let n = self.products.len();
        for i in 0..n {
            for j in i..n {
                w.write_record([
                    self.products[i].as_str(),
                    self.products[j].as_str(),
                    &self.values[(i, j)].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(stream: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(stream);
        let mut cells = Vec::new();
        let mut products = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(Error::parse(
                    line,
                    format!("expected 3 columns, found {}", record.len()),
                ));
            }
            let phi: f64 = record[2]
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid phi {:?}", &record[2])))?;
            let a = normalize_code(&record[0]);
            let b = normalize_code(&record[1]);
            products.insert(a.clone(), ());
            products.insert(b.clone(), ());
            cells.push((a, b, phi));
        }
        let products: Vec<String> = products.into_keys().collect();
        let idx = index_of(&products);
        let mut values = DMatrix::zeros(products.len(), products.len());
        for (a, b, phi) in cells {
            values[(idx[&a], idx[&b])] = phi;
            values[(idx[&b], idx[&a])] = phi;
        }
        Self::new(products, values)
    }
}

/// `φ_{p1,p2} = min(C / k_{p1}, C / k_{p2})` with `C` the number of countries
/// exporting both and `k` the ubiquities. Pairs involving a product nobody
/// exports get zero.
pub fn product_proximity(m: &BinaryExportMatrix) -> ProductProximityMatrix {
    let n = m.products.len();
    let ubiquity = m.column_sums();

    let mut co = vec![0u32; n * n];
    for row in &m.rows {
        for &p1 in row {
            for &p2 in row {
                co[p1 * n + p2] += 1;
            }
        }
    }

    let mut values = vec![0.0; n * n];
    values.par_chunks_mut(n.max(1)).enumerate().for_each(|(p1, out)| {
        for (p2, slot) in out.iter_mut().enumerate() {
            let (k1, k2) = (ubiquity[p1], ubiquity[p2]);
            *slot = if k1 == 0 || k2 == 0 {
                0.0
            } else {
                let c = f64::from(co[p1 * n + p2]);
                (c / f64::from(k1)).min(c / f64::from(k2))
            };
        }
    });

    ProductProximityMatrix {
        products: m.products.clone(),
        values: DMatrix::from_row_slice(n, n, &values),
    }
}
