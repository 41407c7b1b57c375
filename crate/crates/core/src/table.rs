//! The per-image sample table: image path, site label, covariates.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValue {
    Continuous(f64),
    Categorical(String),
}

impl CovariateValue {
    pub fn kind(&self) -> CovariateKind {
        match self {
            CovariateValue::Continuous(_) => CovariateKind::Continuous,
            CovariateValue::Categorical(_) => CovariateKind::Categorical,
        }
    }
}

impl std::fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovariateValue::Continuous(v) => write!(f, "{v}"),
            CovariateValue::Categorical(s) => f.write_str(s),
        }
    }
}

/// Which CSV columns hold the image, the site, and each covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSchema {
    pub image_column: String,
    pub site_column: String,
    pub covariates: Vec<CovariateSpec>,
}

impl TableSchema {
    pub fn new(
        image_column: impl Into<String>,
        site_column: impl Into<String>,
        covariates: Vec<CovariateSpec>,
    ) -> Result<Self> {
        let schema = Self {
            image_column: image_column.into(),
            site_column: site_column.into(),
            covariates,
        };
        let mut seen = HashSet::new();
        for name in schema.column_names() {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!(
                    "column {name:?} appears more than once in the table schema"
                )));
            }
        }
        Ok(schema)
    }

    fn column_names(&self) -> impl Iterator<Item = &str> {
        [self.image_column.as_str(), self.site_column.as_str()]
            .into_iter()
            .chain(self.covariates.iter().map(|c| c.name.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    /// The image reference exactly as written in the table.
    pub image_id: String,
    /// `image_id` resolved against the table's directory.
    pub path: PathBuf,
    pub site: String,
    pub covariates: BTreeMap<String, CovariateValue>,
}

/// Validated sample table. Rows keep file order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    rows: Vec<SampleRow>,
    covariates: Vec<CovariateSpec>,
}

impl SampleTable {
    /// Checks uniqueness, non-empty sites, and a shared covariate set.
    pub fn new(rows: Vec<SampleRow>, covariates: Vec<CovariateSpec>) -> Result<Self> {
        let mut ids = HashSet::new();
        for (k, row) in rows.iter().enumerate() {
            if !ids.insert(row.image_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate image_id {:?}", row.image_id)));
            }
            if row.site.is_empty() {
                return Err(Error::Dataset(format!("row {k} ({}) has an empty site", row.image_id)));
            }
            if row.covariates.len() != covariates.len() {
                return Err(Error::Dataset(format!(
                    "row {k} ({}) has {} covariates, expected {}",
                    row.image_id,
                    row.covariates.len(),
                    covariates.len()
                )));
            }
            for spec in &covariates {
                match row.covariates.get(&spec.name) {
                    Some(v) if v.kind() == spec.kind => {
                        if let CovariateValue::Continuous(x) = v {
                            if !x.is_finite() {
                                return Err(Error::Dataset(format!(
                                    "row {k} ({}) covariate {:?} is not finite",
                                    row.image_id, spec.name
                                )));
                            }
                        }
                    }
                    Some(_) => {
                        return Err(Error::Dataset(format!(
                            "row {k} ({}) covariate {:?} has the wrong kind",
                            row.image_id, spec.name
                        )))
                    }
                    None => {
                        return Err(Error::Dataset(format!(
                            "row {k} ({}) is missing covariate {:?}",
                            row.image_id, spec.name
                        )))
                    }
                }
            }
        }
        Ok(Self { rows, covariates })
    }

    pub fn rows(&self) -> &[SampleRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn covariates(&self) -> &[CovariateSpec] {
        &self.covariates
    }

    pub fn covariate_kind(&self, name: &str) -> Option<CovariateKind> {
        self.covariates.iter().find(|c| c.name == name).map(|c| c.kind)
    }
}

fn table_err(path: &Path, row: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Table {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn headers(path: &Path, reader: &mut csv::Reader<std::fs::File>) -> Result<Vec<String>> {
    let h = reader
        .headers()
        .map_err(|e| table_err(path, 1, "", e.to_string()))?;
    Ok(h.iter().map(|s| s.trim().to_string()).collect())
}

fn column_position(path: &Path, headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| table_err(path, 1, name, "missing column"))
}

/// Reads and validates a CSV sample table.
///
/// Row numbers in errors are 1-based file lines, so the header is row 1 and
/// the first record is row 2.
pub fn read_sample_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<SampleTable> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let mut reader = open_csv(path)?;
    let headers = headers(path, &mut reader)?;
    let image_col = column_position(path, &headers, &schema.image_column)?;
    let site_col = column_position(path, &headers, &schema.site_column)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column_position(path, &headers, &c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (k, record) in reader.records().enumerate() {
        let fallback_row = k as u64 + 2;
        let record = record.map_err(|e| {
            let row = e.position().map(|p| p.line()).unwrap_or(fallback_row);
            table_err(path, row, "", e.to_string())
        })?;
        let row = record.position().map(|p| p.line()).unwrap_or(fallback_row);
        let cell = |col: usize, name: &str| -> Result<String> {
            let v = record.get(col).unwrap_or("").trim();
            if v.is_empty() {
                Err(table_err(path, row, name, "empty cell"))
            } else {
                Ok(v.to_string())
            }
        };
        let image_id = cell(image_col, &schema.image_column)?;
        if !seen.insert(image_id.clone()) {
            return Err(table_err(
                path,
                row,
                &schema.image_column,
                format!("duplicate image_id {image_id:?}"),
            ));
        }
        let site = cell(site_col, &schema.site_column)?;
        let mut covariates = BTreeMap::new();
        for (spec, &col) in schema.covariates.iter().zip(&cov_cols) {
            let raw = cell(col, &spec.name)?;
            let value = match spec.kind {
                CovariateKind::Categorical => CovariateValue::Categorical(raw),
                CovariateKind::Continuous => match raw.parse::<f64>() {
                    Ok(x) if x.is_finite() => CovariateValue::Continuous(x),
                    _ => {
                        return Err(table_err(
                            path,
                            row,
                            &spec.name,
                            format!("cannot parse {raw:?} as a finite number"),
                        ))
                    }
                },
            };
            covariates.insert(spec.name.clone(), value);
        }
        rows.push(SampleRow {
            path: base.join(&image_id),
            image_id,
            site,
            covariates,
        });
    }
    if rows.is_empty() {
        return Err(table_err(path, 1, "", "table has no rows"));
    }
    SampleTable::new(rows, schema.covariates.clone())
}

/// Decides a kind for each named covariate column.
///
/// Names in `categorical` are always categorical; any other column is
/// continuous when every cell parses as a finite number.
pub fn infer_covariate_kinds(
    path: impl AsRef<Path>,
    names: &[String],
    categorical: &[String],
) -> Result<Vec<CovariateSpec>> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    let headers = headers(path, &mut reader)?;
    let cols = names
        .iter()
        .map(|n| column_position(path, &headers, n))
        .collect::<Result<Vec<_>>>()?;
    let mut numeric = vec![true; names.len()];
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| table_err(path, k as u64 + 2, "", e.to_string()))?;
        for (flag, &col) in numeric.iter_mut().zip(&cols) {
            let v = record.get(col).unwrap_or("").trim();
            if !v.is_empty() && !v.parse::<f64>().is_ok_and(f64::is_finite) {
                *flag = false;
            }
        }
    }
    Ok(names
        .iter()
        .zip(numeric)
        .map(|(name, is_num)| CovariateSpec {
            name: name.clone(),
            kind: if is_num && !categorical.contains(name) {
                CovariateKind::Continuous
            } else {
                CovariateKind::Categorical
            },
        })
        .collect())
}

/// Writes the table as CSV with columns `image_column, site_column, covariates...`.
///
/// `image_ids` replaces each row's image reference (same order as the rows).
pub fn write_sample_table(
    table: &SampleTable,
    image_ids: &[String],
    image_column: &str,
    site_column: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(image_ids.len(), table.len());
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec![image_column.to_string(), site_column.to_string()];
    header.extend(table.covariates().iter().map(|c| c.name.clone()));
    writer.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (row, id) in table.rows().iter().zip(image_ids) {
        let mut rec = vec![id.clone(), row.site.clone()];
        rec.extend(table.covariates().iter().map(|c| row.covariates[&c.name].to_string()));
        writer.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
