//! Covariate design matrices with treatment (dummy) coding.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix_rank;
use crate::table::{CovariateValue, SampleTable};

pub use crate::table::CovariateKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Dummy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// How each covariate is encoded. Categorical `levels` are sorted; the first is the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignCovariate {
    pub name: String,
    pub kind: CovariateKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub covariates: Vec<DesignCovariate>,
}

impl DesignSpec {
    pub fn columns(&self) -> Vec<DesignColumn> {
        let mut cols = Vec::new();
        for cov in &self.covariates {
            match cov.kind {
                CovariateKind::Continuous => cols.push(DesignColumn {
                    name: cov.name.clone(),
                    kind: ColumnKind::Continuous,
                }),
                CovariateKind::Categorical => {
                    cols.extend(cov.levels.iter().skip(1).map(|level| DesignColumn {
                        name: format!("{}[{}]", cov.name, level),
                        kind: ColumnKind::Dummy,
                    }))
                }
            }
        }
        cols
    }

    /// Encodes `table` with this spec's columns and reference levels, without a rank check.
    pub fn encode(&self, table: &SampleTable) -> Result<DesignMatrix> {
        let columns = self.columns();
        let mut values = Array2::zeros((table.len(), columns.len()));
        for (n, row) in table.rows().iter().enumerate() {
            let mut k = 0;
            for cov in &self.covariates {
                let value = row.covariates.get(&cov.name).ok_or_else(|| {
                    Error::Design(format!("table has no covariate {:?}", cov.name))
                })?;
                match (cov.kind, value) {
                    (CovariateKind::Continuous, CovariateValue::Continuous(x)) => {
                        values[[n, k]] = *x;
                        k += 1;
                    }
                    (CovariateKind::Categorical, CovariateValue::Categorical(level)) => {
                        let pos = cov.levels.iter().position(|l| l == level).ok_or_else(|| {
                            Error::Design(format!(
                                "covariate {:?} level {level:?} was not seen when the design was built",
                                cov.name
                            ))
                        })?;
                        if pos > 0 {
                            values[[n, k + pos - 1]] = 1.0;
                        }
                        k += cov.levels.len().saturating_sub(1);
                    }
                    _ => {
                        return Err(Error::Design(format!(
                            "covariate {:?} has a different kind than the design expects",
                            cov.name
                        )))
                    }
                }
            }
        }
        Ok(DesignMatrix {
            spec: self.clone(),
            columns,
            values,
        })
    }
}

/// N×K covariate matrix without an intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub spec: DesignSpec,
    pub columns: Vec<DesignColumn>,
    pub values: Array2<f64>,
}

impl DesignMatrix {
    /// The K = 0 design for `n` samples.
    pub fn empty(n: usize) -> Self {
        Self {
            spec: DesignSpec::default(),
            columns: Vec::new(),
            values: Array2::zeros((n, 0)),
        }
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }
}

/// Builds the design for `covariate_names`, in the given order.
///
/// Continuous covariates are copied unscaled. A categorical covariate with L
/// levels becomes L−1 dummy columns, dropping the lexicographically smallest
/// level as reference.
pub fn build_design_matrix(table: &SampleTable, covariate_names: &[String]) -> Result<DesignMatrix> {
    let mut covariates = Vec::with_capacity(covariate_names.len());
    for name in covariate_names {
        if covariates.iter().any(|c: &DesignCovariate| &c.name == name) {
            return Err(Error::Design(format!("covariate {name:?} listed twice")));
        }
        let kind = table
            .covariate_kind(name)
            .ok_or_else(|| Error::Design(format!("unknown covariate {name:?}")))?;
        let levels = match kind {
            CovariateKind::Continuous => Vec::new(),
            CovariateKind::Categorical => table
                .rows()
                .iter()
                .filter_map(|r| match &r.covariates[name] {
                    CovariateValue::Categorical(s) => Some(s.clone()),
                    CovariateValue::Continuous(_) => None,
                })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        covariates.push(DesignCovariate {
            name: name.clone(),
            kind,
            levels,
        });
    }
    let design = DesignSpec { covariates }.encode(table)?;
    let k = design.n_columns();
    if k > 0 && matrix_rank(&design.values) < k {
        return Err(Error::Design(format!(
            "rank deficient: the {k} columns {:?} are linearly dependent",
            design.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>()
        )));
    }
    Ok(design)
}
