//! Global scaling: one affine intensity map per site, fit by regressing each
//! site-mean image on the grand-mean image across the masked voxels.

use std::any::Any;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_finite, FitOptions, FittedHarmonizer, HarmonizationMethod};
use crate::dataset::{site_means, VoxelDataset};
use crate::design::DesignMatrix;
use crate::error::{Error, Result};

const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalScalingFit {
    pub sites: Vec<String>,
    /// Per-site intercept, intensity units.
    pub theta_loc: Vec<f64>,
    /// Per-site slope.
    pub theta_scl: Vec<f64>,
    /// Mean squared residual over all sites and voxels.
    pub sigma2: f64,
}

impl GlobalScalingFit {
    pub fn site_params(&self, site: &str) -> Option<(f64, f64)> {
        let i = self.sites.iter().position(|s| s == site)?;
        Some((self.theta_loc[i], self.theta_scl[i]))
    }
}

pub fn fit_global_scaling(dataset: &VoxelDataset) -> Result<GlobalScalingFit> {
    let s = dataset.layout().n_sites();
    let v = dataset.n_voxels();
    if s < 2 {
        return Err(Error::Harmonize(format!("global scaling needs at least 2 sites, got {s}")));
    }
    if v < 2 {
        return Err(Error::Harmonize(format!("global scaling needs at least 2 voxels, got {v}")));
    }
    let means = site_means(dataset);
    let x = &means.grand;
    let x_mean = x.mean().unwrap();
    let sxx: f64 = x.iter().map(|xi| (xi - x_mean) * (xi - x_mean)).sum();
    let max_abs = x.iter().fold(0.0f64, |m, xi| m.max(xi.abs()));
    if sxx <= 16.0 * v as f64 * (f64::EPSILON * max_abs).powi(2) {
        return Err(Error::Harmonize(
            "zero regressor variance: the grand-mean image is constant across the mask".into(),
        ));
    }

    let mut theta_loc = Vec::with_capacity(s);
    let mut theta_scl = Vec::with_capacity(s);
    let mut rss = 0.0;
    for (i, label) in dataset.layout().sites().iter().enumerate() {
        let y = means.site.row(i);
        let y_mean = y.mean().unwrap();
        let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - x_mean) * (yi - y_mean)).sum();
        let slope = sxy / sxx;
        if !(slope.abs() >= MIN_SCALE) {
            return Err(Error::Harmonize(format!(
                "site {label:?} has slope {slope:e}; |theta_scl| must be at least {MIN_SCALE:e}"
            )));
        }
        let intercept = y_mean - slope * x_mean;
        rss += x
            .iter()
            .zip(y)
            .map(|(xi, yi)| {
                let r = yi - intercept - slope * xi;
                r * r
            })
            .sum::<f64>();
        theta_loc.push(intercept);
        theta_scl.push(slope);
    }
    Ok(GlobalScalingFit {
        sites: dataset.layout().sites().to_vec(),
        theta_loc,
        theta_scl,
        sigma2: rss / (s * v) as f64,
    })
}

/// Maps every value of an image from site i to (y − theta_loc_i) / theta_scl_i.
pub fn apply_global_scaling(fit: &GlobalScalingFit, dataset: &VoxelDataset) -> Result<Array2<f64>> {
    let params = dataset
        .layout()
        .sites()
        .iter()
        .map(|site| {
            fit.site_params(site).ok_or_else(|| {
                Error::Harmonize(format!("site {site:?} is not in the global scaling fit"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = dataset.values().clone();
    for (mut row, &s) in out.rows_mut().into_iter().zip(dataset.layout().membership()) {
        let (loc, scl) = params[s];
        row.mapv_inplace(|y| (y - loc) / scl);
    }
    check_finite(&out, "global scaling")?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalScalingMethod;

impl HarmonizationMethod for GlobalScalingMethod {
    fn fit(&self, dataset: &VoxelDataset, _: &DesignMatrix, _: &FitOptions) -> Result<Box<dyn FittedHarmonizer>> {
        Ok(Box::new(fit_global_scaling(dataset)?))
    }

    fn load(&self, params: &serde_json::Value) -> Result<Box<dyn FittedHarmonizer>> {
        let fit: GlobalScalingFit = serde_json::from_value(params.clone())
            .map_err(|e| Error::Harmonize(format!("bad global scaling parameters: {e}")))?;
        if fit.theta_loc.len() != fit.sites.len() || fit.theta_scl.len() != fit.sites.len() {
            return Err(Error::Harmonize("global scaling parameter lengths disagree".into()));
        }
        Ok(Box::new(fit))
    }
}

impl FittedHarmonizer for GlobalScalingFit {
    fn apply(&self, dataset: &VoxelDataset, _: &DesignMatrix) -> Result<Array2<f64>> {
        apply_global_scaling(self, dataset)
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("finite parameters serialize")
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
