//! Harmonization methods behind a common fit/apply interface, and the
//! registry that resolves them by name.

mod combat;
mod global_scaling;

use std::any::Any;
use std::fmt::Debug;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use combat::{apply_combat, fit_combat, CombatFit, CombatMethod, EbDiagnostics, SitePrior};
pub use global_scaling::{apply_global_scaling, fit_global_scaling, GlobalScalingFit, GlobalScalingMethod};

use crate::dataset::VoxelDataset;
use crate::design::{DesignMatrix, DesignSpec};
use crate::error::{Error, Result};

/// Method-independent fitting knobs. Methods ignore what they do not use.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub eb: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            eb: true,
            tol: 1e-4,
            max_iter: 100,
        }
    }
}

pub trait HarmonizationMethod: Send + Sync {
    fn fit(
        &self,
        dataset: &VoxelDataset,
        design: &DesignMatrix,
        options: &FitOptions,
    ) -> Result<Box<dyn FittedHarmonizer>>;

    /// Rebuilds a fitted model from the `params` of a saved model document.
    fn load(&self, params: &serde_json::Value) -> Result<Box<dyn FittedHarmonizer>> {
        let _ = params;
        Err(Error::Harmonize("this method cannot reload saved models".into()))
    }
}

pub trait FittedHarmonizer: Send + Sync + Debug {
    /// Returns the adjusted N×V matrix for `dataset`.
    fn apply(&self, dataset: &VoxelDataset, design: &DesignMatrix) -> Result<Array2<f64>>;

    /// Parameters for the saved model document.
    fn params(&self) -> serde_json::Value;

    fn as_any(&self) -> &dyn Any;
}

/// Name → method lookup. Populated at startup, read-only afterwards.
#[derive(Clone, Default)]
pub struct MethodRegistry {
    methods: Vec<(String, Arc<dyn HarmonizationMethod>)>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `none`, `global_scaling`, and `combat`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("none", Arc::new(IdentityMethod)).unwrap();
        r.register("global_scaling", Arc::new(GlobalScalingMethod)).unwrap();
        r.register("combat", Arc::new(CombatMethod)).unwrap();
        r
    }

    pub fn register(&mut self, name: &str, method: Arc<dyn HarmonizationMethod>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Harmonize("method name must not be empty".into()));
        }
        if self.get(name).is_some() {
            return Err(Error::Harmonize(format!("method {name:?} is already registered")));
        }
        self.methods.push((name.to_string(), method));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn HarmonizationMethod>> {
        self.methods.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn resolve(&self, name: &str) -> Result<&Arc<dyn HarmonizationMethod>> {
        self.get(name).ok_or_else(|| {
            Error::Harmonize(format!(
                "unknown method {name:?}; available: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.methods.iter().map(|(n, _)| n.as_str()).collect()
    }
}

impl std::fmt::Debug for MethodRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

/// Returns the values unchanged.
pub fn identity_method(dataset: &VoxelDataset) -> Array2<f64> {
    dataset.values().clone()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMethod;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct IdentityFit;

impl HarmonizationMethod for IdentityMethod {
    fn fit(&self, _: &VoxelDataset, _: &DesignMatrix, _: &FitOptions) -> Result<Box<dyn FittedHarmonizer>> {
        Ok(Box::new(IdentityFit))
    }

    fn load(&self, _: &serde_json::Value) -> Result<Box<dyn FittedHarmonizer>> {
        Ok(Box::new(IdentityFit))
    }
}

impl FittedHarmonizer for IdentityFit {
    fn apply(&self, dataset: &VoxelDataset, _: &DesignMatrix) -> Result<Array2<f64>> {
        Ok(identity_method(dataset))
    }

    fn params(&self) -> serde_json::Value {
        serde_json::Value::Object(Default::default())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// The `model.json` document written by `harmonize` and read by `apply`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub method: String,
    pub design: DesignSpec,
    pub params: serde_json::Value,
}

impl ModelDocument {
    pub fn new(method: &str, design: &DesignMatrix, fitted: &dyn FittedHarmonizer) -> Self {
        Self {
            method: method.to_string(),
            design: design.spec.clone(),
            params: fitted.params(),
        }
    }

    pub fn load(&self, registry: &MethodRegistry) -> Result<Box<dyn FittedHarmonizer>> {
        registry.resolve(&self.method)?.load(&self.params)
    }
}

pub(crate) fn check_finite(values: &Array2<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Harmonize(format!("{what} produced non-finite values")))
    }
}
