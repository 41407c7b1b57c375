//! ComBat location/scale harmonization with optional parametric empirical Bayes.
//!
//! Model per voxel v, site i, image j:
//!
//! ```text
//! y_ijv = α_v + X_ij β_v + γ_iv + δ_iv ε_ijv
//! ```
//!
//! Estimation regresses y on site indicators plus covariates (so Σ n_i γ_i = 0),
//! standardizes by the pooled residual scale, estimates per-site location and
//! scale of the standardized data, and optionally shrinks those estimates
//! toward per-site moment-matched normal / inverse-gamma priors.

use std::any::Any;

use ndarray::{Array1, Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, FitOptions, FittedHarmonizer, HarmonizationMethod};
use crate::dataset::VoxelDataset;
use crate::design::{DesignColumn, DesignMatrix};
use crate::error::{Error, Result};
use crate::linalg::least_squares;

const VARIANCE_FLOOR: f64 = 1e-12;
/// Denominator floor for the relative change of γ*, which can sit near zero.
const LOCATION_CHANGE_FLOOR: f64 = 1e-8;
/// Iterations excluded from the monotone-convergence check.
const WARMUP_ITERATIONS: usize = 3;

/// Method-of-moments prior for one site. `a_prior`/`b_prior` are `None` when
/// the δ̂² spread across voxels is zero, which collapses the prior to a point
/// mass at their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePrior {
    pub gamma_bar: f64,
    pub tau2: f64,
    pub delta2_mean: f64,
    pub delta2_var: f64,
    pub a_prior: Option<f64>,
    pub b_prior: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EbDiagnostics {
    pub max_iterations: usize,
    /// (site, voxel) pairs whose convergence criterion rose after the warm-up iterations.
    pub monotone_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombatFit {
    pub sites: Vec<String>,
    pub counts: Vec<usize>,
    pub design_columns: Vec<DesignColumn>,
    pub alpha_hat: Array1<f64>,
    /// K×V covariate effects.
    pub beta_hat: Array2<f64>,
    pub sigma_hat: Array1<f64>,
    /// Direct (unshrunk) per-site estimates on the standardized scale, S×V.
    pub gamma_hat: Array2<f64>,
    pub delta2_hat: Array2<f64>,
    pub gamma_star: Array2<f64>,
    /// Squared scale effects δ*², S×V.
    pub delta2_star: Array2<f64>,
    pub eb_used: bool,
    pub priors: Vec<SitePrior>,
    pub diagnostics: EbDiagnostics,
}

impl CombatFit {
    pub fn delta_star(&self) -> Array2<f64> {
        self.delta2_star.mapv(f64::sqrt)
    }

    fn site_index(&self, site: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == site)
    }
}

fn err(msg: impl Into<String>) -> Error {
    Error::Harmonize(msg.into())
}

pub fn fit_combat(
    dataset: &VoxelDataset,
    design: &DesignMatrix,
    eb: bool,
    tol: f64,
    max_iter: usize,
) -> Result<CombatFit> {
    let layout = dataset.layout();
    let y = dataset.values();
    let (n, v) = y.dim();
    let s = layout.n_sites();
    let k = design.n_columns();
    if design.values.nrows() != n {
        return Err(err(format!("design has {} rows for {n} samples", design.values.nrows())));
    }
    if let Some((i, &c)) = layout.counts().iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(err(format!(
            "site {:?} has {c} image(s); ComBat needs at least 2 per site",
            layout.sites()[i]
        )));
    }
    if n <= k + s {
        return Err(err(format!(
            "not estimable: N = {n} must exceed K + S = {k} + {s}"
        )));
    }
    if eb && !(tol > 0.0 && max_iter >= 1) {
        return Err(err("EB needs a positive tolerance and at least one iteration"));
    }

    // [site indicators | covariates]; the intercept is implied by the indicators.
    let mut full = Array2::zeros((n, s + k));
    for (row, &site) in layout.membership().iter().enumerate() {
        full[[row, site]] = 1.0;
    }
    full.slice_mut(ndarray::s![.., s..]).assign(&design.values);
    let coef = least_squares(&full, y).ok_or_else(|| {
        err("not estimable: covariates are collinear with the site indicators")
    })?;

    let weights: Vec<f64> = layout.counts().iter().map(|&c| c as f64 / n as f64).collect();
    let mut alpha_hat = Array1::<f64>::zeros(v);
    for (i, w) in weights.iter().enumerate() {
        alpha_hat.scaled_add(*w, &coef.row(i));
    }
    let beta_hat = coef.slice(ndarray::s![s.., ..]).to_owned();

    let resid = y - &full.dot(&coef);
    let sigma_hat = resid
        .map_axis(Axis(0), |col| {
            (col.iter().map(|r| r * r).sum::<f64>() / n as f64).max(VARIANCE_FLOOR)
        })
        .mapv(f64::sqrt);

    let stand_mean = standardization_mean(&alpha_hat, &beta_hat, &design.values);
    let mut z = y - &stand_mean;
    z /= &sigma_hat;

    let groups = layout.groups();
    let mut gamma_hat = Array2::<f64>::zeros((s, v));
    let mut delta2_hat = Array2::<f64>::zeros((s, v));
    for (i, rows) in groups.iter().enumerate() {
        let sub = z.select(Axis(0), rows);
        let mean = sub.mean_axis(Axis(0)).unwrap();
        let var = sub.var_axis(Axis(0), 0.0).mapv(|d| d.max(VARIANCE_FLOOR));
        gamma_hat.row_mut(i).assign(&mean);
        delta2_hat.row_mut(i).assign(&var);
    }

    let (gamma_star, delta2_star, priors, diagnostics) = if eb {
        if v < 2 {
            return Err(err("empirical Bayes needs at least 2 voxels to estimate priors"));
        }
        let priors: Vec<SitePrior> = (0..s)
            .map(|i| site_prior(gamma_hat.row(i).as_slice().unwrap(), delta2_hat.row(i).as_slice().unwrap()))
            .collect();
        let mut gamma_star = Array2::zeros((s, v));
        let mut delta2_star = Array2::zeros((s, v));
        let mut diagnostics = EbDiagnostics::default();
        for (i, prior) in priors.iter().enumerate() {
            let n_i = layout.counts()[i] as f64;
            if let Some(a) = prior.a_prior {
                if n_i / 2.0 + a - 1.0 <= 0.0 {
                    return Err(err(format!(
                        "site {:?}: EB denominator n/2 + a - 1 is not positive",
                        layout.sites()[i]
                    )));
                }
            }
            let g_row = gamma_hat.row(i);
            let d_row = delta2_hat.row(i);
            let solved: Vec<EbVoxel> = (0..v)
                .into_par_iter()
                .map(|col| eb_voxel(g_row[col], d_row[col], n_i, prior, tol, max_iter))
                .collect();
            let mut worst: Option<(usize, f64)> = None;
            for (col, sol) in solved.iter().enumerate() {
                gamma_star[[i, col]] = sol.gamma;
                delta2_star[[i, col]] = sol.delta2;
                diagnostics.max_iterations = diagnostics.max_iterations.max(sol.iterations);
                if sol.violated_monotone {
                    diagnostics.monotone_violations += 1;
                }
                if !sol.converged && worst.is_none_or(|(_, c)| sol.last_change > c) {
                    worst = Some((col, sol.last_change));
                }
            }
            if let Some((col, change)) = worst {
                return Err(err(format!(
                    "EB did not converge after {max_iter} iterations; worst voxel {} (site {:?}, relative change {change:e})",
                    dataset.mask().voxel_index()[col],
                    layout.sites()[i]
                )));
            }
        }
        (gamma_star, delta2_star, priors, diagnostics)
    } else {
        (gamma_hat.clone(), delta2_hat.clone(), Vec::new(), EbDiagnostics::default())
    };

    Ok(CombatFit {
        sites: layout.sites().to_vec(),
        counts: layout.counts().to_vec(),
        design_columns: design.columns.clone(),
        alpha_hat,
        beta_hat,
        sigma_hat,
        gamma_hat,
        delta2_hat,
        gamma_star,
        delta2_star,
        eb_used: eb,
        priors,
        diagnostics,
    })
}

fn standardization_mean(alpha: &Array1<f64>, beta: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut m = if beta.nrows() == 0 {
        Array2::zeros((x.nrows(), alpha.len()))
    } else {
        x.dot(beta)
    };
    m += alpha;
    m
}

fn sample_mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn site_prior(gamma_hat: &[f64], delta2_hat: &[f64]) -> SitePrior {
    let (gamma_bar, tau2) = sample_mean_var(gamma_hat);
    let (m, s2) = sample_mean_var(delta2_hat);
    let (a_prior, b_prior) = if s2 > 0.0 && (2.0 * s2 + m * m) / s2 < f64::MAX.sqrt() {
        (
            Some((2.0 * s2 + m * m) / s2),
            Some((m * s2 + m * m * m) / s2),
        )
    } else {
        (None, None)
    };
    SitePrior {
        gamma_bar,
        tau2,
        delta2_mean: m,
        delta2_var: s2,
        a_prior,
        b_prior,
    }
}

struct EbVoxel {
    gamma: f64,
    delta2: f64,
    iterations: usize,
    converged: bool,
    last_change: f64,
    violated_monotone: bool,
}

fn eb_voxel(g_hat: f64, d2_hat: f64, n: f64, prior: &SitePrior, tol: f64, max_iter: usize) -> EbVoxel {
    let mut g_old = g_hat;
    let mut d_old = d2_hat;
    let mut prev_change = f64::INFINITY;
    let mut violated = false;
    let mut change = f64::INFINITY;
    for iter in 1..=max_iter {
        let g_new = (n * prior.tau2 * g_hat + d_old * prior.gamma_bar) / (n * prior.tau2 + d_old);
        // Σ_j (z_j − g)² = n·(δ̂² + (γ̂ − g)²) with δ̂² the population variance.
        let sum2 = n * (d2_hat + (g_hat - g_new) * (g_hat - g_new));
        let d_new = match (prior.a_prior, prior.b_prior) {
            (Some(a), Some(b)) => (b + 0.5 * sum2) / (n / 2.0 + a - 1.0),
            _ => prior.delta2_mean,
        }
        .max(VARIANCE_FLOOR);
        change = ((g_new - g_old).abs() / g_old.abs().max(LOCATION_CHANGE_FLOOR))
            .max((d_new - d_old).abs() / d_old);
        if iter > WARMUP_ITERATIONS && change > prev_change {
            violated = true;
        }
        prev_change = change;
        g_old = g_new;
        d_old = d_new;
        if change < tol {
            return EbVoxel {
                gamma: g_new,
                delta2: d_new,
                iterations: iter,
                converged: true,
                last_change: change,
                violated_monotone: violated,
            };
        }
    }
    EbVoxel {
        gamma: g_old,
        delta2: d_old,
        iterations: max_iter,
        converged: false,
        last_change: change,
        violated_monotone: violated,
    }
}

/// y* = σ̂·(z − γ*)/δ* + α̂ + Xβ̂, with z the standardized data.
pub fn apply_combat(fit: &CombatFit, dataset: &VoxelDataset, design: &DesignMatrix) -> Result<Array2<f64>> {
    if design.columns != fit.design_columns {
        return Err(err(format!(
            "design mismatch: model was fit with columns {:?}, got {:?}",
            fit.design_columns.iter().map(|c| &c.name).collect::<Vec<_>>(),
            design.columns.iter().map(|c| &c.name).collect::<Vec<_>>()
        )));
    }
    let y = dataset.values();
    if design.values.nrows() != y.nrows() {
        return Err(err("design rows do not match the dataset"));
    }
    if y.ncols() != fit.alpha_hat.len() {
        return Err(err(format!(
            "model has {} voxels, dataset has {}",
            fit.alpha_hat.len(),
            y.ncols()
        )));
    }
    let site_map = dataset
        .layout()
        .sites()
        .iter()
        .map(|s| {
            fit.site_index(s)
                .ok_or_else(|| err(format!("site {s:?} is not in the ComBat fit")))
        })
        .collect::<Result<Vec<_>>>()?;
    let delta_star = fit.delta_star();
    let stand_mean = standardization_mean(&fit.alpha_hat, &fit.beta_hat, &design.values);
    let mut out = Array2::zeros(y.dim());
    for (row, &local) in dataset.layout().membership().iter().enumerate() {
        let i = site_map[local];
        Zip::from(out.row_mut(row))
            .and(y.row(row))
            .and(stand_mean.row(row))
            .and(&fit.sigma_hat)
            .and(fit.gamma_star.row(i))
            .and(delta_star.row(i))
            .for_each(|o, &yv, &m, &sig, &g, &d| {
                let z = (yv - m) / sig;
                *o = sig * (z - g) / d + m;
            });
    }
    check_finite(&out, "ComBat")?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CombatMethod;

impl HarmonizationMethod for CombatMethod {
    fn fit(
        &self,
        dataset: &VoxelDataset,
        design: &DesignMatrix,
        options: &FitOptions,
    ) -> Result<Box<dyn FittedHarmonizer>> {
        Ok(Box::new(fit_combat(
            dataset,
            design,
            options.eb,
            options.tol,
            options.max_iter,
        )?))
    }

    fn load(&self, params: &serde_json::Value) -> Result<Box<dyn FittedHarmonizer>> {
        let fit: CombatFit = serde_json::from_value(params.clone())
            .map_err(|e| err(format!("bad ComBat parameters: {e}")))?;
        let (s, v) = (fit.sites.len(), fit.alpha_hat.len());
        if fit.gamma_star.dim() != (s, v)
            || fit.delta2_star.dim() != (s, v)
            || fit.sigma_hat.len() != v
            || fit.beta_hat.dim() != (fit.design_columns.len(), v)
        {
            return Err(err("ComBat parameter shapes disagree"));
        }
        Ok(Box::new(fit))
    }
}

impl FittedHarmonizer for CombatFit {
    fn apply(&self, dataset: &VoxelDataset, design: &DesignMatrix) -> Result<Array2<f64>> {
        apply_combat(self, dataset, design)
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("finite parameters serialize")
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Mask, VolumeGeometry};
    use crate::table::{SampleRow, SampleTable};
    use ndarray::array;
    use std::collections::BTreeMap;

    fn dataset(values: Array2<f64>, sites: &[&str]) -> VoxelDataset {
        let rows = sites
            .iter()
            .enumerate()
            .map(|(i, s)| SampleRow {
                image_id: format!("i{i}"),
                path: format!("i{i}").into(),
                site: s.to_string(),
                covariates: BTreeMap::new(),
            })
            .collect();
        let g = VolumeGeometry::with_spacing([values.ncols(), 1, 1], [1.0; 3]).unwrap();
        VoxelDataset::new(values, Mask::full(g).unwrap(), SampleTable::new(rows, vec![]).unwrap()).unwrap()
    }

    #[test]
    fn two_site_hand_example() {
        let ds = dataset(array![[1.0], [3.0], [5.0], [7.0]], &["A", "A", "B", "B"]);
        let design = DesignMatrix::empty(4);
        let fit = fit_combat(&ds, &design, false, 1e-4, 100).unwrap();
        assert!((fit.alpha_hat[0] - 4.0).abs() < 1e-12);
        assert!((fit.sigma_hat[0] - 1.0).abs() < 1e-12);
        assert!((fit.gamma_hat[[0, 0]] + 2.0).abs() < 1e-12);
        assert!((fit.gamma_hat[[1, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(fit.gamma_star, fit.gamma_hat);
        assert_eq!(fit.delta2_star, fit.delta2_hat);
        let out = apply_combat(&fit, &ds, &design).unwrap();
        for (got, want) in out.iter().zip([3.0, 5.0, 3.0, 5.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_site_is_identity() {
        let ds = dataset(
            array![[1.0, 10.0], [2.0, 12.0], [4.0, 9.0], [7.0, 15.0], [3.0, 11.0]],
            &["A"; 5],
        );
        let design = DesignMatrix::empty(5);
        let fit = fit_combat(&ds, &design, false, 1e-4, 100).unwrap();
        assert!(fit.gamma_star.iter().all(|g| g.abs() < 1e-12));
        let out = apply_combat(&fit, &ds, &design).unwrap();
        for (a, b) in out.iter().zip(ds.values()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn precondition_errors() {
        let ds = dataset(array![[1.0], [3.0], [5.0]], &["A", "A", "B"]);
        let err = fit_combat(&ds, &DesignMatrix::empty(3), false, 1e-4, 100).unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");

        let ds = dataset(array![[1.0], [3.0], [5.0], [7.0]], &["A", "A", "B", "B"]);
        let mut design = DesignMatrix::empty(4);
        design.values = array![[1.0], [2.0], [3.0], [4.0]];
        design.columns = vec![DesignColumn {
            name: "age".into(),
            kind: crate::design::ColumnKind::Continuous,
        }];
        // N = 4 is not > K + S = 3? It is; make it collinear with the sites instead.
        design.values = array![[0.0], [0.0], [1.0], [1.0]];
        let err = fit_combat(&ds, &design, false, 1e-4, 100).unwrap_err();
        assert!(err.to_string().contains("not estimable"), "{err}");

        let ds3 = dataset(array![[1.0], [3.0], [5.0], [7.0]], &["A", "A", "B", "B"]);
        let mut wide = DesignMatrix::empty(4);
        wide.values = array![[1.0, 0.0], [2.0, 1.0], [3.0, 0.0], [5.0, 1.0]];
        wide.columns = vec![design.columns[0].clone(), design.columns[0].clone()];
        let err = fit_combat(&ds3, &wide, false, 1e-4, 100).unwrap_err();
        assert!(err.to_string().contains("N = 4 must exceed"), "{err}");
    }

    #[test]
    fn design_mismatch_on_apply() {
        let ds = dataset(array![[1.0], [3.0], [5.0], [7.0], [6.0]], &["A", "A", "B", "B", "B"]);
        let fit = fit_combat(&ds, &DesignMatrix::empty(5), false, 1e-4, 100).unwrap();
        let mut other = DesignMatrix::empty(5);
        other.values = Array2::zeros((5, 1));
        other.columns = vec![DesignColumn {
            name: "age".into(),
            kind: crate::design::ColumnKind::Continuous,
        }];
        assert!(apply_combat(&fit, &ds, &other).is_err());
    }

    #[test]
    fn eb_shrinks_toward_site_prior_mean() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sites: Vec<&str> = (0..30).map(|i| ["A", "B", "C"][i % 3]).collect();
        let values = Array2::from_shape_fn((30, 200), |(n, v)| {
            let shift = [0.3, -0.1, 0.0][n % 3] * (1.0 + (v % 7) as f64 * 0.1);
            shift + rng.random_range(-1.0..1.0)
        });
        let ds = dataset(values, &sites);
        let fit = fit_combat(&ds, &DesignMatrix::empty(30), true, 1e-6, 200).unwrap();
        assert!(fit.eb_used);
        let mut ok = 0;
        let total = 3 * 200;
        for i in 0..3 {
            let bar = fit.priors[i].gamma_bar;
            for v in 0..200 {
                if (fit.gamma_star[[i, v]] - bar).abs() <= (fit.gamma_hat[[i, v]] - bar).abs() + 1e-12 {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
        assert!(fit.delta2_star.iter().all(|&d| d > 0.0));

        let doc = serde_json::to_value(&fit).unwrap();
        let back = CombatMethod.load(&doc).unwrap();
        let back = back.as_any().downcast_ref::<CombatFit>().unwrap();
        assert_eq!(back, &fit);
    }

    #[test]
    fn non_convergence_reports_voxel() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sites: Vec<&str> = (0..12).map(|i| ["A", "B"][i % 2]).collect();
        let values = Array2::from_shape_fn((12, 20), |(n, _)| n as f64 % 2.0 + rng.random_range(0.0..1.0));
        let ds = dataset(values, &sites);
        let err = fit_combat(&ds, &DesignMatrix::empty(12), true, 1e-15, 1).unwrap_err();
        assert!(err.to_string().contains("worst voxel"), "{err}");
    }
}
