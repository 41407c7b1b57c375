//! Voxel-level statistics: one-way ANOVA, eta-squared, pooled two-sample
//! t-tests, Hedges' g, and Bonferroni thresholds.
//!
//! Sample variances use the n−1 divisor. Degenerate inputs (zero within-group
//! variance) follow fixed conventions instead of producing NaN.

pub mod special;

pub use special::{f_sf, reg_inc_beta, t_sf, t_two_sided};

use crate::error::{Error, Result};

/// Sums of squares below `FLOOR_FACTOR · n · (ε · max|x|)²` are rounding noise
/// and are treated as exact zeros.
const FLOOR_FACTOR: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: u64,
    pub df_within: u64,
    pub p: f64,
    pub ss_between: f64,
    pub ss_within: f64,
    pub ss_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: u64,
    /// Two-sided.
    pub p: f64,
}

/// Count, mean, and centred sum of squares of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub ss: f64,
    pub max_abs: f64,
}

impl GroupSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss = values.iter().map(|x| (x - mean) * (x - mean)).sum();
        let max_abs = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Self { n, mean, ss, max_abs }
    }

    pub fn variance(&self) -> f64 {
        self.ss / (self.n as f64 - 1.0)
    }
}

fn rounding_floor(n: usize, max_abs: f64) -> f64 {
    let e = f64::EPSILON * max_abs;
    FLOOR_FACTOR * n as f64 * e * e
}

/// One-way ANOVA across `groups`.
pub fn oneway_anova(groups: &[&[f64]]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::Stats(format!(
            "one-way ANOVA needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::Stats(format!(
            "group {i} has {} samples; at least 2 are required",
            g.len()
        )));
    }
    let summaries: Vec<GroupSummary> = groups.iter().map(|g| GroupSummary::from_values(g)).collect();
    Ok(anova_from_summaries(&summaries))
}

/// ANOVA from precomputed group summaries; the caller guarantees S ≥ 2 and n_i ≥ 2.
pub fn anova_from_summaries(groups: &[GroupSummary]) -> AnovaResult {
    let n: usize = groups.iter().map(|g| g.n).sum();
    let s = groups.len();
    let grand = groups.iter().map(|g| g.n as f64 * g.mean).sum::<f64>() / n as f64;
    let max_abs = groups.iter().fold(0.0f64, |m, g| m.max(g.max_abs));
    let floor = rounding_floor(n, max_abs);

    let mut ss_between: f64 = groups
        .iter()
        .map(|g| g.n as f64 * (g.mean - grand) * (g.mean - grand))
        .sum();
    let mut ss_within: f64 = groups.iter().map(|g| g.ss).sum();
    if ss_between <= floor {
        ss_between = 0.0;
    }
    if ss_within <= floor {
        ss_within = 0.0;
    }
    let df_between = (s - 1) as u64;
    let df_within = (n - s) as u64;
    let (f, p) = match (ss_within > 0.0, ss_between > 0.0) {
        (true, _) => {
            let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
            (f, f_sf(f, df_between, df_within).expect("valid F arguments"))
        }
        (false, true) => (f64::INFINITY, 0.0),
        (false, false) => (0.0, 1.0),
    };
    AnovaResult {
        f,
        df_between,
        df_within,
        p,
        ss_between,
        ss_within,
        ss_total: ss_between + ss_within,
    }
}

/// Proportion of total variance attributed to group membership.
pub fn eta_squared(anova: &AnovaResult) -> f64 {
    if anova.ss_total > 0.0 {
        (anova.ss_between / anova.ss_total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Pooled-variance two-sample Student's t-test (two-sided).
pub fn pairwise_t(group_i: &[f64], group_j: &[f64]) -> Result<TTestResult> {
    check_pair(group_i, group_j)?;
    Ok(t_from_summaries(
        &GroupSummary::from_values(group_i),
        &GroupSummary::from_values(group_j),
    ))
}

fn check_pair(group_i: &[f64], group_j: &[f64]) -> Result<()> {
    if group_i.len() < 2 || group_j.len() < 2 {
        return Err(Error::Stats(format!(
            "t-test needs at least 2 samples per group, got {} and {}",
            group_i.len(),
            group_j.len()
        )));
    }
    Ok(())
}

fn pooled_variance(a: &GroupSummary, b: &GroupSummary) -> (f64, u64) {
    let df = (a.n + b.n - 2) as u64;
    let ss = a.ss + b.ss;
    let floor = rounding_floor(a.n + b.n, a.max_abs.max(b.max_abs));
    let ss = if ss <= floor { 0.0 } else { ss };
    (ss / df as f64, df)
}

fn means_differ(a: &GroupSummary, b: &GroupSummary) -> bool {
    let diff = (a.mean - b.mean).abs();
    diff > 4.0 * f64::EPSILON * a.max_abs.max(b.max_abs)
}

pub fn t_from_summaries(a: &GroupSummary, b: &GroupSummary) -> TTestResult {
    let (sp2, df) = pooled_variance(a, b);
    if sp2 == 0.0 {
        return if means_differ(a, b) {
            TTestResult {
                t: if a.mean > b.mean { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
            }
        } else {
            TTestResult { t: 0.0, df, p: 1.0 }
        };
    }
    let se = (sp2 * (1.0 / a.n as f64 + 1.0 / b.n as f64)).sqrt();
    let t = (a.mean - b.mean) / se;
    TTestResult {
        t,
        df,
        p: t_two_sided(t, df).expect("valid t arguments"),
    }
}

/// Hedges' g with small-sample factor J = 1 − 3/(4·df − 1).
pub fn hedges_g(group_i: &[f64], group_j: &[f64]) -> Result<f64> {
    check_pair(group_i, group_j)?;
    g_from_summaries(
        &GroupSummary::from_values(group_i),
        &GroupSummary::from_values(group_j),
    )
    .ok_or_else(|| Error::Stats("Hedges' g is undefined for zero pooled variance".into()))
}

/// `None` when the pooled variance is zero.
pub fn g_from_summaries(a: &GroupSummary, b: &GroupSummary) -> Option<f64> {
    let (sp2, df) = pooled_variance(a, b);
    if sp2 == 0.0 {
        return None;
    }
    let j = 1.0 - 3.0 / (4.0 * df as f64 - 1.0);
    Some(j * (a.mean - b.mean) / sp2.sqrt())
}

/// Per-test level alpha/m for m simultaneous tests.
pub fn bonferroni_threshold(alpha: f64, m: u64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Stats(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if m == 0 {
        return Err(Error::Stats("Bonferroni correction needs m >= 1".into()));
    }
    Ok(alpha / m as f64)
}
