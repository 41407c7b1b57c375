//! Site-effect report: voxel-wise ANOVA with Bonferroni correction, eta²,
//! pairwise t-tests with Hedges' g at ANOVA-significant voxels, and a summary
//! that can be compared across harmonization methods.

mod emit;

pub use emit::{
    emit_maps, emit_tables, read_summary, write_comparison, write_eta2_histogram, MAP_FILES,
};

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::VoxelDataset;
use crate::error::{Error, Result};
use crate::stats::{
    anova_from_summaries, bonferroni_threshold, eta_squared, g_from_summaries, t_from_summaries,
    GroupSummary,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelResult {
    pub f: f64,
    pub p: f64,
    pub significant: bool,
    pub eta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResult {
    /// Position within the mask.
    pub voxel: usize,
    pub site_a: usize,
    pub site_b: usize,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
    /// `None` when both sites are constant at this voxel.
    pub hedges_g: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    #[serde(rename = "V")]
    pub v: u64,
    #[serde(rename = "S")]
    pub s: u64,
    #[serde(rename = "P")]
    pub p: u64,
    pub alpha: f64,
    pub f_threshold: f64,
    pub t_threshold: f64,
    #[serde(rename = "n_F")]
    pub n_f: u64,
    #[serde(rename = "f_F")]
    pub f_f: f64,
    /// Null when no voxel passed the ANOVA, so no t-test was run.
    pub n_t: Option<u64>,
    pub f_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteEffectReport {
    pub sites: Vec<String>,
    /// Linear volume index of each masked voxel.
    pub voxel_index: Vec<usize>,
    pub voxels: Vec<VoxelResult>,
    /// Ordered by voxel, then by site pair (a < b, lexicographic).
    pub pairs: Vec<PairResult>,
    pub t_fraction: Vec<f64>,
    pub summary: ReportSummary,
}

impl SiteEffectReport {
    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }
}

pub fn generate_report(dataset: &VoxelDataset, alpha: f64) -> Result<SiteEffectReport> {
    let layout = dataset.layout();
    let s = layout.n_sites();
    if s < 2 {
        return Err(Error::Report(format!("need at least 2 sites, got {s}")));
    }
    if let Some((i, &c)) = layout.counts().iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::Report(format!(
            "site {:?} has {c} image(s); at least 2 are required",
            layout.sites()[i]
        )));
    }
    let v = dataset.n_voxels();
    let n_pairs = s * (s - 1) / 2;
    let f_threshold = bonferroni_threshold(alpha, v as u64).map_err(|e| Error::Report(e.to_string()))?;
    let t_threshold = bonferroni_threshold(alpha, (v * n_pairs) as u64)
        .map_err(|e| Error::Report(e.to_string()))?;

    let groups = layout.groups();
    let values = dataset.values();
    let per_voxel: Vec<(VoxelResult, Vec<PairResult>)> = (0..v)
        .into_par_iter()
        .map(|col| {
            let column = values.column(col);
            let summaries: Vec<GroupSummary> = groups
                .iter()
                .map(|rows| {
                    let xs: Vec<f64> = rows.iter().map(|&r| column[r]).collect();
                    GroupSummary::from_values(&xs)
                })
                .collect();
            let anova = anova_from_summaries(&summaries);
            let significant = anova.p < f_threshold;
            let voxel = VoxelResult {
                f: anova.f,
                p: anova.p,
                significant,
                eta2: eta_squared(&anova),
            };
            let mut pairs = Vec::new();
            if significant {
                pairs.reserve(n_pairs);
                for a in 0..s {
                    for b in a + 1..s {
                        let t = t_from_summaries(&summaries[a], &summaries[b]);
                        pairs.push(PairResult {
                            voxel: col,
                            site_a: a,
                            site_b: b,
                            t: t.t,
                            p: t.p,
                            significant: t.p < t_threshold,
                            hedges_g: g_from_summaries(&summaries[a], &summaries[b]),
                        });
                    }
                }
            }
            (voxel, pairs)
        })
        .collect();

    let mut voxels = Vec::with_capacity(v);
    let mut pairs = Vec::new();
    let mut t_fraction = Vec::with_capacity(v);
    for (voxel, voxel_pairs) in per_voxel {
        let hits = voxel_pairs.iter().filter(|p| p.significant).count();
        t_fraction.push(hits as f64 / n_pairs as f64);
        voxels.push(voxel);
        pairs.extend(voxel_pairs);
    }
    let n_f = voxels.iter().filter(|x| x.significant).count() as u64;
    let n_t = pairs.iter().filter(|p| p.significant).count() as u64;
    let summary = ReportSummary {
        v: v as u64,
        s: s as u64,
        p: n_pairs as u64,
        alpha,
        f_threshold,
        t_threshold,
        n_f,
        f_f: n_f as f64 / v as f64,
        n_t: (n_f > 0).then_some(n_t),
        f_t: if n_f > 0 {
            n_t as f64 / (n_f * n_pairs as u64) as f64
        } else {
            0.0
        },
    };
    Ok(SiteEffectReport {
        sites: layout.sites().to_vec(),
        voxel_index: dataset.mask().voxel_index().to_vec(),
        voxels,
        pairs,
        t_fraction,
        summary,
    })
}

/// Equal-width histogram on [0, 1]; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Eta2Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn eta2_distribution(report: &SiteEffectReport, n_bins: usize) -> Result<Eta2Histogram> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0u64; n_bins];
    for voxel in &report.voxels {
        let bin = ((voxel.eta2 * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let edges = (0..=n_bins).map(|k| k as f64 / n_bins as f64).collect();
    Ok(Eta2Histogram { edges, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub n_f: u64,
    pub f_f: f64,
    pub n_t: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_reports(reports: &[(String, ReportSummary)]) -> Result<Comparison> {
    let Some((first_label, first)) = reports.first() else {
        return Err(Error::Report("nothing to compare".into()));
    };
    for (label, r) in &reports[1..] {
        if r.v != first.v || r.s != first.s {
            return Err(Error::Report(format!(
                "report {label:?} has V = {}, S = {} but {first_label:?} has V = {}, S = {}",
                r.v, r.s, first.v, first.s
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|(label, r)| ComparisonRow {
            label: label.clone(),
            n_f: r.n_f,
            f_f: r.f_f,
            n_t: if r.n_f == 0 { None } else { r.n_t },
        })
        .collect();
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,n_F,f_F,n_t\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{}\n",
                csv_field(&row.label),
                row.n_f,
                row.f_f,
                n_t_text(row.n_t)
            ));
        }
        out
    }
}

fn n_t_text(n_t: Option<u64>) -> String {
    n_t.map_or_else(|| "N/A".to_string(), |n| n.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<width$}  {:>8}  {:>6}  {:>8}", "method", "n_F", "f_F", "n_t")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>8}  {:>6.2}  {:>8}",
                row.label,
                row.n_f,
                row.f_f,
                n_t_text(row.n_t)
            )?;
        }
        Ok(())
    }
}
