use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Comparison, Eta2Histogram, ReportSummary, SiteEffectReport};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nifti::{write_volume, ElementType, Volume};

pub const MAP_FILES: [&str; 3] = ["sig_F.nii.gz", "eta2.nii.gz", "t_fraction.nii.gz"];

/// Shortest round-trip text, switching to exponent form for very small or large magnitudes.
fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn emit_maps(report: &SiteEffectReport, mask: &Mask, output_dir: impl AsRef<Path>) -> Result<()> {
    if mask.len() != report.n_voxels() || mask.voxel_index() != report.voxel_index.as_slice() {
        return Err(Error::Report(format!(
            "report covers {} voxels but the mask has {}",
            report.n_voxels(),
            mask.len()
        )));
    }
    let dir = output_dir.as_ref();
    let sig: Vec<f64> = report.voxels.iter().map(|v| if v.significant { 1.0 } else { 0.0 }).collect();
    let eta: Vec<f64> = report.voxels.iter().map(|v| v.eta2).collect();
    let maps = [(MAP_FILES[0], sig), (MAP_FILES[1], eta), (MAP_FILES[2], report.t_fraction.clone())];
    for (name, values) in maps {
        let volume = Volume::new(mask.geometry().clone(), mask.scatter(&values, 0.0))?
            .with_description(name.trim_end_matches(".nii.gz"));
        write_volume(&volume, dir.join(name), ElementType::Float32)?;
    }
    Ok(())
}

pub fn emit_tables(report: &SiteEffectReport, output_dir: impl AsRef<Path>) -> Result<()> {
    let dir = output_dir.as_ref();
    let mut anova = String::from("voxel_index,F,p,significant,eta2\n");
    for (v, idx) in report.voxels.iter().zip(&report.voxel_index) {
        writeln!(anova, "{idx},{},{},{},{}", num(v.f), num(v.p), v.significant as u8, num(v.eta2)).unwrap();
    }
    write_text(&dir.join("anova.csv"), &anova)?;

    let mut pairwise = String::from("voxel_index,site_a,site_b,t,p,significant,hedges_g\n");
    for p in &report.pairs {
        writeln!(
            pairwise,
            "{},{},{},{},{},{},{}",
            report.voxel_index[p.voxel],
            report.sites[p.site_a],
            report.sites[p.site_b],
            num(p.t),
            num(p.p),
            p.significant as u8,
            p.hedges_g.map(num).unwrap_or_default()
        )
        .unwrap();
    }
    write_text(&dir.join("pairwise.csv"), &pairwise)?;

    let mut json = serde_json::to_string_pretty(&report.summary).expect("summary serializes");
    json.push('\n');
    write_text(&dir.join("summary.json"), &json)
}

pub fn write_eta2_histogram(hist: &Eta2Histogram, output_dir: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (k, count) in hist.counts.iter().enumerate() {
        writeln!(out, "{},{},{count}", hist.edges[k], hist.edges[k + 1]).unwrap();
    }
    write_text(&output_dir.as_ref().join("eta2_hist.csv"), &out)
}

pub fn write_comparison(comparison: &Comparison, output_dir: impl AsRef<Path>) -> Result<()> {
    write_text(&output_dir.as_ref().join("comparison.csv"), &comparison.to_csv())
}

pub fn read_summary(report_dir: impl AsRef<Path>) -> Result<ReportSummary> {
    let path = report_dir.as_ref().join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: ReportSummary = crate::config::parse_json(&path, &text)?;
    if summary.v == 0 || summary.s < 2 {
        return Err(Error::Report(format!("{}: V and S are out of range", path.display())));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::super::{eta2_distribution, generate_report};
    use super::*;
    use crate::mask::VolumeGeometry;
    use crate::nifti::read_volume;
    use crate::table::{SampleRow, SampleTable};
    use crate::VoxelDataset;
    use ndarray::Array2;
    use std::collections::BTreeMap;

    fn masked_dataset() -> VoxelDataset {
        let g = VolumeGeometry::with_spacing([3, 3, 2], [1.0; 3]).unwrap();
        let flags: Vec<bool> = (0..18).map(|i| i % 3 != 1).collect();
        let mask = Mask::from_flags(g, flags).unwrap();
        let v = mask.len();
        let values = Array2::from_shape_fn((8, v), |(n, c)| {
            let site = n % 2;
            (if c < 4 { site as f64 * 10.0 } else { 0.0 }) + ((n * 5 + c * 3) % 7) as f64 * 0.3
        });
        let rows = (0..8)
            .map(|i| SampleRow {
                image_id: format!("i{i}"),
                path: format!("i{i}").into(),
                site: ["A", "B"][i % 2].into(),
                covariates: BTreeMap::new(),
            })
            .collect();
        VoxelDataset::new(values, mask, SampleTable::new(rows, vec![]).unwrap()).unwrap()
    }

    #[test]
    fn maps_and_tables_round_trip() {
        let ds = masked_dataset();
        let report = generate_report(&ds, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_maps(&report, ds.mask(), dir.path()).unwrap();
        emit_tables(&report, dir.path()).unwrap();
        write_eta2_histogram(&eta2_distribution(&report, 10).unwrap(), dir.path()).unwrap();

        let eta = read_volume(dir.path().join("eta2.nii.gz")).unwrap();
        for (k, &idx) in ds.mask().voxel_index().iter().enumerate() {
            assert_eq!(eta.data[idx], report.voxels[k].eta2 as f32 as f64);
        }
        for name in MAP_FILES {
            let vol = read_volume(dir.path().join(name)).unwrap();
            for (i, &inside) in ds.mask().flags().iter().enumerate() {
                if !inside {
                    assert_eq!(vol.data[i], 0.0);
                }
            }
        }
        let anova = fs::read_to_string(dir.path().join("anova.csv")).unwrap();
        assert_eq!(anova.lines().count(), ds.n_voxels() + 1);
        let pairwise = fs::read_to_string(dir.path().join("pairwise.csv")).unwrap();
        assert_eq!(pairwise.lines().count(), report.pairs.len() + 1);
        assert_eq!(read_summary(dir.path()).unwrap(), report.summary);
        let hist = fs::read_to_string(dir.path().join("eta2_hist.csv")).unwrap();
        assert_eq!(hist.lines().count(), 11);
    }

    #[test]
    fn mask_mismatch() {
        let ds = masked_dataset();
        let report = generate_report(&ds, 0.05).unwrap();
        let other = Mask::full(ds.geometry().clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_maps(&report, &other, dir.path()).is_err());
    }

    #[test]
    fn number_format() {
        assert_eq!(num(0.0), "0");
        assert_eq!(num(0.25), "0.25");
        assert_eq!(num(1e-300), "1e-300");
        assert_eq!(num(f64::INFINITY), "inf");
    }
}
