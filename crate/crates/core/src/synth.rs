//! Deterministic synthetic multi-site datasets with known site effects.
//!
//! Each masked voxel v of image j at site i is
//!
//! ```text
//! y = gain_i · (α_v + β_age,v·(age − age_mid) + β_sex·[sex = M] + γ_iv + δ_iv·ε) + offset_i
//! ```
//!
//! with ε ~ N(0, noise_sd²). γ and δ are non-trivial only on the affected
//! voxels; `gain` and `offset` act on whole images and default to 1 and 0.
//!
//! Randomness comes from ChaCha8 seeded with `seed`. Every voxel draws from
//! its own stream (the stream id is its linear volume index), so parallel
//! generation reproduces the serial result exactly. Study-level draws use
//! streams counted down from `u64::MAX`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::VoxelDataset;
use crate::error::{Error, Result};
use crate::mask::{Mask, VolumeGeometry};
use crate::nifti::{write_volume, ElementType, Volume};
use crate::table::{
    write_sample_table, CovariateKind, CovariateSpec, CovariateValue, SampleRow, SampleTable,
};

const ALPHA_RANGE: (f64, f64) = (0.2, 0.7);
const ALPHA_GRID_FACTOR: usize = 4;
const VOXEL_SIZE: f64 = 2.0;
const STREAM_ALPHA: u64 = u64::MAX;
const STREAM_AFFECTED: u64 = u64::MAX - 1;
const STREAM_SUBJECTS: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    Full,
    /// Centered box spanning this fraction of every axis.
    CenteredBox(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub label: String,
    pub n_images: usize,
    pub gamma_scale: f64,
    pub delta_scale: f64,
    #[serde(default)]
    pub global_offset: f64,
    #[serde(default = "one")]
    pub global_gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateEffects {
    pub age_range: [f64; 2],
    /// Per-voxel age slopes are drawn from N(0, age_effect²).
    pub age_effect: f64,
    /// Shift of male relative to female images, the same at every voxel.
    pub sex_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub mask_shape: MaskShape,
    pub sites: Vec<SiteSpec>,
    pub covariates: CovariateEffects,
    pub noise_sd: f64,
    pub affected_fraction: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Synth(msg));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if let MaskShape::CenteredBox(f) = self.mask_shape {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("centered_box fraction must lie in (0, 1], got {f}"));
            }
        }
        if self.sites.is_empty() {
            return bad("at least one site is required".into());
        }
        let total: usize = self.sites.iter().map(|s| s.n_images).sum();
        if total < 4 {
            return bad(format!("need at least 4 images in total, got {total}"));
        }
        for (k, site) in self.sites.iter().enumerate() {
            if site.label.is_empty() || site.label.contains(['/', '\\', ',']) {
                return bad(format!("site {k} has an unusable label {:?}", site.label));
            }
            if self.sites[..k].iter().any(|s| s.label == site.label) {
                return bad(format!("site label {:?} is repeated", site.label));
            }
            if site.n_images == 0 {
                return bad(format!("site {:?} has no images", site.label));
            }
            if !(site.gamma_scale >= 0.0 && site.gamma_scale.is_finite()) {
                return bad(format!("site {:?}: gamma_scale must be >= 0", site.label));
            }
            if !(site.delta_scale > 0.0 && site.delta_scale.is_finite()) {
                return bad(format!("site {:?}: delta_scale must be > 0", site.label));
            }
            if !(site.global_gain > 0.0 && site.global_gain.is_finite() && site.global_offset.is_finite()) {
                return bad(format!("site {:?}: global_gain must be > 0 and global_offset finite", site.label));
            }
        }
        let c = &self.covariates;
        if !(c.age_range[0].is_finite() && c.age_range[1].is_finite() && c.age_range[0] <= c.age_range[1]) {
            return bad(format!("age_range must be an ordered finite pair, got {:?}", c.age_range));
        }
        if !(c.age_effect >= 0.0 && c.age_effect.is_finite() && c.sex_effect.is_finite()) {
            return bad("age_effect must be >= 0 and sex_effect finite".into());
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be > 0, got {}", self.noise_sd));
        }
        if !(0.0..=1.0).contains(&self.affected_fraction) {
            return bad(format!("affected_fraction must lie in [0, 1], got {}", self.affected_fraction));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.sites.iter().map(|s| s.n_images).sum()
    }
}

/// Generative parameters over the masked voxels (columns follow mask order).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Linear volume indices, ascending.
    pub affected_voxels: Vec<usize>,
    pub affected: Vec<bool>,
    /// S×V site shifts; zero outside the affected voxels.
    pub gamma: Array2<f64>,
    /// S×V site scale factors; one outside the affected voxels.
    pub delta: Array2<f64>,
    /// K×V covariate effects for the columns in `covariate_columns`.
    pub beta: Array2<f64>,
    pub covariate_columns: Vec<String>,
    pub alpha: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    /// (image id, volume) in table order.
    pub volumes: Vec<(String, Volume)>,
    pub table: SampleTable,
    pub mask: Mask,
    pub truth: GroundTruth,
}

impl SynthOutput {
    pub fn dataset(&self) -> Result<VoxelDataset> {
        let rows: Vec<Vec<f64>> = self.volumes.iter().map(|(_, v)| self.mask.gather(&v.data)).collect();
        let values = Array2::from_shape_fn((rows.len(), self.mask.len()), |(n, k)| rows[n][k]);
        VoxelDataset::new(values, self.mask.clone(), self.table.clone())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn build_mask(spec: &SynthSpec, geometry: VolumeGeometry) -> Result<Mask> {
    let frac = match spec.mask_shape {
        MaskShape::Full => return Mask::full(geometry),
        MaskShape::CenteredBox(f) => f,
    };
    let bounds: Vec<(usize, usize)> = spec
        .dims
        .iter()
        .map(|&d| {
            let len = ((d as f64 * frac).round() as usize).clamp(1, d);
            let lo = (d - len) / 2;
            (lo, lo + len)
        })
        .collect();
    let flags = (0..geometry.n_voxels())
        .map(|i| {
            let c = geometry.coords(i);
            (0..3).all(|a| (bounds[a].0..bounds[a].1).contains(&c[a]))
        })
        .collect();
    Mask::from_flags(geometry, flags)
}

/// Low-frequency α: uniform values on a coarse lattice, trilinearly interpolated.
fn alpha_field(spec: &SynthSpec, geometry: &VolumeGeometry) -> Vec<f64> {
    let grid: [usize; 3] = spec.dims.map(|d| d.div_ceil(ALPHA_GRID_FACTOR) + 1);
    let mut r = rng(spec.seed, STREAM_ALPHA);
    let coarse: Vec<f64> = (0..grid.iter().product::<usize>())
        .map(|_| r.random_range(ALPHA_RANGE.0..ALPHA_RANGE.1))
        .collect();
    let at = |x: usize, y: usize, z: usize| coarse[x + grid[0] * (y + grid[1] * z)];
    (0..geometry.n_voxels())
        .map(|i| {
            let c = geometry.coords(i);
            let mut base = [0usize; 3];
            let mut frac = [0.0f64; 3];
            for a in 0..3 {
                base[a] = c[a] / ALPHA_GRID_FACTOR;
                frac[a] = (c[a] % ALPHA_GRID_FACTOR) as f64 / ALPHA_GRID_FACTOR as f64;
            }
            let mut value = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut p = [0usize; 3];
                for a in 0..3 {
                    let hi = (corner >> a) & 1 == 1;
                    p[a] = base[a] + hi as usize;
                    w *= if hi { frac[a] } else { 1.0 - frac[a] };
                }
                value += w * at(p[0], p[1], p[2]);
            }
            value
        })
        .collect()
}

struct Subject {
    site: usize,
    age: f64,
    male: bool,
}

struct VoxelDraw {
    beta_age: f64,
    gamma: Vec<f64>,
    values: Vec<f64>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let geometry = VolumeGeometry::with_spacing(spec.dims, [VOXEL_SIZE; 3])?;
    let mask = build_mask(spec, geometry.clone())?;
    let v = mask.len();
    let s = spec.sites.len();
    let alpha_full = alpha_field(spec, &geometry);
    let alpha: Array1<f64> = mask.voxel_index().iter().map(|&i| alpha_full[i]).collect();

    let n_affected = (spec.affected_fraction * v as f64).round() as usize;
    let mut affected_positions = sample_indices(&mut rng(spec.seed, STREAM_AFFECTED), v, n_affected).into_vec();
    affected_positions.sort_unstable();
    let mut affected = vec![false; v];
    for &k in &affected_positions {
        affected[k] = true;
    }

    let [age_lo, age_hi] = spec.covariates.age_range;
    let age_mid = 0.5 * (age_lo + age_hi);
    let mut r = rng(spec.seed, STREAM_SUBJECTS);
    let subjects: Vec<Subject> = spec
        .sites
        .iter()
        .enumerate()
        .flat_map(|(i, site)| (0..site.n_images).map(move |_| i))
        .map(|site| {
            let age = if age_hi > age_lo { r.random_range(age_lo..age_hi) } else { age_lo };
            Subject { site, age, male: r.random_bool(0.5) }
        })
        .collect();

    let draws: Vec<VoxelDraw> = (0..v)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(spec.seed, mask.voxel_index()[k] as u64);
            let beta_age = spec.covariates.age_effect * normal(&mut r);
            let gamma: Vec<f64> = spec.sites.iter().map(|site| site.gamma_scale * normal(&mut r)).collect();
            let values = subjects
                .iter()
                .map(|subj| {
                    let site = &spec.sites[subj.site];
                    let eps = spec.noise_sd * normal(&mut r);
                    let (g, d) = if affected[k] { (gamma[subj.site], site.delta_scale) } else { (0.0, 1.0) };
                    let sex = if subj.male { spec.covariates.sex_effect } else { 0.0 };
                    let y = alpha[k] + beta_age * (subj.age - age_mid) + sex + g + d * eps;
                    (site.global_gain * y + site.global_offset) as f32 as f64
                })
                .collect();
            VoxelDraw { beta_age, gamma, values }
        })
        .collect();

    let mut gamma = Array2::zeros((s, v));
    let mut delta = Array2::ones((s, v));
    let mut beta = Array2::zeros((2, v));
    for (k, d) in draws.iter().enumerate() {
        beta[[0, k]] = d.beta_age;
        beta[[1, k]] = spec.covariates.sex_effect;
        if affected[k] {
            for i in 0..s {
                gamma[[i, k]] = d.gamma[i];
                delta[[i, k]] = spec.sites[i].delta_scale;
            }
        }
    }

    let mut counters = vec![0usize; s];
    let mut rows = Vec::with_capacity(subjects.len());
    let mut volumes = Vec::with_capacity(subjects.len());
    for (n, subj) in subjects.iter().enumerate() {
        let label = &spec.sites[subj.site].label;
        let image_id = format!("images/{label}_{:03}.nii.gz", counters[subj.site]);
        counters[subj.site] += 1;
        let values: Vec<f64> = draws.iter().map(|d| d.values[n]).collect();
        let volume = Volume::new(geometry.clone(), mask.scatter(&values, 0.0))?;
        let mut covariates = BTreeMap::new();
        covariates.insert("age".to_string(), CovariateValue::Continuous(subj.age));
        covariates.insert(
            "sex".to_string(),
            CovariateValue::Categorical(if subj.male { "M" } else { "F" }.to_string()),
        );
        rows.push(SampleRow {
            image_id: image_id.clone(),
            path: image_id.clone().into(),
            site: label.clone(),
            covariates,
        });
        volumes.push((image_id, volume));
    }
    let table = SampleTable::new(
        rows,
        vec![
            CovariateSpec { name: "age".into(), kind: CovariateKind::Continuous },
            CovariateSpec { name: "sex".into(), kind: CovariateKind::Categorical },
        ],
    )?;

    let affected_voxels = affected_positions.iter().map(|&k| mask.voxel_index()[k]).collect();
    Ok(SynthOutput {
        spec: spec.clone(),
        volumes,
        table,
        mask,
        truth: GroundTruth {
            affected_voxels,
            affected,
            gamma,
            delta,
            beta,
            covariate_columns: vec!["age".into(), "sex_M".into()],
            alpha,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SiteTruth {
    pub gamma_scale: f64,
    pub delta_scale: f64,
    pub global_offset: f64,
    pub global_gain: f64,
    pub n_images: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RangeSummary {
    pub min: f64,
    pub max: f64,
}

/// Serialized form of the ground truth in a bundle.
#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthDocument {
    pub seed: u64,
    pub affected_voxels: Vec<usize>,
    pub per_site: BTreeMap<String, SiteTruth>,
    pub alpha_summary: RangeSummary,
}

impl GroundTruthDocument {
    pub fn from_output(out: &SynthOutput) -> Self {
        let per_site = out
            .spec
            .sites
            .iter()
            .map(|s| {
                (
                    s.label.clone(),
                    SiteTruth {
                        gamma_scale: s.gamma_scale,
                        delta_scale: s.delta_scale,
                        global_offset: s.global_offset,
                        global_gain: s.global_gain,
                        n_images: s.n_images,
                    },
                )
            })
            .collect();
        let alpha = &out.truth.alpha;
        Self {
            seed: out.spec.seed,
            affected_voxels: out.truth.affected_voxels.clone(),
            per_site,
            alpha_summary: RangeSummary {
                min: alpha.iter().copied().fold(f64::INFINITY, f64::min),
                max: alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            },
        }
    }
}

/// Writes `images/*.nii.gz`, `samples.csv`, `mask.nii.gz`, and `ground_truth.json` into `dir`.
pub fn write_synth_bundle(out: &SynthOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    out.volumes
        .par_iter()
        .try_for_each(|(id, vol)| write_volume(vol, dir.join(id), ElementType::Float32))?;
    let ids: Vec<String> = out.volumes.iter().map(|(id, _)| id.clone()).collect();
    write_sample_table(&out.table, &ids, "image", "site", dir.join("samples.csv"))?;
    write_volume(&out.mask.to_volume(), dir.join("mask.nii.gz"), ElementType::Float32)?;
    let path = dir.join("ground_truth.json");
    let mut json = serde_json::to_string_pretty(&GroundTruthDocument::from_output(out)).expect("ground truth serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
